"""Article corpus handling: JSONL records, binary image features,
train/validation splitting and the synthetic desk-scale corpus.

The synthetic generator builds a world where the text-image relation is
learnable by construction: topics live as unit directions in word
space, a fixed random linear map carries word space into image-feature
space, and each article's image feature is its topic direction plus a
fingerprint of the article's content tokens plus Gaussian noise.  Word
vectors for the two languages share topic structure while using
disjoint token strings, which emulates aligned multilingual embeddings.
"""

from __future__ import annotations

import json
import os
import string
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .fusion import SOURCES

__all__ = [
    "CorpusError",
    "SampleRecord",
    "load_corpus",
    "save_corpus",
    "save_features",
    "load_features",
    "FeatureStore",
    "split_train_val",
    "SynthConfig",
    "SynthOutput",
    "gen_synthetic",
    "write_synth",
    "tokens_in_samples",
]


class CorpusError(ValueError):
    """Malformed corpus input (JSONL records or feature files)."""


@dataclass(frozen=True)
class SampleRecord:
    """One article paired with one image."""

    id: str
    lang: str
    headline: str = ""
    lead: str = ""
    caption: str = ""
    body: str = ""
    image_id: str = ""
    entities: tuple[str, ...] = ()
    image_url: str | None = None

    def texts(self) -> dict[str, str]:
        return {src: getattr(self, src) for src in SOURCES}


_STR_KEYS = ("id", "lang", "headline", "lead", "caption", "body", "image_id")


def load_corpus(path) -> list[SampleRecord]:
    """Read one JSON object per line; missing text keys become empty
    strings.  id and image_id must be present and non-empty."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}: line {lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise CorpusError(f"{path}: line {lineno}: expected an object")
            fields = {}
            for key in _STR_KEYS:
                val = obj.get(key, "")
                if not isinstance(val, str):
                    raise CorpusError(f"{path}: line {lineno}: field {key!r} must be a string")
                fields[key] = val
            if not fields["id"] or not fields["image_id"]:
                raise CorpusError(f"{path}: line {lineno}: id and image_id are required")
            ents = obj.get("entities", [])
            if not isinstance(ents, list) or any(not isinstance(e, str) for e in ents):
                raise CorpusError(f"{path}: line {lineno}: entities must be a list of strings")
            url = obj.get("image_url")
            if url is not None and not isinstance(url, str):
                raise CorpusError(f"{path}: line {lineno}: image_url must be a string")
            out.append(SampleRecord(entities=tuple(ents), image_url=url, **fields))
    return out


def save_corpus(path, samples):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in samples:
            obj = {key: getattr(rec, key) for key in _STR_KEYS}
            obj["entities"] = list(rec.entities)
            if rec.image_url is not None:
                obj["image_url"] = rec.image_url
            fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")


# -- binary image features -----------------------------------------

_FEATURE_MAGIC = b"IMF1"


def save_features(path, ids, features: np.ndarray):
    """Write the binary feature file: magic, u32 count, u32 dim, then
    per record a u16 id byte length, the UTF-8 id and dim f32 values."""
    ids = list(ids)
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] != len(ids):
        raise CorpusError("features must be (len(ids), dim)")
    n, dim = features.shape
    if dim < 1:
        raise CorpusError("feature dim must be positive")
    f32 = np.ascontiguousarray(features, dtype="<f4")
    buf = bytearray()
    buf += _FEATURE_MAGIC
    buf += struct.pack("<II", n, dim)
    for i, id_ in enumerate(ids):
        raw = id_.encode("utf-8")
        if not raw:
            raise CorpusError("feature ids must be non-empty")
        if len(raw) > 0xFFFF:
            raise CorpusError(f"feature id too long: {id_[:32]!r}...")
        buf += struct.pack("<H", len(raw))
        buf += raw
        buf += f32[i].tobytes()
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".imf-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(bytes(buf))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_features(path):
    """Read a feature file back as (ids, float32 matrix)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _FEATURE_MAGIC:
        raise CorpusError(f"{path}: bad magic, expected IMF1")
    if len(raw) < 12:
        raise CorpusError(f"{path}: truncated header")
    n, dim = struct.unpack_from("<II", raw, 4)
    ids = []
    rows = np.empty((n, dim), dtype="<f4")
    pos = 12
    for i in range(n):
        if pos + 2 > len(raw):
            raise CorpusError(f"{path}: truncated record {i}")
        (id_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        end = pos + id_len + 4 * dim
        if id_len == 0 or end > len(raw):
            raise CorpusError(f"{path}: truncated record {i}")
        ids.append(raw[pos : pos + id_len].decode("utf-8"))
        pos += id_len
        rows[i] = np.frombuffer(raw, dtype="<f4", count=dim, offset=pos)
        pos += 4 * dim
    if pos != len(raw):
        raise CorpusError(f"{path}: {len(raw) - pos} trailing bytes")
    return ids, rows


class FeatureStore:
    """Image features keyed by image id."""

    def __init__(self, ids, features: np.ndarray):
        ids = list(ids)
        features = np.asarray(features, dtype="<f4")
        if len(ids) != len(set(ids)):
            raise CorpusError("duplicate image ids in feature store")
        if features.ndim != 2 or features.shape[0] != len(ids):
            raise CorpusError("features must be (len(ids), dim)")
        self.ids = ids
        self.matrix = features
        self.dim = features.shape[1]
        self._row = {id_: i for i, id_ in enumerate(ids)}

    @classmethod
    def from_file(cls, path) -> "FeatureStore":
        return cls(*load_features(path))

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._row

    def __len__(self) -> int:
        return len(self.ids)

    def vector(self, image_id: str) -> np.ndarray:
        """Feature row as float64, shape (dim,)."""
        try:
            row = self._row[image_id]
        except KeyError:
            raise CorpusError(f"unknown image id {image_id!r}") from None
        return self.matrix[row].astype(np.float64)

    def stack(self, image_ids) -> np.ndarray:
        rows = [self._row[i] for i in image_ids]
        return self.matrix[rows].astype(np.float64)


def split_train_val(samples, val_count: int, seed: int = 0):
    """Deterministic shuffled split into (train, val)."""
    samples = list(samples)
    if not 0 < val_count < len(samples):
        raise ValueError(f"val_count {val_count} out of range for {len(samples)} samples")
    order = np.random.default_rng(seed).permutation(len(samples))
    val_idx = set(order[:val_count].tolist())
    train = [samples[i] for i in range(len(samples)) if i not in val_idx]
    val = [samples[i] for i in sorted(val_idx)]
    return train, val


def tokens_in_samples(samples, tokenizer, sources=SOURCES) -> list[str]:
    """All distinct tokens appearing in the given sources, first-seen order."""
    seen: dict[str, None] = {}
    for rec in samples:
        for src in sources:
            for tok in tokenizer(getattr(rec, src)):
                seen.setdefault(tok)
    return list(seen)


# -- synthetic corpus ----------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Shape of the synthetic desk-scale corpus."""

    topics: int = 20
    samples_per_lang: int = 2500
    vocab_per_topic: int = 40
    embed_dim: int = 64  # w, word vector width
    feature_dim: int = 128  # d', image feature width
    noise_sigma: float = 0.1
    languages: tuple[str, ...] = ("de", "fr")
    vec_coverage: float = 1.0  # fraction of tokens that get a word vector

    def validate(self):
        if self.topics < 2 or self.samples_per_lang < 4 or self.vocab_per_topic < _BAG_SIZE:
            raise ValueError("synthetic corpus too small to be meaningful")
        if self.embed_dim < 2 or self.feature_dim < 2:
            raise ValueError("synthetic dims must be at least 2")
        if not self.languages:
            raise ValueError("need at least one language")
        if not 0.0 < self.vec_coverage <= 1.0:
            raise ValueError("vec_coverage must be in (0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


@dataclass
class SynthOutput:
    samples: list[SampleRecord]
    feature_ids: list[str]
    features: np.ndarray  # (n, feature_dim) float32
    word_vecs: dict[str, dict[str, np.ndarray]]  # lang -> token -> (w,)
    token_topic: dict[str, int]
    sample_topic: dict[str, int]
    topic_word_dirs: np.ndarray  # (T, w)
    topic_image_dirs: np.ndarray  # (T, d')
    token_image_dirs: dict[str, np.ndarray]  # token -> (d',)

    def store(self) -> FeatureStore:
        return FeatureStore(self.feature_ids, self.features)


# How many tokens each source draws from the article's content bag and
# how often a drawn token is replaced by an off-topic one.  Unequal
# lengths and noise rates are what make the sources carry unequal
# information.
_SOURCE_LENGTHS = {"caption": (4, 6), "body": (10, 16), "headline": (2, 3), "lead": (5, 8)}
_SOURCE_NOISE = {"caption": 0.05, "body": 0.20, "headline": 0.30, "lead": 0.25}
_BAG_SIZE = 8
_FINGERPRINT_WEIGHT = 1.0  # content-token component of the image feature
_TOKEN_SPREAD = 0.6  # token-specific component of a word vector


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v if n == 0 else v / n


def _random_word(rng: np.random.Generator, used: set[str]) -> str:
    letters = string.ascii_lowercase
    while True:
        length = int(rng.integers(6, 10))
        word = "".join(letters[int(k)] for k in rng.integers(0, 26, size=length))
        if word not in used:
            used.add(word)
            return word


def gen_synthetic(cfg: SynthConfig, seed: int = 0) -> SynthOutput:
    """Build a seeded synthetic corpus; identical (cfg, seed) give
    identical output."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    w, dp, T = cfg.embed_dim, cfg.feature_dim, cfg.topics

    topic_word_dirs = np.stack([_unit(rng.standard_normal(w)) for _ in range(T)])
    word_to_image = rng.standard_normal((w, dp)) / np.sqrt(w)

    used: set[str] = set()
    vocab: dict[str, list[list[str]]] = {}  # lang -> topic -> tokens
    word_vecs: dict[str, dict[str, np.ndarray]] = {}
    token_topic: dict[str, int] = {}
    token_image_dirs: dict[str, np.ndarray] = {}
    for lang in cfg.languages:
        vocab[lang] = []
        word_vecs[lang] = {}
        for t in range(T):
            toks = [_random_word(rng, used) for _ in range(cfg.vocab_per_topic)]
            vocab[lang].append(toks)
            for tok in toks:
                vec = _unit(
                    topic_word_dirs[t] + _TOKEN_SPREAD * _unit(rng.standard_normal(w))
                )
                word_vecs[lang][tok] = vec
                token_topic[tok] = t
                token_image_dirs[tok] = _unit(vec @ word_to_image)
    topic_image_dirs = np.stack([_unit(topic_word_dirs[t] @ word_to_image) for t in range(T)])

    if cfg.vec_coverage < 1.0:
        for lang in cfg.languages:
            toks = list(word_vecs[lang])
            drop_n = int(round((1.0 - cfg.vec_coverage) * len(toks)))
            drop = rng.permutation(len(toks))[:drop_n]
            for k in drop:
                del word_vecs[lang][toks[int(k)]]

    samples: list[SampleRecord] = []
    feature_ids: list[str] = []
    features = np.empty((cfg.samples_per_lang * len(cfg.languages), dp), dtype="<f4")
    sample_topic: dict[str, int] = {}
    row = 0
    for lang in cfg.languages:
        for i in range(cfg.samples_per_lang):
            t = int(rng.integers(0, T))
            topic_vocab = vocab[lang][t]
            bag_idx = rng.choice(len(topic_vocab), size=_BAG_SIZE, replace=False)
            bag = [topic_vocab[int(k)] for k in bag_idx]

            texts = {}
            for src in SOURCES:
                lo, hi = _SOURCE_LENGTHS[src]
                count = int(rng.integers(lo, hi + 1))
                toks = []
                for _ in range(count):
                    if rng.random() < _SOURCE_NOISE[src]:
                        ot = int(rng.integers(0, T))
                        pool = vocab[lang][ot]
                        toks.append(pool[int(rng.integers(0, len(pool)))])
                    else:
                        toks.append(bag[int(rng.integers(0, _BAG_SIZE))])
                texts[src] = " ".join(toks)

            fingerprint = np.mean([token_image_dirs[tok] for tok in bag], axis=0)
            feat = _unit(
                topic_image_dirs[t] + _FINGERPRINT_WEIGHT * fingerprint
            ) + cfg.noise_sigma * rng.standard_normal(dp)

            sid = f"{lang}{i:06d}"
            image_id = f"img-{sid}"
            mentioned = [
                tok for tok in bag if tok in texts["caption"].split() or tok in texts["body"].split()
            ]
            entities = tuple(tok.capitalize() for tok in mentioned[:2])
            url = f"https://images.example/{image_id}.jpg" if i % 2 == 0 else None
            samples.append(
                SampleRecord(
                    id=sid,
                    lang=lang,
                    headline=texts["headline"],
                    lead=texts["lead"],
                    caption=texts["caption"],
                    body=texts["body"],
                    image_id=image_id,
                    entities=entities,
                    image_url=url,
                )
            )
            feature_ids.append(image_id)
            features[row] = feat
            sample_topic[sid] = t
            row += 1

    return SynthOutput(
        samples=samples,
        feature_ids=feature_ids,
        features=features,
        word_vecs=word_vecs,
        token_topic=token_topic,
        sample_topic=sample_topic,
        topic_word_dirs=topic_word_dirs,
        topic_image_dirs=topic_image_dirs,
        token_image_dirs=token_image_dirs,
    )


def write_synth(out_dir, out: SynthOutput, embed_dim: int):
    """Write corpus.jsonl, features.imf1, per-language .vec files and a
    truth.json with the topic assignments."""
    from .textprep import write_vec_file

    os.makedirs(out_dir, exist_ok=True)
    save_corpus(os.path.join(out_dir, "corpus.jsonl"), out.samples)
    save_features(os.path.join(out_dir, "features.imf1"), out.feature_ids, out.features)
    for lang, vecs in out.word_vecs.items():
        write_vec_file(os.path.join(out_dir, f"{lang}.vec"), vecs, embed_dim)
    truth = {
        "token_topic": out.token_topic,
        "sample_topic": out.sample_topic,
    }
    with open(os.path.join(out_dir, "truth.json"), "w", encoding="utf-8") as fh:
        json.dump(truth, fh, sort_keys=True)
    return out_dir
