"""Retrieval over encoded collections: brute-force scoring, gazetteer
entity filtering, ranking metrics and attention read-outs.

Ranks are pessimistic about ties: the paired item is placed after every
other item with an equal score.  Result ordering breaks score ties by
ascending id, so rankings are fully deterministic.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass

import numpy as np

from .autodiff import LeafCache, no_grad
from .corpus import FeatureStore
from .encoders import AttentionMap
from .model import RetrievalModel
from .textprep import tokenize

__all__ = [
    "normalize_entity",
    "EncodingIndex",
    "build_index",
    "SearchHit",
    "search",
    "recall_at_k",
    "median_rank",
    "rank_of",
    "DirectionMetrics",
    "MetricsReport",
    "evaluate_bidirectional",
    "attention_scores",
    "suggest_entities",
]


def normalize_entity(text: str) -> str:
    """Matching form of an entity string: NFKD, casefold, combining
    marks stripped."""
    decomposed = unicodedata.normalize("NFKD", text).casefold()
    return "".join(ch for ch in decomposed if not unicodedata.combining(ch))


@dataclass
class EncodingIndex:
    """Immutable brute-force index over encoded items."""

    ids: list[str]
    matrix: np.ndarray  # (n, d) float64, rows unit-norm or zero
    entities: list[tuple[str, ...]]  # raw entity strings per item
    modality: str = "image"

    def __post_init__(self):
        if len(self.ids) != len(set(self.ids)):
            raise ValueError("index ids must be unique")
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.ids):
            raise ValueError("index matrix must be (len(ids), d)")
        if len(self.entities) != len(self.ids):
            raise ValueError("one entity tuple per item required")
        norms = np.linalg.norm(self.matrix, axis=1)
        ok = (np.abs(norms - 1.0) < 1e-6) | (norms == 0.0)
        if not np.all(ok):
            raise ValueError("index rows must be unit-norm or zero")
        self._norm_entities = [
            frozenset(normalize_entity(e) for e in ents) for ents in self.entities
        ]

    def __len__(self) -> int:
        return len(self.ids)


def build_index(ids, matrix, entities_by_id=None, modality="image") -> EncodingIndex:
    ids = list(ids)
    entities_by_id = entities_by_id or {}
    ents = [tuple(entities_by_id.get(i, ())) for i in ids]
    return EncodingIndex(ids, np.asarray(matrix, dtype=np.float64), ents, modality)


@dataclass(frozen=True)
class SearchHit:
    id: str
    score: float
    entities: tuple[str, ...]


def search(index: EncodingIndex, query: np.ndarray, k: int, entities=()) -> list[SearchHit]:
    """Top-k by inner product; candidates must carry every filter entity.

    Ties are broken by ascending id.  A zero query is an error."""
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if query.shape[0] != index.matrix.shape[1]:
        raise ValueError("query dim does not match the index")
    if not np.any(query):
        raise ValueError("empty query: encoding is the zero vector")
    if k < 1:
        raise ValueError("k must be >= 1")
    wanted = frozenset(normalize_entity(e) for e in entities)
    if wanted:
        keep = [i for i, ents in enumerate(index._norm_entities) if wanted <= ents]
    else:
        keep = range(len(index.ids))
    scores = index.matrix @ query
    ranked = sorted(keep, key=lambda i: (-scores[i], index.ids[i]))
    return [
        SearchHit(index.ids[i], float(scores[i]), index.entities[i]) for i in ranked[:k]
    ]


def rank_of(scores: np.ndarray, true_idx: int) -> int:
    """1-based pessimistic rank: the true item counts behind every other
    item scoring greater than or equal to it."""
    true_score = scores[true_idx]
    better_or_equal = int(np.sum(scores >= true_score)) - 1
    return better_or_equal + 1


def recall_at_k(ranks, k: int) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no ranks to aggregate")
    return float(np.mean(ranks <= k))


def median_rank(ranks) -> float:
    ranks = np.sort(np.asarray(ranks, dtype=np.float64))
    if ranks.size == 0:
        raise ValueError("no ranks to aggregate")
    mid = ranks.size // 2
    if ranks.size % 2 == 1:
        return float(ranks[mid])
    return float((ranks[mid - 1] + ranks[mid]) / 2.0)


@dataclass
class DirectionMetrics:
    recall: dict[int, float]
    med_rank: float
    count: int

    def to_json(self) -> dict:
        return {
            "recall": {str(k): v for k, v in self.recall.items()},
            "median_rank": self.med_rank,
            "count": self.count,
        }


@dataclass
class MetricsReport:
    per_lang: dict[str, dict[str, DirectionMetrics]]  # lang -> {t2i, i2t}

    def r10_sum(self) -> float:
        return sum(
            dirs[d].recall[10] for dirs in self.per_lang.values() for d in ("t2i", "i2t")
        )

    def to_json(self) -> dict:
        return {
            lang: {d: m.to_json() for d, m in dirs.items()}
            for lang, dirs in self.per_lang.items()
        }


def evaluate_bidirectional(
    model: RetrievalModel, samples, store: FeatureStore, ks=(1, 5, 10)
) -> MetricsReport:
    """Rank every text against all same-language images and vice versa."""
    samples = list(samples)
    if len(samples) < 2:
        raise ValueError("evaluation needs at least 2 samples")
    per_lang: dict[str, dict[str, DirectionMetrics]] = {}
    by_lang: dict[str, list] = {}
    for rec in samples:
        by_lang.setdefault(rec.lang, []).append(rec)
    with no_grad():
        for lang in sorted(by_lang):
            group = by_lang[lang]
            ctx = LeafCache()
            texts = np.concatenate(
                [model.encode_sample(rec, ctx)[0].value for rec in group], axis=0
            )
            images = model.encode_image_batch(
                store.stack([rec.image_id for rec in group]), ctx
            ).value
            sims = texts @ images.T
            t2i = [rank_of(sims[i], i) for i in range(len(group))]
            i2t = [rank_of(sims[:, j], j) for j in range(len(group))]
            per_lang[lang] = {
                "t2i": DirectionMetrics(
                    {k: recall_at_k(t2i, k) for k in ks}, median_rank(t2i), len(group)
                ),
                "i2t": DirectionMetrics(
                    {k: recall_at_k(i2t, k) for k in ks}, median_rank(i2t), len(group)
                ),
            }
    return MetricsReport(per_lang)


def attention_scores(amap: AttentionMap) -> np.ndarray:
    """Collapse per-head attention maps to one weight per input token.

    Heads are averaged elementwise, then each column (input position) is
    averaged over output positions.  The scores sum to 1."""
    avg = amap.averaged()
    if avg.size == 0:
        return np.zeros(0)
    return avg.mean(axis=0)


def suggest_entities(texts: dict[str, str], vocabulary) -> list[str]:
    """Entities from `vocabulary` whose normalized form appears as a
    token or contiguous token phrase in any of the given sources."""
    source_tokens = [
        [normalize_entity(t) for t in tokenize(text)] for text in texts.values() if text
    ]
    found = []
    for entity in vocabulary:
        phrase = tokenize(normalize_entity(entity))
        if not phrase:
            continue
        n = len(phrase)
        hit = False
        for toks in source_tokens:
            for i in range(len(toks) - n + 1):
                if toks[i : i + n] == phrase:
                    hit = True
                    break
            if hit:
                break
        if hit:
            found.append(entity)
    return sorted(set(found))
