"""Training loops, the Adam optimizer, learning-rate schedules and the
binary checkpoint format.

All flows share `run_training`: seeded shuffling, single-language
mini-batches (multilingual corpora interleave language batches
proportionally to their sizes), in-batch ranking loss, Adam updates and
per-epoch validation.  Model selection keeps the epoch with the best
validation R@10 summed over both retrieval directions (and languages).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import LeafCache, Parameter, backward
from .corpus import FeatureStore, tokens_in_samples
from .fusion import SOURCES, apply_drop, random_drop
from .model import ModelConfig, RetrievalModel
from .objectives import loss_hal, loss_max, loss_sum, sim_matrix
from .textprep import EmbeddingTable, extend_vocab, tokenize

__all__ = [
    "Adam",
    "TrainConfig",
    "TrainResult",
    "lr_at",
    "run_training",
    "train_single_source",
    "train_fused",
    "train_one_for_all",
    "transfer_all_for_one",
    "save_checkpoint",
    "load_checkpoint",
    "Checkpoint",
    "build_model_from_checkpoint",
    "apply_checkpoint",
]


class Adam:
    """Adam with bias correction; frozen parameters are skipped entirely
    and their step counters never tick."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._state: dict[int, list] = {
            id(p): [np.zeros_like(p.value), np.zeros_like(p.value), 0] for p in self.params
        }

    def step(self, lr: float):
        for p in self.params:
            if p.frozen:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise ValueError(f"non-finite gradient for parameter '{p.name}'")
            state = self._state[id(p)]
            m, v, t = state
            t += 1
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p.value -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
            state[2] = t

    def state_for(self, p: Parameter):
        m, v, t = self._state[id(p)]
        return m, v, t


def lr_at(schedule, epoch: int) -> float:
    """Piecewise-constant learning rate: schedule is ((start_epoch, lr), ...)."""
    lr = None
    for start, value in schedule:
        if epoch >= start:
            lr = value
    if lr is None:
        raise ValueError(f"schedule {schedule} does not cover epoch {epoch}")
    return lr


@dataclass(frozen=True)
class TrainConfig:
    """One training stage.

    The stock single-source recipe runs 30 epochs at 1e-3 with the rate
    divided by 5 at epochs 10 and 20; desk-scale tests shrink epochs
    and batch size.  The smooth weighted loss is typically run with a
    256 batch, the hinge losses with 128.
    """

    epochs: int = 30
    batch_size: int = 128
    schedule: tuple[tuple[int, float], ...] = ((0, 1e-3), (10, 2e-4), (20, 4e-5))
    loss: str = "sum"  # sum | max | hal
    margin: float = 0.2
    hal_alpha: float = 20.0
    hal_beta: float = 30.0
    hal_eps: float = 0.2
    seed: int = 0
    random_drop: bool = False
    drop_keep_prob: float = 0.7
    freeze: tuple[str, ...] = ()
    eval_every: int = 1
    log_path: str | None = None
    stage: str = "main"

    def validate(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("in-batch objectives need batch_size >= 2")
        if self.loss not in ("sum", "max", "hal"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        starts = [s for s, _ in self.schedule]
        if not self.schedule or starts[0] != 0 or starts != sorted(starts):
            raise ValueError("schedule must start at epoch 0 and be ascending")
        if starts[-1] >= self.epochs:
            raise ValueError("schedule epochs must lie inside the run")

    def to_json(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "schedule": [list(x) for x in self.schedule],
            "loss": self.loss,
            "margin": self.margin,
            "hal_alpha": self.hal_alpha,
            "hal_beta": self.hal_beta,
            "hal_eps": self.hal_eps,
            "seed": self.seed,
            "random_drop": self.random_drop,
            "drop_keep_prob": self.drop_keep_prob,
            "freeze": list(self.freeze),
            "eval_every": self.eval_every,
            "stage": self.stage,
        }


@dataclass
class TrainResult:
    model: RetrievalModel
    history: list[dict]
    best_metric: float
    best_epoch: int
    best_values: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def restore_best(self):
        if self.best_values:
            self.model.restore_values(self.best_values)


def _batch_loss(model: RetrievalModel, batch, store: FeatureStore, tcfg: TrainConfig, drop_rng):
    ctx = LeafCache()
    rows = []
    for rec in batch:
        texts = rec.texts()
        if tcfg.random_drop:
            texts = apply_drop(texts, random_drop(drop_rng, tcfg.drop_keep_prob))
        enc, _ = model.encode_texts_tensor(texts, rec.lang, ctx)
        rows.append(enc)
    from .autodiff import concat_rows

    text_batch = concat_rows(rows)
    feats = store.stack([rec.image_id for rec in batch])
    image_batch = model.encode_image_batch(feats, ctx)
    S = sim_matrix(text_batch, image_batch)
    if tcfg.loss == "sum":
        return loss_sum(S, tcfg.margin)
    if tcfg.loss == "max":
        return loss_max(S, tcfg.margin)
    return loss_hal(S, tcfg.hal_alpha, tcfg.hal_beta, tcfg.hal_eps)


def _epoch_batches(samples, batch_size: int, rng) -> list[list[int]]:
    """Single-language batches, shuffled together so languages interleave
    proportionally to corpus sizes.  Batches smaller than 2 are dropped."""
    by_lang: dict[str, list[int]] = {}
    for i, rec in enumerate(samples):
        by_lang.setdefault(rec.lang, []).append(i)
    batches: list[list[int]] = []
    for lang in sorted(by_lang):
        idx = np.array(by_lang[lang])
        rng.shuffle(idx)
        for k in range(0, len(idx), batch_size):
            chunk = idx[k : k + batch_size].tolist()
            if len(chunk) >= 2:
                batches.append(chunk)
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def run_training(
    model: RetrievalModel,
    train_samples,
    store: FeatureStore,
    val_samples,
    tcfg: TrainConfig,
    history: list[dict] | None = None,
    epoch_offset: int = 0,
) -> TrainResult:
    """One training stage; returns the result with best-epoch values
    captured (call restore_best() to adopt them)."""
    from .retrieval import evaluate_bidirectional

    tcfg.validate()
    if tcfg.random_drop and not model.cfg.fused:
        raise ValueError("random_drop only applies to fused four-source models")
    if not train_samples:
        raise ValueError("empty training corpus")
    if tcfg.freeze:
        model.set_frozen(tcfg.freeze, True)
    optimizer = Adam([p for p in model.parameters()])
    seed_seq = np.random.SeedSequence([tcfg.seed, epoch_offset])
    shuffle_rng, drop_rng = [np.random.default_rng(s) for s in seed_seq.spawn(2)]

    history = history if history is not None else []
    best_metric = -1.0
    best_epoch = -1
    best_values: dict[str, np.ndarray] = {}
    for epoch in range(tcfg.epochs):
        lr = lr_at(tcfg.schedule, epoch)
        losses = []
        for batch_idx in _epoch_batches(train_samples, tcfg.batch_size, shuffle_rng):
            batch = [train_samples[i] for i in batch_idx]
            model.zero_grad()
            loss = _batch_loss(model, batch, store, tcfg, drop_rng)
            backward(loss)
            optimizer.step(lr)
            losses.append(float(loss.value[0, 0]))
        row = {
            "epoch": epoch_offset + epoch,
            "stage": tcfg.stage,
            "lr": lr,
            "train_loss": float(np.mean(losses)) if losses else 0.0,
            "frozen": sorted(model.frozen_names()),
        }
        if (epoch + 1) % tcfg.eval_every == 0 or epoch == tcfg.epochs - 1:
            report = evaluate_bidirectional(model, val_samples, store)
            metric = report.r10_sum()
            row["val"] = report.to_json()
            row["val_r10_sum"] = metric
            if metric > best_metric:
                best_metric = metric
                best_epoch = epoch_offset + epoch
                best_values = model.snapshot_values()
        history.append(row)
        if tcfg.log_path:
            with open(tcfg.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return TrainResult(model, history, best_metric, best_epoch, best_values)


def train_single_source(
    train_samples,
    store: FeatureStore,
    val_samples,
    source: str,
    mcfg: ModelConfig,
    tables: dict[str, EmbeddingTable],
    tcfg: TrainConfig,
) -> TrainResult:
    """Train one single-source model from scratch; adopts the best epoch."""
    cfg = mcfg.with_sources((source,))
    model = RetrievalModel(cfg, {k: t.copy() for k, t in tables.items()},
                           np.random.default_rng(tcfg.seed))
    result = run_training(model, train_samples, store, val_samples, tcfg)
    result.restore_best()
    return result


def train_fused(
    train_samples,
    store: FeatureStore,
    val_samples,
    mcfg: ModelConfig,
    tables: dict[str, EmbeddingTable],
    stage1: TrainConfig,
    stage2: TrainConfig,
    checkpoints: dict[str, "Checkpoint"] | None = None,
) -> TrainResult:
    """Fused four-source training.

    With per-source checkpoints this is the divide-and-conquer recipe:
    each source encoder starts from its own single-source run, word
    embeddings and the image projection come from the caption
    checkpoint; stage one trains only the fuser, stage two additionally
    finetunes the text branch.  Without checkpoints everything trains
    from random init in a single stage driven by `stage2`.
    """
    cfg = mcfg.with_sources(SOURCES)
    model = RetrievalModel(cfg, {k: t.copy() for k, t in tables.items()},
                           np.random.default_rng(stage2.seed))
    history: list[dict] = []
    if checkpoints is None:
        result = run_training(model, train_samples, store, val_samples,
                              replace(stage2, stage="scratch"), history)
        result.restore_best()
        return result

    missing = [s for s in SOURCES if s not in checkpoints]
    if missing:
        raise ValueError(f"divide-and-conquer needs checkpoints for {missing}")
    for src in SOURCES:
        apply_checkpoint(model, checkpoints[src], include=(f"enc:{src}",))
    # Word embeddings and the image projection carry over from the
    # caption run; the fuser stays at its random init.
    apply_checkpoint(model, checkpoints["caption"], include=("table:", "img."))

    model.set_frozen(("",), False)
    model.set_frozen(("table:", "enc:", "img."), True)
    r1 = run_training(model, train_samples, store, val_samples,
                      replace(stage1, stage="fuser-only"), history)
    model.set_frozen(("table:", "enc:"), False)
    r2 = run_training(model, train_samples, store, val_samples,
                      replace(stage2, stage="finetune"), history,
                      epoch_offset=stage1.epochs)
    best = max((r1, r2), key=lambda r: r.best_metric)
    out = TrainResult(model, history, best.best_metric, best.best_epoch, best.best_values)
    out.restore_best()
    return out


def train_one_for_all(
    train_samples,
    store: FeatureStore,
    val_samples,
    mcfg: ModelConfig,
    tables: dict[str, EmbeddingTable],
    tcfg: TrainConfig,
) -> TrainResult:
    """Joint training over several languages with frozen aligned tables
    and a single shared encoder."""
    langs = tuple(sorted({rec.lang for rec in train_samples}))
    if set(langs) - set(mcfg.languages):
        raise ValueError("corpus languages missing from the model config")
    dims = {tables[lang].dim for lang in mcfg.languages}
    if len(dims) != 1:
        raise ValueError("aligned tables must share the embedding width")
    unfrozen = [lang for lang in mcfg.languages if not tables[lang].frozen]
    if unfrozen:
        raise ValueError(f"one-for-all requires frozen aligned tables, got unfrozen {unfrozen}")
    copies = {k: t.copy() for k, t in tables.items()}
    model = RetrievalModel(mcfg, copies, np.random.default_rng(tcfg.seed))
    if "table:" not in tcfg.freeze:
        tcfg = replace(tcfg, freeze=tuple(tcfg.freeze) + ("table:",))
    result = run_training(model, train_samples, store, val_samples, tcfg)
    result.restore_best()
    return result


def transfer_all_for_one(
    ckpt: "Checkpoint",
    table: EmbeddingTable,
    train_samples,
    store: FeatureStore,
    val_samples,
    tcfg: TrainConfig,
    extend: bool = True,
) -> tuple[TrainResult, int]:
    """Adapt a trained model to a new language.

    The target table must be aligned with the training-time one (same
    width).  The vocabulary is optionally extended with every corpus
    token missing from the table (new rows start at their subword
    composition), then everything is finetuned.  Returns (result,
    number of rows added)."""
    lang = table.lang
    cfg = ModelConfig.from_json(ckpt.header["model"]).with_languages((lang,))
    table = table.copy()
    table.frozen = False
    added = 0
    if extend:
        seen = tokens_in_samples(train_samples, tokenize, cfg.sources)
        added = extend_vocab(table, seen)
    model = RetrievalModel(cfg, {lang: table}, np.random.default_rng(tcfg.seed))
    apply_checkpoint(model, ckpt, exclude=("table:",))
    model.set_frozen(("",), False)
    result = run_training(model, train_samples, store, val_samples, tcfg)
    result.restore_best()
    return result, added


# -- checkpoints -----------------------------------------------------

_CKPT_MAGIC = b"NIRC"
_CKPT_VERSION = 1


@dataclass
class Checkpoint:
    header: dict
    tensors: dict[str, np.ndarray]  # name -> float32 2-D array, file order


def save_checkpoint(path, model: RetrievalModel, train_config: dict | None = None,
                    history=()):
    """Serialize config, table vocabularies and all parameters.

    Layout: magic, u32 version, u32 JSON byte length, the JSON header,
    then per tensor a u16 name length, the name, u32 rows, u32 cols and
    row-major f32 data.  The write is atomic (temp file + rename)."""
    header = {
        "version": _CKPT_VERSION,
        "model": model.cfg.to_json(),
        "tables": {
            lang: {
                "tokens": table.tokens,
                "buckets": table.buckets,
                "use_subwords": table.use_subwords,
            }
            for lang, table in model.tables.items()
        },
        "frozen": sorted(model.frozen_names()),
        "train": train_config,
        "history": list(history),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = bytearray()
    buf += _CKPT_MAGIC
    buf += struct.pack("<II", _CKPT_VERSION, len(blob))
    buf += blob
    for p in model.parameters():
        name = p.name.encode("utf-8")
        rows, cols = p.value.shape
        buf += struct.pack("<H", len(name))
        buf += name
        buf += struct.pack("<II", rows, cols)
        buf += np.ascontiguousarray(p.value, dtype="<f4").tobytes()
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(bytes(buf))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: bad magic, expected NIRC")
    version, json_len = struct.unpack_from("<II", raw, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    header = json.loads(raw[pos : pos + json_len].decode("utf-8"))
    pos += json_len
    tensors: dict[str, np.ndarray] = {}
    while pos < len(raw):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        rows, cols = struct.unpack_from("<II", raw, pos)
        pos += 8
        count = rows * cols
        if pos + 4 * count > len(raw):
            raise ValueError(f"{path}: truncated tensor '{name}'")
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(
            rows, cols
        )
        pos += 4 * count
    return Checkpoint(header, tensors)


def apply_checkpoint(model: RetrievalModel, ckpt: Checkpoint, include=("",), exclude=()):
    """Copy checkpoint tensors into matching model parameters.

    Only names matching an `include` prefix and no `exclude` prefix are
    touched; a shape mismatch raises and names the parameter."""
    by_name = {p.name: p for p in model.parameters()}
    for name, tensor in ckpt.tensors.items():
        if not any(name.startswith(pre) for pre in include):
            continue
        if any(name.startswith(pre) for pre in exclude):
            continue
        p = by_name.get(name)
        if p is None:
            continue
        if p.value.shape != tensor.shape:
            raise ValueError(
                f"shape mismatch for parameter '{name}': checkpoint has"
                f" {tensor.shape}, model expects {p.value.shape}"
            )
        p.value[...] = tensor.astype(np.float64)


def build_model_from_checkpoint(ckpt: Checkpoint) -> RetrievalModel:
    """Reconstruct a model (including tables) exactly as saved."""
    cfg = ModelConfig.from_json(ckpt.header["model"])
    tables: dict[str, EmbeddingTable] = {}
    for lang in cfg.languages:
        meta = ckpt.header["tables"][lang]
        matrix = ckpt.tensors[f"table:{lang}"].astype(np.float64)
        buckets = meta["buckets"]
        table = EmbeddingTable(
            lang,
            cfg.encoder.embed_dim,
            buckets=buckets,
            bank=matrix[:buckets],
            use_subwords=meta["use_subwords"],
            unk=matrix[buckets],
        )
        word_rows = matrix[buckets + 1 :]
        if len(meta["tokens"]) != len(word_rows):
            raise ValueError(f"table '{lang}': token list does not match the tensor")
        if meta["tokens"]:
            table.add_tokens(meta["tokens"], word_rows)
        tables[lang] = table
    model = RetrievalModel(cfg, tables, np.random.default_rng(0))
    apply_checkpoint(model, ckpt)
    frozen = set(ckpt.header.get("frozen", ()))
    for p in model.parameters():
        p.frozen = p.name in frozen
    return model
