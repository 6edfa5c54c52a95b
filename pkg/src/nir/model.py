"""Model assembly: embedding tables, per-source text encoders, the
optional fuser and the image projection, wired as one named-parameter
registry."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import LeafCache, Parameter, Tensor, concat_rows
from .encoders import (
    AttentionMap,
    EncoderConfig,
    ImageProjection,
    TextEncoderParams,
    encode_image,
    encode_image_batch,
    encode_text,
)
from .fusion import SOURCES, FuserParams, fuse
from .textprep import EmbeddingTable, tokenize

__all__ = ["ModelConfig", "RetrievalModel", "DEFAULT_TRUNCATION"]

DEFAULT_TRUNCATION = {"caption": 64, "headline": 64, "lead": 64, "body": 256}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture settings; configuration alone determines shapes."""

    sources: tuple[str, ...] = ("caption",)
    fuse_strategy: str = "attention"
    languages: tuple[str, ...] = ("de",)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    feature_dim: int = 128
    truncation: tuple[tuple[str, int], ...] = tuple(sorted(DEFAULT_TRUNCATION.items()))

    def validate(self):
        self.encoder.validate()
        if not self.sources or any(s not in SOURCES for s in self.sources):
            raise ValueError(f"sources must be drawn from {SOURCES}")
        if len(set(self.sources)) != len(self.sources):
            raise ValueError("duplicate sources")
        if len(self.sources) not in (1, len(SOURCES)):
            raise ValueError("a model is either single-source or uses all four sources")
        if not self.languages:
            raise ValueError("need at least one language")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        dict(self.truncation)  # must be well-formed pairs

    @property
    def fused(self) -> bool:
        return len(self.sources) == len(SOURCES)

    def truncation_for(self, source: str) -> int:
        return dict(self.truncation).get(source, 64)

    def to_json(self) -> dict:
        return {
            "sources": list(self.sources),
            "fuse_strategy": self.fuse_strategy,
            "languages": list(self.languages),
            "encoder": {
                "embed_dim": self.encoder.embed_dim,
                "heads": self.encoder.heads,
                "key_dim": self.encoder.key_dim,
                "value_dim": self.encoder.value_dim,
                "hidden_dim": self.encoder.hidden_dim,
                "out_dim": self.encoder.out_dim,
            },
            "feature_dim": self.feature_dim,
            "truncation": dict(self.truncation),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(
            sources=tuple(obj["sources"]),
            fuse_strategy=obj["fuse_strategy"],
            languages=tuple(obj["languages"]),
            encoder=EncoderConfig(**obj["encoder"]),
            feature_dim=obj["feature_dim"],
            truncation=tuple(sorted(obj["truncation"].items())),
        )

    def with_sources(self, sources) -> "ModelConfig":
        return replace(self, sources=tuple(sources))

    def with_languages(self, languages) -> "ModelConfig":
        return replace(self, languages=tuple(languages))


class RetrievalModel:
    """Two-branch retrieval model over a shared joint embedding space.

    Single-source models own one text encoder; fused models own one
    encoder per source plus the fuser.  Embedding tables are shared
    across sources and selected per sample by language.
    """

    def __init__(self, cfg: ModelConfig, tables: dict[str, EmbeddingTable], rng):
        cfg.validate()
        missing = [lang for lang in cfg.languages if lang not in tables]
        if missing:
            raise ValueError(f"missing embedding tables for languages {missing}")
        for lang in cfg.languages:
            if tables[lang].dim != cfg.encoder.embed_dim:
                raise ValueError(
                    f"table '{lang}' dim {tables[lang].dim} != encoder embed dim"
                    f" {cfg.encoder.embed_dim}"
                )
        self.cfg = cfg
        self.tables = {lang: tables[lang] for lang in cfg.languages}
        # Canonical source order keeps parameter layout deterministic.
        ordered = [s for s in SOURCES if s in cfg.sources]
        self.encoders = {src: TextEncoderParams(f"enc:{src}", cfg.encoder, rng) for src in ordered}
        self.fuser = (
            FuserParams(cfg.encoder.out_dim, cfg.encoder.key_dim, rng) if cfg.fused else None
        )
        self.proj = ImageProjection(cfg.feature_dim, cfg.encoder.out_dim, rng)

    # -- parameter registry ------------------------------------------

    def parameters(self) -> list[Parameter]:
        out = [self.tables[lang].matrix for lang in self.cfg.languages]
        for src in self.encoders:
            out.extend(self.encoders[src].parameters())
        if self.fuser is not None:
            out.extend(self.fuser.parameters())
        out.extend(self.proj.parameters())
        return out

    def parameter(self, name: str) -> Parameter:
        for p in self.parameters():
            if p.name == name:
                return p
        raise KeyError(name)

    def set_frozen(self, prefixes, flag: bool = True):
        """Freeze/unfreeze every parameter whose name starts with one of
        the given prefixes ('' matches everything)."""
        prefixes = tuple(prefixes)
        for p in self.parameters():
            if any(p.name.startswith(pre) for pre in prefixes):
                p.frozen = flag

    def frozen_names(self) -> list[str]:
        return [p.name for p in self.parameters() if p.frozen]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def snapshot_values(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def restore_values(self, values: dict[str, np.ndarray]):
        for p in self.parameters():
            p.value[...] = values[p.name]

    # -- encoding -----------------------------------------------------

    def table_for(self, lang: str) -> EmbeddingTable:
        try:
            return self.tables[lang]
        except KeyError:
            raise ValueError(f"unknown language {lang!r}") from None

    def source_tokens(self, texts: dict[str, str], source: str) -> list[str]:
        return tokenize(texts.get(source, ""), limit=self.cfg.truncation_for(source))

    def encode_texts_tensor(self, texts: dict[str, str], lang: str, ctx: LeafCache):
        """Encode one article's text sources.

        Returns (1 x d tensor, {source: AttentionMap}).  For fused
        models every source is encoded (missing ones become zero
        vectors); single-source models encode just their source.
        """
        table = self.table_for(lang)
        maps: dict[str, AttentionMap] = {}
        if not self.cfg.fused:
            (src,) = self.cfg.sources
            enc, amap = encode_text(table, self.source_tokens(texts, src), self.encoders[src], ctx)
            maps[src] = amap
            return enc, maps
        parts = []
        for src in SOURCES:
            enc, amap = encode_text(table, self.source_tokens(texts, src), self.encoders[src], ctx)
            maps[src] = amap
            parts.append(enc)
        fused, _ = fuse(parts, self.fuser, ctx, self.cfg.fuse_strategy)
        return fused, maps

    def encode_sample(self, sample, ctx: LeafCache):
        return self.encode_texts_tensor(sample.texts(), sample.lang, ctx)

    def encode_text_batch(self, samples, ctx: LeafCache) -> Tensor:
        rows = [self.encode_sample(s, ctx)[0] for s in samples]
        return concat_rows(rows) if len(rows) > 1 else rows[0]

    def encode_image_vec(self, feature: np.ndarray, ctx: LeafCache) -> Tensor:
        return encode_image(self.proj, feature, ctx)

    def encode_image_batch(self, features: np.ndarray, ctx: LeafCache) -> Tensor:
        return encode_image_batch(self.proj, features, ctx)
