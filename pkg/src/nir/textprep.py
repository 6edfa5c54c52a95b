"""Tokenization, subword extraction and embedding tables.

Tokens are NFC-normalized, case-folded and split on every codepoint
that is not a letter or digit.  Word lookup is backed by a hashed
subword bucket bank, so no input token is ever out of vocabulary while
the bank is enabled.
"""

from __future__ import annotations

import re
import struct
import unicodedata
import warnings

import numpy as np

from .autodiff import LeafCache, Parameter, Tensor, gather_rows, segment_mean_rows

__all__ = [
    "FormatError",
    "DEFAULT_BUCKETS",
    "tokenize",
    "extract_subwords",
    "fnv1a64",
    "bucket_of",
    "EmbeddingTable",
    "embed_sequence",
    "load_vec_file",
    "write_vec_file",
    "load_bank_file",
    "save_bank_file",
    "extend_vocab",
]


class FormatError(ValueError):
    """Malformed external file (vec text, bank binary, ...)."""


DEFAULT_BUCKETS = 65536

# Substring window widths taken over the marker-wrapped word.
_SUBWORD_LENGTHS = (4, 5, 6)

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text, limit: int | None = None) -> list[str]:
    """Split text into normalized tokens, optionally truncated to `limit`.

    Accepts str or UTF-8 bytes; invalid byte sequences raise the usual
    UnicodeDecodeError rather than being silently repaired.
    """
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8")
    toks = _TOKEN_RE.findall(unicodedata.normalize("NFC", text).casefold())
    if limit is not None:
        return toks[:limit]
    return toks


def extract_subwords(token: str) -> list[str]:
    """Subword units of a token: the marker-wrapped word itself plus all
    its substrings of widths 4, 5 and 6.

    The result is deduplicated; order is deterministic (whole word
    first, then by width and position).
    """
    wrapped = "<" + token + ">"
    out: dict[str, None] = {wrapped: None}
    for width in _SUBWORD_LENGTHS:
        for i in range(len(wrapped) - width + 1):
            out.setdefault(wrapped[i : i + width])
    return list(out)


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def bucket_of(gram: str, buckets: int) -> int:
    return fnv1a64(gram.encode("utf-8")) % buckets


class EmbeddingTable:
    """Per-language word vectors plus a hashed subword bucket bank.

    Storage is one parameter matrix.  Rows [0, buckets) hold the bank,
    row `buckets` is the unknown-word vector, and rows past that hold
    per-token vectors in insertion order.  A token embeds as the
    uniform average of its full-word vector (the stored vector when the
    token is known, otherwise the bucket of the wrapped word) and the
    bucket vectors of every extracted subword.
    """

    def __init__(
        self,
        lang: str,
        dim: int,
        buckets: int = DEFAULT_BUCKETS,
        bank: np.ndarray | None = None,
        bank_seed: int = 0,
        use_subwords: bool = True,
        unk: np.ndarray | None = None,
        frozen: bool = False,
    ):
        if dim < 1 or buckets < 1:
            raise ValueError("embedding dim and bucket count must be positive")
        self.lang = lang
        self.dim = int(dim)
        self.buckets = int(buckets)
        self.use_subwords = bool(use_subwords)
        if bank is None:
            rng = np.random.default_rng(bank_seed)
            bank = rng.uniform(-0.5 / dim, 0.5 / dim, size=(buckets, dim))
        bank = np.asarray(bank, dtype=np.float64)
        if bank.shape != (buckets, dim):
            raise ValueError(f"bank shape {bank.shape} != ({buckets}, {dim})")
        if unk is None:
            unk = np.zeros(dim)
        unk = np.asarray(unk, dtype=np.float64).reshape(1, dim)
        self._token_rows: dict[str, int] = {}
        self._members_cache: dict[str, tuple[int, ...]] = {}
        self.matrix = Parameter(
            f"table:{lang}", np.concatenate([bank, unk], axis=0), frozen=frozen
        )

    # -- vocabulary -------------------------------------------------

    @property
    def unk_index(self) -> int:
        return self.buckets

    @property
    def tokens(self) -> list[str]:
        """Known tokens in row order."""
        return list(self._token_rows)

    @property
    def frozen(self) -> bool:
        return self.matrix.frozen

    @frozen.setter
    def frozen(self, flag: bool):
        self.matrix.frozen = bool(flag)

    def __contains__(self, token: str) -> bool:
        return token in self._token_rows

    def __len__(self) -> int:
        return len(self._token_rows)

    def add_tokens(self, tokens, vectors: np.ndarray):
        """Append word rows; duplicates of known tokens are rejected."""
        tokens = list(tokens)
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.shape != (len(tokens), self.dim):
            raise ValueError("token/vector count mismatch")
        for t in tokens:
            if t in self._token_rows:
                raise ValueError(f"token {t!r} already present")
        base = self.matrix.value.shape[0]
        frozen = self.matrix.frozen
        self.matrix.replace_value(np.concatenate([self.matrix.value, vectors], axis=0))
        self.matrix.frozen = frozen
        for k, t in enumerate(tokens):
            self._token_rows[t] = base + k
        self._members_cache.clear()

    # -- embedding --------------------------------------------------

    def members(self, token: str) -> tuple[int, ...]:
        """Row indices whose uniform average embeds `token`."""
        cached = self._members_cache.get(token)
        if cached is not None:
            return cached
        row = self._token_rows.get(token)
        if self.use_subwords:
            if row is None:
                row = bucket_of("<" + token + ">", self.buckets)
            rows = [row]
            rows.extend(bucket_of(g, self.buckets) for g in extract_subwords(token))
        else:
            rows = [row if row is not None else self.unk_index]
        out = tuple(rows)
        self._members_cache[token] = out
        return out

    def embed_token(self, token: str) -> np.ndarray:
        """Plain (untracked) embedding of one token, shape (dim,)."""
        rows = np.asarray(self.members(token), dtype=np.int64)
        return self.matrix.value[rows].mean(axis=0)

    def copy(self) -> "EmbeddingTable":
        out = EmbeddingTable.__new__(EmbeddingTable)
        out.lang = self.lang
        out.dim = self.dim
        out.buckets = self.buckets
        out.use_subwords = self.use_subwords
        out._token_rows = dict(self._token_rows)
        out._members_cache = {}
        out.matrix = Parameter(self.matrix.name, self.matrix.value, frozen=self.matrix.frozen)
        return out


def embed_sequence(table: EmbeddingTable, tokens, ctx: LeafCache) -> Tensor:
    """Embed a non-empty token sequence as an l x dim tensor on the tape."""
    tokens = list(tokens)
    if not tokens:
        raise ValueError("embed_sequence requires at least one token")
    members = [table.members(t) for t in tokens]
    idx = np.fromiter(
        (r for m in members for r in m), dtype=np.int64, count=sum(len(m) for m in members)
    )
    lengths = [len(m) for m in members]
    leaf = ctx.leaf(table.matrix)
    return segment_mean_rows(gather_rows(leaf, idx), lengths)


def extend_vocab(table: EmbeddingTable, tokens) -> int:
    """Add word rows for unseen tokens, initialized to their current
    subword composition.  Returns the number of rows added."""
    if table.frozen:
        raise ValueError(f"cannot extend frozen table '{table.lang}'")
    fresh: list[str] = []
    seen: set[str] = set()
    for t in tokens:
        if t not in table and t not in seen:
            fresh.append(t)
            seen.add(t)
    if not fresh:
        return 0
    vectors = np.stack([table.embed_token(t) for t in fresh])
    table.add_tokens(fresh, vectors)
    return len(fresh)


# -- external formats ----------------------------------------------


def load_vec_file(
    path,
    lang: str,
    buckets: int = DEFAULT_BUCKETS,
    bank: np.ndarray | None = None,
    bank_seed: int = 0,
    use_subwords: bool = True,
) -> EmbeddingTable:
    """Parse a text word-vector file: header "count dim", then one
    "token v1 ... v_dim" line per word.  Duplicate tokens keep the last
    occurrence and emit a warning."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        parts = header.split()
        if len(parts) != 2:
            raise FormatError(f"{path}: line 1: expected header 'count dim'")
        try:
            count, dim = int(parts[0]), int(parts[1])
        except ValueError:
            raise FormatError(f"{path}: line 1: non-integer header fields") from None
        if count < 0 or dim < 1:
            raise FormatError(f"{path}: line 1: bad header values {count} {dim}")
        order: dict[str, np.ndarray] = {}
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split(" ")
            if len(fields) != dim + 1:
                raise FormatError(
                    f"{path}: line {lineno}: expected {dim + 1} fields, got {len(fields)}"
                )
            token = fields[0]
            try:
                vec = np.array([float(x) for x in fields[1:]], dtype=np.float64)
            except ValueError:
                raise FormatError(f"{path}: line {lineno}: malformed float") from None
            if token in order:
                warnings.warn(
                    f"{path}: line {lineno}: duplicate token {token!r}; keeping last",
                    stacklevel=2,
                )
            order[token] = vec
    if len(order) > count:
        raise FormatError(f"{path}: more vector lines than the declared count {count}")
    table = EmbeddingTable(
        lang, dim, buckets=buckets, bank=bank, bank_seed=bank_seed, use_subwords=use_subwords
    )
    if order:
        table.add_tokens(list(order), np.stack(list(order.values())))
    return table


def write_vec_file(path, mapping: dict[str, np.ndarray], dim: int):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(mapping)} {dim}\n")
        for token, vec in mapping.items():
            vals = " ".join(repr(float(x)) for x in np.asarray(vec).reshape(dim))
            fh.write(f"{token} {vals}\n")


_BANK_MAGIC = b"SWB1"


def save_bank_file(path, bank: np.ndarray):
    bank = np.asarray(bank)
    if bank.ndim != 2:
        raise ValueError("bank must be 2-D")
    b, w = bank.shape
    with open(path, "wb") as fh:
        fh.write(_BANK_MAGIC)
        fh.write(struct.pack("<II", b, w))
        fh.write(np.ascontiguousarray(bank, dtype="<f4").tobytes())


def load_bank_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _BANK_MAGIC:
        raise FormatError(f"{path}: bad magic, expected SWB1")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    b, w = struct.unpack_from("<II", raw, 4)
    expected = 12 + 4 * b * w
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", count=b * w, offset=12)
    return data.reshape(b, w).astype(np.float64)
