"""Reverse-mode automatic differentiation over 2-D float64 arrays.

Everything the retrieval model computes is expressed over 2-D arrays;
row vectors are shaped 1 x d.  Each operation returns a `Tensor` that
remembers its inputs and a backward closure, and `backward` replays the
recorded graph in reverse topological order, accumulating gradients
into `Parameter` buffers.

The op set is intentionally minimal: matrix multiply, add (with row
broadcast), scalar scale, relu, row-wise softmax, l2 normalization,
column-wise max pooling over rows, concatenation, means, elementwise
log/exp, row gather/scatter and reshape.  Nothing more general is
attempted.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "NumericsError",
    "Tensor",
    "Parameter",
    "LeafCache",
    "no_grad",
    "backward",
    "constant",
    "matmul",
    "add",
    "scale",
    "relu",
    "softmax_rows",
    "l2_normalize",
    "l2_normalize_rows",
    "max_pool_over_rows",
    "concat_rows",
    "concat_cols",
    "reshape",
    "transpose",
    "mean_over_rows",
    "segment_mean_rows",
    "gather_rows",
    "log",
    "exp",
    "grad_check",
]


class NumericsError(ValueError):
    """Shape violation or non-finite value inside the numeric core."""


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that skips tape recording (evaluation loops)."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


def _as_value(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise NumericsError(f"expected a 2-D array, got shape {a.shape}")
    return np.ascontiguousarray(a)


class Tensor:
    """A 2-D float64 value plus the graph wiring needed for backward."""

    __slots__ = ("value", "grad", "op", "parents", "_backward", "param")

    def __init__(self, value, op="const", parents=(), backward=None, param=None):
        self.value = _as_value(value)
        if not np.all(np.isfinite(self.value)):
            raise NumericsError(f"non-finite values produced by op '{op}'")
        self.grad = None
        self.op = op
        if _GRAD_ENABLED[0]:
            self.parents = tuple(parents)
            self._backward = backward
        else:
            self.parents = ()
            self._backward = None
        self.param = param

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def __repr__(self):  # pragma: no cover - debugging aid
        return f"Tensor({self.rows}x{self.cols}, op={self.op!r})"


class Parameter:
    """Named trainable 2-D array with a persistent gradient buffer."""

    __slots__ = ("name", "value", "grad", "frozen")

    def __init__(self, name: str, value, frozen: bool = False):
        self.name = name
        self.value = _as_value(value).copy()
        if not np.all(np.isfinite(self.value)):
            raise NumericsError(f"non-finite initial value for parameter '{name}'")
        self.grad = np.zeros_like(self.value)
        self.frozen = bool(frozen)

    def leaf(self) -> Tensor:
        return Tensor(self.value, op="param", param=self)

    def zero_grad(self):
        self.grad[...] = 0.0

    def replace_value(self, value):
        """Swap in a new value array (vocabulary growth); resets the grad buffer."""
        self.value = _as_value(value).copy()
        self.grad = np.zeros_like(self.value)

    def __repr__(self):  # pragma: no cover - debugging aid
        r, c = self.value.shape
        return f"Parameter({self.name!r}, {r}x{c}, frozen={self.frozen})"


class LeafCache:
    """One leaf tensor per parameter per forward graph.

    Sharing the leaf keeps a single gradient buffer per parameter per
    batch, which matters for the large embedding matrices.
    """

    def __init__(self):
        self._leaves = {}

    def leaf(self, param: Parameter) -> Tensor:
        t = self._leaves.get(id(param))
        if t is None:
            t = param.leaf()
            self._leaves[id(param)] = t
        return t


def backward(root: Tensor):
    """Accumulate gradients of a 1x1 root into all reachable parameters."""
    if root.value.shape != (1, 1):
        raise NumericsError(f"backward root must be 1x1, got {root.value.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    for t in topo:
        t.grad = np.zeros_like(t.value)
    root.grad[0, 0] = 1.0
    for t in reversed(topo):
        if t._backward is not None:
            t._backward(t.grad)
        if t.param is not None and not t.param.frozen:
            t.param.grad += t.grad


def constant(value) -> Tensor:
    return Tensor(value, op="const")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise NumericsError(f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}")
    out = a.value @ b.value

    def bwd(g, a=a, b=b):
        a.grad += g @ b.value.T
        b.grad += a.value.T @ g

    return Tensor(out, "matmul", (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also accepts a 1 x c bias broadcast over rows of a."""
    if a.value.shape == b.value.shape:

        def bwd(g, a=a, b=b):
            a.grad += g
            b.grad += g

    elif b.rows == 1 and b.cols == a.cols:

        def bwd(g, a=a, b=b):
            a.grad += g
            b.grad += g.sum(axis=0, keepdims=True)

    else:
        raise NumericsError(f"add shape mismatch: {a.value.shape} + {b.value.shape}")
    return Tensor(a.value + b.value, "add", (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g, a=a, s=s):
        a.grad += s * g

    return Tensor(a.value * s, "scale", (a,), bwd)


def relu(a: Tensor) -> Tensor:
    def bwd(g, a=a):
        a.grad += g * (a.value > 0.0)

    return Tensor(np.maximum(a.value, 0.0), "relu", (a,), bwd)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by max subtraction."""
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bwd(g, a=a, y=y):
        dot = (g * y).sum(axis=1, keepdims=True)
        a.grad += y * (g - dot)

    return Tensor(y, "softmax_rows", (a,), bwd)


def l2_normalize(v: Tensor) -> Tensor:
    """Normalize a 1 x d row vector; the zero vector maps to itself.

    The zero branch is gradient-silent by definition, which is what the
    empty-text representation requires.
    """
    if v.rows != 1:
        raise NumericsError(f"l2_normalize expects a row vector, got {v.value.shape}")
    n = float(np.linalg.norm(v.value))
    if n == 0.0:
        return Tensor(np.zeros_like(v.value), "l2_normalize", (v,), lambda g: None)
    y = v.value / n

    def bwd(g, v=v, y=y, n=n):
        v.grad += (g - y * float((g * y).sum())) / n

    return Tensor(y, "l2_normalize", (v,), bwd)


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Row-wise l2 normalization with the same zero-row guard."""
    n = np.linalg.norm(a.value, axis=1, keepdims=True)
    nonzero = n != 0.0
    safe = np.where(nonzero, n, 1.0)
    y = np.where(nonzero, a.value / safe, 0.0)

    def bwd(g, a=a, y=y, safe=safe, nonzero=nonzero):
        dot = (g * y).sum(axis=1, keepdims=True)
        a.grad += np.where(nonzero, (g - y * dot) / safe, 0.0)

    return Tensor(y, "l2_normalize_rows", (a,), bwd)


def max_pool_over_rows(a: Tensor):
    """Column-wise max over rows -> (1 x c tensor, argmax row per column).

    Ties route the gradient to the first maximal row.
    """
    idx = np.argmax(a.value, axis=0)
    cols = np.arange(a.cols)
    out = a.value[idx, cols][None, :]

    def bwd(g, a=a, idx=idx, cols=cols):
        np.add.at(a.grad, (idx, cols), g[0])

    return Tensor(out, "max_pool_over_rows", (a,), bwd), idx


def concat_rows(tensors) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise NumericsError("concat_rows of an empty list")
    cols = tensors[0].cols
    for t in tensors:
        if t.cols != cols:
            raise NumericsError("concat_rows requires equal column counts")
    out = np.concatenate([t.value for t in tensors], axis=0)
    offsets = np.cumsum([0] + [t.rows for t in tensors])

    def bwd(g, tensors=tensors, offsets=offsets):
        for t, r0, r1 in zip(tensors, offsets, offsets[1:]):
            t.grad += g[r0:r1]

    return Tensor(out, "concat_rows", tensors, bwd)


def concat_cols(tensors) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise NumericsError("concat_cols of an empty list")
    rows = tensors[0].rows
    for t in tensors:
        if t.rows != rows:
            raise NumericsError("concat_cols requires equal row counts")
    out = np.concatenate([t.value for t in tensors], axis=1)
    offsets = np.cumsum([0] + [t.cols for t in tensors])

    def bwd(g, tensors=tensors, offsets=offsets):
        for t, c0, c1 in zip(tensors, offsets, offsets[1:]):
            t.grad += g[:, c0:c1]

    return Tensor(out, "concat_cols", tensors, bwd)


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    """Row-major reshape."""
    if rows * cols != a.rows * a.cols:
        raise NumericsError(f"cannot reshape {a.value.shape} to ({rows}, {cols})")

    def bwd(g, a=a):
        a.grad += g.reshape(a.value.shape)

    return Tensor(a.value.reshape(rows, cols), "reshape", (a,), bwd)


def transpose(a: Tensor) -> Tensor:
    def bwd(g, a=a):
        a.grad += g.T

    return Tensor(a.value.T, "transpose", (a,), bwd)


def mean_over_rows(a: Tensor) -> Tensor:
    """Column means -> 1 x c."""
    out = a.value.mean(axis=0, keepdims=True)
    inv = 1.0 / a.rows

    def bwd(g, a=a, inv=inv):
        a.grad += g * inv

    return Tensor(out, "mean_over_rows", (a,), bwd)


def segment_mean_rows(a: Tensor, lengths) -> Tensor:
    """Mean over consecutive row segments; segment i has lengths[i] rows."""
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.ndim != 1 or len(lengths) == 0 or np.any(lengths < 1):
        raise NumericsError("segment lengths must be positive")
    if int(lengths.sum()) != a.rows:
        raise NumericsError("segment lengths must cover all rows")
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    sums = np.add.reduceat(a.value, starts, axis=0)
    out = sums / lengths[:, None]

    def bwd(g, a=a, lengths=lengths):
        a.grad += np.repeat(g / lengths[:, None], lengths, axis=0)

    return Tensor(out, "segment_mean_rows", (a,), bwd)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Stack rows of a by index; duplicate indices accumulate on backward."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or len(idx) == 0:
        raise NumericsError("gather_rows needs a non-empty 1-D index list")
    if idx.min() < 0 or idx.max() >= a.rows:
        raise NumericsError("gather_rows index out of range")
    out = a.value[idx]

    def bwd(g, a=a, idx=idx):
        np.add.at(a.grad, idx, g)

    return Tensor(out, "gather_rows", (a,), bwd)


def log(a: Tensor) -> Tensor:
    if np.any(a.value <= 0.0):
        raise NumericsError("log requires strictly positive inputs")
    out = np.log(a.value)

    def bwd(g, a=a):
        a.grad += g / a.value

    return Tensor(out, "log", (a,), bwd)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)  # overflow becomes inf, rejected by the ctor

    def bwd(g, out=out, a=a):
        a.grad += g * out

    return Tensor(out, "exp", (a,), bwd)


def grad_check(f, params, step: float = 1e-5) -> float:
    """Compare reverse-mode gradients of a scalar-valued f() against
    central finite differences.

    f rebuilds the forward graph from the current parameter values and
    returns a 1x1 tensor.  Returns the worst relative error
    |g_ad - g_fd| / max(1, |g_ad|, |g_fd|) over every element of every
    non-frozen parameter.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    if out.value.shape != (1, 1):
        raise NumericsError("grad_check target must be scalar (1x1)")
    backward(out)
    analytic = {p.name: p.grad.copy() for p in params if not p.frozen}
    worst = 0.0
    with no_grad():
        for p in params:
            if p.frozen:
                continue
            ad = analytic[p.name]
            rows, cols = p.value.shape
            for i in range(rows):
                for j in range(cols):
                    orig = p.value[i, j]
                    p.value[i, j] = orig + step
                    f_plus = float(f().value[0, 0])
                    p.value[i, j] = orig - step
                    f_minus = float(f().value[0, 0])
                    p.value[i, j] = orig
                    fd = (f_plus - f_minus) / (2.0 * step)
                    g = ad[i, j]
                    err = abs(g - fd) / max(1.0, abs(g), abs(fd))
                    if err > worst:
                        worst = err
    return worst
