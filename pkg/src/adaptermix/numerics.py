"""Dense float64 tensors with a small reverse-mode autodiff engine.

Every differentiable op builds its output with :func:`_node`, which records the
parent tensors and a closure that pushes the output gradient back into them.
:func:`backward` walks the recorded graph once in reverse topological order.

Shapes are explicit: apart from the row-wise bias in :func:`add_bias` and the
per-row factor in :func:`scale_rows` nothing broadcasts.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError

DEFAULT_LN_EPS = 1e-5


class Tensor:
    """A float64 array, optionally tracking gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            _not_scalar(self)
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64).reshape(self.data.shape)
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def _not_scalar(t: Tensor):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _push(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t._accumulate(g)


def _require_2d(x: Tensor, what: str) -> None:
    if x.data.ndim != 2:
        raise DimensionError(f"{what} expects a 2-D tensor, got shape {x.shape}")


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def bw(g):
        _push(a, g)
        _push(b, g)

    return _node(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def bw(g):
        _push(a, g)
        _push(b, -g)

    return _node(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def bw(g):
        _push(a, g * b.data)
        _push(b, g * a.data)

    return _node(a.data * b.data, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(x.data * c, (x,), lambda g: _push(x, g * c))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: _push(x, g * mask))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: _push(x, g * (1.0 - y * y)))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-d vector to every row of an [m x d] matrix."""
    _require_2d(x, "add_bias")
    if b.shape != (x.shape[1],):
        raise DimensionError(f"add_bias: bias shape {b.shape} does not fit rows of {x.shape}")

    def bw(g):
        _push(x, g)
        _push(b, g.sum(axis=0))

    return _node(x.data + b.data, (x, b), bw)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row j of ``x`` [m x d] by ``s[j, 0]`` for ``s`` of shape [m x 1]."""
    _require_2d(x, "scale_rows")
    if s.shape != (x.shape[0], 1):
        raise DimensionError(f"scale_rows: factor shape {s.shape} does not match {x.shape}")

    def bw(g):
        _push(x, g * s.data)
        _push(s, (g * x.data).sum(axis=1, keepdims=True))

    return _node(x.data * s.data, (x, s), bw)


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bw)


def softmax_rows(x: Tensor) -> Tensor:
    _require_2d(x, "softmax_rows")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        _push(x, y * (g - (g * y).sum(axis=1, keepdims=True)))

    return _node(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = DEFAULT_LN_EPS) -> Tensor:
    _require_2d(x, "layer_norm")
    d = x.shape[1]
    if d < 2:
        raise DegenerateInputError(f"layer_norm needs at least 2 features per row, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not fit width {d}")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    y = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            x._accumulate(
                inv * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True))
            )

    return _node(y, (x, gain, bias), bw)


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    n_heads: int,
    segments: Sequence[tuple[int, int]] | None = None,
) -> Tensor:
    """Scaled dot-product self-attention over [T x d] projections.

    ``segments`` lists half-open row ranges; rows only attend within their own
    range, which lets several sequences share one matrix.
    """
    for t in (q, k, v):
        _require_2d(t, "attention")
    if not (q.shape == k.shape == v.shape):
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} differ")
    n, d = q.shape
    if d % n_heads:
        raise DimensionError(f"attention: width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    inv_sqrt = 1.0 / np.sqrt(dh)
    if segments is None:
        segments = [(0, n)]

    out = np.zeros((n, d))
    probs = []
    for lo, hi in segments:
        qh = q.data[lo:hi].reshape(hi - lo, n_heads, dh).transpose(1, 0, 2)
        kh = k.data[lo:hi].reshape(hi - lo, n_heads, dh).transpose(1, 0, 2)
        vh = v.data[lo:hi].reshape(hi - lo, n_heads, dh).transpose(1, 0, 2)
        s = qh @ kh.transpose(0, 2, 1) * inv_sqrt
        s = s - s.max(axis=2, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=2, keepdims=True)
        probs.append(p)
        out[lo:hi] = (p @ vh).transpose(1, 0, 2).reshape(hi - lo, d)

    def bw(g):
        gq = np.zeros_like(q.data)
        gk = np.zeros_like(k.data)
        gv = np.zeros_like(v.data)
        for (lo, hi), p in zip(segments, probs):
            m = hi - lo
            qh = q.data[lo:hi].reshape(m, n_heads, dh).transpose(1, 0, 2)
            kh = k.data[lo:hi].reshape(m, n_heads, dh).transpose(1, 0, 2)
            vh = v.data[lo:hi].reshape(m, n_heads, dh).transpose(1, 0, 2)
            go = g[lo:hi].reshape(m, n_heads, dh).transpose(1, 0, 2)
            gp = go @ vh.transpose(0, 2, 1)
            gs = p * (gp - (gp * p).sum(axis=2, keepdims=True)) * inv_sqrt
            gq[lo:hi] = (gs @ kh).transpose(1, 0, 2).reshape(m, d)
            gk[lo:hi] = (gs.transpose(0, 2, 1) @ qh).transpose(1, 0, 2).reshape(m, d)
            gv[lo:hi] = (p.transpose(0, 2, 1) @ go).transpose(1, 0, 2).reshape(m, d)
        _push(q, gq)
        _push(k, gk)
        _push(v, gv)

    return _node(out, (q, k, v), bw)


# ---------------------------------------------------------------------------
# indexing
# ---------------------------------------------------------------------------


def _check_indices(idx, bound: int, what: str) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    bad = idx[(idx < 0) | (idx >= bound)]
    if bad.size:
        raise IndexError(f"{what}: index {int(bad[0])} out of range for {bound} rows")
    return idx


def gather_rows(x: Tensor, indices) -> Tensor:
    _require_2d(x, "gather_rows")
    idx = _check_indices(indices, x.shape[0], "gather_rows")

    def bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            x._accumulate(gx)

    return _node(x.data[idx], (x,), bw)


def scatter_add_rows(target: Tensor, indices, rows: Tensor) -> Tensor:
    """Return ``target`` with ``rows[j]`` added into row ``indices[j]``; repeats accumulate."""
    _require_2d(target, "scatter_add_rows")
    _require_2d(rows, "scatter_add_rows")
    idx = _check_indices(indices, target.shape[0], "scatter_add_rows")
    if rows.shape != (idx.size, target.shape[1]):
        raise DimensionError(
            f"scatter_add_rows: rows {rows.shape} do not fit {idx.size} indices into {target.shape}"
        )
    out = target.data.copy()
    np.add.at(out, idx, rows.data)

    def bw(g):
        _push(target, g)
        _push(rows, g[idx])

    return _node(out, (target, rows), bw)


def gather_cells(x: Tensor, rows, cols) -> Tensor:
    """Pick ``x[rows[j], cols[j]]`` into an [m x 1] column."""
    _require_2d(x, "gather_cells")
    r = _check_indices(rows, x.shape[0], "gather_cells")
    c = _check_indices(cols, x.shape[1], "gather_cells")
    if r.size != c.size:
        raise DimensionError(f"gather_cells: {r.size} row indices vs {c.size} column indices")

    def bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, (r, c), g[:, 0])
            x._accumulate(gx)

    return _node(x.data[r, c].reshape(-1, 1), (x,), bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    for p in parts:
        _require_2d(p, "concat_rows")
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows: widths differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _push(p, g[lo:hi])

    return _node(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    return _node(np.array(x.data.sum()), (x,), lambda g: _push(x, np.full(x.shape, float(g))))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    _same_shape(pred, target, "mse_loss")
    diff = pred.data - target.data
    n = max(diff.size, 1)

    def bw(g):
        gd = diff * (2.0 * float(g) / n)
        _push(pred, gd)
        _push(target, -gd)

    return _node(np.array((diff * diff).sum() / n), (pred, target), bw)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmaxes."""
    _require_2d(logits, "softmax_cross_entropy")
    y = _check_indices(labels, logits.shape[1], "softmax_cross_entropy")
    if y.size != logits.shape[0]:
        raise DimensionError(f"softmax_cross_entropy: {y.size} labels for {logits.shape[0]} rows")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(y.size)
    n = max(y.size, 1)

    def bw(g):
        gl = np.exp(logp)
        gl[rows, y] -= 1.0
        _push(logits, gl * (float(g) / n))

    return _node(np.array(-logp[rows, y].sum() / n), (logits,), bw)


def add_scalars(terms: Iterable[Tensor]) -> Tensor:
    terms = list(terms)
    for t in terms:
        if t.size != 1:
            _not_scalar(t)

    def bw(g):
        for t in terms:
            _push(t, np.full(t.shape, float(g)))

    return _node(np.array(sum(float(t.data) for t in terms)), tuple(terms), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls. Intermediate gradients are reset
    at the start of each call; the graph is released unless ``retain_graph``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    order = _topological(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss._accumulate(np.ones(loss.shape))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    if not retain_graph:
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node.grad = None
