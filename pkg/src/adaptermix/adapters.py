"""Residual adapters and the mixture of adapters with expert-choice routing.

A mixture holds N bottleneck adapters and a routing matrix ``w_g``. Each
adapter picks its own top-k tokens by affinity, transforms them, and the
gated outputs are scattered back onto the residual stream:

    S = softmax_rows(h @ w_g)                        # [n x N]
    I[i], G[i] = top-k of column i of S               # k = n * c / N
    out = h + sum_i scatter(I[i], G[i] * core_i(h[I[i]]))

The residual is added once, at the mixture level. With N = 1 and c = 1 every
gate is 1 and the mixture is exactly one residual adapter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .errors import DimensionError
from .numerics import Tensor

DEFAULT_N_ADAPTERS = 4
DEFAULT_CAPACITY = 1.0
DECODER_BOTTLENECK = 128
VARIANCE_BOTTLENECK = 64


class ResidualAdapter:
    """LayerNorm -> down projection -> ReLU -> up projection."""

    def __init__(self, d_model: int, r: int, rng: np.random.Generator):
        if d_model < 2 or not 1 <= r <= d_model:
            raise DimensionError(f"adapter needs d_model >= 2 and 1 <= r <= d_model, got d={d_model}, r={r}")
        self.d_model = d_model
        self.r = r
        bound = 1.0 / math.sqrt(d_model)
        self.w_down = Tensor(rng.uniform(-bound, bound, size=(d_model, r)))
        self.w_up = Tensor(np.zeros((r, d_model)))
        self.ln_gain = Tensor(np.ones(d_model))
        self.ln_bias = Tensor(np.zeros(d_model))

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield prefix + "w_down", self.w_down
        yield prefix + "w_up", self.w_up
        yield prefix + "ln_gain", self.ln_gain
        yield prefix + "ln_bias", self.ln_bias

    def __call__(self, h: Tensor) -> Tensor:
        return nx.add(h, adapter_core(self, h))


def adapter_core(adapter: ResidualAdapter, h: Tensor) -> Tensor:
    """The bottleneck branch of a residual adapter, without the skip connection."""
    if h.data.ndim != 2 or h.shape[1] != adapter.d_model:
        raise DimensionError(f"adapter expects width {adapter.d_model}, got input of shape {h.shape}")
    z = nx.layer_norm(h, adapter.ln_gain, adapter.ln_bias)
    return nx.matmul(nx.relu(nx.matmul(z, adapter.w_down)), adapter.w_up)


def compute_k(n: int, capacity: float, n_adapters: int) -> int:
    """Tokens per adapter: floor(n * c / N) clamped to [1, n]."""
    return max(1, min(n, math.floor(n * capacity / n_adapters)))


@dataclass
class RoutingPlan:
    """Routing decision for one sequence.

    ``indices[i]`` holds the tokens chosen by adapter i, strongest first;
    ``gates[i, j] == affinity[indices[i, j], i]``.
    """

    affinity: np.ndarray
    k: int
    indices: np.ndarray
    gates: np.ndarray


def top_k_tokens(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries of a 1-D array; ties go to the smaller index."""
    order = np.lexsort((np.arange(scores.size), -scores))
    return order[:k]


def plan_from_affinity(affinity: np.ndarray, capacity: float) -> RoutingPlan:
    n, n_adapters = affinity.shape
    k = compute_k(n, capacity, n_adapters)
    idx = np.stack([top_k_tokens(affinity[:, i], k) for i in range(n_adapters)])
    gates = np.take_along_axis(affinity.T, idx, axis=1)
    return RoutingPlan(affinity=affinity, k=k, indices=idx, gates=gates)


class MixtureOfAdapters:
    def __init__(
        self,
        d_model: int,
        r: int,
        n_adapters: int = DEFAULT_N_ADAPTERS,
        capacity: float = DEFAULT_CAPACITY,
        rng: np.random.Generator | None = None,
    ):
        if n_adapters < 1:
            raise ValueError(f"need at least one adapter, got {n_adapters}")
        if not capacity > 0:
            raise ValueError(f"capacity must be positive, got {capacity}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_model = d_model
        self.r = r
        self.n_adapters = n_adapters
        self.capacity = float(capacity)
        self.adapters = [ResidualAdapter(d_model, r, rng) for _ in range(n_adapters)]
        self.w_g = Tensor(rng.normal(0.0, 0.01, size=(d_model, n_adapters)))

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for i, a in enumerate(self.adapters):
            yield from a.named_parameters(f"{prefix}adapters.{i}.")
        yield prefix + "w_g", self.w_g

    def __call__(self, h: Tensor, segments: Sequence[tuple[int, int]] | None = None) -> Tensor:
        return moa_forward(self, h, segments)


def route(moa: MixtureOfAdapters, h: Tensor) -> RoutingPlan:
    """Routing plan for a single sequence ``h`` [n x d_model]."""
    _check_width(moa, h)
    affinity = nx.softmax_rows(nx.matmul(Tensor(h.data), moa.w_g)).data
    return plan_from_affinity(affinity, moa.capacity)


def _check_width(moa: MixtureOfAdapters, h: Tensor) -> None:
    if h.data.ndim != 2 or h.shape[1] != moa.d_model:
        raise DimensionError(f"mixture expects width {moa.d_model}, got input of shape {h.shape}")


def moa_forward(
    moa: MixtureOfAdapters,
    h: Tensor,
    segments: Sequence[tuple[int, int]] | None = None,
    plans: Sequence[RoutingPlan] | None = None,
) -> Tensor:
    """Apply the mixture to ``h``.

    ``segments`` splits the rows into independent sequences (routing never
    crosses a segment). ``plans`` pins the token selection, one per segment;
    the gates are still read from the live affinity so gradients reach ``w_g``.
    """
    _check_width(moa, h)
    n_rows = h.shape[0]
    if segments is None:
        segments = [(0, n_rows)]
    if n_rows == 0:
        return h
    affinity = nx.softmax_rows(nx.matmul(h, moa.w_g))
    if plans is None:
        plans = [plan_from_affinity(affinity.data[lo:hi], moa.capacity) for lo, hi in segments if hi > lo]
    else:
        plans = list(plans)
    offsets = [lo for lo, hi in segments if hi > lo]

    out = h
    for i, adapter in enumerate(moa.adapters):
        idx = np.concatenate([p.indices[i] + off for p, off in zip(plans, offsets)])
        gates = nx.gather_cells(affinity, idx, np.full(idx.size, i))
        core = adapter_core(adapter, nx.gather_rows(h, idx))
        out = nx.scatter_add_rows(out, idx, nx.scale_rows(core, gates))
    return out
