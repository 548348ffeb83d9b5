import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptermix import numerics as nx
from adaptermix.adapters import (
    MixtureOfAdapters,
    ResidualAdapter,
    adapter_core,
    compute_k,
    moa_forward,
    plan_from_affinity,
    route,
)
from adaptermix.errors import DimensionError
from adaptermix.numerics import Tensor

from gradcheck import REL_TOL, check_gradients


# --- independent dense oracle ------------------------------------------------


def oracle_core(w_down, w_up, gain, bias, h, eps=1e-5):
    mu = h.mean(axis=1, keepdims=True)
    var = ((h - mu) ** 2).mean(axis=1, keepdims=True)
    z = (h - mu) / np.sqrt(var + eps) * gain + bias
    return np.maximum(z @ w_down, 0.0) @ w_up


def oracle_topk(column, k):
    ranked = sorted(range(len(column)), key=lambda j: (-column[j], j))
    return ranked[:k]


def dense_moa(moa, h):
    """h + sum_i P_i^T diag(G_i) core_i(P_i h) with explicit one-hot P_i."""
    n = h.shape[0]
    logits = h @ moa.w_g.data
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)
    k = max(1, min(n, math.floor(n * moa.capacity / moa.n_adapters)))
    out = h.copy()
    for i, a in enumerate(moa.adapters):
        idx = oracle_topk(s[:, i], k)
        p = np.zeros((k, n))
        p[np.arange(k), idx] = 1.0
        g = np.diag(s[idx, i])
        core = oracle_core(a.w_down.data, a.w_up.data, a.ln_gain.data, a.ln_bias.data, p @ h)
        out = out + p.T @ g @ core
    return out


def randomized_moa(d, r, n_adapters, capacity, rng):
    moa = MixtureOfAdapters(d, r, n_adapters, capacity, rng)
    for a in moa.adapters:
        a.w_up.data = rng.normal(0.0, 0.5, size=a.w_up.shape)
        a.ln_gain.data = rng.normal(1.0, 0.2, size=d)
        a.ln_bias.data = rng.normal(0.0, 0.2, size=d)
    moa.w_g.data = rng.normal(0.0, 1.0, size=moa.w_g.shape)
    return moa


# --- adapter core ------------------------------------------------------------


def hand_adapter(w_down):
    a = ResidualAdapter(2, 1, np.random.default_rng(0))
    a.w_down.data = np.array(w_down)
    a.w_up.data = np.array([[0.5, 0.5]])
    return a


def test_zero_up_projection_gives_zero_branch():
    a = ResidualAdapter(6, 3, np.random.default_rng(1))
    h = Tensor(np.random.default_rng(2).normal(size=(4, 6)))
    assert not adapter_core(a, h).data.any()
    assert np.array_equal(a(h).data, h.data)


def test_hand_computed_adapter():
    # LN([1,-1]) = [1,-1]/sqrt(1+eps) ~ [1,-1]; down -> 1; relu -> 1; up -> [0.5, 0.5]
    a = hand_adapter([[1.0], [0.0]])
    h = Tensor([[1.0, -1.0]])
    np.testing.assert_allclose(adapter_core(a, h).data, [[0.5, 0.5]], atol=1e-4)
    np.testing.assert_allclose(a(h).data, [[1.5, -0.5]], atol=1e-4)


def test_negative_preactivation_is_cut():
    a = hand_adapter([[-1.0], [0.0]])
    assert not adapter_core(a, Tensor([[1.0, -1.0]])).data.any()


def test_adapter_width_mismatch():
    a = ResidualAdapter(4, 2, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        adapter_core(a, Tensor(np.zeros((3, 5))))


def test_adapter_shape_invariants():
    with pytest.raises(DimensionError):
        ResidualAdapter(4, 5, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        ResidualAdapter(1, 1, np.random.default_rng(0))


def test_initialisation_ranges():
    d = 16
    moa = MixtureOfAdapters(d, 4, 3, 1.0, np.random.default_rng(3))
    bound = 1.0 / math.sqrt(d)
    for a in moa.adapters:
        assert np.all(np.abs(a.w_down.data) <= bound)
        assert not a.w_up.data.any()
        assert np.all(a.ln_gain.data == 1.0) and not a.ln_bias.data.any()
    assert moa.w_g.shape == (d, 3)
    assert abs(moa.w_g.data.std() - 0.01) < 0.005


# --- k -------------------------------------------------------------------------


@pytest.mark.parametrize(
    "n, c, big_n, k",
    [(12, 1.0, 4, 3), (10, 1.0, 4, 2), (3, 1.0, 8, 1), (5, 10.0, 2, 5)],
)
def test_compute_k(n, c, big_n, k):
    assert compute_k(n, c, big_n) == k


@given(st.integers(1, 200), st.floats(0.01, 20.0), st.integers(1, 16))
def test_compute_k_bounds(n, c, big_n):
    k = compute_k(n, c, big_n)
    assert 1 <= k <= n
    assert big_n * k <= c * n + big_n


# --- routing -----------------------------------------------------------------


def test_route_picks_top_token_per_adapter():
    s_t = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3]])
    plan = plan_from_affinity(s_t.T, capacity=2 / 3)
    assert plan.k == 1
    assert plan.indices.tolist() == [[0], [1]]
    assert plan.gates.tolist() == [[0.6], [0.5]]


def test_route_ties_go_to_smaller_index():
    affinity = np.array([[0.4, 0.6], [0.4, 0.6], [0.2, 0.8]])
    plan = plan_from_affinity(affinity, capacity=2 / 3)
    assert plan.indices[0].tolist() == [0]


def test_single_adapter_routes_every_token_with_unit_gate():
    moa = MixtureOfAdapters(6, 2, 1, 1.0, np.random.default_rng(4))
    h = Tensor(np.random.default_rng(5).normal(size=(7, 6)))
    plan = route(moa, h)
    assert plan.k == 7
    assert sorted(plan.indices[0].tolist()) == list(range(7))
    assert np.all(plan.gates == 1.0)


@given(st.integers(1, 12), st.integers(1, 5), st.floats(0.25, 3.0), st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_routing_plan_invariants(n, big_n, c, seed):
    rng = np.random.default_rng(seed)
    moa = MixtureOfAdapters(4, 2, big_n, c, rng)
    moa.w_g.data = rng.normal(size=moa.w_g.shape)
    h = Tensor(rng.normal(size=(n, 4)))
    plan = route(moa, h)
    assert plan.indices.shape == (big_n, plan.k)
    assert np.all((plan.indices >= 0) & (plan.indices < n))
    for i in range(big_n):
        row = plan.indices[i]
        assert len(set(row.tolist())) == row.size
        assert np.array_equal(plan.gates[i], plan.affinity[row, i])
        assert row.tolist() == oracle_topk(plan.affinity[:, i], plan.k)
    np.testing.assert_allclose(plan.affinity.sum(axis=1), 1.0, atol=1e-12)


def test_tokens_may_be_shared_between_adapters():
    affinity = np.array([[0.5, 0.5], [0.1, 0.9], [0.45, 0.55]])
    plan = plan_from_affinity(affinity, capacity=1.0)
    assert plan.k == 1
    # token 0 is top for adapter 0, token 1 for adapter 1; widen k to force overlap
    plan = plan_from_affinity(affinity, capacity=2.0)
    assert 0 in plan.indices[0] and 0 in plan.indices[1]


# --- mixture forward -----------------------------------------------------------


def test_fresh_mixture_is_identity():
    moa = MixtureOfAdapters(8, 4, 3, 1.0, np.random.default_rng(6))
    h = Tensor(np.random.default_rng(7).normal(size=(9, 8)))
    assert np.array_equal(moa_forward(moa, h).data, h.data)


def test_single_adapter_reduction():
    rng = np.random.default_rng(8)
    for _ in range(20):
        moa = randomized_moa(6, 3, 1, 1.0, rng)
        h = Tensor(rng.normal(size=(int(rng.integers(1, 10)), 6)))
        expected = moa.adapters[0](h).data
        assert np.max(np.abs(moa_forward(moa, h).data - expected)) <= 1e-12


def test_matches_dense_oracle_small_case():
    rng = np.random.default_rng(9)
    moa = randomized_moa(4, 2, 2, 2 / 3, rng)
    h = rng.normal(size=(3, 4))
    assert route(moa, Tensor(h)).k == 1
    assert np.max(np.abs(moa_forward(moa, Tensor(h)).data - dense_moa(moa, h))) < 1e-10


@given(st.integers(1, 5), st.integers(1, 3), st.sampled_from([0.5, 1.0, 1.5, 2.0]), st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_dense_oracle_equivalence(n, big_n, c, seed):
    rng = np.random.default_rng(seed)
    moa = randomized_moa(4, 2, big_n, c, rng)
    h = rng.normal(size=(n, 4))
    assert np.max(np.abs(moa_forward(moa, Tensor(h)).data - dense_moa(moa, h))) < 1e-10


def test_segments_route_independently():
    rng = np.random.default_rng(10)
    moa = randomized_moa(4, 2, 3, 1.0, rng)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(7, 4))
    joint = moa_forward(moa, Tensor(np.vstack([a, b])), segments=[(0, 5), (5, 12)]).data
    # stacked matmuls may round differently from the separate ones
    np.testing.assert_allclose(joint[:5], moa_forward(moa, Tensor(a)).data, atol=1e-12)
    np.testing.assert_allclose(joint[5:], moa_forward(moa, Tensor(b)).data, atol=1e-12)


def test_mixture_width_mismatch():
    moa = MixtureOfAdapters(4, 2, 2, 1.0, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        moa_forward(moa, Tensor(np.zeros((3, 5))))


def test_load_bound():
    rng = np.random.default_rng(11)
    for n, big_n, c in [(10, 4, 1.0), (7, 3, 1.5), (2, 5, 0.5)]:
        moa = randomized_moa(4, 2, big_n, c, rng)
        plan = route(moa, Tensor(rng.normal(size=(n, 4))))
        assert plan.indices.size == big_n * plan.k <= c * n + big_n


def test_mixture_gradients_with_fixed_routing():
    rng = np.random.default_rng(12)
    moa = randomized_moa(4, 3, 3, 1.0, rng)
    h = Tensor(rng.normal(size=(6, 4)))
    plans = [route(moa, h)]
    params = [h, moa.w_g] + [p for a in moa.adapters for _, p in a.named_parameters()]

    def loss():
        return nx.sum_all(moa_forward(moa, h, plans=plans))

    assert check_gradients(loss, params) < REL_TOL


def test_adapter_core_gradients():
    rng = np.random.default_rng(13)
    a = ResidualAdapter(5, 3, rng)
    a.w_up.data = rng.normal(size=a.w_up.shape)
    h = Tensor(rng.normal(size=(4, 5)))
    params = [h] + [p for _, p in a.named_parameters()]
    assert check_gradients(lambda: nx.sum_all(adapter_core(a, h)), params) < REL_TOL
