import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from darlab import tensor as tn
from darlab.backbone import ModelConfig
from darlab.errors import ContractError
from darlab.router import (
    Model, RouterConfig, aggregate_standard, aggregate_standard_unrolled, aggregate_unet_skip,
    build_source_set, chunk_of, dar_aggregate, dar_query, final_source_indices, source_indices,
    unet_deep_blocks, unet_pair,
)
from darlab.tensor import Tensor, backward, grad_check


def T(x, rg=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=rg)


# -- standard residual -------------------------------------------------------------
def test_standard_hand_example():
    hs = aggregate_standard(T([1, 0]), [T([0, 1]), T([2, 2])])
    np.testing.assert_array_equal(hs[-1].data, [3, 3])


def test_standard_no_branches():
    hs = aggregate_standard(T([1, 0]), [])
    np.testing.assert_array_equal(hs[-1].data, [1, 0])


def test_standard_incremental_equals_unrolled():
    rng = np.random.default_rng(0)
    h0 = T(rng.standard_normal((3, 4)))
    br = [T(rng.standard_normal((3, 4))) for _ in range(5)]
    oracle = h0.data + sum(b.data for b in br)
    assert np.max(np.abs(aggregate_standard(h0, br)[-1].data - oracle)) < 1e-9
    assert np.max(np.abs(aggregate_standard_unrolled(h0, br).data - oracle)) < 1e-9


# -- U-Net skip ---------------------------------------------------------------------------
def test_unet_pairing():
    assert [unet_pair(k, 6) for k in (4, 5, 6)] == [3, 2, 1]
    assert unet_deep_blocks(6) == [4, 5, 6]
    assert unet_deep_blocks(5) == [4, 5]
    with pytest.raises(ContractError):
        unet_pair(2, 6)
    with pytest.raises(ContractError):
        unet_pair(3, 5)  # middle block of an odd stack is its own pair


def test_unet_identity_init():
    rng = np.random.default_rng(0)
    h, s = T(rng.standard_normal((2, 3, 4))), T(rng.standard_normal((2, 3, 4)))
    w = T(np.concatenate([np.eye(4), np.zeros((4, 4))]))
    np.testing.assert_array_equal(aggregate_unet_skip(h, s, w).data, h.data)


def test_unet_symmetric_half_fusion():
    h = T(np.random.default_rng(1).standard_normal((2, 3, 4)))
    w = T(np.concatenate([0.5 * np.eye(4), 0.5 * np.eye(4)]))
    np.testing.assert_allclose(aggregate_unet_skip(h, h, w).data, h.data, atol=1e-15)


def test_unet_grad_check():
    rng = np.random.default_rng(2)
    h, s = T(rng.standard_normal((2, 3, 4))), T(rng.standard_normal((2, 3, 4)))
    w, b = T(rng.standard_normal((8, 4))), T(rng.standard_normal(4))
    m = T(rng.standard_normal((2, 3, 4)))
    assert grad_check(lambda x: (aggregate_unet_skip(x, s, w, b) * m).sum(), h) < 1e-5
    assert grad_check(lambda x: (aggregate_unet_skip(h, x, w, b) * m).sum(), s) < 1e-5
    assert grad_check(lambda x: (aggregate_unet_skip(h, s, x, b) * m).sum(), w) < 1e-5


# -- source sets --------------------------------------------------------------------------------
def oracle_sources(l, S):
    """Direct set construction: summaries of finished chunks plus the open chunk's members."""
    n = math.ceil(l / S)
    summaries = {j * S for j in range(n)}
    current = set(range((n - 1) * S + 1, l))
    return sorted(summaries | current)


def test_source_set_example():
    assert source_indices(6, 4) == (0, 4, 5)
    assert len(source_indices(6, 4)) <= 4 + 8 // 4


def test_first_sublayer_sees_embedding_only():
    for S in (1, 2, 3, 4, 12):
        assert source_indices(1, S) == (0,)


@pytest.mark.parametrize("L", [6, 8, 12, 16, 56])
def test_dense_degenerate(L):
    for l in range(1, L + 1):
        assert source_indices(l, 1) == tuple(range(l))
    assert final_source_indices(L, 1) == tuple(range(L + 1))


@pytest.mark.parametrize("L,S", [(8, 1), (8, 2), (8, 4), (8, 8), (12, 3), (16, 4), (56, 4), (56, 7), (56, 8)])
def test_source_set_matches_oracle_and_bound(L, S):
    N = L // S
    for l in range(1, L + 1):
        idx = source_indices(l, S)
        assert list(idx) == oracle_sources(l, S)
        assert list(idx) == sorted(idx)
        assert len(idx) <= S + N
        if len(idx) == S + N:
            assert l == L
        assert chunk_of(l, S) == math.ceil(l / S)


def test_final_set_examples():
    assert final_source_indices(8, 4) == (0, 4, 5, 6, 7, 8)
    assert final_source_indices(8, 8) == tuple(range(9))


def test_build_source_set_keeps_summary_identity():
    stored = {i: T(np.full((1, 1, 2), float(i))) for i in range(8)}
    ss = build_source_set(6, stored, 4)
    assert ss.indices == (0, 4, 5)
    assert ss.sources[1] is stored[4]


def test_router_config_validation():
    with pytest.raises(ContractError):
        RouterConfig("dar", "static", 5).validate(12)
    with pytest.raises(ContractError):
        RouterConfig("dar", "bogus", 4)
    with pytest.raises(ContractError):
        RouterConfig("bogus")


# -- queries and aggregation ------------------------------------------------------------------
def brute_force(q, sources, gain, eps=1e-6):
    """Scripted per-token softmax-weighted sum, written without the library."""
    d = len(q)
    logits = []
    for v in sources:
        rms = math.sqrt(sum(x * x for x in v) / d + eps)
        key = [x / rms * g for x, g in zip(v, gain)]
        logits.append(sum(a * b for a, b in zip(q, key)) / math.sqrt(d))
    m = max(logits)
    w = [math.exp(z - m) for z in logits]
    Z = sum(w)
    w = [x / Z for x in w]
    return [sum(w[i] * sources[i][j] for i in range(len(sources))) for j in range(d)], w


def test_aggregate_single_source():
    v = T(np.random.default_rng(0).standard_normal((2, 3, 4)))
    h, a = dar_aggregate(T(np.ones(4)), [v])
    np.testing.assert_array_equal(a.data, 1.0)
    np.testing.assert_allclose(h.data, v.data, rtol=1e-15)


def test_aggregate_zero_query_is_mean():
    h, a = dar_aggregate(T([0, 0]), [T([[[2, 0]]]), T([[[0, 2]]])])
    np.testing.assert_allclose(a.data, 0.5)
    np.testing.assert_allclose(h.data, [[[1, 1]]])


def test_aggregate_empty():
    with pytest.raises(ContractError):
        dar_aggregate(T([0, 0]), [])


@pytest.mark.parametrize("seed", range(5))
def test_aggregate_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    q, gain = rng.standard_normal(2) * 3, 1 + 0.3 * rng.standard_normal(2)
    srcs = [rng.standard_normal(2) for _ in range(3)]
    want_h, want_a = brute_force(q.tolist(), [s.tolist() for s in srcs], gain.tolist())
    for units in (None, [tn.rmsnorm(T(s.reshape(1, 1, 2))) for s in srcs]):
        h, a = dar_aggregate(T(q), [T(s.reshape(1, 1, 2)) for s in srcs], T(gain), units=units)
        assert np.max(np.abs(h.data.ravel() - want_h)) < 1e-9
        assert np.max(np.abs(a.data.ravel() - want_a)) < 1e-9


def test_aggregate_mean_pooled_brute_force():
    rng = np.random.default_rng(7)
    q, gain = rng.standard_normal(3), np.ones(3)
    srcs = [rng.standard_normal((1, 4, 3)) for _ in range(3)]
    _, want_a = brute_force(q.tolist(), [s.mean(axis=1)[0].tolist() for s in srcs], gain.tolist())
    h, a = dar_aggregate(T(q), [T(s) for s in srcs], T(gain), pooling="mean_pooled")
    np.testing.assert_allclose(a.data[0], want_a, atol=1e-12)
    np.testing.assert_allclose(h.data, sum(w * s for w, s in zip(want_a, srcs)), atol=1e-12)


def test_queries():
    w = T([1.0, -1.0])
    e0 = T(np.zeros((3, 2)))
    assert dar_query("static", w=w) is w
    np.testing.assert_array_equal(dar_query("explicit_t", w=w, e_t=e0).data, np.broadcast_to(w.data, (3, 1, 2)))
    vp = T(np.random.default_rng(0).standard_normal((2, 5, 2)))
    q = dar_query("dynamic", wq=T(np.zeros((2, 2))), v_prev=vp)
    assert np.all(q.data == 0)
    with pytest.raises(ContractError):
        dar_query("bogus")


def test_static_weights_constant_in_t_for_fixed_sources():
    rng = np.random.default_rng(3)
    w = T(rng.standard_normal(4))
    srcs = [T(rng.standard_normal((1, 5, 4))) for _ in range(4)]
    ref = dar_aggregate(dar_query("static", w=w), srcs)[1].data
    for _t in np.linspace(0, 1, 11):  # the static query never sees t
        assert np.array_equal(dar_aggregate(dar_query("static", w=w), srcs)[1].data, ref)


def test_gradient_reaches_every_source():
    rng = np.random.default_rng(4)
    srcs = [T(rng.standard_normal((2, 3, 4)), True) for _ in range(5)]
    h, a = dar_aggregate(T(rng.standard_normal(4)), srcs, T(np.ones(4)))
    assert np.all(a.data > 0)
    backward((h * T(rng.standard_normal((2, 3, 4)))).sum())
    assert all(np.any(s.grad != 0) for s in srcs)


@pytest.mark.parametrize("pooling", ["per_token", "mean_pooled"])
def test_aggregate_grad_check_joint(pooling):
    rng = np.random.default_rng(5)
    n, d = 4, 3
    mask = T(rng.standard_normal((2, 3, d)))

    def f(flat):
        q = flat[0:d]
        g = flat[d:2 * d]
        srcs = [flat[2 * d + i * 18: 2 * d + (i + 1) * 18].reshape(2, 3, d) for i in range(n)]
        return (dar_aggregate(q, srcs, g, pooling)[0] * mask).sum()

    x = T(np.concatenate([rng.standard_normal(d), 1 + 0.2 * rng.standard_normal(d), rng.standard_normal(18 * n)]))
    assert grad_check(f, x) < 1e-5


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.floats(-20, 20), st.integers(0, 2**31 - 1))
def test_routing_rows_are_a_simplex(n, d, scale, seed):
    rng = np.random.default_rng(seed)
    srcs = [T(rng.standard_normal((2, 3, d)) * 10 ** rng.uniform(-3, 3)) for _ in range(n)]
    _, a = dar_aggregate(T(scale * rng.standard_normal(d)), srcs, T(np.ones(d)))
    assert np.all(a.data >= 0) and np.all(a.data <= 1)
    assert np.max(np.abs(a.data.sum(-1) - 1)) < 1e-6


# -- network --------------------------------------------------------------------------------------
SMALL = ModelConfig(n_blocks=3, d=8, tokens=4, d_in=2, n_classes=3, head_dim=8, freq_dim=8)
ALL = [RouterConfig("standard"), RouterConfig("unet_skip"),
       RouterConfig("dar", "static", 2), RouterConfig("dar", "explicit_t", 3), RouterConfig("dar", "dynamic", 1),
       RouterConfig("dar", "dynamic", 2, "mean_pooled"), RouterConfig("dar", "explicit_t", 6, "mean_pooled")]


def _inputs(seed=0, B=3):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((B, 4, 2)), rng.integers(0, 3, B), rng.random(B)


def test_all_modes_agree_at_init():
    x, y, t = _inputs()
    outs = [Model(SMALL, rc, seed=0, dtype=np.float64)(x, y, t).data for rc in ALL]
    for o in outs[1:]:
        assert np.array_equal(o, outs[0])


@pytest.mark.parametrize("rc", ALL, ids=lambda r: r.label)
def test_trace_shapes(rc):
    x, y, t = _inputs()
    m = Model(SMALL, rc, seed=0, dtype=np.float64)
    _, tr = m(x, y, t, trace=True)
    L = SMALL.n_sublayers
    assert sorted(tr.v) == list(range(L + 1))
    assert sorted(tr.h) == list(range(1, L + 1))
    assert len(tr.z) == SMALL.n_blocks
    if rc.mode == "dar":
        assert len(tr.routing) == L + 1


def test_trace_deterministic():
    x, y, t = _inputs()
    rc = RouterConfig("dar", "dynamic", 2)
    a = Model(SMALL, rc, seed=4, dtype=np.float64)(x, y, t, trace=True)[1]
    b = Model(SMALL, rc, seed=4, dtype=np.float64)(x, y, t, trace=True)[1]
    for l in a.h:
        assert np.array_equal(a.h[l].data, b.h[l].data)
    for k in a.routing:
        assert np.array_equal(a.routing[k].alpha, b.routing[k].alpha)


def test_routing_indices_follow_source_sets():
    x, y, t = _inputs()
    m = Model(SMALL, RouterConfig("dar", "static", 2), seed=0, dtype=np.float64)
    rng = np.random.default_rng(0)
    for p in m.params.values():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    _, tr = m(x, y, t, trace=True)
    for l, rw in tr.routing.items():
        assert list(rw.indices) == (list(final_source_indices(6, 2)) if l == "final" else oracle_sources(l, 2))
