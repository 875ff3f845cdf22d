import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hetpfl import adapter as ad_mod
from hetpfl.adapter import (
    AdapterSet,
    GateParams,
    LoraAdapter,
    PqLoraAdapter,
    block_indices,
    build_adapter_set,
    delta_weight,
    gated_combine,
    init_orthogonal,
    load_adapters,
    pq_forward,
    save_adapters,
    span_dimension,
)


@pytest.mark.parametrize("depth,nb,expected", [(16, 4, [4, 8, 12, 16]), (28, 4, [7, 14, 21, 28]), (5, 4, [1, 2, 3, 5])])
def test_block_indices_examples(depth, nb, expected):
    assert block_indices(depth, nb) == expected


def test_block_indices_rejects_too_many_blocks():
    with pytest.raises(ValueError):
        block_indices(3, 4)


@given(st.integers(1, 64).flatmap(lambda d: st.tuples(st.just(d), st.integers(1, d))))
def test_block_indices_invariants(args):
    depth, nb = args
    idx = block_indices(depth, nb)
    assert len(idx) == nb and idx[-1] == depth
    assert all(b > a for a, b in zip(idx, idx[1:]))


@given(st.integers(1, 8).flatmap(lambda r: st.tuples(st.just(r), st.integers(r, 24), st.integers(r, 24))), st.integers(0, 2**31))
def test_init_orthogonal_contract(dims, seed):
    r, d_in, d_out = dims
    ad = init_orthogonal(r, d_in, d_out, seed)
    assert np.linalg.norm(ad.A @ ad.A.T - np.eye(r)) < 1e-10
    assert np.linalg.norm(ad.B.T @ ad.B - np.eye(r)) < 1e-10
    h = np.random.default_rng(seed).standard_normal(d_in)
    np.testing.assert_array_equal(pq_forward(np.zeros((d_out, d_in)), ad, h), np.zeros(d_out))


def test_init_orthogonal_seeds_differ_and_rank_checked():
    a, b = init_orthogonal(4, 16, 16, 0), init_orthogonal(4, 16, 16, 1)
    assert np.linalg.norm(a.A - b.A) > 0.1
    with pytest.raises(ValueError):
        init_orthogonal(5, 4, 16, 0)


def test_frozen_factors_are_read_only():
    ad = init_orthogonal(2, 4, 4, 0)
    with pytest.raises(ValueError):
        ad.A[0, 0] = 1.0
    ad.P[0, 0] = 1.0  # trainable


def test_pq_forward_scalar_and_zero_cases(rng):
    ad = PqLoraAdapter([[1.0]], [[1.0]], [[3.0]], [0.5])
    assert pq_forward([[2.0]], ad, [1.0]) == pytest.approx([5.5])
    z = init_orthogonal(3, 5, 4, 0)
    w, h = rng.standard_normal((4, 5)), rng.standard_normal(5)
    np.testing.assert_allclose(pq_forward(w, z, h), w @ h)
    with pytest.raises(ValueError):
        pq_forward(np.zeros((4, 4)), z, h)


@given(st.integers(0, 2**31))
def test_pq_forward_two_path(seed):
    rng = np.random.default_rng(seed)
    ad = init_orthogonal(3, 6, 5, rng)
    ad.P[...] = rng.standard_normal((3, 3))
    ad.Q[...] = rng.standard_normal(3)
    w, h = rng.standard_normal((5, 6)), rng.standard_normal(6)
    np.testing.assert_allclose(pq_forward(w, ad, h), w @ h + delta_weight(ad) @ h + ad.bias_delta(), atol=1e-10)


@given(st.integers(0, 2**31), st.floats(-5, 5))
def test_pq_forward_linear_when_q_zero(seed, alpha):
    rng = np.random.default_rng(seed)
    ad = init_orthogonal(2, 4, 3, rng)
    ad.P[...] = rng.standard_normal((2, 2))
    w = rng.standard_normal((3, 4))
    h1, h2 = rng.standard_normal(4), rng.standard_normal(4)
    lhs = pq_forward(w, ad, alpha * h1 + h2)
    rhs = alpha * pq_forward(w, ad, h1) + pq_forward(w, ad, h2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_gated_combine_examples(rng):
    base, hl, hg = rng.standard_normal((3, 4))
    np.testing.assert_allclose(gated_combine(base, hl, hg, 0.0), base + 0.5 * hl + 0.5 * hg)
    np.testing.assert_allclose(gated_combine(base, hl, hg, 20.0), base + hg, atol=1e-6)
    for beta in (-3.0, 0.7, 9.0):
        np.testing.assert_allclose(gated_combine(base, hl, hl, beta), base + hl, atol=1e-12)


@given(st.floats(-30, 30), st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_gated_combine_inside_segment(beta, hl, hg):
    hl, hg = np.array(hl), np.array(hg)
    out = gated_combine(np.zeros(3), hl, hg, beta)
    lo, hi = np.minimum(hl, hg), np.maximum(hl, hg)
    assert np.all(out >= lo - 1e-9) and np.all(out <= hi + 1e-9)
    assert 0.0 <= GateParams(np.array([beta])).beta_tilde[0] <= 1.0


def test_delta_weight_examples(rng):
    ad = init_orthogonal(3, 7, 5, 0)
    ad.P[...] = np.eye(3)
    np.testing.assert_allclose(np.linalg.svd(delta_weight(ad), compute_uv=False)[:3], 1.0, atol=1e-10)
    ad.P[...] = 0.0
    np.testing.assert_array_equal(delta_weight(ad), np.zeros((5, 7)))
    ad.P[...] = rng.standard_normal((3, 3))
    assert np.linalg.matrix_rank(delta_weight(ad)) <= 3


def test_span_dimension_examples():
    ad = init_orthogonal(3, 8, 6, 0)
    assert span_dimension(ad) == 9
    a = ad.A.copy()
    a[1] = a[0]
    assert span_dimension(PqLoraAdapter(a, ad.B, ad.P, ad.Q)) < 9


@given(st.integers(0, 2**31), st.integers(1, 4))
def test_span_dimension_generic_factors(seed, r):
    rng = np.random.default_rng(seed)
    d_in, d_out = r + int(rng.integers(0, 5)), r + int(rng.integers(0, 5))
    ad = PqLoraAdapter(rng.standard_normal((r, d_in)), rng.standard_normal((d_out, r)), np.zeros((r, r)), np.zeros(r))
    assert span_dimension(ad) == r * r


def test_lora_shapes_and_zero_update(rng):
    lo = ad_mod.init_lora(4, 10, 6, rng)
    assert lo.A.shape == (4, 10) and lo.B.shape == (6, 4)
    np.testing.assert_array_equal(lo.delta_weight(), np.zeros((6, 10)))
    with pytest.raises(ValueError):
        LoraAdapter(np.zeros((2, 3)), np.zeros((3, 3)))


def test_adapter_set_structure(rng):
    ads = build_adapter_set([(4, 8), (8, 8), (8, 8), (8, 8), (8, 3)], 2, 4, rng)
    assert ads.pq_layers == [1, 2, 3, 5]
    assert all(isinstance(ads[l], PqLoraAdapter) for l in ads.pq_layers)
    assert isinstance(ads[4], LoraAdapter)
    names = [n for n, _ in ads.named_parameters()]
    assert names[:2] == ["001.P", "001.Q"] and "004.A" in names
    assert ads.pq_orthonormality_error() < 1e-10
    with pytest.raises(ValueError):
        AdapterSet(ads.layers, [1, 2, 5])


def test_checkpoint_roundtrip(tmp_path, rng):
    ads = build_adapter_set([(4, 8), (8, 8), (8, 8), (8, 3)], 2, 2, rng)
    ads.block(1).P[...] = rng.standard_normal((2, 2))
    save_adapters(tmp_path / "a.safetensors", ads, {"seed": 3, "note": "x"})
    back, meta = load_adapters(tmp_path / "a.safetensors")
    assert meta["note"] == "x" and meta["seed"] == "3"
    assert back.pq_layers == ads.pq_layers
    for (n1, a1), (n2, a2) in zip(ads.named_parameters(False), back.named_parameters(False)):
        assert n1 == n2
        np.testing.assert_array_equal(a1, a2)
    assert isinstance(back.block(1), PqLoraAdapter)


def test_checkpoint_tensor_order(tmp_path, rng):
    from safetensors import safe_open

    ads = build_adapter_set([(4, 8), (8, 8), (8, 3)], 2, 1, rng)
    save_adapters(tmp_path / "a.safetensors", ads)
    with safe_open(str(tmp_path / "a.safetensors"), framework="numpy") as f:
        keys = sorted(f.keys())
    assert keys == ["001.A", "001.B", "002.A", "002.B", "003.A", "003.B", "003.P", "003.Q"]
