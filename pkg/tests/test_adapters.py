"""Adapter construction, reduction identities, sparse form, checkpoints."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gralora.adapters import (
    AdaptedLayer,
    ConfigError,
    GraLoraAdapter,
    HybridGraLoraAdapter,
    LoraAdapter,
    adapter_kind,
    assemble_grid,
    effective_rank,
    factors,
    fused_update,
    init_adapter,
    load_checkpoint,
    merge,
    param_count,
    randomize_factors,
    save_checkpoint,
    split_rows,
    to_regularized_form,
)
from gralora.linalg import ShapeError, frobenius_norm


def rand_adapter(kind, m, n, r, k=1, seed=0, ratio=None):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
    return randomize_factors(init_adapter(kind, m, n, r, k=k, ratio=ratio, seed=seed), rng)


# ---------------------------------------------------------------------------
# Construction and validation


def test_init_zero_output_side():
    ad = init_adapter("lora", 16, 12, 4, seed=1)
    assert np.all(ad.b == 0.0)
    assert not np.all(ad.a == 0.0)
    assert fused_update(ad).max() == 0.0


def test_init_input_variance_uses_layer_fan_in():
    # both the plain and granular input factors draw at variance 1/N
    n = 4096
    ad = init_adapter("gralora", 64, n, 32, k=4, seed=2)
    est = float(np.var(ad.a))
    assert est == pytest.approx(1.0 / n, rel=0.15)


def test_default_alpha_is_twice_rank():
    ad = init_adapter("lora", 8, 8, 4, seed=0)
    assert ad.alpha == 8.0
    assert ad.s == 2.0
    ad2 = init_adapter("gralora", 8, 8, 4, k=2, seed=0, alpha=1.0)
    assert ad2.s == 0.25


def test_divisibility_errors_name_the_violation():
    with pytest.raises(ConfigError, match="k=3 does not divide N=100"):
        init_adapter("gralora", 9, 100, 6, k=3)
    with pytest.raises(ConfigError, match="does not divide r"):
        init_adapter("gralora", 8, 8, 6, k=4)
    with pytest.raises(ConfigError):
        init_adapter("lora", 8, 8, 0)


def test_hybrid_ratio_split():
    ad = init_adapter("hybrid", 32, 32, 16, k=2, ratio=0.25, seed=0)
    assert isinstance(ad, HybridGraLoraAdapter)
    assert ad.lora.r == 4
    assert ad.gralora.r == 12
    assert ad.ratio == 0.25
    assert ad.r == 16
    # both parts share the total-budget scale
    assert ad.lora.s == pytest.approx(ad.alpha / 16)
    assert ad.gralora.s == pytest.approx(ad.alpha / 16)


def test_hybrid_ratio_extremes_degenerate_cleanly():
    full_lora = init_adapter("hybrid", 16, 16, 8, k=2, ratio=1.0, seed=3)
    assert full_lora.gralora.r == 0
    assert fused_update(full_lora).shape == (16, 16)
    full_gra = init_adapter("hybrid", 16, 16, 8, k=2, ratio=0.0, seed=3)
    assert full_gra.lora.r == 0


def test_layer_freezes_base_weight():
    ad = init_adapter("lora", 8, 8, 2, seed=0)
    layer = AdaptedLayer(np.zeros((8, 8)), ad)
    with pytest.raises(ValueError):
        layer.w0[0, 0] = 1.0


def test_layer_shape_mismatch():
    ad = init_adapter("lora", 8, 8, 2, seed=0)
    with pytest.raises(ShapeError):
        AdaptedLayer(np.zeros((8, 9)), ad)


# ---------------------------------------------------------------------------
# Reduction identities


def test_k1_matches_lora_bitwise_at_init():
    la = init_adapter("lora", 24, 16, 8, seed=9)
    ga = init_adapter("gralora", 24, 16, 8, k=1, seed=9)
    assert np.array_equal(la.a, ga.a[0, 0])
    assert np.array_equal(la.b, ga.b[0, 0])


def test_hybrid_ratio_one_matches_lora_stream():
    la = init_adapter("lora", 24, 16, 8, seed=9)
    hy = init_adapter("hybrid", 24, 16, 8, k=2, ratio=1.0, seed=9)
    assert np.array_equal(la.a, hy.lora.a)


def test_k1_fused_update_matches_lora():
    la = rand_adapter("lora", 24, 16, 8, seed=4)
    ga = rand_adapter("gralora", 24, 16, 8, k=1, seed=4)
    assert np.array_equal(la.a, ga.a[0, 0]) and np.array_equal(la.b, ga.b[0, 0])
    rel = frobenius_norm(fused_update(la) - fused_update(ga)) / frobenius_norm(fused_update(la))
    assert rel <= 1e-14


# ---------------------------------------------------------------------------
# Grid plumbing


def test_split_rows_round_trip():
    x = np.arange(24.0).reshape(6, 4)
    parts = split_rows(x, 3)
    assert parts.shape == (3, 2, 4)
    assert np.array_equal(np.concatenate(list(parts), axis=0), x)


def test_assemble_grid_places_blocks():
    blocks = np.zeros((2, 2, 3, 5))
    blocks[0, 1] = 1.0
    full = assemble_grid(blocks)
    assert full.shape == (6, 10)
    assert np.all(full[:3, 5:] == 1.0)
    assert full.sum() == 15.0


def test_fused_update_matches_block_loop():
    ad = rand_adapter("gralora", 12, 18, 6, k=3, seed=5)
    mb, nb = 12 // 3, 18 // 3
    expect = np.zeros((12, 18))
    for i in range(3):
        for j in range(3):
            expect[i * mb:(i + 1) * mb, j * nb:(j + 1) * nb] = (
                ad.s * ad.b[i, j] @ ad.a[i, j].T
            )
    assert np.allclose(fused_update(ad), expect, atol=1e-13)


def test_hybrid_fused_update_is_additive():
    hy = rand_adapter("hybrid", 16, 16, 8, k=2, ratio=0.5, seed=6)
    both = fused_update(hy)
    assert np.allclose(both, fused_update(hy.lora) + fused_update(hy.gralora), atol=1e-13)


# ---------------------------------------------------------------------------
# Sparse regularized form and rank


@pytest.mark.parametrize("k", [1, 2, 4])
def test_regularized_form_reproduces_update(k):
    ad = rand_adapter("gralora", 32, 32, 8, k=k, seed=k)
    a_g, b_g = to_regularized_form(ad)
    assert a_g.shape == (32, k * 8)
    assert b_g.shape == (32, k * 8)
    target = fused_update(ad) / ad.s
    rel = frobenius_norm(b_g @ a_g.T - target) / frobenius_norm(target)
    assert rel <= 1e-12


@pytest.mark.parametrize("k", [2, 4])
def test_regularized_form_nonzero_counts(k):
    m, n, r = 32, 24, 8
    ad = rand_adapter("gralora", m, n, r, k=k, seed=10 + k)
    a_g, b_g = to_regularized_form(ad)
    assert int(np.count_nonzero(a_g)) == n * r
    assert int(np.count_nonzero(b_g)) == m * r


def test_effective_rank_scales_with_k():
    for k, expected in [(1, 8), (2, 16), (4, 32)]:
        ad = rand_adapter("gralora", 64, 64, 8, k=k, seed=20 + k)
        assert effective_rank(ad) == expected


def test_effective_rank_saturates_at_min_dim():
    ad = rand_adapter("gralora", 16, 16, 8, k=4, seed=30)
    assert effective_rank(ad) == 16  # kr = 32 > min dim


# ---------------------------------------------------------------------------
# Parameters, merge, kinds


@given(st.integers(1, 4), st.integers(1, 16), st.integers(1, 16), st.integers(1, 8))
@settings(max_examples=100)
def test_param_count_invariant_in_k(log2k, mb, nb, rb):
    k = 2 ** (log2k - 1)
    m, n, r = mb * k, nb * k, rb * k
    plain = init_adapter("lora", m, n, r, seed=0)
    gran = init_adapter("gralora", m, n, r, k=k, seed=0)
    assert param_count(plain) == param_count(gran) == r * (m + n)


def test_param_count_hybrid():
    hy = init_adapter("hybrid", 32, 16, 8, k=2, ratio=0.5, seed=0)
    assert param_count(hy) == 8 * (32 + 16)


def test_merge_adds_fused_update():
    ad = rand_adapter("gralora", 16, 16, 4, k=2, seed=40)
    w0 = np.random.default_rng(0).standard_normal((16, 16))
    layer = AdaptedLayer(w0, ad)
    assert np.allclose(merge(layer), w0 + fused_update(ad), atol=1e-14)


def test_adapter_kind_names():
    assert adapter_kind(init_adapter("lora", 4, 4, 2, seed=0)) == "lora"
    assert adapter_kind(init_adapter("gralora", 4, 4, 2, k=2, seed=0)) == "gralora"
    assert adapter_kind(init_adapter("hybrid", 4, 4, 2, k=1, ratio=0.5, seed=0)) == "hybrid"


def test_factors_views_are_live():
    ad = init_adapter("lora", 8, 8, 2, seed=0)
    factors(ad)["b"][:] = 1.0
    assert np.all(ad.b == 1.0)


# ---------------------------------------------------------------------------
# Checkpoints


@pytest.mark.parametrize("kind,kwargs", [
    ("lora", {}),
    ("gralora", {"k": 4}),
    ("hybrid", {"k": 2, "ratio": 0.25}),
])
def test_checkpoint_round_trip(tmp_path, kind, kwargs):
    ad = rand_adapter(kind, 16, 32, 8, seed=50, **kwargs)
    path = tmp_path / "ad.ckpt"
    save_checkpoint(ad, path, seed=123)
    back, meta = load_checkpoint(path)
    assert meta["kind"] == kind
    assert meta["seed"] == 123
    for name, arr in factors(ad).items():
        assert np.array_equal(arr, factors(back)[name])
    assert np.array_equal(fused_update(ad), fused_update(back))


def test_checkpoint_rejects_truncated_payload(tmp_path):
    ad = rand_adapter("lora", 8, 8, 4, seed=60)
    path = tmp_path / "ad.ckpt"
    save_checkpoint(ad, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-16])
    with pytest.raises(ConfigError):
        load_checkpoint(path)


def test_randomize_factors_changes_output_side():
    ad = init_adapter("lora", 8, 8, 4, seed=70)
    rng = np.random.default_rng(1)
    ad = randomize_factors(ad, rng)
    assert not np.all(ad.b == 0.0)


def test_adapter_types_expose_dims():
    la = init_adapter("lora", 10, 20, 4, seed=0)
    assert isinstance(la, LoraAdapter)
    assert (la.out_dim, la.in_dim, la.r) == (10, 20, 4)
    ga = init_adapter("gralora", 10, 20, 4, k=2, seed=0)
    assert isinstance(ga, GraLoraAdapter)
    assert (ga.out_dim, ga.in_dim, ga.r, ga.k) == (10, 20, 4, 2)
