"""Analytic gradients against central finite differences, plus structure."""

import numpy as np
import pytest

from gralora.adapters import AdaptedLayer, fused_update, init_adapter, randomize_factors
from gralora.gradients import (
    GradientCheckError,
    backward,
    backward_gralora,
    backward_lora,
    check_gradients,
    default_probe_target,
    forward,
    probe_loss,
)
from gralora.linalg import ShapeError, frobenius_norm


def make_layer(kind, m=12, n=16, r=4, k=2, seed=0, ratio=None):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    ad = randomize_factors(init_adapter(kind, m, n, r, k=k, ratio=ratio, seed=seed), rng)
    w0 = rng.standard_normal((m, n)) / np.sqrt(n)
    x = rng.standard_normal((n, 6))
    return AdaptedLayer(w0, ad), x


def test_forward_matches_dense_path():
    layer, x = make_layer("gralora")
    expect = (layer.w0 + fused_update(layer.adapter)) @ x
    assert np.allclose(forward(layer, x), expect, atol=1e-12)


def test_forward_shape_error():
    layer, _ = make_layer("lora")
    with pytest.raises(ShapeError):
        forward(layer, np.zeros((7, 3)))


@pytest.mark.parametrize("kind,k", [("lora", 1), ("gralora", 2), ("gralora", 4), ("hybrid", 2)])
def test_finite_difference_agreement(kind, k):
    layer, x = make_layer(kind, m=16, n=16, r=4, k=k, seed=3)
    report = check_gradients(layer, x)
    assert report.passed, report.to_json_dict()
    assert report.max_rel_error <= 1e-6


def test_sign_flip_is_caught():
    layer, x = make_layer("lora", seed=7)
    report = check_gradients(layer, x, sign_flip="b")
    assert not report.passed


def test_check_rejects_bad_step():
    layer, x = make_layer("lora")
    with pytest.raises(ValueError):
        check_gradients(layer, x, h=0.0)


def test_fused_gradient_internal_identity():
    # the two-term factor form equals the projected dense gradient
    layer, x = make_layer("lora", m=20, n=14, r=5, seed=11)
    ad = layer.adapter
    rng = np.random.default_rng(12)
    dy = rng.standard_normal((20, 6))
    grads = backward_lora(layer, x, dy)
    g = dy @ x.T
    direct = ad.s * (g @ ad.a @ ad.a.T + ad.b @ ad.b.T @ g)
    rel = frobenius_norm(grads.d_fused - direct) / frobenius_norm(direct)
    assert rel <= 1e-12


def test_gralora_blocks_see_only_their_slices():
    layer, x = make_layer("gralora", m=16, n=16, r=4, k=2, seed=13)
    rng = np.random.default_rng(14)
    dy = rng.standard_normal((16, 6))
    grads = backward_gralora(layer, x, dy)
    # change an input slice belonging to block column 1; block column 0 grads stay
    x2 = x.copy()
    x2[8:, :] += 1.0
    grads2 = backward_gralora(layer, x2, dy)
    assert np.array_equal(grads.factor_grads["b"][:, 0], grads2.factor_grads["b"][:, 0])
    assert not np.array_equal(grads.factor_grads["b"][:, 1], grads2.factor_grads["b"][:, 1])


def test_dx_matches_merged_weight_transpose():
    layer, x = make_layer("gralora", seed=15)
    rng = np.random.default_rng(16)
    dy = rng.standard_normal((12, 6))
    grads = backward(layer, x, dy)
    expect = (layer.w0 + fused_update(layer.adapter)).T @ dy
    assert np.allclose(grads.dx, expect, atol=1e-12)


def test_hybrid_backward_sums_parts():
    layer, x = make_layer("hybrid", m=16, n=16, r=8, k=2, ratio=0.5, seed=17)
    rng = np.random.default_rng(18)
    dy = rng.standard_normal((16, 6))
    grads = backward(layer, x, dy)
    lora_layer = AdaptedLayer(layer.w0, layer.adapter.lora)
    gra_layer = AdaptedLayer(layer.w0, layer.adapter.gralora)
    d_lora = backward_lora(lora_layer, x, dy).d_fused
    d_gra = backward_gralora(gra_layer, x, dy).d_fused
    assert np.allclose(grads.d_fused, d_lora + d_gra, atol=1e-12)


def test_backward_type_dispatch_guards():
    layer, x = make_layer("lora")
    dy = np.zeros((12, 6))
    with pytest.raises(TypeError):
        backward_gralora(layer, x, dy)


def test_probe_loss_quadratic():
    y = np.array([[1.0, 2.0], [3.0, 4.0]])
    target = np.zeros((2, 2))
    loss, diff = probe_loss(y, target)
    assert loss == pytest.approx(0.5 * (1 + 4 + 9 + 16))
    assert np.array_equal(diff, y)


def test_default_probe_target_is_reproducible():
    layer, _ = make_layer("lora")
    t1 = default_probe_target(layer, 3)
    t2 = default_probe_target(layer, 3)
    assert np.array_equal(t1, t2)


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_loss_raises_named_error():
    layer, x = make_layer("lora", seed=19)
    huge = np.full((12, 6), 1e200)

    def bad_loss(y):
        return probe_loss(y, -huge)

    with pytest.raises(GradientCheckError):
        check_gradients(layer, x, loss_fn=bad_loss)


def test_per_block_errors_reported_for_grids():
    layer, x = make_layer("gralora", m=16, n=16, r=4, k=2, seed=21)
    report = check_gradients(layer, x)
    per_block = report.factor_checks["b"].per_block
    assert per_block is not None and np.asarray(per_block).shape == (2, 2)
