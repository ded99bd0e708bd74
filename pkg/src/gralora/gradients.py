"""Analytic forward/backward passes for adapted layers, plus an FD verifier.

For a plain adapter the layer output is ``Y = W0 X + s B (A^T X)``; gradients
of a scalar loss with upstream signal ``dY`` are::

    dB   = s * dY X^T A
    dA^T = s * B^T dY X^T
    dR   = dB A^T + B dA^T          (fused weight space)
    dW   = dY X^T                   (full fine-tuning reference)
    dX   = (W0 + R)^T dY

The granular adapter applies the same formulas per block, where block
``(i, j)`` only ever sees the ``i``-th output slice of ``dY`` and the
``j``-th input slice of ``X``. That slice dependence is the whole point: it
is what localizes outlier influence.

The scale ``s`` is carried through the chain rule rather than assumed 1, so
gradients stay correct when ``alpha != r``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from .adapters import (
    AdaptedLayer,
    Adapter,
    GraLoraAdapter,
    HybridGraLoraAdapter,
    LoraAdapter,
    assemble_grid,
    factors,
    fused_update,
    split_rows,
)
from .linalg import Matrix, ShapeError, frobenius_norm

PROBE_TARGET_SEED = 20240917


class GradientCheckError(RuntimeError):
    """Finite differencing hit a non-finite loss; names the offending factor."""


@dataclass
class LayerGradients:
    """Gradients of one scalar loss through an adapted layer.

    ``factor_grads`` mirrors :func:`gralora.adapters.factors` key-for-key.
    ``d_fused`` is the gradient pulled back to the fused update (``dR``),
    ``d_w_fft`` the full fine-tuning gradient ``dY X^T``, and ``dx`` the
    gradient w.r.t. the layer input.
    """

    factor_grads: Dict[str, np.ndarray]
    d_fused: Matrix
    d_w_fft: Matrix
    dx: Matrix

    @property
    def d_a(self) -> np.ndarray:
        return self.factor_grads["a"]

    @property
    def d_b(self) -> np.ndarray:
        return self.factor_grads["b"]


def _adapter_output(adapter: Adapter, x: Matrix) -> Matrix:
    """``R X`` computed in the low-rank order (never materializes R)."""
    if isinstance(adapter, LoraAdapter):
        return adapter.s * (adapter.b @ (adapter.a.T @ x))
    if isinstance(adapter, GraLoraAdapter):
        xb = split_rows(x, adapter.k)
        latent = np.einsum("ijnr,jnt->ijrt", adapter.a, xb, optimize=True)
        out = np.einsum("ijmr,ijrt->imt", adapter.b, latent, optimize=True)
        return adapter.s * out.reshape(adapter.out_dim, x.shape[1])
    if isinstance(adapter, HybridGraLoraAdapter):
        return _adapter_output(adapter.lora, x) + _adapter_output(adapter.gralora, x)
    raise TypeError(f"not an adapter: {type(adapter)!r}")


def forward(layer: AdaptedLayer, x: Matrix) -> Matrix:
    """Layer output ``W0 X + R X`` of shape ``(M, T)``."""
    if x.ndim != 2 or x.shape[0] != layer.in_dim:
        raise ShapeError(
            f"input shape {tuple(x.shape)} does not match layer input dim {layer.in_dim}"
        )
    return layer.w0 @ x + _adapter_output(layer.adapter, x)


# ---------------------------------------------------------------------------
# Backward passes


def _lora_factor_grads(adapter: LoraAdapter, g: Matrix):
    """(db, da, d_fused_part) for one plain adapter given ``g = dY X^T``."""
    s = adapter.s
    db = s * (g @ adapter.a)
    da = s * (g.T @ adapter.b)
    d_fused = db @ adapter.a.T + adapter.b @ da.T
    return db, da, d_fused


def _gralora_factor_grads(adapter: GraLoraAdapter, x: Matrix, dy: Matrix):
    """Block-wise gradients; block (i, j) sees only dY_i and X_j."""
    k, s = adapter.k, adapter.s
    xb = split_rows(x, k)
    dyb = split_rows(dy, k)
    gb = np.einsum("imt,jnt->ijmn", dyb, xb, optimize=True)
    db = s * np.einsum("ijmn,ijnr->ijmr", gb, adapter.a, optimize=True)
    da = s * np.einsum("ijmn,ijmr->ijnr", gb, adapter.b, optimize=True)
    grid = np.einsum("ijmr,ijnr->ijmn", db, adapter.a, optimize=True)
    grid += np.einsum("ijmr,ijnr->ijmn", adapter.b, da, optimize=True)
    return db, da, assemble_grid(grid)


def backward_lora(layer: AdaptedLayer, x: Matrix, dy: Matrix) -> LayerGradients:
    """Gradients for a plain-adapter layer."""
    adapter = layer.adapter
    if not isinstance(adapter, LoraAdapter):
        raise TypeError(f"expected a plain adapter, got {type(adapter).__name__}")
    _check_backward_shapes(layer, x, dy)
    g = dy @ x.T
    db, da, d_fused = _lora_factor_grads(adapter, g)
    dx = (layer.w0 + fused_update(adapter)).T @ dy
    return LayerGradients(
        factor_grads={"a": da, "b": db}, d_fused=d_fused, d_w_fft=g, dx=dx
    )


def backward_gralora(layer: AdaptedLayer, x: Matrix, dy: Matrix) -> LayerGradients:
    """Gradients for a granular-adapter layer."""
    adapter = layer.adapter
    if not isinstance(adapter, GraLoraAdapter):
        raise TypeError(f"expected a granular adapter, got {type(adapter).__name__}")
    _check_backward_shapes(layer, x, dy)
    db, da, d_fused = _gralora_factor_grads(adapter, x, dy)
    dx = (layer.w0 + fused_update(adapter)).T @ dy
    return LayerGradients(
        factor_grads={"a": da, "b": db}, d_fused=d_fused, d_w_fft=dy @ x.T, dx=dx
    )


def backward(layer: AdaptedLayer, x: Matrix, dy: Matrix) -> LayerGradients:
    """Dispatch on the adapter kind; hybrid composes both parts additively."""
    adapter = layer.adapter
    if isinstance(adapter, LoraAdapter):
        return backward_lora(layer, x, dy)
    if isinstance(adapter, GraLoraAdapter):
        return backward_gralora(layer, x, dy)
    if isinstance(adapter, HybridGraLoraAdapter):
        _check_backward_shapes(layer, x, dy)
        g = dy @ x.T
        db_l, da_l, fused_l = _lora_factor_grads(adapter.lora, g)
        db_g, da_g, fused_g = _gralora_factor_grads(adapter.gralora, x, dy)
        dx = (layer.w0 + fused_update(adapter)).T @ dy
        return LayerGradients(
            factor_grads={
                "lora.a": da_l,
                "lora.b": db_l,
                "gralora.a": da_g,
                "gralora.b": db_g,
            },
            d_fused=fused_l + fused_g,
            d_w_fft=g,
            dx=dx,
        )
    raise TypeError(f"not an adapter: {type(adapter)!r}")


def _check_backward_shapes(layer: AdaptedLayer, x: Matrix, dy: Matrix) -> None:
    if x.ndim != 2 or x.shape[0] != layer.in_dim:
        raise ShapeError(
            f"input shape {tuple(x.shape)} does not match layer input dim {layer.in_dim}"
        )
    if dy.shape != (layer.out_dim, x.shape[1]):
        raise ShapeError(
            f"upstream gradient shape {tuple(dy.shape)} does not match "
            f"output shape ({layer.out_dim}, {x.shape[1]})"
        )


# ---------------------------------------------------------------------------
# Finite-difference verification


def probe_loss(y: Matrix, target: Matrix) -> tuple[float, Matrix]:
    """Squared-error probe ``0.5 * ||Y - target||_F^2`` and its ``dY``."""
    diff = y - target
    return 0.5 * float(np.sum(diff * diff)), diff


def default_probe_target(layer: AdaptedLayer, t: int) -> Matrix:
    """Fixed random target so the probe's dY is dense and reproducible."""
    rng = np.random.default_rng(PROBE_TARGET_SEED)
    return rng.standard_normal((layer.out_dim, t))


@dataclass
class FactorCheck:
    max_rel_error: float
    per_block: Optional[np.ndarray] = None  # (k, k) grid for granular factors


@dataclass
class GradCheckReport:
    """Per-factor agreement between analytic and central-difference gradients."""

    factor_checks: Dict[str, FactorCheck]
    h: float
    tol: float
    passed: bool = field(init=False)
    max_rel_error: float = field(init=False)

    def __post_init__(self) -> None:
        self.max_rel_error = max(
            (c.max_rel_error for c in self.factor_checks.values()), default=0.0
        )
        self.passed = self.max_rel_error <= self.tol

    def to_json_dict(self) -> dict:
        out: dict = {"h": self.h, "tol": self.tol, "passed": self.passed}
        out["max_rel_error"] = self.max_rel_error
        out["factors"] = {}
        for name, check in self.factor_checks.items():
            entry: dict = {"max_rel_error": check.max_rel_error}
            if check.per_block is not None:
                entry["per_block_max_rel_error"] = check.per_block.tolist()
            out["factors"][name] = entry
        return out


def check_gradients(
    layer: AdaptedLayer,
    x: Matrix,
    *,
    y_target: Optional[Matrix] = None,
    loss_fn: Optional[Callable[[Matrix], tuple[float, Matrix]]] = None,
    h: float = 1e-5,
    tol: float = 1e-5,
    sign_flip: Optional[str] = None,
) -> GradCheckReport:
    """Compare analytic factor gradients against central finite differences.

    The loss defaults to the squared-error probe against ``y_target`` (itself
    defaulting to a fixed random matrix). ``h`` is scaled per factor by
    ``max(1, |theta|_inf)``. Relative error is measured against the larger of
    the two gradients' max magnitudes, floored at 1e-8 so an all-zero pair
    counts as exact agreement. ``sign_flip`` negates one factor's analytic
    gradient before comparison; it exists as a negative-control hook.
    """
    if h <= 0:
        raise ValueError(f"step size h must be positive, got {h}")
    if loss_fn is None:
        if y_target is None:
            y_target = default_probe_target(layer, x.shape[1])
        target = y_target

        def loss_fn(y: Matrix) -> tuple[float, Matrix]:
            return probe_loss(y, target)

    loss0, dy = loss_fn(forward(layer, x))
    if not np.isfinite(loss0):
        raise GradientCheckError("loss is non-finite at the unperturbed point")
    analytic = backward(layer, x, dy)

    checks: Dict[str, FactorCheck] = {}
    for name, theta in factors(layer.adapter).items():
        a_grad = analytic.factor_grads[name]
        if sign_flip == name:
            a_grad = -a_grad
        n_grad = np.zeros_like(theta)
        scale = max(1.0, float(np.max(np.abs(theta))) if theta.size else 1.0)
        hh = h * scale
        flat = theta.reshape(-1)
        n_flat = n_grad.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + hh
            lp, _ = loss_fn(forward(layer, x))
            flat[idx] = orig - hh
            lm, _ = loss_fn(forward(layer, x))
            flat[idx] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise GradientCheckError(
                    f"non-finite loss while perturbing factor {name!r} entry {idx}"
                )
            n_flat[idx] = (lp - lm) / (2.0 * hh)

        denom = max(
            float(np.max(np.abs(a_grad))) if a_grad.size else 0.0,
            float(np.max(np.abs(n_grad))) if n_grad.size else 0.0,
            1e-8,
        )
        err = np.abs(a_grad - n_grad) / denom
        per_block = None
        if err.ndim == 4:  # granular factor: reduce to the (k, k) block grid
            per_block = err.max(axis=(2, 3))
        checks[name] = FactorCheck(
            max_rel_error=float(err.max()) if err.size else 0.0, per_block=per_block
        )
    return GradCheckReport(factor_checks=checks, h=h, tol=tol)


def dump_factor_grads_csv(grads: LayerGradients, directory) -> list:
    """Write one CSV per factor gradient; returns the written paths."""
    from pathlib import Path

    from .linalg import write_csv

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, grad in grads.factor_grads.items():
        flat = grad.reshape(-1, grad.shape[-1]) if grad.ndim == 4 else grad
        path = directory / f"grad_{name.replace('.', '_')}.csv"
        write_csv(np.asarray(flat, dtype=np.float64), path)
        written.append(path)
    for name, mat in (
        ("fused", grads.d_fused),
        ("w_fft", grads.d_w_fft),
        ("x", grads.dx),
    ):
        path = directory / f"grad_{name}.csv"
        write_csv(mat, path)
        written.append(path)
    return written
