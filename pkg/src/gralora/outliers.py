"""Synthetic outlier channels and gradient-distortion measurements.

Full fine-tuning responds to a high-magnitude input channel locally: only
the matching column of ``dW = dY X^T`` lights up. A plain low-rank adapter
mixes that column into every column of ``dB`` through the factor ``A``,
distorting the whole update; a granular adapter confines the damage to the
block column whose input slice contains the channel. The helpers here
construct such inputs, quantify the distortion against the full fine-tuning
gradient, and sweep it across ranks and grid sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .adapters import (
    AdaptedLayer,
    GraLoraAdapter,
    init_adapter,
)
from .gradients import backward, backward_gralora, forward
from .linalg import Matrix, frobenius_norm


class MetricError(ValueError):
    """Deviation metrics are undefined for zero-norm gradients."""


@dataclass(frozen=True)
class OutlierSpec:
    """Input channels to amplify and by how much.

    ``magnitude_ratio == 1`` leaves the baseline unit-variance Gaussian
    untouched; larger ratios scale the selected rows of X.
    """

    channel_indices: Tuple[int, ...] = ()
    magnitude_ratio: float = 1.0

    def __post_init__(self) -> None:
        if not np.isfinite(self.magnitude_ratio) or self.magnitude_ratio < 1.0:
            raise ValueError(
                f"magnitude_ratio must be finite and >= 1, got {self.magnitude_ratio}"
            )
        object.__setattr__(self, "channel_indices", tuple(self.channel_indices))

    def validate_for(self, n: int) -> None:
        for c in self.channel_indices:
            if not 0 <= c < n:
                raise IndexError(f"outlier channel {c} out of range [0, {n})")


@dataclass
class DeviationReport:
    """How far one fused-space gradient is from the full fine-tuning one."""

    cosine_distance: float
    normalized_frobenius_gap: float
    per_block_grad_norms: Optional[np.ndarray] = None


def make_outlier_input(
    n: int, t: int, spec: OutlierSpec, seed: int | np.random.Generator = 0
) -> Matrix:
    """Gaussian ``(N, T)`` batch with the named channel rows scaled up."""
    if n < 1 or t < 1:
        raise ValueError(f"input dims must be positive, got N={n}, T={t}")
    spec.validate_for(n)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = rng.standard_normal((n, t))
    if spec.channel_indices and spec.magnitude_ratio != 1.0:
        x[list(spec.channel_indices), :] *= spec.magnitude_ratio
    return x


def gradient_deviation(g_adapter: Matrix, g_fft: Matrix) -> DeviationReport:
    """Cosine distance and unit-normalized Frobenius gap between gradients.

    ``cosine_distance = 1 - <G1, G2> / (|G1| |G2|)`` is zero exactly when the
    gradients are positive scalar multiples of each other and 2 when they are
    antipodal. Both metrics are invariant to positive rescaling of either
    argument, so scale conventions and learning rates drop out.
    """
    if g_adapter.shape != g_fft.shape:
        raise MetricError(
            f"gradient shapes differ: {tuple(g_adapter.shape)} vs {tuple(g_fft.shape)}"
        )
    n1 = frobenius_norm(g_adapter)
    n2 = frobenius_norm(g_fft)
    if n1 == 0.0 or n2 == 0.0:
        raise MetricError("deviation metrics are undefined for a zero gradient")
    u1 = g_adapter / n1
    u2 = g_fft / n2
    cos = float(np.sum(u1 * u2))
    return DeviationReport(
        cosine_distance=1.0 - cos,
        normalized_frobenius_gap=frobenius_norm(u1 - u2),
    )


# ---------------------------------------------------------------------------
# Block-level gradient locality


@dataclass
class LocalityProfile:
    """Per-block Frobenius norms of the granular factor gradients."""

    db_norms: np.ndarray  # (k, k)
    da_norms: np.ndarray  # (k, k)

    @property
    def k(self) -> int:
        return self.db_norms.shape[0]


def locality_profile(layer: AdaptedLayer, x: Matrix, dy: Matrix) -> LocalityProfile:
    """Block-norm map of the gradient; outliers light up one block column."""
    if not isinstance(layer.adapter, GraLoraAdapter):
        raise TypeError("locality profiles require a granular adapter")
    grads = backward_gralora(layer, x, dy)
    db = grads.factor_grads["b"]
    da = grads.factor_grads["a"]
    return LocalityProfile(
        db_norms=np.sqrt(np.sum(db * db, axis=(2, 3))),
        da_norms=np.sqrt(np.sum(da * da, axis=(2, 3))),
    )


def intersecting_block_columns(spec: OutlierSpec, n: int, k: int) -> Tuple[int, ...]:
    """Grid columns whose input slice contains an outlier channel."""
    spec.validate_for(n)
    width = n // k
    return tuple(sorted({c // width for c in spec.channel_indices}))


# ---------------------------------------------------------------------------
# Rank sweep: deviation after a short training run


@dataclass(frozen=True)
class SweepProtocol:
    """How a deviation cell is measured.

    Each cell trains its adapter for ``train_steps`` on outlier-bearing
    batches against a dense teacher update (the kind of target full
    fine-tuning reaches directly), then averages the fused-gradient deviation
    over ``measure_batches`` fresh batches at the frozen final state.

    Measuring at a trained state matters. At the zero-output init the fused
    gradient is a plain two-sided projection of the full gradient, so its
    alignment only reflects subspace dimension and actually improves with
    rank. Training first pulls the factors toward the gradient's dominant
    directions, then the outlier channel inflates the input-side factor row
    it touches; that inflation compounds faster at higher rank and drags the
    fused gradient away from the dense one. The step budget and learning rate
    below sit inside that window (plain gradient descent; sign-based updates
    erase the scale asymmetry the effect lives on).
    """

    t: int = 128
    train_steps: int = 60
    measure_batches: int = 8
    lr: float = 3e-6
    optimizer: str = "sgd"
    teacher_scale: float = 1.0
    noise_std: float = 0.0


DEFAULT_GEOMETRY = (256, 256)  # (M, N) desk-scale default
DEFAULT_RATIO = 100.0


@dataclass
class SweepCell:
    method: str
    rank: int
    k: int
    seed: int
    cosine_distance: float
    frobenius_gap: float


def deviation_cell(
    m: int,
    n: int,
    rank: int,
    k: int,
    spec: OutlierSpec,
    seed: int,
    root_seed: int = 0,
    protocol: SweepProtocol = SweepProtocol(),
) -> SweepCell:
    """Measure one (rank, k, seed) cell of the deviation sweep."""
    from .training import OptimizerState, apply_gradients  # local: avoids cycle

    ss = np.random.SeedSequence([root_seed, rank, k, seed])
    rng_model, rng_data = [np.random.default_rng(s) for s in ss.spawn(2)]

    w0 = rng_model.standard_normal((m, n)) / np.sqrt(n)
    delta = protocol.teacher_scale * rng_model.standard_normal((m, n)) / np.sqrt(n)
    kind = "lora" if k == 1 else "gralora"
    adapter = init_adapter(
        kind, m, n, rank, k=k, seed=int(rng_model.integers(2**63))
    )
    layer = AdaptedLayer(w0=w0, adapter=adapter)
    teacher_w = w0 + delta

    opt = OptimizerState.create(protocol.optimizer, adapter, lr=protocol.lr)

    def batch_dy():
        x = make_outlier_input(n, protocol.t, spec, rng_data)
        y_teacher = teacher_w @ x
        if protocol.noise_std > 0.0:
            y_teacher = y_teacher + protocol.noise_std * rng_data.standard_normal(
                y_teacher.shape
            )
        return x, (forward(layer, x) - y_teacher) / protocol.t

    for _ in range(protocol.train_steps):
        x, dy = batch_dy()
        grads = backward(layer, x, dy)
        apply_gradients(adapter, grads.factor_grads, opt)

    cos_vals: List[float] = []
    gap_vals: List[float] = []
    for _ in range(protocol.measure_batches):
        x, dy = batch_dy()
        grads = backward(layer, x, dy)
        report = gradient_deviation(grads.d_fused, grads.d_w_fft)
        cos_vals.append(report.cosine_distance)
        gap_vals.append(report.normalized_frobenius_gap)

    return SweepCell(
        method=kind,
        rank=rank,
        k=k,
        seed=seed,
        cosine_distance=float(np.mean(cos_vals)),
        frobenius_gap=float(np.mean(gap_vals)),
    )


def rank_sweep_deviation(
    ranks: Sequence[int],
    k_values: Sequence[int],
    seeds: Sequence[int],
    *,
    m: int = DEFAULT_GEOMETRY[0],
    n: int = DEFAULT_GEOMETRY[1],
    spec: Optional[OutlierSpec] = None,
    root_seed: int = 0,
    protocol: SweepProtocol = SweepProtocol(),
) -> List[SweepCell]:
    """Deviation table over ranks x grid sizes x seeds (k=1 rows are plain).

    Cells are independent; rows come back sorted by (rank, k, seed).
    """
    if spec is None:
        spec = OutlierSpec(channel_indices=(n // 3,), magnitude_ratio=DEFAULT_RATIO)
    cells = []
    for rank in ranks:
        for k in k_values:
            for seed in seeds:
                cells.append(
                    deviation_cell(
                        m, n, rank, k, spec, seed, root_seed=root_seed, protocol=protocol
                    )
                )
    cells.sort(key=lambda c: (c.rank, c.k, c.seed))
    return cells


def summarize_sweep(cells: Sequence[SweepCell]) -> List[dict]:
    """Mean and standard deviation per (method, rank, k) cell group."""
    grouped: Dict[Tuple[str, int, int], List[SweepCell]] = {}
    for cell in cells:
        grouped.setdefault((cell.method, cell.rank, cell.k), []).append(cell)
    out = []
    for (method, rank, k), group in sorted(grouped.items(), key=lambda kv: (kv[0][1], kv[0][2])):
        cos = np.array([c.cosine_distance for c in group])
        gap = np.array([c.frobenius_gap for c in group])
        out.append(
            {
                "method": method,
                "rank": rank,
                "k": k,
                "n_seeds": len(group),
                "cosine_mean": float(cos.mean()),
                "cosine_std": float(cos.std(ddof=1)) if len(group) > 1 else 0.0,
                "frobenius_mean": float(gap.mean()),
                "frobenius_std": float(gap.std(ddof=1)) if len(group) > 1 else 0.0,
            }
        )
    return out
