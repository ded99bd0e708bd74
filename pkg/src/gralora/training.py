"""Desk-scale adapter optimization on synthetic teacher-student tasks.

A task hides a known weight delta behind a frozen base matrix; training sees
only input/output pairs, so the recovered fused update can be compared to the
ground truth directly. That gives a measurable notion of "how much of the
target update the adapter reached", which no text benchmark provides at this
scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .adapters import (
    AdaptedLayer,
    Adapter,
    ConfigError,
    factors,
    fused_update,
)
from .gradients import backward, forward
from .linalg import Matrix, frobenius_norm
from .outliers import OutlierSpec, make_outlier_input

TASK_STRUCTURES = ("low_rank", "block_heterogeneous", "outlier_aligned")

DIVERGENCE_FACTOR = 1e6


class TrainingError(RuntimeError):
    """Raised when a step produces a non-finite loss."""


# ---------------------------------------------------------------------------
# Teacher tasks


@dataclass
class TeacherTask:
    """Frozen base weight plus a hidden target update.

    Teacher outputs are ``(w0 + delta) @ X`` plus optional Gaussian noise.
    ``input_spec`` controls the input distribution (outlier channels or plain
    unit Gaussian).
    """

    w0: Matrix
    delta: Matrix
    structure: str
    noise_std: float
    data_seed: int
    input_spec: Optional[OutlierSpec] = None

    @property
    def out_dim(self) -> int:
        return self.w0.shape[0]

    @property
    def in_dim(self) -> int:
        return self.w0.shape[1]

    def sample_batch(self, t: int, rng: np.random.Generator) -> Tuple[Matrix, Matrix]:
        n = self.in_dim
        if self.input_spec is not None:
            x = make_outlier_input(n, t, self.input_spec, rng)
        else:
            x = rng.standard_normal((n, t))
        y = (self.w0 + self.delta) @ x
        if self.noise_std > 0.0:
            y = y + self.noise_std * rng.standard_normal(y.shape)
        return x, y


def make_task(
    structure: str,
    m: int,
    n: int,
    *,
    seed: int = 0,
    noise_std: float = 0.0,
    rank: int = 4,
    grid: int = 4,
    outlier: Optional[OutlierSpec] = None,
    delta_norm: Optional[float] = None,
    input_spec: Optional[OutlierSpec] = None,
) -> TeacherTask:
    """Build a teacher task with the requested delta structure.

    ``low_rank``: delta is a generic rank-``rank`` product. ``block_heterogeneous``:
    each cell of a ``grid x grid`` partition is an independent rank-``rank``
    product with a log-uniform per-block scale. ``outlier_aligned``: delta mass
    is concentrated on the columns named by ``outlier``. The delta is rescaled
    to Frobenius norm ``delta_norm`` (default ``sqrt(M)``, the expected norm of
    the base weight).
    """
    if structure not in TASK_STRUCTURES:
        raise ConfigError(
            f"unknown task structure {structure!r}, expected one of {TASK_STRUCTURES}"
        )
    if noise_std < 0.0:
        raise ConfigError(f"noise_std must be >= 0, got {noise_std}")
    ss = np.random.SeedSequence([seed, 0x7A5C])
    rng_w0, rng_delta, rng_data = [np.random.default_rng(s) for s in ss.spawn(3)]
    w0 = rng_w0.standard_normal((m, n)) / np.sqrt(n)

    if structure == "low_rank":
        u = rng_delta.standard_normal((m, rank))
        v = rng_delta.standard_normal((n, rank))
        delta = u @ v.T
    elif structure == "block_heterogeneous":
        if m % grid != 0 or n % grid != 0:
            raise ConfigError(f"grid={grid} does not divide M={m} or N={n}")
        mb, nb = m // grid, n // grid
        delta = np.zeros((m, n))
        for i in range(grid):
            for j in range(grid):
                u = rng_delta.standard_normal((mb, rank))
                v = rng_delta.standard_normal((nb, rank))
                scale = 10.0 ** rng_delta.uniform(-1.0, 1.0)
                delta[i * mb : (i + 1) * mb, j * nb : (j + 1) * nb] = scale * (u @ v.T)
    else:  # outlier_aligned
        if outlier is None or not outlier.channel_indices:
            raise ConfigError("outlier_aligned tasks need an OutlierSpec with channels")
        outlier.validate_for(n)
        delta = rng_delta.standard_normal((m, n))
        delta[:, list(outlier.channel_indices)] *= outlier.magnitude_ratio

    norm = frobenius_norm(delta)
    if norm > 0.0:
        target = float(np.sqrt(m)) if delta_norm is None else delta_norm
        delta = delta * (target / norm)
    data_seed = int(np.random.default_rng(ss.spawn(1)[0]).integers(2**62))
    return TeacherTask(
        w0=w0,
        delta=delta,
        structure=structure,
        noise_std=noise_std,
        data_seed=data_seed,
        input_spec=input_spec,
    )


def zero_delta_task(m: int, n: int, *, seed: int = 0, noise_std: float = 0.0) -> TeacherTask:
    """Degenerate task whose optimum is the adapter's zero-update init."""
    rng_w0 = np.random.default_rng(np.random.SeedSequence([seed, 0x7A5C]).spawn(1)[0])
    w0 = rng_w0.standard_normal((m, n)) / np.sqrt(n)
    return TeacherTask(
        w0=w0,
        delta=np.zeros((m, n)),
        structure="low_rank",
        noise_std=noise_std,
        data_seed=seed,
    )


# ---------------------------------------------------------------------------
# Optimizers


@dataclass
class OptimizerState:
    """Per-factor momentum buffers plus the update-rule hyperparameters.

    ``sgd``: theta -= lr * g.
    ``lion_decoupled``: the sign of an interpolation of momentum and gradient
    drives the step, with weight decay applied to the parameter directly::

        c     = beta1 * m + (1 - beta1) * g
        theta -= lr * (sign(c) + weight_decay * theta)
        m      = beta2 * m + (1 - beta2) * g
    """

    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    momentum: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(
        cls,
        kind: str,
        adapter: Adapter,
        *,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.99,
        weight_decay: float = 0.0,
    ) -> "OptimizerState":
        if kind not in ("sgd", "lion_decoupled"):
            raise ConfigError(f"unknown optimizer kind {kind!r}")
        buffers = {name: np.zeros_like(arr) for name, arr in factors(adapter).items()}
        return cls(
            kind=kind,
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            weight_decay=weight_decay,
            momentum=buffers,
        )


def apply_gradients(
    adapter: Adapter, grads: Dict[str, np.ndarray], opt: OptimizerState
) -> None:
    """Update adapter factors in place; the base weight is never touched."""
    params = factors(adapter)
    for name, theta in params.items():
        g = grads[name]
        if opt.kind == "sgd":
            theta -= opt.lr * g
        else:
            m = opt.momentum[name]
            c = opt.beta1 * m + (1.0 - opt.beta1) * g
            theta -= opt.lr * (np.sign(c) + opt.weight_decay * theta)
            m *= opt.beta2
            m += (1.0 - opt.beta2) * g


def step(
    layer: AdaptedLayer, x: Matrix, y_teacher: Matrix, opt: OptimizerState
) -> float:
    """One optimization step on the batch; returns the pre-update loss.

    Loss is ``0.5 * ||Y - Y_teacher||_F^2 / T``.
    """
    t = x.shape[1]
    diff = forward(layer, x) - y_teacher
    loss = 0.5 * float(np.sum(diff * diff)) / t
    if not np.isfinite(loss):
        raise TrainingError(
            f"non-finite loss {loss!r} on a batch of width {t}; "
            f"adapter kind {type(layer.adapter).__name__}, lr={opt.lr}"
        )
    grads = backward(layer, x, diff / t)
    apply_gradients(layer.adapter, grads.factor_grads, opt)
    return loss


# ---------------------------------------------------------------------------
# Training loop and report


@dataclass
class TrainReport:
    """Loss trajectory plus update-recovery quality for one training run."""

    epoch_losses: List[float]
    final_eval_loss: float
    recovery_error: Optional[float]
    diverged: bool
    config: dict

    def to_json_dict(self) -> dict:
        return {
            "epoch_losses": self.epoch_losses,
            "final_eval_loss": self.final_eval_loss,
            "recovery_error": self.recovery_error,
            "diverged": self.diverged,
            "config": self.config,
        }


def evaluate(layer: AdaptedLayer, task: TeacherTask, *, batches: int = 8, t: int = 128) -> float:
    """Mean loss over held-out batches (fixed stream derived from the task)."""
    rng = np.random.default_rng(np.random.SeedSequence([task.data_seed, 0xE7A1]))
    total = 0.0
    for _ in range(batches):
        x, y = task.sample_batch(t, rng)
        diff = forward(layer, x) - y
        total += 0.5 * float(np.sum(diff * diff)) / t
    return total / batches


def train(
    layer: AdaptedLayer,
    task: TeacherTask,
    *,
    epochs: int,
    batch_size: int = 32,
    steps_per_epoch: int = 25,
    optimizer: Optional[OptimizerState] = None,
) -> TrainReport:
    """Run the optimization loop; deterministic given the task's data seed."""
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")
    if (task.out_dim, task.in_dim) != (layer.out_dim, layer.in_dim):
        raise ConfigError(
            f"task shape ({task.out_dim}, {task.in_dim}) does not match layer "
            f"({layer.out_dim}, {layer.in_dim})"
        )
    opt = optimizer or OptimizerState.create("lion_decoupled", layer.adapter)
    rng = np.random.default_rng(np.random.SeedSequence([task.data_seed, 0x7217]))

    epoch_losses: List[float] = []
    diverged = False
    initial_loss: Optional[float] = None
    for _ in range(epochs):
        losses = []
        for _ in range(steps_per_epoch):
            x, y = task.sample_batch(batch_size, rng)
            loss = step(layer, x, y, opt)
            if initial_loss is None:
                initial_loss = max(loss, np.finfo(np.float64).tiny)
            losses.append(loss)
            if loss > DIVERGENCE_FACTOR * initial_loss:
                diverged = True
                break
        epoch_losses.append(float(np.mean(losses)))
        if diverged:
            break

    delta_norm = frobenius_norm(task.delta)
    if delta_norm > 0.0:
        recovery = frobenius_norm(fused_update(layer.adapter) - task.delta) / delta_norm
    else:
        recovery = None
    return TrainReport(
        epoch_losses=epoch_losses,
        final_eval_loss=evaluate(layer, task),
        recovery_error=recovery,
        diverged=diverged,
        config={
            "epochs": epochs,
            "batch_size": batch_size,
            "steps_per_epoch": steps_per_epoch,
            "optimizer": opt.kind,
            "lr": opt.lr,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "weight_decay": opt.weight_decay,
            "structure": task.structure,
            "noise_std": task.noise_std,
        },
    )
