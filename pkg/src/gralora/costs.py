"""Exact FLOPs accounting, parameter counts, and the grid-size heuristic.

Convention: one scalar multiply = 1 FLOP, one scalar add = 1 FLOP, so a
length-n dot product costs 2n - 1 FLOPs. The closed forms below count the
low-rank two-step product (projection then reconstruction) under exactly
that convention; the test suite re-derives them with an instrumented naive
multiplier.
"""

from __future__ import annotations

from dataclasses import dataclass

from .adapters import ConfigError

# Per-block expressiveness target: grid size is chosen to keep r / k^2 near
# this value.
BLOCK_EXPRESSIVENESS_TARGET = 8


@dataclass(frozen=True)
class CostReport:
    """Integer cost summary for one adapter configuration."""

    kind: str
    flops: int
    params: int
    latent_elements: int
    est_activation_bytes: int

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "flops": self.flops,
            "params": self.params,
            "latent_elements": self.latent_elements,
            "est_activation_bytes": self.est_activation_bytes,
        }


def _require_positive(**values: int) -> None:
    for name, value in values.items():
        if value < 1:
            raise ConfigError(f"{name} must be >= 1, got {value}")


def lora_flops(m: int, n: int, r: int, t: int) -> int:
    """Adapter-path FLOPs for the plain two-step product.

    Projection A^T X costs (2N-1)rT, reconstruction B(A^T X) costs (2r-1)MT,
    totalling 2r(M+N)T - (r+M)T.
    """
    _require_positive(m=m, n=n, r=r, t=t)
    return 2 * r * (m + n) * t - (r + m) * t


def gralora_flops(m: int, n: int, r: int, t: int, k: int) -> int:
    """Adapter-path FLOPs for the three-stage granular product.

    Per-block projections cost (2N-k)rT in total, reconstructions (2r-k)MT,
    and the row-wise accumulation of k partial outputs adds (k-1)MT, giving
    2r(M+N)T - krT - MT. Algebraically this is always lora_flops minus
    (k-1)rT.
    """
    _require_positive(m=m, n=n, r=r, t=t, k=k)
    for name, value in (("M", m), ("N", n), ("r", r)):
        if value % k != 0:
            raise ConfigError(f"k={k} does not divide {name}={value}")
    return 2 * r * (m + n) * t - k * r * t - m * t


def latent_size(r: int, t: int, k: int = 1) -> int:
    """Element count of the intermediate latent A^T X: rT per grid column."""
    _require_positive(r=r, t=t, k=k)
    return k * r * t


def activation_elements(m: int, r: int, t: int, k: int = 1) -> int:
    """Adapter-path activation elements held during training.

    Models the latent (k*r*T) plus the per-block reconstruction outputs
    (k*M*T); base-model activations and optimizer state are out of scope.
    """
    _require_positive(m=m, r=r, t=t, k=k)
    return latent_size(r, t, k) + k * m * t


def recommend_k(r: int, m: int, n: int) -> int:
    """Grid size keeping per-block expressiveness r/k^2 near the target.

    Candidates are the powers of two dividing r, M, and N; ties break toward
    the larger k (finer grid).
    """
    _require_positive(r=r, m=m, n=n)
    candidates = []
    k = 1
    while r % k == 0 and m % k == 0 and n % k == 0:
        candidates.append(k)
        k *= 2
    best = min(
        candidates,
        key=lambda kk: (abs(r / kk**2 - BLOCK_EXPRESSIVENESS_TARGET), -kk),
    )
    return best


def cost_report(
    kind: str, m: int, n: int, r: int, t: int, k: int = 1, dtype_bytes: int = 2
) -> CostReport:
    """Assemble the full integer cost summary for one configuration."""
    _require_positive(dtype_bytes=dtype_bytes)
    if kind == "lora":
        flops = lora_flops(m, n, r, t)
        k = 1
    elif kind == "gralora":
        flops = gralora_flops(m, n, r, t, k)
    else:
        raise ConfigError(f"cost model covers 'lora' and 'gralora', got {kind!r}")
    return CostReport(
        kind=kind,
        flops=flops,
        params=r * (m + n),
        latent_elements=latent_size(r, t, k),
        est_activation_bytes=activation_elements(m, r, t, k) * dtype_bytes,
    )
