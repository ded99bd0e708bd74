"""Low-rank adapters over frozen dense layers: plain, block-granular, hybrid.

Three adapter kinds share one contract: a fused update ``R`` of shape
``(M, N)`` added to the frozen base weight. The granular kind partitions the
weight into a ``k x k`` grid where block ``(i, j)`` carries its own factor
pair of rank ``r/k``; with ``k == 1`` it degenerates to the plain adapter.
The hybrid kind splits a total rank budget between a full-width plain part
and a granular part, composing additively in the fused space.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .linalg import (
    DEFAULT_RANK_TOL,
    Matrix,
    ShapeError,
    as_matrix,
    numerical_rank,
)


class ConfigError(ValueError):
    """Adapter or experiment configuration violates a structural constraint."""


@dataclass
class LoraAdapter:
    """Rank-``r`` update ``R = s * b @ a.T`` with ``s = alpha / r``.

    ``a`` has shape ``(N, r)`` (input side), ``b`` has shape ``(M, r)``
    (output side). ``r == 0`` is the degenerate empty adapter used by hybrid
    rank splits.
    """

    a: Matrix
    b: Matrix
    alpha: float

    def __post_init__(self) -> None:
        if self.a.ndim != 2 or self.b.ndim != 2:
            raise ShapeError("adapter factors must be 2-D")
        if self.a.shape[1] != self.b.shape[1]:
            raise ShapeError(
                f"factor ranks differ: a has {self.a.shape[1]}, b has {self.b.shape[1]}"
            )

    @property
    def in_dim(self) -> int:
        return self.a.shape[0]

    @property
    def out_dim(self) -> int:
        return self.b.shape[0]

    @property
    def r(self) -> int:
        return self.a.shape[1]

    @property
    def s(self) -> float:
        return self.alpha / self.r if self.r > 0 else 0.0


@dataclass
class GraLoraAdapter:
    """``k x k`` grid of factor pairs, each of rank ``r/k``.

    Factors are stored stacked: ``a[i, j]`` has shape ``(N/k, r/k)`` and
    ``b[i, j]`` has shape ``(M/k, r/k)``, so the grid is two 4-D arrays. The
    scale ``s = alpha / r`` uses the total rank ``r = k * (r/k)``, keeping the
    ``k == 1`` reduction to the plain adapter exact.
    """

    a: np.ndarray  # (k, k, N/k, r/k)
    b: np.ndarray  # (k, k, M/k, r/k)
    alpha: float

    def __post_init__(self) -> None:
        if self.a.ndim != 4 or self.b.ndim != 4:
            raise ShapeError("granular factors must be stacked 4-D arrays")
        ka = self.a.shape[:2]
        kb = self.b.shape[:2]
        if ka[0] != ka[1] or ka != kb:
            raise ShapeError(f"block grids must be square and equal, got {ka} and {kb}")
        if self.a.shape[3] != self.b.shape[3]:
            raise ShapeError(
                f"block ranks differ: a has {self.a.shape[3]}, b has {self.b.shape[3]}"
            )

    @property
    def k(self) -> int:
        return self.a.shape[0]

    @property
    def in_dim(self) -> int:
        return self.k * self.a.shape[2]

    @property
    def out_dim(self) -> int:
        return self.k * self.b.shape[2]

    @property
    def r(self) -> int:
        return self.k * self.a.shape[3]

    @property
    def s(self) -> float:
        return self.alpha / self.r if self.r > 0 else 0.0

    def block(self, i: int, j: int) -> Tuple[Matrix, Matrix]:
        """Factor pair ``(a_ij, b_ij)`` of grid cell ``(i, j)`` (0-indexed)."""
        return self.a[i, j], self.b[i, j]


@dataclass
class HybridGraLoraAdapter:
    """Total rank budget split between a plain part and a granular part.

    ``ratio = r_lora / (r_lora + r_gralora)``; ratio 0 behaves exactly like
    the granular adapter, ratio 1 exactly like the plain one. Both parts run
    at the shared scale ``alpha / (r_lora + r_gralora)``, carried by scaling
    each part's own alpha proportionally to its rank share.
    """

    lora: LoraAdapter
    gralora: GraLoraAdapter

    def __post_init__(self) -> None:
        if (self.lora.in_dim, self.lora.out_dim) != (
            self.gralora.in_dim,
            self.gralora.out_dim,
        ):
            raise ShapeError(
                f"hybrid parts disagree on layer shape: "
                f"({self.lora.out_dim}, {self.lora.in_dim}) vs "
                f"({self.gralora.out_dim}, {self.gralora.in_dim})"
            )

    @property
    def in_dim(self) -> int:
        return self.lora.in_dim

    @property
    def out_dim(self) -> int:
        return self.lora.out_dim

    @property
    def k(self) -> int:
        return self.gralora.k

    @property
    def r(self) -> int:
        return self.lora.r + self.gralora.r

    @property
    def ratio(self) -> float:
        return self.lora.r / self.r

    @property
    def alpha(self) -> float:
        return self.lora.alpha + self.gralora.alpha


Adapter = Union[LoraAdapter, GraLoraAdapter, HybridGraLoraAdapter]


@dataclass
class AdaptedLayer:
    """Frozen base weight plus exactly one adapter.

    ``w0`` is copied and marked read-only at construction; training can only
    ever touch the adapter factors.
    """

    w0: Matrix
    adapter: Adapter

    def __post_init__(self) -> None:
        self.w0 = as_matrix(self.w0)
        self.w0.flags.writeable = False
        m, n = self.w0.shape
        if (self.adapter.out_dim, self.adapter.in_dim) != (m, n):
            raise ShapeError(
                f"adapter built for ({self.adapter.out_dim}, {self.adapter.in_dim}) "
                f"does not fit base weight ({m}, {n})"
            )

    @property
    def out_dim(self) -> int:
        return self.w0.shape[0]

    @property
    def in_dim(self) -> int:
        return self.w0.shape[1]


# ---------------------------------------------------------------------------
# Construction


def _check_divisibility(m: int, n: int, r: int, k: int) -> None:
    if k < 1:
        raise ConfigError(f"grid size k must be positive, got k={k}")
    for name, value in (("M", m), ("N", n), ("r", r)):
        if value % k != 0:
            raise ConfigError(f"k={k} does not divide {name}={value}")


def init_adapter(
    kind: str,
    m: int,
    n: int,
    r: int,
    *,
    k: int = 1,
    alpha: float | None = None,
    ratio: float | None = None,
    seed: int = 0,
) -> Adapter:
    """Build a freshly initialized adapter for an ``(M, N)`` layer.

    Input-side factors are drawn from a zero-mean Gaussian with variance
    ``1/N`` (layer fan-in); output-side factors start at zero, so the initial
    fused update vanishes and the adapted layer reproduces the frozen one.
    ``alpha`` defaults to ``2 * r``. Draw order is arranged so that a ``k=1``
    granular adapter (and a ratio-1 hybrid) sees the exact same random stream
    as a plain adapter with the same seed.
    """
    if m < 1 or n < 1:
        raise ConfigError(f"layer dims must be positive, got M={m}, N={n}")
    if r < 1:
        raise ConfigError(f"rank budget must be positive, got r={r}")
    if alpha is None:
        alpha = 2.0 * r
    rng = np.random.default_rng(seed)
    std = 1.0 / np.sqrt(n)

    if kind == "lora":
        return _init_lora(m, n, r, alpha, rng, std)
    if kind == "gralora":
        _check_divisibility(m, n, r, k)
        return _init_gralora(m, n, r, k, alpha, rng, std)
    if kind == "hybrid":
        if ratio is None:
            ratio = 0.5
        if not 0.0 <= ratio <= 1.0:
            raise ConfigError(f"hybrid ratio must lie in [0, 1], got {ratio}")
        r_lora = round(ratio * r)
        r_gra = r - r_lora
        _check_divisibility(m, n, r_gra, k)
        alpha_lora = alpha * (r_lora / r) if r > 0 else 0.0
        alpha_gra = alpha - alpha_lora
        lora = _init_lora(m, n, r_lora, alpha_lora, rng, std)
        gra = _init_gralora(m, n, r_gra, k, alpha_gra, rng, std)
        return HybridGraLoraAdapter(lora=lora, gralora=gra)
    raise ConfigError(f"unknown adapter kind {kind!r}")


def _init_lora(m, n, r, alpha, rng, std) -> LoraAdapter:
    a = std * rng.standard_normal((n, r))
    b = np.zeros((m, r), dtype=np.float64)
    return LoraAdapter(a=a, b=b, alpha=alpha)


def _init_gralora(m, n, r, k, alpha, rng, std) -> GraLoraAdapter:
    a = std * rng.standard_normal((k, k, n // k, r // k))
    b = np.zeros((k, k, m // k, r // k), dtype=np.float64)
    return GraLoraAdapter(a=a, b=b, alpha=alpha)


def randomize_factors(adapter: Adapter, rng: np.random.Generator) -> Adapter:
    """Same-shape adapter with all factors redrawn standard normal.

    Used by structural analyses (rank law, deviation baselines) that need
    generic nonzero factors on both sides; the results are scale-free.
    """
    if isinstance(adapter, LoraAdapter):
        return LoraAdapter(
            a=rng.standard_normal(adapter.a.shape),
            b=rng.standard_normal(adapter.b.shape),
            alpha=adapter.alpha,
        )
    if isinstance(adapter, GraLoraAdapter):
        return GraLoraAdapter(
            a=rng.standard_normal(adapter.a.shape),
            b=rng.standard_normal(adapter.b.shape),
            alpha=adapter.alpha,
        )
    if isinstance(adapter, HybridGraLoraAdapter):
        return HybridGraLoraAdapter(
            lora=randomize_factors(adapter.lora, rng),
            gralora=randomize_factors(adapter.gralora, rng),
        )
    raise TypeError(f"not an adapter: {type(adapter)!r}")


def factors(adapter: Adapter) -> Dict[str, np.ndarray]:
    """Trainable factor arrays keyed by stable names (views, not copies)."""
    if isinstance(adapter, LoraAdapter):
        return {"a": adapter.a, "b": adapter.b}
    if isinstance(adapter, GraLoraAdapter):
        return {"a": adapter.a, "b": adapter.b}
    if isinstance(adapter, HybridGraLoraAdapter):
        return {
            "lora.a": adapter.lora.a,
            "lora.b": adapter.lora.b,
            "gralora.a": adapter.gralora.a,
            "gralora.b": adapter.gralora.b,
        }
    raise TypeError(f"not an adapter: {type(adapter)!r}")


# ---------------------------------------------------------------------------
# Block plumbing


def split_rows(x: Matrix, k: int) -> np.ndarray:
    """Split the rows of ``(D, T)`` into ``k`` contiguous slices: ``(k, D/k, T)``."""
    d, t = x.shape
    if d % k != 0:
        raise ShapeError(f"k={k} does not divide row count {d}")
    return x.reshape(k, d // k, t)


def assemble_grid(blocks: np.ndarray) -> Matrix:
    """Tile a ``(k, k, m, n)`` block grid into the dense ``(k*m, k*n)`` matrix."""
    k, k2, m, n = blocks.shape
    if k != k2:
        raise ShapeError(f"block grid must be square, got ({k}, {k2})")
    return blocks.transpose(0, 2, 1, 3).reshape(k * m, k * n)


# ---------------------------------------------------------------------------
# Structural operations


def fused_update(adapter: Adapter) -> Matrix:
    """The effective update ``R`` of shape ``(M, N)`` the adapter adds to W0."""
    if isinstance(adapter, LoraAdapter):
        return adapter.s * (adapter.b @ adapter.a.T)
    if isinstance(adapter, GraLoraAdapter):
        grid = np.einsum("ijmr,ijnr->ijmn", adapter.b, adapter.a)
        return adapter.s * assemble_grid(grid)
    if isinstance(adapter, HybridGraLoraAdapter):
        return fused_update(adapter.lora) + fused_update(adapter.gralora)
    raise TypeError(f"not an adapter: {type(adapter)!r}")


def to_regularized_form(adapter: GraLoraAdapter) -> Tuple[Matrix, Matrix]:
    """Sparse factor pair ``(a_g, b_g)`` with ``b_g @ a_g.T == fused_update / s``.

    ``a_g`` is ``(N, k*r)`` and ``b_g`` is ``(M, k*r)``. Column blocks of
    width ``r/k`` are indexed by ``c = i*k + j`` (0-indexed); block ``a_ij``
    lands at block-row ``j`` of ``a_g`` and ``b_ij`` at block-row ``i`` of
    ``b_g``, everything else stays zero. Nonzero entry counts are therefore
    ``N*r`` and ``M*r``: the same parameters, rearranged.
    """
    k = adapter.k
    n_blk, r_blk = adapter.a.shape[2], adapter.a.shape[3]
    m_blk = adapter.b.shape[2]
    n, m, r = adapter.in_dim, adapter.out_dim, adapter.r
    a_g = np.zeros((n, k * r), dtype=np.float64)
    b_g = np.zeros((m, k * r), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            c = i * k + j
            cols = slice(c * r_blk, (c + 1) * r_blk)
            a_g[j * n_blk : (j + 1) * n_blk, cols] = adapter.a[i, j]
            b_g[i * m_blk : (i + 1) * m_blk, cols] = adapter.b[i, j]
    return a_g, b_g


def effective_rank(adapter: Adapter, rel_tol: float = DEFAULT_RANK_TOL) -> int:
    """Numerical rank of the fused update.

    For generic (random) granular factors this equals ``min(k*r, M, N)``:
    the sparse factorization has rank ``k*r`` on both sides, and the product
    realizes it unless the layer dimensions saturate first.
    """
    return numerical_rank(fused_update(adapter), rel_tol)


def merge(layer: AdaptedLayer) -> Matrix:
    """Fold the adapter into the base weight: ``W0 + R``."""
    return layer.w0 + fused_update(layer.adapter)


def param_count(adapter: Adapter) -> int:
    """Total trainable scalar count; equal across ``k`` for fixed (M, N, r)."""
    if isinstance(adapter, HybridGraLoraAdapter):
        return param_count(adapter.lora) + param_count(adapter.gralora)
    return int(factors(adapter)["a"].size + factors(adapter)["b"].size)


# ---------------------------------------------------------------------------
# Checkpoint format: one JSON header line, then raw little-endian float64
# payloads for every factor in declaration order.


def adapter_kind(adapter: Adapter) -> str:
    if isinstance(adapter, LoraAdapter):
        return "lora"
    if isinstance(adapter, GraLoraAdapter):
        return "gralora"
    if isinstance(adapter, HybridGraLoraAdapter):
        return "hybrid"
    raise TypeError(f"not an adapter: {type(adapter)!r}")


def save_checkpoint(
    adapter: Adapter, target: Union[str, Path], seed: int | None = None
) -> None:
    header = {
        "kind": adapter_kind(adapter),
        "m": adapter.out_dim,
        "n": adapter.in_dim,
        "r": adapter.r,
        "k": getattr(adapter, "k", 1),
        "alpha": adapter.alpha,
        "seed": seed,
    }
    if isinstance(adapter, HybridGraLoraAdapter):
        header["ratio"] = adapter.ratio
    buf = io.BytesIO()
    buf.write(json.dumps(header, sort_keys=True).encode("utf-8"))
    buf.write(b"\n")
    for arr in factors(adapter).values():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(target).write_bytes(buf.getvalue())


def load_checkpoint(source: Union[str, Path]) -> Tuple[Adapter, dict]:
    """Rebuild an adapter from :func:`save_checkpoint` output.

    Rejects payloads whose length disagrees with the header's shape metadata.
    Returns the adapter together with the parsed header.
    """
    blob = Path(source).read_bytes()
    newline = blob.index(b"\n")
    header = json.loads(blob[:newline].decode("utf-8"))
    payload = blob[newline + 1 :]

    kind, m, n, r, k = (
        header["kind"],
        header["m"],
        header["n"],
        header["r"],
        header["k"],
    )
    if kind == "lora":
        shapes = [("a", (n, r)), ("b", (m, r))]
    elif kind == "gralora":
        _check_divisibility(m, n, r, k)
        shapes = [
            ("a", (k, k, n // k, r // k)),
            ("b", (k, k, m // k, r // k)),
        ]
    elif kind == "hybrid":
        r_lora = round(header["ratio"] * r)
        r_gra = r - r_lora
        _check_divisibility(m, n, r_gra, k)
        shapes = [
            ("lora.a", (n, r_lora)),
            ("lora.b", (m, r_lora)),
            ("gralora.a", (k, k, n // k, r_gra // k)),
            ("gralora.b", (k, k, m // k, r_gra // k)),
        ]
    else:
        raise ConfigError(f"unknown adapter kind {kind!r} in checkpoint")

    expected = sum(int(np.prod(shape)) for _, shape in shapes) * 8
    if len(payload) != expected:
        raise ConfigError(
            f"checkpoint payload holds {len(payload)} bytes, "
            f"shape metadata promises {expected}"
        )

    arrays = {}
    offset = 0
    for name, shape in shapes:
        count = int(np.prod(shape))
        arrays[name] = (
            np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
            .reshape(shape)
            .copy()
        )
        offset += count * 8

    alpha = header["alpha"]
    if kind == "lora":
        adapter: Adapter = LoraAdapter(a=arrays["a"], b=arrays["b"], alpha=alpha)
    elif kind == "gralora":
        adapter = GraLoraAdapter(a=arrays["a"], b=arrays["b"], alpha=alpha)
    else:
        r_lora = round(header["ratio"] * r)
        alpha_lora = alpha * (r_lora / r) if r > 0 else 0.0
        adapter = HybridGraLoraAdapter(
            lora=LoraAdapter(
                a=arrays["lora.a"], b=arrays["lora.b"], alpha=alpha_lora
            ),
            gralora=GraLoraAdapter(
                a=arrays["gralora.a"],
                b=arrays["gralora.b"],
                alpha=alpha - alpha_lora,
            ),
        )
    return adapter, header
