"""Dense float64 matrix helpers: validated construction, products, SVD, rank, IO.

Everything downstream (adapters, gradients, sweeps) runs on plain 2-D numpy
arrays produced by the constructors here. Constructors reject non-finite
entries so NaN/Inf can only enter through arithmetic bugs, which the tests
would then surface.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Union

import numpy as np

# Type alias: a matrix is a 2-D C-contiguous float64 ndarray.
Matrix = np.ndarray

_MAGIC = b"MATB"
_HEADER = struct.Struct("<IQQ")  # version, rows, cols
_FORMAT_VERSION = 1

# Rank threshold separating genuine deficiency from float64 round-off at the
# matrix sizes in scope (<= 4096 per side).
DEFAULT_RANK_TOL = 1e-8

SVD_RECONSTRUCTION_TOL = 1e-9


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


def as_matrix(data: Union[np.ndarray, Iterable[Iterable[float]]]) -> Matrix:
    """Coerce ``data`` to a validated 2-D float64 array (always a copy).

    Raises ``ValueError`` if the input is not 2-D, is empty, or contains
    NaN/Inf entries.
    """
    arr = np.array(data, dtype=np.float64, order="C", copy=True)
    if arr.ndim != 2:
        raise ShapeError(f"matrix must be 2-D, got ndim={arr.ndim}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"matrix must be nonempty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix entries must be finite (no NaN/Inf)")
    return arr


def zeros(rows: int, cols: int) -> Matrix:
    if rows < 1 or cols < 1:
        raise ValueError(f"matrix must be nonempty, got shape ({rows}, {cols})")
    return np.zeros((rows, cols), dtype=np.float64)


def identity(n: int) -> Matrix:
    if n < 1:
        raise ValueError(f"identity size must be positive, got {n}")
    return np.eye(n, dtype=np.float64)


def gaussian(rows: int, cols: int, rng: np.random.Generator, std: float = 1.0) -> Matrix:
    """Zero-mean Gaussian matrix with entrywise standard deviation ``std``."""
    return std * rng.standard_normal((rows, cols))


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Dense product ``a @ b`` with an explicit shape check."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply shapes {tuple(a.shape)} x {tuple(b.shape)}: "
            f"inner dimensions differ"
        )
    return a @ b


def frobenius_norm(a: Matrix) -> float:
    return float(np.linalg.norm(a))


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``a = u @ diag(singular_values) @ vt``.

    Singular values are non-increasing and non-negative; ``u`` and ``vt``
    have orthonormal columns / rows respectively.
    """

    u: Matrix
    singular_values: np.ndarray
    vt: Matrix

    def reconstruct(self) -> Matrix:
        return (self.u * self.singular_values) @ self.vt


def svd(a: Matrix) -> SvdResult:
    """Thin SVD via LAPACK, checked against the reconstruction tolerance."""
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    result = SvdResult(u=u, singular_values=s, vt=vt)
    err = frobenius_norm(result.reconstruct() - a)
    bound = SVD_RECONSTRUCTION_TOL * max(1.0, frobenius_norm(a))
    if err > bound:
        raise ArithmeticError(
            f"SVD reconstruction error {err:.3e} exceeds tolerance {bound:.3e}"
        )
    return result


def singular_values(a: Matrix) -> np.ndarray:
    return np.linalg.svd(a, compute_uv=False)


def numerical_rank(a: Matrix, rel_tol: float = DEFAULT_RANK_TOL) -> int:
    """Count singular values above ``rel_tol`` times the largest one.

    The zero matrix has rank 0. ``rel_tol`` must lie strictly in (0, 1).
    """
    if not 0.0 < rel_tol < 1.0:
        raise ValueError(f"rel_tol must be in (0, 1), got {rel_tol}")
    if a.size == 0:
        raise ValueError("rank of an empty matrix is undefined")
    s = singular_values(a)
    top = s[0]
    if top == 0.0:
        return 0
    return int(np.count_nonzero(s > rel_tol * top))


# ---------------------------------------------------------------------------
# Serialization: binary container and CSV.


def save_matrix(a: Matrix, target: Union[str, Path, IO[bytes]]) -> None:
    """Write ``a`` to the binary container (magic, header, row-major LE float64)."""
    payload = np.ascontiguousarray(a, dtype="<f8").tobytes()
    header = _MAGIC + _HEADER.pack(_FORMAT_VERSION, a.shape[0], a.shape[1])
    if hasattr(target, "write"):
        target.write(header + payload)
    else:
        with open(target, "wb") as fh:
            fh.write(header + payload)


def load_matrix(source: Union[str, Path, IO[bytes]]) -> Matrix:
    """Read a matrix written by :func:`save_matrix`, validating the container."""
    if hasattr(source, "read"):
        blob = source.read()
    else:
        blob = Path(source).read_bytes()
    if blob[:4] != _MAGIC:
        raise ValueError(f"bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    version, rows, cols = _HEADER.unpack_from(blob, 4)
    if version != _FORMAT_VERSION:
        raise ValueError(f"unsupported container version {version}")
    offset = 4 + _HEADER.size
    expected = rows * cols * 8
    payload = blob[offset:]
    if len(payload) != expected:
        raise ValueError(
            f"payload holds {len(payload)} bytes, header promises {expected}"
        )
    data = np.frombuffer(payload, dtype="<f8").reshape(rows, cols)
    return as_matrix(data)


def write_csv(a: Matrix, target: Union[str, Path, IO[str]]) -> None:
    """Write ``a`` as comma-separated rows with '.' decimal separator.

    Entries are rendered with ``repr`` so float64 values round-trip exactly.
    """
    lines = [",".join(repr(float(v)) for v in row) for row in a]
    text = "\n".join(lines) + "\n"
    if hasattr(target, "write"):
        target.write(text)
    else:
        Path(target).write_text(text, encoding="utf-8")


def read_csv(source: Union[str, Path, IO[str]]) -> Matrix:
    if hasattr(source, "read"):
        text = source.read()
    else:
        text = Path(source).read_text(encoding="utf-8")
    rows = [
        [float(cell) for cell in line.split(",")]
        for line in text.splitlines()
        if line.strip()
    ]
    return as_matrix(rows)
