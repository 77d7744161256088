"""Dense matrix helpers shared by every pruner.

Matrices are plain ``float64`` numpy arrays. Masks carry their axis and host
dimension so extraction can be checked against the matrix it is applied to.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

SYMMETRY_RTOL = 1e-9
BINARY_MAGIC = b"OBSM"


class DimensionError(ValueError):
    pass


class SingularityError(ArithmeticError):
    """Raised when a matrix that must be positive definite is not.

    ``pivot`` is the index of the failing diagonal pivot in the factorization
    (``None`` when not known).
    """

    def __init__(self, message: str, pivot: int | None = None):
        super().__init__(message)
        self.pivot = pivot


class Axis(enum.Enum):
    COLUMN = "column"
    ROW = "row"


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Coerce ``data`` to a finite 2-D float64 array."""
    m = np.array(data, dtype=np.float64)
    if m.ndim == 1 and m.size == 0:
        m = m.reshape(0, 0)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


@dataclass(frozen=True)
class PruneMask:
    indices: tuple[int, ...]
    axis: Axis
    host_dim: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"mask indices must be strictly increasing: {idx}")
        if idx and (idx[0] < 0 or idx[-1] >= self.host_dim):
            raise DimensionError(f"mask indices {idx} out of range for dim {self.host_dim}")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def columns(cls, indices, host_dim: int) -> "PruneMask":
        return cls(tuple(sorted(int(i) for i in indices)), Axis.COLUMN, host_dim)

    @classmethod
    def rows(cls, indices, host_dim: int) -> "PruneMask":
        return cls(tuple(sorted(int(i) for i in indices)), Axis.ROW, host_dim)

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def sparsity(self) -> float:
        return len(self.indices) / self.host_dim if self.host_dim else 0.0

    def array(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=np.intp)

    def complement(self) -> np.ndarray:
        keep = np.ones(self.host_dim, dtype=bool)
        keep[list(self.indices)] = False
        return np.flatnonzero(keep)

    def with_axis(self, axis: Axis) -> "PruneMask":
        return PruneMask(self.indices, axis, self.host_dim)

    def __str__(self) -> str:
        return " ".join(str(i) for i in self.indices)


def submatrix_cols(M: np.ndarray, mask: PruneMask) -> np.ndarray:
    if mask.axis is not Axis.COLUMN:
        raise DimensionError("submatrix_cols needs a column mask")
    if mask.host_dim != M.shape[1]:
        raise DimensionError(f"mask host_dim {mask.host_dim} != matrix cols {M.shape[1]}")
    return M[:, mask.array()]


def submatrix_block(M: np.ndarray, rows_mask: PruneMask, cols_mask: PruneMask) -> np.ndarray:
    if rows_mask.host_dim != M.shape[0] or cols_mask.host_dim != M.shape[1]:
        raise DimensionError(
            f"masks ({rows_mask.host_dim}, {cols_mask.host_dim}) do not match shape {M.shape}"
        )
    return M[np.ix_(rows_mask.array(), cols_mask.array())]


def check_symmetric(M: np.ndarray, name: str = "matrix") -> None:
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"{name} must be square, got {M.shape}")
    scale = max(float(np.max(np.abs(M))) if M.size else 0.0, 1.0)
    if np.max(np.abs(M - M.T), initial=0.0) > SYMMETRY_RTOL * scale:
        raise ValueError(f"{name} is not symmetric within {SYMMETRY_RTOL:g} (relative)")


def cholesky(M: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    Column-by-column (left-looking) so the first non-positive pivot can be
    reported.
    """
    n = M.shape[0]
    L = np.zeros_like(M, dtype=np.float64)
    for j in range(n):
        d = M[j, j] - L[j, :j] @ L[j, :j]
        if not d > 0.0:
            raise SingularityError(f"matrix not positive definite at pivot {j} (d={d:.3e})", pivot=j)
        L[j, j] = np.sqrt(d)
        if j + 1 < n:
            L[j + 1:, j] = (M[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def psd_inverse(M: np.ndarray, lam: float = 0.0) -> np.ndarray:
    """Return ``(M + lam*I)^-1`` through a Cholesky factorization.

    The input is symmetrized first; the result is exactly symmetric.
    """
    M = np.asarray(M, dtype=np.float64)
    check_symmetric(M)
    if lam < 0:
        raise ValueError("damping must be non-negative")
    n = M.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    S = 0.5 * (M + M.T) + lam * np.eye(n)
    L = cholesky(S)
    Linv = solve_triangular(L, np.eye(n), lower=True)
    inv = Linv.T @ Linv
    return 0.5 * (inv + inv.T)


def spd_solve_right(V: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``X @ B = V`` for symmetric positive-definite ``B``."""
    L = cholesky(0.5 * (B + B.T))
    # X B = V  <=>  B X^T = V^T
    Y = solve_triangular(L, V.T, lower=True)
    return solve_triangular(L.T, Y, lower=False).T


def trace_quad(block_inv: np.ndarray, V: np.ndarray) -> float:
    """``tr(V @ block_inv @ V.T)``."""
    if block_inv.shape[0] != block_inv.shape[1] or V.shape[1] != block_inv.shape[0]:
        raise DimensionError(f"shapes {V.shape} and {block_inv.shape} incompatible")
    return float(np.sum((V @ block_inv) * V))


def scatter_cols(values: np.ndarray, mask: PruneMask, n_rows: int | None = None) -> np.ndarray:
    """Inverse of :func:`submatrix_cols`: place columns into a zero matrix."""
    rows = values.shape[0] if n_rows is None else n_rows
    out = np.zeros((rows, mask.host_dim))
    out[:, mask.array()] = values
    return out


# ---------------------------------------------------------------- file formats

def format_matrix(M: np.ndarray) -> str:
    lines = [f"{M.shape[0]} {M.shape[1]}"]
    for row in M:
        lines.append(" ".join(f"{x:.17g}" for x in row))
    return "\n".join(lines) + "\n"


def parse_matrix(lines) -> np.ndarray:
    """Parse one matrix from an iterator of text lines (consumes exactly its lines)."""
    it = iter(lines)
    header = next(it).split()
    if len(header) != 2:
        raise ValueError(f"bad matrix header: {' '.join(header)!r}")
    rows, cols = int(header[0]), int(header[1])
    data = np.zeros((rows, cols))
    for i in range(rows):
        vals = next(it).split()
        if len(vals) != cols:
            raise ValueError(f"row {i}: expected {cols} values, got {len(vals)}")
        data[i] = [float(v) for v in vals]
    return as_matrix(data)


def matrix_to_bytes(M: np.ndarray) -> bytes:
    rows, cols = M.shape
    return BINARY_MAGIC + struct.pack("<QQ", rows, cols) + np.ascontiguousarray(M, dtype="<f8").tobytes()


def matrix_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != BINARY_MAGIC:
        raise ValueError("missing OBSM magic")
    if len(buf) < 20:
        raise ValueError("truncated binary matrix header")
    rows, cols = struct.unpack("<QQ", buf[4:20])
    expected = 20 + 8 * rows * cols
    if len(buf) != expected:
        raise ValueError(f"binary matrix size {len(buf)} != expected {expected}")
    data = np.frombuffer(buf[20:], dtype="<f8").reshape(rows, cols)
    return as_matrix(data)


def read_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] == BINARY_MAGIC:
        return matrix_from_bytes(raw)
    lines = [ln for ln in raw.decode().splitlines() if ln.strip()]
    return parse_matrix(lines)


def write_matrix(path, M: np.ndarray, binary: bool | None = None) -> None:
    path = Path(path)
    if binary is None:
        binary = path.suffix == ".bin"
    if binary:
        path.write_bytes(matrix_to_bytes(M))
    else:
        path.write_text(format_matrix(M))
