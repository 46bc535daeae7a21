"""Linear algebra wrappers and the SNP1 matrix file format.

Every factorization in the package funnels through this module so that
singularity diagnostics, finite-input validation and determinism guarantees
live in one place. Dense and sparse factorizations are backed by
numpy/scipy; the wrappers own the error contracts the solver and
model-reduction layers rely on.

Conventions: float64 throughout, SNP1 files are little-endian column-major.
"""
from __future__ import annotations

import hashlib
import struct
import warnings
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "SingularSystemError",
    "SparseFactor",
    "content_hash",
    "dense_solve",
    "factorize",
    "read_snp1",
    "sparse_solve",
    "thin_svd",
    "write_snp1",
]

SNP1_MAGIC = b"SNP1"

# pivot below PIVOT_RTOL * max|A| counts as singular
PIVOT_RTOL = 1e-14

# fall back to a dense factorization to locate the offending pivot
_DENSE_PIVOT_FALLBACK = 4096


class SingularSystemError(RuntimeError):
    """A factorization hit a pivot below the relative threshold.

    ``pivot_index`` is the elimination-order index of the offending pivot,
    ``pivot`` its magnitude and ``scale`` the max-magnitude entry of the
    matrix the threshold was taken against.
    """

    def __init__(self, pivot_index: int, pivot: float, scale: float, context: str = ""):
        self.pivot_index = int(pivot_index)
        self.pivot = float(pivot)
        self.scale = float(scale)
        msg = (
            f"singular system: pivot {self.pivot:.3e} at index {self.pivot_index} "
            f"(threshold {PIVOT_RTOL:.0e} x scale {self.scale:.3e})"
        )
        if context:
            msg = f"{msg} [{context}]"
        super().__init__(msg)


def _require_finite(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise ValueError(f"{name} contains a non-finite entry at {tuple(int(i) for i in bad)}")
    return arr


def thin_svd(M: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``M = U @ diag(s) @ Vt`` with ``s`` sorted nonincreasing.

    Deterministic for a fixed input; columns beyond ``min(M.shape)`` are
    never formed.
    """
    M = _require_finite("svd input", M)
    if M.ndim != 2:
        raise ValueError(f"svd input must be 2-D, got shape {M.shape}")
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    return U, s, Vt


class DenseFactor:
    """LU factorization handle of a dense matrix; factor once, solve many."""

    def __init__(self, A: np.ndarray):
        A = _require_finite("dense matrix", np.asarray(A, dtype=float))
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"dense matrix must be square, got shape {A.shape}")
        self.shape = A.shape
        self.scale = float(np.max(np.abs(A))) if A.size else 0.0
        lu, piv = sla.lu_factor(A, check_finite=False)
        diag = np.abs(np.diag(lu))
        worst = int(np.argmin(diag)) if diag.size else 0
        if diag.size == 0 or diag[worst] <= PIVOT_RTOL * max(self.scale, 1e-300):
            raise SingularSystemError(
                worst, float(diag[worst]) if diag.size else 0.0, self.scale
            )
        self._lu = (lu, piv)

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = _require_finite("rhs", b)
        return sla.lu_solve(self._lu, b, check_finite=False)


def dense_solve(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve the dense system ``A @ X = B`` via partially pivoted LU.

    Raises :class:`SingularSystemError` (with the elimination-order pivot
    index) when a pivot falls below ``PIVOT_RTOL * max|A|``.
    """
    return DenseFactor(A).solve(_require_finite("dense rhs", B))


class SparseFactor:
    """LU factorization handle of a sparse matrix; factor once, solve many."""

    def __init__(self, lu: spla.SuperLU, shape: tuple[int, int], scale: float):
        self._lu = lu
        self.shape = shape
        self.scale = scale

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = _require_finite("rhs", b)
        x = self._lu.solve(b)
        if not np.all(np.isfinite(x)):
            raise SingularSystemError(-1, 0.0, self.scale, context="non-finite solve result")
        return x


def factorize(A: sp.spmatrix) -> SparseFactor:
    """Sparse LU of a square matrix with explicit singularity reporting."""
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"sparse matrix must be square, got shape {A.shape}")
    Ac = sp.csc_matrix(A)
    _require_finite("sparse matrix data", Ac.data if Ac.nnz else np.zeros(1))
    scale = float(np.max(np.abs(Ac.data))) if Ac.nnz else 0.0
    try:
        lu = spla.splu(Ac)
    except RuntimeError as err:  # SuperLU reports exact singularity without an index
        raise SingularSystemError(
            _locate_singular_pivot(Ac), 0.0, scale, context=str(err)
        ) from err
    diag = np.abs(lu.U.diagonal())
    worst = int(np.argmin(diag))
    if diag[worst] <= PIVOT_RTOL * max(scale, 1e-300):
        raise SingularSystemError(worst, float(diag[worst]), scale)
    return SparseFactor(lu, Ac.shape, scale)


def sparse_solve(A: sp.spmatrix, b: np.ndarray) -> np.ndarray:
    """Convenience one-shot ``factorize(A).solve(b)``."""
    return factorize(A).solve(b)


def factorize_any(A) -> SparseFactor | DenseFactor:
    """Factorize a square sparse or dense matrix with one call site."""
    if sp.issparse(A):
        return factorize(A)
    return DenseFactor(A)


def _locate_singular_pivot(Ac: sp.csc_matrix) -> int:
    """Best-effort elimination index of a structurally/exactly singular pivot."""
    n = Ac.shape[0]
    if n <= _DENSE_PIVOT_FALLBACK:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # scipy warns on the zero pivot we are locating
            lu, _ = sla.lu_factor(Ac.toarray(), check_finite=False)
        diag = np.abs(np.diag(lu))
        scale = float(np.max(np.abs(Ac.toarray()))) if n else 0.0
        hits = np.flatnonzero(diag <= PIVOT_RTOL * max(scale, 1e-300))
        if hits.size:
            return int(hits[0])
        return int(np.argmin(diag))
    return n - 1


# --- SNP1 matrix files ------------------------------------------------------
# Header: magic "SNP1", u32 rows, u32 cols (little endian).
# Payload: rows*cols float64 little endian, column-major.


def write_snp1(path: str | Path, M: np.ndarray) -> None:
    M = _require_finite("SNP1 matrix", M)
    if M.ndim == 1:
        M = M[:, None]
    if M.ndim != 2:
        raise ValueError(f"SNP1 stores 2-D matrices, got shape {M.shape}")
    rows, cols = M.shape
    header = struct.pack("<4sII", SNP1_MAGIC, rows, cols)
    payload = M.astype("<f8", copy=False).flatten(order="F").tobytes()
    Path(path).write_bytes(header + payload)


def read_snp1(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != SNP1_MAGIC:
        raise ValueError(f"not an SNP1 file: {path}")
    rows, cols = struct.unpack("<II", raw[4:12])
    expected = 12 + rows * cols * 8
    if len(raw) != expected:
        raise ValueError(
            f"SNP1 payload size mismatch in {path}: header says {rows}x{cols} "
            f"({expected} bytes), file has {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f8", offset=12)
    M = data.reshape((rows, cols), order="F").astype(np.float64)
    return _require_finite("SNP1 payload", M)


def content_hash(*parts: bytes | str | np.ndarray) -> str:
    """sha256 over a sequence of byte-like parts (arrays hashed as raw bytes)."""
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, np.ndarray):
            h.update(np.ascontiguousarray(part).tobytes())
            h.update(str(part.dtype).encode())
            h.update(str(part.shape).encode())
        elif isinstance(part, str):
            h.update(part.encode())
        else:
            h.update(part)
    return h.hexdigest()
