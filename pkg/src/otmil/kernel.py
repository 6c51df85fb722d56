"""Dense numeric kernel: validation helpers, stable softmax, cosine similarity.

Everything runs on float64 numpy arrays. Matrices are 2-D, vectors 1-D.
All public operations validate their inputs and keep outputs finite.
"""

from __future__ import annotations

import numpy as np

# Norms below this are treated as zero (dead/padded instances).
ZERO_NORM_EPS = 1e-12


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array, raising ValueError otherwise."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got ndim={arr.ndim}")
    require_finite(arr, name)
    return arr


def as_vector(x, name: str = "vector") -> np.ndarray:
    """Coerce to a finite 1-D float64 array, raising ValueError otherwise."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got ndim={arr.ndim}")
    require_finite(arr, name)
    return arr


def require_finite(arr: np.ndarray, name: str = "array") -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")


def softmax(v) -> np.ndarray:
    """Stable softmax of a vector (max-subtraction before exponentiation)."""
    v = as_vector(v, "softmax input")
    if v.size == 0:
        raise ValueError("softmax input must have at least one element")
    shifted = v - v.max()
    e = np.exp(shifted)
    return e / e.sum()


def cosine(a, b) -> float:
    """Cosine similarity of two equal-length vectors.

    Returns 0.0 when either vector has norm below ZERO_NORM_EPS, so
    degenerate instances cannot poison similarity matrices.
    """
    a = as_vector(a, "cosine lhs")
    b = as_vector(b, "cosine rhs")
    if a.shape != b.shape:
        raise ValueError(f"cosine length mismatch: {a.size} vs {b.size}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < ZERO_NORM_EPS or nb < ZERO_NORM_EPS:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def matmul(a, b) -> np.ndarray:
    """Validated matrix product of two 2-D matrices."""
    a = as_matrix(a, "matmul lhs")
    b = as_matrix(b, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: {a.shape} x {b.shape}"
        )
    return a @ b
