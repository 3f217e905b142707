"""Shared helpers for the test suite."""

import numpy as np

from spp import Rng


def rand_matrix(rng: Rng, rows: int, cols: int, lo: float = -1.0, hi: float = 1.0):
    return rng.uniform(lo, hi, rows, cols)


def rand_int_matrix(rng: Rng, rows: int, cols: int, lo: int = -4, hi: int = 5):
    # Integer-valued float matrices: exactly representable, so algebraic
    # identities hold bitwise.
    return np.floor(rng.uniform(lo, hi, rows, cols))


def matmul_oracle(a: np.ndarray, b_t: np.ndarray) -> np.ndarray:
    """Naive scalar triple loop, the bit-level reference for matmul."""
    rows, inner = a.shape
    cols = b_t.shape[0]
    out = np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            acc = 0.0
            for k in range(inner):
                acc += a[i, k] * b_t[j, k]
            out[i, j] = acc
    return out


def central_diff(f, value: float, h: float = 1e-5) -> float:
    return (f(value + h) - f(value - h)) / (2.0 * h)


def rel_close(got: np.ndarray, want: np.ndarray, tol: float) -> bool:
    """Blended absolute/relative closeness, entrywise."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    return bool(np.all(np.abs(got - want) <= tol * (1.0 + np.abs(want))))
