"""Deterministic dense matrix kernels.

Everything downstream (pruning, adapters, training) runs on float64 numpy
arrays produced and combined by the helpers here.  The one non-obvious
constraint is summation order: ``matmul`` accumulates strictly in ascending
inner-index order, so its output is bit-identical to a naive triple loop on
every platform.  That property is what makes checkpoints and run logs
byte-reproducible, so do not swap the loop for a BLAS call.

The module also hosts a tiny allocation ledger.  Kernel functions report the
shape of every temporary they create through ``note_alloc``; tests wrap a
region in ``track_allocations`` to prove that the memory-lean adapter forward
never materializes a full weight-sized buffer.
"""

from contextlib import contextmanager

import numpy as np

from .errors import ShapeError

_alloc_log: list[tuple[int, ...]] | None = None


@contextmanager
def track_allocations():
    """Collect the shapes of temporaries allocated by kernels in this block.

    Yields the live list; it keeps growing until the block exits.  Not
    reentrant, which is fine for tests.
    """
    global _alloc_log
    previous = _alloc_log
    _alloc_log = []
    try:
        yield _alloc_log
    finally:
        _alloc_log = previous


def note_alloc(shape) -> None:
    """Record one temporary-array allocation if tracking is active."""
    if _alloc_log is not None:
        _alloc_log.append(tuple(int(d) for d in shape))


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Coerce ``data`` to a validated 2-D float64 array.

    Rejects non-2-D input, empty axes, and non-finite entries.  Returns a
    C-contiguous float64 array (a copy only when coercion requires one).
    """
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={arr.ndim}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must have positive dimensions, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(arr)


def matmul(a: np.ndarray, b_t: np.ndarray) -> np.ndarray:
    """Product against a transposed right operand: returns ``a @ b_t.T``.

    ``a`` is (b, n), ``b_t`` is (m, n); the result is (b, m) with
    result[i][j] = sum_k a[i][k] * b_t[j][k], accumulated in ascending k.
    Bit-identical to a scalar triple loop.
    """
    if a.ndim != 2 or b_t.ndim != 2:
        raise ShapeError("matmul operands must be 2-D")
    if a.shape[1] != b_t.shape[1]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} vs {b_t.shape}"
        )
    rows, inner = a.shape
    cols = b_t.shape[0]
    out = np.zeros((rows, cols), dtype=np.float64)
    note_alloc(out.shape)
    buf = np.empty((rows, cols), dtype=np.float64)
    note_alloc(buf.shape)
    for k in range(inner):
        # One rank-1 term per k; += keeps the per-entry accumulation order.
        np.multiply(a[:, k, None], b_t[None, :, k], out=buf)
        out += buf
    return out


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Entrywise product of two same-shaped matrices."""
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shapes differ: {a.shape} vs {b.shape}")
    out = a * b
    note_alloc(out.shape)
    return out


def repeat_rows(a: np.ndarray, k: int) -> np.ndarray:
    """Repeat each row of ``a`` k times consecutively.

    Output row i equals input row i // k, so an (r, n) input becomes
    (r * k, n) with each source row occupying a contiguous block.
    """
    if a.ndim != 2:
        raise ShapeError("repeat_rows expects a 2-D array")
    if k < 1:
        raise ValueError(f"repeat count must be >= 1, got {k}")
    out = np.repeat(a, k, axis=0)
    note_alloc(out.shape)
    return out


def broadcast_col(v: np.ndarray, n: int) -> np.ndarray:
    """Tile a column vector (m, 1) across n columns, giving (m, n)."""
    if v.ndim != 2 or v.shape[1] != 1:
        raise ShapeError(f"broadcast_col expects an (m, 1) column, got {v.shape}")
    if n < 1:
        raise ValueError(f"column count must be >= 1, got {n}")
    out = np.repeat(v, n, axis=1)
    note_alloc(out.shape)
    return out
