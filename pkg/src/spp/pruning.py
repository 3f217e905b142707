"""Scoring, mask construction, and mask verification for weight pruning.

Masks are float64 matrices of exact zeros and ones so they can ride the same
Hadamard kernels as weights; on disk they serialize as uint8.  Two scoring
rules are provided: plain magnitude, and activation-weighted magnitude where
each column's score is scaled by the calibration norm of the matching input
feature.  Tie-breaks everywhere are lexicographic by (row, col): the earliest
index is kept, so mask construction is a pure function of the scores.
"""

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import PatternError, ShapeError
from .numerics import as_matrix, hadamard


@dataclass(frozen=True)
class Unstructured:
    """Keep all but the globally lowest-scoring fraction ``ratio`` of entries."""

    ratio: float

    def __post_init__(self):
        if not (0.0 <= self.ratio < 1.0):
            raise PatternError(f"ratio must lie in [0, 1), got {self.ratio}")

    def label(self) -> str:
        return "unstructured"


@dataclass(frozen=True)
class NofM:
    """Keep the ``n_keep`` highest-scoring entries in each group of ``m_group``.

    Groups are contiguous column runs within one row.
    """

    n_keep: int
    m_group: int

    def __post_init__(self):
        if self.m_group < 2 or not (0 < self.n_keep < self.m_group):
            raise PatternError(
                f"need 0 < n_keep < m_group with m_group >= 2, "
                f"got {self.n_keep}:{self.m_group}"
            )

    def label(self) -> str:
        return f"{self.n_keep}:{self.m_group}"


def parse_pattern(text: str, ratio: float = 0.5):
    """Parse a pattern flag value: "N:M" or "unstructured" (with ratio)."""
    if text == "unstructured":
        return Unstructured(ratio)
    match = re.fullmatch(r"(\d+):(\d+)", text)
    if match is None:
        raise PatternError(
            f"pattern must be 'N:M' or 'unstructured', got {text!r}"
        )
    return NofM(int(match.group(1)), int(match.group(2)))


@dataclass
class SparseMask:
    """A zero/one matrix plus the pattern it claims to satisfy.

    The constructor checks structure only (binary entries, group
    divisibility).  Whether the mask actually complies with its pattern is
    ``verify_mask``'s job, so damaged masks remain constructible and
    reportable.
    """

    mask: np.ndarray
    pattern: Unstructured | NofM

    def __post_init__(self):
        self.mask = as_matrix(self.mask, "mask")
        values = np.unique(self.mask)
        if not np.isin(values, (0.0, 1.0)).all():
            raise ValueError("mask entries must be exactly 0 or 1")
        if isinstance(self.pattern, NofM):
            if self.mask.shape[1] % self.pattern.m_group != 0:
                raise PatternError(
                    f"{self.pattern.label()} needs cols divisible by "
                    f"{self.pattern.m_group}, got {self.mask.shape[1]}"
                )

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass
class PrunedLayer:
    """A frozen weight matrix together with its sparsity mask.

    Invariant: the weight is already masked, i.e. every entry where the mask
    is zero is exactly zero.  Constructors in this module establish that;
    ``verify_mask`` detects violations in data that arrived from elsewhere.
    """

    weight: np.ndarray
    mask: SparseMask

    def __post_init__(self):
        self.weight = as_matrix(self.weight, "weight")
        if self.weight.shape != self.mask.shape:
            raise ShapeError(
                f"weight {self.weight.shape} and mask {self.mask.shape} differ"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


@dataclass
class CalibrationStats:
    """Per-input-feature activation norms from a calibration batch."""

    col_norms: np.ndarray

    def __post_init__(self):
        self.col_norms = as_matrix(self.col_norms, "col_norms")
        if self.col_norms.shape[0] != 1:
            raise ShapeError(
                f"col_norms must be a (1, n) row, got {self.col_norms.shape}"
            )
        if (self.col_norms < 0).any():
            raise ValueError("col_norms must be non-negative")


def collect_calibration(xs: np.ndarray) -> CalibrationStats:
    """Column-wise L2 norms over a batch of layer inputs.

    col_norms[j] = sqrt(sum_i xs[i][j]^2), accumulated in ascending row order.
    """
    xs = as_matrix(xs, "calibration batch")
    acc = np.zeros((1, xs.shape[1]), dtype=np.float64)
    for i in range(xs.shape[0]):
        acc += xs[i] * xs[i]
    return CalibrationStats(np.sqrt(acc))


def score_magnitude(w: np.ndarray) -> np.ndarray:
    """Importance = |w|."""
    return np.abs(as_matrix(w, "weight"))


def score_wanda(w: np.ndarray, stats: CalibrationStats) -> np.ndarray:
    """Importance = |w| scaled per column by calibration activation norms."""
    w = as_matrix(w, "weight")
    if stats.col_norms.shape[1] != w.shape[1]:
        raise ShapeError(
            f"calibration covers {stats.col_norms.shape[1]} input features, "
            f"weight has {w.shape[1]}"
        )
    return np.abs(w) * stats.col_norms


def build_mask(
    scores: np.ndarray,
    pattern: Unstructured | NofM,
    row_wise: bool = False,
) -> SparseMask:
    """Construct the keep/drop mask implied by ``scores`` under ``pattern``.

    N:M keeps the top n_keep per contiguous group of m_group within each row.
    Unstructured zeroes the floor(ratio * count) lowest-scoring entries over
    the whole matrix, or per row when ``row_wise`` is set.  Score ties keep
    the entry with the smaller (row, col) index.
    """
    scores = as_matrix(scores, "scores")
    rows, cols = scores.shape
    if isinstance(pattern, NofM):
        if cols % pattern.m_group != 0:
            raise PatternError(
                f"{pattern.label()} needs cols divisible by {pattern.m_group}, "
                f"got {cols}"
            )
        groups = scores.reshape(rows, cols // pattern.m_group, pattern.m_group)
        # Stable sort of negated scores: ties stay in ascending column order,
        # so the earliest column wins a tie.
        order = np.argsort(-groups, axis=2, kind="stable")
        mask3 = np.zeros_like(groups)
        np.put_along_axis(mask3, order[:, :, : pattern.n_keep], 1.0, axis=2)
        return SparseMask(mask3.reshape(rows, cols), pattern)

    if row_wise:
        n_zero = int(pattern.ratio * cols)
        mask = np.ones_like(scores)
        for i in range(rows):
            if n_zero == 0:
                continue
            idx = np.arange(cols)
            order = np.lexsort((-idx, scores[i]))
            mask[i, order[:n_zero]] = 0.0
        return SparseMask(mask, pattern)

    n_zero = int(pattern.ratio * scores.size)
    flat = scores.ravel()
    idx = np.arange(flat.size)
    # Primary key ascending score; among ties the larger flat index sorts
    # first and is zeroed first, so the smaller (row, col) index survives.
    order = np.lexsort((-idx, flat))
    mask = np.ones(flat.size, dtype=np.float64)
    if n_zero:
        mask[order[:n_zero]] = 0.0
    return SparseMask(mask.reshape(rows, cols), pattern)


def apply_mask(w: np.ndarray, mask: SparseMask) -> PrunedLayer:
    """Zero the masked-out entries of ``w``."""
    w = as_matrix(w, "weight")
    if w.shape != mask.shape:
        raise ShapeError(f"weight {w.shape} and mask {mask.shape} differ")
    new_w = hadamard(w, mask.mask)
    # negative * 0.0 leaves -0.0 behind; pin masked slots to canonical +0.0
    # so byte-level comparisons of pruned tensors behave
    new_w[mask.mask == 0.0] = 0.0
    return PrunedLayer(new_w, mask)


@dataclass
class MaskReport:
    """Outcome of checking a layer against its declared mask and pattern."""

    ok: bool
    pattern_ok: bool
    violations: list[tuple[int, int]] = field(default_factory=list)
    nnz: int = 0
    zeros: int = 0
    total: int = 0
    ratio: float = 0.0
    label: str = ""


def verify_mask(layer: PrunedLayer) -> MaskReport:
    """Check mask/weight consistency and pattern compliance.

    Fails (ok=False) when the weight is nonzero anywhere the mask is zero,
    listing the offending (row, col) positions, or when the mask does not
    satisfy its declared pattern.
    """
    mask = layer.mask.mask
    pattern = layer.mask.pattern
    bad = np.argwhere((mask == 0.0) & (layer.weight != 0.0))
    violations = [(int(r), int(c)) for r, c in bad]

    total = mask.size
    zeros = total - int(np.count_nonzero(mask))
    nnz = int(np.count_nonzero(layer.weight))

    if isinstance(pattern, NofM):
        rows, cols = mask.shape
        group_sums = mask.reshape(rows, cols // pattern.m_group, pattern.m_group).sum(
            axis=2
        )
        pattern_ok = bool((group_sums == pattern.n_keep).all())
    else:
        rows, cols = mask.shape
        expected = {int(pattern.ratio * total), rows * int(pattern.ratio * cols)}
        pattern_ok = zeros in expected

    return MaskReport(
        ok=(not violations) and pattern_ok,
        pattern_ok=pattern_ok,
        violations=violations,
        nnz=nnz,
        zeros=zeros,
        total=total,
        ratio=zeros / total,
        label=pattern.label(),
    )
