"""Multiplicative adapters that fine-tune pruned layers without densifying them.

A frozen pruned weight W (m x n) is modulated entrywise by two small
trainable factors: a block factor ``alpha`` of shape (r, n), where each of
the r consecutive row blocks of W shares one alpha row, and a per-output-row
factor ``beta`` of shape (m, 1).  The effective update is

    W' = W * repeat_rows(alpha, m // r) * broadcast_col(beta, n)

and the layer output is  y = x @ W.T + s * (drop(x) @ W'.T)  with inverted
dropout on the adapter branch only.  Because W' is W times something, every
zero of W stays exactly zero, through training and through merging.

Two forward implementations are provided.  The naive one materializes W' and
is the reference.  The optimized one never builds an m x n temporary: it runs
one thin matmul per row block against the matching slice of the frozen
weight, scaling the input by that block's alpha row first and the output
columns by beta afterwards.  Both share one backward.

A conventional additive low-rank adapter (y += s * drop(x) @ A.T @ B.T) is
included as the contrast case: merging it produces a dense matrix, which is
exactly the failure mode the multiplicative form avoids.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import PatternError, ShapeError, StateError
from .numerics import as_matrix, broadcast_col, hadamard, matmul, note_alloc, repeat_rows
from .pruning import PrunedLayer, apply_mask
from .rng import Rng


# ---------------------------------------------------------------------------
# dropout


@dataclass
class DropoutMask:
    """Inverted-dropout realization: keep pattern, rate, and rescale factor.

    ``keep`` is a 0/1 matrix over the input shape, or None for the identity
    (eval mode or p = 0).  Kept entries are scaled by 1 / (1 - p) so the map
    is mean-preserving; applying the same mask to a gradient is the exact
    adjoint, so backward reuses ``apply``.
    """

    keep: np.ndarray | None
    p: float
    scale: float

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.keep is None:
            return x
        if x.shape != self.keep.shape:
            raise ShapeError(
                f"dropout mask shape {self.keep.shape} does not match {x.shape}"
            )
        out = x * self.keep
        out *= self.scale
        note_alloc(out.shape)
        return out


_IDENTITY_DROPOUT = DropoutMask(keep=None, p=0.0, scale=1.0)


def dropout_apply(
    x: np.ndarray, p: float, rng: Rng | None, training: bool
) -> tuple[np.ndarray, DropoutMask]:
    """Apply inverted dropout, returning (dropped input, realized mask).

    Eval mode or p = 0 is the identity with a trivial mask.  Entries are
    zeroed independently with probability p, drawing one uniform per entry in
    row-major order, and survivors are scaled by 1 / (1 - p).
    """
    if not (0.0 <= p < 1.0):
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, _IDENTITY_DROPOUT
    if rng is None:
        raise ValueError("training-mode dropout with p > 0 requires an rng")
    u = rng.doubles(x.size).reshape(x.shape)
    keep = (u >= p).astype(np.float64)
    note_alloc(keep.shape)
    mask = DropoutMask(keep=keep, p=p, scale=1.0 / (1.0 - p))
    return mask.apply(x), mask


# ---------------------------------------------------------------------------
# multiplicative adapter


@dataclass
class SppAdapter:
    """Trainable multiplicative factors for one pruned layer.

    alpha: (r, n) block factor, beta: (m, 1) row factor, s: branch scale,
    p: adapter-branch dropout rate.  r must divide the layer's row count m.
    """

    alpha: np.ndarray
    beta: np.ndarray
    r: int
    s: float = 1.0
    p: float = 0.05

    def __post_init__(self):
        self.alpha = as_matrix(self.alpha, "alpha")
        self.beta = as_matrix(self.beta, "beta")
        if self.alpha.shape[0] != self.r:
            raise ShapeError(
                f"alpha has {self.alpha.shape[0]} rows, expected r = {self.r}"
            )
        if self.beta.shape[1] != 1:
            raise ShapeError(f"beta must be a column (m, 1), got {self.beta.shape}")
        if self.r < 1:
            raise PatternError(f"r must be >= 1, got {self.r}")
        m = self.beta.shape[0]
        if m % self.r != 0:
            raise PatternError(f"r = {self.r} does not divide m = {m}")
        if not (0.0 <= self.p < 1.0):
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.p}")
        if not np.any(self.alpha) and not np.any(self.beta):
            warnings.warn(
                "adapter initialized with alpha and beta both all-zero: the "
                "alpha gradient is identically zero and training cannot move "
                "either factor",
                UserWarning,
                stacklevel=2,
            )

    @property
    def m(self) -> int:
        return self.beta.shape[0]

    @property
    def n(self) -> int:
        return self.alpha.shape[1]


def spp_init(m: int, n: int, r: int, s: float, p: float, rng: Rng) -> SppAdapter:
    """Fresh adapter: beta = 0, alpha uniform in [-1/sqrt(n), 1/sqrt(n)).

    Zero beta makes the adapter branch vanish, so a freshly attached model
    computes exactly what the pruned base computes.  Alpha is drawn row-major
    from the given stream, so init is reproducible from the seed alone.
    """
    if m < 1 or n < 1:
        raise ShapeError(f"layer dimensions must be positive, got {m}x{n}")
    if r < 1 or m % r != 0:
        raise PatternError(f"r must divide m: got r = {r}, m = {m}")
    bound = 1.0 / np.sqrt(n)
    alpha = rng.uniform(-bound, bound, r, n)
    beta = np.zeros((m, 1), dtype=np.float64)
    return SppAdapter(alpha=alpha, beta=beta, r=r, s=s, p=p)


def _check_adapter_layer(layer: PrunedLayer, adapter: SppAdapter) -> None:
    m, n = layer.shape
    if adapter.m != m or adapter.n != n:
        raise ShapeError(
            f"adapter ({adapter.m}x{adapter.n}) does not fit layer ({m}x{n})"
        )


def spp_effective_weight(layer: PrunedLayer, adapter: SppAdapter) -> np.ndarray:
    """Materialize W' = W * repeat_rows(alpha, m/r) * broadcast_col(beta, n).

    Reference implementation; allocates the full m x n modulation.  Zeros of
    the frozen weight are zeros of the result by construction.
    """
    _check_adapter_layer(layer, adapter)
    m, n = layer.shape
    rep = repeat_rows(adapter.alpha, m // adapter.r)
    col = broadcast_col(adapter.beta, n)
    return hadamard(hadamard(layer.weight, rep), col)


@dataclass
class SppCache:
    """Everything spp_backward needs from a training-mode forward."""

    x_dropped: np.ndarray
    dropout: DropoutMask
    layer: PrunedLayer
    adapter: SppAdapter


@dataclass
class AdapterGrads:
    """Gradients from one backward pass through an adapted layer."""

    d_alpha: np.ndarray
    d_beta: np.ndarray
    d_x: np.ndarray


def _resolve_dropout(
    x: np.ndarray,
    p: float,
    rng: Rng | None,
    training: bool,
    dropout_mask: DropoutMask | None,
) -> tuple[np.ndarray, DropoutMask]:
    if dropout_mask is not None:
        return dropout_mask.apply(x), dropout_mask
    return dropout_apply(x, p, rng, training)


def spp_forward_naive(
    x: np.ndarray,
    layer: PrunedLayer,
    adapter: SppAdapter,
    rng: Rng | None = None,
    training: bool = False,
    dropout_mask: DropoutMask | None = None,
) -> tuple[np.ndarray, SppCache | None]:
    """Reference forward: y = x @ W.T + s * (drop(x) @ W'.T).

    Materializes the effective weight.  Returns (y, cache); the cache is None
    outside training mode.  Pass ``dropout_mask`` to pin the dropout
    realization, e.g. when cross-checking against the optimized path.
    """
    x = as_matrix(x, "x")
    _check_adapter_layer(layer, adapter)
    if x.shape[1] != layer.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} features, layer expects {layer.shape[1]}")
    x_dropped, mask = _resolve_dropout(x, adapter.p, rng, training, dropout_mask)
    base = matmul(x, layer.weight)
    w_eff = spp_effective_weight(layer, adapter)
    branch = adapter.s * matmul(x_dropped, w_eff)
    note_alloc(branch.shape)
    y = base + branch
    note_alloc(y.shape)
    if not training:
        return y, None
    return y, SppCache(x_dropped=x_dropped, dropout=mask, layer=layer, adapter=adapter)


def spp_forward_optimized(
    x: np.ndarray,
    layer: PrunedLayer,
    adapter: SppAdapter,
    rng: Rng | None = None,
    training: bool = False,
    dropout_mask: DropoutMask | None = None,
) -> tuple[np.ndarray, SppCache | None]:
    """Memory-lean forward, same contract as spp_forward_naive.

    Never materializes the m x n effective weight.  Dropout is applied to the
    input once, before the block split; then for each of the r row blocks the
    dropped input is scaled by that block's alpha row and multiplied against
    the matching rows of the frozen weight (a view, not a copy).  The
    concatenated (b, m) output is finally scaled per column by beta.  Peak
    transient footprint is one (b, n) buffer plus (b, m) accumulators.
    """
    x = as_matrix(x, "x")
    _check_adapter_layer(layer, adapter)
    if x.shape[1] != layer.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} features, layer expects {layer.shape[1]}")
    x_dropped, mask = _resolve_dropout(x, adapter.p, rng, training, dropout_mask)

    m, _ = layer.shape
    block = m // adapter.r
    base = matmul(x, layer.weight)
    branch = np.empty((x.shape[0], m), dtype=np.float64)
    note_alloc(branch.shape)
    for j in range(adapter.r):
        x_scaled = x_dropped * adapter.alpha[j]
        note_alloc(x_scaled.shape)
        rows = layer.weight[j * block : (j + 1) * block, :]
        branch[:, j * block : (j + 1) * block] = matmul(x_scaled, rows)
    branch *= adapter.beta[:, 0]
    branch *= adapter.s
    y = base + branch
    note_alloc(y.shape)
    if not training:
        return y, None
    return y, SppCache(x_dropped=x_dropped, dropout=mask, layer=layer, adapter=adapter)


def spp_backward(cache: SppCache | None, d_y: np.ndarray) -> AdapterGrads:
    """Gradients of the adapted layer given upstream d_y.

    With G = d_y, X = dropped input, and H = s * G.T @ X (m x n):

        d_beta[i]     = sum_k H[i][k] * W[i][k] * alpha[i // (m/r)][k]
        d_alpha[j][k] = sum over rows i of block j of H[i][k] * W[i][k] * beta[i]
        d_x           = G @ W + s * drop_backward(G @ W')

    Raises StateError when called without a training-mode cache.
    """
    if cache is None:
        raise StateError("backward requires the cache from a training-mode forward")
    d_y = as_matrix(d_y, "d_y")
    layer, adapter = cache.layer, cache.adapter
    m, n = layer.shape
    if d_y.shape != (cache.x_dropped.shape[0], m):
        raise ShapeError(
            f"d_y shape {d_y.shape} does not match forward output "
            f"({cache.x_dropped.shape[0]}, {m})"
        )
    block = m // adapter.r

    h = adapter.s * matmul(d_y.T, cache.x_dropped.T)
    hw = h * layer.weight
    rep = repeat_rows(adapter.alpha, block)
    d_beta = (hw * rep).sum(axis=1, keepdims=True)
    d_alpha = (hw * adapter.beta).reshape(adapter.r, block, n).sum(axis=1)

    w_eff = spp_effective_weight(layer, adapter)
    d_x = matmul(d_y, layer.weight.T) + adapter.s * cache.dropout.apply(
        matmul(d_y, w_eff.T)
    )
    return AdapterGrads(d_alpha=d_alpha, d_beta=d_beta, d_x=d_x)


def spp_merge(layer: PrunedLayer, adapter: SppAdapter) -> PrunedLayer:
    """Fold the adapter into the weight: W + s * W', keeping the mask.

    At masked positions both terms are exact zeros, so the merged layer
    satisfies the same mask; no re-pruning step exists or is needed.
    """
    _check_adapter_layer(layer, adapter)
    merged = layer.weight + adapter.s * spp_effective_weight(layer, adapter)
    return PrunedLayer(merged, layer.mask)


# ---------------------------------------------------------------------------
# additive low-rank adapter (the densifying baseline)


@dataclass
class LoraAdapter:
    """Additive low-rank factors: update s * B @ A with A (r, n), B (m, r)."""

    a: np.ndarray
    b: np.ndarray
    s: float = 1.0
    p: float = 0.05

    def __post_init__(self):
        self.a = as_matrix(self.a, "a")
        self.b = as_matrix(self.b, "b")
        if self.a.shape[0] != self.b.shape[1]:
            raise ShapeError(
                f"rank mismatch: a is {self.a.shape}, b is {self.b.shape}"
            )
        if not (0.0 <= self.p < 1.0):
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.p}")

    @property
    def r(self) -> int:
        return self.a.shape[0]

    @property
    def m(self) -> int:
        return self.b.shape[0]

    @property
    def n(self) -> int:
        return self.a.shape[1]


def lora_init(m: int, n: int, r: int, s: float, p: float, rng: Rng) -> LoraAdapter:
    """A uniform in [-1/sqrt(n), 1/sqrt(n)), B zero, so the branch starts silent."""
    if m < 1 or n < 1 or r < 1:
        raise ShapeError(f"dimensions must be positive, got m={m} n={n} r={r}")
    bound = 1.0 / np.sqrt(n)
    a = rng.uniform(-bound, bound, r, n)
    b = np.zeros((m, r), dtype=np.float64)
    return LoraAdapter(a=a, b=b, s=s, p=p)


@dataclass
class LoraCache:
    x_dropped: np.ndarray
    dropout: DropoutMask
    layer: PrunedLayer
    adapter: LoraAdapter
    u: np.ndarray  # drop(x) @ A.T, shape (b, r)


@dataclass
class LoraGrads:
    d_a: np.ndarray
    d_b: np.ndarray
    d_x: np.ndarray


def lora_forward(
    x: np.ndarray,
    layer: PrunedLayer,
    adapter: LoraAdapter,
    rng: Rng | None = None,
    training: bool = False,
    dropout_mask: DropoutMask | None = None,
) -> tuple[np.ndarray, LoraCache | None]:
    """y = x @ W.T + s * drop(x) @ A.T @ B.T."""
    x = as_matrix(x, "x")
    m, n = layer.shape
    if adapter.m != m or adapter.n != n:
        raise ShapeError(
            f"adapter ({adapter.m}x{adapter.n}) does not fit layer ({m}x{n})"
        )
    if x.shape[1] != n:
        raise ShapeError(f"input has {x.shape[1]} features, layer expects {n}")
    x_dropped, mask = _resolve_dropout(x, adapter.p, rng, training, dropout_mask)
    base = matmul(x, layer.weight)
    u = matmul(x_dropped, adapter.a)
    branch = adapter.s * matmul(u, adapter.b)
    note_alloc(branch.shape)
    y = base + branch
    note_alloc(y.shape)
    if not training:
        return y, None
    return y, LoraCache(x_dropped=x_dropped, dropout=mask, layer=layer, adapter=adapter, u=u)


def lora_backward(cache: LoraCache | None, d_y: np.ndarray) -> LoraGrads:
    """Gradients for the low-rank branch plus the input."""
    if cache is None:
        raise StateError("backward requires the cache from a training-mode forward")
    d_y = as_matrix(d_y, "d_y")
    layer, adapter = cache.layer, cache.adapter
    if d_y.shape != (cache.x_dropped.shape[0], layer.shape[0]):
        raise ShapeError(
            f"d_y shape {d_y.shape} does not match forward output "
            f"({cache.x_dropped.shape[0]}, {layer.shape[0]})"
        )
    d_b = adapter.s * matmul(d_y.T, cache.u.T)
    d_u = adapter.s * matmul(d_y, adapter.b.T)
    d_a = matmul(d_u.T, cache.x_dropped.T)
    d_x = matmul(d_y, layer.weight.T) + cache.dropout.apply(matmul(d_u, adapter.a.T))
    return LoraGrads(d_a=d_a, d_b=d_b, d_x=d_x)


def lora_merge_dense(layer: PrunedLayer, adapter: LoraAdapter) -> np.ndarray:
    """Fold the low-rank update in: W + s * B @ A.  Generically dense."""
    m, n = layer.shape
    if adapter.m != m or adapter.n != n:
        raise ShapeError(
            f"adapter ({adapter.m}x{adapter.n}) does not fit layer ({m}x{n})"
        )
    return layer.weight + adapter.s * matmul(adapter.b, adapter.a.T)


def lora_star_reprune(dense: np.ndarray, original_mask) -> PrunedLayer:
    """Re-impose the pre-training mask on a densified merge.

    This is the only way an additive merge can honor the original sparsity;
    whatever the update placed on masked positions is discarded.
    """
    return apply_mask(dense, original_mask)
