"""Desk-scale training loop, optimizers, and the recovery experiment pieces.

The net model here is deliberately tiny: a stack of frozen pruned linear
layers, each optionally carrying an adapter, with relu or identity between
them and an MSE or cross-entropy head.  Training touches adapter parameters
only; the fixed-mask baseline mode instead updates the weights themselves
with the gradient masked, which is classical sparse retraining.

All arithmetic is float64 through the deterministic kernels, and all
randomness flows from one seeded stream, so two runs with the same config
produce byte-identical logs and checkpoints.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .adapters import (
    AdapterGrads,
    LoraAdapter,
    SppAdapter,
    lora_backward,
    lora_forward,
    spp_backward,
    spp_forward_naive,
)
from .errors import PatternError, ShapeError, TrainingDiverged
from .numerics import as_matrix, matmul
from .pruning import PrunedLayer, SparseMask, Unstructured, apply_mask, build_mask, score_magnitude
from .rng import Rng

_ACTIVATIONS = ("identity", "relu")
_LOSSES = ("mse", "cross_entropy")
_OPTIMIZERS = ("sgd", "adamw")
_DEFAULT_LR = {"sgd": 1e-2, "adamw": 1e-3}


# ---------------------------------------------------------------------------
# schedule and optimizers


def lr_schedule(step: int, total_steps: int, peak_lr: float, warmup_ratio: float) -> float:
    """Linear warmup to ``peak_lr`` then linear decay toward zero.

    Warmup lasts floor(warmup_ratio * total_steps) steps; the rate is 0 at
    step 0, hits the peak exactly at the warmup boundary, and the decay line
    reaches 0 at ``total_steps``.
    """
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not (0 <= step < total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if not (0.0 <= warmup_ratio < 1.0):
        raise ValueError(f"warmup_ratio must lie in [0, 1), got {warmup_ratio}")
    warmup = int(warmup_ratio * total_steps)
    if warmup > 0 and step < warmup:
        return peak_lr * step / warmup
    return peak_lr * (total_steps - step) / (total_steps - warmup)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState | None,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One decoupled-weight-decay Adam update; returns (new param, new state).

    Moments are bias-corrected; decay is applied directly to the incoming
    parameter (p -= lr * weight_decay * p), not through the gradient.
    """
    if param.shape != grad.shape:
        raise ShapeError(f"param {param.shape} and grad {grad.shape} differ")
    if state is None:
        state = AdamState(m=np.zeros_like(param), v=np.zeros_like(param), t=0)
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_param = param - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * weight_decay * param
    return new_param, AdamState(m=m, v=v, t=t)


def fixed_mask_sgd_step(layer: PrunedLayer, grad: np.ndarray, lr: float) -> PrunedLayer:
    """Sparse retraining update: w -= lr * (grad * mask), zeros untouched."""
    if grad.shape != layer.shape:
        raise ShapeError(f"grad {grad.shape} does not match layer {layer.shape}")
    new_w = layer.weight - lr * (grad * layer.mask.mask)
    return PrunedLayer(new_w, layer.mask)


# ---------------------------------------------------------------------------
# the toy net


@dataclass
class NetLayer:
    layer: PrunedLayer
    adapter: SppAdapter | LoraAdapter | None = None
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(
                f"activation must be one of {_ACTIVATIONS}, got {self.activation!r}"
            )


@dataclass
class ToyNet:
    layers: list[NetLayer]
    loss: str = "mse"

    def __post_init__(self):
        if not self.layers:
            raise ValueError("net needs at least one layer")
        if self.loss not in _LOSSES:
            raise ValueError(f"loss must be one of {_LOSSES}, got {self.loss!r}")

    def has_adapters(self) -> bool:
        return any(nl.adapter is not None for nl in self.layers)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, (2.0 / diff.size) * diff


def cross_entropy_loss(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy against one-hot (or soft) row targets."""
    if logits.shape != target.shape:
        raise ShapeError(f"logits {logits.shape} and target {target.shape} differ")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    softmax = exp / exp.sum(axis=1, keepdims=True)
    log_sm = shifted - np.log(exp.sum(axis=1, keepdims=True))
    batch = logits.shape[0]
    loss = float(-(target * log_sm).sum() / batch)
    return loss, (softmax - target) / batch


_LOSS_FNS = {"mse": mse_loss, "cross_entropy": cross_entropy_loss}


def net_forward(
    net: ToyNet, x: np.ndarray, rng: Rng | None = None, training: bool = False
):
    """Run the stack; returns (prediction, per-layer caches)."""
    cur = as_matrix(x, "x")
    caches = []
    for nl in net.layers:
        if nl.adapter is None:
            pre = matmul(cur, nl.layer.weight)
            cache = cur if training else None
        elif isinstance(nl.adapter, SppAdapter):
            pre, cache = spp_forward_naive(
                cur, nl.layer, nl.adapter, rng=rng, training=training
            )
        else:
            pre, cache = lora_forward(
                cur, nl.layer, nl.adapter, rng=rng, training=training
            )
        post = np.maximum(pre, 0.0) if nl.activation == "relu" else pre
        caches.append((cache, pre))
        cur = post
    return cur, caches


def net_backward(net: ToyNet, caches, d_pred: np.ndarray):
    """Backpropagate; returns one gradient record per layer (same order)."""
    grads: list[AdapterGrads | object | np.ndarray | None] = [None] * len(net.layers)
    g = d_pred
    for i in range(len(net.layers) - 1, -1, -1):
        nl = net.layers[i]
        cache, pre = caches[i]
        if nl.activation == "relu":
            g = g * (pre > 0.0)
        if nl.adapter is None:
            x_in = cache
            d_w = matmul(g.T, x_in.T)
            grads[i] = d_w
            g = matmul(g, nl.layer.weight.T)
        elif isinstance(nl.adapter, SppAdapter):
            ag = spp_backward(cache, g)
            grads[i] = ag
            g = ag.d_x
        else:
            lg = lora_backward(cache, g)
            grads[i] = lg
            g = lg.d_x
    return grads


def eval_loss(net: ToyNet, x: np.ndarray, y: np.ndarray) -> float:
    pred, _ = net_forward(net, x, training=False)
    loss, _ = _LOSS_FNS[net.loss](pred, y)
    return loss


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    steps: int
    lr: float | None = None  # None resolves to the optimizer default
    optimizer: str = "adamw"
    batch_size: int = 32
    warmup_ratio: float = 0.03
    weight_decay: float = 0.001
    seed: int = 0
    fixed_mask_baseline: bool = False

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.optimizer not in _OPTIMIZERS:
            raise ValueError(
                f"optimizer must be one of {_OPTIMIZERS}, got {self.optimizer!r}"
            )
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 <= self.warmup_ratio < 1.0):
            raise ValueError(f"warmup_ratio must lie in [0, 1), got {self.warmup_ratio}")

    def resolved_lr(self) -> float:
        return _DEFAULT_LR[self.optimizer] if self.lr is None else self.lr


@dataclass
class RunRecord:
    """Per-step log plus end-of-run metrics.  Serializes deterministically."""

    steps: list[tuple[int, float, float]] = field(default_factory=list)
    train_loss: float | None = None
    eval_loss: float | None = None
    nnz_before_merge: int | None = None
    nnz_after_merge: int | None = None

    def to_csv(self) -> str:
        lines = ["step,lr,loss"]
        for step, lr, loss in self.steps:
            lines.append(f"{step},{lr!r},{loss!r}")
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        out = {}
        for key in ("train_loss", "eval_loss", "nnz_before_merge", "nnz_after_merge"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        out["recorded_steps"] = len(self.steps)
        return out


def _iter_params(net: ToyNet):
    """Yield (key, get, set, grad-extractor) for every trainable tensor."""
    for i, nl in enumerate(net.layers):
        if isinstance(nl.adapter, SppAdapter):
            ad = nl.adapter
            yield (i, "alpha"), ad.alpha, lambda v, ad=ad: setattr(ad, "alpha", v), (
                lambda g: g.d_alpha
            )
            yield (i, "beta"), ad.beta, lambda v, ad=ad: setattr(ad, "beta", v), (
                lambda g: g.d_beta
            )
        elif isinstance(nl.adapter, LoraAdapter):
            ad = nl.adapter
            yield (i, "a"), ad.a, lambda v, ad=ad: setattr(ad, "a", v), (lambda g: g.d_a)
            yield (i, "b"), ad.b, lambda v, ad=ad: setattr(ad, "b", v), (lambda g: g.d_b)


def train(net: ToyNet, data: tuple[np.ndarray, np.ndarray], cfg: TrainConfig):
    """Optimize adapters (or, in baseline mode, the masked weights).

    Returns (net, RunRecord).  The net is modified in place; base weights are
    never written in adapter mode.  Batches walk the dataset in order with
    wraparound, so the run is a pure function of (net, data, cfg).
    """
    x_all = as_matrix(data[0], "x")
    y_all = as_matrix(data[1], "y")
    if x_all.shape[0] != y_all.shape[0]:
        raise ShapeError(
            f"{x_all.shape[0]} inputs but {y_all.shape[0]} targets"
        )
    if net.has_adapters() and cfg.fixed_mask_baseline:
        raise ValueError("fixed-mask baseline mode expects a net without adapters")
    if not net.has_adapters() and not cfg.fixed_mask_baseline:
        raise ValueError(
            "net has no adapters; set fixed_mask_baseline to retrain masked weights"
        )

    rng = Rng(cfg.seed)
    peak = cfg.resolved_lr()
    loss_fn = _LOSS_FNS[net.loss]
    n_rows = x_all.shape[0]
    record = RunRecord()
    adam_states: dict = {}

    for step in range(cfg.steps):
        lr = lr_schedule(step, cfg.steps, peak, cfg.warmup_ratio)
        take = np.arange(step * cfg.batch_size, (step + 1) * cfg.batch_size) % n_rows
        xb = x_all[take]
        yb = y_all[take]

        pred, caches = net_forward(net, xb, rng=rng, training=True)
        loss, d_pred = loss_fn(pred, yb)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, step - 1)
        record.steps.append((step, lr, loss))

        grads = net_backward(net, caches, d_pred)

        if cfg.fixed_mask_baseline:
            for i, nl in enumerate(net.layers):
                d_w = grads[i]
                if cfg.optimizer == "sgd":
                    nl.layer = fixed_mask_sgd_step(nl.layer, d_w, lr)
                else:
                    masked = d_w * nl.layer.mask.mask
                    new_w, adam_states[(i, "w")] = adamw_step(
                        nl.layer.weight,
                        masked,
                        adam_states.get((i, "w")),
                        lr,
                        cfg.weight_decay,
                    )
                    nl.layer = PrunedLayer(new_w, nl.layer.mask)
        else:
            for key, param, assign, pick in _iter_params(net):
                g = pick(grads[key[0]])
                if cfg.optimizer == "sgd":
                    assign(param - lr * g)
                else:
                    new_p, adam_states[key] = adamw_step(
                        param, g, adam_states.get(key), lr, cfg.weight_decay
                    )
                    assign(new_p)

    if record.steps:
        record.train_loss = record.steps[-1][2]
    return net, record


# ---------------------------------------------------------------------------
# the teacher-student recovery task


@dataclass
class TeacherStudent:
    teacher: ToyNet
    student: ToyNet
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray


def make_teacher_student(
    seed: int,
    m: int,
    n: int,
    pattern,
    samples: int,
    eval_samples: int = 256,
) -> TeacherStudent:
    """Dense random teacher, magnitude-pruned student copy, correlated data.

    Inputs are drawn as z @ mix.T with a random mixing matrix, so features
    are correlated; under correlated inputs the magnitude-pruned copy is not
    the best masked approximation of the teacher, which is what leaves the
    student measurable headroom to recover.  Targets are the teacher's exact
    outputs and the objective is MSE.
    """
    if samples < 1 or eval_samples < 1:
        raise ValueError("need at least one train and one eval sample")
    rng = Rng(seed)
    bound = 1.0 / math.sqrt(n)
    teacher_w = rng.uniform(-bound, bound, m, n)
    mix = rng.uniform(-bound, bound, n, n)
    z = rng.uniform(-1.0, 1.0, samples + eval_samples, n)
    x = matmul(z, mix)
    y = matmul(x, teacher_w)

    ones = SparseMask(np.ones((m, n)), Unstructured(0.0))
    teacher = ToyNet([NetLayer(PrunedLayer(teacher_w, ones))], loss="mse")
    student_layer = apply_mask(teacher_w, build_mask(score_magnitude(teacher_w), pattern))
    student = ToyNet([NetLayer(student_layer)], loss="mse")
    return TeacherStudent(
        teacher=teacher,
        student=student,
        x_train=x[:samples],
        y_train=y[:samples],
        x_eval=x[samples:],
        y_eval=y[samples:],
    )


# ---------------------------------------------------------------------------
# parameter accounting


def count_trainable(
    shapes: list[tuple[int, int]],
    blocks: int,
    r: int,
    extra_params: int = 0,
) -> tuple[int, int, float]:
    """Adapter parameter count for ``blocks`` repetitions of ``shapes``.

    Each (m, n) matrix contributes m + r * n trainable entries (one row
    factor per output, one block factor row per rank slot).  ``total`` is the
    frozen parameter count: blocks * sum(m * n) plus any declared extras such
    as embeddings.  Returns (trainable, total, per-mille).
    """
    if blocks < 1:
        raise ValueError(f"blocks must be >= 1, got {blocks}")
    if r < 1:
        raise PatternError(f"r must be >= 1, got {r}")
    if not shapes:
        raise ValueError("need at least one layer shape")
    bad = [(m, n) for m, n in shapes if m % r != 0]
    if bad:
        raise PatternError(f"r = {r} does not divide the rows of: {bad}")
    if extra_params < 0:
        raise ValueError(f"extra_params must be >= 0, got {extra_params}")
    trainable = blocks * sum(m + r * n for m, n in shapes)
    total = blocks * sum(m * n for m, n in shapes) + extra_params
    return trainable, total, 1000.0 * trainable / total
