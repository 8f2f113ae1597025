"""DP-SGD and DPAdam with per-example clipping and Gaussian noise.

One noise vector is drawn per batch and added to the sum of clipped
per-example gradients, which is then divided by the expected batch size
``q * N`` (equal to ``b`` since batches have fixed size).

Modes
-----
``baseline``        plain mean gradient
``clip_only``       clip each example to ``S``, no noise
``noise_only``      no clipping, Gaussian noise with an explicit sigma
``clip_and_noise``  clip to ``S`` and add noise with sigma = z * S
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .numeric_core import NumericError, RandomSource, gaussian_vector

__all__ = [
    "MODES",
    "STREAM_INIT",
    "STREAM_NOISE",
    "STREAM_BATCHES",
    "DpConfig",
    "AdamState",
    "TrainTrace",
    "clip_to_norm",
    "clipped_sum",
    "privatize_batch",
    "sgd_step",
    "adam_step",
    "train",
]

MODES = ("baseline", "clip_only", "noise_only", "clip_and_noise")

# fixed stream ids under one master seed
STREAM_DATA = 1
STREAM_INIT = 2
STREAM_NOISE = 3
STREAM_FED_SAMPLING = 4
STREAM_BATCHES = 5


@dataclass(frozen=True)
class DpConfig:
    mode: str = "clip_and_noise"
    clip_bound: float | None = 1.0
    noise_multiplier: float = 0.8
    noise_sigma: float | None = None  # only read in noise_only mode
    batch_size: int = 256
    dataset_size: int = 60000
    epochs: int = 60
    delta: float = 1e-6
    optimizer: str = "sgd"
    learning_rate: float = 0.05
    accounting_dataset_size: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.dataset_size < 1:
            raise ValueError("batch_size and dataset_size must be positive")
        if self.batch_size > self.dataset_size:
            raise ValueError("batch_size exceeds dataset_size")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.mode in ("clip_only", "clip_and_noise"):
            if self.clip_bound is None or not self.clip_bound > 0:
                raise ValueError(f"mode {self.mode} needs a positive clip_bound")
        if self.mode == "clip_and_noise" and self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be non-negative")
        if self.mode == "noise_only" and (self.noise_sigma is None or self.noise_sigma < 0):
            raise ValueError("noise_only mode needs an explicit non-negative noise_sigma")

    @property
    def sampling_rate(self) -> float:
        return self.batch_size / self.dataset_size

    @property
    def clips(self) -> bool:
        return self.mode in ("clip_only", "clip_and_noise")

    @property
    def effective_clip(self) -> float | None:
        return self.clip_bound if self.clips else None

    @property
    def sigma(self) -> float:
        if self.mode == "clip_and_noise":
            return self.noise_multiplier * self.clip_bound
        if self.mode == "noise_only":
            return float(self.noise_sigma)
        return 0.0

    @property
    def steps_per_epoch(self) -> int:
        return self.dataset_size // self.batch_size

    @property
    def steps(self) -> int:
        return self.epochs * self.steps_per_epoch


def clip_to_norm(g: np.ndarray, S: float) -> np.ndarray:
    """``g * min(1, S / ||g||)``."""
    if not S > 0:
        raise ValueError(f"clip bound must be positive, got {S}")
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NumericError("cannot clip a non-finite gradient")
    norm = math.sqrt(float(np.dot(g.ravel(), g.ravel())))
    if norm <= S:
        return g.copy()
    return g * (S / norm)


def clipped_sum(grads: np.ndarray, S: float | None) -> np.ndarray:
    """Sum over rows of ``grads`` after clipping each row; sequential in row order."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.ndim != 2 or len(grads) == 0:
        raise ValueError("expected a non-empty (b, P) gradient stack")
    total = np.zeros(grads.shape[1])
    for g in grads:
        total += g if S is None else clip_to_norm(g, S)
    return total


def privatize_batch(grads: np.ndarray, cfg: DpConfig, rng: RandomSource) -> np.ndarray:
    """Turn a stack of per-example gradients into one privatised update."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.ndim != 2 or len(grads) == 0:
        raise ValueError("expected a non-empty (b, P) gradient stack")
    if len(grads) != cfg.batch_size:
        raise ValueError(f"got {len(grads)} gradients for batch_size {cfg.batch_size}")
    if cfg.mode == "baseline":
        return grads.sum(axis=0) / cfg.batch_size
    total = clipped_sum(grads, cfg.effective_clip)
    return _add_noise_and_scale(total, cfg, rng)


def _add_noise_and_scale(total: np.ndarray, cfg: DpConfig, rng: RandomSource) -> np.ndarray:
    if cfg.mode in ("noise_only", "clip_and_noise"):
        total = total + gaussian_vector(rng, total.size, cfg.sigma)
    # q * N == b by construction
    return total / cfg.batch_size


def sgd_step(params: np.ndarray, g_batch: np.ndarray, lr: float) -> np.ndarray:
    return params - lr * g_batch


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(state: AdamState, params: np.ndarray, g_batch: np.ndarray, lr: float):
    """Bias-corrected Adam update; returns ``(new_state, new_params)``."""
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * g_batch
    v = state.beta2 * state.v + (1 - state.beta2) * g_batch * g_batch
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return AdamState(m, v, t, state.beta1, state.beta2, state.eps), new_params


@dataclass
class TrainTrace:
    """Per-step diagnostics plus per-epoch evaluation.

    ``class_norm_sum`` / ``class_count`` hold, per step and class, the sum
    and number of pre-clip per-example gradient norms in the batch, so
    means can be formed at any granularity.
    """

    num_classes: int
    steps_per_epoch: int
    loss: list = field(default_factory=list)
    class_norm_sum: list = field(default_factory=list)
    class_count: list = field(default_factory=list)
    update_norm: list = field(default_factory=list)
    epoch_class_accuracy: list = field(default_factory=list)
    epoch_accuracy: list = field(default_factory=list)

    @property
    def num_steps(self) -> int:
        return len(self.loss)

    def class_norm_mean(self) -> np.ndarray:
        """``(K, k)`` per-step per-class mean pre-clip norm; NaN where absent."""
        s = np.asarray(self.class_norm_sum, dtype=np.float64).reshape(-1, self.num_classes)
        c = np.asarray(self.class_count, dtype=np.float64).reshape(-1, self.num_classes)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(c > 0, s / np.where(c > 0, c, 1), np.nan)


def _epoch_eval(spec, params, test, trace: TrainTrace) -> None:
    pred = M.predict(spec, params, test.inputs)
    correct = pred == test.labels
    acc = np.full(trace.num_classes, np.nan)
    for c in range(trace.num_classes):
        mask = test.labels == c
        if mask.any():
            acc[c] = correct[mask].mean()
    trace.epoch_class_accuracy.append(acc)
    trace.epoch_accuracy.append(float(correct.mean()))


def train(
    spec: M.ModelSpec,
    dataset,
    cfg: DpConfig,
    rng: RandomSource,
    *,
    test=None,
    init: np.ndarray | None = None,
    record_norms: bool = True,
):
    """Run ``cfg.steps`` optimizer steps; return ``(params, TrainTrace)``.

    ``dataset`` needs ``inputs`` and ``labels`` attributes.  Randomness
    comes from fixed streams of ``rng``'s master seed: parameter init,
    batch order and noise are independent.  Each epoch visits a fresh
    permutation in batches of ``cfg.batch_size``; the trailing partial batch
    is dropped.  If ``test`` is given, per-class accuracy is recorded after
    every epoch.
    """
    n = len(dataset.labels)
    if n == 0:
        raise ValueError("empty dataset")
    if n != cfg.dataset_size:
        raise ValueError(f"dataset has {n} examples but cfg.dataset_size={cfg.dataset_size}")
    params = M.init_params(spec, rng.stream(STREAM_INIT)) if init is None else np.array(init, dtype=np.float64)
    noise_rng = rng.stream(STREAM_NOISE)
    batch_rng = rng.stream(STREAM_BATCHES)
    k = spec.num_classes
    trace = TrainTrace(num_classes=k, steps_per_epoch=cfg.steps_per_epoch)
    adam = AdamState.zeros(params.size) if cfg.optimizer == "adam" else None
    b = cfg.batch_size

    for _ in range(cfg.epochs):
        order = batch_rng.permutation(n)
        for s in range(cfg.steps_per_epoch):
            idx = order[s * b:(s + 1) * b]
            batch = M.Batch(dataset.inputs[idx], dataset.labels[idx])
            if cfg.mode == "baseline":
                loss, g_batch = M.loss_and_grad(spec, params, batch)
                if record_norms:
                    _, norms, _ = M.clipped_grad_sum(spec, params, batch, None)
                update_norm = float(np.linalg.norm(g_batch))
            else:
                total, norms, losses = M.clipped_grad_sum(spec, params, batch, cfg.effective_clip)
                loss = float(losses.mean())
                update_norm = float(np.linalg.norm(total)) / b
                g_batch = _add_noise_and_scale(total, cfg, noise_rng)
            if not np.all(np.isfinite(g_batch)):
                raise NumericError("non-finite gradient during training")
            if adam is None:
                params = sgd_step(params, g_batch, cfg.learning_rate)
            else:
                adam, params = adam_step(adam, params, g_batch, cfg.learning_rate)
            trace.loss.append(loss)
            trace.update_norm.append(update_norm)
            if record_norms:
                trace.class_norm_sum.append(np.bincount(batch.labels, weights=norms, minlength=k))
                trace.class_count.append(np.bincount(batch.labels, minlength=k))
        if test is not None:
            _epoch_eval(spec, params, test, trace)
    return params, trace
