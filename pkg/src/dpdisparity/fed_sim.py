"""Single-process DP federated averaging.

Each round samples ``C`` of ``n`` participants without replacement.  Every
sampled participant runs plain minibatch SGD locally and submits the model
delta; the server clips each delta to ``S`` and updates

    G <- G + (global_lr / n) * (sum_i clip_S(delta_i) / C + N(0, sigma^2 I))

The clipped average has sensitivity ``S / C``, so ``sigma = z * S / C``
gives noise multiplier ``z``.  With ``global_lr = n`` a round moves the
global model to the average of the sampled local models (plus noise).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .dp_optimizer import STREAM_FED_SAMPLING, STREAM_INIT, STREAM_NOISE, clip_to_norm
from .numeric_core import NumericError, RandomSource, gaussian_vector

__all__ = [
    "FedConfig",
    "Participant",
    "FedTrace",
    "local_update",
    "clipped_delta_sum",
    "aggregate_round",
    "run_federation",
]

_STREAM_LOCAL_BASE = 1000


@dataclass(frozen=True)
class FedConfig:
    n: int
    per_round: int
    rounds: int
    local_epochs: int = 1
    local_lr: float = 0.1
    local_batch: int = 10
    clip: float = math.inf
    noise_multiplier: float | None = None
    sigma: float = 0.0
    global_lr: float | None = None  # None means n: plain model averaging

    def __post_init__(self):
        if not 1 <= self.per_round <= self.n:
            raise ValueError("need 1 <= per_round <= n")
        if self.rounds < 0 or self.local_epochs < 0:
            raise ValueError("rounds and local_epochs must be non-negative")
        if self.local_batch < 1:
            raise ValueError("local_batch must be positive")
        if not self.clip > 0:
            raise ValueError("clip must be positive (use inf to disable)")
        if self.noise_multiplier is not None:
            if not math.isfinite(self.clip):
                raise ValueError("a noise multiplier needs a finite clip bound")
            object.__setattr__(self, "sigma", self.noise_multiplier * self.clip / self.per_round)
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    @property
    def eta_g(self) -> float:
        return float(self.n) if self.global_lr is None else float(self.global_lr)


@dataclass
class Participant:
    id: int
    data: object  # LabeledDataset
    group: str = "all"

    def __post_init__(self):
        if len(self.data.labels) == 0:
            raise ValueError(f"participant {self.id} has no data")


@dataclass
class FedTrace:
    sampled: list = field(default_factory=list)
    clipped_fraction: list = field(default_factory=list)
    group_accuracy: list = field(default_factory=list)  # one {group: acc} per evaluation
    overall_accuracy: list = field(default_factory=list)


def local_update(
    spec: M.ModelSpec,
    global_params: np.ndarray,
    participant: Participant,
    cfg: FedConfig,
    rng: RandomSource | None = None,
) -> np.ndarray:
    """Return ``L - G`` after ``cfg.local_epochs`` of local minibatch SGD.

    Batches follow a fresh permutation each epoch; the final batch may be
    smaller than ``cfg.local_batch``.
    """
    rng = rng or RandomSource(0, _STREAM_LOCAL_BASE + participant.id)
    params = np.array(global_params, dtype=np.float64)
    data = participant.data
    n = len(data.labels)
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.local_batch):
            idx = order[start:start + cfg.local_batch]
            _, g = M.loss_and_grad(spec, params, M.Batch(data.inputs[idx], data.labels[idx]))
            params = params - cfg.local_lr * g
    return params - global_params


def clipped_delta_sum(deltas, clip: float) -> np.ndarray:
    """``sum_i clip_S(delta_i)`` in the given order; ``clip=inf`` disables clipping."""
    deltas = list(deltas)
    if not deltas:
        raise ValueError("no deltas to aggregate")
    total = np.zeros_like(np.asarray(deltas[0], dtype=np.float64))
    for d in deltas:
        total += d if math.isinf(clip) else clip_to_norm(d, clip)
    return total


def aggregate_round(
    global_params: np.ndarray,
    deltas,
    cfg: FedConfig,
    rng: RandomSource,
) -> np.ndarray:
    """Average the clipped deltas, add noise, apply ``global_lr / n``."""
    deltas = list(deltas)
    if len(deltas) != cfg.per_round:
        raise ValueError(f"expected {cfg.per_round} deltas, got {len(deltas)}")
    update = clipped_delta_sum(deltas, cfg.clip) / cfg.per_round
    if cfg.sigma > 0:
        update = update + gaussian_vector(rng, update.size, cfg.sigma)
    return global_params + (cfg.eta_g / cfg.n) * update


def _group_accuracy(spec, params, test, grouping):
    pred = M.predict(spec, params, test.inputs)
    hits = pred == test.labels
    keys = test.labels if grouping == "label" else np.asarray(test.metadata[grouping])
    return {g: float(hits[keys == g].mean()) for g in sorted(set(keys.tolist()), key=str)}, float(hits.mean())


def run_federation(
    spec: M.ModelSpec,
    cfg: FedConfig,
    participants: list,
    rng: RandomSource,
    *,
    init: np.ndarray | None = None,
    test=None,
    grouping: str = "group",
):
    """Run ``cfg.rounds`` rounds; return ``(params, FedTrace)``.

    With ``test`` given, per-group accuracy is logged before the first round
    and after each round.
    """
    if len(participants) != cfg.n:
        raise ValueError(f"cfg.n={cfg.n} but {len(participants)} participants given")
    params = M.init_params(spec, rng.stream(STREAM_INIT)) if init is None else np.array(init, dtype=np.float64)
    sampler = rng.stream(STREAM_FED_SAMPLING)
    noise_rng = rng.stream(STREAM_NOISE)
    trace = FedTrace()

    def log():
        if test is not None:
            acc, overall = _group_accuracy(spec, params, test, grouping)
            trace.group_accuracy.append(acc)
            trace.overall_accuracy.append(overall)

    log()
    for t in range(cfg.rounds):
        chosen = np.sort(sampler.choice(cfg.n, cfg.per_round))
        deltas = []
        clipped = 0
        for i in chosen:
            p = participants[i]
            local_rng = RandomSource(rng.seed, _STREAM_LOCAL_BASE + t * cfg.n + int(i))
            d = local_update(spec, params, p, cfg, local_rng)
            clipped += float(np.linalg.norm(d)) > cfg.clip
            deltas.append(d)
        params = aggregate_round(params, deltas, cfg, noise_rng)
        if not np.all(np.isfinite(params)):
            raise NumericError("global model diverged")
        trace.sampled.append(chosen.tolist())
        trace.clipped_fraction.append(clipped / cfg.per_round)
        log()
    return params, trace
