"""Build data, models and runs from a resolved configuration dict.

These helpers are what the command-line entry points call; they are also
convenient from scripts.  Nothing here writes files.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import accountant as A
from . import audit
from . import data_harness as D
from . import model as M
from .config import ConfigError
from .dp_optimizer import MODES, STREAM_DATA, DpConfig, TrainTrace, train
from .fed_sim import FedConfig, Participant, run_federation
from .numeric_core import RandomSource

__all__ = [
    "ArmResult",
    "FedResult",
    "load_data",
    "build_spec",
    "dp_config",
    "target_class",
    "run_arm",
    "run_fed",
]


def _parse_blend(text: str) -> dict:
    # "8:3,9;5:1,2" -> {8: (3, 9), 5: (1, 2)}
    out = {}
    for part in filter(None, (p.strip() for p in text.split(";"))):
        try:
            c, parents = part.split(":")
            out[int(c)] = tuple(int(v) for v in parents.split(","))
        except ValueError:
            raise ConfigError(f"bad data.blend entry {part!r}; expected 'c:a,b'") from None
    return out


def load_data(cfg: dict):
    """Return ``(train, test)`` with the configured imbalance applied to train."""
    rng = RandomSource(cfg["seed"], STREAM_DATA)
    k = cfg["data.classes"]
    source = cfg["data.source"]
    if source == "idx":
        paths = [cfg[f"data.{p}"] for p in ("train_images", "train_labels", "test_images", "test_labels")]
        if not all(paths):
            raise ConfigError("data.source = idx needs train/test image and label paths")
        train_ds = D.read_idx(paths[0], paths[1], k)
        test_ds = D.read_idx(paths[2], paths[3], k)
    elif source == "synthetic":
        try:
            train_ds, test_ds = _synthetic(cfg, rng)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    else:
        raise ConfigError(f"unknown data.source {source!r}; expected idx or synthetic")
    if cfg["imbalance.keep"] >= 0:
        spec = D.ImbalanceSpec(cfg["imbalance.class"], cfg["imbalance.keep"])
        try:
            train_ds = D.imbalance(train_ds, spec, rng)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return train_ds, test_ds


def _synthetic(cfg, rng):
    k, dim = cfg["data.classes"], cfg["data.input_dim"]
    n_train, n_test = cfg["data.per_class"], cfg["data.test_per_class"]
    gen = cfg["data.generator"]
    if gen == "blobs":
        train_ds = D.make_synthetic(k, n_train, dim, cfg["data.separation"], rng, noise=cfg["data.noise"])
        test_ds = D.make_synthetic(k, n_test, dim, cfg["data.separation"], rng,
                                   noise=cfg["data.noise"], centers=train_ds.centers)
        return train_ds, test_ds
    if gen == "patterns":
        masks = D.pattern_masks(k, dim, cfg["data.support"], rng, blend=_parse_blend(cfg["data.blend"]),
                                share=cfg["data.blend_share"])
        kw = dict(keep_prob=cfg["data.pixel_keep"], noise=cfg["data.noise"], amplitude=cfg["data.amplitude"])
        return D.make_patterns(masks, n_train, rng, **kw), D.make_patterns(masks, n_test, rng, **kw)
    raise ConfigError(f"unknown data.generator {gen!r}; expected blobs or patterns")


def build_spec(cfg: dict, train_ds) -> M.ModelSpec:
    name = cfg["model"]
    k = train_ds.num_classes
    if name == "mlp":
        dim = int(np.prod(train_ds.inputs.shape[1:]))
        return M.mlp_spec(dim, cfg["model.hidden"], k)
    if name == "convnet":
        if train_ds.inputs.shape[1:] not in ((28, 28), (1, 28, 28), (784,)) or k != 10:
            raise ConfigError("model = convnet needs 28x28 single-channel inputs and 10 classes")
        return M.reference_convnet_spec()
    raise ConfigError(f"unknown model {name!r}; expected mlp or convnet")


def dp_config(cfg: dict, mode: str, n: int) -> DpConfig:
    try:
        return DpConfig(
            mode=mode,
            clip_bound=cfg["dp.clip"],
            noise_multiplier=cfg["dp.noise_multiplier"],
            noise_sigma=cfg["dp.sigma"],
            batch_size=cfg["dp.batch_size"],
            dataset_size=n,
            epochs=cfg["dp.epochs"],
            delta=cfg["dp.delta"],
            optimizer=cfg["dp.optimizer"],
            learning_rate=cfg["dp.lr"],
            accounting_dataset_size=cfg["dp.accounting_n"] or None,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def target_class(cfg: dict):
    """Group singled out in reports: ``eval.target`` or the imbalanced class."""
    if cfg["eval.target"] >= 0:
        return cfg["eval.target"]
    if cfg["imbalance.keep"] >= 0:
        return cfg["imbalance.class"]
    return None


@dataclass
class ArmResult:
    mode: str
    params: np.ndarray
    trace: TrainTrace
    evaluation: audit.GroupedEval
    epsilon: float | None = None
    best_order: float | None = None
    curve: A.PrivacyCurve | None = None
    norms: audit.GradNormSummary | None = None
    train_size: int = 0
    seconds: float = 0.0


def privacy(dcfg: DpConfig):
    """``(eps, best_order, composed curve)``; eps is inf without clipping, None without noise."""
    if dcfg.mode == "noise_only":
        return (math.inf if dcfg.sigma > 0 else None), None, None
    if dcfg.mode != "clip_and_noise" or dcfg.noise_multiplier == 0:
        return None, None, None
    n = dcfg.accounting_dataset_size or dcfg.dataset_size
    steps = dcfg.epochs * (n // dcfg.batch_size)
    curve = A.compose(A.rdp_curve(dcfg.batch_size / n, dcfg.noise_multiplier), steps)
    eps, order = A.to_epsilon(curve, dcfg.delta)
    return eps, order, curve


def run_arm(cfg: dict, mode: str, data=None, *, train_model: bool = True) -> ArmResult:
    """Train one arm and evaluate it on the test set.

    Every arm built from the same ``cfg`` shares data, initial parameters
    and batch order; only the privatisation differs.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown dp.mode {mode!r}; expected one of {MODES}")
    start = time.perf_counter()
    train_ds, test_ds = data or load_data(cfg)
    spec = build_spec(cfg, train_ds)
    dcfg = dp_config(cfg, mode, len(train_ds))
    eps, order, curve = privacy(dcfg)
    if train_model:
        params, trace = train(spec, train_ds, dcfg, RandomSource(cfg["seed"]), test=test_ds)
    else:
        params = M.init_params(spec, RandomSource(cfg["seed"]).stream(2))
        trace = TrainTrace(spec.num_classes, dcfg.steps_per_epoch)
    evaluation = audit.evaluate(spec, params, test_ds, cfg["eval.grouping"])
    norms = audit.gradient_norm_summary(trace) if trace.class_norm_sum else None
    return ArmResult(mode, params, trace, evaluation, eps, order, curve, norms,
                     len(train_ds), time.perf_counter() - start)


@dataclass
class FedResult:
    dp_trace: object
    plain_trace: object
    dp_eval: audit.GroupedEval
    plain_eval: audit.GroupedEval
    epsilon: float | None
    best_order: float | None
    curve: A.PrivacyCurve | None
    config: FedConfig
    group_sizes: dict = field(default_factory=dict)
    seconds: float = 0.0


def _fed_groups(labels, rare_classes):
    return np.where(np.isin(labels, list(rare_classes)), "rare", "majority")


def run_fed(cfg: dict, data=None) -> FedResult:
    """Run a DP federation and its non-private twin on the same shards.

    Test examples are tagged ``rare`` / ``majority`` by class under the
    ``group`` metadata key.  The reported epsilon treats one participant as
    the privacy unit, with sampling rate ``C / n`` and noise multiplier
    ``sigma * C / S`` (the clipped average has sensitivity ``S / C``).
    """
    start = time.perf_counter()
    train_ds, test_ds = data or load_data(cfg)
    spec = build_spec(cfg, train_ds)
    test_ds.metadata["group"] = _fed_groups(test_ds.labels, cfg["fed.rare_classes"])
    n, m = cfg["fed.participants"], cfg["fed.rare_participants"]
    rng = RandomSource(cfg["seed"])
    try:
        if m > 0:
            shards = D.shard(train_ds, n, "by_group", rng.stream(6),
                             group_classes=cfg["fed.rare_classes"], group_participants=m)
        else:
            shards = D.shard(train_ds, n, "iid", rng.stream(6))
        participants = [
            Participant(i, train_ds.subset(idx), "rare" if i < m else "majority")
            for i, idx in enumerate(shards)
        ]
        common = dict(
            n=n, per_round=cfg["fed.per_round"], rounds=cfg["fed.rounds"],
            local_epochs=cfg["fed.local_epochs"], local_lr=cfg["fed.local_lr"],
            local_batch=cfg["fed.local_batch"], global_lr=cfg["fed.global_lr"] or None,
        )
        plain_cfg = FedConfig(**common)
        dp_cfg = FedConfig(**common, clip=cfg["fed.clip"],
                           noise_multiplier=cfg["fed.noise_multiplier"] if math.isfinite(cfg["fed.clip"]) else None)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    grouping = cfg["eval.grouping"]
    init = M.init_params(spec, rng.stream(2))
    plain_params, plain_trace = run_federation(spec, plain_cfg, participants, rng, init=init,
                                               test=test_ds, grouping=grouping)
    dp_params, dp_trace = run_federation(spec, dp_cfg, participants, rng, init=init,
                                         test=test_ds, grouping=grouping)
    eps = order = curve = None
    if dp_cfg.sigma > 0 and math.isfinite(dp_cfg.clip) and dp_cfg.rounds > 0:
        curve = A.compose(A.rdp_curve(dp_cfg.per_round / n, dp_cfg.sigma * dp_cfg.per_round / dp_cfg.clip), dp_cfg.rounds)
        eps, order = A.to_epsilon(curve, cfg["dp.delta"])
    return FedResult(
        dp_trace, plain_trace,
        audit.evaluate(spec, dp_params, test_ds, grouping),
        audit.evaluate(spec, plain_params, test_ds, grouping),
        eps, order, curve, dp_cfg,
        {"rare": m, "majority": n - m},
        time.perf_counter() - start,
    )
