"""Command-line runner: train, ablate, sweep, fed, accountant.

Each run writes one directory::

    config.resolved   every config key with its resolved value
    trace.csv         epoch,group,accuracy,grad_norm  (one row per epoch per group)
    report.csv        metric,group,value              (final metrics, long format)
    rdp.csv           order,rdp,epsilon               (composed accountant table)

``ablate`` adds ``ablation.csv`` and ``sweep`` adds ``summary.csv`` and
``summary_groups.csv`` in the parent output directory; their columns are
``ABLATION_COLUMNS``, ``SUMMARY_COLUMNS`` and ``SUMMARY_GROUP_COLUMNS``.
All numbers are written with ``repr`` so identical runs give identical
bytes; the only non-reproducible value is the ``wall_clock_seconds`` row.

Exit codes: 0 success, 2 configuration or usage error, 3 data error,
4 numeric failure.  Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

from . import accountant as A
from . import audit
from . import experiments as X
from .config import ConfigError, dump_config, load_config
from .data_harness import DataFormatError
from .dp_optimizer import MODES
from .numeric_core import NumericError

__all__ = [
    "main",
    "cmd_train",
    "cmd_ablate",
    "cmd_sweep",
    "cmd_fed",
    "cmd_accountant",
    "SUMMARY_COLUMNS",
    "SUMMARY_GROUP_COLUMNS",
    "ABLATION_COLUMNS",
]

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
NULL = "null"

SUMMARY_COLUMNS = (
    "param", "value", "epsilon", "best_order", "overall_accuracy",
    "min_accuracy", "max_accuracy", "gap", "target_accuracy", "target_gap",
    "baseline_target_gap",
)
SUMMARY_GROUP_COLUMNS = ("param", "value", "group", "accuracy", "baseline_accuracy")
ABLATION_COLUMNS = (
    "arm", "epsilon", "overall_accuracy", "gap", "target_accuracy",
    "target_gap", "target_drop", "grad_norm_ratio",
)


def _num(x) -> str:
    if x is None:
        return NULL
    if isinstance(x, float):
        if math.isnan(x):
            return NULL
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return repr(x)
    return str(x)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) if not isinstance(v, str) else v for v in row])


def _write_rdp(path, curve, delta) -> None:
    rows = A.rdp_table(curve, delta) if curve is not None else []
    _write_csv(path, ("order", "rdp", "epsilon"), rows)


def _target_gap(acc: dict, target):
    if target is None or target not in acc:
        return None
    return max(acc.values()) - acc[target]


# ---------------------------------------------------------------- train

def _train_report(cfg, arm: X.ArmResult, base: X.ArmResult | None, target) -> list:
    """Long-format ``(metric, group, value)`` rows for one trained arm."""
    acc = arm.evaluation.accuracy
    rows = [
        ("epsilon", "", arm.epsilon),
        ("best_order", "", arm.best_order),
        ("delta", "", cfg["dp.delta"]),
        ("mode", "", arm.mode),
        ("seed", "", cfg["seed"]),
        ("train_size", "", arm.train_size),
        ("steps", "", arm.trace.num_steps),
        ("overall_accuracy", "", arm.evaluation.overall),
        ("gap", "", arm.evaluation.gap()),
        ("target_gap", "" if target is None else str(target), _target_gap(acc, target)),
    ]
    rows += [("accuracy", str(g), acc[g]) for g in arm.evaluation.groups]
    if arm.norms is not None and target is not None and target < arm.norms.epoch_means.shape[1]:
        rows.append(("grad_norm_ratio_epoch1", str(target), arm.norms.ratio(target, 0)))
    if base is not None:
        rep = audit.disparity(base.evaluation, arm.evaluation)
        rows += [
            ("baseline_gap", "", rep.baseline_gap),
            ("baseline_target_gap", "" if target is None else str(target),
             _target_gap(base.evaluation.accuracy, target)),
            ("rank_correlation", "", rep.rank_correlation),
            ("largest_drop_group", "", str(rep.largest_drop_group)),
        ]
        rows += [("baseline_accuracy", str(g), rep.baseline_accuracy[g]) for g in rep.groups]
        rows += [("drop", str(g), rep.drop[g]) for g in rep.groups]
    return rows


def _trace_rows(arm: X.ArmResult):
    trace = arm.trace
    norms = arm.norms.epoch_means if arm.norms is not None else None
    for e, accs in enumerate(trace.epoch_class_accuracy):
        for c, a in enumerate(accs):
            if math.isnan(a):
                continue
            gn = norms[e, c] if norms is not None and e < len(norms) else None
            yield (e + 1, str(c), float(a), None if gn is None else float(gn))


def _write_run(out_dir, cfg, rows, trace_rows, curve) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved"), "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
    _write_csv(os.path.join(out_dir, "trace.csv"), ("epoch", "group", "accuracy", "grad_norm"), trace_rows)
    _write_csv(os.path.join(out_dir, "report.csv"), ("metric", "group", "value"), rows)
    _write_rdp(os.path.join(out_dir, "rdp.csv"), curve, cfg["dp.delta"])


def _run_train(cfg, out_dir, data=None):
    data = data or X.load_data(cfg)
    arm = X.run_arm(cfg, cfg["dp.mode"], data)
    base = None
    if cfg["train.compare_baseline"] and cfg["dp.mode"] != "baseline":
        base = X.run_arm(cfg, "baseline", data)
    target = X.target_class(cfg)
    rows = _train_report(cfg, arm, base, target)
    seconds = arm.seconds + (base.seconds if base else 0.0)
    rows.append(("wall_clock_seconds", "", seconds))
    _write_run(out_dir, cfg, rows, list(_trace_rows(arm)), arm.curve)
    return arm, base, rows


def cmd_train(cfg: dict):
    """Train the configured mode (plus a baseline twin) and write a run directory."""
    arm, base, rows = _run_train(cfg, cfg["output_dir"])
    _say(f"{arm.mode}: eps={_num(arm.epsilon)} overall={arm.evaluation.overall:.4f} "
         f"gap={arm.evaluation.gap():.4f} -> {cfg['output_dir']}")
    return rows


# ---------------------------------------------------------------- ablate

def cmd_ablate(cfg: dict):
    """Run all four arms on shared data and seed; write one table."""
    data = X.load_data(cfg)
    target = X.target_class(cfg)
    arms = {}
    for mode in MODES:
        arms[mode] = X.run_arm(cfg, mode, data)
    base = arms["baseline"]
    table = []
    for mode, arm in arms.items():
        sub_cfg = {**cfg, "dp.mode": mode, "output_dir": os.path.join(cfg["output_dir"], mode)}
        rows = _train_report(sub_cfg, arm, None if mode == "baseline" else base, target)
        rows.append(("wall_clock_seconds", "", arm.seconds))
        _write_run(sub_cfg["output_dir"], sub_cfg, rows, list(_trace_rows(arm)), arm.curve)
        acc = arm.evaluation.accuracy
        ratio = arm.norms.ratio(target, 0) if arm.norms is not None and target is not None else None
        table.append((
            mode, arm.epsilon, arm.evaluation.overall, arm.evaluation.gap(),
            acc.get(target) if target is not None else None,
            _target_gap(acc, target),
            None if target is None else base.evaluation.accuracy[target] - acc[target],
            ratio,
        ))
    _write_csv(os.path.join(cfg["output_dir"], "ablation.csv"), ABLATION_COLUMNS, table)
    for row in table:
        _say(f"{row[0]:>15s}: target_acc={_num(row[4])} gap={row[3]:.4f} eps={_num(row[1])}")
    return table


# ---------------------------------------------------------------- sweep

def _label(value) -> str:
    if isinstance(value, tuple):
        return "-".join(str(v) for v in value)
    return _num(value) if not isinstance(value, str) else value


def cmd_sweep(cfg: dict, sweep):
    """One ``train`` run per sweep value, plus summary tables."""
    if sweep is None:
        raise ConfigError("sweep needs a 'sweep.<key> = v1, v2, ...' line")
    key, values = sweep
    if not values:
        raise ConfigError(f"empty value list for sweep.{key}")
    if key in ("seed", "output_dir"):
        raise ConfigError(f"cannot sweep over {key}")
    summary, groups = [], []
    for value in values:
        run_cfg = {**cfg, key: value, "output_dir": os.path.join(cfg["output_dir"], f"{key}={_label(value)}")}
        arm, base, _ = _run_train(run_cfg, run_cfg["output_dir"])
        target = X.target_class(run_cfg)
        acc = arm.evaluation.accuracy
        summary.append((
            key, _label(value), arm.epsilon, arm.best_order, arm.evaluation.overall,
            min(acc.values()), max(acc.values()), arm.evaluation.gap(),
            acc.get(target) if target is not None else None,
            _target_gap(acc, target),
            _target_gap(base.evaluation.accuracy, target) if base is not None else None,
        ))
        for g in arm.evaluation.groups:
            groups.append((key, _label(value), str(g), acc[g],
                           base.evaluation.accuracy[g] if base is not None else None))
        _say(f"{key}={_label(value)}: eps={_num(arm.epsilon)} gap={arm.evaluation.gap():.4f}")
    os.makedirs(cfg["output_dir"], exist_ok=True)
    _write_csv(os.path.join(cfg["output_dir"], "summary.csv"), SUMMARY_COLUMNS, summary)
    _write_csv(os.path.join(cfg["output_dir"], "summary_groups.csv"), SUMMARY_GROUP_COLUMNS, groups)
    return summary


# ---------------------------------------------------------------- fed

def cmd_fed(cfg: dict):
    """DP federation vs its non-private twin; per-group trace and disparity."""
    res = X.run_fed(cfg)
    rep = audit.disparity(res.plain_eval, res.dp_eval)
    rows = [
        ("epsilon", "", res.epsilon),
        ("best_order", "", res.best_order),
        ("delta", "", cfg["dp.delta"]),
        ("epsilon_note", "", "approximate: participant-level unit, q=C/n, multiplier sigma*C/S"),
        ("seed", "", cfg["seed"]),
        ("rounds", "", res.config.rounds),
        ("sigma", "", res.config.sigma),
        ("overall_accuracy", "", res.dp_eval.overall),
        ("baseline_overall_accuracy", "", res.plain_eval.overall),
        ("gap", "", rep.parity_gap),
        ("baseline_gap", "", rep.baseline_gap),
        ("rank_correlation", "", rep.rank_correlation),
        ("largest_drop_group", "", str(rep.largest_drop_group)),
    ]
    rows += [("accuracy", str(g), rep.dp_accuracy[g]) for g in rep.groups]
    rows += [("baseline_accuracy", str(g), rep.baseline_accuracy[g]) for g in rep.groups]
    rows += [("drop", str(g), rep.drop[g]) for g in rep.groups]
    rows += [("participants", g, n) for g, n in sorted(res.group_sizes.items())]
    rows.append(("wall_clock_seconds", "", res.seconds))
    trace_rows = []
    for arm, trace in (("dp", res.dp_trace), ("plain", res.plain_trace)):
        for r, accs in enumerate(trace.group_accuracy):
            trace_rows += [(arm, r, str(g), float(a)) for g, a in accs.items()]
    out = cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.resolved"), "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
    _write_csv(os.path.join(out, "trace.csv"), ("arm", "round", "group", "accuracy"), trace_rows)
    _write_csv(os.path.join(out, "report.csv"), ("metric", "group", "value"), rows)
    _write_rdp(os.path.join(out, "rdp.csv"), res.curve, cfg["dp.delta"])
    _say(f"fed: eps={_num(res.epsilon)} (approximate) drops="
         + ", ".join(f"{g}={rep.drop[g]:.4f}" for g in rep.groups))
    return rows


# ---------------------------------------------------------------- accountant

def cmd_accountant(N: int, b: int, z: float, T: int, delta: float, out=None):
    """Print the RDP table and the resulting epsilon; no training."""
    try:
        if N < 1 or not 1 <= b <= N or T < 0:
            raise ValueError("need N >= 1, 1 <= b <= N and T >= 0")
        steps = T * (N // b)
        curve = A.compose(A.rdp_curve(b / N, z), steps)
        eps, order = A.to_epsilon(curve, delta)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = out or sys.stdout
    out.write(f"# N={N} b={b} q={b / N!r} z={z!r} T={T} steps={steps} delta={delta!r}\n")
    out.write("order,rdp,epsilon\n")
    for a, r, e in A.rdp_table(curve, delta):
        out.write(f"{_num(float(a))},{_num(r)},{_num(e)}\n")
    out.write(f"epsilon = {eps!r} at order {order}\n")
    return eps, order


# ---------------------------------------------------------------- entry point

def _say(msg: str) -> None:
    print(msg, flush=True)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail(EXIT_CONFIG, "usage", message)


def _fail(code: int, kind: str, message: str):
    sys.stderr.write(json.dumps({"error": kind, "exit_code": code, "message": message}) + "\n")
    raise SystemExit(code)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dpdisparity", description="Differential privacy disparity experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in (
        ("train", "train one configured arm (and a baseline twin)"),
        ("ablate", "baseline, clip_only, noise_only and clip_and_noise on shared data"),
        ("sweep", "one run per value of the config's sweep.<key> list"),
        ("fed", "DP federated averaging vs a non-private twin"),
        ("accountant", "privacy budget for N, b, z, T, delta"),
    ):
        sp = sub.add_parser(name, help=text, description=text)
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
        if name == "accountant":
            sp.add_argument("--N", type=int, help="dataset size (accountant.dataset_size)")
            sp.add_argument("--b", type=int, help="batch size (dp.batch_size)")
            sp.add_argument("--z", type=float, help="noise multiplier (dp.noise_multiplier)")
            sp.add_argument("--T", type=int, help="epochs (dp.epochs)")
            sp.add_argument("--delta", type=float, help="target delta (dp.delta)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, sweep = load_config(args.config, args.set)
        if sweep is not None and args.command != "sweep":
            raise ConfigError(f"sweep.{sweep[0]} given but command is {args.command}")
        if args.command == "train":
            cmd_train(cfg)
        elif args.command == "ablate":
            cmd_ablate(cfg)
        elif args.command == "sweep":
            cmd_sweep(cfg, sweep)
        elif args.command == "fed":
            cmd_fed(cfg)
        else:
            cmd_accountant(
                args.N if args.N is not None else cfg["accountant.dataset_size"],
                args.b if args.b is not None else cfg["dp.batch_size"],
                args.z if args.z is not None else cfg["dp.noise_multiplier"],
                args.T if args.T is not None else cfg["dp.epochs"],
                args.delta if args.delta is not None else cfg["dp.delta"],
            )
    except ConfigError as exc:
        _fail(EXIT_CONFIG, "config", str(exc))
    except (DataFormatError, OSError) as exc:
        _fail(EXIT_DATA, "data", str(exc))
    except NumericError as exc:
        _fail(EXIT_NUMERIC, "numeric", str(exc))
    return EXIT_OK

