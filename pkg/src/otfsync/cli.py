"""Command-line front end.

Subcommands: ``validate`` a config file, ``trial`` for a single debug trial,
``run`` for an experiment spec file, ``figure`` for the built-in experiment
presets, and ``dump-metric`` for estimator diagnostics.

Exit codes: 0 success, 2 configuration error, 3 estimation failure (or a
run whose failure fraction exceeds MAX_FAILURE_FRACTION), 4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import harness
from .config import SystemConfig, apply_overrides, echo_config, load_config
from .errors import (AllocationError, ConfigError, EstimationError, NumericError,
                     OtfsyncError, PlacementError, RealizationError)

OUT_ENV_VAR = "OTFSYNC_OUT"
MAX_FAILURE_FRACTION = 0.5

#: sweep grids shared by the figure presets
_SNR_POINTS = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
_DOPPLER_POINTS = (0.5, 1.0, 1.5, 2.0, 2.5, 2.91)
_CFO_POINTS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)


def _preset_specs(name: str) -> list[harness.ExperimentSpec]:
    """Experiment specs behind each figure preset (desk-scale trial counts)."""
    if name == "fig4a":
        return [
            harness.ExperimentSpec(
                name=f"q{q}", sweep_var="snr_db", sweep_points=_SNR_POINTS,
                trials=200, config_overrides=(("num_users", str(q)),))
            for q in (2, 4)
        ]
    if name == "fig4b":
        return [harness.ExperimentSpec(
            name="q4", sweep_var="nu_max_t", sweep_points=_DOPPLER_POINTS,
            trials=200, config_overrides=(("num_users", "4"), ("snr_db", "20")))]
    if name == "fig5a":
        return [
            harness.ExperimentSpec(
                name=f"q{q}", sweep_var="snr_db", sweep_points=_SNR_POINTS,
                trials=200, config_overrides=(("num_users", str(q)),))
            for q in (2, 4)
        ]
    if name == "fig5b":
        return [
            harness.ExperimentSpec(
                name=f"q{q}", sweep_var="nu_max_t", sweep_points=_DOPPLER_POINTS,
                trials=200, config_overrides=(("num_users", str(q)), ("snr_db", "20")))
            for q in (2, 4)
        ]
    if name == "fig6":
        return [harness.ExperimentSpec(
            name="nmse", sweep_var="cfo_value", sweep_points=_CFO_POINTS,
            trials=200, absorbed_baseline=True,
            config_overrides=(("num_users", "2"), ("snr_db", "20")))]
    raise ConfigError(
        f"unknown figure {name!r}; available presets: fig3, fig4a, fig4b, "
        "fig5a, fig5b, fig6"
    )


def _out_root(args) -> str:
    return args.out or os.environ.get(OUT_ENV_VAR, "out")


def _base_config(args) -> SystemConfig:
    cfg = load_config(args.config) if args.config else SystemConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["rng_seed"] = str(args.seed)
    for item in getattr(args, "override", None) or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, val = item.split("=", 1)
        if key.strip() == "trials":
            continue  # experiment-level key, handled by the caller
        overrides[key.strip()] = val.strip()
    return apply_overrides(cfg, overrides) if overrides else cfg.validate()


def _trials_override(args) -> int | None:
    for item in getattr(args, "override", None) or []:
        key, _, val = item.partition("=")
        if key.strip() == "trials":
            return int(val.strip())
    return None


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _dump_debug(target: str, debug: list[dict]) -> None:
    lines = ["user,delay_bin,value"]
    for entry in debug:
        for l, value in enumerate(entry["timing_metric"]):
            lines.append(f"{entry['user']},{l},{value:.12g}")
    _write(os.path.join(target, "timing_metric.csv"), "\n".join(lines) + "\n")
    lines = ["user,cfo,cost"]
    for entry in debug:
        for eps, cost in zip(entry["cfo_grid"], entry["cfo_cost"]):
            lines.append(f"{entry['user']},{eps:.12g},{cost:.12g}")
    _write(os.path.join(target, "cfo_cost.csv"), "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_validate(args) -> int:
    cfg = _base_config(args)
    print("configuration ok")
    if args.verbose:
        print(echo_config(cfg), end="")
    return 0


def cmd_trial(args) -> int:
    cfg = _base_config(args)
    records, debug = harness.run_trial(cfg, args.trial_index,
                                       collect_debug=args.debug_dump)
    for rec in records:
        print(json.dumps(dataclasses.asdict(rec), sort_keys=True))
    if args.debug_dump:
        target = os.path.join(_out_root(args), "trial")
        _dump_debug(target, debug)
        _write(os.path.join(target, "spec-echo"), echo_config(cfg))
        print(f"debug dump written to {target}", file=sys.stderr)
    if any(rec.failed for rec in records):
        return 3
    return 0


def cmd_run(args) -> int:
    cfg = _base_config(args)
    spec = harness.load_experiment(args.spec)
    trials = _trials_override(args)
    if trials is not None:
        spec = dataclasses.replace(spec, trials=trials)
    if args.debug_dump:
        spec = dataclasses.replace(spec, per_trial_dump=True)
    report = harness.run_experiment(spec, base_cfg=cfg, out_dir=_out_root(args),
                                    workers=args.workers)
    print(f"{spec.name}: {report.n_trials} per-user records, "
          f"{report.n_failed} failed -> {os.path.join(_out_root(args), spec.name)}")
    if report.n_trials and report.n_failed / report.n_trials > MAX_FAILURE_FRACTION:
        return 3
    return 0


def cmd_figure(args) -> int:
    out_root = os.path.join(_out_root(args), args.name)
    cfg = _base_config(args)
    if args.name == "fig3":
        # timing-metric snapshot for every user of a single trial
        cfg = apply_overrides(cfg, {"num_users": "2"})
        records, debug = harness.run_trial(cfg, args.trial_index, collect_debug=True)
        _dump_debug(out_root, debug)
        _write(os.path.join(out_root, "spec-echo"), echo_config(cfg))
        print(f"fig3: timing metric snapshot -> {out_root}")
        return 3 if any(rec.failed for rec in records) else 0
    specs = _preset_specs(args.name)
    trials = _trials_override(args)
    worst_fraction = 0.0
    for spec in specs:
        if trials is not None:
            spec = dataclasses.replace(spec, trials=trials)
        if args.debug_dump:
            spec = dataclasses.replace(spec, per_trial_dump=True)
        report = harness.run_experiment(spec, base_cfg=cfg, out_dir=out_root,
                                        workers=args.workers)
        if report.n_trials:
            worst_fraction = max(worst_fraction, report.n_failed / report.n_trials)
        print(f"{args.name}/{spec.name}: {report.n_trials} per-user records, "
              f"{report.n_failed} failed")
    print(f"results under {out_root}")
    return 3 if worst_fraction > MAX_FAILURE_FRACTION else 0


def cmd_dump_metric(args) -> int:
    cfg = _base_config(args)
    records, debug = harness.run_trial(cfg, args.trial_index, collect_debug=True)
    target = os.path.join(_out_root(args), "dump-metric")
    _dump_debug(target, debug)
    _write(os.path.join(target, "spec-echo"), echo_config(cfg))
    print(f"diagnostics written to {target}")
    return 3 if any(rec.failed for rec in records) else 0


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

def _add_common(sub) -> None:
    sub.add_argument("--config", help="system config file (key = value lines)")
    sub.add_argument("--out", help=f"output root (default $"
                     f"{OUT_ENV_VAR} or ./out)")
    sub.add_argument("--seed", type=int, help="override rng_seed")
    sub.add_argument("--workers", type=int, default=1,
                     help="parallel trial workers")
    sub.add_argument("--override", action="append", metavar="KEY=VALUE",
                     help="override a config field (or trials=N); repeatable")
    sub.add_argument("--debug-dump", action="store_true",
                     help="write per-trial diagnostics")
    sub.add_argument("--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otfsync",
        description="Multiuser OTFS uplink synchronization experiments")
    commands = parser.add_subparsers(dest="command", required=True)

    sub = commands.add_parser("validate", help="validate a config file")
    _add_common(sub)
    sub.set_defaults(func=cmd_validate)

    sub = commands.add_parser("trial", help="run one trial and print the records")
    _add_common(sub)
    sub.add_argument("--trial-index", type=int, default=0)
    sub.set_defaults(func=cmd_trial)

    sub = commands.add_parser("run", help="run an experiment spec file")
    _add_common(sub)
    sub.add_argument("--spec", required=True, help="experiment spec file")
    sub.set_defaults(func=cmd_run)

    sub = commands.add_parser("figure", help="run a built-in experiment preset")
    _add_common(sub)
    sub.add_argument("name", help="fig3, fig4a, fig4b, fig5a, fig5b, or fig6")
    sub.add_argument("--trial-index", type=int, default=0,
                     help="trial used for the fig3 snapshot")
    sub.set_defaults(func=cmd_figure)

    sub = commands.add_parser("dump-metric", help="dump estimator diagnostics")
    _add_common(sub)
    sub.add_argument("--trial-index", type=int, default=0)
    sub.set_defaults(func=cmd_dump_metric)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, AllocationError, PlacementError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EstimationError, NumericError, RealizationError) as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return 3
    except OtfsyncError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
