"""Command-line front end: presets, config files and run verification.

Examples
--------
::

    compfl run --preset fig1-full-grad --out runs/fig1
    compfl run --config my_run.json --rounds 0
    compfl run --preset fig1-full-grad --algo proposed --snapshots
    compfl verify runs/fig1/tau10-proposed
    compfl config --preset fig2-stochastic > sweep.json
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from . import __version__
from .errors import ConfigError, DivergenceError, InvalidArgumentError, MissingSnapshotsError, StepSizeError
from .fedalgo import ALGORITHMS, StepRuleWarning
from .harness import ExperimentConfig, default_output_root, invariant_suite, load_run, run_experiment

__all__ = ["PRESETS", "preset_configs", "main"]

OUTPUT_ROOT_ENV = "COMPFL_OUTPUT_ROOT"


def _fig1():
    dataset = {"kind": "synthetic", "alpha": 50.0, "beta": 50.0, "n": 30, "d": 20, "m": 100,
               "feature_scale": 0.01}
    steps = {
        "proposed": dict(eta=4.0, eta_g=15.0),
        "fedda": dict(eta=4.0, eta_g=15.0),
        "fedmid": dict(eta=1.0, eta_g=5.0),
        "fastfedda": dict(eta=4.0, eta_g=15.0, algo_options={"gamma0": 4.0}),
    }
    out = []
    for tau, rounds in ((1, 1000), (10, 500)):
        for algo, kw in steps.items():
            out.append(ExperimentConfig(
                name=f"tau{tau}-{algo}", algorithm=algo, dataset=dict(dataset),
                regularizer={"kind": "l1", "strength": 0.003}, tau=tau, rounds=rounds,
                metric_step=4.0 * 15.0 * tau, **kw))
    return out


def _fig2():
    dataset = {"kind": "synthetic", "alpha": 50.0, "beta": 50.0, "n": 30, "d": 20, "m": 2000,
               "feature_scale": 0.007}
    out = []
    for b in (1, 20):
        for algo in ("proposed", "fedda", "fastfedda"):
            opts = {"gamma0": 2.0} if algo == "fastfedda" else {}
            out.append(ExperimentConfig(
                name=f"b{b}-{algo}", algorithm=algo, dataset=dict(dataset),
                regularizer={"kind": "l1", "strength": 0.0005}, eta=2.0, eta_g=8.0, tau=20,
                rounds=1000, batch_size=b, metric_step=2.0 * 8.0 * 20, algo_options=opts))
    return out


def _mlp():
    source = {"alpha": 1.0, "beta": 1.0, "d": 20, "m": 4000, "label_model": "multiclass", "classes": 10}
    return [ExperimentConfig(
        name="mlp-proposed", algorithm="proposed",
        dataset={"kind": "label_skew", "source": source, "n": 10, "uniform_fraction": 0.5},
        problem={"kind": "mlp", "hidden": 16, "init_scale": 0.1},
        regularizer={"kind": "l1", "strength": 1e-4},
        eta=0.05, eta_g=1.0, tau=5, rounds=200, batch_size=10, fstar_iterations=0)]


PRESETS = {
    "fig1-full-grad": _fig1,
    "fig2-stochastic": _fig2,
    "mlp-label-skew": _mlp,
}


def preset_configs(name: str) -> list:
    """Expand a preset into its list of run configurations."""
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError("preset", f"one of {sorted(PRESETS)}", name) from None


def _load_config_file(path) -> list:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError("config", "readable JSON file", str(path)) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"valid JSON ({exc.msg} at line {exc.lineno})", str(path)) from exc
    items = data if isinstance(data, list) else [data]
    return [ExperimentConfig.from_dict(item) for item in items]


def _selected_configs(args) -> list:
    if (args.preset is None) == (args.config is None):
        raise ConfigError("preset/config", "exactly one of --preset or --config", None)
    configs = preset_configs(args.preset) if args.preset else _load_config_file(args.config)
    if args.algo is not None:
        if args.preset:
            configs = [c for c in configs if c.algorithm == args.algo]
            if not configs:
                configs = [c.with_overrides(algorithm=args.algo) for c in preset_configs(args.preset)[:1]]
        else:
            configs = [c.with_overrides(algorithm=args.algo) for c in configs]
    overrides = {"rounds": args.rounds, "threads": args.threads, "seed": args.seed}
    if args.snapshots:
        overrides["snapshots"] = True
    if args.timing:
        overrides["timing"] = True
    return [c.with_overrides(**overrides) for c in configs]


def _cmd_run(args) -> int:
    configs = _selected_configs(args)
    root = Path(args.out) if args.out else default_output_root() / (args.preset or Path(args.config).stem)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError("out", "a writable directory", str(root)) from exc
    status = 0
    for cfg in configs:
        out = root / cfg.name if len(configs) > 1 or args.preset else root
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", StepRuleWarning)
            result = run_experiment(cfg, out_dir=out)
        for w in caught:
            print(f"warning [{cfg.name}]: {w.message}", file=sys.stderr)
        final = result.metrics[-1]
        line = f"{cfg.name}: rounds={cfg.rounds} final optimality={final.optimality:.3e} F={final.F_value:.6g} -> {out}"
        if result.manifest.get("invariants"):
            failed = [v["name"] for v in result.manifest["invariants"] if v["status"] == "fail"]
            line += f" invariants={'FAIL ' + ','.join(failed) if failed else 'ok'}"
            status = 1 if failed else status
        print(line)
    return status


def _cmd_verify(args) -> int:
    run = load_run(args.run_dir)
    verdicts = invariant_suite(run)
    width = max(len(v.name) for v in verdicts)
    print(f"{'invariant':<{width}}  status  max_violation  round  detail")
    for v in verdicts:
        rnd = "" if v.round is None else str(v.round)
        print(f"{v.name:<{width}}  {v.status:<6}  {v.max_violation:<13.3e}  {rnd:<5}  {v.detail}")
    failed = [v for v in verdicts if v.status == "fail"]
    for v in failed:
        print(f"FAILED: {v.name} at round {v.round}", file=sys.stderr)
    return 1 if failed else 0


def _cmd_config(args) -> int:
    configs = _selected_configs(args)
    data = [c.to_dict() for c in configs]
    print(json.dumps(data[0] if len(data) == 1 else data, indent=2, sort_keys=True))
    return 0


def _cmd_presets(args) -> int:
    for name in sorted(PRESETS):
        runs = PRESETS[name]()
        print(f"{name}: {len(runs)} run(s): {', '.join(c.name for c in runs)}")
    return 0


def _add_selection(p):
    p.add_argument("--preset", choices=sorted(PRESETS), help="named experiment preset")
    p.add_argument("--config", help="JSON config file (one object or a list of objects)")
    p.add_argument("--rounds", type=int, help="override the number of rounds R")
    p.add_argument("--threads", type=int, help="client worker threads (1 = sequential, deterministic)")
    p.add_argument("--snapshots", action="store_true", help="log per-round state for `verify`")
    p.add_argument("--seed", type=int, help="seed for data generation and batch sampling (default 42)")
    p.add_argument("--algo", choices=sorted(ALGORITHMS), help="algorithm to run")
    p.add_argument("--timing", action="store_true", help="fill the wall_ms column")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compfl", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment or preset sweep")
    _add_selection(run)
    run.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV} or ./runs, plus the preset name)")
    run.set_defaults(func=_cmd_run)

    verify = sub.add_parser("verify", help="re-check invariants of a logged run")
    verify.add_argument("run_dir")
    verify.set_defaults(func=_cmd_verify)

    cfg = sub.add_parser("config", help="print the effective config(s) as JSON")
    _add_selection(cfg)
    cfg.set_defaults(func=_cmd_config)

    presets = sub.add_parser("presets", help="list presets")
    presets.set_defaults(func=_cmd_presets)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, MissingSnapshotsError, InvalidArgumentError, StepSizeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: run diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
