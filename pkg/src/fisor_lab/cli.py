"""``fisor-lab`` command line.

Every subcommand takes an optional JSON config plus ``section.key=value``
overrides.  Outputs go to ``--out`` or, failing that, to
``$FISOR_LAB_OUT/<run id>`` (default root ``runs``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import dataset as D
from . import pipeline as P
from .config import VARIANTS, ConfigError, RunConfig, describe_keys
from .values import TrainingDivergence

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4, 5
SWEEPS = {"tau": (0.7, 0.8, 0.9, 0.95), "N": (1, 4, 16, 64)}
OUT_ENV = "FISOR_LAB_OUT"

log = logging.getLogger("fisor_lab")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, out=True):
    p.add_argument("overrides", nargs="*", metavar="KEY=VALUE",
                   help="dot-path config overrides, e.g. critic.steps=5000")
    p.add_argument("--config", type=Path, help="run config JSON (defaults used when omitted)")
    p.add_argument("--seed", type=int, help="shorthand for seed=<int>")
    if out:
        p.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV}/<run id>)")


def build_parser() -> argparse.ArgumentParser:
    epilog = "config keys and defaults:\n" + describe_keys()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="fisor-lab", description="Safe offline RL with a learned feasibility value on a toy reach-avoid task.",
                     epilog=epilog, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the offline dataset", epilog=epilog, formatter_class=fmt)
    _common(p)

    p = sub.add_parser("train", help="train critics and policy", epilog=epilog, formatter_class=fmt)
    _common(p)

    for name, helptext in (("eval", "evaluate a trained run"), ("dump-region", "write feasible-region grids")):
        p = sub.add_parser(name, help=helptext, epilog=epilog, formatter_class=fmt)
        p.add_argument("--run", type=Path, required=True, help="directory written by train/ablate")
        _common(p, out=False)
        if name == "eval":
            p.add_argument("--episodes", type=int)
            p.add_argument("--include-infeasible", action="store_true",
                           help="also roll out from oracle-infeasible starts")
        else:
            p.add_argument("--resolution", type=int, default=100)
            p.add_argument("--speed", type=float, default=1.0)
            p.add_argument("--heading", default="goal", help="'goal' or a fixed angle in radians")

    p = sub.add_parser("ablate", help="train + eval + region dump for one variant", epilog=epilog,
                       formatter_class=fmt)
    p.add_argument("--variant", choices=VARIANTS, required=True)
    _common(p)

    p = sub.add_parser("sweep", help="tau or N sweep with a summary CSV", epilog=epilog, formatter_class=fmt)
    p.add_argument("--param", choices=sorted(SWEEPS), required=True)
    _common(p)
    return parser


def _load_cfg(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.config is not None:
        return RunConfig.load(args.config, overrides)
    return RunConfig().with_overrides(overrides)


def _out_dir(args, cfg: RunConfig) -> Path:
    if getattr(args, "out", None) is not None:
        return args.out
    return Path(os.environ.get(OUT_ENV, "runs")) / cfg.run_id()


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def _emit_curves(art: P.Artifacts, out: Path):
    from .plotting import curve_figure
    keys = [k for k in P._curve_columns(art.curves) if k.startswith("loss")]
    curve_figure(art.curves, keys, out / "curves.svg", title="critic losses")
    curve_figure(art.policy_curve, ["loss"], out / "policy_curve.svg", title="policy loss")


def _report(rep: P.EvalReport, out: Path, run_id: str):
    rep.save(out / f"{run_id}_eval.json")
    rows = [{"episode": i, "start_feasible": int(f), "reward": r, "cost": c, "violation_steps": int(v),
             "reached_goal": int(g)}
            for i, (f, r, c, v, g) in enumerate(zip(rep.start_feasible, rep.reward_returns, rep.cost_returns,
                                                     rep.violation_steps, rep.reached_goal))]
    P.write_csv(out / f"{run_id}_episodes.csv", rows,
                ("episode", "start_feasible", "reward", "cost", "violation_steps", "reached_goal"))


def cmd_gen_data(args, cfg):
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    ds = D.generate(cfg.env, cfg.data.n_scripted, cfg.data.n_random, cfg.data.seed, cfg.data.noise_scale)
    path = D.save(ds, out / "dataset.bin")
    _print_json({"path": str(path), "count": len(ds), "unsafe_fraction": float((ds.c > 0).mean())})


def _train(cfg, out):
    ds = P.load_or_generate_dataset(cfg, out)
    art = P.train_full(cfg, out, ds)
    _emit_curves(art, out)
    return art, ds


def cmd_train(args, cfg):
    out = _out_dir(args, cfg)
    _train(cfg, out)
    _print_json({"run": str(out), "run_id": cfg.run_id()})


def cmd_eval(args, cfg_unused):
    art = P.load_artifacts(args.run)
    cfg = art.cfg.with_overrides(_extra_overrides(args))
    ds = P.run_dataset(args.run, cfg)
    rep = P.evaluate(art.policy, art.bank, cfg, ds, episodes=args.episodes,
                     include_infeasible=True if args.include_infeasible else None)
    _report(rep, Path(args.run), cfg.run_id())
    summary = {k: v for k, v in rep.to_dict().items() if k != "episodes"}
    _print_json(summary)


def _extra_overrides(args):
    extra = list(args.overrides)
    if args.seed is not None:
        extra.append(f"seed={args.seed}")
    return extra


def cmd_dump_region(args, cfg_unused):
    art = P.load_artifacts(args.run)
    heading = args.heading if args.heading == "goal" else float(args.heading)
    prefix = Path(args.run) / f"{art.cfg.run_id()}_region"
    metrics = P.dump_region(art.bank, art.cfg.env, prefix, args.resolution, args.speed, heading)
    _print_json(metrics)


def cmd_ablate(args, cfg):
    from dataclasses import replace
    cfg = replace(cfg, variant=args.variant)
    out = _out_dir(args, cfg)
    art, ds = _train(cfg, out)
    rid = cfg.run_id()
    rep = P.evaluate(art.policy, art.bank, cfg, ds, include_infeasible=True)
    _report(rep, out, rid)
    metrics = P.dump_region(art.bank, cfg.env, out / f"{rid}_region")
    summary = {k: v for k, v in rep.to_dict().items() if k != "episodes"}
    summary["region"] = metrics
    _print_json(summary)


def cmd_sweep(args, cfg):
    from .plotting import sweep_figure
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    ds = P.load_or_generate_dataset(cfg, out)
    rows = []
    base = None
    for val in SWEEPS[args.param]:
        if args.param == "tau":
            run_cfg = cfg.with_overrides([f"critic.tau={val}"])
            art = P.train_full(run_cfg, out / f"tau_{val}", ds)
        else:
            run_cfg = cfg.with_overrides([f"eval.n_candidates={val}"])
            base = base or P.train_full(cfg, out / "base", ds)
            art = base
        rep = P.evaluate(art.policy, art.bank, run_cfg, ds, include_infeasible=True)
        b = rep.breakdown()
        rows.append({args.param: val, "normalized_reward": rep.normalized_reward,
                     "normalized_cost": rep.normalized_cost, "goal_rate": rep.goal_rate,
                     "infeasible_violation_steps": b["infeasible_start"]["mean_violation_steps"]})
    cols = (args.param, "normalized_reward", "normalized_cost", "goal_rate", "infeasible_violation_steps")
    P.write_csv(out / f"sweep_{args.param}.csv", rows, cols)
    sweep_figure(rows, args.param, out / f"sweep_{args.param}.svg")
    _print_json(rows)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "dump-region": cmd_dump_region, "ablate": cmd_ablate, "sweep": cmd_sweep}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_cfg(args) if args.command not in ("eval", "dump-region") else None
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (D.DatasetError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
