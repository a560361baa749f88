"""Command-line entry point: ``qinfer run|grid|presets|emit-fixtures``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from qinfer import data as datasets
from qinfer import experiment, scoring
from qinfer.errors import QInferError, ValidationError


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--preset", help="scenario preset, see `qinfer presets`")
    p.add_argument("--mode", choices=experiment.MODES)
    p.add_argument("--dataset", choices=sorted(experiment.DATASETS))
    p.add_argument("--data-dir", dest="data_dir", help="directory holding the dataset files")
    p.add_argument("--participants", type=int, metavar="N")
    p.add_argument("--select", type=int, metavar="b")
    p.add_argument("--rounds", type=int, metavar="I")
    p.add_argument("--folds", type=int, metavar="F")
    p.add_argument("--seed", type=int, metavar="S")
    p.add_argument("--kappa", type=float, metavar="K")
    p.add_argument("--cheaters", metavar="LIST", help="comma-separated participant ids")
    p.add_argument("--rules", metavar="LIST", help="subset of good,bad,ugly")
    p.add_argument("--tau", type=float, help="threshold shared by all rules")
    p.add_argument("--skip", type=int, help="rounds excluded from scoring")
    p.add_argument("--value-based", dest="value_based", action="store_const", const="true")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--workers", type=int, metavar="W")


def _overrides(args: argparse.Namespace) -> dict:
    keys = ("preset", "mode", "dataset", "data_dir", "participants", "select", "rounds", "folds",
            "seed", "kappa", "cheaters", "rules", "tau", "skip", "value_based", "out", "workers")
    return {k: getattr(args, k, None) for k in keys if getattr(args, k, None) is not None}


def _config(args: argparse.Namespace, **extra) -> experiment.ExperimentConfig:
    layers = []
    if args.config:
        layers.append(experiment.parse_config_text(Path(args.config).read_text()))
    layers.append({**extra, **_overrides(args)})
    return experiment.build_config(*layers)


def cmd_run(args) -> int:
    cfg = _config(args)
    bundle = experiment.run_experiment(cfg)
    out = Path(cfg.out or "results")
    experiment.emit_results(bundle, out)
    summary = experiment.summarize(bundle)
    print(json.dumps({"out": str(out), "final_r_s": summary["final_r_s"],
                      "final_accuracy": summary["final_accuracy"]}, indent=2))
    return 0


def cmd_grid(args) -> int:
    if args.from_dir:
        folds = experiment.read_rounds_csv(Path(args.from_dir) / "rounds.csv")
        stored = json.loads((Path(args.from_dir) / "summary.json").read_text())
        n = int(stored["config"]["participants"])
        result = scoring.run_grid_search(folds, n)
        out = Path(args.out or args.from_dir)
        out.mkdir(parents=True, exist_ok=True)
        experiment.write_grid_table(result, out / "grid.csv")
        report = {"best": result.best.as_dict(), "best_r_s": result.best_score,
                  "default_r_s": result.default_score, "configurations": len(result.table)}
        (out / "grid.json").write_text(json.dumps(experiment._jsonable(report), indent=2, sort_keys=True) + "\n")
        print(json.dumps(experiment._jsonable(report), indent=2))
        return 0
    cfg = _config(args, mode="grid")
    bundle = experiment.run_experiment(cfg)
    out = Path(cfg.out or "results")
    experiment.emit_results(bundle, out)
    print(json.dumps(experiment.summarize(bundle)["grid"], indent=2))
    return 0


def cmd_presets(args) -> int:
    for name, preset in experiment.PRESETS.items():
        print(f"{name:6s} " + " ".join(f"{k}={v}" for k, v in preset.items()))
    return 0


def cmd_emit_fixtures(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, payload in datasets.fixture_streams().items():
        (out / name).write_bytes(payload)
        print(out / name)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qinfer", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and write rounds.csv, scores.csv, summary.json")
    _add_run_flags(run)
    run.set_defaults(func=cmd_run)

    grid = sub.add_parser("grid", help="fine-tune the scoring rules by grid search")
    _add_run_flags(grid)
    grid.add_argument("--from", dest="from_dir", metavar="DIR",
                      help="rescore a stored run instead of training")
    grid.set_defaults(func=cmd_grid)

    presets = sub.add_parser("presets", help="list scenario presets")
    presets.set_defaults(func=cmd_presets)

    fixtures = sub.add_parser("emit-fixtures", help="write the handcrafted IDX fixtures")
    fixtures.add_argument("--out", required=True, metavar="DIR")
    fixtures.set_defaults(func=cmd_emit_fixtures)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(exc, file=sys.stderr)
        return 2
    except (QInferError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
