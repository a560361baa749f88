"""Experiment configuration, multi-fold execution and result files.

A run is fully determined by its :class:`ExperimentConfig`. Fold ``f`` uses
seed ``seed ^ f``; every random stream inside a fold (split, label noise,
initialisation, selection, local training) is derived from that seed, so
single folds can be re-run in isolation.

Output files::

    rounds.csv    fold,round,omega,accuracy,selected_ids,r_s
    scores.csv    fold,round,participant,phi
    summary.json  config echo, per-fold results and cross-fold statistics
"""

from __future__ import annotations

import csv
import functools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from qinfer import data as datasets
from qinfer import estimator, federation, metrics, scoring
from qinfer import model as engine
from qinfer.errors import QInferError, SingularSystemError, ValidationError
from qinfer.rounds import RoundLog
from qinfer.scoring import RuleConfig, ScoreVector

log = logging.getLogger(__name__)

MODES = ("qi", "attack", "freeride", "boost", "loo", "estimator", "grid")
CHEATER_MODES = ("attack", "freeride")
DATASETS = {"mnist": engine.MNIST_ARCH, "cifar10": engine.CIFAR10_ARCH}

STREAM_PERTURB = 11
STREAM_INIT = 12

ROUNDS_HEADER = ["fold", "round", "omega", "accuracy", "selected_ids", "r_s"]
SCORES_HEADER = ["fold", "round", "participant", "phi"]

PRESETS: dict[str, dict[str, Any]] = {
    f"{prefix}{n}": {"dataset": dataset, "model": "mlp", "participants": n, "select": b,
                     "rounds": 100, "folds": 10}
    for prefix, dataset in (("mm", "mnist"), ("mc", "cifar10"))
    for n, b in ((5, 2), (25, 5), (100, 10))
}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "mnist"
    model: str = "mlp"
    participants: int = 5
    select: int = 2
    rounds: int = 100
    folds: int = 10
    seed: int = 0
    mode: str = "qi"
    rules: RuleConfig = RuleConfig()
    cheaters: tuple[int, ...] = ()
    kappa: float | None = None
    data_dir: str | None = None
    out: str | None = None
    workers: int = 1
    learning_rate: float = 0.01
    dropout: float = 0.5
    epochs: int = 1
    batch_size: int = 32
    pinv: bool = False

    def violations(self) -> list[str]:
        v = []
        if self.dataset not in DATASETS:
            v.append(f"dataset: must be one of {sorted(DATASETS)}, got {self.dataset!r}")
        if self.model != "mlp":
            v.append(f"model: only 'mlp' is supported, got {self.model!r}")
        if self.mode not in MODES:
            v.append(f"mode: must be one of {list(MODES)}, got {self.mode!r}")
        if self.participants < 2:
            v.append(f"participants: need at least 2 to rank, got {self.participants}")
        if not 1 <= self.select <= max(self.participants, 1):
            v.append(f"select: must lie in 1..participants, got {self.select}")
        if self.rounds < 1:
            v.append(f"rounds: must be positive, got {self.rounds}")
        if self.folds < 1:
            v.append(f"folds: must be positive, got {self.folds}")
        if self.workers < 1:
            v.append(f"workers: must be positive, got {self.workers}")
        if self.rules.skip >= max(self.rounds, 1):
            v.append(f"skip: must be smaller than rounds ({self.rounds}), got {self.rules.skip}")
        if self.mode == "boost":
            if self.kappa is None:
                v.append("kappa: required in boost mode")
            elif not 0 <= self.kappa < 1:
                v.append(f"kappa: must lie in [0, 1), got {self.kappa}")
        elif self.kappa is not None:
            v.append(f"kappa: only valid in boost mode, not {self.mode!r}")
        if self.mode in CHEATER_MODES:
            if not self.cheaters:
                v.append(f"cheaters: required in {self.mode} mode")
            elif any(not 1 <= c <= self.participants for c in self.cheaters):
                v.append(f"cheaters: ids must lie in 1..{self.participants}")
            elif len(set(self.cheaters)) >= self.participants:
                v.append("cheaters: at least one participant must stay honest")
        elif self.cheaters:
            v.append(f"cheaters: only valid in attack/freeride modes, not {self.mode!r}")
        if not self.learning_rate >= 0:
            v.append(f"learning_rate: must be non-negative, got {self.learning_rate}")
        if not 0 <= self.dropout < 1:
            v.append(f"dropout: must lie in [0, 1), got {self.dropout}")
        if self.epochs < 1:
            v.append(f"epochs: must be positive, got {self.epochs}")
        if self.batch_size < 1:
            v.append(f"batch_size: must be positive, got {self.batch_size}")
        if not self.data_dir:
            v.append("data_dir: required")
        return v

    def validate(self) -> ExperimentConfig:
        problems = self.violations()
        if problems:
            raise ValidationError(problems)
        return self

    @property
    def perturbed(self) -> bool:
        return self.mode not in CHEATER_MODES

    def fold_seed(self, fold: int) -> int:
        return self.seed ^ fold

    def as_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["rules"] = self.rules.as_dict()
        d["cheaters"] = list(self.cheaters)
        return d


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

_INT_KEYS = {"participants", "select", "rounds", "folds", "seed", "workers", "epochs", "batch_size", "skip"}
_FLOAT_KEYS = {"kappa", "learning_rate", "dropout", "tau", "tau_good", "tau_bad", "tau_ugly"}
_BOOL_KEYS = {"value_based", "pinv"}
_STR_KEYS = {"dataset", "model", "mode", "data_dir", "out", "preset"}
_LIST_KEYS = {"cheaters", "rules"}
KNOWN_KEYS = _INT_KEYS | _FLOAT_KEYS | _BOOL_KEYS | _STR_KEYS | _LIST_KEYS | {"cheater_count"}


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are ignored."""
    out, errors = {}, []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in KNOWN_KEYS:
            errors.append(f"line {lineno}: unknown key {key!r}")
            continue
        out[key] = value
    if errors:
        raise ValidationError(errors)
    return out


def _coerce(key: str, value: Any, errors: list[str]) -> Any:
    if value is None or not isinstance(value, str):
        return value
    try:
        if key in _INT_KEYS or key == "cheater_count":
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
        if key in _BOOL_KEYS:
            low = value.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(value)
            return low in ("1", "true", "yes", "on")
        if key == "cheaters":
            return tuple(int(x) for x in value.replace(";", ",").split(",") if x.strip())
        if key == "rules":
            return tuple(x.strip().lower() for x in value.replace(";", ",").split(",") if x.strip())
    except ValueError:
        errors.append(f"{key}: cannot parse {value!r}")
        return None
    return value


def build_config(*layers: dict[str, Any]) -> ExperimentConfig:
    """Merge raw key/value layers (later wins), expand presets and validate."""
    merged: dict[str, Any] = {}
    for layer in layers:
        merged.update({k.replace("-", "_"): v for k, v in layer.items() if v is not None})
    errors: list[str] = []
    unknown = sorted(set(merged) - KNOWN_KEYS)
    errors += [f"{k}: unknown key" for k in unknown]
    preset = merged.pop("preset", None)
    values: dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            errors.append(f"preset: unknown preset {preset!r} (known: {', '.join(PRESETS)})")
        else:
            values.update(PRESETS[preset])
            # explicit keys from any layer still override the preset
    values.update({k: _coerce(k, v, errors) for k, v in merged.items() if k in KNOWN_KEYS})

    rule_kwargs = {}
    if "rules" in values:
        rule_kwargs["rules"] = frozenset(values.pop("rules") or ())
    tau = values.pop("tau", None)
    for name in ("tau_good", "tau_bad", "tau_ugly"):
        given = values.pop(name, None)
        if given is not None:
            rule_kwargs[name] = given
        elif tau is not None:
            rule_kwargs[name] = tau
    for name in ("value_based", "skip"):
        if name in values:
            rule_kwargs[name] = values.pop(name)
    try:
        rules = RuleConfig(**{k: v for k, v in rule_kwargs.items() if v is not None})
    except QInferError as exc:
        errors.append(f"rules: {exc}")
        rules = RuleConfig()
    count = values.pop("cheater_count", None)
    if count is not None and not values.get("cheaters"):
        values["cheaters"] = tuple(range(1, count + 1))
    values = {k: v for k, v in values.items() if v is not None}
    cfg = ExperimentConfig(rules=rules, **values)
    problems = errors + cfg.violations()
    if problems:
        raise ValidationError(problems)
    return cfg


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc.strerror}") from exc
    return build_config(parse_config_text(text), overrides or {})


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    seed: int
    baseline_accuracy: float
    logs: list[RoundLog]
    scores: list[np.ndarray]
    r_s: list[float]
    weights: list[np.ndarray] = field(default_factory=list)
    lo_contributions: np.ndarray | None = None
    cheaters: metrics.CheaterReport | None = None
    estimate: dict[str, Any] | None = None

    @property
    def final_r_s(self) -> float:
        return self.r_s[-1] if self.r_s else math.nan

    @property
    def final_accuracy(self) -> float:
        return self.logs[-1].accuracy if self.logs else self.baseline_accuracy

    @property
    def final_scores(self) -> np.ndarray:
        return self.scores[-1]


@dataclass
class ResultBundle:
    config: ExperimentConfig
    folds: list[FoldResult] = field(default_factory=list)
    grid: scoring.GridResult | None = None


@functools.lru_cache(maxsize=2)
def load_dataset(name: str, directory: str) -> datasets.LabeledDataset:
    if name == "mnist":
        return datasets.load_mnist(directory)
    if name == "cifar10":
        return datasets.load_cifar10(directory)
    raise ValidationError([f"dataset: unknown dataset {name!r}"])


def _truth_for(cfg: ExperimentConfig) -> np.ndarray:
    return metrics.ground_truth_ranks(cfg.participants)


def prepare_shards(cfg: ExperimentConfig, dataset: datasets.LabeledDataset, fold_seed: int):
    shards = datasets.split_iid(dataset, cfg.participants, fold_seed)
    participants, test = shards[:-1], shards[-1]
    if cfg.perturbed:
        participants = [
            datasets.perturb_labels(s, s.owner, cfg.participants,
                                    federation.stream(fold_seed, STREAM_PERTURB, s.owner))
            for s in participants
        ]
    return participants, test


def run_fold(cfg: ExperimentConfig, fold: int, dataset: datasets.LabeledDataset | None = None) -> FoldResult:
    if dataset is None:
        dataset = load_dataset(cfg.dataset, str(cfg.data_dir))
    fold_seed = cfg.fold_seed(fold)
    participants, test = prepare_shards(cfg, dataset, fold_seed)
    arch = (dataset.features.shape[1], 64, dataset.num_classes)
    init_seed = int(federation.stream(fold_seed, STREAM_INIT).integers(2**63))
    behaviour = {"attack": federation.Behaviour.ATTACKER, "freeride": federation.Behaviour.FREERIDER}
    state = federation.init_federation(
        engine.init_params(arch, init_seed),
        participants,
        test,
        cfg.select,
        fold_seed,
        settings=engine.TrainSettings(cfg.learning_rate, cfg.dropout, cfg.epochs, cfg.batch_size),
        behaviours={c: behaviour[cfg.mode] for c in cfg.cheaters} if cfg.mode in behaviour else {},
        kappa=cfg.kappa or 0.0,
        rules=cfg.rules,
    )
    result = FoldResult(fold, fold_seed, state.baseline_accuracy, [], [], [])
    truth = _truth_for(cfg)
    phi = ScoreVector.zeros(cfg.participants)
    lo = np.zeros(cfg.participants)

    def evaluate(m):
        return engine.accuracy(m, test)

    def tap(record):
        for n, inc in estimator.loo_round_increments(record, evaluate).items():
            lo[n - 1] += inc

    for _ in range(cfg.rounds):
        prev = result.logs[-1] if result.logs else None
        state, entry = federation.run_round(state, tap if cfg.mode == "loo" else None)
        phi = scoring.score_round(
            phi, entry.index, entry.omega,
            None if prev is None else prev.omega, entry.selected,
            None if prev is None else prev.selected, cfg.rules,
        )
        result.logs.append(entry)
        result.scores.append(phi.phi)
        result.r_s.append(metrics.spearman(metrics.ranks(phi.phi), truth))
        if cfg.mode == "boost":
            result.weights.append(np.array(state.weights))
        log.info("fold %d round %d acc=%.4f omega=%+.4f r_s=%.3f",
                 fold, entry.index, entry.accuracy, entry.omega, result.r_s[-1])

    if cfg.mode == "loo":
        result.lo_contributions = lo
    if cfg.mode in CHEATER_MODES:
        result.cheaters = metrics.cheater_metrics(phi.phi, cfg.cheaters)
    if cfg.mode == "estimator":
        result.estimate = estimate_from_logs(result.logs, cfg.participants, truth, cfg.pinv)
    return result


def estimate_from_logs(logs: Sequence[RoundLog], n_participants: int, truth, pinv: bool = False) -> dict:
    """Least-squares qualities from the participation matrix and the round improvements."""
    a = estimator.participation_matrix(logs, n_participants)
    v = np.array([entry.omega for entry in logs])
    out: dict[str, Any] = {"rounds": len(logs)}
    try:
        if a.shape[0] >= a.shape[1]:
            u = estimator.solve_overdetermined(a, v, pinv=pinv)
            try:
                out["residual"] = estimator.residual_error(a, v)
            except SingularSystemError:
                out["residual"] = None
        else:
            u = estimator.solve_underdetermined(a, v)
    except SingularSystemError as exc:
        out.update(error=str(exc), condition_number=exc.condition_number, u=None, r_s=None)
        return out
    out["u"] = u
    out["r_s"] = metrics.spearman(metrics.ranks(u), truth)
    return out


def _run_fold_job(args):
    cfg, fold = args
    return run_fold(cfg, fold)


def run_experiment(cfg: ExperimentConfig, dataset: datasets.LabeledDataset | None = None) -> ResultBundle:
    cfg.validate()
    if dataset is None:
        dataset = load_dataset(cfg.dataset, str(cfg.data_dir))
    if cfg.workers > 1 and cfg.folds > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            folds = list(pool.map(_run_fold_job, [(cfg, f) for f in range(cfg.folds)]))
    else:
        folds = [run_fold(cfg, f, dataset) for f in range(cfg.folds)]
    bundle = ResultBundle(cfg, sorted(folds, key=lambda r: r.fold))
    if cfg.mode == "grid":
        bundle.grid = scoring.run_grid_search([r.logs for r in bundle.folds], cfg.participants)
    return bundle


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------


def fmt(x: float) -> str:
    return format(float(x), ".9g")


def _num(x):
    """JSON-ready number with 9 significant digits; NaN/inf become null."""
    if x is None:
        return None
    x = float(x)
    if not math.isfinite(x):
        return None
    return float(fmt(x))


def _stats(values: Sequence[float]) -> dict:
    vals = np.array([v for v in values if v is not None and math.isfinite(v)], dtype=np.float64)
    if vals.size == 0:
        return {"mean": None, "std": None, "min": None, "max": None, "count": 0}
    return {
        "mean": _num(vals.mean()),
        "std": _num(vals.std()),
        "min": _num(vals.min()),
        "max": _num(vals.max()),
        "count": int(vals.size),
    }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    return obj


def fold_summary(cfg: ExperimentConfig, r: FoldResult) -> dict:
    truth = _truth_for(cfg)
    d: dict[str, Any] = {
        "fold": r.fold,
        "seed": r.seed,
        "baseline_accuracy": r.baseline_accuracy,
        "final_accuracy": r.final_accuracy,
        "final_r_s": r.final_r_s,
        "final_scores": r.final_scores if r.scores else [],
    }
    if r.cheaters is not None:
        d["cheaters"] = {
            "positions": r.cheaters.positions,
            "honest_mean": r.cheaters.honest_mean,
            "cheater_mean": r.cheaters.cheater_mean,
        }
    if cfg.mode == "boost":
        d["weights"] = r.weights
    if r.lo_contributions is not None:
        d["lo_contributions"] = r.lo_contributions
        d["lo_r_s"] = metrics.spearman(metrics.ranks(r.lo_contributions), truth)
        d["qi_r_s"] = r.final_r_s
    if r.estimate is not None:
        d["estimator"] = r.estimate
    return d


def summarize(bundle: ResultBundle) -> dict:
    cfg = bundle.config
    per_fold = [fold_summary(cfg, r) for r in bundle.folds]
    out: dict[str, Any] = {
        "config": cfg.as_dict(),
        "fold_count": len(bundle.folds),
        "folds": per_fold,
        "final_r_s": _stats([r.final_r_s for r in bundle.folds]),
        "final_accuracy": _stats([r.final_accuracy for r in bundle.folds]),
    }
    if cfg.mode in CHEATER_MODES:
        out["group_means"] = {
            "honest": _stats([r.cheaters.honest_mean for r in bundle.folds]),
            "cheater": _stats([r.cheaters.cheater_mean for r in bundle.folds]),
        }
    if cfg.mode == "loo":
        out["loo_vs_qi"] = {
            "lo_r_s": _stats([f["lo_r_s"] for f in per_fold]),
            "qi_r_s": _stats([f["qi_r_s"] for f in per_fold]),
        }
    if cfg.mode == "estimator":
        out["estimator_r_s"] = _stats([(f["estimator"].get("r_s")) for f in per_fold])
    if bundle.grid is not None:
        out["grid"] = {
            "best": bundle.grid.best.as_dict(),
            "best_r_s": bundle.grid.best_score,
            "default_r_s": bundle.grid.default_score,
            "configurations": len(bundle.grid.table),
        }
    return _jsonable(out)


def emit_results(bundle: ResultBundle, out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    paths = {
        "rounds": out_dir / "rounds.csv",
        "scores": out_dir / "scores.csv",
        "summary": out_dir / "summary.json",
    }
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(paths["rounds"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ROUNDS_HEADER)
            for r in bundle.folds:
                for entry, rs in zip(r.logs, r.r_s):
                    w.writerow([r.fold, entry.index, fmt(entry.omega), fmt(entry.accuracy),
                                ";".join(map(str, entry.selected)), fmt(rs)])
        with open(paths["scores"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SCORES_HEADER)
            for r in bundle.folds:
                for entry, phi in zip(r.logs, r.scores):
                    for n, value in enumerate(phi, 1):
                        w.writerow([r.fold, entry.index, n, fmt(value)])
        with open(paths["summary"], "w") as fh:
            json.dump(summarize(bundle), fh, indent=2, sort_keys=True)
            fh.write("\n")
        if bundle.grid is not None:
            paths["grid"] = out_dir / "grid.csv"
            write_grid_table(bundle.grid, paths["grid"])
    except OSError as exc:
        path = exc.filename or out_dir
        raise OSError(exc.errno, f"cannot write results to {path}: {exc.strerror}") from exc
    return paths


def write_grid_table(result: scoring.GridResult, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rules", "tau_good", "tau_bad", "tau_ugly", "value_based", "skip", "mean_r_s"])
        for cfg, score in result.table:
            d = cfg.as_dict()
            w.writerow([";".join(d["rules"]), fmt(cfg.tau_good), fmt(cfg.tau_bad), fmt(cfg.tau_ugly),
                        int(cfg.value_based), cfg.skip, fmt(score)])


def read_rounds_csv(path: str | Path) -> list[list[RoundLog]]:
    """Stored round logs grouped by fold, for offline rescoring."""
    by_fold: dict[int, list[RoundLog]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ROUNDS_HEADER:
            raise ValidationError([f"{path}: expected columns {ROUNDS_HEADER}, got {reader.fieldnames}"])
        for row in reader:
            selected = tuple(int(x) for x in row["selected_ids"].split(";") if x)
            by_fold.setdefault(int(row["fold"]), []).append(
                RoundLog(int(row["round"]), selected, float(row["accuracy"]), float(row["omega"]))
            )
    return [sorted(logs, key=lambda e: e.index) for _, logs in sorted(by_fold.items())]
