import csv
import json

import numpy as np
import pytest

from qinfer import cli, data, experiment
from qinfer.errors import ValidationError
from qinfer.experiment import ExperimentConfig, ResultBundle, build_config

from conftest import blob_dataset

BASE = {"data_dir": "unused", "participants": "5", "select": "2", "rounds": "4", "folds": "2"}


@pytest.fixture(scope="module")
def toy():
    return blob_dataset(n_per_class=40, dim=8, classes=4, seed=1)


def cfg_of(**kw):
    return build_config(BASE, {k: str(v) for k, v in kw.items()})


def test_config_text_grammar():
    text = "# scenario\nparticipants = 25\nselect=5  # five per round\n\nmode = attack\ncheaters = 1,4\n"
    assert experiment.parse_config_text(text) == {"participants": "25", "select": "5", "mode": "attack", "cheaters": "1,4"}
    with pytest.raises(ValidationError, match="unknown key 'colour'"):
        experiment.parse_config_text("colour = red")
    with pytest.raises(ValidationError, match="line 1"):
        experiment.parse_config_text("participants 25")


def test_layers_and_presets():
    cfg = build_config({"preset": "mm25", "data_dir": "d"}, {"rounds": "7"})
    assert (cfg.participants, cfg.select, cfg.rounds, cfg.folds, cfg.dataset) == (25, 5, 7, 10, "mnist")
    assert build_config({"preset": "mc100", "data_dir": "d"}).dataset == "cifar10"
    cfg = cfg_of(tau=0.02, rules="good,ugly", mode="attack", cheater_count=2)
    assert cfg.rules.tau_good == cfg.rules.tau_bad == cfg.rules.tau_ugly == 0.02
    assert cfg.rules.rules == frozenset({"good", "ugly"})
    assert cfg.cheaters == (1, 2)


@pytest.mark.parametrize(
    "field, value",
    [
        ("dataset", "imagenet"), ("model", "cnn"), ("mode", "sneaky"), ("participants", "1"),
        ("select", "9"), ("rounds", "0"), ("folds", "0"), ("workers", "0"), ("kappa", "0.1"),
        ("cheaters", "2"), ("learning_rate", "-1"), ("dropout", "1.5"), ("epochs", "0"),
        ("batch_size", "0"), ("skip", "50"), ("seed", "abc"), ("preset", "mx7"), ("rules", "nice"),
    ],
)
def test_every_invalid_field_is_named(field, value):
    with pytest.raises(ValidationError) as info:
        build_config(BASE, {field: value})
    assert any(field in v for v in info.value.violations)


def test_mode_specific_fields_required():
    with pytest.raises(ValidationError, match="kappa: required"):
        cfg_of(mode="boost")
    with pytest.raises(ValidationError, match="cheaters: required"):
        cfg_of(mode="freeride")
    with pytest.raises(ValidationError, match="data_dir: required"):
        build_config({"participants": "5"})


def test_violations_are_exhaustive():
    with pytest.raises(ValidationError) as info:
        build_config({"participants": "1", "select": "3", "folds": "0", "mode": "boost"})
    names = " ".join(info.value.violations)
    for field in ("participants", "select", "folds", "kappa", "data_dir"):
        assert field in names


def test_fold_seeds_are_xor():
    cfg = cfg_of(seed=6)
    assert [cfg.fold_seed(f) for f in range(4)] == [6, 7, 4, 5]


def test_cheater_modes_are_not_perturbed(toy):
    qi = cfg_of()
    atk = cfg_of(mode="attack", cheaters="1")
    parts_qi, _ = experiment.prepare_shards(qi, toy, 0)
    parts_atk, _ = experiment.prepare_shards(atk, toy, 0)
    assert [s.perturbation for s in parts_qi] == [1.0, 0.75, 0.5, 0.25, 0.0]
    assert all(s.perturbation == 0.0 for s in parts_atk)
    assert not np.array_equal(parts_qi[0].labels, parts_atk[0].labels)


def test_fold_outputs_line_up(toy):
    r = experiment.run_fold(cfg_of(), 0, toy)
    assert len(r.logs) == len(r.scores) == len(r.r_s) == 4
    prev = r.baseline_accuracy
    for e in r.logs:
        assert abs(e.omega - (e.accuracy - prev)) <= 1e-12
        prev = e.accuracy


def test_single_round_only_ugly_can_fire(toy):
    r = experiment.run_fold(cfg_of(rounds=1), 0, toy)
    (e,) = r.logs
    phi = r.scores[0]
    if e.omega < 0:
        assert sorted(np.flatnonzero(phi) + 1) == list(e.selected) and np.all(phi[phi != 0] == -1)
        assert not np.isnan(r.r_s[0])
    else:
        assert np.all(phi == 0)
        assert np.isnan(r.r_s[0])


@pytest.mark.parametrize("mode, extra", [("loo", {}), ("boost", {"kappa": 0.1}), ("attack", {"cheaters": "2"}),
                                         ("freeride", {"cheaters": "2"}), ("estimator", {}), ("grid", {})])
def test_modes_produce_their_artifacts(toy, tmp_path, mode, extra):
    bundle = experiment.run_experiment(cfg_of(mode=mode, rounds=6, **extra), toy)
    experiment.emit_results(bundle, tmp_path)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["fold_count"] == 2
    key = {"loo": "loo_vs_qi", "attack": "group_means", "freeride": "group_means",
           "estimator": "estimator_r_s", "grid": "grid"}.get(mode)
    if key:
        assert key in summary
    if mode == "loo":
        assert all("lo_r_s" in f and "qi_r_s" in f for f in summary["folds"])
    if mode == "boost":
        assert all(len(f["weights"]) == 6 for f in summary["folds"])
    if mode == "grid":
        assert (tmp_path / "grid.csv").is_file()


def test_empty_bundle(tmp_path):
    experiment.emit_results(ResultBundle(cfg_of(), []), tmp_path)
    assert (tmp_path / "rounds.csv").read_text() == ",".join(experiment.ROUNDS_HEADER) + "\n"
    assert (tmp_path / "scores.csv").read_text() == ",".join(experiment.SCORES_HEADER) + "\n"
    assert json.loads((tmp_path / "summary.json").read_text())["fold_count"] == 0


def test_scores_cardinality_and_format(toy, tmp_path):
    bundle = experiment.run_experiment(cfg_of(rounds=3), toy)
    experiment.emit_results(bundle, tmp_path)
    with open(tmp_path / "scores.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == experiment.SCORES_HEADER and len(rows) - 1 == 2 * 3 * 5
    with open(tmp_path / "rounds.csv") as fh:
        rounds = list(csv.DictReader(fh))
    assert len(rounds) == 6
    assert all(len(r["omega"].lstrip("-").replace(".", "").lstrip("0")) <= 9 for r in rounds if "e" not in r["omega"])


def test_rounds_file_omega_matches_accuracy_differences(toy, tmp_path):
    bundle = experiment.run_experiment(cfg_of(rounds=5), toy)
    experiment.emit_results(bundle, tmp_path)
    for fold, logs in zip(bundle.folds, experiment.read_rounds_csv(tmp_path / "rounds.csv")):
        prev = fold.baseline_accuracy
        for e in logs:
            # the file keeps 9 significant digits
            assert abs(e.omega - (e.accuracy - prev)) <= 1e-8
            prev = e.accuracy


def test_reruns_are_byte_identical(toy, tmp_path):
    for name in ("a", "b"):
        experiment.emit_results(experiment.run_experiment(cfg_of(folds=1, seed=42), toy), tmp_path / name)
    for f in ("rounds.csv", "scores.csv", "summary.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_unwritable_output_names_the_path(toy, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match=str(blocker)):
        experiment.emit_results(ResultBundle(cfg_of(), []), blocker / "sub")


def test_missing_data_dir_is_io_error(tmp_path):
    cfg = build_config(BASE, {"data_dir": str(tmp_path / "nowhere")})
    with pytest.raises(OSError):
        experiment.run_experiment(cfg)


def test_cli_presets_and_fixtures(tmp_path, capsys):
    assert cli.main(["presets"]) == 0
    listing = capsys.readouterr().out
    assert all(name in listing for name in ("mm5", "mm25", "mm100", "mc5", "mc25", "mc100"))
    assert cli.main(["emit-fixtures", "--out", str(tmp_path)]) == 0
    for name, payload in data.fixture_streams().items():
        assert (tmp_path / name).read_bytes() == payload
    assert data.read_idx(tmp_path / "labels-one.idx1").tolist() == [7]


def test_cli_reports_validation_errors(capsys):
    assert cli.main(["run", "--participants", "1", "--select", "3", "--data-dir", "x"]) == 2
    err = capsys.readouterr().err
    assert "participants" in err and "select" in err


def test_cli_grid_rescores_stored_run(toy, tmp_path, capsys):
    experiment.emit_results(experiment.run_experiment(cfg_of(rounds=6), toy), tmp_path)
    assert cli.main(["grid", "--from", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "grid.json").read_text())
    assert report["configurations"] == 7 * 10 * 2 * 6
    assert report["best_r_s"] >= report["default_r_s"]


@pytest.mark.mnist
def test_cli_run_on_mnist(mnist_dir, tmp_path, capsys):
    code = cli.main(["run", "--preset", "mm5", "--rounds", "2", "--folds", "1",
                     "--data-dir", str(mnist_dir), "--out", str(tmp_path)])
    assert code == 0
    assert json.loads(capsys.readouterr().out)["out"] == str(tmp_path)
    assert len((tmp_path / "rounds.csv").read_text().splitlines()) == 3


def test_config_dict_echo():
    d = cfg_of(mode="attack", cheaters="1,3").as_dict()
    assert d["cheaters"] == [1, 3] and d["rules"]["rules"] == ["good", "bad", "ugly"]
    assert isinstance(ExperimentConfig(data_dir="x").validate(), ExperimentConfig)
