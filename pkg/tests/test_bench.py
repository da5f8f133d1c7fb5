import json
import math

import numpy as np
import pytest

from cfbench import bench, cli
from cfbench.bench import (
    ComparisonTable,
    ExperimentConfig,
    Hyperparameters,
    ImprovementRow,
    Protocol,
    default_hyperparameters,
    derive_seed,
    emit_report,
    improvement_percent,
    run_experiment,
    run_scenario,
    splitmix64,
    verify_tables,
)
from cfbench.dataset import FeedbackKind
from cfbench.errors import ConfigurationError, DatasetMissingError, KindMismatchError


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    """Small files in the MovieLens, FilmTrust and Lastfm layouts."""
    root = tmp_path_factory.mktemp("data")
    rng = np.random.default_rng(0)
    n_users, n_items = 30, 25
    ml = root / "ml-100k"
    ml.mkdir()
    rows, users = [], []
    for u in range(1, n_users + 1):
        for i in rng.choice(n_items, size=int(rng.integers(4, 12)), replace=False):
            rows.append(f"{u}\t{i + 1}\t{int(rng.integers(1, 6))}\t0\n")
        users.append(f"{u}|{int(rng.integers(15, 70))}|{'MF'[u % 2]}|job{u % 4}|{u % 10}0000\n")
    (ml / "u.data").write_text("".join(rows))
    (ml / "u.user").write_text("".join(users))

    ft = root / "filmtrust"
    ft.mkdir()
    (ft / "ratings.txt").write_text("".join(
        f"{u} {i} {float(rng.integers(1, 9)) / 2}\n"
        for u in range(1, n_users + 1) for i in rng.choice(n_items, size=6, replace=False) + 1))
    (ft / "trust.txt").write_text("".join(f"{u} {u % n_users + 1} 1\n" for u in range(1, n_users + 1)))

    lf = root / "hetrec2011-lastfm-2k"
    lf.mkdir()
    (lf / "user_artists.dat").write_text("userID\tartistID\tweight\n" + "".join(
        f"{u}\t{i}\t{int(rng.integers(1, 500))}\n"
        for u in range(1, n_users + 1) for i in rng.choice(n_items, size=7, replace=False) + 1))
    (lf / "user_friends.dat").write_text("userID\tfriendID\n" + "".join(
        f"{u}\t{v}\n" for u in range(1, n_users + 1) for v in (u % n_users + 1, (u + 3) % n_users + 1)))
    return root


def fast_hp(method, dataset="movielens", **kw):
    return Hyperparameters(**{**default_hyperparameters(method, dataset).__dict__, "epochs": 15, **kw})


# --- seeds ------------------------------------------------------------------------

def test_splitmix64_reference_values():
    # first outputs of the reference generator seeded with 0
    state, out = 0, []
    for _ in range(3):
        out.append(splitmix64(state))
        state = (state + 0x9E3779B97F4A7C15) & ((1 << 64) - 1)
    assert out == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_derived_seeds_are_stable_and_distinct():
    a = derive_seed(7, "mf_exp", "movielens", 0)
    assert a == derive_seed(7, "mf_exp", "movielens", 0)
    assert a != derive_seed(7, "mf_exp", "movielens", 1)
    assert a != derive_seed(8, "mf_exp", "movielens", 0)
    assert a != derive_seed(7, "rwr_exp", "movielens", 0)
    assert 0 <= a < 2**64


# --- configuration ------------------------------------------------------------------

def test_defaults_follow_the_grid():
    assert default_hyperparameters("mf_side", "filmtrust").lam == 0.25
    assert default_hyperparameters("mf_side", "filmtrust").eta == 0.02
    assert default_hyperparameters("rwr_exp", "epinions").c == 0.5
    assert default_hyperparameters("rwr_imp", "lastfm").c == 0.1
    hb = default_hyperparameters("rwr_bias", "filmtrust")
    assert (hb.beta, hb.gamma, hb.c) == (0.25, 0.1, 0.2)
    assert default_hyperparameters("rwr_side", "movielens").delta == 2.0
    # unlisted combination falls back to the MovieLens row
    assert default_hyperparameters("rwr_bias", "lastfm") == default_hyperparameters("rwr_bias", "movielens")


def test_config_round_trip():
    cfg = ExperimentConfig("movielens", "rwr_bias", Protocol("cold_start", fraction=0.2), seed=3)
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


def test_config_unknown_keys_rejected():
    with pytest.raises(ConfigurationError, match="colour"):
        ExperimentConfig.from_dict({"dataset": "movielens", "method": "mf_exp", "colour": 1})
    with pytest.raises(ConfigurationError, match="lr"):
        ExperimentConfig.from_dict({"dataset": "movielens", "method": "mf_exp",
                                    "hyperparameters": {"lr": 0.1}})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"dataset": "movielens", "method": "mf_exp",
                                    "protocol": {"kind": "kfold", "fraction": 0.2}})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"dataset": "nope", "method": "mf_exp"})


def test_config_overrides_and_kind_checks():
    cfg = ExperimentConfig.from_dict({"dataset": {"name": "movielens"}, "method": "mf_exp",
                                      "hyperparameters": {"epochs": 3, "eta": 0.01}, "ks": [1, 5]})
    assert cfg.hyperparameters.epochs == 3 and isinstance(cfg.hyperparameters.epochs, int)
    assert cfg.hyperparameters.eta == 0.01 and cfg.ks == (1, 5)
    with pytest.raises(KindMismatchError):
        ExperimentConfig("lastfm", "mf_exp")
    with pytest.raises(KindMismatchError):
        ExperimentConfig("movielens", "rwr_imp")


def test_missing_files_reported(tmp_path):
    cfg = ExperimentConfig("filmtrust", "mf_exp")
    with pytest.raises(DatasetMissingError, match="ratings.txt"):
        run_experiment(cfg, tmp_path)


def test_data_dir_env_override(monkeypatch, tmp_path):
    monkeypatch.setenv(bench.DATA_ENV, str(tmp_path))
    assert bench.data_dir() == tmp_path
    assert bench.data_dir("elsewhere") == bench.Path("elsewhere")


# --- experiments ------------------------------------------------------------------------

@pytest.mark.parametrize("method", ["mf_exp", "mf_bias", "mf_side", "rwr_exp", "rwr_bias", "rwr_side"])
def test_explicit_methods_run(tiny_data, method):
    cfg = ExperimentConfig("movielens", method, Protocol("kfold", k=3), fast_hp(method))
    rep = run_experiment(cfg, tiny_data)
    assert len(rep.folds) == 3
    agg = rep.aggregate
    assert -1 <= agg["rho"] <= 1 and all(0 <= agg[f"p@{k}"] <= 1 for k in (1, 2, 3))
    # aggregate is the mean of the fold values, which are means over users
    assert agg["rho"] == pytest.approx(np.mean([f.spearman_rho for f in rep.folds]))
    assert sum(f.n_users for f in rep.folds) >= 30


@pytest.mark.parametrize("method", ["mf_imp", "mf_side", "rwr_imp", "rwr_side", "mf_bias"])
def test_implicit_methods_run(tiny_data, method):
    cfg = ExperimentConfig("lastfm", method, Protocol("kfold", k=3), fast_hp(method, "lastfm"))
    rep = run_experiment(cfg, tiny_data)
    assert math.isfinite(rep.aggregate["rho"])


@pytest.mark.parametrize("method", ["mf_side", "rwr_side"])
def test_cold_start_runs(tiny_data, method):
    cfg = ExperimentConfig("movielens", method, Protocol("cold_start", fraction=0.2), fast_hp(method))
    rep = run_experiment(cfg, tiny_data)
    assert len(rep.folds) == 1 and rep.folds[0].n_users == 6


def test_runs_are_deterministic_and_parallel_safe(tiny_data, tmp_path):
    cfg = ExperimentConfig("filmtrust", "mf_exp", Protocol("kfold", k=3), fast_hp("mf_exp", "filmtrust"))
    a = run_experiment(cfg, tiny_data)
    b = run_experiment(cfg, tiny_data, jobs=2)
    for fmt in bench.FORMATS:
        emit_report(a, fmt, tmp_path / f"a.{fmt}")
        emit_report(b, fmt, tmp_path / f"b.{fmt}")
        assert (tmp_path / f"a.{fmt}").read_bytes() == (tmp_path / f"b.{fmt}").read_bytes()
    bench.write_audit(a, tmp_path / "audit_a")
    bench.write_audit(b, tmp_path / "audit_b")
    for f in (tmp_path / "audit_a").rglob("*.*"):
        assert f.read_bytes() == (tmp_path / "audit_b" / f.relative_to(tmp_path / "audit_a")).read_bytes()


def test_fold_failure_names_the_fold(tiny_data):
    cfg = ExperimentConfig("movielens", "rwr_exp", Protocol("kfold", k=3),
                           fast_hp("rwr_exp", max_iter=1))
    with pytest.raises(bench.FoldFailedError, match="fold 0"):
        run_experiment(cfg, tiny_data)


# --- tables -------------------------------------------------------------------------------

def test_improvement_convention():
    assert improvement_percent(0.351, 0.328) == 7.0
    assert improvement_percent(0.424, 0.377) == 12.5
    assert improvement_percent(0.388, 0.428) == -9.3
    assert math.isnan(improvement_percent(0.1, 0.0))


def make_table():
    cells = {("mf_exp", "movielens"): {"rho": 0.3281, "p@1": 0.144},
             ("mf_bias", "movielens"): {"rho": 0.3512, "p@1": 0.152}}
    return ComparisonTable("bias", ("mf_exp", "mf_bias"), ("movielens",), ("rho", "p@1"), cells,
                           (ImprovementRow("MF improvement through bias", "mf_bias", (("explicit", "mf_exp"),)),),
                           {"movielens": FeedbackKind.EXPLICIT})


def test_improvement_row_uses_rounded_cells():
    t = make_table()
    imp = t.improvement(t.improvements[0])
    assert imp[("rho", "movielens")] == 7.0     # (0.351 - 0.328) / 0.328
    assert imp[("p@1", "movielens")] == 5.6


def test_csv_format(tmp_path):
    written = emit_report(make_table(), "csv", tmp_path / "bias.csv")
    assert (tmp_path / "bias.csv").read_text() == (
        "method,dataset,rho,p@1\nmf_exp,movielens,0.328,0.144\nmf_bias,movielens,0.351,0.152\n")
    assert (tmp_path / "bias_improvement.csv").read_text() == (
        "improvement,dataset,rho,p@1\nMF improvement through bias,movielens,7.0,5.6\n")
    assert len(written) == 2


def test_empty_report_is_header_only(tmp_path):
    t = ComparisonTable("explicit", (), ("movielens",), bench.metric_names((1, 2, 3)), {})
    emit_report(t, "csv", tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == "method,dataset,rho,p@1,p@2,p@3\n"
    emit_report(t, "json-lines", tmp_path / "e.jsonl")
    assert (tmp_path / "e.jsonl").read_text() == ""


def test_json_lines_sorted_keys(tmp_path):
    emit_report(make_table(), "json-lines", tmp_path / "t.jsonl")
    first = (tmp_path / "t.jsonl").read_text().splitlines()[0]
    assert first == '{"dataset": "movielens", "method": "mf_exp", "p@1": 0.144, "rho": 0.328}'


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        emit_report(make_table(), "csv", tmp_path / "missing_dir" / "x.csv")
    with pytest.raises(ConfigurationError):
        emit_report(make_table(), "xml", tmp_path / "x.xml")


def test_scenario_skips_missing_and_load_only(tiny_data):
    t = run_scenario("implicit", tiny_data, seed=1, cache={})
    assert ("mf_imp", "lastfm") in t.cells and ("rwr_imp", "lastfm") in t.cells
    assert ("mf_imp", "audioscrobbler", "load-only dataset") in t.skipped
    assert "skipped: RWR_Imp on audioscrobbler" in bench.render_pretty(t)


def test_scenario_large_gate(tiny_data):
    t = run_scenario("explicit", tiny_data, datasets=["epinions"])
    assert {s[2] for s in t.skipped} == {"large dataset; pass --large"}
    assert t.rows == ()


def test_side_scenario_picks_baseline_by_kind(tiny_data):
    t = run_scenario("side", tiny_data, datasets=["lastfm"], cache={})
    assert set(t.rows) == {"mf_imp", "mf_side", "rwr_imp", "rwr_side"}
    imp = t.improvement(t.improvements[0])
    want = improvement_percent(round(t.cell("mf_side", "lastfm", "rho"), 3),
                               round(t.cell("mf_imp", "lastfm", "rho"), 3))
    assert imp[("rho", "lastfm")] == want


# --- verify -----------------------------------------------------------------------------------

def test_verify(tmp_path):
    (tmp_path / "a.csv").write_text("method,dataset,rho,p@1\nmf_exp,movielens,0.330,0.150\n")
    (tmp_path / "ref.csv").write_text("method,dataset,rho,p@1\nmf_exp,movielens,0.328,0.144\n"
                                      "rwr_exp,movielens,0.238,\n")
    bad = verify_tables(tmp_path / "a.csv", tmp_path / "ref.csv", 0.01)
    assert [(m.method, m.metric, m.actual) for m in bad] == [("rwr_exp", "rho", None)]
    bad = verify_tables(tmp_path / "a.csv", tmp_path / "ref.csv", 0.001)
    assert {(m.method, m.metric) for m in bad} == {("mf_exp", "rho"), ("mf_exp", "p@1"), ("rwr_exp", "rho")}


# --- CLI ----------------------------------------------------------------------------------------

def test_cli_run_is_byte_stable(tiny_data, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"dataset": "movielens", "method": "mf_bias", "seed": 4,
                               "protocol": {"kind": "kfold", "k": 3},
                               "hyperparameters": {"epochs": 10}}))
    for out in ("r1", "r2"):
        assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / out),
                         "--data", str(tiny_data)]) == 0
    names = sorted(p.relative_to(tmp_path / "r1") for p in (tmp_path / "r1").rglob("*") if p.is_file())
    assert bench.Path("report.csv") in names and bench.Path("folds.csv") in names
    assert any(str(n).startswith("users/") for n in names)
    for n in names:
        assert (tmp_path / "r1" / n).read_bytes() == (tmp_path / "r2" / n).read_bytes()
    assert "MF_Bias" in capsys.readouterr().out


def test_cli_scenario_and_verify(tiny_data, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(bench.DATA_ENV, str(tiny_data))
    assert cli.main(["scenario", "--name", "cold_start", "--out", str(tmp_path / "s"), "--seed", "2"]) == 0
    table = tmp_path / "s" / "cold_start.csv"
    assert table.read_text().startswith("method,dataset,rho,p@1,p@2,p@3\n")
    assert cli.main(["verify", "--table", str(table), "--against", str(table), "--tol", "0"]) == 0
    assert "OK" in capsys.readouterr().out
    ref = bench.Path(bench.__file__).parent / "reference" / "cold_start.csv"
    assert cli.main(["verify", "--table", str(table), "--against", str(ref), "--tol", "0.0"]) == 1


def test_cli_reports_errors(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"dataset": "movielens", "method": "mf_exp", "typo": 1}')
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "typo" in capsys.readouterr().err


def test_audit_chain_reproduces_cells(tiny_data, tmp_path):
    t = run_scenario("bias", tiny_data, datasets=["movielens"], cache={})
    emit_report(t, "csv", tmp_path / "bias.csv")
    bench.write_audit(t, tmp_path)
    import csv
    folds = list(csv.DictReader(open(tmp_path / "folds.csv")))
    cells = {(r["method"], r["dataset"]): r for r in csv.DictReader(open(tmp_path / "bias.csv"))}
    for (method, dataset), cell in cells.items():
        mine = [r for r in folds if r["method"] == method and r["dataset"] == dataset]
        assert len(mine) == 5
        for metric in ("rho", "p@1", "p@2", "p@3"):
            assert float(cell[metric]) == pytest.approx(np.mean([float(r[metric]) for r in mine]), abs=5e-4)
        for r in mine:
            dump = tmp_path / "users" / f"{dataset}_{method}_kfold5_fold{r['fold']}.tsv"
            rows = list(csv.DictReader(open(dump), delimiter="\t"))
            rho = [float(u["rho"]) for u in rows if "rho" not in u["excluded"].split(",")]
            assert np.mean(rho) == pytest.approx(float(r["rho"]), rel=1e-12)
            assert len(rows) - len(rho) == int(r["excluded_rho"])
            p2 = [float(u["precision@2"]) for u in rows if "p@2" not in u["excluded"].split(",")]
            assert np.mean(p2) == pytest.approx(float(r["p@2"]), rel=1e-12)
