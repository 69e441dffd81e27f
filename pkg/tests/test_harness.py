import json

import numpy as np
import pytest

from srmra import io as srmr_io
from srmra.cli import main, parse_fraction
from srmra.em_solver import EmSolverConfig
from srmra.harness import (CSV_HEADER, ConfigError, ExperimentConfig, RunRecord, emit_csv,
                           read_csv, run_experiment, sweep_configs)
from srmra.metrics import ErrorReport
from srmra.model import ModelParams
from srmra.mom_solver import MomSolverConfig


def _cfg(tmp_path=None, **kw):
    base = dict(
        image="blobs", params=ModelParams(8, 2, 0.25, 40), solver="both",
        mom=MomSolverConfig(F=2, max_outer=3), em=EmSolverConfig(F=2, max_outer=4),
        repeat=1, output_dir=None if tmp_path is None else str(tmp_path),
    )
    base.update(kw)
    return ExperimentConfig(**base)


def _record(trial, solver, error=0.25, seconds=1.5):
    return RunRecord("h", trial, solver, ModelParams(8, 2, 0.125, 10), 5,
                     ErrorReport(error, (0, 0), None), seconds)


def test_repeat_one_both_solvers_gives_two_records():
    recs = run_experiment(_cfg())
    assert [(r.trial, r.solver) for r in recs] == [(0, "mom"), (0, "em")]
    assert all(r.failure is None and r.seconds >= 0 for r in recs)
    assert all(np.isfinite(r.error) for r in recs)


def test_csv_header_only(tmp_path):
    p = tmp_path / "a.csv"
    emit_csv([], p)
    assert p.read_text() == ",".join(CSV_HEADER) + "\n"
    assert p.read_text().splitlines()[0] == "trial,solver,L_high,L_low,N,sigma,F,error,seconds"


def test_csv_two_records_three_lines(tmp_path):
    p = tmp_path / "a.csv"
    emit_csv([_record(0, "mom"), _record(0, "em")], p)
    lines = p.read_text().splitlines()
    assert len(lines) == 3
    rows = read_csv(p)
    assert rows[0]["solver"] == "mom" and float(rows[1]["error"]) == 0.25
    assert float(rows[0]["sigma"]) == 0.125 and rows[0]["L_low"] == "4"


def test_csv_escaping_round_trips_paths_with_commas(tmp_path):
    d = tmp_path / "out,with, commas"
    d.mkdir()
    p = d / "r,1.csv"
    rec = _record(0, 'mom,"quoted"')
    emit_csv([rec], p)
    rows = read_csv(p)
    assert rows[0]["solver"] == 'mom,"quoted"'
    assert list(rows[0]) == list(CSV_HEADER)


def test_deterministic_csv_writes_zero_seconds():
    text = emit_csv([_record(0, "mom", seconds=3.2)], deterministic=True)
    assert text.splitlines()[1].endswith(",0")


def test_trial_independence_under_shuffle():
    cfg = _cfg(repeat=3)
    a = run_experiment(cfg)
    b = run_experiment(cfg, trials=[2, 0, 1])
    assert [(r.trial, r.solver, r.error) for r in a] == [(r.trial, r.solver, r.error) for r in b]
    # trials differ from one another
    assert len({r.error for r in a if r.solver == "em"}) == 3


def test_deterministic_rerun_byte_identical(tmp_path):
    for sub in ("a", "b"):
        run_experiment(_cfg(tmp_path / sub, repeat=2, deterministic=True))
    a = (tmp_path / "a" / "results.csv").read_bytes()
    assert a == (tmp_path / "b" / "results.csv").read_bytes()
    assert len(a.splitlines()) == 5


def test_provenance_config_reloads(tmp_path):
    cfg = _cfg(tmp_path, seed_base=7)
    run_experiment(cfg)
    for name in ("config.json", "results.csv", "records.json"):
        assert (tmp_path / name).is_file()
    again = ExperimentConfig.load(tmp_path / "config.json")
    assert again == cfg and again.config_hash == cfg.config_hash
    recs = json.loads((tmp_path / "records.json").read_text())
    assert {r["config_hash"] for r in recs} == {cfg.config_hash}
    assert recs[0]["noise_regime"] == "medium"


def test_failed_trial_is_recorded_and_others_proceed(tmp_path):
    from srmra.denoise import DenoiserHandle
    cfg = _cfg(solver="mom", repeat=2,
               denoiser=DenoiserHandle("external", command=("/nonexistent/denoiser",)))
    recs = run_experiment(cfg)
    assert len(recs) == 2
    assert all(r.failure and "DenoiserError" in r.failure for r in recs)
    assert all(np.isnan(r.error) for r in recs)


@pytest.mark.parametrize("kw", [
    {"solver": "admm"}, {"repeat": 0}, {"seed_base": -1}, {"image": "no_such_image"},
    {"params": ModelParams(8, 2, 0.0, 10)}, {"params": ModelParams(8, 2, 0.2, 0)},
    {"params": ModelParams(4, 2, 0.2, 10)},
])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        _cfg(**kw).validate()


def test_perfect_moments_mom_needs_no_observations():
    cfg = _cfg(solver="mom", perfect_moments=True, params=ModelParams(8, 2, 0.0, 0))
    recs = run_experiment(cfg)
    assert len(recs) == 1 and recs[0].failure is None


def test_bad_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p)
    p.write_text(json.dumps({"image": "blobs"}))
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p)


def test_sweep_configs_grid(tmp_path):
    cfgs = sweep_configs(_cfg(tmp_path), sigma=[0.125, 0.25, 0.5], F=[1, 5])
    assert len(cfgs) == 6
    assert {c.params.sigma for c in cfgs} == {0.125, 0.25, 0.5}
    assert {c.mom.F for c in cfgs} == {1, 5}
    assert len({c.output_dir for c in cfgs}) == 6


def test_pgm_image_source(tmp_path):
    img = np.linspace(0, 1, 64).reshape(8, 8)
    srmr_io.save_pgm(tmp_path / "img.pgm", img)
    recs = run_experiment(_cfg(image=str(tmp_path / "img.pgm"), solver="em"))
    assert recs[0].failure is None


def test_parse_fraction():
    assert parse_fraction("1/8") == 0.125
    assert parse_fraction("0.5") == 0.5


def test_cli_end_to_end(tmp_path, capsys):
    obs = tmp_path / "obs"
    assert main(["simulate", "--image", "blobs", "--L-high", "8", "--N", "30",
                 "--sigma", "1/4", "--moments", "--out", str(obs)]) == 0
    assert main(["recover-em", "--obs", str(obs), "--max-outer", "3", "--F", "2",
                 "--truth", str(obs / "x_true.srmr"), "--out", str(tmp_path / "em")]) == 0
    assert main(["recover-mom", "--obs", str(obs), "--max-outer", "2", "--F", "2",
                 "--out", str(tmp_path / "mom")]) == 0
    capsys.readouterr()
    assert main(["evaluate", "--estimate", str(tmp_path / "em"),
                 "--truth", str(obs / "x_true.srmr")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert 0 <= rep["error"] < 2
    assert main(["phantom", "checker", "--L", "16", "--out", str(tmp_path / "c.pgm")]) == 0
    assert srmr_io.load_pgm(tmp_path / "c.pgm").shape == (16, 16)


def test_cli_benchmark_writes_csv(tmp_path):
    out = tmp_path / "bench"
    assert main(["benchmark", "--image", "blobs", "--L-high", "8", "--solver", "em",
                 "--max-outer", "2", "--N", "20", "--sigma", "1/4", "--deterministic",
                 "--out", str(out)]) == 0
    (d,) = list(out.iterdir())
    assert len(read_csv(d / "results.csv")) == 1


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["simulate", "--image", "nope", "--out", str(tmp_path / "x")]) == 2
    assert main(["recover-em", "--obs", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 2
    assert main(["benchmark"]) == 2
    obs = tmp_path / "obs"
    main(["simulate", "--image", "blobs", "--L-high", "8", "--N", "5", "--out", str(obs)])
    code = main(["recover-em", "--obs", str(obs), "--max-outer", "3", "--F", "1",
                 "--denoiser", "external", "--denoiser-cmd", "/nonexistent/denoiser",
                 "--out", str(tmp_path / "em")])
    assert code == 3
    assert "DenoiserError" in capsys.readouterr().err


@pytest.mark.slow
def test_mom_F_sweep_interior_optimum():
    cfg = ExperimentConfig("blobs", ModelParams(32, 2, 0.125, 10_000), solver="mom", repeat=3,
                           perfect_moments=True, mom=MomSolverConfig(max_outer=100))
    med = {}
    for c in sweep_configs(cfg, F=[1, 5, 10, 50]):
        med[c.mom.F] = float(np.median([r.error for r in run_experiment(c)]))
    print("median error by F:", med)
    interior = min(med[5], med[10])
    assert interior < med[1] and interior < med[50]
