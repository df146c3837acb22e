import json
import math
import subprocess
import sys

import pytest

from recurrent_iptw.cli import main
from recurrent_iptw.config import ConfigError, RunConfig, parse_float

SMALL = {
    "seed": 5,
    "sim": {"n": 400, "d": 3, "lam": 0.0, "rho": 1.0},
    "phase1": {"steps": 30, "batch_size": 64, "lr": 0.01, "hidden_size": 4, "eval_every": 10},
    "phase2": {"steps": 30, "batch_size": 64, "lr": 0.01, "hidden_size": 4, "eval_every": 10},
}


def _config(tmp_path, extra=None, name="cfg.json"):
    cfg = json.loads(json.dumps(SMALL))
    for k, v in (extra or {}).items():
        cfg[k] = {**cfg.get(k, {}), **v} if isinstance(v, dict) else v
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def _run(cfg, out, *cmds):
    for cmd in cmds:
        code = main(["--config", str(cfg), "--out", str(out), cmd])
        if code:
            return code
    return 0


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


def test_seed_is_mandatory_and_overridable():
    with pytest.raises(ConfigError, match="seed"):
        RunConfig.from_dict({})
    cfg = RunConfig.from_dict({}, seed_override=9)
    assert cfg.seed == cfg.sim.seed == cfg.phase1.seed == cfg.phase2.seed == 9
    assert RunConfig.from_dict({"seed": 1}, seed_override=2).seed == 2


@pytest.mark.parametrize("bad", [
    {"seed": 1, "sedd": 2},
    {"seed": 1, "sim": {"lamda": 0}},
    {"seed": 1, "phase1": {"learning_rate": 0.1}},
    {"seed": 1, "paths": {"cohrt": "x"}},
    {"seed": 1, "sweep": {"rho": [1]}},
])
def test_unknown_keys_are_rejected(bad):
    with pytest.raises(ConfigError, match="unknown key"):
        RunConfig.from_dict(bad)


@pytest.mark.parametrize("bad", [
    {"seed": -1}, {"seed": "3"}, {"seed": 1, "sim": {"rho": 0.5}}, {"seed": 1, "truncate": [0.9, 0.1]},
    {"seed": 1, "msm": {"source": "guess"}}, {"seed": 1, "tasks": ["probit"]}, {"seed": 1, "sweep": {"lambdas": []}},
])
def test_invalid_values_are_rejected(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad)


def test_infinite_thresholds_parse():
    assert parse_float("-inf") == -math.inf and parse_float("inf") == math.inf and parse_float(2) == 2.0
    with pytest.raises(ConfigError):
        parse_float("lots")
    cfg = RunConfig.from_dict({"seed": 0, "sim": {"lam": "-inf"}, "sweep": {"lambdas": ["-inf", 0]}})
    assert cfg.sim.lam == -math.inf and cfg.sweep.lambdas == [-math.inf, 0.0]


def test_config_errors_exit_2(tmp_path, capsys):
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["--config", str(tmp_path / "bad.json"), "simulate"]) == 2
    assert main(["--out", str(tmp_path), "simulate"]) == 2
    assert "seed" in capsys.readouterr().err


def test_simulate_counts_and_unbiased_identity(tmp_path, capsys):
    assert _run(_config(tmp_path), tmp_path / "a", "simulate") == 0
    out = capsys.readouterr().out
    assert "randomized: 400 records" in out and "biased:" in out
    same = _config(tmp_path, {"sim": {"lam": "-inf", "rho": 1e9}}, "same.json")
    assert _run(same, tmp_path / "b", "simulate") == 0
    rand = (tmp_path / "b" / "randomized.jsonl").read_text().splitlines()
    biased = (tmp_path / "b" / "biased.jsonl").read_text().splitlines()
    assert rand[1:] == biased[1:]


def test_missing_input_exits_1(tmp_path, capsys):
    assert _run(_config(tmp_path), tmp_path / "empty", "train-iptw") == 1
    assert "missing input cohort" in capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory):
    """Full file-mediated pipeline run twice with the same config."""
    base = tmp_path_factory.mktemp("pipe")
    cfg = _config(base)
    dirs = []
    for name in ("run1", "run2"):
        out = base / name
        code = _run(cfg, out, "simulate", "train-iptw", "train-outcome", "estimate-ate", "diagnostics", "train-e2e")
        assert code == 0
        dirs.append(out)
    return dirs


def test_pipeline_outputs_are_byte_identical(pipeline_dirs):
    a, b = (_files(d) for d in pipeline_dirs)
    assert set(a) == set(b)
    assert "ate.json" in a and "comparison.json" in a and "predictions.csv" in a
    for name in a:
        assert a[name] == b[name], name


def test_diagnostics_recompute_matches(pipeline_dirs):
    d = pipeline_dirs[0]
    first = json.loads((d / "diagnostics.json").read_text())
    again = json.loads((d / "diagnostics_recomputed.json").read_text())
    assert first == again


def test_ate_report_fields(pipeline_dirs):
    report = json.loads((pipeline_dirs[0] / "ate.json").read_text())
    for key in ("rmse_adjusted", "rmse_unadjusted", "rmse_randomized", "counterfactual"):
        assert key in report
    comparison = json.loads((pipeline_dirs[0] / "comparison.json").read_text())
    assert [e["mode"] for e in comparison] == ["pipeline", "end_to_end"]
    for e in comparison:
        assert set(e) == {"mode", "steps_to_threshold", "threshold_metric", "final_metric"}


def test_unit_weights_file_matches_unweighted_run(tmp_path, pipeline_dirs):
    src = pipeline_dirs[0]
    lines = (src / "weights.csv").read_text().splitlines()
    ones = [lines[0]] + [f"{ln.split(',')[0]},1.0,raw" for ln in lines[1:]]
    for name, weights in (("w1", "ones.csv"), ("w0", None)):
        out = tmp_path / name
        out.mkdir()
        for f in ("biased.jsonl",):
            (out / f).write_bytes((src / f).read_bytes())
        (out / "ones.csv").write_text("\n".join(ones) + "\n")
        cfg = _config(tmp_path, {"paths": {"weights": weights}}, f"{name}.json")
        assert _run(cfg, out, "train-outcome") == 0
    a = json.loads((tmp_path / "w1" / "outcome_checkpoint.json").read_text())
    b = json.loads((tmp_path / "w0" / "outcome_checkpoint.json").read_text())
    assert a["params"] == b["params"]
    assert (tmp_path / "w1" / "predictions.csv").read_bytes() == (tmp_path / "w0" / "predictions.csv").read_bytes()


def test_binary_msm_reports(tmp_path):
    cfg = _config(tmp_path, {"msm_sim": {"n": 3000, "d": 2, "with_groups": True, "interaction": 0.8},
                             "msm": {"source": "observed"}, "paths": {"weights": None}})
    out = tmp_path / "msm"
    assert _run(cfg, out, "simulate", "estimate-ate", "estimate-hte") == 0
    ate = json.loads((out / "ate.json").read_text())
    assert isinstance(ate["monotone_increasing"], bool)
    assert (out / "odds_ratios.csv").read_text().splitlines()[0] == "m,odds_ratio"
    hte = json.loads((out / "hte.json").read_text())
    assert hte["rank_rho"] == 1.0 and [g["group"] for g in hte["groups"]] == [0, 1]


SWEEP = {"sim": {"n": 300, "d": 3}, "phase1": {"steps": 20}}


def test_sweep_parallel_equals_serial(tmp_path):
    outs = []
    for workers in (1, 2):
        cfg = _config(tmp_path, {**SWEEP, "sweep": {"lambdas": ["-inf", 0], "rhos": [1, 4], "workers": workers}},
                      f"s{workers}.json")
        out = tmp_path / f"s{workers}"
        assert _run(cfg, out, "sweep") == 0
        outs.append(out)
    assert (outs[0] / "sweep.csv").read_bytes() == (outs[1] / "sweep.csv").read_bytes()
    assert (outs[0] / "sweep.csv").read_text().splitlines()[0] == "lambda,rho,method,rmse"


def test_sweep_failed_cell_exits_nonzero_after_all_cells(tmp_path, capsys):
    cfg = _config(tmp_path, {**SWEEP, "sweep": {"lambdas": [0, 1e6], "rhos": [1], "workers": 1}})
    assert _run(cfg, tmp_path / "f", "sweep") == 1
    err = capsys.readouterr().err
    assert "lambda 0.0 rho 1.0: ok" in err and "lambda 1000000.0 rho 1.0: failed" in err
    assert "1 of 2 cells failed" in err
    assert not (tmp_path / "f" / "sweep.csv").exists()


def test_module_entry_point_runs(tmp_path):
    res = subprocess.run([sys.executable, "-m", "recurrent_iptw", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "train-iptw" in res.stdout
