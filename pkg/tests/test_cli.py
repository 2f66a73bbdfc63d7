import csv
import json
import math

import numpy as np
import pytest

from empgram.cli import (CSV_HEADER, COMBINED_VARIANTS, PARAM_METHODS, STATE_METHODS,
                         ExperimentConfig, ResultRow, build_parser, config_from_args,
                         effectivity_summary, main, read_rows, run_combined_experiment,
                         run_param_experiment, run_state_experiment, run_verify, write_rows)
from empgram.sim import SolverSpec

SMALL = SolverSpec(dt=0.02, T=6.0)


def small_config(experiment, **kw):
    base = dict(experiment=experiment, sizes=((4, 2),), samples=1, seed=3, solver=SMALL)
    base.update(kw)
    return ExperimentConfig(**base)


def test_header_is_exact():
    assert CSV_HEADER == ["experiment", "method", "model", "n", "p", "r", "q", "sample",
                          "offline_s", "online_s", "rel_l2_error"]


def test_empty_write_has_header_only(tmp_path):
    path = tmp_path / "x.csv"
    write_rows([], path)
    assert path.read_text().strip() == ",".join(CSV_HEADER)
    assert read_rows(path) == []


def test_row_roundtrip_is_exact(tmp_path):
    rows = [ResultRow("param", "W_I", "linear", 16, 256, 16, 16, 2, 0.1 + 0.2, 1 / 3, math.pi),
            ResultRow("param", "W_S", "linear", 16, 256, 16, 16, 2, math.nan, math.nan, math.nan)]
    path = tmp_path / "rows.csv"
    write_rows(rows, path)
    back = read_rows(path)
    assert back[0] == rows[0]
    assert back[1].failed and back[1].method == "W_S"


def test_read_rejects_foreign_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_rows(path)


@pytest.mark.parametrize("kw", [dict(experiment="nope"), dict(model_kind="cubic"),
                                dict(samples=0), dict(sizes=())])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ExperimentConfig(**kw)


def test_config_json_roundtrip():
    cfg = small_config("param", a_seq=(0.5, 1.0), r=3)
    back = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert back == cfg
    with pytest.raises(ValueError, match="unknown"):
        ExperimentConfig.from_dict({"bogus": 1})


def test_flags_override_config_file(tmp_path):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"samples": 7, "seed": 11, "model_kind": "hyperbolic"}))
    args = build_parser().parse_args(["param", "--config", str(cfg_path), "--seed", "5",
                                      "--sizes", "16,9:2", "--rich-scales", "--step-input",
                                      "--petrov-galerkin"])
    cfg = config_from_args(args)
    assert (cfg.samples, cfg.seed, cfg.model_kind) == (7, 5, "hyperbolic")
    assert cfg.sizes == ((16, 4), (9, 2))
    assert cfg.a_seq == (0.25, 0.5, 0.75, 1.0)
    assert cfg.input_kind == "step" and not cfg.galerkin


def test_full_scale_sizes():
    cfg = config_from_args(build_parser().parse_args(["state", "--full-scale"]))
    assert [n for n, _ in cfg.sizes] == [16, 25, 36, 49, 64]
    assert all(m * m == n for n, m in cfg.sizes)


def test_state_experiment_rows():
    rows = run_state_experiment(small_config("state", sizes=((16, 4),), solver=SolverSpec()))
    assert [r.method for r in rows] == ["full", *STATE_METHODS]
    assert rows[0].rel_l2_error == 0.0
    for r in rows[1:]:
        assert r.r == 4 and r.q == 256 and r.offline_s > 0
        assert r.rel_l2_error <= 0.05


def test_state_experiment_full_order_is_exact():
    rows = run_state_experiment(small_config("state", r=4))
    assert all(r.rel_l2_error <= 1e-6 for r in rows)


def test_param_experiment_covers_every_method():
    rows = run_param_experiment(small_config("param", budget_factor=40))
    assert sorted(r.method for r in rows) == sorted(["full", *PARAM_METHODS])
    for r in rows:
        assert set(vars(r)) == set(CSV_HEADER)
        assert not r.failed and r.online_s > 0
        if r.method != "full":
            assert (r.r, r.q) == (4, 4) and r.offline_s > 0


def test_combined_experiment_covers_every_variant():
    rows = run_combined_experiment(small_config("combined", budget_factor=40))
    assert sorted(r.method for r in rows) == sorted(["full", *COMBINED_VARIANTS])
    for r in rows:
        if r.method != "full":
            assert (r.r, r.q) == (2, 4)


def test_effectivity_normalization():
    rows = [
        ResultRow("effectivity", "full", "linear", 4, 16, 4, 16, 0, 0.0, 2.0, 0.1),
        ResultRow("effectivity", "joint", "linear", 4, 16, 2, 4, 0, 0.5, 0.5, 0.2),
        ResultRow("effectivity", "observability", "linear", 4, 16, 2, 4, 0, *[math.nan] * 3),
    ]
    s = effectivity_summary(rows)
    assert s["full"] == (1.0, 1.0)
    assert s["joint"] == pytest.approx((0.5, 2.0))
    assert "observability" not in s


def test_error_columns_reproducible(tmp_path):
    outs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        assert main(["state", "--sizes", "4:2", "--samples", "2", "--seed", "9", "--out", str(d)]) == 0
        with open(d / "state_linear.csv", newline="") as fh:
            outs.append([(r["method"], r["sample"], r["rel_l2_error"]) for r in csv.DictReader(fh)])
    assert outs[0] == outs[1]


def test_main_writes_artifacts(tmp_path):
    assert main(["state", "--sizes", "4:2", "--samples", "1", "--out", str(tmp_path)]) == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert {"state_linear.csv", "state_linear_error.dat", "state_linear_offline.dat",
            "state_linear_online.dat", "state_linear_config.json"} <= names
    header = (tmp_path / "state_linear_error.dat").read_text().splitlines()[0]
    assert header.split()[1:3] == ["n", "full"]
    cfg = ExperimentConfig.from_dict(json.loads((tmp_path / "state_linear_config.json").read_text()))
    assert cfg.sizes == ((4, 2),)


def test_verify_passes(capsys):
    assert main(["verify"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)


def test_verify_reports_to_stream():
    import io
    buf = io.StringIO()
    assert run_verify(1, out=buf)
    assert "trace identity" in buf.getvalue()
