import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tpoverlap.cli import EXIT_CONFIG, EXIT_MISMATCH, EXIT_OK, main
from tpoverlap.config import RunConfig, load_config, parse_config
from tpoverlap.errors import ConfigError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SWEEP_HEADER = ["strategy", "pattern", "m", "n", "k", "tp", "overall_us", "gemm_us", "ect_us", "efficiency"]


def _write(tmp_path, text, name="c.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_verify_tp1_smoke(tmp_path):
    assert main(["verify", "--config", str(CONFIGS / "smoke_tp1.yaml"), "--out", str(tmp_path)]) == EXIT_OK
    rows = _rows(tmp_path / "verify.csv")
    assert [r["strategy"] for r in rows] == ["coarse", "medium", "fine"]
    assert all(float(r["max_rel_error"]) == 0.0 and r["status"] == "PASS" for r in rows)


@pytest.mark.parametrize("name", ["verify_tp4.yaml", "tune_ag.yaml", "bench_tp2.yaml"])
def test_verify_shipped_configs(tmp_path, name):
    assert main(["verify", "--config", str(CONFIGS / name), "--out", str(tmp_path)]) == EXIT_OK
    meta = json.loads((tmp_path / "verify.meta.json").read_text())
    assert meta["seed"] == 42 and meta["passed"]


def test_non_dividing_tile_is_a_config_error(tmp_path, capsys):
    cfg = _write(tmp_path, "problem: {m: 64, n: 32, k: 32, tp: 4}\ntile: {tm: 6, tn: 8}\n")
    assert main(["verify", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "error:" in capsys.readouterr().err


def test_verify_mismatch_exit_code(tmp_path, monkeypatch):
    import tpoverlap.cli as cli

    real = cli.run_strategy

    def corrupt(*args, **kw):
        result = real(*args, **kw)
        result.outputs[0][0, 0] += 1.0
        return result

    monkeypatch.setattr(cli, "run_strategy", corrupt)
    assert main(["verify", "--config", str(CONFIGS / "smoke_tp1.yaml"), "--out", str(tmp_path)]) == EXIT_MISMATCH
    assert {r["status"] for r in _rows(tmp_path / "verify.csv")} == {"FAIL"}


def test_sweep_default_grid(tmp_path):
    cfg = _write(tmp_path, "problem: {n: 64, k: 64, tp: 4}\ntile: {tm: 32, tn: 32}\n")
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    with open(tmp_path / "o" / "sweep.csv", newline="") as fh:
        header = next(csv.reader(fh))
    assert header == SWEEP_HEADER
    rows = _rows(tmp_path / "o" / "sweep.csv")
    assert len(rows) == 4 * 3 * 2
    assert all(float(r["efficiency"]) == 0.0 for r in rows if r["strategy"] == "coarse")
    assert len(list((tmp_path / "o" / "timelines").glob("*.jsonl"))) == 24
    assert json.loads((tmp_path / "o" / "sweep.meta.json").read_text())["seed"] == 42


def test_sweep_tp1_has_zero_efficiency(tmp_path):
    assert main(["sweep", "--config", str(CONFIGS / "smoke_tp1.yaml"), "--out", str(tmp_path)]) == EXIT_OK
    rows = _rows(tmp_path / "sweep.csv")
    assert len(rows) == 2 * 3 * 2
    assert all(float(r["efficiency"]) == 0.0 and float(r["ect_us"]) == 0.0 for r in rows)


@pytest.mark.parametrize("value", ["", " , ", "coarse,warp"])
def test_bad_strategy_override(tmp_path, value):
    assert main(["sweep", "--config", str(CONFIGS / "smoke_tp1.yaml"), "--out", str(tmp_path),
                 "--strategies", value]) == EXIT_CONFIG


def test_empty_strategies_in_config(tmp_path):
    cfg = _write(tmp_path, "strategies: []\n")
    with pytest.raises(ConfigError, match="strategies"):
        load_config(cfg)


def test_strategy_subset_and_seed_override(tmp_path):
    assert main(["sweep", "--config", str(CONFIGS / "smoke_tp1.yaml"), "--out", str(tmp_path),
                 "--strategies", "fine", "--seed", "7"]) == EXIT_OK
    assert {r["strategy"] for r in _rows(tmp_path / "sweep.csv")} == {"fine"}
    assert json.loads((tmp_path / "sweep.meta.json").read_text())["seed"] == 7


def test_bench(tmp_path):
    assert main(["bench", "--config", str(CONFIGS / "bench_tp2.yaml"), "--out", str(tmp_path)]) == EXIT_OK
    rows = _rows(tmp_path / "bench.csv")
    assert len(rows) == 3
    for r in rows:
        reps = [float(r[f"rep_{i}"]) for i in range(10)]
        assert "rep_10" not in r
        assert float(r["median_us"]) == pytest.approx(sorted(reps)[4] / 2 + sorted(reps)[5] / 2)
        assert float(r["max_rel_error"]) <= 1e-12


def test_report_empty_directory(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "sweep.csv" in err and "timelines/*.jsonl" in err


def test_report_after_sweep(tmp_path):
    assert main(["sweep", "--config", str(CONFIGS / "smoke_tp1.yaml"), "--out", str(tmp_path)]) == EXIT_OK
    assert main(["report", str(tmp_path)]) == EXIT_OK
    for pattern in ("allgather_gemm", "gemm_reducescatter"):
        assert len(_rows(tmp_path / f"report_{pattern}.csv")) == 2
        assert (tmp_path / f"report_{pattern}.md").read_text().startswith(f"## {pattern}")
    traces = list((tmp_path / "traces").glob("*.json"))
    assert len(traces) == 12
    assert json.loads(traces[0].read_text())["traceEvents"]


def test_tune_cache_provenance(tmp_path, capsys):
    args = ["tune", "--config", str(CONFIGS / "tune_ag.yaml"), "--out", str(tmp_path)]
    assert main(args) == EXIT_OK
    assert "provenance=computed" in capsys.readouterr().out
    assert len(_rows(tmp_path / "tune.csv")) == 12
    assert main(args) == EXIT_OK
    assert f"provenance=cache:{tmp_path / 'tune_cache.json'}" in capsys.readouterr().out


def test_unknown_key_reports_line(tmp_path):
    cfg = _write(tmp_path, "seed: 1\nproblem:\n  m: 64\n  colour: red\n")
    with pytest.raises(ConfigError) as info:
        load_config(cfg)
    assert f"{cfg}:4: problem.colour" in str(info.value)


@pytest.mark.parametrize("text,path", [
    ("tile: {tm: x}\n", "tile.tm"),
    ("problem: {pattern: allreduce}\n", "problem.pattern"),
    ("fine: {swizzle: 1}\n", "fine.swizzle"),
    ("machine: {topology: pcie_numa}\n", "machine.topology"),
    ("sweep: {m: [1024, big]}\n", "sweep.m.1"),
])
def test_schema_errors_name_the_field(text, path):
    with pytest.raises(ConfigError, match=path.replace(".", r"\.")):
        parse_config(text, "x.yaml")


def test_config_errors_exit_2(tmp_path):
    assert main(["verify", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG
    bad = _write(tmp_path, "problem: [1, 2\n")
    assert main(["verify", "--config", str(bad)]) == EXIT_CONFIG


_configs = st.builds(
    dict,
    seed=st.integers(0, 2**31),
    problem=st.fixed_dictionaries({"m": st.sampled_from([64, 128]), "n": st.sampled_from([16, 32]),
                                   "k": st.sampled_from([16, 32]), "tp": st.sampled_from([1, 2, 4]),
                                   "pattern": st.sampled_from(["allgather_gemm", "gemm_reducescatter"])}),
    tile=st.fixed_dictionaries({"tm": st.sampled_from([4, 8]), "tn": st.sampled_from([8, 16])}),
    strategies=st.lists(st.sampled_from(["coarse", "medium", "fine"]), min_size=1, max_size=3, unique=True),
    fine=st.fixed_dictionaries({"swizzle": st.booleans(), "transfer": st.sampled_from(["pull", "push"]),
                                "write_mode": st.sampled_from(["write_alltoall", "fused_reduce"])}),
    machine=st.fixed_dictionaries({}, optional={"link_latency_us": st.floats(0, 10), "sm_count": st.integers(1, 64)}),
    bench=st.fixed_dictionaries({"warmup": st.integers(0, 5), "repetitions": st.integers(1, 20)}),
)


@settings(max_examples=30)
@given(_configs)
def test_config_round_trip(data):
    import yaml

    cfg = parse_config(yaml.safe_dump(data))
    again = parse_config(cfg.dump())
    assert again == cfg
    assert cfg.problem_spec().tp == data["problem"]["tp"]
    assert cfg.strategies == data["strategies"]


def test_default_config_is_valid():
    RunConfig().validate()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "tpoverlap", "verify", "--config", str(CONFIGS / "smoke_tp1.yaml"),
                           "--out", str(tmp_path)], capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.count("PASS") == 3
