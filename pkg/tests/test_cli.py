import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from shuffledp import cli
from shuffledp.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, ExperimentConfig, ResultRecord, UsageError, main


def lines(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


class TestRecords:
    @given(
        st.sampled_from(["trial", "summary", "audit"]),
        st.dictionaries(st.text(max_size=5), st.integers() | st.floats(allow_nan=False) | st.text(max_size=5), max_size=4),
        st.none() | st.integers(0, 100),
        st.none() | st.floats(allow_nan=False),
    )
    def test_round_trip(self, kind, config, index, value):
        rec = ResultRecord(kind, config, index, 7, value, {"p95": 1.5}, None)
        assert ResultRecord.from_json(rec.to_json()) == rec

    def test_infinite_value_round_trip(self):
        rec = ResultRecord("audit", {}, value={"epsilon_star": math.inf})
        assert ResultRecord.from_json(rec.to_json()).value["epsilon_star"] == math.inf

    def test_config_validation(self):
        with pytest.raises(UsageError):
            ExperimentConfig("nope")
        with pytest.raises(UsageError):
            ExperimentConfig("rr", trials=0)

    def test_summary_quantiles(self):
        s = cli.summarize([-3.0, 1.0, 2.0])
        assert s["max"] == 3.0 and s["p50"] == 2.0 and s["count"] == 3
        assert s["mean"] == 0.0


class TestRun:
    def test_single_trial(self):
        recs = cli.run(ExperimentConfig("rr", {"epsilon": 1.0}, n=1000, trials=1, seed=5))
        assert [r.kind for r in recs] == ["trial", "summary"]
        assert recs == cli.run(ExperimentConfig("rr", {"epsilon": 1.0}, n=1000, trials=1, seed=5))
        assert recs[-1].wall_time is None

    def test_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        argv = ["run", "--protocol", "zsum", "--n", "300", "--trials", "5", "--seed", "9"]
        assert main(argv + ["--out", str(a)]) == EXIT_OK
        assert main(argv + ["--out", str(b)]) == EXIT_OK
        assert a.read_bytes() == b.read_bytes()
        assert len(lines(a)) == 6

    def test_config_file(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"protocol": "parallel_hist", "n": 200, "trials": 2, "params": {"d": 10}}))
        out = tmp_path / "out.jsonl"
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
        summary = lines(out)[-1]
        assert summary["config"]["solved"]["d"] == 10

    @pytest.mark.parametrize("name", sorted(cli.CATALOG))
    def test_catalog_runs(self, name):
        params = {"d": 20} if name in ("parallel_hist", "optin_hist", "countmin") else {}
        if name == "rr":
            params = {"p": 0.5}
        n = 4 if name.startswith("brittle") else 60
        recs = cli.run(ExperimentConfig(name, params, n=n, trials=2, seed=1))
        assert recs[-1].summary["count"] == 2

    def test_timing(self):
        recs = cli.run(ExperimentConfig("rr", {"p": 0.5}, n=50, trials=1), timing=True)
        assert recs[-1].wall_time is not None


class TestSweep:
    def test_one_point_is_run(self):
        base = ExperimentConfig("rr", {"epsilon": 1.0}, n=500, trials=4, seed=2)
        assert cli.sweep(base, {"n": [500]}) == [cli.run(base)[-1]]

    def test_order(self):
        base = ExperimentConfig("rr", {}, n=100, trials=2, seed=0)
        recs = cli.sweep(base, {"n": [100, 200], "p": [0.5, 0.2]})
        cells = [(r.config["n"], r.config["params"]["p"]) for r in recs]
        assert cells == [(100, 0.5), (100, 0.2), (200, 0.5), (200, 0.2)]

    def test_small_n_rr_is_usage_error(self, capsys):
        # at n = 100 the solved p is 1 and the estimator is undefined
        assert main(["run", "--protocol", "rr", "--n", "100"]) == EXIT_USAGE
        assert "p = 1" in capsys.readouterr().err

    def test_error_flat_in_n(self):
        base = ExperimentConfig("rr", {"epsilon": 1.0, "delta": 1e-6}, n=1000, trials=300, seed=4)
        s1, s2 = (r.summary["p95"] for r in cli.sweep(base, {"n": [1000, 10000]}))
        assert 0.5 < s2 / s1 < 2.0

    def test_csv(self, tmp_path):
        cfg = tmp_path / "grid.json"
        cfg.write_text(json.dumps({"protocol": "rr", "n": 1000, "trials": 3, "grid": {"n": [1000, 2000]}}))
        out = tmp_path / "grid.csv"
        assert main(["sweep", "--config", str(cfg), "--format", "csv", "--out", str(out)]) == EXIT_OK
        rows = out.read_text().splitlines()
        assert len(rows) == 3 and "summary.p95" in rows[0]
        assert rows[1].split(",")[rows[0].split(",").index("config.n")] == "1000"


class TestAuditCommand:
    def test_brittle1_pure_full(self, tmp_path):
        out = tmp_path / "a.jsonl"
        argv = ["audit", "--protocol", "brittle1", "--n", "4", "--param", "mode=pure", "--param", "gamma=1", "--out", str(out)]
        assert main(argv) == EXIT_OK
        assert math.isfinite(lines(out)[0]["value"]["epsilon_star"])

    def test_brittle1_pure_dropout(self, tmp_path):
        out = tmp_path / "a.jsonl"
        argv = ["audit", "--protocol", "brittle1", "--n", "4", "--param", "mode=pure", "--param", "gamma=0.75", "--out", str(out)]
        assert main(argv) == EXIT_FAIL
        assert lines(out)[0]["value"]["epsilon_star"] == math.inf

    def test_rr_all_noise(self):
        record, passed = cli.audit({"protocol": "rr", "n": 4, "params": {"p": 1.0}, "mode": "pure"})
        assert passed and record.value["epsilon_star"] == 0.0

    def test_approx_budget(self):
        _, passed = cli.audit({"protocol": "brittle2", "n": 3, "delta": 0.9})
        assert passed
        _, passed = cli.audit({"protocol": "brittle2", "n": 3, "gamma": 2 / 3, "delta": 0.9})
        assert not passed


class TestUsage:
    @pytest.mark.parametrize(
        "argv",
        [
            ["run", "--protocol", "bogus"],
            ["run"],
            ["frobnicate"],
            ["run", "--protocol", "rr", "--param", "novalue"],
            ["sweep", "--protocol", "rr"],
            ["audit", "--protocol", "splitmix"],
            ["run", "--config", "/nonexistent.json"],
        ],
    )
    def test_exit_two(self, argv, capsys):
        assert main(argv) == EXIT_USAGE

    def test_solve_params(self, capsys):
        assert main(["solve-params", "--protocol", "zsum", "--n", "1000"]) == EXIT_OK
        rec = json.loads(capsys.readouterr().out)
        assert 0.5 < rec["value"]["r"] < 1

    def test_uniformity_command(self, tmp_path):
        cfg = tmp_path / "u.json"
        cfg.write_text(json.dumps({"d": 10, "alpha": 0.5, "m": 200, "trials": 3, "source": {"type": "point"}}))
        out = tmp_path / "u.jsonl"
        assert main(["test-uniformity", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
        recs = lines(out)
        assert recs[-1]["summary"]["count"] == 3
        assert all(r["value"] in ("uniform", "not-uniform") for r in recs[:-1])
