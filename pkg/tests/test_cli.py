"""Command-line workbench: outputs, config precedence, determinism and error handling."""

import json
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from mcmma import align, cli, io

TINY_TRAIN = ["--epochs", "2", "--n-train", "16", "--batch-size", "8"]


@pytest.fixture
def run(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)

    def _run(*argv):
        code = cli.main([str(a) for a in argv])
        out = capsys.readouterr()
        return code, out.out, out.err

    return _run


@pytest.fixture
def checkpoint(run, tmp_path):
    code, _, _ = run("train", *TINY_TRAIN, "--output", tmp_path / "ck")
    assert code == 0
    return tmp_path / "ck" / "checkpoint.txt"


def read_bytes(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


class TestAlign:
    @pytest.mark.parametrize("mode, extra", [("mma", None), ("mcmma", "delta.csv"), ("gamma", "gamma.csv")])
    def test_bundled_fixture(self, run, tmp_path, mode, extra):
        code, out, _ = run("align", "--mode", mode, "--epsilon", 1, "--output", "a")
        assert code == 0
        assert "alpha: M=2 L=4 T=8" in out
        for name in ["alpha.csv"] + ([extra] if extra else []):
            arr = io.read_alignments(tmp_path / "a" / name)
            assert np.abs(arr.sum(-1) - 1).max() <= 1e-9

    def test_explicit_input(self, run, tmp_path):
        p = np.random.default_rng(0).random((3, 2, 5))
        io.write_probabilities(tmp_path / "p.csv", p)
        assert run("align", "--input", "p.csv", "--output", "a")[0] == 0
        assert io.read_alignments(tmp_path / "a" / "delta.csv").shape == (3, 2, 6)

    def test_malformed_input(self, run, tmp_path):
        (tmp_path / "bad.csv").write_text("T=2,L=1,M=1\n0.1,x\n")
        code, _, err = run("align", "--input", "bad.csv")
        assert code == 2
        assert "line 2, column 2" in err

    def test_missing_input(self, run):
        assert run("align", "--input", "nope.csv")[0] == 2

    def test_negative_epsilon(self, run):
        assert run("align", "--epsilon", -1)[0] == 2


class TestDecode:
    def test_probability_file(self, run, tmp_path):
        src = str(cli._fixture_path())
        code, out, _ = run("decode", "--input", src, "--epsilon", 1, "--output", "d")
        assert code == 0
        assert "rel_frames=" in out
        lines = (tmp_path / "d" / "trace.jsonl").read_text().splitlines()
        assert len(lines) == 4
        assert (tmp_path / "d" / "latency.csv").read_text().startswith("step,b_hyp,b_ref,diff")

    def test_checkpoint(self, run, checkpoint, tmp_path):
        code, out, _ = run("decode", "--checkpoint", checkpoint, "--utterance", 2, "--output", "d")
        assert code == 0
        assert "tokens=" in out

    def test_needs_exactly_one_source(self, run, checkpoint):
        assert run("decode")[0] == 2
        assert run("decode", "--input", cli._fixture_path(), "--checkpoint", checkpoint)[0] == 2

    def test_bad_policy(self, run):
        assert run("decode", "--input", cli._fixture_path(), "--threshold", 1.5)[0] == 2


class TestChecks:
    def test_oracle_check(self, run):
        code, out, _ = run("oracle-check", "--seeds", 1, "--samples", 2000)
        assert code == 0
        assert "all checks passed" in out
        assert "alpha_vs_enumeration" in out

    def test_gradcheck(self, run):
        code, out, _ = run("gradcheck", "--seeds", 1)
        assert code == 0
        assert "toy_" in out and "PASS" in out and "FAIL" not in out

    def test_invalid_seeds(self, run):
        assert run("gradcheck", "--seeds", 0)[0] == 2


class TestTrainAndTradeoff:
    def test_train_outputs(self, checkpoint):
        log = (checkpoint.parent / "train_log.csv").read_text().splitlines()
        assert log[0] == "epoch,loss,accuracy,spread"
        assert len(log) == 3

    def test_eval_three_rows(self, run, checkpoint, tmp_path):
        code, _, _ = run("eval", "--input", checkpoint, "--eps-list", "2,4,8", "--n-test", 8, "--output", "e")
        assert code == 0
        rows = (tmp_path / "e" / "tradeoff.csv").read_text().splitlines()
        assert len(rows) == 4
        assert [r.split(",")[1] for r in rows[1:]] == ["2", "4", "8"]
        ET.fromstring((tmp_path / "e" / "tradeoff.svg").read_text())

    def test_tradeoff_several_checkpoints(self, run, checkpoint, tmp_path):
        assert run("train", *TINY_TRAIN, "--mode", "mma", "--output", "mma")[0] == 0
        code, _, _ = run(
            "tradeoff", "--input", checkpoint, tmp_path / "mma" / "checkpoint.txt", "--eps-list", "1,32", "--n-test", 4
        )
        assert code == 0
        rows = (tmp_path / "tradeoff_out" / "tradeoff.csv").read_text().splitlines()
        assert [r.split(",")[0] for r in rows[1:]] == ["mcmma", "mcmma", "mma", "mma"]
        svg = ET.fromstring((tmp_path / "tradeoff_out" / "tradeoff.svg").read_text())
        assert len(svg.findall("{http://www.w3.org/2000/svg}polyline")) == 2

    @pytest.mark.parametrize("eps", ["a,b", "", "-1"])
    def test_bad_eps_list(self, run, checkpoint, eps):
        assert run("eval", "--input", checkpoint, "--eps-list", eps)[0] == 2

    def test_invalid_training_options(self, run):
        assert run("train", "--headdrop", 1.0)[0] == 2
        assert run("train", "--epsilon", 0)[0] == 2

    def test_bad_checkpoint(self, run, tmp_path):
        (tmp_path / "c.txt").write_text("not a checkpoint\n")
        assert run("eval", "--input", "c.txt")[0] == 2


class TestConfigFiles:
    def test_flags_override_file(self, run, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"mode": "gamma", "epsilon": 0, "output": "from_file"}))
        assert run("align", "--config", "c.json", "--epsilon", 2)[0] == 0
        assert (tmp_path / "from_file" / "gamma.csv").exists()
        gamma = io.read_alignments(tmp_path / "from_file" / "gamma.csv")
        alphas = align.expected_alignment(io.read_probabilities(cli._fixture_path()))
        np.testing.assert_array_equal(gamma, align.self_constrained(alphas, 2))

    def test_unknown_key(self, run, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"epsilonn": 2}))
        code, _, err = run("align", "--config", "c.json")
        assert code == 2 and "epsilonn" in err

    @pytest.mark.parametrize("text", ["{", "[1, 2]"])
    def test_malformed_file(self, run, tmp_path, text):
        (tmp_path / "c.json").write_text(text)
        assert run("align", "--config", "c.json")[0] == 2

    def test_missing_file(self, run):
        assert run("align", "--config", "absent.json")[0] == 2


class TestDeterminism:
    """Every command writes byte-identical files when rerun with the same options."""

    def test_align_and_decode(self, run, tmp_path):
        for out in ("r1", "r2"):
            run("align", "--output", tmp_path / out / "a")
            run("decode", "--input", cli._fixture_path(), "--epsilon", 2, "--output", tmp_path / out / "d")
        assert read_bytes(tmp_path / "r1" / "a") == read_bytes(tmp_path / "r2" / "a")
        assert read_bytes(tmp_path / "r1" / "d") == read_bytes(tmp_path / "r2" / "d")

    def test_train_eval(self, run, tmp_path):
        for out in ("r1", "r2"):
            run("train", *TINY_TRAIN, "--headdrop", 0.5, "--energy-noise", 1.0, "--output", tmp_path / out / "t")
            run("eval", "--input", tmp_path / out / "t" / "checkpoint.txt", "--n-test", 4, "--output", tmp_path / out / "e")
            run("decode", "--checkpoint", tmp_path / out / "t" / "checkpoint.txt", "--output", tmp_path / out / "d")
        for sub in ("t", "e", "d"):
            assert read_bytes(tmp_path / "r1" / sub) == read_bytes(tmp_path / "r2" / sub)

    def test_check_reports(self, run):
        first = run("oracle-check", "--seeds", 1, "--samples", 500)[1]
        second = run("oracle-check", "--seeds", 1, "--samples", 500)[1]
        assert first == second


def test_module_entry_point(tmp_path):
    res = subprocess.run(
        [sys.executable, "-m", "mcmma.cli", "align", "--output", str(tmp_path / "a")], capture_output=True, text=True
    )
    assert res.returncode == 0, res.stderr
    assert "max|row_sum-1|" in res.stdout
