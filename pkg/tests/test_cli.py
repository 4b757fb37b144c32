import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from swankv.calibration import ProjectionSet, calibrate
from swankv.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_IO, main, threads_from_env
from swankv.config import ModelConfig
from swankv.corpus import calibration_tokens
from swankv.exceptions import ConfigurationError
from swankv.model import RUN_CSV_COLUMNS, build_toy_model, load_model

GOLDEN = Path(__file__).parent / "golden"
TINY = ["--d-head", "8", "--layers", "1", "--q-heads", "2", "--kv-heads", "2", "--seed", "1"]


def run_cli(capsys, *argv):
    rc = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return rc, out, err


def rows_of(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture(scope="module")
def proj_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "tiny.proj"
    assert main(["calibrate", *TINY, "--calib-tokens", "512", "--out", str(path)]) == 0
    return path


# --- golden files -------------------------------------------------------------


@pytest.mark.parametrize("precision", ["fp16", "fp8"])
def test_curve_golden(capsys, precision):
    rc, out, _ = run_cli(capsys, "curve", "--d-head", 8, "--precision", precision)
    assert rc == 0
    assert out == (GOLDEN / f"curve_d8_{precision}.csv").read_text()


def test_breakeven_csv_golden(capsys):
    rc, out, err = run_cli(capsys, "breakeven", 4, 2, 1, "--csv", "-")
    assert rc == 0
    assert out == (GOLDEN / "breakeven_4_2_1.csv").read_text()
    assert err.splitlines()[0] == "10"


def test_curve_fp16_crosses_between_065_and_066(capsys):
    _, out, _ = run_cli(capsys, "curve", "--d-head", 128)
    rows = rows_of(out)
    below = [float(r["retention"]) for r in rows if float(r["memory_ratio"]) < 1]
    above = [float(r["retention"]) for r in rows if float(r["memory_ratio"]) > 1]
    assert 0.65 <= max(below) < 0.66 < min(above)


@pytest.mark.parametrize("args,expected", [((16, 8, 0), "33"), ((128, 64, 0), "257"), ((16, 16, 0), "never"), ((64, 16, 0), "86")])
def test_breakeven_values(capsys, args, expected):
    rc, out, _ = run_cli(capsys, "breakeven", *args)
    assert rc == 0 and out.splitlines()[0] == expected


def test_breakeven_validate(capsys):
    rc, out, _ = run_cli(capsys, "breakeven", 32, 8, 4, "--validate")
    assert rc == 0 and "gap 0" in out


# --- calibrate ----------------------------------------------------------------


def test_calibrate_deterministic_and_loadable(capsys, tmp_path, proj_file):
    again = tmp_path / "again.proj"
    rc, out, _ = run_cli(capsys, "calibrate", *TINY, "--calib-tokens", 512, "--out", again)
    assert rc == 0 and "energy@k=d_h/2" in out
    assert again.read_bytes() == proj_file.read_bytes()
    cfg = ModelConfig.from_heads(8, 1, 2, 2)
    ref = calibrate(build_toy_model(cfg, 1), calibration_tokens(512), seed=1, corpus_id="swankv-harbour-v1")
    assert ProjectionSet.load(again).to_bytes() == ref.to_bytes()


def test_calibrate_random_variant(capsys, tmp_path):
    path = tmp_path / "r.proj"
    rc, out, _ = run_cli(capsys, "calibrate", *TINY, "--calib-tokens", 256, "--variant", "random", "--out", path)
    assert rc == 0
    pset = ProjectionSet.load(path)
    assert pset.variant == "random"
    assert np.max(pset.residuals()) < 1e-5
    assert "variant=random" in out


def test_calibrate_saves_model(capsys, tmp_path):
    w = tmp_path / "w.bin"
    rc, _, _ = run_cli(capsys, "calibrate", *TINY, "--calib-tokens", 256, "--out", tmp_path / "p", "--save-model", w)
    assert rc == 0
    assert load_model(w).config == ModelConfig.from_heads(8, 1, 2, 2)
    rc, out, _ = run_cli(capsys, "run", "--model", w, "--seed", 1, "--mode", "baseline", "--steps", 3)
    assert rc == 0


# --- run ----------------------------------------------------------------------


def test_run_header_and_bytes(capsys, proj_file):
    rc, out, _ = run_cli(capsys, "run", *TINY, "--projections", proj_file, "--k-key", 3, "--k-value", 5, "--buffer", 2, "--steps", 6)
    assert rc == 0
    assert out.splitlines()[0] == ",".join(RUN_CSV_COLUMNS)
    rows = rows_of(out)
    assert len(rows) == len("The harbour ") + 6
    for r in rows:
        L = int(r["L"])
        dense, sparse = min(L, 2), max(L - 2, 0)
        per_head = 2 * dense * 16 + sparse * ((3 * 3 + 2) + (3 * 5 + 2))
        assert int(r["bytes_cache"]) == 2 * per_head
        assert int(r["bytes_cache_baseline"]) == 2 * 2 * L * 32
        assert int(r["measured_flops_swan"]) == int(r["modeled_flops_swan"])


def test_run_lossless_matches_baseline(capsys, proj_file):
    rc, _, err_base = run_cli(capsys, "run", *TINY, "--mode", "baseline", "--steps", 24)
    assert rc == 0
    rc, _, err = run_cli(capsys, "run", *TINY, "--projections", proj_file, "--k-ratio", 1.0, "--precision", "f32", "--steps", 24, "--validate")
    assert rc == 0
    assert err_base.splitlines()[-1] == [l for l in err.splitlines() if l.startswith("generated")][0]


def test_run_pruned_drift_populated(capsys, proj_file):
    rc, out, _ = run_cli(capsys, "run", *TINY, "--projections", proj_file, "--buffer", 0, "--k-ratio", 0.25, "--steps", 8)
    assert rc == 0
    drift = [float(r["drift_l2"]) for r in rows_of(out)]
    assert all(d >= 0 for d in drift) and max(drift) > 0


def test_run_validate_detects_divergence(capsys, proj_file):
    rc, _, err = run_cli(capsys, "run", *TINY, "--projections", proj_file, "--k-ratio", 0.0, "--steps", 16, "--validate")
    assert rc == EXIT_CHECK and "check failed" in err


# --- sweep / ablate -----------------------------------------------------------


def test_sweep_grid(capsys, proj_file, monkeypatch):
    monkeypatch.setenv("SWAN_THREADS", "2")
    rc, out, _ = run_cli(
        capsys, "sweep", *TINY, "--projections", proj_file, "--retentions", "1.0,0.5", "--precisions", "fp16,fp8",
        "--buffers", "0,4", "--windows", 1, "--window-length", 16,
    )
    assert rc == 0
    assert out.splitlines()[0] == (
        "retention,key_ratio,k_key,k_value,precision,buffer,memory_ratio,bytes_cache,bytes_cache_baseline,"
        "mean_drift,max_drift,perplexity,reference_perplexity"
    )
    rows = rows_of(out)
    assert len(rows) == 8
    assert {(r["precision"], r["buffer"]) for r in rows} == {("fp16", "0"), ("fp16", "4"), ("fp8", "0"), ("fp8", "4")}


def test_sweep_kv_split(capsys, proj_file):
    rc, out, _ = run_cli(capsys, "sweep", *TINY, "--projections", proj_file, "--kv-split", "--windows", 1, "--window-length", 12)
    assert rc == 0
    rows = rows_of(out)
    # 9 key ratios x default precisions {fp16, fp8}
    assert len(rows) == 18
    assert sorted({r["key_ratio"] for r in rows}) == ["0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7", "0.8", "0.9"]
    assert all(int(r["k_key"]) + int(r["k_value"]) == 8 for r in rows)


def test_ablate(capsys, proj_file):
    rc, out, _ = run_cli(capsys, "ablate", *TINY, "--projections", proj_file, "--heldout-tokens", 256)
    assert rc == 0
    assert out.splitlines()[0] == "variant,retention,key_error,value_error,mean_error"
    assert [r["variant"] for r in rows_of(out)] == ["learned", "head_shuffle", "layer_shuffle", "kv_shuffle", "random"]


# --- configuration and errors -------------------------------------------------


def test_config_file(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(ModelConfig.from_heads(8, 1, 2, 2).to_dict()))
    rc, out, _ = run_cli(capsys, "run", "--config", cfg, "--seed", 1, "--mode", "baseline", "--steps", 2)
    rc2, out2, _ = run_cli(capsys, "run", *TINY, "--mode", "baseline", "--steps", 2)
    assert rc == rc2 == 0 and out == out2


@pytest.mark.parametrize(
    "argv",
    [
        ["run", "--d-head", "15", "--q-heads", "2", "--mode", "baseline"],
        ["run", *TINY, "--k-key", "9"],
        ["run", *TINY, "--buffer", "-1"],
        ["run", "--q-heads", "4", "--kv-heads", "3", "--d-head", "8"],
        ["breakeven", "0", "0"],
        ["curve", "--precision", "bf16"],
    ],
)
def test_config_errors_exit_2(capsys, argv):
    rc, _, err = run_cli(capsys, *argv)
    assert rc == EXIT_CONFIG and "error" in err


def test_projection_config_mismatch_exit_2(capsys, proj_file):
    rc, _, _ = run_cli(capsys, "run", "--d-head", 8, "--layers", 2, "--q-heads", 2, "--projections", proj_file)
    assert rc == EXIT_CONFIG


def test_bad_threads_exit_2(capsys, monkeypatch, proj_file):
    monkeypatch.setenv("SWAN_THREADS", "0")
    rc, _, _ = run_cli(capsys, "sweep", *TINY, "--projections", proj_file)
    assert rc == EXIT_CONFIG
    with pytest.raises(ConfigurationError):
        threads_from_env({"SWAN_THREADS": "many"})
    assert threads_from_env({}) == 1


@pytest.mark.parametrize(
    "argv",
    [
        ["run", *TINY, "--projections", "/nonexistent/p.proj"],
        ["run", *TINY, "--model", "/nonexistent/w.bin"],
        ["sweep", *TINY, "--corpus", "/nonexistent/text.txt"],
        ["curve", "--out", "/nonexistent/dir/c.csv"],
    ],
)
def test_io_errors_exit_3(capsys, argv):
    rc, _, err = run_cli(capsys, *argv)
    assert rc == EXIT_IO and "I/O error" in err


def test_corrupt_projection_file_exit_2(capsys, tmp_path):
    bad = tmp_path / "bad.proj"
    bad.write_bytes(b"SWANPROJ" + bytes(40))
    rc, _, _ = run_cli(capsys, "run", *TINY, "--projections", bad)
    assert rc == EXIT_CONFIG


def test_outputs_written_as_utf8_files(capsys, tmp_path, proj_file):
    out = tmp_path / "run.csv"
    rc, stdout, _ = run_cli(capsys, "run", *TINY, "--projections", proj_file, "--steps", 2, "--out", out)
    assert rc == 0 and stdout == ""
    assert out.read_text(encoding="utf-8").splitlines()[0].startswith("step,L,mode")
