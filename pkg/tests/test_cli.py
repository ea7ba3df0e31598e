import json

import numpy as np
import pytest

from hepca.cli import (SCHEMA_VERSION, build_parser, main, read_config_file, read_csv,
                       resolve_config)


def _run(tmp_path, *argv, name="report.json"):
    path = tmp_path / name
    code = main([*argv, "--report", str(path)])
    return code, json.loads(path.read_text()), path.read_bytes()


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("# comment\nn = 4\nlp = 6\nmode = quantized\nnz = none\n")
    args = build_parser().parse_args(["pca", "--config", str(cfg_file), "--lp", "9"])
    cfg = resolve_config(args, environ={"HEPCA_N": "16", "HEPCA_SEED": "5"})
    assert (cfg.n, cfg.lp, cfg.mode, cfg.seed, cfg.nz) == (16, 9, "quantized", 5, None)


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = red\n")
    with pytest.raises(ValueError, match="unknown key"):
        read_config_file(str(bad))
    bad.write_text("n 4\n")
    with pytest.raises(ValueError, match="key = value"):
        read_config_file(str(bad))


def test_csv_header_detection(tmp_path):
    with_header = tmp_path / "h.csv"
    with_header.write_text("a,b\n1,2\n3,4.5\n")
    plain = tmp_path / "p.csv"
    plain.write_text("1,2\n3,4.5\n")
    assert np.array_equal(read_csv(str(with_header)), [[1, 2], [3, 4.5]])
    assert np.array_equal(read_csv(str(plain)), [[1, 2], [3, 4.5]])


@pytest.mark.parametrize("body,msg", [("1,2\n3\n", "expected 2 fields"),
                                      ("1,2\n3,x\n", "non-numeric"),
                                      ("a,b\n", "no data rows"),
                                      ("1,nan\n", "non-finite")])
def test_csv_malformed_rows(tmp_path, body, msg):
    path = tmp_path / "d.csv"
    path.write_text(body)
    with pytest.raises(ValueError, match=msg):
        read_csv(str(path))


def test_malformed_csv_exit_code(tmp_path, capsys):
    path = tmp_path / "d.csv"
    path.write_text("1,2\n3\n")
    assert main(["covariance", "--dataset", str(path), "--n", "2"]) == 2
    assert "expected 2 fields" in capsys.readouterr().err


def test_decompose_verify_reference_point(tmp_path):
    code, rep, _ = _run(tmp_path, "decompose-verify", "--n", "128", "--nprime", "32", "--n1z", "8")
    assert code == 0 and rep["schema_version"] == SCHEMA_VERSION
    res = rep["result"]
    assert res["reconstruction"] == {"Z": True, "T": True}
    assert res["keys"]["Z"] == {"dh_bsgs": 38, "dcd": 15, "reduction_pct": 60.5}


def test_decompose_verify_no_reduction_at_top(tmp_path):
    code, rep, _ = _run(tmp_path, "decompose-verify", "--n", "8", "--nprime", "7")
    assert code == 0
    assert rep["result"]["keys"]["Z"]["reduction_pct"] == 0.0


def test_matmul_bench(tmp_path):
    code, rep, _ = _run(tmp_path, "matmul-bench", "--n", "4", "--nz", "2", "--nt", "2", "--trials", "3")
    assert code == 0
    rows = rep["result"]["rows"]
    assert [r["config"] for r in rows] == ["dh_bsgs", "dcd"]
    assert all(r["max_abs_error"] < 1e-9 for r in rows)


def test_matmul_bench_zero_trials(tmp_path):
    code, rep, _ = _run(tmp_path, "matmul-bench", "--n", "4", "--trials", "0")
    assert code == 0
    assert rep["result"]["rows"] == [{"config": "dh_bsgs", "max_abs_error": 0.0, "trials": 0}]


def test_covariance_command(tmp_path):
    data = np.random.default_rng(0).standard_normal((6, 6))
    path = tmp_path / "d.csv"
    np.savetxt(path, data, delimiter=",")
    out_csv = tmp_path / "cov.csv"
    code, rep, _ = _run(tmp_path, "covariance", "--dataset", str(path), "--n", "2",
                        "--matrix-csv", str(out_csv))
    assert code == 0
    res = rep["result"]
    assert res["max_abs_error"] < 1e-9 and res["symmetric"]
    assert res["levels_used"] == res["expected_levels"]
    assert np.allclose(np.loadtxt(out_csv, delimiter=","), np.cov(data.T, bias=True), atol=1e-12)


def test_covariance_block_count(tmp_path):
    code, rep, _ = _run(tmp_path, "covariance", "--synthetic", "200x256", "--n", "128", "--trials", "0")
    assert code == 0 and rep["result"]["blocks"] == 4


def test_simulate_norm(tmp_path):
    code, rep, _ = _run(tmp_path, "simulate-norm", "--lp", "4")
    assert code == 0
    assert rep["result"]["average_iters"] == 14.5


def test_pca_command(tmp_path):
    code, rep, _ = _run(tmp_path, "pca", "--synthetic", "128x8", "--n", "4", "--le", "2", "--lp", "14")
    assert code == 0
    res = rep["result"]
    assert res["checks"] == {"norm_within_e": True, "eigenvalue_below_max": True}
    assert res["eigenvalues"] == pytest.approx(res["reference_eigenvalues"], rel=1e-2)
    assert res["r2_x"] > 0.3


def test_pca_covariance_only(tmp_path):
    code, rep, _ = _run(tmp_path, "pca", "--synthetic", "16x4", "--n", "2", "--le", "0")
    assert code == 0
    assert set(rep["result"]) == {"covariance", "ledger"}


def test_reports_are_byte_stable_across_workers(tmp_path):
    blobs = set()
    for w in (1, 4, 8):
        code, _, raw = _run(tmp_path, "pca", "--synthetic", "64x8", "--n", "4", "--le", "1",
                            "--lp", "4", "--workers", str(w), name=f"r{w}.json")
        assert code == 0
        blobs.add(raw)
    assert len(blobs) == 1


def test_oracle_failure_sets_exit_code(tmp_path):
    # two fractional bits cannot reproduce a product to 1e-4
    cfg = tmp_path / "q.cfg"
    cfg.write_text("precision_bits = 2\n")
    code, rep, _ = _run(tmp_path, "matmul-bench", "--config", str(cfg), "--n", "4",
                        "--mode", "quantized", "--trials", "2")
    assert code == 1 and rep["ok"] is False
