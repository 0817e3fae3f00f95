import json
from pathlib import Path

import numpy as np
import pytest

from strainsolve.cli import main
from strainsolve.core import StrainMatrix
from strainsolve.evaluation import best_permutation, recon_error
from strainsolve.io import read_matrix, read_result, read_table, read_vector, write_vector

DATA = Path(__file__).parent / "data"


@pytest.fixture
def d1(tmp_path):
    path = tmp_path / "d1.csv"
    write_vector(path, [0.4, 0.6, 1.0])
    return path


def test_reconstruct_bcd_and_global_agree(tmp_path, d1):
    out = {}
    for method in ("bcd", "global", "hybrid"):
        res = tmp_path / f"{method}.txt"
        code = main(["reconstruct", "--input", str(d1), "--n", "2", "--gamma", "0.01",
                     "--method", method, "--out", str(res), "--seed", "1"])
        assert code == 0
        out[method] = read_result(res)
    for method in ("global", "hybrid"):
        np.testing.assert_array_equal(out[method][1]["M"], out["bcd"][1]["M"])
        np.testing.assert_allclose(out[method][1]["w"], out["bcd"][1]["w"], atol=1e-6)
        assert out[method][0]["certified"] is True
    np.testing.assert_allclose(out["bcd"][1]["w"], [[0.6, 0.4]], atol=1e-6)


def test_synth_then_reconstruct_pipeline(tmp_path):
    prefix = tmp_path / "inst"
    assert main(["synth", "--m", "10", "--n", "3", "--gamma", "1e-3", "--seed", "7", "--out", str(prefix)]) == 0
    res = tmp_path / "rec.json"
    code = main(["reconstruct", "--input", f"{prefix}_d.csv", "--n", "3", "--gamma", "1e-3",
                 "--method", "global", "--format", "json", "--out", str(res)])
    assert code == 0
    fields, blocks = read_result(res)
    truth = (StrainMatrix.from_array(read_matrix(f"{prefix}_M.csv")), read_vector(f"{prefix}_w.csv"))
    est = (StrainMatrix.from_array(blocks["M"]), blocks["w"][0])
    # barcodes come back exactly; the remaining error is the weight noise,
    # about 1e-3 per strain summed over 2m augmented entries
    perm = best_permutation(truth, est)
    np.testing.assert_array_equal(est[0].entries[:, list(perm)], truth[0].entries)
    assert recon_error(truth, est) < 2.5e-2
    assert fields["certified"] is True


def test_unknown_flag_is_usage_error(d1, capsys):
    assert main(["reconstruct", "--input", str(d1), "--n", "2", "--gamma", "0.01", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err
    assert main([]) == 2
    assert main(["reconstruct", "--input", str(d1), "--n", "2", "--gamma", "-1"]) == 2


def test_bad_input_files_exit_three(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("0.1,zero\n")
    assert main(["reconstruct", "--input", str(bad), "--n", "2", "--gamma", "0.01"]) == 3
    assert "bad.csv:1" in capsys.readouterr().err
    assert main(["reconstruct", "--input", str(tmp_path / "nope.csv"), "--n", "2", "--gamma", "0.01"]) == 3
    counts = tmp_path / "c.tsv"
    counts.write_text("site\tref\talt\nrs1\t1\t1\nrs2\tx\t1\n")
    assert main(["ingest", "--counts", str(counts), "--out", str(tmp_path / "d.csv")]) == 3


def test_require_certified(tmp_path):
    prefix = tmp_path / "inst"
    main(["synth", "--m", "8", "--n", "3", "--gamma", "1e-3", "--seed", "3", "--out", str(prefix)])
    args = ["reconstruct", "--input", f"{prefix}_d.csv", "--n", "3", "--gamma", "1e-3", "--method", "global",
            "--out", str(tmp_path / "r.txt")]
    assert main(args + ["--node-limit", "1", "--require-certified"]) == 4
    assert read_result(tmp_path / "r.txt")[0]["certified"] is False
    assert main(args + ["--require-certified"]) == 0


def test_outputs_are_deterministic_without_timestamp(tmp_path, d1):
    texts = []
    for k in range(2):
        out = tmp_path / f"p{k}.txt"
        main(["posterior", "--input", str(d1), "--n", "2", "--gamma", "0.01", "--nodes", "500", "--seed", "3",
              "--no-timestamp", "--no-figures", "--out", str(out)])
        texts.append(out.read_bytes())
    assert texts[0] == texts[1]
    assert b"created" not in texts[0]


def test_stdout_output(d1, capsys):
    assert main(["reconstruct", "--input", str(d1), "--n", "2", "--gamma", "0.01", "--no-timestamp"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("# strainsolve reconstruction") and "[M]" in out


def test_posterior_writes_figure(tmp_path, d1):
    out = tmp_path / "post.txt"
    main(["posterior", "--input", str(d1), "--n", "2", "--gamma", "0.01", "--nodes", "300", "--out", str(out)])
    fields, blocks = read_result(out)
    assert fields["nodes"] == 300 and blocks["M_mean"].shape == (3, 2)
    assert (tmp_path / "post.png").stat().st_size > 0


def test_entropy_map_and_figure(tmp_path):
    d = tmp_path / "d.csv"
    write_vector(d, [0.1, 0.3, 0.5, 0.6])
    out = tmp_path / "ent.csv"
    assert main(["entropy-map", "--input", str(d), "--gamma", "0.01", "--resolution", "12", "--out", str(out)]) == 0
    cols, rows = read_table(out)
    assert cols == ["w1", "w2", "w3", "entropy_bits"] and len(rows) > 5
    assert (tmp_path / "ent.png").exists()
    assert main(["entropy-map", "--input", str(d), "--gamma", "0.01", "--n", "2"]) == 2


def test_moi_command(tmp_path, capsys):
    d = tmp_path / "d.csv"
    M = np.array([[1, 0], [0, 1], [1, 1], [1, 0], [0, 1]])
    write_vector(d, M @ [0.7, 0.3])
    out = tmp_path / "moi.txt"
    assert main(["moi", "--input", str(d), "--gamma", "1e-3", "--n-max", "4", "--method", "global",
                 "--out", str(out)]) == 0
    assert "estimated n: 2" in capsys.readouterr().err
    fields, blocks = read_result(out)
    assert fields["n"] == 2 and blocks["discrepancy"].shape == (1, 2)
    assert (tmp_path / "moi.png").exists()


def test_ingest_command(tmp_path, capsys):
    out = tmp_path / "d.csv"
    assert main(["ingest", "--counts", str(DATA / "counts16.tsv"), "--min-depth", "60", "--out", str(out)]) == 0
    v = read_vector(out)
    assert 0 < v.size < 16
    assert "dropped site" in capsys.readouterr().err


def test_benchmark_command(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"cells": [[5, 2, 2]], "gammas": [0.01], "sample_count": 3, "baseline_pairs": 50,
                                "bcd": {"n_trials": 5}}))
    out = tmp_path / "bench"
    assert main(["benchmark", "--spec", str(spec), "--out", str(out)]) == 0
    cols, rows = read_table(out / "rows.csv")
    assert len(rows) == 6 and "error" in cols
    _, summary = read_table(out / "summary.csv")
    assert len(summary) == 2
    assert (out / "sorted_errors_m5_n2_p2.png").exists()
    spec.write_text('{"sample_count": 0}')
    assert main(["benchmark", "--spec", str(spec), "--out", str(out)]) == 3


def test_error_map_command(tmp_path):
    truth = tmp_path / "M.csv"
    truth.write_text("4,3\n1,0,0\n0,1,0\n0,0,1\n1,1,0\n")
    out = tmp_path / "maps"
    assert main(["error-map", "--truth-matrix", str(truth), "--gamma", "0.01,0.1", "--resolution", "5",
                 "--trials", "3", "--out", str(out)]) == 0
    assert (out / "error_map_gamma0.01.csv").exists() and (out / "error_map_gamma0.1.csv").exists()
    assert (out / "error_map.png").exists()
    truth.write_text("2,2\n1,0\n0,1\n")
    assert main(["error-map", "--truth-matrix", str(truth), "--gamma", "0.01", "--out", str(out)]) == 2
