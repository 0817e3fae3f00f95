import json
from pathlib import Path

import numpy as np
import pytest

from strainsolve.bcd import BcdConfig
from strainsolve.core import ProblemDims
from strainsolve.io import (
    FormatError,
    RunConfig,
    SiteRecord,
    fmt_float,
    format_matrix,
    format_result,
    format_table,
    ingest_read_counts,
    parse_counts_file,
    parse_counts_text,
    parse_matrix,
    parse_result,
    parse_table,
    parse_vector,
    read_matrix,
    read_result,
    read_vector,
    write_matrix,
    write_result,
    write_vector,
)

DATA = Path(__file__).parent / "data"


def test_fmt_float_round_trips():
    rng = np.random.default_rng(0)
    for x in np.concatenate([rng.normal(size=200), rng.uniform(size=200) * 1e-12, [0.1, 1 / 3, 2.0, -0.0]]):
        assert float(fmt_float(x)) == x
    assert fmt_float(3.0) == "3"
    assert fmt_float(float("inf")) == "inf"


def test_vector_and_matrix_files(tmp_path):
    v = np.random.default_rng(1).uniform(size=7)
    write_vector(tmp_path / "v.csv", v, ["seven numbers"])
    np.testing.assert_array_equal(read_vector(tmp_path / "v.csv"), v)
    A = np.random.default_rng(2).normal(size=(4, 3))
    write_matrix(tmp_path / "A.csv", A)
    np.testing.assert_array_equal(read_matrix(tmp_path / "A.csv"), A)
    assert format_matrix([[1, 0], [0, 1]]) == "2,2\n1,0\n0,1\n"


def test_vector_accepts_multiline_and_comments():
    np.testing.assert_array_equal(parse_vector("# d\n0.4,0.6\n\n1.0\n"), [0.4, 0.6, 1.0])


def test_matrix_errors_name_lines():
    with pytest.raises(FormatError, match="header"):
        parse_matrix("a,b\n1,2\n")
    with pytest.raises(FormatError) as err:
        parse_matrix("2,2\n1,2\n3\n")
    assert err.value.line == 3
    with pytest.raises(FormatError, match="announces"):
        parse_matrix("3,1\n1\n")
    with pytest.raises(FormatError):
        parse_vector("# nothing here\n")
    with pytest.raises(FormatError) as err:
        parse_vector("1,2\n3,x\n")
    assert err.value.line == 2


def test_table_round_trip():
    text = format_table(["a", "b"], [[1.5, "x"], [2, "y"]])
    cols, rows = parse_table(text)
    assert cols == ["a", "b"] and rows == [["1.5", "x"], ["2", "y"]]
    with pytest.raises(FormatError):
        parse_table("a,b\n1\n")


@pytest.mark.parametrize("fmt", ["text", "json"])
def test_result_round_trip(tmp_path, fmt):
    M = np.array([[0, 1], [1, 0], [1, 1]])
    w = np.array([[0.6000000000000001, 0.39999999999999997]])
    fields = {"method": "global", "objective": 1.2345678901234567e-5, "certified": True, "nodes": 12}
    write_result(tmp_path / "r", fields, {"M": M, "w": w}, fmt)
    f, b = read_result(tmp_path / "r")
    assert f == fields
    np.testing.assert_array_equal(b["M"], M)
    np.testing.assert_array_equal(b["w"], w)


def test_result_json_is_valid_json():
    doc = json.loads(format_result({"a": 1.0}, {"x": np.eye(2)}, "json", timestamp=False))
    assert doc["fields"] == {"a": 1.0} and doc["blocks"]["x"] == [[1.0, 0.0], [0.0, 1.0]]


def test_result_timestamp_is_one_line():
    a = format_result({"a": 1}, {}, timestamp=True).splitlines()
    b = format_result({"a": 1}, {}, timestamp=False).splitlines()
    assert len(a) == len(b) + 1 and a[1].startswith("# created:")


def test_result_errors():
    with pytest.raises(FormatError, match="not closed"):
        parse_result("[M]\n1,1\n0\n")
    with pytest.raises(FormatError):
        parse_result("just words\n")
    with pytest.raises(FormatError):
        parse_result("{broken")
    with pytest.raises(ValueError):
        format_result({"a": 1}, {}, fmt="yaml")


def test_counts_two_line_file(tmp_path):
    f = tmp_path / "c.tsv"
    f.write_text("site\tref\talt\nrs1\t30\t10\n")
    assert parse_counts_file(f) == [SiteRecord("rs1", 30, (10,))]


def test_counts_comment_only_and_empty(tmp_path):
    f = tmp_path / "c.tsv"
    f.write_text("# nothing\n# at all\n")
    assert parse_counts_file(f) == []
    f.write_text("")
    assert parse_counts_file(f) == []


def test_counts_bad_integer_names_line_three():
    with pytest.raises(FormatError) as err:
        parse_counts_text("site\tref\talt\nrs1\t30\t10\nrs2\tten\t4\n")
    assert err.value.line == 3 and ":3:" not in str(err.value)
    assert "line 3" in str(err.value)


def test_counts_bad_shapes():
    with pytest.raises(FormatError):
        parse_counts_text("position\tref\talt\n")
    with pytest.raises(FormatError):
        parse_counts_text("site\tref\talt\nrs1\t1\n")
    with pytest.raises(FormatError):
        parse_counts_text("site\tref\talt\nrs1\t1\t-2\n")


def test_ingest_examples():
    res = ingest_read_counts([SiteRecord("a", 30, (10,)), SiteRecord("b", 0, (50,))])
    np.testing.assert_allclose(res.measurement.data, [0.25, 1.0])
    assert res.kept == [0, 1]
    res = ingest_read_counts([SiteRecord("a", 5, (3,)), SiteRecord("b", 30, (10,))], min_depth=10)
    assert res.kept == [1] and res.dropped[0][0] == 0
    np.testing.assert_allclose(res.measurement.data, [0.25])


def test_ingest_zero_depth_and_mixed_classes():
    res = ingest_read_counts([SiteRecord("z", 0, (0,)), SiteRecord("a", 1, (1,))])
    assert res.kept == [1] and "zero depth" in res.dropped[0][1]
    with pytest.raises(FormatError):
        ingest_read_counts([SiteRecord("a", 1, (1,)), SiteRecord("b", 1, (1, 1))])
    res = ingest_read_counts([SiteRecord("a", 2, (1, 1))])
    assert res.measurement.dims == ProblemDims(1, 1, 3)
    np.testing.assert_allclose(res.measurement.data, [0.25, 0.25])


def test_ingest_checked_in_counts_file():
    recs = parse_counts_file(DATA / "counts16.tsv")
    assert len(recs) == 16
    res = ingest_read_counts(recs, min_depth=10, n=3)
    assert res.kept == list(range(16))
    assert res.measurement.dims == ProblemDims(16, 3, 2)
    assert np.all((res.measurement.data >= 0) & (res.measurement.data <= 1))


def test_run_config(tmp_path):
    cfg = RunConfig(ProblemDims(3, 2, 2), 0.01, method="global", bcd=BcdConfig(n_trials=5))
    np.testing.assert_array_equal(cfg.stddevs(), [0.01] * 3)
    with pytest.raises(ValueError):
        RunConfig(ProblemDims(3, 2, 2), 0.0)
    with pytest.raises(ValueError):
        RunConfig(ProblemDims(3, 2, 2), 0.1, method="magic")
    with pytest.raises(FileNotFoundError):
        RunConfig(ProblemDims(3, 2, 2), 0.1, input_path=str(tmp_path / "missing")).check_paths()
