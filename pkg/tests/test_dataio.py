import json

import numpy as np
import pytest

from qlmm import dataio
from qlmm.dataio import LongFormatSchema, load_csv, read_inference_csv, write_csv, write_report
from qlmm.debias import InferenceRecord
from qlmm.simulate import McOptions, Scenario, run_mc
from tests.conftest import make_dataset

SCHEMA = LongFormatSchema(
    cluster_col="cage",
    response_col="bmi",
    fixed_cols=("x1", "x2"),
    random_cols=("z1",),
)


def _write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def test_schema_disjoint_names():
    with pytest.raises(ValueError):
        LongFormatSchema(cluster_col="a", response_col="a", fixed_cols=("x",))


def test_load_two_clusters(tmp_path):
    f = tmp_path / "d.csv"
    _write_lines(f, [
        "cage,bmi,x1,x2,z1",
        "a,1.0,0.1,0.2,1",
        "a,2.0,0.3,0.4,1",
        "a,3.0,0.5,0.6,1",
        "b,4.0,0.7,0.8,1",
        "b,5.0,0.9,1.0,1",
        "b,6.0,1.1,1.2,1",
    ])
    data = load_csv(f, SCHEMA)
    assert data.n == 2 and data.m == [3, 3] and data.p == 2 and data.q == 1
    np.testing.assert_allclose(data[0].y, [1, 2, 3])


def test_load_interleaved_clusters_regrouped(tmp_path):
    f = tmp_path / "d.csv"
    _write_lines(f, [
        "cage,bmi,x1,x2,z1",
        "a,1.0,0,0,1",
        "b,10.0,0,0,1",
        "a,2.0,0,0,1",
        "b,20.0,0,0,1",
    ])
    data = load_csv(f, SCHEMA)
    assert data.n == 2
    np.testing.assert_allclose(data[0].y, [1.0, 2.0])
    np.testing.assert_allclose(data[1].y, [10.0, 20.0])


def test_load_missing_column(tmp_path):
    f = tmp_path / "d.csv"
    _write_lines(f, ["cage,x1,x2,z1", "a,0,0,1"])
    with pytest.raises(ValueError, match="bmi"):
        load_csv(f, SCHEMA)


def test_load_non_numeric_cell_reports_line(tmp_path):
    f = tmp_path / "d.csv"
    _write_lines(f, [
        "cage,bmi,x1,x2,z1",
        "a,1.0,0,0,1",
        "a,oops,0,0,1",
    ])
    with pytest.raises(ValueError, match="line 3"):
        load_csv(f, SCHEMA)


def test_load_empty_file(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("", encoding="utf-8")
    with pytest.raises(ValueError, match="empty"):
        load_csv(f, SCHEMA)
    f.write_text("cage,bmi,x1,x2,z1\n", encoding="utf-8")
    with pytest.raises(ValueError, match="no data rows"):
        load_csv(f, SCHEMA)


def test_round_trip_identity(tmp_path, rng):
    data = make_dataset(rng, n=3, m=4, p=2, q=1)
    schema = SCHEMA
    f = tmp_path / "out.csv"
    write_csv(data, f, schema)
    back = load_csv(f, schema)
    np.testing.assert_array_equal(back.stacked_X(), data.stacked_X())
    np.testing.assert_array_equal(back.stacked_y(), data.stacked_y())
    np.testing.assert_array_equal(
        np.vstack([c.Z for c in back]), np.vstack([c.Z for c in data])
    )


def test_wide_matrix_input(tmp_path, rng):
    n_rows = 6
    X = rng.standard_normal((n_rows, 4))
    mfile = tmp_path / "X.npy"
    np.save(mfile, X)
    f = tmp_path / "d.csv"
    lines = ["cage,bmi,z1"]
    for i in range(n_rows):
        lines.append(f"{'ab'[i % 2]},{float(i)},1")
    _write_lines(f, lines)
    schema = LongFormatSchema(cluster_col="cage", response_col="bmi",
                              fixed_cols=(), random_cols=("z1",))
    data = load_csv(f, schema, x_matrix_path=mfile)
    assert data.p == 4 and data.n == 2
    # interleaved rows keep their matrix alignment
    np.testing.assert_allclose(data[0].X, X[[0, 2, 4]])
    np.testing.assert_allclose(data[1].X, X[[1, 3, 5]])


def _records():
    return [
        InferenceRecord(j=2, beta_db=0.123456789012345, v_hat=0.004,
                        ci_lo=-0.1, ci_hi=0.35, z=1.95, p_value=0.051,
                        alpha=0.05, lam_j=0.1),
        InferenceRecord(j=9, beta_db=-1e-17, v_hat=0.002, ci_lo=-0.09,
                        ci_hi=0.09, z=-0.001, p_value=0.999, alpha=0.05,
                        lam_j=0.1),
    ]


def test_inference_csv_round_trip(tmp_path):
    f = tmp_path / "rec.csv"
    write_report(_records(), f, "csv")
    header = f.read_text().splitlines()[0]
    assert header == "j,beta_db,V_hat,ci_lo,ci_hi,z,p_value"
    back = read_inference_csv(f)
    for orig, new in zip(_records(), back):
        assert new.j == orig.j
        assert new.beta_db == orig.beta_db  # lossless float round trip
        assert new.v_hat == orig.v_hat and new.z == orig.z


def test_empty_records_header_only(tmp_path):
    f = tmp_path / "rec.csv"
    write_report([], f, "csv")
    lines = f.read_text().splitlines()
    assert lines == ["j,beta_db,V_hat,ci_lo,ci_hi,z,p_value"]


def test_json_report_structure(tmp_path):
    f = tmp_path / "rec.json"
    write_report(_records(), f, "json", provenance={"a": 2.0, "seed": 7})
    doc = json.loads(f.read_text())
    assert doc["provenance"]["a"] == 2.0
    assert doc["report"][0]["j"] == 2


def test_mcreport_serialization_excludes_timing(tmp_path):
    sc = Scenario(n=4, m=4, p=10, q=1, seed=3)
    rep = run_mc(sc, 2, McOptions(a=1.0, n_jobs=1))
    rep.wall_time_s = 123.456
    f_json = tmp_path / "mc.json"
    f_csv = tmp_path / "mc.csv"
    write_report(rep, f_json, "json")
    write_report(rep, f_csv, "csv")
    assert "wall_time" not in f_json.read_text()
    assert "wall_time" not in f_csv.read_text()
    doc = json.loads(f_json.read_text())
    assert doc["report"]["reps"] == 2


def test_write_report_rejects_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        write_report(_records(), tmp_path / "x.bin", "parquet")
