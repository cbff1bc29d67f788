import json

import numpy as np
import pytest

from compolattice.composition import repair_compositions
from compolattice.io import DataError, config_hash, emit, ingest, read_table, write_csv, write_json
from compolattice.validation import make_synthetic_problem


def write(path, text):
    path.write_text(text)
    return path


@pytest.fixture
def toy(data_dir):
    return data_dir / "grid.csv", data_dir / "observations.csv", data_dir / "covariates.csv"


def test_toy_fixture(toy):
    lat, Y = ingest(*toy)
    assert (lat.N, lat.n_obs, Y.shape[1], lat.p) == (3, 2, 3, 2)
    np.testing.assert_array_equal(lat.cell_ids, [10, 11, 12])
    # observations are ordered by cell_id
    np.testing.assert_array_equal(lat.obs_index, [0, 2])
    np.testing.assert_array_equal(Y[0], [0.2, 0.3, 0.5])
    np.testing.assert_allclose(Y[1], [0.7 * (1 - 1e-6), 0.3 * (1 - 1e-6), 1e-6], rtol=1e-15)
    np.testing.assert_array_equal(lat.B, [[1, 0.5], [1, -1.0], [1, 2.0]])
    assert lat.covariate_names == ["intercept", "elevation"]
    np.testing.assert_array_equal(lat.G.toarray(), [[2, -1, -1], [-1, 1, 0], [-1, 0, 1]])


def test_repair_can_be_disabled(toy):
    with pytest.raises(DataError):
        ingest(*toy, repair=False)


def test_intercept_only_without_covariates(toy):
    lat, _ = ingest(toy[0], toy[1])
    assert lat.p == 1 and lat.covariate_names == ["intercept"]


def test_round_trip_is_exact(tmp_path):
    ds = make_synthetic_problem(5, 7, 11, D=4, n_covariates=2, seed=2)
    # start from repaired data, which ingest leaves untouched
    Y0, n_repaired = repair_compositions(ds.Y)
    assert n_repaired >= 1
    paths = emit(ds.lattice, Y0, tmp_path)
    lat, Y = ingest(paths["grid"], paths["observations"], paths["covariates"])
    np.testing.assert_array_equal(Y, Y0)
    np.testing.assert_array_equal(lat.B, ds.lattice.B)
    np.testing.assert_array_equal(lat.obs_index, ds.lattice.obs_index)
    np.testing.assert_array_equal(lat.G.toarray(), ds.lattice.G.toarray())
    # a second pass reproduces the files byte for byte
    again = emit(lat, Y, tmp_path / "again")
    for key in paths:
        assert paths[key].read_bytes() == again[key].read_bytes()


def test_alr_covariate_columns(tmp_path, toy):
    cov = write(tmp_path / "cov.csv", "cell_id,elev,a,b,c\n10,1,0.2,0.3,0.5\n11,2,0.1,0.1,0.8\n"
                                      "12,3,0.6,0.2,0.2\n")
    lat, _ = ingest(toy[0], toy[1], cov, alr_columns=["a", "b", "c"])
    assert lat.covariate_names == ["intercept", "elev", "alr(a/c)", "alr(b/c)"]
    np.testing.assert_allclose(lat.B[0, 2:], np.log([0.2 / 0.5, 0.3 / 0.5]))
    with pytest.raises(DataError):
        ingest(toy[0], toy[1], cov, alr_columns=["a", "zz"])


@pytest.mark.parametrize("grid, obs, cov, match", [
    ("cell_id,row,col\n1,0,0\n2,0,1\n", "cell_id,y1,y2\n3,0.5,0.5\n", None, "not in the grid"),
    ("cell_id,row,col\n1,0,0\n1,0,1\n", "cell_id,y1,y2\n1,0.5,0.5\n", None, "duplicate"),
    ("cell_id,row,col\n1,0,0\n2,0,0\n", "cell_id,y1,y2\n1,0.5,0.5\n", None, "share"),
    ("cell_id,row,col\n1,0,0\n2,0,1\n", "cell_id,y1,y2\n1,0.5,0.5\n1,0.4,0.6\n", None, "duplicate"),
    ("cell_id,row,col\n1,0,0\n2,0,1\n", "cell_id,y1,y2\n1,0.5,0.6\n", None, "sum"),
    ("cell_id,row,col\n1,0,0\n2,0,1\n", "cell_id,y1,y2\n1,0.5\n", None, "fields"),
    ("cell_id,row,col\n1,0,0\n2,0,1\n", "cell_id,y1,y2\n1,0.5,abc\n", None, "abc"),
    ("cell_id,row,col\n1,0,0\n2,0.5,1\n", "cell_id,y1,y2\n1,0.5,0.5\n", None, "integers"),
    ("id,row,col\n1,0,0\n", "cell_id,y1,y2\n1,0.5,0.5\n", None, "cell_id"),
    ("cell_id,row,col\n1,0,0\n2,0,1\n", "cell_id,y1,y2\n1,0.5,0.5\n", "cell_id,b\n1,0.1\n",
     "no covariates"),
    ("cell_id,row,col\n1,0,0\n2,0,1\n", "cell_id,y1,y2\n1,0.5,0.5\n",
     "cell_id,b\n1,0.1\n2,0.2\n3,0.3\n", "not in the grid"),
    ("cell_id,row,col\n1,0,0\n2,0,1\n", "cell_id,y1,y2\n1,0.5,0.5\n", "cell_id,b\n1,0.1\n2,nan\n",
     "finite"),
    ("", "cell_id,y1,y2\n1,0.5,0.5\n", None, "empty"),
])
def test_ingest_errors(tmp_path, grid, obs, cov, match):
    g = write(tmp_path / "g.csv", grid)
    o = write(tmp_path / "o.csv", obs)
    c = write(tmp_path / "c.csv", cov) if cov is not None else None
    with pytest.raises(DataError, match=match):
        ingest(g, o, c)


def test_missing_file(tmp_path):
    with pytest.raises(DataError, match="no such file"):
        read_table(tmp_path / "nope.csv")


def test_string_cell_ids(tmp_path):
    g = write(tmp_path / "g.csv", "cell_id,row,col\nb,0,0\na,0,1\n")
    o = write(tmp_path / "o.csv", "cell_id,y1,y2\nb,0.25,0.75\n")
    lat, Y = ingest(g, o)
    assert lat.cell_ids.tolist() == ["b", "a"]
    np.testing.assert_array_equal(lat.obs_index, [0])


def test_config_hash_is_canonical():
    assert config_hash({"a": 1, "b": [1.0, 2.0]}) == config_hash({"b": [1.0, 2.0], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
    assert len(config_hash({})) == 64


def test_writers_embed_hash_and_seed(tmp_path):
    digest = config_hash({"x": 1})
    p = write_json(tmp_path / "out.json", {"values": np.arange(3), "bad": float("nan")},
                   config_digest=digest, seed=7)
    doc = json.loads(p.read_text())
    assert doc["config_hash"] == digest and doc["seed"] == 7
    assert doc["values"] == [0, 1, 2] and doc["bad"] is None
    p = write_csv(tmp_path / "out.csv", ["a", "b"], [[1, 0.1], [2, np.float64(1 / 3)]],
                  config_digest=digest, seed=7)
    lines = p.read_text().splitlines()
    assert lines[0] == f"# config_hash={digest} seed=7"
    assert lines[2] == "1,0.1" and lines[3] == f"2,{1 / 3!r}"
