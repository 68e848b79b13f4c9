import json
import os

import numpy as np
import pytest

from knlc import io
from knlc.phasespace import NoiseEllipse, SpectrumTable, wigner_grid


def _table():
    n = 5
    rng = np.random.default_rng(0)
    return SpectrumTable(
        np.geomspace(0.01, 10, n),
        rng.uniform(0.01, 10, n),
        rng.uniform(0.01, 10, n),
        rng.uniform(-1, 1, n),
        np.array([0.1, 1.5, -1.5, 0.2, 1.57]),
        rng.uniform(0.01, 1, n),
        rng.uniform(0, 1e-5, n),
        metadata={"gamma": 1.23e7, "note": "x"},
    )


def _assert_tables_equal(a, b):
    for name in ("omega_over_gamma", "s11", "s22", "s12", "power_min", "linearity"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name


def test_spectrum_csv_roundtrip(tmp_path):
    t = _table()
    p = tmp_path / "s.csv"
    io.write_spectrum_csv(t, p)
    back = io.read_spectrum_csv(p)
    _assert_tables_equal(t, back)
    assert np.allclose(back.angle_min, t.angle_min, rtol=1e-14)
    assert back.metadata["gamma"] == 1.23e7
    text = p.read_text().splitlines()
    assert text[0] == "# knlc-spectrum v1"
    header = [line for line in text if not line.startswith("#")][0]
    assert header.split(",") == list(io.SPECTRUM_COLUMNS)


def test_db_columns_six_significant_digits(tmp_path):
    p = tmp_path / "s.csv"
    io.write_spectrum_csv(_table(), p)
    rows = [line.split(",") for line in p.read_text().splitlines() if not line.startswith("#")][1:]
    i = io.SPECTRUM_COLUMNS.index("S11_dB")
    for r in rows:
        digits = r[i].lstrip("-").replace(".", "").split("e")[0].lstrip("0")
        assert len(digits) <= 6


def test_spectrum_json_roundtrip(tmp_path):
    t = _table()
    p = tmp_path / "s.json"
    io.write_spectrum_json(t, p)
    back = io.read_spectrum_json(p)
    _assert_tables_equal(t, back)
    assert np.array_equal(back.angle_min, t.angle_min)
    assert np.array_equal(back.angle_unwrapped, t.angle_unwrapped)


def test_wrong_version(tmp_path):
    p = tmp_path / "s.csv"
    io.write_spectrum_csv(_table(), p)
    p.write_text(p.read_text().replace("v1", "v9", 1))
    with pytest.raises(io.FormatError):
        io.read_spectrum_csv(p)
    q = tmp_path / "s.json"
    q.write_text(json.dumps({"format": "knlc-spectrum", "version": 2}))
    with pytest.raises(io.FormatError):
        io.read_spectrum_json(q)


def test_non_numeric_row(tmp_path):
    p = tmp_path / "r.csv"
    io.write_rows_csv(p, "thing", ("a", "b"), [(1.0, 2.0)])
    p.write_text(p.read_text() + "x,3\n")
    with pytest.raises(io.FormatError, match="line"):
        io.read_rows_csv(p, "thing")


@pytest.fixture
def grid():
    return wigner_grid(NoiseEllipse(0.2, 5.0, 0.4), resolution=(7, 9))


def _assert_grids_equal(a, b):
    assert np.array_equal(a.values, b.values)
    assert np.allclose(a.x1, b.x1, rtol=1e-15)
    assert np.allclose(a.x2, b.x2, rtol=1e-15)
    assert a.ellipse == b.ellipse
    assert a.peak == b.peak


@pytest.mark.parametrize("kind", ["csv", "json", "binary"])
def test_wigner_roundtrip(tmp_path, grid, kind):
    p = tmp_path / f"w.{kind}"
    getattr(io, f"write_wigner_{kind}")(grid, p, {"power_fraction": 0.5})
    _assert_grids_equal(grid, getattr(io, f"read_wigner_{kind}")(p))


def test_binary_layout(tmp_path, grid):
    p = tmp_path / "w.bin"
    io.write_wigner_binary(grid, p)
    raw = np.fromfile(p, dtype="<f8").reshape(7, 9)
    assert np.array_equal(raw, grid.values)
    meta = json.loads((tmp_path / "w.bin.json").read_text())
    assert meta["shape"] == [7, 9]
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(io.FormatError):
        io.read_wigner_binary(p)


def test_atomic_write_leaves_no_temporaries(tmp_path):
    p = tmp_path / "sub" / "f.txt"
    io.atomic_write(p, "hello")
    io.atomic_write(p, b"bytes")
    assert p.read_bytes() == b"bytes"
    assert os.listdir(tmp_path / "sub") == ["f.txt"]


def test_atomic_write_failure_keeps_old_file(tmp_path):
    p = tmp_path / "f.txt"
    io.atomic_write(p, "old")
    with pytest.raises(TypeError):
        io.atomic_write(p, 12345)
    assert p.read_text() == "old"
    assert os.listdir(tmp_path) == ["f.txt"]


def test_jsonable():
    doc = io.to_jsonable({"c": 1 + 2j, "a": np.arange(2), "f": np.float64("inf"), "i": np.int64(3)})
    assert doc == {"c": {"re": 1.0, "im": 2.0}, "a": [0, 1], "f": "inf", "i": 3}
    assert json.loads(io.dumps_json(NoiseEllipse(1, 2, 0)))["__type__"] == "NoiseEllipse"
