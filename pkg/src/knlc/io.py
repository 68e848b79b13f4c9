"""CSV, JSON and binary serialisation with atomic writes.

CSV files start with a ``# knlc-<kind> v<N>`` line, then optional ``# key:
value`` metadata comments, then a single header row.  dB columns carry six
significant digits; every other float is written at full precision so that
tables round-trip exactly.
"""
from __future__ import annotations

import csv
import dataclasses
import io as _io
import json
import math
import os
import tempfile

import numpy as np

from .phasespace import NoiseEllipse, SpectrumTable, WignerGrid

FORMAT_VERSION = 1
SPECTRUM_COLUMNS = (
    "omega_over_gamma",
    "S11",
    "S22",
    "S12",
    "S11_dB",
    "angle_min_deg",
    "angle_unwrapped_deg",
    "power_min",
    "power_min_dB",
    "linearity",
)
_DB_COLUMNS = {"S11_dB", "power_min_dB"}
BINARY_DTYPE = "<f8"


class FormatError(ValueError):
    pass


def atomic_write(path, data):
    """Write ``data`` to a temporary file next to ``path`` and rename it into place."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        if isinstance(data, bytes):
            fh = os.fdopen(fd, "wb")
        else:
            fh = os.fdopen(fd, "w", newline="", encoding="utf-8")
        with fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def to_jsonable(obj):
    """Recursively convert dataclasses, numpy values and complex numbers."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        d = {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        d["__type__"] = type(obj).__name__
        return d
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (complex, np.complexfloating)):
        return {"re": float(obj.real), "im": float(obj.imag)}
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def dumps_json(obj):
    return json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n"


def _fmt(name, v):
    return f"{v:.6g}" if name in _DB_COLUMNS else repr(float(v))


def _write_csv(path, kind, columns, rows, meta=None):
    buf = _io.StringIO()
    buf.write(f"# knlc-{kind} v{FORMAT_VERSION}\n")
    for k, v in (meta or {}).items():
        buf.write(f"# {k}: {json.dumps(to_jsonable(v), sort_keys=True)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(c, v) for c, v in zip(columns, row)])
    atomic_write(path, buf.getvalue())


def _read_csv(path, kind):
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != f"# knlc-{kind} v{FORMAT_VERSION}":
        raise FormatError(f"{path}: not a knlc-{kind} v{FORMAT_VERSION} file")
    meta, i = {}, 1
    while i < len(lines) and lines[i].startswith("#"):
        key, _, val = lines[i][1:].partition(":")
        meta[key.strip()] = json.loads(val)
        i += 1
    reader = csv.reader(lines[i:])
    header = next(reader)
    rows = []
    for n, row in enumerate(reader, start=i + 2):
        try:
            rows.append([float(x) for x in row])
        except ValueError:
            raise FormatError(f"{path}: line {n}: non-numeric value") from None
    return header, np.array(rows, dtype=float).reshape(-1, len(header)), meta


def spectrum_rows(table):
    deg = np.degrees
    with np.errstate(divide="ignore"):
        s11_db = 10 * np.log10(table.s11)
        pmin_db = 10 * np.log10(table.power_min)
    return np.column_stack(
        [
            table.omega_over_gamma,
            table.s11,
            table.s22,
            table.s12,
            s11_db,
            deg(table.angle_min),
            deg(table.angle_unwrapped),
            table.power_min,
            pmin_db,
            table.linearity,
        ]
    )


def _spectrum_meta(table):
    return {k: v for k, v in table.metadata.items()}


def write_spectrum_csv(table, path):
    _write_csv(path, "spectrum", SPECTRUM_COLUMNS, spectrum_rows(table), _spectrum_meta(table))


def write_spectrum_json(table, path):
    rows = spectrum_rows(table)
    doc = {
        "format": "knlc-spectrum",
        "version": FORMAT_VERSION,
        "metadata": _spectrum_meta(table),
        "columns": {c: rows[:, i] for i, c in enumerate(SPECTRUM_COLUMNS)},
        "angle_min_rad": table.angle_min,
    }
    atomic_write(path, dumps_json(doc))


def _table_from_columns(cols, meta, angle_rad=None):
    angle = np.radians(cols["angle_min_deg"]) if angle_rad is None else np.asarray(angle_rad, dtype=float)
    return SpectrumTable(
        np.asarray(cols["omega_over_gamma"], dtype=float),
        np.asarray(cols["S11"], dtype=float),
        np.asarray(cols["S22"], dtype=float),
        np.asarray(cols["S12"], dtype=float),
        angle,
        np.asarray(cols["power_min"], dtype=float),
        np.asarray(cols["linearity"], dtype=float),
        metadata=meta,
    )


def read_spectrum_csv(path):
    header, data, meta = _read_csv(path, "spectrum")
    if tuple(header) != SPECTRUM_COLUMNS:
        raise FormatError(f"{path}: unexpected columns {header}")
    return _table_from_columns({c: data[:, i] for i, c in enumerate(header)}, meta)


def read_spectrum_json(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "knlc-spectrum" or doc.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: not a knlc-spectrum v{FORMAT_VERSION} document")
    return _table_from_columns(doc["columns"], doc["metadata"], doc["angle_min_rad"])


def _ellipse_dict(e):
    return {"var_min": e.var_min, "var_max": e.var_max, "angle_min": e.angle_min}


def _grid_meta(grid, extra=None):
    meta = {
        "format": "knlc-wigner",
        "version": FORMAT_VERSION,
        "shape": list(grid.values.shape),
        "x1": [float(grid.x1[0]), float(grid.x1[-1])],
        "x2": [float(grid.x2[0]), float(grid.x2[-1])],
        "ellipse": _ellipse_dict(grid.ellipse),
        "peak": grid.peak,
    }
    meta.update(extra or {})
    return meta


def _grid_from_meta(meta, values):
    shape = tuple(meta["shape"])
    x1 = np.linspace(meta["x1"][0], meta["x1"][1], shape[0])
    x2 = np.linspace(meta["x2"][0], meta["x2"][1], shape[1])
    e = NoiseEllipse(**meta["ellipse"])
    return WignerGrid(x1, x2, np.asarray(values, dtype=float).reshape(shape), e, float(meta["peak"]))


def write_wigner_csv(grid, path, extra=None):
    """Long format: one (x1, x2, W) row per grid node, x2 varying fastest."""
    g1, g2 = np.meshgrid(grid.x1, grid.x2, indexing="ij")
    rows = np.column_stack([g1.ravel(), g2.ravel(), grid.values.ravel()])
    meta = _grid_meta(grid, extra)
    meta.pop("format")
    meta.pop("version")
    _write_csv(path, "wigner", ("x1", "x2", "W"), rows, meta)


def read_wigner_csv(path):
    header, data, meta = _read_csv(path, "wigner")
    if tuple(header) != ("x1", "x2", "W"):
        raise FormatError(f"{path}: unexpected columns {header}")
    return _grid_from_meta(meta, data[:, 2])


def write_wigner_json(grid, path, extra=None):
    doc = _grid_meta(grid, extra)
    doc["values"] = grid.values
    atomic_write(path, dumps_json(doc))


def read_wigner_json(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "knlc-wigner" or doc.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: not a knlc-wigner v{FORMAT_VERSION} document")
    return _grid_from_meta(doc, doc["values"])


def write_wigner_binary(grid, path, extra=None):
    """Row-major little-endian doubles in ``path`` plus ``path + '.json'`` metadata."""
    meta = _grid_meta(grid, extra)
    meta.update({"dtype": BINARY_DTYPE, "order": "row-major (x1 index slowest)"})
    atomic_write(path, np.ascontiguousarray(grid.values, dtype=BINARY_DTYPE).tobytes())
    atomic_write(os.fspath(path) + ".json", dumps_json(meta))


def read_wigner_binary(path):
    with open(os.fspath(path) + ".json") as fh:
        meta = json.load(fh)
    if meta.get("format") != "knlc-wigner" or meta.get("dtype") != BINARY_DTYPE:
        raise FormatError(f"{path}: unexpected sidecar")
    values = np.fromfile(path, dtype=BINARY_DTYPE)
    if values.size != int(np.prod(meta["shape"])):
        raise FormatError(f"{path}: size does not match the sidecar shape")
    return _grid_from_meta(meta, values)


def write_rows_csv(path, kind, columns, rows, meta=None):
    _write_csv(path, kind, columns, rows, meta)


def read_rows_csv(path, kind):
    return _read_csv(path, kind)
