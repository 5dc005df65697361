"""Headered CSV readers and writers.

Formats (one row per year, years contiguous and increasing):

* scenario file: ``year, tas, rndt``; a blank cell marks a missing value;
* observation file: ``year, tas, sd``;
* forcing file: ``year, fco2, fvolc``.

Every parse error names the file and line.
"""
import csv
import json
import math
import os

import numpy as np

from ..exceptions import ValidationError

SCENARIO_COLUMNS = ("year", "tas", "rndt")
OBSERVATION_COLUMNS = ("year", "tas", "sd")
FORCING_COLUMNS = ("year", "fco2", "fvolc")


def fmt(x):
    """Shortest round-tripping text for a float; blank for NaN."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


def _read(path, columns, allow_blank):
    if not os.path.isfile(path):
        raise ValidationError(f"{path}: file not found")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}:1: empty file") from None
        header = [h.strip().lower() for h in header]
        if tuple(header) != columns:
            raise ValidationError(f"{path}:1: expected header {','.join(columns)}, "
                                  f"got {','.join(header)}")
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(columns):
                raise ValidationError(f"{path}:{line}: expected {len(columns)} fields, "
                                      f"got {len(row)}")
            vals = []
            for name, cell in zip(columns, row):
                cell = cell.strip()
                if cell == "":
                    if name == "year" or name not in allow_blank:
                        raise ValidationError(f"{path}:{line}: missing value for {name}")
                    vals.append(np.nan)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise ValidationError(f"{path}:{line}: {name} is not a number: {cell!r}") from None
                if not math.isfinite(v):
                    raise ValidationError(f"{path}:{line}: {name} must be finite")
                vals.append(v)
            rows.append((line, vals))
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    years = np.array([r[1][0] for r in rows])
    if np.any(years != np.round(years)):
        line = rows[int(np.flatnonzero(years != np.round(years))[0])][0]
        raise ValidationError(f"{path}:{line}: year must be an integer")
    steps = np.diff(years)
    if np.any(steps != 1):
        line = rows[int(np.flatnonzero(steps != 1)[0]) + 1][0]
        raise ValidationError(f"{path}:{line}: years must be contiguous and increasing")
    data = np.array([r[1] for r in rows])
    return years.astype(int), data[:, 1:]


def read_scenario_csv(path):
    """Returns ``(years, values)`` with ``values`` ``(T, 2)`` = (T1, N), NaN
    where blank."""
    return _read(path, SCENARIO_COLUMNS, allow_blank=("tas", "rndt"))


def read_observation_csv(path):
    """Returns ``(years, tas, sd)``; ``tas`` may be blank (missing) but a
    present ``tas`` needs a non-negative ``sd``."""
    years, data = _read(path, OBSERVATION_COLUMNS, allow_blank=("tas", "sd"))
    tas, sd = data[:, 0], data[:, 1]
    bad = ~np.isnan(tas) & (np.isnan(sd) | (sd < 0))
    if bad.any():
        raise ValidationError(f"{path}:{int(np.flatnonzero(bad)[0]) + 2}: "
                              "observed tas needs a non-negative sd")
    return years, tas, np.where(np.isnan(sd), 0.0, sd)


def read_forcing_csv(path):
    """Returns ``(years, fco2, fvolc)``."""
    years, data = _read(path, FORCING_COLUMNS, allow_blank=())
    return years, data[:, 0], data[:, 1]


def write_csv(path, header, rows):
    """Write rows with round-tripping float formatting (byte-stable)."""
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if not isinstance(v, str) else v for v in row])


def write_scenario_csv(path, years, values):
    values = np.asarray(values, dtype=np.float64)
    write_csv(path, SCENARIO_COLUMNS, [(int(y), v[0], v[1]) for y, v in zip(years, values)])


def write_observation_csv(path, years, tas, sd):
    write_csv(path, OBSERVATION_COLUMNS, [(int(y), t, s) for y, t, s in zip(years, tas, sd)])


def write_forcing_csv(path, years, fco2, fvolc):
    write_csv(path, FORCING_COLUMNS, [(int(y), c, v) for y, c, v in zip(years, fco2, fvolc)])


def write_json(path, obj):
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if math.isnan(v) else (str(v) if math.isinf(v) else v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj
