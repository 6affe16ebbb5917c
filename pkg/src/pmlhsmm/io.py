"""Reading observation CSVs and writing run artifacts."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
import warnings

import numpy as np

from .dwell import DwellTimeSpec, dwell_cdf, dwell_pmf
from .emission import ChannelValueError, params_from_dict, validate_channel
from .expand import HsmmModel
from .inference import Dataset

logger = logging.getLogger(__name__)

MISSING = ("NA", "")


class DataError(ValueError):
    """Malformed input data; messages carry file line numbers where possible."""


def fmt(x) -> str:
    """Deterministic text form of a number (10 significant digits, ``NA`` for NaN)."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "NA"
    if math.isinf(x):
        return "Inf" if x > 0 else "-Inf"
    s = f"{x:.10g}"
    return "0" if s == "-0" else s


def _round(obj):
    """Recursively round floats for JSON output, matching :func:`fmt`."""
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_round(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return None
        return float(f"{x:.10g}")
    return obj


def atomic_write(path, text: str) -> None:
    """Write ``text`` to a temporary file beside ``path`` and rename it into place."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    atomic_write(path, csv_text(header, rows))


def write_json(path, obj) -> None:
    atomic_write(path, json.dumps(_round(obj), indent=2, sort_keys=True) + "\n")


def _parse(tok, line, col):
    tok = tok.strip()
    if tok in MISSING:
        return math.nan
    try:
        v = float(tok)
    except ValueError:
        raise DataError(f"line {line}: column {col!r}: cannot parse {tok!r}") from None
    if math.isnan(v):
        return math.nan
    return v


def read_dataset(path, channels, families=None, assume_regular=False, time_column="t", interval=0.0) -> Dataset:
    """Read a header CSV with one row per time step.

    ``NA`` or an empty field marks a missing value. Columns not named in
    ``channels`` are ignored. With ``assume_regular`` the ``time_column``
    is used to insert all-missing rows for skipped time steps.
    """
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if not rows or not any(cell.strip() for cell in rows[0]):
        raise DataError(f"{path}: empty file, expected a header row")
    header = [h.strip() for h in rows[0]]
    missing_cols = [c for c in channels if c not in header]
    if missing_cols:
        raise DataError(f"line 1: missing column(s) {missing_cols}; header has {header}")
    need = list(channels)
    if assume_regular:
        if time_column not in header:
            raise DataError(f"line 1: --assume-regular needs a {time_column!r} column")
        need.append(time_column)
    idx = [header.index(c) for c in need]
    lines, data = [], []
    for n, row in enumerate(rows[1:], start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise DataError(f"line {n}: expected {len(header)} fields, found {len(row)}")
        data.append([_parse(row[k], n, header[k]) for k in idx])
        lines.append(n)
    if not data:
        raise DataError(f"{path}: no data rows")
    values = np.array(data, dtype=float)
    lines = np.array(lines)

    if assume_regular:
        t = values[:, -1]
        values = values[:, :-1]
        if np.any(np.isnan(t)):
            raise DataError(f"line {lines[np.flatnonzero(np.isnan(t))[0]]}: missing time stamp")
        gaps = np.diff(t)
        if np.any(gaps <= 0):
            raise DataError(f"line {lines[1:][np.flatnonzero(gaps <= 0)[0]]}: time stamps must increase")
        step = interval if interval > 0 else (float(gaps.min()) if gaps.size else 1.0)
        pos = np.rint((t - t[0]) / step).astype(np.int64)
        off = np.abs((t - t[0]) / step - pos) > 1e-6
        if np.any(off):
            raise DataError(f"line {lines[np.flatnonzero(off)[0]]}: time {t[np.flatnonzero(off)[0]]} is off the {step} grid")
        full = np.full((pos[-1] + 1, len(channels)), np.nan)
        full[pos] = values
        full_lines = np.zeros(pos[-1] + 1, dtype=np.int64)
        full_lines[pos] = lines
        if len(full) > len(values):
            logger.info("inserted %d missing rows for skipped time steps", len(full) - len(values))
        values, lines = full, full_lines

    if families is not None:
        for c, (name, fam) in enumerate(zip(channels, families)):
            try:
                values[:, c] = validate_channel(fam, values[:, c])
            except ChannelValueError as exc:
                v = values[exc.index, c]
                raise DataError(f"line {lines[exc.index]}: column {name!r}: value {v!r} is invalid for a {fam} channel") from None
            if np.all(np.isnan(values[:, c])):
                warnings.warn(f"column {name!r} is entirely missing; it contributes a factor of 1", stacklevel=2)
    return Dataset(tuple(channels), values)


def write_dataset(path, data: Dataset, time=None) -> None:
    T = data.T
    t = np.arange(1, T + 1) if time is None else time
    write_csv(path, ["t", *data.channels], ([int(t[k]), *data.values[k]] for k in range(T)))


# ---- parameter files -------------------------------------------------------------

def model_to_dict(model: HsmmModel, channels) -> dict:
    states = []
    for i in range(model.n_states):
        d = model.dwell[i]
        states.append({
            "dwell": {"pi": d.pi.tolist(), "tail_mass": d.tail_mass, "tail_ratio": d.tail_ratio, "mean": d.mean()},
            "emissions": {ch: model.emissions[i][c].to_dict() for c, ch in enumerate(channels)},
        })
    return {
        "n_states": model.n_states,
        "channels": list(channels),
        "omega": model.omega.tolist(),
        "init": model.init,
        "init_weights": None if model.init_weights is None else np.asarray(model.init_weights).tolist(),
        "states": states,
    }


def model_from_dict(d: dict) -> HsmmModel:
    channels = d["channels"]
    dwell = [DwellTimeSpec(tuple(s["dwell"]["pi"])) for s in d["states"]]
    emissions = [tuple(params_from_dict(s["emissions"][ch]) for ch in channels) for s in d["states"]]
    return HsmmModel(dwell, np.array(d["omega"], dtype=float), emissions, init=d.get("init", "stationary"), init_weights=d.get("init_weights"))


def load_params(path):
    """Model and channel names from a parameter file written by ``fit``."""
    try:
        with open(path) as fh:
            d = json.load(fh)
        d = d.get("model", d)
        return model_from_dict(d), tuple(d["channels"])
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"cannot load parameters from {path}: {exc}") from None


def dwell_table(model: HsmmModel, horizon: int):
    rows = []
    for i, spec in enumerate(model.dwell):
        H = max(horizon, spec.start_length)
        r = np.arange(1, H + 1)
        pmf = dwell_pmf(spec, r)
        cdf = dwell_cdf(spec, r)
        for k in range(H):
            rows.append([i + 1, int(r[k]), "start" if r[k] <= spec.start_length else "tail", pmf[k], cdf[k]])
    return ["state", "r", "segment", "pmf", "cdf"], rows
