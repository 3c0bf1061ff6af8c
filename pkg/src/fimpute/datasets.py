"""Dataset persistence: JSON-lines and the packed ``FIMD`` binary variant."""
from __future__ import annotations

import csv
import json
import os
import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .series import SeriesError, TimeSeries
from .synthgen import Family, GenerationRecord, ObservationGrid

FIMD_MAGIC = b"FIMD"
FIMD_VERSION = 1
_FAMILY_CODES = {Family.CHEBYSHEV: 0, Family.GP_RBF: 1, Family.GP_PERIODIC: 2}
_CODE_FAMILIES = {v: k for k, v in _FAMILY_CODES.items()}


@contextmanager
def atomic_path(path):
    """Yield a temporary sibling path that is renamed onto ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def record_to_dict(rec: GenerationRecord) -> dict:
    return {
        "seed": int(rec.seed),
        "family": rec.family.value,
        "sigma": float(rec.sigma),
        "fine_grid_len": int(rec.fine_grid_len),
        "f": [float(v) for v in rec.f],
        "x": [float(v) for v in rec.x],
        "obs_idx": [int(i) for i in rec.grid.indices],
        "y": [float(v) for v in rec.y],
        "gap": list(rec.grid.gap) if rec.grid.gap is not None else None,
    }


def record_from_dict(d: dict) -> GenerationRecord:
    f = np.asarray(d["f"], dtype=np.float64)
    if f.shape[0] != d["fine_grid_len"]:
        raise ValueError("fine_grid_len does not match length of f")
    gap = tuple(int(v) for v in d["gap"]) if d.get("gap") is not None else None
    grid = ObservationGrid(np.asarray(d["obs_idx"], dtype=np.int64), "stored", float("nan"), gap)
    return GenerationRecord(f, np.asarray(d["x"], dtype=np.float64), grid,
                            np.asarray(d["y"], dtype=np.float64), float(d["sigma"]),
                            Family(d["family"]), int(d["seed"]))


def write_jsonl(records: Iterable[GenerationRecord], path) -> int:
    n = 0
    with atomic_path(path) as tmp, open(tmp, "w") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_dict(rec)) + "\n")
            n += 1
    return n


def read_jsonl(path) -> Iterator[GenerationRecord]:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield record_from_dict(json.loads(line))


def _pack_array(arr, fmt: str) -> bytes:
    arr = np.asarray(arr)
    return struct.pack("<I", arr.shape[0]) + arr.astype(fmt).tobytes()


def _unpack_array(buf: memoryview, pos: int, dtype: str):
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    width = np.dtype(dtype).itemsize
    arr = np.frombuffer(buf[pos:pos + n * width], dtype=dtype).copy()
    return arr, pos + n * width


def write_fimd(records: Iterable[GenerationRecord], path) -> int:
    """Packed variant: magic, version byte, then length-prefixed float32 arrays per record."""
    n = 0
    with atomic_path(path) as tmp, open(tmp, "wb") as fh:
        fh.write(FIMD_MAGIC + bytes([FIMD_VERSION]))
        for rec in records:
            lo, hi = rec.grid.gap if rec.grid.gap is not None else (-1, -1)
            fh.write(struct.pack("<QBfIii", rec.seed, _FAMILY_CODES[rec.family],
                                 rec.sigma, rec.fine_grid_len, lo, hi))
            fh.write(_pack_array(rec.f, "<f4"))
            fh.write(_pack_array(rec.x, "<f4"))
            fh.write(_pack_array(rec.grid.indices, "<i4"))
            fh.write(_pack_array(rec.y, "<f4"))
            n += 1
    return n


def read_fimd(path) -> Iterator[GenerationRecord]:
    buf = memoryview(Path(path).read_bytes())
    if bytes(buf[:4]) != FIMD_MAGIC:
        raise ValueError(f"{path}: not a FIMD file")
    if buf[4] != FIMD_VERSION:
        raise ValueError(f"{path}: unsupported FIMD version {buf[4]}")
    pos = 5
    head = struct.Struct("<QBfIii")
    while pos < len(buf):
        seed, fam, sigma, L, lo, hi = head.unpack_from(buf, pos)
        pos += head.size
        f, pos = _unpack_array(buf, pos, "<f4")
        x, pos = _unpack_array(buf, pos, "<f4")
        idx, pos = _unpack_array(buf, pos, "<i4")
        y, pos = _unpack_array(buf, pos, "<f4")
        gap = (lo, hi) if lo >= 0 else None
        grid = ObservationGrid(idx.astype(np.int64), "stored", float("nan"), gap)
        yield GenerationRecord(f.astype(np.float64), x.astype(np.float64), grid,
                               y.astype(np.float64), float(sigma), _CODE_FAMILIES[fam], seed)


def load_records(path) -> list[GenerationRecord]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == FIMD_MAGIC:
        return list(read_fimd(path))
    return list(read_jsonl(path))


# ---------------------------------------------------------------- external series

def _cell(s: str) -> float:
    s = s.strip()
    return float("nan") if s == "" or s.lower() == "nan" else float(s)


def ingest_series(path, fmt: str | None = None) -> list[TimeSeries]:
    """Read user series. CSV: one series, first column time; JSONL: one series per line.

    Empty or ``NaN`` cells (``null`` in JSON) become mask zeros.
    """
    path = Path(path)
    fmt = fmt or ("jsonl" if path.suffix in (".jsonl", ".json") else "csv")
    if fmt == "csv":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or len(rows[0]) < 2:
            raise SeriesError(f"{path}: need a time column and at least one value column")
        header, body = rows[0], [r for r in rows[1:] if r]
        for i, r in enumerate(body):
            if len(r) != len(header):
                raise SeriesError(f"{path}: row {i + 1} has {len(r)} cells, expected {len(header)}")
        try:
            table = np.array([[_cell(c) for c in r] for r in body], dtype=np.float64)
        except ValueError as exc:
            raise SeriesError(f"{path}: {exc}") from None
        table = table.reshape(len(body), len(header))
        return [TimeSeries(table[:, 0], table[:, 1:], names=header[1:])]
    if fmt == "jsonl":
        out = []
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                d = json.loads(line)
                vals = np.array([[np.nan if v is None else v for v in np.atleast_1d(row)]
                                 for row in d["values"]], dtype=np.float64)
                names = d.get("names") or [f"x{k + 1}" for k in range(vals.shape[1])]
                out.append(TimeSeries(np.asarray(d["times"], dtype=np.float64), vals, names=names))
        return out
    raise SeriesError(f"unknown series format '{fmt}'")


def export_series(series: list[TimeSeries], path, fmt: str = "csv") -> None:
    """Inverse of :func:`ingest_series`; masked entries are written as empty/null."""
    with atomic_path(path) as tmp, open(tmp, "w", newline="") as fh:
        if fmt == "csv":
            if len(series) != 1:
                raise SeriesError("CSV holds exactly one series")
            s = series[0]
            vals = s.values.reshape(len(s.times), -1)
            mask = s.mask.reshape(vals.shape)
            w = csv.writer(fh)
            w.writerow(["t"] + (s.names or [f"x{k + 1}" for k in range(vals.shape[1])]))
            for i, t in enumerate(s.times):
                w.writerow([repr(float(t))] + [repr(float(v)) if m else ""
                                               for v, m in zip(vals[i], mask[i])])
        elif fmt == "jsonl":
            for s in series:
                vals = s.values.reshape(len(s.times), -1)
                mask = s.mask.reshape(vals.shape)
                rows = [[float(v) if m else None for v, m in zip(r, mr)] for r, mr in zip(vals, mask)]
                fh.write(json.dumps({"times": [float(t) for t in s.times], "values": rows,
                                     "names": s.names or None}) + "\n")
        else:
            raise SeriesError(f"unknown series format '{fmt}'")
