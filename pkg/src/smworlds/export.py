"""On-disk formats for fields and tables, plus content hashes."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .density import MassDensityField

SMF_MAGIC = b"SMF1"
SMF_VERSION = 1


def write_smf(path: str | Path, m: MassDensityField) -> None:
    """Magic, then little-endian u32 version, u32 rank, u32 dims[rank],
    f64 cell volume, f64 time and the values in row-major order."""
    v = np.ascontiguousarray(m.values, dtype="<f8")
    head = SMF_MAGIC + struct.pack(f"<II{v.ndim}I", SMF_VERSION, v.ndim, *v.shape)
    head += struct.pack("<dd", m.cell_volume, m.time)
    Path(path).write_bytes(head + v.tobytes(order="C"))


def read_smf(path: str | Path) -> tuple[np.ndarray, float, float]:
    """Returns (values, cell_volume, time)."""
    raw = Path(path).read_bytes()
    if raw[:4] != SMF_MAGIC:
        raise ValueError(f"{path}: not an SMF1 file")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != SMF_VERSION:
        raise ValueError(f"{path}: unsupported SMF version {version}")
    off = 12
    dims = struct.unpack_from(f"<{rank}I", raw, off)
    off += 4 * rank
    cell_volume, time = struct.unpack_from("<dd", raw, off)
    off += 16
    count = int(np.prod(dims)) if rank else 1
    if len(raw) != off + 8 * count:
        raise ValueError(f"{path}: payload size does not match dims {dims}")
    values = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(dims)
    return values.astype(float), cell_volume, time


def format_cell(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return "" if x is None else str(x)


def write_csv(path: str | Path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    cols = list(columns) if columns is not None else list(rows[0]) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([format_cell(r.get(c)) for c in cols])


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def jsonable(x):
    """Plain-Python copy of ``x``; non-finite floats become strings."""
    if isinstance(x, dict):
        return {str(k): jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return jsonable(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        f = float(x)
        return f if math.isfinite(f) else str(f)
    if x is None or isinstance(x, str):
        return x
    return str(x)


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(root: str | Path, files: Iterable[str]) -> dict[str, str]:
    root = Path(root)
    return {f: sha256_file(root / f) for f in sorted(files)}
