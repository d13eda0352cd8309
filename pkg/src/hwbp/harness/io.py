"""Checkpoints and metrics files.

Checkpoint layout: the 8 magic bytes ``HWBPCK01``, a little-endian uint64
header length ``n``, ``n`` bytes of UTF-8 JSON header, then every array as
little-endian float64 in C order, in header order. The header lists
``[name, shape]`` pairs, the training step and the resolved config text.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from ..errors import InputError

MAGIC = b"HWBPCK01"


def save_checkpoint(path, params: dict, step: int, config_text: str) -> None:
    header = {
        "arrays": [[name, list(np.shape(a))] for name, a in params.items()],
        "config": config_text,
        "step": int(step),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for a in params.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(params, step, config_text)``."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from None
    if raw[:8] != MAGIC or len(raw) < 16:
        raise InputError(f"{path} is not a checkpoint")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: corrupt header: {exc}") from None
    offset = 16 + n
    params = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise InputError(f"{path}: truncated at array {name}")
        params[name] = np.frombuffer(raw[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(raw):
        raise InputError(f"{path}: {len(raw) - offset} trailing bytes")
    return params, header["step"], header["config"]


@dataclass
class MetricsRow:
    step: int
    wall_ms: float
    train_loss: float
    eval_loss: Optional[float] = None
    k_used: int = 0
    vjp_block_calls: int = 0
    scan_calls: int = 0
    cos_sim: Optional[float] = None


METRICS_COLUMNS = [f.name for f in fields(MetricsRow)]


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class MetricsWriter:
    """Appends rows to a CSV with the fixed column order of ``MetricsRow``."""

    def __init__(self, path):
        self.fh = open(path, "w", newline="", encoding="utf-8")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(METRICS_COLUMNS)

    def write(self, row: MetricsRow) -> None:
        self.writer.writerow([_cell(getattr(row, c)) for c in METRICS_COLUMNS])
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def read_metrics(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append(MetricsRow(
            step=int(r["step"]),
            wall_ms=float(r["wall_ms"]),
            train_loss=float(r["train_loss"]),
            eval_loss=float(r["eval_loss"]) if r["eval_loss"] else None,
            k_used=int(r["k_used"]),
            vjp_block_calls=int(r["vjp_block_calls"]),
            scan_calls=int(r["scan_calls"]),
            cos_sim=float(r["cos_sim"]) if r["cos_sim"] else None,
        ))
    return out
