"""Versioned binary weight file plus JSON sidecar.

Layout (little-endian): magic "TSDF", u32 version, u32 L, u32 d,
u32 log2_table, then per level (u32 N, u32 table_rows, u8 dense), then the
raw float32 feature tables in level order, then u32 layer count and per
layer (u32 out, u32 in, raw float64 weights, raw float64 bias).

Feature tables are stored in 32-bit floats; loading re-expands them to
float64 so downstream evaluation and extraction share the exact same
parameter values.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .encoder import EncoderParams
from .net import MlpParams

MAGIC = b"TSDF"
VERSION = 1


class WeightFormatError(ValueError):
    pass


def save_weights(path, enc: EncoderParams, mlp: MlpParams, sidecar: dict | None = None):
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", VERSION, enc.levels, enc.d))
        f.write(struct.pack("<I", enc.log2_table))
        for n, table, dense in zip(enc.resolutions, enc.tables, enc.dense):
            f.write(struct.pack("<IIB", n, len(table), 1 if dense else 0))
        for table in enc.tables:
            f.write(np.ascontiguousarray(table, dtype="<f4").tobytes())
        f.write(struct.pack("<I", len(mlp.weights)))
        for w, b in zip(mlp.weights, mlp.biases):
            f.write(struct.pack("<II", w.shape[0], w.shape[1]))
            f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    meta = {
        "format": "TSDF",
        "version": VERSION,
        "levels": enc.levels,
        "feature_dim": enc.d,
        "log2_table": enc.log2_table,
        "resolutions": list(enc.resolutions),
        "table_rows": [len(t) for t in enc.tables],
        "dense": [bool(d) for d in enc.dense],
        "mlp_shapes": [[w.shape[0], w.shape[1]] for w in mlp.weights],
    }
    if sidecar:
        meta.update(sidecar)
    with open(path.with_suffix(path.suffix + ".json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    return meta


def load_weights(path):
    """Returns (EncoderParams, MlpParams, sidecar dict or None)."""
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise WeightFormatError(f"{path}: bad magic, not a weight file")
        version, levels, d = struct.unpack("<III", f.read(12))
        if version != VERSION:
            raise WeightFormatError(f"{path}: unsupported version {version}")
        (log2_table,) = struct.unpack("<I", f.read(4))
        res, rows, dense = [], [], []
        for _ in range(levels):
            n, t_rows, dn = struct.unpack("<IIB", f.read(9))
            res.append(n)
            rows.append(t_rows)
            dense.append(bool(dn))
        tables = []
        for t_rows in rows:
            raw = f.read(t_rows * d * 4)
            tables.append(np.frombuffer(raw, dtype="<f4").reshape(t_rows, d).astype(np.float64))
        (n_layers,) = struct.unpack("<I", f.read(4))
        weights, biases = [], []
        for _ in range(n_layers):
            out_w, in_w = struct.unpack("<II", f.read(8))
            weights.append(np.frombuffer(f.read(out_w * in_w * 8), dtype="<f8")
                           .reshape(out_w, in_w).copy())
            biases.append(np.frombuffer(f.read(out_w * 8), dtype="<f8").copy())
    enc = EncoderParams(tables, dense, tuple(res), d, log2_table)
    mlp = MlpParams(weights, biases)
    sidecar = None
    side_path = path.with_suffix(path.suffix + ".json")
    if side_path.exists():
        with open(side_path) as f:
            sidecar = json.load(f)
    return enc, mlp, sidecar
