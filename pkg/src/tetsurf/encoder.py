"""Hashed multi-resolution feature tables with barycentric interpolation.

Per level, a query point selects the containing tetra, hashes its four
corner lattice points into the level's feature table, and blends the rows
with barycentric weights. Levelwise results are concatenated, so within one
polyhedral cell the encoding is an exact affine function of the input.

Levels whose full lattice fits in the configured table size store features
densely (injective indexing); finer levels fall back to spatial hashing.
All coordinates here are the grid's normalized unit-cube coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tetgrid import C_UNIT_INV, CORNERS, GridConfig, bary_from_frac, locate_batch

HASH_PRIMES = (np.uint64(1), np.uint64(2654435761), np.uint64(805459861))


class EncoderError(ValueError):
    pass


@dataclass
class EncoderParams:
    """Per-level feature tables plus the hashing configuration."""

    tables: list[np.ndarray]          # level -> (T_l, d) float64
    dense: list[bool]
    resolutions: tuple[int, ...]
    d: int
    log2_table: int

    @property
    def levels(self) -> int:
        return len(self.tables)

    @property
    def feature_dim(self) -> int:
        return self.d * self.levels

    def copy(self) -> "EncoderParams":
        return EncoderParams([t.copy() for t in self.tables], list(self.dense),
                             self.resolutions, self.d, self.log2_table)


def init_encoder(grid: GridConfig, d: int = 2, log2_table: int = 19,
                 seed: int = 0, scale: float = 1e-4) -> EncoderParams:
    """Feature tables initialized uniformly in [-scale, scale]."""
    rng = np.random.default_rng(seed)
    cap = 1 << log2_table
    tables, dense = [], []
    for n in grid.resolutions:
        full = (n + 1) ** 3
        if full <= cap:
            size, is_dense = full, True
        else:
            size, is_dense = cap, False
        tables.append(rng.uniform(-scale, scale, size=(size, d)))
        dense.append(is_dense)
    return EncoderParams(tables, dense, grid.resolutions, d, log2_table)


def hash_vertex_batch(v: np.ndarray, level: int, params: EncoderParams,
                      validate: bool = True) -> np.ndarray:
    """Table rows for integer lattice points v (..., 3) at one level."""
    v = np.asarray(v, dtype=np.int64)
    n = params.resolutions[level]
    if validate and (np.any(v < 0) or np.any(v > n)):
        raise EncoderError(f"lattice point out of range for level {level} (N={n})")
    if params.dense[level]:
        side = n + 1
        return v[..., 0] + side * (v[..., 1] + side * v[..., 2])
    u = v.astype(np.uint64)
    h = (u[..., 0] * HASH_PRIMES[0]) ^ (u[..., 1] * HASH_PRIMES[1]) ^ (u[..., 2] * HASH_PRIMES[2])
    return (h & np.uint64(len(params.tables[level]) - 1)).astype(np.int64)


def hash_vertex(v, level: int, params: EncoderParams) -> int:
    return int(hash_vertex_batch(np.asarray(v), level, params))


def interpolation_data(u: np.ndarray, params: EncoderParams):
    """Per level: (table rows (B,4), weights (B,4), tetra index (B,)).

    The geometric core shared by encoding, gradients, and training.
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    out = []
    for level, n in enumerate(params.resolutions):
        a, t, f = locate_batch(u, n)
        corners = a[:, None, :] + CORNERS[t]            # (B,4,3)
        idx = hash_vertex_batch(corners, level, params, validate=False)
        w = bary_from_frac(f, t)                         # (B,4)
        out.append((idx, w, t))
    return out


def encode(u: np.ndarray, params: EncoderParams, grid: GridConfig | None = None) -> np.ndarray:
    """Concatenated barycentric feature interpolation, (B, d*L) or (d*L,)."""
    single = np.asarray(u).ndim == 1
    u2 = np.atleast_2d(np.asarray(u, dtype=float))
    z = np.empty((len(u2), params.feature_dim))
    d = params.d
    for level, (idx, w, _) in enumerate(interpolation_data(u2, params)):
        gathered = params.tables[level][idx]             # (B,4,d)
        np.einsum("bi,bid->bd", w, gathered, out=z[:, level * d:(level + 1) * d])
    return z[0] if single else z


def cell_affine(indicator, params: EncoderParams) -> tuple[np.ndarray, np.ndarray]:
    """Exact affine form (A, b) of the encoder on one polyhedral cell.

    Per level, A_l = G C^-1 with G the feature differences at the tetra's
    corners, and b_l = g(v0) - A_l v0; stacked across levels so that
    encode(u) == A @ u + b for every u in the cell.
    """
    a_rows, b_rows = [], []
    for level, (anchor, t) in enumerate(indicator):
        n = params.resolutions[level]
        corners = np.asarray(anchor, dtype=np.int64) + CORNERS[t]
        idx = hash_vertex_batch(corners, level, params)
        g = params.tables[level][idx]                    # (4,d)
        gdiff = (g[1:] - g[0]).T                         # (d,3)
        a_l = gdiff @ (C_UNIT_INV[t] * n)
        v0 = corners[0] / n
        b_l = g[0] - a_l @ v0
        a_rows.append(a_l)
        b_rows.append(b_l)
    return np.vstack(a_rows), np.concatenate(b_rows)


def grad_batch(u: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Jacobian d(encode)/du per point, shape (B, d*L, 3); piecewise constant."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    B = u.shape[0]
    jac = np.empty((B, params.feature_dim, 3))
    for level, n in enumerate(params.resolutions):
        a, t, _ = locate_batch(u, n)
        corners = a[:, None, :] + CORNERS[t]
        idx = hash_vertex_batch(corners, level, params)
        g = params.tables[level][idx]                    # (B,4,d)
        gdiff = g[:, 1:] - g[:, :1]                      # (B,3,d)
        cinv = C_UNIT_INV[t] * n                         # (B,3,3)
        jac[:, level * params.d:(level + 1) * params.d] = np.einsum(
            "bkd,bkj->bdj", gdiff, cinv)
    return jac


def grad_x(u, params: EncoderParams) -> np.ndarray:
    """Jacobian at a single point (ties resolve to locate's cell)."""
    return grad_batch(np.asarray(u, dtype=float)[None], params)[0]


def backprop_features(u, upstream: np.ndarray, params: EncoderParams) -> dict[int, dict[int, np.ndarray]]:
    """Gradient of <upstream, encode(u)> w.r.t. touched table rows.

    Returns {level: {row: d-vector}}; at most 4 rows per level, with hash
    collisions accumulated additively.
    """
    upstream = np.asarray(upstream, dtype=float)
    data = interpolation_data(np.asarray(u, dtype=float)[None], params)
    out: dict[int, dict[int, np.ndarray]] = {}
    for level, (idx, w, _) in enumerate(data):
        up_l = upstream[level * params.d:(level + 1) * params.d]
        if not np.any(up_l) and not np.any(w):
            continue
        rows: dict[int, np.ndarray] = {}
        for k in range(4):
            contrib = w[0, k] * up_l
            if idx[0, k] in rows:
                rows[idx[0, k]] = rows[idx[0, k]] + contrib
            else:
                rows[int(idx[0, k])] = contrib
        out[level] = rows
    return out


def accumulate_feature_grads(grads: list[np.ndarray], data, upstream: np.ndarray, d: int):
    """In-place batch version of backprop_features for the trainer.

    grads: per-level arrays shaped like the tables; data from
    interpolation_data; upstream (B, d*L).
    """
    for level, (idx, w, _) in enumerate(data):
        up_l = upstream[:, level * d:(level + 1) * d]     # (B,d)
        contrib = w[:, :, None] * up_l[:, None, :]        # (B,4,d)
        np.add.at(grads[level], idx.reshape(-1), contrib.reshape(-1, d))
