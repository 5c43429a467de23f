"""Multi-resolution tetrahedral tiling of the unit cube.

Each cube cell of a regular N^3 grid is split into six congruent tetrahedra
sharing the main diagonal from the anchor corner a/N to (a+1)/N (Kuhn
subdivision). Tetra index t in {0..5} follows the lexicographic order of the
permutation class of the fractional coordinates u = N*x - a:

    t=0: ux >= uy >= uz      t=3: uy >= uz >= ux
    t=1: ux >= uz >= uy      t=4: uz >= ux >= uy
    t=2: uy >= ux >= uz      t=5: uz >= uy >= ux

Ordered vertices per tetra: v0 = anchor corner, v1 = v0 + e_a,
v2 = v1 + e_b, v3 = opposite corner, where (a, b, c) is the permutation.
Points on boundaries resolve to the lowest tetra index; cubes are half-open
with clamping at the domain's upper face.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

# Lexicographic permutations of (0,1,2); row t gives (a,b,c) with
# the containment condition u[a] >= u[b] >= u[c].
PERMS = np.array(
    [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)],
    dtype=np.int64,
)

# Integer corner offsets of each tetra within its unit cube, ordered v0..v3.
CORNERS = np.zeros((6, 4, 3), dtype=np.int64)
for _t in range(6):
    _a, _b, _c = PERMS[_t]
    CORNERS[_t, 1, _a] = 1
    CORNERS[_t, 2] = CORNERS[_t, 1]
    CORNERS[_t, 2, _b] = 1
    CORNERS[_t, 3] = 1

# Unit-cube edge-span matrices C = [v1-v0, v2-v0, v3-v0] and their exact
# integer inverses (compute_barycentric uses w123 = N * Cinv @ (x - v0)).
C_UNIT = np.stack([CORNERS[t, 1:].T - CORNERS[t, :1].T for t in range(6)]).astype(float)
C_UNIT_INV = np.stack([np.round(np.linalg.inv(C_UNIT[t])) for t in range(6)])

# Local edge indexing: edge e is the vertex pair EDGE_PAIRS[e].
EDGE_PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
# Zero pattern (i, j) in the barycentric mask -> local edge through the
# complementary vertex pair.
_EDGE_FROM_ZEROS = {}
for _e, (_i, _j) in enumerate(EDGE_PAIRS):
    _zeros = tuple(sorted(set(range(4)) - {_i, _j}))
    _EDGE_FROM_ZEROS[_zeros] = _e

EPS_BARY_DEFAULT = 1e-7


class GridError(ValueError):
    pass


def level_resolutions(levels: int, n_min: int, n_max: int) -> list[int]:
    """Per-level grid resolutions N_l = floor(n_min * gamma^l).

    gamma is the geometric progression ratio exp((ln n_max - ln n_min)/(L-1)).
    A +1e-9 nudge is applied before flooring so exact powers survive
    floating point.
    """
    if levels < 2:
        raise GridError(f"need at least 2 levels, got {levels}")
    if not (0 < n_min < n_max):
        raise GridError(f"need 0 < n_min < n_max, got ({n_min}, {n_max})")
    gamma = math.exp((math.log(n_max) - math.log(n_min)) / (levels - 1))
    return [int(math.floor(n_min * gamma**l + 1e-9)) for l in range(levels)]


@dataclass(frozen=True)
class GridConfig:
    """Multi-resolution tetrahedral tiling of an axis-aligned box."""

    resolutions: tuple[int, ...]
    lo: tuple[float, float, float] = (0.0, 0.0, 0.0)
    hi: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.resolutions) < 1 or any(n < 1 for n in self.resolutions):
            raise GridError(f"bad resolutions {self.resolutions}")
        if any(np.diff(self.resolutions) < 0):
            raise GridError("resolutions must be nondecreasing")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise GridError("degenerate domain box")

    @classmethod
    def from_range(cls, levels: int, n_min: int, n_max: int, **kw) -> "GridConfig":
        return cls(tuple(level_resolutions(levels, n_min, n_max)), **kw)

    @property
    def levels(self) -> int:
        return len(self.resolutions)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        return (np.asarray(x, dtype=float) - lo) / (hi - lo)

    def denormalize(self, u: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        return np.asarray(u, dtype=float) * (hi - lo) + lo

    def check_domain(self, x: np.ndarray, tol: float = 1e-9):
        u = self.normalize(x)
        if np.any(u < -tol) or np.any(u > 1 + tol):
            raise GridError("point outside grid domain")

    def digest_fields(self) -> dict:
        return {"resolutions": list(self.resolutions), "lo": list(self.lo), "hi": list(self.hi)}


@dataclass(frozen=True)
class TetraRef:
    """One tetrahedron of the tiling: level, cube anchor, and tetra offset."""

    level: int
    anchor: tuple[int, int, int]
    tetra: int
    resolution: int

    def vertices(self, grid: GridConfig | None = None) -> np.ndarray:
        """Ordered vertices v0..v3, in domain coordinates."""
        v = (np.asarray(self.anchor) + CORNERS[self.tetra]) / self.resolution
        if grid is not None:
            v = grid.denormalize(v)
        return v


# tetra index from the three pairwise comparisons (xy, yz, xz); ties fall
# to the lowest index, and the two impossible combinations map harmlessly
_ORDER_TABLE = np.array([5, 5, 3, 2, 4, 1, 0, 0], dtype=np.int64)


def locate_batch(u: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Anchor, tetra index and fractional coords for unit-cube points.

    u: (..., 3) in [0,1]. Returns (anchor int (...,3), t (...,), frac (...,3)).
    Upper-boundary points clamp to the last cube; ordering ties resolve to
    the lowest tetra index.
    """
    s = u * n
    a = np.floor(s).astype(np.int64)
    np.clip(a, 0, n - 1, out=a)
    f = s - a
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    idx = ((fx >= fy).astype(np.int64) << 2)
    idx += ((fy >= fz).astype(np.int64) << 1)
    idx += (fx >= fz)
    t = _ORDER_TABLE[idx]
    return a, t, f


def bary_from_frac(f: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Barycentric coords (...,4) from fractional coords and tetra index.

    For permutation (a,b,c): w = (1-fa, fa-fb, fb-fc, fc).
    """
    perm = PERMS[t]
    fs = np.take_along_axis(f, perm, axis=-1)
    w = np.empty(f.shape[:-1] + (4,))
    w[..., 0] = 1.0 - fs[..., 0]
    w[..., 1] = fs[..., 0] - fs[..., 1]
    w[..., 2] = fs[..., 1] - fs[..., 2]
    w[..., 3] = fs[..., 2]
    return w


def locate(x, level: int, grid: GridConfig) -> TetraRef:
    """The tetrahedron of `level` containing point x (deterministic on ties)."""
    grid.check_domain(x)
    n = grid.resolutions[level]
    u = grid.normalize(x)
    a, t, _ = locate_batch(u, n)
    return TetraRef(level, tuple(int(v) for v in a), int(t), n)


def barycentric(x, tet: TetraRef, grid: GridConfig | None = None) -> np.ndarray:
    """Barycentric coordinates of x in tet: w1..w3 = C^-1 (x - v0), w0 = 1 - sum.

    Raises on a singular edge-span matrix (degenerate tetra).
    """
    v = tet.vertices(grid)
    C = np.stack([v[1] - v[0], v[2] - v[0], v[3] - v[0]], axis=1)
    det = np.linalg.det(C)
    if abs(det) < 1e-300:
        raise GridError("degenerate tetrahedron: singular edge-span matrix")
    w123 = np.linalg.solve(C, np.asarray(x, dtype=float) - v[0])
    return np.concatenate([[1.0 - w123.sum()], w123])


def bary_mask(w: np.ndarray, eps_b: float = EPS_BARY_DEFAULT) -> np.ndarray:
    """4-bit incidence mask: bit i = 1 iff w_i > eps_b."""
    return (np.asarray(w) > eps_b).astype(np.uint8)


def region_indicator(x, grid: GridConfig) -> tuple[tuple[tuple[int, int, int], int], ...]:
    """Per-level (anchor, tetra) address of the polyhedral cell containing x."""
    grid.check_domain(x)
    u = grid.normalize(x)
    out = []
    for n in grid.resolutions:
        a, t, _ = locate_batch(u, n)
        out.append((tuple(int(v) for v in a), int(t)))
    return tuple(out)


def region_indicator_batch(u: np.ndarray, grid: GridConfig):
    """Vectorized per-level (anchor, t) for unit-cube points u (...,3).

    Returns lists of (anchor, t, frac) arrays, one entry per level.
    """
    return [locate_batch(u, n) for n in grid.resolutions]


# ---------------------------------------------------------------------------
# Neighbor lookup tables
# ---------------------------------------------------------------------------


def _block_tetras():
    """All tetras with anchors in {-1,0,1}^3, with their corner sets."""
    out = []
    for anchor in itertools.product((-1, 0, 1), repeat=3):
        for t in range(6):
            corners = frozenset(
                tuple(int(c) for c in (np.asarray(anchor) + CORNERS[t][k]))
                for k in range(4)
            )
            out.append(((anchor, t), corners))
    return out


@lru_cache(maxsize=1)
def neighbor_tables():
    """Face/edge/vertex adjacency tables for the subdivision convention.

    face[(t, f)]   -> ((delta, t'),)            one neighbor across each face
    edge[(t, e)]   -> ((delta, t'), ...)        3 or 5 neighbors around an edge
    vertex[corner] -> ((delta, t'), ...)        24 tetras around a lattice point,
                                                table given for corner (0,0,0);
                                                shift delta by the corner offset
                                                for the other cube corners.
    Entries exclude the query tetra itself except in the vertex table, where
    the self configuration appears as one of the 24 rows.
    """
    block = _block_tetras()
    face = {}
    edge = {}
    for t in range(6):
        base = CORNERS[t]
        for f in range(4):
            keep = frozenset(tuple(int(c) for c in base[k]) for k in range(4) if k != f)
            row = tuple(
                (anchor, tt)
                for (anchor, tt), cs in block
                if keep <= cs and (anchor, tt) != ((0, 0, 0), t)
            )
            face[(t, f)] = row
        for e, (i, j) in enumerate(EDGE_PAIRS):
            keep = frozenset({tuple(int(c) for c in base[i]), tuple(int(c) for c in base[j])})
            row = tuple(
                (anchor, tt)
                for (anchor, tt), cs in block
                if keep <= cs and (anchor, tt) != ((0, 0, 0), t)
            )
            edge[(t, e)] = row
    vertex = tuple(
        (anchor, tt) for (anchor, tt), cs in block if (0, 0, 0) in cs
    )
    return face, edge, vertex


def level_neighbors(anchor, t: int, mask_bits: np.ndarray) -> list[tuple[tuple[int, int, int], int]]:
    """Tetras of one level whose closure contains the query point.

    Selected by the zero pattern of the level's 4-bit barycentric mask:
    no zeros -> the tetra itself; one zero -> face row; two zeros -> edge
    row; three zeros -> vertex row around the coincident lattice point.
    """
    a = np.asarray(anchor, dtype=np.int64)
    zeros = tuple(int(i) for i in np.nonzero(np.asarray(mask_bits) == 0)[0])
    self_entry = (tuple(int(v) for v in a), int(t))
    if len(zeros) == 0:
        return [self_entry]
    face, edge, vertex = neighbor_tables()
    if len(zeros) == 1:
        rows = face[(t, zeros[0])]
    elif len(zeros) == 2:
        rows = edge[(t, _EDGE_FROM_ZEROS[zeros])]
    elif len(zeros) == 3:
        (k,) = tuple(set(range(4)) - set(zeros))
        corner = CORNERS[t][k]
        out = {(tuple(int(v) for v in a + corner + d), tt) for d, tt in vertex}
        out.add(self_entry)
        return sorted(out)
    else:
        raise GridError("barycentric mask with four zeros is inconsistent")
    out = {(tuple(int(v) for v in a + d), tt) for d, tt in rows}
    out.add(self_entry)
    return sorted(out)


@lru_cache(maxsize=None)
def pattern_rows(t: int, zeros: tuple[int, ...]):
    """Relative neighbor row for tetra t and a mask zero pattern.

    Returns (deltas (K,3) int64, tetras (K,) int64) including the self
    entry; add the cube anchor to the deltas to get absolute indicators.
    """
    face, edge, vertex = neighbor_tables()
    if len(zeros) == 0:
        rows = []
    elif len(zeros) == 1:
        rows = list(face[(t, zeros[0])])
    elif len(zeros) == 2:
        rows = list(edge[(t, _EDGE_FROM_ZEROS[zeros])])
    elif len(zeros) == 3:
        (k,) = tuple(set(range(4)) - set(zeros))
        corner = CORNERS[t][k]
        rows = [(tuple(int(v) for v in corner + d), tt) for d, tt in vertex]
    else:
        raise GridError("barycentric mask with four zeros is inconsistent")
    entries = {(tuple(int(v) for v in d), int(tt)) for d, tt in rows}
    entries.add(((0, 0, 0), t))
    entries = sorted(entries)
    deltas = np.array([d for d, _ in entries], dtype=np.int64)
    ts = np.array([tt for _, tt in entries], dtype=np.int64)
    return deltas, ts


def grid_neighbors(indicator, mask) -> set[tuple]:
    """All region indicators whose cells' closures contain the query point.

    Cartesian product over levels of the per-level neighbor rows; always
    contains the query indicator itself. `mask` is the concatenated 4L-bit
    barycentric mask.
    """
    mask = np.asarray(mask).reshape(len(indicator), 4)
    per_level = []
    for (anchor, t), mbits in zip(indicator, mask):
        if np.count_nonzero(mbits == 0) > 3:
            raise GridError("inconsistent mask: more than three zeros at a level")
        per_level.append(level_neighbors(anchor, t, mbits))
    return {combo for combo in itertools.product(*per_level)}


# ---------------------------------------------------------------------------
# Table validation against an independent geometric oracle
# ---------------------------------------------------------------------------


@dataclass
class TableReport:
    checked: int = 0
    mismatches: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.mismatches


def _contains(anchor, t: int, pts: np.ndarray, eps: float = 1e-12) -> bool:
    """Closure membership of points in the tetra at (anchor, t), via barycentric signs."""
    v0 = np.asarray(anchor, dtype=float)
    rel = pts - v0
    w123 = rel @ C_UNIT_INV[t].T
    w0 = 1.0 - w123.sum(axis=-1, keepdims=True)
    w = np.concatenate([w0, w123], axis=-1)
    return bool(np.all(w >= -eps))

def validate_neighbor_tables(samples: int = 8, seed: int = 0) -> TableReport:
    """Check every table row against continuous point-membership tests.

    For each face/edge of each tetra, points strictly inside the shared
    face/edge are tested for closure membership in every tetra of a 3^3
    block of cubes; the set of containing tetras must equal the table row
    plus the query tetra. Vertex rows are checked at the lattice point
    itself. Symmetry of the face table is verified as well.
    """
    rng = np.random.default_rng(seed)
    face, edge, vertex = neighbor_tables()
    all_refs = [(anchor, t) for anchor in itertools.product((-1, 0, 1), repeat=3)
                for t in range(6)]
    report = TableReport()

    def interior_weights(k):
        w = rng.uniform(0.2, 0.8, size=(samples, k))
        return w / w.sum(axis=1, keepdims=True)

    for t in range(6):
        base = CORNERS[t].astype(float)
        for f in range(4):
            tri = np.stack([base[k] for k in range(4) if k != f])
            pts = interior_weights(3) @ tri
            found = {ref for ref in all_refs if _contains(*ref, pts)}
            expect = set(face[(t, f)]) | {((0, 0, 0), t)}
            report.checked += 1
            if found != expect:
                report.mismatches.append(("face", t, f, sorted(found), sorted(expect)))
        for e, (i, j) in enumerate(EDGE_PAIRS):
            seg = np.stack([base[i], base[j]])
            pts = interior_weights(2) @ seg
            found = {ref for ref in all_refs if _contains(*ref, pts)}
            expect = set(edge[(t, e)]) | {((0, 0, 0), t)}
            report.checked += 1
            if found != expect:
                report.mismatches.append(("edge", t, e, sorted(found), sorted(expect)))

    pt = np.zeros((1, 3))
    found = {ref for ref in all_refs if _contains(*ref, pt)}
    report.checked += 1
    if found != set(vertex):
        report.mismatches.append(("vertex", (0, 0, 0), sorted(found), sorted(set(vertex))))

    # face-table symmetry: if B is across face f of A, A is across the
    # matching face of B
    for (t, f), row in face.items():
        for delta, tt in row:
            base = {tuple(int(c) for c in CORNERS[t][k]) for k in range(4) if k != f}
            nb_corners = [tuple(int(c) for c in (np.asarray(delta) + CORNERS[tt][k]))
                          for k in range(4)]
            shared = [k for k in range(4) if nb_corners[k] in base]
            report.checked += 1
            if len(shared) != 3:
                report.mismatches.append(("face-symmetry-shape", t, f, delta, tt))
                continue
            (fb,) = set(range(4)) - set(shared)
            back = face[(tt, fb)]
            neg = tuple(-d for d in delta)
            if (neg, t) not in back:
                report.mismatches.append(("face-symmetry", t, f, delta, tt))
    return report


def tables_to_json() -> str:
    """Serialize the neighbor tables to versioned JSON (for luts.json)."""
    face, edge, vertex = neighbor_tables()
    doc = {
        "version": 1,
        "convention": "kuhn-lex-v0-anchor",
        "face": {f"{t},{f}": [[list(d), tt] for d, tt in row] for (t, f), row in face.items()},
        "edge": {f"{t},{e}": [[list(d), tt] for d, tt in row] for (t, e), row in edge.items()},
        "vertex": [[list(d), tt] for d, tt in vertex],
    }
    return json.dumps(doc, indent=1)


def tables_from_json(text: str):
    doc = json.loads(text)
    if doc.get("version") != 1:
        raise GridError(f"unsupported luts version {doc.get('version')!r}")
    face = {tuple(int(s) for s in k.split(",")): tuple((tuple(d), tt) for d, tt in v)
            for k, v in doc["face"].items()}
    edge = {tuple(int(s) for s in k.split(",")): tuple((tuple(d), tt) for d, tt in v)
            for k, v in doc["edge"].items()}
    vertex = tuple((tuple(d), tt) for d, tt in doc["vertex"])
    return face, edge, vertex
