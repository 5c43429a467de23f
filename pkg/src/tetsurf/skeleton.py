"""Initial skeleton: vertices and edges of the encoder-induced complex.

The multi-resolution Kuhn tiling is an arrangement of six parallel-plane
families: three axis-aligned families (offsets k/N per level, which include
the domain boundary) and three diagonal families with normals along
(1,-1,0), (0,1,-1), (1,0,-1) (offsets m/N for m in [-N, N]). Offsets are
merged across levels and deduplicated.

Vertices are batched solutions of N^T x = d over all independent normal
triplets and offset combinations, clipped to the closed domain and
deduplicated on a 1e-9 grid. Edges connect consecutive vertices along each
plane-pair line, so no two edges overlap.

All skeleton math is 64-bit and runs in the grid's normalized unit-cube
coordinates.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import tetgrid
from .tetgrid import GridConfig, bary_from_frac, locate_batch

QUANT = 1e9          # dedup grid (1e-9 spacing)
PLANE_TOL = 1e-9


@dataclass
class PlaneFamily:
    normal: np.ndarray            # unit normal
    offsets: np.ndarray           # strictly increasing plane offsets

    def __post_init__(self):
        d = np.diff(self.offsets)
        assert np.all(d > 0), "offsets must be strictly increasing"


def plane_families(grid: GridConfig) -> list[PlaneFamily]:
    """The six plane families of the tiling, offsets merged across levels."""
    fams = []
    for axis in range(3):
        n = np.zeros(3)
        n[axis] = 1.0
        offs = sorted({k / res for res in grid.resolutions for k in range(res + 1)})
        fams.append(PlaneFamily(n, _dedup_sorted(np.array(offs))))
    s = np.sqrt(2.0)
    for i, j in ((0, 1), (1, 2), (0, 2)):
        n = np.zeros(3)
        n[i] = 1.0 / s
        n[j] = -1.0 / s
        offs = sorted({m / (res * s) for res in grid.resolutions
                       for m in range(-res, res + 1)})
        fams.append(PlaneFamily(n, _dedup_sorted(np.array(offs))))
    return fams


def _dedup_sorted(a: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    if len(a) == 0:
        return a
    keep = np.empty(len(a), dtype=bool)
    keep[0] = True
    keep[1:] = np.diff(a) > tol
    return a[keep]


@dataclass
class Skeleton:
    vertices: np.ndarray          # (V,3)
    edges: np.ndarray             # (E,2) int64, row-sorted, lexicographic order
    incidence: np.ndarray         # (V,6) offset index per family, -1 if absent
    families: list[PlaneFamily]
    # filled by annotate():
    anchors: np.ndarray | None = None   # (V,L,3) int32
    tetras: np.ndarray | None = None    # (V,L) int8
    masks: np.ndarray | None = None     # (V,L,4) uint8
    stats: dict = field(default_factory=dict)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)


def extract_vertices(families: list[PlaneFamily], chunk: int = 2_000_000):
    """All in-domain triple-plane intersections, deduplicated.

    Returns (vertices (V,3), quantized int64 keys (V,3)).
    """
    normals = np.stack([f.normal for f in families])
    pts_chunks = []
    for i, j, k in itertools.combinations(range(len(families)), 3):
        nmat = normals[[i, j, k]]
        det = np.linalg.det(nmat)
        if abs(det) < 1e-12:
            continue
        inv_t = np.linalg.inv(nmat)          # solves nmat @ x = d
        di, dj, dk = (families[i].offsets, families[j].offsets, families[k].offsets)
        # cross-product of offsets, chunked over the largest axis
        DJ, DK = np.meshgrid(dj, dk, indexing="ij")
        tail = np.stack([DJ.ravel(), DK.ravel()])        # (2, J*K)
        step = max(1, chunk // max(tail.shape[1], 1))
        for s in range(0, len(di), step):
            head = di[s:s + step]
            D = np.empty((3, len(head) * tail.shape[1]))
            D[0] = np.repeat(head, tail.shape[1])
            D[1] = np.tile(tail[0], len(head))
            D[2] = np.tile(tail[1], len(head))
            X = (inv_t @ D).T                            # (M,3)
            good = np.all((X > -PLANE_TOL) & (X < 1 + PLANE_TOL), axis=1)
            pts_chunks.append(X[good])
    pts = np.concatenate(pts_chunks, axis=0)
    keys = np.round(pts * QUANT).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    first.sort()
    return pts[first], keys[first]


def plane_incidence(vertices: np.ndarray, families: list[PlaneFamily],
                    tol: float = PLANE_TOL) -> np.ndarray:
    """Per-vertex offset index in each family (-1 when not on any plane)."""
    v = np.asarray(vertices)
    inc = np.full((len(v), len(families)), -1, dtype=np.int64)
    for fi, fam in enumerate(families):
        d = v @ fam.normal
        idx = np.searchsorted(fam.offsets, d)
        for sh in (0, -1):
            j = np.clip(idx + sh, 0, len(fam.offsets) - 1)
            hit = (np.abs(fam.offsets[j] - d) <= tol) & (inc[:, fi] < 0)
            inc[hit, fi] = j[hit]
    return inc


def extract_edges(families: list[PlaneFamily], vertices: np.ndarray,
                  incidence: np.ndarray) -> np.ndarray:
    """Connect consecutive vertices along every plane-pair line."""
    all_edges = []
    nfam = len(families)
    for i, j in itertools.combinations(range(nfam), 2):
        u = np.cross(families[i].normal, families[j].normal)
        norm = np.linalg.norm(u)
        if norm < 1e-12:
            continue
        u /= norm
        sel = np.nonzero((incidence[:, i] >= 0) & (incidence[:, j] >= 0))[0]
        if len(sel) < 2:
            continue
        key = incidence[sel, i] * (len(families[j].offsets) + 1) + incidence[sel, j]
        t = vertices[sel] @ u
        order = np.lexsort((t, key))
        sel, key, t = sel[order], key[order], t[order]
        same = key[1:] == key[:-1]
        a, b = sel[:-1][same], sel[1:][same]
        all_edges.append(np.stack([np.minimum(a, b), np.maximum(a, b)], axis=1))
    if not all_edges:
        return np.empty((0, 2), dtype=np.int64)
    edges = np.concatenate(all_edges, axis=0)
    return np.unique(edges, axis=0)


def build_skeleton(grid: GridConfig) -> Skeleton:
    """Vertices, edges and plane incidence of the full complex."""
    t0 = time.perf_counter()
    fams = plane_families(grid)
    verts, _ = extract_vertices(fams)
    t1 = time.perf_counter()
    inc = plane_incidence(verts, fams)
    edges = extract_edges(fams, verts, inc)
    t2 = time.perf_counter()
    skel = Skeleton(verts, edges, inc, fams)
    skel.stats = {
        "n_vertices": len(verts),
        "n_edges": len(edges),
        "t_vertices_s": t1 - t0,
        "t_edges_s": t2 - t1,
        "mem_estimate_mb": (verts.nbytes + edges.nbytes + inc.nbytes) / 1e6,
    }
    return skel


def annotate(skel: Skeleton, grid: GridConfig, eps_b: float = tetgrid.EPS_BARY_DEFAULT) -> Skeleton:
    """Attach per-level region indicators and barycentric masks to vertices."""
    v = skel.vertices
    L = grid.levels
    anchors = np.empty((len(v), L, 3), dtype=np.int32)
    tetras = np.empty((len(v), L), dtype=np.int8)
    masks = np.empty((len(v), L, 4), dtype=np.uint8)
    for lv, n in enumerate(grid.resolutions):
        a, t, f = locate_batch(v, n)
        w = bary_from_frac(f, t)
        anchors[:, lv] = a
        tetras[:, lv] = t
        masks[:, lv] = w > eps_b
    skel.anchors = anchors
    skel.tetras = tetras
    skel.masks = masks
    return skel


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------


def grid_digest(grid: GridConfig) -> str:
    return hashlib.sha256(
        json.dumps(grid.digest_fields(), sort_keys=True).encode()).hexdigest()[:16]


def save_cache(path, skel: Skeleton, grid: GridConfig):
    np.savez_compressed(
        path,
        digest=np.frombuffer(grid_digest(grid).encode(), dtype=np.uint8),
        vertices=skel.vertices,
        edges=skel.edges,
        incidence=skel.incidence,
    )


def load_cache(path, grid: GridConfig) -> Skeleton | None:
    try:
        data = np.load(path)
    except (FileNotFoundError, OSError):
        return None
    digest = bytes(data["digest"]).decode()
    if digest != grid_digest(grid):
        return None
    skel = Skeleton(data["vertices"], data["edges"], data["incidence"],
                    plane_families(grid))
    skel.stats = {"n_vertices": skel.n_vertices, "n_edges": skel.n_edges,
                  "cached": True}
    return skel
