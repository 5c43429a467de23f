"""Independent oracles and fixtures shared across the test suite.

Everything here deliberately avoids the library's own fast paths: the
resolution oracle uses 50-digit decimal arithmetic, the cell-complex oracle
enumerates tetrahedron pairs and intersects half-spaces, and the zero-set
oracle enumerates sign patterns and clips planes, so agreement with the
production code is meaningful.
"""

from __future__ import annotations

import itertools
from decimal import Decimal, getcontext

import numpy as np

from tetsurf.encoder import cell_affine, init_encoder, hash_vertex_batch
from tetsurf.evalbench import TriangleBvh, point_triangle_distance2
from tetsurf.meshio import Mesh
from tetsurf.tetgrid import CORNERS, GridConfig


def resolution_oracle(levels: int, n_min: int, n_max: int) -> list[int]:
    """floor(n_min * gamma^l) evaluated in 50-digit decimal arithmetic."""
    getcontext().prec = 50
    ratio = (Decimal(n_max) / Decimal(n_min)) ** (Decimal(1) / Decimal(levels - 1))
    out = []
    for l in range(levels):
        # the tiny nudge plays the same role as in the implementation: exact
        # integer powers must survive the finite-precision root
        val = Decimal(n_min) * ratio**l + Decimal("1e-25")
        out.append(int(val.to_integral_value(rounding="ROUND_FLOOR")))
    return out


def containing_tetras(x, n: int, anchor) -> list[int]:
    """All tetra offsets of cube `anchor` whose closure contains x."""
    x = np.asarray(x, dtype=float)
    out = []
    for t in range(6):
        verts = (np.asarray(anchor) + CORNERS[t]) / n
        c = np.stack([verts[1] - verts[0], verts[2] - verts[0],
                      verts[3] - verts[0]], axis=1)
        w123 = np.linalg.solve(c, x - verts[0])
        w = np.concatenate([[1 - w123.sum()], w123])
        if np.all(w >= -1e-12):
            out.append(t)
    return out


# ---------------------------------------------------------------------------
# Brute-force cell-complex oracle (small multi-resolution grids)
# ---------------------------------------------------------------------------


def tetra_halfspaces(anchor, t: int, n: int):
    """Inward half-spaces (rows a, bounds b with a.x <= b) of one tetra."""
    verts = (np.asarray(anchor, dtype=float) + CORNERS[t]) / n
    rows, bs = [], []
    for f in range(4):
        tri = [verts[k] for k in range(4) if k != f]
        nrm = np.cross(tri[1] - tri[0], tri[2] - tri[0])
        nrm = nrm / np.linalg.norm(nrm)
        if nrm @ (verts[f] - tri[0]) > 0:
            nrm = -nrm
        rows.append(nrm)
        bs.append(nrm @ tri[0])
    return np.array(rows), np.array(bs)


def _dedup_constraints(a: np.ndarray, b: np.ndarray, tol: float = 1e-10):
    keep_a, keep_b = [], []
    for row, bb in zip(a, b):
        dup = False
        for ra, rb in zip(keep_a, keep_b):
            if np.linalg.norm(row - ra) < tol and abs(bb - rb) < tol:
                dup = True
                break
        if not dup:
            keep_a.append(row)
            keep_b.append(bb)
    return np.array(keep_a), np.array(keep_b)


def polytope_vertices_edges(a: np.ndarray, b: np.ndarray, tol: float = 1e-9):
    """Vertices and edges of {x : a x <= b}; None if not full-dimensional."""
    a, b = _dedup_constraints(a, b)
    m = len(a)
    verts = []
    for i, j, k in itertools.combinations(range(m), 3):
        mat = a[[i, j, k]]
        if abs(np.linalg.det(mat)) < 1e-10:
            continue
        x = np.linalg.solve(mat, b[[i, j, k]])
        if np.all(a @ x <= b + tol):
            verts.append(x)
    if not verts:
        return None
    verts = np.array(verts)
    keys = np.round(verts * 1e9).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    verts = verts[sorted(first)]
    if len(verts) < 4:
        return None
    if np.linalg.matrix_rank(verts[1:] - verts[0], tol=1e-9) < 3:
        return None
    edges = []
    active = np.abs(a @ verts.T - b[:, None]) <= tol     # (m, V)
    for i, j in itertools.combinations(range(m), 2):
        u = np.cross(a[i], a[j])
        norm = np.linalg.norm(u)
        if norm < 1e-10:
            continue
        on_line = np.nonzero(active[i] & active[j])[0]
        if len(on_line) < 2:
            continue
        ts = verts[on_line] @ (u / norm)
        order = np.argsort(ts)
        sorted_ids = on_line[order]
        for p, q in zip(sorted_ids[:-1], sorted_ids[1:]):
            edges.append((verts[p], verts[q]))
    return verts, edges


def cell_complex_oracle(grid: GridConfig, tol: float = 1e-9):
    """Vertex/edge sets of the full multi-level complex, by cell enumeration.

    Enumerates every combination of one tetra per level with overlapping
    bounding boxes, intersects their half-spaces, collects polytope vertices
    and edges, then splits edges at any complex vertex interior to them.
    Only practical for L <= 2 and small N.
    """
    assert grid.levels <= 2
    levels = grid.resolutions
    combos = []
    if grid.levels == 1:
        n = levels[0]
        for anchor in itertools.product(range(n), repeat=3):
            for t in range(6):
                combos.append(((anchor, t, n),))
    else:
        n0, n1 = levels
        for a1 in itertools.product(range(n1), repeat=3):
            lo = np.asarray(a1) / n1
            hi = (np.asarray(a1) + 1) / n1
            cubes0 = set()
            for corner in itertools.product(*[(l, h) for l, h in zip(lo, hi)]):
                c = np.minimum(np.floor(np.asarray(corner) * n0 - 1e-12), n0 - 1)
                cubes0.add(tuple(int(v) for v in np.maximum(c, 0)))
                c2 = np.minimum(np.floor(np.asarray(corner) * n0 + 1e-12), n0 - 1)
                cubes0.add(tuple(int(v) for v in np.maximum(c2, 0)))
            for t1 in range(6):
                for a0 in cubes0:
                    for t0 in range(6):
                        combos.append(((a0, t0, n0), (a1, t1, n1)))
    vert_keys = {}
    raw_edges = []
    for cell in combos:
        rows, bs = [], []
        for anchor, t, n in cell:
            a, b = tetra_halfspaces(anchor, t, n)
            rows.append(a)
            bs.append(b)
        result = polytope_vertices_edges(np.vstack(rows), np.concatenate(bs))
        if result is None:
            continue
        verts, edges = result
        for v in verts:
            vert_keys[tuple(np.round(v * 1e9).astype(np.int64))] = v
        raw_edges.extend(edges)
    vkeys = np.array(sorted(vert_keys.keys()), dtype=np.int64)
    vpos = vkeys / 1e9
    edge_set = set()
    for p, q in raw_edges:
        seg = q - p
        length = np.linalg.norm(seg)
        rel = vpos - p
        t = rel @ seg / (length * length)
        cross = np.linalg.norm(np.cross(np.broadcast_to(seg, rel.shape), rel), axis=1)
        # tolerances in absolute distance: vpos carries ~5e-10 quantization
        margin = 2e-9 / length
        on = (cross <= 2e-9 * length) & (t >= -margin) & (t <= 1 + margin)
        ids = np.nonzero(on)[0]
        order = np.argsort(t[ids])
        chain = ids[order]
        for aa, bb in zip(chain[:-1], chain[1:]):
            ka = tuple(vkeys[aa])
            kb = tuple(vkeys[bb])
            if ka != kb:
                edge_set.add(tuple(sorted((ka, kb))))
    return set(map(tuple, vkeys)), edge_set


def skeleton_key_sets(skel):
    keys = np.round(skel.vertices * 1e9).astype(np.int64)
    vset = set(map(tuple, keys))
    eset = set()
    for a, b in skel.edges:
        eset.add(tuple(sorted((tuple(keys[a]), tuple(keys[b])))))
    return vset, eset


# ---------------------------------------------------------------------------
# Exhaustive zero-set oracle for tiny nets on the L=1, N=[1] grid
# ---------------------------------------------------------------------------


def _clip_polygon(poly, a, b, tol=1e-12):
    """Sutherland-Hodgman clip of a 3d polygon by half-space a.x <= b."""
    out = []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        dp = a @ p - b
        dq = a @ q - b
        if dp <= tol:
            out.append(p)
        if (dp < -tol and dq > tol) or (dp > tol and dq < -tol):
            t = dp / (dp - dq)
            out.append(p + t * (q - p))
    dedup = []
    for p in out:
        if not dedup or np.linalg.norm(p - dedup[-1]) > 1e-12:
            dedup.append(p)
    if len(dedup) > 1 and np.linalg.norm(dedup[0] - dedup[-1]) <= 1e-12:
        dedup.pop()
    return dedup


def enumerate_zero_polygons(mlp, enc, grid: GridConfig):
    """All planar zero-set pieces by sign-pattern x tetra enumeration."""
    assert grid.resolutions == (1,)
    widths = mlp.hidden_widths
    offsets = np.cumsum((0,) + widths)
    polys = []
    for t in range(6):
        a_cell, b_cell = cell_affine((((0, 0, 0), t),), enc)
        rows, bs = tetra_halfspaces((0, 0, 0), t, 1)
        for pattern in itertools.product((-1.0, 1.0), repeat=mlp.n_hidden):
            pat = np.array(pattern)
            lin = a_cell
            off = b_cell
            constraints_a = [r for r in rows]
            constraints_b = list(bs)
            for li in range(len(widths)):
                lin = mlp.weights[li] @ lin
                off = mlp.weights[li] @ off + mlp.biases[li]
                sg = pat[offsets[li]:offsets[li + 1]]
                for k in range(widths[li]):
                    # sg * preact >= 0  <=>  (-sg * row) x <= sg * off
                    constraints_a.append(-sg[k] * lin[k])
                    constraints_b.append(sg[k] * off[k])
                keep = sg > 0
                lin = lin * keep[:, None]
                off = off * keep
            g = (mlp.weights[-1] @ lin)[0]
            c = float((mlp.weights[-1] @ off + mlp.biases[-1])[0])
            gn = np.linalg.norm(g)
            if gn < 1e-12:
                continue
            normal = g / gn
            p0 = -c * g / (gn * gn)
            e1 = np.eye(3)[np.argmin(np.abs(normal))]
            e1 = e1 - normal * (e1 @ normal)
            e1 /= np.linalg.norm(e1)
            e2 = np.cross(normal, e1)
            big = 8.0
            poly = [p0 + big * (sx * e1 + sy * e2)
                    for sx, sy in ((-1, -1), (1, -1), (1, 1), (-1, 1))]
            for a, b in zip(constraints_a, constraints_b):
                poly = _clip_polygon(poly, a, b)
                if len(poly) < 3:
                    break
            if len(poly) >= 3:
                area = 0.0
                for i in range(1, len(poly) - 1):
                    area += 0.5 * np.linalg.norm(
                        np.cross(poly[i] - poly[0], poly[i + 1] - poly[0]))
                if area > 1e-16:
                    polys.append(np.array(poly))
    return polys


def polygons_to_mesh(polys) -> Mesh:
    verts, tris = [], []
    for poly in polys:
        base = len(verts)
        verts.extend(poly)
        for i in range(1, len(poly) - 1):
            tris.append((base, base + i, base + i + 1))
    if not tris:
        return Mesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))
    return Mesh(np.array(verts), np.array(tris, dtype=np.int64))


def sample_polygons(polys, per_edge: int = 6, interior: int = 24,
                    seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    pts = []
    for poly in polys:
        pts.extend(poly)
        n = len(poly)
        for i in range(n):
            p, q = poly[i], poly[(i + 1) % n]
            for t in np.linspace(0, 1, per_edge + 2)[1:-1]:
                pts.append(p + t * (q - p))
        centroid = poly.mean(axis=0)
        for _ in range(interior):
            w = rng.dirichlet(np.ones(len(poly)))
            pts.append(w @ poly)
        pts.append(centroid)
    return np.array(pts)


def sample_mesh_dense(mesh: Mesh, per_tri: int = 12, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    pts = [mesh.vertices[np.unique(mesh.triangles.ravel())]]
    corners = mesh.corner_positions()
    mids = 0.5 * (corners + np.roll(corners, 1, axis=1))
    pts.append(mids.reshape(-1, 3))
    w = rng.dirichlet(np.ones(3), size=(len(corners), per_tri))
    pts.append(np.einsum("tki,tij->tkj", w, corners).reshape(-1, 3))
    return np.vstack(pts)


def hausdorff_against(points: np.ndarray, target: Mesh) -> float:
    if target.is_empty():
        return float("inf") if len(points) else 0.0
    d2, _ = TriangleBvh(target).nearest(points)
    return float(np.sqrt(d2.max()))


def symmetric_sampled_hausdorff(polys, mesh: Mesh, seed: int = 0) -> float:
    oracle_mesh = polygons_to_mesh(polys)
    if oracle_mesh.is_empty() and mesh.is_empty():
        return 0.0
    if oracle_mesh.is_empty() or mesh.is_empty():
        return float("inf")
    d1 = hausdorff_against(sample_polygons(polys, seed=seed), mesh)
    d2 = hausdorff_against(sample_mesh_dense(mesh, seed=seed), oracle_mesh)
    return max(d1, d2)


# ---------------------------------------------------------------------------
# Encoder fixtures
# ---------------------------------------------------------------------------


def coordinate_encoder(grid: GridConfig):
    """d=3 encoder whose features reproduce the lattice coordinates, so the
    interpolated feature vector equals the query point at every level."""
    enc = init_encoder(grid, d=3, log2_table=22, seed=0, scale=0.0)
    for lv, n in enumerate(grid.resolutions):
        side = n + 1
        lattice = np.stack(np.meshgrid(*[np.arange(side)] * 3, indexing="ij"),
                           axis=-1).reshape(-1, 3)
        idx = hash_vertex_batch(lattice, lv, enc)
        enc.tables[lv][idx] = lattice / n
    return enc


def random_tiny_net(seed: int, hidden=(6,), feature_scale=0.6):
    """Random net on the L=1 N=[1] grid with a surface inside the domain."""
    from tetsurf import net as net_mod

    grid = GridConfig((1,))
    rng = np.random.default_rng(seed)
    enc = init_encoder(grid, d=2, log2_table=10, seed=seed, scale=feature_scale)
    mlp = net_mod.init_mlp(enc.feature_dim, hidden=hidden, seed=seed + 1)
    probe = rng.random((4096, 3))
    f = net_mod.field_values(probe, mlp, enc)
    mlp.biases[-1] = mlp.biases[-1] - np.median(f)
    return mlp, enc, grid
