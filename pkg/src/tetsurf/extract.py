"""Exact zero-level-set extraction by grid-aware edge subdivision.

Starting from the encoder complex skeleton, the hidden neurons' folded
decision boundaries are processed in layer-major order: edges whose endpoint
signs differ strictly are split at the exact affine root, then new edges are
added between boundary vertices that share a parent region *and* a second
constraint (an earlier zero sign entry or a common grid plane). The output
neuron is processed the same way as a final pass, so the selected zero-level
vertices satisfy f = 0 up to floating point rather than up to a geometric
tolerance.

Faces are recovered by grouping zero vertices by parent region (grid
indicator x hidden sign vector); inside one region f is affine, so each
group is a planar convex polygon, ordered by angle around the region
gradient and fan-triangulated.

Region equivalence of two points is tested by intersecting their neighbor
sets A(x): the Cartesian product of per-level grid neighbor rows (selected
by barycentric-mask zeros) with all +-1 perturbations of zero sign entries.
Each region identifier packs exactly into a few int64 words (8 bits per
anchor component, 3 per tetra index, 2 per sign entry), so bucketing runs
as vectorized sorts instead of per-vertex hashing.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from . import net as net_mod
from .encoder import EncoderParams, cell_affine
from .meshio import Mesh
from .skeleton import Skeleton, annotate, build_skeleton, plane_incidence
from .tetgrid import GridConfig, bary_from_frac, locate_batch, pattern_rows

EPS_SIGN_DEFAULT = 1e-10
EPS_ZERO_DEFAULT = 1e-9
NEIGHBOR_GUARD = 1 << 20
BUCKET_GUARD = 4096

_LEVEL_BITS = 27          # 3 x 8-bit shifted anchor + 3-bit tetra
_SIGN_PER_WORD = 31       # 2 bits per ternary entry, top bits left clear


class ExtractionError(RuntimeError):
    pass


@dataclass
class SubdivisionState:
    positions: np.ndarray            # (V,3)
    edges: np.ndarray                # (E,2) int64
    anchors: np.ndarray              # (V,L,3) int32
    tetras: np.ndarray               # (V,L) int8
    masks: np.ndarray                # (V,L,4) uint8
    plane_inc: np.ndarray            # (V,6) int64
    signs: np.ndarray                # (V,H+1) int8 (hidden..., output)
    fvals: np.ndarray                # (V,)
    processed: int = 0               # columns finished (H+1 when complete)
    log: list = field(default_factory=list)

    @property
    def n_vertices(self) -> int:
        return len(self.positions)


class Extractor:
    """Single-owner subdivision driver over frozen network parameters."""

    def __init__(self, mlp: net_mod.MlpParams, enc: EncoderParams,
                 grid: GridConfig, skel: Skeleton | None = None,
                 eps_sign: float = EPS_SIGN_DEFAULT,
                 eps_zero: float = EPS_ZERO_DEFAULT,
                 eps_bary: float = 1e-7):
        self.mlp = mlp
        self.enc = enc
        self.grid = grid
        self.eps_sign = eps_sign
        self.eps_zero = eps_zero
        self.eps_bary = eps_bary
        if skel is None:
            skel = build_skeleton(grid)
        if skel.masks is None:
            annotate(skel, grid, eps_b=eps_bary)
        self.families = skel.families
        self.n_hidden = mlp.n_hidden
        self._grid_words = (grid.levels + 1) // 2
        f, signs = self._evaluate(skel.vertices)
        self.state = SubdivisionState(
            positions=skel.vertices.copy(),
            edges=skel.edges.copy(),
            anchors=skel.anchors.copy(),
            tetras=skel.tetras.copy(),
            masks=skel.masks.copy(),
            plane_inc=skel.incidence.copy(),
            signs=signs,
            fvals=f,
        )

    # -- evaluation ---------------------------------------------------------

    def _evaluate(self, pts: np.ndarray):
        """f values and ternary sign rows (hidden + output) at points."""
        f, preacts = net_mod.field_batch(pts, self.mlp, self.enc)
        cols = np.concatenate([preacts, f[:, None]], axis=1)
        return f, net_mod.sign_vector(cols, self.eps_sign)

    def _neuron_values(self, vidx: np.ndarray, col: int) -> np.ndarray:
        pts = self.state.positions[vidx]
        f, pre = net_mod.field_batch(pts, self.mlp, self.enc)
        return f if col == self.n_hidden else pre[:, col]

    def _annotate_new(self, pts: np.ndarray):
        L = self.grid.levels
        anchors = np.empty((len(pts), L, 3), dtype=np.int32)
        tetras = np.empty((len(pts), L), dtype=np.int8)
        masks = np.empty((len(pts), L, 4), dtype=np.uint8)
        for lv, n in enumerate(self.grid.resolutions):
            a, t, fr = locate_batch(pts, n)
            w = bary_from_frac(fr, t)
            anchors[:, lv] = a
            tetras[:, lv] = t
            masks[:, lv] = w > self.eps_bary
        inc = plane_incidence(pts, self.families)
        return anchors, tetras, masks, inc

    # -- packed region-key enumeration --------------------------------------

    def _expand_region_keys(self, verts: np.ndarray, upto_col: int):
        """All parent-region identifiers of each vertex, bit-packed.

        Returns (owner (M,), keys (M, W) int64): one row per element of
        A(x), `owner` giving the originating vertex id.
        """
        st = self.state
        L = self.grid.levels
        n_cols = upto_col + 1
        sign_words = max(1, -(-n_cols // _SIGN_PER_WORD))
        verts = np.asarray(verts, dtype=np.int64)

        # blow-up guard: per-vertex neighbor-set size
        kprod = np.ones(len(verts), dtype=np.int64)
        zpats = []
        for lv in range(L):
            m = st.masks[verts, lv]
            zp = (m[:, 0] | (m[:, 1] << 1) | (m[:, 2] << 2) | (m[:, 3] << 3)).astype(np.int64)
            zpats.append(zp)
            trow = st.tetras[verts, lv].astype(np.int64)
            sizes = _pattern_sizes()[trow, zp]
            kprod *= sizes
        n_zero_signs = (st.signs[verts, :n_cols] == 0).sum(axis=1).astype(np.int64)
        total = kprod * (1 << np.minimum(n_zero_signs, 40))
        if np.any(total > NEIGHBOR_GUARD):
            bad = verts[int(np.argmax(total))]
            raise ExtractionError(
                f"neighbor-set blow-up at vertex {int(bad)}: "
                f"{int(total.max())} combinations")

        owner = np.arange(len(verts), dtype=np.int64)
        keys = np.zeros((len(verts), self._grid_words + sign_words), dtype=np.int64)

        # grid part: expand level by level, grouped by (tetra, zero pattern)
        for lv in range(L):
            trow = st.tetras[verts[owner], lv].astype(np.int64)
            zp = zpats[lv][owner]
            cls = trow * 16 + zp
            word = lv // 2
            shift = (lv % 2) * _LEVEL_BITS
            new_owner_parts, new_key_parts = [], []
            for c in np.unique(cls):
                sel = np.nonzero(cls == c)[0]
                deltas, ts = pattern_rows(int(c // 16), _zero_tuple(int(c % 16)))
                k = len(ts)
                anch = st.anchors[verts[owner[sel]], lv].astype(np.int64)  # (S,3)
                packed = (((anch[:, None, 0] + deltas[None, :, 0] + 1)) |
                          ((anch[:, None, 1] + deltas[None, :, 1] + 1) << 8) |
                          ((anch[:, None, 2] + deltas[None, :, 2] + 1) << 16) |
                          (ts[None, :] << 24)) << shift                    # (S,K)
                rep_keys = np.repeat(keys[sel], k, axis=0)
                rep_keys[:, word] |= packed.reshape(-1)
                new_key_parts.append(rep_keys)
                new_owner_parts.append(np.repeat(owner[sel], k))
            owner = np.concatenate(new_owner_parts)
            keys = np.concatenate(new_key_parts)

        # sign part: base packing then zero-entry perturbations
        signs = st.signs[verts, :n_cols]
        base = np.zeros((len(verts), sign_words), dtype=np.int64)
        for col in range(n_cols):
            code = np.where(signs[:, col] > 0, 1, np.where(signs[:, col] < 0, 2, 0)).astype(np.int64)
            base[:, col // _SIGN_PER_WORD] |= code << (2 * (col % _SIGN_PER_WORD))
        zero_mask = signs == 0
        zsig = np.zeros(len(verts), dtype=np.int64)
        for col in range(n_cols):
            zsig |= zero_mask[:, col].astype(np.int64) << col
        gw = self._grid_words
        new_owner_parts, new_key_parts = [], []
        zs_owner = zsig[owner]
        for zs in np.unique(zs_owner):
            sel = np.nonzero(zs_owner == zs)[0]
            zcols = [c for c in range(n_cols) if (int(zs) >> c) & 1]
            variants = []
            for combo in itertools.product((1, 2), repeat=len(zcols)):
                v = np.zeros(sign_words, dtype=np.int64)
                for c, code in zip(zcols, combo):
                    v[c // _SIGN_PER_WORD] |= code << (2 * (c % _SIGN_PER_WORD))
                variants.append(v)
            variants = np.stack(variants)                                   # (P,SW)
            rep = np.repeat(keys[sel], len(variants), axis=0)
            rep_owner = np.repeat(owner[sel], len(variants))
            svals = base[rep_owner] | np.tile(variants, (len(sel), 1))
            rep[:, gw:] = svals
            new_key_parts.append(rep)
            new_owner_parts.append(rep_owner)
        owner = np.concatenate(new_owner_parts)
        keys = np.concatenate(new_key_parts)
        return verts[owner], keys

    def neighbor_regions(self, vidx: int, upto_col: int | None = None) -> set:
        """Combined parent-region identifiers A(x) of one vertex, as tuples."""
        if upto_col is None:
            upto_col = self.state.processed - 1
        _, keys = self._expand_region_keys(np.array([vidx]), upto_col)
        return {self._decode_key(row, upto_col) for row in keys}

    def _decode_key(self, row: np.ndarray, upto_col: int):
        indicator, signs = _unpack_key(row, self.grid.levels, upto_col + 1,
                                       self._grid_words)
        return indicator, bytes(signs.tobytes())

    # -- subdivision passes -------------------------------------------------

    def split_edges(self, col: int) -> int:
        """Insert exact boundary roots on edges with strict sign changes."""
        st = self.state
        sa = st.signs[st.edges[:, 0], col].astype(np.int16)
        sb = st.signs[st.edges[:, 1], col].astype(np.int16)
        crossing = sa * sb == -1
        n_new = int(crossing.sum())
        if n_new == 0:
            return 0
        cross_edges = st.edges[crossing]
        ends = np.unique(cross_edges.ravel())
        dvals = np.empty(st.n_vertices)
        dvals[ends] = self._neuron_values(ends, col)
        d0 = dvals[cross_edges[:, 0]]
        d1 = dvals[cross_edges[:, 1]]
        denom = d0 - d1
        if np.any(~np.isfinite(denom)) or np.any(denom == 0.0):
            raise ExtractionError(f"degenerate crossing for neuron column {col}")
        w = np.abs(d0) / np.abs(denom)
        p0 = st.positions[cross_edges[:, 0]]
        p1 = st.positions[cross_edges[:, 1]]
        new_pts = (1.0 - w)[:, None] * p0 + w[:, None] * p1

        base = st.n_vertices
        anchors, tetras, masks, inc = self._annotate_new(new_pts)
        f, signs = self._evaluate(new_pts)
        signs[:, col] = 0                       # exact roots by construction
        st.positions = np.vstack([st.positions, new_pts])
        st.anchors = np.concatenate([st.anchors, anchors])
        st.tetras = np.concatenate([st.tetras, tetras])
        st.masks = np.concatenate([st.masks, masks])
        st.plane_inc = np.concatenate([st.plane_inc, inc])
        st.signs = np.concatenate([st.signs, signs])
        st.fvals = np.concatenate([st.fvals, f])

        new_ids = np.arange(base, base + n_new)
        split_a = np.stack([cross_edges[:, 0], new_ids], axis=1)
        split_b = np.stack([new_ids, cross_edges[:, 1]], axis=1)
        st.edges = np.concatenate([st.edges[~crossing], split_a, split_b])
        return n_new

    def connect_region_edges(self, col: int) -> int:
        """Join boundary vertices that share a region and a second constraint."""
        st = self.state
        zero_verts = np.nonzero(st.signs[:, col] == 0)[0]
        if len(zero_verts) < 2:
            return 0
        owner, keys = self._expand_region_keys(zero_verts, col)
        bucket = _group_ids(keys)
        # one bucket membership per (vertex, region); join with constraints
        cv, cc = self._constraint_pairs(zero_verts, col)
        # expand membership rows by each owner's constraints
        order = np.argsort(cv, kind="stable")
        cv, cc = cv[order], cc[order]
        starts = np.searchsorted(cv, owner, side="left")
        ends = np.searchsorted(cv, owner, side="right")
        counts = ends - starts
        m_rep = np.repeat(np.arange(len(owner)), counts)
        flat = _ranges_concat(starts, ends)
        rows_vertex = owner[m_rep]
        rows_bucket = bucket[m_rep]
        rows_constraint = cc[flat]
        if len(rows_vertex) == 0:
            return 0
        pos = st.positions[rows_vertex]
        order = np.lexsort((rows_vertex, pos[:, 2], pos[:, 1], pos[:, 0],
                            rows_constraint, rows_bucket))
        rb, rc, rv = rows_bucket[order], rows_constraint[order], rows_vertex[order]
        same = (rb[1:] == rb[:-1]) & (rc[1:] == rc[:-1]) & (rv[1:] != rv[:-1])
        a = rv[:-1][same]
        b = rv[1:][same]
        if len(a) == 0:
            return 0
        cand = np.stack([np.minimum(a, b), np.maximum(a, b)], axis=1)
        cand = np.unique(cand, axis=0)
        st.edges = np.concatenate([st.edges, cand])
        return len(cand)

    def _constraint_pairs(self, verts: np.ndarray, col: int):
        """(vertex, constraint-id) rows: earlier sign zeros + grid planes."""
        st = self.state
        vs, cs = [], []
        if col > 0:
            zr, zc = np.nonzero(st.signs[verts, :col] == 0)
            vs.append(verts[zr])
            cs.append(zc.astype(np.int64))
        n_fam = st.plane_inc.shape[1]
        base = self.n_hidden + 1
        max_off = max((len(f.offsets) for f in self.families), default=1) + 1
        for fam in range(n_fam):
            offs = st.plane_inc[verts, fam]
            hit = offs >= 0
            vs.append(verts[hit])
            cs.append(base + fam * max_off + offs[hit])
        return np.concatenate(vs), np.concatenate(cs)

    def subdivide_all(self) -> SubdivisionState:
        """Process every hidden neuron then the output neuron, in order."""
        st = self.state
        for col in range(self.n_hidden + 1):
            t0 = time.perf_counter()
            n_split = self.split_edges(col)
            n_conn = self.connect_region_edges(col)
            st.processed = col + 1
            st.log.append({
                "column": col,
                "is_output": col == self.n_hidden,
                "splits": n_split,
                "connections": n_conn,
                "vertices": st.n_vertices,
                "edges": len(st.edges),
                "seconds": time.perf_counter() - t0,
            })
        st.edges = np.unique(np.sort(st.edges, axis=1), axis=0)
        return st

    # -- selection and faces ------------------------------------------------

    def zero_set(self, eps_zero: float | None = None):
        """Vertex ids with |f| <= eps and the edges fully inside that set."""
        st = self.state
        if st.processed <= self.n_hidden:
            raise ExtractionError("zero_set requires the output pass")
        eps = self.eps_zero if eps_zero is None else eps_zero
        keep = np.abs(st.fvals) <= eps
        vstar = np.nonzero(keep)[0]
        both = keep[st.edges[:, 0]] & keep[st.edges[:, 1]]
        return vstar, st.edges[both]

    def faces(self) -> Mesh:
        """Planar convex polygons per region, fan-triangulated and oriented."""
        st = self.state
        vstar, _ = self.zero_set()
        if len(vstar) == 0:
            return Mesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))
        upto = self.n_hidden - 1
        owner, keys = self._expand_region_keys(vstar, upto)
        bucket = _group_ids(keys)
        order = np.argsort(bucket, kind="stable")
        owner, keys, bucket = owner[order], keys[order], bucket[order]
        bounds = np.nonzero(np.diff(bucket, prepend=-1))[0]
        bounds = np.append(bounds, len(bucket))
        triangles, regions = [], []
        seen_polys = set()
        n_regions = 0
        for bi in range(len(bounds) - 1):
            members = owner[bounds[bi]:bounds[bi + 1]]
            if len(members) < 3:
                continue
            if len(members) > BUCKET_GUARD:
                raise ExtractionError(
                    f"zero polygon with {len(members)} vertices; degenerate "
                    "field or region-tracking bug")
            key_row = keys[bounds[bi]]
            indicator, _ = _unpack_key(key_row, self.grid.levels, upto + 1,
                                       self._grid_words)
            if any(not (0 <= ax < n and 0 <= ay < n and 0 <= az < n)
                   for ((ax, ay, az), _t), n in zip(indicator, self.grid.resolutions)):
                continue          # phantom mirror cell outside the domain
            poly_id = frozenset(int(v) for v in members)
            if poly_id in seen_polys:
                continue
            seen_polys.add(poly_id)
            grad = self._region_gradient(key_row, upto)
            gnorm = np.linalg.norm(grad)
            if gnorm < 1e-12:
                continue                      # cannot orient a flat region
            normal = grad / gnorm
            vs = np.unique(members)
            pts = st.positions[vs]
            centroid = pts.mean(axis=0)
            off = (pts - centroid) @ normal
            if np.max(np.abs(off)) > 1e-7:
                raise ExtractionError(
                    f"non-planar zero polygon (residual {np.max(np.abs(off)):.2e})")
            e1 = np.eye(3)[np.argmin(np.abs(normal))]
            e1 = e1 - normal * (e1 @ normal)
            e1 /= np.linalg.norm(e1)
            e2 = np.cross(normal, e1)
            rel = pts - centroid
            ang = np.arctan2(rel @ e2, rel @ e1)
            ring = vs[np.lexsort((vs, ang))]
            tris = _fan_triangulate(ring, st.positions, normal)
            if tris:
                triangles.extend(tris)
                regions.extend([n_regions] * len(tris))
                n_regions += 1
        if not triangles:
            return Mesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))
        tri = np.array(triangles, dtype=np.int64)
        mesh = Mesh(st.positions.copy(), tri, np.array(regions, dtype=np.int64))
        return mesh.compacted()

    def _region_gradient(self, key_row: np.ndarray, upto: int) -> np.ndarray:
        """Constant field gradient of the region named by a packed key."""
        indicator, signs = _unpack_key(key_row, self.grid.levels, upto + 1,
                                       self._grid_words)
        a_mat, _ = cell_affine(indicator, self.enc)
        gz = self.mlp.weights[-1].astype(float)      # (1, w)
        widths = self.mlp.hidden_widths
        offsets = np.cumsum((0,) + widths)
        for i in range(len(widths) - 1, -1, -1):
            mask = signs[offsets[i]:offsets[i + 1]] > 0
            gz = (gz * mask) @ self.mlp.weights[i]
        return a_mat.T @ gz[0]


# -- helpers ----------------------------------------------------------------


_PATTERN_SIZE_CACHE: np.ndarray | None = None


def _zero_tuple(zpat: int) -> tuple[int, ...]:
    return tuple(i for i in range(4) if not (zpat >> i) & 1)


def _pattern_sizes() -> np.ndarray:
    """Row sizes of pattern_rows indexed by [tetra, packed mask bits]."""
    global _PATTERN_SIZE_CACHE
    if _PATTERN_SIZE_CACHE is None:
        sizes = np.ones((6, 16), dtype=np.int64)
        for t in range(6):
            for zp in range(16):
                zeros = _zero_tuple(zp)
                if len(zeros) > 3:
                    continue
                sizes[t, zp] = len(pattern_rows(t, zeros)[1])
        _PATTERN_SIZE_CACHE = sizes
    return _PATTERN_SIZE_CACHE


def _group_ids(keys: np.ndarray) -> np.ndarray:
    """Dense group ids for equal rows of a 2-d int array."""
    order = np.lexsort(keys.T[::-1])
    sk = keys[order]
    new = np.any(sk[1:] != sk[:-1], axis=1)
    gid_sorted = np.concatenate([[0], np.cumsum(new)])
    gid = np.empty(len(keys), dtype=np.int64)
    gid[order] = gid_sorted
    return gid


def _ranges_concat(starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Concatenate ranges [s,e) into one flat index array."""
    counts = ends - starts
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    rep_start = np.repeat(starts, counts)
    offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    return rep_start + offs


def _unpack_key(row: np.ndarray, levels: int, n_cols: int, grid_words: int):
    """Inverse of the key packing: (indicator tuple, sign int8 array)."""
    indicator = []
    for lv in range(levels):
        word = int(row[lv // 2])
        shift = (lv % 2) * _LEVEL_BITS
        chunk = (word >> shift) & ((1 << _LEVEL_BITS) - 1)
        ax = (chunk & 0xFF) - 1
        ay = ((chunk >> 8) & 0xFF) - 1
        az = ((chunk >> 16) & 0xFF) - 1
        t = (chunk >> 24) & 0x7
        indicator.append(((ax, ay, az), int(t)))
    signs = np.zeros(n_cols, dtype=np.int8)
    for c in range(n_cols):
        word = int(row[grid_words + c // _SIGN_PER_WORD])
        code = (word >> (2 * (c % _SIGN_PER_WORD))) & 3
        signs[c] = 1 if code == 1 else (-1 if code == 2 else 0)
    return tuple(indicator), signs


def _fan_triangulate(ring: np.ndarray, positions: np.ndarray, normal: np.ndarray):
    """Fan triangulation robust to collinear runs on polygon edges."""
    n = len(ring)
    for shift in range(n):
        order = np.roll(ring, -shift)
        apex = order[0]
        tris = []
        ok = True
        for i in range(1, n - 1):
            a, b, c = apex, order[i], order[i + 1]
            pa, pb, pc = positions[a], positions[b], positions[c]
            cr = np.cross(pb - pa, pc - pa)
            area = 0.5 * np.linalg.norm(cr)
            if area <= 1e-14:
                ok = False
                break
            if cr @ normal < 0:
                a, b, c = a, c, b
            tris.append((int(a), int(b), int(c)))
        if ok and tris:
            return tris
    kept = []
    for i in range(n):
        p_prev = positions[ring[i - 1]]
        p_cur = positions[ring[i]]
        p_next = positions[ring[(i + 1) % n]]
        if 0.5 * np.linalg.norm(np.cross(p_cur - p_prev, p_next - p_prev)) > 1e-14:
            kept.append(ring[i])
    if len(kept) < 3:
        return []
    return _fan_triangulate(np.array(kept), positions, normal)


def extract_mesh(mlp: net_mod.MlpParams, enc: EncoderParams, grid: GridConfig,
                 skel: Skeleton | None = None, **kw):
    """Full pipeline: subdivision, zero selection, face extraction."""
    ex = Extractor(mlp, enc, grid, skel=skel, **kw)
    ex.subdivide_all()
    mesh = ex.faces()
    return mesh, ex
