"""Triangle mesh container and OBJ / binary-PLY readers and writers.

OBJ is ASCII `v`/`f` records with counterclockwise winding = outward
normals; floats are written with %.17g so identical meshes produce
byte-identical files. PLY is binary little-endian with double-precision
vertex coordinates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


class MeshError(ValueError):
    pass


@dataclass
class Mesh:
    vertices: np.ndarray                 # (V,3) float64
    triangles: np.ndarray                # (T,3) int64
    regions: np.ndarray | None = None    # optional per-triangle region id

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise MeshError("triangle references missing vertex")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def corner_positions(self):
        return self.vertices[self.triangles]             # (T,3,3)

    def areas(self) -> np.ndarray:
        p = self.corner_positions()
        return 0.5 * np.linalg.norm(
            np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    def normals(self) -> np.ndarray:
        p = self.corner_positions()
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        length = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(length, 1e-300)

    def area(self) -> float:
        return float(self.areas().sum())

    def edge_counts(self):
        """Undirected edge use counts: a closed 2-manifold has all twos."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_closed_manifold(self) -> bool:
        if self.is_empty():
            return False
        counts = self.edge_counts()
        return bool(np.all(counts == 2))

    def translated(self, delta) -> "Mesh":
        return Mesh(self.vertices + np.asarray(delta, dtype=float),
                    self.triangles.copy(),
                    None if self.regions is None else self.regions.copy())

    def transformed(self, matrix, offset=(0.0, 0.0, 0.0)) -> "Mesh":
        v = self.vertices @ np.asarray(matrix, dtype=float).T + np.asarray(offset, dtype=float)
        return Mesh(v, self.triangles.copy(),
                    None if self.regions is None else self.regions.copy())

    def compacted(self) -> "Mesh":
        """Drop vertices not referenced by any triangle."""
        if self.is_empty():
            return Mesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))
        used, inverse = np.unique(self.triangles.ravel(), return_inverse=True)
        return Mesh(self.vertices[used], inverse.reshape(-1, 3).astype(np.int64),
                    None if self.regions is None else self.regions.copy())


def write_obj(mesh: Mesh, path):
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write("v %.17g %.17g %.17g\n" % (v[0], v[1], v[2]))
        for t in mesh.triangles:
            f.write("f %d %d %d\n" % (t[0] + 1, t[1] + 1, t[2] + 1))


def read_obj(path) -> Mesh:
    verts, tris = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                for k in range(1, len(idx) - 1):
                    tris.append([idx[0], idx[k], idx[k + 1]])
    return Mesh(np.array(verts, dtype=float).reshape(-1, 3),
                np.array(tris, dtype=np.int64).reshape(-1, 3))


def write_ply(mesh: Mesh, path):
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {mesh.n_vertices}\n"
        "property double x\nproperty double y\nproperty double z\n"
        f"element face {mesh.n_triangles}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
        tri = np.ascontiguousarray(mesh.triangles, dtype="<i4")
        counts = np.full((len(tri), 1), 3, dtype=np.uint8)
        rec = np.empty(len(tri), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
        rec["n"] = counts[:, 0]
        rec["idx"] = tri
        f.write(rec.tobytes())


def read_ply(path) -> Mesh:
    with open(path, "rb") as f:
        line = f.readline().strip()
        if line != b"ply":
            raise MeshError("not a PLY file")
        n_vert = n_face = 0
        vert_dtype = "<f8"
        while True:
            line = f.readline()
            if not line:
                raise MeshError("unterminated PLY header")
            parts = line.split()
            if parts[0] == b"format":
                if parts[1] != b"binary_little_endian":
                    raise MeshError("only binary little-endian PLY supported")
            elif parts[0] == b"element":
                if parts[1] == b"vertex":
                    n_vert = int(parts[2])
                elif parts[1] == b"face":
                    n_face = int(parts[2])
            elif parts[0] == b"property" and parts[1] == b"float":
                vert_dtype = "<f4"
            elif parts[0] == b"end_header":
                break
        verts = np.frombuffer(f.read(n_vert * 3 * (8 if vert_dtype == "<f8" else 4)),
                              dtype=vert_dtype).reshape(n_vert, 3).astype(float)
        tris = np.empty((n_face, 3), dtype=np.int64)
        for i in range(n_face):
            (cnt,) = struct.unpack("<B", f.read(1))
            if cnt != 3:
                raise MeshError("only triangle PLY faces supported")
            tris[i] = struct.unpack("<3i", f.read(12))
    return Mesh(verts, tris)


def load_mesh(path) -> Mesh:
    p = str(path)
    if p.endswith(".obj"):
        return read_obj(p)
    if p.endswith(".ply"):
        return read_ply(p)
    raise MeshError(f"unsupported mesh format: {p}")
