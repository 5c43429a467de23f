"""Analytic signed distance fields and training-sample generation.

Primitive SDFs (sphere, box, torus) are exact; CSG combinations via
min/max are valid lower bounds of the true distance, which is fine for
training targets and sign queries but not exact everywhere (standard
caveat). Negative means inside.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import evalbench
from .meshio import Mesh

SAMPLES_MAGIC = b"TSMP"


class ShapeError(ValueError):
    pass


@dataclass
class AnalyticSdf:
    kind: str
    params: dict = field(default_factory=dict)
    children: tuple = ()

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.kind == "sphere":
            c = np.asarray(self.params.get("center", (0, 0, 0)), dtype=float)
            return np.linalg.norm(pts - c, axis=1) - self.params["radius"]
        if self.kind == "box":
            c = np.asarray(self.params.get("center", (0, 0, 0)), dtype=float)
            h = np.asarray(self.params["half_extents"], dtype=float)
            q = np.abs(pts - c) - h
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(q.max(axis=1), 0.0)
            return outside + inside
        if self.kind == "torus":
            c = np.asarray(self.params.get("center", (0, 0, 0)), dtype=float)
            big = self.params["major_radius"]
            small = self.params["minor_radius"]
            rel = pts - c
            ring = np.hypot(np.hypot(rel[:, 0], rel[:, 1]) - big, rel[:, 2])
            return ring - small
        if self.kind == "union":
            return np.minimum(self.children[0](pts), self.children[1](pts))
        if self.kind == "intersection":
            return np.maximum(self.children[0](pts), self.children[1](pts))
        if self.kind == "difference":
            return np.maximum(self.children[0](pts), -self.children[1](pts))
        raise ShapeError(f"unknown shape kind {self.kind!r}")

    def bounds(self, pad: float = 0.0):
        if self.kind == "sphere":
            c = np.asarray(self.params.get("center", (0, 0, 0)), dtype=float)
            r = self.params["radius"] + pad
            return c - r, c + r
        if self.kind == "box":
            c = np.asarray(self.params.get("center", (0, 0, 0)), dtype=float)
            h = np.asarray(self.params["half_extents"], dtype=float) + pad
            return c - h, c + h
        if self.kind == "torus":
            c = np.asarray(self.params.get("center", (0, 0, 0)), dtype=float)
            big = self.params["major_radius"]
            small = self.params["minor_radius"]
            h = np.array([big + small, big + small, small]) + pad
            return c - h, c + h
        if self.kind in ("union", "intersection", "difference"):
            lo0, hi0 = self.children[0].bounds(pad)
            lo1, hi1 = self.children[1].bounds(pad)
            if self.kind == "union":
                return np.minimum(lo0, lo1), np.maximum(hi0, hi1)
            return lo0, hi0
        raise ShapeError(self.kind)

    def surface_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "sphere":
            c = np.asarray(self.params.get("center", (0, 0, 0)), dtype=float)
            d = rng.normal(size=(n, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            return c + self.params["radius"] * d
        if self.kind == "box":
            c = np.asarray(self.params.get("center", (0, 0, 0)), dtype=float)
            h = np.asarray(self.params["half_extents"], dtype=float)
            areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
            face_axis = rng.choice(3, size=n, p=areas / areas.sum())
            side = rng.choice((-1.0, 1.0), size=n)
            pts = rng.uniform(-1, 1, size=(n, 3)) * h
            pts[np.arange(n), face_axis] = side * h[face_axis]
            return c + pts
        if self.kind == "torus":
            c = np.asarray(self.params.get("center", (0, 0, 0)), dtype=float)
            big = self.params["major_radius"]
            small = self.params["minor_radius"]
            out = np.empty((0, 3))
            while len(out) < n:
                m = 2 * (n - len(out)) + 16
                theta = rng.uniform(0, 2 * np.pi, m)
                phi = rng.uniform(0, 2 * np.pi, m)
                # area element is proportional to big + small*cos(phi)
                keep = rng.random(m) <= (big + small * np.cos(phi)) / (big + small)
                theta, phi = theta[keep], phi[keep]
                ring = big + small * np.cos(phi)
                pts = np.stack([ring * np.cos(theta), ring * np.sin(theta),
                                small * np.sin(phi)], axis=1)
                out = np.vstack([out, c + pts])
            return out[:n]
        if self.kind in ("union", "intersection", "difference"):
            out = np.empty((0, 3))
            while len(out) < n:
                m = 2 * (n - len(out)) + 16
                cand = np.vstack([ch.surface_points(m // 2 + 1, rng)
                                  for ch in self.children])
                keep = np.abs(self(cand)) <= 1e-12
                out = np.vstack([out, cand[keep]])
            return out[:n]
        raise ShapeError(self.kind)


def make_shape(spec) -> AnalyticSdf:
    """Build a shape from a name or a nested dict spec."""
    if isinstance(spec, AnalyticSdf):
        return spec
    if isinstance(spec, str):
        presets = {
            "sphere": {"kind": "sphere", "radius": 0.3},
            "box": {"kind": "box", "half_extents": [0.3, 0.22, 0.18]},
            "torus": {"kind": "torus", "major_radius": 0.28, "minor_radius": 0.12},
        }
        if spec not in presets:
            raise ShapeError(f"unknown shape preset {spec!r}")
        spec = presets[spec]
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind in ("union", "intersection", "difference"):
        children = tuple(make_shape(s) for s in spec.pop("children"))
        return AnalyticSdf(kind, spec, children)
    if kind not in ("sphere", "box", "torus"):
        raise ShapeError(f"unknown shape kind {kind!r}")
    return AnalyticSdf(kind, spec)


@dataclass
class SampleSet:
    points: np.ndarray              # (n,3) scene coordinates
    targets: np.ndarray             # (n,) exact SDF values
    near_surface: np.ndarray        # (n,) bool split tag
    seed: int = 0


def sample_training(shape: AnalyticSdf, n: int, p_near: float = 0.8,
                    sigma: float = 0.01, seed: int = 0,
                    bounds_pad: float = 0.1) -> SampleSet:
    """Near-surface plus uniform samples with exact SDF targets.

    A fraction p_near of the points are surface samples displaced along a
    random direction by N(0, sigma) noise; the rest are uniform in the
    padded bounding box. Deterministic given the seed.
    """
    if n < 1:
        raise ShapeError("need at least one sample")
    rng = np.random.default_rng(seed)
    n_near = int(round(p_near * n))
    lo, hi = shape.bounds(pad=bounds_pad * _extent(shape))
    pts = np.empty((n, 3))
    if n_near:
        surf = shape.surface_points(n_near, rng)
        d = rng.normal(size=(n_near, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        noisy = surf + d * rng.normal(0.0, sigma, size=(n_near, 1)) if sigma > 0 else surf
        pts[:n_near] = np.clip(noisy, lo, hi)
    if n - n_near:
        pts[n_near:] = rng.uniform(lo, hi, size=(n - n_near, 3))
    targets = shape(pts)
    tags = np.zeros(n, dtype=bool)
    tags[:n_near] = True
    return SampleSet(pts, targets, tags, seed)


def _extent(shape: AnalyticSdf) -> float:
    lo, hi = shape.bounds()
    return float(np.max(hi - lo))


def save_samples(path, samples: SampleSet):
    """Binary dump: magic, version, count, f32 points, f32 targets, u8 tags."""
    with open(path, "wb") as f:
        f.write(SAMPLES_MAGIC)
        f.write(struct.pack("<IQ", 1, len(samples.points)))
        f.write(np.ascontiguousarray(samples.points, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(samples.targets, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(samples.near_surface, dtype=np.uint8).tobytes())


def load_samples(path) -> SampleSet:
    with open(path, "rb") as f:
        if f.read(4) != SAMPLES_MAGIC:
            raise ShapeError(f"{path}: not a sample file")
        version, n = struct.unpack("<IQ", f.read(12))
        if version != 1:
            raise ShapeError(f"{path}: unsupported sample version {version}")
        pts = np.frombuffer(f.read(n * 12), dtype="<f4").reshape(n, 3).astype(float)
        targets = np.frombuffer(f.read(n * 4), dtype="<f4").astype(float)
        tags = np.frombuffer(f.read(n), dtype=np.uint8).astype(bool)
    return SampleSet(pts, targets, tags)


def gt_mesh(shape: AnalyticSdf, resolution: int = 256,
            bounds_pad: float = 0.05) -> Mesh:
    """Marching-cubes reference mesh of the analytic field."""
    if resolution < 16:
        raise ShapeError("ground-truth mesh resolution must be >= 16")
    lo, hi = shape.bounds(pad=bounds_pad * _extent(shape) + 1e-3)
    span = np.max(hi - lo)
    center = 0.5 * (np.asarray(lo) + np.asarray(hi))
    lo = center - span / 2
    hi = center + span / 2
    return evalbench.marching_cubes(shape, resolution, lo=lo, hi=hi)
