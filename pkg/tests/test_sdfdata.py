import numpy as np
import pytest

from tetsurf import sdfdata


class TestSdfEval:
    def test_sphere_outside(self):
        s = sdfdata.make_shape({"kind": "sphere", "radius": 1.0})
        assert s(np.array([[2.0, 0, 0]]))[0] == pytest.approx(1.0, abs=1e-15)

    def test_sphere_center(self):
        s = sdfdata.make_shape({"kind": "sphere", "radius": 1.0})
        assert s(np.zeros((1, 3)))[0] == pytest.approx(-1.0, abs=1e-15)

    def test_box_corner_distance(self):
        s = sdfdata.make_shape({"kind": "box", "half_extents": [1, 1, 1]})
        assert s(np.array([[2.0, 2.0, 0.0]]))[0] == pytest.approx(np.sqrt(2), abs=1e-12)
        # cross-check with dense sampling of the box surface
        rng = np.random.default_rng(0)
        surf = s.surface_points(50_000, rng)
        d = np.linalg.norm(surf - [2, 2, 0], axis=1).min()
        assert d == pytest.approx(np.sqrt(2), abs=2e-2)

    def test_box_inside(self):
        s = sdfdata.make_shape({"kind": "box", "half_extents": [1, 2, 3]})
        assert s(np.zeros((1, 3)))[0] == pytest.approx(-1.0, abs=1e-15)

    def test_torus(self):
        s = sdfdata.make_shape({"kind": "torus", "major_radius": 1.0,
                                "minor_radius": 0.25})
        assert s(np.array([[1.0, 0, 0]]))[0] == pytest.approx(-0.25, abs=1e-15)
        assert s(np.array([[1.25, 0, 0]]))[0] == pytest.approx(0.0, abs=1e-15)
        assert s(np.zeros((1, 3)))[0] == pytest.approx(0.75, abs=1e-15)

    def test_union_is_min(self):
        a = sdfdata.make_shape({"kind": "sphere", "radius": 0.5,
                                "center": [-0.5, 0, 0]})
        b = sdfdata.make_shape({"kind": "sphere", "radius": 0.5,
                                "center": [0.5, 0, 0]})
        u = sdfdata.AnalyticSdf("union", {}, (a, b))
        pts = np.random.default_rng(1).normal(size=(100, 3))
        assert np.allclose(u(pts), np.minimum(a(pts), b(pts)))

    def test_unknown_kind(self):
        with pytest.raises(sdfdata.ShapeError):
            sdfdata.make_shape({"kind": "dodecahedron"})
        with pytest.raises(sdfdata.ShapeError):
            sdfdata.make_shape("nope")

    def test_eikonal_property(self):
        # FD gradient norm ~1 away from the medial axis
        for name in ("sphere", "box", "torus"):
            s = sdfdata.make_shape(name)
            rng = np.random.default_rng(2)
            lo, hi = s.bounds(pad=0.2)
            pts = rng.uniform(lo, hi, size=(800, 3))
            h = 1e-5
            grads = np.stack([
                (s(pts + np.eye(3)[k] * h) - s(pts - np.eye(3)[k] * h)) / (2 * h)
                for k in range(3)], axis=1)
            vals = s(pts)
            keep = np.abs(vals) > 10 * h
            # exclude medial-axis neighborhoods by gradient agreement
            norms = np.linalg.norm(grads[keep], axis=1)
            frac_ok = np.mean(np.abs(norms - 1) < 1e-3)
            assert frac_ok > 0.95

    def test_sign_by_rejection(self):
        # stepping along the outward gradient from the surface gives
        # positive values, stepping inward gives negative ones
        for name in ("sphere", "box", "torus"):
            s = sdfdata.make_shape(name)
            rng = np.random.default_rng(3)
            surf = s.surface_points(2000, rng)
            h = 1e-5
            grads = np.stack([
                (s(surf + np.eye(3)[k] * h) - s(surf - np.eye(3)[k] * h)) / (2 * h)
                for k in range(3)], axis=1)
            grads /= np.maximum(np.linalg.norm(grads, axis=1, keepdims=True), 1e-12)
            step = 0.02
            assert (s(surf + step * grads) > 0).mean() > 0.99
            assert (s(surf - step * grads) < 0).mean() > 0.99


class TestSampling:
    def test_near_fraction(self):
        s = sdfdata.make_shape("sphere")
        ss = sdfdata.sample_training(s, 10_000, p_near=0.8, sigma=0.01, seed=0)
        near = np.abs(ss.targets) <= 3 * 0.01
        assert near[:8000].mean() >= 0.985       # binomial 3-sigma bound
        assert ss.near_surface.sum() == 8000

    def test_zero_sigma_targets_zero(self):
        s = sdfdata.make_shape("sphere")
        ss = sdfdata.sample_training(s, 1000, p_near=1.0, sigma=0.0, seed=1)
        assert np.abs(ss.targets).max() <= 1e-12

    def test_deterministic(self):
        s = sdfdata.make_shape("torus")
        a = sdfdata.sample_training(s, 2000, seed=7)
        b = sdfdata.sample_training(s, 2000, seed=7)
        assert np.array_equal(a.points, b.points)
        assert np.array_equal(a.targets, b.targets)

    def test_targets_exact(self):
        s = sdfdata.make_shape("box")
        ss = sdfdata.sample_training(s, 3000, seed=2)
        assert np.array_equal(ss.targets, s(ss.points))

    def test_rejects_empty(self):
        with pytest.raises(sdfdata.ShapeError):
            sdfdata.sample_training(sdfdata.make_shape("sphere"), 0)


class TestSampleFile:
    def test_roundtrip(self, tmp_path):
        s = sdfdata.make_shape("torus")
        ss = sdfdata.sample_training(s, 500, seed=4)
        path = tmp_path / "samples.bin"
        sdfdata.save_samples(path, ss)
        back = sdfdata.load_samples(path)
        assert np.allclose(back.points, ss.points, atol=1e-6)
        assert np.allclose(back.targets, ss.targets, atol=1e-6)
        assert np.array_equal(back.near_surface, ss.near_surface)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"XXXX" + b"\0" * 16)
        with pytest.raises(sdfdata.ShapeError):
            sdfdata.load_samples(path)


class TestGtMesh:
    def test_sphere_radii(self):
        s = sdfdata.make_shape({"kind": "sphere", "radius": 0.3})
        mesh = sdfdata.gt_mesh(s, resolution=64)
        h = (np.max(mesh.vertices) - np.min(mesh.vertices)) / 64
        radii = np.linalg.norm(mesh.vertices, axis=1)
        assert radii.min() >= 0.3 - 2 * h
        assert radii.max() <= 0.3 + 2 * h

    def test_watertight(self):
        s = sdfdata.make_shape({"kind": "sphere", "radius": 0.3})
        mesh = sdfdata.gt_mesh(s, resolution=48)
        assert mesh.is_closed_manifold()

    def test_resolution_floor(self):
        with pytest.raises(sdfdata.ShapeError):
            sdfdata.gt_mesh(sdfdata.make_shape("sphere"), resolution=8)

    def test_torus_genus(self):
        s = sdfdata.make_shape("torus")
        mesh = sdfdata.gt_mesh(s, resolution=64)
        assert mesh.is_closed_manifold()
        v = len(np.unique(mesh.triangles.ravel()))
        e = len(np.unique(np.sort(np.concatenate([
            mesh.triangles[:, [0, 1]], mesh.triangles[:, [1, 2]],
            mesh.triangles[:, [2, 0]]]), axis=1), axis=0))
        f = mesh.n_triangles
        assert v - e + f == 0                    # Euler characteristic of a torus
