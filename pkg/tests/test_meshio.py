import numpy as np
import pytest

from tetsurf import evalbench as eb
from tetsurf.meshio import Mesh, MeshError, load_mesh, read_obj, read_ply, write_obj, write_ply


@pytest.fixture
def sphere_mesh():
    return eb.marching_cubes(
        lambda p: np.linalg.norm(p - 0.5, axis=1) - 0.3, 16)


class TestMesh:
    def test_bad_triangle_reference(self):
        with pytest.raises(MeshError):
            Mesh(np.zeros((2, 3)), np.array([[0, 1, 2]]))

    def test_areas_and_normals(self):
        m = Mesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.]]),
                 np.array([[0, 1, 2]]))
        assert m.areas()[0] == pytest.approx(0.5)
        assert np.allclose(m.normals()[0], [0, 0, 1])

    def test_manifold_check(self, sphere_mesh):
        assert sphere_mesh.is_closed_manifold()
        open_mesh = Mesh(sphere_mesh.vertices, sphere_mesh.triangles[:-1])
        assert not open_mesh.is_closed_manifold()

    def test_compacted(self):
        m = Mesh(np.array([[0, 0, 0], [9, 9, 9], [1, 0, 0], [0, 1, 0.]]),
                 np.array([[0, 2, 3]]))
        c = m.compacted()
        assert c.n_vertices == 3
        assert c.areas()[0] == pytest.approx(0.5)

    def test_transformed(self):
        m = Mesh(np.array([[1.0, 0, 0]]), np.empty((0, 3), dtype=np.int64))
        rot = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
        t = m.transformed(rot, (0, 0, 1))
        assert np.allclose(t.vertices[0], [0, 1, 1])


class TestObjFormat:
    def test_roundtrip(self, sphere_mesh, tmp_path):
        path = tmp_path / "m.obj"
        write_obj(sphere_mesh, path)
        back = read_obj(path)
        assert np.array_equal(back.vertices, sphere_mesh.vertices)
        assert np.array_equal(back.triangles, sphere_mesh.triangles)

    def test_byte_identical_rewrites(self, sphere_mesh, tmp_path):
        a = tmp_path / "a.obj"
        b = tmp_path / "b.obj"
        write_obj(sphere_mesh, a)
        write_obj(sphere_mesh, b)
        assert a.read_bytes() == b.read_bytes()

    def test_polygon_fan_on_read(self, tmp_path):
        path = tmp_path / "quad.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        mesh = read_obj(path)
        assert mesh.n_triangles == 2


class TestPlyFormat:
    def test_roundtrip(self, sphere_mesh, tmp_path):
        path = tmp_path / "m.ply"
        write_ply(sphere_mesh, path)
        back = read_ply(path)
        assert np.array_equal(back.vertices, sphere_mesh.vertices)
        assert np.array_equal(back.triangles, sphere_mesh.triangles)

    def test_not_ply(self, tmp_path):
        path = tmp_path / "x.ply"
        path.write_bytes(b"hello")
        with pytest.raises(MeshError):
            read_ply(path)

    def test_load_mesh_dispatch(self, sphere_mesh, tmp_path):
        o = tmp_path / "m.obj"
        p = tmp_path / "m.ply"
        write_obj(sphere_mesh, o)
        write_ply(sphere_mesh, p)
        assert load_mesh(o).n_triangles == sphere_mesh.n_triangles
        assert load_mesh(p).n_triangles == sphere_mesh.n_triangles
        with pytest.raises(MeshError):
            load_mesh(tmp_path / "m.stl")
