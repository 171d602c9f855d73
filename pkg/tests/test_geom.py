import math

import numpy as np
import pytest

from src.geom import (
    FeatureGraph,
    GeometryError,
    PointCloud,
    Segment,
    StripMesh,
    Triangle,
    TriMesh,
    dihedral_angle,
    element_centroid,
    make_element,
    read_feature_graph,
    read_obj,
    read_obj_groups,
    read_xyz,
    vertex_degrees,
    write_feature_graph,
    write_obj,
    write_xyz,
)


class TestElements:
    def test_segment_length_and_centroid(self):
        s = Segment([0.0, 0.0], [3.0, 4.0])
        assert s.length == pytest.approx(5.0)
        np.testing.assert_allclose(element_centroid(s), [1.5, 2.0])

    def test_triangle_area_and_diameter(self):
        t = Triangle([0, 0, 0], [2, 0, 0], [0, 2, 0])
        assert t.area == pytest.approx(2.0)
        assert t.diameter == pytest.approx(2.0 * math.sqrt(2.0))

    @pytest.mark.parametrize("n, kind", [(2, Segment), (3, Triangle)])
    def test_make_element(self, n, kind):
        assert isinstance(make_element(np.eye(3)[:n]), kind)

    def test_make_element_rejects_quads(self):
        with pytest.raises(GeometryError):
            make_element(np.zeros((4, 3)))


class TestFeatureGraph:
    def test_degrees(self):
        g = FeatureGraph(np.zeros((4, 2)), [[0, 1], [0, 2], [0, 3]])
        assert vertex_degrees(g) == [3, 1, 1, 1]
        assert g.incident_edges[0] == [0, 1, 2]
        assert g.dim == 2

    @pytest.mark.parametrize(
        "edges",
        [
            [[0, 5]],
            [[1, 1]],
            [[0, 1], [1, 0]],
        ],
        ids=["out-of-range", "self-loop", "duplicate"],
    )
    def test_rejects_malformed_edges(self, edges):
        with pytest.raises(GeometryError):
            FeatureGraph(np.zeros((3, 2)), edges)

    def test_rejects_wrong_color_count(self):
        with pytest.raises(GeometryError):
            FeatureGraph(np.zeros((3, 2)), [[0, 1], [1, 2]], colors=[0])

    def test_rejects_nan_vertices(self):
        with pytest.raises(GeometryError):
            FeatureGraph(np.array([[0.0, np.nan], [1.0, 0.0]]), [[0, 1]])


class TestTriMesh:
    def test_cube_is_closed(self, cube_mesh):
        assert cube_mesh.is_closed()
        assert cube_mesh.face_areas.sum() == pytest.approx(6.0)
        assert len(cube_mesh.edges) == 18

    def test_cube_dihedrals(self, cube_mesh):
        angles = sorted(dihedral_angle(cube_mesh, tuple(e)) for e in cube_mesh.edges)
        np.testing.assert_allclose(angles[:12], math.pi / 2, atol=1e-12)
        np.testing.assert_allclose(angles[12:], math.pi, atol=1e-12)

    def test_boundary_edge_has_no_dihedral(self):
        m = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        assert not m.is_closed()
        with pytest.raises(GeometryError):
            dihedral_angle(m, (0, 1))

    def test_face_index_checked(self):
        with pytest.raises(GeometryError):
            TriMesh(np.zeros((3, 3)), [[0, 1, 3]])


class TestFiles:
    def test_obj_groups_and_lines(self, tmp_path, cube_mesh):
        path = tmp_path / "cube.obj"
        groups = np.arange(12) % 3
        write_obj(path, cube_mesh, groups=groups, comments=["hello=world"], lines=[[0, 1], [2, 3]])
        mesh, read_groups, lines = read_obj_groups(path)
        assert len(mesh.faces) == 12
        assert sorted(read_groups.tolist()) == sorted(groups.tolist())
        np.testing.assert_array_equal(lines, [[0, 1], [2, 3]])
        assert mesh.face_areas.sum() == pytest.approx(6.0)

    def test_obj_polygons_are_fanned(self, tmp_path):
        path = tmp_path / "quad.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        mesh = read_obj(path)
        np.testing.assert_array_equal(mesh.faces, [[0, 1, 2], [0, 2, 3]])

    def test_obj_malformed_record(self, tmp_path):
        path = tmp_path / "bad.obj"
        path.write_text("v 0 0 zero\n")
        with pytest.raises(GeometryError):
            read_obj(path)

    def test_feature_graph_file(self, tmp_path):
        path = tmp_path / "g.fg"
        g = FeatureGraph([[0.0, 0.0], [1.0, 0.5], [2.0, 0.0]], [[0, 1], [1, 2]], colors=[0, 1])
        write_feature_graph(path, g, ["seed=3 config=abc"])
        back, header = read_feature_graph(path)
        np.testing.assert_array_equal(back.vertices, g.vertices)
        np.testing.assert_array_equal(back.colors, [0, 1])
        assert header == {"seed": "3", "config": "abc"}

    @pytest.mark.parametrize(
        "text",
        ["v 0 0\n", "FG 2\nv 0 0 0\n", "FG 2\nv 0 0\nv 1 1\ne 0 1 0\ne 1 0\n", "FG 2\nq 1\n"],
        ids=["no-header", "arity", "partial-colors", "unknown-record"],
    )
    def test_feature_graph_errors(self, tmp_path, text):
        path = tmp_path / "bad.fg"
        path.write_text(text)
        with pytest.raises(GeometryError):
            read_feature_graph(path)

    def test_xyz_normals_are_normalized(self, tmp_path):
        path = tmp_path / "c.xyz"
        path.write_text("0 0 0 0 0 2\n1 0 0 3 0 0\n")
        cloud = read_xyz(path)
        assert cloud.has_normals
        np.testing.assert_allclose(cloud.normals, [[0, 0, 1], [1, 0, 0]])
        write_xyz(tmp_path / "d.xyz", cloud)
        assert len(read_xyz(tmp_path / "d.xyz")) == 2

    def test_xyz_wrong_columns(self, tmp_path):
        path = tmp_path / "c.xyz"
        path.write_text("0 0 0 1\n")
        with pytest.raises(GeometryError):
            read_xyz(path)


class TestPointCloud:
    def test_rejects_non_unit_normals(self):
        with pytest.raises(GeometryError):
            PointCloud(np.zeros((1, 3)), np.array([[0.0, 0.0, 2.0]]))

    def test_rejects_normal_count_mismatch(self):
        with pytest.raises(GeometryError):
            PointCloud(np.zeros((2, 3)), np.array([[0.0, 0.0, 1.0]]))


class TestStripMesh:
    def test_needs_one_source_per_face(self, cube_mesh):
        with pytest.raises(GeometryError):
            StripMesh(cube_mesh, np.zeros(3))
