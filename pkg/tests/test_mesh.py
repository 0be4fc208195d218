import math

import numpy as np
import pytest

from gccns.mesh import (ChannelGeometry, Marker, Mesh, MeshError, MeshParseError, circle_facets,
                        generate_channel_cylinder, generate_unit_square, read_mesh, refine_uniform,
                        write_mesh)


def test_unit_square_counts():
    m = generate_unit_square(2)
    assert m.n_cells == 4 and m.n_nodes == 9
    assert m.h == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    assert len(m.facets) == 8
    assert np.all(m.facets[:, 2] == Marker.WALL)


@pytest.mark.parametrize("bad", [0, -1, 1.5])
def test_unit_square_rejects_bad_n(bad):
    with pytest.raises(ValueError):
        generate_unit_square(bad)


def test_refinement_matches_direct_generation():
    fine = refine_uniform(generate_unit_square(2))
    assert fine.same_as(generate_unit_square(4))


def test_refinement_quadruples_and_halves():
    m = generate_unit_square(3)
    f = refine_uniform(m)
    assert f.n_cells == 4 * m.n_cells
    assert f.h == pytest.approx(m.h / 2, rel=1e-14)


@pytest.mark.parametrize("mesh", [generate_unit_square(3), generate_channel_cylinder()])
def test_closed_boundary_normal_sum(mesh):
    s = (mesh.facet_normals() * mesh.facet_lengths()[:, None]).sum(axis=0)
    assert np.all(np.abs(s) <= 1e-12)


def test_normals_are_outward_on_square():
    m = generate_unit_square(2)
    a, b = m.facet_endpoints()
    mid = 0.5 * (a + b)
    n = m.facet_normals()
    # moving a bit along the normal leaves the unit square
    out = mid + 1e-3 * n
    assert np.all(((out < 0) | (out > 1)).any(axis=1))


def test_channel_mesh_geometry():
    geom = ChannelGeometry()
    m = generate_channel_cylinder(geom, 0)
    m.validate()
    assert np.all(m.vertex_jacobians() > 0)
    d = np.hypot(m.nodes[:, 0] - 0.2, m.nodes[:, 1] - 0.2)
    ring = np.abs(d - geom.radius) < 0.2 * geom.radius
    assert ring.sum() > 0
    assert np.all(np.abs(d[ring] - geom.radius) <= 1e-12 * geom.radius)
    inflow = m.facets_with(Marker.INFLOW)
    a, b = m.facet_endpoints(inflow)
    assert np.all(a[:, 0] == 0.0) and np.all(b[:, 0] == 0.0)
    a, b = m.facet_endpoints(m.facets_with(Marker.OUTFLOW))
    assert np.all(a[:, 0] == geom.length) and np.all(b[:, 0] == geom.length)
    assert len(circle_facets(m)) > 0


def test_channel_refinement_keeps_circle():
    geom = ChannelGeometry()
    m = refine_uniform(generate_channel_cylinder(geom, 0))
    d = np.hypot(m.nodes[:, 0] - 0.2, m.nodes[:, 1] - 0.2)
    ring = np.abs(d - geom.radius) < 0.1 * geom.radius
    assert np.all(np.abs(d[ring] - geom.radius) <= 1e-12 * geom.radius)
    assert len(circle_facets(m)) == 2 * len(circle_facets(generate_channel_cylinder(geom, 0)))


@pytest.mark.parametrize("geom", [ChannelGeometry(radius=0.25), ChannelGeometry(center=(0.04, 0.2))])
def test_channel_rejects_obstacle_on_wall(geom):
    with pytest.raises(MeshError):
        generate_channel_cylinder(geom)


def test_round_trip(tmp_path):
    for m in (generate_unit_square(2), generate_channel_cylinder()):
        p = tmp_path / "m.txt"
        write_mesh(m, p)
        back = read_mesh(p)
        assert np.array_equal(back.nodes, m.nodes)
        assert np.array_equal(back.cells, m.cells)
        assert np.array_equal(back.facets, m.facets)


def test_read_rejects_bad_node_index(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("quadmesh 1\nnodes 4\n0 0\n1 0\n1 1\n0 1\ncells 1\n0 1 2 7\nfacets 0\n")
    with pytest.raises(MeshParseError) as e:
        read_mesh(p)
    assert e.value.lineno == 8


def test_read_rejects_unmarked_boundary(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("quadmesh 1\nnodes 4\n0 0\n1 0\n1 1\n0 1\ncells 1\n0 1 2 3\nfacets 3\n"
                 "0 0 wall\n0 1 wall\n0 2 wall\n")
    with pytest.raises(MeshError) as e:
        read_mesh(p)
    assert not isinstance(e.value, MeshParseError)


@pytest.mark.parametrize("text, line", [
    ("quadmesh 2\n", 1),
    ("quadmesh 1\nnodes 1\n0\n", 3),
    ("quadmesh 1\nnodes 4\n0 0\n1 0\n1 1\n0 1\ncells 1\n0 1 2 3\nfacets 1\n0 0 sideways\n", 10),
    ("quadmesh 1\nnodes 4\n0 0\n1 0\n1 1\n0 1\ncells 1\n0 1 2 3\n", 9),
])
def test_parse_errors_carry_line_numbers(tmp_path, text, line):
    p = tmp_path / "bad.txt"
    p.write_text(text)
    with pytest.raises(MeshParseError) as e:
        read_mesh(p)
    assert e.value.lineno == line


def test_inverted_cell_rejected():
    m = generate_unit_square(1)
    bad = Mesh(m.nodes, m.cells[:, ::-1], m.facets)
    with pytest.raises(MeshError):
        bad.validate()
