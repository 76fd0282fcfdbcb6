import math

import numpy as np
import pytest

from steklovhom.geometry import (
    CellGeometry, EpsilonLevel, Mesh, MeshError, Tag, build_cell_mesh, build_disk_mesh,
    build_perforated_domain_mesh, build_square_mesh, mesh_read, mesh_write, mirror_mesh, signed_areas,
)


def _grid_oracle(m, lo, hi):
    """Nodes of the (m+1)^2 grid not strictly inside the removed square [lo, hi]^2 (grid units)."""
    count = 0
    for i in range(m + 1):
        for j in range(m + 1):
            if lo < i < hi and lo < j < hi:
                continue
            count += 1
    return count


def _euler(mesh):
    e = mesh.all_edges()
    return mesh.n_nodes - len(e) + len(mesh.triangles)


def test_square_cell_counts():
    g = CellGeometry("square", (0.5, 0.5), 0.5, 8)
    mesh = build_cell_mesh(g)
    assert mesh.n_nodes == _grid_oracle(8, 2, 6) == 72
    assert len(mesh.edges_with_tag(Tag.HOLE)) == 4 * (8 // 2) == 16
    assert len(mesh.edges_with_tag(Tag.DIRICHLET)) == 0
    for t in (Tag.FACE_LEFT, Tag.FACE_RIGHT, Tag.FACE_BOTTOM, Tag.FACE_TOP):
        assert len(mesh.edges_with_tag(t)) == 8
    assert mesh.areas().sum() == pytest.approx(0.75, abs=1e-10)
    assert _euler(mesh) == 0
    assert len(mesh.hole_loops()) == 1


def test_no_hole_cell():
    mesh = build_cell_mesh(CellGeometry("none", m=4))
    assert (mesh.n_nodes, len(mesh.triangles)) == (25, 32)
    assert len(mesh.edges_with_tag(Tag.HOLE)) == 0
    assert _euler(mesh) == 1


def test_disk_too_large():
    with pytest.raises(MeshError):
        build_cell_mesh(CellGeometry("disk", (0.5, 0.5), 0.45, 8))


@pytest.mark.parametrize("g", [
    CellGeometry("square", (0.5, 0.5), 0.5, 6),
    CellGeometry("square", (0.5, 0.5), 0.3, 8),
    CellGeometry("square", (0.5, 0.5), 0.9, 8),
    CellGeometry("disk", (0.5, 0.5), 0.05, 8),
    CellGeometry("none", m=5),
    CellGeometry("hexagon", m=8),
])
def test_invalid_geometry(g):
    with pytest.raises(MeshError):
        build_cell_mesh(g)


def test_periodic_pairs_and_faces():
    mesh = build_cell_mesh(CellGeometry("square", (0.5, 0.5), 0.5, 8))
    d = mesh.nodes[mesh.ppairs[:, 0]] - mesh.nodes[mesh.ppairs[:, 1]]
    assert np.all(np.isclose(d, [1, 0]).all(axis=1) | np.isclose(d, [0, 1]).all(axis=1))
    left = np.sort(mesh.nodes[mesh.nodes[:, 0] == 0.0][:, 1])
    right = np.sort(mesh.nodes[mesh.nodes[:, 0] == 1.0][:, 1])
    assert np.array_equal(left, right)


@pytest.mark.parametrize("m", [8, 16, 32, 64])
@pytest.mark.parametrize("r", [0.25, 0.3, 0.35])
def test_disk_cell(m, r):
    mesh = build_cell_mesh(CellGeometry("disk", (0.5, 0.5), r, m))
    assert np.all(signed_areas(mesh.nodes, mesh.triangles) > 0)
    loop = mesh.hole_loops()
    assert len(loop) == 1
    p = mesh.nodes[loop[0]] - 0.5
    assert np.allclose(np.hypot(p[:, 0], p[:, 1]), r, atol=1e-12)
    # polygon area by the shoelace formula; the circle/polygon defect bounds the area error
    poly = 0.5 * abs(np.dot(p[:, 0], np.roll(p[:, 1], -1)) - np.dot(p[:, 1], np.roll(p[:, 0], -1)))
    defect = math.pi * r * r - poly
    assert abs(mesh.areas().sum() - (1 - math.pi * r * r)) <= 2 * defect + 1e-12
    assert _euler(mesh) == 0


def test_disk_perimeter_is_chord_sum():
    r, mesh = 0.25, build_cell_mesh(CellGeometry("disk", (0.5, 0.5), 0.25, 16))
    loop = mesh.hole_loops()[0]
    p = mesh.nodes[loop] - 0.5
    ang = np.sort(np.arctan2(p[:, 1], p[:, 0]))
    gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * math.pi]]))
    chord = np.sum(2 * r * np.sin(gaps / 2))
    e = mesh.edges_with_tag(Tag.HOLE)
    per = np.hypot(*(mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]]).T).sum()
    assert per == pytest.approx(chord, abs=1e-12)
    mp = len(loop)
    # equal spacing would give 2 m' r sin(pi/m'); the realized polygon is close to it
    assert per == pytest.approx(2 * mp * r * math.sin(math.pi / mp), rel=1e-2)


def test_domain_tiling_n2():
    g = CellGeometry("square", (0.5, 0.5), 0.5, 8)
    mesh = build_perforated_domain_mesh(g, EpsilonLevel(2))
    assert len(mesh.edges_with_tag(Tag.HOLE)) == 64
    assert len(mesh.edges_with_tag(Tag.DIRICHLET)) == 4 * 2 * 8
    assert len(mesh.hole_loops()) == 4
    assert len(mesh.ppairs) == 0
    assert _euler(mesh) == 1 - 4


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_domain_hole_perimeter(n):
    g = CellGeometry("square", (0.5, 0.5), 0.5, 8)
    mesh = build_perforated_domain_mesh(g, EpsilonLevel(n))
    e = mesh.edges_with_tag(Tag.HOLE)
    per = np.hypot(*(mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]]).T).sum()
    assert per == pytest.approx(n * n * 2.0 / n, abs=1e-12)
    assert mesh.areas().sum() == pytest.approx(0.75, abs=1e-12)


def test_single_tile_is_cell_with_dirichlet_faces():
    g = CellGeometry("square", (0.5, 0.5), 0.5, 8)
    cell = build_cell_mesh(g)
    dom = build_perforated_domain_mesh(g, EpsilonLevel(1), cell=cell)
    assert np.array_equal(dom.nodes, cell.nodes)
    assert np.array_equal(dom.triangles, cell.triangles)
    faces = np.isin(cell.bedges[:, 2], [Tag.FACE_LEFT, Tag.FACE_RIGHT, Tag.FACE_BOTTOM, Tag.FACE_TOP])
    key = lambda b: sorted(map(tuple, np.sort(b[:, :2], axis=1).tolist()))  # noqa: E731
    assert key(dom.edges_with_tag(Tag.DIRICHLET)) == key(cell.bedges[faces])


def test_dof_budget():
    with pytest.raises(MeshError):
        build_perforated_domain_mesh(CellGeometry("square", (0.5, 0.5), 0.5, 8), EpsilonLevel(8), max_dofs=1000)


def test_no_hole_domain_rejected():
    with pytest.raises(MeshError):
        build_perforated_domain_mesh(CellGeometry("none", m=8), EpsilonLevel(2))


def test_epsilon_level():
    assert EpsilonLevel(4).eps == 0.25
    with pytest.raises(MeshError):
        EpsilonLevel(0)


def test_square_mesh_all_dirichlet():
    mesh = build_square_mesh(4)
    assert set(mesh.bedges[:, 2].tolist()) == {int(Tag.DIRICHLET)}
    assert len(mesh.ppairs) == 0


def test_disk_mesh():
    mesh = build_disk_mesh(1.0, rings=10)
    assert mesh.n_nodes == 1 + 3 * 10 * 11
    assert len(mesh.hole_loops()) == 1
    assert mesh.areas().sum() == pytest.approx(0.5 * 60 * math.sin(2 * math.pi / 60), rel=1e-12)


@pytest.mark.parametrize("g", [
    CellGeometry("square", (0.5, 0.5), 0.5, 8), CellGeometry("disk", (0.5, 0.5), 0.3, 16), CellGeometry("none", m=4),
])
def test_round_trip(tmp_path, g):
    mesh = build_cell_mesh(g)
    mesh_write(mesh, tmp_path / "c.mesh")
    back = mesh_read(tmp_path / "c.mesh")
    assert np.array_equal(back.nodes, mesh.nodes)
    assert np.array_equal(back.triangles, mesh.triangles)
    assert np.array_equal(back.bedges, mesh.bedges)
    assert np.array_equal(back.ppairs, mesh.ppairs)
    assert back.checksum() == mesh.checksum()


def _write_and_edit(tmp_path, edit):
    mesh = build_cell_mesh(CellGeometry("none", m=4))
    path = tmp_path / "m.mesh"
    mesh_write(mesh, path)
    lines = path.read_text().splitlines()
    edit(lines, mesh)
    path.write_text("\n".join(lines) + "\n")
    return path


def test_read_rejects_zero_area(tmp_path):
    def edit(lines, mesh):
        i = lines.index(f"tris {len(mesh.triangles)}") + 1
        a, b, c = mesh.triangles[0]
        lines[i] = f"0 {a} {b} {b}"

    with pytest.raises(MeshError):
        mesh_read(_write_and_edit(tmp_path, edit))


def test_read_rejects_bad_periodic_pair(tmp_path):
    def edit(lines, mesh):
        i = lines.index(f"ppairs {len(mesh.ppairs)}") + 1
        s, _ = mesh.ppairs[0]
        lines[i] = f"{s} {s}"

    with pytest.raises(MeshError):
        mesh_read(_write_and_edit(tmp_path, edit))


@pytest.mark.parametrize("bad", ["steklovmesh 2", "garbage"])
def test_read_rejects_header(tmp_path, bad):
    def edit(lines, mesh):
        lines[0] = bad

    with pytest.raises(MeshError):
        mesh_read(_write_and_edit(tmp_path, edit))


def test_read_rejects_truncated(tmp_path):
    def edit(lines, mesh):
        del lines[-3:]

    with pytest.raises(MeshError):
        mesh_read(_write_and_edit(tmp_path, edit))


def test_mirror_mesh_is_valid_reflection():
    mesh = build_cell_mesh(CellGeometry("square", (0.5, 0.5), 0.5, 8))
    mir = mirror_mesh(mesh, 0)
    assert np.allclose(mir.nodes[:, 0], 1 - mesh.nodes[:, 0])
    assert mir.areas().sum() == pytest.approx(0.75)
    assert len(mir.ppairs) == len(mesh.ppairs)


def test_validate_catches_orphans():
    mesh = build_cell_mesh(CellGeometry("none", m=2))
    nodes = np.vstack([mesh.nodes, [[0.5, 0.5]]])
    with pytest.raises(MeshError):
        Mesh(nodes, mesh.triangles, mesh.bedges).validate()
