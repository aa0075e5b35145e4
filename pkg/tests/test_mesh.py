import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handmesh.mesh import (
    MeshError,
    NonManifoldError,
    TriMesh,
    boundary_edges,
    build_adjacency,
    edge_set,
    euler_characteristic,
    face_normals,
    grid,
    icosahedron,
    load_mesh,
    save_mesh,
    signed_volume,
    tetrahedron,
)


def test_closed_solids_have_euler_characteristic_two():
    for m in (tetrahedron(), icosahedron()):
        assert euler_characteristic(m) == 2
        assert len(boundary_edges(m)) == 0


def test_outward_winding_gives_positive_volume():
    assert signed_volume(tetrahedron()) > 0
    assert signed_volume(icosahedron()) > 0


def test_icosahedron_rings_are_closed_five_cycles():
    adj = build_adjacency(icosahedron())
    assert (adj.valence() == 5).all()
    assert not adj.boundary.any()


def test_ring_order_is_counter_clockwise_about_the_normal():
    m = icosahedron()
    adj = build_adjacency(m)
    for v, ring in enumerate(adj.rings):
        p = m.vertices
        n = p[v] / np.linalg.norm(p[v])
        for a, b in zip(ring, ring[1:] + ring[:1]):
            assert np.dot(np.cross(p[a] - p[v], p[b] - p[v]), n) > 0


def test_grid_boundary_chains():
    m = grid(4, 5)
    adj = build_adjacency(m)
    interior = [r * 5 + c for r in range(1, 3) for c in range(1, 4)]
    assert (adj.valence()[interior] == 6).all()
    assert adj.boundary.sum() == 2 * 4 + 2 * 5 - 4
    # A boundary chain runs between the two boundary neighbors.
    corner = adj.rings[0]
    assert adj.boundary[corner[0]] and adj.boundary[corner[-1]]


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 7), st.integers(2, 7))
def test_grid_counts_match_euler_formula(rows, cols):
    m = grid(rows, cols)
    assert m.n_vertices == rows * cols
    assert m.n_faces == 2 * (rows - 1) * (cols - 1)
    assert euler_characteristic(m) == 1
    e = edge_set(m)
    assert len(e) == len({tuple(x) for x in e.tolist()})
    assert (e[:, 0] < e[:, 1]).all()


def test_face_normals_of_grid_point_up():
    n = face_normals(grid(3, 3).vertices, grid(3, 3).faces)
    np.testing.assert_allclose(n, np.tile([0, 0, 1.0], (len(n), 1)))


def test_obj_round_trip_is_exact(tmp_path, rng):
    m = icosahedron().with_vertices(icosahedron().vertices + rng.normal(scale=1e-3, size=(12, 3)))
    save_mesh(m, tmp_path / "m.obj")
    back = load_mesh(tmp_path / "m.obj")
    np.testing.assert_array_equal(back.vertices, m.vertices)
    np.testing.assert_array_equal(back.faces, m.faces)


def test_obj_reader_takes_slash_indices_and_ignores_other_records(tmp_path):
    (tmp_path / "t.obj").write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nf 1/1 2/1 3/1\n", encoding="utf-8")
    m = load_mesh(tmp_path / "t.obj")
    assert (m.n_vertices, m.n_faces) == (3, 1)


def test_obj_quad_is_rejected_with_line_number(tmp_path):
    (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n", encoding="utf-8")
    with pytest.raises(MeshError, match=":5:"):
        load_mesh(tmp_path / "q.obj")


def test_obj_bad_number_is_rejected_with_line_number(tmp_path):
    (tmp_path / "b.obj").write_text("v 0 0 0\nv 1 x 0\nv 0 1 0\nf 1 2 3\n", encoding="utf-8")
    with pytest.raises(MeshError, match=":2:"):
        load_mesh(tmp_path / "b.obj")


def test_saving_an_empty_mesh_fails(tmp_path):
    with pytest.raises(MeshError):
        _save_empty(tmp_path)


def _save_empty(tmp_path):
    m = object.__new__(TriMesh)
    object.__setattr__(m, "vertices", np.zeros((0, 3)))
    object.__setattr__(m, "faces", np.zeros((0, 3), dtype=np.int64))
    save_mesh(m, tmp_path / "e.obj")


def test_template_writes_one_v_line_per_vertex(assets, tmp_path):
    save_mesh(assets.template, tmp_path / "t.obj")
    lines = (tmp_path / "t.obj").read_text().splitlines()
    assert sum(1 for ln in lines if ln.startswith("v ")) == 778


def test_small_edge_counts():
    tri = TriMesh(np.eye(3), np.array([[0, 1, 2]]))
    assert len(edge_set(tri)) == 3
    assert len(edge_set(tetrahedron())) == 6
    assert len(edge_set(icosahedron())) == 30


def test_tetrahedron_ring_matches_face_enumeration():
    adj = build_adjacency(tetrahedron())
    assert (adj.valence() == 3).all()
    # Around vertex 0 the CCW faces (0,1,2), (0,3,1), (0,2,3) chain 1 -> 2 -> 3.
    ring = adj.rings[0]
    i = ring.index(1)
    assert ring[i:] + ring[:i] == (1, 2, 3)


def _cyclic_equal(a, b):
    if len(a) != len(b):
        return False
    if not a:
        return True
    i = b.index(a[0]) if a[0] in b else -1
    return i >= 0 and tuple(b[i:] + b[:i]) == tuple(a)


@settings(max_examples=20, deadline=None)
@given(st.randoms(use_true_random=False))
def test_rings_do_not_depend_on_face_order(rnd):
    m = icosahedron()
    faces = m.faces.tolist()
    rnd.shuffle(faces)
    faces = [f[k:] + f[:k] for f, k in zip(faces, [rnd.randrange(3) for _ in faces])]
    a = build_adjacency(m)
    b = build_adjacency(TriMesh(m.vertices, np.array(faces)))
    for ra, rb in zip(a.rings, b.rings):
        assert _cyclic_equal(ra, rb)


@pytest.mark.parametrize(
    "faces",
    [
        [[0, 1, 1]],  # degenerate
        [[0, 1, 5]],  # out of range
    ],
)
def test_invalid_faces_raise(faces):
    with pytest.raises(MeshError):
        TriMesh(np.eye(3), np.array(faces))


def test_non_manifold_vertex_is_reported():
    # Two triangles sharing only vertex 0 form two fans around it.
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]], dtype=float)
    f = np.array([[0, 1, 2], [0, 3, 4]])
    with pytest.raises(NonManifoldError) as exc:
        build_adjacency(TriMesh(v, f))
    assert exc.value.vertex == 0
