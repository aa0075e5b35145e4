import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handmesh.mesh import MeshError, TriMesh, build_adjacency, grid, icosahedron
from handmesh.sampling import (
    MeshHierarchy,
    build_hierarchy,
    build_upsample,
    closest_point_on_triangle,
    decimate,
    halving_sizes,
)


def _segment_closest(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
    return a + t * ab


def closest_on_triangle_oracle(p, a, b, c):
    """Plane projection if it lands inside, otherwise the best of the three edges."""
    n = np.cross(b - a, c - a)
    q = p - np.dot(p - a, n) / np.dot(n, n) * n
    area = np.dot(n, n)
    wa = np.dot(np.cross(b - q, c - q), n) / area
    wb = np.dot(np.cross(c - q, a - q), n) / area
    wc = 1 - wa - wb
    if min(wa, wb, wc) >= 0:
        return q
    cands = [_segment_closest(p, a, b), _segment_closest(p, b, c), _segment_closest(p, c, a)]
    return min(cands, key=lambda x: np.sum((x - p) ** 2))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_closest_point_matches_edge_plane_oracle(seed):
    r = np.random.default_rng(seed)
    a, b, c = r.normal(size=(3, 3))
    p = r.normal(scale=2.0, size=(1, 3))
    d2, bary = closest_point_on_triangle(p, a[None], b[None], c[None])
    got = bary[0, 0] @ np.stack([a, b, c])
    want = closest_on_triangle_oracle(p[0], a, b, c)
    assert np.linalg.norm(got - want) < 1e-9
    assert abs(d2[0, 0] - np.sum((want - p[0]) ** 2)) < 1e-9
    assert (bary >= -1e-12).all() and abs(bary.sum() - 1) < 1e-12


def test_identity_decimation():
    m = icosahedron()
    coarse, keep = decimate(m, 12)
    assert coarse is m
    np.testing.assert_array_equal(keep, np.arange(12))


def test_icosahedron_to_six_keeps_original_positions():
    m = icosahedron()
    coarse, keep = decimate(m, 6)
    assert coarse.n_vertices == 6
    assert len(set(keep.tolist())) == 6
    np.testing.assert_array_equal(coarse.vertices, m.vertices[keep])
    build_adjacency(coarse)  # still manifold


def test_decimate_rejects_bad_target():
    with pytest.raises(ValueError):
        decimate(icosahedron(), 13)


@settings(max_examples=8, deadline=None)
@given(st.integers(4, 8), st.integers(4, 8), st.floats(0.3, 0.9))
def test_grid_decimation_keeps_subset_and_manifold(rows, cols, frac):
    m = grid(rows, cols)
    target = max(4, int(m.n_vertices * frac))
    coarse, keep = decimate(m, target)
    assert coarse.n_vertices == target
    assert (np.diff(keep) > 0).all()
    np.testing.assert_array_equal(coarse.vertices, m.vertices[keep])
    build_adjacency(coarse)


def test_upsample_rows_for_kept_centroid_and_random_points(rng):
    coarse = TriMesh(np.array([[0, 0, 0], [3, 0, 0], [0, 3, 0.0]]), np.array([[0, 1, 2]]))
    fine_v = np.array([[0, 0, 0], [3, 0, 0], [0, 3, 0.0], [1, 1, 0.0], [1, 1, 0.5]])
    fine = TriMesh(fine_v, np.array([[0, 1, 3], [1, 2, 3], [2, 0, 3], [0, 4, 1]]))
    q = build_upsample(fine, coarse, np.array([0, 1, 2])).toarray()
    np.testing.assert_array_equal(q[:3], np.eye(3))
    np.testing.assert_allclose(q[3], [1 / 3, 1 / 3, 1 / 3], atol=1e-15)
    # Off-plane point projects straight down onto the centroid.
    np.testing.assert_allclose(q[4], [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_upsample_reconstructs_projection(assets):
    fine = assets.template
    coarse, keep = decimate(fine, 392)
    q = build_upsample(fine, coarse, keep)
    recon = q @ coarse.vertices
    tri = coarse.vertices[coarse.faces]
    dropped = np.setdiff1d(np.arange(fine.n_vertices), keep)
    rng = np.random.default_rng(0)
    for v in rng.choice(dropped, size=40, replace=False):
        p = fine.vertices[v]
        best = min((closest_on_triangle_oracle(p, *t) for t in tri), key=lambda x: np.sum((x - p) ** 2))
        # Equal distance is what matters when two triangles tie.
        assert abs(np.linalg.norm(recon[v] - p) - np.linalg.norm(best - p)) < 1e-9


def test_empty_coarse_mesh_is_rejected():
    m = icosahedron()
    empty = object.__new__(TriMesh)
    object.__setattr__(empty, "vertices", np.zeros((0, 3)))
    object.__setattr__(empty, "faces", np.zeros((0, 3), dtype=np.int64))
    with pytest.raises(MeshError):
        build_upsample(m, empty, np.array([], dtype=np.int64))


def test_template_hierarchy_invariants(hierarchy, assets):
    assert list(reversed(hierarchy.sizes)) == [778, 392, 197, 100, 51]
    for i, (q, keep) in enumerate(zip(hierarchy.upsample_mats, hierarchy.keep_maps)):
        coarse, fine = hierarchy.levels[i], hierarchy.levels[i + 1]
        assert q.shape == (fine.n_vertices, coarse.n_vertices)
        np.testing.assert_allclose(np.asarray(q.sum(axis=1)).ravel(), 1.0, atol=1e-9)
        assert (q.data >= 0).all() and np.diff(q.indptr).max() <= 3
        np.testing.assert_array_equal(q[keep].toarray(), np.eye(coarse.n_vertices))
        np.testing.assert_array_equal(fine.vertices[keep], coarse.vertices)


def test_upsampled_positions_stay_close_to_fine(hierarchy):
    for i, q in enumerate(hierarchy.upsample_mats):
        coarse, fine = hierarchy.levels[i], hierarchy.levels[i + 1]
        diag = np.linalg.norm(np.ptp(fine.vertices, axis=0))
        err = np.linalg.norm(q @ coarse.vertices - fine.vertices, axis=1).mean()
        assert err < 0.05 * diag


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_upsampling_reproduces_affine_functions_on_planar_grids(seed):
    # On a flat mesh every projection is interior to its plane, so barycentric
    # interpolation of an affine function is exact.
    fine = grid(7, 7)
    h = build_hierarchy(fine, 3)
    r = np.random.default_rng(seed)
    A, b = r.normal(size=(3, 2)), r.normal(size=2)
    q, coarse = h.upsample_mats[-1], h.levels[-2]
    recon = q @ (coarse.vertices @ A + b)
    np.testing.assert_allclose(recon, fine.vertices @ A + b, atol=1e-9)


def test_grid_hierarchy_uses_ceil_halving():
    h = build_hierarchy(grid(7, 7), 3)
    assert list(reversed(h.sizes)) == [49, 25, 13] == halving_sizes(49, 3)


def test_single_level_is_rejected():
    with pytest.raises(ValueError):
        build_hierarchy(grid(3, 3), 1)


def test_hierarchy_round_trip(tmp_path):
    h = build_hierarchy(grid(6, 6), 3)
    h.save(tmp_path / "h")
    names = sorted(p.name for p in (tmp_path / "h").iterdir())
    assert {"level_0.obj", "keep_0.json", "upsample_0.json"} <= set(names)
    back = MeshHierarchy.load(tmp_path / "h")
    assert back.sizes == h.sizes
    for a, b in zip(back.upsample_mats, h.upsample_mats):
        np.testing.assert_array_equal(a.toarray(), b.toarray())
    for a, b in zip(back.keep_maps, h.keep_maps):
        np.testing.assert_array_equal(a, b)


def test_decimation_is_deterministic(assets):
    a = decimate(assets.template, 392)
    b = decimate(assets.template, 392)
    np.testing.assert_array_equal(a[1], b[1])
    np.testing.assert_array_equal(a[0].faces, b[0].faces)
