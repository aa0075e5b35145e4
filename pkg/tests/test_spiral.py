import json
from collections import deque

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from handmesh import autodiff as ad
from handmesh.mesh import TriMesh, build_adjacency, edge_set, grid, icosahedron, tetrahedron
from handmesh.spiral import (
    PAD,
    SpiralTable,
    build_spiral_table,
    compute_rings,
    default_spiral_length,
    spiral_conv,
    spiral_gather,
)

MESHES = {"tetrahedron": tetrahedron, "icosahedron": icosahedron, "grid7": lambda: grid(7, 7)}


def bfs_levels(mesh, v, k):
    """Plain BFS over the undirected edge list: distance of every reached vertex."""
    nbrs = {i: set() for i in range(mesh.n_vertices)}
    for a, b in edge_set(mesh).tolist():
        nbrs[a].add(b)
        nbrs[b].add(a)
    dist = {v: 0}
    q = deque([v])
    while q:
        u = q.popleft()
        if dist[u] == k:
            continue
        for w in nbrs[u]:
            if w not in dist:
                dist[w] = dist[u] + 1
                q.append(w)
    return [{u for u, d in dist.items() if d == r} for r in range(k + 1)]


@pytest.mark.parametrize("name", sorted(MESHES))
@pytest.mark.parametrize("k", [0, 1, 2, 3])
def test_rings_equal_bfs_levels(name, k):
    mesh = MESHES[name]()
    adj = build_adjacency(mesh)
    for v in range(mesh.n_vertices):
        assert compute_rings(adj, v, k) == bfs_levels(mesh, v, k)


def test_small_ring_examples():
    adj = build_adjacency(tetrahedron())
    assert compute_rings(adj, 0, 1) == [{0}, {1, 2, 3}]
    assert compute_rings(adj, 0, 2)[2] == set()
    ico = build_adjacency(icosahedron())
    for v in range(12):
        r = compute_rings(ico, v, 2)
        assert (len(r[1]), len(r[2])) == (5, 5)


def test_invalid_vertex_raises():
    with pytest.raises(IndexError):
        compute_rings(build_adjacency(tetrahedron()), 4, 1)


def _check_table_invariants(mesh, table, k):
    adj = build_adjacency(mesh)
    for v, row in enumerate(table.spirals.tolist()):
        assert row[0] == v
        real = [x for x in row if x != PAD]
        assert real == row[: len(real)], "pads only at the tail"
        assert len(set(real)) == len(real)
        rings = compute_rings(adj, v, k)
        ring_of = {u: r for r, members in enumerate(rings) for u in members}
        assert all(u in ring_of for u in real)
        order = [ring_of[u] for u in real]
        assert order == sorted(order)


@pytest.mark.parametrize("name", sorted(MESHES))
@pytest.mark.parametrize("seed", [0, 3])
def test_table_invariants_on_fixtures(name, seed):
    mesh = MESHES[name]()
    table = build_spiral_table(build_adjacency(mesh), 2, 16, seed)
    _check_table_invariants(mesh, table, 2)


def test_table_invariants_on_template(assets):
    adj = build_adjacency(assets.template)
    L = default_spiral_length(adj, 2)
    _check_table_invariants(assets.template, build_spiral_table(adj, 2, L, 0), 2)


def test_grid_interior_row_has_full_first_ring_and_truncated_second():
    mesh = grid(7, 7)
    adj = build_adjacency(mesh)
    table = build_spiral_table(adj, 2, 16, 0)
    v = 3 * 7 + 3
    row = table.spirals[v].tolist()
    rings = compute_rings(adj, v, 2)
    assert PAD not in row
    assert set(row[1:7]) == rings[1]
    assert len(rings[2]) == 12 and set(row[7:]) <= rings[2] and len(row[7:]) == 9


def test_tetrahedron_row_is_padded():
    table = build_spiral_table(build_adjacency(tetrahedron()), 2, 16, 0)
    row = table.spirals[0].tolist()
    assert row[0] == 0 and set(row[1:4]) == {1, 2, 3} and row[4:] == [PAD] * 12


def test_first_ring_follows_the_cyclic_order():
    adj = build_adjacency(icosahedron())
    table = build_spiral_table(adj, 1, 6, 5)
    for v in range(12):
        ring = list(adj.rings[v])
        first = table.spirals[v, 1]
        i = ring.index(first)
        assert table.spirals[v, 1:].tolist() == ring[i:] + ring[:i]


def test_seed_changes_only_the_start():
    adj = build_adjacency(icosahedron())
    rows = {s: build_spiral_table(adj, 1, 6, s).spirals for s in range(6)}
    starts = {tuple(rows[s][:, 1]) for s in rows}
    assert len(starts) > 1
    for s in rows:
        for v in range(12):
            assert set(rows[s][v]) == set(rows[0][v])


@settings(max_examples=10, deadline=None)
@given(st.randoms(use_true_random=False), st.integers(0, 50))
def test_face_order_does_not_change_tables(rnd, seed):
    mesh = grid(5, 6)
    faces = mesh.faces.tolist()
    rnd.shuffle(faces)
    faces = [f[k:] + f[:k] for f, k in zip(faces, [rnd.randrange(3) for _ in faces])]
    a = build_spiral_table(build_adjacency(mesh), 2, 12, seed)
    b = build_spiral_table(build_adjacency(TriMesh(mesh.vertices, np.array(faces))), 2, 12, seed)
    np.testing.assert_array_equal(a.spirals, b.spirals)


def test_json_round_trip(tmp_path):
    t = build_spiral_table(build_adjacency(grid(4, 4)), 2, 10, 9)
    t.save(tmp_path / "s.json")
    back = SpiralTable.load(tmp_path / "s.json")
    np.testing.assert_array_equal(back.spirals, t.spirals)
    assert (back.k, back.seed, back.length) == (2, 9, 10)
    assert set(json.loads((tmp_path / "s.json").read_text())) == {"k", "L", "seed", "rows"}


def test_default_length_from_mean_valence():
    adj = build_adjacency(icosahedron())
    assert default_spiral_length(adj, 2) == 1 + 5 + 10
    assert default_spiral_length(adj, 1) == 6


# -- gather and convolution --------------------------------------------------


def gather_loop(f, spirals):
    n, L = spirals.shape
    out = np.zeros((n, L, f.shape[1]))
    for v in range(n):
        for l in range(L):
            if spirals[v, l] != PAD:
                out[v, l] = f[spirals[v, l]]
    return out


def conv_sum_form(f, spirals, weights, bias):
    """(f * g)_v = sum_l g_l f(S_l(v)) with g_l the (d_in, d_out) block for position l."""
    n, L = spirals.shape
    d_in = f.shape[1]
    g = weights.reshape(L, d_in, -1)
    out = np.tile(bias, (n, 1)).astype(float)
    for v in range(n):
        for l in range(L):
            s = spirals[v, l]
            if s != PAD:
                out[v] += f[s] @ g[l]
    return out


def test_gather_matches_loop_and_pads_read_zero(rng):
    table = build_spiral_table(build_adjacency(tetrahedron()), 2, 7, 0)
    f = rng.normal(size=(4, 3))
    got = spiral_gather(f, table).numpy()
    np.testing.assert_array_equal(got, gather_loop(f, table.spirals))
    assert (got[:, 4:] == 0).all()
    onehot = spiral_gather(np.eye(4), table).numpy()
    np.testing.assert_array_equal(onehot[:, 0], np.eye(4))


def test_conv_delta_kernel_and_bias_only(rng):
    table = build_spiral_table(build_adjacency(grid(4, 4)), 2, 9, 0)
    f = rng.normal(size=(16, 3))
    w = np.zeros((9 * 3, 3))
    w[:3] = np.eye(3)
    np.testing.assert_allclose(spiral_conv(f, table, w).numpy(), f)
    b = rng.normal(size=5)
    out = spiral_conv(f, table, np.zeros((27, 5)), b).numpy()
    np.testing.assert_array_equal(out, np.tile(b, (16, 1)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(sorted(MESHES)), st.integers(1, 20))
def test_conv_matches_sum_form(seed, name, L):
    r = np.random.default_rng(seed)
    mesh = MESHES[name]()
    table = build_spiral_table(build_adjacency(mesh), 2, L, seed % 7)
    d_in, d_out = r.integers(1, 5, size=2)
    f = r.normal(size=(mesh.n_vertices, d_in))
    w = r.normal(size=(L * d_in, d_out))
    b = r.normal(size=d_out)
    got = spiral_conv(f, table, w, b).numpy()
    assert np.abs(got - conv_sum_form(f, table.spirals, w, b)).max() < 1e-10


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_conv_is_linear_in_features(seed, alpha):
    r = np.random.default_rng(seed)
    table = build_spiral_table(build_adjacency(icosahedron()), 2, 11, 0)
    f1, f2 = r.normal(size=(2, 12, 4))
    w = r.normal(size=(44, 3))
    lhs = spiral_conv(alpha * f1 + f2, table, w).numpy()
    rhs = alpha * spiral_conv(f1, table, w).numpy() + spiral_conv(f2, table, w).numpy()
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_conv_batched_equals_per_sample(rng):
    table = build_spiral_table(build_adjacency(grid(3, 4)), 2, 8, 1)
    f = rng.normal(size=(3, 12, 2))
    w = rng.normal(size=(16, 4))
    batched = spiral_conv(f, table, w).numpy()
    for i in range(3):
        np.testing.assert_array_equal(batched[i], spiral_conv(f[i], table, w).numpy())


def test_conv_gradients_match_finite_differences(rng):
    table = build_spiral_table(build_adjacency(icosahedron()), 2, 9, 0)
    f0 = rng.normal(size=(12, 2))
    w0 = rng.normal(size=(18, 3))
    c = rng.normal(size=(12, 3))

    def loss(f, w):
        return (torch.tanh(spiral_conv(f, table, w)) * torch.as_tensor(c)).sum()

    f = torch.tensor(f0, requires_grad=True)
    w = torch.tensor(w0, requires_grad=True)
    gf, gw = ad.backward(loss(f, w), [f, w])
    nf = ad.numerical_grad(lambda x: float(loss(torch.as_tensor(x), torch.as_tensor(w0))), f0)
    nw = ad.numerical_grad(lambda x: float(loss(torch.as_tensor(f0), torch.as_tensor(x))), w0)
    assert ad.grad_close(gf.numpy(), nf)
    assert ad.grad_close(gw.numpy(), nw)


def test_shape_mismatches_raise(rng):
    table = build_spiral_table(build_adjacency(tetrahedron()), 1, 4, 0)
    with pytest.raises(ValueError):
        spiral_gather(rng.normal(size=(5, 2)), table)
    with pytest.raises(ValueError):
        spiral_conv(rng.normal(size=(4, 2)), table, rng.normal(size=(7, 2)))
