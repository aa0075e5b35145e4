import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from handmesh import metrics as mt
from handmesh.fitting import project


def random_similarity(r):
    return Rotation.random(random_state=int(r.integers(1 << 31))).as_matrix(), r.uniform(0.3, 3), r.normal(size=3) * 10


def objective(rot, s, t, x, y):
    return float(((s * x @ rot.T + t - y) ** 2).sum())


def best_scale_translation(rot, x, y):
    mx, my = x.mean(0), y.mean(0)
    xr = (x - mx) @ rot.T
    s = float(((y - my) * xr).sum() / (xr ** 2).sum())
    return s, my - s * rot @ mx


# -- alignment ------------------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_exact_similarity_recovered(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(21, 3)) * 20
    rot, s, t = random_similarity(r)
    y = s * x @ rot.T + t
    aligned, tf = mt.rigid_align(x, y)
    assert np.abs(aligned - y).max() < 1e-9
    np.testing.assert_allclose(tf.rotation, rot, atol=1e-9)
    assert tf.scale == pytest.approx(s, rel=1e-9)


def test_identity_alignment(rng):
    x = rng.normal(size=(10, 3))
    aligned, tf = mt.rigid_align(x, x)
    np.testing.assert_allclose(tf.rotation, np.eye(3), atol=1e-12)
    assert tf.scale == pytest.approx(1.0)
    np.testing.assert_allclose(tf.translation, 0, atol=1e-12)
    np.testing.assert_allclose(aligned, x, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_alignment_is_globally_optimal(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(5, 3))
    y = r.normal(size=(5, 3))
    _, tf = mt.rigid_align(x, y)
    best = objective(tf.rotation, tf.scale, tf.translation, x, y)
    # Global sweep over random rotations, then a small-angle grid around the solution.
    for rot in Rotation.random(3000, random_state=seed).as_matrix():
        s, t = best_scale_translation(rot, x, y)
        if s > 0:
            assert objective(rot, s, t, x, y) >= best - 1e-6
    steps = np.linspace(-0.02, 0.02, 9)
    for a in steps:
        for b in steps:
            for c in steps:
                rot = Rotation.from_rotvec([a, b, c]).as_matrix() @ tf.rotation
                s, t = best_scale_translation(rot, x, y)
                assert objective(rot, s, t, x, y) >= best - 1e-6


def test_rigid_only_keeps_unit_scale(rng):
    x = rng.normal(size=(8, 3))
    rot, _, t = random_similarity(rng)
    _, tf = mt.rigid_align(x, 2.0 * x @ rot.T + t, with_scale=False)
    assert tf.scale == 1.0
    np.testing.assert_allclose(tf.rotation, rot, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100_000))
def test_residual_invariant_to_source_similarity(seed):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(2, 12, 3))
    rot, s, t = random_similarity(r)
    a, _ = mt.rigid_align(x, y)
    b, _ = mt.rigid_align(s * x @ rot.T + t, y)
    assert abs(mt.mean_error(a, y) - mt.mean_error(b, y)) < 1e-9


def test_reflections_are_not_used():
    x = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    y = x * [1, 1, -1]
    _, tf = mt.rigid_align(x, y)
    assert np.linalg.det(tf.rotation) == pytest.approx(1.0)


def test_degenerate_alignment_rejected():
    with pytest.raises(mt.AlignmentError):
        mt.rigid_align(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(mt.AlignmentError):
        mt.rigid_align(line, np.random.default_rng(0).normal(size=(5, 3)))
    with pytest.raises(ValueError):
        mt.rigid_align(np.zeros((4, 3)), np.zeros((4, 2)))


# -- mean error ---------------------------------------------------------------------


def test_mean_error_cases(rng):
    x = rng.normal(size=(7, 3))
    assert mt.mean_error(x, x) == 0.0
    assert mt.mean_error([[3.0, 4.0]], [[0.0, 0.0]]) == 5.0
    y = rng.normal(size=(7, 3))
    loop = sum(np.sqrt(sum((x[i, c] - y[i, c]) ** 2 for c in range(3))) for i in range(7)) / 7
    assert mt.mean_error(x, y) == pytest.approx(loop, rel=1e-14)
    with pytest.raises(ValueError):
        mt.mean_error(x, y[:3])


# -- PCK ------------------------------------------------------------------------------


def test_pck_hand_enumerated():
    pred = np.array([[1.0, 0.0], [0.0, 3.0]])
    gt = np.zeros((2, 2))
    curve = mt.pck(pred, gt, [0, 1, 2, 3, 4])
    np.testing.assert_array_equal(curve.values, [0, 0.5, 0.5, 1, 1])
    # Trapezoids: 0.25 + 0.5 + 0.75 + 1 over width 4.
    assert curve.auc == pytest.approx(2.5 / 4)


def test_pck_extremes(rng):
    pred = rng.normal(size=(21, 3))
    gt = pred + rng.normal(size=(21, 3))
    assert mt.pck(pred, gt, [100.0]).values[0] == 1.0
    assert mt.pck(pred, gt, [0.0]).values[0] == 0.0
    perfect = mt.pck_range(gt, gt, dims=3)
    assert perfect.auc == 1.0 and (perfect.values == 1).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([2, 3]))
def test_pck_monotone_and_auc_bounded(seed, dims):
    r = np.random.default_rng(seed)
    pred = r.normal(scale=20, size=(21, dims))
    gt = r.normal(scale=20, size=(21, dims))
    curve = mt.pck_range(pred, gt, dims)
    assert (np.diff(curve.values) >= 0).all()
    assert 0.0 <= curve.auc <= 1.0
    lo, hi = mt.PCK_RANGE_2D if dims == 2 else mt.PCK_RANGE_3D
    assert curve.thresholds[0] == lo and curve.thresholds[-1] == hi


def test_pck_argument_errors():
    with pytest.raises(ValueError):
        mt.pck(np.zeros((2, 2)), np.zeros((2, 2)), [])
    with pytest.raises(ValueError):
        mt.pck(np.zeros((2, 2)), np.zeros((2, 2)), [2, 1])


# -- F-score ---------------------------------------------------------------------------


def test_fscore_identical_and_separated(rng):
    x = rng.normal(size=(50, 3))
    assert mt.fscore(x, x, 0.0) == (1.0, 1.0, 1.0)
    assert mt.fscore(x, x + 100.0, 5.0) == (0.0, 0.0, 0.0)


def test_fscore_asymmetric_instance():
    gt = np.array([[0, 0, 0], [1, 0, 0], [10, 0, 0], [11, 0, 0.0]])
    pred = gt[:2]
    f, p, r = mt.fscore(pred, gt, 0.5)
    assert (p, r) == (1.0, 0.5)
    assert f == pytest.approx(2 / 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.floats(0.1, 3.0))
def test_fscore_symmetric_under_mirroring(seed, d):
    r = np.random.default_rng(seed)
    a = r.normal(size=(30, 3))
    b = r.normal(size=(30, 3))
    f_ab, p_ab, r_ab = mt.fscore(a, b, d)
    f_ba, p_ba, r_ba = mt.fscore(b, a, d)
    assert f_ab == pytest.approx(f_ba) and p_ab == r_ba and r_ab == p_ba


def test_fscore_empty_cloud():
    with pytest.raises(ValueError):
        mt.fscore(np.zeros((0, 3)), np.zeros((3, 3)), 1.0)


# -- orthographic projection -------------------------------------------------------------


def test_ortho_ignores_depth(rng):
    cam = mt.OrthoCamera(2.0, (5.0, -1.0))
    pose = rng.normal(size=(21, 3))
    moved = pose.copy()
    moved[:, 2] += rng.normal(size=21)
    np.testing.assert_array_equal(mt.project_pose_2d(pose, cam), mt.project_pose_2d(moved, cam))


def test_ortho_unit_shift():
    cam = mt.OrthoCamera(1.0, (0.0, 0.0))
    pose = np.zeros((21, 3))
    shifted = pose + [1.0, 0.0, 0.0]
    np.testing.assert_allclose(mt.project_pose_2d(shifted, cam) - mt.project_pose_2d(pose, cam), [[1.0, 0.0]] * 21)


def test_ortho_is_pinhole_limit(rng):
    scale, pp = 0.8, (96.0, 96.0)
    pose = rng.normal(scale=40, size=(21, 3))
    ortho = mt.project_pose_2d(pose, mt.OrthoCamera(scale, pp))

    def gap(focal):
        far = pose + [0.0, 0.0, focal / scale]
        return np.abs(project(far, focal, pp).numpy() - ortho).max()

    # The gap shrinks like 1 / focal.
    assert gap(1e6) < 1e-2
    assert gap(1e6) / gap(1e4) == pytest.approx(1e-2, rel=0.05)
    assert mt.OrthoCamera.from_json(mt.OrthoCamera(scale, pp).to_json()) == mt.OrthoCamera(scale, pp)


def test_evaluate_pair(rng):
    gt = rng.normal(scale=30, size=(778, 3))
    rot, s, t = random_similarity(rng)
    out = mt.evaluate_pair(s * gt @ rot.T + t, gt)
    assert out["aligned_error"] < 1e-9
    assert out["f@5"] == 1.0 and out["f@15"] == 1.0
    assert out["error"] > 0
