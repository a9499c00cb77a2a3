import itertools
import math

import numpy as np
import pytest

from viewtoken.geometry import (
    CameraPose,
    NormalizationStats,
    SphericalRanges,
    classify_view,
    fit_normalization,
    hull_contains,
    invert_pose_vector,
    look_at_matrix,
    to_pose_vector,
)

from conftest import TRAIN_VIEWS_9, make_camera_rig


# ---------------------------------------------------------------------------
# Brute-force hull-membership oracle: a point is in the convex hull of P iff
# it lies in some triangle (or degenerate segment/point) over P; membership is
# tested with barycentric coordinates only. Independent of the monotone-chain
# implementation under test.
# ---------------------------------------------------------------------------


def _in_triangle(q, a, b, c, eps):
    d = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1])
    if abs(d) < eps:
        return _on_segment(q, a, b, eps) or _on_segment(q, b, c, eps) or _on_segment(q, a, c, eps)
    l1 = ((b[1] - c[1]) * (q[0] - c[0]) + (c[0] - b[0]) * (q[1] - c[1])) / d
    l2 = ((c[1] - a[1]) * (q[0] - c[0]) + (a[0] - c[0]) * (q[1] - c[1])) / d
    l3 = 1.0 - l1 - l2
    slack = eps / max(abs(d), 1e-300)
    return l1 >= -slack and l2 >= -slack and l3 >= -slack


def _on_segment(q, a, b, eps):
    ab = np.asarray(b) - np.asarray(a)
    L2 = float(ab @ ab)
    if L2 < eps * eps:
        return float(np.linalg.norm(np.asarray(q) - np.asarray(a))) <= eps
    t = float((np.asarray(q) - np.asarray(a)) @ ab) / L2
    t = min(1.0, max(0.0, t))
    return float(np.linalg.norm(np.asarray(a) + t * ab - np.asarray(q))) <= eps


def hull_oracle(points, query, eps=1e-9):
    pts = [tuple(p) for p in np.asarray(points, dtype=float)]
    q = tuple(np.asarray(query, dtype=float))
    if len(pts) == 1:
        return _on_segment(q, pts[0], pts[0], eps)
    if len(pts) == 2:
        return _on_segment(q, pts[0], pts[1], eps)
    return any(_in_triangle(q, a, b, c, eps) for a, b, c in itertools.combinations(pts, 3))


# ---------------------------------------------------------------------------
# fit_normalization
# ---------------------------------------------------------------------------


def test_fit_requires_two_poses(camera_rig):
    with pytest.raises(ValueError, match="insufficient poses"):
        fit_normalization(camera_rig[:1])


def test_fit_rejects_mixed_kinds(camera_rig):
    spherical = CameraPose.from_spherical(1.0, 2.0, 4.0)
    with pytest.raises(ValueError, match="mixed parameterizations"):
        fit_normalization([camera_rig[0], spherical])


def test_identical_entry_flagged_constant(camera_rig):
    # two poses identical in every entry of the translation column
    m = camera_rig[0].matrix.copy()
    m2 = m.copy()
    m2[0, 0] += 0.25  # vary one rotation entry so not all are constant
    stats = fit_normalization([CameraPose.from_matrix(m), CameraPose.from_matrix(m2)])
    mask = stats.constant_mask
    assert not mask[0]  # the varied entry
    assert mask[1:].all()  # everything else identical


def test_min_max_span():
    base = np.eye(4)
    a = base.copy()
    a[0, 3] = -2.0
    b = base.copy()
    b[0, 3] = 5.0
    stats = fit_normalization([CameraPose.from_matrix(a), CameraPose.from_matrix(b)])
    # entry 3 is row 0, col 3
    assert stats.entry_min[3] == -2.0
    assert stats.entry_max[3] == 5.0


def test_rig_min_max_matches_bruteforce(camera_rig):
    stats = fit_normalization(camera_rig, source_split="all-49")
    # oracle: explicit scan over the 12 free entries of every camera
    lo = np.full(12, np.inf)
    hi = np.full(12, -np.inf)
    for pose in camera_rig:
        e = pose.matrix[:3, :].reshape(12)
        lo = np.minimum(lo, e)
        hi = np.maximum(hi, e)
    np.testing.assert_array_equal(stats.entry_min, lo)
    np.testing.assert_array_equal(stats.entry_max, hi)


# ---------------------------------------------------------------------------
# to_pose_vector
# ---------------------------------------------------------------------------


def test_affine_boundaries(camera_rig):
    stats = fit_normalization(camera_rig)
    hi_pose = CameraPose.from_matrix(
        np.vstack([stats.entry_max.reshape(3, 4), [0, 0, 0, 1]])
    )
    vec = to_pose_vector(hi_pose, stats)
    varying = ~stats.constant_mask
    np.testing.assert_allclose(vec.values[varying], 1.0)
    mid = (stats.entry_min + stats.entry_max) / 2.0
    mid_pose = CameraPose.from_matrix(np.vstack([mid.reshape(3, 4), [0, 0, 0, 1]]))
    np.testing.assert_allclose(to_pose_vector(mid_pose, stats).values[varying], 0.0, atol=1e-15)


def test_constant_entries_map_to_zero():
    stats = NormalizationStats(entry_min=np.zeros(12), entry_max=np.zeros(12))
    pose = CameraPose.from_matrix(np.eye(4))
    vec = to_pose_vector(pose, stats)
    np.testing.assert_array_equal(vec.values, np.zeros(12))


def test_out_of_range_clamps_with_flag(camera_rig):
    stats = fit_normalization(camera_rig[:5])
    wild = camera_rig[0].matrix.copy()
    wild[0, 3] = 100.0
    vec = to_pose_vector(CameraPose.from_matrix(wild), stats)
    assert vec.clamped
    assert vec.values.min() >= -1.0 and vec.values.max() <= 1.0


def test_heldout_views_within_train_stats():
    # Train-split stats must cover held-out test views without clamping when
    # the train views bracket the rig. Rig: a smooth sweep between two anchor
    # cameras, so every matrix entry is monotone along the path and attains
    # its extremes at views 0 and 48, both in the 9-view train list.
    a = look_at_matrix(math.radians(55), math.radians(10), 4.0)
    b = look_at_matrix(math.radians(85), math.radians(170), 4.0)
    rig = []
    for i in range(49):
        f = i / 48.0
        s = f * f * (3 - 2 * f)  # smoothstep
        rig.append(CameraPose.from_matrix(a + s * (b - a)))
    train = [rig[i] for i in TRAIN_VIEWS_9]
    stats = fit_normalization(train, source_split="train-9")
    for i, pose in enumerate(rig):
        if i in TRAIN_VIEWS_9:
            continue
        vec = to_pose_vector(pose, stats)
        assert not vec.clamped, f"view {i} clamped"
        assert np.all(np.abs(vec.values) <= 1.0)


def test_round_trip_exact(camera_rig):
    stats = fit_normalization(camera_rig)
    for pose in camera_rig[::7]:
        vec = to_pose_vector(pose, stats)
        back = invert_pose_vector(vec, stats)
        np.testing.assert_allclose(back, pose.free_entries(), rtol=0, atol=1e-12)


def test_monotone_per_entry(camera_rig):
    stats = fit_normalization(camera_rig)
    lo, hi = stats.entry_min.copy(), stats.entry_max.copy()
    xs = np.linspace(0, 1, 7)
    prev = None
    for x in xs:
        entries = lo + x * (hi - lo)
        pose = CameraPose.from_matrix(np.vstack([entries.reshape(3, 4), [0, 0, 0, 1]]))
        v = to_pose_vector(pose, stats).values
        if prev is not None:
            assert np.all(v >= prev - 1e-15)
        prev = v


def test_spherical_pose_vector():
    ranges = SphericalRanges()
    pose = CameraPose.from_spherical(math.pi / 2, math.pi, 4.0)
    vec = to_pose_vector(pose, ranges)
    assert vec.values.shape == (2,)
    np.testing.assert_allclose(vec.values, [0.0, 0.0], atol=1e-15)
    assert not vec.clamped
    lowest = to_pose_vector(CameraPose.from_spherical(0.0, 0.0, 1.0), ranges)
    np.testing.assert_allclose(lowest.values, [-1.0, -1.0])


def test_kind_stats_mismatch(camera_rig):
    with pytest.raises(ValueError):
        to_pose_vector(camera_rig[0], SphericalRanges())
    with pytest.raises(ValueError):
        to_pose_vector(
            CameraPose.from_spherical(1.0, 1.0, 1.0),
            fit_normalization(camera_rig[:3]),
        )


# ---------------------------------------------------------------------------
# classify_view
# ---------------------------------------------------------------------------


def _spherical(theta_deg, phi_deg):
    return CameraPose.from_spherical(math.radians(theta_deg), math.radians(phi_deg), 4.0)


def test_train_vertex_is_interpolation():
    train = [_spherical(60, 10), _spherical(80, 10), _spherical(70, 50)]
    assert classify_view(train[0], train) == "interpolation"


def test_midpoint_is_interpolation():
    a, b = _spherical(60, 10), _spherical(80, 50)
    mid = CameraPose.from_spherical(
        (a.theta + b.theta) / 2, (a.phi + b.phi) / 2, 4.0
    )
    assert classify_view(mid, [a, b]) == "interpolation"


def test_polar_excess_is_extrapolation(camera_rig):
    train = [camera_rig[i] for i in TRAIN_VIEWS_9[:6]]
    max_theta = max(p.spherical_angles()[0] for p in train)
    mean_phi = float(np.mean([p.spherical_angles()[1] for p in train]))
    query = CameraPose.from_spherical(min(math.pi, max_theta + 0.2), mean_phi, 4.0)
    # brute-force check on the six (theta, phi) pairs agrees
    pts = [p.spherical_angles() for p in train]
    assert not hull_oracle(pts, query.spherical_angles())
    assert classify_view(query, train) == "extrapolation"


def test_empty_train_errors():
    with pytest.raises(ValueError):
        classify_view(_spherical(70, 30), [])


def test_order_invariance(rng):
    train = [_spherical(60 + 5 * i, 10 + 17 * i % 140) for i in range(7)]
    q = _spherical(72, 43)
    expected = classify_view(q, train)
    for _ in range(10):
        perm = list(rng.permutation(len(train)))
        assert classify_view(q, [train[i] for i in perm]) == expected


def test_convex_combinations_are_interpolations(rng):
    pts = rng.uniform(0.2, 2.0, size=(6, 2))
    train = [CameraPose.from_spherical(t, p, 4.0) for t, p in pts]
    for _ in range(200):
        w = rng.dirichlet(np.ones(len(pts)))
        q = w @ pts
        assert (
            classify_view(CameraPose.from_spherical(q[0], q[1], 4.0), train)
            == "interpolation"
        )


def test_hull_against_bruteforce_oracle(rng):
    agree = 0
    trials = 400
    for _ in range(trials):
        n = int(rng.integers(1, 8))
        pts = rng.uniform(0.0, 3.0, size=(n, 2))
        if rng.uniform() < 0.3 and n >= 2:
            # degenerate: collinear points
            d = rng.uniform(-1, 1, size=2)
            pts = pts[:1] + np.outer(rng.uniform(0, 1, n), d)
        if rng.uniform() < 0.5:
            w = rng.dirichlet(np.ones(n))
            q = w @ pts  # inside (or on boundary)
        else:
            q = rng.uniform(-1.0, 4.0, size=2)
        got = hull_contains(pts, q)
        want = hull_oracle(pts, q)
        assert got == want, f"disagree on pts={pts!r} q={q!r}"
        agree += 1
    assert agree == trials


def test_matrix_pose_spherical_angles_roundtrip():
    theta, phi = math.radians(63.0), math.radians(97.0)
    pose = CameraPose.from_matrix(look_at_matrix(theta, phi, 4.0))
    t2, p2 = pose.spherical_angles()
    assert abs(t2 - theta) < 1e-12
    assert abs(p2 - phi) < 1e-12


def test_bad_matrix_rejected():
    m = np.eye(4)
    m[3, 1] = 0.5
    with pytest.raises(ValueError, match="bottom row"):
        CameraPose.from_matrix(m)
    with pytest.raises(ValueError):
        CameraPose.from_spherical(-0.1, 0.0, 1.0)
    with pytest.raises(ValueError):
        CameraPose.from_spherical(1.0, 7.0, 1.0)
    with pytest.raises(ValueError):
        CameraPose.from_spherical(1.0, 1.0, 0.0)
