import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relpose.errors import DegenerateScale, NearZeroQuaternion
from relpose.geometry import (
    AbsolutePose,
    align_scale,
    axis_angle_to_quat,
    erroneous_relative_translation,
    matrix_to_quat,
    per_scene_median,
    quat_multiply,
    quat_normalize_canonical,
    quat_to_matrix,
    relative_pose,
    rot_z,
    rotation_error_deg,
    translation_error,
)

SQ2 = math.sqrt(2) / 2


def random_rotation(rng):
    q = rng.normal(size=4)
    return quat_to_matrix(q)


def random_pose(rng, scale=3.0):
    return AbsolutePose.from_matrix(random_rotation(rng), rng.uniform(-scale, scale, size=3))


quat_st = st.lists(st.floats(-10, 10, allow_nan=False), min_size=4, max_size=4).filter(
    lambda v: np.linalg.norm(v) > 1e-3
)


class TestQuaternion:
    def test_examples(self):
        assert quat_normalize_canonical([2, 0, 0, 0]) == (1.0, 0.0, 0.0, 0.0)
        assert quat_normalize_canonical([-1, 0, 0, 0]) == (1.0, 0.0, 0.0, 0.0)
        np.testing.assert_allclose(quat_normalize_canonical([1, 1, 0, 0]), [SQ2, SQ2, 0, 0], atol=1e-15)

    def test_near_zero(self):
        with pytest.raises(NearZeroQuaternion):
            quat_normalize_canonical([0, 0, 0, 1e-13])

    @given(quat_st)
    def test_unit_and_canonical(self, q):
        u = quat_normalize_canonical(q)
        assert abs(sum(v * v for v in u) - 1) < 1e-9
        assert u.w >= 0
        # same rotation
        np.testing.assert_allclose(quat_to_matrix(u), quat_to_matrix(q), atol=1e-12)

    def test_matrix_roundtrip(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            R = random_rotation(rng)
            np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
            assert abs(np.linalg.det(R) - 1) < 1e-9
            np.testing.assert_allclose(quat_to_matrix(matrix_to_quat(R)), R, atol=1e-12)


class TestRelativePose:
    def test_identity_rotations(self):
        a = AbsolutePose((1, 0, 0, 0), [0, 0, 0])
        b = AbsolutePose((1, 0, 0, 0), [0, 0, 1])
        rel = relative_pose(a, b)
        np.testing.assert_allclose(rel.R, np.eye(3), atol=1e-15)
        np.testing.assert_allclose(rel.translation, [0, 0, -1], atol=1e-15)
        np.testing.assert_allclose(erroneous_relative_translation(a, b), rel.translation)

    def test_rz90_worked_example(self):
        a = AbsolutePose((1, 0, 0, 0), [0, 0, 0])
        b = AbsolutePose.from_matrix(rot_z(90), [1, 0, 0])
        rel = relative_pose(a, b)
        np.testing.assert_allclose(rel.R, rot_z(90), atol=1e-12)
        np.testing.assert_allclose(rel.translation, [0, 1, 0], atol=1e-12)
        np.testing.assert_allclose(erroneous_relative_translation(a, b), [-1, 0, 0], atol=1e-15)

    def test_erroneous_equal_translations(self):
        rng = np.random.default_rng(1)
        t = rng.normal(size=3)
        a = AbsolutePose.from_matrix(random_rotation(rng), t)
        b = AbsolutePose.from_matrix(random_rotation(rng), t)
        np.testing.assert_array_equal(erroneous_relative_translation(a, b), np.zeros(3))

    def test_center_roundtrip(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            p = random_pose(rng)
            np.testing.assert_allclose(-p.R @ p.center, p.translation, atol=1e-12)

    def test_norm_is_center_distance(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            a, b = random_pose(rng), random_pose(rng)
            rel = relative_pose(a, b)
            assert abs(np.linalg.norm(rel.translation) - np.linalg.norm(a.center - b.center)) < 1e-9
            np.testing.assert_allclose(rel.translation, a.R @ (b.center - a.center), atol=1e-9)

    def test_swapped_arguments_invert(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            a, b = random_pose(rng), random_pose(rng)
            np.testing.assert_allclose(relative_pose(a, b).R @ relative_pose(b, a).R, np.eye(3), atol=1e-9)

    def test_invariant_under_global_rigid_motion(self):
        rng = np.random.default_rng(5)
        for _ in range(500):
            a, b = random_pose(rng), random_pose(rng)
            # world' = Q world + d  =>  R' = R Q^T,  t' = t - R' d
            Q, d = random_rotation(rng), rng.normal(size=3) * 5
            moved = []
            for p in (a, b):
                R2 = p.R @ Q.T
                moved.append(AbsolutePose.from_matrix(R2, p.translation - R2 @ d))
            n0 = np.linalg.norm(relative_pose(a, b).translation)
            n1 = np.linalg.norm(relative_pose(*moved).translation)
            assert abs(n0 - n1) < 1e-9


class TestRotationError:
    def test_examples(self):
        q = (1.0, 0.0, 0.0, 0.0)
        assert rotation_error_deg(q, q) == 0.0
        assert rotation_error_deg(q, (-1.0, 0, 0, 0)) == 0.0
        assert abs(rotation_error_deg(q, (SQ2, SQ2, 0, 0)) - 90.0) < 1e-9

    def test_near_zero(self):
        with pytest.raises(NearZeroQuaternion):
            rotation_error_deg((1, 0, 0, 0), (0, 0, 0, 0))

    def test_known_axis_angles(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            q = quat_normalize_canonical(rng.normal(size=4))
            angle = rng.uniform(0, math.pi)
            dq = axis_angle_to_quat(rng.normal(size=3), angle)
            q_hat = quat_multiply(dq, q)
            assert abs(rotation_error_deg(q, q_hat) - math.degrees(angle)) < 1e-9

    def test_small_angles(self):
        for angle in (1e-9, 1e-6, 1e-3):
            q_hat = axis_angle_to_quat((0.3, -1.0, 0.2), angle)
            assert abs(rotation_error_deg((1, 0, 0, 0), q_hat) - math.degrees(angle)) < 1e-12

    @given(quat_st, quat_st, st.floats(0.01, 100))
    @settings(max_examples=200)
    def test_sign_and_scale_invariance(self, q, q_hat, s):
        q = quat_normalize_canonical(q)
        q_hat = np.asarray(q_hat)
        e = rotation_error_deg(q, q_hat)
        assert abs(rotation_error_deg(q, -q_hat) - e) < 1e-9
        # arccos is ill-conditioned near 1, so compare half-angle cosines
        half_cos = lambda deg: math.cos(math.radians(deg) / 2)
        assert abs(half_cos(rotation_error_deg(q, s * q_hat)) - half_cos(e)) < 1e-12


class TestTranslationError:
    def test_examples(self):
        assert translation_error([1, 2, 3], [1, 2, 3]) == 0
        assert translation_error([0, 0, 0], [3, 4, 0]) == 5
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=3), rng.normal(size=3)
        assert translation_error(a, b) == translation_error(b, a)


class TestAlignScale:
    def test_single(self):
        s, errs = align_scale([(2, 0, 0)], [(1, 0, 0)])
        assert s == 0.5 and errs == [0.0]

    def test_closed_form(self):
        s, errs = align_scale([(1, 0, 0), (0, 1, 0)], [(2, 0, 0), (0, 4, 0)])
        assert s == 3.0
        np.testing.assert_allclose(errs, [1.0, 1.0])

    def test_planted_scale(self):
        rng = np.random.default_rng(7)
        gt = rng.normal(size=(50, 3))
        s, errs = align_scale(3 * gt, gt)
        assert abs(s - 1 / 3) < 1e-9
        assert max(errs) < 1e-9

    def test_zero_derivative(self):
        rng = np.random.default_rng(8)
        P, G = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
        s, _ = align_scale(P, G)
        f = lambda x: np.sum((x * P - G) ** 2)
        h = 1e-3
        deriv = (f(s + h) - f(s - h)) / (2 * h)
        assert abs(deriv) < 1e-8

    def test_degenerate(self):
        with pytest.raises(DegenerateScale):
            align_scale([(0, 0, 0)], [(1, 0, 0)])

    def test_median_mode(self):
        rng = np.random.default_rng(9)
        gt = rng.normal(size=(30, 3))
        pred = 0.25 * gt
        pred[:5] = rng.normal(size=(5, 3)) * 10  # outliers
        s, errs = align_scale(pred, gt, mode="median")
        assert abs(s - 4.0) < 1e-6
        assert np.median(errs) < 1e-6


class TestPerSceneMedian:
    def test_examples(self):
        assert per_scene_median([("a", 3.0, 0.5)])[0].median_rotation_deg == 3.0
        out = per_scene_median([("a", e, e) for e in (1, 2, 3)])
        assert out[0].median_rotation_deg == 2 and out[0].pair_count == 3
        out = per_scene_median([("a", e, e) for e in (1, 2, 3, 10)])
        assert out[0].median_translation_m == 2.5

    def test_sort_oracle(self):
        rng = np.random.default_rng(10)

        def oracle(vals):
            v = sorted(vals)
            m = len(v)
            return v[m // 2] if m % 2 else 0.5 * (v[m // 2 - 1] + v[m // 2])

        for _ in range(1000):
            m = int(rng.integers(1, 40))
            scenes = rng.choice(["x", "y", "z"], size=m)
            r, t = rng.exponential(size=m), rng.exponential(size=m)
            out = {s.scene: s for s in per_scene_median(zip(scenes, r, t))}
            for name in set(scenes):
                mask = scenes == name
                assert out[name].median_rotation_deg == oracle(r[mask].tolist())
                assert out[name].median_translation_m == oracle(t[mask].tolist())
                assert out[name].pair_count == mask.sum()
