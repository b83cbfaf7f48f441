import numpy as np
import pytest

from srkd.autodiff import Tensor
from srkd.errors import (ConfigError, NumericError, PairingError,
                         UndefinedLossError)
from srkd.losses import (LOSS_NAMES, LossWeights, SupervoxelFeatures, affinity,
                         cross_similarity, loss_amra_channel, loss_amra_point,
                         loss_amra_voxel, loss_batch_gd, loss_gd_pair, loss_kd,
                         loss_task, loss_total, weighted_total)
from srkd.numerics import l2_normalize_rows, softmax_rows

RNG = np.random.default_rng(777)


def make_views(f_s, f_t, mask=None, weight=1.0, n_voxel=2):
    """Wrap raw point blocks as a matched student/teacher supervoxel pair."""
    n = f_s.shape[0]
    mask = np.ones(n, dtype=bool) if mask is None else mask
    vmask = np.ones(n_voxel, dtype=bool)
    vs = SupervoxelFeatures(Tensor(np.asarray(f_s, dtype=np.float64)),
                            Tensor(np.asarray(f_s[:n_voxel], dtype=np.float64)),
                            mask, vmask, weight)
    vt = SupervoxelFeatures(Tensor(np.asarray(f_t, dtype=np.float64)),
                            Tensor(np.asarray(f_t[:n_voxel], dtype=np.float64)),
                            mask, vmask, weight)
    return [vs], [vt]


def kl_vec(p, q):
    q = np.maximum(q, 1e-12)
    terms = np.where(p > 0, p * np.log(np.maximum(p, 1e-300) / q), 0.0)
    return float(terms.sum())


class TestLossTask:
    def test_uniform_row(self):
        t = loss_task(Tensor(np.zeros((1, 2))), np.array([0]))
        assert t.item() == pytest.approx(np.log(2))

    def test_saturated_correct(self):
        t = loss_task(Tensor(np.array([[20.0, -20.0]])), np.array([0]))
        assert t.item() < 1e-8

    def test_two_row_mean(self):
        logits = np.array([[0.0, 0.0], [np.log(3.0), 0.0]])
        t = loss_task(Tensor(logits), np.array([0, 0]))
        assert t.item() == pytest.approx((np.log(2) + np.log(4 / 3)) / 2)

    def test_ignore_and_mask_excluded(self):
        logits = np.array([[0.0, 0.0], [50.0, 0.0], [0.0, 50.0]])
        labels = np.array([0, 255, 1])
        mask = np.array([True, True, False])
        t = loss_task(Tensor(logits), labels, mask)
        assert t.item() == pytest.approx(np.log(2))

    def test_no_labeled_points(self):
        with pytest.raises(UndefinedLossError):
            loss_task(Tensor(np.zeros((2, 3))), np.array([255, 255]))


class TestLossKD:
    def test_identity(self):
        z = RNG.standard_normal((5, 4))
        assert loss_kd(Tensor(z), z, 2.0).item() == pytest.approx(0.0, abs=1e-14)

    def test_scalar_oracle(self):
        t = loss_kd(Tensor(np.array([[np.log(2.0), 0.0]])),
                    np.array([[0.0, 0.0]]), 1.0)
        want = (2 / 3) * np.log(4 / 3) + (1 / 3) * np.log(2 / 3)
        assert t.item() == pytest.approx(want)

    def test_nonnegative(self):
        for _ in range(25):
            zs = RNG.standard_normal((4, 6))
            zt = RNG.standard_normal((4, 6))
            assert loss_kd(Tensor(zs), zt, 2.0).item() >= 0.0

    def test_matches_manual_temperature_kl(self):
        zs = RNG.standard_normal((6, 5))
        zt = RNG.standard_normal((6, 5))
        ps = softmax_rows(zs, 2.0)
        pt = softmax_rows(zt, 2.0)
        want = np.mean([kl_vec(a, b) for a, b in zip(ps, pt)])
        assert loss_kd(Tensor(zs), zt, 2.0).item() == pytest.approx(want)


class TestAffinity:
    def test_three_four_five(self):
        d = affinity(Tensor(np.array([[0.0, 0.0], [3.0, 4.0]])), None, 1.0)
        np.testing.assert_allclose(d.data, [[0.0, 25.0], [25.0, 0.0]])

    def test_zero_weight(self):
        d = affinity(Tensor(RNG.standard_normal((3, 2))), None, 0.0)
        np.testing.assert_array_equal(d.data, np.zeros((3, 3)))

    def test_identical_rows(self):
        d = affinity(Tensor(np.ones((4, 3))), None, 2.0)
        np.testing.assert_allclose(d.data, np.zeros((4, 4)), atol=1e-12)

    def test_masked_rows_zeroed(self):
        mask = np.array([True, False, True])
        d = affinity(Tensor(RNG.standard_normal((3, 2))), mask, 1.0).data
        assert np.all(d[1, :] == 0.0) and np.all(d[:, 1] == 0.0)


class TestAMRAPoint:
    def test_identity(self):
        f = RNG.standard_normal((4, 3))
        vs, vt = make_views(f, f)
        assert loss_amra_point(vs, vt).item() == pytest.approx(0.0, abs=1e-15)

    def test_hand_enumeration(self):
        # distances: student 2 apart (D=4), teacher 1 apart (D=1)
        vs, vt = make_views(np.array([[0.0], [2.0]]), np.array([[0.0], [1.0]]))
        assert loss_amra_point(vs, vt).item() == pytest.approx(4.5)

    def test_weight_quadratic(self):
        f_s = RNG.standard_normal((4, 3))
        f_t = RNG.standard_normal((4, 3))
        one = loss_amra_point(*make_views(f_s, f_t, weight=1.0)).item()
        two = loss_amra_point(*make_views(f_s, f_t, weight=2.0)).item()
        assert two == pytest.approx(4.0 * one)

    def test_permutation_invariance(self):
        f_s = RNG.standard_normal((6, 3))
        f_t = RNG.standard_normal((6, 3))
        base = loss_amra_point(*make_views(f_s, f_t)).item()
        for _ in range(100):
            perm = np.random.default_rng().permutation(6)
            permuted = loss_amra_point(*make_views(f_s[perm], f_t[perm])).item()
            assert permuted == pytest.approx(base, rel=1e-9)

    def test_pairing_mismatch(self):
        vs, _ = make_views(RNG.standard_normal((4, 3)),
                           RNG.standard_normal((4, 3)), weight=1.0)
        _, vt = make_views(RNG.standard_normal((4, 3)),
                           RNG.standard_normal((4, 3)), weight=2.0)
        with pytest.raises(PairingError):
            loss_amra_point(vs, vt)

    def test_brute_force_oracle(self):
        # mean over supervoxels of sum_ij (Ds - Dt)^2 / n^2, masked rows out
        views_s, views_t, want = [], [], []
        for k in range(3):
            n = 5
            f_s = RNG.standard_normal((n, 2))
            f_t = RNG.standard_normal((n, 2))
            mask = RNG.random(n) > 0.3
            mask[:2] = True
            w = float(RNG.random() + 0.1)
            vs, vt = make_views(f_s * mask[:, None], f_t * mask[:, None],
                                mask=mask, weight=w)
            views_s += vs
            views_t += vt
            acc = 0.0
            for i in range(n):
                for j in range(n):
                    if i == j or not (mask[i] and mask[j]):
                        continue
                    ds = w * ((f_s[i] - f_s[j]) ** 2).sum()
                    dt = w * ((f_t[i] - f_t[j]) ** 2).sum()
                    acc += (ds - dt) ** 2
            want.append(acc / n**2)
        got = loss_amra_point(views_s, views_t).item()
        assert got == pytest.approx(np.mean(want), rel=1e-9)


class TestAMRAVoxel:
    def test_identity(self):
        f = RNG.standard_normal((4, 3))
        vs, vt = make_views(f, f)
        assert loss_amra_voxel(vs, vt).item() == pytest.approx(0.0, abs=1e-15)

    def test_single_differing_pair(self):
        # two voxel rows; squared distances differ by d -> loss d^2 * 2/n^2
        vs, vt = make_views(np.array([[0.0], [2.0]]), np.array([[0.0], [1.0]]),
                            n_voxel=2)
        d = 4.0 - 1.0
        assert loss_amra_voxel(vs, vt).item() == pytest.approx(2 * d**2 / 4)


class TestAMRAChannel:
    def test_identity(self):
        f = RNG.standard_normal((4, 3))
        vs, vt = make_views(f, f)
        assert loss_amra_channel(vs, vt).item() == pytest.approx(0.0, abs=1e-14)

    def test_nonnegative(self):
        for _ in range(20):
            vs, vt = make_views(RNG.standard_normal((4, 3)),
                                RNG.standard_normal((4, 3)))
            assert loss_amra_channel(vs, vt).item() >= 0.0

    def test_scalar_oracle_row(self):
        # single point row and single voxel row with the same logits:
        # each part contributes the loss_kd scalar value
        f_s = np.array([[np.log(2.0), 0.0]])
        f_t = np.array([[0.0, 0.0]])
        vs, vt = make_views(f_s, f_t, n_voxel=1)
        want = (2 / 3) * np.log(4 / 3) + (1 / 3) * np.log(2 / 3)
        assert loss_amra_channel(vs, vt).item() == pytest.approx(2 * want)


class TestCrossSimilarity:
    def test_orthonormal_identity(self):
        f = np.eye(3)
        np.testing.assert_allclose(cross_similarity(f, f), np.eye(3))

    def test_equal_rows_all_ones(self):
        f = np.tile(l2_normalize_rows(np.array([[1.0, 2.0]])), (4, 1))
        np.testing.assert_allclose(cross_similarity(f, f), np.ones((4, 4)))

    def test_scale_invariance_through_normalization(self):
        f = RNG.standard_normal((5, 3))
        a = cross_similarity(l2_normalize_rows(f), l2_normalize_rows(f))
        b = cross_similarity(l2_normalize_rows(5 * f), l2_normalize_rows(5 * f))
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestGDPair:
    def test_identity(self):
        m = RNG.standard_normal((4, 4))
        assert loss_gd_pair(m, m, 2.0) == pytest.approx(0.0, abs=1e-14)

    def test_row_shift_invariance(self):
        m_s = RNG.standard_normal((3, 4))
        m_t = RNG.standard_normal((3, 4))
        base = loss_gd_pair(m_s, m_t, 2.0)
        shifted_s, shifted_t = m_s.copy(), m_t.copy()
        shifted_s[1] += 7.0
        shifted_t[1] += 7.0
        assert loss_gd_pair(shifted_s, shifted_t, 2.0) == pytest.approx(base)

    def test_scalar_oracle(self):
        got = loss_gd_pair(np.array([[np.log(2.0), 0.0]]),
                           np.array([[0.0, 0.0]]), 1.0)
        want = (2 / 3) * np.log(4 / 3) + (1 / 3) * np.log(2 / 3)
        assert got == pytest.approx(want)

    def test_all_rows_masked(self):
        with pytest.raises(UndefinedLossError):
            loss_gd_pair(np.zeros((2, 2)), np.zeros((2, 2)), 1.0,
                         row_mask=np.array([False, False]))


def brute_force_batch_gd(student_maps, teacher_maps, temperature, masks=None):
    """Literal enumeration of the batch-geometry double sum over ordered pairs."""
    b = len(student_maps)
    n = student_maps[0].shape[0]
    if masks is None:
        masks = [np.ones(n, dtype=bool)] * b
    fs = [l2_normalize_rows(np.asarray(m, dtype=np.float64))
          for m in student_maps]
    ft = [l2_normalize_rows(np.asarray(m, dtype=np.float64))
          for m in teacher_maps]
    total = 0.0
    for i in range(b):
        for j in range(b):
            m_s = fs[i] @ fs[j].T
            m_t = ft[i] @ ft[j].T
            rows = 0.0
            for a in np.flatnonzero(masks[i]):
                cols = np.flatnonzero(masks[j])
                p = softmax_rows(m_s[a, cols][None, :], temperature)[0]
                q = softmax_rows(m_t[a, cols][None, :], temperature)[0]
                rows += kl_vec(p, q)
            total += rows / int(masks[i].sum())
    return total / b**2


class TestBatchGD:
    def test_identity(self):
        maps = [RNG.standard_normal((6, 3)) for _ in range(3)]
        got = loss_batch_gd([Tensor(m) for m in maps], maps, 2.0)
        assert got.item() == pytest.approx(0.0, abs=1e-14)

    def test_single_sample_reduces_to_pair(self):
        f_s = RNG.standard_normal((5, 3))
        f_t = RNG.standard_normal((5, 4))
        got = loss_batch_gd([Tensor(f_s)], [f_t], 2.0).item()
        m_s = cross_similarity(l2_normalize_rows(f_s), l2_normalize_rows(f_s))
        m_t = cross_similarity(l2_normalize_rows(f_t), l2_normalize_rows(f_t))
        assert got == pytest.approx(loss_gd_pair(m_s, m_t, 2.0))

    @pytest.mark.parametrize("b,n", [(2, 4), (3, 8), (3, 5)])
    def test_brute_force_oracle(self, b, n):
        student = [RNG.standard_normal((n, 3)) for _ in range(b)]
        teacher = [RNG.standard_normal((n, 5)) for _ in range(b)]
        got = loss_batch_gd([Tensor(m) for m in student], teacher, 2.0).item()
        want = brute_force_batch_gd(student, teacher, 2.0)
        assert got == pytest.approx(want, rel=1e-9)

    def test_brute_force_oracle_masked(self):
        b, n = 3, 6
        student = [RNG.standard_normal((n, 3)) for _ in range(b)]
        teacher = [RNG.standard_normal((n, 5)) for _ in range(b)]
        masks = [RNG.random(n) > 0.3 for _ in range(b)]
        for m in masks:
            m[0] = True
        got = loss_batch_gd([Tensor(s) for s in student], teacher, 2.0,
                            masks).item()
        want = brute_force_batch_gd(student, teacher, 2.0, masks)
        assert got == pytest.approx(want, rel=1e-9)

    def test_permutation_invariance(self):
        student = [RNG.standard_normal((6, 3)) for _ in range(2)]
        teacher = [RNG.standard_normal((6, 4)) for _ in range(2)]
        base = loss_batch_gd([Tensor(m) for m in student], teacher, 2.0).item()
        rng = np.random.default_rng(5)
        for _ in range(100):
            perm = rng.permutation(6)
            ps = [student[0][perm], student[1]]
            pt = [teacher[0][perm], teacher[1]]
            got = loss_batch_gd([Tensor(m) for m in ps], pt, 2.0).item()
            assert got == pytest.approx(base, rel=1e-9)

    def test_row_rescale_invariance(self):
        student = [RNG.standard_normal((5, 3)) for _ in range(2)]
        teacher = [RNG.standard_normal((5, 4)) for _ in range(2)]
        base = loss_batch_gd([Tensor(m) for m in student], teacher, 2.0).item()
        rng = np.random.default_rng(6)
        for _ in range(100):
            scales = rng.uniform(0.1, 10.0, (5, 1))
            scaled = [student[0] * scales, student[1]]
            got = loss_batch_gd([Tensor(m) for m in scaled], teacher, 2.0).item()
            assert got == pytest.approx(base, rel=1e-9)

    def test_bad_temperature(self):
        with pytest.raises(ConfigError):
            loss_batch_gd([Tensor(np.ones((2, 2)))], [np.ones((2, 2))], 0.0)


class TestTotals:
    def test_baseline_reduction(self):
        comps = dict(zip(LOSS_NAMES, [2.0, 1.0, 1.0, 1.0, 1.0, 1.0]))
        report = loss_total(comps, LossWeights.zeros())
        assert report.l_total == pytest.approx(2.0)

    def test_default_weights_arithmetic(self):
        comps = dict(zip(LOSS_NAMES, [1.0] * 6))
        report = loss_total(comps, LossWeights())
        assert report.l_total == pytest.approx(1001.402)

    def test_lambda_doubling_linearity(self):
        comps = dict(zip(LOSS_NAMES, [0.5, 0.2, 0.3, 0.1, 0.01, 0.4]))
        w = LossWeights()
        doubled = LossWeights(lambda_kd=0.6, lambda_p=0.002, lambda_v=0.002,
                              lambda_c=2000.0, lambda_batch_gd=0.2)
        a = loss_total(comps, w)
        b = loss_total(comps, doubled)
        assert (b.l_total - b.l_task) == pytest.approx(2 * (a.l_total - a.l_task))

    def test_report_serialization_fields(self):
        comps = dict(zip(LOSS_NAMES, [1, 2, 3, 4, 5, 6]))
        d = loss_total(comps, LossWeights.zeros()).to_dict()
        assert list(d.keys()) == list(LOSS_NAMES) + ["l_total"]

    def test_nonfinite_component_named(self):
        comps = dict(zip(LOSS_NAMES, [1.0, np.nan, 1.0, 1.0, 1.0, 1.0]))
        with pytest.raises(NumericError, match="l_kd"):
            loss_total(comps, LossWeights())

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            LossWeights(lambda_kd=-0.1)

    def test_weighted_total_matches_report(self):
        comps = {n: Tensor(np.float64(v))
                 for n, v in zip(LOSS_NAMES, [0.5, 0.2, 0.3, 0.1, 0.01, 0.4])}
        w = LossWeights()
        total = weighted_total(comps, w)
        report = loss_total({k: v.item() for k, v in comps.items()}, w)
        assert total.item() == pytest.approx(report.l_total, rel=1e-12)
