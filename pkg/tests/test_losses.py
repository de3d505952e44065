import math

import numpy as np
import pytest

from divil import autograd as ag
from divil import kernels, losses
from divil.losses import LossError, UclConfig


def value(x):
    return float(ag.as_array(x))


def naive_ucl(z, zp, temperature=1.0, sign=-1.0, mask_fraction=0.0, normalize=True):
    """Double loop over anchors and candidates; the other anchors are negatives."""
    z = np.array(z, dtype=float)
    zp = np.array(zp, dtype=float)
    if normalize:
        z = z / np.sqrt((z ** 2).sum(axis=1, keepdims=True) + 1e-24)
        zp = zp / np.sqrt((zp ** 2).sum(axis=1, keepdims=True) + 1e-24)
    k = int(math.floor(mask_fraction * z.shape[1] + 1e-9))
    z[:, :k] = 0.0
    zp[:, :k] = 0.0
    total = 0.0
    for i in range(len(z)):
        pos = sign * sum((z[i, d] - zp[i, d]) ** 2 for d in range(z.shape[1])) / temperature
        denom = math.exp(pos)
        for j in range(len(z)):
            if j != i:
                neg = sign * sum((z[i, d] - z[j, d]) ** 2 for d in range(z.shape[1])) / temperature
                denom += math.exp(neg)
        total += -math.log(math.exp(pos) / denom)
    return total


class TestCrossEntropy:
    def test_symmetric_point(self):
        assert value(losses.cross_entropy(np.array([[0.0]]), [1.0])) == pytest.approx(math.log(2), abs=1e-15)

    def test_confident_pair(self):
        v = value(losses.cross_entropy(np.array([10.0, -10.0]), [1.0, 0.0]))
        assert v == pytest.approx(math.log1p(math.exp(-10.0)), rel=1e-12)
        assert v == pytest.approx(4.5398899e-05, rel=1e-7)

    def test_monotone_in_margin(self):
        vals = [value(losses.cross_entropy(np.array([m, -m]), [1.0, 0.0])) for m in (0.5, 1, 2, 5, 20)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_multiclass_matches_naive(self):
        rng = np.random.default_rng(0)
        o = rng.normal(size=(6, 4))
        y = rng.integers(0, 4, 6)
        naive = np.mean([-(o[i, y[i]] - math.log(sum(math.exp(v) for v in o[i]))) for i in range(6)])
        assert value(losses.cross_entropy(o, y)) == pytest.approx(naive, abs=1e-10)

    def test_binary_matches_naive(self):
        rng = np.random.default_rng(1)
        o = 3 * rng.normal(size=8)
        y = (rng.random(8) > 0.5).astype(float)
        naive = -np.mean([yi * math.log(1 / (1 + math.exp(-oi))) + (1 - yi) * math.log(1 - 1 / (1 + math.exp(-oi)))
                          for oi, yi in zip(o, y)])
        assert value(losses.cross_entropy(o, y)) == pytest.approx(naive, abs=1e-10)

    def test_bad_labels(self):
        with pytest.raises(LossError):
            losses.cross_entropy(np.zeros((2, 1)), [0.0, 2.0])
        with pytest.raises(LossError):
            losses.cross_entropy(np.zeros((0, 1)), [])


class TestIrm:
    def test_zero_logits(self):
        assert value(losses.irmv1_penalty(np.zeros((4, 1)), [0, 1, 1, 0])) == 0.0

    def test_single_sample(self):
        # g = (sigmoid(1) - 1) * 1
        assert value(losses.irmv1_penalty(np.array([[1.0]]), [1.0])) == pytest.approx(0.0723295, abs=1e-7)

    def test_equals_fd_of_scaled_risk(self):
        rng = np.random.default_rng(2)
        o = 2 * rng.normal(size=10)
        y = (rng.random(10) > 0.5).astype(float)
        eps = 1e-5
        risk = lambda w: value(losses.cross_entropy(w * o, y))
        g = (risk(1 + eps) - risk(1 - eps)) / (2 * eps)
        assert value(losses.irmv1_penalty(o, y)) == pytest.approx(g * g, abs=1e-6)

    def test_zero_g_gives_zero_cotangent(self):
        o = np.zeros(5)
        np.testing.assert_array_equal(losses.irmv1_cotangent(o, np.ones(5)), np.zeros(5))

    def test_duplication_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6, 3))
        y = (rng.random(6) > 0.5).astype(float)
        w0 = rng.normal(size=(3, 1))

        def run(x, y):
            out, tape = ag.record_forward(lambda w: losses.irmv1_penalty(ag.matmul(x, w), y), {"w": w0})
            return value(out), ag.backward(tape, out)["w"]

        p1, g1 = run(x, y)
        p2, g2 = run(np.vstack([x, x]), np.concatenate([y, y]))
        assert p1 == pytest.approx(p2, rel=1e-12)
        np.testing.assert_allclose(g1, g2, rtol=1e-12)

    def test_matches_fd_on_random_model(self):
        from divil.checks import irm_second_order_error

        assert irm_second_order_error(0) < 1e-4


class TestVrex:
    def test_equal_losses(self):
        assert value(losses.vrex_penalty([0.75, 0.75, 0.75])) == 0.0

    def test_two_losses(self):
        assert value(losses.vrex_penalty([1.0, 3.0])) == 1.0

    def test_shift_invariance(self):
        a = value(losses.vrex_penalty([0.2, 1.3, 0.9]))
        b = value(losses.vrex_penalty([5.2, 6.3, 5.9]))
        assert a == pytest.approx(b, abs=1e-12)

    def test_matches_naive(self):
        vals = [0.31, 0.77, 0.12, 0.5]
        mu = sum(vals) / 4
        assert value(losses.vrex_penalty(vals)) == pytest.approx(sum((v - mu) ** 2 for v in vals) / 4, abs=1e-15)


class TestFishr:
    def test_identical(self):
        g = np.array([0.3, -0.2])
        assert value(losses.fishr_penalty([g, g])) == 0.0

    def test_orthogonal_pair(self):
        assert value(losses.fishr_penalty([np.array([1.0, 0.0]), np.array([0.0, 1.0])])) == 0.5

    def test_homogeneous(self):
        rng = np.random.default_rng(4)
        gs = [rng.normal(size=3) for _ in range(3)]
        a = value(losses.fishr_penalty(gs))
        b = value(losses.fishr_penalty([2.5 * g for g in gs]))
        assert b == pytest.approx(2.5 ** 2 * a, rel=1e-12)

    def test_grad_stat_matches_per_sample_loop(self):
        rng = np.random.default_rng(5)
        h = rng.normal(size=(4, 3))
        o = rng.normal(size=(4, 1))
        y = np.array([1.0, 0.0, 1.0, 1.0])
        per = np.array([(1 / (1 + math.exp(-o[i, 0])) - y[i]) * np.append(h[i], 1.0) for i in range(4)])
        np.testing.assert_allclose(losses.classifier_grad_stat(h, o, y, "mean"), per.mean(axis=0), atol=1e-15)
        np.testing.assert_allclose(losses.classifier_grad_stat(h, o, y, "variance"), per.var(axis=0), atol=1e-15)

    def test_mismatched_shapes(self):
        with pytest.raises(LossError):
            losses.fishr_penalty([np.ones(2), np.ones(3)])


class TestMasks:
    def test_prefix_rule(self):
        z = np.arange(1.0, 11.0)[None, :]
        out = losses.feature_mask(z, 0.7)
        np.testing.assert_array_equal(out[0, :7], 0.0)
        np.testing.assert_array_equal(out[0, 7:], [8.0, 9.0, 10.0])

    @pytest.mark.parametrize("p,expected_zero", [(0.0, 0), (1.0, 10), (0.5, 5), (0.3, 3)])
    def test_prefix_counts(self, p, expected_zero):
        out = losses.feature_mask(np.ones((2, 10)), p)
        assert int((out[0] == 0).sum()) == expected_zero

    def test_dropout_fraction(self):
        out = losses.dropout_mask(np.ones((1000, 1000)), 0.3, np.random.default_rng(0))
        assert abs((out == 0).mean() - 0.3) < 0.002

    def test_out_of_range(self):
        with pytest.raises(LossError):
            losses.feature_mask(np.ones((1, 4)), 1.5)


class TestUcl:
    def test_single_row_is_zero(self):
        for mode in ("standard", "paper_literal"):
            cfg = UclConfig(mask_fraction=0.0, sign_mode=mode)
            assert value(losses.ucl_loss(np.array([[1.0, 2.0]]), np.array([[0.5, 0.1]]), cfg)) == 0.0

    def test_orthogonal_pair(self):
        z = np.eye(2)
        cfg = UclConfig(mask_fraction=0.0, reduction="sum")
        v = value(losses.ucl_loss(z, z.copy(), cfg))
        assert v == pytest.approx(2 * math.log1p(math.exp(-2.0)), abs=1e-12)
        assert v == pytest.approx(0.253856, abs=1e-6)

    @pytest.mark.parametrize("n", [2, 3, 5, 8])
    @pytest.mark.parametrize("mode,sign", [("standard", -1.0), ("paper_literal", 1.0)])
    @pytest.mark.parametrize("normalize", [True, False])
    def test_matches_double_loop(self, n, mode, sign, normalize):
        rng = np.random.default_rng(n)
        z = rng.normal(size=(n, 6)) * (1.0 if normalize else 0.4)
        zp = z + 0.3 * rng.normal(size=(n, 6))
        cfg = UclConfig(temperature=0.7, sign_mode=mode, mask_fraction=0.5,
                        normalize=normalize, reduction="sum")
        want = naive_ucl(z, zp, 0.7, sign, 0.5, normalize)
        for fused in (True, False):
            assert value(losses.ucl_loss(z, zp, cfg, fused=fused)) == pytest.approx(want, abs=1e-10)

    def test_mean_reduction(self):
        rng = np.random.default_rng(7)
        z, zp = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        s = value(losses.ucl_loss(z, zp, UclConfig(reduction="sum")))
        m = value(losses.ucl_loss(z, zp, UclConfig(reduction="mean")))
        assert m == pytest.approx(s / 5, rel=1e-14)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(8)
        z, zp = rng.normal(size=(7, 5)), rng.normal(size=(7, 5))
        perm = rng.permutation(7)
        cfg = UclConfig(reduction="sum")
        assert value(losses.ucl_loss(z, zp, cfg)) == pytest.approx(
            value(losses.ucl_loss(z[perm], zp[perm], cfg)), abs=1e-12)

    def test_rotation_invariance_without_mask(self):
        rng = np.random.default_rng(9)
        z, zp = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        cfg = UclConfig(mask_fraction=0.0)
        assert value(losses.ucl_loss(z, zp, cfg)) == pytest.approx(
            value(losses.ucl_loss(z @ q, zp @ q, cfg)), abs=1e-12)

    def test_fused_gradient_matches_composed(self):
        rng = np.random.default_rng(10)
        z, zp = rng.normal(size=(9, 6)), rng.normal(size=(9, 6))
        grads = []
        for fused in (True, False):
            out, tape = ag.record_forward(
                lambda z, zp: losses.ucl_loss(z, zp, UclConfig(), fused=fused), {"z": z, "zp": zp})
            grads.append(ag.backward(tape, out))
        for k in ("z", "zp"):
            np.testing.assert_allclose(grads[0][k], grads[1][k], atol=1e-13)

    def test_backends_agree(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(50, 8))
        pos = rng.random(50)
        sq = (a * a).sum(axis=1)
        outs = []
        for name in sorted(kernels.BACKENDS):
            buf = a @ a.T
            lse = kernels.get_backend(name).distance_softmax_inplace(buf, sq, pos, -1.0)
            outs.append((lse, buf))
        for lse, buf in outs[1:]:
            np.testing.assert_allclose(lse, outs[0][0], atol=1e-12)
            np.testing.assert_allclose(buf, outs[0][1], atol=1e-14)

    def test_dropout_mode_needs_rng(self):
        with pytest.raises(LossError):
            losses.ucl_loss(np.ones((2, 3)), np.ones((2, 3)), UclConfig(mask_fraction=0.5, mask_mode="dropout"))

    def test_shape_mismatch(self):
        with pytest.raises(LossError):
            losses.ucl_loss(np.ones((2, 3)), np.ones((3, 3)))


class TestDivilTotal:
    def test_arithmetic(self):
        bd = losses.divil_total(1.0, 2.0, 3.0, 0.5, 0.1)
        assert value(bd.total) == pytest.approx(2.3, abs=1e-15)

    def test_reduces_to_pred(self):
        assert value(losses.divil_total(0.8, 5.0, 9.0, 0.0, 0.0).total) == 0.8

    def test_beta_zero_is_baseline(self):
        assert value(losses.divil_total(0.8, 5.0, 9.0, 2.0, 0.0).total) == 0.8 + 2.0 * 5.0

    def test_negative_weight(self):
        with pytest.raises(LossError):
            losses.divil_total(1.0, 1.0, 1.0, -1.0, 0.1)
