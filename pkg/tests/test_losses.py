"""Loss values, analytic gradients and their stability guarantees.

Expected constants were computed with a 50-digit mpmath oracle; the
finite-difference checks use the independent central-difference oracle in
fdcheck.py.
"""

import numpy as np
import pytest

from sessionrec import losses
from sessionrec.kernels import get_backend
from sessionrec.losses import (
    LossFunction,
    ScoreSlate,
    bpr_loss,
    bpr_max_loss,
    softmax,
    top1_loss,
    top1_max_loss,
    xe_loss,
)

from fdcheck import assert_grad_close, central_diff


def slate(target, negs):
    return ScoreSlate(target, np.asarray(negs, dtype=np.float64))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax([0, 0, 0, 0]), [0.25] * 4, atol=1e-15)

    def test_direct_values(self):
        # mpmath, 12 digits
        np.testing.assert_allclose(
            softmax([1, 2, 3]),
            [0.0900305731704, 0.244728471055, 0.665240955775],
            rtol=1e-10,
        )

    def test_shift_invariance(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(-5, 5, size=12)
        for c in (1.0, -3.5, 1000.0, -1000.0):
            np.testing.assert_allclose(softmax(x + c), softmax(x), rtol=1e-12)

    def test_sums_to_one_large_scores(self):
        out = softmax(np.array([1000.0, 999.0, 0.0]))
        assert np.isfinite(out).all()
        assert abs(out.sum() - 1.0) < 1e-6

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            softmax([])


class TestXeLoss:
    def test_two_way_symmetric(self):
        for variant in ("epsilon", "logsumexp"):
            r = xe_loss(slate(0.0, [0.0]), variant=variant)
            assert r.value == pytest.approx(np.log(2), abs=1e-12)
            assert r.d_target == pytest.approx(-0.5, abs=1e-12)
            np.testing.assert_allclose(r.d_negatives, [0.5], atol=1e-12)

    def test_logsumexp_survives_large_gap_float32(self):
        # naive -log(softmax) is non-finite here in float32; variant (b) is not
        t = np.array([0.0], dtype=np.float32)
        n = np.array([[100.0]], dtype=np.float32)
        with np.errstate(over="ignore", divide="ignore"):
            naive = -np.log(np.exp(t[0]) / (np.exp(t[0]) + np.exp(n[0, 0])))
        assert not np.isfinite(naive)
        v, dt, dn = LossFunction("xe", xe_variant="logsumexp")(t, n)
        assert np.isfinite(v).all()
        assert v[0] == pytest.approx(100.0, abs=1e-3)

    def test_variants_agree(self):
        a = xe_loss(slate(1.0, [0.0, 2.0, -1.0]), variant="epsilon")
        b = xe_loss(slate(1.0, [0.0, 2.0, -1.0]), variant="logsumexp")
        assert a.value == pytest.approx(b.value, abs=1e-6)
        assert a.value == pytest.approx(1.4401896985611953, rel=1e-12)
        assert a.d_target == pytest.approx(b.d_target, abs=1e-6)
        np.testing.assert_allclose(a.d_negatives, b.d_negatives, atol=1e-6)

    def test_gradients_sum_to_zero(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            r = xe_loss(slate(rng.uniform(-5, 5), rng.uniform(-5, 5, size=8)))
            total = r.d_target + r.d_negatives.sum()
            assert total == pytest.approx(0.0, abs=1e-12)


class TestTop1Loss:
    def test_symmetric_slate(self):
        r = top1_loss(slate(0.0, [0.0]))
        assert r.value == pytest.approx(1.0, abs=1e-12)
        assert r.d_target == pytest.approx(-0.25, abs=1e-12)

    def test_vanished_gradient(self):
        r = top1_loss(slate(10.0, [0.0]))
        assert r.d_target == pytest.approx(-4.5395807735951671e-05, rel=1e-9)

    def test_two_negatives(self):
        r = top1_loss(slate(0.0, [0.0, 2.0]))
        assert r.value == pytest.approx(1.4314054340078954, rel=1e-12)


class TestBprLoss:
    def test_equal_scores(self):
        r = bpr_loss(slate(3.0, [3.0]))
        assert r.value == pytest.approx(np.log(2), abs=1e-12)
        assert r.d_target == pytest.approx(-0.5, abs=1e-12)

    def test_easy_negative(self):
        r = bpr_loss(slate(5.0, [0.0]))
        assert r.value == pytest.approx(0.0067153484891180686, rel=1e-10)

    def test_hard_negatives_independent_of_count(self):
        for n in (1, 7, 100):
            r = bpr_loss(slate(0.0, [10.0] * n))
            assert r.d_target == pytest.approx(-0.99995460213129757, rel=1e-9)


class TestTop1MaxLoss:
    def test_single_sample_reduces_to_top1(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            s = slate(rng.uniform(-5, 5), rng.uniform(-5, 5, size=1))
            a, b = top1_max_loss(s), top1_loss(s)
            assert abs(a.value - b.value) < 1e-12
            assert abs(a.d_target - b.d_target) < 1e-12
            np.testing.assert_allclose(a.d_negatives, b.d_negatives, atol=1e-12)

    def test_equal_negatives_match_top1(self):
        s_max = top1_max_loss(slate(0.5, [1.5] * 6))
        s_avg = top1_loss(slate(0.5, [1.5] * 6))
        assert s_max.value == pytest.approx(s_avg.value, abs=1e-12)

    def test_irrelevant_sample_ignored(self):
        r = top1_max_loss(slate(0.0, [0.0, -100.0]))
        assert r.value == pytest.approx(1.0, abs=1e-10)
        # softmax weight of the -100 sample
        assert abs(r.d_negatives[1]) < 1e-40


class TestBprMaxLoss:
    def test_single_sample_reduces_to_bpr(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            s = slate(rng.uniform(-5, 5), rng.uniform(-5, 5, size=1))
            a, b = bpr_max_loss(s, reg_lambda=0.0), bpr_loss(s)
            assert abs(a.value - b.value) < 1e-12
            assert abs(a.d_target - b.d_target) < 1e-12
            np.testing.assert_allclose(a.d_negatives, b.d_negatives, atol=1e-12)

    def test_two_equal_negatives(self):
        r = bpr_max_loss(slate(0.0, [0.0, 0.0]), reg_lambda=0.0)
        assert r.value == pytest.approx(np.log(2), abs=1e-12)
        assert r.d_target == pytest.approx(-0.5, abs=1e-12)

    def test_score_regularization_term(self):
        base = bpr_max_loss(slate(0.0, [1.0, -1.0]), reg_lambda=0.0)
        reg = bpr_max_loss(slate(0.0, [1.0, -1.0]), reg_lambda=1.0)
        # s = (0.88080, 0.11920); sum s_j r_j^2 = 1 exactly
        assert reg.value - base.value == pytest.approx(1.0, abs=1e-12)
        assert reg.value == pytest.approx(2.1269280110429725, rel=1e-12)

    def test_gradient_range(self):
        rng = np.random.default_rng(17)
        for _ in range(300):
            n = rng.integers(1, 40)
            for fn in (bpr_loss, lambda s: bpr_max_loss(s, reg_lambda=0.0)):
                r = fn(slate(rng.uniform(-30, 30), rng.uniform(-30, 30, size=n)))
                assert -1.0 <= r.d_target <= 0.0


def _random_slates(rng, n_slates, sizes=(1, 2, 5, 50)):
    for i in range(n_slates):
        n = sizes[i % len(sizes)]
        yield rng.uniform(-5, 5), rng.uniform(-5, 5, size=n)


LOSS_CONFIGS = [
    ("xe", {"xe_variant": "epsilon"}),
    ("xe", {"xe_variant": "logsumexp"}),
    ("top1", {}),
    ("bpr", {}),
    ("top1-max", {}),
    ("bpr-max", {"reg_lambda": 0.0}),
    ("bpr-max", {"reg_lambda": 1.0}),
]


class TestFiniteDifferences:
    @pytest.mark.parametrize("name,kwargs", LOSS_CONFIGS)
    def test_all_partials(self, name, kwargs, backend):
        fn = LossFunction(name, backend=backend, **kwargs)
        rng = np.random.default_rng(42)
        for target, negs in _random_slates(rng, 200):
            values, d_t, d_n = fn(np.array([target]), negs.reshape(1, -1))
            analytic = np.concatenate(([d_t[0]], d_n[0]))

            def f(x):
                v, _, _ = fn(x[:1], x[1:].reshape(1, -1))
                return float(v[0])

            numeric = central_diff(f, np.concatenate(([target], negs)))
            assert_grad_close(analytic, numeric)


class TestVanishingContrast:
    """Figure-2 mechanism: averaging dilutes the BPR gradient, the max
    weighting does not.  Exact reference values (mpmath, 50 digits) for the
    -10 slates; the clean contrast uses -20 fillers, where the fillers'
    softmax mass really is negligible."""

    # negatives = [+1] + [-10]*m, target 0
    EXACT_MINUS10 = {0: 0.73105857863, 31: 0.0228895597675, 2048: 0.000402163696307}
    EXACT_MINUS10_MAX = {0: 0.73105857863, 31: 0.729654035927, 2048: 0.648579119901}

    @pytest.mark.parametrize("m", [0, 31, 2048])
    def test_exact_values_minus10(self, m):
        negs = np.concatenate(([1.0], np.full(m, -10.0)))
        assert abs(bpr_loss(slate(0.0, negs)).d_target) == pytest.approx(
            self.EXACT_MINUS10[m], rel=1e-9)
        assert abs(bpr_max_loss(slate(0.0, negs), 0.0).d_target) == pytest.approx(
            self.EXACT_MINUS10_MAX[m], rel=1e-9)

    @pytest.mark.parametrize("m", [31, 512, 2048, 5000])
    def test_contrast_with_truly_irrelevant_fillers(self, m):
        negs = np.concatenate(([1.0], np.full(m, -20.0)))
        base = abs(bpr_loss(slate(0.0, [1.0])).d_target)
        diluted = abs(bpr_loss(slate(0.0, negs)).d_target)
        assert diluted * (m + 1) / base == pytest.approx(1.0, rel=1e-4)
        kept = abs(bpr_max_loss(slate(0.0, negs), 0.0).d_target)
        assert kept / base == pytest.approx(1.0, rel=1e-4)


class TestStability:
    """All losses stay finite across [-500, 500] scores in float32."""

    @pytest.mark.parametrize("name,kwargs", LOSS_CONFIGS)
    def test_extreme_scores_float32(self, name, kwargs, backend):
        fn = LossFunction(name, backend=backend, **kwargs)
        rng = np.random.default_rng(23)
        targets = rng.uniform(-500, 500, size=64).astype(np.float32)
        negs = rng.uniform(-500, 500, size=(64, 33)).astype(np.float32)
        # include the worst corners
        targets[0], negs[0, :] = -500.0, 500.0
        targets[1], negs[1, :] = 500.0, -500.0
        values, d_t, d_n = fn(targets, negs)
        assert np.isfinite(values).all()
        assert np.isfinite(d_t).all()
        assert np.isfinite(d_n).all()


class TestMaskSemantics:
    """mask=1 excludes a negative: zero gradient, out of every softmax."""

    @pytest.mark.parametrize("name,kwargs", LOSS_CONFIGS)
    def test_masked_equals_smaller_slate(self, name, kwargs, backend):
        fn = LossFunction(name, backend=backend, **kwargs)
        rng = np.random.default_rng(5)
        t = rng.uniform(-3, 3, size=4)
        n = rng.uniform(-3, 3, size=(4, 6))
        mask = np.zeros((4, 6), dtype=np.uint8)
        mask[:, [1, 4]] = 1
        v_m, dt_m, dn_m = fn(t, n, mask=mask)
        keep = [0, 2, 3, 5]
        v_s, dt_s, dn_s = fn(t, np.ascontiguousarray(n[:, keep]))
        np.testing.assert_allclose(v_m, v_s, rtol=1e-12)
        np.testing.assert_allclose(dt_m, dt_s, rtol=1e-12)
        np.testing.assert_allclose(dn_m[:, keep], dn_s, rtol=1e-12)
        assert (dn_m[:, [1, 4]] == 0).all()

    def test_fully_masked_row_is_inert(self, backend):
        fn = LossFunction("bpr-max", reg_lambda=1.0, backend=backend)
        t = np.array([0.5, 1.0])
        n = np.array([[1.0, 2.0], [0.5, -1.0]])
        mask = np.array([[1, 1], [0, 0]], dtype=np.uint8)
        v, dt, dn = fn(t, n, mask=mask)
        assert v[0] == 0.0 and dt[0] == 0.0 and (dn[0] == 0).all()
        assert v[1] != 0.0


class TestLossRegistry:
    def test_unknown_name_rejected(self):
        with pytest.raises(ValueError):
            losses.get_loss("pairwise-hinge")

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            losses.get_loss("bpr-max", reg_lambda=-0.5)

    def test_names_cover_specified_set(self):
        assert set(losses.LOSS_NAMES) == {"xe", "top1", "bpr", "top1-max", "bpr-max"}
