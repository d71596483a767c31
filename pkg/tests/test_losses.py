import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ltlab.bank import KeyBank
from ltlab.losses import (
    BatchInputs,
    ClassProfile,
    LossWeights,
    balanced_ce,
    cibl_loss,
    compute_loss,
    nce_loss,
    nce_margin_form,
    paco_loss,
    summed_loss,
    supcon,
)
from ltlab.numerics import NumericalDivergence, l2_normalize_rows


def make_bank(keys, labels):
    return KeyBank(
        keys=np.asarray(keys, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.int64),
        batch_size=0,
    )


def random_instance(seed, b=3, c=3, d=4, e=4, n_keys=5):
    rng = np.random.default_rng(seed)
    profile = ClassProfile(rng.integers(1, 101, size=c))
    features = rng.standard_normal((b, d))
    theta = rng.standard_normal((d, c))
    labels = rng.integers(0, c, size=b)
    embeddings = l2_normalize_rows(rng.standard_normal((b, e)))
    bank = make_bank(
        l2_normalize_rows(rng.standard_normal((n_keys, e))),
        rng.integers(0, c, size=n_keys),
    )
    weights = LossWeights(lambda_ce=1.0, lambda_scl=0.3, tau=0.5, gamma_t=0.5)
    return features, theta, labels, embeddings, bank, profile, weights


class TestBalancedCE:
    def test_uniform_counts_symmetric_logits(self):
        profile = ClassProfile([1, 1])
        res = balanced_ce(np.zeros((1, 3)), np.zeros((3, 2)), [0], profile)
        assert res.per_instance[0] == pytest.approx(math.log(2), abs=1e-12)

    def test_count_adjustment_shifts_loss(self):
        # counts [3, 1] with equal logits: true class 0 gets probability 3/4
        profile = ClassProfile([3, 1])
        res = balanced_ce(np.zeros((1, 2)), np.zeros((2, 2)), [0], profile)
        assert res.per_instance[0] == pytest.approx(-math.log(0.75), abs=1e-12)

    def test_total_is_mean(self):
        f, t, y, _, _, p, _ = random_instance(0)
        res = balanced_ce(f, t, y, p)
        assert res.total == pytest.approx(float(np.mean(res.per_instance)), abs=1e-12)

    def test_label_out_of_range(self):
        profile = ClassProfile([1, 1])
        with pytest.raises(ValueError, match="label"):
            balanced_ce(np.zeros((1, 2)), np.zeros((2, 2)), [2], profile)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_logits_rejected(self):
        profile = ClassProfile([1, 1])
        bad = np.array([[np.inf, 0.0]])
        with pytest.raises(NumericalDivergence, match="non-finite"):
            balanced_ce(bad, np.eye(2), [0], profile)

    def test_invariant_to_count_rescaling(self):
        f, t, y, _, _, p, _ = random_instance(1)
        scaled = ClassProfile(p.counts * 7)
        a = balanced_ce(f, t, y, p)
        b = balanced_ce(f, t, y, scaled)
        np.testing.assert_allclose(a.per_instance, b.per_instance, atol=1e-12)
        np.testing.assert_allclose(a.grad_features, b.grad_features, atol=1e-12)

    def test_invariant_to_per_instance_logit_shift(self):
        # adding d to every classifier column shifts instance i's logits by x_i.d
        f, t, y, _, _, p, _ = random_instance(2)
        d = np.random.default_rng(9).standard_normal(t.shape[0])
        a = balanced_ce(f, t, y, p)
        b = balanced_ce(f, t + d[:, None], y, p)
        np.testing.assert_allclose(a.per_instance, b.per_instance, atol=1e-12)


class TestSupcon:
    def test_single_positive_identical_key(self):
        z = l2_normalize_rows(np.array([[1.0, 2.0, -1.0]]))
        bank = make_bank(z.copy(), [0])
        res = supcon(z, bank, [0], tau=0.05)
        assert res.per_instance[0] == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(res.grad_embeddings, 0.0, atol=1e-12)

    def test_one_positive_one_orthogonal_negative(self):
        z = np.array([[1.0, 0.0]])
        bank = make_bank([[1.0, 0.0], [0.0, 1.0]], [0, 1])
        res = supcon(z, bank, [0], tau=1.0)
        assert res.per_instance[0] == pytest.approx(
            math.log(1 + math.exp(-1)), abs=1e-9
        )

    def test_rotation_invariance(self):
        rng = np.random.default_rng(5)
        z = l2_normalize_rows(rng.standard_normal((3, 4)))
        keys = l2_normalize_rows(rng.standard_normal((6, 4)))
        labels = rng.integers(0, 2, size=3)
        key_labels = rng.integers(0, 2, size=6)
        q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        a = supcon(z, make_bank(keys, key_labels), labels, tau=0.5)
        b = supcon(z @ q, make_bank(keys @ q, key_labels), labels, tau=0.5)
        np.testing.assert_allclose(a.per_instance, b.per_instance, atol=1e-12)

    def test_negative_permutation_invariance(self):
        rng = np.random.default_rng(6)
        z = l2_normalize_rows(rng.standard_normal((2, 3)))
        keys = l2_normalize_rows(rng.standard_normal((5, 3)))
        key_labels = np.array([0, 1, 1, 0, 1])
        labels = np.array([0, 1])
        perm = rng.permutation(5)
        a = supcon(z, make_bank(keys, key_labels), labels, tau=0.3)
        b = supcon(z, make_bank(keys[perm], key_labels[perm]), labels, tau=0.3)
        np.testing.assert_allclose(
            np.sort(a.per_instance), np.sort(b.per_instance), atol=1e-12
        )
        np.testing.assert_allclose(a.per_instance, b.per_instance, atol=1e-12)

    def test_no_positives_contributes_zero(self):
        z = l2_normalize_rows(np.array([[1.0, 1.0]]))
        bank = make_bank([[0.0, 1.0]], [1])  # different class only
        res = supcon(z, bank, [0], tau=0.1)
        assert res.per_instance[0] == 0.0
        np.testing.assert_array_equal(res.grad_embeddings, np.zeros((1, 2)))

    def test_bad_tau_and_empty_bank(self):
        z = np.array([[1.0, 0.0]])
        bank = make_bank(np.zeros((0, 2)), [])
        with pytest.raises(ValueError, match="bank"):
            supcon(z, bank, [0], tau=0.5)
        with pytest.raises(ValueError, match="tau"):
            supcon(z, make_bank([[1.0, 0.0]], [0]), [0], tau=0.0)


class TestSummed:
    def test_reduces_to_ce_when_scl_weight_zero(self):
        f, t, y, z, bank, p, _ = random_instance(7)
        w = LossWeights(lambda_ce=1.0, lambda_scl=0.0, tau=0.5)
        combo = summed_loss(BatchInputs(f, y, z), t, bank, p, w)
        ce = balanced_ce(f, t, y, p)
        np.testing.assert_allclose(combo.per_instance, ce.per_instance, atol=1e-12)
        np.testing.assert_allclose(combo.grad_features, ce.grad_features, atol=1e-12)
        # and with a non-unit CE weight it is exactly that multiple of CE
        w = LossWeights(lambda_ce=0.7, lambda_scl=0.0, tau=0.5)
        scaled = summed_loss(BatchInputs(f, y, z), t, bank, p, w)
        np.testing.assert_allclose(
            scaled.per_instance, 0.7 * ce.per_instance, atol=1e-12
        )

    def test_reduces_to_supcon_when_ce_weight_zero(self):
        f, t, y, z, bank, p, _ = random_instance(8)
        w = LossWeights(lambda_ce=0.0, lambda_scl=1.0, tau=0.5)
        combo = summed_loss(BatchInputs(f, y, z), t, bank, p, w)
        scl = supcon(z, bank, y, 0.5)
        np.testing.assert_allclose(combo.per_instance, scl.per_instance, atol=1e-12)
        np.testing.assert_allclose(
            combo.grad_embeddings, scl.grad_embeddings, atol=1e-12
        )

    def test_componentwise_combination(self):
        f, t, y, z, bank, p, _ = random_instance(9)
        w = LossWeights(lambda_ce=1.0, lambda_scl=0.5, tau=0.5)
        combo = summed_loss(BatchInputs(f, y, z), t, bank, p, w)
        ce = balanced_ce(f, t, y, p)
        scl = supcon(z, bank, y, 0.5)
        np.testing.assert_allclose(
            combo.per_instance,
            1.0 * ce.per_instance + 0.5 * scl.per_instance,
            atol=1e-12,
        )
        assert combo.ce_component == pytest.approx(ce.total, abs=1e-12)
        assert combo.scl_component == pytest.approx(0.5 * scl.total, abs=1e-12)


class TestPaco:
    def test_no_positives_reduces_to_shared_denominator_ce(self):
        # with an empty positive set the loss is the true-class logit against
        # the full mixed denominator, independent of alpha
        rng = np.random.default_rng(10)
        f = rng.standard_normal((1, 3))
        t = rng.standard_normal((3, 2))
        z = l2_normalize_rows(rng.standard_normal((1, 4)))
        key = l2_normalize_rows(rng.standard_normal((1, 4)))
        bank = make_bank(key, [1])  # no label-0 keys
        profile = ClassProfile([4, 2])
        per_alpha = []
        for alpha in (0.1, 1.0, 7.0):
            w = LossWeights(alpha=alpha, beta=2.0, tau=0.5)
            res = paco_loss(BatchInputs(f, [0], z), t, bank, profile, w)
            per_alpha.append(res.per_instance[0])
        assert per_alpha[0] == pytest.approx(per_alpha[1], abs=1e-12)
        assert per_alpha[1] == pytest.approx(per_alpha[2], abs=1e-12)
        # direct evaluation of the reduced form
        logits = f @ t
        eta = profile.counts * np.exp(logits[0])
        denom = float(np.exp(z @ key.T / 0.5)[0, 0]) + eta.sum()
        expected = -math.log(eta[0] / denom)
        assert per_alpha[0] == pytest.approx(expected, abs=1e-9)

    def test_alpha_zero_with_negligible_key_matches_balanced_ce(self):
        rng = np.random.default_rng(11)
        f = rng.standard_normal((2, 3))
        t = 0.3 * rng.standard_normal((3, 3))
        y = np.array([0, 2])
        z = l2_normalize_rows(rng.standard_normal((2, 4)))
        # key anti-aligned with both queries: its exponent is ~exp(-20)
        far_key = -l2_normalize_rows(z.sum(axis=0, keepdims=True))
        bank = make_bank(far_key, [0])
        profile = ClassProfile([10, 5, 1])
        w = LossWeights(alpha=0.0, beta=1.0, tau=0.05)
        res = paco_loss(BatchInputs(f, y, z), t, bank, profile, w)
        ce = balanced_ce(f, t, y, profile)
        np.testing.assert_allclose(res.per_instance, ce.per_instance, atol=1e-6)

    def test_beta_must_be_positive(self):
        f, t, y, z, bank, p, _ = random_instance(12)
        w = LossWeights(alpha=1.0, beta=0.0, tau=0.5)
        with pytest.raises(ValueError, match="beta"):
            paco_loss(BatchInputs(f, y, z), t, bank, p, w)


def scalar_cibl_oracle(f, t, y, z, keys, key_labels, counts, lce, lscl, tau):
    """Straight transcription of the balanced combination, term by term."""
    per = []
    for i in range(len(y)):
        logits = [float(np.dot(f[i], t[:, c])) for c in range(len(counts))]
        num = counts[y[i]] * math.exp(logits[y[i]])
        den = sum(counts[c] * math.exp(logits[c]) for c in range(len(counts)))
        ce_term = math.log(num / den)
        sims = [float(np.dot(z[i], k)) / tau for k in keys]
        den_scl = sum(math.exp(s) for s in sims)
        pos = [j for j, kl in enumerate(key_labels) if kl == y[i]]
        scl_term = sum(math.log(math.exp(sims[j]) / den_scl) for j in pos)
        per.append(
            -(lce * ce_term + lscl * scl_term) / (lce + lscl * len(pos))
        )
    return np.array(per)


class TestCibl:
    def test_reduces_to_balanced_ce(self):
        f, t, y, z, bank, p, _ = random_instance(13)
        w = LossWeights(lambda_ce=1.0, lambda_scl=0.0, tau=0.5)
        res = cibl_loss(BatchInputs(f, y, z), t, bank, p, w)
        ce = balanced_ce(f, t, y, p)
        np.testing.assert_allclose(res.per_instance, ce.per_instance, atol=1e-12)
        np.testing.assert_allclose(res.grad_theta, ce.grad_theta, atol=1e-12)

    def test_reduces_to_supcon_when_ce_weight_zero(self):
        rng = np.random.default_rng(14)
        z = l2_normalize_rows(rng.standard_normal((3, 4)))
        labels = np.array([0, 1, 0])
        # every instance needs at least one positive here
        keys = l2_normalize_rows(rng.standard_normal((4, 4)))
        bank = make_bank(keys, [0, 1, 0, 1])
        f = rng.standard_normal((3, 2))
        t = rng.standard_normal((2, 2))
        p = ClassProfile([5, 3])
        w = LossWeights(lambda_ce=0.0, lambda_scl=0.7, tau=0.4)
        res = cibl_loss(BatchInputs(f, labels, z), t, bank, p, w)
        scl = supcon(z, bank, labels, 0.4)
        np.testing.assert_allclose(res.per_instance, scl.per_instance, atol=1e-12)
        np.testing.assert_allclose(res.grad_embeddings, scl.grad_embeddings, atol=1e-12)
        np.testing.assert_allclose(res.grad_features, 0.0, atol=1e-12)

    def test_matches_term_by_term_scalar_oracle(self):
        rng = np.random.default_rng(15)
        f = rng.standard_normal((2, 3))
        t = rng.standard_normal((3, 2))
        y = np.array([0, 1])
        z = l2_normalize_rows(rng.standard_normal((2, 4)))
        keys = l2_normalize_rows(rng.standard_normal((2, 4)))
        key_labels = np.array([0, 1])
        counts = np.array([20, 4])
        w = LossWeights(lambda_ce=1.0, lambda_scl=0.03, tau=0.05)
        res = cibl_loss(
            BatchInputs(f, y, z), t, make_bank(keys, key_labels),
            ClassProfile(counts), w,
        )
        oracle = scalar_cibl_oracle(
            f, t, y, z, keys, key_labels, counts, 1.0, 0.03, 0.05
        )
        np.testing.assert_allclose(res.per_instance, oracle, atol=1e-10)

    def test_instance_without_positives_is_pure_ce(self):
        rng = np.random.default_rng(16)
        f = rng.standard_normal((1, 3))
        t = rng.standard_normal((3, 2))
        z = l2_normalize_rows(rng.standard_normal((1, 4)))
        bank = make_bank(l2_normalize_rows(rng.standard_normal((2, 4))), [1, 1])
        p = ClassProfile([3, 9])
        w = LossWeights(lambda_ce=2.0, lambda_scl=5.0, tau=0.5)
        res = cibl_loss(BatchInputs(f, [0], z), t, bank, p, w)
        ce = balanced_ce(f, t, [0], p)
        np.testing.assert_allclose(res.per_instance, ce.per_instance, atol=1e-12)

    def test_rejects_all_zero_combination_weight(self):
        rng = np.random.default_rng(17)
        f = rng.standard_normal((1, 3))
        t = rng.standard_normal((3, 2))
        z = l2_normalize_rows(rng.standard_normal((1, 4)))
        bank = make_bank(l2_normalize_rows(rng.standard_normal((1, 4))), [1])
        p = ClassProfile([3, 9])
        w = LossWeights(lambda_ce=0.0, lambda_scl=1.0, tau=0.5)
        with pytest.raises(ValueError, match="combination weight"):
            cibl_loss(BatchInputs(f, [0], z), t, bank, p, w)

    def test_contrastive_fraction_monotone_exact(self):
        # w = lscl*n / (lce + lscl*n) over a rational grid, exact arithmetic
        lce = Fraction(1)
        for lscl_num in (1, 3, 10):
            lscl = Fraction(lscl_num, 100)
            fracs = [lscl * n / (lce + lscl * n) for n in range(0, 30)]
            assert all(b >= a for a, b in zip(fracs, fracs[1:]))
        for n in (1, 5, 50):
            by_weight = [
                Fraction(num, 100) * n / (lce + Fraction(num, 100) * n)
                for num in range(1, 30)
            ]
            assert all(b >= a for a, b in zip(by_weight, by_weight[1:]))


class TestCosineCE:
    def test_uniform_counts_equal_sims_gives_log_c(self):
        # features orthogonal to every classifier column: all similarities 0
        f = np.array([[1.0, 0.0, 0.0]])
        t = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        p = ClassProfile([1, 1])
        res = nce_loss(f, t, [0], p, gamma_t=0.3)
        assert res.per_instance[0] == pytest.approx(math.log(2), abs=1e-12)

    def test_opposed_similarities(self):
        # sims [1, -1] at unit temperature: loss = log(1 + e^-2)
        f = np.array([[2.0, 0.0]])
        t = np.array([[3.0, -5.0], [0.0, 0.0]])
        p = ClassProfile([1, 1])
        res = nce_loss(f, t, [0], p, gamma_t=1.0)
        assert res.per_instance[0] == pytest.approx(
            math.log(1 + math.exp(-2)), abs=1e-12
        )

    def test_margin_form_identity_on_random_inputs(self):
        for seed in range(100):
            f, t, y, _, _, p, w = random_instance(seed, b=2, c=4, d=3)
            a = nce_loss(f, t, y, p, w.gamma_t)
            b = nce_margin_form(f, t, y, p, w.gamma_t)
            np.testing.assert_allclose(a.per_instance, b.per_instance, atol=1e-12)
            np.testing.assert_allclose(a.grad_features, b.grad_features, atol=1e-12)
            np.testing.assert_allclose(a.grad_theta, b.grad_theta, atol=1e-12)

    def test_uniform_counts_reduce_to_plain_cosine_softmax(self):
        rng = np.random.default_rng(20)
        f = rng.standard_normal((2, 3))
        t = rng.standard_normal((3, 3))
        y = np.array([1, 2])
        p = ClassProfile([4, 4, 4])
        res = nce_loss(f, t, y, p, gamma_t=0.5)
        sims = (f / np.linalg.norm(f, axis=1)[:, None]) @ (
            t / np.linalg.norm(t, axis=0)[None, :]
        )
        s = sims / 0.5
        expected = -s[np.arange(2), y] + np.log(np.exp(s).sum(axis=1))
        np.testing.assert_allclose(res.per_instance, expected, atol=1e-12)

    def test_margin_value_with_skewed_counts(self):
        # equal sims, counts [5, 1], true class 1: softmax weight 1/6
        f = np.array([[1.0, 0.0, 0.0]])
        t = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        p = ClassProfile([5, 1])
        res = nce_margin_form(f, t, [1], p, gamma_t=0.05)
        assert res.per_instance[0] == pytest.approx(math.log(6), abs=1e-12)

    def test_gamma_must_be_positive(self):
        f, t, y, _, _, p, _ = random_instance(21)
        with pytest.raises(ValueError, match="gamma"):
            nce_loss(f, t, y, p, gamma_t=0.0)


class TestLossNonNegativity:
    @given(st.integers(min_value=0, max_value=500))
    @settings(max_examples=40, deadline=None)
    def test_every_per_instance_loss_is_nonnegative(self, seed):
        f, t, y, z, bank, p, w = random_instance(seed)
        batch = BatchInputs(f, y, z)
        results = [
            balanced_ce(f, t, y, p),
            supcon(z, bank, y, w.tau),
            summed_loss(batch, t, bank, p, w),
            paco_loss(batch, t, bank, p, w),
            cibl_loss(batch, t, bank, p, w),
            cibl_loss(batch, t, bank, p, w, head_kind="cosine"),
            nce_loss(f, t, y, p, w.gamma_t),
            nce_margin_form(f, t, y, p, w.gamma_t),
        ]
        for res in results:
            assert np.all(res.per_instance >= 0.0)
            assert res.total == pytest.approx(
                float(np.mean(res.per_instance)), abs=1e-12
            )


class TestComputeLossDispatch:
    def test_fills_zero_gradients_with_real_shapes(self):
        f, t, y, z, bank, p, w = random_instance(22)
        res = compute_loss("ce", BatchInputs(f, y, z), t, bank, p, w)
        assert res.grad_embeddings.shape == z.shape
        np.testing.assert_array_equal(res.grad_embeddings, 0.0)
        assert res.grad_features.shape == f.shape
        assert res.grad_theta.shape == t.shape

    def test_ncibl_is_cosine_head_cibl(self):
        f, t, y, z, bank, p, w = random_instance(23)
        batch = BatchInputs(f, y, z)
        a = compute_loss("ncibl", batch, t, bank, p, w)
        b = cibl_loss(batch, t, bank, p, w, head_kind="cosine")
        np.testing.assert_allclose(a.per_instance, b.per_instance, atol=1e-15)

    def test_unknown_kind(self):
        f, t, y, z, bank, p, w = random_instance(24)
        with pytest.raises(ValueError, match="unknown loss kind"):
            compute_loss("focal", BatchInputs(f, y, z), t, bank, p, w)


class TestBatchInputs:
    def test_shape_agreement_enforced(self):
        with pytest.raises(ValueError):
            BatchInputs(np.zeros((2, 3)), np.zeros(3, dtype=int), np.zeros((2, 4)))

    def test_unit_norm_check_is_opt_in(self):
        batch = BatchInputs(np.zeros((1, 2)), [0], np.array([[2.0, 0.0]]))
        with pytest.raises(ValueError, match="unit"):
            batch.check_unit_embeddings()
        ok = BatchInputs(np.zeros((1, 2)), [0], np.array([[1.0, 0.0]]))
        ok.check_unit_embeddings()


class TestClassProfile:
    def test_rejects_zero_counts(self):
        with pytest.raises(ValueError):
            ClassProfile([3, 0])

    def test_rejects_single_class(self):
        with pytest.raises(ValueError):
            ClassProfile([5])


class TestLossWeights:
    def test_rejects_both_weights_zero(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_ce=0.0, lambda_scl=0.0)

    def test_rejects_bad_temperatures(self):
        with pytest.raises(ValueError):
            LossWeights(tau=0.0)
        with pytest.raises(ValueError):
            LossWeights(gamma_t=-1.0)
