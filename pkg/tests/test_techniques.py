import numpy as np
import pytest
from mpmath import mp

from noisefault.errors import DataError
from noisefault.metrics import confusion_matrix, macro_f1
from noisefault.techniques import (
    CCE_LOG_FLOOR,
    Decision,
    Technique,
    TechniqueConfig,
    ac_loss,
    calibrate_threshold,
    cce_loss,
    decide,
    decide_batch,
    eb_total_loss,
    energy_reg_loss,
    energy_score,
    free_energy,
    logsumexp,
    ne_loss,
    noise_score,
    parse_technique,
    softmax,
    softmax_score,
    technique_loss,
    technique_loss_and_grads,
)

mp.dps = 50

K = 13


def softmax_oracle(row, temperature=1.0):
    exps = [mp.e ** (mp.mpf(float(v)) / mp.mpf(temperature)) for v in row]
    total = sum(exps)
    return np.array([float(e / total) for e in exps])


def lse_oracle(row):
    return float(mp.log(sum(mp.e ** mp.mpf(float(v)) for v in row)))


def cce_oracle(probs, target):
    total = mp.mpf(0)
    for p, t in zip(probs, target):
        total -= mp.mpf(float(t)) * mp.log(max(mp.mpf(float(p)), mp.mpf(CCE_LOG_FLOOR)))
    return float(total)


def one_hot(indices, width):
    out = np.zeros((len(indices), width))
    out[np.arange(len(indices)), indices] = 1.0
    return out


class TestSoftmax:
    def test_matches_high_precision_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            logits = rng.normal(0, 3, K)
            assert np.allclose(softmax(logits), softmax_oracle(logits), atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        probs = softmax(rng.normal(0, 5, (20, K)))
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(probs > 0)

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(0, 2, K)
        assert np.allclose(softmax(logits), softmax(logits + 123.0), atol=1e-12)

    def test_extreme_logits_stay_finite(self):
        probs = softmax(np.array([1000.0, -1000.0, 0.0]))
        assert np.all(np.isfinite(probs))
        assert probs[0] == pytest.approx(1.0)

    def test_temperature(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(0, 2, K)
        assert np.allclose(softmax(logits, 2.0), softmax_oracle(logits, 2.0), atol=1e-12)
        # Higher temperature flattens the distribution.
        assert softmax(logits, 10.0).max() < softmax(logits, 0.5).max()

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            softmax(np.array([np.nan, 0.0]))
        with pytest.raises(ValueError):
            softmax(np.array([1.0, 0.0]), temperature=0.0)


class TestScores:
    def test_energy_score_is_logsumexp(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            logits = rng.normal(0, 4, K)
            assert energy_score(logits) == pytest.approx(lse_oracle(logits), abs=1e-9)
            assert free_energy(logits) == pytest.approx(-lse_oracle(logits), abs=1e-9)

    def test_temperature_scaling(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(0, 4, K)
        for t in (0.5, 2.0, 10.0):
            expected = t * lse_oracle(logits / t)
            assert energy_score(logits, t) == pytest.approx(expected, abs=1e-9)

    def test_max_softmax_logsumexp_identity(self):
        # log(max softmax) = max(logits) - logsumexp(logits)
        rng = np.random.default_rng(6)
        for _ in range(200):
            logits = rng.normal(0, 5, K)
            lhs = np.log(softmax_score(softmax(logits)))
            rhs = logits.max() - logsumexp(logits)
            assert lhs == pytest.approx(rhs, abs=1e-9)

    def test_energy_bounds(self):
        # max(g) <= logsumexp(g) <= max(g) + log(K)
        rng = np.random.default_rng(7)
        for _ in range(100):
            logits = rng.normal(0, 5, K)
            lse = energy_score(logits)
            assert logits.max() - 1e-12 <= lse <= logits.max() + np.log(K) + 1e-12

    def test_shift_equivariance(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(0, 2, K)
        assert energy_score(logits + 7.5) == pytest.approx(energy_score(logits) + 7.5, abs=1e-9)
        assert free_energy(logits + 7.5) == pytest.approx(free_energy(logits) - 7.5, abs=1e-9)

    def test_softmax_score_range(self):
        rng = np.random.default_rng(9)
        probs = softmax(rng.normal(0, 3, (200, K)))
        scores = softmax_score(probs)
        assert np.all(scores >= 1.0 / K - 1e-12)
        assert np.all(scores <= 1.0)

    def test_batch_shapes(self):
        rng = np.random.default_rng(10)
        logits = rng.normal(0, 1, (5, K))
        assert np.shape(energy_score(logits)) == (5,)
        assert isinstance(energy_score(logits[0]), float)


class TestCceLoss:
    def test_perfect_prediction_is_zero(self):
        target = np.zeros(K)
        target[4] = 1.0
        probs = np.zeros(K)
        probs[4] = 1.0
        assert cce_loss(probs, target) == 0.0

    def test_uniform_floor_is_log_k(self):
        target = np.zeros(K)
        target[2] = 1.0
        assert cce_loss(np.full(K, 1.0 / K), target) == pytest.approx(np.log(K), abs=1e-12)
        assert np.log(K) == pytest.approx(2.5649493574615367, abs=1e-12)

    def test_matches_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            probs = softmax(rng.normal(0, 3, K))
            target = one_hot([rng.integers(K)], K)[0]
            assert cce_loss(probs, target) == pytest.approx(cce_oracle(probs, target), abs=1e-10)

    def test_zero_probability_clamped(self):
        probs = np.array([1.0, 0.0])
        target = np.array([0.0, 1.0])
        assert cce_loss(probs, target) == pytest.approx(-np.log(CCE_LOG_FLOOR))

    def test_batch_returns_vector(self):
        rng = np.random.default_rng(12)
        probs = softmax(rng.normal(0, 1, (7, K)))
        targets = one_hot(rng.integers(0, K, 7), K)
        losses = cce_loss(probs, targets)
        assert losses.shape == (7,)
        for i in range(7):
            assert losses[i] == pytest.approx(cce_loss(probs[i], targets[i]), abs=1e-12)


class TestCompositeLosses:
    def test_ne_uniform_noise_term(self):
        # Noise logits all equal makes the exposure term exactly log(K).
        machine = 50.0 * one_hot([0, 1], K)
        targets = one_hot([0, 1], K)
        noise = np.zeros((3, K))
        loss = ne_loss(machine, targets, noise, exposure_weight=0.5)
        assert loss == pytest.approx(0.5 * np.log(K), abs=1e-9)
        assert 0.5 * np.log(K) == pytest.approx(1.2824746787307684, abs=1e-12)

    def test_ne_matches_elementwise_oracle(self):
        rng = np.random.default_rng(13)
        machine = rng.normal(0, 2, (4, K))
        targets = one_hot(rng.integers(0, K, 4), K)
        noise = rng.normal(0, 2, (3, K))
        uniform = np.full(K, 1.0 / K)
        expected = np.mean(
            [cce_oracle(softmax_oracle(m), t) for m, t in zip(machine, targets)]
        ) + 0.5 * np.mean([cce_oracle(softmax_oracle(n), uniform) for n in noise])
        assert ne_loss(machine, targets, noise, 0.5) == pytest.approx(expected, abs=1e-9)

    def test_ne_empty_machine_batch_rejected(self):
        with pytest.raises(DataError):
            ne_loss(np.zeros((0, K)), np.zeros((0, K)), np.zeros((2, K)), 0.5)

    def test_energy_reg_hinges(self):
        rng = np.random.default_rng(14)
        machine = rng.normal(0, 2, (4, K))
        noise = rng.normal(0, 2, (3, K))
        m_margin, n_margin = -25.0, -7.0
        e_m = np.array([-lse_oracle(row) for row in machine])
        e_n = np.array([-lse_oracle(row) for row in noise])
        expected = np.mean(np.maximum(0.0, e_m - m_margin) ** 2) + np.mean(
            np.maximum(0.0, n_margin - e_n) ** 2
        )
        got = energy_reg_loss(machine, noise, m_margin, n_margin)
        assert got == pytest.approx(expected, abs=1e-8)

    def test_energy_reg_inactive_hinges_are_zero(self):
        # Machine energy far below its margin, noise far above its margin.
        machine = np.full((2, K), -10.0)  # E = 10 - log13, margin 30 -> inactive
        noise = np.full((2, K), 10.0)  # E = -10 - log13, margin -30 -> inactive
        assert energy_reg_loss(machine, noise, 30.0, -30.0) == 0.0

    def test_eb_total_is_cce_plus_weighted_reg(self):
        rng = np.random.default_rng(15)
        machine = rng.normal(0, 2, (4, K))
        targets = one_hot(rng.integers(0, K, 4), K)
        noise = rng.normal(0, 2, (3, K))
        expected = np.mean(
            [cce_oracle(softmax_oracle(m), t) for m, t in zip(machine, targets)]
        ) + 0.1 * energy_reg_loss(machine, noise, -25.0, -7.0)
        got = eb_total_loss(machine, targets, noise, 0.1, -25.0, -7.0)
        assert got == pytest.approx(expected, abs=1e-9)

    def test_ac_pooled_mean(self):
        rng = np.random.default_rng(16)
        machine = rng.normal(0, 2, (4, K + 1))
        targets = one_hot(rng.integers(0, K, 4), K + 1)
        noise = rng.normal(0, 2, (3, K + 1))
        noise_target = np.zeros(K + 1)
        noise_target[-1] = 1.0
        items = [cce_oracle(softmax_oracle(m), t) for m, t in zip(machine, targets)]
        items += [cce_oracle(softmax_oracle(n), noise_target) for n in noise]
        assert ac_loss(machine, targets, noise) == pytest.approx(np.mean(items), abs=1e-9)

    def test_ac_rejects_narrow_targets(self):
        machine = np.zeros((2, K + 1))
        targets = one_hot([0, 1], K)  # missing the extra class column
        with pytest.raises(ValueError):
            ac_loss(machine, targets, np.zeros((1, K + 1)))

    def test_dispatcher_agrees_with_direct_calls(self):
        rng = np.random.default_rng(17)
        machine = rng.normal(0, 2, (4, K))
        targets = one_hot(rng.integers(0, K, 4), K)
        noise = rng.normal(0, 2, (3, K))
        plain = np.mean([cce_loss(softmax(m), t) for m, t in zip(machine, targets)])
        for kind in (Technique.SOFTMAX_SCORE, Technique.ENERGY_SCORE):
            got = technique_loss(TechniqueConfig(kind), machine, targets, noise)
            assert got == pytest.approx(plain, abs=1e-12)
        assert technique_loss(
            TechniqueConfig(Technique.NOISE_EXPOSURE), machine, targets, noise
        ) == pytest.approx(ne_loss(machine, targets, noise, 0.5), abs=1e-12)
        assert technique_loss(
            TechniqueConfig(Technique.ENERGY_BOUNDED), machine, targets, noise
        ) == pytest.approx(eb_total_loss(machine, targets, noise, 0.1, -25.0, -7.0), abs=1e-12)
        machine14 = rng.normal(0, 2, (4, K + 1))
        targets14 = one_hot(rng.integers(0, K, 4), K + 1)
        noise14 = rng.normal(0, 2, (3, K + 1))
        assert technique_loss(
            TechniqueConfig(Technique.ADDITIONAL_CLASS), machine14, targets14, noise14
        ) == pytest.approx(ac_loss(machine14, targets14, noise14), abs=1e-12)


class TestLossMinimality:
    """Constructed optima are not beaten by random perturbations."""

    def optimum(self, kind):
        width = kind.n_outputs(K)
        machine = 50.0 * one_hot([0, 1, 2], width)
        targets = one_hot([0, 1, 2], width)
        if kind is Technique.ADDITIONAL_CLASS:
            noise = 50.0 * one_hot([width - 1, width - 1], width)
        else:
            # Uniform logits minimize the exposure term and keep the free
            # energy inside both margins.
            noise = np.zeros((2, width))
        return machine, targets, noise

    @pytest.mark.parametrize("kind", list(Technique))
    def test_perturbations_never_improve(self, kind):
        cfg = TechniqueConfig(kind)
        machine, targets, noise = self.optimum(kind)
        base = technique_loss(cfg, machine, targets, noise)
        rng = np.random.default_rng(18)
        for _ in range(1000):
            d_m = rng.normal(0, 0.1, machine.shape)
            d_n = rng.normal(0, 0.1, noise.shape)
            perturbed = technique_loss(cfg, machine + d_m, targets, noise + d_n)
            assert perturbed >= base - 1e-12

    def test_optimum_values(self):
        for kind in Technique:
            cfg = TechniqueConfig(kind)
            machine, targets, noise = self.optimum(kind)
            base = technique_loss(cfg, machine, targets, noise)
            if kind is Technique.NOISE_EXPOSURE:
                assert base == pytest.approx(0.5 * np.log(K), abs=1e-9)
            else:
                assert base == pytest.approx(0.0, abs=1e-9)


def finite_difference(fn, x, eps=1e-6):
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn()
        flat[i] = orig - eps
        down = fn()
        flat[i] = orig
        out[i] = (up - down) / (2 * eps)
    return grad


class TestGradients:
    @pytest.mark.parametrize("kind", list(Technique))
    def test_matches_finite_differences(self, kind):
        rng = np.random.default_rng(19)
        width = kind.n_outputs(K)
        machine = rng.normal(0, 1.5, (4, width))
        targets = one_hot(rng.integers(0, K, 4), width)
        noise = rng.normal(0, 1.5, (3, width))
        cfg = TechniqueConfig(kind)
        loss, d_machine, d_noise = technique_loss_and_grads(cfg, machine, targets, noise)
        assert loss == pytest.approx(technique_loss(cfg, machine, targets, noise), abs=1e-12)

        fd_machine = finite_difference(
            lambda: technique_loss(cfg, machine, targets, noise), machine
        )
        assert np.allclose(d_machine, fd_machine, atol=1e-7)

        fd_noise = finite_difference(
            lambda: technique_loss(cfg, machine, targets, noise), noise
        )
        if kind in (Technique.SOFTMAX_SCORE, Technique.ENERGY_SCORE):
            assert d_noise is None
            assert np.allclose(fd_noise, 0.0, atol=1e-9)
        else:
            assert np.allclose(d_noise, fd_noise, atol=1e-7)

    @pytest.mark.parametrize("kind", list(Technique))
    def test_machine_only_batches(self, kind):
        if kind is Technique.ADDITIONAL_CLASS:
            width = K + 1
        else:
            width = K
        rng = np.random.default_rng(20)
        machine = rng.normal(0, 1.5, (4, width))
        targets = one_hot(rng.integers(0, K, 4), width)
        cfg = TechniqueConfig(kind)
        loss, d_machine, d_noise = technique_loss_and_grads(cfg, machine, targets, None)
        assert d_noise is None
        fd_machine = finite_difference(
            lambda: technique_loss(cfg, machine, targets, None), machine
        )
        assert np.allclose(d_machine, fd_machine, atol=1e-7)
        assert np.isfinite(loss)

    def test_eb_active_noise_hinge_gradient(self):
        # Force the noise hinge active: large logits give the noise rows a
        # free energy well below the noise margin, as a machine clip would.
        cfg = TechniqueConfig(Technique.ENERGY_BOUNDED)
        rng = np.random.default_rng(21)
        machine = rng.normal(0, 1, (2, K))
        targets = one_hot([0, 1], K)
        noise = rng.normal(15, 0.5, (2, K))
        assert np.all(np.atleast_1d(free_energy(noise)) < cfg.noise_margin)
        _, _, d_noise = technique_loss_and_grads(cfg, machine, targets, noise)
        fd_noise = finite_difference(
            lambda: technique_loss(cfg, machine, targets, noise), noise
        )
        assert np.abs(d_noise).max() > 0
        assert np.allclose(d_noise, fd_noise, atol=1e-7)


def brute_force_threshold(scores, is_noise, true_cond, pred_cond, n_conditions=K):
    noise_label = n_conditions
    true_labels = np.where(is_noise, noise_label, true_cond)
    distinct = np.unique(scores)
    candidates = np.concatenate(([-np.inf], 0.5 * (distinct[:-1] + distinct[1:]), [np.inf]))
    best_threshold, best_f1 = None, -1.0
    for threshold in candidates:
        pred = np.where(scores > threshold, noise_label, pred_cond)
        f1 = macro_f1(confusion_matrix(true_labels, pred, n_conditions + 1))
        if f1 > best_f1:
            best_threshold, best_f1 = threshold, f1
    return best_threshold, best_f1


class TestCalibrateThreshold:
    def test_separable_example(self):
        scores = np.array([0.1, 0.2, 0.8, 0.9])
        is_noise = np.array([False, False, True, True])
        true_cond = np.array([3, 5, 0, 0])
        pred_cond = np.array([3, 5, 0, 0])
        threshold, f1 = calibrate_threshold(scores, is_noise, true_cond, pred_cond)
        assert threshold == pytest.approx(0.5)
        # Machine predictions are right and the split is clean: noise F1 and
        # both machine-class F1s are 1, every other class is absent.
        expected = 3.0 / 14.0
        assert f1 == pytest.approx(expected, abs=1e-12)

    def test_matches_brute_force_on_random_sets(self):
        rng = np.random.default_rng(22)
        for _ in range(50):
            n = int(rng.integers(5, 201))
            # Quantized scores force plenty of ties.
            scores = np.round(rng.normal(0, 1, n), 1)
            is_noise = rng.random(n) < 0.4
            if not is_noise.any():
                is_noise[0] = True
            if is_noise.all():
                is_noise[-1] = False
            true_cond = rng.integers(0, K, n)
            pred_cond = rng.integers(0, K, n)
            got = calibrate_threshold(scores, is_noise, true_cond, pred_cond)
            expected = brute_force_threshold(scores, is_noise, true_cond, pred_cond)
            assert got[0] == expected[0]
            assert got[1] == pytest.approx(expected[1], abs=1e-12)

    def test_all_noise_best_at_minus_inf(self):
        # Scores inverted so that every finite cut mislabels something and
        # labeling everything noise wins; smallest candidate is returned.
        scores = np.array([0.9, 0.1])
        is_noise = np.array([False, True])
        true_cond = np.array([2, 0])
        pred_cond = np.array([5, 0])  # machine item predicted wrong anyway
        threshold, f1 = calibrate_threshold(scores, is_noise, true_cond, pred_cond, n_conditions=6)
        expected = brute_force_threshold(scores, is_noise, true_cond, pred_cond, n_conditions=6)
        assert (threshold, f1) == (expected[0], pytest.approx(expected[1]))

    def test_single_class_rejected(self):
        with pytest.raises(DataError):
            calibrate_threshold([0.5, 0.6], [True, True], [0, 0], [0, 0])
        with pytest.raises(DataError):
            calibrate_threshold([0.5, 0.6], [False, False], [0, 1], [0, 1])
        with pytest.raises(DataError):
            calibrate_threshold([], [], [], [])


class TestNoiseScoreAndDecisions:
    def test_score_definitions(self):
        rng = np.random.default_rng(23)
        logits = rng.normal(0, 2, K)
        sm = noise_score(Technique.SOFTMAX_SCORE, logits)
        assert sm == pytest.approx(1.0 - softmax(logits).max(), abs=1e-12)
        assert noise_score(Technique.NOISE_EXPOSURE, logits) == pytest.approx(sm, abs=1e-12)
        fe = noise_score(Technique.ENERGY_SCORE, logits)
        assert fe == pytest.approx(free_energy(logits), abs=1e-12)
        assert noise_score(Technique.ENERGY_BOUNDED, logits) == pytest.approx(fe, abs=1e-12)

    def test_ac_has_no_score(self):
        with pytest.raises(ValueError):
            noise_score(Technique.ADDITIONAL_CLASS, np.zeros(K + 1))

    def test_decide_by_threshold(self):
        logits = np.zeros(K)
        logits[7] = 5.0
        quiet = decide(Technique.SOFTMAX_SCORE, logits, threshold=0.9)
        assert quiet == Decision(False, 7, pytest.approx(1.0 - softmax(logits).max()))
        noisy = decide(Technique.SOFTMAX_SCORE, np.zeros(K), threshold=0.5)
        assert noisy.is_noise and noisy.condition is None
        assert noisy.noise_score == pytest.approx(1.0 - 1.0 / K)

    def test_decide_requires_threshold(self):
        with pytest.raises(ValueError):
            decide(Technique.ENERGY_SCORE, np.zeros(K), threshold=None)

    def test_decide_ac_argmax(self):
        logits = np.zeros(K + 1)
        logits[-1] = 3.0
        decision = decide(Technique.ADDITIONAL_CLASS, logits, threshold=None)
        assert decision.is_noise and decision.condition is None and decision.noise_score is None
        logits = np.zeros(K + 1)
        logits[4] = 3.0
        decision = decide(Technique.ADDITIONAL_CLASS, logits, threshold=None)
        assert not decision.is_noise and decision.condition == 4

    def test_decide_rejects_batches(self):
        with pytest.raises(ValueError):
            decide(Technique.SOFTMAX_SCORE, np.zeros((2, K)), threshold=0.5)

    def test_decide_batch_score_technique(self):
        rng = np.random.default_rng(24)
        logits = rng.normal(0, 2, (20, K))
        threshold = -2.56  # roughly the free energy of uniform logits
        labels, scores = decide_batch(Technique.ENERGY_SCORE, logits, threshold)
        expected_scores = free_energy(logits)
        assert np.allclose(scores, expected_scores, atol=1e-12)
        for i in range(20):
            if expected_scores[i] > threshold:
                assert labels[i] == K
            else:
                assert labels[i] == logits[i].argmax()

    def test_decide_batch_ac(self):
        logits = np.zeros((3, K + 1))
        logits[0, 2] = 1.0
        logits[1, K] = 1.0
        logits[2, 9] = 1.0
        labels, scores = decide_batch(Technique.ADDITIONAL_CLASS, logits, None)
        assert scores is None
        assert labels.tolist() == [2, K, 9]

    def test_decide_batch_matches_decide(self):
        rng = np.random.default_rng(25)
        logits = rng.normal(0, 2, (30, K))
        labels, _ = decide_batch(Technique.SOFTMAX_SCORE, logits, 0.7)
        for i in range(30):
            single = decide(Technique.SOFTMAX_SCORE, logits[i], 0.7)
            expected = K if single.is_noise else single.condition
            assert labels[i] == expected


class TestTechniqueMetadata:
    def test_exposure_flags(self):
        assert Technique.NOISE_EXPOSURE.uses_exposure_data
        assert Technique.ENERGY_BOUNDED.uses_exposure_data
        assert Technique.ADDITIONAL_CLASS.uses_exposure_data
        assert not Technique.SOFTMAX_SCORE.uses_exposure_data
        assert not Technique.ENERGY_SCORE.uses_exposure_data

    def test_score_flags_and_widths(self):
        for kind in Technique:
            assert kind.has_noise_score == (kind is not Technique.ADDITIONAL_CLASS)
            expected = K + 1 if kind is Technique.ADDITIONAL_CLASS else K
            assert kind.n_outputs(K) == expected

    def test_parse_aliases(self):
        assert parse_technique("sm") is Technique.SOFTMAX_SCORE
        assert parse_technique("Energy") is Technique.ENERGY_SCORE
        assert parse_technique(" noise_exposure ") is Technique.NOISE_EXPOSURE
        assert parse_technique("additional_class") is Technique.ADDITIONAL_CLASS
        assert parse_technique(Technique.ENERGY_BOUNDED) is Technique.ENERGY_BOUNDED
        with pytest.raises(ValueError):
            parse_technique("bogus")

    def test_with_threshold_copies(self):
        cfg = TechniqueConfig(Technique.ENERGY_SCORE)
        assert cfg.threshold is None
        cut = cfg.with_threshold(-3.5)
        assert cut.threshold == -3.5
        assert cfg.threshold is None
        assert cut.kind is Technique.ENERGY_SCORE
