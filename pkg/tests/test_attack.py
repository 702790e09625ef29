"""Attack-layer tests: margin loss, projection, sampling, NES, full loop."""

import numpy as np
import pytest

from npattack.anp import AnpParameters
from npattack.attack import (AttackConfig, center_losses, margin_loss,
                             margin_loss_batch, nes_update, project,
                             run_attack, sample_batch, success_curve)
from npattack.attack import AttackResult, _margin_from_logp
from npattack.errors import ContractViolation


class TestMarginLoss:
    def test_untargeted_hand_value(self):
        # log 0.7 - log 0.2 = log 3.5
        probs = np.array([0.7, 0.2, 0.1])
        assert margin_loss(probs, 0) == pytest.approx(np.log(3.5), abs=1e-12)
        assert margin_loss(probs, 0) == pytest.approx(1.2528, abs=1e-4)

    def test_untargeted_zero_on_misclassification(self):
        probs = np.array([0.2, 0.7, 0.1])
        assert margin_loss(probs, 0) == 0.0

    def test_targeted_zero_when_target_wins(self):
        probs = np.array([0.2, 0.7, 0.1])
        assert margin_loss(probs, 1, targeted=True) == 0.0

    def test_targeted_positive_otherwise(self):
        probs = np.array([0.6, 0.3, 0.1])
        expected = np.log(0.6) - np.log(0.3)
        assert margin_loss(probs, 1, targeted=True) == pytest.approx(expected)

    def test_label_out_of_range(self):
        with pytest.raises(ContractViolation):
            margin_loss(np.array([0.5, 0.5]), 2)

    def test_shift_invariance_in_log_space(self):
        rng = np.random.default_rng(3)
        logp = rng.normal(size=6)
        for c in (-3.0, 0.0, 10.0):
            assert _margin_from_logp(logp + c, 2, False) == pytest.approx(
                _margin_from_logp(logp, 2, False), abs=1e-12)

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(4)
        probs = rng.dirichlet(np.ones(5), size=8)
        batch = margin_loss_batch(probs, 3)
        for i in range(8):
            assert batch[i] == pytest.approx(margin_loss(probs[i], 3))


class TestProject:
    def test_feasible_input_unchanged(self):
        x = np.full((2, 2, 1), 0.5)
        inside = x + 0.05
        assert np.array_equal(project(inside, x, 0.2), inside)

    def test_clamp_arithmetic(self):
        x = np.full((3, 3, 1), 0.5)
        out = project(x + 0.5, x, 0.2)
        assert np.all(out == 0.7)

    def test_random_case_obeys_both_bounds(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(size=(5, 5, 1))
        cand = rng.uniform(-0.5, 1.5, size=(5, 5, 1))
        out = project(cand, x, 0.05)
        assert np.abs(out - x).max() <= 0.05 + 1e-15
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            project(np.zeros((2, 2)), np.zeros((3, 3)), 0.1)


class _ZeroNoise:
    """rng stand-in whose draws are all zeros (perturbation test hook)."""

    def standard_normal(self, size):
        return np.zeros(size)


class TestSampleBatch:
    def test_zero_perturbation_keeps_r(self):
        mu, sigma = np.zeros(4), np.ones(4)
        r = np.arange(12.0).reshape(3, 4)
        _, r_batch, p, _ = sample_batch(mu, sigma, r, "R", 2, _ZeroNoise())
        assert np.array_equal(r_batch[0], r)
        assert np.array_equal(r_batch[1], r)
        assert np.all(p == 0.0)

    def test_variant_z_statistics(self):
        # z_i = mu + 2 p sigma: batch std ~= 2 sigma, doubling sigma doubles it
        rng = np.random.default_rng(11)
        mu = np.array([1.0, -2.0])
        r = np.zeros((3, 2))
        b = 10_000
        for mult in (1.0, 2.0):
            sigma = np.array([0.5, 1.5]) * mult
            z, _, p, _ = sample_batch(mu, sigma, r, "Z", b, rng)
            assert np.allclose(z.std(axis=0), 2.0 * sigma, rtol=0.05)
            se = 2.0 * sigma / np.sqrt(b)
            assert np.all(np.abs(z.mean(axis=0) - mu) < 3.0 * se)

    def test_variant_r_fresh_latent_sample(self):
        rng = np.random.default_rng(12)
        mu, sigma = np.zeros(3), np.full(3, 0.3)
        r = np.zeros((2, 3))
        z, _, _, _ = sample_batch(mu, sigma, r, "R", 5000, rng)
        assert np.allclose(z.std(axis=0), sigma, rtol=0.1)

    def test_variant_r_deterministic_z_mode(self):
        rng = np.random.default_rng(13)
        mu, sigma = np.arange(3.0), np.ones(3)
        z, _, _, _ = sample_batch(mu, sigma, np.zeros((2, 3)), "R", 4, rng,
                                  deterministic_z=True)
        assert np.array_equal(z, np.tile(mu, (4, 1)))

    def test_variant_rz_shares_perturbation(self):
        rng = np.random.default_rng(14)
        mu, sigma = np.zeros(3), np.full(3, 0.5)
        r = np.ones((4, 3))
        z, r_batch, p, _ = sample_batch(mu, sigma, r, "RZ", 6, rng)
        assert np.allclose(z, mu + 2.0 * p * sigma)
        for i in range(6):
            assert np.allclose(r_batch[i] - r, np.tile(p[i] * sigma, (4, 1)))

    def test_sigma_prime_overrides_scale(self):
        rng = np.random.default_rng(15)
        mu, sigma = np.zeros(2), np.full(2, 1e-3)
        _, r_batch, p, scale = sample_batch(mu, sigma, np.zeros((2, 2)), "R",
                                            3, rng, sigma_prime=0.7)
        assert np.all(scale == 0.7)
        assert np.allclose(r_batch, p * 0.7)

    def test_rejects_bad_sigma(self):
        with pytest.raises(ContractViolation):
            sample_batch(np.zeros(2), np.zeros(2), np.zeros((1, 2)), "R", 2,
                         _ZeroNoise())


class TestNesUpdate:
    def test_zero_centered_losses_no_move(self):
        v = np.array([1.0, 2.0])
        out = nes_update(v, np.zeros(3), np.ones((3, 2)), 0.1, 3, 1.0)
        assert np.array_equal(out, v)

    def test_antithetic_pair_moves_away_from_high_loss(self):
        u = np.array([0.5, -1.0, 2.0])
        v = np.zeros(3)
        losses = np.array([1.0, -1.0])
        perts = np.stack([u, -u])
        out = nes_update(v, losses, perts, eta=0.3, b=2, sigma=2.0)
        assert np.allclose(out, -(0.3 / 2.0) * u)

    def test_quadratic_toy_converges(self):
        # NES on l(v) = ||v - v*||^2 closes 90% of the distance in 200 rounds
        rng = np.random.default_rng(20)
        target = rng.normal(size=8)
        v = np.zeros(8)
        sigma = 0.1
        start = np.linalg.norm(v - target)
        for _ in range(200):
            p = rng.standard_normal((50, 8))
            losses = ((v + sigma * p - target) ** 2).sum(axis=1)
            out = nes_update(v, center_losses(losses), p, eta=0.05, b=50,
                             sigma=sigma)
            v = out
        assert np.linalg.norm(v - target) < 0.1 * start

    def test_expected_direction_aligns_with_gradient(self):
        # mean NES update over many batches points along -grad
        rng = np.random.default_rng(21)
        v = np.array([1.0, -0.5, 2.0, 0.0])
        target = np.zeros(4)
        grad = 2.0 * (v - target)
        sigma = 0.05
        total = np.zeros(4)
        for _ in range(2000):
            p = rng.standard_normal((10, 4))
            losses = ((v + sigma * p - target) ** 2).sum(axis=1)
            total += nes_update(v, center_losses(losses), p, 1.0, 10, sigma) - v
        cos = total @ (-grad) / (np.linalg.norm(total) * np.linalg.norm(grad))
        assert cos > 0.9

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            nes_update(np.zeros(3), np.zeros(2), np.zeros((2, 4)), 0.1, 2, 1.0)


def test_center_losses_sums_to_zero():
    rng = np.random.default_rng(30)
    for _ in range(20):
        centered = center_losses(rng.uniform(0, 10, size=17))
        assert abs(centered.sum()) < 1e-12


class StubOracle:
    """Constant-output classifier exposing only the query surface."""

    def __init__(self, probs, n_features):
        self.probs = np.asarray(probs, dtype=np.float64)
        self.n_features = n_features
        self.n_classes = self.probs.shape[0]
        self.query_count = 0

    def query(self, image):
        return self.query_many(np.asarray(image)[None, ...])[0]

    def query_many(self, images):
        images = np.asarray(images)
        flat = images.reshape(images.shape[0], -1)
        if flat.min() < 0.0 or flat.max() > 1.0:
            raise ContractViolation("query outside the [0,1] pixel box")
        self.query_count += flat.shape[0]
        return np.tile(self.probs, (flat.shape[0], 1))


@pytest.fixture(scope="module")
def tiny_model():
    return AnpParameters.init(3, 3, 1, seed=7)


@pytest.fixture
def tiny_image():
    return np.random.default_rng(17).uniform(0.2, 0.8, size=(3, 3, 1))


class TestRunAttack:
    def test_already_misclassified_succeeds_within_first_batch(self, tiny_model,
                                                               tiny_image):
        # the oracle never predicts label 0, so the loss floor is reached
        # by every candidate immediately
        oracle = StubOracle([0.1, 0.8, 0.1], n_features=9)
        cfg = AttackConfig(variant="R", epsilon_inf=0.2, max_iterations=10,
                           sample_size=6, seed=0)
        result = run_attack(oracle, tiny_model, tiny_image, 0, cfg)
        assert result.success
        assert result.iterations_run == 1
        assert result.queries_used <= cfg.sample_size
        assert result.queries_used == oracle.query_count

    def test_failure_consumes_exact_batches(self, tiny_model, tiny_image):
        oracle = StubOracle([0.8, 0.1, 0.1], n_features=9)  # always label 0
        cfg = AttackConfig(variant="Z", epsilon_inf=0.2, max_iterations=7,
                           sample_size=5, seed=1)
        result = run_attack(oracle, tiny_model, tiny_image, 0, cfg)
        assert not result.success
        assert result.iterations_run == 7
        assert result.queries_used == 35 == oracle.query_count

    def test_query_budget_stops_at_batch_boundary(self, tiny_model, tiny_image):
        oracle = StubOracle([0.8, 0.1, 0.1], n_features=9)
        cfg = AttackConfig(variant="R", epsilon_inf=0.2, max_iterations=100,
                           sample_size=6, seed=2, query_budget=20)
        result = run_attack(oracle, tiny_model, tiny_image, 0, cfg)
        assert not result.success
        assert result.iterations_run == 3
        assert result.queries_used == 18  # 3 full batches, the 4th won't fit

    def test_fixed_seed_bit_identical(self, tiny_model, tiny_image):
        def once():
            oracle = StubOracle([0.8, 0.1, 0.1], n_features=9)
            cfg = AttackConfig(variant="RZ", epsilon_inf=0.15,
                               max_iterations=4, sample_size=5, seed=5)
            return run_attack(oracle, tiny_model, tiny_image, 0, cfg)

        a, b = once(), once()
        assert a.adversarial_image.tobytes() == b.adversarial_image.tobytes()
        assert a.trace == b.trace
        assert (a.queries_used, a.l2_distortion, a.linf_distortion) == \
               (b.queries_used, b.l2_distortion, b.linf_distortion)

    def test_all_variants_respect_ball(self, tiny_model, tiny_image):
        for variant in ("R", "Z", "RZ"):
            oracle = StubOracle([0.8, 0.1, 0.1], n_features=9)
            cfg = AttackConfig(variant=variant, epsilon_inf=0.1,
                               max_iterations=3, sample_size=4, seed=3)
            result = run_attack(oracle, tiny_model, tiny_image, 0, cfg)
            assert result.linf_distortion <= 0.1 + 1e-12
            assert result.adversarial_image.min() >= 0.0
            assert result.adversarial_image.max() <= 1.0

    def test_targeted_success_condition(self, tiny_model, tiny_image):
        oracle = StubOracle([0.1, 0.2, 0.7], n_features=9)
        cfg = AttackConfig(variant="R", epsilon_inf=0.2, max_iterations=5,
                           sample_size=4, seed=4, targeted=True, target_label=2)
        result = run_attack(oracle, tiny_model, tiny_image, 0, cfg)
        assert result.success
        assert int(oracle.query(result.adversarial_image).argmax()) == 2

    def test_dimension_mismatch_rejected(self, tiny_model):
        oracle = StubOracle([0.5, 0.5], n_features=99)
        cfg = AttackConfig()
        with pytest.raises(ContractViolation):
            run_attack(oracle, tiny_model, np.zeros((3, 3, 1)), 0, cfg)

    def test_bad_config_rejected(self):
        with pytest.raises(ContractViolation):
            AttackConfig(variant="Q")
        with pytest.raises(ContractViolation):
            AttackConfig(epsilon_inf=0.0)
        with pytest.raises(ContractViolation):
            AttackConfig(targeted=True)


class TestSuccessCurve:
    def _result(self, success, queries):
        return AttackResult(success, np.zeros((1, 1, 1)), queries, 0.0, 0.0, 1)

    def test_all_failures_zero(self):
        results = [self._result(False, 100) for _ in range(4)]
        assert np.all(success_curve(results, [50, 150]) == 0.0)

    def test_saturates_at_asr(self):
        results = [self._result(True, 100), self._result(True, 300),
                   self._result(False, 900)]
        curve = success_curve(results, [1000, 5000])
        assert np.all(curve == pytest.approx(2.0 / 3.0))

    def test_hand_counted_fractions(self):
        results = [self._result(True, 100), self._result(True, 300),
                   self._result(False, 50)]
        curve = success_curve(results, [200, 400])
        assert curve.tolist() == [pytest.approx(1.0 / 3.0),
                                  pytest.approx(2.0 / 3.0)]

    def test_monotone(self):
        rng = np.random.default_rng(9)
        results = [self._result(bool(rng.integers(2)), int(rng.integers(1, 2000)))
                   for _ in range(30)]
        curve = success_curve(results, range(0, 2500, 100))
        assert np.all(np.diff(curve) >= 0.0)

    def test_empty_rejected(self):
        with pytest.raises(ContractViolation):
            success_curve([], [100])
