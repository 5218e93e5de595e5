"""
Tests for services.attacks: l∞ projection, FGSM, PGD
"""
import numpy as np
import pytest

from services import nn
from services import tensor as T
from services.attacks import (
    AttackConfig, fgsm, input_gradient, pgd, pgd_step_size, project_linf, random_start_noise, with_epsilon,
)
from services.errors import ConfigurationError, DimensionError


@pytest.fixture
def linear_spec():
    return nn.ArchitectureSpec.from_dict({"input_shape": [1, 4, 4], "num_classes": 2,
                                          "layers": [{"type": "flatten"}, {"type": "dense", "units": 2}]})


@pytest.fixture
def batch(blob_dataset):
    idx = np.arange(0, 200, 10)
    return blob_dataset.images[idx], blob_dataset.labels[idx]


def mean_loss(model, x, y) -> float:
    with T.no_grad():
        return float(np.mean(T.cross_entropy_per_sample(model.forward(x).data, y)))


class TestAttackConfig:
    def test_from_scale(self):
        cfg = AttackConfig.from_scale(8, 255, n_iter=10)
        assert cfg.epsilon == 8 / 255
        assert cfg.step == pytest.approx(1.5 * (8 / 255) / 10)

    def test_explicit_step(self):
        assert AttackConfig(epsilon=0.1, epsilon_step=0.05).step == 0.05

    @pytest.mark.parametrize("kwargs", [{"epsilon": -0.1}, {"epsilon": 0.1, "n_iter": 0},
                                        {"epsilon": 0.1, "epsilon_step": -1.0},
                                        {"epsilon": 0.1, "clip_min": 1.0, "clip_max": 0.0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            AttackConfig(**kwargs)

    def test_with_epsilon_recomputes_step(self):
        cfg = with_epsilon(AttackConfig(epsilon=0.1, n_iter=10, epsilon_step=0.5), 0.2)
        assert cfg.epsilon == 0.2
        assert cfg.step == pytest.approx(0.03)


class TestStepSize:
    def test_formula(self):
        assert pgd_step_size(0.1, 30) == pytest.approx(0.005)

    def test_zero_iterations(self):
        with pytest.raises(ConfigurationError):
            pgd_step_size(0.1, 0)


class TestProjection:
    def test_ball_and_range(self, rng):
        origin = rng.uniform(0, 1, size=(3, 1, 4, 4))
        candidate = origin + rng.uniform(-1, 1, size=origin.shape)
        projected = project_linf(candidate, origin, 0.1)
        assert np.max(np.abs(projected - origin)) <= 0.1 + 1e-12
        assert projected.min() >= 0.0 and projected.max() <= 1.0

    def test_inside_point_unchanged(self):
        origin = np.full((1, 1, 2, 2), 0.5)
        candidate = origin + 0.05
        assert np.array_equal(project_linf(candidate, origin, 0.1), candidate)

    def test_range_clip_wins(self):
        origin = np.full((1, 1, 1, 1), 0.98)
        assert project_linf(origin + 0.1, origin, 0.1)[0, 0, 0, 0] == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            project_linf(np.zeros((1, 4)), np.zeros((1, 5)), 0.1)


class TestInputGradient:
    def test_rows_are_independent(self, linear_spec, batch):
        model = nn.build(linear_spec, seed=3)
        x, y = batch
        whole = input_gradient(model, x, y)
        single = input_gradient(model, x[:1], y[:1])
        assert np.allclose(whole[:1], single, atol=1e-14)

    def test_parameters_get_no_gradient(self, linear_spec, batch):
        model = nn.build(linear_spec, seed=3)
        input_gradient(model, *batch)
        assert all(p.grad is None or not np.any(p.grad) for p in model.params.values())


class TestLinearSoftmaxGradient:
    """Two-class linear softmax: sign ∂L/∂x_j = sign(W_j1 − W_j0) for y=0, flipped for y=1"""

    @pytest.fixture
    def model(self, linear_spec, rng):
        model = nn.build(linear_spec, seed=0)
        model.params["layer1.weight"].assign_(rng.normal(scale=0.1, size=(16, 2)))
        model.params["layer1.bias"].assign_(rng.normal(scale=0.1, size=2))
        return model

    @staticmethod
    def expected_sign(model, y) -> np.ndarray:
        w = model.params["layer1.weight"].data
        per_pixel = np.sign(w[:, 1] - w[:, 0])
        rows = np.where(np.asarray(y) == 0, 1.0, -1.0)
        return (rows[:, None] * per_pixel[None, :]).reshape(-1, 1, 4, 4)

    def test_input_gradient_sign(self, model, batch):
        x, y = batch
        assert np.array_equal(np.sign(input_gradient(model, x, y)), self.expected_sign(model, y))

    def test_fgsm_moves_every_pixel_by_epsilon(self, model, batch):
        x, y = batch
        x_adv = fgsm(model, x, y, AttackConfig(epsilon=0.05))
        expected = np.clip(x + 0.05 * self.expected_sign(model, y), 0.0, 1.0)
        assert np.allclose(x_adv, expected, rtol=0.0, atol=1e-15)


class TestFGSM:
    def test_increases_loss_of_linear_model(self, linear_spec, batch):
        model = nn.build(linear_spec, seed=0)
        x, y = batch
        x_adv = fgsm(model, x, y, AttackConfig(epsilon=0.1))
        assert mean_loss(model, x_adv, y) >= mean_loss(model, x, y)

    def test_matches_single_step_pgd(self, cnn_spec, batch):
        model = nn.build(cnn_spec, seed=5)
        x, y = batch
        a = fgsm(model, x, y, AttackConfig(epsilon=0.05))
        b = pgd(model, x, y, AttackConfig(epsilon=0.05, epsilon_step=0.05, n_iter=1, random_start=False))
        assert np.array_equal(a, b)

    def test_zero_epsilon_is_identity(self, cnn_spec, batch):
        x, y = batch
        assert np.array_equal(fgsm(nn.build(cnn_spec, seed=0), x, y, AttackConfig(epsilon=0.0)), x)

    def test_zero_gradient_leaves_input(self, linear_spec, batch):
        model = nn.build(linear_spec, seed=0)
        for p in model.params.values():
            p.assign_(np.zeros(p.shape))
        x, y = batch
        assert np.array_equal(fgsm(model, x, y, AttackConfig(epsilon=0.1)), x)


class TestPGD:
    @pytest.mark.parametrize("random_start", [False, True])
    def test_stays_in_ball_and_range(self, cnn_spec, batch, random_start):
        model = nn.build(cnn_spec, seed=1)
        x, y = batch
        cfg = AttackConfig(epsilon=0.1, n_iter=7, random_start=random_start, seed=9)
        x_adv = pgd(model, x, y, cfg)
        assert np.max(np.abs(x_adv - x)) <= 0.1 + 1e-12
        assert x_adv.min() >= 0.0 and x_adv.max() <= 1.0

    @pytest.mark.parametrize("random_start", [False, True])
    def test_zero_epsilon_returns_input(self, cnn_spec, batch, random_start):
        x, y = batch
        cfg = AttackConfig(epsilon=0.0, n_iter=5, random_start=random_start)
        assert np.array_equal(pgd(nn.build(cnn_spec, seed=1), x, y, cfg), x)

    def test_does_not_modify_input(self, cnn_spec, batch):
        x, y = batch
        before = x.copy()
        pgd(nn.build(cnn_spec, seed=1), x, y, AttackConfig(epsilon=0.1, n_iter=3, random_start=True))
        assert np.array_equal(x, before)

    def test_deterministic(self, cnn_spec, batch):
        model = nn.build(cnn_spec, seed=1)
        cfg = AttackConfig(epsilon=0.1, n_iter=4, random_start=True, seed=11)
        assert np.array_equal(pgd(model, *batch, cfg), pgd(model, *batch, cfg))

    def test_random_start_follows_sample_index(self, linear_spec, batch):
        model = nn.build(linear_spec, seed=1)
        x, y = batch
        cfg = AttackConfig(epsilon=0.1, n_iter=3, random_start=True, seed=11)
        whole = pgd(model, x, y, cfg)
        halves = np.concatenate([pgd(model, x[:10], y[:10], cfg, sample_indices=np.arange(10)),
                                 pgd(model, x[10:], y[10:], cfg, sample_indices=np.arange(10, 20))])
        assert np.allclose(whole, halves, atol=1e-12)

    def test_noise_streams(self):
        a = random_start_noise((2, 1, 2, 2), 0.1, 5, [0, 1])
        b = random_start_noise((1, 1, 2, 2), 0.1, 5, [1])
        assert np.array_equal(a[1], b[0])
        assert np.all(np.abs(a) <= 0.1)

    def test_increases_loss(self, linear_spec, batch):
        model = nn.build(linear_spec, seed=2)
        x, y = batch
        x_adv = pgd(model, x, y, AttackConfig(epsilon=0.1, n_iter=10))
        assert mean_loss(model, x_adv, y) > mean_loss(model, x, y)

    def test_shape_checks(self, cnn_spec):
        model = nn.build(cnn_spec, seed=0)
        with pytest.raises(DimensionError):
            pgd(model, np.zeros((2, 1, 5, 5)), np.array([0, 1]), AttackConfig(epsilon=0.1))
        with pytest.raises(DimensionError):
            pgd(model, np.zeros((2, 1, 4, 4)), np.array([0, 1, 1]), AttackConfig(epsilon=0.1))


class TestPGDProperties:
    """100 random attack configs × 1000 random rows"""

    TRIALS = 100
    ROWS = 1000

    def random_batch(self, rng):
        x = rng.uniform(0.0, 1.0, size=(self.ROWS, 1, 4, 4))
        edge = rng.random(x.shape)
        x[edge < 0.05] = 0.0
        x[edge > 0.95] = 1.0
        return x, rng.integers(0, 2, size=self.ROWS)

    def test_randomized_contracts(self, linear_spec, mlp_spec):
        rng = np.random.default_rng(2024)
        for trial in range(self.TRIALS):
            model = nn.build(linear_spec if trial % 2 else mlp_spec, seed=trial)
            x, y = self.random_batch(rng)
            eps = float(rng.uniform(0.0, 0.3))
            cfg = AttackConfig(epsilon=eps, n_iter=int(rng.integers(1, 6)),
                               random_start=bool(trial % 3), seed=trial)

            x_adv = pgd(model, x, y, cfg)
            assert np.max(np.abs(x_adv - x)) <= eps + 1e-12, cfg
            assert x_adv.min() >= 0.0 and x_adv.max() <= 1.0, cfg

            assert np.array_equal(pgd(model, x, y, with_epsilon(cfg, 0.0)), x), cfg

            one_step = AttackConfig(epsilon=eps, epsilon_step=eps, n_iter=1, random_start=False)
            assert np.array_equal(fgsm(model, x, y, AttackConfig(epsilon=eps)), pgd(model, x, y, one_step)), cfg
