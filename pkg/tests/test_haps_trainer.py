"""
Tests for services.haps_trainer: schedules, mixed step, ladder runs, checkpoints
"""
import math
import os
from fractions import Fraction

import numpy as np
import pytest

import config
from services import nn
from services.attacks import AttackConfig, pgd
from services.errors import ConfigurationError, ContractError, TrainingCollapseError
from services.haps_trainer import (
    LOG_COLUMNS, HapsConfig, ScheduleState, TrainingLog, adv_count, cosine_finetune, cosine_gamma, haps_run,
    haps_step, load_checkpoint, sgd_update,
)


def small_config(**overrides) -> HapsConfig:
    values = dict(eta_init=0.05, T=6, M=16, nu=0.5, epsilon_ladder=(4, 8), n_pgd=3, seed=3)
    values.update(overrides)
    return HapsConfig(**values)


def same_parameters(a: nn.Model, b: nn.Model) -> bool:
    return all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


# t/T where ½(1 + cos(tπ/T)) is rational
EXACT_GAMMA = {Fraction(1, 3): Fraction(3, 4), Fraction(1, 2): Fraction(1, 2),
               Fraction(2, 3): Fraction(1, 4), Fraction(1): Fraction(0)}


def exact_gamma(t: int, T_stage: int) -> Fraction:
    return EXACT_GAMMA.get(Fraction(t, T_stage), Fraction(cosine_gamma(t, T_stage)))


class TestSchedule:
    def test_gamma_endpoints(self):
        assert cosine_gamma(100, 100) == 0.0
        assert cosine_gamma(50, 100) == pytest.approx(0.5)
        assert cosine_gamma(1, 100) == pytest.approx(0.5 * (1 + math.cos(math.pi / 100)))

    def test_gamma_monotone(self):
        values = [cosine_gamma(t, 20) for t in range(1, 21)]
        assert all(b < a for a, b in zip(values, values[1:]))

    @pytest.mark.parametrize("t", [0, 11])
    def test_gamma_out_of_range(self, t):
        with pytest.raises(ContractError):
            cosine_gamma(t, 10)

    def test_adv_count(self):
        assert adv_count(0.5, 32, 0.0) == 16
        assert adv_count(0.5, 32, 1.0) == 0
        assert adv_count(0.0, 32, 0.0) == 0
        assert adv_count(1.0, 32, 0.0) == 32

    def test_adv_count_matches_exact_arithmetic(self):
        checked = 0
        for T_stage in (3, 4, 6, 12):
            for t in range(1, T_stage + 1):
                gamma = cosine_gamma(t, T_stage)
                assert gamma == pytest.approx(0.5 * (1 + math.cos(math.pi * t / T_stage)), rel=0, abs=1e-15)
                for M in (1, 7, 32, 50, 90, 100, 128):
                    for i in range(101):
                        expected = math.floor(Fraction(i, 100) * M * (1 - exact_gamma(t, T_stage)))
                        assert adv_count(i / 100, M, gamma) == expected, (i / 100, M, t, T_stage)
                        checked += 1
        assert checked >= 10 ** 4

    @pytest.mark.parametrize("nu, M, expected", [(0.29, 100, 29), (0.58, 50, 29), (0.7, 90, 63)])
    def test_adv_count_whole_products(self, nu, M, expected):
        assert adv_count(nu, M, 0.0) == expected

    def test_adv_count_at_gamma_one(self):
        assert all(adv_count(nu, 128, 1.0) == 0 for nu in (0.0, 0.5, 1.0))

    def test_state_at_end_of_stage(self):
        state = ScheduleState.at(stage=1, stage_eps=8.0, t=10, T_stage=10, eta_init=0.01, nu=0.5, m_actual=32)
        assert (state.gamma, state.eta, state.K) == (0.0, 0.0, 16)

    def test_fixed_fraction_from_first_iteration(self):
        state = ScheduleState.at(0, 8.0, 1, 100, 0.01, 0.5, 32, anneal_nu=False)
        assert state.K == 16
        assert state.eta == pytest.approx(0.01 * cosine_gamma(1, 100))

    def test_fixed_learning_rate(self):
        state = ScheduleState.at(0, 8.0, 100, 100, 0.01, 0.5, 32, anneal_eta=False)
        assert (state.gamma, state.eta, state.K) == (0.0, 0.01, 16)

    def test_K_never_decreases_within_stage(self):
        ks = [ScheduleState.at(0, 1.0, t, 50, 0.01, 0.5, 32).K for t in range(1, 51)]
        assert ks == sorted(ks)
        assert ks[-1] == 16


class TestHapsConfig:
    @pytest.mark.parametrize("overrides", [
        {"epsilon_ladder": ()},
        {"epsilon_ladder": (8, 4)},
        {"epsilon_ladder": (4, 4)},
        {"epsilon_ladder": (-1, 2)},
        {"epsilon_ladder": (300,)},
        {"nu": 1.5},
        {"T": 0},
        {"M": 0},
        {"eta_init": 0.0},
        {"n_pgd": 0},
        {"momentum": 1.0},
        {"total_iterations": 1},
    ])
    def test_invalid(self, overrides):
        with pytest.raises(ConfigurationError):
            small_config(**overrides)

    def test_iterations_precedence(self):
        assert small_config().iterations_per_stage(100) == 6
        assert small_config(epochs_per_stage=2).iterations_per_stage(100) == 2 * 7
        assert small_config(epochs_per_stage=2, total_iterations=10).iterations_per_stage(100) == 5

    def test_attack_for_stage(self):
        attack = small_config().attack_for_stage(1, step_seed=42)
        assert attack.epsilon == 8 / 255
        assert attack.n_iter == 3
        assert attack.step == pytest.approx(1.5 * (8 / 255) / 3)
        assert attack.seed == 42

    def test_hash_tracks_values(self):
        assert small_config().hash() == small_config().hash()
        assert small_config().hash() != small_config(nu=0.25).hash()
        assert small_config().hash() != small_config(anneal_nu=False).hash()

    def test_continuous_input_ladder(self):
        cfg = small_config(epsilon_ladder=config.TEXT_EPSILON_LADDER, epsilon_scale=1.0)
        assert cfg.attack_for_stage(3).epsilon == 0.8


class TestHapsStep:
    def test_full_adversarial_batch_matches_two_phase_update(self, mlp_spec, blob_dataset):
        x, y = blob_dataset.images[::25], blob_dataset.labels[::25]
        attack = AttackConfig(epsilon=0.1, n_iter=3)
        schedule = ScheduleState(stage=0, stage_eps=25.5, t=5, gamma=0.0, eta=0.05, K=len(y))

        a = nn.build(mlp_spec, seed=0)
        haps_step(a, nn.SGD(a.named_parameters()), (x, y), schedule, attack)

        b = nn.build(mlp_spec, seed=0)
        x_adv = pgd(b, x, y, attack)
        sgd_update(b, nn.SGD(b.named_parameters()), x_adv, y, 0.05)
        assert same_parameters(a, b)

    def test_zero_K_is_plain_sgd(self, mlp_spec, blob_dataset):
        x, y = blob_dataset.images[::25], blob_dataset.labels[::25]
        schedule = ScheduleState(stage=0, stage_eps=4.0, t=1, gamma=1.0, eta=0.05, K=0)
        a = nn.build(mlp_spec, seed=0)
        loss_adv, loss_benign = haps_step(a, nn.SGD(a.named_parameters()), (x, y), schedule,
                                          AttackConfig(epsilon=0.1))
        b = nn.build(mlp_spec, seed=0)
        value, _ = sgd_update(b, nn.SGD(b.named_parameters()), x, y, 0.05)
        assert loss_adv == 0.0
        assert loss_benign == pytest.approx(value)
        assert same_parameters(a, b)

    def test_K_outside_batch(self, mlp_spec, blob_dataset):
        model = nn.build(mlp_spec, seed=0)
        schedule = ScheduleState(stage=0, stage_eps=4.0, t=1, gamma=0.0, eta=0.05, K=9)
        with pytest.raises(ContractError):
            haps_step(model, nn.SGD(model.named_parameters()),
                      (blob_dataset.images[:8], blob_dataset.labels[:8]), schedule, AttackConfig(epsilon=0.1))

    def test_non_finite_loss_names_schedule(self, mlp_spec, blob_dataset):
        model = nn.build(mlp_spec, seed=0)
        model.params["layer3.bias"].assign_(np.array([np.inf, 0.0]))
        schedule = ScheduleState(stage=1, stage_eps=8.0, t=3, gamma=0.5, eta=0.01, K=0)
        with pytest.raises(TrainingCollapseError) as info:
            haps_step(model, nn.SGD(model.named_parameters()),
                      (blob_dataset.images[:8], blob_dataset.labels[:8]), schedule, AttackConfig(epsilon=0.1))
        assert info.value.state is schedule
        assert "t=3" in str(info.value)


class TestRuns:
    def test_log_shape_and_schedule(self, mlp_spec, blob_dataset):
        cfg = small_config()
        hardened, log = haps_run(nn.build(mlp_spec, seed=1), blob_dataset, cfg)
        df = log.to_frame()
        assert list(df.columns) == LOG_COLUMNS
        assert len(df) == 12
        assert df["stage_eps"].tolist() == [4.0] * 6 + [8.0] * 6
        assert df["t"].tolist() == list(range(1, 7)) * 2
        last = df[df["t"] == 6]
        assert last["gamma"].tolist() == [0.0, 0.0]
        assert last["K"].tolist() == [8, 8]
        assert hardened.mode == "inference"

    def test_input_model_untouched(self, mlp_spec, blob_dataset):
        model = nn.build(mlp_spec, seed=1)
        reference = model.copy()
        haps_run(model, blob_dataset, small_config(T=2))
        assert same_parameters(model, reference)

    def test_deterministic(self, cnn_spec, blob_dataset):
        cfg = small_config(T=3, random_start=True)
        a, log_a = haps_run(nn.build(cnn_spec, seed=2), blob_dataset, cfg)
        b, log_b = haps_run(nn.build(cnn_spec, seed=2), blob_dataset, cfg)
        assert same_parameters(a, b)
        assert log_a.to_csv() == log_b.to_csv()

    def test_nu_zero_equals_cosine_finetune(self, dropout_spec, blob_dataset):
        cfg = small_config(nu=0.0, T=5)
        model = nn.build(dropout_spec, seed=4)
        hardened, log_h = haps_run(model, blob_dataset, cfg)
        tuned, log_f = cosine_finetune(model, blob_dataset, cfg)
        assert same_parameters(hardened, tuned)
        assert log_h.to_csv() == log_f.to_csv()

    def test_zero_epsilon_ladder_equals_cosine_finetune(self, mlp_spec, blob_dataset):
        cfg = small_config(epsilon_ladder=(0,), T=5, random_start=True)
        model = nn.build(mlp_spec, seed=4)
        hardened, log_h = haps_run(model, blob_dataset, cfg)
        tuned, log_f = cosine_finetune(model, blob_dataset, cfg)
        assert same_parameters(hardened, tuned)
        assert log_h.to_frame()["eta"].tolist() == log_f.to_frame()["eta"].tolist()

    def test_fixed_fraction_baseline(self, mlp_spec, blob_dataset):
        cfg = small_config(T=3, anneal_nu=False, anneal_eta=False)
        _, log = haps_run(nn.build(mlp_spec, seed=5), blob_dataset, cfg)
        df = log.to_frame()
        assert df["K"].tolist() == [8] * 6
        assert df["eta"].tolist() == [0.05] * 6
        assert (df["loss_adv"] > 0).all()

    def test_fixed_fraction_changes_trajectory(self, mlp_spec, blob_dataset):
        a, _ = haps_run(nn.build(mlp_spec, seed=5), blob_dataset, small_config(T=3, anneal_nu=False))
        b, _ = haps_run(nn.build(mlp_spec, seed=5), blob_dataset, small_config(T=3))
        assert not same_parameters(a, b)

    def test_momentum_run(self, mlp_spec, blob_dataset):
        a, _ = haps_run(nn.build(mlp_spec, seed=5), blob_dataset, small_config(T=3, momentum=0.9))
        b, _ = haps_run(nn.build(mlp_spec, seed=5), blob_dataset, small_config(T=3))
        assert not same_parameters(a, b)


class TestCheckpoints:
    @pytest.mark.parametrize("momentum", [0.0, 0.9])
    def test_resume_matches_uninterrupted_run(self, mlp_spec, blob_dataset, tmp_path, momentum):
        cfg = small_config(T=4, epsilon_ladder=(2, 4, 8), momentum=momentum)
        model = nn.build(mlp_spec, seed=6)
        full_dir = str(tmp_path / "full")
        full, log_full = haps_run(model, blob_dataset, cfg, checkpoint_dir=full_dir)

        resumed_dir = str(tmp_path / "resumed")
        sidecar = os.path.join(full_dir, "stage_00.json")
        resumed, log_resumed = haps_run(model, blob_dataset, cfg, checkpoint_dir=resumed_dir,
                                        resume_from=sidecar)
        assert same_parameters(full, resumed)
        assert log_full.to_csv() == log_resumed.to_csv()

    def test_checkpoint_files(self, mlp_spec, blob_dataset, tmp_path):
        cfg = small_config(T=2, momentum=0.5)
        haps_run(nn.build(mlp_spec, seed=6), blob_dataset, cfg, checkpoint_dir=str(tmp_path))
        names = set(os.listdir(tmp_path))
        for stage in (0, 1):
            prefix = f"stage_{stage:02d}"
            assert {f"{prefix}.haps", f"{prefix}_velocity.haps", f"{prefix}_log.csv", f"{prefix}.json"} <= names
        checkpoint = load_checkpoint(str(tmp_path / "stage_01.json"), cfg)
        assert checkpoint.stage == 1
        assert len(checkpoint.log) == 4
        assert set(checkpoint.velocity) == set(checkpoint.model.params)

    def test_config_change_is_rejected(self, mlp_spec, blob_dataset, tmp_path):
        cfg = small_config(T=2)
        haps_run(nn.build(mlp_spec, seed=6), blob_dataset, cfg, checkpoint_dir=str(tmp_path))
        with pytest.raises(ConfigurationError, match="config"):
            load_checkpoint(str(tmp_path / "stage_00.json"), small_config(T=3))


class TestTrainingLog:
    def test_csv_round_trip(self):
        log = TrainingLog()
        state = ScheduleState.at(0, 1.0, 1, 3, 0.01, 0.5, 32)
        log.append(state, 0.1 + 0.2, 1 / 3)
        parsed = TrainingLog.from_csv(log.to_csv())
        assert parsed.rows == log.rows