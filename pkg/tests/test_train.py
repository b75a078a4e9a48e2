import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from closure1d.core import ConstantHistory, make_grid
from closure1d.forward import ClosureModel, ClosureTerm, integrate_forward
from closure1d.library import FeatureLibrary
from closure1d.nets import ConstraintSpec, DenseNet
from closure1d.train import (
    RMSprop,
    TrainConfig,
    TrainingScenario,
    add_regularization,
    compute_batch_gradient,
    frozen_mask,
    get_model_params,
    iterations_per_epoch,
    lr_at,
    sample_batch,
    train_run,
)


class TestSchedule:
    def test_iterations_per_epoch_examples(self):
        # ceil(n/(B*S) + 1)
        assert iterations_per_epoch(420, 16, 3) == 10
        assert iterations_per_epoch(40, 16, 3) == 2
        assert iterations_per_epoch(48, 16, 3) == 2
        assert iterations_per_epoch(49, 16, 3) == 3

    @given(st.integers(1, 10_000), st.integers(1, 64), st.integers(2, 50))
    @settings(max_examples=50, deadline=None)
    def test_iterations_at_least_two_and_monotone(self, n, b, s):
        ipe = iterations_per_epoch(n, b, s)
        assert ipe >= 2
        assert iterations_per_epoch(n + b * s, b, s) >= ipe

    def test_lr_examples(self):
        assert lr_at(0, 0.075, 0.97, 4) == pytest.approx(0.075)
        assert lr_at(4, 0.075, 0.97, 4) == pytest.approx(0.07275)
        # continuous (non-staircase) decay between multiples
        assert lr_at(2, 0.075, 0.97, 4) == pytest.approx(
            0.075 * 0.97 ** 0.5)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_time=1)
        with pytest.raises(ValueError):
            TrainConfig(stride=3)
        with pytest.raises(ValueError):
            TrainConfig(lr0=0.0)


class TestRMSprop:
    def test_first_step_value(self):
        # v = 0.1 g^2, so the step is lr*g/(sqrt(0.1)*|g| + eps)
        opt = RMSprop(1)
        p = opt.step(np.array([1.0]), np.array([2.0]), 0.1)
        expected = 1.0 - 0.1 * 2.0 / (math.sqrt(0.1 * 4.0) + 1e-8)
        assert p[0] == pytest.approx(expected)
        assert p[0] == pytest.approx(0.68377, abs=1e-5)

    def test_second_moment_accumulates(self):
        opt = RMSprop(1)
        opt.step(np.zeros(1), np.array([1.0]), 0.1)
        opt.step(np.zeros(1), np.array([3.0]), 0.1)
        assert opt.v[0] == pytest.approx(0.9 * 0.1 + 0.1 * 9.0)
        assert opt.iteration == 2

    def test_zero_gradient_is_fixed_point(self):
        opt = RMSprop(3)
        p0 = np.array([1.0, -2.0, 0.5])
        p1 = opt.step(p0, np.zeros(3), 0.1)
        assert np.array_equal(p0, p1)


class TestRegularization:
    def test_combined_penalty_gradient(self):
        g = add_regularization(np.zeros(1), np.array([0.5]), 1e-3, 1e-5)
        assert g[0] == pytest.approx(1e-3 + 2 * 1e-5 * 0.5)
        assert g[0] == pytest.approx(0.00101)

    def test_sign_zero_is_zero(self):
        g = add_regularization(np.zeros(1), np.array([0.0]), 1.0, 0.0)
        assert g[0] == 0.0

    def test_frozen_entries_untouched(self):
        g = add_regularization(np.zeros(2), np.array([0.5, 0.5]), 1e-3, 0.0,
                               frozen=np.array([False, True]))
        assert g[0] == pytest.approx(1e-3)
        assert g[1] == 0.0

    def test_negative_params_push_up(self):
        g = add_regularization(np.zeros(1), np.array([-0.5]), 1e-3, 1e-5)
        assert g[0] == pytest.approx(-1e-3 - 1e-5)


def _scenario(nu_closure=0.0, nu_truth=0.03, n_steps=30, dt=0.02, name="s",
              data_every=1):
    grid = make_grid(0.0, 2 * np.pi, 16, "periodic")
    base = ClosureTerm(FeatureLibrary(["u_ux"]),
                       DenseNet([np.array([[-1.0]])], ["linear"]),
                       trainable=False)
    truth_base = ClosureTerm(FeatureLibrary(["u_ux", "uxx"]),
                             DenseNet([np.array([[-1.0, nu_truth]])], ["linear"]),
                             trainable=False)
    truth = ClosureModel(1, base=truth_base)
    hist = ConstantHistory(np.sin(grid.x)[None, :])
    store, _ = integrate_forward(truth, grid, hist, 0.0, n_steps * dt, dt)
    times = np.array([k * dt for k in range(0, n_steps + 1, data_every)])
    snaps = np.array([store.query(t) for t in times])
    # validation: next window, rolled out with the truth as well
    vstore, _ = integrate_forward(
        truth, grid, ConstantHistory(snaps[-1], times[-1]),
        times[-1], times[-1] + 10 * dt, dt)
    vtimes = times[-1] + dt * np.arange(0, 11, data_every)
    vsnaps = np.array([vstore.query(t) for t in vtimes])

    closure = ClosureTerm(FeatureLibrary(["uxx", "uxxx"]),
                          DenseNet([np.array([[nu_closure, 0.0]])], ["linear"]))
    model = ClosureModel(1, base=base, markovian=closure)
    return TrainingScenario(name, model, grid, dt, times, snaps, vtimes, vsnaps)


class TestBatching:
    def test_members_sorted_and_unique(self):
        scn = _scenario()
        cfg = TrainConfig(batch_time=3, batch_size=8)
        members = sample_batch(scn, cfg, np.random.default_rng(0))
        starts = [m.start_index for m in members]
        assert starts == sorted(starts)
        assert len(set(starts)) == len(starts)
        assert len(members) == 8

    def test_batch_capped_by_available_starts(self):
        scn = _scenario(n_steps=10)
        cfg = TrainConfig(batch_time=3, batch_size=64)
        members = sample_batch(scn, cfg, np.random.default_rng(0))
        assert len(members) == 8  # starts 0..7 for a 10-step window

    def test_targets_follow_stride(self):
        scn = _scenario()
        cfg = TrainConfig(batch_time=4, stride=2, batch_size=2)
        members = sample_batch(scn, cfg, np.random.default_rng(1))
        for m in members:
            offs = (m.data.times - m.t_start) / scn.dt
            assert np.allclose(offs, [2, 4])

    def test_targets_are_true_snapshots(self):
        scn = _scenario()
        cfg = TrainConfig(batch_time=3, batch_size=4)
        for m in sample_batch(scn, cfg, np.random.default_rng(2)):
            for t, target in zip(m.data.times, m.data.targets):
                k = round(t / scn.dt)
                assert np.array_equal(target, scn.snapshots[k])

    def test_batch_time_must_align_with_data_spacing(self):
        scn = _scenario(data_every=2)
        cfg = TrainConfig(batch_time=3, batch_size=2)
        with pytest.raises(ValueError):
            sample_batch(scn, cfg, np.random.default_rng(0))

    def test_window_too_short_rejected(self):
        scn = _scenario(n_steps=4)
        cfg = TrainConfig(batch_time=6, batch_size=2)
        with pytest.raises(ValueError):
            sample_batch(scn, cfg, np.random.default_rng(0))


class TestScenarioValidation:
    def test_stale_dataset_detected(self):
        scn = _scenario()
        with pytest.raises(ValueError, match="multiple of dt"):
            TrainingScenario(scn.name, scn.model, scn.grid, 0.017,
                             scn.snap_times, scn.snapshots)


class TestGradientStep:
    def test_zero_mismatch_gives_zero_gradient(self):
        # closure already matches the truth: gradient vanishes up to
        # discretization error
        scn = _scenario(nu_closure=0.03, nu_truth=0.03)
        cfg = TrainConfig(batch_time=3, batch_size=4)
        members = sample_batch(scn, cfg, np.random.default_rng(0))
        g, loss, skipped = compute_batch_gradient(scn, members, cfg)
        assert skipped == 0
        assert loss < 1e-20
        assert np.max(np.abs(g)) < 1e-10

    def test_gradient_points_toward_truth(self):
        # closure at 0 while truth has nu > 0: the loss decreases along
        # -grad for the uxx coefficient
        scn = _scenario(nu_closure=0.0, nu_truth=0.03)
        cfg = TrainConfig(batch_time=3, batch_size=8)
        members = sample_batch(scn, cfg, np.random.default_rng(0))
        g, loss, _ = compute_batch_gradient(scn, members, cfg)
        assert loss > 0
        assert g[0] < 0  # increase the uxx coefficient


class TestTrainRun:
    def test_linear_coefficients_recovered(self):
        scn = _scenario(nu_truth=0.03, n_steps=40)
        cfg = TrainConfig(batch_time=3, batch_size=8, epochs=60,
                          lr0=0.01, decay_rate=0.97, decay_steps=4,
                          l1_factor=1e-6, l2_factor=1e-8, seed=0)
        rows, params = train_run([scn], cfg)
        assert params[0] == pytest.approx(0.03, abs=0.004)
        assert abs(params[1]) < 0.01
        # loss decreased over training
        assert rows[-1]["train_loss"] < rows[0]["train_loss"]
        assert rows[-1]["val_loss"] < rows[0]["val_loss"]

    def test_bitwise_determinism(self):
        outs = []
        for _ in range(2):
            scn = _scenario(nu_truth=0.03)
            cfg = TrainConfig(batch_time=3, batch_size=4, epochs=3,
                              lr0=0.02, seed=5)
            rows, params = train_run([scn], cfg)
            outs.append((tuple(params),
                         tuple(r["train_loss"] for r in rows)))
        assert outs[0] == outs[1]

    def test_seed_changes_trajectory(self):
        results = []
        for seed in (0, 1):
            scn = _scenario(nu_truth=0.03)
            cfg = TrainConfig(batch_time=3, batch_size=4, epochs=2,
                              lr0=0.02, seed=seed)
            _, params = train_run([scn], cfg)
            results.append(tuple(params))
        assert results[0] != results[1]

    def test_pruned_weights_stay_pruned(self):
        scn = _scenario(nu_truth=0.03, n_steps=40)
        cfg = TrainConfig(batch_time=3, batch_size=8, epochs=12,
                          lr0=0.02, l1_factor=1e-3,
                          prune_threshold=5e-3, prune_start_epoch=8, seed=0)
        rows, params = train_run([scn], cfg)
        n_pruned = [r["n_pruned"] for r in rows]
        assert all(b >= a for a, b in zip(n_pruned, n_pruned[1:]))
        mask = frozen_mask(scn.model)
        assert np.all(params[mask] == 0.0)

    def test_history_rows_schema(self):
        scn = _scenario()
        cfg = TrainConfig(batch_time=3, batch_size=4, epochs=2, lr0=0.01)
        rows, _ = train_run([scn], cfg)
        assert len(rows) == 2
        assert set(rows[0]) == {"epoch", "iter", "scenario", "train_loss",
                                "val_loss", "lr", "n_pruned", "n_skipped"}
        ipe = iterations_per_epoch(30, 4, 3)
        assert rows[0]["iter"] == ipe
        assert rows[1]["iter"] == 2 * ipe

    def test_constraints_preserved_through_training(self):
        grid = make_grid(0.0, 2 * np.pi, 16, "periodic")
        base = ClosureTerm(
            FeatureLibrary(["uxx"]),
            DenseNet([np.array([[0.02, 0.0], [0.0, 0.02]])], ["linear"]),
            trainable=False)
        # truth: diffusion plus an exchange -0.05*u0 from state 0 into
        # state 1, which conserves the sum of the two states
        truth_base = ClosureTerm(
            FeatureLibrary(["uxx", "u"]),
            DenseNet([np.array([[0.02, -0.05, 0.0, 0.0],
                                [0.0, 0.05, 0.02, 0.0]])], ["linear"]),
            trainable=False)
        truth = ClosureModel(2, base=truth_base)
        u0 = np.vstack([np.sin(grid.x) + 1.5, np.cos(grid.x) + 1.5])
        store, _ = integrate_forward(truth, grid, ConstantHistory(u0),
                                     0.0, 0.6, 0.02)
        times = 0.02 * np.arange(31)
        snaps = np.array([store.query(t) for t in times])
        # closure: row 0 tied to -row 1, so the sum of tendencies stays 0
        spec = ConstraintSpec({0: {1: -1.0}})
        closure = ClosureTerm(
            FeatureLibrary(["u"]),
            DenseNet([np.zeros((2, 2))], ["linear"], constraint=spec))
        model = ClosureModel(2, base=base, markovian=closure)
        scn = TrainingScenario("tied", model, grid, 0.02, times, snaps)
        cfg = TrainConfig(batch_time=3, batch_size=6, epochs=8, lr0=0.02,
                          seed=0)
        train_run([scn], cfg)
        w = closure.net.weights[0]
        assert np.allclose(w[0], -w[1], atol=1e-14)
        assert np.any(w[1] != 0.0)

    def test_multi_scenario_round_robin_shares_model(self):
        scn1 = _scenario(nu_truth=0.03, name="a")
        scn2 = _scenario(nu_truth=0.03, name="b")
        with pytest.raises(ValueError):
            train_run([scn1, scn2], TrainConfig(batch_time=3))
        scn2.model = scn1.model
        cfg = TrainConfig(batch_time=3, batch_size=4, epochs=2, lr0=0.01,
                          round_robin_block=1)
        rows, _ = train_run([scn1, scn2], cfg)
        assert {r["scenario"] for r in rows} == {"a", "b"}

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_skip_budget_enforced(self):
        scn = _scenario(nu_closure=-80.0)  # violently anti-diffusive
        cfg = TrainConfig(batch_time=3, batch_size=4, epochs=50,
                          lr0=1e-6, skip_budget=3)
        with pytest.raises(RuntimeError, match="skip budget"):
            train_run([scn], cfg)

    def test_params_snapshot_matches_model(self):
        scn = _scenario(nu_truth=0.03)
        cfg = TrainConfig(batch_time=3, batch_size=4, epochs=2, lr0=0.02)
        _, params = train_run([scn], cfg)
        assert np.array_equal(params, get_model_params(scn.model))
