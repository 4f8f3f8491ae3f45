import numpy as np
import pytest

from tpbs.data import RawTable, split
from tpbs.model import forward_batch, init_model
from tpbs.oracles import finite_difference_grad
from tpbs.splines import build_space
from tpbs.training import (
    TrainConfig,
    TrainingError,
    grad_objective,
    metrics,
    objective,
    train,
)


def regression_table(rows=90, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (rows, 1))
    y = x[:, 0] + noise * rng.normal(size=rows)
    return RawTable(
        features=x, targets=y, feature_names=["x"], target_name="y", task="regression"
    )


class TestMetrics:
    def test_perfect_predictions(self):
        y = np.array([1.0, 2.0, 3.0])
        assert metrics(y, y, "regression").value == 0.0
        assert metrics(np.array([3.0, -2.0]), np.array([1.0, 0.0]), "classification").value == 1.0

    def test_mean_predictor_scores_one(self):
        y = np.array([1.0, 2.0, 3.0, 10.0])
        m = metrics(np.full_like(y, y.mean()), y, "regression")
        assert abs(m.value - 1.0) < 1e-12

    def test_zero_variance_targets_flagged(self):
        m = metrics(np.array([1.0, 2.0]), np.array([5.0, 5.0]), "regression")
        assert m.degenerate and np.isnan(m.value)

    def test_majority_predictor_on_balanced_labels(self):
        rng = np.random.default_rng(0)
        y = (rng.uniform(size=4000) > 0.5).astype(float)
        m = metrics(np.full_like(y, 1.0), y, "classification")
        assert abs(m.value - 0.5) < 0.05

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            metrics(np.zeros(3), np.zeros(4), "regression")


class TestObjective:
    def setup_method(self):
        rng = np.random.default_rng(1)
        self.x = rng.uniform(0, 1, (12, 2))
        self.y = rng.normal(size=12)
        self.model = init_model(2, 3, 1, build_space(6, 2), seed=2, init_scale=0.4)
        self.cfg = TrainConfig(rank=3, num_basis=6, degree=2, rho=0.2, lambda0=0.1)

    def test_zero_lambda_is_mean_loss(self):
        pred = forward_batch(self.model, self.x)[:, 0]
        want = float(np.mean((pred - self.y) ** 2))
        got = objective(self.model, self.x, self.y, self.cfg, lam=0.0)
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_perfect_fit_zero(self):
        pred = forward_batch(self.model, self.x)[:, 0]
        assert objective(self.model, self.x, pred, self.cfg, lam=0.0) < 1e-24

    def test_constant_model_penalty_free(self):
        m = init_model(2, 2, 1, build_space(6, 2), seed=0, init_scale=0.0)
        with_pen = objective(m, self.x, self.y, self.cfg, lam=1.0)
        without = objective(m, self.x, self.y, self.cfg, lam=0.0)
        np.testing.assert_allclose(with_pen, without, rtol=1e-12)

    def test_gradient_additivity(self):
        lam = 0.37
        v0, g0 = grad_objective(self.model, self.x, self.y, self.cfg, lam=0.0)
        from tpbs.energy import EnergyAssembler

        asm = EnergyAssembler.boxes(self.model.spaces, self.x, self.cfg.rho)
        pen, pgrad = asm.value_and_grad(self.model.coeffs, self.model.out_vectors)
        v, g = grad_objective(self.model, self.x, self.y, self.cfg, lam=lam)
        np.testing.assert_allclose(v, v0 + lam * pen, rtol=1e-12)
        for combined, loss_part, pen_part in zip(g.coeff_grads, g0.coeff_grads, pgrad.coeff_grads):
            np.testing.assert_allclose(combined, loss_part + lam * pen_part, rtol=1e-9, atol=1e-12)

    def test_gradient_at_generating_params_is_zero(self):
        pred = forward_batch(self.model, self.x)[:, 0]
        _, g = grad_objective(self.model, self.x, pred, self.cfg, lam=0.0)
        for block in g.coeff_grads:
            np.testing.assert_allclose(block, 0.0, atol=1e-8)
        np.testing.assert_allclose(g.out_grad, 0.0, atol=1e-8)

    @pytest.mark.parametrize("loss", ["squared", "logistic"])
    def test_gradient_matches_finite_differences(self, loss):
        cfg = TrainConfig(rank=3, num_basis=6, degree=2, rho=0.2, lambda0=0.1, loss=loss)
        y = (self.y > 0).astype(float) if loss == "logistic" else self.y
        _, got = grad_objective(self.model, self.x, y, cfg, lam=0.3)
        fd = finite_difference_grad(
            lambda m: objective(m, self.x, y, cfg, lam=0.3), self.model
        )
        for a, b in zip(got.coeff_grads, fd.coeff_grads):
            np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(got.out_grad, fd.out_grad, rtol=1e-5, atol=1e-7)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            objective(self.model, np.zeros((0, 2)), np.zeros(0), self.cfg, lam=0.0)


class TestTrain:
    def test_realizable_1d_target(self):
        ds = split(regression_table(), (60, 20, 10), seed=0)
        cfg = TrainConfig(
            rank=1, num_basis=8, degree=3, learning_rate=0.05, lambda0=0.0,
            max_epochs=600, seed=0,
        )
        report = train(ds, cfg)
        assert report.best_val.val_metrics.value < 1e-4

    def test_overfit_threshold_zero_means_no_after_checkpoint(self):
        ds = split(regression_table(noise=0.3), (60, 20, 10), seed=0)
        cfg = TrainConfig(
            rank=1, num_basis=8, degree=3, learning_rate=0.05, lambda0=0.0,
            max_epochs=100, overfit_threshold=0.0, seed=0,
        )
        report = train(ds, cfg)
        assert report.best_val_after_overfit is None
        assert report.overfit_epoch is None

    def test_after_overfit_checkpoint_appears(self):
        ds = split(regression_table(), (60, 20, 10), seed=1)
        cfg = TrainConfig(
            rank=1, num_basis=8, degree=3, learning_rate=0.05, lambda0=0.0,
            max_epochs=600, overfit_threshold=1e-3, seed=0,
        )
        report = train(ds, cfg)
        assert report.overfit_epoch is not None
        assert report.best_val_after_overfit is not None
        assert report.best_val_after_overfit.epoch >= report.overfit_epoch

    def test_lambda_trajectory_ratios(self):
        ds = split(regression_table(noise=0.05), (60, 20, 10), seed=2)
        cfg = TrainConfig(
            rank=2, num_basis=8, degree=2, learning_rate=0.05, lambda0=1e-6,
            lambda_growth=7.0, rho=0.2, max_epochs=500, convergence_tol=1e-3,
            patience=10, seed=0,
        )
        report = train(ds, cfg)
        traj = report.lambda_trajectory
        assert len(traj) >= 2  # at least one schedule event fired
        ratios = np.array(traj[1:]) / np.array(traj[:-1])
        np.testing.assert_allclose(ratios, 7.0, rtol=1e-12)

    def test_best_val_is_minimum_of_curve(self):
        ds = split(regression_table(noise=0.1), (60, 20, 10), seed=3)
        cfg = TrainConfig(
            rank=2, num_basis=8, degree=2, learning_rate=0.05, lambda0=0.0,
            max_epochs=200, seed=0,
        )
        report = train(ds, cfg)
        assert report.best_val.val_metrics.value == report.val_curve.min()

    def test_bit_reproducible(self):
        ds = split(regression_table(noise=0.1), (60, 20, 10), seed=4)
        cfg = TrainConfig(
            rank=2, num_basis=8, degree=2, learning_rate=0.05, lambda0=1e-4,
            rho=0.2, max_epochs=60, seed=7,
        )
        a = train(ds, cfg)
        b = train(ds, cfg)
        np.testing.assert_array_equal(a.objective_curve, b.objective_curve)
        for ca, cb in zip(a.best_val.model.coeffs, b.best_val.model.coeffs):
            np.testing.assert_array_equal(ca, cb)

    def test_minibatch_runs_and_penalty_rescales(self):
        ds = split(regression_table(noise=0.05), (64, 16, 10), seed=5)
        cfg = TrainConfig(
            rank=2, num_basis=8, degree=2, learning_rate=0.03, lambda0=1e-5,
            rho=0.2, max_epochs=40, batch_size=16, seed=0,
        )
        report = train(ds, cfg)
        assert report.epochs_run == 40
        assert np.all(np.isfinite(report.objective_curve))

    def test_objective_nonincreasing_small_lr_full_batch(self):
        ds = split(regression_table(noise=0.05), (60, 20, 10), seed=6)
        cfg = TrainConfig(
            rank=2, num_basis=6, degree=2, learning_rate=1e-4, lambda0=0.0,
            max_epochs=40, seed=0,
        )
        report = train(ds, cfg)
        diffs = np.diff(report.objective_curve)
        assert np.all(diffs <= 1e-10)

    @pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
    def test_divergence_rollback_and_halving(self):
        # 30 coordinates make the factor product overflow after one huge
        # Adam step, so the first epoch is guaranteed non-finite
        rng = np.random.default_rng(7)
        x = rng.uniform(0, 1, (40, 30))
        table = RawTable(
            features=x, targets=rng.normal(size=40), target_name="y",
            feature_names=[f"f{i}" for i in range(30)], task="regression",
        )
        ds = split(table, (30, 5, 5), seed=0)
        cfg = TrainConfig(
            rank=1, num_basis=2, degree=1, learning_rate=1e5, lambda0=0.0,
            max_epochs=20, seed=0,
        )
        # per contract: one rollback-plus-halving is allowed, a second
        # divergence aborts
        try:
            report = train(ds, cfg)
            assert report.lr_halved
        except TrainingError:
            pass

    def test_config_validation(self):
        with pytest.raises(ValueError, match="growth"):
            TrainConfig(lambda_growth=0.5)
        with pytest.raises(ValueError, match="loss"):
            TrainConfig(loss="hinge")
        with pytest.raises(ValueError, match="weight decay"):
            TrainConfig(weight_decay=0.1)

    def test_classification_smoke(self):
        rng = np.random.default_rng(8)
        x = rng.uniform(0, 1, (80, 2))
        y = (x[:, 0] + x[:, 1] > 1.0).astype(float)
        table = RawTable(
            features=x, targets=y, feature_names=["a", "b"], target_name="c",
            task="classification",
        )
        ds = split(table, (50, 20, 10), seed=0)
        cfg = TrainConfig(
            rank=2, num_basis=8, degree=2, loss="logistic", learning_rate=0.1,
            lambda0=1e-5, rho=0.2, max_epochs=300, seed=0,
        )
        report = train(ds, cfg)
        assert report.best_val.val_metrics.kind == "accuracy"
        assert report.best_val.val_metrics.value >= 0.8
