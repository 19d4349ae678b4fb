"""MSE/DFL training, and fitting per-point quadratic losses."""

from __future__ import annotations

import pytest
import torch

from taskmet.baselines import (
    DFLConfig,
    LodlQuadratic,
    fit_point_quadratic,
    lodl_fit,
    train_dfl,
    train_lodl,
    train_mse,
)
from taskmet.metric import MetricModel, mse_loss
from taskmet.nets import Predictor
from taskmet.tasks import CubicTask
from taskmet.tensor_core import DTYPE, generator, quadratic_form


class TestTrainMse:
    def test_exact_fit_capacity_reaches_zero(self):
        gen = generator(0, "d")
        x = torch.randn(32, 2, dtype=DTYPE, generator=gen)
        w_true = torch.tensor([[1.5], [-0.5]], dtype=DTYPE)
        y = x @ w_true
        pred = Predictor(2, 1, "linear", bias=False, seed=0)
        train_mse(pred, x, y, 4000, 1e-2)
        assert float(mse_loss(pred, x, y)) < 1e-8

    def test_loss_never_worse_than_start(self):
        gen = generator(1, "d")
        x = torch.randn(24, 3, dtype=DTYPE, generator=gen)
        y = torch.randn(24, 2, dtype=DTYPE, generator=gen)
        pred = Predictor(3, 2, "mlp", hidden=[8], seed=1)
        before = float(mse_loss(pred, x, y))
        train_mse(pred, x, y, 300, 1e-2)
        assert float(mse_loss(pred, x, y)) <= before


class ZeroTaskStub:
    """Task double whose surrogate loss is exactly zero."""

    tau = 1.0

    def __init__(self, x, y):
        self._x, self._y = x, y

    def flat_train(self):
        return self._x, self._y

    def task_loss_fn(self, which="train"):
        return lambda pred: torch.tensor(0.0, dtype=DTYPE)


class TestTrainDfl:
    def test_zero_task_equals_alpha_scaled_mse_bitwise(self):
        gen = generator(2, "d")
        x = torch.randn(16, 2, dtype=DTYPE, generator=gen)
        y = torch.randn(16, 1, dtype=DTYPE, generator=gen)
        alpha, steps, lr = 3.0, 40, 1e-2

        pred = Predictor(2, 1, "linear", seed=5)
        train_dfl(pred, ZeroTaskStub(x, y), DFLConfig(alpha=alpha, steps=steps, lr=lr))

        pred2 = Predictor(2, 1, "linear", seed=5)
        opt = torch.optim.Adam(pred2.parameters(), lr=lr)
        for _ in range(steps):
            opt.zero_grad()
            (alpha * mse_loss(pred2, x, y)).backward()
            opt.step()
        assert torch.equal(pred.net.weight, pred2.net.weight)
        assert torch.equal(pred.net.bias, pred2.net.bias)

    def test_alpha_validation(self):
        with pytest.raises(ValueError, match="alpha"):
            DFLConfig(alpha=-1.0)

    def test_alpha_continuity_on_convex_problem(self):
        # quadratic surrogate task loss + quadratic MSE: theta(alpha) is a
        # continuous path, so nearby alphas give nearby minimizers
        gen = generator(3, "d")
        x = torch.randn(24, 2, dtype=DTYPE, generator=gen)
        y = torch.randn(24, 1, dtype=DTYPE, generator=gen)

        class QuadTask(ZeroTaskStub):
            def task_loss_fn(self, which="train"):
                return lambda pred: ((pred(self._x) - 1.0) ** 2).mean()

        def final_theta(alpha):
            pred = Predictor(2, 1, "linear", seed=7)
            train_dfl(pred, QuadTask(x, y), DFLConfig(alpha=alpha, steps=3000, lr=1e-2))
            return torch.cat([pred.net.weight.reshape(-1), pred.net.bias.reshape(-1)]).detach()

        gaps = []
        for alpha, delta in [(0.5, 0.2), (0.5, 0.02), (0.5, 0.002)]:
            gaps.append(float((final_theta(alpha) - final_theta(alpha + delta)).norm()))
        assert gaps[0] > gaps[1] > gaps[2]
        assert gaps[2] < 1e-3


class TestFitPointQuadratic:
    def test_recovers_generating_psd_matrix(self):
        gen = generator(4, "q")
        b = torch.randn(3, 3, dtype=DTYPE, generator=gen)
        a = b @ b.T
        d = torch.randn(800, 3, dtype=DTYPE, generator=gen)
        t = quadratic_form(d, a)
        g, r2 = fit_point_quadratic(d, t)
        assert float((g @ g.T - a).abs().max()) < 1e-4
        assert r2 > 0.999

    def test_euclidean_loss_recovers_identity(self):
        gen = generator(5, "q")
        d = torch.randn(400, 2, dtype=DTYPE, generator=gen)
        t = (d * d).sum(dim=1)
        g, _ = fit_point_quadratic(d, t)
        assert torch.allclose(g @ g.T, torch.eye(2, dtype=DTYPE), atol=1e-8)

    def test_constant_loss_gives_zero_matrix(self):
        gen = generator(6, "q")
        d = torch.randn(300, 2, dtype=DTYPE, generator=gen)
        t = torch.zeros(300, dtype=DTYPE)  # centered constant
        g, r2 = fit_point_quadratic(d, t)
        assert float((g @ g.T).abs().max()) < 1e-10
        assert r2 == 1.0

    def test_indefinite_target_projected_to_psd(self):
        gen = generator(7, "q")
        a = torch.diag(torch.tensor([2.0, -1.0], dtype=DTYPE))
        d = torch.randn(600, 2, dtype=DTYPE, generator=gen)
        t = quadratic_form(d, a)
        g, _ = fit_point_quadratic(d, t)
        evals = torch.linalg.eigvalsh(g @ g.T)
        assert float(evals.min()) >= -1e-12


class TestLodlFit:
    def test_sample_count_precondition(self):
        task = CubicTask(seed=0, n_train_instances=1, n_test_instances=1, m=4)
        with pytest.raises(ValueError, match="parameter count"):
            lodl_fit(task, n_samples=0)

    def test_fit_shapes_and_lookup(self):
        task = CubicTask(seed=1, n_train_instances=1, n_test_instances=1, m=6)
        lodl = lodl_fit(task, n_samples=64, seed=3)
        assert lodl.n_points == 6
        assert lodl.psi(0).shape == (1, 1)
        assert float(torch.linalg.eigvalsh(lodl.psi(3)).min()) >= -1e-12

    def test_unseen_index_lookup_fails_but_metric_eval_succeeds(self):
        # structural contrast: the per-point store cannot price unseen inputs,
        # the learned metric can evaluate anywhere
        task = CubicTask(seed=2, n_train_instances=1, n_test_instances=1, m=5)
        lodl = lodl_fit(task, n_samples=64, seed=0)
        with pytest.raises(KeyError):
            lodl.psi(5)
        metric = MetricModel(n=1, mode="full_conditional", in_dim=1, hidden=[8], seed=0)
        unseen_x = torch.tensor([[0.123]], dtype=DTYPE)
        lam = metric(unseen_x)
        assert lam.shape == (1, 1, 1)

    def test_checkpoint_roundtrip(self, tmp_path):
        from taskmet.ndio import load_named_arrays

        task = CubicTask(seed=3, n_train_instances=1, n_test_instances=1, m=4)
        lodl = lodl_fit(task, n_samples=64, seed=1)
        lodl.save(tmp_path / "lodl.ckpt.json")
        arrays, meta = load_named_arrays(tmp_path / "lodl.ckpt.json")
        assert arrays["factors"].shape == (4, 1, 1)
        assert meta["sample_count"] == 64


class TestTrainLodl:
    def test_identity_psis_alpha_zero_equals_mse_training(self):
        task = CubicTask(seed=4, n_train_instances=2, n_test_instances=1, m=10)
        x, y = task.flat_train()
        n_pts = x.shape[0]
        lodl = LodlQuadratic(torch.ones(n_pts, 1, 1, dtype=DTYPE), 8, 1.0)

        pred = Predictor(1, 1, "linear", bias=False, seed=2)
        train_lodl(pred, lodl, task, alpha=0.0, steps=60, lr=1e-2)

        pred2 = Predictor(1, 1, "linear", bias=False, seed=2)
        train_mse(pred2, x, y, 60, 1e-2)
        assert torch.allclose(pred.net.weight, pred2.net.weight, atol=1e-12)

    def test_point_count_mismatch_rejected(self):
        task = CubicTask(seed=5, n_train_instances=1, n_test_instances=1, m=6)
        lodl = LodlQuadratic(torch.ones(3, 1, 1, dtype=DTYPE), 8, 1.0)
        pred = Predictor(1, 1, "linear", bias=False, seed=0)
        with pytest.raises(ValueError, match="training points"):
            train_lodl(pred, lodl, task, alpha=0.0, steps=5, lr=1e-2)
