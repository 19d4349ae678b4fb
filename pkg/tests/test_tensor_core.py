"""Derivative-product queries against finite-difference and analytic oracles."""

from __future__ import annotations

import pytest
import torch
from hypothesis import given, settings, strategies as st

from taskmet.nets import mlp
from taskmet.tensor_core import (
    DTYPE,
    EvaluationError,
    ParamVector,
    generator,
    grad,
    hvp,
    mixed_grad,
    params_of,
    quadratic_form,
    value,
)

from conftest import pv
from invariants import run_linearity_cases, run_mixed_symmetry_cases


def _mlp_loss_setup(seed=0, hidden=6):
    gen = generator(seed, "test-mlp")
    net = mlp(2, [hidden], 1, gen, activation="tanh")
    x = torch.randn(12, 2, generator=gen, dtype=DTYPE)
    y = torch.randn(12, 1, generator=gen, dtype=DTYPE)
    p = params_of(net)

    def f(theta: ParamVector):
        from torch.func import functional_call

        out = functional_call(net, dict(theta.segments), (x,))
        return ((out - y) ** 2).mean()

    return f, p


def _fd_grad(f, p: ParamVector, h=1e-5) -> torch.Tensor:
    flat = p.flatten()
    out = torch.zeros_like(flat)
    for i in range(flat.numel()):
        e = torch.zeros_like(flat)
        e[i] = h
        fp = value(f, p.unflatten_like(flat + e))
        fm = value(f, p.unflatten_like(flat - e))
        out[i] = (fp - fm) / (2 * h)
    return out


class TestValue:
    def test_square(self):
        assert value(lambda p: (p.segments["x"] ** 2).sum(), pv(x=[3.0])) == 9.0

    def test_zero_function(self):
        assert value(lambda p: (p.segments["x"] * 0.0).sum(), pv(x=[1.0, 2.0])) == 0.0

    def test_exact_fit_mse_is_zero(self):
        x = torch.tensor([[1.0], [2.0]], dtype=DTYPE)
        y = 3.0 * x

        def f(p):
            return (((x @ p.segments["w"]) - y) ** 2).mean()

        assert value(f, pv(w=[[3.0]])) == 0.0

    def test_nonfinite_raises(self):
        with pytest.raises(EvaluationError, match="value"):
            value(lambda p: (p.segments["x"] / 0.0).sum(), pv(x=[1.0]))


class TestGrad:
    def test_square(self):
        g = grad(lambda p: (p.segments["x"] ** 2).sum(), pv(x=[3.0]))
        assert float(g.segments["x"]) == 6.0

    def test_constant_gives_zeros(self):
        g = grad(lambda p: torch.tensor(5.0, dtype=DTYPE), pv(x=[1.0, 2.0]))
        assert torch.equal(g.segments["x"], torch.zeros(2, dtype=DTYPE))

    def test_mlp_matches_central_differences(self):
        f, p = _mlp_loss_setup()
        g = grad(f, p).flatten()
        fd = _fd_grad(f, p)
        rel = float((g - fd).norm() / fd.norm())
        assert rel < 1e-6


class TestHvp:
    def test_quadratic_exact(self):
        a = torch.tensor([[2.0, 0.0], [0.0, 4.0]], dtype=DTYPE)

        def f(p):
            v = p.segments["x"]
            return 0.5 * v @ (a @ v)

        out = hvp(f, pv(x=[0.3, -0.7]), pv(x=[1.0, 1.0]))
        assert torch.allclose(out.segments["x"], torch.tensor([2.0, 4.0], dtype=DTYPE), atol=1e-10)

    def test_linear_gives_zero(self):
        out = hvp(lambda p: p.segments["x"].sum(), pv(x=[1.0, 2.0]), pv(x=[1.0, -1.0]))
        assert float(out.flatten().abs().max()) == 0.0

    def test_mlp_matches_fd_of_gradient(self):
        f, p = _mlp_loss_setup()
        gen = generator(3, "dir")
        v_flat = torch.randn(p.numel, generator=gen, dtype=DTYPE)
        v = p.unflatten_like(v_flat)
        h = 1e-5
        gp = grad(f, p.unflatten_like(p.flatten() + h * v_flat)).flatten()
        gm = grad(f, p.unflatten_like(p.flatten() - h * v_flat)).flatten()
        fd = (gp - gm) / (2 * h)
        out = hvp(f, p, v).flatten()
        assert float((out - fd).norm() / fd.norm()) < 1e-4

    def test_random_quadratics_exact(self):
        gen = generator(11, "quad")
        for _ in range(25):
            n = int(torch.randint(1, 6, (1,), generator=gen))
            b = torch.randn(n, n, generator=gen, dtype=DTYPE)
            a = b + b.T
            x0 = torch.randn(n, generator=gen, dtype=DTYPE)
            vv = torch.randn(n, generator=gen, dtype=DTYPE)

            def f(p, a=a):
                v = p.segments["x"]
                return 0.5 * v @ (a @ v)

            out = hvp(f, pv(x=x0), pv(x=vv)).segments["x"]
            assert float((out - a @ vv).abs().max()) < 1e-10


class TestMixedGrad:
    def test_theta_sq_phi(self):
        f = lambda p, q: (p.segments["t"] ** 2 * q.segments["s"]).sum()  # noqa: E731
        out = mixed_grad(f, pv(t=[3.0]), pv(s=[5.0]), pv(t=[1.0]))
        assert float(out.segments["s"]) == 6.0

    def test_separable_gives_zero(self):
        f = lambda p, q: (p.segments["t"] ** 3).sum() + (q.segments["s"] ** 2).sum()  # noqa: E731
        out = mixed_grad(f, pv(t=[2.0]), pv(s=[4.0]), pv(t=[1.0]))
        assert float(out.flatten().abs().max()) == 0.0

    def test_weighted_linear_loss_matches_fd(self):
        # metric-weighted loss of a two-sample linear model
        x = torch.tensor([1.0, 2.0], dtype=DTYPE)
        y = torch.tensor([1.0, 3.0], dtype=DTYPE)

        def f(p, q):
            theta = p.segments["t"]
            w = q.segments["w"]
            return (w * (theta * x - y) ** 2).mean()

        p0, q0 = pv(t=[0.7]), pv(w=[2.0, 0.5])
        v = pv(t=[1.0])
        out = mixed_grad(f, p0, q0, v).segments["w"]
        h = 1e-6
        fd = torch.zeros(2, dtype=DTYPE)
        for i in range(2):
            e = torch.zeros(2, dtype=DTYPE)
            e[i] = h
            gp = grad(lambda p: f(p, pv(w=q0.segments["w"] + e)), p0).flatten()
            gm = grad(lambda p: f(p, pv(w=q0.segments["w"] - e)), p0).flatten()
            fd[i] = (gp - gm)[0] / (2 * h)
        assert float((out - fd).norm() / fd.norm()) < 1e-4


class TestInvariants:
    def test_linearity(self):
        run_linearity_cases(100)

    def test_mixed_symmetry(self):
        run_mixed_symmetry_cases(100)

    def test_determinism_bitwise(self):
        f1, p1 = _mlp_loss_setup(seed=7)
        f2, p2 = _mlp_loss_setup(seed=7)
        assert torch.equal(p1.flatten(), p2.flatten())
        assert value(f1, p1) == value(f2, p2)
        assert torch.equal(grad(f1, p1).flatten(), grad(f2, p2).flatten())

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=6))
    @settings(max_examples=100, deadline=None)
    def test_flatten_roundtrip(self, vals):
        p = pv(a=vals, b=[[1.0, 2.0], [3.0, 4.0]])
        flat = p.flatten()
        back = p.unflatten_like(flat)
        assert torch.equal(back.flatten(), flat)
        assert back.names() == p.names()


class TestParamVector:
    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            ParamVector([("a", torch.ones(1)), ("a", torch.ones(1))])

    def test_structure_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            pv(a=[1.0]).dot(pv(b=[1.0]))

    def test_arithmetic(self):
        a, b = pv(x=[1.0, 2.0]), pv(x=[3.0, -1.0])
        assert torch.equal((a + b).segments["x"], torch.tensor([4.0, 1.0], dtype=DTYPE))
        assert torch.equal((a - b).segments["x"], torch.tensor([-2.0, 3.0], dtype=DTYPE))
        assert torch.equal((2.0 * a).segments["x"], torch.tensor([2.0, 4.0], dtype=DTYPE))
        assert float(a.dot(b)) == 1.0


class TestQuadraticForm:
    def test_shared_matrix(self):
        r = torch.tensor([[1.0, 1.0]], dtype=DTYPE)
        m = torch.diag(torch.tensor([2.0, 1.0], dtype=DTYPE))
        assert float(quadratic_form(r, m)) == 3.0

    def test_batched_matrices(self):
        r = torch.ones(2, 2, dtype=DTYPE)
        m = torch.stack([torch.eye(2, dtype=DTYPE), 2 * torch.eye(2, dtype=DTYPE)])
        out = quadratic_form(r, m)
        assert torch.allclose(out, torch.tensor([2.0, 4.0], dtype=DTYPE))
