import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose, assert_array_equal

from geovox.autodiff import NonFiniteLossError, ParameterStore, backward, grad_check, relative_error
from geovox.gradcheck_suite import encoder_micro, render_micro


class Toy(torch.nn.Module):
    def __init__(self):
        super().__init__()
        g = torch.Generator().manual_seed(0)
        self.a = torch.nn.Parameter(torch.randn(3, 2, generator=g, dtype=torch.float64))
        self.b = torch.nn.Parameter(torch.randn(4, generator=g, dtype=torch.float64))


class TestBackward:
    def test_constant_loss(self):
        m = Toy()
        store = ParameterStore(m)
        backward(torch.tensor(3.0, dtype=torch.float64), store=store)
        for name, g in store.grads().items():
            assert g.shape == store[name].shape
            assert (g == 0).all()

    def test_half_norm(self):
        m = Toy()
        store = ParameterStore(m)
        backward(0.5 * (m.a ** 2).sum() + 0.5 * (m.b ** 2).sum(), store=store)
        assert_array_equal(m.a.grad.numpy(), m.a.detach().numpy())
        assert_array_equal(m.b.grad.numpy(), m.b.detach().numpy())

    def test_additive(self):
        m = Toy()
        store = ParameterStore(m)
        f1 = lambda: (m.a.sin() * 2).sum() + m.b.prod()
        f2 = lambda: (m.a ** 3).sum() * m.b.sum()
        backward(f1(), store=store)
        backward(f2(), store=store)
        split = {k: v.clone() for k, v in store.grads().items()}
        store.zero_grad()
        backward(f1() + f2(), store=store)
        for k, v in store.grads().items():
            assert_allclose(v.numpy(), split[k].numpy(), rtol=0, atol=1e-12)

    def test_non_finite(self):
        m = Toy()
        terms = {"L_c": m.a.sum(), "L_d": torch.log(torch.tensor(-1.0))}
        with pytest.raises(NonFiniteLossError, match="L_d"):
            backward(terms["L_c"] + terms["L_d"], terms)

    def test_store_round_trip(self):
        m = Toy()
        store = ParameterStore(m)
        snap = store.state()
        h = store.digest()
        with torch.no_grad():
            m.a.add_(1)
        assert store.digest() != h
        store.load(snap)
        assert store.digest() == h
        with pytest.raises(KeyError):
            store.load({"a": snap["a"]})


class TestGradCheck:
    def test_linear(self):
        w = torch.tensor([1.5, -2.0, 0.25], dtype=torch.float64, requires_grad=True)
        c = torch.tensor([0.3, 0.7, -1.1], dtype=torch.float64)
        rep = grad_check(lambda: (w * c).sum(), {"w": w})
        assert rep.max_rel_error < 1e-10 and rep.passed

    def test_corrupted_gradient_flagged(self):
        w = torch.tensor([1.5, -2.0], dtype=torch.float64, requires_grad=True)

        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return (x ** 2).sum()

            @staticmethod
            def backward(ctx, g):
                return g * torch.ones(2, dtype=torch.float64)

        rep = grad_check(lambda: Wrong.apply(w), {"w": w})
        assert rep.max_rel_error > rep.tolerance and not rep.passed

    def test_bad_step(self):
        with pytest.raises(ValueError):
            grad_check(lambda: torch.zeros(()), {}, step=0)

    def test_size_guard(self):
        w = torch.zeros(6000, dtype=torch.float64, requires_grad=True)
        with pytest.raises(ValueError):
            grad_check(lambda: w.sum(), {"w": w})

    def test_relative_error_floor(self):
        assert relative_error(np.array([0.0]), np.array([1e-9]))[0] == pytest.approx(1e-3)

    @pytest.mark.parametrize("factory", [render_micro, encoder_micro])
    def test_micro_instances(self, factory):
        loss_fn, params = factory()
        rep = grad_check(loss_fn, params, step=1e-5)
        assert rep.max_rel_error <= 1e-4, "\n".join(rep.lines())
