"""Reverse-mode gradients against float64 central differences."""

import pytest
import torch

import gradsuite as G
from spac import substrate as S
from spac.agent import Nets, reg_loss
from spac.networks import Actor, Critic, Planner


@pytest.mark.parametrize("name", list(G.CASES))
def test_gradient_suite(name):
    errors = [G.run_case(name, seed) for seed in range(G.N_INSTANCES)]
    assert max(errors) < G.TOL, f"{name}: worst relative error {max(errors):.3e}"


def test_sum_of_squares_closed_form():
    x = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
    assert S.gradient_check(lambda v: S.sum(S.square(v)), [x]) < 1e-9
    v = x.clone().requires_grad_(True)
    S.backward(S.sum(S.square(v)))
    assert v.grad.tolist() == [2.0, 4.0, 6.0]


def test_constant_function_has_zero_error():
    assert S.gradient_check(lambda v: S.sum(v) * 0 + 3.0, [torch.randn(4)]) == 0.0


def test_non_finite_raises_diagnostic():
    with pytest.raises(S.DiagnosticError):
        S.gradient_check(lambda v: S.sum(S.log(v)), [torch.tensor([-1.0, 2.0])])


def test_mean_tanh_gradient_matches_formula():
    x = torch.randn(3, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
    v = x.clone().requires_grad_(True)
    S.backward(S.mean(S.tanh(v)))
    expected = (1 - torch.tanh(x) ** 2) / x.numel()
    assert torch.allclose(v.grad, expected, rtol=0, atol=1e-15)
    assert S.gradient_check(lambda a: S.mean(S.tanh(a)), [x]) < 1e-5


def test_backward_is_linear():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 5, 5, dtype=torch.float64, generator=g)
    k = torch.randn(3, 2, 3, 3, dtype=torch.float64, generator=g)

    def grad_of(fn):
        v = x.clone().requires_grad_(True)
        S.backward(fn(v))
        return v.grad

    f = lambda v: S.mean(S.relu(S.conv2d(v, k, padding=1)))  # noqa: E731
    h = lambda v: S.sum(S.tanh(v))  # noqa: E731
    combo = grad_of(lambda v: 2.5 * f(v) - 0.75 * h(v))
    assert torch.allclose(combo, 2.5 * grad_of(f) - 0.75 * grad_of(h), atol=1e-12)


def test_registration_loss_float32_bias_gradient():
    # end-to-end gradient w.r.t. the actor's final bias in training precision
    torch.manual_seed(0)
    planner = Planner(8, 4, (4, 4, 4))
    actor = Actor(planner, max_step_disp=0.8, final_init_std=0.05)
    critic = Critic(8, 4, (4, 4, 4))
    nets = Nets(planner, actor, critic, critic)
    g = torch.Generator().manual_seed(1)
    fixed = torch.rand(1, 8, 8, generator=g)
    moving = torch.rand(1, 8, 8, generator=g)
    omega = torch.rand(2, 8, 8, generator=g) * 0.6 + 0.2
    noise = torch.randn(4, generator=g)


    actor.flow.bias.grad = None
    l32 = reg_loss(fixed, moving, omega, nets, 1.0, noise, window=3)[0]
    S.backward(l32)
    analytic = actor.flow.bias.grad.double().clone()
    base = actor.flow.bias.detach().clone()

    nets64 = Nets(planner.double(), actor.double(), critic, critic)
    h = 1e-6
    numeric = torch.zeros(2, dtype=torch.float64)
    for i in range(2):
        plus, minus = base.double().clone(), base.double().clone()
        plus[i] += h
        minus[i] -= h
        with torch.no_grad():
            actor.flow.bias.copy_(plus)
            f_plus = reg_loss(fixed.double(), moving.double(), omega.double(), nets64, 1.0, noise.double(), 3)[0]
            actor.flow.bias.copy_(minus)
            f_minus = reg_loss(fixed.double(), moving.double(), omega.double(), nets64, 1.0, noise.double(), 3)[0]
        numeric[i] = (f_plus - f_minus) / (2 * h)
    err = (analytic - numeric).abs().max() / numeric.abs().max()
    assert err < 1e-3
