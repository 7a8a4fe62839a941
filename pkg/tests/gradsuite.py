"""Finite-difference instances shared by the gradient tests and the acceptance run.

Each builder takes a seed and returns ``(function, inputs)`` ready for
``substrate.gradient_check``. Everything runs in float64.
"""

from __future__ import annotations

import torch
from torch.func import functional_call

from spac import substrate as S
from spac.agent import Batch, Nets, Temperature, planner_loss, q_loss, reg_loss, temperature_loss
from spac.networks import Actor, Critic, Planner
from spac.warp import compose_fields, grid_sample_bilinear, ncc_local, tv_penalty

DTYPE = torch.float64
N_INSTANCES = 20
TOL = 1e-5
SIZE = 8
PLAN = 3
CH = (2, 3, 3)


def _g(seed):
    return torch.Generator().manual_seed(seed)


def _rand(g, *shape, lo=-1.0, hi=1.0):
    return torch.rand(*shape, generator=g, dtype=DTYPE) * (hi - lo) + lo


def _offgrid_field(g, h, w, amp=1.5):
    # keeps sample points away from integer coordinates so bilinear kinks are not probed
    f = _rand(g, 2, h, w, lo=-amp, hi=amp)
    frac = f - f.floor()
    return torch.where((frac < 0.05) | (frac > 0.95), f + 0.1, f)


def tiny_nets(seed: int, final_std: float = 0.3) -> Nets:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        planner = Planner(SIZE, PLAN, CH).to(DTYPE)
        actor = Actor(planner, max_step_disp=1.5, final_init_std=final_std).to(DTYPE)
        critic = Critic(SIZE, PLAN, CH, embed=4, hidden=5).to(DTYPE)
        target = Critic(SIZE, PLAN, CH, embed=4, hidden=5).to(DTYPE)
        # default fan-in init shrinks the signal through 2-3 channel layers to ~1e-6; widen it
        for net in (planner, critic, target):
            for name, prm in net.named_parameters():
                if name.endswith("weight"):
                    prm.data.mul_(2.5)
    return Nets(planner, actor, critic, target)


def _images(g, n=None):
    shape = (1, SIZE, SIZE) if n is None else (n, 1, SIZE, SIZE)
    return _rand(g, *shape, lo=0.0, hi=1.0)


def _names(module):
    return [n for n, _ in module.named_parameters()]


def _call(module, names, values, *args):
    return functional_call(module, dict(zip(names, values)), args)


# ------------------------------------------------------------------ substrate ops


def conv2d_case(seed):
    g = _g(seed)
    stride = 1 + seed % 2
    return (
        lambda x, k, b: S.sum(S.conv2d(x, k, b, stride=stride, padding=1)),
        [_rand(g, 3, 8, 8), _rand(g, 2, 3, 3, 3), _rand(g, 2)],
    )


def upsample_case(seed):
    g = _g(seed)
    w = _rand(g, 2, 6, 6)
    return lambda x: S.sum(S.multiply(S.upsample_nearest(x, 2), w)), [_rand(g, 2, 3, 3)]


def linear_case(seed):
    g = _g(seed)
    return lambda x, w, b: S.sum(S.tanh(S.linear(x, w, b))), [_rand(g, 6), _rand(g, 4, 6), _rand(g, 4)]


def elementwise_case(seed):
    g = _g(seed)

    def f(a, b):
        pos = S.add(S.softplus(a), S.exp(S.scale(b, 0.3)))
        mixed = S.subtract(S.multiply(S.tanh(a), b), S.square(S.relu(b)))
        cat = S.concat_channels([mixed, S.log(pos)])
        return S.add(S.mean(cat), S.scale(S.sum(pos), 0.1))

    a = _rand(g, 2, 4, 4)
    b = _rand(g, 2, 4, 4)
    b = torch.where(b.abs() < 0.05, b + 0.1, b)  # relu kink
    return f, [a, b]


def conv_relu_mean_case(seed):
    g = _g(seed)
    x = _rand(g, 2, 6, 6)
    k = _rand(g, 3, 2, 3, 3)
    return lambda x_, k_: S.mean(S.relu(S.conv2d(x_, k_, padding=1))), [x, k]


# ----------------------------------------------------------------- warp geometry


def grid_sample_case(seed):
    g = _g(seed)
    img = _rand(g, 2, SIZE, SIZE, lo=0.0, hi=1.0)
    w = _rand(g, 2, SIZE, SIZE)
    return lambda im, f: S.sum(S.multiply(grid_sample_bilinear(im, f), w)), [img, _offgrid_field(g, SIZE, SIZE)]


def compose_case(seed):
    g = _g(seed)
    img = _rand(g, 1, SIZE, SIZE, lo=0.0, hi=1.0)
    a = _rand(g, 2, SIZE, SIZE, lo=-0.8, hi=0.8)
    prev = _offgrid_field(g, SIZE, SIZE)
    return lambda a_, p_: S.mean(S.square(grid_sample_bilinear(img, compose_fields(a_, p_)))), [a, prev]


def ncc_case(seed):
    g = _g(seed)
    return lambda f, m: ncc_local(f, m, window=5), [_images(g), _images(g)]


def tv_case(seed):
    g = _g(seed)
    return tv_penalty, [_rand(g, 2, SIZE, SIZE, lo=-3, hi=3)]


# ----------------------------------------------------------------- network losses


def q_loss_case(seed):
    g = _g(seed)
    nets = tiny_nets(seed)
    n = 3
    batch = Batch(
        states=_images(g, n).repeat(1, 2, 1, 1),
        plans=_rand(g, n, PLAN, lo=-0.9, hi=0.9),
        rewards=_rand(g, n, lo=-0.2, hi=0.2),
        next_states=_images(g, n).repeat(1, 2, 1, 1),
        dones=torch.tensor([0.0, 1.0, 0.0], dtype=DTYPE),
    )
    noise = torch.randn(n, PLAN, generator=g, dtype=DTYPE)
    names = _names(nets.critic)
    params = [p.detach().clone() for p in nets.critic.parameters()]
    critic = nets.critic

    def f(*vals):
        nets.critic = lambda s, p: _call(critic, names, vals, s, p)
        try:
            return q_loss(batch, nets, 0.1, 0.99, noise)
        finally:
            nets.critic = critic

    return f, params


def planner_loss_case(seed):
    g = _g(seed)
    nets = tiny_nets(seed)
    states = torch.cat([_images(g, 3), _images(g, 3)], dim=1)
    noise = torch.randn(3, PLAN, generator=g, dtype=DTYPE)
    names = _names(nets.planner)
    params = [p.detach().clone() for p in nets.planner.parameters()]

    def f(*vals):
        planner = lambda s: _call(nets.planner, names, vals, s)  # noqa: E731
        return planner_loss(states, planner, nets.critic, 0.2, noise)[0]

    return f, params


def reg_loss_case(seed):
    g = _g(seed)
    nets = tiny_nets(seed)
    fixed = _images(g, 2)
    moving = _images(g, 2)
    omega_prev = torch.stack([_offgrid_field(g, SIZE, SIZE, amp=1.0) for _ in range(2)])
    noise = torch.randn(2, PLAN, generator=g, dtype=DTYPE)
    p_names = _names(nets.planner)
    a_names = _names(nets.actor)
    params = [p.detach().clone() for p in nets.planner.parameters()] + [
        p.detach().clone() for p in nets.actor.parameters()
    ]
    n_p = len(p_names)
    planner, actor = nets.planner, nets.actor

    def f(*vals):
        nets.planner = lambda s: _call(planner, p_names, vals[:n_p], s)
        nets.actor = lambda p, sk: _call(actor, a_names, vals[n_p:], p, sk)
        try:
            return reg_loss(fixed, moving, omega_prev, nets, 0.5, noise, window=5)[0]
        finally:
            nets.planner, nets.actor = planner, actor

    return f, params


def temperature_case(seed):
    g = _g(seed)
    temp = Temperature(PLAN, init_alpha=0.05 + 0.1 * float(torch.rand(1, generator=g)))
    logp = _rand(g, 5, lo=-6, hi=2)

    def f(log_alpha):
        temp.log_alpha = log_alpha
        return temperature_loss(logp, temp)

    return f, [temp.log_alpha.detach().clone()]


def state_to_mu_case(seed):
    g = _g(seed)
    nets = tiny_nets(seed)
    return lambda s: S.sum(nets.planner(s).mu), [torch.cat([_images(g), _images(g)])]


def plan_to_action_case(seed):
    g = _g(seed)
    nets = tiny_nets(seed)
    with torch.no_grad():
        skips = nets.planner(torch.cat([_images(g), _images(g)])).skips
    return lambda p: S.mean(S.square(nets.actor(p, skips))), [_rand(g, PLAN, lo=-0.9, hi=0.9)]


def plan_to_q_case(seed):
    g = _g(seed)
    nets = tiny_nets(seed)
    state = torch.cat([_images(g), _images(g)])
    return lambda p: nets.critic(state, p), [_rand(g, PLAN, lo=-0.9, hi=0.9)]


CASES = {
    "conv2d": conv2d_case,
    "upsample_nearest": upsample_case,
    "linear": linear_case,
    "elementwise": elementwise_case,
    "conv_relu_mean": conv_relu_mean_case,
    "grid_sample_bilinear": grid_sample_case,
    "compose_fields": compose_case,
    "ncc_local": ncc_case,
    "tv_penalty": tv_case,
    "q_loss/critic": q_loss_case,
    "planner_loss/planner": planner_loss_case,
    "reg_loss/planner+actor": reg_loss_case,
    "temperature_loss": temperature_case,
    "planner state->mu": state_to_mu_case,
    "actor plan->action": plan_to_action_case,
    "critic plan->q": plan_to_q_case,
}


def run_case(name: str, seed: int) -> float:
    f, inputs = CASES[name](seed)
    return S.gradient_check(f, inputs)
