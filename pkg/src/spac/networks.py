"""Planner, actor and critic networks.

The planner encodes the two-channel state into a Gaussian over a small plan
vector and exposes the feature map of every encoder scale. The actor decodes a
plan back to a dense displacement field, re-injecting those skip features at
matching scales. The critic scores (state, plan) pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from . import substrate as S

LOG_SIGMA_MIN = -20.0
LOG_SIGMA_MAX = 2.0
SQUASH_EPS = 1e-6
# float32 tanh rounds to exactly +-1 beyond |x| ~ 9; plans must stay strictly inside
PLAN_BOUND = 1.0 - 1e-6


class Conv(nn.Module):
    """Square conv layer whose forward goes through :func:`substrate.conv2d`."""

    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1):
        super().__init__()
        self.stride = stride
        self.padding = k // 2
        self.weight = nn.Parameter(torch.empty(c_out, c_in, k, k))
        self.bias = nn.Parameter(torch.zeros(c_out))
        bound = 1.0 / math.sqrt(c_in * k * k)
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return S.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(nn.Module):
    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_out, n_in))
        self.bias = nn.Parameter(torch.empty(n_out))
        bound = 1.0 / math.sqrt(n_in)
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return S.linear(x, self.weight, self.bias)


def _down(size: int) -> int:
    return S.conv_output_size(size, 3, 2, 1)


@dataclass
class PlannerOutput:
    mu: torch.Tensor
    log_sigma: torch.Tensor
    skips: list[torch.Tensor]


@dataclass
class Plan:
    value: torch.Tensor
    pre_squash: torch.Tensor


class Planner(nn.Module):
    def __init__(self, image_size: int = 28, plan_dim: int = 64, channels=(16, 32, 32)):
        super().__init__()
        self.image_size = image_size
        self.plan_dim = plan_dim
        self.channels = tuple(channels)
        enc, down = [], []
        c_prev = 2
        size = image_size
        for c in self.channels:
            enc.append(Conv(c_prev, c))
            down.append(Conv(c, c, stride=2))
            c_prev = c
            size = _down(size)
        self.enc = nn.ModuleList(enc)
        self.down = nn.ModuleList(down)
        self.bottleneck_shape = (c_prev, size, size)
        n_flat = c_prev * size * size
        self.mu_head = Linear(n_flat, plan_dim)
        self.log_sigma_head = Linear(n_flat, plan_dim)

    def forward(self, state: torch.Tensor) -> PlannerOutput:
        single = state.dim() == 3
        x = state.unsqueeze(0) if single else state
        skips = []
        for enc, down in zip(self.enc, self.down):
            x = S.relu(enc(x))
            skips.append(x)
            x = S.relu(down(x))
        flat = x.flatten(1)
        mu = self.mu_head(flat)
        log_sigma = self.log_sigma_head(flat).clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        if single:
            return PlannerOutput(mu[0], log_sigma[0], [s[0] for s in skips])
        return PlannerOutput(mu, log_sigma, skips)


def sample_plan(out: PlannerOutput, noise: torch.Tensor) -> tuple[Plan, torch.Tensor]:
    """Reparameterized tanh-Gaussian draw and its log-density."""
    if noise.shape != out.mu.shape:
        raise S.ContractViolation(f"noise shape {tuple(noise.shape)} != plan shape {tuple(out.mu.shape)}")
    pre = out.mu + S.exp(out.log_sigma) * noise
    plan = S.tanh(pre).clamp(-PLAN_BOUND, PLAN_BOUND)
    gauss = -0.5 * noise * noise - out.log_sigma - 0.5 * math.log(2.0 * math.pi)
    correction = torch.log(1.0 - plan * plan + SQUASH_EPS)
    log_prob = (gauss - correction).sum(dim=-1)
    return Plan(plan, pre), log_prob


def deterministic_plan(out: PlannerOutput) -> Plan:
    return Plan(S.tanh(out.mu).clamp(-PLAN_BOUND, PLAN_BOUND), out.mu)


class Actor(nn.Module):
    """Decodes a plan into a per-step displacement field bounded by ``max_step_disp``."""

    def __init__(self, planner: Planner, max_step_disp: float = 2.8, final_init_std: float = 1e-5):
        super().__init__()
        self.max_step_disp = max_step_disp
        self.image_size = planner.image_size
        self.bottleneck_shape = planner.bottleneck_shape
        c_b, h_b, w_b = self.bottleneck_shape
        self.project = Linear(planner.plan_dim, c_b * h_b * w_b)
        dec = []
        c_prev = c_b
        for c_skip in reversed(planner.channels):
            dec.append(Conv(c_prev + c_skip, c_skip))
            c_prev = c_skip
        self.dec = nn.ModuleList(dec)
        self.flow = Conv(c_prev, 2)
        with torch.no_grad():
            if final_init_std > 0:
                self.flow.weight.normal_(0.0, final_init_std)
            else:
                self.flow.weight.zero_()
            self.flow.bias.zero_()

    def forward(self, plan: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        single = plan.dim() == 1
        p = plan.unsqueeze(0) if single else plan
        sk = [s.unsqueeze(0) for s in skips] if single else skips
        x = S.relu(self.project(p)).reshape(p.shape[0], *self.bottleneck_shape)
        for conv, skip in zip(self.dec, reversed(sk)):
            x = S.upsample_nearest(x, 2)[..., : skip.shape[-2], : skip.shape[-1]]
            x = S.relu(conv(S.concat_channels([x, skip])))
        field = S.scale(S.tanh(self.flow(x)), self.max_step_disp)
        return field[0] if single else field


class Critic(nn.Module):
    """Soft Q-value of a (state, plan) pair."""

    def __init__(self, image_size: int = 28, plan_dim: int = 64, channels=(16, 32, 32), embed: int = 128, hidden: int = 256):
        super().__init__()
        convs = []
        c_prev = 2
        size = image_size
        for c in channels:
            convs.append(Conv(c_prev, c, stride=2))
            c_prev = c
            size = _down(size)
        self.convs = nn.ModuleList(convs)
        self.embed = Linear(c_prev * size * size, embed)
        self.hidden = Linear(embed + plan_dim, hidden)
        self.out = Linear(hidden, 1)

    def forward(self, state: torch.Tensor, plan: torch.Tensor) -> torch.Tensor:
        single = state.dim() == 3
        x = state.unsqueeze(0) if single else state
        p = plan.unsqueeze(0) if single else plan
        for conv in self.convs:
            x = S.relu(conv(x))
        v = S.relu(self.embed(x.flatten(1)))
        h = S.relu(self.hidden(torch.cat([v, p], dim=1)))
        q = self.out(h)[:, 0]
        return q[0] if single else q
