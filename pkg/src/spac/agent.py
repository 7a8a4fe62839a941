"""Planner-actor-critic agent: losses, replay pool and the training driver."""

from __future__ import annotations

import copy
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from . import substrate as S
from .env import EpisodeState, State, dice, env_reset, env_step, warp_labels
from .networks import Actor, Critic, Planner, PlannerOutput, deterministic_plan, sample_plan
from .warp import compose_fields, grid_sample_bilinear, ncc_local, tv_penalty

MODES = ("spac", "no-rl-ablation")


@dataclass
class TrainConfig:
    image_size: int = 28
    plan_dim: int = 64
    max_step_disp: float = 2.8
    horizon: int = 10
    gamma: float = 0.99
    tau: float = 0.005
    tv_weight: float = 1.0
    batch_size: int = 32
    reg_batch: int = 16
    capacity: int = 20_000
    grad_steps: int = 1
    lr_critic: float = 3e-4
    lr_planner: float = 1e-3
    lr_actor: float = 1e-3
    lr_alpha: float = 3e-4
    init_alpha: float = 0.1
    ncc_window: int = 9
    mode: str = "spac"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise S.ContractViolation(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.tau <= 1.0:
            raise S.ContractViolation(f"tau must lie in [0, 1], got {self.tau}")
        if self.max_step_disp <= 0:
            raise S.ContractViolation("max_step_disp must be positive")
        if self.mode not in MODES:
            raise S.ContractViolation(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def rl_enabled(self) -> bool:
        return self.mode == "spac"

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class Transition:
    state: State
    plan: torch.Tensor
    action: torch.Tensor
    reward: float
    next_state: State
    done: bool
    # registration context: the untouched moving image and the field that produced ``state``
    moving_orig: torch.Tensor
    omega_prev: torch.Tensor
    tag: int = -1


class ReplayPool:
    """Bounded FIFO of transitions with seeded uniform sampling (with replacement)."""

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 1:
            raise S.ContractViolation("capacity must be >= 1")
        self.capacity = capacity
        self.items: deque[Transition] = deque(maxlen=capacity)
        self.rng = np.random.default_rng(seed)
        self.inserted = 0

    def __len__(self) -> int:
        return len(self.items)

    def add(self, tr: Transition) -> None:
        self.items.append(tr)
        self.inserted += 1

    def sample_indices(self, n: int) -> np.ndarray:
        if len(self.items) == 0:
            raise S.ContractViolation("cannot sample from an empty pool")
        return self.rng.integers(0, len(self.items), size=n)

    def sample(self, n: int) -> list[Transition]:
        return [self.items[i] for i in self.sample_indices(n)]


class Temperature:
    def __init__(self, plan_dim: int, init_alpha: float = 0.1):
        self.log_alpha = torch.tensor(math.log(init_alpha), requires_grad=True)
        self.target_entropy = -float(plan_dim)
        self.params = S.ParameterSet([("log_alpha", self.log_alpha)])

    @property
    def alpha(self) -> float:
        return float(self.log_alpha.detach().exp())


@dataclass
class Batch:
    states: torch.Tensor
    plans: torch.Tensor
    rewards: torch.Tensor
    next_states: torch.Tensor
    dones: torch.Tensor

    @classmethod
    def collate(cls, transitions: Sequence[Transition]) -> "Batch":
        if not transitions:
            raise S.ContractViolation("empty batch")
        return cls(
            states=torch.stack([t.state.tensor() for t in transitions]),
            plans=torch.stack([t.plan for t in transitions]),
            rewards=torch.tensor([t.reward for t in transitions], dtype=torch.float32),
            next_states=torch.stack([t.next_state.tensor() for t in transitions]),
            dones=torch.tensor([float(t.done) for t in transitions]),
        )


@dataclass
class Nets:
    planner: Planner
    actor: Actor
    critic: Critic
    target: Critic

    def parameter_sets(self) -> dict[str, S.ParameterSet]:
        return {
            "planner": S.ParameterSet.from_module(self.planner),
            "actor": S.ParameterSet.from_module(self.actor),
            "critic": S.ParameterSet.from_module(self.critic),
            "target": S.ParameterSet.from_module(self.target),
        }


def build_nets(config: TrainConfig) -> Nets:
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        planner = Planner(config.image_size, config.plan_dim)
        actor = Actor(planner, config.max_step_disp)
        critic = Critic(config.image_size, config.plan_dim)
    target = copy.deepcopy(critic)
    for p in target.parameters():
        p.requires_grad_(False)
    return Nets(planner, actor, critic, target)


# ------------------------------------------------------------------------ losses


def q_loss(
    batch: Batch,
    nets: Nets,
    alpha: float,
    gamma: float,
    next_noise: torch.Tensor,
) -> torch.Tensor:
    """Soft Bellman residual for the critic; the bootstrap target carries no gradient."""
    with torch.no_grad():
        nxt = nets.planner(batch.next_states)
        next_plan, next_logp = sample_plan(nxt, next_noise)
        soft_v = nets.target(batch.next_states, next_plan.value) - alpha * next_logp
        target = batch.rewards + gamma * (1.0 - batch.dones) * soft_v
    q = nets.critic(batch.states, batch.plans)
    return 0.5 * S.mean(S.square(q - target))


def planner_loss(
    states: torch.Tensor,
    planner: Planner,
    critic: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    alpha: float,
    noise: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean of alpha * log_prob - Q over reparameterized plans. Returns (loss, log_probs)."""
    if states.shape[0] == 0:
        raise S.ContractViolation("empty batch")
    out = planner(states)
    plan, logp = sample_plan(out, noise)
    q = critic(states, plan.value)
    return S.mean(alpha * logp - q), logp


def temperature_loss(log_probs: torch.Tensor, temperature: Temperature) -> torch.Tensor:
    return S.mean(-temperature.log_alpha * (log_probs.detach() + temperature.target_entropy))


def reg_loss(
    fixed: torch.Tensor,
    moving_orig: torch.Tensor,
    omega_prev: torch.Tensor,
    nets: Nets,
    tv_weight: float,
    noise: torch.Tensor | None,
    window: int = 9,
) -> tuple[torch.Tensor, dict]:
    """Unsupervised registration loss for one step from the given context(s).

    Samples a plan from the current planner, decodes the action, composes it
    onto ``omega_prev`` and scores the re-warped original moving image with
    ``-NCC + tv_weight * TV(composed field)``. Gradients reach both planner
    and actor. Pass ``noise=None`` to use the deterministic plan.
    """
    moving_now = grid_sample_bilinear(moving_orig, omega_prev)
    state = torch.cat([fixed, moving_now], dim=-3)
    out = nets.planner(state)
    plan = deterministic_plan(out) if noise is None else sample_plan(out, noise)[0]
    action = nets.actor(plan.value, out.skips)
    omega = compose_fields(action, omega_prev)
    warped = grid_sample_bilinear(moving_orig, omega)
    ncc = ncc_local(fixed, warped, window)
    tv = tv_penalty(omega)
    loss = -ncc + tv_weight * tv if tv_weight else -ncc
    return loss, {"ncc": ncc.detach(), "tv": tv.detach()}


# ------------------------------------------------------------------------- agent


@dataclass
class LossReport:
    j_q: float = 0.0
    j_kappa: float = 0.0
    j_reg: float = 0.0
    alpha_loss: float = 0.0
    alpha: float = 0.0
    ncc: float = 0.0
    skipped: bool = False


class SPACAgent:
    def __init__(self, config: TrainConfig):
        self.config = config
        self.nets = build_nets(config)
        self.temperature = Temperature(config.plan_dim, config.init_alpha)
        self.pool = ReplayPool(config.capacity, seed=config.seed + 1)
        self.noise = torch.Generator().manual_seed(config.seed + 2)
        sets = self.nets.parameter_sets()
        self.planner_params = sets["planner"]
        self.actor_params = sets["actor"]
        self.critic_params = sets["critic"]
        self.target_params = sets["target"]
        self.opt_critic = S.AdamState(self.critic_params, lr=config.lr_critic)
        self.opt_planner = S.AdamState(self.planner_params, lr=config.lr_planner)
        self.opt_actor = S.AdamState(self.actor_params, lr=config.lr_actor)
        self.opt_alpha = S.AdamState(self.temperature.params, lr=config.lr_alpha)
        self.updates = 0
        self.last_batch: list[tuple[int, float, bool]] = []

    def draw_noise(self, *shape: int) -> torch.Tensor:
        return torch.randn(*shape, self.config.plan_dim, generator=self.noise)

    # -- acting

    def act(self, state: State, noise: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Plan and action for one state; ``noise=None`` means the deterministic plan."""
        with torch.no_grad():
            out = self.nets.planner(state.tensor())
            plan = deterministic_plan(out) if noise is None else sample_plan(out, noise)[0]
            action = self.nets.actor(plan.value, out.skips)
        return plan.value, action

    def rollout_step(self, episode: EpisodeState) -> Transition:
        if episode.done:
            raise S.ContractViolation("cannot step a finished episode")
        state = episode.state()
        omega_prev = episode.omega
        plan, action = self.act(state, self.draw_noise())
        next_state, reward, done = env_step(episode, action)
        tr = Transition(state, plan, action, reward, next_state, done, episode.moving, omega_prev, episode.tag)
        self.pool.add(tr)
        return tr

    # -- learning

    def gradient_update_step(self, latest: Transition | None = None) -> LossReport:
        cfg = self.config
        if len(self.pool) < cfg.batch_size:
            return LossReport(alpha=self.temperature.alpha, skipped=True)
        report = LossReport()
        transitions = self.pool.sample(cfg.batch_size)
        self.last_batch = [(t.tag, t.reward, bool(t.done)) for t in transitions]
        batch = Batch.collate(transitions)
        alpha = self.temperature.alpha

        if cfg.rl_enabled:
            jq = q_loss(batch, self.nets, alpha, cfg.gamma, self.draw_noise(cfg.batch_size))
            S.backward(jq)
            S.adam_step(self.critic_params, self.opt_critic)
            report.j_q = float(jq.detach())

            self.critic_params.require_grad(False)
            try:
                jk, logp = planner_loss(
                    batch.states, self.nets.planner, self.nets.critic, alpha, self.draw_noise(cfg.batch_size)
                )
                S.backward(jk)
            finally:
                self.critic_params.require_grad(True)
            S.adam_step(self.planner_params, self.opt_planner)
            report.j_kappa = float(jk.detach())

        n_replay = cfg.reg_batch - (1 if latest is not None else 0)
        contexts = ([latest] if latest is not None else []) + self.pool.sample(max(n_replay, 0))
        fixed = torch.stack([t.state.fixed for t in contexts])
        moving = torch.stack([t.moving_orig for t in contexts])
        omega_prev = torch.stack([t.omega_prev for t in contexts])
        jr, info = reg_loss(
            fixed, moving, omega_prev, self.nets, cfg.tv_weight, self.draw_noise(len(contexts)), cfg.ncc_window
        )
        S.backward(jr)
        S.adam_step(self.planner_params, self.opt_planner)
        S.adam_step(self.actor_params, self.opt_actor)
        report.j_reg = float(jr.detach())
        report.ncc = float(info["ncc"])

        if cfg.rl_enabled:
            ja = temperature_loss(logp, self.temperature)
            S.backward(ja)
            S.adam_step(self.temperature.params, self.opt_alpha)
            report.alpha_loss = float(ja.detach())
            S.polyak_update(self.target_params, self.critic_params, cfg.tau)

        report.alpha = self.temperature.alpha
        self.updates += 1
        return report

    # -- evaluation

    def evaluate_policy(
        self,
        fixed: torch.Tensor,
        moving: torch.Tensor,
        horizon: int | None = None,
        labels: tuple[torch.Tensor, torch.Tensor] | None = None,
        seed: int = 0,
    ) -> "EvalResult":
        """Deterministic rollout (plan = tanh(mu)) scored at every step including step 0.

        Dice is measured on the K-means maps, or on ``labels`` = (fixed labels,
        moving labels) when given.
        """
        horizon = self.config.horizon if horizon is None else horizon
        ep, state = env_reset(fixed, moving, horizon, seed=seed)
        if labels is not None:
            lab_f, lab_m = labels
            k = int(max(lab_f.max(), lab_m.max())) + 1
            score = lambda omega: dice(lab_f, warp_labels(lab_m, omega, k), k)  # noqa: E731
        else:
            score = lambda omega: dice(ep.seg_fixed, warp_labels(ep.seg_moving, omega))  # noqa: E731
        res = EvalResult([score(ep.omega)], [float(ncc_local(ep.fixed, state.moving, self.config.ncc_window))], [ep.omega])
        while not ep.done:
            _, action = self.act(state)
            state, _, _ = env_step(ep, action)
            res.dice.append(score(ep.omega))
            res.ncc.append(float(ncc_local(ep.fixed, state.moving, self.config.ncc_window)))
            res.fields.append(ep.omega)
        return res


@dataclass
class EvalResult:
    dice: list[float]
    ncc: list[float]
    fields: list[torch.Tensor]

    @property
    def final_field(self) -> torch.Tensor:
        return self.fields[-1]


# ----------------------------------------------------------------------- driver


@dataclass
class StepRecord:
    global_step: int
    episode_step: int
    dice: float
    reward: float
    report: LossReport


class Trainer:
    """Runs the collect-then-update loop over a list of (fixed, moving) pairs.

    Pair selection, plan noise and replay sampling each use their own seeded
    generator so the whole run is a function of the config.
    """

    def __init__(self, config: TrainConfig, pairs: Sequence[tuple[torch.Tensor, torch.Tensor]]):
        if not pairs:
            raise S.ContractViolation("need at least one training pair")
        self.config = config
        self.pairs = list(pairs)
        self.agent = SPACAgent(config)
        self.pair_rng = np.random.default_rng(config.seed + 3)
        self.episode: EpisodeState | None = None
        self.pair_index = -1
        self.global_step = 0

    def _next_episode(self) -> None:
        self.pair_index = int(self.pair_rng.integers(0, len(self.pairs)))
        fixed, moving = self.pairs[self.pair_index]
        self.episode, _ = env_reset(fixed, moving, self.config.horizon, seed=self.config.seed, tag=self.pair_index)

    def step(self) -> StepRecord:
        if self.episode is None or self.episode.done:
            self._next_episode()
        tr = self.agent.rollout_step(self.episode)
        report = LossReport(alpha=self.agent.temperature.alpha, skipped=True)
        for _ in range(self.config.grad_steps):
            report = self.agent.gradient_update_step(latest=tr)
        self.global_step += 1
        return StepRecord(self.global_step, self.episode.t, self.episode.prev_dice, tr.reward, report)

    def run(self, steps: int, callback: Callable[[StepRecord], None] | None = None) -> None:
        for _ in range(steps):
            rec = self.step()
            if callback is not None:
                callback(rec)
