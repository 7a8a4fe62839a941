"""Step-wise registration environment.

An episode starts from an image pair, clusters both images into three
intensity classes once, and then accepts displacement-field actions. Each
action is composed into the accumulated field, the original moving image is
re-warped with that field, and the reward is the change in label overlap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .substrate import ContractViolation
from .warp import compose_fields, grid_sample_bilinear

N_LABELS = 3


def kmeans_segment(image, k: int = N_LABELS, seed: int = 0, max_rounds: int = 100) -> torch.Tensor:
    """Cluster pixel intensities with Lloyd's algorithm.

    Centers start at the (2i+1)/2k intensity quantiles and labels are numbered
    by ascending final center, so two images with the same intensity classes
    get the same label ids. Exact distance ties go to the darker center, which
    makes the result independent of ``seed``; the argument is kept for API
    symmetry with the other seeded operations.

    When one intensity covers most pixels the quantile centers coincide; the
    centers then start at the same quantiles of the distinct intensities.
    """
    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.size == 0:
        raise ContractViolation("cannot segment an empty image")
    shape = arr.shape[-2:]
    values = arr.reshape(-1)

    qs = [(2 * i + 1) / (2 * k) for i in range(k)]
    centers = np.unique(np.quantile(values, qs))
    if len(centers) < k:
        # a dominant intensity (e.g. a flat background) swallows several quantiles;
        # fall back to quantiles of the distinct values, or to the values themselves
        distinct = np.unique(values)
        centers = np.quantile(distinct, qs) if len(distinct) >= k else distinct
    labels = np.abs(values[:, None] - centers[None, :]).argmin(axis=1)
    for _ in range(max_rounds):
        for c in range(len(centers)):
            members = values[labels == c]
            if members.size:
                centers[c] = members.mean()
        new = np.abs(values[:, None] - centers[None, :]).argmin(axis=1)
        if np.array_equal(new, labels):
            break
        labels = new

    used = np.unique(labels)
    order = used[np.argsort(centers[used], kind="stable")]
    remap = np.zeros(len(centers), dtype=np.int64)
    remap[order] = np.arange(len(order))
    return torch.from_numpy(remap[labels].reshape(shape))


def dice(u1: torch.Tensor, u2: torch.Tensor, k: int = N_LABELS) -> float:
    """Uniform mean over labels of 2|A & B| / (|A| + |B|); absent-in-both labels score 1."""
    if u1.shape != u2.shape:
        raise ContractViolation(f"label maps differ in shape: {tuple(u1.shape)} vs {tuple(u2.shape)}")
    a = u1.reshape(-1)
    b = u2.reshape(-1)
    total = 0.0
    for label in range(k):
        in_a = a == label
        in_b = b == label
        size = int(in_a.sum()) + int(in_b.sum())
        if size == 0:
            total += 1.0
        else:
            total += 2.0 * int((in_a & in_b).sum()) / size
    return total / k


def warp_labels(u: torch.Tensor, field: torch.Tensor, k: int = N_LABELS) -> torch.Tensor:
    """Warp a label map through one-hot bilinear sampling and a per-pixel argmax."""
    if u.shape[-2:] != field.shape[-2:]:
        raise ContractViolation(f"label map {tuple(u.shape)} does not match field {tuple(field.shape)}")
    onehot = torch.nn.functional.one_hot(u.long(), k).permute(2, 0, 1).to(field.dtype)
    warped = grid_sample_bilinear(onehot, field.detach())
    return warped.argmax(dim=0)


@dataclass
class State:
    fixed: torch.Tensor
    moving: torch.Tensor

    def tensor(self) -> torch.Tensor:
        """The ``2 x H x W`` network input (fixed first)."""
        return torch.cat([self.fixed, self.moving], dim=0)


@dataclass
class EpisodeState:
    fixed: torch.Tensor
    moving: torch.Tensor
    omega: torch.Tensor
    t: int
    horizon: int
    seg_fixed: torch.Tensor
    seg_moving: torch.Tensor
    prev_dice: float
    initial_dice: float
    dice_history: list[float] = field(default_factory=list)
    tag: int = -1

    @property
    def done(self) -> bool:
        return self.t >= self.horizon

    def state(self) -> State:
        return State(self.fixed, grid_sample_bilinear(self.moving, self.omega))


def _check_image(img: torch.Tensor) -> torch.Tensor:
    if img.dim() == 2:
        img = img.unsqueeze(0)
    if img.dim() != 3 or img.shape[0] != 1:
        raise ContractViolation(f"expected a 1 x H x W image, got {tuple(img.shape)}")
    return img.detach().to(torch.float32)


def env_reset(
    fixed: torch.Tensor, moving: torch.Tensor, horizon: int, seed: int = 0, tag: int = -1
) -> tuple[EpisodeState, State]:
    fixed = _check_image(fixed)
    moving = _check_image(moving)
    if fixed.shape != moving.shape:
        raise ContractViolation(f"fixed {tuple(fixed.shape)} and moving {tuple(moving.shape)} differ")
    if horizon < 1:
        raise ContractViolation(f"horizon must be >= 1, got {horizon}")
    seg_f = kmeans_segment(fixed, seed=seed)
    seg_m = kmeans_segment(moving, seed=seed)
    d0 = dice(seg_f, seg_m)
    ep = EpisodeState(
        fixed=fixed,
        moving=moving,
        omega=torch.zeros(2, *fixed.shape[-2:]),
        t=0,
        horizon=horizon,
        seg_fixed=seg_f,
        seg_moving=seg_m,
        prev_dice=d0,
        initial_dice=d0,
        dice_history=[d0],
        tag=tag,
    )
    return ep, State(fixed, moving)


def env_step(ep: EpisodeState, action: torch.Tensor) -> tuple[State, float, bool]:
    """Apply one action in place on ``ep``; returns (next state, reward, done)."""
    if ep.done:
        raise ContractViolation("episode already finished")
    action = action.detach()
    if action.shape != ep.omega.shape:
        raise ContractViolation(f"action {tuple(action.shape)} does not match field {tuple(ep.omega.shape)}")
    ep.omega = compose_fields(action, ep.omega)
    ep.t += 1
    current = dice(ep.seg_fixed, warp_labels(ep.seg_moving, ep.omega))
    reward = current - ep.prev_dice
    ep.prev_dice = current
    ep.dice_history.append(current)
    return ep.state(), reward, ep.done
