"""Synthetic glyph corpus and perturbed registration pairs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .warp import grid_sample_bilinear, identity_grid

SPLITS = {"train": 0, "eval": 1}


@dataclass
class DatasetSpec:
    source: str = "synthetic"
    idx_path: str = ""
    image_size: int = 28
    count: int = 500
    rotation_deg: float = 45.0
    scale_min: float = 0.7
    scale_max: float = 1.3
    elastic_sigma: float = 4.0
    elastic_amplitude: float = 6.0
    background: float = 0.12
    pairing: str = "self"
    seed: int = 0


def split_seed(spec_seed: int, split: str, index: int) -> np.random.SeedSequence:
    """Independent entropy per (split, index); train and eval never share a stream."""
    return np.random.SeedSequence([SPLITS[split], spec_seed, index])


def synthetic_glyph(rng: np.random.Generator, size: int = 28, background: float = 0.12) -> torch.Tensor:
    """A blurred stroke-and-blob drawing on a faint smooth textured background."""
    up = 4
    big = size * up
    canvas = np.zeros((big, big))
    yy, xx = np.mgrid[0:big, 0:big].astype(np.float64)
    margin = 0.22 * big
    n_strokes = rng.integers(2, 5)
    pts = rng.uniform(margin, big - margin, size=(n_strokes + 1, 2))
    width = rng.uniform(1.2, 2.0) * up
    for a, b in zip(pts[:-1], pts[1:]):
        d = b - a
        length = float(np.hypot(*d)) or 1.0
        t = np.clip(((xx - a[0]) * d[0] + (yy - a[1]) * d[1]) / length**2, 0.0, 1.0)
        dist = np.hypot(xx - (a[0] + t * d[0]), yy - (a[1] + t * d[1]))
        canvas = np.maximum(canvas, (dist < width).astype(np.float64))
    for _ in range(rng.integers(0, 3)):
        c = rng.uniform(margin, big - margin, size=2)
        r = rng.uniform(1.5, 3.0) * up
        canvas = np.maximum(canvas, 0.6 * (np.hypot(xx - c[0], yy - c[1]) < r))
    glyph = canvas.reshape(size, up, size, up).mean(axis=(1, 3))
    glyph = gaussian_filter(glyph, 0.6)
    if background > 0:
        tex = gaussian_filter(rng.standard_normal((size, size)), 2.0)
        tex = (tex - tex.min()) / (np.ptp(tex) + 1e-12)
        glyph = glyph + background * tex * (1.0 - glyph)
    glyph = glyph / max(glyph.max(), 1e-12)
    return torch.from_numpy(np.clip(glyph, 0.0, 1.0).astype(np.float32)).unsqueeze(0)


def random_field(
    rng: np.random.Generator,
    size: int,
    rotation_deg: float,
    scale_min: float,
    scale_max: float,
    elastic_sigma: float,
    elastic_amplitude: float,
) -> torch.Tensor:
    """Displacement field of a random rotation/scale about the center plus smooth elastic noise."""
    theta = math.radians(rng.uniform(-rotation_deg, rotation_deg)) if rotation_deg > 0 else 0.0
    s = rng.uniform(scale_min, scale_max) if scale_max > scale_min else scale_min
    grid = identity_grid(size, size, dtype=torch.float64)
    c = (size - 1) / 2.0
    x, y = grid[0] - c, grid[1] - c
    cos, sin = math.cos(theta), math.sin(theta)
    src_x = (cos * x - sin * y) / s
    src_y = (sin * x + cos * y) / s
    field = torch.stack([src_x - x, src_y - y])
    if elastic_amplitude > 0:
        noise = rng.standard_normal((2, size, size))
        smooth = np.stack([gaussian_filter(n, elastic_sigma) for n in noise])
        peak = np.abs(smooth).max()
        if peak > 0:
            amp = rng.uniform(0.0, elastic_amplitude)
            field = field + torch.from_numpy(smooth / peak * amp)
    return field.to(torch.float32)


def gen_synthetic_pair(base: torch.Tensor, seed: int | np.random.SeedSequence, spec: DatasetSpec) -> tuple[torch.Tensor, torch.Tensor]:
    rng = np.random.default_rng(seed)
    size = base.shape[-1]
    field = random_field(
        rng, size, spec.rotation_deg, spec.scale_min, spec.scale_max, spec.elastic_sigma, spec.elastic_amplitude
    )
    moving = grid_sample_bilinear(base, field).clamp(0.0, 1.0)
    return base.clone(), moving


def make_pairs(spec: DatasetSpec, split: str, count: int | None = None, bases: list[torch.Tensor] | None = None):
    """Deterministic list of (fixed, moving) pairs for one split."""
    count = spec.count if count is None else count
    pairs = []
    for i in range(count):
        ss = split_seed(spec.seed, split, i)
        glyph_seed, pair_seed, partner_seed = ss.spawn(3)
        if bases:
            rng = np.random.default_rng(glyph_seed)
            base = bases[int(rng.integers(0, len(bases)))]
            if spec.pairing == "cross":
                partner = bases[int(np.random.default_rng(partner_seed).integers(0, len(bases)))]
                _, moving = gen_synthetic_pair(partner, pair_seed, spec)
                pairs.append((base.clone(), moving))
                continue
        else:
            base = synthetic_glyph(np.random.default_rng(glyph_seed), spec.image_size, spec.background)
        pairs.append(gen_synthetic_pair(base, pair_seed, spec))
    return pairs
