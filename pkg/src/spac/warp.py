"""Displacement-field geometry: bilinear warping, field composition, local NCC
and the total-variation smoothness penalty.

Fields are ``2 x H x W`` tensors in pixel units; channel 0 is the x (column)
offset and channel 1 the y (row) offset. A batch axis in front is accepted
everywhere.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .substrate import ContractViolation

NCC_WINDOW = 9
NCC_EPS = 1e-5


def _as_batch(x: torch.Tensor, what: str) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ContractViolation(f"{what} must be C x H x W or N x C x H x W, got {tuple(x.shape)}")


def identity_grid(h: int, w: int, dtype=torch.float32) -> torch.Tensor:
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij"
    )
    return torch.stack([xs, ys])


def grid_sample_bilinear(image: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    """Sample ``image`` at ``p + field(p)`` with bilinear weights.

    Coordinates are clamped to the image, which replicates the border. A zero
    field reproduces the input bit for bit.
    """
    img, img_single = _as_batch(image, "image")
    fld, fld_single = _as_batch(field, "field")
    squeeze = img_single and fld_single
    n, c, h, w = img.shape
    if fld.shape[1] != 2 or fld.shape[2:] != (h, w):
        raise ContractViolation(f"field {tuple(field.shape)} does not match image {tuple(image.shape)}")
    if fld.shape[0] != n:
        if fld.shape[0] == 1:
            fld = fld.expand(n, -1, -1, -1)
        elif n == 1:
            img = img.expand(fld.shape[0], -1, -1, -1)
            n = fld.shape[0]
        else:
            raise ContractViolation("image and field batch sizes differ")
    if not torch.isfinite(fld).all():
        raise ContractViolation("field contains non-finite entries")

    grid = identity_grid(h, w, dtype=fld.dtype)
    x = (grid[0] + fld[:, 0]).clamp(0, w - 1)
    y = (grid[1] + fld[:, 1]).clamp(0, h - 1)
    x0 = x.detach().floor()
    y0 = y.detach().floor()
    wx = x - x0
    wy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = img.reshape(n, c, h * w)

    def gather(yi: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
        idx = (yi * w + xi).reshape(n, 1, h * w).expand(n, c, h * w)
        return flat.gather(2, idx).reshape(n, c, h, w)

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    out = (
        gather(y0, x0) * ((1 - wx) * (1 - wy))
        + gather(y0, x1) * (wx * (1 - wy))
        + gather(y1, x0) * ((1 - wx) * wy)
        + gather(y1, x1) * (wx * wy)
    )
    return out[0] if squeeze else out


def compose_fields(action: torch.Tensor, prev: torch.Tensor) -> torch.Tensor:
    """Accumulate one step: ``prev + action o prev``.

    The action field is resampled, as a two-channel image, at the locations
    displaced by ``prev``.
    """
    if action.shape != prev.shape:
        raise ContractViolation(f"field shapes differ: {tuple(action.shape)} vs {tuple(prev.shape)}")
    return prev + grid_sample_bilinear(action, prev)


def compose_sequence(actions, shape=None) -> torch.Tensor:
    """Fold :func:`compose_fields` over ``actions`` starting from the zero field."""
    actions = list(actions)
    if not actions:
        if shape is None:
            raise ContractViolation("need a shape to build the zero field")
        return torch.zeros(shape)
    omega = torch.zeros_like(actions[0])
    for a in actions:
        omega = compose_fields(a, omega)
    return omega


def _window_sums(x: torch.Tensor, window: int) -> torch.Tensor:
    kernel = torch.ones(1, 1, window, window, dtype=x.dtype)
    return F.conv2d(x, kernel, padding=window // 2)


def _as_image_batch(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x.unsqueeze(1) if x.shape[0] != 1 else x.unsqueeze(0)
    if x.dim() == 4 and x.shape[1] == 1:
        return x
    raise ContractViolation(f"expected single-channel image(s), got {tuple(x.shape)}")


def ncc_map(fixed: torch.Tensor, warped: torch.Tensor, window: int = NCC_WINDOW, eps: float = NCC_EPS) -> torch.Tensor:
    """Per-pixel squared local correlation, shape ``N x 1 x H x W``.

    Window statistics only count pixels inside the image, so the measure is
    invariant to affine intensity changes up to the border as well.
    """
    f = _as_image_batch(fixed)
    m = _as_image_batch(warped)
    if f.shape[-2:] != m.shape[-2:]:
        raise ContractViolation(f"image sizes differ: {tuple(f.shape)} vs {tuple(m.shape)}")
    h, w = f.shape[-2:]
    if window % 2 == 0 or window < 3 or window > min(h, w):
        raise ContractViolation(f"window must be odd and within [3, {min(h, w)}], got {window}")
    if f.shape[0] != m.shape[0]:
        f, m = torch.broadcast_tensors(f, m)
    count = _window_sums(torch.ones(1, 1, h, w, dtype=f.dtype), window)
    sf = _window_sums(f, window)
    sm = _window_sums(m, window)
    sff = _window_sums(f * f, window)
    smm = _window_sums(m * m, window)
    sfm = _window_sums(f * m, window)
    cross = sfm - sf * sm / count
    var_f = sff - sf * sf / count
    var_m = smm - sm * sm / count
    return cross * cross / (var_f * var_m + eps)


def ncc_local(fixed: torch.Tensor, warped: torch.Tensor, window: int = NCC_WINDOW, eps: float = NCC_EPS) -> torch.Tensor:
    """Mean squared local correlation in [0, 1]; higher is better aligned."""
    return ncc_map(fixed, warped, window, eps).mean()


def tv_penalty(field: torch.Tensor) -> torch.Tensor:
    """Mean of the squared forward differences of every channel along both axes."""
    fld, _ = _as_batch(field, "field")
    dx = fld[..., :, 1:] - fld[..., :, :-1]
    dy = fld[..., 1:, :] - fld[..., :-1, :]
    count = dx[0].numel() + dy[0].numel()
    if count == 0:
        return fld.sum() * 0
    per_sample = ((dx * dx).flatten(1).sum(1) + (dy * dy).flatten(1).sum(1)) / count
    return per_sample.mean()


def field_magnitude(field: torch.Tensor) -> torch.Tensor:
    return field.detach().pow(2).sum(dim=-3).sqrt()
