"""Image operators shared by degradation, augmentation and the Retinex losses.

Images are float tensors in [0, 1] shaped ``C x H x W`` or batched
``B x C x H x W`` with ``C`` in {1, 3}. The statistics used as losses
(:func:`ssim`, :func:`total_variation`, :func:`channel_max`) are
differentiable; :func:`hist_equalize` is a non-differentiable target.
"""
from __future__ import annotations

from dataclasses import dataclass
import logging
import math
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

from .const import GRAY_WEIGHTS, HIST_BINS, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW
from .errors import InvalidArgumentError

_LOGGER = logging.getLogger(__name__)

ADJUST_MODES = ("brightness", "contrast", "saturation", "hue")


@dataclass(frozen=True)
class EraseParams:
    """Random erasing settings."""

    probability: float = 0.5
    area_range: tuple[float, float] = (0.02, 0.4)
    aspect_range: tuple[float, float] = (0.3, 3.3)
    attempts: int = 10


def _as_batch(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    """Return a 4-d view of ``x`` and whether it was unbatched."""
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise InvalidArgumentError(f"expected C x H x W or B x C x H x W, got shape {tuple(x.shape)}")


def _restore(x: torch.Tensor, unbatched: bool) -> torch.Tensor:
    return x.squeeze(0) if unbatched else x


def _gaussian_window(size: int, sigma: float, dtype: torch.dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return g


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Structural similarity of two images, averaged over windows and channels.

    Uses an 11x11 Gaussian window (sigma 1.5) without padding, with
    K1=0.01, K2=0.03 and a dynamic range of 1. Images smaller than the
    window use a window truncated to the image size.
    """
    if a.shape != b.shape:
        raise InvalidArgumentError(f"ssim shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    a4, _ = _as_batch(a)
    b4, _ = _as_batch(b)
    channels = a4.shape[1]
    win_h = min(SSIM_WINDOW, a4.shape[2])
    win_w = min(SSIM_WINDOW, a4.shape[3])
    g_h = _gaussian_window(win_h, SSIM_SIGMA, a4.dtype, a4.device)
    g_w = _gaussian_window(win_w, SSIM_SIGMA, a4.dtype, a4.device)
    window = torch.outer(g_h, g_w).expand(channels, 1, win_h, win_w).contiguous()

    def blur(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(t, window, groups=channels)

    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu_a = blur(a4)
    mu_b = blur(b4)
    var_a = blur(a4 * a4) - mu_a**2
    var_b = blur(b4 * b4) - mu_b**2
    cov = blur(a4 * b4) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return ssim_map.mean()


@torch.no_grad()
def hist_equalize(x: torch.Tensor) -> torch.Tensor:
    """Equalize a single-channel image with a 256-bin inclusive CDF.

    Each pixel maps to ``P[X <= v]`` of its own bin, so constant images map
    to 1.0. Batched inputs are equalized per image.
    """
    x4, unbatched = _as_batch(x)
    if x4.shape[1] != 1:
        raise InvalidArgumentError(f"hist_equalize expects 1 channel, got {x4.shape[1]}")
    bins = (x4.clamp(0.0, 1.0) * (HIST_BINS - 1)).round().long()
    flat = bins.flatten(start_dim=1)
    out = torch.empty_like(x4).flatten(start_dim=1)
    for i, row in enumerate(flat):
        counts = torch.bincount(row, minlength=HIST_BINS).to(x4.dtype)
        cdf = counts.cumsum(0) / row.numel()
        out[i] = cdf[row]
    return _restore(out.view_as(x4), unbatched)


def _forward_differences(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Return horizontal and vertical forward differences of a 4-d tensor."""
    return x[..., :, 1:] - x[..., :, :-1], x[..., 1:, :] - x[..., :-1, :]


def total_variation(x: torch.Tensor) -> torch.Tensor:
    """Mean absolute forward difference over all horizontal and vertical terms."""
    x4, _ = _as_batch(x)
    dx, dy = _forward_differences(x4)
    count = dx.numel() + dy.numel()
    if count == 0:
        return x4.sum() * 0.0
    return (dx.abs().sum() + dy.abs().sum()) / count


def weighted_total_variation(x: torch.Tensor, guide: torch.Tensor) -> torch.Tensor:
    """Total variation of ``x`` with each term weighted by ``exp(-|grad guide|)``."""
    x4, _ = _as_batch(x)
    g4, _ = _as_batch(guide)
    dx, dy = _forward_differences(x4)
    gx, gy = _forward_differences(g4)
    count = dx.numel() + dy.numel()
    if count == 0:
        return x4.sum() * 0.0
    weighted = (dx * torch.exp(-gx.abs())).abs().sum() + (dy * torch.exp(-gy.abs())).abs().sum()
    return weighted / count


def channel_max(x: torch.Tensor) -> torch.Tensor:
    """Per-pixel maximum over the three colour channels."""
    x4, unbatched = _as_batch(x)
    if x4.shape[1] != 3:
        raise InvalidArgumentError(f"channel_max expects 3 channels, got {x4.shape[1]}")
    return _restore(x4.amax(dim=1, keepdim=True), unbatched)


def rgb_to_gray(x: torch.Tensor) -> torch.Tensor:
    """Luma of an RGB image as a single channel."""
    r, g, b = x.unbind(dim=-3)
    wr, wg, wb = GRAY_WEIGHTS
    return (wr * r + wg * g + wb * b).unsqueeze(-3)


def adjust(x: torch.Tensor, mode: str, value: float) -> torch.Tensor:
    """Apply one degradation factor.

    ``brightness``, ``contrast`` and ``saturation`` use the factor
    ``value / 100`` (blend towards black, the grey mean and per-pixel grey
    respectively). ``hue`` rotates the HSV hue channel by ``value`` degrees;
    the caller supplies the sign.
    """
    if mode not in ADJUST_MODES:
        raise InvalidArgumentError(f"Unknown adjust mode: {mode}")
    if mode == "hue":
        turns = math.remainder(value / 360.0, 1.0)
        if x.shape[-3] == 1 or turns == 0.0:
            return x
        return TF.adjust_hue(x, max(-0.5, min(0.5, turns)))
    if value <= 0:
        raise InvalidArgumentError(f"{mode} value must be > 0, got {value}")
    factor = value / 100.0
    if mode == "brightness":
        return (factor * x).clamp(0.0, 1.0)
    gray = rgb_to_gray(x) if x.shape[-3] == 3 else x
    if mode == "contrast":
        mean = gray.mean(dim=(-3, -2, -1), keepdim=True)
        return (mean + factor * (x - mean)).clamp(0.0, 1.0)
    if x.shape[-3] == 1:
        return x
    return (gray + factor * (x - gray)).clamp(0.0, 1.0)


def random_erase(
    x: torch.Tensor, generator: torch.Generator, params: EraseParams = EraseParams()
) -> tuple[torch.Tensor, torch.Tensor]:
    """Fill one random rectangle with uniform noise.

    Returns the image and an ``H x W`` boolean mask that is true on the erased
    pixels. The rectangle's area fraction is always inside
    ``params.area_range``; if no rectangle fits after ``params.attempts``
    draws, the image is returned unchanged with an empty mask.
    """
    height, width = x.shape[-2:]
    mask = torch.zeros(height, width, dtype=torch.bool)
    if params.probability <= 0.0:
        return x, mask
    if torch.rand(1, generator=generator).item() >= params.probability:
        return x, mask

    area = height * width
    lo_area, hi_area = params.area_range
    log_lo, log_hi = math.log(params.aspect_range[0]), math.log(params.aspect_range[1])
    for _ in range(params.attempts):
        draws = torch.rand(2, generator=generator, dtype=torch.float64).tolist()
        target = area * (lo_area + (hi_area - lo_area) * draws[0])
        aspect = math.exp(log_lo + (log_hi - log_lo) * draws[1])
        h = int(round(math.sqrt(target * aspect)))
        w = int(round(math.sqrt(target / aspect)))
        if not (0 < h <= height and 0 < w <= width):
            continue
        if not lo_area <= h * w / area <= hi_area:
            continue
        top = int(torch.randint(0, height - h + 1, (1,), generator=generator).item())
        left = int(torch.randint(0, width - w + 1, (1,), generator=generator).item())
        noise = torch.rand((*x.shape[:-2], h, w), generator=generator, dtype=x.dtype)
        out = x.clone()
        out[..., top : top + h, left : left + w] = noise.to(x.device)
        mask[top : top + h, left : left + w] = True
        return out, mask
    _LOGGER.debug("random_erase found no rectangle in %d attempts", params.attempts)
    return x, mask


def load_image(path: str | Path) -> torch.Tensor:
    """Load an 8-bit RGB image as a float32 ``3 x H x W`` tensor in [0, 1]."""
    with PILImage.open(path) as img:
        array = np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    return torch.from_numpy(array).permute(2, 0, 1).to(torch.float32) / 255.0


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """Round a [0, 1] image to an ``H x W x C`` uint8 array."""
    array = (x.detach().cpu().to(torch.float64).clamp(0.0, 1.0) * 255.0).round()
    return array.to(torch.uint8).permute(1, 2, 0).numpy()


def save_image(x: torch.Tensor, path: str | Path) -> None:
    """Save a ``C x H x W`` image, rounding to the nearest 8-bit value."""
    array = to_uint8(x)
    mode = "L" if array.shape[2] == 1 else "RGB"
    PILImage.fromarray(array.squeeze(2) if mode == "L" else array, mode=mode).save(path)
