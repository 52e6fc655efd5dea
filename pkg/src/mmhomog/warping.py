"""Differentiable backward warping of images by homographies.

``warp_image(img, h)`` builds the output by sampling ``img`` at
``h^-1 (x, y)`` for every output pixel, so the moving image is brought into
the fixed frame. Sampling is bilinear; neighbours that fall outside the
source grid contribute zero.
"""

from __future__ import annotations

import numpy as np
import torch

from . import _accel
from .geometry import Homography, invert


def _as_batch_h(h, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(h, Homography):
        h = torch.from_numpy(np.array(h.m))
    if not torch.is_tensor(h):
        h = torch.as_tensor(np.asarray(h, dtype=np.float64))
    if like is not None:
        h = h.to(dtype=like.dtype, device=like.device)
    return h.reshape(-1, 3, 3)


def pixel_grid(height: int, width: int, dtype=torch.float64, device=None) -> torch.Tensor:
    """(2, H, W) tensor holding (x, y) at every pixel."""
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=dtype, device=device),
        torch.arange(width, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack([xs, ys])


def make_sampling_grid(h, out_size: tuple[int, int], dtype=None) -> torch.Tensor:
    """Source coordinates to sample for each output pixel: ``grid[n, :, y, x] = h^-1 (x, y)``.

    ``h`` is a ``Homography`` or an (N,3,3)/(3,3) tensor; returns (N,2,H,W).
    Gradients flow to the entries of ``h``.
    """
    h = _as_batch_h(h)
    if dtype is not None:
        h = h.to(dtype)
    height, width = out_size
    hinv = torch.linalg.inv(h)
    base = pixel_grid(height, width, dtype=h.dtype, device=h.device).reshape(2, -1)
    hom = torch.cat([base, torch.ones_like(base[:1])], dim=0)
    src = hinv @ hom  # (N, 3, H*W)
    grid = src[:, :2] / src[:, 2:3]
    return grid.reshape(-1, 2, height, width)


def bilinear_sample(img: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Sample ``img`` (N,C,H,W) at ``grid`` (N,2,Ho,Wo) holding (x, y) pixel coordinates.

    Each of the four neighbours outside ``[0, W-1] x [0, H-1]`` is treated as
    zero, so a coordinate well outside the image yields 0 and the result stays
    a convex combination of in-range values (plus zeros).
    """
    squeeze = img.dim() == 3
    if squeeze:
        img = img[None]
        grid = grid[None] if grid.dim() == 3 else grid
    n, c, hh, ww = img.shape
    grid = grid.to(img.dtype)
    if grid.shape[0] != n:
        grid = grid.expand(n, -1, -1, -1)
    ho, wo = grid.shape[-2:]
    x = grid[:, 0].reshape(n, -1)
    y = grid[:, 1].reshape(n, -1)
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    flat = img.reshape(n, c, hh * ww)
    out = None
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < ww) & (yi >= 0) & (yi < hh)
            idx = (yi.clamp(0, hh - 1) * ww + xi.clamp(0, ww - 1))[:, None, :].expand(n, c, -1)
            vals = flat.gather(2, idx)
            term = vals * (wx * wy * valid.to(img.dtype))[:, None, :]
            out = term if out is None else out + term
    out = out.reshape(n, c, ho, wo)
    return out[0] if squeeze else out


def warp_image(img: torch.Tensor, h, out_size: tuple[int, int] | None = None) -> torch.Tensor:
    """Warp ``img`` (N,C,H,W) or (C,H,W) into the frame defined by ``h``."""
    size = tuple(out_size) if out_size is not None else tuple(img.shape[-2:])
    grid = make_sampling_grid(_as_batch_h(h, like=img), size)
    return bilinear_sample(img, grid if img.dim() == 4 else grid[0])


def warp_image_np(img: np.ndarray, h: Homography, out_size: tuple[int, int] | None = None) -> np.ndarray:
    """Non-differentiable float64 warp of a (C,H,W) array (numba kernel when available)."""
    img = np.asarray(img, dtype=np.float64)
    height, width = out_size if out_size is not None else img.shape[-2:]
    return _accel.sample_projective(img, invert(h).m, height, width)


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(data_range**2 / mse)
