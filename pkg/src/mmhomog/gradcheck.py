"""Finite-difference checks of every differentiable path, in float64.

Each check returns a ``CheckRow``; ``run_all`` gathers them for the CLI.
Relative error is ``||g_autograd - g_fd|| / ||g_fd||`` (Euclidean norms).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .geometry import corner_points, dlt_solve_torch
from .losses import bt_loss, gbt_loss
from .networks import AltModel, NetworkConfig
from .warping import warp_image


@dataclass
class CheckRow:
    name: str
    rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.rel_err) and self.rel_err < self.tol)


def central_difference(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, step: float) -> torch.Tensor:
    """Jacobian of ``fn`` at ``x`` by central differences, shape ``fn(x).shape + x.shape``."""
    x = x.detach().clone()
    flat = x.reshape(-1)
    out_shape = fn(x).shape
    jac = torch.zeros(out_shape.numel(), flat.numel(), dtype=x.dtype)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + step
            fp = fn(x).reshape(-1)
            flat[i] = orig - step
            fm = fn(x).reshape(-1)
            flat[i] = orig
            jac[:, i] = (fp - fm) / (2 * step)
    return jac.reshape(*out_shape, *x.shape)


def stencil_mean_gradient(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, step: float, points: int = 128) -> torch.Tensor:
    """Mean of the autograd partial over each central-difference stencil.

    For a continuous, piecewise-smooth scalar ``fn`` the central quotient
    ``(f(x + h e_i) - f(x - h e_i)) / 2h`` equals the average of ``df/dx_i``
    over ``[x_i - h, x_i + h]`` exactly, kinks included. The average is taken
    with the midpoint rule on ``points`` nodes.
    """
    x = x.detach().clone()
    flat = x.reshape(-1)
    nodes = (torch.arange(points, dtype=x.dtype) + 0.5) / points * 2 * step - step
    out = torch.zeros_like(flat)
    for i in range(flat.numel()):
        acc = 0.0
        for t in nodes:
            xi = x.clone()
            xi.reshape(-1)[i] += t
            xi.requires_grad_(True)
            (g,) = torch.autograd.grad(fn(xi), xi)
            acc += float(g.reshape(-1)[i])
        out[i] = acc / points
    return out.reshape(x.shape)


def autograd_jacobian(fn, x: torch.Tensor) -> torch.Tensor:
    return torch.autograd.functional.jacobian(fn, x.detach().clone())


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    den = float(b.norm())
    return float((a - b).norm()) / (den if den > 0 else 1.0)


def _gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def smooth_image(size: int, channels: int = 1, seed: int = 0) -> torch.Tensor:
    """Band-limited random image in [0, 1], (1,C,size,size) float64."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size] / size
    img = np.zeros((channels, size, size))
    for c in range(channels):
        for _ in range(6):
            fx, fy = rng.uniform(-3, 3, 2)
            img[c] += rng.uniform(0.2, 1.0) * np.sin(2 * np.pi * (fx * xs + fy * ys) + rng.uniform(0, 2 * np.pi))
        img[c] = (img[c] - img[c].min()) / (np.ptp(img[c]) + 1e-12)
    return torch.from_numpy(img)[None]


def check_bt_loss(seed: int = 0, tol: float = 1e-4) -> list[CheckRow]:
    g = _gen(seed)
    a = torch.randn(4, 3, generator=g, dtype=torch.float64)
    b = torch.randn(4, 3, generator=g, dtype=torch.float64)
    rows = []
    for which, x, fn in (
        ("a", a, lambda t: bt_loss(t, b)),
        ("b", b, lambda t: bt_loss(a, t)),
    ):
        rows.append(CheckRow(f"bt_loss d/d{which}", rel_err(autograd_jacobian(fn, x), central_difference(fn, x, 1e-6)), tol))
    return rows


def check_gbt_loss(seed: int = 0, tol: float = 1e-4) -> list[CheckRow]:
    g = _gen(seed)
    a = torch.randn(4, 3, 4, 4, generator=g, dtype=torch.float64)
    b = torch.randn(4, 3, 4, 4, generator=g, dtype=torch.float64)
    rows = []
    for which, x, fn in (
        ("a", a, lambda t: gbt_loss(t, b)),
        ("b", b, lambda t: gbt_loss(a, t)),
    ):
        rows.append(CheckRow(f"gbt_loss d/d{which}", rel_err(autograd_jacobian(fn, x), central_difference(fn, x, 1e-6)), tol))
    return rows


def check_dlt(seed: int = 0, size: int = 128, tol: float = 1e-4) -> CheckRow:
    g = _gen(seed)
    corners = torch.from_numpy(corner_points(size, size))
    o = (torch.rand(1, 4, 2, generator=g, dtype=torch.float64) * 2 - 1) * size / 4
    fn = lambda t: dlt_solve_torch(corners, t)[0]
    return CheckRow("dlt_solve d/doffsets", rel_err(autograd_jacobian(fn, o), central_difference(fn, o, 1e-5)), tol)


# Bilinear sampling with zero padding is only piecewise smooth: a sample that
# crosses a pixel line or the image border inside the stencil changes slope.
# At this step some of the size**2 samples always do, so the quotient is
# compared with the stencil-averaged autograd partial, not the point value.
WARP_STEP = 1e-3


def check_warp(size: int, seed: int = 0, tol: float = 1e-3) -> CheckRow:
    g = _gen(seed)
    img = smooth_image(size, seed=seed)
    corners = torch.from_numpy(corner_points(size, size))
    o = (torch.rand(1, 4, 2, generator=g, dtype=torch.float64) * 2 - 1) * size / 8
    fn = lambda t: warp_image(img, dlt_solve_torch(corners, t)).mean()
    fd = central_difference(fn, o, WARP_STEP)
    return CheckRow(f"mean(warp) d/doffsets {size}x{size}", rel_err(stencil_mean_gradient(fn, o, WARP_STEP), fd), tol)


def check_warp_pointwise(size: int, seed: int = 0, tol: float = 1e-3) -> CheckRow:
    """Pointwise gradient against a step small enough to stay inside one cell."""
    g = _gen(seed)
    img = smooth_image(size, seed=seed)
    corners = torch.from_numpy(corner_points(size, size))
    o = (torch.rand(1, 4, 2, generator=g, dtype=torch.float64) * 2 - 1) * size / 8
    fn = lambda t: warp_image(img, dlt_solve_torch(corners, t)).mean()
    return CheckRow(f"mean(warp) d/doffsets {size}x{size} pointwise", rel_err(autograd_jacobian(fn, o), central_difference(fn, o, 1e-6)), tol)


def _toy_model(size: int, seed: int) -> AltModel:
    torch.manual_seed(seed)
    return AltModel(NetworkConfig(image_size=[size, size], base_width=8, registration_width=4)).double()


def check_full_chain(size: int, seed: int = 0, tol: float = 1e-3) -> CheckRow:
    """offsets -> DLT -> warp -> encoder -> spatial Barlow Twins."""
    g = _gen(seed)
    model = _toy_model(size, seed)
    moving = smooth_image(size, seed=seed + 1).expand(2, -1, -1, -1).contiguous()
    fixed = smooth_image(size, seed=seed + 2).expand(2, -1, -1, -1).contiguous()
    corners = torch.from_numpy(corner_points(size, size))
    o = (torch.rand(2, 4, 2, generator=g, dtype=torch.float64) * 2 - 1) * size / 8
    with torch.no_grad():
        fb = model.encoder(fixed)

    def fn(t):
        return gbt_loss(model.encoder(warp_image(moving, dlt_solve_torch(corners, t))), fb)

    return CheckRow(
        f"offsets->dlt->warp->encoder->gbt {size}x{size}",
        # ReLU and bilinear kinks sit within 1e-3 px of some sample, so a wide
        # step straddles them; 1e-6 keeps every activation on one side
        rel_err(autograd_jacobian(fn, o), central_difference(fn, o, 1e-6)),
        tol,
    )


def check_frozen_groups(size: int = 16, seed: int = 0) -> list[CheckRow]:
    """Gradient mass landing in frozen roles (must be exactly zero)."""
    from .networks import set_requires_grad

    model = _toy_model(size, seed)
    mv = smooth_image(size, seed=1).expand(3, -1, -1, -1).contiguous()
    fx = smooth_image(size, seed=2).expand(3, -1, -1, -1).contiguous()
    rows = []

    model.zero_grad(set_to_none=True)
    set_requires_grad(model.encoder, False)
    set_requires_grad(model.projector, False)
    offs = model.registration(mv, fx)[-1] + 0.5
    gbt_loss(model.encoder(model.warp(mv, offs)), model.encoder(fx)).backward()
    set_requires_grad(model.encoder, True)
    set_requires_grad(model.projector, True)
    leaked = sum(float(p.grad.abs().sum()) for p in model.params("eta", "phi") if p.grad is not None)
    rows.append(CheckRow("geometry loss grad in eta/phi", leaked, 1e-300))

    model.zero_grad(set_to_none=True)
    with torch.no_grad():
        warped = model.warp(mv, model.registration(mv, fx)[-1] + 0.5)
    bt_loss(model.projector(model.encoder(warped)), model.projector(model.encoder(fx))).backward()
    leaked = sum(float(p.grad.abs().sum()) for p in model.params("theta") if p.grad is not None)
    rows.append(CheckRow("modality loss grad in theta", leaked, 1e-300))
    return rows


def run_all(sizes=(16, 32, 64), which: str = "all") -> list[CheckRow]:
    rows: list[CheckRow] = []
    if which in ("all", "losses"):
        rows += check_bt_loss() + check_gbt_loss()
    if which in ("all", "chain"):
        rows.append(check_dlt())
        rows += [check_warp(s) for s in sizes]
        rows += [check_warp_pointwise(s) for s in sizes]
        rows += [check_full_chain(s) for s in sizes]
    if which in ("all", "frozen"):
        rows += check_frozen_groups()
    return rows


def format_table(rows: list[CheckRow]) -> str:
    width = max(len(r.name) for r in rows) if rows else 10
    lines = [f"{'check':<{width}}  {'rel_err':>10}  {'tol':>8}  result"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.rel_err:10.3e}  {r.tol:8.1e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
