"""Homography algebra, four-point DLT and the mean average corner error.

Coordinates follow the usual imaging convention: pixel centres sit on
integer coordinates, origin top-left, x to the right, y downwards. Corner
order is always top-left, top-right, bottom-left, bottom-right.

The numpy functions here work in float64 on single homographies; the
``*_torch`` variants are batched and differentiable and are what the
training code calls.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from . import _accel
from .errors import DegenerateConfigurationError, PointAtInfinityError, SingularHomographyError

DET_EPS = 1e-12
W_EPS = 1e-12
COND_MAX = 1e12
# relative area threshold for "three collinear destination points"
COLLINEAR_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class Homography:
    """A 3x3 projective transform, stored with ``m[2, 2] == 1`` when possible."""

    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise SingularHomographyError("homography has non-finite entries")
        if abs(m[2, 2]) > 1e-15:
            m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= DET_EPS:
            raise SingularHomographyError(f"homography is singular (det={np.linalg.det(m):.3e})")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "Homography":
        if len(values) != 9:
            raise ValueError(f"expected 9 values, got {len(values)}")
        return cls(np.asarray(values, dtype=np.float64).reshape(3, 3))

    def to_list(self) -> list[float]:
        return [float(v) for v in self.m.reshape(-1)]

    def __repr__(self):
        return f"Homography({self.m.tolist()!r})"


@dataclass(frozen=True)
class FourPointOffsets:
    """Corner displacements (dx, dy) in TL, TR, BL, BR order."""

    offsets: np.ndarray = field(default_factory=lambda: np.zeros((4, 2)))

    def __post_init__(self):
        o = np.array(self.offsets, dtype=np.float64)
        if o.shape != (4, 2):
            raise ValueError(f"need exactly 4 (dx, dy) pairs, got shape {o.shape}")
        if not np.all(np.isfinite(o)):
            raise ValueError("offsets must be finite")
        o.setflags(write=False)
        object.__setattr__(self, "offsets", o)


@dataclass(frozen=True)
class CornerSet:
    width: int
    height: int

    @property
    def points(self) -> np.ndarray:
        return corner_points(self.width, self.height)


def corner_points(width: int, height: int) -> np.ndarray:
    w, h = float(width - 1), float(height - 1)
    return np.array([[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]])


def apply_homography(h: Homography, p) -> tuple[float, float]:
    x, y = float(p[0]), float(p[1])
    m = h.m
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    if abs(w) <= W_EPS:
        raise PointAtInfinityError(f"point ({x}, {y}) maps to infinity")
    return ((m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w, (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / w)


def apply_homography_points(h: Homography, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    out, w = _accel.project(h.m[None], pts[None])
    if np.any(np.abs(w) <= W_EPS):
        raise PointAtInfinityError("a point maps to infinity")
    return out[0]


def _has_collinear_triple(pts: np.ndarray) -> bool:
    scale = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1e-300) ** 2
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        a, b, c = pts[i], pts[j], pts[k]
        area = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        if area <= COLLINEAR_EPS * scale:
            return True
    return False


def dlt_solve(src: CornerSet | np.ndarray, offsets: FourPointOffsets | np.ndarray) -> Homography:
    """Homography sending each source corner to corner + offset."""
    s = src.points if isinstance(src, CornerSet) else np.asarray(src, dtype=np.float64).reshape(4, 2)
    o = offsets.offsets if isinstance(offsets, FourPointOffsets) else FourPointOffsets(offsets).offsets
    dst = s + o
    if _has_collinear_triple(dst) or _has_collinear_triple(s):
        raise DegenerateConfigurationError("three of the four points are collinear")
    h, cond = _accel.dlt_batch(s[None], dst[None])
    if not cond[0] < COND_MAX:
        raise DegenerateConfigurationError(f"DLT system is singular (cond={cond[0]:.3e})")
    return Homography(h[0])


def dlt_solve_batch(src: np.ndarray, offsets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised DLT over N offset sets.

    ``src`` is (4,2) or (N,4,2); ``offsets`` is (N,4,2). Returns ``(h, ok)``
    where ``h`` is (N,3,3) and ``ok`` flags the well-conditioned rows; the
    other rows are NaN.
    """
    offsets = np.asarray(offsets, dtype=np.float64)
    src = np.broadcast_to(np.asarray(src, dtype=np.float64), offsets.shape)
    h, cond = _accel.dlt_batch(src, src + offsets)
    return h, cond < COND_MAX


def invert(h: Homography) -> Homography:
    try:
        inv = np.linalg.inv(h.m)
    except np.linalg.LinAlgError as exc:
        raise SingularHomographyError(str(exc)) from exc
    return Homography(inv)


def compose(h1: Homography, h2: Homography) -> Homography:
    """``compose(h1, h2)`` applies ``h2`` first, then ``h1``."""
    return Homography(h1.m @ h2.m)


def ace(truth: Homography, pred: Homography, corners: CornerSet) -> float:
    """Average corner error for one sample."""
    c = corners.points
    return float(np.linalg.norm(apply_homography_points(truth, c) - apply_homography_points(pred, c), axis=1).mean())


def ace_batch(truth: np.ndarray, pred: np.ndarray, corners: CornerSet) -> np.ndarray:
    """Per-sample average corner error for stacked (N,3,3) matrices."""
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    c = np.broadcast_to(corners.points, (truth.shape[0], 4, 2))
    pt, wt = _accel.project(truth, c)
    pp, wp = _accel.project(pred, c)
    if np.any(np.abs(wt) <= W_EPS) or np.any(np.abs(wp) <= W_EPS):
        raise PointAtInfinityError("a corner maps to infinity")
    return np.linalg.norm(pt - pp, axis=2).mean(axis=1)


def mace(truth: Iterable[Homography], pred: Iterable[Homography], corners: CornerSet) -> float:
    truth = list(truth)
    pred = list(pred)
    if not truth:
        raise ValueError("mace of an empty sample list")
    if len(truth) != len(pred):
        raise ValueError(f"length mismatch: {len(truth)} truths vs {len(pred)} predictions")
    t = np.stack([h.m for h in truth])
    p = np.stack([h.m for h in pred])
    return float(ace_batch(t, p, corners).mean())


# ---------------------------------------------------------------------------
# differentiable batched versions


def _normalizer_torch(pts: torch.Tensor) -> torch.Tensor:
    c = pts.mean(dim=1)
    d = (pts - c[:, None]).norm(dim=2).mean(dim=1)
    s = (2.0**0.5) / d
    t = torch.zeros(pts.shape[0], 3, 3, dtype=pts.dtype, device=pts.device)
    t[:, 0, 0] = s
    t[:, 1, 1] = s
    t[:, 0, 2] = -s * c[:, 0]
    t[:, 1, 2] = -s * c[:, 1]
    t[:, 2, 2] = 1.0
    return t


def dlt_solve_torch(corners: torch.Tensor, offsets: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Batched, differentiable four-point DLT.

    ``corners`` is (4,2) or (N,4,2), ``offsets`` is (N,4,2); returns (N,3,3)
    with ``h[:, 2, 2] == 1``. With ``check`` set, raises
    ``DegenerateConfigurationError`` naming the first bad batch index.
    """
    offsets = offsets.reshape(-1, 4, 2)
    src = corners.to(offsets).expand_as(offsets)
    dst = src + offsets
    ts = _normalizer_torch(src)
    td = _normalizer_torch(dst)
    sn = src * ts[:, None, 0, 0:1] + ts[:, None, 0:2, 2]
    dn = dst * td[:, None, 0, 0:1] + td[:, None, 0:2, 2]
    x, y = sn[..., 0], sn[..., 1]
    u, v = dn[..., 0], dn[..., 1]
    zero = torch.zeros_like(x)
    one = torch.ones_like(x)
    rows_u = torch.stack([x, y, one, zero, zero, zero, -u * x, -u * y], dim=-1)
    rows_v = torch.stack([zero, zero, zero, x, y, one, -v * x, -v * y], dim=-1)
    a = torch.stack([rows_u, rows_v], dim=2).reshape(-1, 8, 8)
    b = torch.stack([u, v], dim=2).reshape(-1, 8, 1)
    if check:
        with torch.no_grad():
            ad = a.double()
            finite = torch.isfinite(ad).all(dim=(1, 2))
            cond = torch.full((ad.shape[0],), float("inf"), dtype=torch.float64)
            if finite.any():
                cond[finite] = torch.linalg.cond(ad[finite])
            bad = ~(cond < COND_MAX)
            if bad.any():
                idx = int(torch.nonzero(bad)[0, 0])
                raise DegenerateConfigurationError(
                    f"DLT system is singular for batch index {idx} (cond={float(cond[idx]):.3e})", batch_index=idx
                )
    sol = torch.linalg.solve(a, b)[..., 0]
    hn = torch.cat([sol, torch.ones_like(sol[:, :1])], dim=1).reshape(-1, 3, 3)
    h = torch.linalg.solve(td, hn) @ ts
    return h / h[:, 2:3, 2:3]


def project_torch(h: torch.Tensor, pts: torch.Tensor) -> torch.Tensor:
    """Apply (N,3,3) homographies to (N,M,2) or (M,2) points."""
    pts = pts.to(h).expand(h.shape[0], -1, -1)
    ones = torch.ones_like(pts[..., :1])
    hom = torch.cat([pts, ones], dim=-1) @ h.transpose(1, 2)
    return hom[..., :2] / hom[..., 2:3]
