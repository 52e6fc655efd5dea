"""Scoring and figures: MACE reports with a no-warp baseline, box overlays, image strips."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .data import EvalView
from .geometry import CornerSet, ace_batch, dlt_solve_batch
from .networks import AltModel
from .warping import warp_image_np
from .geometry import Homography


@dataclass
class EvalReport:
    ace: list[float]
    mace: float
    baseline_ace: list[float]
    baseline_mace: float
    identifiers: list[str]
    config: dict = field(default_factory=dict)
    checkpoint: str | None = None
    wall_clock: float = 0.0

    def write(self, out_path) -> tuple[Path, Path]:
        """Write ``<out>.json`` (summary + per-sample rows) and ``<out>.csv``."""
        out = Path(out_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        stem = out.with_suffix("") if out.suffix in (".json", ".csv") else out
        jpath, cpath = stem.with_suffix(".json"), stem.with_suffix(".csv")
        jpath.write_text(json.dumps(asdict(self), indent=1))
        with cpath.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["identifier", "ace", "baseline_ace"])
            for i, a, b in zip(self.identifiers, self.ace, self.baseline_ace):
                w.writerow([i, repr(a), repr(b)])
        return jpath, cpath


def predict_homographies(model: AltModel, view: EvalView, batch_size: int = 64) -> np.ndarray:
    """(N,3,3) float64 predictions for every pair in ``view``."""
    h, w = view.moving.shape[-2:]
    corners = CornerSet(w, h).points
    out = []
    model.eval()
    try:
        with torch.no_grad():
            for s in range(0, len(view), batch_size):
                mv = torch.from_numpy(view.moving[s : s + batch_size])
                fx = torch.from_numpy(view.fixed[s : s + batch_size])
                offs = model.registration(mv, fx)[-1].double().numpy()
                hs, ok = dlt_solve_batch(corners, offs)
                hs[~ok] = np.eye(3)
                out.append(hs)
    finally:
        model.train()
    return np.concatenate(out) if out else np.zeros((0, 3, 3))


def evaluate(model: AltModel | None, view: EvalView, predictions: np.ndarray | None = None,
             checkpoint: str | None = None, config: dict | None = None) -> EvalReport:
    """Score predictions (from ``model`` unless given explicitly) against the view's truth."""
    if not view.has_truth:
        raise ValueError("evaluation needs ground truth for every pair")
    start = time.perf_counter()
    h, w = view.moving.shape[-2:]
    corners = CornerSet(w, h)
    if predictions is None:
        predictions = predict_homographies(model, view)
    ace = ace_batch(view.truth, predictions, corners)
    base = ace_batch(view.truth, np.broadcast_to(np.eye(3), view.truth.shape), corners)
    return EvalReport(
        ace=[float(a) for a in ace],
        mace=float(ace.mean()),
        baseline_ace=[float(b) for b in base],
        baseline_mace=float(base.mean()),
        identifiers=list(view.identifiers),
        config=config or {},
        checkpoint=checkpoint,
        wall_clock=time.perf_counter() - start,
    )


# ---------------------------------------------------------------------------
# figures


def center_box(width: int, height: int, fraction: float = 0.5) -> np.ndarray:
    """Axis-aligned centred square with side ``fraction * min(width, height)``, corners TL, TR, BL, BR."""
    side = fraction * min(width, height)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    r = side / 2.0
    return np.array([[cx - r, cy - r], [cx + r, cy - r], [cx - r, cy + r], [cx + r, cy + r]])


def warped_box(h: np.ndarray, box: np.ndarray) -> np.ndarray:
    from . import _accel

    pts, _ = _accel.project(np.asarray(h, dtype=np.float64)[None], box[None])
    return pts[0]


def _to_rgb(img: np.ndarray, scale: int) -> Image.Image:
    g = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    g = np.repeat(g, 3, axis=0) if g.shape[0] == 1 else g[:3]
    im = Image.fromarray(np.moveaxis(g, 0, -1), mode="RGB")
    return im.resize((im.width * scale, im.height * scale), Image.NEAREST) if scale != 1 else im


def _draw_quad(draw: ImageDraw.ImageDraw, quad: np.ndarray, color, scale: int):
    tl, tr, bl, br = (tuple(float(v) * scale for v in p) for p in quad)
    draw.line([tl, tr, br, bl, tl], fill=color, width=1)


def box_overlay(fixed: np.ndarray, truth: np.ndarray, pred: np.ndarray, box_fraction: float = 0.5,
                scale: int = 2) -> tuple[Image.Image, np.ndarray, np.ndarray]:
    """Fixed image with the truth-warped box in green and the prediction-warped box in red.

    Returns the image and the two warped boxes (in pixel coordinates of ``fixed``).
    """
    h, w = fixed.shape[-2:]
    box = center_box(w, h, box_fraction)
    qt, qp = warped_box(truth, box), warped_box(pred, box)
    im = _to_rgb(fixed, scale)
    d = ImageDraw.Draw(im)
    _draw_quad(d, qt, (0, 255, 0), scale)
    _draw_quad(d, qp, (255, 0, 0), scale)
    return im, qt, qp


def triplet_strip(moving: np.ndarray, fixed: np.ndarray, pred: np.ndarray, scale: int = 2) -> Image.Image:
    """Moving, fixed and warped-moving images side by side."""
    warped = warp_image_np(moving, Homography(pred))
    tiles = [_to_rgb(x, scale) for x in (moving, fixed, warped)]
    strip = Image.new("RGB", (sum(t.width for t in tiles) + 2 * (len(tiles) - 1), tiles[0].height), (255, 255, 255))
    x = 0
    for t in tiles:
        strip.paste(t, (x, 0))
        x += t.width + 2
    return strip


def mace_curve_csv(evaluations: list[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mace", "baseline_mace"])
        for r in evaluations:
            w.writerow([r["epoch"], r["mace"], r.get("baseline_mace", "")])
    return path
