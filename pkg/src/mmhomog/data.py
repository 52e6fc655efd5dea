"""Synthetic multimodal pair generation, corpus I/O and train/eval splitting.

Pairs are built by four-corner perturbation: a square patch is cut from a
source image (the fixed image), each of its corners is displaced by an
offset drawn uniformly from ``[-rho, rho]^2``, and the moving image is read
from the quadrilateral those displaced corners span. The ground-truth
homography maps moving-frame coordinates to fixed-frame coordinates, i.e.
``warp_image(moving, truth)`` reproduces the fixed patch.

On-disk layout::

    root/A/<id>.png        moving images
    root/B/<id>.png        fixed images
    root/truth/<id>.txt    optional, 9 row-major floats
    root/manifest.json     identifiers + generation config (generated corpora)
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from . import _accel
from .errors import DataError, DegenerateConfigurationError
from .geometry import CornerSet, Homography, dlt_solve

log = logging.getLogger(__name__)

MODALITIES = ("identity", "invert", "edge_magnitude", "gamma_posterize")
MANIFEST_FORMAT = "mmhomog-corpus-1"
IMAGE_EXTS = (".png", ".tif", ".tiff", ".bmp", ".jpg", ".jpeg")


@dataclass(eq=False)
class ImagePair:
    """Moving image, fixed image and (for evaluation only) the true homography."""

    moving: np.ndarray
    fixed: np.ndarray
    truth: Homography | None
    identifier: str

    def __post_init__(self):
        if self.moving.shape[-2:] != self.fixed.shape[-2:]:
            raise ValueError(f"{self.identifier}: moving {self.moving.shape} and fixed {self.fixed.shape} differ in size")


@dataclass(frozen=True, eq=False)
class TrainPair:
    """What the training loop is allowed to see. There is no truth field."""

    moving: np.ndarray
    fixed: np.ndarray
    identifier: str


@dataclass
class GenerationConfig:
    sources: list[str] = field(default_factory=list)
    source_size: int = 192
    patch_size: int = 128
    rho: float = 32.0
    moving_modality: str = "identity"
    fixed_modality: str = "identity"
    channels: int = 1
    seed: int = 0
    count: int = 100

    def __post_init__(self):
        if self.rho < 0 or not self.rho < self.patch_size / 2:
            raise ValueError(f"rho={self.rho} must lie in [0, patch_size/2)")
        for m in (self.moving_modality, self.fixed_modality):
            if m not in MODALITIES:
                raise ValueError(f"unknown modality transform {m!r}; known: {MODALITIES}")
        if self.count < 0:
            raise ValueError("count must be >= 0")


# ---------------------------------------------------------------------------
# source images


def synthetic_scene(size: int, rng: np.random.Generator, channels: int = 1) -> np.ndarray:
    """Procedural test scene in [0, 1]: smooth shading, fine texture and filled shapes."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.empty((channels, size, size))
    for c in range(channels):
        img = ndimage.gaussian_filter(rng.normal(size=(size, size)), size / 10.0, mode="wrap")
        img = 0.4 * img / (np.abs(img).max() + 1e-12)
        img += 0.08 * ndimage.gaussian_filter(rng.normal(size=(size, size)), 1.0)
        for _ in range(rng.integers(8, 16)):
            cx, cy = rng.uniform(0, size, 2)
            a, b = rng.uniform(size * 0.04, size * 0.18, 2)
            ang = rng.uniform(0, np.pi)
            dx, dy = xx - cx, yy - cy
            u = dx * np.cos(ang) + dy * np.sin(ang)
            v = -dx * np.sin(ang) + dy * np.cos(ang)
            if rng.random() < 0.5:
                mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
            else:
                mask = (np.abs(u) <= a) & (np.abs(v) <= b)
            img[mask] = rng.uniform(-0.6, 0.6)
        img = ndimage.gaussian_filter(img, 0.7)
        lo, hi = img.min(), img.max()
        out[c] = (img - lo) / (hi - lo + 1e-12)
    return out


def load_image(path) -> np.ndarray:
    """Read an image file into a (C,H,W) float array in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc
    if arr.dtype == np.uint16:
        arr = arr.astype(np.float64) / 65535.0
    else:
        arr = arr.astype(np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = np.moveaxis(arr[..., :3], -1, 0)
    return arr.astype(np.float32)


def save_image(path, img: np.ndarray):
    q = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if q.shape[0] == 1:
        Image.fromarray(q[0], mode="L").save(path)
    else:
        Image.fromarray(np.moveaxis(q, 0, -1), mode="RGB").save(path)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid so that saving and reloading is lossless."""
    return (np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255) / 255.0).astype(np.float32)


# ---------------------------------------------------------------------------
# modality transforms


def modality_transform(img: np.ndarray, kind: str) -> np.ndarray:
    """Value-space transform standing in for a change of sensor or rendering style.

    The pixel grid is never moved, so any geometric ground truth is preserved.
    """
    img = np.asarray(img, dtype=np.float64)
    if kind == "identity":
        return img.copy()
    if kind == "invert":
        return 1.0 - img
    if kind == "edge_magnitude":
        out = np.empty_like(img)
        for c in range(img.shape[0]):
            gx = ndimage.sobel(img[c], axis=1, mode="nearest")
            gy = ndimage.sobel(img[c], axis=0, mode="nearest")
            mag = np.hypot(gx, gy)
            peak = mag.max()
            out[c] = mag / peak if peak > 1e-12 else 0.0
        return out
    if kind == "gamma_posterize":
        levels = 4
        return np.round(np.clip(img, 0, 1) ** 2.2 * (levels - 1)) / (levels - 1)
    raise ValueError(f"unknown modality transform {kind!r}; known: {MODALITIES}")


# ---------------------------------------------------------------------------
# pair generation


def generate_pair(source: np.ndarray, cfg: GenerationConfig, rng: np.random.Generator, identifier: str = "") -> ImagePair:
    """Cut one (moving, fixed, truth) triple out of ``source`` (C,H,W)."""
    p = cfg.patch_size
    rho = float(cfg.rho)
    _, sh, sw = source.shape
    margin = int(np.ceil(rho))
    if sh < p + 2 * margin or sw < p + 2 * margin:
        raise DataError(f"source {sw}x{sh} too small for patch {p} with margin {margin}")
    corners = CornerSet(p, p)
    x0 = int(rng.integers(margin, sw - p - margin + 1))
    y0 = int(rng.integers(margin, sh - p - margin + 1))
    for _ in range(100):
        offsets = rng.uniform(-rho, rho, size=(4, 2))
        try:
            truth = dlt_solve(corners, offsets)
            break
        except DegenerateConfigurationError:
            continue
    else:
        raise DataError(f"{identifier}: no non-degenerate corner perturbation after 100 draws")
    to_source = np.array([[1.0, 0.0, x0], [0.0, 1.0, y0], [0.0, 0.0, 1.0]]) @ truth.m
    moving = _accel.sample_projective(source, to_source, p, p)
    fixed = np.asarray(source[:, y0 : y0 + p, x0 : x0 + p], dtype=np.float64)
    moving = quantize(modality_transform(quantize(moving), cfg.moving_modality))
    fixed = quantize(modality_transform(quantize(fixed), cfg.fixed_modality))
    return ImagePair(moving=moving, fixed=fixed, truth=truth, identifier=identifier)


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def generate_corpus(cfg: GenerationConfig) -> list[ImagePair]:
    """Generate ``cfg.count`` pairs; sample ``i`` depends only on ``(seed, i)``."""
    sources = [load_image(s) for s in cfg.sources]
    width = len(str(max(cfg.count - 1, 0)))
    pairs = []
    for i in range(cfg.count):
        rng = _sample_rng(cfg.seed, i)
        if sources:
            src = sources[i % len(sources)].astype(np.float64)
            if cfg.channels == 1 and src.shape[0] > 1:
                src = src.mean(axis=0, keepdims=True)
        else:
            src = synthetic_scene(cfg.source_size, rng, cfg.channels)
        pairs.append(generate_pair(src, cfg, rng, identifier=f"{i:0{width}d}"))
    return pairs


# ---------------------------------------------------------------------------
# corpus I/O


def _truth_text(h: Homography) -> str:
    return " ".join(repr(v) for v in h.to_list()) + "\n"


def _read_truth(path: Path) -> Homography:
    try:
        values = [float(v) for v in path.read_text().split()]
        return Homography.from_list(values)
    except (ValueError, OSError) as exc:
        raise DataError(f"malformed truth record {path}: {exc}") from exc


def save_corpus(pairs: Sequence[ImagePair], root, generation: GenerationConfig | None = None) -> Path:
    root = Path(root)
    for sub in ("A", "B", "truth"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for pair in pairs:
        save_image(root / "A" / f"{pair.identifier}.png", pair.moving)
        save_image(root / "B" / f"{pair.identifier}.png", pair.fixed)
        if pair.truth is not None:
            (root / "truth" / f"{pair.identifier}.txt").write_text(_truth_text(pair.truth))
    manifest = {
        "format": MANIFEST_FORMAT,
        "ids": [p.identifier for p in pairs],
        "generation": asdict(generation) if generation is not None else None,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


class UnmatchedFilesError(DataError):
    """Files present on one side only. ``pairs`` holds everything that did match."""

    def __init__(self, orphans: list[str], pairs: list[ImagePair]):
        super().__init__(f"unmatched files: {', '.join(orphans)}")
        self.orphans = orphans
        self.pairs = pairs


def _images_in(d: Path) -> dict[str, Path]:
    if not d.is_dir():
        return {}
    return {p.name: p for p in d.iterdir() if p.suffix.lower() in IMAGE_EXTS}


def load_corpus(root, layout: str = "paired_dirs", strict: bool = True) -> list[ImagePair]:
    """Read a corpus, ordered lexicographically by identifier.

    ``paired_dirs`` pairs ``A/`` and ``B/`` by identical filename and picks up
    ``truth/<stem>.txt`` when present. ``generated_manifest`` reads exactly the
    identifiers listed in ``manifest.json``. With ``strict`` (default), files
    present on one side only raise ``UnmatchedFilesError``; otherwise they are
    logged and skipped.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"corpus directory {root} does not exist")
    if layout == "paired_dirs":
        a = _images_in(root / "A")
        b = _images_in(root / "B")
        if not a and not b:
            warnings.warn(f"corpus {root} is empty", stacklevel=2)
            return []
        names = sorted(set(a) & set(b))
        orphans = sorted(set(a) ^ set(b))
        pairs = [_load_pair(root, Path(n).stem, a[n], b[n]) for n in names]
        if orphans:
            if strict:
                raise UnmatchedFilesError(orphans, pairs)
            log.warning("skipping unmatched files: %s", ", ".join(orphans))
        return pairs
    if layout == "generated_manifest":
        mpath = root / "manifest.json"
        try:
            manifest = json.loads(mpath.read_text())
        except (OSError, ValueError) as exc:
            raise DataError(f"unreadable manifest {mpath}: {exc}") from exc
        if manifest.get("format") != MANIFEST_FORMAT:
            raise DataError(f"{mpath}: unknown manifest format {manifest.get('format')!r}")
        ids = sorted(manifest["ids"])
        if not ids:
            warnings.warn(f"corpus {root} is empty", stacklevel=2)
        pairs = []
        for i in ids:
            pa, pb = root / "A" / f"{i}.png", root / "B" / f"{i}.png"
            if not pa.exists() or not pb.exists():
                raise DataError(f"manifest lists {i!r} but its images are missing")
            pairs.append(_load_pair(root, i, pa, pb))
        return pairs
    raise ValueError(f"unknown corpus layout {layout!r}")


def _load_pair(root: Path, ident: str, pa: Path, pb: Path) -> ImagePair:
    tpath = root / "truth" / f"{ident}.txt"
    truth = _read_truth(tpath) if tpath.exists() else None
    try:
        return ImagePair(load_image(pa), load_image(pb), truth, ident)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def read_manifest_generation(root) -> dict | None:
    path = Path(root) / "manifest.json"
    if not path.exists():
        return None
    return json.loads(path.read_text()).get("generation")


# ---------------------------------------------------------------------------
# views and splitting


@dataclass(frozen=True, eq=False)
class TrainView:
    """Truth-free, stacked training data: ``moving``/``fixed`` are (N,C,H,W) float32."""

    moving: np.ndarray
    fixed: np.ndarray
    identifiers: tuple[str, ...]

    def __len__(self):
        return len(self.identifiers)

    def __getitem__(self, i) -> TrainPair:
        return TrainPair(self.moving[i], self.fixed[i], self.identifiers[i])

    def batches(self, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
        """Index arrays of one shuffled epoch; the order depends only on (seed, epoch)."""
        order = np.random.default_rng([int(seed), int(epoch), 7]).permutation(len(self))
        for s in range(0, len(order), batch_size):
            yield order[s : s + batch_size]

    @classmethod
    def from_pairs(cls, pairs: Sequence[ImagePair | TrainPair]) -> "TrainView":
        if not pairs:
            return cls(np.zeros((0, 1, 8, 8), np.float32), np.zeros((0, 1, 8, 8), np.float32), ())
        return cls(
            np.stack([np.asarray(p.moving, np.float32) for p in pairs]),
            np.stack([np.asarray(p.fixed, np.float32) for p in pairs]),
            tuple(p.identifier for p in pairs),
        )


@dataclass(frozen=True, eq=False)
class EvalView:
    moving: np.ndarray
    fixed: np.ndarray
    truth: np.ndarray  # (N,3,3); NaN rows where unknown
    identifiers: tuple[str, ...]

    def __len__(self):
        return len(self.identifiers)

    @property
    def has_truth(self) -> bool:
        return len(self) > 0 and bool(np.all(np.isfinite(self.truth)))

    @classmethod
    def from_pairs(cls, pairs: Sequence[ImagePair]) -> "EvalView":
        if not pairs:
            z = np.zeros((0, 1, 8, 8), np.float32)
            return cls(z, z.copy(), np.zeros((0, 3, 3)), ())
        truth = np.stack([p.truth.m if p.truth is not None else np.full((3, 3), np.nan) for p in pairs])
        return cls(
            np.stack([np.asarray(p.moving, np.float32) for p in pairs]),
            np.stack([np.asarray(p.fixed, np.float32) for p in pairs]),
            truth,
            tuple(p.identifier for p in pairs),
        )


def split(dataset: Sequence[ImagePair], fractions: Sequence[float], seed: int) -> tuple[TrainView, EvalView]:
    """Seeded shuffle into a truth-free train view and an eval view."""
    fr = [float(f) for f in fractions]
    if len(fr) != 2 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be two non-negative numbers summing to 1, got {fractions}")
    n = len(dataset)
    n_train = int(round(fr[0] * n))
    order = np.random.default_rng(int(seed)).permutation(n)
    train = [dataset[i] for i in sorted(order[:n_train])]
    test = [dataset[i] for i in sorted(order[n_train:])]
    return TrainView.from_pairs(train), EvalView.from_pairs(test)


def train_view_fields() -> list[str]:
    return [f.name for f in fields(TrainView)]
