"""Encoder, projector and registration networks.

The encoder/projector pair is a residual network cut in two: the stem
(stride-2 conv, no max pool) plus the first stages form the encoder, the
remaining stages followed by global average pooling form the projector. No
classifier layer. Normalisation layers use batch statistics only (no
running averages), or GroupNorm on request, so a forward pass never mutates
module state; the freeze guarantees of the trainer rely on that.

Parameter roles: ``theta`` (registration), ``eta`` (encoder), ``phi``
(projector).
"""

from __future__ import annotations

import io
import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import nn

from .geometry import corner_points, dlt_solve_torch
from .warping import warp_image

ROLES = ("theta", "eta", "phi")
# batch statistics without running averages keep every forward pass stateless
NORMS = {
    "batch": lambda ch: nn.BatchNorm2d(ch, track_running_stats=False),
    "group": lambda ch: nn.GroupNorm(min(8, ch), ch),
}
CHECKPOINT_VERSION = "mmhomog-ckpt-1"


@dataclass
class NetworkConfig:
    input_channels: int = 1
    base_width: int = 32
    encoder_stages: list[int] = field(default_factory=lambda: [1, 2])
    projector_stages: list[int] = field(default_factory=lambda: [3])
    include_stage4: bool = False
    blocks_per_stage: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    registration_kind: str = "one_shot"
    iterations: int = 6
    registration_width: int = 16
    image_size: list[int] = field(default_factory=lambda: [128, 128])
    use_gap: bool = True
    norm: str = "batch"

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}; known: {sorted(NORMS)}")
        self.encoder_stages = [int(s) for s in self.encoder_stages]
        self.projector_stages = [int(s) for s in self.projector_stages]
        if self.include_stage4 and 4 not in self.encoder_stages + self.projector_stages:
            self.projector_stages = self.projector_stages + [4]
        stages = self.encoder_stages + self.projector_stages
        if not self.encoder_stages or not self.projector_stages:
            raise ValueError("encoder and projector both need at least one stage")
        if stages != list(range(1, len(stages) + 1)) or len(stages) > 4:
            raise ValueError(
                f"encoder_stages {self.encoder_stages} and projector_stages {self.projector_stages} must be "
                "disjoint, ordered and contiguous, starting at stage 1"
            )
        if len(self.blocks_per_stage) < max(stages):
            raise ValueError("blocks_per_stage needs one entry per used stage")
        if self.registration_kind not in ("one_shot", "iterative"):
            raise ValueError(f"unknown registration_kind {self.registration_kind!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        self.image_size = [int(s) for s in self.image_size]
        if any(s % 4 for s in self.image_size):
            raise ValueError("image size must be divisible by 4")

    def stage_width(self, stage: int) -> int:
        return self.base_width * 2 ** (stage - 1)


def _norm(ch: int, kind: str = "batch") -> nn.Module:
    return NORMS[kind](ch)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1, norm: str = "batch"):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.n1 = _norm(cout, norm)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.n2 = _norm(cout, norm)
        self.short = None
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(cout, norm))

    def forward(self, x):
        y = torch.relu(self.n1(self.conv1(x)))
        y = self.n2(self.conv2(y))
        return torch.relu(y + (x if self.short is None else self.short(x)))


def make_stage(cin: int, cout: int, blocks: int, stride: int, norm: str = "batch") -> nn.Sequential:
    layers = [BasicBlock(cin, cout, stride, norm)]
    layers += [BasicBlock(cout, cout, 1, norm) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


def _stride(stage: int) -> int:
    return 1 if stage == 1 else 2


class Encoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        w = cfg.base_width
        self.stem = nn.Sequential(nn.Conv2d(cfg.input_channels, w, 7, 2, 3, bias=False), _norm(w, cfg.norm), nn.ReLU())
        stages = []
        cin = w
        for s in cfg.encoder_stages:
            cout = cfg.stage_width(s)
            stages.append(make_stage(cin, cout, cfg.blocks_per_stage[s - 1], _stride(s), cfg.norm))
            cin = cout
        self.stages = nn.Sequential(*stages)
        self.out_channels = cin

    def forward(self, x):
        return self.stages(self.stem(x))


def global_average_pool(f: torch.Tensor) -> torch.Tensor:
    return f.mean(dim=(2, 3))


class Projector(nn.Module):
    def __init__(self, cfg: NetworkConfig, in_channels: int):
        super().__init__()
        stages = []
        cin = in_channels
        for s in cfg.projector_stages:
            cout = cfg.stage_width(s)
            stages.append(make_stage(cin, cout, cfg.blocks_per_stage[s - 1], _stride(s), cfg.norm))
            cin = cout
        self.stages = nn.Sequential(*stages)
        self.use_gap = cfg.use_gap
        self.out_channels = cin

    def forward(self, f):
        z = self.stages(f)
        return global_average_pool(z) if self.use_gap else z


class OffsetRegressor(nn.Module):
    """Small residual CNN on a channel-stacked pair, pooled to 4x4, then one linear map to 8 offsets."""

    def __init__(self, in_channels: int, width: int, norm: str = "batch"):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, width, 7, 2, 3, bias=False),
            _norm(width, norm),
            nn.ReLU(),
            make_stage(width, width, 1, 1, norm),
            make_stage(width, 2 * width, 1, 2, norm),
            make_stage(2 * width, 4 * width, 1, 2, norm),
            nn.AdaptiveAvgPool2d(4),
        )
        self.head = nn.Linear(4 * width * 16, 8)
        # identity warp at initialisation
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, moving, fixed):
        f = self.body(torch.cat([moving, fixed], dim=1))
        return self.head(f.flatten(1)).reshape(-1, 4, 2)


class RegistrationNet(nn.Module):
    """Predicts four-point offsets for (moving, fixed) pairs.

    ``forward`` returns a list of (N,4,2) cumulative offset estimates: one
    entry for ``one_shot``, ``iterations`` entries for ``iterative``.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.kind = cfg.registration_kind
        self.iterations = cfg.iterations if self.kind == "iterative" else 1
        self.regressor = OffsetRegressor(2 * cfg.input_channels, cfg.registration_width, cfg.norm)
        h, w = cfg.image_size
        self.register_buffer("corners", torch.as_tensor(corner_points(w, h), dtype=torch.float32), persistent=False)

    def forward(self, moving, fixed):
        if self.kind == "one_shot":
            return [self.regressor(moving, fixed)]
        corners = self.corners.to(moving.dtype)
        total = torch.zeros(moving.shape[0], 4, 2, dtype=moving.dtype, device=moving.device)
        out = []
        for _ in range(self.iterations):
            if out:
                warped = warp_image(moving, dlt_solve_torch(corners, total))
            else:
                warped = moving
            total = total + self.regressor(warped, fixed)
            out.append(total)
        return out


class AltModel(nn.Module):
    """Container for the three trainable components.

    Both images go through the same ``encoder`` and ``projector`` instances.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.registration = RegistrationNet(cfg)
        self.encoder = Encoder(cfg)
        self.projector = Projector(cfg, self.encoder.out_channels)

    def role_modules(self) -> dict[str, nn.Module]:
        return {"theta": self.registration, "eta": self.encoder, "phi": self.projector}

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        return {role: list(m.named_parameters()) for role, m in self.role_modules().items()}

    def params(self, *roles: str) -> list[nn.Parameter]:
        mods = self.role_modules()
        return [p for r in roles for p in mods[r].parameters()]

    def corners(self, dtype=None) -> torch.Tensor:
        c = self.registration.corners
        return c if dtype is None else c.to(dtype)

    def homographies(self, offsets: torch.Tensor) -> torch.Tensor:
        return dlt_solve_torch(self.corners(offsets.dtype), offsets)

    def warp(self, moving: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
        return warp_image(moving, self.homographies(offsets))

    @torch.no_grad()
    def predict_offsets(self, moving, fixed) -> torch.Tensor:
        return self.registration(moving, fixed)[-1]


def set_requires_grad(module: nn.Module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


def collapse_statistics(f: torch.Tensor) -> tuple[float, float]:
    """Mean per-channel spatial variance, and mean variance across the batch axis.

    Both are 0 for a constant map and about 1 for unit-variance noise.
    """
    f = f.detach().double()
    spatial = f.flatten(2).var(dim=2, unbiased=False).mean()
    batch = f.var(dim=0, unbiased=False).mean() if f.shape[0] > 1 else torch.zeros((), dtype=f.dtype)
    return float(spatial), float(batch)


def state_fingerprint(module: nn.Module) -> bytes:
    """Bytes of every parameter and buffer; equal fingerprints mean bitwise-equal state."""
    buf = io.BytesIO()
    for name, t in sorted(module.state_dict().items()):
        buf.write(name.encode())
        buf.write(t.detach().cpu().contiguous().numpy().tobytes())
    return buf.getvalue()


def save_checkpoint(path, model: AltModel, extra: dict | None = None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "network_config": asdict(model.cfg),
        "theta": model.registration.state_dict(),
        "eta": model.encoder.state_dict(),
        "phi": model.projector.state_dict(),
    }
    payload.update(extra or {})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


class CheckpointError(ValueError):
    """Checkpoint file unreadable or not one of ours."""


class CheckpointVersionError(CheckpointError):
    pass


def load_checkpoint(path) -> tuple[AltModel, dict]:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except (pickle.UnpicklingError, RuntimeError, EOFError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise CheckpointError(f"{path} is not a checkpoint archive")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint {path} has version {payload.get('format_version')!r}, expected {CHECKPOINT_VERSION!r}"
        )
    model = AltModel(NetworkConfig(**payload["network_config"]))
    model.registration.load_state_dict(payload["theta"])
    model.encoder.load_state_dict(payload["eta"])
    model.projector.load_state_dict(payload["phi"])
    return model, payload
