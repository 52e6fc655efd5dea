"""Alternating two-phase training.

Each mini-batch gets two updates, in this order:

1. geometry step: encoder/projector frozen, the registration network is
   trained to make encoder features of the warped moving image match those
   of the fixed image (spatial Barlow Twins, or MSE);
2. representation step: registration frozen (its forward pass is rerun with
   the freshly updated weights, without gradients), encoder and projector
   are trained with the batch-wise Barlow Twins loss on pooled embeddings of
   the warped moving image and the fixed image.

``no_alternating=True`` replaces both with one joint step on the summed
losses over all parameters; it exists only as an ablation.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import EvalView, TrainView
from .errors import DegenerateConfigurationError, NumericalAbort
from .losses import DEFAULT_LAMBDA, bt_loss, bt_loss_per_location, gbt_loss, mse_geometry_loss
from .networks import AltModel, NetworkConfig, collapse_statistics, save_checkpoint, set_requires_grad

log = logging.getLogger(__name__)

COLLAPSE_VAR = 1e-6
COLLAPSE_OFFSET = 1e-3
COLLAPSE_MACE = 1.0


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    max_lr: float = 3e-4
    weight_decay: float = 1e-5
    lambda_: float = DEFAULT_LAMBDA
    geometry_grad_clip: float = 1.0
    optimizer: str = "adamw"
    schedule: str = "one_cycle"
    loss_geometry: str = "gbt"
    seed: int = 0
    no_alternating: bool = False
    step_weighting: str = "uniform"
    step_decay: float = 0.85
    collapse_warmup: int = 100
    eval_every: int = 1

    def __post_init__(self):
        for name in ("epochs", "batch_size", "max_lr", "weight_decay", "lambda_", "geometry_grad_clip", "eval_every"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.optimizer != "adamw":
            raise ValueError("only the adamw optimizer is supported")
        if self.schedule not in ("one_cycle", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.loss_geometry not in ("gbt", "mse"):
            raise ValueError(f"unknown geometry loss {self.loss_geometry!r}")
        if self.step_weighting not in ("uniform", "decay"):
            raise ValueError(f"unknown step_weighting {self.step_weighting!r}")


@dataclass
class CollapseReport:
    flag: bool
    spatial_variance: float
    batch_variance: float
    mean_offset: float | None = None
    identity_mace: float | None = None


@dataclass
class StepResult:
    loss: float
    grad_norm: float
    lr: float


def _tensor(x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


class Trainer:
    """Owns the model, both optimisers and schedulers, the step counter and the metrics log."""

    def __init__(self, train_cfg: TrainConfig, net_cfg: NetworkConfig, steps_per_epoch: int = 1, metrics_path=None):
        self.cfg = train_cfg
        self.net_cfg = net_cfg
        torch.manual_seed(train_cfg.seed)
        self.model = AltModel(net_cfg)
        self.model.train()
        self.t = 0
        self.metrics: list[dict] = []
        self.collapse_history: list[bool] = []
        self.metrics_path = Path(metrics_path) if metrics_path else None
        self.total_steps = max(1, train_cfg.epochs * steps_per_epoch)
        self.opt_theta = self._optimizer(self.model.params("theta"))
        self.opt_rep = self._optimizer(self.model.params("eta", "phi"))
        self.sched_theta = self._scheduler(self.opt_theta)
        self.sched_rep = self._scheduler(self.opt_rep)

    def _optimizer(self, params):
        return torch.optim.AdamW(params, lr=self.cfg.max_lr, weight_decay=self.cfg.weight_decay)

    def _scheduler(self, opt):
        if self.cfg.schedule == "constant":
            return torch.optim.lr_scheduler.LambdaLR(opt, lambda _: 1.0)
        return torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=self.cfg.max_lr, total_steps=self.total_steps)

    def _advance_schedules(self):
        # OneCycleLR refuses to step past total_steps
        if self.sched_theta.last_epoch < self.total_steps:
            self.sched_theta.step()
            self.sched_rep.step()

    # -- losses ---------------------------------------------------------------

    def _geometry_loss(self, fa, fb):
        if self.cfg.loss_geometry == "mse":
            return mse_geometry_loss(fa, fb)
        return gbt_loss(fa, fb, self.cfg.lambda_)

    def _modality_loss(self, za, zb):
        if za.dim() == 4:
            return bt_loss_per_location(za, zb, self.cfg.lambda_)
        return bt_loss(za, zb, self.cfg.lambda_)

    def _step_weights(self, k: int) -> list[float]:
        if self.cfg.step_weighting == "uniform":
            return [1.0 / k] * k
        w = [self.cfg.step_decay ** (k - 1 - i) for i in range(k)]
        s = sum(w)
        return [x / s for x in w]

    def _geometry_objective(self, moving, fixed, fb, batch_index=None):
        offsets = self.model.registration(moving, fixed)
        weights = self._step_weights(len(offsets))
        total = 0.0
        for w, o in zip(weights, offsets):
            if not torch.isfinite(o).all():
                raise NumericalAbort(f"non-finite offsets at step {self.t} (batch {batch_index})", batch_index)
            fa = self.model.encoder(self.model.warp(moving, o))
            total = total + w * self._geometry_loss(fa, fb)
        return total, offsets

    @staticmethod
    def _grad_norm(params) -> float:
        sq = sum(float((p.grad.double() ** 2).sum()) for p in params if p.grad is not None)
        return math.sqrt(sq)

    def _check_finite(self, loss, what: str, batch_index):
        if not torch.isfinite(loss):
            raise NumericalAbort(f"non-finite {what} loss at step {self.t} (batch {batch_index})", batch_index)

    # -- phases ---------------------------------------------------------------

    def gl_step(self, moving: torch.Tensor, fixed: torch.Tensor, batch_index=None) -> StepResult:
        """Update registration parameters only."""
        m = self.model
        theta = m.params("theta")
        set_requires_grad(m.encoder, False)
        set_requires_grad(m.projector, False)
        try:
            self.opt_theta.zero_grad(set_to_none=True)
            with torch.no_grad():
                fb = m.encoder(fixed)
            self._last_fb = fb
            loss, _ = self._geometry_objective(moving, fixed, fb, batch_index)
            self._check_finite(loss, "geometry", batch_index)
            loss.backward()
        finally:
            set_requires_grad(m.encoder, True)
            set_requires_grad(m.projector, True)
        gn = self._grad_norm(theta)
        torch.nn.utils.clip_grad_value_(theta, self.cfg.geometry_grad_clip)
        lr = self.opt_theta.param_groups[0]["lr"]
        self.opt_theta.step()
        return StepResult(loss.item(), gn, lr)

    def marl_step(self, moving: torch.Tensor, fixed: torch.Tensor, batch_index=None) -> StepResult:
        """Update encoder and projector only, using the current registration output."""
        m = self.model
        rep = m.params("eta", "phi")
        with torch.no_grad():
            warped = m.warp(moving, m.registration(moving, fixed)[-1])
        self.opt_rep.zero_grad(set_to_none=True)
        za = m.projector(m.encoder(warped))
        zb = m.projector(m.encoder(fixed))
        loss = self._modality_loss(za, zb)
        self._check_finite(loss, "modality", batch_index)
        loss.backward()
        gn = self._grad_norm(rep)
        lr = self.opt_rep.param_groups[0]["lr"]
        self.opt_rep.step()
        return StepResult(loss.item(), gn, lr)

    def joint_step(self, moving: torch.Tensor, fixed: torch.Tensor, batch_index=None) -> StepResult:
        """Ablation: minimise geometry + modality loss over all parameters at once."""
        m = self.model
        self.opt_theta.zero_grad(set_to_none=True)
        self.opt_rep.zero_grad(set_to_none=True)
        fb = m.encoder(fixed)
        self._last_fb = fb.detach()
        lg, offsets = self._geometry_objective(moving, fixed, fb, batch_index)
        za = m.projector(m.encoder(m.warp(moving, offsets[-1])))
        zb = m.projector(fb)
        loss = lg + self._modality_loss(za, zb)
        self._check_finite(loss, "joint", batch_index)
        loss.backward()
        theta = m.params("theta")
        gn = self._grad_norm(m.params("theta", "eta", "phi"))
        torch.nn.utils.clip_grad_value_(theta, self.cfg.geometry_grad_clip)
        lr = self.opt_theta.param_groups[0]["lr"]
        self.opt_theta.step()
        self.opt_rep.step()
        return StepResult(loss.item(), gn, lr)

    # -- bookkeeping ----------------------------------------------------------

    def _record(self, rec: dict):
        self.metrics.append(rec)
        if self.metrics_path is not None:
            with self.metrics_path.open("a") as fh:
                fh.write(json.dumps(rec) + "\n")

    def train_batch(self, moving, fixed, batch_index=None) -> dict:
        """One mini-batch: geometry then representation step (or one joint step)."""
        try:
            if self.cfg.no_alternating:
                results = [("JOINT", self.joint_step(moving, fixed, batch_index))]
            else:
                results = [
                    ("GL", self.gl_step(moving, fixed, batch_index)),
                    ("MARL", self.marl_step(moving, fixed, batch_index)),
                ]
        except DegenerateConfigurationError as exc:
            raise DegenerateConfigurationError(
                f"step {self.t}: {exc} (batch {batch_index})", batch_index=exc.batch_index
            ) from exc
        spatial_var, _ = collapse_statistics(self._last_fb)
        flag = self.t >= self.cfg.collapse_warmup and spatial_var < COLLAPSE_VAR
        self.collapse_history.append(flag)
        for phase, r in results:
            self._record(
                {"t": self.t, "phase": phase, "loss": r.loss, "lr": r.lr, "grad_norm": r.grad_norm, "collapse_flag": flag}
            )
        self._advance_schedules()
        self.t += 1
        return {phase: r.loss for phase, r in results}

    def checkpoint(self, path, epoch: int):
        save_checkpoint(
            path,
            self.model,
            {
                "step": self.t,
                "epoch": epoch,
                "train_config": asdict(self.cfg),
                "optimizers": {"theta": self.opt_theta.state_dict(), "eta_phi": self.opt_rep.state_dict()},
                "schedulers": {"theta": self.sched_theta.state_dict(), "eta_phi": self.sched_rep.state_dict()},
                "collapse_history": list(self.collapse_history),
            },
        )


def detect_collapse(model: AltModel, moving, fixed, truth: np.ndarray | None = None, step: int | None = None,
                    warmup: int = 100) -> CollapseReport:
    """Flag the trivial solution: constant encoder output, or identity predictions on misaligned data.

    The second condition needs ground truth, so it is only evaluated when
    ``truth`` (N,3,3) is given. Before ``warmup`` steps the flag is never set.
    """
    from .geometry import CornerSet, ace_batch

    moving = _tensor(moving) if isinstance(moving, np.ndarray) else moving
    fixed = _tensor(fixed) if isinstance(fixed, np.ndarray) else fixed
    with torch.no_grad():
        f = model.encoder(fixed)
        offsets = model.registration(moving, fixed)[-1]
    spatial_var, batch_var = collapse_statistics(f)
    flag = spatial_var < COLLAPSE_VAR
    mean_off = float(offsets.double().norm(dim=2).mean())
    id_mace = None
    if truth is not None:
        h, w = moving.shape[-2:]
        id_mace = float(ace_batch(truth, np.broadcast_to(np.eye(3), truth.shape), CornerSet(w, h)).mean())
        flag = flag or (mean_off < COLLAPSE_OFFSET and id_mace > COLLAPSE_MACE)
    if step is not None and step < warmup:
        flag = False
    return CollapseReport(bool(flag), spatial_var, batch_var, mean_off, id_mace)


@dataclass
class TrainResult:
    trainer: Trainer
    metrics: list[dict]
    evaluations: list[dict] = field(default_factory=list)
    collapsed: bool = False
    checkpoints: list[Path] = field(default_factory=list)
    wall_clock: float = 0.0


def train(
    train_cfg: TrainConfig,
    net_cfg: NetworkConfig,
    dataset: TrainView,
    eval_view: EvalView | None = None,
    out_dir=None,
    progress: bool = False,
) -> TrainResult:
    """Run the full schedule. The training view carries no ground truth; only ``eval_view`` is scored."""
    from .evaluation import evaluate

    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    torch.use_deterministic_algorithms(True)
    bs = train_cfg.batch_size
    steps_per_epoch = sum(1 for s in range(0, len(dataset), bs) if min(bs, len(dataset) - s) >= 2)
    if steps_per_epoch == 0:
        raise ValueError("need at least 2 training pairs per batch")
    out = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        metrics_path.write_text("")
    tr = Trainer(train_cfg, net_cfg, steps_per_epoch, metrics_path)
    result = TrainResult(tr, tr.metrics)
    start = time.perf_counter()
    for epoch in range(train_cfg.epochs):
        for bidx in dataset.batches(bs, train_cfg.seed, epoch):
            if len(bidx) < 2:
                continue
            tr.train_batch(_tensor(dataset.moving[bidx]), _tensor(dataset.fixed[bidx]), batch_index=int(bidx[0]))
        last = epoch == train_cfg.epochs - 1
        if eval_view is not None and len(eval_view) and eval_view.has_truth and ((epoch + 1) % train_cfg.eval_every == 0 or last):
            rep = evaluate(tr.model, eval_view)
            col = detect_collapse(tr.model, eval_view.moving[:64], eval_view.fixed[:64], eval_view.truth[:64],
                                  step=tr.t, warmup=train_cfg.collapse_warmup)
            rec = {"epoch": epoch, "split": "eval", "mace": rep.mace, "baseline_mace": rep.baseline_mace,
                   "collapse_flag": col.flag}
            tr._record(rec)
            result.evaluations.append(rec)
            if progress:
                log.info("epoch %d  mace %.3f  (baseline %.3f)", epoch, rep.mace, rep.baseline_mace)
        if out is not None:
            path = out / f"checkpoint_epoch{epoch:03d}.pt"
            tr.checkpoint(path, epoch)
            result.checkpoints.append(path)
    result.wall_clock = time.perf_counter() - start
    recent = tr.collapse_history[-steps_per_epoch:]
    result.collapsed = bool(any(recent)) or bool(result.evaluations and result.evaluations[-1]["collapse_flag"])
    return result
