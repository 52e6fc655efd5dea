"""Cross-correlation matrices and the redundancy-reduction losses built on them.

Two flavours of correlation are used:

* batch-wise, on (N, D) embeddings: statistics are taken over the batch
  axis, giving one D x D matrix (modality loss);
* spatial, on (N, D, H, W) feature maps: statistics are taken over the
  H*W positions of each sample separately, giving N matrices (geometry loss).

Both center their inputs and divide by ``sqrt(sum of squares + eps)``. The
``eps`` guard keeps constant (collapsed) features at correlation 0 instead
of NaN.
"""

from __future__ import annotations

import torch

DEFAULT_LAMBDA = 0.005
VAR_EPS = 1e-12


def _corr(a: torch.Tensor, b: torch.Tensor, eps: float) -> torch.Tensor:
    # a, b: (..., S, D) with samples on axis -2
    a = a - a.mean(dim=-2, keepdim=True)
    b = b - b.mean(dim=-2, keepdim=True)
    na = torch.sqrt((a * a).sum(dim=-2) + eps)
    nb = torch.sqrt((b * b).sum(dim=-2) + eps)
    return (a.transpose(-1, -2) @ b) / (na[..., :, None] * nb[..., None, :])


def cross_correlation_batchwise(a: torch.Tensor, b: torch.Tensor, eps: float = VAR_EPS) -> torch.Tensor:
    """(N, D) x (N, D) -> (D, D) correlation across the batch axis."""
    if a.shape != b.shape or a.dim() != 2:
        raise ValueError(f"expected two equal (N, D) batches, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[0] < 2:
        raise ValueError("batch-wise correlation needs at least 2 samples")
    return _corr(a, b, eps)


def spatial_as_batch(f: torch.Tensor) -> torch.Tensor:
    """(N, D, H, W) -> (N, H*W, D): every spatial position becomes a sample."""
    n, d = f.shape[:2]
    return f.reshape(n, d, -1).transpose(1, 2)


def cross_correlation_spatial(a: torch.Tensor, b: torch.Tensor, eps: float = VAR_EPS) -> torch.Tensor:
    """(N, D, H, W) x (N, D, H, W) -> (N, D, D), one matrix per sample."""
    if a.shape != b.shape or a.dim() != 4:
        raise ValueError(f"expected two equal (N, D, H, W) maps, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[2] * a.shape[3] < 2:
        raise ValueError("spatial correlation needs at least 2 positions")
    return _corr(spatial_as_batch(a), spatial_as_batch(b), eps)


def identity_gap(c: torch.Tensor, lam: float = DEFAULT_LAMBDA) -> torch.Tensor:
    """``sum_i (1 - c_ii)^2 + lam * sum_{i != j} c_ij^2`` for each trailing D x D matrix."""
    diag = torch.diagonal(c, dim1=-2, dim2=-1)
    on = ((1.0 - diag) ** 2).sum(dim=-1)
    off = (c * c).sum(dim=(-2, -1)) - (diag * diag).sum(dim=-1)
    return on + lam * off


def bt_loss(a: torch.Tensor, b: torch.Tensor, lam: float = DEFAULT_LAMBDA, eps: float = VAR_EPS) -> torch.Tensor:
    return identity_gap(cross_correlation_batchwise(a, b, eps), lam)


def gbt_loss(a: torch.Tensor, b: torch.Tensor, lam: float = DEFAULT_LAMBDA, eps: float = VAR_EPS) -> torch.Tensor:
    """Per-sample spatial Barlow Twins objective, averaged over the batch."""
    return identity_gap(cross_correlation_spatial(a, b, eps), lam).mean()


def mse_geometry_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def bt_loss_per_location(a: torch.Tensor, b: torch.Tensor, lam: float = DEFAULT_LAMBDA, eps: float = VAR_EPS) -> torch.Tensor:
    """Modality loss without pooling: every (sample, position) pair is one batch entry.

    Only used for the pooling ablation.
    """
    if a.shape != b.shape or a.dim() != 4:
        raise ValueError(f"expected two equal (N, D, H, W) maps, got {tuple(a.shape)} and {tuple(b.shape)}")
    d = a.shape[1]
    return bt_loss(a.permute(0, 2, 3, 1).reshape(-1, d), b.permute(0, 2, 3, 1).reshape(-1, d), lam, eps)


GEOMETRY_LOSSES = {
    "gbt": gbt_loss,
    "mse": lambda a, b, lam=DEFAULT_LAMBDA: mse_geometry_loss(a, b),
}
