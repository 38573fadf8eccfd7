"""Noise-sensitive fingerprint extractor trained with a contrastive objective."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import DimensionError, LabelingError, NonFiniteLossError
from .histories import CameraImageSet, sample_contrastive_batch

log = logging.getLogger(__name__)

MIN_SIDE = 16


@dataclass
class FingerprintConfig:
    layers: int = 7
    width: int = 24
    batch_norm: bool = False
    steps: int = 200
    lr: float = 1e-3
    lr_decay_every: int = 0  # steps between 10x lr drops; 0 disables
    log_every: int = 10


class FingerprintNet(nn.Module):
    """DnCNN-style stack: conv+ReLU, (layers-2) × conv(+BN)+ReLU, conv to 1 channel."""

    def __init__(self, layers: int = 7, width: int = 24, batch_norm: bool = False):
        super().__init__()
        if layers < 3:
            raise ValueError("fingerprint network needs at least 3 layers")
        self.layers = layers
        self.width = width
        self.batch_norm = batch_norm
        body: list[nn.Module] = [nn.Conv2d(3, width, 3, padding=1), nn.ReLU(inplace=True)]
        for _ in range(layers - 2):
            body.append(nn.Conv2d(width, width, 3, padding=1, bias=not batch_norm))
            if batch_norm:
                body.append(nn.BatchNorm2d(width))
            body.append(nn.ReLU(inplace=True))
        body.append(nn.Conv2d(width, 1, 3, padding=1))
        self.body = nn.Sequential(*body)

    @property
    def receptive_radius(self) -> int:
        return self.layers

    @property
    def final(self) -> nn.Conv2d:
        return self.body[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected N×3×H×W input, got {tuple(x.shape)}")
        if min(x.shape[-2:]) < MIN_SIDE:
            raise DimensionError(f"input {tuple(x.shape[-2:])} smaller than {MIN_SIDE}×{MIN_SIDE}")
        return self.body(x)


def to_nchw(img, dtype=None) -> torch.Tensor:
    """H×W×3 array/tensor (or N×H×W×3) to an N×3×H×W tensor."""
    t = torch.as_tensor(np.asarray(img) if not torch.is_tensor(img) else img)
    if t.ndim == 3:
        t = t[None]
    if t.ndim != 4 or t.shape[-1] != 3:
        raise DimensionError(f"expected H×W×3 image, got {tuple(t.shape)}")
    t = t.permute(0, 3, 1, 2)
    if dtype is not None:
        t = t.to(dtype)
    return t.contiguous()


def extract_fingerprint(model: FingerprintNet, img) -> torch.Tensor:
    """Return the H×W×1 fingerprint of an H×W×3 image in [0,1]."""
    param = next(model.parameters())
    x = to_nchw(img, dtype=param.dtype)
    return model(x)[0].permute(1, 2, 0)


def pairwise_sq_distances(residuals: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distances between rows of an n×d matrix (or n×... residuals)."""
    r = residuals.reshape(residuals.shape[0], -1)
    if r.shape[0] < 2:
        raise ValueError("need at least two residuals")
    sq = (r * r).sum(1)
    d = sq[:, None] + sq[None, :] - 2.0 * (r @ r.T)
    d = d.clamp_min(0.0)
    d = 0.5 * (d + d.T)
    eye = torch.eye(d.shape[0], dtype=torch.bool, device=d.device)
    return d.masked_fill(eye, 0.0)


def positive_mask(labels) -> torch.Tensor:
    """Boolean n×n mask of positives from per-sample label rows.

    ``labels`` may already be a square boolean mask, used as-is (diagonal
    dropped).
    """
    lab = torch.as_tensor(np.asarray(labels) if not torch.is_tensor(labels) else labels)
    n = lab.shape[0]
    if lab.dtype == torch.bool and lab.ndim == 2 and lab.shape[1] == n:
        mask = lab.clone()
    else:
        lab = lab.reshape(n, -1)
        mask = (lab[:, None, :] == lab[None, :, :]).all(-1)
    mask.fill_diagonal_(False)
    return mask


def contrastive_loss(dists: torch.Tensor, labels) -> torch.Tensor:
    """-Σ_i log( Σ_{j∈P_i} exp(-s_ij) / Σ_{j≠i} exp(-s_ij) ).

    ``labels`` are (camera, position, history) rows or a precomputed positive
    mask. Every row must have at least one positive.
    """
    pos = positive_mask(labels).to(dists.device)
    n = dists.shape[0]
    empty = (~pos.any(1)).nonzero().flatten()
    if len(empty):
        raise LabelingError(f"{len(empty)} patches have no positive partner, e.g. index {int(empty[0])}")
    logits = -dists
    eye = torch.eye(n, dtype=torch.bool, device=dists.device)
    neg_inf = torch.finfo(dists.dtype).min
    # logsumexp is max-shifted internally
    log_num = torch.logsumexp(logits.masked_fill(~pos, neg_inf), dim=1)
    log_den = torch.logsumexp(logits.masked_fill(eye, neg_inf), dim=1)
    return -(log_num - log_den).sum()


def batch_residuals(model: FingerprintNet, patches: np.ndarray) -> torch.Tensor:
    param = next(model.parameters())
    x = torch.from_numpy(np.ascontiguousarray(patches)).permute(0, 3, 1, 2).to(param.dtype)
    return model(x).flatten(1)


def build_fingerprint_model(cfg: FingerprintConfig, seed: int) -> FingerprintNet:
    torch.manual_seed(seed)
    return FingerprintNet(cfg.layers, cfg.width, cfg.batch_norm)


def train_fingerprint_phase1(cfg: FingerprintConfig, dataset: CameraImageSet, seed: int = 0,
                             model: FingerprintNet | None = None):
    """Adam on the contrastive loss, one freshly sampled batch per step.

    Returns ``(model, history)`` with ``history`` a list of ``(step, loss)``.
    """
    model = model if model is not None else build_fingerprint_model(cfg, seed)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = None
    if cfg.lr_decay_every > 0:
        sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.lr_decay_every, gamma=0.1)
    history = []
    for step in range(cfg.steps):
        batch_seed = seed * 1_000_003 + step
        batch = sample_contrastive_batch(dataset, batch_seed)
        res = batch_residuals(model, batch.patches)
        loss = contrastive_loss(pairwise_sq_distances(res), batch.labels)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(
                f"non-finite contrastive loss at step {step} (batch seed {batch_seed})",
                step=step, batch_id=batch_seed,
                snapshot={"history_ids": batch.history_texts(), "camera_ids": batch.camera_id.tolist()},
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        if sched is not None:
            sched.step()
        history.append((step, loss.item()))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("phase1 step %d loss %.4f", step, history[-1][1])
    model.eval()
    return model, history


