"""Confidence decoder, confidence-weighted pooling and the integrity classifier."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import DegenerateInputError, DimensionError, NonFiniteLossError, ValidationError
from .fingerprint import FingerprintNet
from .fusion import (FeaturePyramid, FusionNet, MLPDecoder, _freeze, _make_optimizer, _make_schedule,
                     stack_samples, decode_anomaly, encode, param_snapshot)

log = logging.getLogger(__name__)

FEATURE_NAMES = ("a_avg", "a_max", "a_msq", "a_min", "c_avg", "c_max", "c_msq", "c_min")
LAMBDA_DET = 0.5
PROB_EPS = 1e-6


class DegenerateBatchWarning(UserWarning):
    """Detection loss saw a single-class batch and fell back to equal weights."""


@dataclass
class DetectionConfig:
    hidden: int = 128
    decoder_dim: int = 32
    lambda_det: float = LAMBDA_DET
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    lr_schedule: str = "constant"
    epochs: int = 100
    batch_size: int = 18


class IntegrityClassifier(nn.Module):
    """8 -> hidden -> 1 with ReLU, logistic output."""

    def __init__(self, hidden: int = 128):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(len(FEATURE_NAMES), hidden), nn.ReLU(inplace=True), nn.Linear(hidden, 1))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(h)[..., 0])


class DetectionHead(nn.Module):
    """Everything learned in phase 3."""

    def __init__(self, widths=(16, 32, 64, 96), decoder_dim: int = 32, hidden: int = 128):
        super().__init__()
        self.confidence_decoder = MLPDecoder(widths, decoder_dim)
        self.classifier = IntegrityClassifier(hidden)


def decode_confidence(head: DetectionHead, pyramid: FeaturePyramid) -> torch.Tensor:
    return head.confidence_decoder(pyramid)


def true_class_probability(a: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """t = (1-g)(1-a) + g a."""
    if a.shape != g.shape:
        raise DimensionError(f"map {tuple(a.shape)} vs mask {tuple(g.shape)}")
    g = torch.as_tensor(g)
    if not bool(((g == 0) | (g == 1)).all()):
        raise ValidationError("ground-truth mask must be binary")
    g = g.to(a.dtype)
    return (1 - g) * (1 - a) + g * a


def confidence_loss(c: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    if c.shape != t.shape:
        raise DimensionError(f"confidence {tuple(c.shape)} vs target {tuple(t.shape)}")
    return ((c - t) ** 2).mean()


def _weighted_stats(x: torch.Tensor, w: torch.Tensor):
    """Weighted mean, mean square, smooth max and smooth min over the last two dims.

    ``w`` need not be normalized; zero-weight pixels never influence the result.
    """
    x = x.flatten(-2)
    w = w.flatten(-2)
    wsum = w.sum(-1)
    support = w > 0
    avg = (w * x).sum(-1) / wsum
    msq = (w * x * x).sum(-1) / wsum
    log_w = torch.log(wsum)
    hi = torch.where(support, x, torch.full_like(x, -math.inf)).amax(-1, keepdim=True).detach()
    lo = torch.where(support, x, torch.full_like(x, math.inf)).amin(-1, keepdim=True).detach()
    # masked pixels are replaced by the shift so exp() stays finite
    xs_hi = torch.where(support, x, hi)
    xs_lo = torch.where(support, x, lo)
    smax = hi[..., 0] + torch.log((w * torch.exp(xs_hi - hi)).sum(-1)) - log_w
    smin = lo[..., 0] - torch.log((w * torch.exp(lo - xs_lo)).sum(-1)) + log_w
    return avg, smax, msq, smin


def pooled_features(a: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    """The 8 pooled statistics (order of ``FEATURE_NAMES``) for maps of shape (..., H, W).

    Anomaly statistics are weighted by the confidence map; confidence
    statistics use uniform weights.
    """
    if a.shape != c.shape:
        raise DimensionError(f"anomaly {tuple(a.shape)} vs confidence {tuple(c.shape)}")
    if a.ndim < 2:
        raise DimensionError("maps must have at least 2 dims")
    if bool((c.flatten(-2).sum(-1) <= 0).any()):
        raise DegenerateInputError("confidence map sums to zero; pooling weights undefined")
    a_stats = _weighted_stats(a, c)
    c_stats = _weighted_stats(c, torch.ones_like(c))
    return torch.stack(a_stats + c_stats, -1)


def classify(h: torch.Tensor, classifier: IntegrityClassifier) -> torch.Tensor:
    if h.shape[-1] != len(FEATURE_NAMES):
        raise DimensionError(f"expected {len(FEATURE_NAMES)} features, got {h.shape[-1]}")
    if not bool(torch.isfinite(h).all()):
        raise ValidationError("non-finite detection feature")
    return classifier(h)


def detection_loss(y: torch.Tensor, label: torch.Tensor, class_weights=None) -> torch.Tensor:
    """Class-balanced binary cross-entropy over a batch of scores.

    Default weights give each present class half the total weight
    (inverse class frequency). A single-class batch falls back to 0.5/0.5
    and emits ``DegenerateBatchWarning``.
    """
    y = torch.atleast_1d(y)
    label = torch.atleast_1d(torch.as_tensor(label)).to(y.dtype)
    if y.shape != label.shape:
        raise DimensionError(f"scores {tuple(y.shape)} vs labels {tuple(label.shape)}")
    yc = y.clamp(PROB_EPS, 1 - PROB_EPS)
    pos = label > 0.5
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if class_weights is not None:
        w_neg, w_pos = class_weights
        w = torch.where(pos, y.new_tensor(w_pos / max(n_pos, 1)), y.new_tensor(w_neg / max(n_neg, 1)))
    elif n_pos == 0 or n_neg == 0:
        warnings.warn("single-class batch: detection loss uses 0.5/0.5 weights", DegenerateBatchWarning)
        w = torch.full_like(y, 0.5 / len(y))
    else:
        w = torch.where(pos, y.new_tensor(0.5 / n_pos), y.new_tensor(0.5 / n_neg))
    nll = -(label * torch.log(yc) + (1 - label) * torch.log1p(-yc))
    return (w * nll).sum()


def phase3_loss(c, t, y, label, lambda_det=LAMBDA_DET):
    return confidence_loss(c, t) + lambda_det * detection_loss(y, label)


def train_phase3(cfg: DetectionConfig, samples, fp_model: FingerprintNet, fusion: FusionNet,
                 seed: int = 0, head: DetectionHead | None = None):
    """Train the confidence decoder and classifier; everything upstream stays frozen.

    Pyramids and anomaly maps are computed once, since their producers are frozen.
    Returns ``(head, history)``.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    widths = fusion.encoder.widths
    head = head if head is not None else DetectionHead(widths, cfg.decoder_dim, cfg.hidden)
    dtype = next(head.parameters()).dtype
    _freeze(fp_model)
    _freeze(fusion)
    before = {**{"fp." + k: v for k, v in param_snapshot(fp_model).items()},
              **{"fusion." + k: v for k, v in param_snapshot(fusion).items()}}

    x, r, g = stack_samples(samples, fp_model, dtype)
    labels = torch.tensor([s.label for s in samples], dtype=dtype)
    with torch.no_grad():
        pyr = encode(fusion, x, r)
        a = decode_anomaly(fusion, pyr)
    t = true_class_probability(a, g)

    n = len(samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    opt = _make_optimizer(head.parameters(), cfg)
    sched = _make_schedule(opt, cfg, steps_per_epoch * cfg.epochs)
    history = []
    step = 0
    head.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = torch.as_tensor(order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            c = decode_confidence(head, pyr.index(idx))
            h = pooled_features(a[idx], c)
            y = classify(h, head.classifier)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DegenerateBatchWarning)
                loss = phase3_loss(c, t[idx], y, labels[idx], cfg.lambda_det)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"non-finite phase-3 loss at step {step}", step=step,
                                         batch_id=idx.tolist())
            opt.zero_grad()
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            history.append((step, loss.item()))
            step += 1
        if epoch % 20 == 0 or epoch == cfg.epochs - 1:
            log.info("phase3 epoch %d loss %.4f", epoch, history[-1][1])
    head.eval()
    after = {**{"fp." + k: v for k, v in param_snapshot(fp_model).items()},
             **{"fusion." + k: v for k, v in param_snapshot(fusion).items()}}
    if any(not torch.equal(before[k], after[k]) for k in before):
        raise RuntimeError("frozen parameters changed during phase 3")
    return head, history
