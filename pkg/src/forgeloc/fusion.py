"""Dual-branch RGB + fingerprint encoder, anomaly decoder and localization losses.

Each branch is a small four-stage hierarchical transformer (strides 4, 8, 16,
32). After every stage the two branches rectify each other (CMFRM) and are
merged by cross-attention (FFM); the four merged maps feed an all-MLP decoder.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError, NonFiniteLossError
from .fingerprint import FingerprintNet
from .histories import resize
from .imageio import jpeg_roundtrip

log = logging.getLogger(__name__)

STRIDES = (4, 8, 16, 32)
GAMMA0 = 0.5
GAMMA1 = 2.5
LAMBDA_CE = 0.3
CLAMP_EPS = 1e-6
DICE_EPS = 1.0


@dataclass
class FusionConfig:
    widths: tuple[int, ...] = (16, 32, 64, 96)
    heads: tuple[int, ...] = (1, 2, 4, 6)
    sr_ratios: tuple[int, ...] = (8, 4, 2, 1)
    decoder_dim: int = 32
    lambda_ce: float = LAMBDA_CE
    gamma0: float = GAMMA0
    gamma1: float = GAMMA1
    optimizer: str = "sgd"
    lr: float = 0.005
    momentum: float = 0.9
    lr_schedule: str = "linear"
    epochs: int = 100
    batch_size: int = 18
    augment: bool = True
    crop_size: int = 64
    resize_range: tuple[float, float] = (0.5, 1.5)
    jpeg_range: tuple[int, int] = (30, 100)


# --- building blocks -------------------------------------------------------

class PatchEmbed(nn.Module):
    def __init__(self, in_ch, dim, kernel, stride):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, dim, kernel, stride, padding=kernel // 2)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        x = self.proj(x)
        h, w = x.shape[-2:]
        return self.norm(x.flatten(2).transpose(1, 2)), h, w


class SpatialReduction(nn.Module):
    """Shrinks a token grid by ``ratio`` for cheap keys/values."""

    def __init__(self, dim, ratio):
        super().__init__()
        self.ratio = ratio
        if ratio > 1:
            self.conv = nn.Conv2d(dim, dim, ratio, ratio)
            self.norm = nn.LayerNorm(dim)

    def forward(self, tokens, h, w):
        if self.ratio == 1:
            return tokens
        b, n, c = tokens.shape
        x = tokens.transpose(1, 2).reshape(b, c, h, w)
        x = self.conv(x).flatten(2).transpose(1, 2)
        return self.norm(x)


class EfficientAttention(nn.Module):
    """Multi-head attention whose keys/values come from a spatially reduced grid.

    Queries and keys may belong to different modalities (cross-attention).
    No positional encoding is used.
    """

    def __init__(self, dim, heads, sr_ratio):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.sr = SpatialReduction(dim, sr_ratio)
        self.proj = nn.Linear(dim, dim)

    def _qkv(self, xq, xkv, h, w):
        b, n, c = xq.shape
        q = self.q(xq).reshape(b, n, self.heads, c // self.heads).transpose(1, 2)
        kv = self.kv(self.sr(xkv, h, w)).reshape(b, -1, 2, self.heads, c // self.heads)
        k, v = kv.permute(2, 0, 3, 1, 4)
        return q, k, v

    def weights(self, xq, xkv, h, w):
        """Row-stochastic attention matrix, shape B×heads×N×M."""
        q, k, _ = self._qkv(xq, xkv, h, w)
        return ((q @ k.transpose(-2, -1)) * self.scale).softmax(-1)

    def forward(self, xq, xkv, h, w):
        b, n, c = xq.shape
        q, k, v = self._qkv(xq, xkv, h, w)
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class MixFFN(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, h, w):
        x = self.fc1(x)
        b, n, c = x.shape
        x = self.dw(x.transpose(1, 2).reshape(b, c, h, w)).flatten(2).transpose(1, 2)
        return self.fc2(F.gelu(x))


class TransformerBlock(nn.Module):
    def __init__(self, dim, heads, sr_ratio, mlp_ratio=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = EfficientAttention(dim, heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = MixFFN(dim, dim * mlp_ratio)

    def forward(self, x, h, w):
        y = self.norm1(x)
        x = x + self.attn(y, y, h, w)
        return x + self.ffn(self.norm2(x), h, w)


class Stage(nn.Module):
    def __init__(self, in_ch, dim, heads, sr_ratio, first):
        super().__init__()
        self.embed = PatchEmbed(in_ch, dim, 7 if first else 3, 4 if first else 2)
        self.block = TransformerBlock(dim, heads, sr_ratio)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        t, h, w = self.embed(x)
        t = self.norm(self.block(t, h, w))
        return t.transpose(1, 2).reshape(x.shape[0], -1, h, w)


def _check_pair(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


class CMFRM(nn.Module):
    """Cross-modal feature rectification.

    Channel weights come from pooled statistics of both maps, spatial weights
    from a 1×1 conv over both maps; each branch receives the other branch's
    features scaled by those weights, mixed with ``lambda_c`` / ``lambda_s``.
    """

    def __init__(self, dim, reduction=1, lambda_c=0.5, lambda_s=0.5):
        super().__init__()
        self.channel_mlp = nn.Sequential(
            nn.Linear(4 * dim, 4 * dim // reduction), nn.ReLU(inplace=True),
            nn.Linear(4 * dim // reduction, 2 * dim), nn.Sigmoid())
        self.spatial = nn.Sequential(
            nn.Conv2d(2 * dim, dim // reduction, 1), nn.ReLU(inplace=True),
            nn.Conv2d(dim // reduction, 2, 1), nn.Sigmoid())
        self.lambda_c = lambda_c
        self.lambda_s = lambda_s

    def forward(self, x_rgb, x_np):
        _check_pair(x_rgb, x_np)
        b, c = x_rgb.shape[:2]
        both = torch.cat([x_rgb, x_np], 1)
        pooled = torch.cat([both.mean((2, 3)), both.amax((2, 3))], 1)
        cw = self.channel_mlp(pooled).view(b, 2, c, 1, 1)
        sw = self.spatial(both).unsqueeze(2)
        rgb = x_rgb + self.lambda_c * cw[:, 1] * x_np + self.lambda_s * sw[:, 1] * x_np
        npf = x_np + self.lambda_c * cw[:, 0] * x_rgb + self.lambda_s * sw[:, 0] * x_rgb
        return rgb, npf


class FFM(nn.Module):
    """Merges rectified RGB and fingerprint maps via two-way cross-attention."""

    def __init__(self, dim, heads, sr_ratio):
        super().__init__()
        self.proj_rgb = nn.Linear(dim, 2 * dim)
        self.proj_np = nn.Linear(dim, 2 * dim)
        self.attn_rgb = EfficientAttention(dim, heads, sr_ratio)  # rgb queries, fingerprint keys
        self.attn_np = EfficientAttention(dim, heads, sr_ratio)
        self.end_rgb = nn.Linear(2 * dim, dim)
        self.end_np = nn.Linear(2 * dim, dim)
        self.norm_rgb = nn.LayerNorm(dim)
        self.norm_np = nn.LayerNorm(dim)
        self.merge_res = nn.Conv2d(2 * dim, dim, 1, bias=False)
        self.merge = nn.Sequential(
            nn.Conv2d(2 * dim, dim, 1), nn.Conv2d(dim, dim, 3, padding=1, groups=dim),
            nn.ReLU(inplace=True), nn.Conv2d(dim, dim, 1))
        self.norm = nn.GroupNorm(1, dim)

    def _split(self, x_rgb, x_np):
        t_rgb = x_rgb.flatten(2).transpose(1, 2)
        t_np = x_np.flatten(2).transpose(1, 2)
        y_rgb, u_rgb = F.relu(self.proj_rgb(t_rgb)).chunk(2, -1)
        y_np, u_np = F.relu(self.proj_np(t_np)).chunk(2, -1)
        return t_rgb, t_np, y_rgb, u_rgb, y_np, u_np

    def attention_weights(self, x_rgb, x_np):
        """(rgb→fingerprint, fingerprint→rgb) attention matrices."""
        _check_pair(x_rgb, x_np)
        h, w = x_rgb.shape[-2:]
        _, _, _, u_rgb, _, u_np = self._split(x_rgb, x_np)
        return self.attn_rgb.weights(u_rgb, u_np, h, w), self.attn_np.weights(u_np, u_rgb, h, w)

    def forward(self, x_rgb, x_np):
        _check_pair(x_rgb, x_np)
        b, c, h, w = x_rgb.shape
        t_rgb, t_np, y_rgb, u_rgb, y_np, u_np = self._split(x_rgb, x_np)
        v_rgb = self.attn_rgb(u_rgb, u_np, h, w)
        v_np = self.attn_np(u_np, u_rgb, h, w)
        o_rgb = self.norm_rgb(t_rgb + self.end_rgb(torch.cat([y_rgb, v_rgb], -1)))
        o_np = self.norm_np(t_np + self.end_np(torch.cat([y_np, v_np], -1)))
        both = torch.cat([o_rgb, o_np], -1).transpose(1, 2).reshape(b, 2 * c, h, w)
        return self.norm(self.merge_res(both) + self.merge(both))


@dataclass
class FeaturePyramid:
    stages: list[torch.Tensor]
    input_hw: tuple[int, int]
    padded_hw: tuple[int, int]

    def detach(self) -> "FeaturePyramid":
        return FeaturePyramid([s.detach() for s in self.stages], self.input_hw, self.padded_hw)

    def index(self, idx) -> "FeaturePyramid":
        return FeaturePyramid([s[idx] for s in self.stages], self.input_hw, self.padded_hw)


class DualEncoder(nn.Module):
    def __init__(self, widths=(16, 32, 64, 96), heads=(1, 2, 4, 6), sr_ratios=(8, 4, 2, 1)):
        super().__init__()
        if not len(widths) == len(heads) == len(sr_ratios) == 4:
            raise ConfigError("encoder needs exactly 4 stages")
        self.widths = tuple(widths)
        ins_rgb = (3,) + tuple(widths[:-1])
        ins_np = (1,) + tuple(widths[:-1])
        self.rgb = nn.ModuleList(Stage(i, d, h, s, k == 0) for k, (i, d, h, s) in enumerate(zip(ins_rgb, widths, heads, sr_ratios)))
        self.np = nn.ModuleList(Stage(i, d, h, s, k == 0) for k, (i, d, h, s) in enumerate(zip(ins_np, widths, heads, sr_ratios)))
        self.rectify = nn.ModuleList(CMFRM(d) for d in widths)
        self.fuse = nn.ModuleList(FFM(d, h, s) for d, h, s in zip(widths, heads, sr_ratios))

    def forward(self, x, r):
        feats = []
        for stage_rgb, stage_np, rect, fuse in zip(self.rgb, self.np, self.rectify, self.fuse):
            x = stage_rgb(x)
            r = stage_np(r)
            x, r = rect(x, r)
            feats.append(fuse(x, r))
        return feats


class MLPDecoder(nn.Module):
    """All-MLP head: 1×1 projections, bilinear upsampling, 1×1 fusion, 1-channel logit."""

    def __init__(self, widths=(16, 32, 64, 96), dim=32):
        super().__init__()
        self.proj = nn.ModuleList(nn.Conv2d(c, dim, 1) for c in widths)
        self.fuse = nn.Sequential(nn.Conv2d(len(widths) * dim, dim, 1), nn.GroupNorm(1, dim), nn.ReLU(inplace=True))
        self.pred = nn.Conv2d(dim, 1, 1)

    def logits(self, pyramid: FeaturePyramid) -> torch.Tensor:
        stages = pyramid.stages
        size = stages[0].shape[-2:]
        ups = [F.interpolate(p(s), size=size, mode="bilinear", align_corners=False) if s.shape[-2:] != size else p(s)
               for p, s in zip(self.proj, stages)]
        z = self.pred(self.fuse(torch.cat(ups, 1)))
        z = F.interpolate(z, size=pyramid.padded_hw, mode="bilinear", align_corners=False)
        h, w = pyramid.input_hw
        return z[:, 0, :h, :w]

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        return torch.sigmoid(self.logits(pyramid))


class FusionNet(nn.Module):
    """Encoder plus anomaly decoder (everything learned in phase 2)."""

    def __init__(self, widths=(16, 32, 64, 96), heads=(1, 2, 4, 6), sr_ratios=(8, 4, 2, 1), decoder_dim=32):
        super().__init__()
        self.encoder = DualEncoder(widths, heads, sr_ratios)
        self.anomaly_decoder = MLPDecoder(widths, decoder_dim)

    @classmethod
    def from_config(cls, cfg: FusionConfig):
        return cls(tuple(cfg.widths), tuple(cfg.heads), tuple(cfg.sr_ratios), cfg.decoder_dim)


def reflect_pad(x: torch.Tensor, multiple: int = 32) -> torch.Tensor:
    """Reflection-pad bottom/right up to a multiple; repeats when the pad exceeds the size."""
    h, w = x.shape[-2:]
    th, tw = math.ceil(h / multiple) * multiple, math.ceil(w / multiple) * multiple
    while x.shape[-2] < th or x.shape[-1] < tw:
        ph = min(th - x.shape[-2], x.shape[-2] - 1)
        pw = min(tw - x.shape[-1], x.shape[-1] - 1)
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    return x


def encode(model: FusionNet, x: torch.Tensor, r: torch.Tensor) -> FeaturePyramid:
    """Encode an N×3×H×W image and its N×1×H×W fingerprint."""
    if x.ndim != 4 or x.shape[1] != 3:
        raise DimensionError(f"image must be N×3×H×W, got {tuple(x.shape)}")
    if r.ndim != 4 or r.shape[1] != 1:
        raise DimensionError(f"fingerprint must be N×1×H×W, got {tuple(r.shape)}")
    if x.shape[-2:] != r.shape[-2:] or x.shape[0] != r.shape[0]:
        raise DimensionError(f"image {tuple(x.shape)} and fingerprint {tuple(r.shape)} disagree")
    hw = tuple(x.shape[-2:])
    xp, rp = reflect_pad(x), reflect_pad(r)
    feats = model.encoder(xp, rp)
    return FeaturePyramid(feats, hw, tuple(xp.shape[-2:]))


def decode_anomaly(model: FusionNet, pyramid: FeaturePyramid) -> torch.Tensor:
    """N×H×W anomaly probabilities at the original input resolution."""
    return model.anomaly_decoder(pyramid)


# --- losses ----------------------------------------------------------------

def weighted_ce_loss(a, g, gamma0=GAMMA0, gamma1=GAMMA1, eps=CLAMP_EPS):
    """-(1/N) Σ [γ0 (1-g) log(1-a) + γ1 g log a], a clamped to [eps, 1-eps]."""
    if a.shape != g.shape:
        raise DimensionError(f"map {tuple(a.shape)} vs mask {tuple(g.shape)}")
    g = g.to(a.dtype)
    a = a.clamp(eps, 1.0 - eps)
    return -(gamma0 * (1 - g) * torch.log1p(-a) + gamma1 * g * torch.log(a)).mean()


def dice_loss(a, g, eps=DICE_EPS):
    """1 - (2Σag + eps)/(Σa + Σg + eps) per map, averaged over leading dims."""
    if a.shape != g.shape:
        raise DimensionError(f"map {tuple(a.shape)} vs mask {tuple(g.shape)}")
    g = g.to(a.dtype)
    dims = (-2, -1) if a.ndim >= 2 else (-1,)
    inter = (a * g).sum(dims)
    total = a.sum(dims) + g.sum(dims)
    return (1.0 - (2.0 * inter + eps) / (total + eps)).mean()


def localization_loss(a, g, lambda_ce=LAMBDA_CE, gamma0=GAMMA0, gamma1=GAMMA1):
    return lambda_ce * weighted_ce_loss(a, g, gamma0, gamma1) + (1.0 - lambda_ce) * dice_loss(a, g)


# --- phase 2 training ------------------------------------------------------

def param_snapshot(module: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def augment_sample(img: np.ndarray, mask: np.ndarray, rng: np.random.Generator, cfg: FusionConfig):
    """Random resize of image+mask, then JPEG of the image, then crop to cfg.crop_size."""
    lo, hi = cfg.resize_range
    f = rng.uniform(lo, hi)
    hw = (max(2, int(round(img.shape[0] * f))), max(2, int(round(img.shape[1] * f))))
    img = np.clip(resize(img, hw), 0.0, 1.0)
    m = F.interpolate(torch.from_numpy(mask.astype(np.float32))[None, None], size=hw, mode="nearest")
    mask = m[0, 0].numpy() > 0.5
    q = int(rng.integers(cfg.jpeg_range[0], cfg.jpeg_range[1] + 1))
    img = jpeg_roundtrip(img, q)
    return random_crop(img, mask, cfg.crop_size, rng)


def random_crop(img, mask, size, rng):
    if size <= 0:
        return img, mask
    h, w = mask.shape
    if h < size or w < size:
        ph, pw = max(0, size - h), max(0, size - w)
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect")
        mask = np.pad(mask, ((0, ph), (0, pw)), mode="constant")
        h, w = mask.shape
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return img[y:y + size, x:x + size], mask[y:y + size, x:x + size]


def _make_optimizer(params, cfg):
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr)
    raise ConfigError(f"unknown optimizer {cfg.optimizer!r}")


def _make_schedule(opt, cfg, total_steps):
    if cfg.lr_schedule == "linear":
        return torch.optim.lr_scheduler.LambdaLR(opt, lambda s: max(0.0, 1.0 - s / max(1, total_steps)))
    if cfg.lr_schedule == "constant":
        return None
    raise ConfigError(f"unknown lr schedule {cfg.lr_schedule!r}")


def _freeze(module: nn.Module):
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)


def fingerprint_batch(fp_model: FingerprintNet, x: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return fp_model(x)


def train_phase2(cfg: FusionConfig, samples, fp_model: FingerprintNet, seed: int = 0,
                 model: FusionNet | None = None):
    """Train encoder + anomaly decoder on (image, mask) pairs with the fingerprint frozen.

    Returns ``(model, history)``; ``history`` holds ``(step, loss)`` pairs.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = model if model is not None else FusionNet.from_config(cfg)
    dtype = next(model.parameters()).dtype
    _freeze(fp_model)
    before = param_snapshot(fp_model)

    n = len(samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    opt = _make_optimizer(model.parameters(), cfg)
    sched = _make_schedule(opt, cfg, total)

    cache = None
    if not cfg.augment and cfg.crop_size <= 0:
        cache = stack_samples(samples, fp_model, dtype)

    history = []
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if cache is not None:
                x, r, g = (t[idx] for t in cache)
            else:
                x, r, g = _prepare_batch([samples[i] for i in idx], fp_model, cfg, rng, dtype)
            a = decode_anomaly(model, encode(model, x, r))
            loss = localization_loss(a, g, cfg.lambda_ce, cfg.gamma0, cfg.gamma1)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"non-finite phase-2 loss at epoch {epoch} step {step}",
                                         step=step, batch_id=[int(i) for i in idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            history.append((step, loss.item()))
            step += 1
        if epoch % 10 == 0 or epoch == cfg.epochs - 1:
            log.info("phase2 epoch %d loss %.4f", epoch, history[-1][1])
    model.eval()
    after = param_snapshot(fp_model)
    if any(not torch.equal(before[k], after[k]) for k in before):
        raise RuntimeError("fingerprint parameters changed during phase 2")
    return model, history


def stack_samples(samples, fp_model, dtype):
    shapes = {s.image.shape for s in samples}
    if len(shapes) != 1:
        raise ConfigError(f"full-image training needs equal sizes, got {sorted(shapes)}; set crop_size")
    x = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).to(dtype)
    g = torch.from_numpy(np.stack([s.mask for s in samples])).to(dtype)
    r = fingerprint_batch(fp_model, x.to(next(fp_model.parameters()).dtype)).to(dtype)
    return x, r, g


def _prepare_batch(batch, fp_model, cfg, rng, dtype):
    imgs, masks = [], []
    for s in batch:
        if cfg.augment:
            img, mask = augment_sample(s.image, s.mask, rng, cfg)
        else:
            img, mask = random_crop(s.image, s.mask, cfg.crop_size, rng)
        imgs.append(img)
        masks.append(mask)
    x = torch.from_numpy(np.stack(imgs)).permute(0, 3, 1, 2).to(dtype)
    g = torch.from_numpy(np.stack(masks)).to(dtype)
    r = fingerprint_batch(fp_model, x.to(next(fp_model.parameters()).dtype)).to(dtype)
    return x, r, g
