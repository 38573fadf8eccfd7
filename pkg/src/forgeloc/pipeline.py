"""Full inference pipeline: fingerprint -> encoder -> two decoders -> pooling -> score."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .detection import DetectionConfig, DetectionHead, classify, decode_confidence, pooled_features
from .errors import DimensionError
from .fingerprint import MIN_SIDE, FingerprintConfig, FingerprintNet, to_nchw
from .fusion import FusionConfig, FusionNet, decode_anomaly, encode

FINGERPRINT_CKPT = "fingerprint.ckpt"
FUSION_CKPT = "fusion.ckpt"
DETECTOR_CKPT = "detector.ckpt"


@dataclass
class Analysis:
    anomaly: np.ndarray
    confidence: np.ndarray
    features: np.ndarray
    score: float
    fingerprint: np.ndarray | None = None


def _from_echo(cls, echo: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    kw = {}
    for k, v in echo.items():
        if k in names:
            kw[k] = tuple(v) if isinstance(v, list) else v
    return cls(**kw)


def config_echo(cfg) -> dict:
    return dataclasses.asdict(cfg)


class ModelBundle:
    def __init__(self, fingerprint: FingerprintNet, fusion: FusionNet, head: DetectionHead):
        self.fingerprint = fingerprint.eval()
        self.fusion = fusion.eval()
        self.head = head.eval()

    @staticmethod
    def load_fingerprint(path) -> tuple[FingerprintNet, FingerprintConfig]:
        state, echo = load_checkpoint(path, "fingerprint")
        cfg = _from_echo(FingerprintConfig, echo)
        model = FingerprintNet(cfg.layers, cfg.width, cfg.batch_norm)
        model.load_state_dict(state)
        return model.eval(), cfg

    @staticmethod
    def load_fusion(path) -> tuple[FusionNet, FusionConfig]:
        state, echo = load_checkpoint(path, "fusion")
        cfg = _from_echo(FusionConfig, echo)
        model = FusionNet.from_config(cfg)
        model.load_state_dict(state)
        return model.eval(), cfg

    @staticmethod
    def load_head(path, widths) -> tuple[DetectionHead, DetectionConfig]:
        state, echo = load_checkpoint(path, "detector")
        cfg = _from_echo(DetectionConfig, echo)
        head = DetectionHead(widths, cfg.decoder_dim, cfg.hidden)
        head.load_state_dict(state)
        return head.eval(), cfg

    @classmethod
    def from_dir(cls, ckpt_dir: str | Path) -> "ModelBundle":
        d = Path(ckpt_dir)
        fp, _ = cls.load_fingerprint(d / FINGERPRINT_CKPT)
        fusion, _ = cls.load_fusion(d / FUSION_CKPT)
        head, _ = cls.load_head(d / DETECTOR_CKPT, fusion.encoder.widths)
        return cls(fp, fusion, head)

    def save(self, ckpt_dir: str | Path, fp_cfg, fusion_cfg, det_cfg):
        d = Path(ckpt_dir)
        save_checkpoint(d / FINGERPRINT_CKPT, "fingerprint", self.fingerprint, config_echo(fp_cfg))
        save_checkpoint(d / FUSION_CKPT, "fusion", self.fusion, config_echo(fusion_cfg))
        save_checkpoint(d / DETECTOR_CKPT, "detector", self.head, config_echo(det_cfg))

    @torch.no_grad()
    def analyze(self, img: np.ndarray, keep_fingerprint: bool = False) -> Analysis:
        """Run the full pipeline on one H×W×3 image in [0,1]."""
        img = np.asarray(img)
        if img.ndim != 3 or img.shape[2] != 3:
            raise DimensionError(f"expected H×W×3 image, got {img.shape}")
        if min(img.shape[:2]) < MIN_SIDE:
            raise DimensionError(f"image {img.shape[:2]} smaller than {MIN_SIDE}×{MIN_SIDE}")
        dtype = next(self.fusion.parameters()).dtype
        x = to_nchw(img, dtype=dtype)
        r = self.fingerprint(x.to(next(self.fingerprint.parameters()).dtype)).to(dtype)
        pyr = encode(self.fusion, x, r)
        a = decode_anomaly(self.fusion, pyr)
        c = decode_confidence(self.head, pyr)
        h = pooled_features(a, c)
        y = classify(h, self.head.classifier)
        return Analysis(a[0].numpy(), c[0].numpy(), h[0].numpy(), float(y[0]),
                        r[0, 0].numpy() if keep_fingerprint else None)
