"""PNG / JPEG helpers operating on float images in [0, 1]."""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float64) / 255.0


def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    """Encode an H×W×3 float image as JPEG at ``quality`` and decode it back."""
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGB").save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with Image.open(buf) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def write_image(path: str | Path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path, format="PNG")


def write_map(path: str | Path, values: np.ndarray) -> None:
    """Store a [0,1] map as 8-bit grayscale PNG, quantized as round(255·v)."""
    Image.fromarray(to_uint8(values), mode="L").save(path, format="PNG")


def blockiness(img: np.ndarray, block: int = 8) -> float:
    """Ratio of mean absolute horizontal+vertical jumps across block boundaries
    to jumps inside blocks. Values near 1 mean no visible block grid."""
    x = np.asarray(img, dtype=np.float64)
    if x.ndim == 3:
        x = x.mean(axis=2)
    dh = np.abs(np.diff(x, axis=1))
    dv = np.abs(np.diff(x, axis=0))
    col = np.arange(dh.shape[1])
    row = np.arange(dv.shape[0])
    at_h = (col % block) == block - 1
    at_v = (row % block) == block - 1
    across = np.concatenate([dh[:, at_h].ravel(), dv[at_v, :].ravel()])
    inside = np.concatenate([dh[:, ~at_h].ravel(), dv[~at_v, :].ravel()])
    return float(across.mean() / max(inside.mean(), 1e-12))
