"""Degradation grid: blur, noise, gamma and JPEG applied before analysis."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .imageio import jpeg_roundtrip
from .metrics import EvalRecord, evaluate_record, summarize

FAMILIES = ("identity", "blur", "noise", "gamma", "jpeg")


def _validate(family: str, param):
    if family not in FAMILIES:
        raise ValidationError(f"unknown transform family {family!r}; expected one of {FAMILIES}")
    if family == "blur" and not (int(param) == param and 1 <= param <= 31 and int(param) % 2 == 1):
        raise ValidationError(f"blur kernel size must be an odd integer in [1, 31], got {param}")
    if family == "noise" and not 0.0 <= param <= 0.5:
        raise ValidationError(f"noise std must lie in [0, 0.5], got {param}")
    if family == "gamma" and not 0.0 < param <= 5.0:
        raise ValidationError(f"gamma must lie in (0, 5], got {param}")
    if family == "jpeg" and not (int(param) == param and 1 <= param <= 100):
        raise ValidationError(f"jpeg quality must be an integer in [1, 100], got {param}")


def gaussian_kernel1d(size: int) -> np.ndarray:
    # sigma from kernel size, the usual OpenCV convention
    sigma = 0.3 * ((size - 1) * 0.5 - 1) + 0.8
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-x ** 2 / (2 * sigma ** 2))
    return k / k.sum()


def apply_transform(img: np.ndarray, family: str, param=None, seed: int = 0) -> np.ndarray:
    _validate(family, param)
    if family == "identity":
        return img
    if family == "blur":
        if int(param) == 1:
            return img
        k = gaussian_kernel1d(int(param))
        out = ndimage.convolve1d(img, k, axis=0, mode="reflect")
        return np.clip(ndimage.convolve1d(out, k, axis=1, mode="reflect"), 0.0, 1.0)
    if family == "noise":
        rng = np.random.default_rng([seed, 4242])
        return np.clip(img + rng.normal(0.0, param, size=img.shape), 0.0, 1.0)
    if family == "gamma":
        return np.clip(img, 0.0, 1.0) ** param
    return jpeg_roundtrip(img, int(param))


def cell_name(family: str, param) -> str:
    return family if family == "identity" else f"{family}_{param:g}"


def parse_grid(values: dict[str, str]) -> dict[str, list]:
    """``{"jpeg": "100, 70, 40"}`` -> ``{"jpeg": [100, 70, 40]}`` (validated)."""
    grid = {}
    for family, text in values.items():
        if family not in FAMILIES:
            raise ValidationError(f"unknown transform family {family!r}")
        if family == "identity":
            grid[family] = [None]
            continue
        params = []
        for p in text.split(","):
            p = p.strip()
            if not p:
                continue
            try:
                v = float(p)
            except ValueError:
                raise ValidationError(f"bad {family} parameter {p!r}") from None
            if family in ("blur", "jpeg") and v == int(v):
                v = int(v)
            _validate(family, v)
            params.append(v)
        grid[family] = params
    return grid


def evaluate_samples(bundle, samples, family: str = "identity", param=None, seed: int = 0):
    """Analyze every sample (optionally degraded); returns ``(records, analyses)``."""
    records: list[EvalRecord] = []
    analyses = []
    for k, s in enumerate(samples):
        img = apply_transform(s.image, family, param, seed + k)
        res = bundle.analyze(img)
        records.append(evaluate_record(s.id or str(k), s.label, res.score, res.anomaly, s.mask))
        analyses.append(res)
    return records, analyses


def robustness_suite(bundle, samples, grid: dict[str, list], seed: int = 0) -> dict[str, dict]:
    """One summary (plus per-image records and analyses) per grid cell."""
    for family, params in grid.items():
        for p in params:
            _validate(family, p)
    out = {}
    for family, params in grid.items():
        for p in params:
            records, analyses = evaluate_samples(bundle, samples, family, p, seed)
            out[cell_name(family, p)] = {"family": family, "param": p, "records": records,
                                         "analyses": analyses, "summary": summarize(records)}
    return out
