"""Out-camera editing histories and contrastive batch assembly.

A history is one of 512 pipelines built from three 8-level factors:
resize factor, JPEG quality (level 0 means no compression) and a
contrast/brightness pair. Operations always run resize -> contrast -> JPEG.
Level 0 of every factor is the identity, so history 0 leaves images untouched.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DegenerateInputError
from .imageio import jpeg_roundtrip, read_image

RESIZE_LEVELS = (1.0, 0.5, 0.625, 0.75, 0.875, 1.125, 1.25, 1.375)
JPEG_LEVELS = (None, 30, 42, 53, 65, 77, 88, 100)
GAIN_LEVELS = (1.0, 0.8, 0.9, 1.1)
OFFSET_LEVELS = (0.0, -0.05)
TONE_LEVELS = tuple((g, o) for o in OFFSET_LEVELS for g in GAIN_LEVELS)

N_HISTORIES = len(RESIZE_LEVELS) * len(JPEG_LEVELS) * len(TONE_LEVELS)
OP_ORDER = ("resize", "contrast", "jpeg")

PATCH = 64
CAMERAS_PER_BATCH = 5
IMAGES_PER_CAMERA = 4
HISTORIES_PER_BATCH = 4
POSITIONS_PER_IMAGE = 2


@dataclass(frozen=True)
class EditingHistory:
    resize_factor: float = 1.0
    jpeg_quality: int | None = None
    contrast_gain: float = 1.0
    brightness_offset: float = 0.0
    op_order: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not 0.5 <= self.resize_factor <= 1.5:
            raise ValueError(f"resize_factor {self.resize_factor} outside [0.5, 1.5]")
        if self.jpeg_quality is not None and not 30 <= self.jpeg_quality <= 100:
            raise ValueError(f"jpeg_quality {self.jpeg_quality} outside [30, 100]")
        if not self.op_order:
            enabled = {
                "resize": self.resize_factor != 1.0,
                "contrast": (self.contrast_gain, self.brightness_offset) != (1.0, 0.0),
                "jpeg": self.jpeg_quality is not None,
            }
            object.__setattr__(self, "op_order", tuple(op for op in OP_ORDER if enabled[op]))

    @property
    def id(self) -> int:
        return history_id(self)

    def to_text(self) -> str:
        return f"H{history_id(self)}"

    @classmethod
    def from_text(cls, text: str) -> "EditingHistory":
        if not text.startswith("H"):
            raise ValueError(f"not a history id: {text!r}")
        return history_from_id(int(text[1:]))


def history_from_id(hid: int) -> EditingHistory:
    if not 0 <= hid < N_HISTORIES:
        raise ValueError(f"history id {hid} outside [0, {N_HISTORIES - 1}]")
    r, rest = divmod(hid, len(JPEG_LEVELS) * len(TONE_LEVELS))
    j, t = divmod(rest, len(TONE_LEVELS))
    gain, offset = TONE_LEVELS[t]
    return EditingHistory(RESIZE_LEVELS[r], JPEG_LEVELS[j], gain, offset)


def history_id(h: EditingHistory) -> int:
    try:
        r = RESIZE_LEVELS.index(h.resize_factor)
        j = JPEG_LEVELS.index(h.jpeg_quality)
        t = TONE_LEVELS.index((h.contrast_gain, h.brightness_offset))
    except ValueError:
        raise ValueError(f"history {h} is not on the enumerated grid") from None
    return (r * len(JPEG_LEVELS) + j) * len(TONE_LEVELS) + t


def enumerate_histories() -> list[EditingHistory]:
    return [history_from_id(i) for i in range(N_HISTORIES)]


def resized_shape(shape: Sequence[int], factor: float) -> tuple[int, int]:
    return int(round(shape[0] * factor)), int(round(shape[1] * factor))


def resize(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    if tuple(out_hw) == img.shape[:2]:
        return img
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float64)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=out_hw, mode="bilinear", align_corners=False, antialias=True)
    return out[0].permute(1, 2, 0).numpy()


def apply_history(img: np.ndarray, h: EditingHistory, seed: int = 0) -> np.ndarray:
    """Run ``img`` (H×W×3 in [0,1]) through history ``h``.

    All current operation families are deterministic; ``seed`` is accepted so
    callers can treat every history as a seeded transform.
    """
    del seed
    out = np.asarray(img, dtype=np.float64)
    for op in h.op_order:
        if op == "resize":
            hw = resized_shape(out.shape, h.resize_factor)
            if min(hw) < 2:
                raise DegenerateInputError(f"image {out.shape[:2]} resized by {h.resize_factor} is {hw}")
            out = np.clip(resize(out, hw), 0.0, 1.0)
        elif op == "contrast":
            out = np.clip((out - 0.5) * h.contrast_gain + 0.5 + h.brightness_offset, 0.0, 1.0)
        elif op == "jpeg":
            out = jpeg_roundtrip(out, h.jpeg_quality)
    return out


@dataclass
class CameraImage:
    camera_id: int
    image_id: int
    path: str | None = None
    pixels: np.ndarray | None = None

    def load(self) -> np.ndarray:
        if self.pixels is None:
            self.pixels = read_image(self.path)
        return self.pixels


class CameraImageSet:
    """Pristine images grouped by camera id."""

    def __init__(self, images: Sequence[CameraImage]):
        self.images = list(images)
        self.by_camera: dict[int, list[CameraImage]] = {}
        for im in sorted(self.images, key=lambda r: (r.camera_id, r.image_id)):
            self.by_camera.setdefault(im.camera_id, []).append(im)

    @classmethod
    def from_manifest(cls, path: str | Path) -> "CameraImageSet":
        """Load newline-delimited ``{camera_id, image_id, path}`` records.

        Relative paths resolve against the manifest's directory.
        """
        path = Path(path)
        records = []
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            p = Path(rec["path"])
            if not p.is_absolute():
                p = path.parent / p
            records.append(CameraImage(int(rec["camera_id"]), int(rec["image_id"]), str(p)))
        return cls(records)

    @classmethod
    def from_arrays(cls, items: Sequence[tuple[int, int, np.ndarray]]) -> "CameraImageSet":
        return cls([CameraImage(c, i, pixels=np.asarray(px, dtype=np.float64)) for c, i, px in items])

    def __len__(self):
        return len(self.images)


@dataclass
class ContrastiveBatch:
    patches: np.ndarray | None  # N×64×64×3; None for a plan
    camera_id: np.ndarray
    position_id: np.ndarray
    history_id: np.ndarray
    image_id: np.ndarray
    origins: np.ndarray  # N×2 crop origin inside the edited image

    def __len__(self):
        return len(self.camera_id)

    @property
    def labels(self) -> np.ndarray:
        """(camera, position, history) triples; equal triples are positives."""
        return np.stack([self.camera_id, self.position_id, self.history_id], axis=1)

    def history_texts(self) -> list[str]:
        return [f"H{h}" for h in self.history_id]


def positive_sets(batch: ContrastiveBatch) -> list[np.ndarray]:
    lab = batch.labels
    same = (lab[:, None, :] == lab[None, :, :]).all(-1)
    same &= batch.image_id[:, None] != batch.image_id[None, :]
    return [np.flatnonzero(row) for row in same]


def _snap8(v: float) -> int:
    return int(v) // 8 * 8


def _min_side_ok(side: int, factor: float) -> bool:
    # two distinct 8-aligned 64-pixel crops must fit
    return int(round(side * factor)) >= PATCH + 8


def plan_contrastive_batch(dataset: CameraImageSet, seed: int):
    """Choose images, histories and crop origins for one batch without rendering patches.

    Returns ``(batch, picks, histories)`` where ``batch.patches`` is None.
    """
    eligible = {
        cam: ims for cam, ims in dataset.by_camera.items() if len(ims) >= IMAGES_PER_CAMERA
    }
    if len(eligible) < CAMERAS_PER_BATCH:
        raise ConfigError(
            f"need {CAMERAS_PER_BATCH} cameras with >= {IMAGES_PER_CAMERA} images each, "
            f"found {len(eligible)} (short by {CAMERAS_PER_BATCH - len(eligible)})"
        )
    rng = np.random.default_rng(seed)
    cams = sorted(eligible)
    chosen = [cams[i] for i in sorted(rng.choice(len(cams), CAMERAS_PER_BATCH, replace=False))]
    picks = []
    for cam in chosen:
        ims = eligible[cam]
        idx = sorted(rng.choice(len(ims), IMAGES_PER_CAMERA, replace=False))
        picks.extend(ims[i] for i in idx)

    shapes = [im.load().shape for im in picks]
    min_side = min(min(s[:2]) for s in shapes)
    if min_side < 2 * PATCH:
        raise ConfigError(f"images must be at least {2 * PATCH}x{2 * PATCH}, smallest side is {min_side}")
    feasible = [h.id for h in enumerate_histories() if _min_side_ok(min_side, h.resize_factor)]
    hids = sorted(rng.choice(feasible, HISTORIES_PER_BATCH, replace=False).tolist())
    histories = [history_from_id(h) for h in hids]

    # relative origins in [0,1]^2; retried until every history maps them apart
    rel = None
    for _ in range(32):
        cand = rng.uniform(0.0, 1.0, size=(POSITIONS_PER_IMAGE, 2))
        if all(_distinct_origins(cand, min_side, h.resize_factor) for h in histories):
            rel = cand
            break
    if rel is None:
        rel = np.array([[0.0, 0.0], [1.0, 1.0]])

    cam_ids, pos_ids, hist_ids, img_ids, origins = [], [], [], [], []
    for im, shape in zip(picks, shapes):
        for h in histories:
            eh, ew = resized_shape(shape, h.resize_factor)
            for p, (ry, rx) in enumerate(rel):
                cam_ids.append(im.camera_id)
                pos_ids.append(p)
                hist_ids.append(h.id)
                img_ids.append(im.image_id)
                origins.append((_snap8(ry * (eh - PATCH)), _snap8(rx * (ew - PATCH))))
    batch = ContrastiveBatch(
        patches=None,
        camera_id=np.asarray(cam_ids),
        position_id=np.asarray(pos_ids),
        history_id=np.asarray(hist_ids),
        image_id=np.asarray(img_ids),
        origins=np.asarray(origins),
    )
    return batch, picks, histories


def sample_contrastive_batch(dataset: CameraImageSet, seed: int) -> ContrastiveBatch:
    """Draw 160 patches: 5 cameras × 4 images × 4 histories × 2 positions.

    Histories and positions are shared by every image of the batch, so each
    patch has three positives: the other images of its camera seen through
    the same history at the same position.
    """
    batch, picks, histories = plan_contrastive_batch(dataset, seed)
    patches = []
    k = 0
    for im in picks:
        px = im.load()
        for h in histories:
            edited = apply_history(px, h, seed)
            for _ in range(POSITIONS_PER_IMAGE):
                oy, ox = batch.origins[k]
                patches.append(edited[oy:oy + PATCH, ox:ox + PATCH])
                k += 1
    batch.patches = np.stack(patches)
    return batch


def _distinct_origins(rel: np.ndarray, side: int, factor: float) -> bool:
    span = int(round(side * factor)) - PATCH
    o = [(_snap8(ry * span), _snap8(rx * span)) for ry, rx in rel]
    return len(set(o)) == len(o)
