"""Procedural cameras, pristine images and forgeries with exact masks."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import GeometryError, ValidationError
from .histories import CameraImage, CameraImageSet
from .imageio import jpeg_roundtrip, read_image, read_mask, write_image, write_mask

KINDS = ("pristine", "splice", "copymove")

_BILINEAR = np.array([[0.25, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 0.25]])
_QUALITIES = (62, 90, 75, 84, 68, 95, 80, 72)
_SIGMAS = (0.004, 0.012, 0.020, 0.008, 0.016, 0.006, 0.024, 0.010)


@dataclass(frozen=True)
class SyntheticCamera:
    camera_id: int
    demosaic_kernel: np.ndarray = field(compare=False)
    jpeg_quality: int = 85
    noise_sigma: float = 0.01

    def signature(self) -> tuple:
        return (tuple(np.round(self.demosaic_kernel, 6).ravel()), self.jpeg_quality, self.noise_sigma)


def make_camera(camera_id: int) -> SyntheticCamera:
    """Deterministic camera for an id; ids below 8 get pairwise distinct traits."""
    k = camera_id % len(_QUALITIES)
    spread = 1.0 + 0.35 * (camera_id % 5)
    kernel = _BILINEAR ** spread
    return SyntheticCamera(camera_id, kernel, _QUALITIES[k], _SIGMAS[(k + camera_id // 8) % len(_SIGMAS)])


def camera_roster(n: int) -> list[SyntheticCamera]:
    return [make_camera(i) for i in range(n)]


def _content(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    corners = rng.uniform(0.15, 0.85, size=(4, 3))
    img = ((1 - yy)[..., None] * ((1 - xx)[..., None] * corners[0] + xx[..., None] * corners[1])
           + yy[..., None] * ((1 - xx)[..., None] * corners[2] + xx[..., None] * corners[3]))
    for _ in range(int(rng.integers(6, 13))):
        color = rng.uniform(0.1, 0.9, size=3)
        cy, cx = rng.uniform(0, size, size=2)
        ry, rx = rng.uniform(size * 0.05, size * 0.3, size=2)
        if rng.random() < 0.5:
            sel = (np.abs(yy * (size - 1) - cy) < ry) & (np.abs(xx * (size - 1) - cx) < rx)
        else:
            sel = ((yy * (size - 1) - cy) / ry) ** 2 + ((xx * (size - 1) - cx) / rx) ** 2 < 1
        img[sel] = 0.6 * color + 0.4 * img[sel]
    texture = ndimage.gaussian_filter(rng.normal(0, 1, size=(size, size, 3)), sigma=(1.5, 1.5, 0))
    img = img + 0.04 * texture
    return np.clip(img, 0.05, 0.95)


def _demosaic(raw: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """RGGB mosaic sampling followed by normalized-convolution interpolation."""
    h, w, _ = raw.shape
    masks = np.zeros((3, h, w))
    masks[0, 0::2, 0::2] = 1
    masks[1, 0::2, 1::2] = 1
    masks[1, 1::2, 0::2] = 1
    masks[2, 1::2, 1::2] = 1
    out = np.empty_like(raw)
    for c in range(3):
        num = ndimage.convolve(raw[..., c] * masks[c], kernel, mode="mirror")
        den = ndimage.convolve(masks[c], kernel, mode="mirror")
        out[..., c] = num / den
    return out


def render_pristine(camera: SyntheticCamera, content_seed: int, size: int = 128) -> np.ndarray:
    """Procedural scene -> sensor noise -> CFA demosaic -> in-camera JPEG."""
    scene = _content(np.random.default_rng([content_seed, 7919]), size)
    noise_rng = np.random.default_rng([content_seed, camera.camera_id, 104729])
    raw = np.clip(scene + noise_rng.normal(0.0, camera.noise_sigma, size=scene.shape), 0.0, 1.0)
    return jpeg_roundtrip(np.clip(_demosaic(raw, camera.demosaic_kernel), 0.0, 1.0), camera.jpeg_quality)


@dataclass
class ForgerySample:
    image: np.ndarray
    mask: np.ndarray
    kind: str = "pristine"
    camera_id: int = -1
    provenance: dict = field(default_factory=dict)
    id: str = ""

    @property
    def label(self) -> int:
        return int(self.kind != "pristine")


def pristine_sample(camera: SyntheticCamera, content_seed: int, size: int = 128) -> ForgerySample:
    img = render_pristine(camera, content_seed, size)
    return ForgerySample(img, np.zeros(img.shape[:2], dtype=bool), "pristine", camera.camera_id,
                         {"content_seed": content_seed})


def _region_size(rng, region_size, lo=24, hi=48):
    if region_size is None:
        return int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
    if np.isscalar(region_size):
        return int(region_size), int(region_size)
    return int(region_size[0]), int(region_size[1])


def make_splice(host: ForgerySample, donor: ForgerySample, region_seed: int, region_size=None,
                target=None, feather: int = 0) -> ForgerySample:
    """Paste a rectangle of ``donor`` into ``host``; the mask is the pasted rectangle."""
    if host.camera_id == donor.camera_id:
        raise ValidationError(f"host and donor share camera {host.camera_id}")
    rng = np.random.default_rng([region_seed, 31337])
    rh, rw = _region_size(rng, region_size)
    H, W = host.mask.shape
    dh, dw = donor.mask.shape
    if rh > min(H, dh) or rw > min(W, dw) or rh < 1 or rw < 1:
        raise GeometryError(f"region {rh}x{rw} does not fit host {H}x{W} / donor {dh}x{dw}")
    sy, sx = int(rng.integers(0, dh - rh + 1)), int(rng.integers(0, dw - rw + 1))
    if target is None:
        ty, tx = int(rng.integers(0, H - rh + 1)), int(rng.integers(0, W - rw + 1))
    else:
        ty, tx = target
        if ty < 0 or tx < 0 or ty + rh > H or tx + rw > W:
            raise GeometryError(f"region {rh}x{rw} at {target} exceeds host {H}x{W}")
    img = host.image.copy()
    patch = donor.image[sy:sy + rh, sx:sx + rw]
    if feather > 0:
        alpha = np.ones((rh, rw))
        alpha = ndimage.uniform_filter(np.pad(alpha, feather), 2 * feather + 1)[feather:-feather, feather:-feather]
        alpha = alpha[..., None]
        img[ty:ty + rh, tx:tx + rw] = alpha * patch + (1 - alpha) * img[ty:ty + rh, tx:tx + rw]
    else:
        img[ty:ty + rh, tx:tx + rw] = patch
    mask = host.mask.copy()
    mask[ty:ty + rh, tx:tx + rw] = True
    prov = {"host": host.provenance, "donor": donor.provenance, "donor_camera": donor.camera_id,
            "source": (sy, sx), "target": (ty, tx), "size": (rh, rw), "feather": feather}
    return ForgerySample(img, mask, "splice", host.camera_id, prov)


def make_copy_move(src: ForgerySample, region_seed: int, region_size=None, displacement=None,
                   source=None) -> ForgerySample:
    """Duplicate a rectangle of ``src`` at a displaced, non-overlapping location."""
    rng = np.random.default_rng([region_seed, 27449])
    rh, rw = _region_size(rng, region_size)
    H, W = src.mask.shape

    def disjoint(dy, dx):
        return abs(dy) >= rh or abs(dx) >= rw

    def inside(y, x):
        return 0 <= y and 0 <= x and y + rh <= H and x + rw <= W

    placement = None
    if displacement is not None:
        dy, dx = displacement
        if not disjoint(dy, dx):
            raise GeometryError(f"displacement {displacement} overlaps a {rh}x{rw} region")
        if source is not None:
            if inside(*source) and inside(source[0] + dy, source[1] + dx):
                placement = (source[0], source[1], dy, dx)
        else:
            ys = [y for y in range(H - rh + 1) if inside(y, 0) and 0 <= y + dy <= H - rh]
            xs = [x for x in range(W - rw + 1) if 0 <= x + dx <= W - rw]
            if ys and xs:
                placement = (int(rng.choice(ys)), int(rng.choice(xs)), dy, dx)
    else:
        for _ in range(200):
            if rh > H or rw > W:
                break
            sy, sx = (source if source is not None else
                      (int(rng.integers(0, H - rh + 1)), int(rng.integers(0, W - rw + 1))))
            ty, tx = int(rng.integers(0, H - rh + 1)), int(rng.integers(0, W - rw + 1))
            if disjoint(ty - sy, tx - sx):
                placement = (sy, sx, ty - sy, tx - sx)
                break
    if placement is None:
        raise GeometryError(f"cannot place disjoint {rh}x{rw} source/target regions in {H}x{W}")
    sy, sx, dy, dx = placement
    img = src.image.copy()
    img[sy + dy:sy + dy + rh, sx + dx:sx + dx + rw] = src.image[sy:sy + rh, sx:sx + rw]
    mask = src.mask.copy()
    mask[sy + dy:sy + dy + rh, sx + dx:sx + dx + rw] = True
    prov = {"src": src.provenance, "source": (sy, sx), "target": (sy + dy, sx + dx), "size": (rh, rw)}
    return ForgerySample(img, mask, "copymove", src.camera_id, prov)


@dataclass
class SynthConfig:
    pristine: int = 40
    splice: int = 30
    copymove: int = 30
    cameras: int = 5
    image_size: int = 128
    region_min: int = 24
    region_max: int = 48
    recompress_quality: int = 0  # 0 = no global recompression of composites
    feather: int = 0


def _validate(cfg: SynthConfig):
    for k in KINDS:
        if getattr(cfg, k) < 0:
            raise ValidationError(f"count for {k} is negative: {getattr(cfg, k)}")
    if cfg.pristine + cfg.splice + cfg.copymove == 0:
        raise ValidationError("dataset would be empty")
    if cfg.cameras < 1 or (cfg.splice > 0 and cfg.cameras < 2):
        raise ValidationError(f"{cfg.cameras} cameras cannot produce splices (need >= 2)")
    if not 1 <= cfg.region_min <= cfg.region_max:
        raise ValidationError(f"bad region range [{cfg.region_min}, {cfg.region_max}]")
    if 2 * cfg.region_max > cfg.image_size:
        raise ValidationError(f"region_max {cfg.region_max} too large for image_size {cfg.image_size}")
    if cfg.recompress_quality and not 1 <= cfg.recompress_quality <= 100:
        raise ValidationError(f"recompress_quality {cfg.recompress_quality} outside [1, 100]")


def generate_samples(cfg: SynthConfig, seed: int) -> list[ForgerySample]:
    """All samples of a dataset in memory, in manifest order."""
    _validate(cfg)
    cams = camera_roster(cfg.cameras)
    size = cfg.image_size
    out = []
    for i in range(cfg.pristine):
        s = pristine_sample(cams[i % cfg.cameras], _seed(seed, "pristine", i), size)
        out.append(s)
    for i in range(cfg.splice):
        rng = np.random.default_rng([seed, 1, i])
        hc, dc = rng.choice(cfg.cameras, 2, replace=False)
        host = pristine_sample(cams[hc], _seed(seed, "host", i), size)
        donor = pristine_sample(cams[dc], _seed(seed, "donor", i), size)
        rs = _region_size(rng, None, cfg.region_min, cfg.region_max)
        out.append(make_splice(host, donor, _seed(seed, "splice", i), rs, feather=cfg.feather))
    for i in range(cfg.copymove):
        rng = np.random.default_rng([seed, 2, i])
        cam = int(rng.integers(cfg.cameras))
        src = pristine_sample(cams[cam], _seed(seed, "cmsrc", i), size)
        rs = _region_size(rng, None, cfg.region_min, cfg.region_max)
        out.append(make_copy_move(src, _seed(seed, "copymove", i), rs))
    for k, s in enumerate(out):
        s.id = f"{s.kind}_{k:04d}"
        if cfg.recompress_quality and s.kind != "pristine":
            s.image = jpeg_roundtrip(s.image, cfg.recompress_quality)
    return out


def _seed(seed, tag, i):
    return int(np.random.SeedSequence([seed, i, *tag.encode()]).generate_state(1)[0])


@dataclass
class ManifestRecord:
    id: str
    kind: str
    image_path: str
    camera_id: int
    mask_path: str | None = None

    def to_json(self) -> str:
        d = {"id": self.id, "kind": self.kind, "image_path": self.image_path}
        if self.mask_path is not None:
            d["mask_path"] = self.mask_path
        d["camera_id"] = self.camera_id
        return json.dumps(d)


class DatasetManifest:
    """Newline-delimited JSON records ``{id, kind, image_path, mask_path?, camera_id}``.

    Paths are relative to the manifest's directory.
    """

    def __init__(self, path: str | Path, records: list[ManifestRecord]):
        self.path = Path(path)
        self.records = records

    @property
    def root(self) -> Path:
        return self.path.parent

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        records = []
        for line in path.read_text().splitlines():
            if line.strip():
                d = json.loads(line)
                records.append(ManifestRecord(d["id"], d["kind"], d["image_path"], int(d["camera_id"]),
                                              d.get("mask_path")))
        return cls(path, records)

    def __len__(self):
        return len(self.records)

    def counts(self) -> dict[str, int]:
        return {k: sum(r.kind == k for r in self.records) for k in KINDS}

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def load_sample(self, rec: ManifestRecord) -> ForgerySample:
        img = read_image(self.resolve(rec.image_path))
        if rec.mask_path is not None:
            mask = read_mask(self.resolve(rec.mask_path))
        else:
            mask = np.zeros(img.shape[:2], dtype=bool)
        return ForgerySample(img, mask, rec.kind, rec.camera_id, {}, rec.id)

    def samples(self) -> list[ForgerySample]:
        return [self.load_sample(r) for r in self.records]

    def camera_set(self) -> CameraImageSet:
        return CameraImageSet([
            CameraImage(r.camera_id, k, str(self.resolve(r.image_path)))
            for k, r in enumerate(self.records) if r.kind == "pristine"
        ])

    def digest(self) -> str:
        """SHA-256 over the manifest text and every file it references."""
        h = hashlib.sha256(self.path.read_bytes())
        for r in self.records:
            h.update(self.resolve(r.image_path).read_bytes())
            if r.mask_path:
                h.update(self.resolve(r.mask_path).read_bytes())
        return h.hexdigest()


def build_dataset(cfg: SynthConfig, seed: int, out_dir: str | Path) -> DatasetManifest:
    """Render the dataset to PNGs under ``out_dir`` and write ``manifest.jsonl``.

    Also writes ``cameras.jsonl`` (``{camera_id, image_id, path}`` per
    pristine image) for fingerprint training.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    samples = generate_samples(cfg, seed)
    records = []
    cams = []
    for k, s in enumerate(samples):
        img_rel = f"images/{s.id}.png"
        write_image(out_dir / img_rel, s.image)
        mask_rel = None
        if s.kind != "pristine":
            mask_rel = f"masks/{s.id}.png"
            write_mask(out_dir / mask_rel, s.mask)
        else:
            cams.append(json.dumps({"camera_id": s.camera_id, "image_id": k, "path": img_rel}))
        records.append(ManifestRecord(s.id, s.kind, img_rel, s.camera_id, mask_rel))
    path = out_dir / "manifest.jsonl"
    path.write_text("".join(r.to_json() + "\n" for r in records))
    (out_dir / "cameras.jsonl").write_text("".join(c + "\n" for c in cams))
    return DatasetManifest(path, records)
