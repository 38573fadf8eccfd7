"""Command-line entry point.

    forgeloc synth    --out DATA [--config FILE] [--seed N]
    forgeloc train    --phase {1,2,3} --manifest DATA/manifest.jsonl --out CKPT
    forgeloc analyze  IMAGE --checkpoints CKPT --out DIR
    forgeloc evaluate --manifest M --checkpoints CKPT --out DIR [--grid FILE] [--dataset-threshold]

Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 data error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as kv
from .checkpoint import save_checkpoint, write_loss_csv
from .detection import FEATURE_NAMES, DetectionConfig, train_phase3
from .errors import (ConfigError, DimensionError, GeometryError, MissingPrerequisiteError,
                     ValidationError)
from .fingerprint import FingerprintConfig, train_fingerprint_phase1
from .fusion import FusionConfig, train_phase2
from .imageio import read_image, write_map
from .pipeline import (DETECTOR_CKPT, FINGERPRINT_CKPT, FUSION_CKPT, ModelBundle, config_echo)
from .robustness import evaluate_samples, parse_grid, robustness_suite
from .metrics import dataset_best_threshold, summarize
from .synth import DatasetManifest, SynthConfig, build_dataset

log = logging.getLogger("forgeloc")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DATA = 0, 2, 3, 4


class DataError(Exception):
    pass


@dataclass
class AnalyzeConfig:
    """analyze accepts no config keys besides ``seed``."""


def _load_values(args) -> dict[str, str]:
    values = kv.read_kv(args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    return values


def _resolve(args, cfg, extra=None):
    """Config file, then --set, then dedicated flags (flags win)."""
    extra = {"seed": 0, **(extra or {})}
    cfg, extra = kv.apply_overrides(cfg, _load_values(args), extra)
    if args.seed is not None:
        extra["seed"] = args.seed
    return cfg, extra


def _echo(out: Path, name: str, cfg, extra):
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(kv.resolved_text(cfg, extra))


def cmd_synth(args) -> Path:
    cfg, extra = _resolve(args, SynthConfig())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo(out, "synth.resolved.cfg", cfg, extra)
    manifest = build_dataset(cfg, extra["seed"], out)
    print(manifest.path)
    return manifest.path


_PHASE_CFG = {1: FingerprintConfig, 2: FusionConfig, 3: DetectionConfig}


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingPrerequisiteError(f"missing {what}: {path}")
    return path


def _manifest(path) -> DatasetManifest:
    if path is None:
        raise ConfigError("a dataset manifest is required (--manifest or config key 'manifest')")
    p = Path(path)
    if not p.exists():
        raise DataError(f"manifest not found: {p}")
    return DatasetManifest.load(p)


def _load_samples(manifest: DatasetManifest):
    samples, bad = [], []
    for rec in manifest.records:
        try:
            s = manifest.load_sample(rec)
        except (OSError, ValueError) as e:
            bad.append(f"{rec.id} ({e})")
            continue
        if rec.kind != "pristine" and (rec.mask_path is None or not s.mask.any()):
            bad.append(f"{rec.id} (fake without mask)")
        elif s.mask.shape != s.image.shape[:2]:
            bad.append(f"{rec.id} (mask {s.mask.shape} vs image {s.image.shape[:2]})")
        samples.append(s)
    if bad:
        raise DataError("manifest/mask mismatch: " + ", ".join(bad))
    return samples


def cmd_train(args) -> Path:
    phase = args.phase
    cfg, extra = _resolve(args, _PHASE_CFG[phase](), {"manifest": None})
    if args.manifest:
        extra["manifest"] = args.manifest
    out = Path(args.out)
    ckpts = Path(args.checkpoints) if args.checkpoints else out
    fp_path = ckpts / FINGERPRINT_CKPT
    fusion_path = ckpts / FUSION_CKPT
    if phase >= 2:
        _require(fp_path, "fingerprint checkpoint")
    if phase == 3:
        _require(fusion_path, "fusion checkpoint")
    manifest = _manifest(extra["manifest"])
    out.mkdir(parents=True, exist_ok=True)
    _echo(out, f"phase{phase}.resolved.cfg", cfg, extra)
    seed = extra["seed"]
    if phase == 1:
        model, hist = train_fingerprint_phase1(cfg, manifest.camera_set(), seed)
        path = save_checkpoint(out / FINGERPRINT_CKPT, "fingerprint", model, config_echo(cfg))
    elif phase == 2:
        fp, _ = ModelBundle.load_fingerprint(fp_path)
        model, hist = train_phase2(cfg, _load_samples(manifest), fp, seed)
        path = save_checkpoint(out / FUSION_CKPT, "fusion", model, config_echo(cfg))
    else:
        fp, _ = ModelBundle.load_fingerprint(fp_path)
        fusion, _ = ModelBundle.load_fusion(fusion_path)
        head, hist = train_phase3(cfg, _load_samples(manifest), fp, fusion, seed)
        path = save_checkpoint(out / DETECTOR_CKPT, "detector", head, config_echo(cfg))
    write_loss_csv(out / f"phase{phase}_loss.csv", hist)
    print(path)
    return path


def _bundle(ckpt_dir) -> ModelBundle:
    d = Path(ckpt_dir)
    for name in (FINGERPRINT_CKPT, FUSION_CKPT, DETECTOR_CKPT):
        _require(d / name, "checkpoint")
    return ModelBundle.from_dir(d)


def write_analysis(res, out: Path, stem: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    a_png, c_png = out / f"{stem}_anomaly.png", out / f"{stem}_confidence.png"
    write_map(a_png, res.anomaly)
    write_map(c_png, res.confidence)
    report = {
        "score": res.score,
        "features": {k: float(v) for k, v in zip(FEATURE_NAMES, res.features)},
        "anomaly_png": a_png.name,
        "confidence_png": c_png.name,
    }
    path = out / f"{stem}_report.json"
    path.write_text(json.dumps(report, indent=2) + "\n")
    return path


def cmd_analyze(args) -> Path:
    _resolve(args, AnalyzeConfig())
    img_path = Path(args.image)
    try:
        img = read_image(img_path)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {img_path}: {e}") from None
    bundle = _bundle(args.checkpoints)
    try:
        res = bundle.analyze(img)
    except DimensionError as e:
        raise DataError(str(e)) from None
    path = write_analysis(res, Path(args.out), img_path.stem)
    print(path)
    return path


def _fmt(v):
    if v is None:
        return "NA"
    return repr(float(v))


def write_records_csv(path: Path, records) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "label", "score", "f1_fixed", "f1_best", "best_th"])
        for r in sorted(records, key=lambda r: r.image_id):
            w.writerow([r.image_id, r.gt_label, _fmt(r.score), _fmt(r.f1_fixed), _fmt(r.f1_best),
                        _fmt(r.best_threshold)])
    return path


def cmd_evaluate(args) -> list[Path]:
    manifest = _manifest(args.manifest)
    samples = _load_samples(manifest)
    bundle = _bundle(args.checkpoints)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed or 0
    written = []
    if args.grid:
        grid = parse_grid(kv.read_kv(args.grid))
        cells = robustness_suite(bundle, samples, grid, seed)
    else:
        records, analyses = evaluate_samples(bundle, samples, seed=seed)
        cells = {"": {"family": "identity", "param": None, "records": records, "analyses": analyses,
                      "summary": summarize(records)}}
    for name, cell in cells.items():
        prefix = f"{name}_" if name else ""
        written.append(write_records_csv(out / f"{prefix}results.csv", cell["records"]))
        summary = {"cell": name or "identity", "family": cell["family"], "param": cell["param"], **cell["summary"]}
        if args.dataset_threshold:
            best = dataset_best_threshold([an.anomaly for an in cell["analyses"]], [s.mask for s in samples])
            summary["f1_dataset_best"], summary["dataset_threshold"] = best if best else (None, None)
        p = out / f"{prefix}summary.json"
        p.write_text(json.dumps(summary, indent=2) + "\n")
        written.append(p)
    for p in written:
        print(p)
    return written


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default=".", help="output directory (created if missing)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="forgeloc", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic forgery dataset")
    t = sub.add_parser("train", parents=[common], help="run one training phase")
    t.add_argument("--phase", type=int, choices=(1, 2, 3), required=True)
    t.add_argument("--manifest")
    t.add_argument("--checkpoints", help="directory holding earlier-phase checkpoints (default: --out)")
    a = sub.add_parser("analyze", parents=[common], help="analyze one image")
    a.add_argument("image")
    a.add_argument("--checkpoints", required=True)
    e = sub.add_parser("evaluate", parents=[common], help="evaluate on a dataset manifest")
    e.add_argument("--manifest", required=True)
    e.add_argument("--checkpoints", required=True)
    e.add_argument("--grid", help="flat file: family = comma-separated parameters")
    e.add_argument("--dataset-threshold", action="store_true",
                   help="also report F1 at the single threshold that is best over the whole dataset")
    return p


_COMMANDS = {"synth": cmd_synth, "train": cmd_train, "analyze": cmd_analyze, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _COMMANDS[args.command](args)
    except (ConfigError, ValidationError, GeometryError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisiteError as e:
        print(f"missing prerequisite: {e}", file=sys.stderr)
        return EXIT_MISSING
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
