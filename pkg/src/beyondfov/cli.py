"""Command-line front end: benchmark derivation from pinhole image/label
pairs, dataset statistics, forward demos, toy training, and evaluation.

All rasters are 8-bit PNG (RGB images, single-channel labels, 0/255 masks;
JPEG would corrupt class ids). Manifests are line-oriented JSON: a header
record with split counts and the distortion-config hash, then one record per
sample in lexicographic order, so reruns are byte-identical.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import metrics as MX
from . import model as M
from .geometry import (CircularMask, DistortionModel, InversionError,
                       circular_mask, warp_image)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

SPLITS = ("train", "val")


class DataError(RuntimeError):
    """Bad or inconsistent input files; maps to exit code 2."""


# ---------------------------------------------------------------------------
# config

@dataclass(frozen=True)
class PipelineConfig:
    """Everything the CLI needs, parsed from a TOML key=value file."""

    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    k4: float = 0.0
    center_x: float | None = None
    center_y: float | None = None
    norm_radius: float | None = None
    fov_radius: float | None = None
    out_width: int = 64
    out_height: int = 64
    num_classes: int = 6
    ignore_index: int = 255
    n_mask: int = 4
    pca_direction: str = "Bi"
    window: int = 4
    patch: int = 4
    widths: tuple[int, ...] = (32, 64, 128, 256)
    seed: int = 0

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        try:
            with open(path, "rb") as f:
                raw = tomllib.load(f)
        except FileNotFoundError:
            raise DataError(f"config file not found: {path}")
        except tomllib.TOMLDecodeError as exc:
            raise DataError(f"config {path} is not valid TOML: {exc}")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        if "widths" in raw:
            raw["widths"] = tuple(int(w) for w in raw["widths"])
        return cls(**raw)

    @property
    def center(self) -> tuple[float, float]:
        cx = (self.out_width - 1) / 2 if self.center_x is None else self.center_x
        cy = (self.out_height - 1) / 2 if self.center_y is None else self.center_y
        return (cx, cy)

    def distortion(self) -> DistortionModel:
        nr = self.norm_radius
        if nr is None:
            nr = float(np.hypot(self.out_width, self.out_height) / 2)
        return DistortionModel(k=(self.k1, self.k2, self.k3, self.k4),
                               center=self.center, norm_radius=nr)

    def fov(self) -> CircularMask:
        radius = self.fov_radius
        if radius is None:
            radius = 0.47 * min(self.out_width, self.out_height)
        return circular_mask(self.out_width, self.out_height, self.center, radius)

    def model_config(self) -> M.ModelConfig:
        heads = tuple(max(1, w // 32) for w in self.widths)
        return M.ModelConfig(
            height=self.out_height, width=self.out_width, patch=self.patch,
            widths=tuple(self.widths), heads=heads, window=self.window,
            num_classes=self.num_classes, n_mask=self.n_mask,
            pca_direction=self.pca_direction, ignore_index=self.ignore_index,
            seed=self.seed)

    def hash(self) -> str:
        blob = json.dumps({f.name: getattr(self, f.name) for f in fields(self)},
                          sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# raster + manifest I/O

def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def read_label(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode == "P":  # palette indices ARE the class ids
            return np.asarray(im, dtype=np.int64)
        if im.mode not in ("L", "I", "I;16"):
            raise DataError(f"label {path} must be single-channel, got {im.mode}")
        return np.asarray(im.convert("I"), dtype=np.int64)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) >= 128).astype(np.uint8)


def write_png(path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path, format="PNG")


@dataclass(frozen=True)
class SampleRecord:
    """Paths of one derived example plus its split tag."""

    image: str
    label: str
    mask: str
    split: str

    def load(self, root: Path, cfg: PipelineConfig) -> M.Sample:
        image = read_image(root / self.image).astype(np.float32) / 255.0
        labels = read_label(root / self.label)
        mask_data = read_mask(root / self.mask)
        if not (image.shape[:2] == labels.shape == mask_data.shape):
            raise DataError(f"raster dims differ for sample {self.image}")
        fov = cfg.fov()
        if not np.array_equal(mask_data, fov.data):
            raise DataError(
                f"mask {self.mask} does not match the config's FoV circle")
        bad = labels[(labels != cfg.ignore_index)
                     & ((labels < 0) | (labels >= cfg.num_classes))]
        if bad.size:
            raise DataError(
                f"label {self.label} has id {int(bad[0])} outside "
                f"0..{cfg.num_classes - 1} / ignore {cfg.ignore_index}")
        return M.Sample(image=image, mask=fov, labels=labels)


def _json_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def write_manifest(path: Path, dataset: str, config_hash: str,
                   records: list[SampleRecord]) -> None:
    counts = {s: sum(1 for r in records if r.split == s) for s in SPLITS}
    with open(path, "w", encoding="utf-8") as f:
        f.write(_json_line({"type": "header", "dataset": dataset,
                            "config_hash": config_hash, "counts": counts}))
        for r in records:
            f.write(_json_line({"type": "sample", "split": r.split,
                                "image": r.image, "label": r.label,
                                "mask": r.mask}))


def read_manifest(path) -> tuple[dict, list[SampleRecord]]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}")
    if not lines:
        raise DataError(f"manifest {path} is empty")
    header = json.loads(lines[0])
    if header.get("type") != "header":
        raise DataError(f"manifest {path} missing header record")
    records = []
    for line in lines[1:]:
        obj = json.loads(line)
        records.append(SampleRecord(image=obj["image"], label=obj["label"],
                                    mask=obj["mask"], split=obj["split"]))
    return header, records


def load_split(manifest_path, split: str, cfg: PipelineConfig):
    root = Path(manifest_path).parent
    _, records = read_manifest(manifest_path)
    chosen = [r for r in records if r.split == split]
    if not chosen:
        raise DataError(f"split {split!r} has no samples")
    return [r.load(root, cfg) for r in chosen]


# ---------------------------------------------------------------------------
# derive

def _pair_files(image_dir: Path, label_dir: Path):
    """Lexicographic (stem, image, label) pairs plus the unpaired leftovers."""
    images = {p.stem: p for p in sorted(image_dir.glob("*.png"))}
    labels = {p.stem: p for p in sorted(label_dir.glob("*.png"))}
    pairs = [(s, images[s], labels[s]) for s in sorted(images.keys() & labels.keys())]
    unpaired = sorted(images.keys() ^ labels.keys())
    return pairs, unpaired


def cmd_derive(args) -> int:
    cfg = PipelineConfig.from_file(args.config)
    image_root, label_root = Path(args.images), Path(args.labels)
    if not image_root.is_dir() or not label_root.is_dir():
        raise DataError("image/label inputs must be directories")
    split_dirs = [(s, image_root / s, label_root / s) for s in SPLITS
                  if (image_root / s).is_dir()]
    if not split_dirs:
        split_dirs = [(args.split, image_root, label_root)]

    dist = cfg.distortion()
    fov = cfg.fov()
    out_root = Path(args.out)
    out_size = (cfg.out_height, cfg.out_width)
    records: list[SampleRecord] = []
    all_unpaired: list[str] = []
    for split, img_dir, lab_dir in split_dirs:
        pairs, unpaired = _pair_files(img_dir, lab_dir)
        all_unpaired += [f"{split}/{s}" for s in unpaired]
        for sub in ("images", "labels", "masks"):
            (out_root / split / sub).mkdir(parents=True, exist_ok=True)
        for stem, img_path, lab_path in pairs:
            image = read_image(img_path)
            labels = read_label(lab_path)
            warped_img = warp_image(image, dist, out_size, interp="bilinear")
            warped_lab = warp_image(labels, dist, out_size, interp="nearest",
                                    fill=cfg.ignore_index).astype(np.uint8)
            rec = SampleRecord(image=f"{split}/images/{stem}.png",
                               label=f"{split}/labels/{stem}.png",
                               mask=f"{split}/masks/{stem}.png", split=split)
            write_png(out_root / rec.image, warped_img)
            write_png(out_root / rec.label, warped_lab)
            write_png(out_root / rec.mask, fov.data * 255)
            records.append(rec)
    write_manifest(out_root / "manifest.jsonl", args.name, cfg.hash(), records)
    counts = {s: sum(1 for r in records if r.split == s) for s in SPLITS}
    print(f"derived {len(records)} samples {counts} -> {out_root}")
    if all_unpaired:
        for stem in all_unpaired:
            print(f"unpaired, skipped: {stem}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


# ---------------------------------------------------------------------------
# stats

def cmd_stats(args) -> int:
    cfg = PipelineConfig.from_file(args.config)
    root = Path(args.manifest).parent
    _, records = read_manifest(args.manifest)
    chosen = [r for r in records if r.split == args.split]
    if not chosen:
        raise DataError(f"split {args.split!r} has no samples")
    counts = np.zeros(cfg.num_classes, dtype=np.int64)
    missing = []
    for r in chosen:
        try:
            labels = read_label(root / r.label)
        except FileNotFoundError:
            missing.append(r.label)
            continue
        scored = labels[labels != cfg.ignore_index]
        counts += np.bincount(scored, minlength=cfg.num_classes)
    if missing:
        for path in missing:
            print(f"missing label file: {path}", file=sys.stderr)
        return EXIT_DATA
    total = counts.sum()
    if total == 0:
        raise DataError("no scored pixels in split")
    lines = ["class,pixels,percent"]
    for c in range(cfg.num_classes):
        lines.append(f"{c},{counts[c]},{float(100.0 * counts[c] / total)!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# demo / train / eval

def _rgb_to_u8(rgb: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def cmd_demo(args) -> int:
    cfg = PipelineConfig.from_file(args.config)
    mcfg = cfg.model_config()
    weights = M.load_weights(args.weights, expected=M.expected_shapes(mcfg))
    image = read_image(args.image).astype(np.float32) / 255.0
    mask_data = read_mask(args.mask)
    fov = cfg.fov()
    if not np.array_equal(mask_data, fov.data):
        raise DataError("mask PNG does not match the config's FoV circle")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    rgb, logits = M.forward(image, fov, mcfg, weights)
    seconds = time.perf_counter() - start
    pred = logits.data.argmax(axis=-1).astype(np.uint8)
    write_png(out_dir / "rgb.png", _rgb_to_u8(rgb.data))
    write_png(out_dir / "labels.png", pred)
    report = {"input": [mcfg.height, mcfg.width, 3],
              "rgb_out": list(rgb.shape), "logits": list(logits.shape),
              "seconds": seconds}
    (out_dir / "report.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"demo outputs in {out_dir} ({seconds:.3f}s forward)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = PipelineConfig.from_file(args.config)
    mcfg = cfg.model_config()
    samples = load_split(args.dataset, args.split, cfg)
    weights, curve = M.train_toy(samples, mcfg, steps=args.steps, lr=args.lr)
    M.save_weights(args.out_weights, weights)
    if args.curve:
        lines = ["step,loss"] + [f"{i + 1},{v!r}" for i, v in enumerate(curve)]
        Path(args.curve).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"trained {args.steps} steps on {len(samples)} samples: "
          f"loss {curve[0]:.4f} -> {curve[-1]:.4f}; weights -> {args.out_weights}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = PipelineConfig.from_file(args.config)
    mcfg = cfg.model_config()
    weights = M.load_weights(args.weights, expected=M.expected_shapes(mcfg))
    samples = load_split(args.dataset, args.split, cfg)
    region = None
    cm = MX.ConfusionMatrix(cfg.num_classes, ignore_index=cfg.ignore_index)
    psnrs, ssims = [], []
    for s in samples:
        if args.region == "blind":
            region = s.mask.inverted.astype(bool)
        rgb, logits = M.forward(s.image, s.mask, mcfg, weights)
        pred_u8 = _rgb_to_u8(rgb.data)
        gt_u8 = _rgb_to_u8(s.image)
        psnrs.append(MX.psnr(pred_u8, gt_u8, region=region))
        ssims.append(MX.ssim(pred_u8, gt_u8, region=region))
        cm.update(logits.data.argmax(axis=-1), s.labels, region=region)
    per_class = [None if np.isnan(v) else float(v) for v in cm.per_class_iou()]
    report = {"psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims)),
              "per_class_iou": per_class, "miou": cm.miou(),
              "scored_region": args.region}
    text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="beyondfov",
                     description="Fisheye outpainting + segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("derive", parents=[], help="warp pinhole pairs into a "
                       "fisheye benchmark with circular masks")
    p.add_argument("--config", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="dataset")
    p.add_argument("--split", default="train", choices=SPLITS,
                   help="split tag when inputs have no train/val subdirs")
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("stats", help="per-class pixel percentages as CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="train", choices=SPLITS)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("demo", help="run one forward pass, write PNGs + report")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("train", help="toy AdamW training over a derived split")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True, help="path to manifest.jsonl")
    p.add_argument("--split", default="train", choices=SPLITS)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out-weights", required=True)
    p.add_argument("--curve", default=None, help="optional loss-curve CSV path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PSNR/SSIM/mIoU over a split as JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--dataset", required=True, help="path to manifest.jsonl")
    p.add_argument("--split", default="val", choices=SPLITS)
    p.add_argument("--region", default="full", choices=("full", "blind"))
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except (DataError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (M.TrainingDivergedError, InversionError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
