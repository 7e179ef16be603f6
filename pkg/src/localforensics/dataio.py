"""Manifests, image/mask decoding, batching, and the synthetic manipulation
benchmark used in place of real face-forgery datasets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .errors import DimensionError, FormatError
from .maskgen import (
    convex_hull,
    convex_hull_mask,
    load_landmarks,
    load_mask_png,
    ones_mask,
    rasterize_hull,
    save_landmarks,
    save_mask_png,
    zeros_mask,
)
from .tensor import Tensor

MANIFEST_VERSION = 1
MASK_SOURCES = ("file", "zm", "om", "cvm")
REAL, FAKE = 0, 1


@dataclass
class MaskSource:
    source: str
    path: str | None = None

    def __post_init__(self):
        if self.source not in MASK_SOURCES:
            raise FormatError(f"unknown mask source {self.source!r}")
        if self.source == "file" and not self.path:
            raise FormatError("file mask source needs a path")

    def to_dict(self) -> dict:
        return {"source": self.source, "path": self.path} if self.path else {"source": self.source}


@dataclass
class SampleRecord:
    image: str
    label: int
    masks: list[MaskSource]
    landmarks: str | None = None
    kind: str | None = None

    def to_dict(self) -> dict:
        d = {"image": self.image, "label": self.label, "masks": [m.to_dict() for m in self.masks]}
        if self.landmarks is not None:
            d["landmarks"] = self.landmarks
        if self.kind is not None:
            d["kind"] = self.kind
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        return cls(
            image=d["image"],
            label=int(d["label"]),
            masks=[MaskSource(**m) for m in d.get("masks", [])],
            landmarks=d.get("landmarks"),
            kind=d.get("kind"),
        )


@dataclass
class Manifest:
    objectives: list[str]
    records: list[SampleRecord]
    crop_size: int
    root: Path = field(default_factory=Path)
    version: int = MANIFEST_VERSION
    stats: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.objectives)

    def __len__(self) -> int:
        return len(self.records)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "format_version": self.version,
            "k": self.k,
            "objectives": list(self.objectives),
            "crop_size": self.crop_size,
            "samples": [r.to_dict() for r in self.records],
            "stats": self.stats,
        }

    def validate(self, check_files: bool = True) -> None:
        for i, r in enumerate(self.records):
            if r.label not in (REAL, FAKE):
                raise FormatError(f"sample {i}: label {r.label} is not binary")
            if len(r.masks) != self.k:
                raise FormatError(f"sample {i}: {len(r.masks)} mask sources, manifest k={self.k}")
            if any(m.source == "cvm" for m in r.masks) and not r.landmarks:
                raise FormatError(f"sample {i}: CVM mask source needs a landmarks file")
            if check_files:
                paths = [r.image] + [m.path for m in r.masks if m.path] + ([r.landmarks] if r.landmarks else [])
                for p in paths:
                    if not (self.root / p).is_file():
                        raise FileNotFoundError(f"sample {i}: missing file {self.root / p}")


def write_manifest(manifest: Manifest, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest.to_dict(), indent=1))
    return path


def load_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if d.get("format_version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {d.get('format_version')!r}")
    m = Manifest(
        objectives=list(d["objectives"]),
        records=[SampleRecord.from_dict(s) for s in d["samples"]],
        crop_size=int(d["crop_size"]),
        root=path.parent,
        stats=d.get("stats", {}),
    )
    if d.get("k", m.k) != m.k:
        raise FormatError(f"{path}: k={d['k']} but {m.k} objective names")
    m.validate(check_files)
    return m


def select_objectives(manifest: Manifest, names: list[str]) -> Manifest:
    """Sub-manifest keeping only the named objectives, in the given order."""
    missing = [n for n in names if n not in manifest.objectives]
    if missing:
        raise FormatError(f"objectives {missing} not in manifest ({manifest.objectives})")
    idx = [manifest.objectives.index(n) for n in names]
    recs = [SampleRecord(r.image, r.label, [r.masks[i] for i in idx], r.landmarks, r.kind) for r in manifest.records]
    return Manifest(list(names), recs, manifest.crop_size, manifest.root, manifest.version, manifest.stats)


# ---------------------------------------------------------------- decoding


def _read_rgb_u8(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise OSError(f"expected an RGB image, found mode {im.mode}")
            return np.asarray(im, dtype=np.uint8).copy()
    except OSError as exc:
        raise OSError(f"cannot load image {path}: {exc}") from exc


def normalize(u8: np.ndarray) -> np.ndarray:
    """HWC or NHWC uint8 -> channel-first float32 in [-0.5, 0.5]."""
    x = u8.astype(np.float32) / np.float32(255.0) - np.float32(0.5)
    return np.moveaxis(x, -1, -3)


def load_image(path) -> Tensor:
    return Tensor(np.ascontiguousarray(normalize(_read_rgb_u8(path))))


def resolve_mask(record: SampleRecord, objective: int, h: int, w: int, root=".") -> np.ndarray:
    src = record.masks[objective]
    root = Path(root)
    if src.source == "zm":
        return zeros_mask(h, w)
    if src.source == "om":
        return ones_mask(h, w)
    if src.source == "cvm":
        return convex_hull_mask(load_landmarks(root / record.landmarks), h, w)
    mask = load_mask_png(root / src.path)
    if mask.shape != (h, w):
        raise DimensionError(f"mask {src.path} has shape {mask.shape}, image is {(h, w)}")
    return mask


@dataclass
class LoadedSet:
    """Decoded manifest held in memory as uint8 arrays."""

    images: np.ndarray  # N x H x W x 3
    masks: np.ndarray  # N x k x H x W
    labels: np.ndarray
    objectives: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def size(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]


def preload(manifest: Manifest) -> LoadedSet:
    imgs, masks = [], []
    for rec in manifest.records:
        img = _read_rgb_u8(manifest.root / rec.image)
        if imgs and img.shape != imgs[0].shape:
            raise DimensionError(f"{rec.image}: size {img.shape[:2]} differs from {imgs[0].shape[:2]}")
        h, w = img.shape[:2]
        imgs.append(img)
        masks.append(np.stack([resolve_mask(rec, j, h, w, manifest.root) for j in range(manifest.k)])
                     if manifest.k else np.zeros((0, h, w), np.uint8))
    if not imgs:
        raise DimensionError("manifest has no samples")
    return LoadedSet(np.stack(imgs), np.stack(masks), manifest.labels(), list(manifest.objectives))


@dataclass
class Batch:
    images: np.ndarray  # N x 3 x c x c float32
    labels: np.ndarray
    masks: np.ndarray  # N x k x c x c uint8
    indices: np.ndarray
    offsets: np.ndarray  # N x 2 (row, col) crop origin


def batch_iterator(
    data: Manifest | LoadedSet,
    batch_size: int,
    crop: str = "center",
    crop_size: int | None = None,
    shuffle_seed: int | None = None,
) -> Iterator[Batch]:
    """Deterministic batches; masks are cropped with the image's offsets and
    the final partial batch is emitted."""
    ds = preload(data) if isinstance(data, Manifest) else data
    h, w = ds.size
    c = crop_size or min(h, w)
    if c > h or c > w:
        raise DimensionError(f"crop {c} larger than image {h}x{w}")
    if crop not in ("center", "random"):
        raise ValueError(f"crop must be 'center' or 'random', got {crop!r}")
    rng = np.random.default_rng(shuffle_seed)
    order = np.arange(len(ds)) if shuffle_seed is None else rng.permutation(len(ds))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if crop == "center":
            offs = np.tile([(h - c) // 2, (w - c) // 2], (len(idx), 1))
        else:
            offs = np.stack([rng.integers(0, h - c + 1, len(idx)), rng.integers(0, w - c + 1, len(idx))], axis=1)
        imgs = np.stack([ds.images[i, r:r + c, q:q + c] for i, (r, q) in zip(idx, offs)])
        masks = np.stack([ds.masks[i, :, r:r + c, q:q + c] for i, (r, q) in zip(idx, offs)])
        yield Batch(np.ascontiguousarray(normalize(imgs)), ds.labels[idx], masks, idx, offs)


# --------------------------------------------------------------- synthesis


@dataclass
class SynthParams:
    count: int = 100  # images per class
    size: int = 128
    seed: int = 0
    amplitude: float = 0.02
    levels: int = 32
    smoothing: int = 3
    manipulated_fraction: float = 0.5  # share of fakes that are partial edits
    emit_clean: bool = True

    def validate(self) -> None:
        if self.size < 33:
            raise ValueError(f"size must be >= 33, got {self.size}")
        if not 0 < self.amplitude < 0.5:
            raise ValueError(f"amplitude must be in (0, 0.5), got {self.amplitude}")
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.count < 1:
            raise ValueError("count must be >= 1")


SYNTH_OBJECTIVES = ["fake", "face", "fake_cvm"]
N_LANDMARKS = 17


def _box_blur(img: np.ndarray, passes: int) -> np.ndarray:
    for _ in range(passes):
        p = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
        img = sum(p[i:i + img.shape[0], j:j + img.shape[1]] for i in range(3) for j in range(3)) / 9.0
    return img


def apply_artifact(img: np.ndarray, region: np.ndarray, amplitude: float, levels: int) -> np.ndarray:
    """Quantize channels to ``levels`` and add a +/- amplitude checkerboard of
    2x2 cells inside ``region`` (HxW bool); pixels outside are untouched."""
    h, w = region.shape
    r, c = np.mgrid[0:h, 0:w]
    sign = np.where(((r // 2) + (c // 2)) % 2 == 0, 1.0, -1.0)[..., None]
    q = np.round(img * (levels - 1)) / (levels - 1)
    art = np.clip(q + amplitude * sign, 0.0, 1.0)
    return np.where(region[..., None], art, img)


def _render_clean(rng: np.random.Generator, size: int, smoothing: int):
    bg = _box_blur(rng.random((size, size, 3)), smoothing)
    bg = (bg - bg.min()) / max(bg.max() - bg.min(), 1e-9)
    base = rng.uniform(0.25, 0.45, 3)
    img = base + 0.25 * (bg - 0.5)

    cx = size / 2 + rng.uniform(-0.05, 0.05) * size
    cy = size / 2 + rng.uniform(-0.05, 0.05) * size
    ax = rng.uniform(0.24, 0.32) * size
    ay = rng.uniform(0.30, 0.38) * size
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    inside = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0
    skin = np.array([rng.uniform(0.6, 0.75), rng.uniform(0.45, 0.6), rng.uniform(0.35, 0.5)])
    img = np.where(inside[..., None], 0.7 * skin + 0.3 * img + 0.1 * (bg - 0.5), img)
    img = np.clip(img, 0.05, 0.95)

    phase = rng.uniform(0, 2 * np.pi)
    ang = phase + np.linspace(0, 2 * np.pi, N_LANDMARKS, endpoint=False)
    landmarks = np.stack([cx + ax * np.cos(ang), cy + ay * np.sin(ang)], axis=1)
    return img, (cx, cy, ax, ay), landmarks


def _random_region(rng: np.random.Generator, ellipse, size: int) -> tuple[np.ndarray, list]:
    cx, cy, ax, ay = ellipse
    for _ in range(100):
        n = rng.integers(5, 10)
        rad = 0.85 * np.sqrt(rng.random(n))
        th = rng.uniform(0, 2 * np.pi, n)
        pts = np.stack([cx + ax * rad * np.cos(th), cy + ay * rad * np.sin(th)], axis=1)
        try:
            hull = convex_hull(pts)
        except ValueError:
            continue
        region = rasterize_hull(hull, size, size)
        if region.sum() >= 0.15 * np.pi * ax * ay:
            return region.astype(bool), hull
    raise RuntimeError("could not draw a manipulation region")


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def synth_dataset(params: SynthParams, out_dir) -> Manifest:
    """Write a balanced synthetic set (images, masks, landmarks, manifest.json).

    Kinds: ``real`` (label 0), ``manipulated`` (artifact inside a random
    convex polygon in the face), ``generated`` (artifact everywhere). The
    manifest carries three objectives: ``fake`` (true manipulation mask),
    ``face`` (landmark convex hull) and ``fake_cvm`` (landmark hull on
    manipulated samples, ZM/OM otherwise).
    """
    params.validate()
    out = Path(out_dir)
    for sub in ("images", "masks", "landmarks") + (("clean",) if params.emit_clean else ()):
        (out / sub).mkdir(parents=True, exist_ok=True)
    n_manip = int(round(params.count * params.manipulated_fraction))
    kinds = ["real"] * params.count + ["manipulated"] * n_manip + ["generated"] * (params.count - n_manip)
    records, deltas = [], []
    for i, kind in enumerate(kinds):
        rng = np.random.default_rng([params.seed, i])
        clean, ellipse, landmarks = _render_clean(rng, params.size, params.smoothing)
        name = f"{i:05d}"
        lm_rel = f"landmarks/{name}.json"
        save_landmarks(landmarks, out / lm_rel)
        if kind == "real":
            img = clean
            masks = [MaskSource("zm"), MaskSource("cvm"), MaskSource("zm")]
        elif kind == "manipulated":
            region, _ = _random_region(rng, ellipse, params.size)
            img = apply_artifact(clean, region, params.amplitude, params.levels)
            mask_rel = f"masks/{name}_fake.png"
            save_mask_png(region, out / mask_rel)
            masks = [MaskSource("file", mask_rel), MaskSource("cvm"), MaskSource("cvm")]
        else:
            region = np.ones((params.size, params.size), bool)
            img = apply_artifact(clean, region, params.amplitude, params.levels)
            masks = [MaskSource("om"), MaskSource("cvm"), MaskSource("om")]
        u8 = _to_u8(img)
        Image.fromarray(u8, mode="RGB").save(out / "images" / f"{name}.png")
        if kind != "real":
            clean_u8 = _to_u8(clean)
            if params.emit_clean:
                Image.fromarray(clean_u8, mode="RGB").save(out / "clean" / f"{name}.png")
            diff = np.abs(u8.astype(np.int16) - clean_u8.astype(np.int16)) / 255.0
            deltas.append(float(diff[region].mean()))
        records.append(SampleRecord(f"images/{name}.png", REAL if kind == "real" else FAKE, masks, lm_rel, kind))

    stats = {
        "params": asdict(params),
        "counts": {k: kinds.count(k) for k in ("real", "manipulated", "generated")},
        "artifact_mean_abs_delta": float(np.mean(deltas)) if deltas else 0.0,
    }
    manifest = Manifest(list(SYNTH_OBJECTIVES), records, params.size, out, stats=stats)
    write_manifest(manifest, out / "manifest.json")
    return manifest
