"""Pixel-level data model, mask algebra, boxes and dataset manifest I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from PIL import Image

MIN_SIDE = 8
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")

ArrayLike = Union[np.ndarray, torch.Tensor]


class ManifestError(ValueError):
    pass


class PairLoadError(ValueError):
    pass


def _check_grid(data: np.ndarray, name: str) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {data.shape}")
    h, w = data.shape
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ValueError(f"{name} must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{name} contains non-finite values")
    if data.min() < 0.0 or data.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return data


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Single-channel intensity grid in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = _check_grid(self.data, "GrayImage")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def to_uint8(self) -> np.ndarray:
        return quantize(self.data)

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "GrayImage":
        return cls(np.asarray(arr, dtype=np.float64) / 255.0)

    def __eq__(self, other):
        return isinstance(other, GrayImage) and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class TargetMask(GrayImage):
    """Foreground map of thermal targets, values in [0, 1]."""

    def is_binary(self) -> bool:
        return bool(np.all((self.data == 0.0) | (self.data == 1.0)))

    def __eq__(self, other):
        return isinstance(other, TargetMask) and np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int = 0
    score: Optional[float] = None

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")
        if self.class_id < 0:
            raise ValueError("class_id must be non-negative")
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def inside(self, height: int, width: int) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height

    def clipped(self, height: int, width: int) -> "BoundingBox":
        return BoundingBox(
            max(0.0, min(float(self.x_min), width - 1e-6)),
            max(0.0, min(float(self.y_min), height - 1e-6)),
            min(float(width), max(float(self.x_max), 1e-6)),
            min(float(height), max(float(self.y_max), 1e-6)),
            self.class_id,
            self.score,
        )


def mask_coverage(mask: np.ndarray, box: BoundingBox) -> float:
    """Fraction of pixels inside ``box`` that are mask-positive."""
    x0, y0 = int(np.floor(box.x_min)), int(np.floor(box.y_min))
    x1, y1 = int(np.ceil(box.x_max)), int(np.ceil(box.y_max))
    region = np.asarray(mask)[y0:y1, x0:x1]
    if region.size == 0:
        return 0.0
    return float((region > 0.5).mean())


@dataclass(frozen=True)
class AnnotatedPair:
    infrared: GrayImage
    visible: GrayImage
    mask: TargetMask
    boxes: tuple[BoundingBox, ...]
    pair_id: str
    min_coverage: float = 0.0

    def __post_init__(self):
        shapes = {self.infrared.shape, self.visible.shape, self.mask.shape}
        if len(shapes) != 1:
            raise ValueError(
                f"pair {self.pair_id}: infrared {self.infrared.shape}, visible "
                f"{self.visible.shape} and mask {self.mask.shape} differ"
            )
        h, w = self.infrared.shape
        for b in self.boxes:
            if not b.inside(h, w):
                raise ValueError(f"pair {self.pair_id}: box {b} outside {h}x{w} image")
            if self.min_coverage > 0 and mask_coverage(self.mask.data, b) < self.min_coverage:
                raise ValueError(f"pair {self.pair_id}: box {b} does not overlap the mask")

    @property
    def shape(self) -> tuple[int, int]:
        return self.infrared.shape


def quantize(v: ArrayLike) -> np.ndarray:
    """Map [0, 1] intensities to 8-bit levels with round-half-to-even."""
    if isinstance(v, torch.Tensor):
        v = v.detach().cpu().numpy()
    return np.clip(np.rint(np.asarray(v, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _raw(v):
    return v.data if isinstance(v, GrayImage) else v


def apply_mask(img, m):
    """Elementwise ``img * m``; keeps the kind of ``img`` (GrayImage, ndarray or tensor)."""
    a, b = _raw(img), _raw(m)
    if tuple(a.shape[-2:]) != tuple(b.shape[-2:]):
        raise ValueError(f"shape mismatch: image {tuple(a.shape)} vs mask {tuple(b.shape)}")
    if isinstance(a, torch.Tensor) and not isinstance(b, torch.Tensor):
        b = torch.as_tensor(np.asarray(b), dtype=a.dtype, device=a.device)
    out = a * b
    if isinstance(img, GrayImage):
        return type(img)(out)
    return out


def complement_mask(m):
    """Background selector ``1 - m``."""
    raw = _raw(m)
    out = 1.0 - raw
    if isinstance(m, GrayImage):
        return TargetMask(out)
    return out


# --- files -----------------------------------------------------------------


def save_png(path: Union[str, Path], img: Union[GrayImage, np.ndarray]) -> None:
    arr = img.to_uint8() if isinstance(img, GrayImage) else np.asarray(img)
    if arr.dtype != np.uint8:
        arr = quantize(arr)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def read_png(path: Union[str, Path]) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "1"):
            im = im.convert("L")
        arr = np.array(im.convert("L"), dtype=np.uint8)
    return arr


def write_boxes(path: Union[str, Path], boxes) -> None:
    lines = [f"{b.class_id} {b.x_min:g} {b.y_min:g} {b.x_max:g} {b.y_max:g}" for b in boxes]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_boxes(path: Union[str, Path]) -> list[BoundingBox]:
    boxes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise PairLoadError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
        try:
            cls = int(parts[0])
            x0, y0, x1, y1 = (float(p) for p in parts[1:])
            boxes.append(BoundingBox(x0, y0, x1, y1, cls))
        except ValueError as exc:
            raise PairLoadError(f"{path}:{lineno}: {exc}") from exc
    return boxes


@dataclass(frozen=True)
class ManifestEntry:
    pair_id: str
    ir: str
    vis: str
    mask: str
    ann: str
    tag: Optional[str] = None

    def paths(self) -> tuple[str, str, str, str]:
        return (self.ir, self.vis, self.mask, self.ann)


@dataclass(frozen=True)
class DatasetManifest:
    root_path: str
    entries: tuple[ManifestEntry, ...] = ()
    split: str = "train"
    seed: int = 0

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(f"split must be one of {SPLITS}, got {self.split!r}")
        ids = [e.pair_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate pair_id in manifest")

    def __len__(self):
        return len(self.entries)

    @property
    def pair_ids(self) -> list[str]:
        return [e.pair_id for e in self.entries]

    def entry(self, pair_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.pair_id == pair_id:
                return e
        raise KeyError(f"unknown pair_id {pair_id!r}")

    def resolve(self, rel: str) -> Path:
        return Path(self.root_path) / rel


def write_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> None:
    header = {
        "version": MANIFEST_VERSION,
        "split": manifest.split,
        "seed": manifest.seed,
        "count": len(manifest.entries),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for e in manifest.entries:
        rec = {"pair_id": e.pair_id, "ir": e.ir, "vis": e.vis, "mask": e.mask, "ann": e.ann}
        if e.tag is not None:
            rec["tag"] = e.tag
        lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: Union[str, Path], check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    lines = path.read_text().splitlines()
    if not lines:
        raise ManifestError(f"{path}:1: empty manifest (missing header)")
    try:
        header = json.loads(lines[0])
        split, seed, count = header["split"], int(header["seed"]), int(header["count"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path}:1: malformed header: {exc}") from exc
    if header.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}:1: unsupported manifest version {header.get('version')!r}")

    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            entry = ManifestEntry(
                str(rec["pair_id"]), rec["ir"], rec["vis"], rec["mask"], rec["ann"], rec.get("tag")
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ManifestError(f"{path}:{lineno}: malformed record: {exc}") from exc
        entries.append(entry)
    if len(entries) != count:
        raise ManifestError(f"{path}: header count {count} but {len(entries)} records")

    manifest = DatasetManifest(str(path.parent), tuple(entries), split, seed)
    if check_files:
        for e in manifest.entries:
            for rel in e.paths():
                if not manifest.resolve(rel).is_file():
                    raise ManifestError(f"pair {e.pair_id}: missing file {rel}")
    return manifest


def load_pair(manifest: DatasetManifest, pair_id: str, min_coverage: float = 0.0) -> AnnotatedPair:
    try:
        entry = manifest.entry(pair_id)
    except KeyError as exc:
        raise PairLoadError(str(exc)) from exc

    arrays = []
    for rel in (entry.ir, entry.vis, entry.mask):
        try:
            arrays.append(read_png(manifest.resolve(rel)))
        except (OSError, SyntaxError) as exc:
            raise PairLoadError(f"pair {pair_id}: cannot decode {rel}: {exc}") from exc
    ir, vis, mask = arrays
    try:
        boxes = read_boxes(manifest.resolve(entry.ann))
        return AnnotatedPair(
            GrayImage.from_uint8(ir),
            GrayImage.from_uint8(vis),
            TargetMask.from_uint8(mask),
            tuple(boxes),
            pair_id,
            min_coverage,
        )
    except (OSError, ValueError) as exc:
        if isinstance(exc, PairLoadError):
            raise
        raise PairLoadError(f"pair {pair_id}: {exc}") from exc


def load_all(manifest: DatasetManifest) -> list[AnnotatedPair]:
    return [load_pair(manifest, pid) for pid in manifest.pair_ids]
