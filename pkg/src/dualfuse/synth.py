"""Seeded synthetic infrared/visible pairs with exact masks and boxes.

Infrared: smooth low-contrast background, targets rendered bright, no texture.
Visible: same scene layout with high-frequency texture and weak target contrast.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from .imagecore import (
    AnnotatedPair,
    BoundingBox,
    DatasetManifest,
    GrayImage,
    ManifestEntry,
    TargetMask,
    mask_coverage,
    save_png,
    write_boxes,
    write_manifest,
)
from .signalops import threshold_saliency_mask

CLASS_NAMES = ("disc", "rectangle", "triangle")


@dataclass
class SynthConfig:
    count: int = 64
    image_size: int = 64
    targets_min: int = 1
    targets_max: int = 4
    target_size: tuple[int, int] = (8, 18)
    ir_target: tuple[float, float] = (0.8, 1.0)
    ir_background: tuple[float, float] = (0.2, 0.4)
    vis_target_contrast: float = 0.12
    texture: float = 0.08
    noise: float = 0.02
    num_classes: int = 3
    seed: int = 0
    split: str = "train"

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.image_size % 16 or self.image_size < 16:
            raise ValueError(f"image_size must be a positive multiple of 16, got {self.image_size}")
        if not 1 <= self.targets_min <= self.targets_max:
            raise ValueError("need 1 <= targets_min <= targets_max")
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in [1, {len(CLASS_NAMES)}]")
        for name in ("ir_target", "ir_background"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError(f"{name} must be an increasing range inside [0, 1]")
        for name in ("vis_target_contrast", "texture", "noise"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


def smooth_field(rng: np.random.Generator, size: int, octaves=(4, 8, 16)) -> np.ndarray:
    """Multi-octave value noise scaled to [0, 1]."""
    field = np.zeros((size, size))
    amp = 1.0
    for cells in octaves:
        coarse = rng.standard_normal((cells + 1, cells + 1))
        up = ndimage.zoom(coarse, size / cells, order=3, mode="nearest")[:size, :size]
        field += amp * up
        amp *= 0.5
    field -= field.min()
    peak = field.max()
    return field / peak if peak > 0 else field


def _shape_mask(kind: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == 0:
        cy, cx = (h - 1) / 2, (w - 1) / 2
        return ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
    if kind == 1:
        return np.ones((h, w), dtype=bool)
    # apex at top centre, base along the bottom row
    half = (yy + 1) / h * (w / 2)
    return np.abs(xx + 0.5 - w / 2) <= half


def _place_targets(rng, cfg: SynthConfig):
    size = cfg.image_size
    n = int(rng.integers(cfg.targets_min, cfg.targets_max + 1))
    placed, cells = [], set()
    for _ in range(200):
        if len(placed) == n:
            break
        h, w = (int(v) for v in rng.integers(cfg.target_size[0], cfg.target_size[1] + 1, size=2))
        y0, x0 = int(rng.integers(1, size - h)), int(rng.integers(1, size - w))
        cell = (int((y0 + h / 2) // 16), int((x0 + w / 2) // 16))
        if cell in cells:
            continue
        if any(y0 < b[0] + b[2] + 2 and b[0] < y0 + h + 2 and x0 < b[1] + b[3] + 2 and b[1] < x0 + w + 2 for b in placed):
            continue
        cls = int(rng.integers(0, cfg.num_classes))
        placed.append((y0, x0, h, w, cls))
        cells.add(cell)
    return placed


def make_pair(cfg: SynthConfig, index: int) -> AnnotatedPair:
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.image_size
    scene = smooth_field(rng, size)
    detail = smooth_field(rng, size, octaves=(8, 16))
    texture = ndimage.gaussian_filter(rng.standard_normal((size, size)), 0.7)
    texture /= texture.std() + 1e-12

    lo, hi = cfg.ir_background
    ir = lo + (hi - lo) * scene
    vis = 0.25 + 0.3 * scene + 0.2 * detail + cfg.texture * texture

    mask = np.zeros((size, size))
    boxes = []
    for y0, x0, h, w, cls in _place_targets(rng, cfg):
        shape = _shape_mask(cls, h, w)
        region = (slice(y0, y0 + h), slice(x0, x0 + w))
        ir[region][shape] = rng.uniform(*cfg.ir_target)
        vis[region][shape] += rng.uniform(-cfg.vis_target_contrast, cfg.vis_target_contrast)
        mask[region][shape] = 1.0
        ys, xs = np.nonzero(shape)
        boxes.append(BoundingBox(float(x0 + xs.min()), float(y0 + ys.min()),
                                 float(x0 + xs.max() + 1), float(y0 + ys.max() + 1), cls))

    ir = np.clip(ir + cfg.noise * rng.standard_normal(ir.shape), 0.0, 1.0)
    vis = np.clip(vis + cfg.noise * rng.standard_normal(vis.shape), 0.0, 1.0)
    # stored files are 8-bit, so in-memory pairs use the same quantized values
    ir, vis = np.rint(ir * 255) / 255, np.rint(vis * 255) / 255
    return AnnotatedPair(GrayImage(ir), GrayImage(vis), TargetMask(mask), tuple(boxes),
                         f"{cfg.split}_{index:05d}", min_coverage=0.25)


def synth_dataset(cfg: SynthConfig, out_dir: Union[str, Path]) -> DatasetManifest:
    """Write ``cfg.count`` pairs plus ``manifest.jsonl`` under ``out_dir``."""
    out = Path(out_dir)
    try:
        for sub in ("ir", "vis", "mask", "ann"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc

    entries = []
    for i in range(cfg.count):
        pair = make_pair(cfg, i)
        pid = pair.pair_id
        rel = {k: f"{k}/{pid}.{'txt' if k == 'ann' else 'png'}" for k in ("ir", "vis", "mask", "ann")}
        save_png(out / rel["ir"], pair.infrared)
        save_png(out / rel["vis"], pair.visible)
        save_png(out / rel["mask"], pair.mask)
        write_boxes(out / rel["ann"], pair.boxes)
        entries.append(ManifestEntry(pid, rel["ir"], rel["vis"], rel["mask"], rel["ann"]))
    manifest = DatasetManifest(str(out), tuple(entries), cfg.split, cfg.seed)
    write_manifest(manifest, out / "manifest.jsonl")
    return manifest


def mask_oracle(ir: GrayImage, source: str = "ground_truth", pair: Optional[AnnotatedPair] = None) -> TargetMask:
    """Stand-in for a learned saliency network: stored mask or thresholded saliency."""
    if source == "ground_truth":
        if pair is None or pair.mask is None:
            raise ValueError("ground_truth mask requested but the pair carries none")
        return pair.mask
    if source == "threshold_saliency":
        return TargetMask(threshold_saliency_mask(ir.data))
    raise ValueError(f"unknown mask source {source!r}")


def coverage_report(pair: AnnotatedPair) -> list[float]:
    return [mask_coverage(pair.mask.data, b) for b in pair.boxes]
