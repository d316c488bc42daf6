"""Fusion generator, the two critics and a small single-scale detector."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .imagecore import BoundingBox
from .signalops import iou

DETECTOR_STRIDE = 16


class NonFiniteActivation(FloatingPointError):
    pass


def _conv_bn_relu(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, 1, 1),
        nn.BatchNorm2d(cout),
        nn.ReLU(),
    )


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5))
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class Generator(nn.Module):
    r"""
    Dense block + merge block fusion network.
    ir + vi -> fus, output squashed to [0, 1] by (tanh + 1) / 2.
    """

    def __init__(self, growth: int = 16, depth: int = 5, merge: tuple[int, int] = (32, 16)):
        super().__init__()
        self.depth = depth
        self.dense = nn.ModuleList([_conv_bn_relu(2 + i * growth, growth) for i in range(depth)])
        width = 2 + depth * growth
        self.merge = nn.Sequential(
            _conv_bn_relu(width, merge[0]),
            _conv_bn_relu(merge[0], merge[1]),
            nn.Conv2d(merge[1], 1, 3, 1, 1),
        )
        init_weights(self)

    def forward(self, ir: Tensor, vi: Tensor) -> Tensor:
        if ir.shape != vi.shape:
            raise ValueError(f"infrared {tuple(ir.shape)} and visible {tuple(vi.shape)} differ")
        feats = torch.cat([ir, vi], dim=1)
        for i, layer in enumerate(self.dense):
            out = layer(feats)
            _check_finite(out, f"dense.{i}")
            feats = torch.cat([feats, out], dim=1)
        z = self.merge(feats)
        _check_finite(z, "merge")
        return 0.5 * (torch.tanh(z) + 1.0)


class Critic(nn.Module):
    """Four stride-2 convs with leaky ReLU, global average pool, one linear score.

    No normalization layers: the gradient penalty needs per-sample gradients.
    """

    min_size = 16

    def __init__(self, channels: tuple[int, ...] = (16, 32, 64, 64), slope: float = 0.2):
        super().__init__()
        layers, cin = [], 1
        for c in channels:
            layers += [nn.Conv2d(cin, c, 3, 2, 1), nn.LeakyReLU(slope)]
            cin = c
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(cin, 1)
        init_weights(self)

    def forward(self, x: Tensor) -> Tensor:
        if min(x.shape[-2:]) < self.min_size:
            raise ValueError(f"critic input must be at least {self.min_size}px, got {tuple(x.shape[-2:])}")
        h = self.features(x).mean(dim=(2, 3))
        return self.fc(h).squeeze(1)


class Detector(nn.Module):
    """Anchor-free single-scale detector; one prediction per 16x16 cell.

    Channels per cell: objectness logit, (tx, ty, tw, th), class logits.
    """

    def __init__(self, num_classes: int = 3, channels: tuple[int, ...] = (16, 32, 64, 64)):
        super().__init__()
        self.num_classes = num_classes
        layers, cin = [], 1
        for c in channels:
            layers += [nn.Conv2d(cin, c, 3, 2, 1), nn.LeakyReLU(0.1)]
            cin = c
        self.backbone = nn.Sequential(*layers)
        self.head = nn.Conv2d(cin, 5 + num_classes, 1)
        init_weights(self)

    def forward(self, u: Tensor) -> Tensor:
        h, w = u.shape[-2:]
        if h % DETECTOR_STRIDE or w % DETECTOR_STRIDE:
            raise ValueError(f"detector input sides must be divisible by {DETECTOR_STRIDE}, got {h}x{w}")
        return self.head(self.backbone(u))


def _check_finite(t: Tensor, layer: str) -> None:
    if not torch.isfinite(t).all():
        raise NonFiniteActivation(f"non-finite activation after layer {layer}")


# --- box coding --------------------------------------------------------------


def encode_box(box: BoundingBox, stride: int = DETECTOR_STRIDE) -> tuple[int, int, list[float]]:
    """Cell (row, col) owning the box center and regression targets for it.

    Targets are (fx, fy, log(w/stride), log(h/stride)); fx, fy are the center
    offsets inside the cell, matched against sigmoid(tx), sigmoid(ty).
    """
    cx, cy = box.center
    col, row = int(cx // stride), int(cy // stride)
    fx, fy = cx / stride - col, cy / stride - row
    tw = math.log((box.x_max - box.x_min) / stride)
    th = math.log((box.y_max - box.y_min) / stride)
    return row, col, [fx, fy, tw, th]


def nms(boxes: list[BoundingBox], iou_thresh: float) -> list[BoundingBox]:
    """Greedy per-class non-maximum suppression, highest score first."""
    order = sorted(boxes, key=lambda b: -b.score)
    keep: list[BoundingBox] = []
    for b in order:
        if all(k.class_id != b.class_id or iou(k, b) <= iou_thresh for k in keep):
            keep.append(b)
    return keep


def decode_detections(
    raw: Tensor,
    conf_thresh: float = 0.25,
    nms_iou: float = 0.45,
    stride: int = DETECTOR_STRIDE,
) -> list[list[BoundingBox]]:
    """Turn raw grid predictions (N, 5+C, gh, gw) into scored boxes per image."""
    raw = raw.detach().to(torch.float64)
    if raw.dim() == 3:
        raw = raw[None]
    n, ch, gh, gw = raw.shape
    height, width = gh * stride, gw * stride
    obj = torch.sigmoid(raw[:, 0])
    cls_prob = torch.softmax(raw[:, 5:], dim=1)
    best_p, best_c = cls_prob.max(dim=1)
    score = obj * best_p

    out = []
    for i in range(n):
        boxes = []
        rows, cols = torch.nonzero(score[i] >= conf_thresh, as_tuple=True)
        for r, c in zip(rows.tolist(), cols.tolist()):
            tx, ty, tw, th = raw[i, 1:5, r, c].tolist()
            cx = (c + _sigmoid(tx)) * stride
            cy = (r + _sigmoid(ty)) * stride
            bw = math.exp(min(tw, 10.0)) * stride
            bh = math.exp(min(th, 10.0)) * stride
            x0, x1 = max(0.0, cx - bw / 2), min(float(width), cx + bw / 2)
            y0, y1 = max(0.0, cy - bh / 2), min(float(height), cy + bh / 2)
            if x1 <= x0 or y1 <= y0:
                continue
            s = min(1.0, max(0.0, float(score[i, r, c])))
            boxes.append(BoundingBox(x0, y0, x1, y1, int(best_c[i, r, c]), s))
        out.append(nms(boxes, nms_iou))
    return out


def _sigmoid(v: float) -> float:
    return 1.0 / (1.0 + math.exp(-v)) if v >= 0 else math.exp(v) / (1.0 + math.exp(v))
