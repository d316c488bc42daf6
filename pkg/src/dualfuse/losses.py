"""Training objectives for fusion, the two critics and the detector.

Sign convention (Wasserstein): a critic minimizes
``mean(D(fake)) - mean(D(real)) + penalty``; the generator minimizes
``-mean(D(fake))``. Image-domain losses are means over pixels.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .imagecore import BoundingBox
from .nets import DETECTOR_STRIDE, encode_box
from .signalops import saliency_map, sdw_weights, sobel_gradient, ssim_per_image

ALPHA = 20.0
BETA = 0.1
LAMBDA = 1.0
PENALTY_K = 2.0
PENALTY_P = 6.0
DET_WEIGHTS = (1.0, 5.0, 1.0)

CriticFn = Callable[[Tensor], Tensor]


@dataclass
class LossBreakdown:
    ssim_term: Tensor
    pixel_term: Tensor
    adv_term: Tensor
    total_fusion: Tensor
    detection_term: Optional[Tensor] = None
    joint_total: Optional[Tensor] = None
    alpha: float = ALPHA
    beta: float = BETA
    lam: Optional[float] = None
    k: float = PENALTY_K
    p: float = PENALTY_P
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {}
        for name in ("ssim_term", "pixel_term", "adv_term", "total_fusion", "detection_term", "joint_total"):
            v = getattr(self, name)
            out[name] = None if v is None else float(v.detach())
        out.update(alpha=self.alpha, beta=self.beta, lam=self.lam, k=self.k, p=self.p)
        out.update({key: float(v) for key, v in self.extra.items()})
        return out


def _check_same(*tensors: Tensor) -> None:
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


@contextlib.contextmanager
def frozen(*modules):
    """Temporarily disable parameter gradients so only inputs receive them."""
    saved = []
    for m in modules:
        if isinstance(m, nn.Module):
            for p in m.parameters():
                saved.append((p, p.requires_grad))
                p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


# --- fusion terms ------------------------------------------------------------------


def ssim_loss(u: Tensor, x: Tensor, y: Tensor) -> Tensor:
    _check_same(u, x, y)
    return ((1 - ssim_per_image(u, x)) / 2 + (1 - ssim_per_image(u, y)) / 2).mean()


def sdw_weight_maps(x: Tensor, y: Tensor) -> tuple[Tensor, Tensor]:
    """Per-image saliency-degree weights as constant tensors shaped like ``x``."""
    xs = x.detach().cpu().numpy().reshape(-1, *x.shape[-2:])
    ys = y.detach().cpu().numpy().reshape(-1, *y.shape[-2:])
    w1 = np.empty_like(xs, dtype=np.float64)
    for i, (xi, yi) in enumerate(zip(xs, ys)):
        w1[i], _ = sdw_weights(saliency_map(xi), saliency_map(yi))
    w1_t = torch.as_tensor(w1, dtype=x.dtype, device=x.device).reshape(x.shape)
    return w1_t, 1.0 - w1_t


def pixel_loss(u: Tensor, x: Tensor, y: Tensor, use_sdw: bool = True, weights=None) -> Tensor:
    """``mean|u - w1*x| + mean|u - w2*y|``; without SDW both weights are 1."""
    _check_same(u, x, y)
    if not use_sdw:
        return (u - x).abs().mean() + (u - y).abs().mean()
    w1, w2 = weights if weights is not None else sdw_weight_maps(x, y)
    return (u - w1 * x).abs().mean() + (u - w2 * y).abs().mean()


def _regions(m: Tensor, use_mask: bool) -> tuple[Tensor, Tensor]:
    if not use_mask:
        ones = torch.ones_like(m)
        return ones, ones
    return m, 1.0 - m


def gen_adv_loss(
    u: Tensor,
    x: Tensor,
    y: Tensor,
    m: Tensor,
    critic_t: Optional[CriticFn],
    critic_d: Optional[CriticFn],
    use_mask: bool = True,
) -> Tensor:
    """Generator side of both games; a ``None`` critic contributes zero."""
    _check_same(u, x, y, m)
    target_region, detail_region = _regions(m, use_mask)
    loss = u.new_zeros(())
    with frozen(critic_t, critic_d):
        if critic_t is not None:
            loss = loss - critic_t(u * target_region).mean()
        if critic_d is not None:
            loss = loss - critic_d(sobel_gradient(u) * detail_region).mean()
    return loss


def critic_inputs(which: str, real_src: Tensor, u: Tensor, m: Tensor, use_mask: bool = True):
    """(real, fake) samples for the target (intensity) or detail (gradient) critic."""
    _check_same(real_src, u, m)
    target_region, detail_region = _regions(m, use_mask)
    if which == "target":
        return real_src * target_region, u * target_region
    if which == "detail":
        return sobel_gradient(real_src) * detail_region, sobel_gradient(u) * detail_region
    raise ValueError(f"unknown critic {which!r}; expected 'target' or 'detail'")


def gradient_penalty(
    critic: CriticFn,
    real: Tensor,
    fake: Tensor,
    k: float = PENALTY_K,
    p: float = PENALTY_P,
    t: Optional[Tensor] = None,
    generator: Optional[torch.Generator] = None,
) -> Tensor:
    """``k * mean(||dD/dz||_2 ** p)`` at per-sample convex interpolates z."""
    _check_same(real, fake)
    if t is None:
        t = torch.rand(real.shape[0], generator=generator, dtype=real.dtype, device=real.device)
    t = t.reshape(-1, *([1] * (real.dim() - 1)))
    z = t * real + (1 - t) * fake
    if not z.requires_grad:
        z.requires_grad_(True)
    score = critic(z)
    (grad,) = torch.autograd.grad(score.sum(), z, create_graph=True)
    norms = grad.flatten(1).norm(dim=1)
    terms = norms**p
    bad = torch.nonzero(~torch.isfinite(terms)).flatten()
    if bad.numel():
        raise FloatingPointError(f"non-finite gradient penalty at sample {int(bad[0])}")
    return k * terms.mean()


def critic_loss(
    which: str,
    real_src: Tensor,
    u: Tensor,
    m: Tensor,
    critic: CriticFn,
    k: float = PENALTY_K,
    p: float = PENALTY_P,
    use_mask: bool = True,
    t: Optional[Tensor] = None,
    generator: Optional[torch.Generator] = None,
) -> Tensor:
    real, fake = critic_inputs(which, real_src, u, m, use_mask)
    wdist = critic(fake).mean() - critic(real).mean()
    return wdist + gradient_penalty(critic, real, fake, k, p, t=t, generator=generator)


# --- detection ------------------------------------------------------------------


def build_targets(gt_boxes: Sequence[Sequence[BoundingBox]], grid_shape, num_classes: int):
    """Center-cell assignment; a larger box keeps a cell shared with a smaller one."""
    n, gh, gw = grid_shape
    height, width = gh * DETECTOR_STRIDE, gw * DETECTOR_STRIDE
    obj = torch.zeros(n, gh, gw, dtype=torch.float64)
    box_t = torch.zeros(n, 4, gh, gw, dtype=torch.float64)
    cls_t = torch.zeros(n, gh, gw, dtype=torch.long)
    for i, boxes in enumerate(gt_boxes):
        order = sorted(boxes, key=lambda b: (-b.area, b.x_min, b.y_min, b.x_max, b.y_max, b.class_id))
        for b in order:
            if not b.inside(height, width):
                raise ValueError(f"box {b} outside {height}x{width} image")
            if b.class_id >= num_classes:
                raise ValueError(f"class_id {b.class_id} >= detector class count {num_classes}")
            r, c, target = encode_box(b)
            r, c = min(r, gh - 1), min(c, gw - 1)
            if obj[i, r, c]:
                continue
            obj[i, r, c] = 1.0
            box_t[i, :, r, c] = torch.tensor(target, dtype=torch.float64)
            cls_t[i, r, c] = b.class_id
    return obj, box_t, cls_t


def detection_loss(raw: Tensor, gt_boxes, weights=DET_WEIGHTS) -> Tensor:
    """BCE objectness on all cells + L1 box + CE class on positive cells."""
    if raw.dim() == 3:
        raw, gt_boxes = raw[None], [gt_boxes]
    n, ch, gh, gw = raw.shape
    if len(gt_boxes) != n:
        raise ValueError(f"{len(gt_boxes)} box lists for a batch of {n}")
    num_classes = ch - 5
    obj_t, box_t, cls_t = build_targets(gt_boxes, (n, gh, gw), num_classes)
    obj_t, box_t = obj_t.to(raw), box_t.to(raw)
    cls_t = cls_t.to(raw.device)

    w_obj, w_box, w_cls = weights
    loss = w_obj * F.binary_cross_entropy_with_logits(raw[:, 0], obj_t)
    pos = obj_t > 0.5
    if pos.any():
        pred_box = torch.cat([torch.sigmoid(raw[:, 1:3]), raw[:, 3:5]], dim=1)
        pos4 = pos[:, None].expand_as(pred_box)
        loss = loss + w_box * (pred_box[pos4] - box_t[pos4]).abs().mean()
        logits = raw[:, 5:].permute(0, 2, 3, 1)[pos]
        loss = loss + w_cls * F.cross_entropy(logits, cls_t[pos])
    return loss


# --- assembled objectives ------------------------------------------------------------


def fusion_total_loss(
    u: Tensor,
    x: Tensor,
    y: Tensor,
    m: Tensor,
    critic_t: Optional[CriticFn] = None,
    critic_d: Optional[CriticFn] = None,
    alpha: float = ALPHA,
    beta: float = BETA,
    use_sdw: bool = True,
    use_mask: bool = True,
    sdw=None,
) -> LossBreakdown:
    s = ssim_loss(u, x, y)
    px = pixel_loss(u, x, y, use_sdw=use_sdw, weights=sdw)
    adv = gen_adv_loss(u, x, y, m, critic_t, critic_d, use_mask=use_mask)
    total = s + alpha * px + beta * adv
    return LossBreakdown(s, px, adv, total, alpha=alpha, beta=beta)


def joint_loss(
    raw: Tensor,
    gt_boxes,
    u: Tensor,
    x: Tensor,
    y: Tensor,
    m: Tensor,
    critic_t: Optional[CriticFn] = None,
    critic_d: Optional[CriticFn] = None,
    lam: float = LAMBDA,
    alpha: float = ALPHA,
    beta: float = BETA,
    use_sdw: bool = True,
    use_mask: bool = True,
    sdw=None,
) -> LossBreakdown:
    """``detection_loss + lam * fusion_total_loss``."""
    fb = fusion_total_loss(u, x, y, m, critic_t, critic_d, alpha, beta, use_sdw, use_mask, sdw)
    det = detection_loss(raw, gt_boxes)
    fb.detection_term = det
    fb.joint_total = det + lam * fb.total_fusion
    fb.lam = lam
    return fb
