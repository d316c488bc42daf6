"""Non-learned signal processing and metrics.

Histogram and metric routines quantize [0, 1] intensities to 8-bit levels
with ``round(v * 255)`` before counting. SSIM and Sobel are written in torch
so the same code serves as a metric and as a differentiable loss component.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .imagecore import BoundingBox, GrayImage, quantize

SDW_EPS = 1e-8
SOBEL_DELTA = 1e-12
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

_LEVELS = np.arange(256, dtype=np.int64)


def _levels(img) -> np.ndarray:
    if isinstance(img, GrayImage):
        img = img.data
    return quantize(img).astype(np.int64)


def histogram256(img) -> np.ndarray:
    """Counts of each 8-bit level; sums to the pixel count."""
    return np.bincount(_levels(img).ravel(), minlength=256)


def saliency_map(img) -> np.ndarray:
    """Histogram-contrast saliency: sum_i H(i) * |q(k) - i| for every pixel."""
    q = _levels(img)
    hist = np.bincount(q.ravel(), minlength=256).astype(np.float64)
    per_level = np.abs(_LEVELS[:, None] - _LEVELS[None, :]) @ hist
    return per_level[q]


def sdw_weights(s_x: np.ndarray, s_y: np.ndarray, eps: float = SDW_EPS):
    """Saliency-degree weights ``w1 = s_x / (s_x + s_y + eps)`` and ``w2 = 1 - w1``."""
    s_x = np.asarray(s_x, dtype=np.float64)
    s_y = np.asarray(s_y, dtype=np.float64)
    if s_x.shape != s_y.shape:
        raise ValueError(f"saliency shapes differ: {s_x.shape} vs {s_y.shape}")
    w1 = s_x / (s_x + s_y + eps)
    return w1, 1.0 - w1


# --- differentiable ops ------------------------------------------------------


def _as_batch(img) -> tuple[torch.Tensor, bool]:
    """Return an (N, 1, H, W) tensor and whether the caller passed a tensor."""
    if isinstance(img, GrayImage):
        img = img.data
    is_tensor = isinstance(img, torch.Tensor)
    t = img if is_tensor else torch.from_numpy(np.array(img, dtype=np.float64))
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        t = t[:, None]
    elif t.dim() != 4 or t.shape[1] != 1:
        raise ValueError(f"expected (H,W), (N,H,W) or (N,1,H,W), got {tuple(t.shape)}")
    return t, is_tensor


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64):
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)[None, None]


def ssim_per_image(a, b) -> torch.Tensor:
    """Mean SSIM of each image in the batch (valid-mode Gaussian window)."""
    ta, _ = _as_batch(a)
    tb, _ = _as_batch(b)
    if ta.shape != tb.shape:
        raise ValueError(f"ssim shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    if min(ta.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"ssim needs both sides >= {SSIM_WINDOW}, got {tuple(ta.shape[-2:])}")
    if ta.dtype != tb.dtype:
        tb = tb.to(ta.dtype)
    win = gaussian_window(dtype=ta.dtype).to(ta.device)

    mu_a = F.conv2d(ta, win)
    mu_b = F.conv2d(tb, win)
    var_a = F.conv2d(ta * ta, win) - mu_a**2
    var_b = F.conv2d(tb * tb, win) - mu_b**2
    cov = F.conv2d(ta * tb, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).flatten(1).mean(1)


def ssim(a, b):
    """Mean SSIM; returns a tensor for tensor inputs and a float otherwise."""
    val = ssim_per_image(a, b).mean()
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        return val
    return float(val)


_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=torch.float64)
_SOBEL_Y = _SOBEL_X.t().contiguous()


def sobel_gradient(img, delta: float = SOBEL_DELTA):
    """Sobel gradient magnitude ``sqrt(gx^2 + gy^2 + delta)`` with reflect padding."""
    t, is_tensor = _as_batch(img)
    kernels = torch.stack([_SOBEL_X, _SOBEL_Y])[:, None].to(dtype=t.dtype, device=t.device)
    g = F.conv2d(F.pad(t, (1, 1, 1, 1), mode="reflect"), kernels)
    mag = torch.sqrt(g[:, :1] ** 2 + g[:, 1:] ** 2 + delta)
    if is_tensor:
        return mag.reshape(img.shape) if img.dim() != 4 else mag
    return mag.reshape(np.shape(img.data if isinstance(img, GrayImage) else img)).numpy()


# --- fusion metrics --------------------------------------------------------------


def entropy_metric(img) -> float:
    """Shannon entropy of the 256-bin histogram, in bits."""
    hist = histogram256(img)
    p = hist[hist > 0] / hist.sum()
    return float(-(p * np.log2(p)).sum())


def sd_metric(img) -> float:
    """Population standard deviation on the 0-255 scale."""
    return float(_levels(img).astype(np.float64).std())


def joint_histogram(a, b) -> np.ndarray:
    qa, qb = _levels(a), _levels(b)
    if qa.shape != qb.shape:
        raise ValueError(f"mutual information needs equal shapes: {qa.shape} vs {qb.shape}")
    return np.bincount((qa * 256 + qb).ravel(), minlength=256 * 256).reshape(256, 256)


def mi_metric(a, b) -> float:
    """Mutual information of the 8-bit levels of two images, in bits."""
    joint = joint_histogram(a, b).astype(np.float64)
    p = joint / joint.sum()
    pa = p.sum(1, keepdims=True)
    pb = p.sum(0, keepdims=True)
    nz = p > 0
    return float((p[nz] * np.log2(p[nz] / (pa @ pb)[nz])).sum())


def fusion_mi(u, x, y) -> tuple[float, float, float]:
    """(MI(u,x) + MI(u,y), MI(u,x), MI(u,y))."""
    mx, my = mi_metric(u, x), mi_metric(u, y)
    return mx + my, mx, my


@dataclass
class MetricReport:
    mi: float
    mi_x: float
    mi_y: float
    en: float
    sd: float
    ssim_x: float
    ssim_y: float

    def to_dict(self) -> dict:
        return asdict(self)


def metric_report(u, x, y) -> MetricReport:
    mi, mi_x, mi_y = fusion_mi(u, x, y)
    uf, xf, yf = (np.asarray(v.data if isinstance(v, GrayImage) else v, dtype=np.float64) for v in (u, x, y))
    return MetricReport(
        mi=mi,
        mi_x=mi_x,
        mi_y=mi_y,
        en=entropy_metric(uf),
        sd=sd_metric(uf),
        ssim_x=ssim(uf, xf),
        ssim_y=ssim(uf, yf),
    )


# --- detection metrics -----------------------------------------------------------


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


BoxList = Sequence[BoundingBox]


def _per_image(boxes) -> list[list[BoundingBox]]:
    boxes = list(boxes)
    if boxes and isinstance(boxes[0], BoundingBox):
        return [boxes]
    return [list(b) for b in boxes]


def precision_recall(preds, gts, iou_thresh: float = 0.5):
    """Cumulative precision/recall after each prediction, highest score first.

    ``preds`` and ``gts`` are either flat box lists (one image) or lists of
    per-image box lists; matches never cross images.
    """
    preds_img, gts_img = _per_image(preds), _per_image(gts)
    if len(preds_img) != len(gts_img):
        if not preds_img:
            preds_img = [[] for _ in gts_img]
        else:
            raise ValueError("preds and gts cover a different number of images")
    n_gt = sum(len(g) for g in gts_img)
    flat = [(p.score if p.score is not None else 0.0, i, j, p) for i, ps in enumerate(preds_img) for j, p in enumerate(ps)]
    # stable order: score desc, then image/prediction index
    flat.sort(key=lambda t: (-t[0], t[1], t[2]))

    matched = [[False] * len(g) for g in gts_img]
    tp = np.zeros(len(flat))
    for rank, (_, i, _, p) in enumerate(flat):
        best, best_iou = -1, iou_thresh
        for gi, g in enumerate(gts_img[i]):
            if matched[i][gi] or g.class_id != p.class_id:
                continue
            v = iou(p, g)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = gi, v
        if best >= 0:
            matched[i][best] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(flat) + 1)
    recall = ctp / n_gt if n_gt else np.zeros_like(ctp)
    return precision, recall


def average_precision(preds, gts, iou_thresh: float = 0.5) -> float:
    """All-point interpolated AP for a single class."""
    n_gt = sum(len(g) for g in _per_image(gts))
    if n_gt == 0:
        raise ValueError("average precision is undefined without ground truth")
    precision, recall = precision_recall(preds, gts, iou_thresh)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def per_class_ap(preds, gts, iou_thresh: float = 0.5) -> dict[int, float]:
    preds_img, gts_img = _per_image(preds), _per_image(gts)
    if not preds_img:
        preds_img = [[] for _ in gts_img]
    classes = sorted({g.class_id for gs in gts_img for g in gs})
    if not classes:
        raise ValueError("mAP is undefined: no ground-truth boxes in any class")
    out = {}
    for c in classes:
        p_c = [[p for p in ps if p.class_id == c] for ps in preds_img]
        g_c = [[g for g in gs if g.class_id == c] for gs in gts_img]
        out[c] = average_precision(p_c, g_c, iou_thresh)
    return out


def map50(preds, gts) -> float:
    """Unweighted mean AP at IoU 0.5 over classes with at least one ground truth."""
    aps = per_class_ap(preds, gts, 0.5)
    return float(np.mean(list(aps.values())))


def threshold_saliency_mask(img) -> np.ndarray:
    """Binary target mask: saliency above its Otsu threshold.

    A constant image has zero saliency everywhere and yields an empty mask.
    """
    from skimage.filters import threshold_otsu

    s = saliency_map(img)
    if s.max() == s.min():
        return np.zeros_like(s)
    return (s > threshold_otsu(s)).astype(np.float64)
