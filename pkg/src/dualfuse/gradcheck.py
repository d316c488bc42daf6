"""Finite-difference gradient suites and the joint-gradient decomposition check."""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .imagecore import BoundingBox
from .losses import critic_loss, detection_loss, gen_adv_loss, pixel_loss, sdw_weight_maps, ssim_loss
from .signalops import sobel_gradient, ssim

FD_STEP = 1e-4
REL_TOL = 1e-3
DECOMP_TOL = 1e-6


def central_difference(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = FD_STEP) -> torch.Tensor:
    x = x.detach().clone()
    flat = x.view(-1)
    grad = torch.zeros_like(flat)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = fn(x).detach().item()
        flat[i] = orig - eps
        lo = fn(x).detach().item()
        flat[i] = orig
        grad[i] = (hi - lo) / (2 * eps)
    return grad.view_as(x)


def analytic_gradient(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def max_relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-8) -> float:
    """max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)."""
    den = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, floor))
    return float(((a - b).abs() / den).max())


class SmoothCritic(nn.Module):
    """Small differentiable critic used where the real critic's size floor does not fit."""

    def __init__(self, side: int, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.conv = nn.Conv2d(1, 4, 3, padding=1).double()
        with torch.no_grad():
            self.conv.weight.copy_(torch.randn(self.conv.weight.shape, generator=g, dtype=torch.float64) * 0.5)
            self.conv.bias.copy_(torch.randn(4, generator=g, dtype=torch.float64) * 0.1)
        self.w = nn.Parameter(torch.randn(4 * side * side, generator=g, dtype=torch.float64) / side)

    def forward(self, z):
        return torch.tanh(self.conv(z)).flatten(1) @ self.w


def away_from_kinks(u: torch.Tensor, anchors, margin: float = 10 * FD_STEP) -> torch.Tensor:
    """Shift entries of ``u`` lying within ``margin`` of any anchor (|u - a| kinks)."""
    u = u.clone()
    for _ in range(4):
        near = torch.zeros_like(u, dtype=torch.bool)
        for a in anchors:
            near |= (u - a).abs() < margin
        if not near.any():
            break
        u[near] += 2.5 * margin
    return u


def _rand(g, *shape):
    return torch.rand(*shape, generator=g, dtype=torch.float64)


def loss_suites(seed: int = 0, trials: int = 10, side: int = 8):
    """Yield (name, max relative error) for every differentiable loss and op.

    SSIM needs 11x11 windows, so the SSIM-based checks use 16x16 images.
    """
    ssim_side = max(side, 16)
    for trial in range(trials):
        g = torch.Generator().manual_seed(seed * 1000 + trial)
        x, y, u = (_rand(g, 1, 1, side, side) for _ in range(3))
        w1, w2 = sdw_weight_maps(x, y)
        u_px = away_from_kinks(u, (w1 * x, w2 * y))
        m = (_rand(g, 1, 1, side, side) > 0.5).double()
        xs, ys, us = (_rand(g, 1, 1, ssim_side, ssim_side) for _ in range(3))
        ct, cd = SmoothCritic(side, seed + trial), SmoothCritic(side, seed + trial + 100)
        t = _rand(g, 1)

        # detection loss is checked against its raw grid input
        raw = torch.randn(1, 8, side, side, generator=g, dtype=torch.float64)
        boxes = [[BoundingBox(17.0, 20.0, 40.0, 45.0, 1), BoundingBox(70.0, 65.0, 90.0, 100.0, 2)]]

        checks = {
            "ssim": (lambda v: ssim(v, xs), us),
            "sobel_gradient": (lambda v: sobel_gradient(v).sum(), u),
            "ssim_loss": (lambda v: ssim_loss(v, xs, ys), us),
            "pixel_loss": (lambda v: pixel_loss(v, x, y), u_px),
            "gen_adv_loss": (lambda v: gen_adv_loss(v, x, y, m, ct, cd), u),
            "critic_loss_target": (lambda v: critic_loss("target", x, v, m, ct, t=t), u),
            "critic_loss_detail": (lambda v: critic_loss("detail", y, v, m, cd, t=t), u),
            "detection_loss": (lambda v: detection_loss(v, boxes), raw),
        }
        for name, (fn, inp) in checks.items():
            yield name, trial, max_relative_error(analytic_gradient(fn, inp), central_difference(fn, inp))


def run_suites(seed: int = 0, trials: int = 10) -> dict[str, float]:
    worst: dict[str, float] = {}
    for name, _, err in loss_suites(seed, trials):
        worst[name] = max(worst.get(name, 0.0), err)
    return worst
