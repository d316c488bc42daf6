"""Direct (DT), task-oriented (TT) and cooperative (CT) training regimes."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
from torch import Tensor

from .imagecore import AnnotatedPair, BoundingBox, DatasetManifest, load_all
from .losses import LossBreakdown, critic_loss, detection_loss, fusion_total_loss, joint_loss
from .nets import Critic, Detector, Generator
from .signalops import threshold_saliency_mask

log = logging.getLogger(__name__)

STRATEGIES = ("dt", "tt", "ct")
MASK_SOURCES = ("ground_truth", "threshold_saliency")


@dataclass
class TrainConfig:
    strategy: str = "ct"
    alpha: float = 20.0
    beta: float = 0.1
    lam: float = 1.0
    k: float = 2.0
    p: float = 6.0
    lr: float = 1e-3
    lr_decay: float = 0.98
    epochs: int = 20
    batch_size: int = 16
    patch_size: int = 64
    critic_steps: int = 1
    seed: int = 0
    use_dt_critic: bool = True
    use_dd_critic: bool = True
    use_sdw: bool = True
    use_mask: bool = True
    mask_source: str = "ground_truth"
    num_classes: int = 3
    max_steps: Optional[int] = None
    detector_epochs: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.mask_source not in MASK_SOURCES:
            raise ValueError(f"mask_source must be one of {MASK_SOURCES}, got {self.mask_source!r}")
        if self.lr <= 0 or not (0 < self.lr_decay <= 1):
            raise ValueError("lr must be positive and lr_decay in (0, 1]")
        if self.patch_size % 16:
            raise ValueError(f"patch_size must be divisible by 16, got {self.patch_size}")
        if self.batch_size < 1 or self.epochs < 0 or self.critic_steps < 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and critic_steps >= 0 required")
        if min(self.alpha, self.beta, self.lam, self.k) < 0:
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """320x320 patches, batch 64, 300 epochs."""
        return cls(**{"patch_size": 320, "batch_size": 64, "epochs": 300, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay**epoch


@dataclass
class Batch:
    x: Tensor
    y: Tensor
    m: Tensor
    boxes: list
    pair_ids: list

    def __len__(self):
        return self.x.shape[0]


@dataclass
class TrainState:
    config: TrainConfig
    generator: Generator
    critic_t: Critic
    critic_d: Critic
    detector: Detector
    optimizers: dict
    rng: torch.Generator
    step: int = 0
    epoch: int = 0
    counters: dict = field(default_factory=lambda: {
        "fusion_loss_evals": 0, "detection_to_generator": 0, "critic_updates": 0, "generator_updates": 0,
    })
    history: list = field(default_factory=list)

    def modules(self) -> dict:
        return {
            "generator": self.generator,
            "critic_t": self.critic_t,
            "critic_d": self.critic_d,
            "detector": self.detector,
        }

    def set_lr(self, epoch: int) -> float:
        lr = self.config.lr_at(epoch)
        for opt in self.optimizers.values():
            for group in opt.param_groups:
                group["lr"] = lr
        return lr

    def check_finite(self) -> None:
        for name, mod in self.modules().items():
            for pname, p in mod.named_parameters():
                if not torch.isfinite(p).all():
                    raise FloatingPointError(f"step {self.step}: non-finite parameter {name}.{pname}")


def init_state(config: TrainConfig) -> TrainState:
    torch.manual_seed(config.seed)
    gen = Generator()
    ct, cd = Critic(), Critic()
    det = Detector(config.num_classes)
    optimizers = {
        name: torch.optim.Adam(mod.parameters(), lr=config.lr, betas=(0.9, 0.999))
        for name, mod in (("generator", gen), ("critic_t", ct), ("critic_d", cd), ("detector", det))
    }
    rng = torch.Generator().manual_seed(config.seed)
    return TrainState(config, gen, ct, cd, det, optimizers, rng)


# --- data ------------------------------------------------------------------------


def _crop_boxes(boxes, x0: int, y0: int, size: int) -> list[BoundingBox]:
    out = []
    for b in boxes:
        cx, cy = b.center
        if not (x0 <= cx < x0 + size and y0 <= cy < y0 + size):
            continue
        nb = BoundingBox(
            max(b.x_min - x0, 0.0), max(b.y_min - y0, 0.0),
            min(b.x_max - x0, float(size)), min(b.y_max - y0, float(size)), b.class_id,
        )
        if nb.area >= 0.5 * b.area:
            out.append(nb)
    return out


def pair_mask(pair: AnnotatedPair, source: str) -> np.ndarray:
    if source == "ground_truth":
        return pair.mask.data
    return threshold_saliency_mask(pair.infrared.data)


def make_batch(pairs: Sequence[AnnotatedPair], config: TrainConfig, crop_rng: Optional[np.random.Generator] = None) -> Batch:
    xs, ys, ms, boxes = [], [], [], []
    size = config.patch_size
    for pair in pairs:
        h, w = pair.shape
        if h < size or w < size:
            raise ValueError(f"pair {pair.pair_id} ({h}x{w}) smaller than patch {size}")
        y0 = x0 = 0
        if (h, w) != (size, size):
            rng = crop_rng or np.random.default_rng(0)
            y0, x0 = int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))
        sl = (slice(y0, y0 + size), slice(x0, x0 + size))
        xs.append(pair.infrared.data[sl])
        ys.append(pair.visible.data[sl])
        ms.append(pair_mask(pair, config.mask_source)[sl])
        boxes.append(_crop_boxes(pair.boxes, x0, y0, size))

    def stack(a):
        return torch.as_tensor(np.stack(a)[:, None], dtype=torch.float32)

    return Batch(stack(xs), stack(ys), stack(ms), boxes, [p.pair_id for p in pairs])


def epoch_order(n: int, seed: int, epoch: int) -> list[int]:
    g = torch.Generator().manual_seed(seed * 1_000_003 + epoch)
    return torch.randperm(n, generator=g).tolist()


def batch_for_step(pairs: Sequence[AnnotatedPair], config: TrainConfig, step: int) -> tuple[int, Batch]:
    """Deterministic batch for a global step; lets a resumed run pick up mid-epoch."""
    per_epoch = math.ceil(len(pairs) / config.batch_size)
    epoch, idx = divmod(step, per_epoch)
    order = epoch_order(len(pairs), config.seed, epoch)
    chosen = order[idx * config.batch_size:(idx + 1) * config.batch_size]
    crop_rng = np.random.default_rng([config.seed, step])
    return epoch, make_batch([pairs[i] for i in chosen], config, crop_rng)


# --- single steps ----------------------------------------------------------------


def _active_critics(state: TrainState):
    cfg = state.config
    return (state.critic_t if cfg.use_dt_critic else None, state.critic_d if cfg.use_dd_critic else None)


def critic_updates(state: TrainState, batch: Batch, u: Tensor) -> dict:
    """Train each enabled critic on its own loss against the detached fused image."""
    cfg = state.config
    u = u.detach()
    out = {}
    for _ in range(cfg.critic_steps):
        for name, which, src, enabled in (
            ("critic_t", "target", batch.x, cfg.use_dt_critic),
            ("critic_d", "detail", batch.y, cfg.use_dd_critic),
        ):
            if not enabled:
                continue
            critic, opt = getattr(state, name), state.optimizers[name]
            loss = critic_loss(which, src, u, batch.m, critic, cfg.k, cfg.p,
                               use_mask=cfg.use_mask, generator=state.rng)
            _require_finite(loss, state.step, f"{name}_loss")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            state.counters["critic_updates"] += 1
            out[f"{name}_loss"] = float(loss.detach())
    return out


def _require_finite(v: Tensor, step: int, term: str) -> None:
    if not torch.isfinite(v).all():
        raise FloatingPointError(f"step {step}: non-finite {term}")


def _check_breakdown(lb: LossBreakdown, step: int) -> None:
    for name, v in lb.to_dict().items():
        if v is not None and not math.isfinite(v):
            raise FloatingPointError(f"step {step}: non-finite {name}")


def gan_step(state: TrainState, batch: Batch) -> LossBreakdown:
    """Critic updates followed by one generator update on the fusion loss."""
    cfg = state.config
    state.generator.train()
    u = state.generator(batch.x, batch.y)
    critic_log = critic_updates(state, batch, u)
    ct, cd = _active_critics(state)
    lb = fusion_total_loss(u, batch.x, batch.y, batch.m, ct, cd, cfg.alpha, cfg.beta,
                           use_sdw=cfg.use_sdw, use_mask=cfg.use_mask)
    state.counters["fusion_loss_evals"] += 1
    _check_breakdown(lb, state.step)
    opt = state.optimizers["generator"]
    opt.zero_grad(set_to_none=True)
    lb.total_fusion.backward()
    opt.step()
    state.counters["generator_updates"] += 1
    lb.extra.update(critic_log)
    return lb


def tt_step(state: TrainState, batch: Batch) -> LossBreakdown:
    """Detection loss only, back-propagated into detector and generator."""
    state.generator.train()
    state.detector.train()
    u = state.generator(batch.x, batch.y)
    det = detection_loss(state.detector(u), batch.boxes)
    _require_finite(det, state.step, "detection_term")
    for name in ("generator", "detector"):
        state.optimizers[name].zero_grad(set_to_none=True)
    det.backward()
    for name in ("generator", "detector"):
        state.optimizers[name].step()
    state.counters["detection_to_generator"] += 1
    state.counters["generator_updates"] += 1
    zero = det.new_zeros(())
    return LossBreakdown(zero, zero, zero, zero, detection_term=det, joint_total=det, lam=0.0)


def ct_step(state: TrainState, batch: Batch) -> LossBreakdown:
    """Critic updates on the current output, then one joint detection + lam * fusion update."""
    cfg = state.config
    state.generator.train()
    state.detector.train()
    u = state.generator(batch.x, batch.y)
    critic_log = critic_updates(state, batch, u)
    ct, cd = _active_critics(state)
    lb = joint_loss(state.detector(u), batch.boxes, u, batch.x, batch.y, batch.m, ct, cd,
                    lam=cfg.lam, alpha=cfg.alpha, beta=cfg.beta,
                    use_sdw=cfg.use_sdw, use_mask=cfg.use_mask)
    state.counters["fusion_loss_evals"] += 1
    _check_breakdown(lb, state.step)
    for name in ("generator", "detector"):
        state.optimizers[name].zero_grad(set_to_none=True)
    lb.joint_total.backward()
    for name in ("generator", "detector"):
        state.optimizers[name].step()
    state.counters["detection_to_generator"] += 1
    state.counters["generator_updates"] += 1
    lb.extra.update(critic_log)
    return lb


STEP_FNS = {"dt": gan_step, "tt": tt_step, "ct": ct_step}


# --- loops -----------------------------------------------------------------------


def _as_pairs(data) -> list[AnnotatedPair]:
    if isinstance(data, DatasetManifest):
        pairs = load_all(data)
    else:
        pairs = list(data)
    if not pairs:
        raise ValueError("training set is empty")
    return pairs


def total_steps(config: TrainConfig, n_pairs: int) -> int:
    if config.max_steps is not None:
        return config.max_steps
    return config.epochs * math.ceil(n_pairs / config.batch_size)


def run_steps(
    state: TrainState,
    pairs: Sequence[AnnotatedPair],
    n_steps: int,
    step_fn=None,
    log_file=None,
    checkpoint_dir: Optional[Path] = None,
) -> TrainState:
    """Advance ``state`` to global step ``n_steps`` (not by ``n_steps``)."""
    step_fn = step_fn or STEP_FNS[state.config.strategy]
    while state.step < n_steps:
        epoch, batch = batch_for_step(pairs, state.config, state.step)
        lr = state.set_lr(epoch)
        if checkpoint_dir is not None and epoch > state.epoch:
            save_checkpoint(state, Path(checkpoint_dir) / f"epoch{state.epoch:03d}.pt")
        state.epoch = epoch
        lb = step_fn(state, batch)
        state.check_finite()
        row = {"step": state.step, "epoch": epoch, "lr": lr, **lb.to_dict()}
        state.history.append(row)
        if log_file is not None:
            log_file.write(json.dumps(row) + "\n")
        state.step += 1
    if checkpoint_dir is not None:
        save_checkpoint(state, Path(checkpoint_dir) / f"epoch{state.epoch:03d}.pt")
    return state


def train_detector_frozen(state: TrainState, pairs: Sequence[AnnotatedPair], epochs: int) -> TrainState:
    """Fit the detector on fused outputs of a frozen generator (second DT phase)."""
    cfg = state.config
    state.generator.eval()
    state.detector.train()
    opt = torch.optim.Adam(state.detector.parameters(), lr=cfg.lr, betas=(0.9, 0.999))
    per_epoch = math.ceil(len(pairs) / cfg.batch_size)
    for step in range(epochs * per_epoch):
        epoch, batch = batch_for_step(pairs, cfg, step)
        for group in opt.param_groups:
            group["lr"] = cfg.lr_at(epoch)
        with torch.no_grad():
            u = state.generator(batch.x, batch.y)
        det = detection_loss(state.detector(u), batch.boxes)
        _require_finite(det, step, "detection_term")
        opt.zero_grad(set_to_none=True)
        det.backward()
        opt.step()
    return state


def _train(strategy: str, config: TrainConfig, data, state=None, log_path=None, checkpoint_dir=None) -> TrainState:
    if config.strategy != strategy:
        config = TrainConfig.from_dict({**config.to_dict(), "strategy": strategy})
    pairs = _as_pairs(data)
    state = state or init_state(config)
    n = total_steps(config, len(pairs))
    log_file = open(log_path, "a") if log_path else None
    try:
        run_steps(state, pairs, n, log_file=log_file, checkpoint_dir=checkpoint_dir)
    finally:
        if log_file:
            log_file.close()
    return state


def train_dt(config: TrainConfig, data, **kw) -> TrainState:
    """Fusion loss only; optional detector phase afterwards on frozen fused outputs."""
    state = _train("dt", config, data, **kw)
    if config.detector_epochs:
        train_detector_frozen(state, _as_pairs(data), config.detector_epochs)
    return state


def train_tt(config: TrainConfig, data, **kw) -> TrainState:
    return _train("tt", config, data, **kw)


def train_ct(config: TrainConfig, data, **kw) -> TrainState:
    return _train("ct", config, data, **kw)


def train(config: TrainConfig, data, **kw) -> TrainState:
    return {"dt": train_dt, "tt": train_tt, "ct": train_ct}[config.strategy](config, data, **kw)


# --- diagnostics ----------------------------------------------------------------


def _flat(grads) -> Tensor:
    return torch.cat([g.reshape(-1) for g in grads])


def gradient_decomposition_check(state: TrainState, batch: Batch, lam: float, dtype=torch.float64) -> dict:
    """Compare d(joint)/d(theta_g) with detection-path + lam * fusion-path gradients.

    Runs on float64 copies of the networks so the residual reflects the
    decomposition, not float32 summation order.
    """
    cfg = state.config
    gen = copy.deepcopy(state.generator).to(dtype).train()
    det = copy.deepcopy(state.detector).to(dtype).train()
    ct = copy.deepcopy(state.critic_t).to(dtype) if cfg.use_dt_critic else None
    cd = copy.deepcopy(state.critic_d).to(dtype) if cfg.use_dd_critic else None
    x, y, m = (t.to(dtype) for t in (batch.x, batch.y, batch.m))
    params = list(gen.parameters())

    u = gen(x, y)
    det_term = detection_loss(det(u), batch.boxes)
    fusion = fusion_total_loss(u, x, y, m, ct, cd, cfg.alpha, cfg.beta,
                               use_sdw=cfg.use_sdw, use_mask=cfg.use_mask).total_fusion
    joint = det_term + lam * fusion

    combined = _flat(torch.autograd.grad(joint, params, retain_graph=True))
    cross = _flat(torch.autograd.grad(det_term, params, retain_graph=True))
    fusion_g = _flat(torch.autograd.grad(fusion, params))
    split = cross + lam * fusion_g
    return {
        "cross_term_norm": float(cross.norm()),
        "fusion_term_norm": float((lam * fusion_g).norm()),
        "max_residual": float((combined - split).abs().max()),
    }


# --- checkpoints ----------------------------------------------------------------


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(state: TrainState, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    archive = {
        "params": {
            f"{name}/{key}": t.detach().clone()
            for name, mod in state.modules().items()
            for key, t in mod.state_dict().items()
        },
        "optimizers": {name: opt.state_dict() for name, opt in state.optimizers.items()},
        "rng": state.rng.get_state(),
        "counters": dict(state.counters),
    }
    torch.save(archive, path)
    sidecar = {
        "step": state.step,
        "epoch": state.epoch,
        "seed": state.config.seed,
        "config_hash": state.config.config_hash(),
        "config": state.config.to_dict(),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def load_checkpoint(path: Union[str, Path], config: Optional[TrainConfig] = None) -> TrainState:
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    if not path.is_file() or not sidecar_path.is_file():
        raise CheckpointError(f"missing checkpoint archive or sidecar: {path}")
    try:
        sidecar = json.loads(sidecar_path.read_text())
        archive = torch.load(path, map_location="cpu", weights_only=False)
        saved_cfg = TrainConfig.from_dict(sidecar["config"])
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc

    if config is not None:
        if config.num_classes != saved_cfg.num_classes:
            raise CheckpointError(
                f"checkpoint has {saved_cfg.num_classes} classes, config expects {config.num_classes}"
            )
        if config.config_hash() != sidecar["config_hash"]:
            warnings.warn(f"config hash {config.config_hash()} differs from checkpoint {sidecar['config_hash']}")
    cfg = config or saved_cfg

    state = init_state(cfg)
    for name, mod in state.modules().items():
        prefix = name + "/"
        sd = {k[len(prefix):]: v for k, v in archive["params"].items() if k.startswith(prefix)}
        try:
            mod.load_state_dict(sd)
        except RuntimeError as exc:
            raise CheckpointError(f"{path}: cannot restore {name}: {exc}") from exc
    for name, opt in state.optimizers.items():
        opt.load_state_dict(archive["optimizers"][name])
    state.rng.set_state(archive["rng"])
    state.counters.update(archive.get("counters", {}))
    state.step, state.epoch = int(sidecar["step"]), int(sidecar["epoch"])
    return state
