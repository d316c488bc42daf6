import itertools
import json

import pytest
import torch

from dualfuse.imagecore import BoundingBox
from dualfuse.trainloop import (
    CheckpointError,
    TrainConfig,
    batch_for_step,
    ct_step,
    gan_step,
    gradient_decomposition_check,
    init_state,
    load_checkpoint,
    run_steps,
    save_checkpoint,
    train,
    train_dt,
    tt_step,
)


def cfg(**kw):
    base = dict(patch_size=32, batch_size=4, epochs=1, seed=3)
    return TrainConfig(**{**base, **kw})


def params(module):
    return [p.detach().clone() for p in module.parameters()]


def same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def test_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        TrainConfig(strategy="xx")
    with pytest.raises(ValueError):
        TrainConfig(patch_size=40)
    with pytest.raises(ValueError):
        TrainConfig(mask_source="nope")
    c = cfg(alpha=3.0)
    assert TrainConfig.from_dict(c.to_dict()) == c
    assert c.config_hash() == TrainConfig.from_dict(c.to_dict()).config_hash()
    assert c.config_hash() != cfg(alpha=4.0).config_hash()
    big = TrainConfig.full_scale()
    assert (big.patch_size, big.batch_size, big.epochs, big.lr) == (320, 64, 300, 1e-3)


def test_defaults():
    c = TrainConfig()
    assert (c.alpha, c.beta, c.k, c.p, c.lr, c.lam) == (20.0, 0.1, 2.0, 6.0, 1e-3, 1.0)


def test_m1_step_leaves_critics_and_moves_generator(small_pairs):
    c = cfg(strategy="dt", use_dt_critic=False, use_dd_critic=False)
    state = init_state(c)
    before_t, before_d, before_g = params(state.critic_t), params(state.critic_d), params(state.generator)
    _, batch = batch_for_step(small_pairs, c, 0)
    lb = gan_step(state, batch)
    assert same(before_t, params(state.critic_t)) and same(before_d, params(state.critic_d))
    assert float(lb.adv_term) == 0.0
    delta = sum(float((a - b).norm()) for a, b in zip(before_g, params(state.generator)))
    assert delta > 0
    assert state.counters["critic_updates"] == 0


def test_dt_step_updates_critics(small_pairs):
    c = cfg(strategy="dt")
    state = init_state(c)
    before = params(state.critic_t)
    _, batch = batch_for_step(small_pairs, c, 0)
    gan_step(state, batch)
    assert not same(before, params(state.critic_t))
    assert state.counters["detection_to_generator"] == 0


@pytest.mark.parametrize("strategy", ["dt", "tt", "ct"])
def test_seeded_runs_are_identical(small_pairs, strategy):
    c = cfg(strategy=strategy, max_steps=10)
    a, b = train(c, small_pairs), train(c, small_pairs)
    assert a.history == b.history
    assert same(params(a.generator), params(b.generator))


def test_detector_phase_isolated_from_generator(small_pairs):
    c = cfg(strategy="dt", max_steps=2)
    ref = train_dt(c, small_pairs)
    with_det = train_dt(TrainConfig.from_dict({**c.to_dict(), "detector_epochs": 1}), small_pairs)
    assert same(params(ref.generator), params(with_det.generator))
    assert not same(params(ref.detector), params(with_det.detector))


def test_lr_schedule(small_pairs):
    c = cfg(strategy="dt", epochs=3, lr_decay=0.9)
    state = train(c, small_pairs)
    for row in state.history:
        assert row["lr"] == pytest.approx(1e-3 * 0.9 ** row["epoch"], abs=1e-12)
    assert {r["epoch"] for r in state.history} == {0, 1, 2}
    assert state.optimizers["generator"].param_groups[0]["lr"] == pytest.approx(1e-3 * 0.9**2, abs=1e-12)


def _tt_vs_ct(small_pairs, steps):
    tt = init_state(cfg(strategy="tt"))
    ct = init_state(cfg(strategy="ct", lam=0.0, use_dt_critic=False, use_dd_critic=False))
    for s in range(steps):
        _, batch = batch_for_step(small_pairs, tt.config, s)
        tt_step(tt, batch)
        ct_step(ct, batch)
    return tt, ct


def test_ct_with_zero_lambda_is_tt(small_pairs):
    tt, ct = _tt_vs_ct(small_pairs, 3)
    assert same(params(tt.generator), params(ct.generator))
    assert same(params(tt.detector), params(ct.detector))


def test_tt_gradients_match_ct_lambda_zero(small_pairs):
    tt, ct = _tt_vs_ct(small_pairs, 0)
    _, batch = batch_for_step(small_pairs, tt.config, 0)
    tt_step(tt, batch)
    ct_step(ct, batch)
    for a, b in zip(tt.generator.parameters(), ct.generator.parameters()):
        assert float((a.grad - b.grad).abs().max()) <= 1e-7


def test_tt_never_touches_critics_or_fusion(small_pairs):
    c = cfg(strategy="tt", max_steps=3)
    fresh = init_state(c)
    state = train(c, small_pairs)
    assert same(params(fresh.critic_t), params(state.critic_t))
    assert same(params(fresh.critic_d), params(state.critic_d))
    assert state.counters["fusion_loss_evals"] == 0
    assert state.counters["detection_to_generator"] == 3


def test_dt_counters(small_pairs):
    state = train(cfg(strategy="dt", max_steps=3), small_pairs)
    assert state.counters["detection_to_generator"] == 0
    assert state.counters["fusion_loss_evals"] == 3
    assert state.counters["critic_updates"] == 6


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0])
def test_decomposition_check(small_pairs, lam):
    state = train(cfg(strategy="ct", max_steps=1), small_pairs)
    _, batch = batch_for_step(small_pairs, state.config, 1)
    rep = gradient_decomposition_check(state, batch, lam)
    assert rep["max_residual"] <= 1e-6
    assert rep["cross_term_norm"] > 0
    if lam == 0.0:
        assert rep["fusion_term_norm"] == 0.0


def test_decomposition_with_frozen_detector(small_pairs):
    state = init_state(cfg(strategy="ct"))
    for p in state.detector.parameters():
        p.requires_grad_(False)
    _, batch = batch_for_step(small_pairs, state.config, 0)
    rep = gradient_decomposition_check(state, batch, 1.0)
    assert rep["cross_term_norm"] > 0 and rep["max_residual"] <= 1e-6


def _probe(state, pairs):
    _, batch = batch_for_step(pairs, state.config, 0)
    state.generator.eval()
    with torch.no_grad():
        return state.generator(batch.x, batch.y)


def test_checkpoint_roundtrip_bit_identical(small_pairs, tmp_path):
    c = cfg(strategy="ct", max_steps=2)
    state = train(c, small_pairs)
    path = save_checkpoint(state, tmp_path / "ck.pt")
    side = json.loads(path.with_suffix(".json").read_text())
    assert side["step"] == 2 and side["seed"] == 3 and side["config_hash"] == c.config_hash()
    back = load_checkpoint(path)
    assert torch.equal(_probe(state, small_pairs), _probe(back, small_pairs))
    for name in ("critic_t", "critic_d", "detector"):
        assert same(params(getattr(state, name)), params(getattr(back, name)))
    assert back.counters == state.counters


def test_resume_matches_uninterrupted(small_pairs, tmp_path):
    c = cfg(strategy="ct", max_steps=5)
    full = train(c, small_pairs)
    part = init_state(c)
    run_steps(part, small_pairs, 2)
    save_checkpoint(part, tmp_path / "mid.pt")
    resumed = load_checkpoint(tmp_path / "mid.pt")
    run_steps(resumed, small_pairs, 5)
    assert resumed.history == full.history[2:]
    assert same(params(resumed.generator), params(full.generator))
    assert same(params(resumed.critic_t), params(full.critic_t))


def test_checkpoint_errors(small_pairs, tmp_path):
    state = init_state(cfg())
    save_checkpoint(state, tmp_path / "ck.pt")
    with pytest.raises(CheckpointError, match="classes"):
        load_checkpoint(tmp_path / "ck.pt", cfg(num_classes=5))
    with pytest.warns(UserWarning, match="hash"):
        load_checkpoint(tmp_path / "ck.pt", cfg(alpha=1.0))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.pt")
    (tmp_path / "bad.pt").write_bytes(b"junk")
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.pt")


def test_batches_crop_boxes_into_patch(pairs64):
    c = cfg(patch_size=32)
    _, batch = batch_for_step(pairs64, c, 0)
    assert batch.x.shape == (4, 1, 32, 32)
    for boxes in batch.boxes:
        for b in boxes:
            assert isinstance(b, BoundingBox) and b.inside(32, 32)


def test_threshold_mask_source_trains(small_pairs):
    state = train(cfg(strategy="ct", max_steps=1, mask_source="threshold_saliency"), small_pairs)
    assert state.step == 1


@pytest.mark.parametrize("strategy", ["dt", "tt", "ct"])
@pytest.mark.parametrize("flags", list(itertools.product([True, False], repeat=4))[::5])
def test_flags_commute_with_strategy(small_pairs, strategy, flags):
    names = ("use_dt_critic", "use_dd_critic", "use_sdw", "use_mask")
    state = train(cfg(strategy=strategy, max_steps=1, **dict(zip(names, flags))), small_pairs)
    assert state.step == 1
