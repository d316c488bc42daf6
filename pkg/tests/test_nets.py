import math

import pytest
import torch

import oracles
from dualfuse.imagecore import BoundingBox
from dualfuse.losses import detection_loss
from dualfuse.nets import (
    Critic,
    Detector,
    Generator,
    NonFiniteActivation,
    count_parameters,
    decode_detections,
    encode_box,
    nms,
)


def _pair(n, h, w, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 1, h, w, generator=g, dtype=dtype), torch.rand(n, 1, h, w, generator=g, dtype=dtype)


@pytest.mark.parametrize("shape", [(64, 64), (96, 64)])
def test_generator_preserves_shape(shape):
    x, y = _pair(2, *shape)
    assert Generator()(x, y).shape == x.shape


def test_generator_range_and_errors():
    torch.manual_seed(0)
    gen = Generator()
    for p in gen.parameters():
        p.data.mul_(5.0)
    u = gen(*_pair(2, 16, 16))
    assert u.min() >= 0 and u.max() <= 1
    with pytest.raises(ValueError):
        gen(torch.zeros(1, 1, 16, 16), torch.zeros(1, 1, 16, 17))


def test_generator_names_nonfinite_layer():
    gen = Generator()
    with torch.no_grad():
        gen.dense[2][0].weight.fill_(float("inf"))
    with pytest.raises(NonFiniteActivation, match="dense.2"):
        gen(*_pair(1, 16, 16))


def test_generator_parameter_gradient_matches_fd():
    torch.manual_seed(1)
    gen = Generator().double().eval()
    x, y = _pair(1, 16, 16, dtype=torch.float64)
    w = gen.merge[2].weight
    idx = (0, 3, 1, 1)

    def f(v):
        with torch.no_grad():
            old = w[idx].item()
            w[idx] = v
            out = gen(x, y).mean()
            w[idx] = old
        return out

    v0, eps = w[idx].item(), 1e-4
    fd = (f(v0 + eps) - f(v0 - eps)) / (2 * eps)
    gen.zero_grad()
    gen(x, y).mean().backward()
    assert float(w.grad[idx]) == pytest.approx(float(fd), rel=1e-3)


def test_generator_size_and_gradients_everywhere():
    gen = Generator()
    assert count_parameters(gen) < 300_000
    gen(*_pair(2, 16, 16)).mean().backward()
    assert all(p.grad is not None for p in gen.parameters())


def test_generator_forward_always_finite():
    torch.manual_seed(2)
    gen = Generator().eval()
    g = torch.Generator().manual_seed(3)
    with torch.no_grad():
        x = torch.rand(1000, 1, 16, 16, generator=g)
        y = torch.rand(1000, 1, 16, 16, generator=g)
        u = gen(x, y)
    assert torch.isfinite(u).all()


def test_init_is_deterministic():
    torch.manual_seed(7)
    a = Generator()
    torch.manual_seed(7)
    b = Generator()
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    x, y = _pair(1, 16, 16)
    assert torch.equal(a.eval()(x, y), b.eval()(x, y))


def test_critic_scores():
    torch.manual_seed(0)
    c = Critic()
    x = torch.rand(5, 1, 32, 32)
    s = c(x)
    assert s.shape == (5,)
    with torch.no_grad():
        c.fc.bias.add_(1.0)
    assert not torch.equal(c(x), s)
    with pytest.raises(ValueError):
        c(torch.zeros(1, 1, 8, 8))


def test_critic_input_gradient_matches_fd():
    torch.manual_seed(4)
    c = Critic().double()
    z = torch.rand(1, 1, 16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(5))
    fn = lambda v: c(v).sum()
    assert oracles.rel_err(oracles.autograd_of(fn, z), oracles.central_difference(fn, z)) <= 1e-3


def test_detector_grid_and_fusion_path():
    torch.manual_seed(0)
    det = Detector(num_classes=3)
    u = torch.rand(2, 1, 64, 64, requires_grad=True)
    raw = det(u)
    assert raw.shape == (2, 8, 4, 4)
    boxes = [[BoundingBox(4, 4, 20, 24, 1)], [BoundingBox(30, 40, 50, 60, 2)]]
    detection_loss(raw, boxes).backward()
    assert u.grad.abs().sum() > 0
    with pytest.raises(ValueError):
        det(torch.zeros(1, 1, 40, 64))


def test_decode_empty_grid():
    raw = torch.full((1, 8, 4, 4), -math.inf)
    assert decode_detections(raw) == [[]]


def test_decode_one_hot_cell():
    raw = torch.full((1, 8, 4, 4), -20.0)
    raw[:, 1:5] = 0.0
    raw[0, 0, 2, 1] = 20.0
    raw[0, 5 + 2, 2, 1] = 20.0
    (boxes,) = decode_detections(raw)
    assert len(boxes) == 1
    b = boxes[0]
    # sigmoid(0) = 0.5 puts the center mid-cell; exp(0) gives one stride per side
    assert b.center == pytest.approx((24.0, 40.0))
    assert (b.x_max - b.x_min, b.y_max - b.y_min) == pytest.approx((16.0, 16.0))
    assert b.class_id == 2 and b.score > 0.99


def test_encode_decode_roundtrip():
    box = BoundingBox(10, 20, 34, 30, 1)
    r, c, (fx, fy, tw, th) = encode_box(box)
    raw = torch.full((1, 8, 4, 4), -20.0)
    logit = lambda v: math.log(v / (1 - v))
    raw[0, :5, r, c] = torch.tensor([20.0, logit(fx), logit(fy), tw, th])
    raw[0, 6, r, c] = 20.0
    (boxes,) = decode_detections(raw)
    got = boxes[0]
    assert (got.x_min, got.y_min, got.x_max, got.y_max) == pytest.approx((10, 20, 34, 30), abs=1e-4)


def test_nms_keeps_higher_score():
    a = BoundingBox(0, 0, 10, 10, 0, 0.9)
    b = BoundingBox(1, 0, 11, 10, 0, 0.8)
    other_class = BoundingBox(1, 0, 11, 10, 1, 0.7)
    assert nms([b, a, other_class], 0.45) == [a, other_class]
