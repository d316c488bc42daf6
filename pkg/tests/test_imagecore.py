import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dualfuse.imagecore import (
    AnnotatedPair,
    BoundingBox,
    DatasetManifest,
    GrayImage,
    ManifestEntry,
    ManifestError,
    PairLoadError,
    TargetMask,
    apply_mask,
    complement_mask,
    load_pair,
    read_manifest,
    read_png,
    save_png,
    write_manifest,
)

unit = hnp.arrays(np.float64, (8, 8), elements=st.floats(0, 1, allow_nan=False))


def test_gray_image_invariants():
    with pytest.raises(ValueError):
        GrayImage(np.zeros((4, 8)))
    with pytest.raises(ValueError):
        GrayImage(np.full((8, 8), 1.5))
    with pytest.raises(ValueError):
        GrayImage(np.full((8, 8), np.nan))
    img = GrayImage(np.zeros((8, 12)))
    assert (img.height, img.width) == (8, 12)


def test_apply_mask_examples():
    ones = GrayImage(np.ones((8, 8)))
    assert np.all(apply_mask(ones, TargetMask(np.zeros((8, 8)))).data == 0)
    img = np.random.default_rng(0).random((8, 8))
    assert np.array_equal(apply_mask(img, np.ones((8, 8))), img)
    out = apply_mask(np.array([[0.2, 0.4], [0.6, 0.8]]), np.array([[1, 0], [0, 1]]))
    np.testing.assert_allclose(out, [[0.2, 0], [0, 0.8]])


def test_apply_mask_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(8, 8\).*\(8, 9\)"):
        apply_mask(np.zeros((8, 8)), np.zeros((8, 9)))


def test_apply_mask_is_differentiable():
    u = torch.rand(1, 1, 8, 8, dtype=torch.float64, requires_grad=True)
    m = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    apply_mask(u, m).sum().backward()
    torch.testing.assert_close(u.grad, m)


def test_complement_mask_examples():
    np.testing.assert_array_equal(complement_mask(np.zeros((8, 8))), np.ones((8, 8)))
    np.testing.assert_allclose(complement_mask(np.array([[1, 0], [0.5, 1]])), [[0, 1], [0.5, 0]])


@given(hnp.arrays(np.float64, (8, 8), elements=st.sampled_from([0.0, 1.0])))
def test_complement_is_involution(m):
    assert np.array_equal(complement_mask(complement_mask(TargetMask(m))).data, m)


@given(unit, unit)
def test_mask_partition_reconstructs_image(z, m):
    total = apply_mask(z, m) + apply_mask(z, complement_mask(m))
    np.testing.assert_allclose(total, z, atol=1e-12)


@given(hnp.arrays(np.uint8, (8, 8)))
@settings(max_examples=25, deadline=None)
def test_png_roundtrip_is_identity(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("png") / "a.png"
    save_png(path, arr)
    assert np.array_equal(read_png(path), arr)
    assert np.array_equal(GrayImage.from_uint8(arr).to_uint8(), arr)


def test_box_validation():
    with pytest.raises(ValueError):
        BoundingBox(5, 0, 5, 3)
    b = BoundingBox(-2, 1, 40, 5, 1)
    c = b.clipped(32, 32)
    assert c.x_min == 0 and c.x_max == 32


def _entries(n):
    return tuple(
        ManifestEntry(f"p{i}", f"ir/{i}.png", f"vis/{i}.png", f"mask/{i}.png", f"ann/{i}.txt") for i in range(n)
    )


@pytest.mark.parametrize("n", [0, 3])
def test_manifest_roundtrip(tmp_path, n):
    m = DatasetManifest(str(tmp_path), _entries(n), "val", 17)
    write_manifest(m, tmp_path / "manifest.jsonl")
    back = read_manifest(tmp_path / "manifest.jsonl", check_files=False)
    assert back == m
    assert back.pair_ids == [f"p{i}" for i in range(n)]


def test_manifest_header_format(tmp_path):
    write_manifest(DatasetManifest(str(tmp_path), _entries(2), "test", 4), tmp_path / "m.jsonl")
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert json.loads(lines[0]) == {"version": 1, "split": "test", "seed": 4, "count": 2}
    assert set(json.loads(lines[1])) == {"pair_id", "ir", "vis", "mask", "ann"}


def test_manifest_errors(tmp_path):
    with pytest.raises(ManifestError, match="not found"):
        read_manifest(tmp_path / "nope.jsonl")
    path = tmp_path / "m.jsonl"
    write_manifest(DatasetManifest(str(tmp_path), _entries(2)), path)
    lines = path.read_text().splitlines()
    lines[2] = "{not json"
    path.write_text("\n".join(lines))
    with pytest.raises(ManifestError, match=":3:"):
        read_manifest(path, check_files=False)


def test_manifest_duplicate_ids_rejected(tmp_path):
    e = _entries(1)
    with pytest.raises(ManifestError):
        DatasetManifest(str(tmp_path), e + e)


def test_missing_image_names_pair(dataset):
    victim = dataset.entries[2]
    (dataset.resolve(victim.vis)).unlink()
    with pytest.raises(ManifestError, match=victim.pair_id):
        read_manifest(dataset.resolve("manifest.jsonl"))


def test_load_pair_normalization(tmp_path):
    arr = np.zeros((8, 8), np.uint8)
    arr[0, 0], arr[0, 1] = 255, 128
    for name in ("ir", "vis", "mask"):
        save_png(tmp_path / f"{name}.png", arr if name != "mask" else np.zeros((8, 8), np.uint8))
    (tmp_path / "a.txt").write_text("0 1 1 4 4\n")
    m = DatasetManifest(str(tmp_path), (ManifestEntry("a", "ir.png", "vis.png", "mask.png", "a.txt"),))
    pair = load_pair(m, "a")
    assert pair.infrared.data[0, 0] == 1.0
    assert pair.infrared.data[1, 1] == 0.0
    assert pair.infrared.data[0, 1] == pytest.approx(128 / 255, abs=1e-12)
    assert pair.boxes == (BoundingBox(1, 1, 4, 4, 0),)


def test_load_pair_errors(dataset):
    with pytest.raises(PairLoadError, match="unknown"):
        load_pair(dataset, "missing")
    e = dataset.entries[0]
    dataset.resolve(e.ir).write_bytes(b"not a png")
    with pytest.raises(PairLoadError, match=e.pair_id):
        load_pair(dataset, e.pair_id)
    e = dataset.entries[1]
    dataset.resolve(e.ann).write_text("0 0 0 500 10\n")
    with pytest.raises(PairLoadError, match="outside"):
        load_pair(dataset, e.pair_id)


def test_loaded_pairs_satisfy_invariants(dataset):
    for pid in dataset.pair_ids:
        pair = load_pair(dataset, pid, min_coverage=0.25)
        assert pair.infrared.shape == pair.visible.shape == pair.mask.shape
        assert pair.mask.is_binary()


def test_pair_shape_mismatch():
    with pytest.raises(ValueError):
        AnnotatedPair(GrayImage(np.zeros((8, 8))), GrayImage(np.zeros((8, 9))), TargetMask(np.zeros((8, 8))), (), "x")
