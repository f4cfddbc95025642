import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from s2c.core import (BinaryMask, ChangeProbMap, ConfigError, ImagePair, LatentMap, LossWeights, MappingConfig,
                      MaskSet, RasterImage, RefineConfig, ShapeMismatch, SparsityConfig, TripletConfig, ValueRange,
                      stack_images, validate)


def img(h=64, w=64, c=3, value=0.5):
    return RasterImage(np.full((h, w, c), value))


def test_validate_returns_pair_unchanged():
    pair = ImagePair(img(), img(value=0.2))
    assert validate(pair) is pair


def test_mismatched_pair_raises():
    with pytest.raises(ShapeMismatch):
        ImagePair(img(64, 64), img(64, 63))


def test_nan_pixels_raise():
    px = np.full((64, 64, 3), 0.5)
    px[3, 4, 1] = np.nan
    with pytest.raises(ValueRange):
        RasterImage(px)


def test_label_shape_checked():
    with pytest.raises(ShapeMismatch):
        ImagePair(img(), img(), BinaryMask(np.zeros((32, 32), bool)))


def test_from_uint8_scales_to_unit_range():
    arr = np.array([[0, 255], [51, 102]], dtype=np.uint8)
    arr = np.kron(arr, np.ones((32, 32), np.uint8))[..., None]
    im = RasterImage.from_uint8(arr)
    assert im.pixels.max() == 1.0 and im.pixels.min() == 0.0
    assert im.pixels[40, 0, 0] == pytest.approx(0.2)


@given(st.integers(1, 31), st.integers(32, 40), st.sampled_from([2, 4]))
def test_small_or_bad_channel_images_rejected(small, ok, c):
    with pytest.raises(ShapeMismatch):
        RasterImage(np.zeros((small, ok, 3)))
    with pytest.raises(ShapeMismatch):
        RasterImage(np.zeros((ok, ok, c)))


@given(st.floats(allow_nan=False, allow_infinity=False).filter(lambda v: v < 0 or v > 1))
def test_out_of_range_pixels_rejected(v):
    px = np.zeros((32, 32, 1))
    px[0, 0, 0] = v
    with pytest.raises(ValueRange):
        RasterImage(px)


@given(st.floats(allow_nan=False).filter(lambda v: v < 0 or v > 1))
def test_out_of_range_probs_rejected(v):
    with pytest.raises(ValueRange):
        ChangeProbMap(np.full((4, 4), v))


def test_latent_map_checks():
    with pytest.raises(ShapeMismatch):
        LatentMap(torch.zeros(4, 4), 8)
    with pytest.raises(ValueRange):
        LatentMap(torch.full((8, 2, 2), float("inf")), 8)
    assert LatentMap(torch.zeros(8, 2, 3), 8).shape == (8, 2, 3)


def test_mask_set_homogeneous():
    a = BinaryMask(np.zeros((4, 4), bool))
    b = BinaryMask(np.zeros((4, 5), bool))
    assert len(MaskSet(())) == 0
    with pytest.raises(ShapeMismatch):
        MaskSet((a, b))


@pytest.mark.parametrize("factory", [
    lambda: LossWeights(alpha=-0.1),
    lambda: LossWeights(beta=float("nan")),
    lambda: TripletConfig(margin=-1.0),
    lambda: SparsityConfig(threshold_T=0.0),
    lambda: SparsityConfig(threshold_T=1.0),
    lambda: SparsityConfig(grid_d=0),
    lambda: MappingConfig(eta=0.0),
    lambda: RefineConfig(iou_threshold=1.0),
])
def test_config_invariants(factory):
    with pytest.raises(ConfigError):
        factory()


def test_config_defaults():
    assert LossWeights() == LossWeights(0.2, 1.0)
    assert TripletConfig().margin == 1.0
    assert SparsityConfig().grid_d == 16
    assert MappingConfig().eta == pytest.approx(np.log(1 / 0.07))
    assert RefineConfig().iou_threshold == 0.5


def test_stack_images_layout():
    px = np.random.default_rng(0).random((32, 40, 3))
    x = stack_images([RasterImage(px), RasterImage(px)])
    assert x.shape == (2, 3, 32, 40) and x.dtype == torch.float32
    assert np.allclose(x[1, 2].numpy(), px[:, :, 2], atol=1e-7)


def test_binary_mask_area_and_equality():
    bits = np.zeros((5, 5), bool)
    bits[1:3, 1:4] = True
    assert BinaryMask(bits).area == 6
    assert BinaryMask(bits) == BinaryMask(bits.copy())
    assert BinaryMask(bits) != BinaryMask(~bits)
