import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from s2c.core import ConfigError, RasterImage
from s2c.encoder import (EncoderSpec, LoRAConfig, NoTargetMatched, Siamese, apply_lora, encode, forward,
                         reference_encoder)
from s2c.train import grad_check


def ref(stride=8, c=32, channels=3, seed=0, hidden=16):
    return reference_encoder(channels, c, stride, np.random.default_rng(seed), hidden)


def test_latent_shape_stride_8(rng):
    spec, params = ref()
    lat = encode(spec, params, RasterImage(rng.random((64, 64, 3))))
    assert lat.shape == (32, 8, 8) and lat.patch_stride == 8


@pytest.mark.parametrize("stride,h,w", [(4, 33, 50), (8, 65, 40), (16, 32, 47)])
def test_latent_shape_ceil_division(rng, stride, h, w):
    spec, params = ref(stride)
    lat = encode(spec, params, RasterImage(rng.random((h, w, 3))))
    assert lat.shape == (32, math.ceil(h / stride), math.ceil(w / stride))


def test_identical_images_identical_latents(rng):
    spec, params = ref()
    im = RasterImage(rng.random((64, 64, 3)))
    assert torch.equal(encode(spec, params, im).features, encode(spec, params, im).features)


@pytest.mark.parametrize("stride,stages", [(4, 2), (8, 3), (16, 4)])
def test_stage_count(stride, stages):
    spec, _ = ref(stride)
    kinds = [layer.kind for layer in spec.layers]
    assert kinds.count("conv3x3_s2") == stages and kinds[-1] == "conv1x1"


def test_fixed_seed_identical_params():
    _, p1 = ref(seed=7)
    _, p2 = ref(seed=7)
    _, p3 = ref(seed=8)
    assert all(torch.equal(p1[k], p2[k]) for k in p1)
    assert not all(torch.equal(p1[k], p3[k]) for k in p1)


def test_parameter_count_closed_form():
    spec, params = ref(8, 32, 3, hidden=16)
    # three 3x3 stages then a 1x1 projection, each with bias
    expect = (16 * 3 * 9 + 16) + 2 * (16 * 16 * 9 + 16) + (32 * 16 + 32)
    assert spec.parameter_count() == expect == sum(t.numel() for t in params.values())


def test_fan_in_scaled_init():
    spec, params = ref(8, 32, 3, hidden=16)
    assert params["stage0.weight"].abs().max() <= math.sqrt(6 / 27)
    assert params["proj.weight"].abs().max() <= math.sqrt(6 / 16)


def test_spec_invariants():
    with pytest.raises(ConfigError):
        ref(stride=2)
    with pytest.raises(ConfigError):
        reference_encoder(3, 4, 8, np.random.default_rng(0))


def test_spec_dict_round_trip():
    spec, params = ref()
    spec, params = apply_lora(spec, params, LoRAConfig(rank=2), np.random.default_rng(1))
    assert EncoderSpec.from_dict(spec.to_dict()) == spec


def test_encode_gradients_match_finite_differences(rng):
    spec, params = ref(4, 8, 3, hidden=4)
    params = {k: v.double() for k, v in params.items()}
    x = torch.from_numpy(rng.random((1, 3, 16, 16)))
    readout = torch.from_numpy(rng.standard_normal((1, 8, 4, 4)))

    def loss(p):
        return (forward(spec, p, x) * readout).sum()

    report = grad_check(loss, params, 1e-6)
    assert report.worst < 1e-4, report.max_rel_error


@given(st.integers(0, 1000), st.sampled_from([(1, 0), (0, 1), (1, 1)]))
def test_shift_equivariance_interior(seed, cells):
    # circular shift keeps the per-image input statistics identical
    spec, params = ref(8, 8, 3, seed=seed % 7, hidden=8)
    px = np.random.default_rng(seed).random((1, 3, 64, 64))
    dy, dx = cells
    shifted = np.roll(px, (8 * dy, 8 * dx), axis=(2, 3))
    a = forward(spec, params, torch.from_numpy(px))[0]
    b = forward(spec, params, torch.from_numpy(shifted))[0]
    interior = a[:, 1:6, 1:6]
    moved = b[:, 1 + dy:6 + dy, 1 + dx:6 + dx]
    assert torch.allclose(interior, moved, atol=1e-5)


# -- LoRA ---------------------------------------------------------------------

def test_lora_zero_init_output_identity(rng):
    spec, params = ref()
    wspec, wparams = apply_lora(spec, params, LoRAConfig(), np.random.default_rng(3))
    x = torch.from_numpy(rng.random((2, 3, 64, 64)))
    assert torch.equal(forward(spec, params, x), forward(wspec, wparams, x))


def test_lora_trainable_count():
    spec, params = reference_encoder(3, 32, 8, np.random.default_rng(0), hidden=64)
    wspec, _ = apply_lora(spec, params, LoRAConfig(rank=4), np.random.default_rng(0))
    assert wspec.parameter_count(trainable_only=True) == 4 * (32 + 64) == 384
    assert set(wspec.trainable_names) == {"proj.lora_A", "proj.lora_B"}
    assert wspec.parameter_count() == spec.parameter_count() + 384


def test_lora_no_target():
    spec, params = ref()
    with pytest.raises(NoTargetMatched):
        apply_lora(spec, params, LoRAConfig(targets=("stage*",)), np.random.default_rng(0))


def test_lora_rank_invariant():
    with pytest.raises(ConfigError):
        LoRAConfig(rank=0)


def test_lora_effective_weight(rng):
    spec, params = ref(8, 8, 3, hidden=4)
    wspec, wparams = apply_lora(spec, params, LoRAConfig(rank=2, scaling=0.5), np.random.default_rng(0))
    wparams["proj.lora_B"] = torch.from_numpy(rng.standard_normal((8, 2))).float()
    merged = dict(params)
    delta = 0.5 * wparams["proj.lora_B"] @ wparams["proj.lora_A"]
    merged["proj.weight"] = params["proj.weight"] + delta.reshape(8, 4, 1, 1)
    x = torch.from_numpy(rng.random((1, 3, 32, 32)))
    assert torch.allclose(forward(wspec, wparams, x), forward(spec, merged, x), atol=1e-5)


def test_lora_gradients_flow_only_to_factors(rng):
    spec, params = ref(4, 8, 3, hidden=4)
    spec, params = apply_lora(spec, params, LoRAConfig(rank=2), np.random.default_rng(0))
    params = {k: v.double() for k, v in params.items()}
    params["proj.lora_B"] = torch.from_numpy(rng.standard_normal((8, 2)))
    x = torch.from_numpy(rng.random((1, 3, 16, 16)))
    readout = torch.from_numpy(rng.standard_normal((1, 8, 4, 4)))

    def loss(p):
        return (forward(spec, p, x) * readout).sum()

    report = grad_check(loss, params, 1e-6, names=spec.trainable_names)
    assert report.worst < 1e-4
    # the optimizer only differentiates the trainable set
    leaves = {k: v.clone().requires_grad_(k in spec.trainable_names) for k, v in params.items()}
    loss(leaves).backward()
    assert all(leaves[k].grad is None for k in params if k not in spec.trainable_names)
    assert all(leaves[k].grad is not None for k in spec.trainable_names)


def test_siamese_flat_round_trip():
    spec, params = ref()
    model = Siamese({"shared": spec}, {"shared": params})
    again = model.with_flat(model.flat())
    assert set(again.flat()) == {f"shared/{k}" for k in params}
    assert model.branch(1) == model.branch(2) == "shared"


def test_siamese_rejects_mismatched_branches():
    a, pa = ref(8, 32)
    b, pb = reference_encoder(1, 16, 8, np.random.default_rng(0), 16)
    with pytest.raises(ConfigError):
        Siamese({"rgb": a, "sar": b}, {"rgb": pa, "sar": pb})
