"""Feature encoders and the LoRA wrapper.

An encoder is a pair ``(EncoderSpec, params)``: the spec describes the layer
stack and the parameter manifest, ``params`` maps tensor names to torch
tensors. The reference encoder is a small convolutional stack standing in
for a pretrained backbone; any backbone exposing the same surface can be
dropped in without touching the losses or the mapping code.
"""

from __future__ import annotations

import fnmatch
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import ConfigError, LatentMap, RasterImage, S2CError, ShapeMismatch, stack_images

Params = dict[str, torch.Tensor]


class NoTargetMatched(S2CError, ValueError):
    pass


@dataclass(frozen=True)
class ParamInfo:
    name: str
    shape: tuple[int, ...]
    trainable: bool = True

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv3x3_s2" or "conv1x1"
    c_in: int
    c_out: int
    activation: bool = True


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 4
    scaling: float = 1.0
    targets: tuple[str, ...] = ("proj",)

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.rank}")


@dataclass(frozen=True)
class EncoderSpec:
    name: str
    channels_in: int
    latent_channels: int
    patch_stride: int
    layers: tuple[LayerSpec, ...]
    manifest: tuple[ParamInfo, ...]
    lora: Optional[LoRAConfig] = None
    input_norm: bool = True
    stage_norm: bool = False

    def __post_init__(self):
        if self.patch_stride not in (4, 8, 16):
            raise ConfigError(f"patch_stride must be 4, 8 or 16, got {self.patch_stride}")
        if self.latent_channels < 8:
            raise ConfigError(f"latent_channels must be >= 8, got {self.latent_channels}")

    @property
    def trainable_names(self) -> list[str]:
        return [p.name for p in self.manifest if p.trainable]

    def parameter_count(self, trainable_only: bool = False) -> int:
        return sum(p.size for p in self.manifest if p.trainable or not trainable_only)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "channels_in": self.channels_in,
            "latent_channels": self.latent_channels,
            "patch_stride": self.patch_stride,
            "layers": [vars(layer) for layer in self.layers],
            "manifest": [{"name": p.name, "shape": list(p.shape), "trainable": p.trainable}
                         for p in self.manifest],
            "input_norm": self.input_norm,
            "stage_norm": self.stage_norm,
            "lora": None if self.lora is None else
                {"rank": self.lora.rank, "scaling": self.lora.scaling, "targets": list(self.lora.targets)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        lora = d.get("lora")
        return cls(
            name=d["name"],
            channels_in=d["channels_in"],
            latent_channels=d["latent_channels"],
            patch_stride=d["patch_stride"],
            layers=tuple(LayerSpec(**layer) for layer in d["layers"]),
            manifest=tuple(ParamInfo(p["name"], tuple(p["shape"]), p["trainable"]) for p in d["manifest"]),
            lora=None if lora is None else LoRAConfig(lora["rank"], lora["scaling"], tuple(lora["targets"])),
            input_norm=d.get("input_norm", True),
            stage_norm=d.get("stage_norm", False),
        )


def check_params(spec: EncoderSpec, params: Params) -> None:
    names = {p.name for p in spec.manifest}
    if set(params) != names:
        raise ShapeMismatch(f"params {sorted(params)} do not match manifest {sorted(names)}")
    for p in spec.manifest:
        t = params[p.name]
        if tuple(t.shape) != p.shape:
            raise ShapeMismatch(f"{p.name}: shape {tuple(t.shape)} != manifest {p.shape}")
        if not bool(torch.isfinite(t).all()):
            raise ShapeMismatch(f"{p.name}: non-finite values")


def reference_encoder(channels_in: int, c: int, stride: int, rng: np.random.Generator,
                      hidden: int = 64, stage_norm: bool = False) -> tuple[EncoderSpec, Params]:
    """Build ``log2(stride)`` stride-2 3x3 conv + SiLU stages and a 1x1 projection to ``c``."""
    if stride not in (4, 8, 16):
        raise ConfigError(f"stride must be 4, 8 or 16, got {stride}")
    n_stages = int(math.log2(stride))
    layers = []
    c_prev = channels_in
    for i in range(n_stages):
        layers.append(LayerSpec(f"stage{i}", "conv3x3_s2", c_prev, hidden))
        c_prev = hidden
    layers.append(LayerSpec("proj", "conv1x1", c_prev, c, activation=False))

    manifest = []
    params: Params = {}
    for layer in layers:
        k = 3 if layer.kind == "conv3x3_s2" else 1
        fan_in = layer.c_in * k * k
        w_shape = (layer.c_out, layer.c_in, k, k)
        bound = math.sqrt(6.0 / fan_in)
        params[f"{layer.name}.weight"] = torch.from_numpy(rng.uniform(-bound, bound, size=w_shape))
        params[f"{layer.name}.bias"] = torch.from_numpy(
            rng.uniform(-1 / math.sqrt(fan_in), 1 / math.sqrt(fan_in), size=(layer.c_out,)))
        manifest += [ParamInfo(f"{layer.name}.weight", w_shape), ParamInfo(f"{layer.name}.bias", (layer.c_out,))]
    params = {k: v.to(torch.float32) for k, v in params.items()}
    spec = EncoderSpec(f"reference-s{stride}-c{c}", channels_in, c, stride, tuple(layers), tuple(manifest),
                       stage_norm=stage_norm)
    return spec, params


def apply_lora(spec: EncoderSpec, params: Params, cfg: LoRAConfig,
               rng: np.random.Generator) -> tuple[EncoderSpec, Params]:
    """Freeze every base tensor and attach trainable low-rank factors to matching 1x1 layers.

    Each matched layer with weight ``W`` (d_out x d_in) gains ``A`` (rank x d_in,
    uniform init) and ``B`` (d_out x rank, zeros), so the wrapped encoder is
    initially output-identical to the original.
    """
    if spec.lora is not None:
        raise ConfigError("encoder already carries LoRA factors")
    matched = [layer for layer in spec.layers
               if layer.kind == "conv1x1" and any(fnmatch.fnmatch(layer.name, pat) for pat in cfg.targets)]
    if not matched:
        raise NoTargetMatched(f"no 1x1 layer matches {cfg.targets}")
    manifest = [replace(p, trainable=False) for p in spec.manifest]
    new_params = dict(params)
    dtype = params[manifest[0].name].dtype
    for layer in matched:
        bound = 1.0 / math.sqrt(layer.c_in)
        a = rng.uniform(-bound, bound, size=(cfg.rank, layer.c_in))
        new_params[f"{layer.name}.lora_A"] = torch.from_numpy(a).to(dtype)
        new_params[f"{layer.name}.lora_B"] = torch.zeros(layer.c_out, cfg.rank, dtype=dtype)
        manifest += [ParamInfo(f"{layer.name}.lora_A", (cfg.rank, layer.c_in)),
                     ParamInfo(f"{layer.name}.lora_B", (layer.c_out, cfg.rank))]
    return replace(spec, manifest=tuple(manifest), lora=cfg), new_params


def _layer_weight(spec: EncoderSpec, params: Params, layer: LayerSpec) -> torch.Tensor:
    w = params[f"{layer.name}.weight"]
    a = params.get(f"{layer.name}.lora_A")
    if a is not None:
        b = params[f"{layer.name}.lora_B"]
        w = w + spec.lora.scaling * (b @ a).reshape(w.shape)
    return w


def standardize(x: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    """Zero-mean, unit-variance channels per image."""
    mu = x.mean(dim=(-2, -1), keepdim=True)
    sd = x.std(dim=(-2, -1), keepdim=True, unbiased=False)
    return (x - mu) / (sd + eps)


def forward(spec: EncoderSpec, params: Params, x: torch.Tensor) -> torch.Tensor:
    """Encode an N x C x H x W batch into N x c x ceil(H/s) x ceil(W/s) latents."""
    if x.ndim != 4 or x.shape[1] != spec.channels_in:
        raise ShapeMismatch(f"expected N x {spec.channels_in} x H x W input, got {tuple(x.shape)}")
    s = spec.patch_stride
    h, w = x.shape[-2:]
    pad_h, pad_w = (-h) % s, (-w) % s
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
    x = x.to(params[spec.manifest[0].name].dtype)
    if spec.input_norm:
        x = standardize(x)
    for layer in spec.layers:
        weight = _layer_weight(spec, params, layer)
        bias = params[f"{layer.name}.bias"]
        if layer.kind == "conv3x3_s2":
            x = F.conv2d(x, weight, bias, stride=2, padding=1)
            if spec.stage_norm:
                x = standardize(x, 1e-5)
        else:
            x = F.conv2d(x, weight, bias)
        if layer.activation:
            x = F.silu(x)
    return x


def encode(spec: EncoderSpec, params: Params, img: RasterImage) -> LatentMap:
    feats = forward(spec, params, stack_images([img]))[0]
    return LatentMap(feats, spec.patch_stride)


def encode_batch(spec: EncoderSpec, params: Params, images: Sequence[RasterImage]) -> torch.Tensor:
    return forward(spec, params, stack_images(images))


def clone_params(params: Params) -> Params:
    return {k: v.detach().clone() for k, v in params.items()}


def params_to(params: Params, dtype: torch.dtype) -> Params:
    return {k: v.detach().to(dtype) for k, v in params.items()}


class Siamese:
    """The encoders of a change model, keyed by branch.

    A homogeneous model has a single ``"shared"`` branch that encodes both
    dates. A multimodal model has independent ``"rgb"`` (first date) and
    ``"sar"`` (second date) branches. Parameters of all branches are exposed
    as one flat dict with ``"<branch>/<tensor>"`` keys for the optimizer.
    """

    def __init__(self, specs: dict[str, EncoderSpec], params: dict[str, Params]):
        if set(specs) not in ({"shared"}, {"rgb", "sar"}):
            raise ConfigError(f"branches must be 'shared' or 'rgb'+'sar', got {sorted(specs)}")
        for key, spec in specs.items():
            check_params(spec, params[key])
        if "sar" in specs:
            a, b = specs["rgb"], specs["sar"]
            if (a.latent_channels, a.patch_stride) != (b.latent_channels, b.patch_stride):
                raise ConfigError("rgb and sar encoders must agree on latent channels and patch stride")
        self.specs = dict(specs)
        self.params = {k: dict(v) for k, v in params.items()}

    @property
    def mode(self) -> str:
        return "mmcd" if "sar" in self.specs else "homogeneous"

    @property
    def patch_stride(self) -> int:
        return next(iter(self.specs.values())).patch_stride

    def branch(self, date: int) -> str:
        if self.mode == "homogeneous":
            return "shared"
        return "rgb" if date == 1 else "sar"

    def encode(self, date: int, x: torch.Tensor, params: Optional[dict[str, Params]] = None) -> torch.Tensor:
        key = self.branch(date)
        return forward(self.specs[key], (params or self.params)[key], x)

    def flat(self) -> Params:
        return {f"{k}/{n}": t for k, p in self.params.items() for n, t in p.items()}

    def trainable(self) -> list[str]:
        return [f"{k}/{n}" for k, s in self.specs.items() for n in s.trainable_names]

    def with_flat(self, flat: Params) -> "Siamese":
        params: dict[str, Params] = {k: {} for k in self.specs}
        for key, t in flat.items():
            branch, name = key.split("/", 1)
            params[branch][name] = t
        return Siamese(self.specs, params)

    def clone(self) -> "Siamese":
        return Siamese(self.specs, {k: clone_params(p) for k, p in self.params.items()})
