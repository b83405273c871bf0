"""Group-adaptive building blocks and the residual backbone.

Adaptive layers keep one shared base kernel plus a bank of per-group masks
(or per-group channel-attention logits); a sample's group label picks the
row it is routed through.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import tensor as T
from .tensor import Param, ShapeError, Tensor

PRESETS = {
    # name: (blocks per unit, widths per unit)
    "small": (1, (8, 16, 32, 64)),
    "medium": (2, (16, 32, 64, 128)),
    "large": (3, (16, 32, 64, 128)),
}


class LayerKind(str, Enum):
    STANDARD = "Standard"
    ADAPTIVE_CONV = "AdaptiveConv"
    ADAPTIVE_ATTENTION = "AdaptiveAttention"
    SPATIAL_ATTENTION = "SpatialAttention"


class NetworkConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    preset: str = "medium"
    in_channels: int = Field(1, ge=1)
    image_size: int = Field(32, ge=8)
    embedding_dim: int = Field(64, gt=0)
    nd: int = Field(4, ge=1)
    placement: Literal["automatic", "manual", "none"] = "automatic"
    kernel_masks: bool = True
    channel_attention: bool = True
    spatial_attention: bool = False
    num_classes: Optional[int] = Field(None, ge=1)
    seed: int = 0

    @field_validator("preset")
    @classmethod
    def _known_preset(cls, v):
        if v not in PRESETS:
            raise ValueError(f"unknown preset {v!r}; expected one of {sorted(PRESETS)}")
        return v


@dataclass
class KernelMaskBank:
    masks: Param  # nd x ic x kh x kw

    @property
    def nd(self) -> int:
        return self.masks.shape[0]

    @classmethod
    def ones(cls, nd: int, ic: int, kh: int, kw: int, name: str = "masks"):
        if nd < 1:
            raise ValueError("KernelMaskBank needs nd >= 1")
        return cls(Param(np.ones((nd, ic, kh, kw)), name=name))


@dataclass
class AttentionBank:
    maps: Param  # nd x kc

    @property
    def nd(self) -> int:
        return self.maps.shape[0]

    @classmethod
    def zeros(cls, nd: int, kc: int, name: str = "maps"):
        if nd < 1:
            raise ValueError("AttentionBank needs nd >= 1")
        return cls(Param(np.zeros((nd, kc)), name=name))


@dataclass
class LayerState:
    kind: LayerKind
    shared_flag: bool = False
    similarity_history: list = field(default_factory=list)  # (step, mean_similarity)

    def record(self, step: int, value: float):
        if self.similarity_history and step <= self.similarity_history[-1][0]:
            raise ValueError("similarity history must be strictly increasing in step")
        self.similarity_history.append((step, float(value)))


def _check_group(group: int, nd: int):
    if not 0 <= group < nd:
        raise IndexError(f"group {group} out of range [0, {nd})")


def make_adaptive_kernel(base: Tensor, bank: KernelMaskBank, group: int) -> Tensor:
    """Effective kernel for one group: every output channel of ``base`` times that group's mask."""
    _check_group(group, bank.nd)
    if base.shape[1:] != bank.masks.shape[1:]:
        raise ShapeError(f"mask bank {bank.masks.shape} does not match kernel {base.shape}")
    mask = T.reshape(T.take(bank.masks, [group]), (1,) + base.shape[1:])
    return T.mul(base, mask)


def adaptive_conv_forward(x: Tensor, base: Tensor, bank: KernelMaskBank, group: int,
                          stride: int = 1, pad: int = 0, activation: Optional[str] = "relu") -> Tensor:
    out = T.conv2d(x, make_adaptive_kernel(base, bank, group), stride=stride, pad=pad)
    return T.pointwise(out, activation) if activation else out


def adaptive_attention_forward(feature: Tensor, bank: AttentionBank, group) -> Tensor:
    """Scale channel c of each sample by sigmoid(maps[group, c]).

    ``feature`` is (kc, oh, ow) with a scalar group, or (B, kc, oh, ow) with
    one group label per sample.
    """
    kc = feature.shape[-3]
    if bank.maps.shape[1] != kc:
        raise ShapeError(f"attention bank has {bank.maps.shape[1]} channels, feature has {kc}")
    groups = np.atleast_1d(np.asarray(group, dtype=np.intp))
    if groups.min() < 0 or groups.max() >= bank.nd:
        raise IndexError(f"group label out of range [0, {bank.nd})")
    gains = T.sigmoid(T.take(bank.maps, groups))
    if feature.data.ndim == 3:
        return T.mul(feature, T.reshape(gains, (kc, 1, 1)))
    return T.mul(feature, T.reshape(gains, (feature.shape[0], kc, 1, 1)))


def spatial_attention_forward(feature: Tensor, weights: Tensor) -> Tensor:
    """Multiply by sigmoid of a 1x1 convolution of the feature, shared across channels."""
    kc = feature.shape[-3]
    if weights.shape != (1, kc, 1, 1):
        raise ShapeError(f"spatial attention weights must be (1, {kc}, 1, 1), got {weights.shape}")
    return T.mul(feature, T.sigmoid(T.conv2d(feature, weights)))


# layers -----------------------------------------------------------------------

class ConvLayer:
    def __init__(self, name: str, ic: int, kc: int, k: int, stride: int, pad: int,
                 rng: np.random.Generator, nd: int = 1, adaptive: bool = False, gain: float = 1.0):
        std = gain * np.sqrt(2.0 / (ic * k * k))
        self.name = name
        self.base = Param(rng.normal(0.0, std, size=(kc, ic, k, k)), name=f"{name}.base")
        self.stride, self.pad = stride, pad
        self.bank = KernelMaskBank.ones(nd, ic, k, k, name=f"{name}.masks") if adaptive else None
        kind = LayerKind.ADAPTIVE_CONV if adaptive else LayerKind.STANDARD
        self.state = LayerState(kind)

    def params(self):
        return [self.base] + ([self.bank.masks] if self.bank else [])

    def __call__(self, x: Tensor, groups) -> Tensor:
        if self.bank is None:
            return T.conv2d(x, self.base, self.stride, self.pad)
        return T.conv2d(x, self.base, self.stride, self.pad, masks=self.bank.masks, groups=groups)


class ChannelAttention:
    def __init__(self, name: str, kc: int, nd: int):
        self.name = name
        self.bank = AttentionBank.zeros(nd, kc, name=f"{name}.maps")
        self.state = LayerState(LayerKind.ADAPTIVE_ATTENTION)

    def params(self):
        return [self.bank.maps]

    def __call__(self, x: Tensor, groups) -> Tensor:
        return adaptive_attention_forward(x, self.bank, groups)


class SpatialAttention:
    def __init__(self, name: str, kc: int):
        self.name = name
        self.weights = Param(np.zeros((1, kc, 1, 1)), name=f"{name}.weights")
        self.state = LayerState(LayerKind.SPATIAL_ATTENTION)

    def params(self):
        return [self.weights]

    def __call__(self, x: Tensor, groups) -> Tensor:
        return spatial_attention_forward(x, self.weights)


class ResidualBlock:
    def __init__(self, name, ic, kc, stride, rng, nd, adaptive):
        self.conv1 = ConvLayer(f"{name}.conv1", ic, kc, 3, stride, 1, rng, nd, adaptive)
        # small init on the second conv keeps the un-normalised residual stack stable
        self.conv2 = ConvLayer(f"{name}.conv2", kc, kc, 3, 1, 1, rng, nd, adaptive, gain=0.1)
        self.proj = None
        if stride != 1 or ic != kc:
            self.proj = ConvLayer(f"{name}.proj", ic, kc, 1, stride, 0, rng)

    def convs(self):
        return [self.conv1, self.conv2] + ([self.proj] if self.proj else [])

    def __call__(self, x, groups):
        h = T.relu(self.conv1(x, groups))
        h = self.conv2(h, groups)
        shortcut = self.proj(x, groups) if self.proj else x
        return T.relu(T.add(h, shortcut))


class Network:
    """Residual CNN: stem, residual units, linear embedding, optional cosine-classifier head.

    Attention (channel, then spatial) is applied to each residual unit's
    output after the last block's activation.
    """

    def __init__(self, config: NetworkConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        nd = config.nd
        blocks, widths = PRESETS[config.preset]
        automatic = config.placement == "automatic"
        manual = config.placement == "manual"
        kernels = config.kernel_masks and config.placement != "none"
        channel = config.channel_attention and config.placement != "none"

        self.stem = ConvLayer("stem", config.in_channels, widths[0], 3, 1, 1, rng, nd,
                              adaptive=kernels and automatic)
        self.units = []
        ic = widths[0]
        size = config.image_size
        for u, kc in enumerate(widths):
            unit_blocks = []
            for b in range(blocks):
                adaptive = kernels and (automatic or (manual and b == 0))
                unit_blocks.append(ResidualBlock(f"u{u}.b{b}", ic, kc, 2 if b == 0 else 1, rng, nd, adaptive))
                ic = kc
            size = T.conv_output_size(size, 3, 2, 1)
            att = ChannelAttention(f"u{u}.att", kc, nd) if channel else None
            spatial = SpatialAttention(f"u{u}.sa", kc) if config.spatial_attention else None
            self.units.append((unit_blocks, att, spatial))
        self.flat_dim = ic * size * size
        d = config.embedding_dim
        self.embed_w = Param(rng.normal(0.0, np.sqrt(1.0 / self.flat_dim), size=(d, self.flat_dim)), "embed.weight")
        self.embed_b = Param(np.zeros(d), "embed.bias")
        self.head = None
        if config.num_classes:
            self.head = Param(rng.normal(0.0, 1.0, size=(config.num_classes, d)), "head.weight")

    # structure ---------------------------------------------------------------

    def conv_layers(self) -> list[ConvLayer]:
        out = [self.stem]
        for blocks, _, _ in self.units:
            for blk in blocks:
                out.extend(blk.convs())
        return out

    def attention_layers(self) -> list[ChannelAttention]:
        return [att for _, att, _ in self.units if att is not None]

    def spatial_layers(self) -> list[SpatialAttention]:
        return [sa for _, _, sa in self.units if sa is not None]

    def adaptive_layers(self) -> list:
        """Layers carrying a per-group bank, in a fixed order that defines their layer ids."""
        return [c for c in self.conv_layers() if c.bank is not None] + self.attention_layers()

    def params(self) -> list[Param]:
        ps = []
        for c in self.conv_layers():
            ps.extend(c.params())
        for _, att, sa in self.units:
            if att:
                ps.extend(att.params())
            if sa:
                ps.extend(sa.params())
        ps += [self.embed_w, self.embed_b]
        if self.head is not None:
            ps.append(self.head)
        return ps

    def named_params(self) -> dict:
        return {p.name: p for p in self.params()}

    def arch(self) -> dict:
        return {
            "preset": self.config.preset,
            "nd": self.config.nd,
            "placement": self.config.placement,
            "config": self.config.model_dump(),
            "shared_flags": [layer.state.shared_flag for layer in self.adaptive_layers()],
        }

    # forward -----------------------------------------------------------------

    def forward(self, images, groups=None) -> Tensor:
        """Raw (unnormalised) embeddings, shape (B, embedding_dim)."""
        images = np.asarray(images, dtype=T.DTYPE)
        if images.ndim == 3:
            images = images[None]
        b = images.shape[0]
        if groups is None:
            groups = np.zeros(b, dtype=np.intp)
        groups = np.broadcast_to(np.asarray(groups, dtype=np.intp), (b,))
        if self.adaptive_layers() and (groups.min() < 0 or groups.max() >= self.config.nd):
            raise IndexError(f"group label out of range [0, {self.config.nd})")
        # pixels live in [0, 1] around 0.5; centre them so the stem sees signed input
        h = T.relu(self.stem(Tensor((images - 0.5) * 4.0), groups))
        for blocks, att, sa in self.units:
            for blk in blocks:
                h = blk(h, groups)
            if att is not None:
                h = att(h, groups)
            if sa is not None:
                h = sa(h, groups)
        h = T.reshape(h, (b, self.flat_dim))
        return T.linear(h, self.embed_w, self.embed_b)

    __call__ = forward

    def embed(self, images, groups=None, batch_size: int = 256) -> np.ndarray:
        """L2-normalised embeddings as a numpy array (no graph kept)."""
        images = np.asarray(images, dtype=T.DTYPE)
        groups = np.zeros(len(images), dtype=np.intp) if groups is None else np.asarray(groups)
        out = []
        for s in range(0, len(images), batch_size):
            e = self.forward(images[s:s + batch_size], groups[s:s + batch_size]).data
            out.append(e / np.linalg.norm(e, axis=1, keepdims=True))
        return np.concatenate(out) if out else np.zeros((0, self.config.embedding_dim))

    # persistence -------------------------------------------------------------

    def state_dict(self) -> dict:
        return {p.name: p.data.copy() for p in self.params()}

    def load_state_dict(self, state: dict):
        named = self.named_params()
        missing = set(named) - set(state)
        if missing:
            raise KeyError(f"checkpoint is missing tensors: {sorted(missing)[:5]}")
        for name, p in named.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.data[...] = state[name]

    def save(self, path):
        T.save_checkpoint(path, self.state_dict(), arch=self.arch())

    @classmethod
    def load(cls, path, expect: Optional[dict] = None) -> "Network":
        tensors, arch = T.load_checkpoint(path)
        if arch is None:
            raise ValueError(f"{path}: checkpoint has no 'arch' entry")
        if expect is not None:
            for key, val in expect.items():
                if arch.get(key) != val:
                    raise ValueError(f"architecture mismatch on {key!r}: checkpoint has {arch.get(key)!r}, expected {val!r}")
        net = cls(NetworkConfig(**arch["config"]))
        net.load_state_dict(tensors)
        for layer, flag in zip(net.adaptive_layers(), arch.get("shared_flags", [])):
            layer.state.shared_flag = bool(flag)
        return net


def build_network(config: NetworkConfig) -> Network:
    return Network(config)


# parameter accounting -------------------------------------------------------------

def adaptive_conv_extra(nd: int, ic: int, kh: int, kw: int) -> int:
    return nd * ic * kh * kw


def attention_extra(nd: int, kc: int) -> int:
    return nd * kc


def acnn_extra(id_dim: int, kc: int, ic: int, kh: int, kw: int) -> int:
    """Extra parameters of a one-layer-MLP kernel generator fed ``id_dim`` side inputs."""
    return id_dim * kc * ic * kh * kw


def acnn_ratio(id_dim: int, kc: int, nd: int) -> float:
    return id_dim * kc / nd


def param_count(network: Network, id_dim: Optional[int] = None) -> dict:
    id_dim = network.config.nd if id_dim is None else id_dim
    total = sum(p.size for p in network.params())
    extra = 0
    acnn = 0
    per_layer = []
    for layer in network.conv_layers():
        if layer.bank is None:
            continue
        kc, ic, kh, kw = layer.base.shape
        extra += adaptive_conv_extra(layer.bank.nd, ic, kh, kw)
        acnn += acnn_extra(id_dim, kc, ic, kh, kw)
        per_layer.append({"layer": layer.name, "gac_extra": adaptive_conv_extra(layer.bank.nd, ic, kh, kw),
                          "acnn_extra": acnn_extra(id_dim, kc, ic, kh, kw),
                          "acnn_ratio": acnn_ratio(id_dim, kc, layer.bank.nd)})
    for att in network.attention_layers():
        extra += attention_extra(att.bank.nd, att.bank.maps.shape[1])
    return {
        "total": total,
        "baseline_equivalent": total - extra,
        "adaptive_extra": extra,
        "acnn_extra": acnn,
        "id_dim": id_dim,
        "per_layer": per_layer,
    }
