"""Super-resolution networks built from Paon layers.

Pipeline: feature extractor ``[1/0]`` -> ``R`` residual blocks -> ``[1/0]``
conv -> global skip (add extractor features) -> upsampler stages
(``[1/0]`` conv to ``4C``, activation, pixel shuffle x2) -> ``[1/0]`` conv to
RGB. Only the layers inside the residual blocks carry higher degrees.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, gelu, no_grad, pixel_shuffle, tanh
from .errors import ConfigurationError, NumericDomainError, UsageError
from .layers import PAU, PaonLayer, PaonSpec, count_paon_parameters
from .module import Module, Parameter

MODELS = ("resnet", "pau_net", "selfonn", "superonn", "padenet")
ACTIVATIONS = ("gelu", "tanh", "pau")
PLACEMENTS = ("all", "first", "last")


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyper-parameters. Use :func:`preset` for the reference models."""

    model: str = "padenet"
    blocks: int = 3
    channels: int = 48
    upscale: int = 2
    M: int = 2
    N: int = 1
    variant: str = "S"
    shift: int = 0
    activation: str = "gelu"
    block: str = "RB"
    width_mult: int = 1
    pau_degrees: tuple[int, int] = (7, 6)
    placement: str = "all"
    scaler_init: float = 0.1
    share_truncation: bool = True
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "pau_degrees", tuple(self.pau_degrees))
        if self.model not in MODELS:
            raise ConfigurationError(f"unknown model '{self.model}', expected one of {MODELS}")
        if self.upscale not in (2, 4):
            raise ConfigurationError(f"upscale must be 2 or 4, got {self.upscale}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation '{self.activation}'")
        if self.block not in ("RB", "WRB"):
            raise ConfigurationError(f"block must be RB or WRB, got '{self.block}'")
        if self.block == "RB" and self.width_mult != 1:
            raise ConfigurationError("RB blocks have width_mult 1")
        if self.block == "WRB" and self.width_mult <= 1:
            raise ConfigurationError("WRB blocks need width_mult > 1")
        if self.placement not in PLACEMENTS:
            raise ConfigurationError(f"placement must be one of {PLACEMENTS}")
        if self.blocks < 0 or self.channels < 1:
            raise ConfigurationError("blocks must be >= 0 and channels >= 1")
        # validates degrees/variant combination
        self.block_spec(self.channels, self.channels)

    def block_spec(self, cin: int, cout: int) -> PaonSpec:
        return PaonSpec(self.M, self.N, self.variant, cin, cout, self.kernel, self.shift,
                        share_truncation=self.share_truncation)

    def plain_spec(self, cin: int, cout: int) -> PaonSpec:
        return PaonSpec(1, 0, "A", cin, cout, self.kernel, -1)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pau_degrees"] = list(self.pau_degrees)
        return d


_PRESETS = {
    "resnet": dict(M=1, N=0, variant="A", shift=-1, activation="gelu", block="WRB", width_mult=4),
    "pau_net": dict(M=1, N=0, variant="A", shift=-1, activation="pau", block="WRB", width_mult=4),
    "selfonn": dict(M=3, N=0, variant="A", shift=-1, activation="tanh", block="RB", width_mult=1),
    "superonn": dict(M=3, N=0, variant="A", shift=0, activation="tanh", block="RB", width_mult=1),
    "padenet": dict(M=2, N=1, variant="S", shift=0, activation="gelu", block="RB", width_mult=1),
}


def preset(model: str, **overrides) -> NetworkConfig:
    """Reference configuration for ``model`` (3 blocks, 48 channels) with optional overrides."""
    if model not in _PRESETS:
        raise ConfigurationError(f"unknown preset '{model}', expected one of {MODELS}")
    fields = dict(model=model, blocks=3, channels=48, **_PRESETS[model])
    fields.update(overrides)
    return NetworkConfig(**fields)


def toy(cfg: NetworkConfig) -> NetworkConfig:
    """Desk-scale variant: one block of eight channels."""
    return dataclasses.replace(cfg, blocks=1, channels=8)


class Activation(Module):
    def __init__(self, kind: str, pau_degrees=(7, 6)):
        self.kind = kind
        if kind == "pau":
            self.pau = PAU(*pau_degrees)

    def forward(self, x: Tensor) -> Tensor:
        if self.kind == "gelu":
            return gelu(x)
        if self.kind == "tanh":
            return tanh(x)
        return self.pau(x)


class ResidualBlock(Module):
    """``y = x + scaler * L2(act(L1(x)))``; WRB widens the hidden layer by ``width_mult``.

    For tanh-activated models the branch output also passes through tanh.
    """

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator, name: str = "block"):
        c, hidden = cfg.channels, cfg.channels * cfg.width_mult
        first = cfg.placement in ("all", "first")
        last = cfg.placement in ("all", "last")
        s1 = cfg.block_spec(c, hidden) if first else cfg.plain_spec(c, hidden)
        s2 = cfg.block_spec(hidden, c) if last else cfg.plain_spec(hidden, c)
        self.name = name
        self.l1 = PaonLayer(s1, rng, name=f"{name}.l1")
        self.act = Activation(cfg.activation, cfg.pau_degrees)
        self.l2 = PaonLayer(s2, rng, name=f"{name}.l2")
        self.scaler = Parameter(np.full((1, c, 1, 1), cfg.scaler_init))
        self.bound_output = cfg.activation == "tanh"

    def branch(self, x: Tensor, check: bool = False) -> Tensor:
        h = _checked(self.l1, x, check)
        h = _checked(self.l2, self.act(h), check)
        return tanh(h) if self.bound_output else h

    def forward(self, x: Tensor, check: bool = False) -> Tensor:
        return x + self.scaler * self.branch(x, check)


def _checked(layer: PaonLayer, x: Tensor, check: bool) -> Tensor:
    out = layer(x)
    if check and not np.all(np.isfinite(out.data)):
        raise NumericDomainError(f"non-finite values first produced by layer '{layer.name}'")
    return out


class SRNet(Module):
    """Single-image super-resolution network (inputs and outputs in ``[-1, 1]``)."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c = cfg.channels
        self.head = PaonLayer(cfg.plain_spec(3, c), rng, name="head")
        self.blocks = [ResidualBlock(cfg, rng, name=f"blocks.{i}") for i in range(cfg.blocks)]
        self.body_tail = PaonLayer(cfg.plain_spec(c, c), rng, name="body_tail")
        stages = 1 if cfg.upscale == 2 else 2
        self.up = [_UpStage(cfg, rng, f"up.{i}") for i in range(stages)]
        self.tail = PaonLayer(cfg.plain_spec(c, 3), rng, name="tail")

    def paon_layers(self) -> list[tuple[str, PaonLayer]]:
        layers = [("head", self.head)]
        for b in self.blocks:
            layers += [(b.l1.name, b.l1), (b.l2.name, b.l2)]
        layers.append(("body_tail", self.body_tail))
        layers += [(u.conv.name, u.conv) for u in self.up]
        layers.append(("tail", self.tail))
        return layers

    def forward(self, x: Tensor, check: bool = False) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise UsageError(f"SR input must be (N, 3, H, W), got {x.shape}")
        feat = _checked(self.head, x, check)
        h = feat
        for block in self.blocks:
            h = block(h, check)
        h = _checked(self.body_tail, h, check) + feat
        for stage in self.up:
            h = stage(h, check)
        return _checked(self.tail, h, check)

    def locate_nonfinite(self, x: Tensor) -> str | None:
        """Name of the first layer whose output is non-finite on ``x``, if any."""
        with no_grad():
            try:
                self.forward(x, check=True)
            except NumericDomainError as err:
                return str(err)
        return None


class _UpStage(Module):
    def __init__(self, cfg: NetworkConfig, rng, name: str):
        self.conv = PaonLayer(cfg.plain_spec(cfg.channels, 4 * cfg.channels), rng, name=f"{name}.conv")
        self.act = Activation(cfg.activation, cfg.pau_degrees)

    def forward(self, x: Tensor, check: bool = False) -> Tensor:
        return pixel_shuffle(self.act(_checked(self.conv, x, check)), 2)


def build_network(cfg: NetworkConfig, seed: int = 0) -> SRNet:
    return SRNet(cfg, seed)


def forward_sr(model: SRNet, lr: Tensor) -> Tensor:
    """Unclamped SR output for a batch of ``[-1, 1]`` LR images."""
    return model(lr)


def count_network_parameters(cfg: NetworkConfig) -> int:
    """Closed-form parameter count of :class:`SRNet` for ``cfg``."""
    c, hidden = cfg.channels, cfg.channels * cfg.width_mult
    first = cfg.placement in ("all", "first")
    last = cfg.placement in ("all", "last")
    pau = sum(cfg.pau_degrees) + 1 if cfg.activation == "pau" else 0
    block = (count_paon_parameters(cfg.block_spec(c, hidden) if first else cfg.plain_spec(c, hidden))
             + count_paon_parameters(cfg.block_spec(hidden, c) if last else cfg.plain_spec(hidden, c))
             + c + pau)
    stages = 1 if cfg.upscale == 2 else 2
    up = count_paon_parameters(cfg.plain_spec(c, 4 * c)) + pau
    return (count_paon_parameters(cfg.plain_spec(3, c)) + cfg.blocks * block
            + count_paon_parameters(cfg.plain_spec(c, c)) + stages * up
            + count_paon_parameters(cfg.plain_spec(c, 3)))
