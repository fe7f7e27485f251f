"""Coarse-to-fine flow network with occlusion-aware cost volumes.

Parameter names follow ``enc{k}.conv{i}`` for the pyramid encoder and
``dec{k}.*`` for the per-level decoders (``dec.*`` plus ``adapt{k}`` when the
decoder is shared across levels).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .correlation import CostVolume, SearchSpec, cost_volume_sampling, cost_volume_warping
from .occlusion import OAParams, occlusion_aware_volume
from .ops import add, concat_channels, conv2d, leaky_relu, sigmoid, upsample_bilinear_2x
from .tensor import Param, ParamStore, ShapeError, Tensor

CORRELATION_MODES = ("sampling", "warping")


@dataclass(frozen=True)
class NetConfig:
    encoder_channels: tuple[int, ...] = (16, 32, 64, 96, 128, 160)
    decoder_channels: tuple[int, ...] = (128, 128, 128, 128, 128, 96, 64, 32)
    radius: int = 4
    finest_level: int = 2
    correlation: str = "sampling"
    occlusion: bool = True
    share_decoder: bool = False
    adapter_channels: int = 32
    kernel: int = 3

    def __post_init__(self):
        if self.correlation not in CORRELATION_MODES:
            raise ValueError(f"correlation must be one of {CORRELATION_MODES}, got {self.correlation!r}")
        if not 1 <= self.finest_level <= len(self.encoder_channels):
            raise ValueError(f"finest_level {self.finest_level} outside 1..{len(self.encoder_channels)}")

    @property
    def depth(self) -> int:
        return len(self.encoder_channels)

    @property
    def levels(self) -> list[int]:
        """Estimation levels, coarsest first."""
        return list(range(self.depth, self.finest_level - 1, -1))

    @property
    def multiple(self) -> int:
        return 2**self.depth

    @property
    def search(self) -> SearchSpec:
        return SearchSpec(self.radius)

    def decoder_in_channels(self, level: int) -> int:
        feat = self.adapter_channels if self.share_decoder else self.encoder_channels[level - 1]
        return self.search.channels + feat + 2


@dataclass
class LevelState:
    """Flow (pixel units of its level) and awareness map after one decoder pass."""

    level: int
    flow: Tensor
    occ: Tensor | None


@dataclass
class FlowEstimate:
    flow: Tensor
    occ_pyramid: list[Tensor | None]
    levels: list[LevelState] = field(default_factory=list)


def param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _conv_specs(cfg: NetConfig) -> list[tuple[str, int, int, int]]:
    """(name, out_c, in_c, kernel) for every convolution of the model, in order."""
    k = cfg.kernel
    specs = []
    in_c = 3
    for lvl, out_c in enumerate(cfg.encoder_channels, start=1):
        specs.append((f"enc{lvl}.conv1", out_c, in_c, k))
        specs.append((f"enc{lvl}.conv2", out_c, out_c, k))
        in_c = out_c
    d = cfg.search.channels
    decoders = ["dec"] if cfg.share_decoder else [f"dec{lvl}" for lvl in cfg.levels]
    if cfg.share_decoder:
        for lvl in cfg.levels:
            specs.append((f"adapt{lvl}", cfg.adapter_channels, cfg.encoder_channels[lvl - 1], 1))
    for name, lvl in zip(decoders, cfg.levels):
        if cfg.occlusion:
            specs.append((f"{name}.oa.conv1", d, d, 3))
            specs.append((f"{name}.oa.conv2", d, d, 3))
        else:
            specs.append((f"{name}.oa.conv", d, d, 3))
        in_c = cfg.decoder_in_channels(lvl)
        for i, out_c in enumerate(cfg.decoder_channels, start=1):
            specs.append((f"{name}.conv{i}", out_c, in_c, k))
            in_c = out_c
        specs.append((f"{name}.flow", 2, in_c, k))
        if cfg.occlusion:
            specs.append((f"{name}.occ", 1, in_c, k))
    return specs


def init_params(cfg: NetConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    """He-normal weights (std sqrt(2 / fan_in)) and zero biases.

    Each tensor draws from its own generator keyed by (seed, name), so models
    that differ only in some layers still agree on the layers they share.
    """
    store = ParamStore()
    for name, out_c, in_c, k in _conv_specs(cfg):
        fan_in = in_c * k * k
        w = param_rng(seed, name + ".weight").standard_normal((out_c, in_c, k, k)) * np.sqrt(2.0 / fan_in)
        store.add(Param(name + ".weight", w.astype(dtype)))
        store.add(Param(name + ".bias", np.zeros(out_c, dtype=dtype)))
    return store


def closed_form_count(cfg: NetConfig) -> int:
    """Parameter count from the channel ledger alone."""
    return sum(o * i * k * k + o for _, o, i, k in _conv_specs(cfg))


def count_parameters(params: ParamStore) -> int:
    return params.num_elements()


def parameter_ledger(params: ParamStore) -> list[tuple[str, tuple[int, ...], int]]:
    return [(p.name, p.shape, p.size) for p in params]


class OASNet:
    """The flow estimator: a shared-weight feature pyramid and per-level decoders."""

    def __init__(self, cfg: NetConfig | None = None, params: ParamStore | None = None, seed: int = 0,
                 dtype=np.float32):
        self.cfg = cfg or NetConfig()
        self.params = params if params is not None else init_params(self.cfg, seed, dtype)
        missing = [n for n, *_ in _conv_specs(self.cfg) if n + ".weight" not in self.params]
        if missing:
            raise KeyError(f"parameter set lacks layers required by the config: {missing[:4]}")

    def _conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        w = self.params[name + ".weight"]
        return conv2d(x, w, self.params[name + ".bias"], stride=stride, pad=w.shape[-1] // 2)

    def _decoder_name(self, level: int) -> str:
        return "dec" if self.cfg.share_decoder else f"dec{level}"

    def oa_params(self, level: int) -> OAParams:
        name = self._decoder_name(level)
        p = self.params
        return OAParams(p[f"{name}.oa.conv1.weight"], p[f"{name}.oa.conv1.bias"],
                        p[f"{name}.oa.conv2.weight"], p[f"{name}.oa.conv2.bias"])

    def extract_pyramid(self, image: Tensor) -> list[Tensor]:
        """Features for levels 1..depth; level k is at 1/2**k resolution."""
        if image.data.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"image must be (n, 3, H, W), got {image.shape}")
        m = self.cfg.multiple
        h, w = image.shape[2:]
        if h % m or w % m:
            raise ValueError(f"image size {h}x{w} must be a multiple of {m} in both height and width")
        feats = []
        x = image
        for lvl in range(1, self.cfg.depth + 1):
            x = leaky_relu(self._conv(f"enc{lvl}.conv1", x, stride=2))
            x = leaky_relu(self._conv(f"enc{lvl}.conv2", x))
            feats.append(x)
        return feats

    def cost_volume(self, f1: Tensor, f2: Tensor, flow: Tensor) -> CostVolume:
        build = cost_volume_sampling if self.cfg.correlation == "sampling" else cost_volume_warping
        return build(f1, f2, flow, self.cfg.search)

    def decode_level(self, level: int, f1: Tensor, f2: Tensor, prev: LevelState | None) -> LevelState:
        """Refine the upsampled previous estimate at one pyramid level."""
        if f1.shape != f2.shape:
            raise ShapeError(f"level {level} features differ in shape: {f1.shape} vs {f2.shape}")
        n, _, h, w = f1.shape
        dt = f1.dtype
        if prev is None:
            flow0 = Tensor(np.zeros((n, 2, h, w), dtype=dt))
            occ0 = Tensor(np.full((n, 1, h, w), 0.5, dtype=dt))
        else:
            ph, pw = prev.flow.shape[2:]
            if (2 * ph, 2 * pw) != (h, w):
                raise ShapeError(f"previous level is {ph}x{pw}, expected half of {h}x{w}")
            flow0 = upsample_bilinear_2x(prev.flow, 2.0)
            occ0 = upsample_bilinear_2x(prev.occ, 1.0) if prev.occ is not None else None

        name = self._decoder_name(level)
        c = self.cost_volume(f1, f2, flow0)
        if self.cfg.occlusion:
            c_oa = occlusion_aware_volume(c, occ0, self.oa_params(level)).costs
        else:
            c_oa = leaky_relu(self._conv(f"{name}.oa.conv", c.costs))
        feat = self._conv(f"adapt{level}", f1) if self.cfg.share_decoder else f1
        x = concat_channels([c_oa, feat, flow0])
        for i in range(1, len(self.cfg.decoder_channels) + 1):
            x = leaky_relu(self._conv(f"{name}.conv{i}", x))
        flow = add(flow0, self._conv(f"{name}.flow", x))
        occ = sigmoid(self._conv(f"{name}.occ", x)) if self.cfg.occlusion else None
        return LevelState(level, flow, occ)

    def estimate_flow(self, im1: Tensor, im2: Tensor) -> FlowEstimate:
        if im1.shape != im2.shape:
            raise ShapeError(f"images differ in shape: {im1.shape} vs {im2.shape}")
        p1 = self.extract_pyramid(im1)
        p2 = self.extract_pyramid(im2)
        states = []
        prev = None
        for lvl in self.cfg.levels:
            prev = self.decode_level(lvl, p1[lvl - 1], p2[lvl - 1], prev)
            states.append(prev)
        flow = prev.flow
        for _ in range(self.cfg.finest_level):
            flow = upsample_bilinear_2x(flow, 2.0)
        return FlowEstimate(flow, [s.occ for s in states], states)

    __call__ = estimate_flow


def config_from_params(params: ParamStore, correlation: str = "sampling") -> NetConfig:
    """Recover the architecture from parameter names and shapes.

    The correlation mode leaves no trace in the weights and must be supplied.
    """
    names = params.names()
    enc = []
    while f"enc{len(enc) + 1}.conv1.weight" in params:
        enc.append(params[f"enc{len(enc) + 1}.conv1.weight"].shape[0])
    if not enc:
        raise KeyError("parameter set has no encoder layers (enc1.conv1.weight)")
    shared = "dec.conv1.weight" in params
    if shared:
        levels = sorted(int(n[5:].split(".")[0]) for n in names if n.startswith("adapt") and n.endswith(".weight"))
        dec = "dec"
    else:
        levels = sorted({int(n[3:].split(".")[0]) for n in names if n.startswith("dec") and n[3:4].isdigit()})
        dec = f"dec{levels[0]}" if levels else ""
    if not levels:
        raise KeyError("parameter set has no decoder layers")
    trunk = []
    while f"{dec}.conv{len(trunk) + 1}.weight" in params:
        trunk.append(params[f"{dec}.conv{len(trunk) + 1}.weight"].shape[0])
    occlusion = f"{dec}.oa.conv1.weight" in params
    oa = params[f"{dec}.oa.conv1.weight" if occlusion else f"{dec}.oa.conv.weight"]
    side = int(round(np.sqrt(oa.shape[0])))
    kwargs = dict(
        encoder_channels=tuple(enc), decoder_channels=tuple(trunk), radius=(side - 1) // 2,
        finest_level=levels[0], correlation=correlation, occlusion=occlusion, share_decoder=shared,
        kernel=params["enc1.conv1.weight"].shape[-1],
    )
    if shared:
        kwargs["adapter_channels"] = params[f"adapt{levels[0]}.weight"].shape[0]
    return NetConfig(**kwargs)
