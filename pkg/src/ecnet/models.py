"""Rain-to-rain autoencoder, single-shot ECNet and recurrent ECNet+LL."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import tensor as T
from .blocks import Decoder, Encoder, MaskGam, Module, State
from .rlcn import RlcnParams, rlcn_batch
from .tensor import Tensor

SKIP_MODES = ("maskgam", "skip", "none")


@dataclass
class NetworkConfig:
    channels: Tuple[int, ...] = (32, 64, 128, 256)
    stages: int = 6
    recurrent: bool = True
    layered_lstm: bool = True
    skip_mode: str = "maskgam"
    use_rlcn: bool = True
    rlcn_window: int = 9
    rlcn_epsilon: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) < 2:
            raise ValueError("need at least two scales")
        for a, b in zip(self.channels, self.channels[1:]):
            if b != 2 * a:
                raise ValueError(f"channels must double across scales: {self.channels}")
        if any(c % 2 for c in self.channels):
            raise ValueError("channel counts must be even")
        if self.skip_mode not in SKIP_MODES:
            raise ValueError(f"skip_mode must be one of {SKIP_MODES}")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if not self.recurrent and self.stages != 1:
            raise ValueError("a single-shot network has exactly one stage")
        if self.layered_lstm and not self.recurrent:
            raise ValueError("layered LSTM requires the recurrent framework")

    @property
    def scales(self) -> int:
        return len(self.channels)

    @property
    def divisor(self) -> int:
        return 2 ** (self.scales - 1)

    @property
    def in_channels(self) -> int:
        return 3 + 3 * self.use_rlcn + 3 * self.recurrent

    @property
    def rlcn_params(self) -> RlcnParams:
        return RlcnParams(self.rlcn_window, self.rlcn_epsilon)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


class RainAutoencoder(Module):
    """Skip-free encoder-decoder fed the ground-truth rain layer."""

    def __init__(self, channels=(32, 64, 128, 256), seed: int = 0, dtype=np.float32):
        self.channels = tuple(channels)
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(3, self.channels, rng, dtype=dtype)
        self.decoder = Decoder(self.channels, rng, skips=False, dtype=dtype)

    def __call__(self, rain: Tensor) -> Tuple[Tensor, Tensor]:
        z, _, _ = self.encoder(rain)
        r_hat, _ = self.decoder(z)
        return z, r_hat


@dataclass
class StageOutput:
    rain: Tensor
    background: Tensor
    maps: List[Tensor]
    embedding: Tensor
    state: Optional[List[State]]
    stage: int = 1


class EcNet(Module):
    def __init__(self, config: NetworkConfig, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(config.seed)
        ch = config.channels
        self.encoder = Encoder(config.in_channels, ch, rng, recurrent_blocks=config.layered_lstm, dtype=dtype)
        self.gams: List[MaskGam] = []
        if config.skip_mode == "maskgam":
            self.gams = [MaskGam(c, rng, dtype=dtype) for c in ch[:-1]]
        self.decoder = Decoder(ch, rng, skips=config.skip_mode != "none", dtype=dtype)

    def forward_stage(self, image: Tensor, guide: Optional[Tensor], rain_prev: Optional[Tensor],
                      state: Optional[List[State]] = None, stage: int = 1) -> StageOutput:
        cfg = self.config
        parts = [image]
        if cfg.use_rlcn:
            if guide is None or guide.shape != image.shape:
                raise ValueError("RLCN guide missing or shaped unlike the image")
            parts.append(guide)
        if cfg.recurrent:
            if rain_prev is None:
                rain_prev = T.zeros_like(image)
            if rain_prev.shape != image.shape:
                raise ValueError("previous rain estimate shaped unlike the image")
            parts.append(rain_prev)
        j = T.concat_channels(parts)
        z, feats, new_state = self.encoder(j, state)
        skip = None if cfg.skip_mode == "none" else feats[:-1]
        rain, maps = self.decoder(z, skip, self.gams or None)
        return StageOutput(rain, T.sub(image, rain), maps, z, new_state, stage)

    def __call__(self, image: Tensor, guide: Optional[Tensor] = None, stages: Optional[int] = None) -> List[StageOutput]:
        """Run the stage recursion; returns every stage's output in order."""
        n = self.config.stages if stages is None else stages
        if not self.config.recurrent and n != 1:
            raise ValueError("single-shot network cannot run multiple stages")
        outs: List[StageOutput] = []
        rain, state = None, None
        for t in range(1, n + 1):
            out = self.forward_stage(image, guide, rain, state, stage=t)
            outs.append(out)
            rain, state = out.rain, out.state
        return outs

    def guide_for(self, image: np.ndarray) -> Optional[np.ndarray]:
        if not self.config.use_rlcn:
            return None
        return rlcn_batch(image, self.config.rlcn_params).astype(image.dtype)


def derain(net: EcNet, image: np.ndarray, stages: Optional[int] = None):
    """Derain an N x 3 x H x W batch without recording gradients.

    Returns (final background, list of StageOutput).
    """
    guide = net.guide_for(image)
    with T.no_grad():
        outs = net(Tensor(image), None if guide is None else Tensor(guide), stages)
    return outs[-1].background.data, outs


def init_decoder_from_ae(net: EcNet, ae: RainAutoencoder) -> None:
    """Copy the autoencoder decoder into ``net`` and zero the skip projections."""
    if tuple(net.config.channels) != tuple(ae.channels):
        raise ValueError(f"channel mismatch: net {net.config.channels} vs autoencoder {ae.channels}")
    src = ae.decoder.parameters()
    for name, p in net.decoder.parameters().items():
        if name in src:
            if src[name].shape != p.shape:
                raise ValueError(f"decoder tensor {name} differs in shape")
            p.data[...] = src[name].data
        elif name.startswith("proj."):
            p.data[...] = 0
        else:
            raise ValueError(f"unexpected decoder tensor {name}")
