"""Network building blocks: residual blocks, ConvLSTM, Mask-GAM, encoder and decoder."""

from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

State = Tuple[Tensor, Tensor]


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())


class Conv(Module):
    def __init__(self, in_c: int, out_c: int, k: int, rng, stride: int = 1, dtype=np.float32):
        self.stride = stride
        fan_in = in_c * k * k
        self.w = T.randn_init((out_c, in_c, k, k), fan_in, rng, dtype=dtype)
        if fan_in > 1:
            # zero-sum filters respond to local variation only, so a ReLU fed by
            # non-negative features cannot start out dead on the whole input;
            # the rescale restores the He variance
            w = self.w.data.reshape(out_c, fan_in)
            w -= w.mean(axis=1, keepdims=True)
            w *= np.sqrt(fan_in / (fan_in - 1)).astype(dtype)
        self.b = Tensor(np.zeros(out_c, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, stride=self.stride)

    def zero_(self) -> None:
        self.w.data[...] = 0
        self.b.data[...] = 0


# residual branches start small so a fresh block is close to the identity;
# without normalization layers this keeps activations from growing with depth
RESIDUAL_INIT_SCALE = 0.1


class ResidualBlock(Module):
    """y = x + conv2(relu(conv1(x)))."""

    def __init__(self, c: int, rng, dtype=np.float32):
        self.conv1 = Conv(c, c, 3, rng, dtype=dtype)
        self.conv2 = Conv(c, c, 3, rng, dtype=dtype)
        self.conv2.w.data *= RESIDUAL_INIT_SCALE

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(x, self.conv2(T.relu(self.conv1(x))))


GATES = ("i", "f", "o", "g")


class ConvLstmCell(Module):
    """Convolutional LSTM over concat(x, h).

    The four gate convolutions are stored fused as one 3x3 convolution with
    ``4*c`` outputs in the order i, f, o, g; :meth:`gate` gives a view of one
    gate's weight and bias.
    """

    def __init__(self, c: int, rng, dtype=np.float32):
        self.channels = c
        self.gates = Conv(2 * c, 4 * c, 3, rng, dtype=dtype)

    def gate(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        k = GATES.index(name)
        c = self.channels
        return self.gates.w.data[k * c:(k + 1) * c], self.gates.b.data[k * c:(k + 1) * c]

    def gate_maps(self, x: Tensor, h: Tensor) -> Dict[str, Tensor]:
        z = self.gates(T.concat_channels([x, h]))
        c = self.channels
        pre = {g: T.slice_channels(z, k * c, (k + 1) * c) for k, g in enumerate(GATES)}
        return {g: (T.tanh(v) if g == "g" else T.sigmoid(v)) for g, v in pre.items()}

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> State:
        if not (x.shape == h.shape == c.shape):
            raise ValueError(f"ConvLSTM shape mismatch: x {x.shape}, h {h.shape}, c {c.shape}")
        gm = self.gate_maps(x, h)
        c_new = T.add(T.hadamard(gm["f"], c), T.hadamard(gm["i"], gm["g"]))
        h_new = T.hadamard(gm["o"], T.tanh(c_new))
        return h_new, c_new


def zero_state(x: Tensor) -> State:
    return T.zeros_like(x), T.zeros_like(x)


class RecurrentResidualBlock(Module):
    """Residual block with a ConvLSTM between the two convolutions.

    ``a = relu(conv1(x))``; the LSTM refines ``a`` into ``h'`` and the second
    convolution sees ``a + h'``, so closing the output gate recovers a plain
    :class:`ResidualBlock`.
    """

    def __init__(self, c: int, rng, dtype=np.float32):
        self.conv1 = Conv(c, c, 3, rng, dtype=dtype)
        self.lstm = ConvLstmCell(c, rng, dtype=dtype)
        self.conv2 = Conv(c, c, 3, rng, dtype=dtype)
        self.conv2.w.data *= RESIDUAL_INIT_SCALE

    def __call__(self, x: Tensor, state: Optional[State] = None) -> Tuple[Tensor, State]:
        a = T.relu(self.conv1(x))
        h, c = zero_state(a) if state is None else state
        if h.shape != a.shape:
            raise ValueError(f"recurrent state {h.shape} does not match features {a.shape}")
        h_new, c_new = self.lstm(a, h, c)
        y = T.add(x, self.conv2(T.add(a, h_new)))
        return y, (h_new, c_new)


class MaskGam(Module):
    """Mask-guided attention: gate encoder features with a learned one-channel map."""

    def __init__(self, c: int, rng, dtype=np.float32):
        if c % 2:
            raise ValueError("Mask-GAM needs an even channel count")
        n = c // 2
        self.channels = c
        self.enc = Conv(c, n, 1, rng, dtype=dtype)
        self.dec = Conv(n, n, 1, rng, dtype=dtype)
        self.att = Conv(n, 1, 1, rng, dtype=dtype)

    def __call__(self, f: Tensor, f_dec: Tensor) -> Tuple[Tensor, Tensor]:
        if f.shape[1] != self.channels or f_dec.shape[1] != self.channels // 2:
            raise ValueError(f"Mask-GAM channel contract violated: {f.shape}, {f_dec.shape}")
        if f.shape[2:] != f_dec.shape[2:]:
            raise ValueError("Mask-GAM inputs differ in spatial size")
        m = T.sigmoid(self.att(T.relu(T.add(self.enc(f), self.dec(f_dec)))))
        return T.hadamard(T.expand_channels(m, self.channels), f), m


class Encoder(Module):
    """Per scale: (stride-2) 3x3 conv + ReLU, then one RB or RRB."""

    def __init__(self, in_channels: int, channels: Sequence[int], rng, recurrent_blocks: bool = False,
                 dtype=np.float32):
        self.in_channels = in_channels
        self.recurrent_blocks = recurrent_blocks
        prev = in_channels
        self.down: List[Conv] = []
        self.blocks: List[Module] = []
        for s, c in enumerate(channels):
            self.down.append(Conv(prev, c, 3, rng, stride=1 if s == 0 else 2, dtype=dtype))
            block_cls = RecurrentResidualBlock if recurrent_blocks else ResidualBlock
            self.blocks.append(block_cls(c, rng, dtype=dtype))
            prev = c

    @property
    def scales(self) -> int:
        return len(self.blocks)

    def __call__(self, x: Tensor, states: Optional[List[State]] = None):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"encoder expects {self.in_channels} input channels, got {x.shape[1]}")
        div = 2 ** (self.scales - 1)
        if x.shape[2] % div or x.shape[3] % div:
            raise ValueError(f"input {x.shape[2]}x{x.shape[3]} not divisible by {div}")
        feats, new_states = [], []
        for s in range(self.scales):
            x = T.relu(self.down[s](x))
            if self.recurrent_blocks:
                x, st = self.blocks[s](x, None if states is None else states[s])
                new_states.append(st)
            else:
                x = self.blocks[s](x)
            feats.append(x)
        return x, feats, (new_states if self.recurrent_blocks else None)


# rain layers are small (std ~0.1); a unit-variance first guess stalls training
HEAD_INIT_SCALE = 0.1


class Decoder(Module):
    """Nearest x2 upsample + 3x3 conv to C_s/2, optional skip injection, RB; linear 3-channel head.

    With ``skips`` the decoder owns 1x1 projections C_s -> C_s/2 that add the
    (gated) encoder features; otherwise it is the skip-free autoencoder decoder.
    All other weight shapes are identical in both modes.
    """

    def __init__(self, channels: Sequence[int], rng, skips: bool = False, out_channels: int = 3,
                 dtype=np.float32):
        channels = list(channels)
        self.channels = channels
        self.up: List[Conv] = []
        self.blocks: List[ResidualBlock] = []
        prev = channels[-1]
        for s in range(len(channels) - 2, -1, -1):
            width = channels[s] // 2
            self.up.append(Conv(prev, width, 3, rng, dtype=dtype))
            self.blocks.append(ResidualBlock(width, rng, dtype=dtype))
            prev = width
        self.head = Conv(prev, out_channels, 3, rng, dtype=dtype)
        self.head.w.data *= HEAD_INIT_SCALE
        self.proj: List[Conv] = []
        if skips:
            for s in range(len(channels) - 2, -1, -1):
                self.proj.append(Conv(channels[s], channels[s] // 2, 1, rng, dtype=dtype))

    @property
    def has_skips(self) -> bool:
        return bool(self.proj)

    def __call__(self, z: Tensor, feats: Optional[Sequence[Tensor]] = None, gams: Optional[Sequence] = None):
        """Decode ``z``.

        ``feats`` are encoder features F_1..F_{S-1}; with ``gams`` (one Mask-GAM
        per scale, same order) they are re-weighted first.  Returns the rain
        layer and the attention maps ordered from scale 1 upward.
        """
        n_skip = len(self.channels) - 1
        if feats is not None and len(feats) != n_skip:
            raise ValueError(f"decoder needs {n_skip} skip features, got {len(feats)}")
        if feats is not None and not self.has_skips:
            raise ValueError("skip features given to a skip-free decoder")
        maps = []
        x = z
        for k in range(n_skip):
            s = n_skip - 1 - k
            f_dec = T.relu(self.up[k](T.upsample_nearest2x(x)))
            if feats is not None:
                f = feats[s]
                if gams is not None:
                    f, m = gams[s](f, f_dec)
                    maps.append(m)
                f_dec = T.add(f_dec, self.proj[k](f))
            x = self.blocks[k](f_dec)
        return self.head(x), maps[::-1]
