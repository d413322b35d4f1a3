"""Neural building blocks: prenet, CBHG, postnet and reference encoder.

Sequence tensors are batch x frames x channels. Every block accepts optional
``lengths`` and keeps padded frames at zero after each convolution, so a
padded batch gives the same per-item result as running items one by one.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
from torch import Tensor, nn
from torch.nn import functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence


class ShapeError(ValueError):
    pass


@dataclass
class LayerSpec:
    """Widths and depths of every block. Defaults follow the full-size model."""

    n_mels: int = 80
    bn_dim: int = 256
    prenet_sizes: tuple[int, ...] = (80, 256)
    prenet_dropout: float = 0.5
    bank_size: int = 8
    bank_channels: int = 128
    proj_channels: int = 256
    highway_layers: int = 4
    highway_width: int = 128
    gru_hidden: int = 128
    postnet_channels: int = 256
    postnet_layers: int = 4
    postnet_kernel: int = 3
    ref_channels: tuple[int, ...] = (32, 32, 64, 64, 128, 128)
    ref_gru: int = 128
    classifier_hidden: int = 256
    decoder_rnn: int = 256

    def __post_init__(self):
        self.prenet_sizes = tuple(self.prenet_sizes)
        self.ref_channels = tuple(self.ref_channels)
        for f in fields(self):
            v = getattr(self, f.name)
            vals = v if isinstance(v, tuple) else (v,)
            if f.name == "prenet_dropout":
                if not 0.0 <= v < 1.0:
                    raise ValueError("prenet_dropout must lie in [0, 1)")
            elif any(x <= 0 for x in vals):
                raise ValueError(f"LayerSpec.{f.name} must be positive, got {v}")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)

    @classmethod
    def desk(cls, **overrides) -> "LayerSpec":
        """Reduced widths for single-core CPU training on the synthetic corpus."""
        base = dict(bn_dim=64, prenet_sizes=(80, 128), prenet_dropout=0.1, bank_size=8,
                    bank_channels=32, proj_channels=128, highway_layers=4, highway_width=64,
                    gru_hidden=64, postnet_channels=64, ref_channels=(16, 16, 32, 32, 64, 64),
                    ref_gru=64, classifier_hidden=64, decoder_rnn=128)
        base.update(overrides)
        return cls(**base)


def length_mask(lengths: Tensor | None, batch: int, frames: int, device=None) -> Tensor:
    """batch x frames x 1 float mask (all ones when ``lengths`` is None)."""
    if lengths is None:
        return torch.ones(batch, frames, 1, device=device)
    steps = torch.arange(frames, device=lengths.device)[None, :]
    return (steps < lengths[:, None]).unsqueeze(-1).float()


def _check(x: Tensor, width: int, what: str):
    if x.dim() != 3:
        raise ShapeError(f"{what}: expected batch x frames x {width}, got {tuple(x.shape)}")
    if x.shape[-1] != width:
        raise ShapeError(f"{what}: expected {width} input channels, got {x.shape[-1]}")
    if x.shape[1] == 0:
        raise ShapeError(f"{what}: empty sequence")


def init_uniform_fan_in(module: nn.Module):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight; zero biases."""
    for name, p in module.named_parameters():
        if p.dim() >= 2:
            fan_in = p.shape[1] * math.prod(p.shape[2:])
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(p, -bound, bound)
        else:
            nn.init.zeros_(p)


class Prenet(nn.Module):
    def __init__(self, in_dim: int, sizes=(80, 256), dropout: float = 0.5):
        super().__init__()
        self.in_dim = in_dim
        dims = [in_dim, *sizes]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.dropout = dropout
        self.out_dim = dims[-1]

    def forward(self, x: Tensor) -> Tensor:
        _check(x, self.in_dim, "prenet")
        for layer in self.layers:
            x = F.dropout(F.relu(layer(x)), self.dropout, self.training)
        return x


class MaskedConv1d(nn.Conv1d):
    """'Same'-padded 1-D convolution over batch x frames x channels."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int):
        super().__init__(in_ch, out_ch, kernel, padding="same")

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        return super().forward(x.transpose(1, 2)).transpose(1, 2) * mask


class Highway(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.H = nn.Linear(width, width)
        self.T = nn.Linear(width, width)

    def forward(self, x: Tensor) -> Tensor:
        gate = torch.sigmoid(self.T(x))
        return gate * F.relu(self.H(x)) + (1.0 - gate) * x


def run_gru(gru: nn.GRU, x: Tensor, lengths: Tensor | None) -> tuple[Tensor, Tensor]:
    if lengths is None:
        return gru(x)
    packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
    out, h = gru(packed)
    out, _ = pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
    return out, h


class CBHG(nn.Module):
    """Conv bank (kernels 1..K) -> max-pool -> projections + residual ->
    highway stack -> bidirectional GRU. Output width is ``2 * gru_hidden``."""

    def __init__(self, in_dim: int, spec: LayerSpec):
        super().__init__()
        self.in_dim = in_dim
        self.bank = nn.ModuleList(MaskedConv1d(in_dim, spec.bank_channels, k)
                                  for k in range(1, spec.bank_size + 1))
        self.projections = nn.ModuleList([
            MaskedConv1d(spec.bank_size * spec.bank_channels, spec.proj_channels, 3),
            MaskedConv1d(spec.proj_channels, in_dim, 3),
        ])
        self.pre_highway = nn.Linear(in_dim, spec.highway_width) if in_dim != spec.highway_width else None
        self.highway = nn.ModuleList(Highway(spec.highway_width) for _ in range(spec.highway_layers))
        self.bigru = nn.GRU(spec.highway_width, spec.gru_hidden, batch_first=True, bidirectional=True)
        self.out_dim = 2 * spec.gru_hidden

    def forward(self, x: Tensor, lengths: Tensor | None = None) -> Tensor:
        _check(x, self.in_dim, "cbhg")
        mask = length_mask(lengths, x.shape[0], x.shape[1], x.device).to(x.dtype)
        x = x * mask
        y = torch.cat([F.relu(conv(x, mask)) for conv in self.bank], dim=-1)
        # max-pool width 2, stride 1, right-padded to keep the frame count
        y = F.max_pool1d(F.pad(y.transpose(1, 2), (0, 1), value=-1e4), 2, 1).transpose(1, 2) * mask
        y = F.relu(self.projections[0](y, mask))
        y = self.projections[1](y, mask) + x
        if self.pre_highway is not None:
            y = self.pre_highway(y)
        for layer in self.highway:
            y = layer(y)
        out, _ = run_gru(self.bigru, y, lengths)
        return out * mask


class Postnet(nn.Module):
    """Residual refiner: ``layers`` tanh convolutions then an affine map back to mel width."""

    def __init__(self, spec: LayerSpec):
        super().__init__()
        self.n_mels = spec.n_mels
        chans = [spec.n_mels] + [spec.postnet_channels] * spec.postnet_layers
        self.convs = nn.ModuleList(MaskedConv1d(a, b, spec.postnet_kernel)
                                   for a, b in zip(chans[:-1], chans[1:]))
        self.proj = nn.Linear(spec.postnet_channels, spec.n_mels)

    def forward(self, mel: Tensor, lengths: Tensor | None = None) -> Tensor:
        _check(mel, self.n_mels, "postnet")
        mask = length_mask(lengths, mel.shape[0], mel.shape[1], mel.device).to(mel.dtype)
        y = mel * mask
        for conv in self.convs:
            y = torch.tanh(conv(y, mask))
        return self.proj(y) * mask


class ReferenceEncoder(nn.Module):
    """Strided 2-D conv stack over the frames x features map, read out by a GRU.

    The final GRU state is the fixed-size embedding regardless of input length.
    """

    def __init__(self, in_dim: int, spec: LayerSpec):
        super().__init__()
        self.in_dim = in_dim
        chans = (1, *spec.ref_channels)
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, stride=2, padding=1)
                                   for a, b in zip(chans[:-1], chans[1:]))
        width = in_dim
        for _ in spec.ref_channels:
            width = (width + 1) // 2
        self.gru = nn.GRU(spec.ref_channels[-1] * width, spec.ref_gru, batch_first=True)
        self.out_dim = spec.ref_gru

    def forward(self, x: Tensor, lengths: Tensor | None = None) -> Tensor:
        _check(x, self.in_dim, "reference encoder")
        y = x.unsqueeze(1)
        lens = lengths
        for conv in self.convs:
            y = F.relu(conv(y))
            if lens is not None:
                lens = (lens + 1) // 2
                steps = torch.arange(y.shape[2], device=y.device)
                y = y * (steps[None, :] < lens[:, None]).to(y.dtype)[:, None, :, None]
        b, c, t, f = y.shape
        y = y.permute(0, 2, 1, 3).reshape(b, t, c * f)
        _, h = run_gru(self.gru, y, lens)
        return h[-1]
