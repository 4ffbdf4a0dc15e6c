"""Spatial, temporal and combined (SST / PST) gating modules.

All modules take and return tensors laid out as (batch, channels, frames,
height, width). ``forward`` returns the attended tensor; ``attend`` also
returns the gates that produced it.
"""

from __future__ import annotations

import torch
from torch import nn

ATTENTION_TAGS = ("none", "spatial", "temporal", "sst", "pst")
ATTENTION_POSITIONS = ("input", "conv1")


class SpatialAttention(nn.Module):
    """Channel max/mean descriptor -> 3x3x3 conv -> sigmoid gate per voxel."""

    def __init__(self, kernel_size: int = 3):
        super().__init__()
        self.conv = nn.Conv3d(2, 1, kernel_size, padding=kernel_size // 2)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        descriptor = torch.cat(
            [x.amax(dim=1, keepdim=True), x.mean(dim=1, keepdim=True)], dim=1
        )
        return torch.sigmoid(self.conv(descriptor))

    def attend(self, x):
        f_s = self.gate(x)
        return x * f_s, {"spatial": f_s}

    def forward(self, x):
        return self.attend(x)[0]


class TemporalAttention(nn.Module):
    """Per-frame pooled descriptor -> 2-layer LSTM -> per-step dense(1) -> sigmoid."""

    def __init__(self, in_channels: int = 3, hidden: int = 128, layers: int = 2):
        super().__init__()
        self.lstm = nn.LSTM(in_channels, hidden, num_layers=layers, batch_first=True)
        self.dense = nn.Linear(hidden, 1)

    def descriptors(self, x: torch.Tensor) -> torch.Tensor:
        # (N, C, D, H, W) -> (N, D, C)
        return x.mean(dim=(3, 4)).transpose(1, 2)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        seq, _ = self.lstm(self.descriptors(x))
        return torch.sigmoid(self.dense(seq))  # (N, D, 1)

    @staticmethod
    def broadcast(f_t: torch.Tensor) -> torch.Tensor:
        return f_t[:, None, :, :, None]  # (N, 1, D, 1, 1)

    def attend(self, x):
        f_t = self.gate(x)
        return x * self.broadcast(f_t), {"temporal": f_t}

    def forward(self, x):
        return self.attend(x)[0]


class SSTAttention(nn.Module):
    """Spatial gate first; the temporal gate is computed from the spatially attended clip."""

    def __init__(self, in_channels: int = 3):
        super().__init__()
        self.spatial = SpatialAttention()
        self.temporal = TemporalAttention(in_channels)

    def attend(self, x):
        x_s, maps = self.spatial.attend(x)
        f_t = self.temporal.gate(x_s)
        return x_s * TemporalAttention.broadcast(f_t), {**maps, "temporal": f_t}

    def forward(self, x):
        return self.attend(x)[0]


class PSTAttention(nn.Module):
    """Both gates computed from the raw clip.

    Default output is ``I * F_s * F_t``. With ``literal_product`` the two attended
    clips are multiplied, ``(I * F_s) * (I * F_t)``, which applies the input twice.
    """

    def __init__(self, in_channels: int = 3, literal_product: bool = False):
        super().__init__()
        self.spatial = SpatialAttention()
        self.temporal = TemporalAttention(in_channels)
        self.literal_product = literal_product

    def attend(self, x):
        f_s = self.spatial.gate(x)
        f_t = self.temporal.gate(x)
        ft = TemporalAttention.broadcast(f_t)
        if self.literal_product:
            out = (x * f_s) * (x * ft)
        else:
            out = x * f_s * ft
        return out, {"spatial": f_s, "temporal": f_t}

    def forward(self, x):
        return self.attend(x)[0]


class NoAttention(nn.Module):
    def attend(self, x):
        return x, {}

    def forward(self, x):
        return x


def make_attention(tag: str, in_channels: int = 3, literal_product: bool = False) -> nn.Module:
    if tag == "none":
        return NoAttention()
    if tag == "spatial":
        return SpatialAttention()
    if tag == "temporal":
        return TemporalAttention(in_channels)
    if tag == "sst":
        return SSTAttention(in_channels)
    if tag == "pst":
        return PSTAttention(in_channels, literal_product=literal_product)
    raise ValueError(f"unknown attention tag {tag!r}; expected one of {ATTENTION_TAGS}")


# Clip-level helpers on channels-last arrays, mirroring FrameClip's layout.

def to_batch(pixels) -> torch.Tensor:
    """(D, H, W, C) or (N, D, H, W, C) array -> (N, C, D, H, W) tensor."""
    t = torch.as_tensor(pixels)
    if t.ndim == 4:
        t = t.unsqueeze(0)
    if t.ndim != 5:
        raise ValueError(f"expected a rank-4 clip or rank-5 batch, got shape {tuple(t.shape)}")
    return t.permute(0, 4, 1, 2, 3).contiguous()


def from_batch(x: torch.Tensor):
    """(N, C, D, H, W) tensor -> (N, D, H, W, C) numpy array."""
    return x.detach().permute(0, 2, 3, 4, 1).cpu().numpy()


def _apply(module: nn.Module, clip):
    pixels = getattr(clip, "pixels", clip)
    x = to_batch(pixels).to(next(module.parameters()).dtype)
    with torch.no_grad():
        out, maps = module.attend(x)
    return out, maps


def spatial_attention(clip, module: SpatialAttention):
    """Returns (F_s as (frames, H, W, 1), I_s as (frames, H, W, C))."""
    out, maps = _apply(module, clip)
    return from_batch(maps["spatial"])[0], from_batch(out)[0]


def temporal_attention(clip, module: TemporalAttention):
    """Returns (F_t as (frames, 1), I_t as (frames, H, W, C))."""
    out, maps = _apply(module, clip)
    return maps["temporal"][0].numpy(), from_batch(out)[0]


def sst_attention(clip, module: SSTAttention):
    return from_batch(_apply(module, clip)[0])[0]


def pst_attention(clip, module: PSTAttention):
    return from_batch(_apply(module, clip)[0])[0]
