"""Attentive-recurrent network: residual features, conv LSTM and attention head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F


class RecurrentState(NamedTuple):
    hidden: torch.Tensor
    cell: torch.Tensor


class Gates(NamedTuple):
    input: torch.Tensor
    forget: torch.Tensor
    output: torch.Tensor
    candidate: torch.Tensor
    state: RecurrentState


@dataclass
class AttentionRollout:
    maps: list[torch.Tensor]
    final_state: RecurrentState

    @property
    def final(self) -> torch.Tensor:
        return self.maps[-1]


def conv3x3(in_channels, out_channels, bias=True):
    return nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=bias)


class ResidualBlock(nn.Module):
    """relu(x + conv2(relu(conv1(x))))"""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = conv3x3(channels, channels)
        self.conv2 = conv3x3(channels, channels)

    def forward(self, x):
        return F.relu(x + self.conv2(F.relu(self.conv1(x))))


class ResidualFeatures(nn.Module):
    """Lift image+attention (4 channels) to ``channels`` and run five residual blocks."""

    def __init__(self, channels=32, in_channels=4, num_blocks=5):
        super().__init__()
        self.in_channels = in_channels
        self.stem = conv3x3(in_channels, channels)
        self.blocks = nn.Sequential(*[ResidualBlock(channels) for _ in range(num_blocks)])

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        return self.blocks(F.relu(self.stem(x)))


class ConvLSTMCell(nn.Module):
    """Convolutional LSTM with Hadamard peephole terms on the cell state.

    ``peephole="pixel"`` gives the peephole weights one value per channel and
    pixel, which ties the cell to ``size``; ``"channel"`` shares them spatially.
    """

    def __init__(self, in_channels, hidden_channels, size=None, kernel_size=3, peephole="pixel"):
        super().__init__()
        if peephole == "pixel" and size is None:
            raise ValueError("pixel peepholes need the spatial size")
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        pad = kernel_size // 2
        # gate order along the output channels: input, forget, candidate, output
        self.conv_x = nn.Conv2d(in_channels, 4 * hidden_channels, kernel_size, padding=pad, bias=True)
        self.conv_h = nn.Conv2d(hidden_channels, 4 * hidden_channels, kernel_size, padding=pad, bias=False)
        shape = (hidden_channels, *size) if peephole == "pixel" else (hidden_channels, 1, 1)
        self.w_ci = nn.Parameter(torch.zeros(shape))
        self.w_cf = nn.Parameter(torch.zeros(shape))
        self.w_co = nn.Parameter(torch.zeros(shape))

    def init_state(self, x):
        b, _, h, w = x.shape
        zeros = x.new_zeros(b, self.hidden_channels, h, w)
        return RecurrentState(zeros, zeros.clone())

    def gates(self, x, state):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} feature channels, got {x.shape[1]}")
        h_prev, c_prev = state
        if h_prev.shape != c_prev.shape or h_prev.shape[1] != self.hidden_channels or h_prev.shape[2:] != x.shape[2:]:
            raise ValueError(f"state shape {tuple(h_prev.shape)} does not match input {tuple(x.shape)}")
        zx_i, zx_f, zx_c, zx_o = (self.conv_x(x) + self.conv_h(h_prev)).chunk(4, dim=1)
        i = torch.sigmoid(zx_i + self.w_ci * c_prev)
        f = torch.sigmoid(zx_f + self.w_cf * c_prev)
        g = torch.tanh(zx_c)
        c = f * c_prev + i * g
        o = torch.sigmoid(zx_o + self.w_co * c)
        h = o * torch.tanh(c)
        return Gates(i, f, o, g, RecurrentState(h, c))

    def forward(self, x, state=None):
        if state is None:
            state = self.init_state(x)
        return self.gates(x, state).state


class AttentionHead(nn.Module):
    def __init__(self, channels=32):
        super().__init__()
        self.conv1 = conv3x3(channels, channels)
        self.conv2 = conv3x3(channels, 1)

    def forward(self, h):
        return torch.sigmoid(self.conv2(F.relu(self.conv1(h))))


class RecurrentBlock(nn.Module):
    def __init__(self, feat_channels, lstm_channels, size, peephole):
        super().__init__()
        self.features = ResidualFeatures(feat_channels)
        self.lstm = ConvLSTMCell(feat_channels, lstm_channels, size, peephole=peephole)
        self.head = AttentionHead(lstm_channels)


class AttentiveRecurrentNet(nn.Module):
    """Produces ``steps`` attention maps, each fed back alongside the image.

    With ``share_weights=False`` every time step gets its own block.
    """

    def __init__(
        self,
        size,
        feat_channels=32,
        lstm_channels=32,
        steps=4,
        share_weights=True,
        peephole="pixel",
        initial_value=0.5,
    ):
        super().__init__()
        if steps < 1:
            raise ValueError("steps must be >= 1")
        self.size = tuple(size)
        self.steps = steps
        self.share_weights = share_weights
        self.initial_value = initial_value
        n_blocks = 1 if share_weights else steps
        self.blocks = nn.ModuleList(
            [RecurrentBlock(feat_channels, lstm_channels, self.size, peephole) for _ in range(n_blocks)]
        )

    def block(self, t):
        return self.blocks[0 if self.share_weights else t]

    def forward(self, image, steps=None):
        return self.rollout(image, steps)

    def rollout(self, image, steps=None):
        steps = self.steps if steps is None else steps
        if steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.share_weights and steps > len(self.blocks):
            raise ValueError(f"unshared network has only {len(self.blocks)} step blocks")
        b, _, h, w = image.shape
        attention = image.new_full((b, 1, h, w), self.initial_value)
        state = None
        maps = []
        for t in range(steps):
            blk = self.block(t)
            feats = blk.features(torch.cat([image, attention], dim=1))
            if state is None:
                state = blk.lstm.init_state(feats)
            state = blk.lstm(feats, state)
            attention = blk.head(state.hidden)
            maps.append(attention)
        return AttentionRollout(maps, state)


def attention_loss(maps, mask, theta=0.8):
    """Sum over steps of ``theta**(N - t) * MSE(A_t, M)``; later steps weigh more."""
    if isinstance(maps, AttentionRollout):
        maps = maps.maps
    n = len(maps)
    total = 0.0
    for t, a in enumerate(maps, start=1):
        total = total + theta ** (n - t) * F.mse_loss(a, mask.expand_as(a))
    return total
