"""Attentive discriminator and its losses."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .autoencoder import check_finite

DEFAULT_GAMMA = 0.05
DEFAULT_WIDTHS = (8, 16, 32, 64, 64, 64, 32)
DEFAULT_STRIDES = (2, 2, 1, 2, 1, 1, 1)


@dataclass
class DiscriminatorOutput:
    logit: torch.Tensor
    dmap: torch.Tensor | None

    @property
    def probability(self):
        return torch.sigmoid(self.logit)


class AttentiveDiscriminator(nn.Module):
    """Seven 3x3 conv layers, FC hidden layer and a single logit.

    When ``attentive``, a two-conv branch turns the output of layer ``tap``
    (1-based) into a sigmoid map that multiplies that layer's features before
    they feed the next layer.
    """

    def __init__(
        self,
        image_size=(64, 64),
        widths=DEFAULT_WIDTHS,
        strides=DEFAULT_STRIDES,
        fc_features=1024,
        attentive=True,
        tap=5,
        negative_slope=0.2,
    ):
        super().__init__()
        if len(widths) != len(strides):
            raise ValueError("widths and strides must have equal length")
        if not 1 <= tap < len(widths):
            raise ValueError(f"tap must lie in [1, {len(widths) - 1}], got {tap}")
        self.image_size = tuple(image_size)
        self.attentive = attentive
        self.tap = tap
        self.negative_slope = negative_slope
        convs = []
        in_ch = 3
        h, w = self.image_size
        for out_ch, s in zip(widths, strides):
            convs.append(nn.Conv2d(in_ch, out_ch, 3, stride=s, padding=1))
            in_ch = out_ch
            h, w = (h - 1) // s + 1, (w - 1) // s + 1
        self.convs = nn.ModuleList(convs)
        tap_ch = widths[tap - 1]
        if attentive:
            self.map_conv1 = nn.Conv2d(tap_ch, tap_ch, 3, padding=1)
            self.map_conv2 = nn.Conv2d(tap_ch, 1, 3, padding=1)
        self.fc = nn.Linear(in_ch * h * w, fc_features)
        self.out = nn.Linear(fc_features, 1)

    def attention_map(self, feats):
        return torch.sigmoid(self.map_conv2(F.leaky_relu(self.map_conv1(feats), self.negative_slope)))

    def forward(self, image, dmap_override=None):
        if tuple(image.shape[-2:]) != self.image_size:
            raise ValueError(f"discriminator expects {self.image_size} inputs, got {tuple(image.shape[-2:])}")
        x = image
        dmap = None
        for idx, conv in enumerate(self.convs, start=1):
            x = F.leaky_relu(conv(x), self.negative_slope)
            if idx == self.tap and (self.attentive or dmap_override is not None):
                dmap = self.attention_map(x) if dmap_override is None else dmap_override
                x = x * dmap
        x = F.leaky_relu(self.fc(x.flatten(1)), self.negative_slope)
        return DiscriminatorOutput(self.out(x).squeeze(1), dmap)


def upsample_map(dmap, size):
    if tuple(dmap.shape[-2:]) == tuple(size):
        return dmap
    return F.interpolate(dmap, size=size, mode="bilinear", align_corners=False)


def map_loss(fake, real, attention):
    """MSE(D_map(fake), A) + MSE(D_map(real), 0), maps upsampled to ``attention``."""
    size = attention.shape[-2:]
    fake_map = upsample_map(fake.dmap, size)
    real_map = upsample_map(real.dmap, size)
    return F.mse_loss(fake_map, attention.expand_as(fake_map)) + real_map.pow(2).mean()


def discriminator_loss(fake, real, attention=None, gamma=DEFAULT_GAMMA):
    """``-log D(R) - log(1 - D(O)) + gamma * map_loss`` in log-sigmoid form.

    Pass ``attention=None`` (or a non-attentive discriminator's outputs) to drop
    the map term.
    """
    adv = F.softplus(-real.logit).mean() + F.softplus(fake.logit).mean()
    if attention is None or fake.dmap is None:
        check_finite(l_d=adv)
        return adv
    lmap = map_loss(fake, real, attention)
    check_finite(l_d=adv, l_map=lmap)
    return adv + gamma * lmap
