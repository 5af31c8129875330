"""Contextual autoencoder with multi-scale image heads, plus generator-side losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_LAMBDAS = (0.6, 0.8, 1.0)
DEFAULT_GAN_WEIGHT = 1e-2


class NonFiniteLossError(FloatingPointError):
    """A loss term came out NaN or infinite."""


@dataclass
class MultiScaleOutputs:
    """Decoder image heads, ordered by ascending scale (1/4, 1/2, 1).

    Images are the raw head outputs; only the full-resolution generator output
    is clamped.
    """

    scales: tuple[float, ...]
    images: list[torch.Tensor]

    def __iter__(self):
        return iter(zip(self.scales, self.images))

    def __len__(self):
        return len(self.images)


def conv_relu(in_channels, out_channels, stride=1):
    return nn.Sequential(nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1), nn.ReLU())


class ContextualAutoencoder(nn.Module):
    """Sixteen conv-relu blocks: eight encoder blocks with two stride-2 reductions,
    eight decoder blocks with two nearest-neighbour upsamplings.

    For k in ``skip_from`` the output of encoder block k joins the output of
    decoder block 17-k (added, or concatenated with ``skip="concat"``). 1x1 image
    heads read decoder blocks 12, 14 and 16 (scales 1/4, 1/2, 1).
    """

    scales = (0.25, 0.5, 1.0)
    head_blocks = (12, 14, 16)

    def __init__(self, in_channels=4, width=32, widths=None, skip="add", skip_from=(1, 3, 5), out_bias=0.5):
        super().__init__()
        if skip not in ("add", "concat"):
            raise ValueError(f"skip must be 'add' or 'concat', got {skip!r}")
        c1, c2, c4 = widths if widths is not None else (width, 2 * width, 4 * width)
        self.skip = skip
        self.skip_from = tuple(skip_from)
        # (out channels, stride) per encoder block 1..8
        enc = [(c1, 1), (c1, 1), (c2, 2), (c2, 1), (c4, 2), (c4, 1), (c4, 1), (c4, 1)]
        # out channels per decoder block 9..16; blocks 13 and 15 start after an upsampling
        dec = [c4, c4, c4, c4, c2, c2, c1, c1]
        self.encoder = nn.ModuleList()
        ch = in_channels
        for out, stride in enc:
            self.encoder.append(conv_relu(ch, out, stride))
            ch = out
        self.decoder = nn.ModuleList()
        self.heads = nn.ModuleList()
        for j, out in enumerate(dec, start=9):
            self.decoder.append(conv_relu(ch, out))
            ch = out
            k = 17 - j
            if k in self.skip_from:
                enc_out = enc[k - 1][0]
                if skip == "add" and enc_out != out:
                    raise ValueError(f"additive skip {k}->{j} joins {enc_out} and {out} channels")
                if skip == "concat":
                    ch += enc_out
            if j in self.head_blocks:
                head = nn.Conv2d(ch, 3, 1)
                nn.init.constant_(head.bias, out_bias)
                self.heads.append(head)

    def forward(self, image, attention):
        return self.generate(image, attention)

    def generate(self, image, attention):
        if image.shape[-2:] != attention.shape[-2:] or image.shape[0] != attention.shape[0]:
            raise ValueError(f"image {tuple(image.shape)} and attention {tuple(attention.shape)} are misaligned")
        h, w = image.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"spatial size {h}x{w} must be divisible by 4")
        x = torch.cat([image, attention], dim=1)
        feats = []
        for block in self.encoder:
            x = block(x)
            feats.append(x)

        images = []
        for j, block in enumerate(self.decoder, start=9):
            if j in (13, 15):
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(x)
            k = 17 - j
            if k in self.skip_from:
                x = x + feats[k - 1] if self.skip == "add" else torch.cat([x, feats[k - 1]], dim=1)
            if j in self.head_blocks:
                images.append(self.heads[len(images)](x))
        output = images[-1].clamp(0.0, 1.0)
        return output, MultiScaleOutputs(self.scales, images)


def downscale(image, size):
    """Area-average ``image`` (N, C, H, W) to ``size``."""
    return F.adaptive_avg_pool2d(image, size)


def multiscale_loss(scales, ground_truth, lambdas=DEFAULT_LAMBDAS):
    """Weighted sum of per-scale MSEs against the area-downscaled ground truth."""
    if len(lambdas) != len(scales):
        raise ValueError(f"{len(lambdas)} weights for {len(scales)} scales")
    total = 0.0
    for lam, (_, image) in zip(lambdas, scales):
        target = downscale(ground_truth, image.shape[-2:])
        total = total + lam * F.mse_loss(image, target)
    return total


class RandomFeatureExtractor(nn.Module):
    """Fixed, seeded random conv stack used as a stand-in perceptual network.

    Weights never train. ``layer`` picks how many conv-relu stages to run.
    """

    def __init__(self, widths=(16, 32, 32), seed=1234, layer=None):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        in_ch = 3
        for i, out_ch in enumerate(widths):
            conv = nn.Conv2d(in_ch, out_ch, 3, stride=2 if i else 1, padding=1)
            bound = math.sqrt(6.0 / (in_ch * 9))
            with torch.no_grad():
                conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen) * 2 * bound - bound)
                conv.bias.zero_()
            layers += [conv, nn.ReLU()]
            in_ch = out_ch
        self.layers = nn.Sequential(*layers)
        self.layer = len(widths) if layer is None else layer
        self.requires_grad_(False)

    def forward(self, x):
        return self.layers[: 2 * self.layer](x)


class IdentityExtractor(nn.Module):
    def forward(self, x):
        return x


class VGGExtractor(nn.Module):
    """torchvision VGG16 features up to a named ReLU, ImageNet-normalised input.

    ``weights`` is passed to ``torchvision.models.vgg16`` (e.g. ``"DEFAULT"`` for
    pretrained ImageNet weights, which are downloaded on first use).
    """

    LAYERS = {"relu1_2": 4, "relu2_2": 9, "relu3_3": 16, "relu4_3": 23, "relu5_3": 30}

    def __init__(self, layer="relu2_2", weights=None):
        super().__init__()
        from torchvision.models import vgg16

        if layer not in self.LAYERS:
            raise ValueError(f"unknown layer {layer!r}; choose from {sorted(self.LAYERS)}")
        self.features = vgg16(weights=weights).features[: self.LAYERS[layer]]
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        return self.features((x - self.mean) / self.std)


def perceptual_loss(output, ground_truth, extractor):
    return F.mse_loss(extractor(output), extractor(ground_truth))


def gan_term(fake_logit):
    """Mean of ``log(1 - sigmoid(z))`` computed as ``-softplus(z)``."""
    return -F.softplus(fake_logit).mean()


def check_finite(**terms):
    values = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in terms.items()}
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise NonFiniteLossError(f"non-finite loss terms: {bad}")


def generator_loss(gan, att, ms, perc, gan_weight=DEFAULT_GAN_WEIGHT):
    """``gan_weight * gan + att + ms + perc``; absent terms may be passed as 0."""
    check_finite(l_gan=gan, l_att=att, l_m=ms, l_p=perc)
    return gan_weight * gan + att + ms + perc
