"""PSNR, SSIM, attention/mask alignment and ablation tables."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

PSNR_CAP = 99.0
VARIANTS = ("A", "A+D", "A+AD", "AA+AD")

# Reference (PSNR dB, SSIM) per ablation variant as published on real photographs.
# Annotation only: never reproducible with desk-scale synthetic data.
REFERENCE_SCORES = {
    "A": (29.25, 0.7853),
    "A+D": (30.88, 0.8670),
    "A+AD": (30.60, 0.8710),
    "AA+AD": (31.57, 0.9023),
}

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_array(x):
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(x, y, peak=1.0):
    """PSNR in dB over all pixels and channels; identical inputs give ``PSNR_CAP``."""
    x, y = _as_array(x), _as_array(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable Gaussian, keeping only positions where the window fits
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    pad = (len(g) - 1) // 2
    return out[pad : img.shape[0] - pad, pad : img.shape[1] - pad]


def ssim(x, y, peak=1.0):
    """Mean SSIM, Gaussian 11x11 window (sigma 1.5), per channel then averaged.

    Accepts ``(H, W)`` or ``(H, W, C)`` arrays. Only window positions fully
    inside the image contribute.
    """
    x, y = _as_array(x), _as_array(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape[:2]}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    g = gaussian_window()
    scores = []
    for ch in range(x.shape[2]):
        a, b = x[..., ch], y[..., ch]
        mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
        var_a = _filter_valid(a * a, g) - mu_a**2
        var_b = _filter_valid(b * b, g) - mu_b**2
        cov = _filter_valid(a * b, g) - mu_a * mu_b
        smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
        scores.append(smap.mean())
    return float(np.mean(scores))


def iou(pred, target):
    pred, target = np.asarray(pred, dtype=bool), np.asarray(target, dtype=bool)
    union = np.logical_or(pred, target).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, target).sum() / union)


def attention_alignment(maps, mask, threshold=0.5):
    """IoU between ``A_t >= threshold`` and the mask, one value per time step."""
    if hasattr(maps, "maps"):
        maps = maps.maps
    target = _as_array(mask) > 0.5
    out = []
    for a in maps:
        a = _as_array(a)
        out.append(iou(a.reshape(target.shape) >= threshold, target))
    return out


def attention_contrast(attention, mask):
    """Mean attention inside the mask minus mean attention outside it."""
    a = _as_array(attention)
    m = _as_array(mask).reshape(a.shape) > 0.5
    if not m.any() or m.all():
        raise ValueError("mask must contain both raindrop and background pixels")
    return float(a[m].mean() - a[~m].mean())


@dataclass
class EvalReport:
    variant: str
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    ids: list[str] = field(default_factory=list)
    attention_iou: list[float] | None = None

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def to_dict(self):
        d = asdict(self)
        d["mean_psnr"] = self.mean_psnr
        d["mean_ssim"] = self.mean_ssim
        return d


def evaluate_outputs(variant, outputs, targets, ids=None, attention_iou=None):
    """Score restored images against ground truth."""
    if len(outputs) != len(targets):
        raise ValueError(f"{len(outputs)} outputs for {len(targets)} targets")
    report = EvalReport(variant, ids=list(ids) if ids is not None else [str(i) for i in range(len(outputs))])
    for out, gt in zip(outputs, targets):
        report.psnr.append(psnr(out, gt))
        report.ssim.append(ssim(out, gt))
    report.attention_iou = attention_iou
    return report


@dataclass
class AblationTable:
    rows: dict[str, EvalReport | None]
    header: dict = field(default_factory=dict)

    def records(self):
        recs = []
        for variant in VARIANTS:
            rep = self.rows.get(variant)
            ref_psnr, ref_ssim = REFERENCE_SCORES[variant]
            recs.append(
                {
                    "variant": variant,
                    "present": rep is not None,
                    "psnr": rep.mean_psnr if rep is not None else None,
                    "ssim": rep.mean_ssim if rep is not None else None,
                    "n_images": len(rep.psnr) if rep is not None else 0,
                    "reference_psnr": ref_psnr,
                    "reference_ssim": ref_ssim,
                }
            )
        return recs

    def to_json(self):
        return json.dumps(
            {"header": self.header, "metric": {"psnr": "RGB joint, peak 1.0", "ssim": "gaussian 11x11 sigma 1.5, per channel"}, "rows": self.records()},
            indent=2,
        )

    def to_csv(self):
        buf = io.StringIO()
        fields = ["variant", "present", "psnr", "ssim", "n_images", "reference_psnr", "reference_ssim"]
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for rec in self.records():
            writer.writerow({k: "" if v is None else v for k, v in rec.items()})
        return buf.getvalue()

    def to_text(self):
        lines = [f"# {k}: {v}" for k, v in self.header.items()]
        lines.append(f"{'variant':<8}{'PSNR':>10}{'SSIM':>10}{'n':>5}   reference (published)")
        for rec in self.records():
            ref = f"{rec['reference_psnr']:.2f} / {rec['reference_ssim']:.4f}"
            if rec["present"]:
                lines.append(f"{rec['variant']:<8}{rec['psnr']:>10.2f}{rec['ssim']:>10.4f}{rec['n_images']:>5}   {ref}")
            else:
                lines.append(f"{rec['variant']:<8}{'absent':>10}{'':>10}{'':>5}   {ref}")
        return "\n".join(lines) + "\n"


def ablation_report(reports, header=None):
    """Assemble a four-row table from ``{variant: EvalReport}``; missing variants are absent rows."""
    unknown = set(reports) - set(VARIANTS)
    if unknown:
        raise ValueError(f"unknown variants: {sorted(unknown)}")
    return AblationTable({v: reports.get(v) for v in VARIANTS}, header or {})
