"""Raindrop image formation, synthetic droplet rendering and mask extraction.

Images are float64 ``(H, W, 3)`` arrays in ``[0, 1]``; masks are ``(H, W)``
arrays holding exactly 0 or 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

MASK_THRESHOLD = 30.0 / 255.0

# Minimum max-channel contrast a droplet pixel keeps against the background.
# Sits above MASK_THRESHOLD so extraction recovers every sufficiently opaque drop.
_VISIBILITY_FLOOR = 34.0 / 255.0
_FLOOR_OPACITY = 0.3


class ShapeError(ValueError):
    """Raised when paired arrays do not share spatial dimensions."""


@dataclass(frozen=True)
class RaindropSpec:
    center: tuple[float, float]
    radius: float
    eccentricity: float = 1.0
    blur_sigma: float = 1.5
    opacity: float = 0.8

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if not 0.5 <= self.eccentricity <= 1.5:
            raise ValueError(f"eccentricity must lie in [0.5, 1.5], got {self.eccentricity}")
        if self.blur_sigma < 0:
            raise ValueError(f"blur_sigma must be non-negative, got {self.blur_sigma}")
        if not 0 < self.opacity <= 1:
            raise ValueError(f"opacity must lie in (0, 1], got {self.opacity}")

    def to_dict(self) -> dict:
        return {
            "center": list(self.center),
            "radius": self.radius,
            "eccentricity": self.eccentricity,
            "blur_sigma": self.blur_sigma,
            "opacity": self.opacity,
        }


@dataclass
class SyntheticPair:
    degraded: np.ndarray
    clean: np.ndarray
    mask: np.ndarray
    seed: int
    rain_layer: np.ndarray | None = None
    drops: list[RaindropSpec] = field(default_factory=list)
    id: str = ""


def check_image(image: np.ndarray, name: str = "image") -> None:
    """Validate the ImageTensor contract: (H, W, 3), H and W >= 16 and divisible by 4."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"{name} must have shape (H, W, 3), got {image.shape}")
    h, w = image.shape[:2]
    if h < 16 or w < 16 or h % 4 or w % 4:
        raise ShapeError(f"{name} spatial size {h}x{w} must be >= 16 and divisible by 4")
    if image.min() < 0 or image.max() > 1:
        raise ValueError(f"{name} values must lie in [0, 1]")


def _same_hw(*arrays: np.ndarray) -> None:
    shapes = {a.shape[:2] for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(f"spatial dimensions differ: {[a.shape for a in arrays]}")


def compose(background: np.ndarray, mask: np.ndarray, rain_layer: np.ndarray) -> np.ndarray:
    """Degraded image ``(1 - M) * B + R``, clamped to [0, 1]."""
    background = np.asarray(background, dtype=np.float64)
    rain_layer = np.asarray(rain_layer, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    _same_hw(background, mask, rain_layer)
    if background.shape != rain_layer.shape:
        raise ShapeError(f"background {background.shape} and rain layer {rain_layer.shape} differ")
    return np.clip((1.0 - mask[..., None]) * background + rain_layer, 0.0, 1.0)


def extract_mask(degraded: np.ndarray, clean: np.ndarray, threshold: float = MASK_THRESHOLD) -> np.ndarray:
    """1 where the largest per-channel absolute difference exceeds ``threshold``."""
    degraded = np.asarray(degraded, dtype=np.float64)
    clean = np.asarray(clean, dtype=np.float64)
    if degraded.shape != clean.shape:
        raise ShapeError(f"degraded {degraded.shape} and clean {clean.shape} differ")
    diff = np.abs(degraded - clean)
    if diff.ndim == 3:
        diff = diff.max(axis=2)
    return (diff > threshold).astype(np.float64)


def droplet_footprint(shape: tuple[int, int], drop: RaindropSpec) -> np.ndarray:
    """Boolean ellipse ``(dr / (r * e))**2 + (dc / r)**2 <= 1``, clipped to the image."""
    h, w = shape
    rows, cols = np.mgrid[0:h, 0:w]
    dr = (rows - drop.center[0]) / (drop.radius * drop.eccentricity)
    dc = (cols - drop.center[1]) / drop.radius
    return dr * dr + dc * dc <= 1.0


def render_rain_layer(
    background: np.ndarray, drops: list[RaindropSpec], seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Render droplets over ``background``.

    Each droplet shows a blurred, vertically flipped and radially magnified view
    of the surrounding background (a crude fish-eye), lifted in brightness, with
    a darker rim and a small specular highlight. The droplet content is blended
    with the background by ``opacity``. Later drops overwrite earlier ones.

    Returns ``(rain_layer, mask)``; the rain layer is zero outside the mask.
    """
    background = np.asarray(background, dtype=np.float64)
    h, w = background.shape[:2]
    rng = np.random.default_rng(seed)
    rain = np.zeros_like(background)
    mask = np.zeros((h, w), dtype=np.float64)
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)

    for drop in drops:
        foot = droplet_footprint((h, w), drop)
        # rng draws happen even for fully clipped drops to keep streams aligned
        lift = rng.uniform(0.06, 0.16)
        magnify = rng.uniform(1.6, 2.6)
        hl_offset = rng.uniform(-0.4, 0.4, size=2)
        if not foot.any():
            continue

        ry = drop.radius * drop.eccentricity
        rx = drop.radius
        v = (rows - drop.center[0]) / ry
        u = (cols - drop.center[1]) / rx
        rho = np.sqrt(u * u + v * v)

        # radial warp: droplet centre samples a wider neighbourhood than its edge
        gain = magnify * np.sqrt(np.clip(rho, 1e-6, None)) / np.clip(rho, 1e-6, None)
        src_r = drop.center[0] - v * ry * gain  # minus: vertical flip
        src_c = drop.center[1] + u * rx * gain

        if drop.blur_sigma > 0:
            blurred = ndimage.gaussian_filter(background, sigma=(drop.blur_sigma, drop.blur_sigma, 0), mode="nearest")
        else:
            blurred = background
        ys, xs = np.nonzero(foot)
        coords = np.stack([src_r[ys, xs], src_c[ys, xs]])
        warped = np.stack(
            [ndimage.map_coordinates(blurred[..., ch], coords, order=1, mode="nearest") for ch in range(3)],
            axis=-1,
        )

        r = rho[ys, xs][:, None]
        rim = np.where(r > 0.8, 1.0 - 1.5 * (r - 0.8), 1.0)
        hl_r = (v[ys, xs] - hl_offset[0]) ** 2 + (u[ys, xs] - hl_offset[1]) ** 2
        highlight = 0.35 * np.exp(-hl_r / 0.02)[:, None]
        content = warped * rim + lift + highlight

        base = background[ys, xs]
        value = drop.opacity * content + (1.0 - drop.opacity) * base
        value = np.clip(value, 0.0, 1.0)

        # keep opaque-enough droplets visible against the background
        floor = _VISIBILITY_FLOOR * min(1.0, drop.opacity / _FLOOR_OPACITY)
        contrast = np.abs(value - base).max(axis=1)
        weak = contrast < floor
        if weak.any():
            direction = np.where(base[weak].mean(axis=1, keepdims=True) < 0.5, 1.0, -1.0)
            value[weak] = np.clip(base[weak] + direction * floor, 0.0, 1.0)

        rain[ys, xs] = value
        mask[ys, xs] = 1.0

    return rain, mask


def procedural_background(size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Smooth colour gradient plus random rectangles/discs plus blurred texture noise."""
    h, w = size
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    yy, xx = rows / max(h - 1, 1), cols / max(w - 1, 1)
    c0, c1, c2 = rng.uniform(0.1, 0.9, size=(3, 3))
    angle = rng.uniform(0, 2 * np.pi)
    t = np.cos(angle) * xx + np.sin(angle) * yy
    t = (t - t.min()) / max(np.ptp(t), 1e-9)
    img = c0 * (1 - t[..., None]) + c1 * t[..., None]
    img = img + 0.1 * (c2 - 0.5) * np.sin(2 * np.pi * yy * rng.uniform(0.5, 2.0))[..., None]

    for _ in range(rng.integers(2, 6)):
        color = rng.uniform(0.05, 0.95, size=3)
        alpha = rng.uniform(0.5, 1.0)
        if rng.random() < 0.5:
            r0, c0_ = rng.uniform(0, h), rng.uniform(0, w)
            hh, ww = rng.uniform(0.1, 0.4) * h, rng.uniform(0.1, 0.4) * w
            shape = (np.abs(rows - r0) < hh / 2) & (np.abs(cols - c0_) < ww / 2)
        else:
            r0, c0_ = rng.uniform(0, h), rng.uniform(0, w)
            rad = rng.uniform(0.08, 0.25) * min(h, w)
            shape = (rows - r0) ** 2 + (cols - c0_) ** 2 <= rad * rad
        img[shape] = (1 - alpha) * img[shape] + alpha * color

    noise = ndimage.gaussian_filter(rng.normal(size=(h, w, 3)), sigma=(1.0, 1.0, 0))
    img = img + 0.04 * noise
    return np.clip(img, 0.0, 1.0)


def random_drops(
    size: tuple[int, int], count: int, rng: np.random.Generator
) -> list[RaindropSpec]:
    h, w = size
    scale = min(h, w)
    drops = []
    for _ in range(count):
        drops.append(
            RaindropSpec(
                center=(float(rng.uniform(0, h - 1)), float(rng.uniform(0, w - 1))),
                radius=float(rng.uniform(scale / 16, scale / 7)),
                eccentricity=float(rng.uniform(0.7, 1.4)),
                blur_sigma=float(rng.uniform(0.5, 2.0)),
                opacity=float(rng.uniform(0.35, 0.95)),
            )
        )
    return drops


def make_pair(size: tuple[int, int], n_drops: int, seed: int, pair_id: str = "") -> SyntheticPair:
    rng = np.random.default_rng(seed)
    clean = procedural_background(size, rng)
    drops = random_drops(size, n_drops, rng)
    rain, mask = render_rain_layer(clean, drops, seed=int(rng.integers(2**31)))
    degraded = compose(clean, mask, rain)
    return SyntheticPair(degraded, clean, mask, seed, rain_layer=rain, drops=drops, id=pair_id)


def make_dataset(
    count: int,
    size: tuple[int, int] | int = (64, 64),
    drops_per_image: tuple[int, int] | int = (3, 6),
    seed: int = 0,
) -> list[SyntheticPair]:
    """Generate ``count`` reproducible synthetic pairs.

    ``drops_per_image`` is an inclusive ``(low, high)`` range or a fixed count.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if isinstance(size, int):
        size = (size, size)
    if isinstance(drops_per_image, int):
        drops_per_image = (drops_per_image, drops_per_image)
    lo, hi = drops_per_image
    if lo < 0 or hi < lo:
        raise ValueError(f"invalid drop range {drops_per_image}")

    children = np.random.SeedSequence(seed).spawn(count)
    pairs = []
    for i, child in enumerate(children):
        pair_seed = int(child.generate_state(1)[0])
        n_drops = int(np.random.default_rng(pair_seed).integers(lo, hi + 1))
        pairs.append(make_pair(size, n_drops, pair_seed, pair_id=f"{i:05d}"))
    return pairs


# --- on-disk layout -------------------------------------------------------------


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.float64)


def write_image(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def write_gray(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image), mode="L").save(path, format="PNG")


def write_dataset(root: str | Path, pairs: list[SyntheticPair], split: str = "train") -> Path:
    """Write ``<root>/<split>/{rain,clean,mask}/<id>.png`` plus ``manifest.json``."""
    split_dir = Path(root) / split
    for sub in ("rain", "clean", "mask"):
        (split_dir / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for i, pair in enumerate(pairs):
        pid = pair.id or f"{i:05d}"
        write_image(split_dir / "rain" / f"{pid}.png", pair.degraded)
        write_image(split_dir / "clean" / f"{pid}.png", pair.clean)
        write_gray(split_dir / "mask" / f"{pid}.png", pair.mask)
        entries.append({"id": pid, "seed": pair.seed, "drops": len(pair.drops)})
    manifest = {"split": split, "count": len(pairs), "pairs": entries}
    (split_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return split_dir


def load_dataset(root: str | Path, split: str = "train") -> list[SyntheticPair]:
    """Load pairs from the dataset layout.

    Works for user-supplied photo pairs too: when ``mask/`` is missing or lacks
    an id, the mask is extracted from the pair by thresholding.
    """
    split_dir = Path(root) / split
    rain_dir, clean_dir, mask_dir = split_dir / "rain", split_dir / "clean", split_dir / "mask"
    if not rain_dir.is_dir() or not clean_dir.is_dir():
        raise FileNotFoundError(f"no dataset split at {split_dir} (expected rain/ and clean/)")
    seeds = {}
    manifest_path = split_dir / "manifest.json"
    if manifest_path.exists():
        seeds = {e["id"]: e["seed"] for e in json.loads(manifest_path.read_text())["pairs"]}

    pairs = []
    for rain_path in sorted(rain_dir.glob("*.png")):
        pid = rain_path.stem
        clean_path = clean_dir / rain_path.name
        if not clean_path.exists():
            raise FileNotFoundError(f"missing clean image for {pid}: {clean_path}")
        degraded, clean = read_image(rain_path), read_image(clean_path)
        if degraded.shape != clean.shape:
            raise ShapeError(f"pair {pid}: {degraded.shape} vs {clean.shape}")
        mask_path = mask_dir / rain_path.name
        mask = read_mask(mask_path) if mask_path.exists() else extract_mask(degraded, clean)
        pairs.append(SyntheticPair(degraded, clean, mask, seeds.get(pid, -1), id=pid))
    if not pairs:
        raise FileNotFoundError(f"no PNG pairs found under {rain_dir}")
    return pairs
