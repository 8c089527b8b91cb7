"""Image and mask codecs plus a synthetic irregular-cell dataset generator.

Files are 8-bit PNG (grayscale or RGB) or binary PGM (P5). Intensities are
mapped to [0, 1] by dividing by 255; 16-bit inputs are rejected rather than
silently rescaled. Masks are 8-bit single-channel PNG.

The generator draws star-convex cell bodies with radial jitter and thin
elongated spur protrusions, so the rendered shapes have the irregular,
neurite-like boundaries the training pipeline is aimed at.
"""

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .errors import ConfigError, DataError, DecodeError
from .validation import check_image, check_mask, check_same_shape

_IMAGE_MODES = {"L", "RGB"}


def load_image(path):
    """Load an 8-bit grayscale/RGB PNG or PGM as a float64 array in [0, 1]."""
    if not os.path.exists(path):
        raise DecodeError(f"no such image file: {path}")
    try:
        with PILImage.open(path) as im:
            mode = im.mode
            if mode not in _IMAGE_MODES:
                raise DecodeError(
                    f"unsupported image mode {mode!r} in {path}; "
                    "only 8-bit grayscale (L) and RGB are accepted"
                )
            arr = np.asarray(im, dtype=np.uint8)
    except DecodeError:
        raise
    except Exception as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc
    return arr.astype(np.float64) / 255.0


def save_image(img, path):
    """Write an image array as 8-bit PNG or PGM, selected by file extension."""
    img = check_image(img)
    arr = np.rint(img * 255.0).astype(np.uint8)
    pil = PILImage.fromarray(arr, mode="L" if arr.ndim == 2 else "RGB")
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pgm":
        if arr.ndim != 2:
            raise DataError(f"PGM supports grayscale only: {path}")
        pil.save(path, format="PPM")
    else:
        pil.save(path, format="PNG")


def load_mask(path, k=2, binarize=None):
    """Load a single-channel mask with labels in {0, ..., k-1}.

    With ``binarize`` (the default for k=2) any nonzero pixel maps to
    label 1. With binarization disabled, raw pixel values are kept and
    values >= k raise a range error.
    """
    if not os.path.exists(path):
        raise DecodeError(f"no such mask file: {path}")
    try:
        with PILImage.open(path) as im:
            if im.mode != "L":
                raise DecodeError(
                    f"mask must be 8-bit single-channel, got mode {im.mode!r}: {path}"
                )
            arr = np.asarray(im, dtype=np.uint8)
    except DecodeError:
        raise
    except Exception as exc:
        raise DecodeError(f"cannot decode mask {path}: {exc}") from exc
    if binarize is None:
        binarize = k == 2
    if binarize:
        labels = (arr != 0).astype(np.int64)
    else:
        labels = arr.astype(np.int64)
        if labels.max(initial=0) >= k:
            raise DataError(f"mask {path} has label {labels.max()} >= k={k}")
    return labels


def save_mask(mask, path):
    """Write a label mask as 8-bit single-channel PNG, raw label values."""
    mask = check_mask(mask)
    if mask.max(initial=0) > 255:
        raise DataError("mask labels exceed 8-bit range")
    PILImage.fromarray(mask.astype(np.uint8), mode="L").save(path, format="PNG")


def save_overlay(img, mask, path, blend=0.5):
    """Write a PNG with foreground pixels alpha-blended red over the image."""
    img = check_image(img)
    mask = check_mask(mask)
    check_same_shape(img, mask, name="overlay")
    rgb = np.stack([img] * 3, axis=2) if img.ndim == 2 else img.copy()
    fg = mask > 0
    red = np.array([1.0, 0.0, 0.0])
    rgb[fg] = (1.0 - blend) * rgb[fg] + blend * red
    out = np.rint(rgb * 255.0).astype(np.uint8)
    try:
        PILImage.fromarray(out, mode="RGB").save(path, format="PNG")
    except Exception as exc:
        raise DataError(f"cannot write overlay {path}: {exc}") from exc


@dataclass
class SynthConfig:
    """Knobs for the synthetic cell generator."""

    image_size: int = 64
    cell_count_range: tuple = (2, 4)
    protrusion_count_range: tuple = (1, 3)
    noise_sigma: float = 0.08
    blur_radius: int = 1
    seed: int = 0

    def validate(self):
        if self.image_size < 16:
            raise ConfigError("image_size must be at least 16 pixels")
        cmin, cmax = self.cell_count_range
        pmin, pmax = self.protrusion_count_range
        if cmin > cmax or pmin > pmax:
            raise ConfigError("count ranges must satisfy min <= max")
        if cmin < 1:
            raise ConfigError("cell_count_range minimum must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.blur_radius < 0:
            raise ConfigError("blur_radius must be >= 0")


def _blob_region(size, cy, cx, vertex_radii, spurs):
    """Rasterize one star-convex body plus its spurs into a boolean mask."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy = yy - cy
    dx = xx - cx
    dist = np.hypot(dy, dx)
    ang = np.mod(np.arctan2(dy, dx), 2.0 * np.pi)
    n_vert = len(vertex_radii)
    step = 2.0 * np.pi / n_vert
    idx = np.minimum((ang / step).astype(np.int64), n_vert - 1)
    frac = ang / step - idx
    r_here = (1.0 - frac) * vertex_radii[idx] + frac * vertex_radii[(idx + 1) % n_vert]
    region = dist <= r_here

    for alpha, start_dist, length, w_base, w_tip in spurs:
        sy = cy + start_dist * np.sin(alpha)
        sx = cx + start_dist * np.cos(alpha)
        # coordinates in the spur frame: u along the axis, v across it
        u = (xx - sx) * np.cos(alpha) + (yy - sy) * np.sin(alpha)
        v = -(xx - sx) * np.sin(alpha) + (yy - sy) * np.cos(alpha)
        taper = w_base + (w_tip - w_base) * np.clip(u / length, 0.0, 1.0)
        region |= (u >= 0.0) & (u <= length) & (np.abs(v) <= taper)
    return region


def _make_blob(rng, size):
    """Draw the body geometry: base radius plus per-vertex jittered radii."""
    base_r = rng.uniform(size / 14.0, size / 7.0)
    n_vert = int(rng.integers(10, 17))
    vertex_radii = base_r * rng.uniform(0.6, 1.3, size=n_vert)
    return base_r, vertex_radii


def generate_synthetic_dataset(cfg, n):
    """Generate ``n`` (image, mask) pairs, bit-deterministic in (cfg, n).

    Cells are painted brighter than the background (later cells overwrite
    earlier ones where they overlap), then Gaussian noise and a box blur
    are applied and the result is clamped to [0, 1]. Cell placement uses
    rejection sampling on bounding circles, so sparse configurations yield
    non-overlapping cells.
    """
    cfg.validate()
    if n < 1:
        raise ConfigError("need n >= 1 samples")
    size = cfg.image_size
    out = []
    for i in range(n):
        rng = np.random.default_rng([cfg.seed, i])
        n_cells = int(rng.integers(cfg.cell_count_range[0], cfg.cell_count_range[1] + 1))
        background = rng.uniform(0.10, 0.25)
        img = np.full((size, size), background, dtype=np.float64)
        mask = np.zeros((size, size), dtype=np.int64)

        placed = []  # (cy, cx, reach)
        for _ in range(n_cells):
            base_r, vertex_radii = _make_blob(rng, size)
            n_spur = int(
                rng.integers(cfg.protrusion_count_range[0], cfg.protrusion_count_range[1] + 1)
            )
            spurs = []
            for _ in range(n_spur):
                alpha = rng.uniform(0.0, 2.0 * np.pi)
                start_dist = 0.6 * base_r
                length = rng.uniform(1.2, 2.2) * base_r
                w_base = max(1.0, 0.30 * base_r)
                w_tip = max(0.5, 0.10 * base_r)
                spurs.append((alpha, start_dist, length, w_base, w_tip))
            reach = max(
                float(vertex_radii.max()),
                max((s[1] + s[2] for s in spurs), default=0.0),
            )
            margin = min(base_r, size / 4.0)
            cy = cx = None
            for _attempt in range(100):
                ty = rng.uniform(margin, size - margin)
                tx = rng.uniform(margin, size - margin)
                if all(np.hypot(ty - py, tx - px) > reach + pr for py, px, pr in placed):
                    cy, cx = ty, tx
                    break
            if cy is None:  # crowded: accept overlap at the last draw
                cy, cx = ty, tx
            placed.append((cy, cx, reach))

            intensity = rng.uniform(0.55, 0.95)
            region = _blob_region(size, cy, cx, vertex_radii, spurs)
            img[region] = intensity
            mask[region] = 1

        if cfg.noise_sigma > 0:
            img = img + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
        if cfg.blur_radius > 0:
            img = ndimage.uniform_filter(img, size=2 * cfg.blur_radius + 1, mode="nearest")
        img = np.clip(img, 0.0, 1.0)
        out.append((img, mask))
    return out
