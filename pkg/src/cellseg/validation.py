"""Input validation helpers for arrays flowing through the public API.

Images are float64 arrays in [0, 1], shaped (H, W) for grayscale or
(H, W, 3) for RGB. Masks are integer arrays shaped (H, W) with labels in
{0, ..., k-1}. Probability maps are float64 arrays shaped (H, W, k) whose
per-pixel vectors sum to one.
"""

import numpy as np

from .errors import DataError

PROB_SUM_TOL = 1e-6


def check_image(img, name="image"):
    """Validate an image array and return it as float64."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim not in (2, 3):
        raise DataError(f"{name}: expected 2-D or 3-D array, got ndim={img.ndim}")
    if img.ndim == 3 and img.shape[2] != 3:
        raise DataError(f"{name}: color images must have 3 channels, got {img.shape[2]}")
    if img.size == 0:
        raise DataError(f"{name}: empty array")
    if not np.isfinite(img).all():
        raise DataError(f"{name}: contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise DataError(f"{name}: intensities must lie in [0, 1]")
    return img


def check_mask(mask, k=None, name="mask"):
    """Validate a label mask and return it as a small-int array."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataError(f"{name}: expected 2-D array, got ndim={mask.ndim}")
    if not np.issubdtype(mask.dtype, np.integer):
        rounded = np.rint(np.asarray(mask, dtype=np.float64))
        if not np.array_equal(rounded, np.asarray(mask, dtype=np.float64)):
            raise DataError(f"{name}: labels must be integers")
        mask = rounded.astype(np.int64)
    mask = mask.astype(np.int64, copy=False)
    if mask.size and mask.min() < 0:
        raise DataError(f"{name}: negative labels")
    if k is not None and mask.size and mask.max() >= k:
        raise DataError(f"{name}: label {mask.max()} out of range for k={k}")
    return mask


def check_same_shape(img, mask, name="pair"):
    """Require image and mask to share a spatial footprint."""
    if img.shape[:2] != mask.shape[:2]:
        raise DataError(
            f"{name}: image {img.shape[:2]} and mask {mask.shape[:2]} shapes differ"
        )


def image_channels(img):
    """Channel count of a validated image (1 for grayscale)."""
    return 1 if img.ndim == 2 else img.shape[2]


def check_prob_map(probs, k=None, name="probs"):
    """Validate a per-pixel probability map of shape (H, W, k)."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3:
        raise DataError(f"{name}: expected (H, W, k) array, got ndim={probs.ndim}")
    if k is not None and probs.shape[2] != k:
        raise DataError(f"{name}: expected {k} classes, got {probs.shape[2]}")
    if probs.min() < -PROB_SUM_TOL or probs.max() > 1.0 + PROB_SUM_TOL:
        raise DataError(f"{name}: entries outside [0, 1]")
    sums = probs.sum(axis=2)
    if np.abs(sums - 1.0).max() > PROB_SUM_TOL:
        raise DataError(f"{name}: per-pixel vectors do not sum to 1")
    return probs
