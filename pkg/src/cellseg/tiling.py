"""Patch extraction, pruning, dataset splitting, and tiled stitching.

Training augmentation cuts each image into overlapping square patches at a
set of sizes (plus the whole undivided image), drops patches without any
annotated foreground, and splits the result into train/test. Inference runs
the same tile planner with a margin-derived stride and stitches per-tile
probability maps back together by per-pixel averaging.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import CoverageError, DataError, TilingError
from .validation import check_image, check_mask, check_prob_map, check_same_shape

TRAIN_OVERLAP = 0.35  # training-time patch overlap ratio
INFER_MARGIN = 56  # inference overlap margin in pixels


@dataclass(frozen=True)
class TileRect:
    row0: int
    col0: int
    size: int


@dataclass
class TilePlan:
    image_height: int
    image_width: int
    patch_size: int
    stride: int
    rects: list = field(default_factory=list)


@dataclass
class Patch:
    """One extracted crop with provenance. Whole-image items keep the
    full (possibly non-square) extent."""

    image: np.ndarray
    mask: np.ndarray
    row0: int
    col0: int
    height: int
    width: int
    source: str


def _axis_starts(extent, patch, stride):
    starts = []
    s = 0
    while True:
        if s >= extent - patch:
            starts.append(extent - patch)
            break
        starts.append(s)
        s += stride
    return starts


def plan_tiles(h, w, patch, stride):
    """Enumerate square tiles covering an h-by-w image.

    Starts along each axis run 0, stride, 2*stride, ...; the first start
    that would overrun is clamped to extent - patch and enumeration stops.
    """
    if patch > min(h, w):
        raise TilingError(f"patch {patch} exceeds image extent {h}x{w}")
    if not (1 <= stride <= patch):
        raise TilingError(f"stride {stride} must satisfy 1 <= stride <= patch={patch}")
    rows = _axis_starts(h, patch, stride)
    cols = _axis_starts(w, patch, stride)
    rects = [TileRect(r, c, patch) for r in rows for c in cols]
    return TilePlan(h, w, patch, stride, rects)


def train_stride(patch, overlap=TRAIN_OVERLAP):
    """Training stride: floor(patch * (1 - overlap)), at least 1."""
    return max(1, int(np.floor(patch * (1.0 - overlap))))


def infer_stride(patch, margin=INFER_MARGIN):
    """Inference stride: patch minus the overlap margin."""
    if not (0 <= margin < patch):
        raise TilingError(f"margin {margin} must satisfy 0 <= margin < patch={patch}")
    return patch - margin


def extract_patches(img, mask, sizes, overlap=TRAIN_OVERLAP, source="img"):
    """Crop overlapping patches at every feasible size plus the whole image.

    Sizes larger than the image are skipped. Each crop carries its source
    id and rectangle; the undivided image is appended last.
    """
    img = check_image(img)
    mask = check_mask(mask)
    check_same_shape(img, mask)
    if not sizes:
        raise DataError("sizes must be nonempty")
    if not (0.0 <= overlap < 1.0):
        raise DataError(f"overlap {overlap} must lie in [0, 1)")
    h, w = mask.shape
    out = []
    for size in sizes:
        if size > min(h, w):
            continue
        plan = plan_tiles(h, w, size, train_stride(size, overlap))
        for rect in plan.rects:
            r, c, s = rect.row0, rect.col0, rect.size
            out.append(
                Patch(img[r : r + s, c : c + s], mask[r : r + s, c : c + s], r, c, s, s, source)
            )
    out.append(Patch(img, mask, 0, 0, h, w, source))
    return out


def prune_maskless(patches):
    """Keep only patches whose mask contains at least one foreground pixel."""
    return [p for p in patches if np.any(p.mask > 0)]


def split_dataset(items, train_fraction, seed):
    """Deterministic seeded shuffle into (train, test) lists."""
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction {train_fraction} must lie in (0, 1)")
    n = len(items)
    if n == 0:
        raise DataError("cannot split an empty dataset")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(train_fraction * n + 0.5))
    train = [items[i] for i in perm[:n_train]]
    test = [items[i] for i in perm[n_train:]]
    return train, test


def stitch(tile_probs, h, w, k):
    """Average per-pixel probability vectors over all covering tiles.

    Tiles are reduced in sorted (row0, col0) order so the result is
    bit-reproducible regardless of input ordering.
    """
    acc = np.zeros((h, w, k), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.int64)
    ordered = sorted(tile_probs, key=lambda tp: (tp[0].row0, tp[0].col0))
    for rect, probs in ordered:
        probs = check_prob_map(probs, k)
        r, c, s = rect.row0, rect.col0, rect.size
        if r < 0 or c < 0 or r + s > h or c + s > w:
            raise DataError(f"tile {rect} falls outside the {h}x{w} image")
        if probs.shape[:2] != (s, s):
            raise DataError(f"tile {rect} carries a {probs.shape[:2]} probability map")
        acc[r : r + s, c : c + s] += probs
        count[r : r + s, c : c + s] += 1
    if (count == 0).any():
        r, c = np.argwhere(count == 0)[0]
        raise CoverageError(f"pixel ({r}, {c}) is covered by no tile")
    return acc / count[:, :, None]


def _patch_stem(p):
    size = f"{p.height}" if p.height == p.width else f"{p.height}x{p.width}"
    return f"{p.source}_{p.row0}_{p.col0}_{size}"


def write_patch_dataset(train, test, out_dir):
    """Materialize patches as PNG pairs plus a line-delimited JSON manifest.

    Layout: ``images/<stem>.png`` and ``masks/<stem>.png`` with one manifest
    record per patch carrying source id, rectangle, and split.
    """
    from .imaging import save_image, save_mask

    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest_path, "w") as fh:
        for split, patches in (("train", train), ("test", test)):
            for p in patches:
                stem = _patch_stem(p)
                image_rel = os.path.join("images", stem + ".png")
                mask_rel = os.path.join("masks", stem + ".png")
                save_image(p.image, os.path.join(out_dir, image_rel))
                save_mask(p.mask, os.path.join(out_dir, mask_rel))
                fh.write(
                    json.dumps(
                        {
                            "source": p.source,
                            "row0": p.row0,
                            "col0": p.col0,
                            "height": p.height,
                            "width": p.width,
                            "split": split,
                            "image": image_rel,
                            "mask": mask_rel,
                        }
                    )
                    + "\n"
                )
    return manifest_path


def read_patch_dataset(manifest_path, k=2):
    """Load a materialized patch dataset back into (train, test) lists."""
    from .imaging import load_image, load_mask

    if os.path.isdir(manifest_path):
        manifest_path = os.path.join(manifest_path, "manifest.jsonl")
    if not os.path.exists(manifest_path):
        raise DataError(f"no manifest at {manifest_path}")
    base = os.path.dirname(manifest_path)
    train, test = [], []
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            img = load_image(os.path.join(base, rec["image"]))
            mask = load_mask(os.path.join(base, rec["mask"]), k=k)
            patch = Patch(
                img, mask, rec["row0"], rec["col0"], rec["height"], rec["width"], rec["source"]
            )
            (train if rec["split"] == "train" else test).append(patch)
    if not train and not test:
        raise DataError(f"manifest {manifest_path} lists no patches")
    return train, test
