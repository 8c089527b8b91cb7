"""Command-line interface.

Subcommands: synth, tile, train, eval, infer, overlay. ``train`` reads a
flat TOML config mirroring TrainConfig; any key can be overridden with a
``--key value`` flag and ``--seed`` is mandatory.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical error.
"""

import argparse
import json
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from dataclasses import fields

from .errors import CellSegError, ConfigError, DataError, NumericalError
from .imaging import (
    generate_synthetic_dataset,
    load_image,
    load_mask,
    save_image,
    save_mask,
    save_overlay,
    SynthConfig,
)
from .metrics import write_eval_report
from .tiling import extract_patches, prune_maskless, split_dataset, write_patch_dataset
from .trainer import config_from_mapping, evaluate, infer, train, TrainConfig


def _cmd_synth(args):
    cfg = SynthConfig(
        image_size=args.size,
        cell_count_range=(args.cells[0], args.cells[1]),
        protrusion_count_range=(args.protrusions[0], args.protrusions[1]),
        noise_sigma=args.noise,
        blur_radius=args.blur,
        seed=args.seed,
    )
    pairs = generate_synthetic_dataset(cfg, args.n)
    os.makedirs(os.path.join(args.out, "images"), exist_ok=True)
    os.makedirs(os.path.join(args.out, "masks"), exist_ok=True)
    for i, (img, mask) in enumerate(pairs):
        save_image(img, os.path.join(args.out, "images", f"{i:04d}.png"))
        save_mask(mask, os.path.join(args.out, "masks", f"{i:04d}.png"))
    print(f"wrote {len(pairs)} image/mask pairs to {args.out}")
    return 0


def _list_pairs(images_dir, masks_dir):
    names = sorted(
        f for f in os.listdir(images_dir) if f.lower().endswith((".png", ".pgm"))
    )
    if not names:
        raise DataError(f"no images found in {images_dir}")
    pairs = []
    for name in names:
        stem = os.path.splitext(name)[0]
        mask_path = os.path.join(masks_dir, stem + ".png")
        if not os.path.exists(mask_path):
            raise DataError(f"no mask for {name}: expected {mask_path}")
        pairs.append((stem, os.path.join(images_dir, name), mask_path))
    return pairs


def _cmd_tile(args):
    patches = []
    for stem, img_path, mask_path in _list_pairs(args.images, args.masks):
        img = load_image(img_path)
        mask = load_mask(mask_path)
        patches.extend(
            extract_patches(img, mask, sizes=args.sizes, overlap=args.overlap, source=stem)
        )
    total = len(patches)
    if not args.keep_maskless:
        patches = prune_maskless(patches)
    train_split, test_split = split_dataset(patches, args.train_fraction, args.seed)
    manifest = write_patch_dataset(train_split, test_split, args.out)
    print(
        f"{total} patches extracted, {len(patches)} kept after pruning, "
        f"{len(train_split)} train / {len(test_split)} test -> {manifest}"
    )
    return 0


_CONFIG_ONLY_KEYS = {"data_dir", "out_dir", "seed"}


def _add_config_overrides(parser):
    for f in fields(TrainConfig):
        if f.name in _CONFIG_ONLY_KEYS:
            continue
        if isinstance(f.default, bool):
            parser.add_argument(
                f"--{f.name}", type=lambda s: s.lower() in ("1", "true", "yes"),
                default=None, metavar="BOOL",
            )
        elif isinstance(f.default, int) and f.default is not None:
            parser.add_argument(f"--{f.name}", type=int, default=None)
        elif isinstance(f.default, float):
            parser.add_argument(f"--{f.name}", type=float, default=None)
        else:
            parser.add_argument(f"--{f.name}", default=None)


_INT_KEYS = {
    "epochs", "sampling_start_epoch", "batch_size", "pixels_per_image",
    "sample_size", "selection_count", "queue_capacity", "seed", "n_classes",
    "hidden1", "hidden2", "patch", "margin", "eval_every",
}
_FLOAT_KEYS = {
    "substitution_fraction", "lam", "beta", "lam1", "lam2", "beta1", "beta2",
    "lr0", "momentum", "weight_decay", "gamma",
}


def _coerce(key, value):
    if value is None:
        return None
    if key in _INT_KEYS:
        return int(value)
    if key in _FLOAT_KEYS:
        return float(value)
    return value


def _cmd_train(args):
    mapping = {}
    if args.config:
        try:
            with open(args.config, "rb") as fh:
                mapping = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"bad TOML in {args.config}: {exc}") from exc
    for f in fields(TrainConfig):
        override = getattr(args, f.name, None)
        if override is not None:
            mapping[f.name] = override
    mapping["seed"] = args.seed
    mapping["data_dir"] = args.data or mapping.get("data_dir")
    mapping["out_dir"] = args.out or mapping.get("out_dir")
    mapping = {k: _coerce(k, v) for k, v in mapping.items()}
    cfg = config_from_mapping(mapping)
    final_path, run_log = train(cfg, resume_from=args.resume)
    print(f"training complete; final checkpoint at {final_path}")
    for note in run_log.notes:
        print(f"note: {note}")
    return 0


def _cmd_eval(args):
    report = evaluate(args.checkpoint, args.data, patch=args.patch, margin=args.margin)
    csv_path, json_path = write_eval_report(report, args.out, stem=args.stem)
    print(json.dumps(report.summary(), indent=2))
    print(f"wrote {csv_path} and {json_path}")
    return 0


def _cmd_infer(args):
    image = load_image(args.image)
    mask, probs = infer(args.checkpoint, image, patch=args.patch, margin=args.margin)
    save_mask(mask, args.out)
    if args.probs:
        import numpy as np

        np.save(args.probs, probs)
    if args.overlay:
        save_overlay(image, mask, args.overlay)
    print(f"wrote mask to {args.out}")
    return 0


def _cmd_overlay(args):
    image = load_image(args.image)
    mask = load_mask(args.mask)
    save_overlay(image, mask, args.out)
    print(f"wrote overlay to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cellseg",
        description="Outlier-aware cell segmentation: data synthesis, tiling, "
        "training, evaluation, and tiled inference.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic image/mask dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--cells", type=int, nargs=2, default=(2, 4), metavar=("MIN", "MAX"))
    p.add_argument(
        "--protrusions", type=int, nargs=2, default=(1, 3), metavar=("MIN", "MAX")
    )
    p.add_argument("--noise", type=float, default=0.08)
    p.add_argument("--blur", type=int, default=1)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("tile", help="build a patch dataset with a manifest")
    p.add_argument("--images", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sizes", type=int, nargs="+", default=[224, 448, 1000, 1500, 2000])
    p.add_argument("--overlap", type=float, default=0.35)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--keep-maskless", action="store_true")
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=_cmd_tile)

    p = sub.add_parser("train", help="train from a patch dataset manifest")
    p.add_argument("--config", help="flat TOML file mirroring TrainConfig")
    p.add_argument("--data", help="dataset directory (overrides config data_dir)")
    p.add_argument("--out", help="output directory (overrides config out_dir)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    _add_config_overrides(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stem", default="eval")
    p.add_argument("--patch", type=int, default=224)
    p.add_argument("--margin", type=int, default=56)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="segment one image with tiled inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--probs", help="optional .npy path for the probability map")
    p.add_argument("--overlay", help="optional overlay PNG path")
    p.add_argument("--patch", type=int, default=224)
    p.add_argument("--margin", type=int, default=56)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("overlay", help="blend a mask over an image")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_overlay)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4
    except CellSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
