import numpy as np
import pytest
from PIL import Image as PILImage
from scipy import ndimage

from cellseg.errors import ConfigError, DataError, DecodeError
from cellseg.imaging import (
    generate_synthetic_dataset,
    load_image,
    load_mask,
    save_image,
    save_mask,
    save_overlay,
    SynthConfig,
)


def test_load_pgm_scales_by_255(tmp_path):
    path = tmp_path / "t.pgm"
    path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    img = load_image(str(path))
    assert img.shape == (2, 2)
    np.testing.assert_array_equal(img, np.array([[0.0, 1.0], [128 / 255, 64 / 255]]))


def test_rgb_png_shape(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 256, size=(224, 224, 3), dtype=np.uint8)
    p = tmp_path / "c.png"
    PILImage.fromarray(arr, "RGB").save(p)
    img = load_image(str(p))
    assert img.shape == (224, 224, 3)
    assert img.size == 224 * 224 * 3


def test_image_roundtrip_identity(tmp_path):
    rng = np.random.default_rng(1)
    for name, arr in [
        ("g.png", rng.integers(0, 256, (17, 23), dtype=np.uint8)),
        ("c.png", rng.integers(0, 256, (9, 11, 3), dtype=np.uint8)),
        ("g.pgm", rng.integers(0, 256, (8, 8), dtype=np.uint8)),
    ]:
        first = arr.astype(np.float64) / 255.0
        save_image(first, str(tmp_path / name))
        again = load_image(str(tmp_path / name))
        np.testing.assert_array_equal(first, again)


def test_load_image_rejects_16bit_and_missing(tmp_path):
    p = tmp_path / "deep.png"
    PILImage.fromarray(np.zeros((4, 4), dtype=np.uint16)).save(p)
    with pytest.raises(DecodeError, match="deep.png"):
        load_image(str(p))
    with pytest.raises(DecodeError):
        load_image(str(tmp_path / "nope.png"))


def test_load_mask_binarization(tmp_path):
    arr = np.array([[0, 255], [2, 0]], dtype=np.uint8)
    p = tmp_path / "m.png"
    PILImage.fromarray(arr, "L").save(p)
    np.testing.assert_array_equal(load_mask(str(p), k=2), [[0, 1], [1, 0]])
    with pytest.raises(DataError):
        load_mask(str(p), k=2, binarize=False)


def test_load_mask_all_zero(tmp_path):
    p = tmp_path / "z.png"
    PILImage.fromarray(np.zeros((5, 5), dtype=np.uint8), "L").save(p)
    assert load_mask(str(p)).sum() == 0


def test_mask_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    mask = (rng.uniform(size=(13, 7)) > 0.5).astype(np.int64)
    save_mask(mask, str(tmp_path / "m.png"))
    np.testing.assert_array_equal(load_mask(str(tmp_path / "m.png")), mask)


def test_generator_deterministic():
    cfg = SynthConfig(image_size=32, seed=7)
    a = generate_synthetic_dataset(cfg, 3)
    b = generate_synthetic_dataset(cfg, 3)
    for (ia, ma), (ib, mb) in zip(a, b):
        np.testing.assert_array_equal(ia, ib)
        np.testing.assert_array_equal(ma, mb)


def test_generator_clean_config_constant_per_blob():
    cfg = SynthConfig(image_size=48, cell_count_range=(2, 3), noise_sigma=0.0,
                      blur_radius=0, seed=3)
    for img, mask in generate_synthetic_dataset(cfg, 5):
        fg_values = np.unique(img[mask > 0])
        assert len(fg_values) <= 3  # one intensity per visible blob


def test_generator_component_count_oracle():
    # spacious config: rejection placement keeps the blobs disjoint, so the
    # connected-component count equals the drawn cell count exactly
    cfg = SynthConfig(image_size=96, cell_count_range=(2, 2),
                      protrusion_count_range=(1, 1), noise_sigma=0.0,
                      blur_radius=0, seed=5)
    for img, mask in generate_synthetic_dataset(cfg, 6):
        _, n_components = ndimage.label(mask > 0)
        assert n_components >= cfg.cell_count_range[0]
        assert n_components == 2


def test_generator_invariants():
    cfg = SynthConfig(image_size=40, seed=9)
    for img, mask in generate_synthetic_dataset(cfg, 4):
        assert img.shape == mask.shape == (40, 40)
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert set(np.unique(mask)) <= {0, 1}


def test_generator_rejects_tiny_canvas():
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(SynthConfig(image_size=8), 1)


def test_overlay_empty_mask_is_identity(tmp_path):
    rng = np.random.default_rng(4)
    img = rng.integers(0, 256, (6, 6), dtype=np.uint8).astype(np.float64) / 255
    p = str(tmp_path / "ov.png")
    save_overlay(img, np.zeros((6, 6), dtype=np.int64), p)
    out = load_image(p)
    np.testing.assert_array_equal(out, np.stack([img] * 3, axis=2))


def test_overlay_full_mask_on_white(tmp_path):
    img = np.ones((4, 4))
    p = str(tmp_path / "ov.png")
    save_overlay(img, np.ones((4, 4), dtype=np.int64), p)
    out = np.rint(load_image(p) * 255)
    # 0.5*white + 0.5*red
    np.testing.assert_array_equal(out[..., 0], 255)
    np.testing.assert_array_equal(out[..., 1], 128)
    np.testing.assert_array_equal(out[..., 2], 128)


def test_overlay_blended_pixel_count(tmp_path):
    # the two-foreground-pixel mask from the Dice example: exactly 2 blended.
    # intensities sit on the 1/255 grid so unblended pixels round-trip exactly
    img = np.full((3, 3), 128 / 255)
    mask = np.zeros((3, 3), dtype=np.int64)
    mask[0, 0] = mask[2, 1] = 1
    p = str(tmp_path / "ov.png")
    save_overlay(img, mask, p)
    out = load_image(p)
    plain = np.stack([img] * 3, axis=2)
    changed = np.any(np.abs(out - plain) > 1e-9, axis=2)
    assert changed.sum() == 2
    assert changed[0, 0] and changed[2, 1]


def test_overlay_shape_mismatch():
    with pytest.raises(DataError):
        save_overlay(np.zeros((3, 3)), np.zeros((4, 4), dtype=np.int64), "/tmp/x.png")
