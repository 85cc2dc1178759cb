import io

import numpy as np
import pytest
from PIL import Image

from textscrub.png_io import (
    decode_png,
    encode_png,
    read_mask,
    to_float01,
    to_uint8,
    write_mask,
    write_png,
)


def test_roundtrip_rgb(rng):
    arr = rng.integers(0, 256, size=(37, 23, 3), dtype=np.uint8)
    assert np.array_equal(decode_png(encode_png(arr)), arr)


def test_roundtrip_gray(rng):
    arr = rng.integers(0, 256, size=(16, 41), dtype=np.uint8)
    assert np.array_equal(decode_png(encode_png(arr)), arr)


def test_pillow_can_read_our_png(rng):
    arr = rng.integers(0, 256, size=(70000 // 128, 128, 3), dtype=np.uint8)  # multi-block IDAT
    img = Image.open(io.BytesIO(encode_png(arr)))
    assert np.array_equal(np.asarray(img), arr)


def test_encoding_is_deterministic(rng):
    arr = rng.integers(0, 256, size=(12, 12, 3), dtype=np.uint8)
    assert encode_png(arr) == encode_png(arr.copy())


def test_rejects_non_uint8():
    with pytest.raises(ValueError):
        encode_png(np.zeros((4, 4), dtype=np.float32))


def test_mask_roundtrip(tmp_path):
    mask = np.zeros((9, 9), dtype=np.uint8)
    mask[2:5, 3:8] = 1
    path = tmp_path / "m.png"
    write_mask(path, mask)
    assert np.array_equal(read_mask(path), mask)


def test_mask_rejects_gray_values(tmp_path):
    path = tmp_path / "bad.png"
    write_png(path, np.full((4, 4), 128, dtype=np.uint8))
    with pytest.raises(ValueError, match="0/255"):
        read_mask(path)


def test_mask_rejects_rgb(tmp_path):
    path = tmp_path / "rgb.png"
    write_png(path, np.zeros((4, 4, 3), dtype=np.uint8))
    with pytest.raises(ValueError, match="single-channel"):
        read_mask(path)


def test_quantization_roundtrip():
    img01 = np.linspace(0, 1, 256).reshape(16, 16)
    u8 = to_uint8(img01)
    assert u8.dtype == np.uint8
    back = to_float01(u8)
    assert np.max(np.abs(back - img01)) <= 0.5 / 255 + 1e-12
