import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shacira.imageio import ImageFormatError, from_uint8, read_image, to_uint8, write_image


def test_to_uint8_rounds_half_to_even():
    vals = np.array([0.5, 1.5, 2.5, 253.5]) / 255
    assert to_uint8(vals).tolist() == [0, 2, 2, 254]
    assert to_uint8(np.array([-0.2, 1.3])).tolist() == [0, 255]


@given(st.lists(st.integers(0, 255), min_size=1, max_size=64))
@settings(max_examples=100, deadline=None)
def test_uint8_round_trip(values):
    raw = np.array(values, dtype=np.uint8)
    np.testing.assert_array_equal(to_uint8(from_uint8(raw)), raw)
    assert np.all(from_uint8(raw) == raw / 255.0)


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3)).astype(np.uint8)
    path = tmp_path / "a.ppm"
    write_image(path, from_uint8(img))
    assert path.read_bytes().startswith(b"P6\n7 5\n255\n")
    back = read_image(path)
    assert back.shape == (5, 7, 3)
    np.testing.assert_array_equal(to_uint8(back), img)


def test_ppm_header_with_comments(tmp_path):
    path = tmp_path / "c.ppm"
    path.write_bytes(b"P6 # made by hand\n2 1\n# max\n255\n" + bytes([0, 128, 255, 10, 20, 30]))
    img = read_image(path)
    np.testing.assert_array_equal(to_uint8(img), [[[0, 128, 255], [10, 20, 30]]])


@pytest.mark.parametrize("data", [
    b"P3\n1 1\n255\n0 0 0",
    b"P6\n1 1\n65535\n" + bytes(6),
    b"P6\n2 2\n255\n" + bytes(5),
    b"P6\n2",
    b"GIF89a",
])
def test_bad_images_rejected(tmp_path, data):
    path = tmp_path / "bad.ppm"
    path.write_bytes(data)
    with pytest.raises(ImageFormatError):
        read_image(path)


def test_png_when_available(tmp_path):
    pytest.importorskip("PIL")
    img = np.random.default_rng(1).integers(0, 256, size=(3, 4, 3)).astype(np.uint8)
    write_image(tmp_path / "x.png", from_uint8(img))
    np.testing.assert_array_equal(to_uint8(read_image(tmp_path / "x.png")), img)


def test_committed_crop(crop128):
    assert crop128.shape == (128, 128, 3)
    assert crop128.std() > 0.1  # a textured natural image, not a flat patch
