from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis.extra.numpy import arrays
from hypothesis import strategies as st

from unsegment.errors import FormatError
from unsegment.pnm import encode_pgm, encode_ppm, read_pgm, read_ppm, write_pgm, write_ppm

DATA = Path(__file__).parent / "data"


def test_reference_ppm_fixture():
    image = read_ppm(DATA / "two_by_two.ppm")
    expect = np.array([
        [[0, 255], [0, 0x33]],
        [[0, 0], [255, 0x66]],
        [[0, 0], [0, 0x99]],
    ]) / 255.0
    assert image.shape == (3, 2, 2)
    np.testing.assert_array_equal(image, expect)


def test_reference_pgm_fixture():
    np.testing.assert_array_equal(read_pgm(DATA / "three_by_one.pgm"), [[False, False, True]])


def test_header_bytes():
    assert encode_ppm(np.zeros((3, 1, 2))) == b"P6\n2 1\n255\n" + bytes(6)
    assert encode_pgm(np.array([[True, False]])) == b"P5\n2 1\n255\n\xff\x00"


def test_black_image(tmp_path):
    write_ppm(tmp_path / "k.ppm", np.zeros((3, 4, 5)))
    image = read_ppm(tmp_path / "k.ppm")
    assert image.shape == (3, 4, 5)
    assert not image.any()


@given(arrays(np.float64, (3, 3, 4), elements=st.floats(0, 1)))
def test_round_trip_within_half_step(tmp_path_factory, image):
    path = tmp_path_factory.mktemp("rt") / "x.ppm"
    write_ppm(path, image)
    assert np.max(np.abs(read_ppm(path) - image)) <= 1 / 510 + 1e-12


@given(arrays(bool, (4, 3)))
def test_mask_round_trip(tmp_path_factory, mask):
    path = tmp_path_factory.mktemp("rt") / "m.pgm"
    write_pgm(path, mask)
    np.testing.assert_array_equal(read_pgm(path), mask)


@pytest.mark.parametrize(
    "data,offset",
    [
        (b"P3\n2 2\n255\n", 0),
        (b"P6\n2 x\n255\n", 5),
        (b"P6\n2 2\n65535\n" + bytes(24), 7),
        (b"P6\n0 2\n255\n", 3),
        (b"P6\n2 2\n255\n" + bytes(5), 16),
        (b"P6\n2 2", 6),
        (b"P62 2 255\n", 2),
    ],
)
def test_malformed_header_reports_offset(tmp_path, data, offset):
    path = tmp_path / "bad.ppm"
    path.write_bytes(data)
    with pytest.raises(FormatError) as info:
        read_ppm(path)
    assert info.value.offset == offset
    assert f"offset {offset}" in str(info.value)


def test_wrong_shape():
    with pytest.raises(FormatError):
        encode_ppm(np.zeros((1, 2, 2)))
