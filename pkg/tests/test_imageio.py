import numpy as np
import pytest

from aidkit import imageio
from aidkit.errors import ArchiveError, DimensionError
from aidkit.numerics import SeededRng


def test_byte_mapping():
    px = imageio.to_bytes(np.array([-1.0, 0.0, 1.0, -3.0, 2.0]))
    assert px.tolist() == [0, 128, 255, 0, 255]
    back = imageio.from_bytes(np.arange(256, dtype=np.uint8))
    assert back[0] == -1.0 and back[-1] == 1.0
    assert np.array_equal(imageio.to_bytes(back), np.arange(256, dtype=np.uint8))


def test_pgm_round_trip(tmp_path):
    img = np.tanh(SeededRng(0).normal((16, 16)))
    path = tmp_path / "x.pgm"
    imageio.write_pgm(path, img)
    blob = path.read_bytes()
    assert blob.startswith(b"P5\n16 16\n255\n") and len(blob) == 13 + 256
    back = imageio.read_pgm(path)
    assert np.max(np.abs(back - img)) <= 1.0 / 255.0 + 1e-12
    px = imageio.decode_pgm(blob)
    assert imageio.encode_pgm(px) == blob


def test_pgm_decode_errors():
    with pytest.raises(ArchiveError):
        imageio.decode_pgm(b"P2\n1 1\n255\n0")
    with pytest.raises(ArchiveError):
        imageio.decode_pgm(b"P5\n2 2\n65535\n" + bytes(8))
    with pytest.raises(ArchiveError):
        imageio.decode_pgm(b"P5\n2 2\n255\n" + bytes(3))
    with pytest.raises(DimensionError):
        imageio.encode_pgm(np.zeros((2, 2)))


def test_render_grid_layout():
    imgs = [np.full((16, 16), v) for v in np.linspace(-1, 1, 7)]
    strip = imageio.render_grid([imgs])
    assert strip.shape == (16, 118)
    assert np.all(strip[:, 16] == imageio.SEPARATOR)
    assert np.all(strip[:, :16] == 0) and np.all(strip[:, -16:] == 255)
    assert imageio.render_grid([imgs[:1]]).shape == (16, 16)
    assert imageio.render_grid([imgs, imgs[:3]]).shape == (33, 118)


def test_render_grid_rejects_mismatch():
    with pytest.raises(DimensionError):
        imageio.render_grid([[np.zeros((16, 16)), np.zeros((8, 8))]])
    with pytest.raises(DimensionError):
        imageio.render_grid([])
