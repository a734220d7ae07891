import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from paramalign.tensor import Rng
from paramalign.vision import VisionConfig, encode_image, format_image, init_vision, parse_image


def weights(seed=0, **kw):
    return init_vision(VisionConfig(**kw), Rng(seed))


def test_shape():
    w = weights(grid=4, d_v=24)
    assert encode_image(np.zeros((4, 4), int), w).shape == (16, 24)


def test_batch_shape():
    w = weights()
    assert encode_image(np.zeros((3, 4, 4), int), w).shape == (3, 16, 32)


def test_one_cell_change_changes_one_row():
    w = weights()
    a = Rng(1).integers(16, (4, 4))
    b = a.copy()
    b[2, 1] = (b[2, 1] + 3) % 16
    za, zb = encode_image(a, w).data, encode_image(b, w).data
    differs = np.flatnonzero((za != zb).any(axis=1))
    assert differs.tolist() == [2 * 4 + 1]


def test_deterministic():
    img = Rng(2).integers(16, (4, 4))
    assert np.array_equal(encode_image(img, weights(5)).data, encode_image(img, weights(5)).data)


def test_symbol_out_of_alphabet():
    with pytest.raises(ValueError):
        encode_image(np.full((4, 4), 16), weights())
    with pytest.raises(ValueError):
        encode_image(np.full((4, 4), -1), weights())


def test_wrong_grid():
    with pytest.raises(ValueError):
        encode_image(np.zeros((3, 3), int), weights())


@given(st.integers(0, 2**31))
def test_distinct_symbols_distinct_rows(seed):
    w = weights(seed)
    for pos in range(16):
        imgs = np.zeros((16, 4, 4), int)
        imgs[:, pos // 4, pos % 4] = np.arange(16)
        rows = encode_image(imgs, w).data[:, pos]
        assert len({r.tobytes() for r in rows}) == 16


def test_text_format_roundtrip():
    img = Rng(3).integers(16, (4, 4))
    line = format_image(img)
    assert len(line.split()) == 16
    assert np.array_equal(parse_image(line, 4), img)
    with pytest.raises(ValueError):
        parse_image("1 2 3", 4)


def test_config_limits():
    with pytest.raises(ValueError):
        VisionConfig(alphabet=65)
    with pytest.raises(ValueError):
        VisionConfig(grid=0)
