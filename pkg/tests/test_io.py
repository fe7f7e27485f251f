import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oasflow.gradcheck import reduced_config
from oasflow.io import (CheckpointError, FloFormatError, flow_to_color, load_checkpoint, make_colorwheel,
                        read_flo, read_image, read_ppm, save_checkpoint, write_flo, write_image, write_ppm)
from oasflow.io.checkpoint import encode_checkpoint
from oasflow.network import init_params
from oasflow.tensor import Param, ParamStore

# --------------------------------------------------------------------------- .flo


def test_two_by_two_zero_flow_is_44_bytes(tmp_path):
    path = tmp_path / "z.flo"
    write_flo(path, np.zeros((1, 2, 2, 2), np.float32))
    raw = path.read_bytes()
    assert len(raw) == 44
    assert raw[:4] == bytes([0x50, 0x49, 0x45, 0x48]) == b"PIEH"
    assert struct.unpack("<f", raw[:4])[0] == 202021.25
    assert struct.unpack("<ii", raw[4:12]) == (2, 2)


def test_layout_is_width_height_then_interleaved_uv(tmp_path):
    flow = np.zeros((1, 2, 2, 3), np.float32)
    flow[0, 0] = np.arange(6).reshape(2, 3)
    flow[0, 1] = -np.arange(6).reshape(2, 3)
    path = tmp_path / "f.flo"
    write_flo(path, flow)
    raw = path.read_bytes()
    assert struct.unpack("<ii", raw[4:12]) == (3, 2)
    vals = np.frombuffer(raw[12:], "<f4")
    assert vals[:6].tolist() == [0, 0, 1, -1, 2, -2]


@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 10_000))
def test_flo_round_trip_bitwise(h, w, seed):
    import tempfile
    from pathlib import Path

    flow = np.random.default_rng(seed).standard_normal((1, 2, h, w)).astype(np.float32) * 50
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "r.flo"
        write_flo(path, flow)
        assert read_flo(path).tobytes() == flow.tobytes()


def test_flo_errors(tmp_path):
    bad = tmp_path / "bad.flo"
    bad.write_bytes(b"XXXX" + struct.pack("<ii", 1, 1) + b"\0" * 8)
    with pytest.raises(FloFormatError, match="sentinel"):
        read_flo(bad)
    short = tmp_path / "short.flo"
    short.write_bytes(b"PIEH" + struct.pack("<ii", 4, 4) + b"\0" * 16)
    with pytest.raises(FloFormatError, match="truncated"):
        read_flo(short)
    tiny = tmp_path / "tiny.flo"
    tiny.write_bytes(b"PIE")
    with pytest.raises(FloFormatError):
        read_flo(tiny)
    with pytest.raises(ValueError):
        write_flo(tmp_path / "x.flo", np.zeros((2, 2, 3, 3)))


# --------------------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_preserves_order_and_bits(tmp_path):
    params = init_params(reduced_config(), seed=3)
    path = tmp_path / "m.oasn"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert loaded.names() == params.names()
    for a, b in zip(params, loaded):
        assert a.shape == b.shape and a.data.tobytes() == b.data.tobytes()


def test_checkpoint_header_layout():
    store = ParamStore([Param("ab", np.arange(6, dtype=np.float32).reshape(2, 3))])
    raw = encode_checkpoint(store)
    assert raw[:4] == b"OASN"
    assert struct.unpack_from("<III", raw, 4) == (1, 1, 2)
    assert raw[16:18] == b"ab"
    assert struct.unpack_from("<III", raw, 18) == (2, 2, 3)
    assert np.frombuffer(raw[30:], "<f4").tolist() == list(range(6))
    assert len(raw) == 30 + 24


def test_checkpoint_errors(tmp_path):
    raw = encode_checkpoint(init_params(reduced_config()))
    cases = {"magic": b"NOPE" + raw[4:], "truncated": raw[:-3], "trailing": raw + b"\0",
             "version": raw[:4] + struct.pack("<I", 9) + raw[8:]}
    for name, blob in cases.items():
        path = tmp_path / f"{name}.oasn"
        path.write_bytes(blob)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


# --------------------------------------------------------------------------- images


def test_ppm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (1, 3, 5, 7)).astype(np.float32) / 255
    write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)


def test_ppm_with_comment_and_16_bit(tmp_path):
    body = np.array([0, 65535, 32768] * 2, ">u2").tobytes()
    (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n2 1\n65535\n" + body)
    img = read_ppm(tmp_path / "c.ppm")
    assert img.shape == (1, 3, 1, 2)
    assert img[0, :, 0, 0].tolist() == pytest.approx([0, 1, 32768 / 65535])


def test_ppm_rejects_other_formats(tmp_path):
    (tmp_path / "p3.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "p3.ppm")


def test_png_round_trip(tmp_path, rng):
    pytest.importorskip("PIL")
    img = rng.integers(0, 256, (1, 3, 4, 6)).astype(np.float32) / 255
    write_image(tmp_path / "a.png", img)
    np.testing.assert_array_equal(read_image(tmp_path / "a.png"), img)


# --------------------------------------------------------------------------- colour wheel

# the 55 bins, built once by hand from the segment lengths
WHEEL_TABLE = (
    [(255, int(255 * i / 15), 0) for i in range(15)]
    + [(255 - int(255 * i / 6), 255, 0) for i in range(6)]
    + [(0, 255, int(255 * i / 4)) for i in range(4)]
    + [(0, 255 - int(255 * i / 11), 255) for i in range(11)]
    + [(int(255 * i / 13), 0, 255) for i in range(13)]
    + [(255, 0, 255 - int(255 * i / 6)) for i in range(6)]
)


def test_colorwheel_matches_table():
    wheel = make_colorwheel()
    assert wheel.shape == (55, 3)
    assert [tuple(int(v) for v in row) for row in wheel] == WHEEL_TABLE


def test_zero_flow_is_white():
    assert np.all(flow_to_color(np.zeros((1, 2, 4, 5))) == 255)


def test_full_positive_u_is_wheel_zero_colour():
    flow = np.zeros((1, 2, 1, 1))
    flow[0, 0] = 2.0
    assert flow_to_color(flow, max_mag=2.0)[0, 0].tolist() == list(WHEEL_TABLE[0])


def hue(rgb):
    x = rgb.astype(np.float64) / 255
    mx, mn = x.max(-1), x.min(-1)
    return (x - mn[..., None]) / np.maximum(mx - mn, 1e-9)[..., None]


@given(st.integers(0, 10_000), st.floats(0.2, 0.9))
def test_scaling_below_saturation_keeps_hue(seed, k):
    rng = np.random.default_rng(seed)
    flow = rng.uniform(-1, 1, (1, 2, 4, 4))
    flow /= np.sqrt((flow**2).sum(1, keepdims=True)).max()
    a = flow_to_color(flow, max_mag=1.0)
    b = flow_to_color(k * flow, max_mag=1.0)
    strong = (a.max(-1).astype(int) - a.min(-1)) > 40
    assert np.abs(hue(a) - hue(b))[strong].max() < 0.08
    assert b.min() >= a.min()  # smaller magnitude is paler


def test_default_normalisation_is_99th_percentile():
    flow = np.zeros((1, 2, 10, 10))
    flow[0, 0] = np.linspace(0, 10, 100).reshape(10, 10)
    p99 = np.percentile(np.abs(flow[0, 0]), 99)
    np.testing.assert_array_equal(flow_to_color(flow), flow_to_color(flow, max_mag=p99))
