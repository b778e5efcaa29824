import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from deepstamp import dataio, nets
from deepstamp.dataio import ImageBatch, NetworkParams, Watermark
from deepstamp.errors import (
    DeepStampError,
    DimensionError,
    FormatError,
    MagicMismatch,
    RangeError,
    TruncatedPayload,
    VersionMismatch,
)

from conftest import random_batch


def test_single_record_all_white():
    buf = bytes([7]) + bytes([255]) * 3072
    b = dataio.decode_cifar(buf)
    assert len(b) == 1 and b.labels.tolist() == [7]
    assert np.all(b.data == 1.0)


def test_record_layout_is_channel_planar_row_major():
    pixels = np.zeros((3, 32, 32), dtype=np.uint8)
    pixels[1, 2, 5] = 200  # green, row 2, column 5
    b = dataio.decode_cifar(bytes([3]) + pixels.tobytes())
    assert b.data[0, 1, 2, 5] == np.float32(200 / 255)
    assert b.data.sum() == pytest.approx(200 / 255)


def test_truncated_file_reports_offset():
    with pytest.raises(FormatError) as err:
        dataio.decode_cifar(bytes(3072))
    assert err.value.offset == 3072


def test_label_out_of_range():
    good = bytes([1]) + bytes(3072)
    with pytest.raises(RangeError) as err:
        dataio.decode_cifar(good + bytes([10]) + bytes(3072))
    assert err.value.offset == 3073


def test_empty_file_is_format_error():
    with pytest.raises(FormatError):
        dataio.decode_cifar(b"")


def test_cifar_bytes_roundtrip():
    rng = np.random.default_rng(1)
    records = rng.integers(0, 256, size=(5, 3073), dtype=np.uint8)
    records[:, 0] %= 10
    raw = records.tobytes()
    assert dataio.encode_cifar(dataio.decode_cifar(raw)) == raw


def test_requantisation_error_bound():
    b = random_batch(8, seed=3)
    back = dataio.decode_cifar(dataio.encode_cifar(b))
    assert np.abs(back.data - b.data).max() <= 1 / 510 + 1e-7


def test_quantize_rounds_half_to_even():
    # 0.5/255 and 1.5/255 sit exactly between codes
    x = np.array([0.5, 1.5, 2.5]) / 255.0
    assert dataio.quantize(x).tolist() == [0, 2, 2]


def test_image_batch_invariants():
    with pytest.raises(RangeError):
        ImageBatch(np.full((1, 3, 4, 4), 1.5), [0])
    with pytest.raises(RangeError):
        ImageBatch(np.zeros((1, 3, 4, 4)), [10])
    with pytest.raises(DimensionError):
        ImageBatch(np.zeros((0, 3, 4, 4)), [])


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=8000))
def test_cifar_parser_total(buf):
    try:
        b = dataio.decode_cifar(buf)
    except DeepStampError:
        return
    assert len(b) == len(buf) // 3073


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=400))
def test_tensor_and_checkpoint_parsers_total(buf):
    for parse in (dataio.decode_tensor, dataio.decode_checkpoint):
        for candidate in (buf, b"DSTN" + buf, b"DSCK\x01" + buf):
            try:
                parse(candidate)
            except DeepStampError:
                pass


def test_tensor_roundtrip():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((4, 32, 32)).astype(np.float32)
    raw = dataio.encode_tensor(a)
    assert raw[:4] == b"DSTN" and raw[4:7] == bytes([1, 0, 3])
    assert struct.unpack_from("<3I", raw, 7) == (4, 32, 32)
    assert len(raw) == 7 + 12 + 4 * a.size
    assert np.array_equal(dataio.decode_tensor(raw), a)


def test_watermark_from_tensor_file(tmp_path):
    rng = np.random.default_rng(2)
    planes = rng.random((4, 32, 32), dtype=np.float32)
    dataio.save_tensor(planes, tmp_path / "w.dstn")
    w = dataio.load_watermark(tmp_path / "w.dstn")
    assert np.array_equal(w.rgb, planes[:3]) and np.array_equal(w.alpha, planes[3:])


def test_watermark_png_opaque(tmp_path):
    from PIL import Image

    px = np.zeros((32, 32, 4), dtype=np.uint8)
    px[..., 0] = 128
    px[..., 3] = 255
    Image.fromarray(px, "RGBA").save(tmp_path / "w.png")
    w = dataio.load_watermark(tmp_path / "w.png")
    assert np.all(w.alpha == 1.0)
    assert np.allclose(w.rgb[0], 128 / 255)


def test_watermark_png_without_alpha(tmp_path):
    from PIL import Image

    Image.fromarray(np.zeros((32, 32, 3), dtype=np.uint8), "RGB").save(tmp_path / "w.png")
    with pytest.raises(FormatError):
        dataio.load_watermark(tmp_path / "w.png")


def test_watermark_size_mismatch_names_both(tmp_path):
    from PIL import Image

    Image.fromarray(np.zeros((16, 24, 4), dtype=np.uint8), "RGBA").save(tmp_path / "w.png")
    with pytest.raises(DimensionError, match="16x24.*32x32"):
        dataio.load_watermark(tmp_path / "w.png")


def test_default_watermark_png_roundtrip(tmp_path):
    w = dataio.default_watermark()
    dataio.save_watermark_png(w, tmp_path / "w.png")
    back = dataio.load_watermark(tmp_path / "w.png")
    assert np.abs(back.rgba() - w.rgba()).max() <= 1 / 510 + 1e-7


def test_checkpoint_empty(tmp_path):
    p = NetworkParams("W")
    dataio.save_checkpoint(p, tmp_path / "c")
    assert dataio.load_checkpoint(tmp_path / "c") == p


def test_checkpoint_single_zero_entry():
    p = NetworkParams("F-small", {"conv1.w": torch.zeros(4, 7, 3, 3)}, seed=5, step=9)
    back = dataio.decode_checkpoint(dataio.encode_checkpoint(p))
    assert back == p and back.names() == ["conv1.w"]


def test_checkpoint_deterministic_bytes_and_order():
    p = nets.build("F-small", 0)
    a, b = dataio.encode_checkpoint(p), dataio.encode_checkpoint(p.clone())
    assert a == b
    back = dataio.decode_checkpoint(a)
    assert back == p and back.names() == p.names()


def test_checkpoint_distinct_errors():
    raw = dataio.encode_checkpoint(nets.build("D", 0))
    with pytest.raises(MagicMismatch):
        dataio.decode_checkpoint(b"XXXX" + raw[4:])
    with pytest.raises(VersionMismatch):
        dataio.decode_checkpoint(raw[:4] + b"\x02" + raw[5:])
    with pytest.raises(TruncatedPayload):
        dataio.decode_checkpoint(raw[:-3])
    codes = {MagicMismatch.code, VersionMismatch.code, TruncatedPayload.code}
    assert len(codes) == 3


def test_watermark_plane_mismatch():
    with pytest.raises(DimensionError):
        Watermark(np.zeros((3, 32, 32)), np.zeros((1, 16, 16)))
