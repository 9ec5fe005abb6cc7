import struct

import numpy as np
import pytest

from vidstereo.io_formats import (
    FLO_MAGIC, FormatError, dumps_container, encode_disp_png16, loads_container,
    read_container, read_disp_png16, read_flo, read_image, read_mask, read_pfm,
    write_container, write_disp_png16, write_flo, write_image, write_mask, write_pfm,
)


def test_pfm_roundtrip_bit_identical(tmp_path, np_rng):
    disp = np_rng.normal(size=(13, 17)).astype(np.float32) * 40
    write_pfm(tmp_path / "d.pfm", disp)
    back = read_pfm(tmp_path / "d.pfm")
    assert back.dtype == np.float32
    assert back.tobytes() == disp.tobytes()


def test_pfm_color_roundtrip(tmp_path, np_rng):
    img = np_rng.random((5, 4, 3)).astype(np.float32)
    write_pfm(tmp_path / "c.pfm", img)
    assert np.array_equal(read_pfm(tmp_path / "c.pfm"), img)


def test_pfm_negative_scale_is_little_endian_bottom_up(tmp_path):
    rows = np.array([[1.0, 2.0], [3.0, 4.0]], dtype="<f4")
    # hand-built file: rows stored bottom-up
    payload = rows[::-1].tobytes()
    (tmp_path / "h.pfm").write_bytes(b"Pf\n2 2\n-1.0\n" + payload)
    assert np.array_equal(read_pfm(tmp_path / "h.pfm"), rows)


def test_pfm_big_endian_accepted(tmp_path):
    rows = np.array([[1.5, -2.0, 7.0]], dtype=">f4")
    (tmp_path / "b.pfm").write_bytes(b"Pf\n3 1\n1.0\n" + rows.tobytes())
    assert np.array_equal(read_pfm(tmp_path / "b.pfm"), rows.astype(np.float32))


def test_pfm_writer_header(tmp_path):
    write_pfm(tmp_path / "d.pfm", np.zeros((2, 3), np.float32))
    assert (tmp_path / "d.pfm").read_bytes().startswith(b"Pf\n3 2\n-1")


@pytest.mark.parametrize("data", [
    b"",
    b"Px\n2 2\n-1.0\n" + bytes(16),
    b"Pf\n2 x\n-1.0\n" + bytes(16),
    b"Pf\n2 2\n-1.0\n" + bytes(15),
    b"Pf\n2 2\n0.0\n" + bytes(16),
])
def test_pfm_malformed_raises_format_error(tmp_path, data):
    (tmp_path / "bad.pfm").write_bytes(data)
    with pytest.raises(FormatError) as err:
        read_pfm(tmp_path / "bad.pfm")
    assert err.value.offset is not None


def test_flo_roundtrip_bit_identical(tmp_path, np_rng):
    flow = np_rng.normal(size=(9, 11, 2)).astype(np.float32)
    write_flo(tmp_path / "f.flo", flow)
    raw = (tmp_path / "f.flo").read_bytes()
    assert struct.unpack("<f", raw[:4])[0] == FLO_MAGIC
    assert read_flo(tmp_path / "f.flo").tobytes() == flow.tobytes()


def test_flo_bad_magic(tmp_path):
    (tmp_path / "f.flo").write_bytes(struct.pack("<fii", 1.0, 1, 1) + bytes(8))
    with pytest.raises(FormatError):
        read_flo(tmp_path / "f.flo")


@pytest.mark.parametrize("extra", [-4, 4])
def test_flo_payload_length_mismatch(tmp_path, extra):
    body = bytes(3 * 2 * 2 * 4 + extra)
    (tmp_path / "f.flo").write_bytes(struct.pack("<fii", FLO_MAGIC, 3, 2) + body)
    with pytest.raises(FormatError):
        read_flo(tmp_path / "f.flo")


def test_png16_scale_and_invalid(tmp_path):
    disp = np.array([[1.0, 0.0, 2.5]], dtype=np.float32)
    valid = np.array([[True, False, True]])
    code = encode_disp_png16(disp, valid)
    assert code.tolist() == [[256, 0, 640]]
    write_disp_png16(tmp_path / "d.png", disp, valid)
    back, ok = read_disp_png16(tmp_path / "d.png")
    assert ok.tolist() == [[True, False, True]]
    assert back[0, 0] == 1.0 and back[0, 1] == 0.0


def test_png16_quantization_bound(tmp_path, np_rng):
    disp = (np_rng.random((64, 96)) * 200).astype(np.float32)
    write_disp_png16(tmp_path / "d.png", disp)
    back, ok = read_disp_png16(tmp_path / "d.png")
    assert ok[disp >= 1 / 512].all()
    assert np.abs(back - disp)[disp >= 1 / 512].max() <= 1 / 512


def test_png16_code_sweep():
    # every code decodes within half a step of the value it was encoded from
    codes = np.arange(1, 65536, dtype=np.float64)
    for offset in (-0.5 + 1e-7, 0.0, 0.5 - 1e-7):
        d = (codes + offset) / 256.0
        enc = encode_disp_png16(d).astype(np.float64)
        assert np.abs(enc / 256.0 - d).max() <= 1 / 512 + 1e-12


def test_png16_rejects_8bit(tmp_path):
    write_image(tmp_path / "i.png", np.zeros((2, 2, 3)))
    with pytest.raises(FormatError):
        read_disp_png16(tmp_path / "i.png")


def test_image_and_mask_roundtrip(tmp_path, np_rng):
    img = np.round(np_rng.random((6, 7, 3)) * 255) / 255
    write_image(tmp_path / "i.png", img)
    assert np.allclose(read_image(tmp_path / "i.png"), img, atol=1e-6)
    mask = np_rng.random((6, 7)) > 0.5
    write_mask(tmp_path / "m.png", mask)
    assert np.array_equal(read_mask(tmp_path / "m.png"), mask)


def test_container_roundtrip(tmp_path, np_rng):
    arrays = {
        "w": np_rng.normal(size=(3, 4, 5)).astype(np.float32),
        "idx": np.arange(7, dtype=np.int64),
        "flag": np.array(True),
        "half": np_rng.normal(size=(2,)).astype(np.float16),
        "big": np.arange(4, dtype=">f8"),
    }
    meta = {"step": 3, "note": "x"}
    write_container(tmp_path / "c.bin", arrays, meta)
    back, m = read_container(tmp_path / "c.bin")
    assert m == meta
    assert set(back) == set(arrays)
    for k, v in arrays.items():
        assert back[k].shape == v.shape
        assert np.array_equal(back[k], v)
        assert back[k].dtype.newbyteorder("<") == v.dtype.newbyteorder("<")
    assert back["w"].tobytes() == arrays["w"].tobytes()


def test_container_is_deterministic(np_rng):
    a = {"b": np.ones(3), "a": np.zeros((2, 2))}
    assert dumps_container(a, {"k": 1}) == dumps_container(dict(reversed(a.items())), {"k": 1})


def test_container_corruption(np_rng):
    blob = dumps_container({"x": np.arange(10.0)})
    with pytest.raises(FormatError):
        loads_container(b"NOTMAGIC" + blob[8:])
    with pytest.raises(FormatError):
        loads_container(blob[:-3])
