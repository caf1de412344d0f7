import numpy as np
import pytest

from nivec.blobio import BlobFormatError, read_blob, write_blob


def test_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = [("alpha", rng.standard_normal((3, 4))),
              ("beta", rng.standard_normal(7))]
    path = tmp_path / "blob.bin"
    write_blob(path, b"TEST", {"kind": "demo", "note": 3}, arrays)
    header, loaded = read_blob(path, b"TEST")
    assert header["kind"] == "demo" and header["note"] == 3
    for name, a in arrays:
        np.testing.assert_array_equal(loaded[name], a)
        assert loaded[name].dtype == np.float64


def test_write_is_byte_deterministic(tmp_path):
    rng = np.random.default_rng(1)
    arrays = [("x", rng.standard_normal((5, 2)))]
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    write_blob(p1, b"TEST", {"b": 1, "a": 2}, arrays)
    write_blob(p2, b"TEST", {"a": 2, "b": 1}, arrays)
    assert p1.read_bytes() == p2.read_bytes()


def test_magic_mismatch(tmp_path):
    path = tmp_path / "blob.bin"
    write_blob(path, b"AAAA", {}, [("x", np.zeros(1))])
    with pytest.raises(BlobFormatError):
        read_blob(path, b"BBBB")


def test_truncated_payload(tmp_path):
    path = tmp_path / "blob.bin"
    write_blob(path, b"TEST", {}, [("x", np.zeros(8))])
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(BlobFormatError):
        read_blob(path, b"TEST")
