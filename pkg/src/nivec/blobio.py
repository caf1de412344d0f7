"""Shared container format for model and statistics artifacts.

Layout: 4-byte magic, u32 version, u32 header length, UTF-8 JSON header
(sorted keys, so identical content gives identical bytes), then the listed
arrays concatenated as little-endian float64. The header's "arrays" entry
records name and shape of each block in payload order.
"""

import json
import struct

import numpy as np

BLOB_VERSION = 1


class BlobFormatError(ValueError):
    pass


def write_blob(path, magic, header, arrays):
    """arrays: ordered list of (name, ndarray); header: JSON-safe dict."""
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    header = dict(header)
    header["arrays"] = [{"name": name, "shape": list(np.asarray(a).shape)}
                        for name, a in arrays]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic if isinstance(magic, bytes) else magic.encode("ascii"))
        f.write(struct.pack("<II", BLOB_VERSION, len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_blob(path, magic):
    """Return (header dict, {name: float64 array})."""
    expect = magic if isinstance(magic, bytes) else magic.encode("ascii")
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) < 12:
            raise BlobFormatError(f"{path}: truncated header")
        if head[:4] != expect:
            raise BlobFormatError(f"{path}: bad magic {head[:4]!r}, expected {expect!r}")
        version, hlen = struct.unpack("<II", head[4:12])
        if version != BLOB_VERSION:
            raise BlobFormatError(f"{path}: unsupported version {version}")
        try:
            header = json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise BlobFormatError(f"{path}: corrupt header: {exc}") from exc
        payload = f.read()
    arrays = {}
    offset = 0
    for entry in header.get("arrays", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(payload):
            raise BlobFormatError(f"{path}: truncated payload at array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(
            payload[offset:offset + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        offset += nbytes
    return header, arrays
