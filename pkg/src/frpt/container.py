"""Binary container framing shared by checkpoints and dataset files.

Layout: 4 magic bytes, u32 little-endian format version, u32 little-endian
header length, UTF-8 JSON header, then raw little-endian float64 blocks in
header order.  The header's ``blocks`` entry lists ``[name, shape]`` pairs
so files are self-describing; round trips are bit-exact.
"""

import hashlib
import json
import struct

import numpy as np

from .exceptions import BadMagic, TruncatedFile

FORMAT_VERSION = 1


def write_container(path, magic, header, blocks):
    """Write ``blocks`` (name -> float64 array) under a JSON ``header``."""
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    header = dict(header)
    header["blocks"] = [[name, list(np.asarray(arr).shape)] for name, arr in blocks.items()]
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for arr in blocks.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_container(path, magic):
    """Read a container written by :func:`write_container`.

    Returns ``(header, blocks)`` with float64 arrays shaped per the header.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise TruncatedFile(f"{path}: shorter than container preamble")
    if raw[:4] != magic:
        raise BadMagic(f"{path}: expected magic {magic!r}, found {raw[:4]!r}")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise BadMagic(f"{path}: unsupported format version {version}")
    if len(raw) < 12 + hlen:
        raise TruncatedFile(f"{path}: truncated JSON header")
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    blocks = {}
    for name, shape in header["blocks"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if len(raw) < offset + nbytes:
            raise TruncatedFile(f"{path}: block {name!r} truncated")
        blocks[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    return header, blocks


def file_digest(path):
    """Hex SHA-256 of a file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_digest(obj):
    """Hex SHA-256 of an object's canonical JSON encoding."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()
