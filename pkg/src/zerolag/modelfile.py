"""Versioned binary model files.

Layout (all integers little-endian)::

    b"IFVP"                 magic
    uint32                  format version
    uint32                  header length in bytes
    header                  UTF-8 JSON: {"config": ..., "manifest": [{"name", "shape"}, ...]}
    float32[...]            weights, concatenated in manifest order
    uint32                  CRC32 of the weight payload
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig, weight_shapes

MAGIC = b"IFVP"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


class BadMagicError(ModelFormatError):
    pass


class VersionError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


class TruncatedFileError(ModelFormatError):
    pass


def encode_model(model: Model) -> bytes:
    manifest = [{"name": n, "shape": list(w.shape)} for n, w in model.weights.items()]
    header = json.dumps({"config": model.config.to_dict(), "manifest": manifest},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(w, dtype="<f4").tobytes() for w in model.weights.values())
    return b"".join([
        MAGIC,
        struct.pack("<II", FORMAT_VERSION, len(header)),
        header,
        payload,
        struct.pack("<I", zlib.crc32(payload)),
    ])


def decode_model(blob: bytes) -> Model:
    if len(blob) < 12:
        raise TruncatedFileError("file too short for the fixed header")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}; not a model file")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {version} (this build reads {FORMAT_VERSION})")
    if len(blob) < 12 + hlen:
        raise TruncatedFileError("file ends inside the JSON header")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        manifest = header["manifest"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"malformed header: {exc}") from None
    sizes = [int(np.prod(m["shape"], dtype=np.int64)) for m in manifest]
    start = 12 + hlen
    end = start + 4 * sum(sizes)
    if len(blob) < end + 4:
        raise TruncatedFileError(f"expected {end + 4} bytes, file has {len(blob)}")
    if len(blob) > end + 4:
        raise ModelFormatError(f"{len(blob) - end - 4} trailing bytes after the checksum")
    payload = blob[start:end]
    (crc,) = struct.unpack_from("<I", blob, end)
    if zlib.crc32(payload) != crc:
        raise ChecksumError("payload CRC32 mismatch; file is corrupt")
    flat = np.frombuffer(payload, dtype="<f4")
    weights = {}
    offset = 0
    for m, n in zip(manifest, sizes):
        weights[m["name"]] = flat[offset:offset + n].reshape(m["shape"]).astype(np.float32)
        offset += n
    expected = weight_shapes(config)
    if {k: tuple(v.shape) for k, v in weights.items()} != expected:
        raise ModelFormatError("weight manifest does not match the model configuration")
    return Model(config, weights)


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(encode_model(model))


def load_model(path) -> Model:
    return decode_model(Path(path).read_bytes())
