"""
Checkpoint file format (little-endian):

    magic     b"GSGAN1\\n"
    version   u32
    config    u32 length + UTF-8 "key=value" lines, keys sorted
    records   name length u32, name bytes, dtype tag u8 (0=f32, 1=f64),
              rank u8, dims u64 each, raw values; repeated up to the trailer
    trailer   u32 CRC32 of every preceding byte

Also used for extractor weights (config key "kind").
"""
from __future__ import annotations

import logging
import os
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError

logger = logging.getLogger(__name__)

MAGIC = b"GSGAN1\n"
VERSION = 1

_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {tag: dt for dt, tag in _DTYPE_TAGS.items()}


@dataclass
class Checkpoint:
    config: "OrderedDict[str, str]" = field(default_factory=OrderedDict)
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    version: int = VERSION

    def config_text(self) -> str:
        return "".join(f"{key}={self.config[key]}\n" for key in sorted(self.config))

    def get(self, key: str, default=None):
        return self.config.get(key, default)

    def tensor(self, name: str) -> np.ndarray:
        try:
            return self.tensors[name]
        except KeyError:
            raise ValidationError("Checkpoint has no tensor %(n)s.", code="invalid_spec", params={"n": name}) from None


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", ckpt.version)
    text = ckpt.config_text().encode("utf-8")
    out += struct.pack("<I", len(text)) + text
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in _DTYPE_TAGS:
            raise ValidationError("Tensor %(n)s has unsupported dtype %(d)s.", code="bad_value", params={"n": name, "d": str(arr.dtype)})
        raw_name = name.encode("utf-8")
        out += struct.pack("<I", len(raw_name)) + raw_name
        out += struct.pack("<BB", _DTYPE_TAGS[dtype], arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=dtype).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def save_checkpoint(path, ckpt: Checkpoint) -> int:
    """Write atomically (temp file + rename). Returns the number of bytes written."""
    path = Path(path)
    payload = encode_checkpoint(ckpt)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)
    logger.info("checkpoint saved path=%s bytes=%s iter=%s", path, len(payload), ckpt.get("state.g_iter", "-"))
    return len(payload)


class _Reader:
    def __init__(self, data: bytes, path, end: int, code: str):
        self.data = data
        self.pos = 0
        self.path = path
        self.end = end
        self.code = code

    def take(self, n: int) -> bytes:
        stop = self.pos + n
        if stop > self.end:
            raise ValidationError(
                "%(path)s: needed %(need)s bytes at offset %(pos)s, record area ends at %(end)s.",
                code=self.code,
                params={"path": str(self.path), "need": n, "pos": self.pos, "end": self.end},
            )
        chunk = self.data[self.pos:stop]
        self.pos = stop
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes, path="<bytes>") -> Checkpoint:
    """
    Order of checks: magic, header length, version, CRC32, then records.
    A file too short for its header is truncated; any other damage shows up
    as a checksum failure before a single record is parsed.
    """
    if not data.startswith(MAGIC):
        if data and MAGIC.startswith(data):
            raise ValidationError("%(path)s is truncated.", code="truncated", params={"path": str(path)})
        raise ValidationError("%(path)s is not a checkpoint file.", code="bad_magic", params={"path": str(path)})
    body_end = len(data) - 4
    header = _Reader(data, path, body_end, "truncated")
    header.take(len(MAGIC))
    (version,) = header.unpack("<I")
    if version != VERSION:
        raise ValidationError(
            "%(path)s has format version %(v)s; this build reads version %(want)s.",
            code="version",
            params={"path": str(path), "v": version, "want": VERSION},
        )
    (text_len,) = header.unpack("<I")
    raw_text = header.take(text_len)

    (stored,) = struct.unpack("<I", data[body_end:])
    if zlib.crc32(data[:body_end]) & 0xFFFFFFFF != stored:
        raise ValidationError("%(path)s failed its CRC32 check.", code="checksum", params={"path": str(path)})

    # records run up to the trailer; no count field
    reader = _Reader(data, path, body_end, "malformed")
    reader.pos = header.pos
    tensors = OrderedDict()
    while reader.pos < body_end:
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        tag, rank = reader.unpack("<BB")
        dims = reader.unpack(f"<{rank}Q")
        dtype = _TAG_DTYPES.get(tag)
        if dtype is None:
            raise ValidationError("%(path)s: unknown dtype tag %(t)s.", code="malformed", params={"path": str(path), "t": tag})
        nbytes = int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize
        tensors[name] = np.frombuffer(reader.take(nbytes), dtype=dtype).reshape(dims).copy()

    config = OrderedDict()
    for line in raw_text.decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        config[key] = value
    return Checkpoint(config=config, tensors=tensors, version=version)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ValidationError("Cannot read %(path)s: %(err)s", code="bad_value", params={"path": str(path), "err": exc}) from exc
    ckpt = decode_checkpoint(data, path)
    logger.info("checkpoint loaded path=%s bytes=%s tensors=%s", path, len(data), len(ckpt.tensors))
    return ckpt
