"""Versioned little-endian checkpoint files.

Layout::

    b"MILRCKPT"                 magic
    u32 version
    u32 len, utf-8 kind          e.g. "encoder", "milr"
    u32 len, utf-8 JSON config   keys sorted
    u32 parameter count
    per parameter:
        u32 len, utf-8 name
        u32 ndim, u32 dims...
        float64 LE values, row-major

Parameters are written in declaration order, so reloading is bit-exact.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"MILRCKPT"
VERSION = 1


def _put_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _get(buf: io.BytesIO, n: int) -> bytes:
    raw = buf.read(n)
    if len(raw) != n:
        raise FormatError("checkpoint truncated")
    return raw


def _get_u32(buf: io.BytesIO) -> int:
    return struct.unpack("<I", _get(buf, 4))[0]


def _get_str(buf: io.BytesIO) -> str:
    return _get(buf, _get_u32(buf)).decode("utf-8")


def encode(kind: str, config: dict, params: list[tuple[str, np.ndarray]]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _put_str(buf, kind)
    _put_str(buf, json.dumps(config, sort_keys=True))
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params:
        _put_str(buf, name)
        arr = np.asarray(arr, dtype="<f8")
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def decode(raw: bytes, expected_kind: str | None = None):
    """Return ``(kind, config, [(name, array), ...])``."""
    buf = io.BytesIO(raw)
    if _get(buf, len(MAGIC)) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version = _get_u32(buf)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    kind = _get_str(buf)
    if expected_kind is not None and kind != expected_kind:
        raise FormatError(f"checkpoint holds {kind!r}, expected {expected_kind!r}")
    config = json.loads(_get_str(buf))
    params = []
    for _ in range(_get_u32(buf)):
        name = _get_str(buf)
        ndim = _get_u32(buf)
        shape = struct.unpack(f"<{ndim}I", _get(buf, 4 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(_get(buf, 8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        params.append((name, arr))
    if buf.read(1):
        raise FormatError("trailing bytes after checkpoint")
    return kind, config, params


def save(path, kind: str, config: dict, params: list[tuple[str, np.ndarray]]) -> Path:
    path = Path(path)
    path.write_bytes(encode(kind, config, params))
    return path


def load(path, expected_kind: str | None = None):
    return decode(Path(path).read_bytes(), expected_kind)


def digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_encoder(encoder, path) -> Path:
    params = [(n, p.data) for n, p in encoder.named_parameters()]
    return save(path, "encoder", encoder.config.to_dict(), params)


def load_encoder(path):
    from .nn import Encoder, EncoderConfig

    _, config, params = load(path, "encoder")
    encoder = Encoder(EncoderConfig.from_dict(config))
    named = list(encoder.named_parameters())
    if [n for n, _ in named] != [n for n, _ in params]:
        raise FormatError("checkpoint parameter names do not match the encoder layout")
    for (_, p), (_, arr) in zip(named, params):
        if p.shape != arr.shape:
            raise FormatError(f"parameter shape mismatch {p.shape} vs {arr.shape}")
        p.data = arr
    return encoder
