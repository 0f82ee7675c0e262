"""Binary feature and checkpoint files.

Feature file (little-endian)::

    "GSF1" | version u16 | dtype u8 | rows u32 | cols u32 | payload | [id table]

dtype 1 is float32, dtype 2 float64. The optional id table follows the
payload and holds one ``u32 length + UTF-8 bytes`` record per row.

Checkpoint file (little-endian)::

    "GSW1" | version u16 | variant u8 | D u32 | d u32 | float32 payload | crc32 u32

The payload is the masked weight storage in C order, and the checksum is
``zlib.crc32`` of the payload bytes.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metric import MetricConfig, MetricParams, Variant, param_count

FEATURE_MAGIC = b"GSF1"
CHECKPOINT_MAGIC = b"GSW1"
VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sHBII")
_CKPT_HEADER = struct.Struct("<4sHBII")
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
VARIANT_CODES = {Variant.COSINE: 0, Variant.DIAG: 1, Variant.BLOCKDIAG: 2, Variant.DENSE: 3}
MAX_ELEMENTS = 1 << 34


class FormatError(ValueError):
    """File contents violate the binary layout."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class DtypeError(FormatError):
    pass


class PayloadLengthError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class ConfigMismatchError(FormatError):
    pass


@dataclass
class FeatureMatrix:
    data: np.ndarray
    ids: list | None = None

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def normalized(self) -> bool:
        return bool(np.all(np.abs(np.linalg.norm(self.data.astype(np.float64), axis=1) - 1.0) <= 1e-5))


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise OSError(f"{path}: {e.strerror or e}") from e


def encode_features(data, ids=None, dtype_code: int = 1) -> bytes:
    if dtype_code not in DTYPES:
        raise DtypeError(f"unsupported dtype code {dtype_code}")
    a = np.atleast_2d(np.asarray(data))
    if a.ndim != 2:
        raise FormatError("feature data must be two-dimensional")
    rows, cols = a.shape
    if rows >= 2 ** 32 or cols >= 2 ** 32:
        raise FormatError(f"dimensions {rows}x{cols} overflow the u32 header fields")
    out = [_FEATURE_HEADER.pack(FEATURE_MAGIC, VERSION, dtype_code, rows, cols),
           np.ascontiguousarray(a, dtype=DTYPES[dtype_code]).tobytes()]
    if ids is not None:
        if len(ids) != rows:
            raise FormatError(f"{len(ids)} ids for {rows} rows")
        for s in ids:
            b = str(s).encode("utf-8")
            out.append(struct.pack("<I", len(b)) + b)
    return b"".join(out)


def decode_features(buf: bytes, source: str = "<bytes>") -> FeatureMatrix:
    if len(buf) < _FEATURE_HEADER.size:
        raise PayloadLengthError(f"{source}: file too short for a feature header")
    magic, version, code, rows, cols = _FEATURE_HEADER.unpack_from(buf)
    if magic != FEATURE_MAGIC:
        raise BadMagicError(f"{source}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != VERSION:
        raise VersionError(f"{source}: unsupported version {version}")
    if code not in DTYPES:
        raise DtypeError(f"{source}: unsupported dtype code {code}")
    if rows * cols > MAX_ELEMENTS:
        raise FormatError(f"{source}: {rows}x{cols} exceeds the supported size")
    dt = DTYPES[code]
    start = _FEATURE_HEADER.size
    end = start + rows * cols * dt.itemsize
    if len(buf) < end:
        raise PayloadLengthError(f"{source}: payload length mismatch ({len(buf) - start} bytes, expected {end - start})")
    data = np.frombuffer(buf, dtype=dt, count=rows * cols, offset=start).reshape(rows, cols).astype(dt.newbyteorder("="))
    ids = None
    if len(buf) > end:
        ids, pos = [], end
        for _ in range(rows):
            if pos + 4 > len(buf):
                raise PayloadLengthError(f"{source}: truncated id table")
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            if pos + n > len(buf):
                raise PayloadLengthError(f"{source}: truncated id table")
            try:
                ids.append(buf[pos:pos + n].decode("utf-8"))
            except UnicodeDecodeError as e:
                raise FormatError(f"{source}: id {len(ids)} is not valid UTF-8") from e
            pos += n
        if pos != len(buf):
            raise PayloadLengthError(f"{source}: {len(buf) - pos} trailing bytes after id table")
    return FeatureMatrix(data, ids)


def write_features(path, data, ids=None, dtype_code: int = 1):
    if isinstance(data, FeatureMatrix):
        data, ids = data.data, data.ids if ids is None else ids
    Path(path).write_bytes(encode_features(data, ids, dtype_code))


def read_features(path) -> FeatureMatrix:
    return decode_features(_read(path), str(path))


def encode_checkpoint(params: MetricParams) -> bytes:
    cfg = params.config
    payload = np.ascontiguousarray(params.weights, dtype="<f4").tobytes()
    head = _CKPT_HEADER.pack(CHECKPOINT_MAGIC, VERSION, VARIANT_CODES[cfg.variant], cfg.dim, cfg.block_size)
    return head + payload + struct.pack("<I", zlib.crc32(payload))


def decode_checkpoint(buf: bytes, expected: MetricConfig | None = None, source: str = "<bytes>") -> MetricParams:
    if len(buf) < _CKPT_HEADER.size + 4:
        raise PayloadLengthError(f"{source}: file too short for a checkpoint")
    magic, version, code, D, d = _CKPT_HEADER.unpack_from(buf)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{source}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != VERSION:
        raise VersionError(f"{source}: unsupported version {version}")
    codes = {v: k for k, v in VARIANT_CODES.items()}
    if code not in codes:
        raise FormatError(f"{source}: unknown variant code {code}")
    if codes[code] is not Variant.BLOCKDIAG and d != 0:
        raise FormatError(f"{source}: block size {d} set for a non-block variant")
    try:
        cfg = MetricConfig(codes[code], D, d)
    except ValueError as e:
        raise FormatError(f"{source}: {e}") from e
    n = param_count(cfg)
    start = _CKPT_HEADER.size
    if len(buf) != start + 4 * n + 4:
        raise PayloadLengthError(
            f"{source}: payload length mismatch ({len(buf) - start - 4} bytes, expected {4 * n})")
    payload = buf[start:start + 4 * n]
    (crc,) = struct.unpack_from("<I", buf, start + 4 * n)
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{source}: checksum mismatch")
    if expected is not None and expected != cfg:
        raise ConfigMismatchError(f"{source}: checkpoint holds {cfg}, expected {expected}")
    w = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(cfg.weight_shape)
    try:
        return MetricParams(cfg, w)
    except ValueError as e:
        raise FormatError(f"{source}: {e}") from e


def save_checkpoint(path, params: MetricParams):
    Path(path).write_bytes(encode_checkpoint(params))


def load_checkpoint(path, expected: MetricConfig | None = None) -> MetricParams:
    return decode_checkpoint(_read(path), expected, str(path))
