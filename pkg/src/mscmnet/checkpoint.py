"""Checkpoint serialization for named float32 tensors.

File layout (little-endian): magic "MSCK", u32 version, u64 tensor count;
per tensor: u16 name length, UTF-8 name, u8 dtype code (0 = float32),
u8 rank, rank u64 dims, raw payload; trailing CRC32 over everything before
it. Save -> load round-trips are bit-exact.
"""

import zlib

import numpy as np

from .errors import DataError, VersionError

MAGIC = b"MSCK"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4")}


def save_checkpoint(path, tensors):
    """tensors: ordered {name: float32 ndarray}."""
    payload = bytearray()
    payload += MAGIC
    payload += np.uint32(VERSION).tobytes()
    payload += np.uint64(len(tensors)).tobytes()
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype != np.float32:
            raise DataError(f"checkpoint tensor {name} must be float32, got {arr.dtype}")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise DataError(f"checkpoint tensor name too long: {name[:40]}...")
        payload += np.uint16(len(encoded)).tobytes()
        payload += encoded
        payload += bytes([0, arr.ndim])
        for dim in arr.shape:
            payload += np.uint64(dim).tobytes()
        payload += arr.tobytes()
    payload += np.uint32(zlib.crc32(bytes(payload)) & 0xFFFFFFFF).tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(bytes(payload))
    except OSError as exc:
        raise DataError(f"cannot write checkpoint: {exc}") from exc


def load_checkpoint(path):
    """Returns an ordered {name: float32 ndarray}; validates CRC and version."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint: {exc}") from exc
    if len(raw) < 20 or raw[:4] != MAGIC:
        raise DataError(f"not a checkpoint file: {path}")
    stored = int(np.frombuffer(raw[-4:], np.uint32)[0])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored:
        raise DataError(f"checkpoint checksum mismatch: {path}")
    version = int(np.frombuffer(raw, np.uint32, 1, 4)[0])
    if version != VERSION:
        raise VersionError(f"checkpoint version {version}, expected {VERSION}")
    count = int(np.frombuffer(raw, np.uint64, 1, 8)[0])
    body = raw[:-4]
    tensors = {}
    off = 16
    for i in range(count):
        try:
            name_len = int(np.frombuffer(body, np.uint16, 1, off)[0])
            off += 2
            name = body[off:off + name_len].decode("utf-8")
            off += name_len
            dtype_code, rank = body[off], body[off + 1]
            off += 2
            if dtype_code not in _DTYPE_CODES:
                raise DataError(f"checkpoint tensor {name}: unknown dtype code {dtype_code}")
            dims = tuple(int(d) for d in np.frombuffer(body, np.uint64, rank, off))
            off += 8 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            dtype = _DTYPE_CODES[dtype_code]
            arr = np.frombuffer(body, dtype, size, off).reshape(dims).copy()
            off += size * dtype.itemsize
        except (ValueError, IndexError) as exc:
            raise DataError(f"checkpoint truncated at tensor {i}: {path}") from exc
        tensors[name] = arr
    if off != len(body):
        raise DataError(f"checkpoint has {len(body) - off} trailing bytes: {path}")
    return tensors
