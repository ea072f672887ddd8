"""On-disk dataset format.

A dataset directory holds two files, all integers little-endian:

manifest.msd
    magic "MSCM" | u32 version=1 | generation parameters (u32 num_identities,
    u32 samples_per_id, u32 image_h, u32 image_w, u32 cams_per_modality,
    f64 modality_gap, f64 noise_std, u64 seed) | u64 record count | records
    (u32 identity, u8 modality 0=V 1=T, u16 camera, u64 offset, u64 length)
    | u32 CRC32 over everything before it.

data.bin
    per record: raw 8-bit pixel block (H*W*3 for V, H*W for T) immediately
    followed by u32 CRC32 of that block. Manifest offsets point at the pixel
    block; length excludes the checksum.
"""

import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, DataError, VersionError

MAGIC = b"MSCM"
VERSION = 1

_PARAMS_FMT = "<5I2dQ"


@dataclass(frozen=True)
class GenParams:
    num_identities: int
    samples_per_id: int
    image_h: int = 96
    image_w: int = 48
    cams_per_modality: int = 2
    modality_gap: float = 0.35
    noise_std: float = 0.02
    seed: int = 0

    def validate(self):
        if self.num_identities < 2:
            raise ConfigError("need >= 2 identities")
        if self.samples_per_id < 1:
            raise ConfigError("need >= 1 sample per identity per modality")
        if self.image_h < 8 or self.image_w < 8:
            raise ConfigError(f"image size {self.image_h}x{self.image_w} below 8x8 minimum")
        if self.cams_per_modality < 1:
            raise ConfigError("need >= 1 camera per modality")
        for name in ("modality_gap", "noise_std"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must fit in 64 bits")
        return self


@dataclass
class SampleRecord:
    identity: int
    modality: str  # "V" | "T"
    camera: int
    pixels: np.ndarray  # uint8 [H, W, 3] for V, [H, W, 1] for T

    def float_chw(self, dtype=np.float32):
        """Pixels as [C, H, W] floats in [0, 1]."""
        return (self.pixels.astype(dtype) / 255.0).transpose(2, 0, 1)


class Dataset:
    def __init__(self, params, records):
        self.params = params
        self.records = records
        self._by_key = {}
        for rec in records:
            self._by_key.setdefault((rec.identity, rec.modality), []).append(rec)

    def identities(self):
        return sorted({rec.identity for rec in self.records})

    def records_of(self, identity, modality):
        return self._by_key.get((identity, modality), [])

    def subset(self, identities):
        keep = set(identities)
        return Dataset(self.params, [r for r in self.records if r.identity in keep])


def _pack_manifest(params, entries):
    body = bytearray()
    body += MAGIC
    body += struct.pack("<I", VERSION)
    body += struct.pack(
        _PARAMS_FMT,
        params.num_identities, params.samples_per_id, params.image_h, params.image_w,
        params.cams_per_modality, params.modality_gap, params.noise_std, params.seed,
    )
    body += struct.pack("<Q", len(entries))
    for ident, modality, camera, offset, length in entries:
        body += struct.pack("<IBHQQ", ident, modality, camera, offset, length)
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    return bytes(body)


def write_dataset(params, records, out_dir):
    """Write records to out_dir/{manifest.msd, data.bin}."""
    params.validate()
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    blob = bytearray()
    for rec in records:
        raw = np.ascontiguousarray(rec.pixels, dtype=np.uint8).tobytes()
        entries.append((
            rec.identity, 0 if rec.modality == "V" else 1, rec.camera, len(blob), len(raw),
        ))
        blob += raw
        blob += struct.pack("<I", zlib.crc32(raw))
    manifest_path = os.path.join(out_dir, "manifest.msd")
    try:
        with open(os.path.join(out_dir, "data.bin"), "wb") as f:
            f.write(bytes(blob))
        with open(manifest_path, "wb") as f:
            f.write(_pack_manifest(params, entries))
    except OSError as e:
        raise DataError(f"cannot write dataset to {out_dir}: {e}") from e
    return manifest_path


def _read_exact(buf, offset, size, what):
    if offset + size > len(buf):
        raise DataError(f"manifest truncated reading {what}")
    return buf[offset:offset + size], offset + size


def load_dataset(path):
    """Load a dataset directory, verifying every checksum."""
    manifest_path = os.path.join(path, "manifest.msd")
    data_path = os.path.join(path, "data.bin")
    if not os.path.exists(manifest_path):
        raise DataError(f"manifest missing: {manifest_path}")
    try:
        with open(manifest_path, "rb") as f:
            buf = f.read()
        with open(data_path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise DataError(f"cannot read dataset at {path}: {e}") from e

    if len(buf) < 4 + 4 + struct.calcsize(_PARAMS_FMT) + 8 + 4:
        raise DataError("manifest truncated")
    if buf[:4] != MAGIC:
        raise DataError(f"bad manifest magic {buf[:4]!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise VersionError(f"manifest version {version}, this build reads {VERSION}")
    (stored_crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != stored_crc:
        raise DataError("manifest checksum mismatch")

    off = 8
    vals = struct.unpack_from(_PARAMS_FMT, buf, off)
    off += struct.calcsize(_PARAMS_FMT)
    params = GenParams(
        num_identities=vals[0], samples_per_id=vals[1], image_h=vals[2], image_w=vals[3],
        cams_per_modality=vals[4], modality_gap=vals[5], noise_std=vals[6], seed=vals[7],
    )
    (count,) = struct.unpack_from("<Q", buf, off)
    off += 8
    rec_size = struct.calcsize("<IBHQQ")
    if off + count * rec_size != len(buf) - 4:
        raise DataError(f"manifest record table size mismatch for {count} records")

    records = []
    h, w = params.image_h, params.image_w
    for i in range(count):
        ident, mod_code, camera, offset, length = struct.unpack_from("<IBHQQ", buf, off)
        off += rec_size
        if offset + length + 4 > len(blob):
            raise DataError(f"record {i}: data.bin truncated")
        raw = blob[offset:offset + length]
        (crc,) = struct.unpack_from("<I", blob, offset + length)
        if zlib.crc32(raw) != crc:
            raise DataError(f"record {i}: pixel checksum mismatch")
        channels = 3 if mod_code == 0 else 1
        if length != h * w * channels:
            raise DataError(f"record {i}: pixel length {length} != {h}x{w}x{channels}")
        pixels = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, channels)
        records.append(SampleRecord(
            identity=ident, modality="V" if mod_code == 0 else "T",
            camera=camera, pixels=pixels,
        ))
    return Dataset(params, records)
