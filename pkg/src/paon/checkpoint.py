"""Binary checkpoint format (little-endian, fixed layout).

Layout, in order (all integers unsigned little-endian)::

    magic          5 bytes   b"PAON1"
    version        u32       1
    config_len     u32       length L of the config blob
    config         L bytes   canonical JSON (UTF-8, sorted keys, no whitespace)
    config_sha256  32 bytes  SHA-256 of the config blob
    param_count    u32       P
    P x tensor entry
    opt_count      u32       Q
    Q x tensor entry
    iteration      u64
    best_val_psnr  f64       IEEE-754 binary64

    tensor entry:
    name_len       u32
    name           name_len bytes, UTF-8
    shape          4 x u32   shape right-aligned, leading dims padded with 1
    data           prod(shape) x f32 (C order)

The file ends immediately after ``best_val_psnr``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .data import atomic_write_bytes
from .errors import ConfigurationError, PaonError

MAGIC = b"PAON1"
VERSION = 1


class CheckpointError(PaonError, ValueError):
    """Corrupt or incompatible checkpoint; the message names the failing section."""


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config)).hexdigest()


def shape4(shape) -> tuple[int, int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) > 4:
        raise CheckpointError(f"tensor rank {len(shape)} exceeds 4")
    return (1,) * (4 - len(shape)) + shape


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]
    iteration: int
    best_val_psnr: float

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


def _pack_table(table: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(table))]
    for name, arr in table.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<4I", *shape4(arr.shape)))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    blob = canonical_json(ckpt.config)
    return b"".join([
        MAGIC,
        struct.pack("<II", VERSION, len(blob)),
        blob,
        hashlib.sha256(blob).digest(),
        _pack_table(ckpt.params),
        _pack_table(ckpt.optimizer),
        struct.pack("<Qd", int(ckpt.iteration), float(ckpt.best_val_psnr)),
    ])


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write_bytes(path, encode_checkpoint(ckpt))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, section: str) -> bytes:
        if n < 0 or self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated file in section '{section}' (offset {self.pos})")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, section: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), section))

    def table(self, section: str) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I", section)
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<I", section)
            try:
                name = self.take(n, section).decode("utf-8")
            except UnicodeDecodeError as err:
                raise CheckpointError(f"bad tensor name in section '{section}'") from err
            shape = self.unpack("<4I", section)
            size = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(self.take(4 * size, section), dtype="<f4")
            out[name] = data.reshape(shape).astype(np.float32)
        return out


def decode_checkpoint(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    if r.take(5, "magic") != MAGIC:
        raise CheckpointError("bad magic in section 'magic' (not a PAON1 checkpoint)")
    version, length = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} in section 'header'")
    blob = r.take(length, "config")
    digest = r.take(32, "config hash")
    if hashlib.sha256(blob).digest() != digest:
        raise CheckpointError("config blob does not match its hash in section 'config hash'")
    try:
        config = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"unparseable JSON in section 'config': {err}") from err
    params = r.table("parameters")
    optimizer = r.table("optimizer")
    iteration, best = r.unpack("<Qd", "trailer")
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes after section 'trailer'")
    return Checkpoint(config, params, optimizer, iteration, best)


def load_checkpoint(path, expect_config: dict | None = None, force: bool = False) -> Checkpoint:
    """Read a checkpoint; with ``expect_config`` the config hashes must agree unless ``force``."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as err:
        raise CheckpointError(f"{path}: {err.strerror or err}") from err
    try:
        ckpt = decode_checkpoint(raw)
    except CheckpointError as err:
        raise CheckpointError(f"{path}: {err}") from None
    if expect_config is not None and not force and ckpt.config_hash != config_hash(expect_config):
        raise ConfigurationError(
            f"{path}: config hash {ckpt.config_hash[:12]} differs from the current run's "
            f"{config_hash(expect_config)[:12]} (use --force to load anyway)")
    return ckpt


def restore_shapes(table: dict[str, np.ndarray], shapes: dict[str, tuple]) -> dict[str, np.ndarray]:
    """Reshape 4-D table entries back to the model's shapes."""
    out = {}
    for name, arr in table.items():
        if name in shapes:
            if shape4(shapes[name]) != arr.shape:
                raise CheckpointError(f"tensor '{name}': stored shape {arr.shape} does not fit {shapes[name]}")
            arr = arr.reshape(shapes[name])
        out[name] = arr
    return out
