"""Binary checkpoint of named tensors.

Layout (little-endian)::

    b"BUSN"  u16 version  32-byte config hash  u64 step  u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 extents,
                float32 values (row-major)
    u32 CRC-32 of every preceding byte

A ``<checkpoint>.cfg`` sidecar holds the model configuration as ``key=value``
lines so the network can be rebuilt without repeating flags.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .unetpp import ModelConfig

MAGIC = b"BUSN"
VERSION = 1


@dataclass
class Checkpoint:
    config_hash: bytes
    step: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        if len(self.config_hash) != 32:
            raise ConfigError("config hash must be 32 bytes")
        parts = [MAGIC, struct.pack("<H", VERSION), self.config_hash,
                 struct.pack("<QI", self.step, len(self.tensors))]
        for name, arr in self.tensors.items():
            encoded = name.encode("utf-8")
            arr = np.asarray(arr)
            parts.append(struct.pack("<H", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < 4 + 2 + 32 + 12 + 4 or blob[:4] != MAGIC:
            raise DataError("not a checkpoint file (bad magic)")
        body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
        if zlib.crc32(body) != crc:
            raise DataError("checkpoint checksum mismatch")
        (version,) = struct.unpack_from("<H", body, 4)
        if version != VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        config_hash = body[6:38]
        step, count = struct.unpack_from("<QI", body, 38)
        pos = 50
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            n = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
            pos += 4 * n
        if pos != len(body):
            raise DataError("trailing bytes in checkpoint")
        return cls(config_hash, step, tensors)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path, expected_hash: bytes | None = None, force: bool = False) -> "Checkpoint":
        try:
            blob = Path(path).read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
        ckpt = cls.from_bytes(blob)
        if expected_hash is not None and ckpt.config_hash != expected_hash and not force:
            raise ConfigError(
                f"checkpoint {path} was written for a different model configuration"
            )
        return ckpt


def from_model(model, step: int) -> Checkpoint:
    return Checkpoint(
        model.config.hash(), step, {n: p.data.copy() for n, p in model.named_parameters()}
    )


def apply_to(ckpt: Checkpoint, model) -> None:
    params = dict(model.named_parameters())
    missing = set(params) - set(ckpt.tensors)
    if missing:
        raise DataError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, p in params.items():
        values = ckpt.tensors[name]
        if values.shape != p.shape:
            raise DataError(f"{name}: checkpoint shape {values.shape} != model {p.shape}")
        p.data = values.astype(p.dtype)


def write_config(config: ModelConfig, path) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in asdict(config).items()))


def read_config(path) -> ModelConfig:
    types = {f.name: f.type for f in fields(ModelConfig)}
    values = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in types:
            raise ConfigError(f"unknown model config key {key!r} in {path}")
        values[key] = float(raw) if types[key] in ("float", float) else int(raw)
    return ModelConfig(**values)


def sidecar(path) -> Path:
    return Path(str(path) + ".cfg")


def save_model(model, path, step: int) -> Checkpoint:
    ckpt = from_model(model, step)
    ckpt.save(path)
    write_config(model.config, sidecar(path))
    return ckpt


def load_model(path, config: ModelConfig | None = None, force: bool = False):
    """Rebuild a network from a checkpoint (config from the sidecar unless given)."""
    from .model import UNetPPLSTM

    if config is None:
        if not sidecar(path).exists():
            raise ConfigError(f"no model config given and {sidecar(path)} is missing")
        config = read_config(sidecar(path))
    ckpt = Checkpoint.load(path, config.hash(), force=force)
    model = UNetPPLSTM(config)
    apply_to(ckpt, model)
    model.eval()
    return model, ckpt
