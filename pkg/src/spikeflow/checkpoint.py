"""Binary checkpoint files.

Layout (little-endian): ``b"SFN1"``, version u32, 32-byte SHA-256 config
digest, record count u64, then per record: name length u16, UTF-8 name, rank
u8, ``rank`` extents u32, float64 values.

Network hyperparameters are stored as ``config.*`` scalar records so a
checkpoint is self-describing; optimizer and trainer state use the ``adam.``
and ``train.`` prefixes. Everything else is a network parameter.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields

import numpy as np

from .ann import VARIANTS, NetworkConfig, param_shapes
from .errors import CheckpointError, FormatError
from .tensor import Tensor

MAGIC = b"SFN1"
VERSION = 1
_HEADER = struct.Struct("<4sI32sQ")
_DT_MODES = ("dt1", "dt4")


def config_records(cfg: NetworkConfig) -> dict[str, np.ndarray]:
    out = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if f.name == "hybrid_variant":
            value = VARIANTS.index(value)
        elif f.name == "dt_mode":
            value = _DT_MODES.index(value)
        out[f"config.{f.name}"] = np.array(float(value))
    return out


def config_from_records(records: dict[str, np.ndarray]) -> NetworkConfig:
    kw = {}
    for f in fields(NetworkConfig):
        key = f"config.{f.name}"
        if key not in records:
            raise CheckpointError(f"checkpoint lacks {key}")
        value = float(records[key])
        if f.name == "hybrid_variant":
            kw[f.name] = VARIANTS[int(value)]
        elif f.name == "dt_mode":
            kw[f.name] = _DT_MODES[int(value)]
        elif f.name == "snn_bias":
            kw[f.name] = bool(value)
        elif f.name in ("base_width", "n_frames", "flow_head_kernel"):
            kw[f.name] = int(value)
        else:
            kw[f.name] = value
    return NetworkConfig(**kw)


def write_records(path, digest: bytes, records: dict[str, np.ndarray]) -> None:
    if len(digest) != 32:
        raise ValueError("digest must be 32 bytes")
    chunks = [_HEADER.pack(MAGIC, VERSION, digest, len(records))]
    for name, value in records.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_records(path) -> tuple[bytes, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, digest, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = _HEADER.size
    records: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            if pos + 8 * n > len(raw):
                raise FormatError(f"{path}: truncated values for record {name!r}")
            records[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except struct.error as exc:
        raise FormatError(f"{path}: truncated record table") from exc
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return digest, records


@dataclass
class Checkpoint:
    config: NetworkConfig
    params: dict[str, Tensor]
    extras: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path, config: NetworkConfig, params: dict[str, Tensor], extras: dict | None = None) -> None:
    records = config_records(config)
    for name in sorted(params):
        records[name] = params[name].data
    for name, value in (extras or {}).items():
        records[name] = np.asarray(value, dtype=np.float64)
    write_records(path, config.digest(), records)


def load_checkpoint(path, expected: NetworkConfig | None = None) -> Checkpoint:
    """Load a checkpoint, verifying its digest against ``expected`` when given."""
    digest, records = read_records(path)
    config = config_from_records(records)
    if config.digest() != digest:
        raise CheckpointError(f"{path}: stored config does not match header digest")
    if expected is not None and expected.digest() != digest:
        raise CheckpointError(
            f"{path}: config digest mismatch (checkpoint {config.canonical()!r} vs requested {expected.canonical()!r})"
        )
    params, extras = {}, {}
    for name, value in records.items():
        if name.startswith("config."):
            continue
        if name.startswith(("adam.", "train.")):
            extras[name] = value
        else:
            params[name] = Tensor(value, requires_grad=True, name=name)
    shapes = param_shapes(config)
    if set(shapes) != set(params):
        missing, extra = sorted(set(shapes) - set(params)), sorted(set(params) - set(shapes))
        raise CheckpointError(f"{path}: parameter set differs from config (missing {missing}, unexpected {extra})")
    for name, shape in shapes.items():
        if params[name].shape != tuple(shape):
            raise CheckpointError(f"{path}: parameter {name} has shape {params[name].shape}, expected {tuple(shape)}")
    return Checkpoint(config, params, extras)
