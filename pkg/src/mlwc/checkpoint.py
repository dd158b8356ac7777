"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MLWC0001"
    u32 record count
    records sorted by name, each:
        u16 name length, UTF-8 name
        u8 rank, rank x u32 dims
        row-major f32 values
    u32 metadata length, UTF-8 JSON metadata (sorted keys)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MLWC0001"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def to_bytes(ckpt: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f4", order="C")  # ascontiguousarray would promote rank 0
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"record {name!r} exceeds the format limits")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out.append(struct.pack("<I", len(meta)) + meta)
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(data: bytes) -> Checkpoint:
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic {data[:len(MAGIC)]!r}")
    r = _Reader(data)
    r.pos = len(MAGIC)
    (count,) = r.unpack("<I", "record count")
    tensors = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"record {i} name length")
        name = r.take(name_len, f"record {i} name").decode("utf-8")
        if name in tensors:
            raise CheckpointError(f"duplicate record name {name!r}")
        (rank,) = r.unpack("<B", f"rank of {name!r}")
        shape = r.unpack(f"<{rank}I", f"dims of {name!r}")
        n = int(np.prod(shape, dtype=np.int64))
        raw = r.take(4 * n, f"values of {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    (meta_len,) = r.unpack("<I", "metadata length")
    meta = json.loads(r.take(meta_len, "metadata").decode("utf-8")) if meta_len else {}
    return Checkpoint(tensors, meta)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


# ---------------------------------------------------------------------------
# model <-> checkpoint

ATTGEN_PREFIX = "attgen"


def pack_model(net, config, attgen: dict | None = None, extra: dict | None = None) -> Checkpoint:
    """Checkpoint holding ``net``'s parameters, optional AttGen parameters and run metadata.

    ``config`` is the RunConfig the network was trained under; its full text
    goes into the metadata so the architecture can be rebuilt on load.
    """
    tensors = {name: np.asarray(v, dtype=np.float64) for name, v in net.params.items()}
    for scope, params in (attgen or {}).items():
        tensors.update(params.as_dict(f"{ATTGEN_PREFIX}.{scope}"))
    meta = {
        "config": config.to_text(),
        "config_hash": config.digest(),
        "label_space": list(net.label_space),
        "n_classes": net.n_classes,
        "stage": str(net.meta.get("stage", "0")),
        "epoch": str(net.meta.get("epoch", "0")),
    }
    meta.update(extra or {})
    return Checkpoint(tensors, meta)


def unpack_model(ckpt: Checkpoint):
    """(net, attgen dict, RunConfig) from a checkpoint written by :func:`pack_model`."""
    from .config import ConfigError, parse_config
    from .model import MultiLevelNet
    from .weightgen import AttGenParams

    try:
        config = parse_config(ckpt.metadata["config"])
        n_classes = int(ckpt.metadata["n_classes"])
        label_space = tuple(ckpt.metadata["label_space"])
    except (KeyError, TypeError, ValueError, ConfigError) as exc:
        raise CheckpointError(f"checkpoint metadata is incomplete: {exc}") from None
    params = {k: v for k, v in ckpt.tensors.items() if not k.startswith(ATTGEN_PREFIX + ".")}
    net = MultiLevelNet(params, config.backbone, config.heads, n_classes, label_space)
    expected = MultiLevelNet.init(config.backbone, config.heads, n_classes, np.random.default_rng(0), label_space).params
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise CheckpointError(f"parameter names do not match the configured model (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, value in expected.items():
        if value.shape != params[name].shape:
            raise CheckpointError(f"{name}: shape {params[name].shape} does not match configured {value.shape}")
    net.meta = {k: ckpt.metadata[k] for k in ("stage", "epoch") if k in ckpt.metadata}
    scopes = sorted({k.split(".")[1] for k in ckpt.tensors if k.startswith(ATTGEN_PREFIX + ".")})
    attgen = {s: AttGenParams.from_dict(ckpt.tensors, f"{ATTGEN_PREFIX}.{s}") for s in scopes}
    return net, attgen, config
