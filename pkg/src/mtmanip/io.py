"""Binary dataset and checkpoint files. Byte layouts are documented in docs/FORMATS.md."""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from .autodiff import Tensor
from .data import GraspSet, PokeSet, PushSet
from .errors import BadMagicError, ChecksumError, DataError, TruncatedError, VersionError
from .net import MultiTaskNet, NetConfig, ParamGroups
from .optim import RmsProp

PathLike = Union[str, os.PathLike]

DATASET_MAGIC = b"MTMD"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"MTCK"
CHECKPOINT_VERSION = 1

_IMG = ("u1", (64, 64, 3))
RECORD_DTYPES = {
    "grasp": np.dtype([("patch", *_IMG), ("theta", "u1"), ("y", "u1")]),
    "push": np.dtype([("begin", *_IMG), ("end", *_IMG), ("action", "<f8", (5,))]),
    "poke": np.dtype([("image", *_IMG), ("response", "<f8", (2,))]),
}
TASK_TAGS = {"grasp": 0, "push": 1, "poke": 2}
_TAG_TASKS = {v: k for k, v in TASK_TAGS.items()}
_DS_HEADER = struct.Struct("<4sHBQ")  # magic, version, task tag, record count
_CRC = struct.Struct("<I")


def _atomic_write(path: PathLike, blob: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


# -- datasets --------------------------------------------------------------------------------

def dataset_bytes(ds) -> bytes:
    task = ds.task
    rec = np.zeros(len(ds), dtype=RECORD_DTYPES[task])
    if task == "grasp":
        rec["patch"], rec["theta"], rec["y"] = ds.patches, ds.theta, ds.y
    elif task == "push":
        rec["begin"], rec["end"], rec["action"] = ds.begin, ds.end, ds.action
    else:
        rec["image"], rec["response"] = ds.image, ds.response
    payload = rec.tobytes()
    header = _DS_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, TASK_TAGS[task], len(ds))
    return header + payload + _CRC.pack(zlib.crc32(payload))


def save_dataset(path: PathLike, ds) -> None:
    _atomic_write(path, dataset_bytes(ds))


def parse_dataset(blob: bytes):
    if len(blob) < _DS_HEADER.size + _CRC.size:
        raise TruncatedError(f"dataset file is {len(blob)} bytes, shorter than header + checksum")
    magic, version, tag, count = _DS_HEADER.unpack_from(blob)
    if magic != DATASET_MAGIC:
        raise BadMagicError(f"bad dataset magic {magic!r}")
    if version != DATASET_VERSION:
        raise VersionError(f"dataset format version {version} is not supported (expected {DATASET_VERSION})")
    if tag not in _TAG_TASKS:
        raise DataError(f"unknown task tag {tag}")
    task = _TAG_TASKS[tag]
    dtype = RECORD_DTYPES[task]
    available = len(blob) - _DS_HEADER.size - _CRC.size
    # bounds-check the declared count against the file size before touching the payload
    if count > available // dtype.itemsize:
        raise TruncatedError(f"header declares {count} {task} records but only {available} payload bytes exist")
    if available != count * dtype.itemsize:
        raise DataError(f"payload is {available} bytes, expected {count * dtype.itemsize}")
    payload = blob[_DS_HEADER.size:_DS_HEADER.size + available]
    (crc,) = _CRC.unpack_from(blob, len(blob) - _CRC.size)
    if zlib.crc32(payload) != crc:
        raise ChecksumError("dataset payload CRC32 mismatch")
    rec = np.frombuffer(payload, dtype=dtype, count=count)
    if task == "grasp":
        return GraspSet(rec["patch"].copy(), rec["theta"].copy(), rec["y"].copy())
    if task == "push":
        return PushSet(rec["begin"].copy(), rec["end"].copy(), rec["action"].copy())
    return PokeSet(rec["image"].copy(), rec["response"].copy())


def load_dataset(path: PathLike):
    with open(path, "rb") as fh:
        return parse_dataset(fh.read())


# -- checkpoints -------------------------------------------------------------------------------

_CK_HEADER = struct.Struct("<4sHQ")  # magic, version, body length


@dataclass
class Checkpoint:
    config: NetConfig
    iteration: int
    tensors: Dict[str, np.ndarray]
    optimizer: dict = field(default_factory=dict)
    rng_state: Optional[dict] = None
    meta: dict = field(default_factory=dict)

    def params(self) -> Dict[str, np.ndarray]:
        return {k[len("param/"):]: v for k, v in self.tensors.items() if k.startswith("param/")}


def checkpoint_from(net: MultiTaskNet, opt: RmsProp, rng: Optional[np.random.Generator] = None,
                    meta: Optional[dict] = None) -> Checkpoint:
    tensors: Dict[str, np.ndarray] = {}
    for group, name, t in net.params.items():
        tensors[f"param/{name}"] = t.data
    for bn, st in net.bn_stats.items():
        tensors[f"bn/{bn}.mean"] = st.mean
        tensors[f"bn/{bn}.var"] = st.var
    for name in sorted(opt.acc):
        tensors[f"opt/acc/{name}"] = opt.acc[name]
        tensors[f"opt/mom/{name}"] = opt.mom[name]
    return Checkpoint(
        config=net.config,
        iteration=opt.iteration,
        tensors=tensors,
        optimizer=opt.hyperparams(),
        rng_state=None if rng is None else rng.bit_generator.state,
        meta=dict(meta or {}),
    )


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    head = json.dumps({
        "config": ck.config.to_dict(),
        "iteration": ck.iteration,
        "optimizer": ck.optimizer,
        "rng_state": ck.rng_state,
        "meta": ck.meta,
    }, sort_keys=True).encode("utf-8")
    parts = [struct.pack("<I", len(head)), head, struct.pack("<I", len(ck.tensors))]
    for name, arr in ck.tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return _CK_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(body)) + body + _CRC.pack(zlib.crc32(body))


def save_checkpoint(path: PathLike, ck: Checkpoint) -> None:
    _atomic_write(path, checkpoint_bytes(ck))


class _Reader:
    def __init__(self, buf: bytes, start: int, end: int):
        self.buf, self.pos, self.end = buf, start, end

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise TruncatedError(f"checkpoint ends early (need {n} bytes at offset {self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(s))


def parse_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < _CK_HEADER.size + _CRC.size:
        raise TruncatedError("checkpoint shorter than its fixed header")
    magic, version, body_len = _CK_HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint format version {version} is not supported")
    end = _CK_HEADER.size + body_len
    if end + _CRC.size > len(blob):
        raise TruncatedError(f"checkpoint declares a {body_len}-byte body but the file has {len(blob)} bytes")
    if end + _CRC.size < len(blob):
        raise DataError(f"{len(blob) - end - _CRC.size} unexpected bytes after the checkpoint checksum")
    body = blob[_CK_HEADER.size:end]
    (crc,) = _CRC.unpack_from(blob, end)
    r = _Reader(blob, _CK_HEADER.size, end)
    (hlen,) = r.unpack("<I")
    head_raw = r.take(hlen)
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint CRC32 mismatch")
    head = json.loads(head_raw.decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != end:
        raise DataError(f"{end - r.pos} unexpected trailing bytes in checkpoint")
    return Checkpoint(NetConfig.from_dict(head["config"]), int(head["iteration"]), tensors,
                      head["optimizer"], head["rng_state"], head["meta"])


def load_checkpoint(path: PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def restore(ck: Checkpoint):
    """Rebuild ``(net, opt, rng)`` exactly as they were when ``ck`` was taken."""
    net = MultiTaskNet(ck.config)
    groups = {}
    shapes = ck.config.layer_shapes()
    for gname, layer in shapes.items():
        groups[gname] = {}
        for name, shape in layer.items():
            arr = ck.tensors.get(f"param/{name}")
            if arr is None or arr.shape != tuple(shape):
                raise DataError(f"checkpoint parameter {name} missing or mis-shaped")
            groups[gname][name] = Tensor(arr.copy(), requires_grad=True, name=name)
    net.params = ParamGroups(**groups)
    for bn, st in net.bn_stats.items():
        st.mean = ck.tensors[f"bn/{bn}.mean"].copy()
        st.var = ck.tensors[f"bn/{bn}.var"].copy()
    opt = RmsProp(**ck.optimizer)
    opt.iteration = ck.iteration
    for key, arr in ck.tensors.items():
        if key.startswith("opt/acc/"):
            opt.acc[key[len("opt/acc/"):]] = arr.copy()
        elif key.startswith("opt/mom/"):
            opt.mom[key[len("opt/mom/"):]] = arr.copy()
    rng = None
    if ck.rng_state is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = ck.rng_state
    return net, opt, rng
