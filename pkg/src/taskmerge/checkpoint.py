"""Checkpoint container I/O and LoRA materialization.

The container is the safetensors layout: an 8-byte little-endian header
length, a UTF-8 JSON header, then raw little-endian tensor bytes addressed
by offsets relative to the end of the header.

BF16 tensors are held in memory as float32 (the widening is exact) and
narrowed back with round-to-nearest-even when written, so a read/write
round trip reproduces the original bytes.
"""

from __future__ import annotations

import json
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import (
    CheckpointFormatError,
    HeaderError,
    OffsetError,
    ShapeError,
    TruncatedFileError,
    UnknownDtypeError,
)

DTYPES = {"F16": 2, "BF16": 2, "F32": 4, "F64": 8}
_NUMPY_FOR_TAG = {"F16": np.float16, "BF16": np.float32, "F32": np.float32, "F64": np.float64}
_TAG_FOR_NUMPY = {np.dtype(np.float16): "F16", np.dtype(np.float32): "F32", np.dtype(np.float64): "F64"}
_ALIGN = 8
_MAX_HEADER = 100_000_000


def dtype_tag(array: np.ndarray) -> str:
    try:
        return _TAG_FOR_NUMPY[np.asarray(array).dtype]
    except KeyError:
        raise UnknownDtypeError(f"unsupported array dtype {np.asarray(array).dtype}") from None


class Checkpoint:
    """Immutable ordered mapping ``name -> ndarray`` plus string metadata.

    ``dtypes`` records the on-disk element type of each tensor; it defaults
    to the tag implied by the array's numpy dtype.  Iteration order is
    lexicographic by name.
    """

    def __init__(self, tensors: Mapping[str, np.ndarray], metadata=None, dtypes=None):
        dtypes = dict(dtypes or {})
        self._tensors = {}
        self._dtypes = {}
        for name in sorted(tensors):
            if not isinstance(name, str) or not name:
                raise ValueError(f"tensor names must be non-empty strings, got {name!r}")
            if name == "__metadata__":
                raise ValueError("'__metadata__' is reserved")
            arr = np.asarray(tensors[name])
            tag = dtypes.get(name) or dtype_tag(arr)
            if tag not in DTYPES:
                raise UnknownDtypeError(f"unknown dtype tag {tag!r} for {name!r}")
            arr = np.ascontiguousarray(arr, dtype=_NUMPY_FOR_TAG[tag])
            if tag == "BF16":
                arr = bf16_to_f32(f32_to_bf16(arr))
            arr.setflags(write=False)
            self._tensors[name] = arr
            self._dtypes[name] = tag
        self.metadata = {str(k): str(v) for k, v in (metadata or {}).items()}

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def keys(self):
        return self._tensors.keys()

    def items(self):
        return self._tensors.items()

    def dtype_of(self, name) -> str:
        return self._dtypes[name]

    @property
    def dtypes(self) -> dict:
        return dict(self._dtypes)

    def replace(self, updates: Mapping[str, np.ndarray], metadata=None) -> "Checkpoint":
        """New checkpoint with some tensors swapped; recorded dtypes are kept."""
        tensors = dict(self._tensors)
        tensors.update(updates)
        return Checkpoint(tensors, self.metadata if metadata is None else metadata, self._dtypes)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if list(self) != list(other) or self.metadata != other.metadata or self._dtypes != other._dtypes:
            return False
        return all(
            a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()
            for a, b in zip(self._tensors.values(), other._tensors.values())
        )

    def __repr__(self):
        return f"Checkpoint({len(self)} tensors, metadata={self.metadata})"


# -- BF16 helpers ---------------------------------------------------------


def bf16_to_f32(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.uint32) << 16).view(np.float32)


def f32_to_bf16(values: np.ndarray) -> np.ndarray:
    bits = np.ascontiguousarray(values, dtype=np.float32).view(np.uint32)
    rounding = ((bits >> 16) & 1) + np.uint32(0x7FFF)
    return ((bits + rounding) >> 16).astype(np.uint16)


def _encode(arr: np.ndarray, tag: str) -> bytes:
    if tag == "BF16":
        return f32_to_bf16(arr).astype("<u2").tobytes()
    return np.ascontiguousarray(arr, dtype=np.dtype(_NUMPY_FOR_TAG[tag]).newbyteorder("<")).tobytes()


def _decode(buf: bytes, tag: str, shape) -> np.ndarray:
    if tag == "BF16":
        return bf16_to_f32(np.frombuffer(buf, dtype="<u2")).reshape(shape)
    dt = np.dtype(_NUMPY_FOR_TAG[tag]).newbyteorder("<")
    return np.frombuffer(buf, dtype=dt).astype(_NUMPY_FOR_TAG[tag]).reshape(shape)


# -- serialization --------------------------------------------------------


def serialize(ckpt: Checkpoint, align: bool = True) -> bytes:
    """Canonical bytes for ``ckpt``.

    With ``align`` every data block starts on an 8-byte boundary, leaving
    zero padding between blocks.  ``align=False`` packs blocks back to back,
    which strict safetensors readers require.
    """
    header = {}
    blobs = []
    pos = 0
    for name in ckpt:
        arr = ckpt[name]
        tag = ckpt.dtype_of(name)
        blob = _encode(arr, tag)
        if align and pos % _ALIGN:
            pad = _ALIGN - pos % _ALIGN
            blobs.append(b"\0" * pad)
            pos += pad
        header[name] = {"dtype": tag, "shape": list(arr.shape), "data_offsets": [pos, pos + len(blob)]}
        blobs.append(blob)
        pos += len(blob)
    if ckpt.metadata:
        header["__metadata__"] = dict(sorted(ckpt.metadata.items()))
    text = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    text += b" " * ((-len(text)) % _ALIGN)
    return struct.pack("<Q", len(text)) + text + b"".join(blobs)


def write_checkpoint(ckpt: Checkpoint, path, align: bool = True) -> None:
    path = Path(path)
    data = serialize(ckpt, align=align)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _check_shape(name, shape, pos):
    if not isinstance(shape, list) or not all(isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape):
        raise HeaderError(f"tensor {name!r}: shape must be a list of non-negative ints, got {shape!r}", pos)


def parse(data: bytes) -> Checkpoint:
    """Parse container bytes, validating every header entry against the data."""
    if len(data) < 8:
        raise TruncatedFileError(f"file is {len(data)} bytes, too short for the 8-byte header length", len(data))
    (n,) = struct.unpack_from("<Q", data, 0)
    if n > _MAX_HEADER:
        raise HeaderError(f"header length {n} exceeds limit", 0)
    if 8 + n > len(data):
        raise TruncatedFileError(f"header length {n} runs past end of {len(data)}-byte file", 8)
    try:
        header = json.loads(data[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = 8 + getattr(exc, "pos", getattr(exc, "start", 0))
        raise HeaderError(f"header is not valid UTF-8 JSON: {exc}", pos) from None
    if not isinstance(header, dict):
        raise HeaderError("header must be a JSON object", 8)

    metadata = header.pop("__metadata__", None) or {}
    if not isinstance(metadata, dict) or not all(isinstance(v, str) for v in metadata.values()):
        raise HeaderError("__metadata__ must map strings to strings", 8)

    body_start = 8 + n
    body_len = len(data) - body_start
    entries = []
    for name, info in header.items():
        if not name:
            raise HeaderError("empty tensor name", 8)
        if not isinstance(info, dict) or set(info) != {"dtype", "shape", "data_offsets"}:
            raise HeaderError(f"tensor {name!r}: entry must have exactly dtype, shape, data_offsets", 8)
        tag = info["dtype"]
        if tag not in DTYPES:
            raise UnknownDtypeError(f"tensor {name!r}: unknown dtype {tag!r}", 8)
        _check_shape(name, info["shape"], 8)
        offsets = info["data_offsets"]
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) and not isinstance(o, bool) and o >= 0 for o in offsets)
        ):
            raise OffsetError(f"tensor {name!r}: data_offsets must be two non-negative ints", 8)
        entries.append((offsets[0], offsets[1], name, tag, info["shape"]))

    tensors, dtypes = {}, {}
    prev_end = 0
    for begin, end, name, tag, shape in sorted(entries):
        expected = int(np.prod(shape, dtype=np.int64)) * DTYPES[tag]
        if end < begin or end - begin != expected:
            raise OffsetError(
                f"tensor {name!r}: offsets [{begin}, {end}] hold {end - begin} bytes, shape {shape} {tag} needs {expected}",
                body_start + begin,
            )
        if begin < prev_end:
            raise OffsetError(f"tensor {name!r} overlaps the previous tensor", body_start + begin)
        if end > body_len:
            raise TruncatedFileError(f"tensor {name!r} ends past the end of the data section", body_start + end)
        tensors[name] = _decode(data[body_start + begin : body_start + end], tag, shape)
        dtypes[name] = tag
        prev_end = end
    if prev_end != body_len:
        raise OffsetError(f"data section is {body_len} bytes but the last tensor ends at {prev_end}", body_start + prev_end)
    return Checkpoint(tensors, metadata, dtypes)


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse(fh.read())


# -- LoRA -----------------------------------------------------------------

_LORA_KEY = re.compile(r"^(?P<target>.+)\.lora_(?P<which>[AB])\.weight$")


@dataclass
class LoraAdapter:
    """Per-target ``(A, B)`` factor pairs with a shared ``alpha`` and rank ``r``."""

    pairs: dict = field(default_factory=dict)
    alpha: float = 1.0
    rank: int = 1

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"LoRA alpha must be positive, got {self.alpha}")
        if self.rank <= 0:
            raise ValueError(f"LoRA rank must be positive, got {self.rank}")
        for target, (a, b) in self.pairs.items():
            if a.ndim != 2 or b.ndim != 2 or a.shape[0] != self.rank or b.shape[1] != self.rank:
                raise ShapeError(f"LoRA target {target!r}: A {a.shape} / B {b.shape} inconsistent with rank {self.rank}")
            if self.rank > min(b.shape[0], a.shape[1]):
                raise ShapeError(f"LoRA target {target!r}: rank {self.rank} exceeds min{(b.shape[0], a.shape[1])}")

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "LoraAdapter":
        """Collect ``<target>.lora_A.weight`` / ``<target>.lora_B.weight`` pairs."""
        found = {}
        for name in ckpt:
            match = _LORA_KEY.match(name)
            if match:
                found.setdefault(match["target"], {})[match["which"]] = np.asarray(ckpt[name])
        pairs = {}
        for target, ab in found.items():
            if set(ab) != {"A", "B"}:
                raise ShapeError(f"LoRA target {target!r} is missing its {'B' if 'A' in ab else 'A'} factor")
            pairs[target] = (ab["A"], ab["B"])
        try:
            alpha = float(ckpt.metadata.get("alpha", ckpt.metadata.get("lora_alpha")))
            rank = int(ckpt.metadata.get("rank", ckpt.metadata.get("r")))
        except (TypeError, ValueError):
            raise CheckpointFormatError("LoRA adapter metadata must carry numeric 'alpha' and 'rank'") from None
        return cls(pairs, alpha, rank)


def expand_lora(base_shape, a, b, alpha: float, r: int) -> np.ndarray:
    """Dense delta ``(alpha / r) * B @ A`` for one target layer."""
    a = np.asarray(a)
    b = np.asarray(b)
    m, n = base_shape
    if a.shape != (r, n) or b.shape != (m, r):
        raise ShapeError(f"LoRA factors A {a.shape}, B {b.shape} do not fit base shape {tuple(base_shape)} at rank {r}")
    out = b.astype(np.float64) @ a.astype(np.float64)
    out *= alpha / r
    return out.astype(np.float64 if np.float64 in (a.dtype, b.dtype) else np.float32)


def materialize_lora(base: Checkpoint, adapter: LoraAdapter) -> Checkpoint:
    """Fine-tuned checkpoint ``base + delta`` for every adapted ``<target>.weight``."""
    updates = {}
    for target, (a, b) in sorted(adapter.pairs.items()):
        key = target if target in base else f"{target}.weight"
        if key not in base:
            raise ShapeError(f"LoRA target {target!r} has no matching base tensor")
        w = base[key]
        if w.ndim != 2:
            raise ShapeError(f"LoRA target {key!r} is not a 2-D weight (shape {w.shape})")
        delta = expand_lora(w.shape, a, b, adapter.alpha, adapter.rank)
        updates[key] = (w.astype(np.float64) + delta).astype(w.dtype)
    return base.replace(updates)


# -- compatibility --------------------------------------------------------


@dataclass
class CompatReport:
    shared_keys: list
    missing: dict  # checkpoint index -> sorted list of keys it lacks
    shape_mismatches: list  # (key, [shape per checkpoint])
    dtype_mismatches: list  # (key, [dtype tag per checkpoint])

    @property
    def mergeable_keys(self) -> list:
        bad = {k for k, _ in self.shape_mismatches}
        return [k for k in self.shared_keys if k not in bad]

    @property
    def ok(self) -> bool:
        return not any(self.missing.values()) and not self.shape_mismatches


def validate_compat(checkpoints) -> CompatReport:
    checkpoints = list(checkpoints)
    if len(checkpoints) < 2:
        raise ValueError("validate_compat needs at least two checkpoints")
    all_keys = set().union(*(c.keys() for c in checkpoints))
    shared = sorted(set.intersection(*(set(c.keys()) for c in checkpoints)))
    missing = {i: sorted(all_keys - set(c.keys())) for i, c in enumerate(checkpoints)}
    shape_bad, dtype_bad = [], []
    for key in shared:
        shapes = [tuple(c[key].shape) for c in checkpoints]
        if len(set(shapes)) > 1:
            shape_bad.append((key, shapes))
        tags = [c.dtype_of(key) for c in checkpoints]
        if len(set(tags)) > 1:
            dtype_bad.append((key, tags))
    return CompatReport(shared, missing, shape_bad, dtype_bad)
