"""Bit-exact binary container for tensors plus JSON report helpers.

File layout (all integers little-endian):

    magic   4 bytes  b"LIAR"
    version u32      1
    count   u32      number of tensors
    then per tensor:
        name_len u16
        name     UTF-8 bytes
        dtype    u8   0 = float32, 1 = float64
        ndim     u8
        dims     ndim * u64
        payload  row-major little-endian values

The format carries only float payloads; integer data such as token ids is
stored as float64, which is exact for the id ranges used here.  Reports are
JSON with sorted keys so byte-level diffs are meaningful in CI.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError, ValidationError

MAGIC = b"LIAR"
VERSION = 1

_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors to ``path``; exact round-trip guaranteed."""
    names = list(tensors)
    if len(set(names)) != len(names):
        raise ValidationError("duplicate tensor names")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(names))]
    for name in names:
        arr = np.asarray(tensors[name])
        if arr.dtype not in _DTYPE_CODES:
            raise ValidationError(
                f"tensor {name!r}: unsupported dtype {arr.dtype} (float32/float64 only)"
            )
        raw = name.encode("utf-8")
        if not 1 <= len(raw) <= 0xFFFF:
            raise ValidationError(f"tensor name {name!r} length out of range")
        if arr.ndim > 0xFF:
            raise ValidationError(f"tensor {name!r}: too many dimensions")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        # newbyteorder() is a no-op on little-endian hosts but pins the wire format
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        chunks.append(np.ascontiguousarray(le).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path) -> dict[str, np.ndarray]:
    """Read a tensor container written by :func:`write_tensors`."""
    buf = Path(path).read_bytes()
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(buf):
            raise CorruptionError(f"truncated file: needed {n} bytes for {what}")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != MAGIC:
        raise FormatError(f"bad magic in {path}")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        dtype_code, ndim = struct.unpack("<BB", take(2, "tensor header"))
        if dtype_code not in _CODE_DTYPES:
            raise FormatError(f"tensor {name!r}: unknown dtype code {dtype_code}")
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim, "dims"))
        dtype = _CODE_DTYPES[dtype_code]
        payload_len = dtype.itemsize * int(np.prod(dims, dtype=np.uint64)) if ndim else dtype.itemsize
        payload = take(payload_len, f"payload of {name!r}")
        if name in tensors:
            raise ValidationError(f"duplicate tensor name {name!r}")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
        tensors[name] = arr.astype(arr.dtype.newbyteorder("="), copy=False)
    if pos != len(buf):
        raise CorruptionError(f"{len(buf) - pos} trailing bytes after last tensor")
    return tensors


@dataclass
class ModelManifest:
    """Shape descriptor for a (possibly pruned) toy transformer checkpoint.

    ``layer_heads`` / ``layer_neurons`` record the per-layer counts that
    remain after surgery; for a dense model they equal ``heads`` and
    ``ffn_dim`` everywhere.
    """

    layers: int
    embed_dim: int
    heads: int
    head_dim: int
    ffn_dim: int
    vocab: int
    max_seq_len: int
    causal: bool = False
    layer_heads: list[int] = field(default_factory=list)
    layer_neurons: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.embed_dim != self.heads * self.head_dim:
            raise ValidationError(
                f"embed_dim {self.embed_dim} != heads {self.heads} * head_dim {self.head_dim}"
            )
        if not self.layer_heads:
            self.layer_heads = [self.heads] * self.layers
        if not self.layer_neurons:
            self.layer_neurons = [self.ffn_dim] * self.layers
        if len(self.layer_heads) != self.layers or len(self.layer_neurons) != self.layers:
            raise ValidationError("per-layer dimension lists must have one entry per layer")

    def expected_tensors(self) -> dict[str, tuple[int, ...]]:
        """Tensor-name convention: every tensor the companion file must hold."""
        c, v = self.embed_dim, self.vocab
        shapes: dict[str, tuple[int, ...]] = {"embed": (v, c)}
        for i in range(self.layers):
            a = self.layer_heads[i] * self.head_dim  # attention width
            f = self.layer_neurons[i]
            p = f"layers.{i}."
            shapes[p + "wq"] = (c, a)
            shapes[p + "bq"] = (a,)
            shapes[p + "wk"] = (c, a)
            shapes[p + "bk"] = (a,)
            shapes[p + "wv"] = (c, a)
            shapes[p + "bv"] = (a,)
            shapes[p + "wo"] = (a, c)
            shapes[p + "bo"] = (c,)
            shapes[p + "wup"] = (c, f)
            shapes[p + "bup"] = (f,)
            shapes[p + "wdown"] = (f, c)
            shapes[p + "bdown"] = (c,)
            for ln in ("ln1", "ln2"):
                shapes[p + ln + ".g"] = (c,)
                shapes[p + ln + ".b"] = (c,)
        shapes["final_ln.g"] = (c,)
        shapes["final_ln.b"] = (c,)
        shapes["head.w"] = (c, v)
        shapes["head.b"] = (v,)
        return shapes

    def validate_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for name, shape in self.expected_tensors().items():
            if name not in tensors:
                raise ValidationError(f"manifest names tensor {name!r} missing from file")
            if tuple(tensors[name].shape) != shape:
                raise ValidationError(
                    f"tensor {name!r}: shape {tensors[name].shape} != manifest {shape}"
                )

    def to_json(self) -> str:
        return dump_json(
            {
                "layers": self.layers,
                "embed_dim": self.embed_dim,
                "heads": self.heads,
                "head_dim": self.head_dim,
                "ffn_dim": self.ffn_dim,
                "vocab": self.vocab,
                "max_seq_len": self.max_seq_len,
                "causal": self.causal,
                "layer_heads": self.layer_heads,
                "layer_neurons": self.layer_neurons,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "ModelManifest":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest is not valid JSON: {exc}") from exc
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ValidationError(f"manifest fields invalid: {exc}") from exc


def _sanitize(obj):
    """Replace non-finite floats with string sentinels ("inf", "-inf", "nan")."""
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        if math.isnan(obj):
            return "nan"
        return "inf" if obj > 0 else "-inf"
    return obj


def dump_json(obj) -> str:
    """Serialize with sorted keys and sentinel strings for non-finite floats."""
    return json.dumps(_sanitize(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_report(path, obj) -> None:
    Path(path).write_text(dump_json(obj), encoding="utf-8")


def read_report(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
