"""
    The MIT License (MIT)

    Copyright (c) 2023 pkjmesra

    Permission is hereby granted, free of charge, to any person obtaining a copy
    of this software and associated documentation files (the "Software"), to deal
    in the Software without restriction, including without limitation the rights
    to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
    copies of the Software, and to permit persons to whom the Software is
    furnished to do so, subject to the following conditions:

    The above copyright notice and this permission notice shall be included in all
    copies or substantial portions of the Software.

    THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
    IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
    FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
    AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
    LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
    OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
    SOFTWARE.

"""
import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from PKTaskMerge.classes.Exceptions import (
    AlignmentError,
    CheckpointError,
    DuplicateTensorError,
    MalformedHeaderError,
    TruncatedDataError,
    UnknownTensorError,
    UnsupportedDtypeError,
)
from PKTaskMerge.classes.log import default_logger, tracelog

HEADER_LENGTH_FORMAT = "<Q"
HEADER_LENGTH_BYTES = 8
HEADER_ALIGNMENT = 8
METADATA_KEY = "__metadata__"
# Sanity cap on the JSON header, as the reference reader does.
MAX_HEADER_BYTES = 100 * 1024 * 1024

# dtype -> (byte width, numpy storage dtype)
DTYPES: Dict[str, Tuple[int, str]] = {
    "F64": (8, "<f8"),
    "F32": (4, "<f4"),
    "F16": (2, "<f2"),
    "BF16": (2, "<u2"),
    "F8_E4M3": (1, "u1"),
    "F8_E5M2": (1, "u1"),
    "I64": (8, "<i8"),
    "I32": (4, "<i4"),
    "I16": (2, "<i2"),
    "I8": (1, "i1"),
    "U64": (8, "<u8"),
    "U32": (4, "<u4"),
    "U16": (2, "<u2"),
    "U8": (1, "u1"),
    "BOOL": (1, "?"),
}
# Dtypes merged in F32 working precision. Everything else is copied verbatim.
ARITHMETIC_DTYPES = ("F32", "F16", "BF16")
MASK_DTYPES = ("BOOL", "U8")


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: str
    shape: Tuple[int, ...]
    byteRange: Tuple[int, int]

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if len(self.shape) > 0 else 1

    @property
    def itemsize(self) -> int:
        return DTYPES[self.dtype][0]

    @property
    def nbytes(self) -> int:
        return self.byteRange[1] - self.byteRange[0]

    @property
    def isFloating(self) -> bool:
        return self.dtype in ARITHMETIC_DTYPES

    def toHeaderEntry(self) -> dict:
        return {
            "dtype": self.dtype,
            "shape": list(self.shape),
            "data_offsets": [self.byteRange[0], self.byteRange[1]],
        }

    def sameLayout(self, other: "TensorMeta") -> bool:
        return self.name == other.name and self.dtype == other.dtype and self.shape == other.shape


@dataclass
class TypedTensor:
    """Tensor values in F32 working precision plus the dtype they were stored in"""

    name: str
    dtype: str
    values: np.ndarray

    @property
    def shape(self):
        return tuple(self.values.shape)


# ---------------------------------------------------------------- dtype codecs


def bf16_bits_to_f32(bits: np.ndarray) -> np.ndarray:
    """Widens raw bfloat16 bit patterns to float32 exactly"""
    return (np.asarray(bits, dtype=np.uint16).astype(np.uint32) << 16).view(np.float32)


def f32_to_bf16_bits(values: np.ndarray) -> np.ndarray:
    """Narrows float32 to bfloat16 bit patterns with round-to-nearest-even.
    NaNs are truncated (payload kept, quiet bit forced if the truncation
    would leave an infinity)."""
    u = np.ascontiguousarray(values, dtype=np.float32).view(np.uint32)
    rounded = ((u + np.uint32(0x7FFF) + ((u >> 16) & np.uint32(1))) >> 16).astype(np.uint16)
    nan = np.isnan(values)
    if nan.any():
        truncated = (u >> 16).astype(np.uint16)
        truncated = np.where((truncated & 0x7F) == 0, truncated | np.uint16(0x40), truncated)
        rounded = np.where(nan, truncated, rounded).astype(np.uint16)
    return rounded


def decode(meta: TensorMeta, raw: bytes) -> np.ndarray:
    """Stored bytes -> F32 working values shaped like the tensor"""
    if meta.dtype not in ARITHMETIC_DTYPES:
        raise UnsupportedDtypeError(
            f"{meta.name}: dtype {meta.dtype} is pass-through only and cannot be read as F32"
        )
    if meta.numel == 0:
        return np.zeros(meta.shape, dtype=np.float32)
    stored = np.frombuffer(raw, dtype=DTYPES[meta.dtype][1], count=meta.numel)
    if meta.dtype == "BF16":
        values = bf16_bits_to_f32(stored)
    else:
        values = stored.astype(np.float32)
    return values.reshape(meta.shape)


def encode(dtype: str, values: np.ndarray) -> bytes:
    """F32 working values -> stored bytes, narrowing with round-to-nearest-even"""
    if dtype == "F32":
        return np.ascontiguousarray(values, dtype="<f4").tobytes()
    if dtype == "F16":
        return np.ascontiguousarray(np.asarray(values, dtype=np.float32).astype("<f2")).tobytes()
    if dtype == "BF16":
        return f32_to_bf16_bits(values).astype("<u2").tobytes()
    if dtype in DTYPES:
        return np.ascontiguousarray(values, dtype=DTYPES[dtype][1]).tobytes()
    raise UnsupportedDtypeError(f"Cannot encode values as {dtype}")


# ---------------------------------------------------------------- header codec


def _rejectDuplicates(pairs):
    seen = OrderedDict()
    for key, value in pairs:
        if key in seen:
            raise DuplicateTensorError(f"Duplicate tensor name in header: {key}")
        seen[key] = value
    return seen


def _isNonNegativeInt(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and value >= 0


def parse_header(headerBytes: bytes, dataSize: int):
    """Returns (metas in file order, metadata dict). dataSize is the number of
    bytes available after the header."""
    try:
        text = headerBytes.decode("utf-8")
        header = json.loads(text, object_pairs_hook=_rejectDuplicates)
    except DuplicateTensorError:
        raise
    except (UnicodeDecodeError, ValueError) as e:
        raise MalformedHeaderError(f"Header is not valid UTF-8 JSON: {e}") from e
    if not isinstance(header, dict):
        raise MalformedHeaderError("Header must be a JSON object")

    metadata = header.pop(METADATA_KEY, None)
    if metadata is not None:
        if not isinstance(metadata, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
        ):
            raise MalformedHeaderError("__metadata__ must map strings to strings")
        metadata = dict(metadata)

    metas = []
    for name, entry in header.items():
        if not isinstance(entry, dict):
            raise MalformedHeaderError(f"{name}: header entry must be an object")
        dtype = entry.get("dtype")
        shape = entry.get("shape")
        offsets = entry.get("data_offsets")
        if dtype not in DTYPES:
            raise UnsupportedDtypeError(f"{name}: unknown dtype {dtype!r}")
        if not isinstance(shape, list) or not all(_isNonNegativeInt(s) for s in shape):
            raise MalformedHeaderError(f"{name}: shape must be a list of non-negative integers")
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(_isNonNegativeInt(o) for o in offsets)
            or offsets[1] < offsets[0]
        ):
            raise MalformedHeaderError(f"{name}: data_offsets must be [start, end] with start <= end")
        meta = TensorMeta(name, dtype, tuple(shape), (offsets[0], offsets[1]))
        if meta.nbytes != meta.numel * meta.itemsize:
            raise MalformedHeaderError(
                f"{name}: byte range holds {meta.nbytes} bytes but shape {list(shape)} "
                f"of {dtype} needs {meta.numel * meta.itemsize}"
            )
        metas.append(meta)

    metas.sort(key=lambda m: (m.byteRange[0], m.byteRange[1]))
    cursor = 0
    for meta in metas:
        if meta.byteRange[0] != cursor:
            raise MalformedHeaderError(
                f"{meta.name}: data is not contiguous (starts at {meta.byteRange[0]}, expected {cursor})"
            )
        cursor = meta.byteRange[1]
    if cursor > dataSize:
        raise TruncatedDataError(
            f"Header declares {cursor} data bytes but only {dataSize} are present"
        )
    if cursor < dataSize:
        raise MalformedHeaderError(f"Data region has {dataSize - cursor} trailing bytes")
    return metas, metadata


def build_header(metas: Iterable[TensorMeta], metadata: Optional[dict] = None) -> bytes:
    document = OrderedDict()
    if metadata:
        document[METADATA_KEY] = dict(metadata)
    for meta in metas:
        document[meta.name] = meta.toHeaderEntry()
    headerBytes = json.dumps(document, separators=(",", ":")).encode("utf-8")
    padding = (-len(headerBytes)) % HEADER_ALIGNMENT
    return headerBytes + b" " * padding


def layout(entries: Iterable[Tuple[str, str, Tuple[int, ...]]]) -> List[TensorMeta]:
    """Assigns contiguous byte ranges to (name, dtype, shape) in the given order"""
    metas = []
    seen = set()
    cursor = 0
    for name, dtype, shape in entries:
        if name in seen:
            raise DuplicateTensorError(f"Duplicate tensor name: {name}")
        if dtype not in DTYPES:
            raise UnsupportedDtypeError(f"{name}: unknown dtype {dtype!r}")
        seen.add(name)
        shape = tuple(int(s) for s in shape)
        numel = int(np.prod(shape, dtype=np.int64)) if len(shape) > 0 else 1
        end = cursor + numel * DTYPES[dtype][0]
        metas.append(TensorMeta(name, dtype, shape, (cursor, end)))
        cursor = end
    return metas


# ---------------------------------------------------------------- checkpoint


class Checkpoint:
    """Parsed header plus a lazily read data region, backed by a file path or
    an in-memory buffer. Reads open their own file handle so a Checkpoint can
    be shared by worker threads."""

    def __init__(self, metas, source, dataStart, metadata=None, rawHeader=None, name=None):
        self._metas = OrderedDict((m.name, m) for m in metas)
        self._source = source
        self._dataStart = dataStart
        self.metadata = metadata
        self.rawHeader = rawHeader
        if name is None:
            name = source if isinstance(source, str) else "<memory>"
        self.name = name

    def __repr__(self):
        return f"Checkpoint({self.name!r}, tensors={len(self._metas)})"

    def __len__(self):
        return len(self._metas)

    def __contains__(self, name):
        return name in self._metas

    def __iter__(self):
        return iter(self._metas.keys())

    @property
    def path(self) -> Optional[str]:
        return self._source if isinstance(self._source, str) else None

    @property
    def metas(self) -> List[TensorMeta]:
        return list(self._metas.values())

    def names(self) -> List[str]:
        return list(self._metas.keys())

    def floatingNames(self) -> List[str]:
        return [m.name for m in self._metas.values() if m.isFloating]

    def meta(self, name) -> TensorMeta:
        try:
            return self._metas[name]
        except KeyError:
            raise UnknownTensorError(f"{self.name}: no tensor named {name!r}") from None

    def read_raw(self, name) -> bytes:
        meta = self.meta(name)
        start, end = meta.byteRange
        if end == start:
            return b""
        if isinstance(self._source, str):
            with open(self._source, "rb") as f:
                f.seek(self._dataStart + start)
                raw = f.read(end - start)
        else:
            raw = bytes(self._source[self._dataStart + start : self._dataStart + end])
        if len(raw) != end - start:
            raise TruncatedDataError(f"{self.name}: short read for tensor {name}")
        return raw

    def read_f32(self, name) -> np.ndarray:
        meta = self.meta(name)
        return decode(meta, self.read_raw(name))

    def read_mask(self, name) -> np.ndarray:
        """Boolean view of a BOOL/U8 mask tensor"""
        meta = self.meta(name)
        if meta.dtype not in MASK_DTYPES:
            raise UnsupportedDtypeError(f"{name}: mask tensors must be BOOL or U8, not {meta.dtype}")
        if meta.numel == 0:
            return np.zeros(meta.shape, dtype=bool)
        stored = np.frombuffer(self.read_raw(name), dtype=DTYPES[meta.dtype][1], count=meta.numel)
        return (stored != 0).reshape(meta.shape)

    @staticmethod
    def fromTensors(tensors, metadata=None, name="<memory>") -> "Checkpoint":
        """Builds an in-memory checkpoint from an ordered iterable of TypedTensor
        (F32 values narrowed to their dtype) or (name, dtype, raw bytes) triples"""
        entries, blobs = [], []
        for item in tensors:
            if isinstance(item, TypedTensor):
                entries.append((item.name, item.dtype, item.shape))
                blobs.append(encode(item.dtype, item.values))
            else:
                tname, dtype, shape, raw = item
                entries.append((tname, dtype, tuple(shape)))
                blobs.append(bytes(raw))
        metas = layout(entries)
        for meta, blob in zip(metas, blobs):
            if len(blob) != meta.nbytes:
                raise CheckpointError(f"{meta.name}: {len(blob)} bytes do not match shape {list(meta.shape)}")
        header = build_header(metas, metadata)
        buffer = struct.pack(HEADER_LENGTH_FORMAT, len(header)) + header + b"".join(blobs)
        return Checkpoint(
            metas, buffer, HEADER_LENGTH_BYTES + len(header), metadata=metadata, rawHeader=header, name=name
        )

    def toBytes(self) -> bytes:
        chunks = [struct.pack(HEADER_LENGTH_FORMAT, len(self.headerBytes()))]
        chunks.append(self.headerBytes())
        chunks.extend(self.read_raw(n) for n in self._orderedByOffset())
        return b"".join(chunks)

    def headerBytes(self) -> bytes:
        if self.rawHeader is None:
            self.rawHeader = build_header(self.metas, self.metadata)
        return self.rawHeader

    def _orderedByOffset(self):
        return [m.name for m in sorted(self._metas.values(), key=lambda m: m.byteRange)]


@tracelog
def open_checkpoint(source, name=None) -> Checkpoint:
    """Parses the header of a safetensors file (a path, or bytes already in
    memory). No tensor data is read."""
    if isinstance(source, (bytes, bytearray, memoryview)):
        buffer = memoryview(bytes(source))
        totalSize = len(buffer)
        prefix = bytes(buffer[:HEADER_LENGTH_BYTES])
        reader = None
    else:
        source = os.fspath(source)
        try:
            totalSize = os.path.getsize(source)
            with open(source, "rb") as f:
                prefix = f.read(HEADER_LENGTH_BYTES)
        except OSError as e:
            raise CheckpointError(f"Cannot open checkpoint {source}: {e}") from e
        buffer = None
        reader = source
    if len(prefix) < HEADER_LENGTH_BYTES:
        raise MalformedHeaderError("File is too short to hold a header length")
    (headerLength,) = struct.unpack(HEADER_LENGTH_FORMAT, prefix)
    if headerLength > MAX_HEADER_BYTES:
        raise MalformedHeaderError(f"Header length {headerLength} exceeds {MAX_HEADER_BYTES}")
    if HEADER_LENGTH_BYTES + headerLength > totalSize:
        raise MalformedHeaderError(
            f"Header length {headerLength} runs past the end of the file ({totalSize} bytes)"
        )
    if reader is not None:
        with open(reader, "rb") as f:
            f.seek(HEADER_LENGTH_BYTES)
            rawHeader = f.read(headerLength)
    else:
        rawHeader = bytes(buffer[HEADER_LENGTH_BYTES : HEADER_LENGTH_BYTES + headerLength])
    dataStart = HEADER_LENGTH_BYTES + headerLength
    metas, metadata = parse_header(rawHeader, totalSize - dataStart)
    default_logger().debug(f"Opened {name or source if reader else '<memory>'}: {len(metas)} tensors")
    return Checkpoint(
        metas,
        reader if reader is not None else buffer,
        dataStart,
        metadata=metadata,
        rawHeader=rawHeader,
        name=name,
    )


def read_tensor(ckpt: Checkpoint, name: str) -> TypedTensor:
    """Reads one tensor widened to F32, recording its stored dtype"""
    meta = ckpt.meta(name)
    return TypedTensor(name, meta.dtype, ckpt.read_f32(name))


def read_raw(ckpt: Checkpoint, name: str) -> bytes:
    return ckpt.read_raw(name)


def read_mask(ckpt: Checkpoint, name: str) -> np.ndarray:
    return ckpt.read_mask(name)


# ---------------------------------------------------------------- writing


class CheckpointWriter:
    """Streams a checkpoint to disk: header first, then each tensor's bytes in
    declared order. Tensors handed over early are held until their turn.

    With a `template` checkpoint whose (name, dtype, shape) list matches, the
    template's header bytes are reused verbatim."""

    def __init__(self, path, metas, metadata=None, template: Optional[Checkpoint] = None):
        self.path = os.fspath(path)
        self.metas = list(metas)
        self.metadata = metadata
        self._header = None
        if template is not None and _sameLayout(template.metas, self.metas):
            self.metas = template.metas
            self._header = template.headerBytes()
            if metadata is None:
                self.metadata = template.metadata
        if self._header is None:
            self._header = build_header(self.metas, self.metadata)
        self._pending: Dict[str, bytes] = {}
        self._order = [m.name for m in sorted(self.metas, key=lambda m: m.byteRange)]
        self._byName = {m.name: m for m in self.metas}
        self._next = 0
        self._handle = None
        self._tempPath = f"{self.path}.partial"

    def __enter__(self):
        self.open()
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self.abort()

    def open(self):
        parent = os.path.dirname(self.path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        try:
            self._handle = open(self._tempPath, "wb")
            self._handle.write(struct.pack(HEADER_LENGTH_FORMAT, len(self._header)))
            self._handle.write(self._header)
        except OSError as e:
            raise CheckpointError(f"Cannot write {self.path}: {e}") from e
        return self

    def write(self, name, values: np.ndarray):
        meta = self._meta(name)
        values = np.asarray(values)
        if tuple(values.shape) != meta.shape:
            raise AlignmentError(f"shape {list(values.shape)} does not match {list(meta.shape)}", name)
        self.writeRaw(name, encode(meta.dtype, values))

    def writeRaw(self, name, raw: bytes):
        meta = self._meta(name)
        if len(raw) != meta.nbytes:
            raise CheckpointError(f"{name}: got {len(raw)} bytes, header declares {meta.nbytes}")
        if name in self._pending or self._order.index(name) < self._next:
            raise DuplicateTensorError(f"{name} written twice")
        self._pending[name] = raw
        self._flush()

    def _meta(self, name) -> TensorMeta:
        try:
            return self._byName[name]
        except KeyError:
            raise UnknownTensorError(f"{self.path}: {name!r} is not part of the output layout") from None

    def _flush(self):
        while self._next < len(self._order) and self._order[self._next] in self._pending:
            raw = self._pending.pop(self._order[self._next])
            try:
                self._handle.write(raw)
            except OSError as e:
                raise CheckpointError(f"Cannot write {self.path}: {e}") from e
            self._next += 1

    def close(self):
        if self._next != len(self._order):
            missing = self._order[self._next :]
            self.abort()
            raise CheckpointError(f"{self.path}: {len(missing)} tensors never written, first {missing[0]}")
        self._handle.close()
        os.replace(self._tempPath, self.path)
        default_logger().debug(f"Wrote {self.path}: {len(self._order)} tensors")

    def abort(self):
        if self._handle is not None and not self._handle.closed:
            self._handle.close()
        if os.path.exists(self._tempPath):
            os.remove(self._tempPath)


def _sameLayout(left: List[TensorMeta], right: List[TensorMeta]) -> bool:
    if len(left) != len(right):
        return False
    byName = {m.name: m for m in left}
    return all(m.name in byName and byName[m.name].sameLayout(m) for m in right)


@tracelog
def write_checkpoint(tensors, path, metadata=None, template: Optional[Checkpoint] = None) -> str:
    """Writes `tensors` to `path`.

    `tensors` is either a Checkpoint (copied byte for byte, header included)
    or an ordered iterable of TypedTensor, whose F32 values are narrowed to
    each tensor's dtype."""
    if isinstance(tensors, Checkpoint):
        with CheckpointWriter(path, tensors.metas, metadata, template=tensors) as writer:
            for name in tensors.names():
                writer.writeRaw(name, tensors.read_raw(name))
        return path
    tensors = list(tensors)
    metas = layout((t.name, t.dtype, t.shape) for t in tensors)
    with CheckpointWriter(path, metas, metadata, template=template) as writer:
        for t in tensors:
            writer.write(t.name, t.values)
    return path


def save_tensors(path, arrays: Dict[str, np.ndarray], dtype="F32", metadata=None) -> str:
    """Convenience writer for name -> array maps (fixtures, delta files, masks)"""
    metas = layout((name, dtype, np.shape(values)) for name, values in arrays.items())
    with CheckpointWriter(path, metas, metadata) as writer:
        for name, values in arrays.items():
            writer.write(name, values)
    return path
