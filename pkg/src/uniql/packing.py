"""Bit-exact int4 packing into uint32 words and the unpack/prune/repack path.

Layout (normative, little-endian): code i lives in bits [4*(i%8), 4*(i%8)+4)
of word i//8 as a two's-complement nibble. Quantized matrices flatten their
codes column-major before packing, so word count is ceil(rows*cols*bits/32).

Binary tensor blob: header {magic b"UQPK", version u16, rows u32, cols u32,
bits u8, group_size u16}, then scales (IEEE half, by column then row-group),
then the packed words.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ArtifactError, RangeError, ShapeError

MAGIC = b"UQPK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIBH")

_NIBBLE_SHIFTS = (4 * np.arange(8, dtype=np.uint32)).reshape(1, 8)
_BYTE_SHIFTS = (8 * np.arange(4, dtype=np.uint32)).reshape(1, 4)


@dataclass(frozen=True)
class PackedBuffer:
    """Immutable stream of 4-bit two's-complement codes in uint32 words."""

    words: np.ndarray  # uint32, length ceil(n_values/8)
    n_values: int
    bits: int = 4


def pack_int4(codes) -> PackedBuffer:
    """Pack signed codes in [-8, 7] into little-endian nibbles of uint32 words.

    Trailing unused nibbles of the last word are zero.
    """
    codes = np.asarray(codes, dtype=np.int64).ravel()
    if codes.size and (codes.min() < -8 or codes.max() > 7):
        raise RangeError("int4 codes must lie in [-8, 7]")
    n = int(codes.size)
    padded = np.zeros(8 * math.ceil(n / 8), dtype=np.uint32)
    padded[:n] = (codes & 0xF).astype(np.uint32)
    words = np.bitwise_or.reduce(padded.reshape(-1, 8) << _NIBBLE_SHIFTS, axis=1)
    return PackedBuffer(words=words.astype(np.uint32), n_values=n)


def unpack_int4(buf: PackedBuffer) -> np.ndarray:
    """Exact inverse of pack_int4; returns int8 codes in [-8, 7]."""
    nibbles = (buf.words.reshape(-1, 1) >> _NIBBLE_SHIFTS) & np.uint32(0xF)
    codes = nibbles.astype(np.int16).ravel()[: buf.n_values]
    codes[codes >= 8] -= 16
    return codes.astype(np.int8)


def _pack_int8(codes: np.ndarray) -> PackedBuffer:
    # 8-bit codes, 4 per word; word count ceil(n*8/32).
    codes = np.asarray(codes, dtype=np.int64).ravel()
    if codes.size and (codes.min() < -128 or codes.max() > 127):
        raise RangeError("int8 codes must lie in [-128, 127]")
    n = int(codes.size)
    padded = np.zeros(4 * math.ceil(n / 4), dtype=np.uint32)
    padded[:n] = (codes & 0xFF).astype(np.uint32)
    words = np.bitwise_or.reduce(padded.reshape(-1, 4) << _BYTE_SHIFTS, axis=1)
    return PackedBuffer(words=words.astype(np.uint32), n_values=n, bits=8)


def _unpack_int8(buf: PackedBuffer) -> np.ndarray:
    bytes_ = (buf.words.reshape(-1, 1) >> _BYTE_SHIFTS) & np.uint32(0xFF)
    codes = bytes_.astype(np.int16).ravel()[: buf.n_values]
    codes[codes >= 128] -= 256
    return codes.astype(np.int8)


def pack_codes(codes, bits: int) -> PackedBuffer:
    """Pack codes at the storage width used for ``bits``-wide quantization.

    3-bit codes are stored widened in the 4-bit nibble layout.
    """
    if bits in (3, 4):
        return pack_int4(codes)
    if bits == 8:
        return _pack_int8(codes)
    raise RangeError(f"unsupported bit width {bits}")


def unpack_codes(buf: PackedBuffer) -> np.ndarray:
    if buf.bits == 4:
        return unpack_int4(buf)
    if buf.bits == 8:
        return _unpack_int8(buf)
    raise RangeError(f"unsupported stored bit width {buf.bits}")


@dataclass
class QuantizedTensor:
    """Packed integer codes plus per-(column, row-group) scales.

    Scale groups run along the input (row) dimension within each output
    column: group g of column j covers rows [g*group_size, (g+1)*group_size)
    and the last group may be short. ``packed`` holds the codes flattened
    column-major. dequant(q)[i, j] = codes[i, j] * scales[i // group_size, j].

    Scales are kept at full precision in memory (exact products when an SVD
    factor is fused in) and serialize as IEEE half, little-endian.
    """

    rows: int
    cols: int
    bits: int
    group_size: int
    packed: PackedBuffer
    scales: np.ndarray  # float64, shape (n_groups, cols)
    layout: str = "column-grouped"
    column_scaled: bool = field(default=False)  # scales carry fused SVD factors

    @property
    def n_groups(self) -> int:
        return math.ceil(self.rows / self.group_size)

    def codes(self) -> np.ndarray:
        """Codes as an int8 (rows, cols) matrix."""
        flat = unpack_codes(self.packed)
        return flat.reshape((self.rows, self.cols), order="F")

    def nbytes(self) -> int:
        return len(to_bytes(self))


def _validate(q: QuantizedTensor) -> None:
    if q.scales.shape != (q.n_groups, q.cols):
        raise ShapeError(
            f"scales shape {q.scales.shape} != (n_groups={q.n_groups}, cols={q.cols})"
        )
    if q.packed.n_values != q.rows * q.cols:
        raise ShapeError("packed value count does not match rows*cols")


def from_codes(codes: np.ndarray, scales: np.ndarray, bits: int, group_size: int,
               column_scaled: bool = False) -> QuantizedTensor:
    """Assemble a QuantizedTensor from a (rows, cols) code matrix."""
    rows, cols = codes.shape
    q = QuantizedTensor(
        rows=rows,
        cols=cols,
        bits=bits,
        group_size=group_size,
        packed=pack_codes(codes.flatten(order="F"), bits),
        scales=np.ascontiguousarray(scales, dtype=np.float64),
        column_scaled=column_scaled,
    )
    _validate(q)
    return q


def prune_packed(q: QuantizedTensor, keep_cols: int) -> QuantizedTensor:
    """Keep the first ``keep_cols`` output columns (and their scales).

    Channels are pre-sorted by importance, so the kept set is a prefix.
    """
    if not 0 < keep_cols <= q.cols:
        raise ShapeError(f"keep_cols must be in [1, {q.cols}], got {keep_cols}")
    return select_columns(q, np.arange(keep_cols))


def prune_packed_rows(q: QuantizedTensor, keep_rows: int) -> QuantizedTensor:
    """Keep the first ``keep_rows`` input rows.

    Scales of fully dropped groups are removed; a partially kept last group
    retains its original scale so the codes stay valid unmodified.
    """
    if not 0 < keep_rows <= q.rows:
        raise ShapeError(f"keep_rows must be in [1, {q.rows}], got {keep_rows}")
    return select_rows(q, np.arange(keep_rows))


def select_columns(q: QuantizedTensor, cols) -> QuantizedTensor:
    """Keep an arbitrary column subset; scales follow their columns exactly."""
    cols = np.asarray(cols, dtype=np.int64)
    codes = q.codes()[:, cols]
    scales = q.scales[:, cols]
    return from_codes(codes, scales, q.bits, q.group_size, q.column_scaled)


def select_rows(q: QuantizedTensor, rows) -> QuantizedTensor:
    """Keep an ascending row subset, carrying each row's original group scale.

    Exactness requires every post-selection scale group to draw all its rows
    from a single original group (structured per-head prefixes satisfy this
    whenever a head's rows do not straddle a group boundary); otherwise the
    codes would need rescaling and this raises instead.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise ShapeError("row selection must keep at least one row")
    if np.any(np.diff(rows) <= 0):
        raise ShapeError("row selection must be strictly ascending")
    old_group = rows // q.group_size
    new_group = np.arange(rows.size) // q.group_size
    n_new = int(new_group[-1]) + 1
    scales = np.empty((n_new, q.cols), dtype=np.float64)
    for g in range(n_new):
        sources = np.unique(old_group[new_group == g])
        if sources.size != 1:
            raise ShapeError(
                "row selection mixes scale groups; codes cannot be kept exact"
            )
        scales[g] = q.scales[sources[0]]
    codes = q.codes()[rows, :]
    return from_codes(codes, scales, q.bits, q.group_size, q.column_scaled)


def to_bytes(q: QuantizedTensor) -> bytes:
    """Serialize to the normative little-endian blob layout."""
    _validate(q)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, q.rows, q.cols, q.bits, q.group_size)
    # scales by column then group
    scale_bytes = np.ascontiguousarray(q.scales.T, dtype="<f2").tobytes()
    word_bytes = np.ascontiguousarray(q.packed.words, dtype="<u4").tobytes()
    return header + scale_bytes + word_bytes


def from_bytes(data: bytes, column_scaled: bool = False) -> QuantizedTensor:
    if len(data) < _HEADER.size:
        raise ArtifactError("quantized blob shorter than its header")
    magic, version, rows, cols, bits, group_size = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ArtifactError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ArtifactError(f"unsupported format version {version}")
    n_groups = math.ceil(rows / group_size)
    off = _HEADER.size
    n_scale_bytes = 2 * n_groups * cols
    storage_bits = 8 if bits == 8 else 4
    per_word = 32 // storage_bits
    n_words = math.ceil(rows * cols / per_word)
    if len(data) != off + n_scale_bytes + 4 * n_words:
        raise ArtifactError("quantized blob has trailing or missing bytes")
    scales = (
        np.frombuffer(data, dtype="<f2", count=n_groups * cols, offset=off)
        .reshape(cols, n_groups)
        .T.astype(np.float64)
    )
    off += n_scale_bytes
    words = np.frombuffer(data, dtype="<u4", count=n_words, offset=off).copy()
    q = QuantizedTensor(
        rows=rows,
        cols=cols,
        bits=bits,
        group_size=group_size,
        packed=PackedBuffer(words=words, n_values=rows * cols, bits=storage_bits),
        scales=scales,
        column_scaled=column_scaled,
    )
    _validate(q)
    return q
