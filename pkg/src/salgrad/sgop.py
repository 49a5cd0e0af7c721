"""Binary sidecar for operator parameters and region edit plans.

All integers and floats are little-endian.

Operator record::

    b"SGOP"  u16 version  u16 kind=0
    16s tag (ASCII, NUL padded)   u32 n_arrays
    per array: u32 ndim, u32 dims[ndim], f64 values (C order)

Plan table (kind=1)::

    b"SGOP"  u16 version  u16 kind=1  u32 n_regions
    per region (fixed 80 bytes):
        u32 top, left, height, width
        f64 peak_saliency, f64 achieved_saliency
        16s operator tag
        u64 params_offset, u64 params_length
        u64 mask_offset, u64 mask_length
    then the blobs; every blob is a complete operator record, offsets are
    from the start of the file. The mask blob has tag "mask".
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"SGOP"
VERSION = 1
KIND_OPERATOR = 0
KIND_PLANS = 1

_HEADER = struct.Struct("<4sHH")
_REGION = struct.Struct("<4I2d16s4Q")


class SgopError(ValueError):
    pass


def _tag_bytes(tag: str) -> bytes:
    raw = tag.encode("ascii")
    if len(raw) > 16:
        raise SgopError(f"tag too long: {tag!r}")
    return raw.ljust(16, b"\0")


def _tag_str(raw: bytes) -> str:
    return raw.rstrip(b"\0").decode("ascii")


def encode_operator(tag: str, arrays: Sequence[np.ndarray]) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, KIND_OPERATOR), _tag_bytes(tag), struct.pack("<I", len(arrays))]
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def _check_header(buf: bytes, kind: int) -> int:
    if len(buf) < _HEADER.size:
        raise SgopError("truncated SGOP header")
    magic, version, got = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise SgopError("bad magic, not an SGOP file")
    if version != VERSION:
        raise SgopError(f"unsupported SGOP version {version}")
    if got != kind:
        raise SgopError(f"expected SGOP kind {kind}, found {got}")
    return _HEADER.size


def decode_operator(buf: bytes) -> tuple[str, list[np.ndarray]]:
    pos = _check_header(buf, KIND_OPERATOR)
    try:
        tag = _tag_str(buf[pos : pos + 16])
        pos += 16
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        arrays = []
        for _ in range(n):
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos)
            pos += 8 * count
            arrays.append(data.reshape(shape).astype(np.float64))
    except (struct.error, ValueError) as err:
        raise SgopError(f"corrupt SGOP operator record: {err}") from None
    return tag, arrays


def write_operator(path, tag: str, arrays: Sequence[np.ndarray]) -> None:
    Path(path).write_bytes(encode_operator(tag, arrays))


def read_operator(path) -> tuple[str, list[np.ndarray]]:
    return decode_operator(Path(path).read_bytes())


@dataclass
class PlanRecord:
    bbox: tuple[int, int, int, int]
    peak_saliency: float
    achieved_saliency: float
    tag: str
    params: list[np.ndarray]
    mask: np.ndarray


def encode_plans(records: Sequence[PlanRecord]) -> bytes:
    head = _HEADER.pack(MAGIC, VERSION, KIND_PLANS) + struct.pack("<I", len(records))
    table_end = len(head) + _REGION.size * len(records)
    blobs: list[bytes] = []
    entries: list[bytes] = []
    offset = table_end
    for r in records:
        pblob = encode_operator(r.tag, r.params)
        mblob = encode_operator("mask", [r.mask])
        entries.append(
            _REGION.pack(
                *[int(v) for v in r.bbox],
                float(r.peak_saliency),
                float(r.achieved_saliency),
                _tag_bytes(r.tag),
                offset,
                len(pblob),
                offset + len(pblob),
                len(mblob),
            )
        )
        blobs += [pblob, mblob]
        offset += len(pblob) + len(mblob)
    return head + b"".join(entries) + b"".join(blobs)


def decode_plans(buf: bytes) -> list[PlanRecord]:
    pos = _check_header(buf, KIND_PLANS)
    try:
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        out = []
        for i in range(n):
            top, left, h, w, peak, achieved, tag, po, pl, mo, ml = _REGION.unpack_from(
                buf, pos + i * _REGION.size
            )
            ptag, params = decode_operator(buf[po : po + pl])
            _, (mask,) = decode_operator(buf[mo : mo + ml])
            if ptag != _tag_str(tag):
                raise SgopError(f"region {i}: table tag {_tag_str(tag)!r} vs blob tag {ptag!r}")
            out.append(PlanRecord((top, left, h, w), peak, achieved, ptag, params, mask))
    except struct.error as err:
        raise SgopError(f"corrupt SGOP plan table: {err}") from None
    return out


def write_plans(path, records: Sequence[PlanRecord]) -> None:
    Path(path).write_bytes(encode_plans(records))


def read_plans(path) -> list[PlanRecord]:
    return decode_plans(Path(path).read_bytes())
