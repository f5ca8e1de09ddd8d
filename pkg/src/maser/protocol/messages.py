"""Message kinds, payload schemas and the length-prefixed frame codec.

Frame layout (all integers little-endian)::

    u32 length   -- bytes that follow: 9 + len(payload)
    u8  kind
    u32 round
    u32 sender
    payload
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .. import mkhe
from ..errors import FormatError
from ..model import Architecture, ModelParams
from ..sparsify import Mask

PROTOCOL_VERSION = 1
DEFAULT_MAX_FRAME = 256 * 1024 * 1024

SERVER_ID = 0xFFFFFFFE
KEYMANAGER_ID = 0xFFFFFFFD

_PREFIX = struct.Struct("<I")
_HEAD = struct.Struct("<BII")
FRAME_OVERHEAD = _PREFIX.size + _HEAD.size


class Kind(enum.IntEnum):
    HELLO = 0
    PUB_KEY_SHARE = 1
    AGG_PUB_KEY = 2
    GLOBAL_MODEL = 3
    LOCAL_MASK = 4
    GLOBAL_MASK = 5
    ENC_SLICES = 6
    AGG_ENC_SLICES = 7
    PARTIAL_DECS = 8
    ROUND_DONE = 9
    ABORT = 10


MASK_KINDS = frozenset({Kind.LOCAL_MASK, Kind.GLOBAL_MASK})
CIPHERTEXT_KINDS = frozenset({Kind.ENC_SLICES, Kind.AGG_ENC_SLICES, Kind.PARTIAL_DECS})
MODEL_KINDS = frozenset({Kind.GLOBAL_MODEL})
KEY_KINDS = frozenset({Kind.PUB_KEY_SHARE, Kind.AGG_PUB_KEY})


@dataclass(frozen=True)
class Message:
    kind: Kind
    round: int
    sender: int
    payload: bytes = b""


def encode_frame(msg: Message) -> bytes:
    body = _HEAD.pack(int(msg.kind), msg.round, msg.sender) + msg.payload
    return _PREFIX.pack(len(body)) + body


def decode_frame(data, max_frame: int = DEFAULT_MAX_FRAME, final: bool = True):
    """Decode one frame from the start of ``data``.

    Returns ``(message, bytes_consumed)``. An incomplete frame raises
    :class:`FormatError` when ``final`` is true, otherwise returns ``(None, 0)``
    so a stream reader can wait for more bytes.
    """
    view = memoryview(data)
    if len(view) < _PREFIX.size:
        if final:
            raise FormatError("truncated frame length prefix")
        return None, 0
    (length,) = _PREFIX.unpack_from(view, 0)
    if length > max_frame:
        raise FormatError(f"frame of {length} bytes exceeds limit {max_frame}")
    if length < _HEAD.size:
        raise FormatError(f"frame length {length} shorter than header")
    end = _PREFIX.size + length
    if len(view) < end:
        if final:
            raise FormatError(f"truncated frame: have {len(view) - _PREFIX.size} of {length} bytes")
        return None, 0
    kind, rnd, sender = _HEAD.unpack_from(view, _PREFIX.size)
    try:
        kind = Kind(kind)
    except ValueError:
        raise FormatError(f"unknown message kind {kind}") from None
    return Message(kind, rnd, sender, bytes(view[_PREFIX.size + _HEAD.size : end])), end


def read_frame(stream, max_frame: int = DEFAULT_MAX_FRAME) -> Message | None:
    """Read one frame from a binary file-like object; None on clean EOF."""
    prefix = _read_exact(stream, _PREFIX.size, allow_eof=True)
    if prefix is None:
        return None
    (length,) = _PREFIX.unpack(prefix)
    if length > max_frame:
        raise FormatError(f"frame of {length} bytes exceeds limit {max_frame}")
    body = _read_exact(stream, length)
    msg, _ = decode_frame(prefix + body, max_frame)
    return msg


def _read_exact(stream, count: int, allow_eof: bool = False):
    chunks, got = [], 0
    while got < count:
        chunk = stream.read(count - got)
        if not chunk:
            if allow_eof and got == 0:
                return None
            raise FormatError(f"stream ended after {got} of {count} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


# --------------------------------------------------------------------------
# Payload schemas
# --------------------------------------------------------------------------

_DIGEST = 32
_LIST_HEAD = struct.Struct("<II")


def _pack_items(items: list[bytes]) -> bytes:
    size = len(items[0]) if items else 0
    if any(len(it) != size for it in items):
        raise FormatError("list items must share one serialized size")
    return _LIST_HEAD.pack(len(items), size) + b"".join(items)


def _unpack_items(view: memoryview, off: int) -> list[bytes]:
    if len(view) - off < _LIST_HEAD.size:
        raise FormatError("truncated item list header")
    count, size = _LIST_HEAD.unpack_from(view, off)
    off += _LIST_HEAD.size
    if len(view) - off != count * size:
        raise FormatError(f"item list body has {len(view) - off} bytes, expected {count} x {size}")
    return [bytes(view[off + i * size : off + (i + 1) * size]) for i in range(count)]


def _take_digest(view: memoryview, off: int) -> bytes:
    if len(view) - off < _DIGEST:
        raise FormatError("truncated digest")
    return bytes(view[off : off + _DIGEST])


def pack_hello(ref_digest: bytes, version: int = PROTOCOL_VERSION) -> bytes:
    return struct.pack("<I", version) + ref_digest


def unpack_hello(payload: bytes) -> tuple[int, bytes]:
    if len(payload) != 4 + _DIGEST:
        raise FormatError("malformed hello")
    return struct.unpack_from("<I", payload)[0], payload[4:]


def pack_model(model: ModelParams) -> bytes:
    sizes = model.arch.sizes
    head = struct.pack(f"<I{len(sizes)}IB", len(sizes), *sizes, int(model.has_bias))
    return head + model.flatten().astype("<f8").tobytes()


def unpack_model(payload: bytes) -> ModelParams:
    view = memoryview(payload)
    try:
        (count,) = struct.unpack_from("<I", view, 0)
        if count > 1024:
            raise FormatError(f"implausible layer count {count}")
        sizes = struct.unpack_from(f"<{count}I", view, 4)
        (bias,) = struct.unpack_from("<B", view, 4 + 4 * count)
    except struct.error as exc:
        raise FormatError(f"truncated model header: {exc}") from exc
    try:
        arch = Architecture(sizes, bool(bias))
    except Exception as exc:
        raise FormatError(f"invalid architecture in model payload: {exc}") from exc
    off = 5 + 4 * count
    if len(view) - off != 8 * arch.param_count:
        raise FormatError(f"model body has {len(view) - off} bytes, expected {8 * arch.param_count}")
    flat = np.frombuffer(view[off:], dtype="<f8")
    return ModelParams.from_flat(arch, flat)


def pack_mask(mask: Mask) -> bytes:
    return mask.to_bytes()


def unpack_mask(payload: bytes) -> Mask:
    return Mask.from_bytes(payload)


def pack_enc_slices(pk_digest: bytes, mask_digest: bytes, cts) -> bytes:
    return pk_digest + mask_digest + _pack_items([mkhe.serialize(c) for c in cts])


def unpack_enc_slices(payload: bytes, params) -> tuple[bytes, bytes, list]:
    view = memoryview(payload)
    pk_digest = _take_digest(view, 0)
    mask_digest = _take_digest(view, _DIGEST)
    items = _unpack_items(view, 2 * _DIGEST)
    return pk_digest, mask_digest, [mkhe.deserialize(it, params, expect=mkhe.Ciphertext) for it in items]


def pack_agg_slices(mask_digest: bytes, cts) -> bytes:
    return mask_digest + _pack_items([mkhe.serialize(c) for c in cts])


def unpack_agg_slices(payload: bytes, params) -> tuple[bytes, list]:
    view = memoryview(payload)
    mask_digest = _take_digest(view, 0)
    items = _unpack_items(view, _DIGEST)
    return mask_digest, [mkhe.deserialize(it, params, expect=mkhe.Ciphertext) for it in items]


def pack_partials(parts) -> bytes:
    return _pack_items([mkhe.serialize(p) for p in parts])


def unpack_partials(payload: bytes, params) -> list:
    items = _unpack_items(memoryview(payload), 0)
    return [mkhe.deserialize(it, params, expect=mkhe.PartialDecryption) for it in items]


def content_size(msg: Message) -> int:
    """Serialized size of the objects a message carries, excluding list headers and digests.

    Ciphertext-carrying kinds report count x item size, so their totals scale
    exactly with the number of slices.
    """
    view = memoryview(msg.payload)
    try:
        if msg.kind == Kind.ENC_SLICES:
            count, size = _LIST_HEAD.unpack_from(view, 2 * _DIGEST)
            return count * size
        if msg.kind == Kind.AGG_ENC_SLICES:
            count, size = _LIST_HEAD.unpack_from(view, _DIGEST)
            return count * size
        if msg.kind == Kind.PARTIAL_DECS:
            count, size = _LIST_HEAD.unpack_from(view, 0)
            return count * size
    except struct.error:
        return 0
    return len(msg.payload)
