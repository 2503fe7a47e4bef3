"""
Byte codec for server-to-server messages.

Every record is a little-endian length prefix followed by the body::

    u32  body length in bytes (21 or 29)
    u32  outer iteration
    u32  inner iteration
    u8   message type (MessageType value)
    u16  user index
    u16  server index (the non-coordinator endpoint, 0-based)
    f64  payload[0]
    f64  payload[1]            only when the body is 29 bytes

A batch is a plain concatenation of records.
"""
import struct
from typing import Iterable

from app.core.exceptions import StructuralError
from app.schemas.admm import Message, MessageType

_PREFIX = struct.Struct("<I")
_HEADER = struct.Struct("<IIBHH")
_F64 = struct.Struct("<d")


def encode_message(message: Message) -> bytes:
    body = _HEADER.pack(
        message.outer_iter, message.inner_iter, int(message.type), message.user, message.server
    ) + b"".join(_F64.pack(v) for v in message.payload)
    return _PREFIX.pack(len(body)) + body


def encode_batch(messages: Iterable[Message]) -> bytes:
    return b"".join(encode_message(m) for m in messages)


def decode_batch(data: bytes) -> list[Message]:
    """Decode a concatenation of records; raises StructuralError on malformed input."""
    messages = []
    offset = 0
    view = memoryview(data)
    while offset < len(data):
        if offset + _PREFIX.size > len(data):
            raise StructuralError(f"Truncated length prefix at byte {offset}")
        (length,) = _PREFIX.unpack_from(view, offset)
        offset += _PREFIX.size
        count = (length - _HEADER.size) // _F64.size
        if length not in (_HEADER.size + _F64.size, _HEADER.size + 2 * _F64.size):
            raise StructuralError(f"Invalid record length {length}")
        if offset + length > len(data):
            raise StructuralError(f"Truncated record at byte {offset}")
        outer, inner, kind, user, server = _HEADER.unpack_from(view, offset)
        payload = tuple(
            _F64.unpack_from(view, offset + _HEADER.size + p * _F64.size)[0] for p in range(count)
        )
        try:
            kind = MessageType(kind)
        except ValueError:
            raise StructuralError(f"Unknown message type {kind}")
        messages.append(
            Message(outer_iter=outer, inner_iter=inner, type=kind, user=user, server=server, payload=payload)
        )
        offset += length
    return messages
