"""Length-prefixed binary envelope for node-to-node and client messages.

Layout (big-endian)::

    u32  body length (kind length byte + kind + payload)
    u8   kind length
    ...  kind, ASCII
    ...  payload
"""

from __future__ import annotations

import struct

from .errors import ParameterError


def encode(kind: str, payload: bytes) -> bytes:
    tag = kind.encode("ascii")
    if not 0 < len(tag) < 256:
        raise ParameterError("envelope kind must be 1..255 ASCII bytes")
    body = bytes([len(tag)]) + tag + payload
    return struct.pack(">I", len(body)) + body


def decode(data: bytes) -> tuple[str, bytes]:
    if len(data) < 5:
        raise ParameterError("envelope truncated")
    (length,) = struct.unpack(">I", data[:4])
    body = data[4:]
    if length != len(body):
        raise ParameterError(f"envelope length {length} != body {len(body)}")
    tag_len = body[0]
    if tag_len == 0 or 1 + tag_len > len(body):
        raise ParameterError("bad envelope kind length")
    return body[1 : 1 + tag_len].decode("ascii"), bytes(body[1 + tag_len :])


def pack_fields(*fields: bytes) -> bytes:
    """Concatenate variable-length fields with u32 length prefixes."""
    return b"".join(struct.pack(">I", len(f)) + f for f in fields)


def unpack_fields(data: bytes) -> list[bytes]:
    out, pos = [], 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise ParameterError("field prefix truncated")
        (n,) = struct.unpack(">I", data[pos : pos + 4])
        pos += 4
        if pos + n > len(data):
            raise ParameterError("field body truncated")
        out.append(bytes(data[pos : pos + n]))
        pos += n
    return out
