"""Wire codec for mesh packets.

The byte layout below is the wire protocol and is identical over every
transport:

    offset  size  field
    0       2     magic 0x53 0x47
    2       1     version (0x01)
    3       1     packet type
    4       1     flags (bit0 = sealed payload)
    5       1     ttl
    6       32    source name
    38      32    destination name (all-zero = broadcast/unaddressed)
    70      8     dedup nonce, big-endian
    78      4     payload length, big-endian
    82      -     payload

Decoding is a single pass and exposes the payload as a memoryview into the
input buffer; payload bytes are never duplicated by the codec.
"""

from __future__ import annotations

import dataclasses
import enum
import os
import struct
from dataclasses import dataclass
from typing import Optional, Union

from .naming import GdpName, NAME_LEN

MAGIC = b"\x53\x47"
VERSION = 1
HEADER_LEN = 82
MAX_PAYLOAD = 16 * 1024 * 1024
DEFAULT_TTL = 32

_HEADER = struct.Struct(">2sBBBB32s32sQI")
assert _HEADER.size == HEADER_LEN


class PacketType(enum.IntEnum):
    ADVERTISEMENT = 0x01
    SUBSCRIBE = 0x02
    DATA = 0x03
    RIB_QUERY = 0x04
    RIB_RESPONSE = 0x05


FLAG_SEALED = 0x01


class CodecError(ValueError):
    """Base class for all wire codec failures."""


class BadMagic(CodecError):
    pass


class UnknownType(CodecError):
    pass


class TruncatedPacket(CodecError):
    pass


class OversizePayload(CodecError):
    pass


class LengthMismatch(CodecError):
    """Input carries bytes beyond the declared payload length."""


class InvalidHeader(CodecError):
    pass


@dataclass
class Packet:
    """One wire unit: fixed header fields plus payload bytes.

    ``payload`` may be ``bytes`` or a ``memoryview`` into a larger buffer;
    the two compare equal when their bytes match.
    """

    ptype: int
    source: GdpName
    destination: GdpName
    ttl: int = DEFAULT_TTL
    flags: int = 0
    nonce64: int = 0
    payload: Union[bytes, memoryview] = b""

    def sealed(self) -> bool:
        return bool(self.flags & FLAG_SEALED)

    def payload_bytes(self) -> bytes:
        """Materialize the payload as bytes (copies if it is a view)."""
        return bytes(self.payload)

    def with_ttl(self, ttl: int) -> "Packet":
        """Copy of this packet with a new ttl; the payload buffer is shared."""
        return dataclasses.replace(self, ttl=ttl)


def fresh_nonce64() -> int:
    return int.from_bytes(os.urandom(8), "big")


def encode_header(pkt: Packet) -> bytes:
    if not 1 <= pkt.ttl <= 255:
        raise InvalidHeader("ttl must be between 1 and 255 on emission")
    if not 0 <= pkt.flags <= 255:
        raise InvalidHeader("flags must fit one byte")
    if pkt.ptype not in PacketType._value2member_map_:
        raise UnknownType(f"unknown packet type {pkt.ptype:#x}")
    n = len(pkt.payload)
    if n > MAX_PAYLOAD:
        raise OversizePayload(f"payload of {n} bytes exceeds {MAX_PAYLOAD}")
    return _HEADER.pack(
        MAGIC,
        VERSION,
        pkt.ptype,
        pkt.flags,
        pkt.ttl,
        bytes(pkt.source),
        bytes(pkt.destination),
        pkt.nonce64,
        n,
    )


def encode_parts(pkt: Packet) -> tuple:
    """Header bytes and the payload buffer, without copying the payload."""
    return encode_header(pkt), pkt.payload


def encode(pkt: Packet) -> bytes:
    header, payload = encode_parts(pkt)
    return header + payload


def peek_total_length(buf) -> Optional[int]:
    """Total encoded length of the packet starting at ``buf``.

    Returns None when fewer than ``HEADER_LEN`` bytes are available.
    Raises :class:`OversizePayload` early so framers can reject a bad
    stream before buffering 16 MiB of it.
    """
    if len(buf) < HEADER_LEN:
        return None
    payload_len = int.from_bytes(bytes(buf[78:82]), "big")
    if payload_len > MAX_PAYLOAD:
        raise OversizePayload(f"declared payload of {payload_len} bytes exceeds {MAX_PAYLOAD}")
    return HEADER_LEN + payload_len


def decode(data) -> Packet:
    """Decode one packet occupying the whole input buffer.

    Total over arbitrary input: returns a Packet or raises a typed
    :class:`CodecError`. The payload of the returned packet is a
    memoryview into ``data``.
    """
    view = data if isinstance(data, memoryview) else memoryview(data)
    if len(view) < HEADER_LEN:
        raise TruncatedPacket(f"{len(view)} bytes is shorter than the {HEADER_LEN}-byte header")
    magic, version, ptype, flags, ttl, src, dst, nonce64, payload_len = _HEADER.unpack_from(view, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic.hex()}")
    if version != VERSION:
        raise BadMagic(f"unsupported version {version}")
    if ptype not in PacketType._value2member_map_:
        raise UnknownType(f"unknown packet type {ptype:#x}")
    if payload_len > MAX_PAYLOAD:
        raise OversizePayload(f"declared payload of {payload_len} bytes exceeds {MAX_PAYLOAD}")
    end = HEADER_LEN + payload_len
    if len(view) < end:
        raise TruncatedPacket(f"need {end} bytes, have {len(view)}")
    if len(view) > end:
        raise LengthMismatch(f"{len(view) - end} trailing bytes after payload")
    return Packet(
        ptype=PacketType(ptype),
        source=GdpName(src),
        destination=GdpName(dst),
        ttl=ttl,
        flags=flags,
        nonce64=nonce64,
        payload=view[HEADER_LEN:end],
    )


BROADCAST = GdpName.zero()

assert NAME_LEN == 32
