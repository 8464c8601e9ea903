"""Binary wire format for all protocol messages.

Generic frame (big-endian throughout):

    version(1) | type(1) | spi_i(8) | spi_r(8) | counter(4) | sections

where sections is a run of 2-octet-length-prefixed octet strings. The
broadcast advertisement is a special compact frame sized for a BLE
advertising payload (31-octet budget):

    version(1) | type=ADVERT(1) | beacon_id(8) | fetch_handle(8) | reserved(4)

i.e. exactly 22 octets. See docs/wire-format.md for the per-type section
layouts.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

FORMAT_VERSION = 1
HEADER_LEN = 22
ADVERT_LEN = 22
ADVERT_MAX = 31  # BLE advertising data budget
ZERO_SPI = bytes(8)


class MalformedMessage(ValueError):
    pass


class MsgType(IntEnum):
    ADVERT = 1
    BNONCE_FETCH_REQ = 2
    BNONCE_FETCH_RESP = 3
    KE_REQ = 4
    KE_RESP = 5
    T1_AUTH_REQ = 6
    T1_AUTH_RESP = 7
    T2_MSG1 = 8
    T2_MSG2 = 9
    FINAL_AUTH_REQ = 10
    FINAL_AUTH_RESP = 11
    ERROR = 12


class ErrorReason(IntEnum):
    PROTOCOL = 1
    AUTH = 2
    INTERNAL = 3


@dataclass(frozen=True)
class ProtocolMessage:
    msg_type: MsgType
    spi_i: bytes = ZERO_SPI
    spi_r: bytes = ZERO_SPI
    counter: int = 0
    sections: tuple = field(default_factory=tuple)

    def serialize(self) -> bytes:
        if self.msg_type == MsgType.ADVERT:
            beacon_id, handle = self.sections
            out = bytes([FORMAT_VERSION, MsgType.ADVERT]) + beacon_id + handle + bytes(4)
            assert len(out) == ADVERT_LEN
            return out
        return self.header() + pack_sections(self.sections)

    def header(self) -> bytes:
        """The unencrypted frame header; doubles as AEAD associated data."""
        return (bytes([FORMAT_VERSION, self.msg_type]) + self.spi_i + self.spi_r
                + struct.pack(">I", self.counter))


def pack_sections(sections) -> bytes:
    out = bytearray()
    for s in sections:
        if len(s) > 0xFFFF:
            raise MalformedMessage("section too long")
        out += struct.pack(">H", len(s)) + s
    return bytes(out)


def unpack_sections(data: bytes) -> tuple:
    sections = []
    off = 0
    while off < len(data):
        if off + 2 > len(data):
            raise MalformedMessage("truncated section length")
        (slen,) = struct.unpack(">H", data[off:off + 2])
        off += 2
        if off + slen > len(data):
            raise MalformedMessage("truncated section")
        sections.append(data[off:off + slen])
        off += slen
    return tuple(sections)


def parse(data: bytes) -> ProtocolMessage:
    if len(data) < 2:
        raise MalformedMessage("short frame")
    if data[0] != FORMAT_VERSION:
        raise MalformedMessage(f"unknown version {data[0]}")
    try:
        msg_type = MsgType(data[1])
    except ValueError:
        raise MalformedMessage(f"unknown message type {data[1]}") from None
    if msg_type == MsgType.ADVERT:
        if len(data) != ADVERT_LEN or data[18:] != bytes(4):
            raise MalformedMessage("bad advertisement frame")
        return ProtocolMessage(MsgType.ADVERT, sections=(data[2:10], data[10:18]))
    if len(data) < HEADER_LEN:
        raise MalformedMessage("truncated header")
    spi_i, spi_r = data[2:10], data[10:18]
    (counter,) = struct.unpack(">I", data[18:22])
    return ProtocolMessage(msg_type, spi_i, spi_r, counter,
                           unpack_sections(data[HEADER_LEN:]))


def make_advert(beacon_id: bytes, fetch_handle: bytes) -> ProtocolMessage:
    if len(beacon_id) != 8 or len(fetch_handle) != 8:
        raise MalformedMessage("beacon id and fetch handle are 8 octets")
    return ProtocolMessage(MsgType.ADVERT, sections=(beacon_id, fetch_handle))
