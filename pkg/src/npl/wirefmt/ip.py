"""IPv4 datagram model, fragmentation, and reassembly (RFC 791 subset).

No IP options; header is always 20 bytes. Fragment offsets count 8-byte
units. Reassembly resolves overlapping byte ranges first-arrival-wins,
which is what makes planting a spoofed tail ahead of the genuine fragments
effective.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from npl.errors import (
    CannotFragment,
    ConflictingLength,
    IncompleteHole,
    Malformed,
    MtuTooSmall,
)
from npl.wirefmt.checksum import internet_checksum

PROTO_ICMP = 1
PROTO_UDP = 17

IPV4_HEADER_LEN = 20
MIN_MTU = 68

_HEADER = struct.Struct("!BBHHHBBH4s4s")


def ip_to_bytes(addr: str) -> bytes:
    parts = addr.split(".")
    if len(parts) != 4:
        raise ValueError(f"bad IPv4 address {addr!r}")
    try:
        octets = [int(p) for p in parts]
    except ValueError:
        raise ValueError(f"bad IPv4 address {addr!r}") from None
    if any(o < 0 or o > 255 for o in octets):
        raise ValueError(f"bad IPv4 address {addr!r}")
    return bytes(octets)


def ip_from_bytes(raw: bytes) -> str:
    if len(raw) != 4:
        raise ValueError("IPv4 address must be 4 bytes")
    return ".".join(str(b) for b in raw)


@dataclass(frozen=True)
class Ipv4Packet:
    src: str
    dst: str
    protocol: int
    ipid: int
    payload: bytes
    df: bool = False
    mf: bool = False
    frag_offset: int = 0  # in 8-byte units
    ttl: int = 64

    def __post_init__(self):
        ip_to_bytes(self.src)
        ip_to_bytes(self.dst)
        if not 0 <= self.protocol <= 0xFF:
            raise ValueError(f"protocol {self.protocol} out of range")
        if not 0 <= self.ipid <= 0xFFFF:
            raise ValueError(f"ipid {self.ipid} out of range")
        if not 0 <= self.frag_offset < 2**13:
            raise ValueError(f"fragment offset {self.frag_offset} out of range")
        if not 0 <= self.ttl <= 0xFF:
            raise ValueError(f"ttl {self.ttl} out of range")
        if self.frag_offset * 8 + len(self.payload) > 0xFFFF:
            raise ValueError("fragment extends past 65535 bytes")
        if IPV4_HEADER_LEN + len(self.payload) > 0xFFFF:
            raise ValueError("datagram longer than 65535 bytes")

    @property
    def total_length(self) -> int:
        return IPV4_HEADER_LEN + len(self.payload)

    @property
    def is_fragment(self) -> bool:
        return self.mf or self.frag_offset > 0

    @property
    def frag_key(self) -> tuple:
        """Reassembly key: all fragments of one datagram share it."""
        return (self.src, self.dst, self.protocol, self.ipid)

    @property
    def header_checksum(self) -> int:
        return internet_checksum(self._header_bytes(0))

    def _header_bytes(self, checksum: int) -> bytes:
        flags_frag = (0x4000 if self.df else 0) | (0x2000 if self.mf else 0) | self.frag_offset
        return _HEADER.pack(
            0x45,
            0,
            self.total_length,
            self.ipid,
            flags_frag,
            self.ttl,
            self.protocol,
            checksum,
            ip_to_bytes(self.src),
            ip_to_bytes(self.dst),
        )

    def encode(self) -> bytes:
        return self._header_bytes(self.header_checksum) + self.payload

    @classmethod
    def decode(cls, data: bytes) -> "Ipv4Packet":
        if len(data) < IPV4_HEADER_LEN:
            raise Malformed("truncated IPv4 header", offset=len(data))
        (vihl, _tos, total_length, ipid, flags_frag, ttl, protocol, checksum,
         src, dst) = _HEADER.unpack_from(data, 0)
        if vihl != 0x45:
            raise Malformed(f"unsupported version/IHL byte 0x{vihl:02x}", offset=0)
        if total_length != len(data):
            raise Malformed(
                f"total length {total_length} != buffer {len(data)}", offset=2
            )
        if internet_checksum(data[:IPV4_HEADER_LEN]) != 0:
            raise Malformed("bad IPv4 header checksum", offset=10)
        pkt = cls(
            src=ip_from_bytes(src),
            dst=ip_from_bytes(dst),
            protocol=protocol,
            ipid=ipid,
            payload=data[IPV4_HEADER_LEN:],
            df=bool(flags_frag & 0x4000),
            mf=bool(flags_frag & 0x2000),
            frag_offset=flags_frag & 0x1FFF,
            ttl=ttl,
        )
        assert pkt.header_checksum == checksum
        return pkt


def fragment_packet(pkt: Ipv4Packet, mtu: int) -> list[Ipv4Packet]:
    """Split an unfragmented datagram into fragments of at most ``mtu`` bytes.

    Payload boundaries fall on 8-byte multiples except for the final
    fragment; all fragments inherit src/dst/protocol/ipid/ttl. A packet
    that already fits is returned unchanged.
    """
    if mtu < MIN_MTU:
        raise MtuTooSmall(f"mtu {mtu} below IPv4 minimum {MIN_MTU}")
    if pkt.is_fragment:
        raise ValueError("refusing to fragment a fragment")
    if pkt.total_length <= mtu:
        return [pkt]
    if pkt.df:
        raise CannotFragment(f"DF set on {pkt.total_length}-byte packet, mtu {mtu}")
    chunk = ((mtu - IPV4_HEADER_LEN) // 8) * 8
    frags = []
    for start in range(0, len(pkt.payload), chunk):
        piece = pkt.payload[start : start + chunk]
        last = start + len(piece) >= len(pkt.payload)
        frags.append(
            replace(pkt, payload=piece, mf=not last, frag_offset=start // 8)
        )
    return frags


def reassemble_fragments(frags: Sequence[Ipv4Packet] | Iterable[Ipv4Packet]) -> Ipv4Packet:
    """Rebuild a datagram from fragments, first-arrival-wins per byte range.

    ``frags`` is taken in arrival order. Raises IncompleteHole if the byte
    ranges leave a gap or no terminal (mf=0) fragment is present, and
    ConflictingLength if data extends past the length the terminal fragment
    implies (or two terminal fragments disagree).
    """
    frags = list(frags)
    if not frags:
        raise IncompleteHole("no fragments")
    key = frags[0].frag_key
    for f in frags:
        if f.frag_key != key:
            raise ValueError(f"mixed fragment keys {key} vs {f.frag_key}")

    total = None
    for f in frags:
        if not f.mf:
            end = f.frag_offset * 8 + len(f.payload)
            if total is not None and end != total:
                raise ConflictingLength(f"terminal fragments imply {total} and {end}")
            total = end
    if total is None:
        raise IncompleteHole("no terminal fragment")

    buf = bytearray(total)
    covered = bytearray(total)  # 0/1 per byte
    for f in frags:
        start = f.frag_offset * 8
        end = start + len(f.payload)
        if end > total:
            raise ConflictingLength(
                f"fragment range [{start},{end}) exceeds total {total}"
            )
        if not any(covered[start:end]):
            buf[start:end] = f.payload
            covered[start:end] = b"\x01" * (end - start)
        else:
            for i, b in zip(range(start, end), f.payload):
                if not covered[i]:
                    buf[i] = b
                    covered[i] = 1
    if not all(covered):
        hole = covered.index(0)
        raise IncompleteHole(f"gap at byte {hole} of {total}")

    first = frags[0]
    return Ipv4Packet(
        src=first.src,
        dst=first.dst,
        protocol=first.protocol,
        ipid=first.ipid,
        payload=bytes(buf),
        df=False,
        mf=False,
        frag_offset=0,
        ttl=first.ttl,
    )
