"""ICMP Destination Unreachable / Fragmentation Needed (type 3, code 4).

The attacker sends this to a nameserver to shrink the path MTU it uses
toward the victim resolver, forcing fragmented DNS responses.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from npl.errors import Malformed, MtuTooSmall
from npl.wirefmt.checksum import internet_checksum
from npl.wirefmt.ip import MIN_MTU, Ipv4Packet, ip_from_bytes

ICMP_TYPE = 3
ICMP_CODE = 4

EMBEDDED_LEN = 28  # original IP header + first 8 payload bytes


@dataclass(frozen=True)
class IcmpFragNeeded:
    next_hop_mtu: int
    embedded: bytes

    def __post_init__(self):
        if self.next_hop_mtu < MIN_MTU:
            raise MtuTooSmall(f"next-hop MTU {self.next_hop_mtu} below {MIN_MTU}")
        if self.next_hop_mtu > 0xFFFF:
            raise ValueError(f"next-hop MTU {self.next_hop_mtu} out of range")
        if len(self.embedded) > EMBEDDED_LEN:
            raise ValueError("embedded excerpt longer than 28 bytes")

    @classmethod
    def for_packet(cls, pkt: Ipv4Packet, mtu: int) -> "IcmpFragNeeded":
        """Error message claiming ``pkt`` exceeded ``mtu`` somewhere en route."""
        return cls(next_hop_mtu=mtu, embedded=pkt.encode()[:EMBEDDED_LEN])

    @property
    def embedded_dst(self) -> str:
        """Destination of the packet that supposedly hit the small MTU.

        This is the address the receiving host lowers its path MTU for.
        """
        if len(self.embedded) < 20:
            raise Malformed("embedded header shorter than 20 bytes", offset=len(self.embedded))
        return ip_from_bytes(self.embedded[16:20])

    def encode(self) -> bytes:
        body = struct.pack("!BBHHH", ICMP_TYPE, ICMP_CODE, 0, 0, self.next_hop_mtu) + self.embedded
        checksum = internet_checksum(body)
        return struct.pack("!BBHHH", ICMP_TYPE, ICMP_CODE, checksum, 0, self.next_hop_mtu) + self.embedded

    @classmethod
    def decode(cls, data: bytes) -> "IcmpFragNeeded":
        if len(data) < 8:
            raise Malformed("truncated ICMP header", offset=len(data))
        icmp_type, icmp_code, checksum, _unused, mtu = struct.unpack_from("!BBHHH", data, 0)
        if icmp_type != ICMP_TYPE or icmp_code != ICMP_CODE:
            raise Malformed(f"not frag-needed (type {icmp_type} code {icmp_code})", offset=0)
        zeroed = data[:2] + b"\x00\x00" + data[4:]
        if internet_checksum(zeroed) != checksum:
            raise Malformed("bad ICMP checksum", offset=2)
        return cls(next_hop_mtu=mtu, embedded=data[8:])
