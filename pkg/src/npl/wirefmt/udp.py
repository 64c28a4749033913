"""UDP datagrams with pseudo-header checksums (RFC 768)."""

from __future__ import annotations

import struct
from dataclasses import dataclass

from npl.errors import Malformed
from npl.wirefmt.checksum import internet_checksum, ones_complement_sum
from npl.wirefmt.ip import PROTO_UDP, ip_to_bytes

UDP_HEADER_LEN = 8


def _pseudo_header(src_ip: str, dst_ip: str, udp_length: int) -> bytes:
    return ip_to_bytes(src_ip) + ip_to_bytes(dst_ip) + struct.pack("!BBH", 0, PROTO_UDP, udp_length)


def udp_checksum(src_ip: str, dst_ip: str, src_port: int, dst_port: int, payload: bytes) -> int:
    """Checksum as transmitted: complement of the sum, 0 mapped to 0xFFFF."""
    length = UDP_HEADER_LEN + len(payload)
    header = struct.pack("!HHHH", src_port, dst_port, length, 0)
    c = internet_checksum(_pseudo_header(src_ip, dst_ip, length) + header + payload)
    return c if c != 0 else 0xFFFF


@dataclass(frozen=True)
class UdpDatagram:
    src_port: int
    dst_port: int
    payload: bytes
    checksum: int

    def __post_init__(self):
        for name in ("src_port", "dst_port", "checksum"):
            v = getattr(self, name)
            if not 0 <= v <= 0xFFFF:
                raise ValueError(f"{name} {v} out of range")

    @property
    def length(self) -> int:
        return UDP_HEADER_LEN + len(self.payload)

    def encode(self) -> bytes:
        return struct.pack("!HHHH", self.src_port, self.dst_port, self.length, self.checksum) + self.payload

    @classmethod
    def decode(cls, data: bytes) -> "UdpDatagram":
        if len(data) < UDP_HEADER_LEN:
            raise Malformed("truncated UDP header", offset=len(data))
        src_port, dst_port, length, checksum = struct.unpack_from("!HHHH", data, 0)
        if length != len(data):
            raise Malformed(f"UDP length {length} != buffer {len(data)}", offset=4)
        return cls(src_port, dst_port, data[UDP_HEADER_LEN:], checksum)

    def verify(self, src_ip: str, dst_ip: str) -> bool:
        """True iff the carried checksum verifies for this src/dst pair.

        A zero checksum (RFC 768 "no checksum") is rejected: everything the
        simulator emits is checksummed.
        """
        if self.checksum == 0:
            return False
        total = ones_complement_sum(_pseudo_header(src_ip, dst_ip, self.length) + self.encode())
        return total == 0xFFFF


def make_udp(src_ip: str, dst_ip: str, src_port: int, dst_port: int, payload: bytes) -> UdpDatagram:
    """Build a datagram with the checksum computed for the given endpoints."""
    return UdpDatagram(
        src_port, dst_port, payload, udp_checksum(src_ip, dst_ip, src_port, dst_port, payload)
    )


def verify_udp(src_ip: str, dst_ip: str, udp_bytes: bytes) -> bool:
    """Verify raw UDP bytes against the pseudo-header for src/dst."""
    try:
        return UdpDatagram.decode(udp_bytes).verify(src_ip, dst_ip)
    except Malformed:
        return False
