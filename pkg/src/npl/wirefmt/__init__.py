"""Byte-exact wire formats: IPv4 (with fragmentation), UDP, ICMP, DNS, NTP.

All encodings are big-endian. Decoders are bounds-checked and raise
``Malformed`` with a byte offset instead of reading past the buffer.
"""

from npl.wirefmt.checksum import (
    fix_checksum,
    internet_checksum,
    ones_complement_add,
    ones_complement_sum,
)
from npl.wirefmt.ip import (
    PROTO_ICMP,
    PROTO_UDP,
    Ipv4Packet,
    fragment_packet,
    ip_to_bytes,
    ip_from_bytes,
    reassemble_fragments,
)
from npl.wirefmt.udp import UdpDatagram, make_udp, udp_checksum, verify_udp
from npl.wirefmt.icmp import IcmpFragNeeded
from npl.wirefmt.dns import (
    QCLASS_IN,
    QTYPE_A,
    RCODE_NOERROR,
    RCODE_NXDOMAIN,
    RCODE_REFUSED,
    DnsMessage,
    Question,
    ResourceRecord,
    answer_field_offsets,
)
from npl.wirefmt.ntp import (
    MODE_CLIENT,
    MODE_CONTROL,
    MODE_SERVER,
    KOD_RATE,
    NtpPacket,
)

__all__ = [
    "fix_checksum",
    "internet_checksum",
    "ones_complement_add",
    "ones_complement_sum",
    "PROTO_ICMP",
    "PROTO_UDP",
    "Ipv4Packet",
    "fragment_packet",
    "ip_to_bytes",
    "ip_from_bytes",
    "reassemble_fragments",
    "UdpDatagram",
    "make_udp",
    "udp_checksum",
    "verify_udp",
    "IcmpFragNeeded",
    "QCLASS_IN",
    "QTYPE_A",
    "RCODE_NOERROR",
    "RCODE_NXDOMAIN",
    "RCODE_REFUSED",
    "DnsMessage",
    "Question",
    "ResourceRecord",
    "answer_field_offsets",
    "MODE_CLIENT",
    "MODE_CONTROL",
    "MODE_SERVER",
    "KOD_RATE",
    "NtpPacket",
]
