"""DNS messages without name compression (RFC 1035 subset).

Compression is never emitted and rejected on decode: the fragment-forging
arithmetic needs byte-predictable record offsets. Only what the testbed
uses is modeled — one question, A-type answers, the header flag bits that
matter to a resolver (QR/AA/RD/RA, RCODE).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from npl.errors import Malformed
from npl.wirefmt.ip import ip_from_bytes, ip_to_bytes

QTYPE_A = 1
QCLASS_IN = 1

RCODE_NOERROR = 0
RCODE_NXDOMAIN = 3
RCODE_REFUSED = 5

_MAX_LABEL = 63
_MAX_NAME = 255


def _encode_name(name: str) -> bytes:
    out = bytearray()
    if name:
        for label in name.split("."):
            raw = label.encode("ascii")
            if not 0 < len(raw) <= _MAX_LABEL:
                raise ValueError(f"bad label {label!r} in {name!r}")
            out.append(len(raw))
            out += raw
    out.append(0)
    if len(out) > _MAX_NAME:
        raise ValueError(f"name {name!r} too long")
    return bytes(out)


def _decode_name(data: bytes, pos: int) -> tuple[str, int]:
    labels = []
    while True:
        if pos >= len(data):
            raise Malformed("truncated name", offset=pos)
        n = data[pos]
        if n == 0:
            pos += 1
            break
        if n & 0xC0:
            raise Malformed("compressed name rejected", offset=pos)
        pos += 1
        if pos + n > len(data):
            raise Malformed("truncated label", offset=pos)
        labels.append(data[pos : pos + n].decode("ascii", errors="replace").lower())
        pos += n
    return ".".join(labels), pos


def name_wire_length(name: str) -> int:
    return len(_encode_name(name))


@dataclass(frozen=True)
class Question:
    qname: str
    qtype: int = QTYPE_A
    qclass: int = QCLASS_IN

    def __post_init__(self):
        object.__setattr__(self, "qname", self.qname.lower())


@dataclass(frozen=True)
class ResourceRecord:
    name: str
    rtype: int
    rclass: int
    ttl: int
    rdata: bytes

    def __post_init__(self):
        object.__setattr__(self, "name", self.name.lower())
        if not 0 <= self.ttl <= 0xFFFFFFFF:
            raise ValueError(f"ttl {self.ttl} out of range")
        if self.rtype == QTYPE_A and len(self.rdata) != 4:
            raise ValueError("A record rdata must be exactly 4 bytes")

    @classmethod
    def a_record(cls, name: str, address: str, ttl: int) -> "ResourceRecord":
        return cls(name, QTYPE_A, QCLASS_IN, ttl, ip_to_bytes(address))

    @property
    def address(self) -> str:
        if self.rtype != QTYPE_A:
            raise ValueError("not an A record")
        return ip_from_bytes(self.rdata)


@dataclass(frozen=True)
class DnsMessage:
    txid: int
    qr: bool
    question: Question
    answers: tuple[ResourceRecord, ...] = ()
    rd: bool = False
    ra: bool = False
    aa: bool = False
    rcode: int = RCODE_NOERROR

    def __post_init__(self):
        if not 0 <= self.txid <= 0xFFFF:
            raise ValueError(f"txid {self.txid} out of range")
        if not 0 <= self.rcode <= 0xF:
            raise ValueError(f"rcode {self.rcode} out of range")
        object.__setattr__(self, "answers", tuple(self.answers))

    def encode(self) -> bytes:
        flags = (
            (0x8000 if self.qr else 0)
            | (0x0400 if self.aa else 0)
            | (0x0100 if self.rd else 0)
            | (0x0080 if self.ra else 0)
            | self.rcode
        )
        out = bytearray(
            struct.pack("!HHHHHH", self.txid, flags, 1, len(self.answers), 0, 0)
        )
        q = self.question
        out += _encode_name(q.qname)
        out += struct.pack("!HH", q.qtype, q.qclass)
        for rr in self.answers:
            out += _encode_name(rr.name)
            out += struct.pack("!HHIH", rr.rtype, rr.rclass, rr.ttl, len(rr.rdata))
            out += rr.rdata
        return bytes(out)

    @classmethod
    def decode(cls, data: bytes) -> "DnsMessage":
        if len(data) < 12:
            raise Malformed("truncated DNS header", offset=len(data))
        txid, flags, qdcount, ancount, nscount, arcount = struct.unpack_from("!HHHHHH", data, 0)
        if qdcount != 1:
            raise Malformed(f"expected 1 question, got {qdcount}", offset=4)
        if nscount or arcount:
            raise Malformed("authority/additional sections unsupported", offset=8)
        pos = 12
        qname, pos = _decode_name(data, pos)
        if pos + 4 > len(data):
            raise Malformed("truncated question", offset=pos)
        qtype, qclass = struct.unpack_from("!HH", data, pos)
        pos += 4
        answers = []
        for _ in range(ancount):
            name, pos = _decode_name(data, pos)
            if pos + 10 > len(data):
                raise Malformed("truncated record header", offset=pos)
            rtype, rclass, ttl, rdlen = struct.unpack_from("!HHIH", data, pos)
            pos += 10
            if pos + rdlen > len(data):
                raise Malformed("truncated rdata", offset=pos)
            answers.append(ResourceRecord(name, rtype, rclass, ttl, data[pos : pos + rdlen]))
            pos += rdlen
        if pos != len(data):
            raise Malformed(f"{len(data) - pos} trailing bytes", offset=pos)
        return cls(
            txid=txid,
            qr=bool(flags & 0x8000),
            question=Question(qname, qtype, qclass),
            answers=tuple(answers),
            rd=bool(flags & 0x0100),
            ra=bool(flags & 0x0080),
            aa=bool(flags & 0x0400),
            rcode=flags & 0xF,
        )


def answer_field_offsets(msg: DnsMessage) -> list[tuple[int, int, int]]:
    """Byte offsets, within the encoded message, of each answer's mutable fields.

    Returns one (ttl_offset, rdata_offset, rdata_length) triple per answer,
    in answer order. This is what the fragment forger uses to decide which
    records a spoofed tail can substitute.
    """
    pos = 12 + name_wire_length(msg.question.qname) + 4
    out = []
    for rr in msg.answers:
        pos += name_wire_length(rr.name) + 4  # name, type, class
        ttl_off = pos
        pos += 4 + 2  # ttl, rdlength
        out.append((ttl_off, pos, len(rr.rdata)))
        pos += len(rr.rdata)
    return out
