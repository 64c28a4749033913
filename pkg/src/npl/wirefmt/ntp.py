"""48-byte NTP packets (RFC 5905 layout), modes 3/4/6 plus Kiss-o'-Death."""

from __future__ import annotations

import struct
from dataclasses import dataclass

from npl.errors import Malformed

MODE_CLIENT = 3
MODE_SERVER = 4
MODE_CONTROL = 6

KOD_RATE = b"RATE"

PACKET_LEN = 48

_FIXED = struct.Struct("!BBbbII4sQQQQ")


@dataclass(frozen=True)
class NtpPacket:
    mode: int
    li: int = 0
    vn: int = 3
    stratum: int = 2
    poll: int = 6
    precision: int = -20
    root_delay: int = 0
    root_dispersion: int = 0
    reference_id: bytes = b"\x00\x00\x00\x00"
    ref_ts: int = 0
    orig_ts: int = 0
    recv_ts: int = 0
    xmit_ts: int = 0

    def __post_init__(self):
        if not 0 <= self.mode <= 7:
            raise ValueError(f"mode {self.mode} out of range")
        if not 0 <= self.li <= 3 or not 0 <= self.vn <= 7:
            raise ValueError("bad LI/VN")
        if not 0 <= self.stratum <= 0xFF:
            raise ValueError(f"stratum {self.stratum} out of range")
        if len(self.reference_id) != 4:
            raise ValueError("reference_id must be 4 bytes")
        for name in ("ref_ts", "orig_ts", "recv_ts", "xmit_ts"):
            if not 0 <= getattr(self, name) < 2**64:
                raise ValueError(f"{name} out of range")
        for name in ("root_delay", "root_dispersion"):
            if not 0 <= getattr(self, name) < 2**32:
                raise ValueError(f"{name} out of range")

    @property
    def is_kod(self) -> bool:
        """Kiss-o'-Death: stratum 0 with the ASCII kiss code "RATE"."""
        return self.stratum == 0 and self.reference_id == KOD_RATE

    def encode(self) -> bytes:
        first = (self.li << 6) | (self.vn << 3) | self.mode
        return _FIXED.pack(
            first,
            self.stratum,
            self.poll,
            self.precision,
            self.root_delay,
            self.root_dispersion,
            self.reference_id,
            self.ref_ts,
            self.orig_ts,
            self.recv_ts,
            self.xmit_ts,
        )

    @classmethod
    def decode(cls, data: bytes) -> "NtpPacket":
        if len(data) != PACKET_LEN:
            raise Malformed(f"NTP packet must be {PACKET_LEN} bytes, got {len(data)}",
                            offset=min(len(data), PACKET_LEN))
        (first, stratum, poll, precision, root_delay, root_dispersion,
         reference_id, ref_ts, orig_ts, recv_ts, xmit_ts) = _FIXED.unpack(data)
        return cls(
            mode=first & 0x7,
            li=(first >> 6) & 0x3,
            vn=(first >> 3) & 0x7,
            stratum=stratum,
            poll=poll,
            precision=precision,
            root_delay=root_delay,
            root_dispersion=root_dispersion,
            reference_id=reference_id,
            ref_ts=ref_ts,
            orig_ts=orig_ts,
            recv_ts=recv_ts,
            xmit_ts=xmit_ts,
        )

    @classmethod
    def kod(cls, orig_ts: int = 0) -> "NtpPacket":
        return cls(mode=MODE_SERVER, stratum=0, reference_id=KOD_RATE, orig_ts=orig_ts)
