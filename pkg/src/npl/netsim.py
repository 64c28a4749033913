"""Deterministic discrete-event network: hosts, links, defragmentation caches.

One ``Network`` owns the simulated clock (millisecond resolution), the event
queue, a master seed with named RNG substreams, and the trace. Everything an
actor does goes through here, so a (scenario, seed) pair maps to exactly one
byte sequence of trace output.

Hosts never authenticate packet sources; spoofing is a capability flag on
the sending host, not something receivers can detect.
"""

from __future__ import annotations

import hashlib
import heapq
import logging
import random
from dataclasses import dataclass
from typing import Callable, Optional

from npl.errors import Malformed, SpoofingForbidden
from npl.trace import TraceEvent
from npl.wirefmt import (
    IcmpFragNeeded,
    Ipv4Packet,
    PROTO_ICMP,
    PROTO_UDP,
    UdpDatagram,
    fragment_packet,
    make_udp,
    reassemble_fragments,
)

log = logging.getLogger("npl.netsim")


@dataclass(frozen=True)
class OsProfile:
    name: str
    defrag_timeout_s: int
    frag_slots: int  # pending fragments per (src, dst, protocol) key-space


LINUX = OsProfile("linux", 30, 64)
WINDOWS = OsProfile("windows", 60, 100)

OS_PROFILES = {"linux": LINUX, "windows": WINDOWS}

# handler(src_ip, src_port, payload, packet)
PortHandler = Callable[[str, int, bytes, Ipv4Packet], None]


class _DefragEntry:
    __slots__ = ("frags", "created", "alive")

    def __init__(self, created: int):
        self.frags: list[Ipv4Packet] = []
        self.created = created
        self.alive = True


class Host:
    def __init__(self, name: str, ip: str, os_profile: OsProfile, can_spoof: bool, ipid_start: int):
        self.name = name
        self.ip = ip
        self.os = os_profile
        self.can_spoof = can_spoof
        self.ports: dict[int, PortHandler] = {}
        self.pmtu: dict[str, int] = {}
        self.defrag: dict[tuple, _DefragEntry] = {}
        self.pending_per_triple: dict[tuple, int] = {}
        self._ipid = ipid_start
        # Invariant bookkeeping: creations == evictions + reassemblies at end.
        self.defrag_created = 0
        self.defrag_evicted = 0
        self.defrag_reassembled = 0

    def take_ipid(self, step: int = 1) -> int:
        v = self._ipid
        self._ipid = (self._ipid + step) % 0x10000
        return v

    def peek_ipid(self) -> int:
        return self._ipid


class Network:
    def __init__(self, seed: int, default_latency_ms: int = 10, default_loss: float = 0.0):
        self.seed = seed
        self.now = 0
        self._queue: list[tuple[int, int, Callable[[], None]]] = []
        self._seq = 0
        self._rngs: dict[str, random.Random] = {}
        self.hosts: dict[str, Host] = {}
        self._by_ip: dict[str, Host] = {}
        self._links: dict[tuple[str, str], tuple[int, float]] = {}
        self.default_latency_ms = default_latency_ms
        self.default_loss = default_loss
        self.trace: list[TraceEvent] = []
        self._subscribers: list[Callable[[TraceEvent], None]] = []

    # ------------------------------------------------------------- plumbing

    def rng(self, name: str) -> random.Random:
        """Named substream of the scenario seed.

        Derived by hashing, so adding a stream never perturbs the draws of
        existing ones.
        """
        r = self._rngs.get(name)
        if r is None:
            digest = hashlib.sha256(f"{self.seed}/{name}".encode()).digest()
            r = random.Random(int.from_bytes(digest[:8], "big"))
            self._rngs[name] = r
        return r

    def emit(self, kind: str, actor: str, **detail) -> TraceEvent:
        ev = TraceEvent(t=self.now, kind=kind, actor=actor, detail=detail)
        self.trace.append(ev)
        for fn in self._subscribers:
            fn(ev)
        return ev

    def subscribe(self, fn: Callable[[TraceEvent], None]) -> None:
        self._subscribers.append(fn)

    def schedule(self, t_ms: int, action: Callable[[], None]) -> int:
        if t_ms < self.now:
            raise ValueError(f"cannot schedule at {t_ms} before now={self.now}")
        self._seq += 1
        heapq.heappush(self._queue, (t_ms, self._seq, action))
        return self._seq

    def schedule_in(self, delay_ms: int, action: Callable[[], None]) -> int:
        return self.schedule(self.now + delay_ms, action)

    def run_until(self, t_end_ms: int) -> list[TraceEvent]:
        """Execute all events up to and including t_end; returns new trace events."""
        start = len(self.trace)
        while self._queue and self._queue[0][0] <= t_end_ms:
            t, _seq, action = heapq.heappop(self._queue)
            self.now = t
            action()
        self.now = max(self.now, t_end_ms)
        return self.trace[start:]

    # ---------------------------------------------------------------- hosts

    def add_host(self, name: str, ip: str, os_profile: OsProfile = LINUX,
                 can_spoof: bool = False) -> Host:
        if name in self.hosts:
            raise ValueError(f"duplicate host name {name!r}")
        if ip in self._by_ip:
            raise ValueError(f"duplicate host ip {ip}")
        host = Host(name, ip, os_profile, can_spoof, self.rng(f"ipid/{name}").randrange(0x10000))
        self.hosts[name] = host
        self._by_ip[ip] = host
        return host

    def host_by_ip(self, ip: str) -> Optional[Host]:
        return self._by_ip.get(ip)

    def bind(self, host: Host, port: int, handler: PortHandler) -> None:
        if port in host.ports:
            raise ValueError(f"port {port} already bound on {host.name}")
        host.ports[port] = handler

    def unbind(self, host: Host, port: int) -> None:
        host.ports.pop(port, None)

    def alloc_ephemeral_port(self, host: Host, rng: Optional[random.Random] = None) -> int:
        rng = rng or self.rng(f"ports/{host.name}")
        while True:
            port = rng.randrange(1024, 0x10000)
            if port not in host.ports:
                return port

    # ---------------------------------------------------------------- links

    def set_link(self, src_ip: str, dst_ip: str, latency_ms: int, loss: float,
                 both_ways: bool = True) -> None:
        self._links[(src_ip, dst_ip)] = (latency_ms, loss)
        if both_ways:
            self._links[(dst_ip, src_ip)] = (latency_ms, loss)

    def link_params(self, src_ip: str, dst_ip: str) -> tuple[int, float]:
        return self._links.get((src_ip, dst_ip), (self.default_latency_ms, self.default_loss))

    # ------------------------------------------------------------- sending

    def send_udp(self, host: Host, src_port: int, dst_ip: str, dst_port: int,
                 payload: bytes, ipid: Optional[int] = None, ipid_step: int = 1) -> None:
        udp = make_udp(host.ip, dst_ip, src_port, dst_port, payload)
        pkt = Ipv4Packet(
            src=host.ip,
            dst=dst_ip,
            protocol=PROTO_UDP,
            ipid=host.take_ipid(ipid_step) if ipid is None else ipid,
            payload=udp.encode(),
        )
        self.send_ip(host, pkt)

    def send_ip(self, host: Host, pkt: Ipv4Packet) -> None:
        """Transmit a packet whose source is the sender's own address."""
        if pkt.src != host.ip:
            raise SpoofingForbidden(
                f"{host.name} ({host.ip}) cannot send with source {pkt.src}"
            )
        self._transmit(host, pkt, spoofed=False)

    def send_spoofed(self, host: Host, pkt: Ipv4Packet) -> None:
        """Transmit with a forged source address; requires the spoofing flag."""
        if not host.can_spoof:
            raise SpoofingForbidden(f"{host.name} is not flagged for spoofing")
        self._transmit(host, pkt, spoofed=True)

    def _transmit(self, host: Host, pkt: Ipv4Packet, spoofed: bool) -> None:
        # Path-MTU learned via ICMP applies to everything this host sends there.
        mtu = host.pmtu.get(pkt.dst)
        if mtu is not None and pkt.total_length > mtu and not pkt.is_fragment:
            for frag in fragment_packet(pkt, mtu):
                self._transmit_one(host, frag, spoofed)
        else:
            self._transmit_one(host, pkt, spoofed)

    def _transmit_one(self, host: Host, pkt: Ipv4Packet, spoofed: bool) -> None:
        detail = {
            "src": pkt.src,
            "dst": pkt.dst,
            "proto": pkt.protocol,
            "ipid": pkt.ipid,
            "len": pkt.total_length,
            "bytes": pkt.encode().hex(),
        }
        if pkt.is_fragment:
            detail["frag"] = f"{pkt.frag_offset}+{len(pkt.payload)}{'M' if pkt.mf else ''}"
        if spoofed:
            detail["spoofed"] = True
        self.emit("send", host.name, **detail)

        latency, loss = self.link_params(host.ip, pkt.dst)
        if loss > 0 and self.rng(f"loss/{host.ip}->{pkt.dst}").random() < loss:
            self.emit("drop", host.name, reason="loss", dst=pkt.dst, ipid=pkt.ipid)
            return
        dst_host = self._by_ip.get(pkt.dst)
        if dst_host is None:
            self.emit("drop", host.name, reason="unroutable", dst=pkt.dst)
            return
        self.schedule(self.now + latency, lambda: self.host_receive(dst_host, pkt))

    # ------------------------------------------------------------ receiving

    def host_receive(self, host: Host, pkt: Ipv4Packet) -> None:
        if pkt.dst != host.ip:
            raise ValueError(f"packet for {pkt.dst} delivered to {host.name} ({host.ip})")
        detail = {"src": pkt.src, "proto": pkt.protocol, "ipid": pkt.ipid, "len": pkt.total_length}
        if pkt.is_fragment:
            detail["frag"] = f"{pkt.frag_offset}+{len(pkt.payload)}{'M' if pkt.mf else ''}"
        self.emit("deliver", host.name, **detail)

        if pkt.is_fragment:
            self._defrag_insert(host, pkt)
        else:
            self._deliver_datagram(host, pkt)

    def _defrag_insert(self, host: Host, pkt: Ipv4Packet) -> None:
        key = pkt.frag_key
        triple = key[:3]
        pending = self.pending_fragments(host, triple)
        if pending >= host.os.frag_slots:
            self.emit("drop", host.name, reason="frag_slots", src=pkt.src,
                      ipid=pkt.ipid, limit=host.os.frag_slots)
            return
        entry = host.defrag.get(key)
        if entry is None:
            entry = _DefragEntry(created=self.now)
            host.defrag[key] = entry
            host.defrag_created += 1
            deadline = self.now + host.os.defrag_timeout_s * 1000
            self.schedule(deadline, lambda: self._defrag_evict(host, key, entry))
        entry.frags.append(pkt)
        host.pending_per_triple[triple] = pending + 1
        self.emit(
            "defrag_insert", host.name,
            src=pkt.src, ipid=pkt.ipid,
            frag=f"{pkt.frag_offset}+{len(pkt.payload)}{'M' if pkt.mf else ''}",
            pending=pending + 1,
        )
        if any(not f.mf for f in entry.frags):
            try:
                whole = reassemble_fragments(entry.frags)
            except Exception:
                return  # still incomplete (or inconsistent); wait for more
            self._defrag_finish(host, key, entry)
            host.defrag_reassembled += 1
            self.emit("reassembled", host.name, src=whole.src, ipid=whole.ipid,
                      len=whole.total_length, bytes=whole.encode().hex())
            self._deliver_datagram(host, whole)

    @staticmethod
    def pending_fragments(host: Host, triple: tuple) -> int:
        return host.pending_per_triple.get(triple, 0)

    def _defrag_finish(self, host: Host, key: tuple, entry: _DefragEntry) -> None:
        entry.alive = False
        host.defrag.pop(key, None)
        triple = key[:3]
        remaining = host.pending_per_triple.get(triple, 0) - len(entry.frags)
        if remaining > 0:
            host.pending_per_triple[triple] = remaining
        else:
            host.pending_per_triple.pop(triple, None)

    def _defrag_evict(self, host: Host, key: tuple, entry: _DefragEntry) -> None:
        if not entry.alive or host.defrag.get(key) is not entry:
            return
        self._defrag_finish(host, key, entry)
        host.defrag_evicted += 1
        self.emit("defrag_evict", host.name, src=key[0], ipid=key[3],
                  fragments=len(entry.frags))

    def _deliver_datagram(self, host: Host, pkt: Ipv4Packet) -> None:
        if pkt.protocol == PROTO_UDP:
            try:
                udp = UdpDatagram.decode(pkt.payload)
            except Malformed as exc:
                self.emit("drop", host.name, reason="malformed_udp", src=pkt.src, error=str(exc))
                return
            if not udp.verify(pkt.src, pkt.dst):
                # Checksum failures are silent to the peer; only the trace sees them.
                self.emit("drop", host.name, reason="udp_checksum", src=pkt.src,
                          port=udp.dst_port, ipid=pkt.ipid)
                return
            handler = host.ports.get(udp.dst_port)
            if handler is None:
                self.emit("drop", host.name, reason="no_listener", src=pkt.src,
                          port=udp.dst_port)
                return
            handler(pkt.src, udp.src_port, udp.payload, pkt)
        elif pkt.protocol == PROTO_ICMP:
            try:
                err = IcmpFragNeeded.decode(pkt.payload)
                dst = err.embedded_dst
            except Malformed as exc:
                self.emit("drop", host.name, reason="malformed_icmp", src=pkt.src, error=str(exc))
                return
            host.pmtu[dst] = err.next_hop_mtu
            log.debug("%s registered pmtu %d toward %s", host.name, err.next_hop_mtu, dst)
        else:
            self.emit("drop", host.name, reason="unknown_proto", src=pkt.src, proto=pkt.protocol)


def spoofed_udp(src_ip: str, dst_ip: str, src_port: int, dst_port: int,
                payload: bytes, ipid: int = 0) -> Ipv4Packet:
    """Build a complete UDP-in-IP packet with an arbitrary source address."""
    udp = make_udp(src_ip, dst_ip, src_port, dst_port, payload)
    return Ipv4Packet(src=src_ip, dst=dst_ip, protocol=PROTO_UDP, ipid=ipid,
                      payload=udp.encode())
