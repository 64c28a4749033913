"""DNS actors: the victim recursive resolver and the pool nameserver.

The resolver implements challenge-response acceptance (random source port +
TXID per upstream query) and an RD=0 path that answers from cache without
ever recursing. The nameserver rotates A records through its zone, stamps
responses from a single global IPID counter, and honors path-MTU errors —
the three properties the fragment-replacement attack leans on.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

from npl.errors import Malformed
from npl.netsim import Host, Network
from npl.wirefmt import (
    DnsMessage,
    Question,
    QTYPE_A,
    RCODE_NOERROR,
    RCODE_NXDOMAIN,
    RCODE_REFUSED,
    ResourceRecord,
)

log = logging.getLogger("npl.dns")

DNS_PORT = 53


@dataclass
class _Pending:
    txid: int
    port: int
    qname: str
    qtype: int
    clients: list = field(default_factory=list)  # (ip, port, txid, rd)
    alive: bool = True


class Resolver:
    """Recursive resolver with per-query challenge randomization."""

    def __init__(
        self,
        net: Network,
        host: Host,
        upstream_ip: str,
        *,
        max_answer_records: int = 89,
        fixed_port: Optional[int] = None,
        ignore_rd: bool = False,
        allowed_suffixes: Optional[list[str]] = None,
        retry_interval_s: int = 4,
    ):
        self.net = net
        self.host = host
        self.upstream_ip = upstream_ip
        self.max_answer_records = max_answer_records
        self.fixed_port = fixed_port
        self.ignore_rd = ignore_rd
        self.allowed_suffixes = allowed_suffixes
        self.retry_interval_s = retry_interval_s
        self.cache: dict[tuple[str, int], tuple[tuple[ResourceRecord, ...], int]] = {}
        self.pending: dict[int, _Pending] = {}  # by txid
        self._pending_by_name: dict[tuple[str, int], _Pending] = {}
        self.port_rng = net.rng(f"resolver-ports/{host.name}")
        self.txid_rng = net.rng(f"resolver-txids/{host.name}")
        net.bind(host, DNS_PORT, self._handle_client_query)
        if fixed_port is not None:
            net.bind(host, fixed_port, self._make_upstream_handler(fixed_port))

    # ------------------------------------------------------------ client side

    def _handle_client_query(self, src: str, sport: int, payload: bytes, _pkt) -> None:
        try:
            msg = DnsMessage.decode(payload)
        except Malformed as exc:
            self.net.emit("drop", self.host.name, reason="malformed_dns", src=src, error=str(exc))
            return
        if msg.qr:
            self.net.emit("drop", self.host.name, reason="response_on_query_port", src=src)
            return
        q = msg.question
        if not self._name_allowed(q.qname):
            self._reply(src, sport, msg, (), rcode=RCODE_REFUSED)
            return

        cached = self._fresh(q.qname, q.qtype)
        if cached is not None:
            answers, expiry = cached
            remaining = (expiry - self.net.now) // 1000
            self.net.emit(
                "cache_hit", self.host.name,
                qname=q.qname, client=src, remaining_ttl=remaining, expiry=expiry,
            )
            self._reply(src, sport, msg, tuple(
                ResourceRecord(rr.name, rr.rtype, rr.rclass, remaining, rr.rdata)
                for rr in answers
            ))
            return

        if not msg.rd and not self.ignore_rd:
            # Snooping path: a miss answers empty and must not recurse or cache.
            self._reply(src, sport, msg, ())
            return

        self._recurse(q.qname, q.qtype, client=(src, sport, msg.txid, msg.rd))

    def _name_allowed(self, qname: str) -> bool:
        if self.allowed_suffixes is None:
            return True
        return any(qname == s or qname.endswith("." + s) for s in self.allowed_suffixes)

    def _fresh(self, qname: str, qtype: int):
        hit = self.cache.get((qname, qtype))
        if hit is None:
            return None
        if self.net.now >= hit[1]:
            return None
        return hit

    def _reply(self, dst: str, dport: int, query: DnsMessage, answers, rcode: int = RCODE_NOERROR) -> None:
        resp = DnsMessage(
            txid=query.txid, qr=True, rd=query.rd, ra=True,
            question=query.question, answers=tuple(answers), rcode=rcode,
        )
        self.net.send_udp(self.host, DNS_PORT, dst, dport, resp.encode())

    # ---------------------------------------------------------- upstream side

    def _recurse(self, qname: str, qtype: int, client) -> None:
        key = (qname, qtype)
        pend = self._pending_by_name.get(key)
        if pend is not None and pend.alive:
            pend.clients.append(client)
            return
        port = self.fixed_port or self.net.alloc_ephemeral_port(self.host, self.port_rng)
        pend = _Pending(txid=self._draw_txid(), port=port, qname=qname, qtype=qtype,
                        clients=[client])
        self.pending[pend.txid] = pend
        self._pending_by_name[key] = pend
        if port != self.fixed_port:
            self.net.bind(self.host, port, self._make_upstream_handler(port))
        self._send_upstream(pend)
        self._schedule_retry(pend)

    def _draw_txid(self) -> int:
        while True:
            txid = self.txid_rng.randrange(0x10000)
            if txid not in self.pending:
                return txid

    def _send_upstream(self, pend: _Pending) -> None:
        q = DnsMessage(txid=pend.txid, qr=False, rd=True,
                       question=Question(pend.qname, pend.qtype))
        self.net.send_udp(self.host, pend.port, self.upstream_ip, DNS_PORT, q.encode())

    def _schedule_retry(self, pend: _Pending) -> None:
        def retry():
            if not pend.alive:
                return
            # Fresh challenge pair per retry, same as a brand-new query.
            del self.pending[pend.txid]
            pend.txid = self._draw_txid()
            self.pending[pend.txid] = pend
            if self.fixed_port is None:
                self.net.unbind(self.host, pend.port)
                pend.port = self.net.alloc_ephemeral_port(self.host, self.port_rng)
                self.net.bind(self.host, pend.port, self._make_upstream_handler(pend.port))
            self._send_upstream(pend)
            self._schedule_retry(pend)

        self.net.schedule_in(self.retry_interval_s * 1000, retry)

    def _make_upstream_handler(self, port: int):
        def handler(src: str, sport: int, payload: bytes, _pkt) -> None:
            self._accept_response(port, src, payload)
        return handler

    def _accept_response(self, port: int, src: str, payload: bytes) -> None:
        try:
            msg = DnsMessage.decode(payload)
        except Malformed as exc:
            self.net.emit("drop", self.host.name, reason="malformed_dns", src=src, error=str(exc))
            return
        pend = self.pending.get(msg.txid)
        if (
            not msg.qr
            or pend is None
            or not pend.alive
            or pend.port != port
            or pend.qname != msg.question.qname
            or pend.qtype != msg.question.qtype
        ):
            self.net.emit("drop", self.host.name, reason="challenge_mismatch", src=src,
                          txid=msg.txid, port=port)
            return

        answers = ()
        if msg.rcode == RCODE_NOERROR:
            kept = [rr for rr in msg.answers
                    if rr.name == pend.qname and rr.rtype == pend.qtype]
            kept = kept[: self.max_answer_records]
            if kept:
                expiry = self.net.now + max(rr.ttl for rr in kept) * 1000
                self.cache[(pend.qname, pend.qtype)] = (tuple(kept), expiry)
                self.net.emit(
                    "cache_write", self.host.name,
                    qname=pend.qname,
                    addresses=[rr.address for rr in kept if rr.rtype == QTYPE_A],
                    ttl=max(rr.ttl for rr in kept),
                    expiry=expiry,
                    records=len(kept),
                )
                answers = tuple(kept)

        pend.alive = False
        del self.pending[pend.txid]
        self._pending_by_name.pop((pend.qname, pend.qtype), None)
        if self.fixed_port is None:
            self.net.unbind(self.host, pend.port)

        for (ip, dport, txid, rd) in pend.clients:
            query = DnsMessage(txid=txid, qr=False, rd=rd,
                               question=Question(pend.qname, pend.qtype))
            self._reply(ip, dport, query, answers, rcode=msg.rcode)


class Nameserver:
    """Authoritative nameserver with rotating answers and a global IPID counter."""

    def __init__(
        self,
        net: Network,
        host: Host,
        zone: dict[str, list[str]],
        *,
        answer_ttl: int = 150,
        addresses_per_response: int = 4,
        ipid_step: int = 1,
        cross_traffic_rate: float = 0.0,
    ):
        self.net = net
        self.host = host
        self.zone = {name.lower(): list(addrs) for name, addrs in zone.items()}
        self.answer_ttl = answer_ttl
        self.addresses_per_response = addresses_per_response
        self.ipid_step = ipid_step
        self.cursors: dict[str, int] = {name: 0 for name in self.zone}
        net.bind(host, DNS_PORT, self._handle_query)
        if cross_traffic_rate > 0:
            self._cross_rng = net.rng(f"cross-traffic/{host.name}")
            self._cross_rate = cross_traffic_rate
            self._schedule_cross_traffic()

    def _schedule_cross_traffic(self) -> None:
        # Background responses to other clients: each consumes one IPID.
        # Not traced; only the counter motion is observable, as it would be
        # to an off-path attacker.
        delay = self._cross_rng.expovariate(self._cross_rate)
        def tick():
            self.host.take_ipid(self.ipid_step)
            self._schedule_cross_traffic()
        self.net.schedule_in(max(1, round(delay * 1000)), tick)

    def rotation_window(self, qname: str) -> list[str]:
        """Addresses the next response for ``qname`` will carry (cursor advances)."""
        addrs = self.zone[qname]
        cur = self.cursors[qname]
        n = min(self.addresses_per_response, len(addrs))
        window = [addrs[(cur + i) % len(addrs)] for i in range(n)]
        self.cursors[qname] = (cur + n) % len(addrs)
        return window

    def _handle_query(self, src: str, sport: int, payload: bytes, _pkt) -> None:
        try:
            msg = DnsMessage.decode(payload)
        except Malformed as exc:
            self.net.emit("drop", self.host.name, reason="malformed_dns", src=src, error=str(exc))
            return
        if msg.qr:
            return
        qname = msg.question.qname
        if qname not in self.zone or msg.question.qtype != QTYPE_A:
            resp = DnsMessage(txid=msg.txid, qr=True, aa=True, rd=msg.rd,
                              question=msg.question, rcode=RCODE_NXDOMAIN)
        else:
            answers = tuple(
                ResourceRecord.a_record(qname, a, self.answer_ttl)
                for a in self.rotation_window(qname)
            )
            resp = DnsMessage(txid=msg.txid, qr=True, aa=True, rd=msg.rd,
                              question=msg.question, answers=answers)
        self.net.send_udp(
            self.host, DNS_PORT, src, sport, resp.encode(),
            ipid=self.host.take_ipid(self.ipid_step),
        )


def dns_lookup(net, host, rng, resolver_ip: str, qname: str, on_answer,
               on_fail=None, timeout_ms: int = 60_000) -> None:
    """One-shot A lookup from an ordinary host through its resolver.

    ``on_answer`` receives the address list; ``on_fail`` fires on NXDomain,
    an empty answer, or timeout.
    """
    port = net.alloc_ephemeral_port(host, rng)
    txid = rng.randrange(0x10000)
    expected = Question(qname)

    def handler(src, sport, payload, _pkt):
        try:
            msg = DnsMessage.decode(payload)
        except Malformed:
            return
        if not msg.qr or msg.txid != txid or msg.question != expected:
            return
        net.unbind(host, port)
        addresses = [rr.address for rr in msg.answers if rr.rtype == QTYPE_A]
        if msg.rcode == RCODE_NOERROR and addresses:
            on_answer(addresses)
        elif on_fail:
            on_fail()

    def expire():
        if host.ports.get(port) is handler:
            net.unbind(host, port)
            if on_fail:
                on_fail()

    net.bind(host, port, handler)
    net.schedule_in(timeout_ms, expire)
    q = DnsMessage(txid=txid, qr=False, rd=True, question=expected)
    net.send_udp(host, port, resolver_ip, DNS_PORT, q.encode())
