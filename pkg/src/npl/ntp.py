"""NTP actors: client variants, servers with rate limiting, and the leaks.

Servers answer mode-3 queries with their upstream's address in the
reference-id field and optionally expose a mode-6 configuration dump — the
two discovery channels an off-path attacker has. The per-source rate
limiter is the mechanism the attacker turns against the client: a stream of
spoofed requests silences the genuine one.

Clients differ in what they do when servers go quiet (Table-driven in
``VARIANTS``): re-query DNS, walk cached fallbacks, or give up until
restart. That difference is exactly the run-time attack surface.
"""

from __future__ import annotations

import json
import logging
import statistics
from dataclasses import dataclass
from typing import Optional

from npl.errors import Malformed
from npl.netsim import Host, Network
from npl.wirefmt import (
    DnsMessage,
    MODE_CLIENT,
    MODE_CONTROL,
    MODE_SERVER,
    NtpPacket,
    Question,
    QTYPE_A,
    RCODE_NOERROR,
    ip_to_bytes,
)

log = logging.getLogger("npl.ntp")

NTP_PORT = 123
DNS_PORT = 53

# Simulated epoch expressed in the NTP timescale (seconds since 1900).
_BASE_NTP_S = 3_913_056_000


def ntp_ts(local_ms: int | float) -> int:
    """64-bit NTP timestamp for a local clock reading in milliseconds."""
    return (int(_BASE_NTP_S * 1000 + local_ms) << 32) // 1000


def ntp_ms(ts: int) -> int:
    """Inverse of ntp_ts, rounded to the millisecond."""
    return ((ts * 1000 + (1 << 31)) >> 32) - _BASE_NTP_S * 1000


# --------------------------------------------------------------- rate limiting


class _SourceState:
    __slots__ = ("last_arrival", "violations", "penalized", "last_violation",
                 "last_kod", "penalized_count")

    def __init__(self):
        self.last_arrival: Optional[int] = None
        self.violations = 0
        self.penalized = False
        self.last_violation: Optional[int] = None
        self.last_kod: Optional[int] = None
        self.penalized_count = 0


class RateLimiter:
    """Per-source request throttle.

    A request arriving within ``min_interarrival`` of the previous one is a
    violation; ``burst`` cumulative violations engage the penalty. While
    penalized a source gets silence (or every ``trickle_every``-th reply),
    with a KoD notification re-sent at most every ``kod_interval`` while the
    violations continue. The penalty clears once the source keeps its
    inter-arrival above the limit for a full ``penalty`` window.
    """

    REPLY = "reply"
    KOD = "kod"
    DROP = "drop"

    def __init__(self, min_interarrival_ms: int = 1000, burst: int = 8,
                 penalty_ms: int = 300_000, kod: bool = True,
                 kod_interval_ms: int = 4000, trickle_every: int = 0):
        self.min_interarrival_ms = min_interarrival_ms
        self.burst = burst
        self.penalty_ms = penalty_ms
        self.kod = kod
        self.kod_interval_ms = kod_interval_ms
        self.trickle_every = trickle_every
        self._sources: dict[str, _SourceState] = {}

    def observe(self, src: str, now_ms: int) -> str:
        st = self._sources.get(src)
        if st is None:
            st = self._sources[src] = _SourceState()
        interval = None if st.last_arrival is None else now_ms - st.last_arrival
        st.last_arrival = now_ms
        violating = interval is not None and interval <= self.min_interarrival_ms
        if violating:
            st.violations += 1
            st.last_violation = now_ms
        elif (
            st.last_violation is not None
            and now_ms - st.last_violation >= self.penalty_ms
        ):
            st.violations = 0
            st.penalized = False
            st.last_violation = None
        if not st.penalized and st.violations >= self.burst:
            st.penalized = True
        if not st.penalized:
            return self.REPLY
        st.penalized_count += 1
        if self.trickle_every and st.penalized_count % self.trickle_every == 0:
            return self.REPLY
        if (
            violating
            and self.kod
            and (st.last_kod is None or now_ms - st.last_kod >= self.kod_interval_ms)
        ):
            st.last_kod = now_ms
            return self.KOD
        return self.DROP

    def is_penalized(self, src: str) -> bool:
        st = self._sources.get(src)
        return bool(st and st.penalized)


# --------------------------------------------------------------------- server


class NtpServer:
    def __init__(
        self,
        net: Network,
        host: Host,
        *,
        stratum: int = 2,
        upstream_ref: str = "0.0.0.0",
        offset_ms: float = 0.0,
        rate_limit_enabled: bool = True,
        min_interarrival_s: float = 1.0,
        burst: int = 8,
        penalty_s: int = 300,
        kod_before_silence: bool = True,
        kod_interval_s: float = 4.0,
        trickle_every: int = 0,
        control_exposed: bool = False,
        hostnames: tuple[str, ...] = (),
    ):
        self.net = net
        self.host = host
        self.stratum = stratum
        self.upstream_ref = upstream_ref
        self.offset_ms = offset_ms
        self.rate_limit_enabled = rate_limit_enabled
        self.control_exposed = control_exposed
        self.hostnames = tuple(hostnames)
        self.limiter = RateLimiter(
            min_interarrival_ms=round(min_interarrival_s * 1000),
            burst=burst,
            penalty_ms=penalty_s * 1000,
            kod=kod_before_silence,
            kod_interval_ms=round(kod_interval_s * 1000),
            trickle_every=trickle_every,
        )
        net.bind(host, NTP_PORT, self._handle)

    def _now_ts(self) -> int:
        return ntp_ts(self.net.now + self.offset_ms)

    def _handle(self, src: str, sport: int, payload: bytes, _pkt) -> None:
        try:
            req = NtpPacket.decode(payload)
        except Malformed:
            return
        if req.mode == MODE_CLIENT:
            self._handle_time_query(src, sport, req)
        elif req.mode == MODE_CONTROL:
            self._handle_control_query(src, sport)

    def _handle_time_query(self, src: str, sport: int, req: NtpPacket) -> None:
        if self.rate_limit_enabled:
            action = self.limiter.observe(src, self.net.now)
        else:
            action = RateLimiter.REPLY
        if action == RateLimiter.DROP:
            self.net.emit("rate_limited", self.host.name, src=src)
            return
        if action == RateLimiter.KOD:
            self.net.emit("kod_sent", self.host.name, target=src)
            resp = NtpPacket.kod(orig_ts=req.xmit_ts)
        else:
            now = self._now_ts()
            resp = NtpPacket(
                mode=MODE_SERVER,
                stratum=self.stratum,
                poll=req.poll,
                reference_id=ip_to_bytes(self.upstream_ref),
                ref_ts=now,
                orig_ts=req.xmit_ts,
                recv_ts=now,
                xmit_ts=now,
            )
        self.net.send_udp(self.host, NTP_PORT, src, sport, resp.encode())

    def _handle_control_query(self, src: str, sport: int) -> None:
        if not self.control_exposed:
            return
        dump = {"hostnames": list(self.hostnames), "upstreams": [self.upstream_ref]}
        self.net.send_udp(
            self.host, NTP_PORT, src, sport,
            b"NTP6" + json.dumps(dump, sort_keys=True).encode(),
        )


# -------------------------------------------------------------------- clients


@dataclass(frozen=True)
class VariantSpec:
    name: str
    runtime_dns: bool
    target_assocs: int
    min_active: int = 0       # re-query threshold (ntpd NTP_MINCLOCK semantics)
    serves_ntp: bool = False
    oneshot: bool = False
    dns_every_poll: bool = False
    fallback_cache: int = 0
    requery_on_demob: bool = False
    immediate_step: bool = False  # SNTP style: apply each sample directly


# ntpd: 4 pool placeholders against NTP_MAXCLOCK=10 leave m=6 server slots;
# DNS re-queried once active servers drop below NTP_MINCLOCK=3.
VARIANTS = {
    "ntpd": VariantSpec("ntpd", runtime_dns=True, target_assocs=6, min_active=3,
                        serves_ntp=True),
    "chrony": VariantSpec("chrony", runtime_dns=True, target_assocs=4,
                          requery_on_demob=True),
    "systemd_timesyncd": VariantSpec("systemd_timesyncd", runtime_dns=True,
                                     target_assocs=1, fallback_cache=3,
                                     immediate_step=True),
    "sntp_oneshot": VariantSpec("sntp_oneshot", runtime_dns=False, target_assocs=1,
                                oneshot=True, immediate_step=True),
    "openntpd": VariantSpec("openntpd", runtime_dns=False, target_assocs=4),
    "ntpclient": VariantSpec("ntpclient", runtime_dns=False, target_assocs=1,
                             immediate_step=True),
    "android_sntp": VariantSpec("android_sntp", runtime_dns=True, target_assocs=1,
                                dns_every_poll=True, immediate_step=True),
}

NTP_MINCLOCK = 3
NTP_MAXCLOCK = 10

ACTIVE = "active"
DEMOBILIZED = "demobilized"


@dataclass
class Association:
    server_ip: str
    origin: str  # "configured" | "pool_dns"
    unanswered: int = 0
    state: str = ACTIVE
    last_poll: Optional[int] = None
    pending_xmit: Optional[int] = None


class NtpClient:
    def __init__(
        self,
        net: Network,
        host: Host,
        variant: str,
        pool_hostnames: list[str],
        resolver_ip: str,
        *,
        poll_interval_s: int = 64,
        serves_ntp: Optional[bool] = None,
        control_exposed: bool = False,
        unanswered_limit: int = 8,
        step_threshold_s: float = 1000.0,
        boot_at_ms: int = 0,
        stratum: int = 3,
    ):
        if variant not in VARIANTS:
            raise ValueError(f"unknown client variant {variant!r}")
        self.net = net
        self.host = host
        self.spec = VARIANTS[variant]
        self.pool_hostnames = [h.lower() for h in pool_hostnames]
        self.resolver_ip = resolver_ip
        self.poll_interval_ms = poll_interval_s * 1000
        self.serves_ntp = self.spec.serves_ntp if serves_ntp is None else serves_ntp
        self.control_exposed = control_exposed
        self.unanswered_limit = unanswered_limit
        self.step_threshold_ms = step_threshold_s * 1000
        self.stratum = stratum

        self.clock_offset_ms: float = 0.0
        self.first_set_done = False
        self.booted = False
        self.done = False  # oneshot completion
        self.associations: dict[str, Association] = {}
        self.fallbacks: list[str] = []
        self.system_peer: Optional[str] = None
        self._samples: dict[str, float] = {}
        self._dns_rng = net.rng(f"client-dns/{host.name}")

        net.bind(host, NTP_PORT, self._handle_ntp)
        net.schedule(boot_at_ms, self.boot)

    # ------------------------------------------------------------------ clock

    def local_ms(self) -> float:
        return self.net.now + self.clock_offset_ms

    def _apply_step(self, step_ms: float, contributors: list[str]) -> None:
        if self.first_set_done and abs(step_ms) > self.step_threshold_ms:
            self.net.emit(
                "clock_step", self.host.name,
                accepted=False, step=round(step_ms, 3), reason="step_threshold",
            )
            return
        before = self.clock_offset_ms
        self.clock_offset_ms = before + step_ms
        peer = min(
            contributors,
            key=lambda ip: (abs(self._samples.get(ip, step_ms) - step_ms), ip),
        ) if contributors else None
        if peer is not None:
            self.system_peer = peer
        self.first_set_done = True
        self.net.emit(
            "clock_step", self.host.name,
            accepted=True,
            before=round(before, 3),
            after=round(self.clock_offset_ms, 3),
            step=round(step_ms, 3),
            contributors=sorted(contributors),
            peer=self.system_peer,
        )
        if self.spec.oneshot:
            self.done = True

    # ------------------------------------------------------------------- boot

    def boot(self) -> None:
        self.booted = True
        self._query_dns_all()
        self.net.schedule_in(self.poll_interval_ms, self._tick)

    def _query_dns_all(self) -> None:
        for name in self.pool_hostnames:
            self._query_dns(name)

    def _query_dns(self, qname: str) -> None:
        port = self.net.alloc_ephemeral_port(self.host, self._dns_rng)
        txid = self._dns_rng.randrange(0x10000)
        expected = Question(qname, QTYPE_A)

        def handler(src, sport, payload, _pkt):
            try:
                msg = DnsMessage.decode(payload)
            except Malformed:
                return
            if not msg.qr or msg.txid != txid or msg.question != expected:
                return
            self.net.unbind(self.host, port)
            if msg.rcode == RCODE_NOERROR and msg.answers:
                self._on_dns_answer(qname, [rr.address for rr in msg.answers
                                            if rr.rtype == QTYPE_A])
            else:
                self.net.emit("drop", self.host.name, reason="boot_no_servers",
                              qname=qname, rcode=msg.rcode)

        def expire():
            if self.host.ports.get(port) is handler:
                self.net.unbind(self.host, port)

        self.net.bind(self.host, port, handler)
        self.net.schedule_in(self.poll_interval_ms, expire)
        q = DnsMessage(txid=txid, qr=False, rd=True, question=expected)
        self.net.send_udp(self.host, port, self.resolver_ip, DNS_PORT, q.encode())

    def _on_dns_answer(self, qname: str, addresses: list[str]) -> None:
        if self.done:
            return
        if self.spec.dns_every_poll:
            # SNTP-by-hostname: the freshest answer is the server, every cycle.
            if addresses:
                self._replace_single_association(addresses[0])
                self._poll_one(self.associations[addresses[0]])
            return
        if self.spec.fallback_cache and addresses:
            known = set(self.associations) | set(self.fallbacks)
            if not self._active():
                self._mobilize(addresses[0])
                rest = addresses[1:]
            else:
                rest = addresses
            for a in rest:
                if a not in known and len(self.fallbacks) < self.spec.fallback_cache:
                    self.fallbacks.append(a)
            return
        for a in addresses:
            if len(self._active()) >= self.spec.target_assocs:
                break
            self._mobilize(a)

    def _replace_single_association(self, address: str) -> None:
        # SNTP-by-hostname keeps no association state between cycles: whatever
        # the last lookup returned is the server.
        current = self.associations.get(address)
        if current is not None and current.state == ACTIVE and len(self.associations) == 1:
            return
        self.associations = {address: Association(address, origin="pool_dns")}

    def _mobilize(self, address: str) -> None:
        if address in self.associations:
            return  # never re-mobilize a demobilized server
        assoc = Association(address, origin="pool_dns")
        self.associations[address] = assoc
        self._poll_one(assoc)

    def _active(self) -> list[Association]:
        return [a for a in self.associations.values() if a.state == ACTIVE]

    # ------------------------------------------------------------------ polls

    def _tick(self) -> None:
        if self.done:
            return
        self._close_round()
        self._demobilize_starved()
        self._runtime_replenish()
        if self.spec.dns_every_poll:
            self._query_dns_all()
        else:
            for assoc in self._active():
                self._poll_one(assoc)
            if not self.associations:
                # Boot resolution failed entirely: retry at the poll cadence.
                self._query_dns_all()
        self.net.schedule_in(self.poll_interval_ms, self._tick)

    def _close_round(self) -> None:
        if self.spec.immediate_step or not self._samples:
            self._samples = {}
            return
        thetas = self._samples
        step = statistics.median(thetas.values())
        self._apply_step(step, list(thetas))
        self._samples = {}

    def _demobilize_starved(self) -> None:
        if self.spec.dns_every_poll:
            return  # every-cycle lookups make starvation bookkeeping moot
        for assoc in self._active():
            if assoc.unanswered >= self.unanswered_limit:
                assoc.state = DEMOBILIZED
                self.net.emit(
                    "assoc_demobilized", self.host.name,
                    server=assoc.server_ip, unanswered=assoc.unanswered,
                )

    def _runtime_replenish(self) -> None:
        if not self.spec.runtime_dns or self.spec.dns_every_poll:
            return
        active = len(self._active())
        if self.spec.fallback_cache:
            if active == 0:
                while self.fallbacks and active == 0:
                    nxt = self.fallbacks.pop(0)
                    if nxt not in self.associations:
                        self._mobilize(nxt)
                        active = len(self._active())
                if active == 0:
                    self._query_dns_all()
            return
        threshold = self.spec.min_active if self.spec.min_active else self.spec.target_assocs
        if self.spec.requery_on_demob:
            threshold = self.spec.target_assocs
        if active < threshold:
            self._query_dns_all()

    def _poll_one(self, assoc: Association) -> None:
        if assoc.state != ACTIVE or self.done:
            return
        xmit = ntp_ts(self.local_ms())
        assoc.pending_xmit = xmit
        assoc.unanswered += 1
        assoc.last_poll = self.net.now
        req = NtpPacket(mode=MODE_CLIENT, stratum=0, poll=6, xmit_ts=xmit)
        self.net.send_udp(self.host, NTP_PORT, assoc.server_ip, NTP_PORT, req.encode())

    # -------------------------------------------------------------- receiving

    def _handle_ntp(self, src: str, sport: int, payload: bytes, _pkt) -> None:
        if payload.startswith(b"NTP6"):
            return  # control dumps are for whoever queried, not for clients
        try:
            pkt = NtpPacket.decode(payload)
        except Malformed:
            return
        if pkt.mode == MODE_CLIENT:
            if self.serves_ntp:
                self._serve_time(src, sport, pkt)
            return
        if pkt.mode == MODE_CONTROL:
            if self.control_exposed:
                self._serve_control(src, sport)
            return
        if pkt.mode != MODE_SERVER:
            return
        assoc = self.associations.get(src)
        if assoc is None or assoc.state != ACTIVE:
            return
        if pkt.is_kod or pkt.stratum == 0:
            return  # KoD carries no time and does not count as an answer
        if assoc.pending_xmit is None or pkt.orig_ts != assoc.pending_xmit:
            return
        assoc.unanswered = 0
        t1 = ntp_ms(pkt.orig_ts)
        t2 = ntp_ms(pkt.recv_ts)
        t3 = ntp_ms(pkt.xmit_ts)
        t4 = self.local_ms()
        theta = ((t2 - t1) + (t3 - t4)) / 2
        if self.spec.immediate_step:
            self._samples = {src: theta}
            self._apply_step(theta, [src])
            self._samples = {}
        else:
            self._samples[src] = theta

    def _serve_time(self, src: str, sport: int, req: NtpPacket) -> None:
        now = ntp_ts(self.local_ms())
        refid = ip_to_bytes(self.system_peer) if self.system_peer else b"\x00\x00\x00\x00"
        resp = NtpPacket(
            mode=MODE_SERVER,
            stratum=self.stratum,
            poll=req.poll,
            reference_id=refid,
            ref_ts=now,
            orig_ts=req.xmit_ts,
            recv_ts=now,
            xmit_ts=now,
        )
        self.net.send_udp(self.host, NTP_PORT, src, sport, resp.encode())

    def _serve_control(self, src: str, sport: int) -> None:
        dump = {
            "hostnames": list(self.pool_hostnames),
            "upstreams": sorted(a.server_ip for a in self._active()),
        }
        self.net.send_udp(
            self.host, NTP_PORT, src, sport,
            b"NTP6" + json.dumps(dump, sort_keys=True).encode(),
        )
