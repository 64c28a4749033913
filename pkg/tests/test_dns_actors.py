import pytest

from npl.dns import Nameserver, Resolver
from npl.netsim import Network, spoofed_udp
from npl.wirefmt import (
    DnsMessage,
    IcmpFragNeeded,
    Ipv4Packet,
    PROTO_ICMP,
    Question,
    RCODE_NOERROR,
    RCODE_NXDOMAIN,
    RCODE_REFUSED,
    ResourceRecord,
)

ZONE_12 = {"pool.ntp.org": [f"1.1.1.{i}" for i in range(1, 13)]}


class Stub:
    """Client-side helper: fire queries at a resolver, capture answers."""

    def __init__(self, net, name, ip):
        self.net = net
        self.host = net.add_host(name, ip)
        self.answers = []
        self._next_port = 30000

    def query(self, resolver_ip, qname, rd=True, txid=0x1234):
        port = self._next_port
        self._next_port += 1

        def handler(src, sport, payload, pkt):
            self.answers.append(DnsMessage.decode(payload))

        self.net.bind(self.host, port, handler)
        q = DnsMessage(txid=txid, qr=False, rd=rd, question=Question(qname))
        self.net.send_udp(self.host, port, resolver_ip, 53, q.encode())


def setup_pair(seed=1, zone=None, **res_kw):
    net = Network(seed=seed, default_latency_ms=5)
    rhost = net.add_host("resolver", "10.0.0.53")
    nhost = net.add_host("ns", "10.9.9.9")
    ns = Nameserver(net, nhost, zone or ZONE_12)
    resolver = Resolver(net, rhost, nhost.ip, **res_kw)
    client = Stub(net, "client", "10.0.0.2")
    return net, resolver, ns, client


def test_cold_cache_recursion_round_trip():
    net, resolver, ns, client = setup_pair()
    net.schedule(0, lambda: client.query("10.0.0.53", "pool.ntp.org"))
    net.run_until(1000)
    assert len(client.answers) == 1
    ans = client.answers[0]
    assert ans.rcode == RCODE_NOERROR
    assert [rr.address for rr in ans.answers] == ["1.1.1.1", "1.1.1.2", "1.1.1.3", "1.1.1.4"]
    assert all(rr.ttl == 150 for rr in ans.answers)


def test_upstream_query_uses_fresh_random_port_and_txid():
    seen = []
    net, resolver, ns, client = setup_pair(seed=9)
    orig = ns._handle_query

    def spy(src, sport, payload, pkt):
        msg = DnsMessage.decode(payload)
        seen.append((sport, msg.txid))
        orig(src, sport, payload, pkt)

    net.unbind(ns.host, 53)
    net.bind(ns.host, 53, spy)
    for i in range(6):
        # Distinct names to force a fresh recursion each time.
        ns.zone[f"z{i}.example"] = ["5.5.5.5"]
        ns.cursors[f"z{i}.example"] = 0
        net.schedule(i * 10, lambda i=i: client.query("10.0.0.53", f"z{i}.example"))
    net.run_until(5000)
    assert len(seen) == 6
    assert len({p for p, _ in seen}) > 1 or len({t for _, t in seen}) > 1
    assert all(1024 <= p <= 65535 for p, _ in seen)


def test_cache_hit_serves_remaining_ttl_without_recursion():
    net, resolver, ns, client = setup_pair()
    net.schedule(0, lambda: client.query("10.0.0.53", "pool.ntp.org"))
    net.schedule(50_000, lambda: client.query("10.0.0.53", "pool.ntp.org"))
    events = net.run_until(60_000)
    hits = [e for e in events if e.kind == "cache_hit"]
    assert len(hits) == 1
    assert hits[0].detail["remaining_ttl"] == 150 - 50
    assert len(client.answers) == 2
    assert client.answers[1].answers[0].ttl == 100
    # Only one upstream transaction: the nameserver rotated once.
    assert ns.cursors["pool.ntp.org"] == 4


def test_expired_entry_refetched_and_rotation_advances():
    net, resolver, ns, client = setup_pair()
    net.schedule(0, lambda: client.query("10.0.0.53", "pool.ntp.org"))
    net.schedule(151_000, lambda: client.query("10.0.0.53", "pool.ntp.org"))
    net.run_until(200_000)
    assert [rr.address for rr in client.answers[1].answers] == [
        "1.1.1.5", "1.1.1.6", "1.1.1.7", "1.1.1.8"]


def test_rotation_wraps_over_zone():
    net, resolver, ns, client = setup_pair()
    for i in range(3):
        net.schedule(i * 200_000, lambda: client.query("10.0.0.53", "pool.ntp.org"))
    net.run_until(700_000)
    got = [[rr.address for rr in a.answers] for a in client.answers]
    assert got == [
        ["1.1.1.1", "1.1.1.2", "1.1.1.3", "1.1.1.4"],
        ["1.1.1.5", "1.1.1.6", "1.1.1.7", "1.1.1.8"],
        ["1.1.1.9", "1.1.1.10", "1.1.1.11", "1.1.1.12"],
    ]


def test_rd0_serves_cache_but_never_recurses_or_caches():
    net, resolver, ns, client = setup_pair()
    net.schedule(0, lambda: client.query("10.0.0.53", "pool.ntp.org", rd=False))
    net.schedule(1_000, lambda: client.query("10.0.0.53", "pool.ntp.org", rd=True))
    net.schedule(2_000, lambda: client.query("10.0.0.53", "pool.ntp.org", rd=False))
    net.run_until(10_000)
    a0, a1, a2 = client.answers
    assert a0.answers == () and a0.ra
    assert len(a1.answers) == 4
    assert len(a2.answers) == 4  # now cached, rd=0 sees it
    assert resolver.cache != {}
    # The rd=0 miss did not recurse: only one rotation happened.
    assert ns.cursors["pool.ntp.org"] == 4


def test_nxdomain_not_cached():
    net, resolver, ns, client = setup_pair()
    net.schedule(0, lambda: client.query("10.0.0.53", "nope.example"))
    net.run_until(5_000)
    assert client.answers[0].rcode == RCODE_NXDOMAIN
    assert resolver.cache == {}


def test_allowed_suffixes_refuses_other_names():
    net, resolver, ns, client = setup_pair(allowed_suffixes=["ntp.org"])
    net.schedule(0, lambda: client.query("10.0.0.53", "evil.example"))
    net.schedule(100, lambda: client.query("10.0.0.53", "pool.ntp.org"))
    net.run_until(5_000)
    assert client.answers[0].rcode == RCODE_REFUSED
    assert client.answers[1].rcode == RCODE_NOERROR


def test_blind_response_with_wrong_txid_dropped():
    net, resolver, ns, client = setup_pair(fixed_port=40000)
    attacker_host = net.add_host("attacker", "6.6.6.6", can_spoof=True)
    net.schedule(0, lambda: client.query("10.0.0.53", "pool.ntp.org"))

    def spoof():
        pend = next(iter(resolver.pending.values()))
        wrong = (pend.txid + 1) % 0x10000
        forged = DnsMessage(
            txid=wrong, qr=True, question=Question("pool.ntp.org"),
            answers=(ResourceRecord.a_record("pool.ntp.org", "6.6.6.6", 86400),),
        )
        pkt = spoofed_udp("10.9.9.9", "10.0.0.53", 53, 40000, forged.encode(), ipid=777)
        net.send_spoofed(attacker_host, pkt)

    net.schedule(6, spoof)  # after the upstream query left, before the answer
    events = net.run_until(5_000)
    drops = [e for e in events if e.kind == "drop" and e.detail["reason"] == "challenge_mismatch"]
    assert drops
    cached = resolver.cache[("pool.ntp.org", 1)][0]
    assert all(rr.address.startswith("1.1.1.") for rr in cached)


def test_matching_spoof_accepted_with_attacker_ttl():
    # With the challenge known, 89 records and a huge TTL go straight in.
    net, resolver, ns, client = setup_pair(fixed_port=40000)
    attacker_host = net.add_host("attacker", "6.6.6.6", can_spoof=True)
    net.schedule(0, lambda: client.query("10.0.0.53", "pool.ntp.org"))

    def spoof():
        pend = next(iter(resolver.pending.values()))
        answers = tuple(
            ResourceRecord.a_record("pool.ntp.org", f"6.6.{i // 250}.{i % 250 + 1}", 90000)
            for i in range(89)
        )
        forged = DnsMessage(txid=pend.txid, qr=True, question=Question("pool.ntp.org"),
                            answers=answers)
        pkt = spoofed_udp("10.9.9.9", "10.0.0.53", 53, 40000, forged.encode(), ipid=888)
        net.send_spoofed(attacker_host, pkt)

    net.schedule(6, spoof)
    events = net.run_until(5_000)
    writes = [e for e in events if e.kind == "cache_write"]
    assert len(writes) == 1
    assert writes[0].detail["records"] == 89
    assert writes[0].detail["ttl"] == 90000
    rrset, expiry = resolver.cache[("pool.ntp.org", 1)]
    assert len(rrset) == 89
    assert expiry == writes[0].t + 90000 * 1000


def test_answer_record_cap_truncates():
    net, resolver, ns, client = setup_pair(fixed_port=40000, max_answer_records=10)
    attacker_host = net.add_host("attacker", "6.6.6.6", can_spoof=True)
    net.schedule(0, lambda: client.query("10.0.0.53", "pool.ntp.org"))

    def spoof():
        pend = next(iter(resolver.pending.values()))
        answers = tuple(
            ResourceRecord.a_record("pool.ntp.org", f"6.6.0.{i + 1}", 90000)
            for i in range(50)
        )
        forged = DnsMessage(txid=pend.txid, qr=True, question=Question("pool.ntp.org"),
                            answers=answers)
        net.send_spoofed(attacker_host,
                         spoofed_udp("10.9.9.9", "10.0.0.53", 53, 40000, forged.encode()))

    net.schedule(6, spoof)
    net.run_until(5_000)
    assert len(resolver.cache[("pool.ntp.org", 1)][0]) == 10


def test_off_name_records_never_cached():
    net, resolver, ns, client = setup_pair(fixed_port=40000)
    attacker_host = net.add_host("attacker", "6.6.6.6", can_spoof=True)
    net.schedule(0, lambda: client.query("10.0.0.53", "pool.ntp.org"))

    def spoof():
        pend = next(iter(resolver.pending.values()))
        answers = (
            ResourceRecord.a_record("pool.ntp.org", "6.6.6.1", 90000),
            ResourceRecord.a_record("other.example", "6.6.6.2", 90000),
        )
        forged = DnsMessage(txid=pend.txid, qr=True, question=Question("pool.ntp.org"),
                            answers=answers)
        net.send_spoofed(attacker_host,
                         spoofed_udp("10.9.9.9", "10.0.0.53", 53, 40000, forged.encode()))

    net.schedule(6, spoof)
    net.run_until(5_000)
    assert ("other.example", 1) not in resolver.cache
    cached = resolver.cache[("pool.ntp.org", 1)][0]
    assert [rr.address for rr in cached] == ["6.6.6.1"]


def test_ipid_sequence_is_arithmetic_progression():
    net, resolver, ns, client = setup_pair(seed=4)
    ns.ipid_step = 3
    observed = []
    orig_receive = net.host_receive

    def spy(host, pkt):
        if host.name == "resolver" and pkt.src == "10.9.9.9":
            observed.append(pkt.ipid)
        orig_receive(host, pkt)

    net.host_receive = spy
    for i in range(5):
        ns.zone[f"q{i}.example"] = ["5.5.5.5"]
        ns.cursors[f"q{i}.example"] = 0
        net.schedule(i * 100, lambda i=i: client.query("10.0.0.53", f"q{i}.example"))
    net.run_until(5_000)
    diffs = {(b - a) % 0x10000 for a, b in zip(observed, observed[1:])}
    assert diffs == {3}


def test_icmp_lowers_pmtu_and_fragments_responses():
    net, resolver, ns, client = setup_pair(zone={"pool.ntp.org": [f"1.1.1.{i}" for i in range(1, 13)]})
    attacker_host = net.add_host("attacker", "6.6.6.6", can_spoof=True)

    def send_icmp():
        trigger = Ipv4Packet(src="10.9.9.9", dst="10.0.0.53", protocol=17, ipid=1,
                             payload=bytes(130))
        err = IcmpFragNeeded.for_packet(trigger, 104)
        pkt = Ipv4Packet(src="6.6.6.6", dst="10.9.9.9", protocol=PROTO_ICMP, ipid=5,
                         payload=err.encode())
        net.send_ip(attacker_host, pkt)

    net.schedule(0, send_icmp)
    net.schedule(100, lambda: client.query("10.0.0.53", "pool.ntp.org"))
    events = net.run_until(10_000)
    # The 170-byte response to the resolver crossed as 2 fragments ≤ 104 bytes.
    frag_sends = [e for e in events if e.kind == "send"
                  and e.actor == "ns" and "frag" in e.detail]
    assert len(frag_sends) == 2
    assert all(e.detail["len"] <= 104 for e in frag_sends)
    assert [e for e in events if e.kind == "reassembled" and e.actor == "resolver"]
    assert len(client.answers) == 1 and len(client.answers[0].answers) == 4
