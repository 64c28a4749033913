"""Scenario files: a flat, line-oriented format, and the world builder.

One record per line: a keyword, positional fields, then key=value options.
Comments (#) and blank lines ignored. See README for the full grammar. The
format is deliberately boring so golden scenarios diff cleanly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

from npl.attacker import AttackOrchestrator, AttackPlan, Attacker, synth_addresses
from npl.chronos import ChronosClient
from npl.dns import Nameserver, Resolver
from npl.errors import ParseError, ValidationError
from npl.netsim import Network, OS_PROFILES
from npl.ntp import NtpClient, NtpServer, VARIANTS
from npl.trace import write_jsonl
from npl.wirefmt import ip_to_bytes

log = logging.getLogger("npl.scenario")

ATTACK_KINDS = ("boot_time", "run_time", "chronos", "vulnerability")

_BOOLS = {"on": True, "true": True, "1": True, "yes": True,
          "off": False, "false": False, "0": False, "no": False}


def _parse_bool(value: str, key: str, line: int) -> bool:
    try:
        return _BOOLS[value.lower()]
    except KeyError:
        raise ValidationError(f"expected on/off, got {value!r}", key=key, line=line) from None


def _parse_num(value: str, key: str, line: int, cast):
    try:
        return cast(value)
    except ValueError:
        raise ValidationError(f"bad number {value!r}", key=key, line=line) from None


@dataclass
class HostSpec:
    kind: str
    name: str
    ip: str
    line: int
    options: dict = field(default_factory=dict)


@dataclass
class ScenarioConfig:
    path: str = "<memory>"
    seed: int = 0
    duration_s: int = 3600
    expect: Optional[str] = None  # "success" | "failure"
    default_latency_ms: int = 10
    default_loss: float = 0.0
    hosts: list[HostSpec] = field(default_factory=list)
    zones: dict[str, list[str]] = field(default_factory=dict)
    links: list[tuple[str, str, int, float]] = field(default_factory=list)
    autoserver: dict = field(default_factory=dict)
    attack: dict = field(default_factory=dict)

    def host_of_kind(self, kind: str) -> Optional[HostSpec]:
        matches = [h for h in self.hosts if h.kind == kind]
        return matches[0] if matches else None


_HOST_KINDS = ("resolver", "nameserver", "client", "server", "attacker", "chronos")


def parse_scenario(text: str, path: str = "<memory>") -> ScenarioConfig:
    cfg = ScenarioConfig(path=path)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        kind, rest = fields[0], fields[1:]

        if kind == "seed":
            cfg.seed = _parse_num(_one(rest, kind, lineno), "seed", lineno, int)
        elif kind == "duration":
            cfg.duration_s = _parse_num(_one(rest, kind, lineno), "duration", lineno, int)
        elif kind == "expect":
            value = _one(rest, kind, lineno)
            if value not in ("success", "failure"):
                raise ValidationError("expect must be success or failure",
                                      key="expect", line=lineno)
            cfg.expect = value
        elif kind == "defaults":
            opts = _options(rest, lineno)
            if "latency" in opts:
                cfg.default_latency_ms = _parse_num(opts.pop("latency"), "latency", lineno, int)
            if "loss" in opts:
                cfg.default_loss = _parse_num(opts.pop("loss"), "loss", lineno, float)
            _reject_unknown(opts, lineno)
        elif kind in _HOST_KINDS:
            if len(rest) < 2:
                raise ParseError(f"{kind} needs a name and an address", line=lineno)
            name, ip = rest[0], rest[1]
            _check_ip(ip, lineno)
            cfg.hosts.append(HostSpec(kind=kind, name=name, ip=ip, line=lineno,
                                      options=_options(rest[2:], lineno)))
        elif kind == "zone":
            if len(rest) < 2:
                raise ParseError("zone needs a name and at least one address", line=lineno)
            qname = rest[0].lower()
            for a in rest[1:]:
                _check_ip(a, lineno)
            cfg.zones.setdefault(qname, []).extend(rest[1:])
        elif kind == "link":
            if len(rest) < 2:
                raise ParseError("link needs two addresses", line=lineno)
            _check_ip(rest[0], lineno)
            _check_ip(rest[1], lineno)
            opts = _options(rest[2:], lineno)
            latency = _parse_num(opts.pop("latency", "10"), "latency", lineno, int)
            loss = _parse_num(opts.pop("loss", "0"), "loss", lineno, float)
            _reject_unknown(opts, lineno)
            cfg.links.append((rest[0], rest[1], latency, loss))
        elif kind == "autoserver":
            cfg.autoserver.update(_options(rest, lineno))
        elif kind == "attack":
            if not rest:
                raise ParseError("attack needs a kind", line=lineno)
            akind = rest[0]
            if akind not in ATTACK_KINDS:
                raise ValidationError(
                    f"unknown attack kind {akind!r}; valid: {', '.join(ATTACK_KINDS)}",
                    key="attack", line=lineno)
            cfg.attack = {"kind": akind, "line": lineno, **_options(rest[1:], lineno)}
        else:
            raise ParseError(f"unknown record {kind!r}", line=lineno)

    _validate(cfg)
    return cfg


def _one(rest: list[str], key: str, line: int) -> str:
    if len(rest) != 1:
        raise ParseError(f"{key} takes exactly one value", line=line)
    return rest[0]


def _options(fields: list[str], line: int) -> dict:
    opts = {}
    for f in fields:
        if "=" not in f:
            raise ParseError(f"expected key=value, got {f!r}", line=line)
        k, v = f.split("=", 1)
        if k in opts:
            raise ParseError(f"duplicate option {k!r}", line=line)
        opts[k] = v
    return opts


def _reject_unknown(opts: dict, line: int) -> None:
    if opts:
        key = next(iter(opts))
        raise ValidationError(f"unknown option {key!r}", key=key, line=line)


def _check_ip(value: str, line: int) -> None:
    try:
        ip_to_bytes(value)
    except ValueError as exc:
        raise ValidationError(str(exc), key="ip", line=line) from None


def _validate(cfg: ScenarioConfig) -> None:
    seen_ips: dict[str, HostSpec] = {}
    seen_names: dict[str, HostSpec] = {}
    for h in cfg.hosts:
        if h.ip in seen_ips:
            other = seen_ips[h.ip]
            raise ValidationError(
                f"duplicate address {h.ip}: hosts {other.name!r} (line {other.line}) "
                f"and {h.name!r}", key="ip", line=h.line)
        if h.name in seen_names:
            raise ValidationError(f"duplicate host name {h.name!r}", key="name", line=h.line)
        seen_ips[h.ip] = h
        seen_names[h.name] = h

    kind = cfg.attack.get("kind")
    if kind == "vulnerability":
        return  # analytic scenarios carry no topology

    for required in ("resolver", "nameserver", "attacker"):
        count = sum(1 for h in cfg.hosts if h.kind == required)
        if count != 1:
            raise ValidationError(f"scenario needs exactly one {required}, found {count}",
                                  key=required)
    if kind in ("boot_time", "run_time") and cfg.host_of_kind("client") is None:
        raise ValidationError("attack needs a client host", key="client",
                              line=cfg.attack.get("line"))
    if kind == "chronos" and cfg.host_of_kind("chronos") is None:
        raise ValidationError("chronos attack needs a chronos host", key="chronos",
                              line=cfg.attack.get("line"))

    for h in cfg.hosts:
        if h.kind == "client":
            variant = h.options.get("variant", "ntpd")
            if variant not in VARIANTS:
                raise ValidationError(
                    f"unknown client variant {variant!r}; valid: {', '.join(sorted(VARIANTS))}",
                    key="variant", line=h.line)


def load_scenario(path: str) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read(), path=path)


# ------------------------------------------------------------------- building


@dataclass
class ScenarioRuntime:
    config: ScenarioConfig
    net: Network
    actors: dict
    orchestrator: Optional[AttackOrchestrator]
    plan: Optional[AttackPlan]

    def run(self):
        self.net.run_until(self.config.duration_s * 1000)
        report = self.orchestrator.finalize() if self.orchestrator else None
        return self.net.trace, report

    def write_outputs(self, out_dir: str):
        import json
        import os

        os.makedirs(out_dir, exist_ok=True)
        trace_path = os.path.join(out_dir, "trace.jsonl")
        write_jsonl(self.net.trace, trace_path)
        report = self.orchestrator.finalize() if self.orchestrator else None
        report_path = os.path.join(out_dir, "report.json")
        with open(report_path, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict() if report else {}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return trace_path, report_path, report


def _csv(value: str) -> list[str]:
    return [v for v in value.split(",") if v]


def build_scenario(cfg: ScenarioConfig, seed: Optional[int] = None) -> ScenarioRuntime:
    """Instantiate the network and actors a config describes."""
    if cfg.attack.get("kind") == "vulnerability":
        raise ValueError("vulnerability scenarios are analytic; use the sweep path")
    net = Network(seed=cfg.seed if seed is None else seed,
                  default_latency_ms=cfg.default_latency_ms,
                  default_loss=cfg.default_loss)
    actors: dict = {"servers": {}, "clients": {}}

    resolver_spec = cfg.host_of_kind("resolver")
    ns_spec = cfg.host_of_kind("nameserver")
    attacker_spec = cfg.host_of_kind("attacker")

    attack = dict(cfg.attack)
    akind = attack.pop("kind", None)
    attack.pop("line", None)

    # Attacker-controlled NTP servers: one per malicious address.
    shift_s = float(attack.get("shift", "-500"))
    malicious = _csv(attack.get("addresses", ""))
    if akind == "chronos":
        records = int(attack.get("records", "89"))
        if len(malicious) < records:
            malicious = malicious + synth_addresses(records - len(malicious))

    for h in cfg.hosts:
        opts = dict(h.options)
        if h.kind == "resolver":
            os_profile = OS_PROFILES.get(opts.pop("os", "linux"))
            if os_profile is None:
                raise ValidationError("os must be linux or windows", key="os", line=h.line)
            host = net.add_host(h.name, h.ip, os_profile=os_profile)
            actors["resolver"] = Resolver(
                net, host, upstream_ip=opts.pop("upstream", ns_spec.ip if ns_spec else ""),
                max_answer_records=int(opts.pop("max_records", "89")),
                fixed_port=int(opts["fixed_port"]) if opts.pop("fixed_port", None) else None,
                ignore_rd=_parse_bool(opts.pop("ignore_rd", "off"), "ignore_rd", h.line),
            )
        elif h.kind == "nameserver":
            host = net.add_host(h.name, h.ip)
            actors["nameserver"] = Nameserver(
                net, host, cfg.zones,
                answer_ttl=int(opts.pop("ttl", "150")),
                addresses_per_response=int(opts.pop("per_response", "4")),
                ipid_step=int(opts.pop("ipid_step", "1")),
                cross_traffic_rate=float(opts.pop("cross_traffic", "0")),
            )
        elif h.kind == "client":
            host = net.add_host(h.name, h.ip)
            variant = opts.pop("variant", "ntpd")
            serves = opts.pop("serves", None)
            actors["clients"][h.ip] = NtpClient(
                net, host, variant, _csv(opts.pop("pools", "pool.ntp.org")),
                resolver_ip=resolver_spec.ip if resolver_spec else "",
                poll_interval_s=int(opts.pop("poll", "64")),
                serves_ntp=_parse_bool(serves, "serves", h.line) if serves is not None else None,
                control_exposed=_parse_bool(opts.pop("control", "off"), "control", h.line),
                unanswered_limit=int(opts.pop("unanswered", "8")),
                step_threshold_s=float(opts.pop("step_threshold", "1000")),
                boot_at_ms=int(float(opts.pop("boot", "0")) * 1000),
            )
            actors["victim_variant"] = variant
        elif h.kind == "server":
            host = net.add_host(h.name, h.ip)
            actors["servers"][h.ip] = _make_server(net, host, opts, h.line)
            opts = {}
        elif h.kind == "attacker":
            host = net.add_host(h.name, h.ip, can_spoof=True)
            actors["attacker"] = Attacker(net, host)
        elif h.kind == "chronos":
            host = net.add_host(h.name, h.ip)
            actors["chronos"] = ChronosClient(
                net, host, opts.pop("pool", "pool.ntp.org"),
                resolver_ip=resolver_spec.ip if resolver_spec else "",
                malicious=frozenset(malicious),
                interval_s=int(opts.pop("interval", "3600")),
                queries=int(opts.pop("queries", "24")),
                start_ms=int(float(opts.pop("start", "0")) * 1000),
            )
        _reject_unknown(opts, h.line)

    # Zone servers not declared explicitly get the autoserver defaults.
    declared = {h.ip for h in cfg.hosts}
    for qname, addresses in cfg.zones.items():
        for ip in addresses:
            if ip not in declared and ip not in actors["servers"]:
                host = net.add_host(f"srv-{ip}", ip)
                actors["servers"][ip] = _make_server(net, host, dict(cfg.autoserver), 0)

    # Malicious NTP servers serve the shifted time, never rate-limit.
    for ip in malicious:
        if net.host_by_ip(ip) is None:
            host = net.add_host(f"mal-{ip}", ip)
            actors["servers"][ip] = NtpServer(
                net, host, stratum=2, upstream_ref=attacker_spec.ip if attacker_spec else ip,
                offset_ms=shift_s * 1000, rate_limit_enabled=False,
            )

    for src, dst, latency, loss in cfg.links:
        net.set_link(src, dst, latency, loss)

    plan = None
    orchestrator = None
    if akind:
        client_spec = cfg.host_of_kind("client")
        chronos_spec = cfg.host_of_kind("chronos")
        client_actor = actors["clients"].get(client_spec.ip) if client_spec else None
        plan = AttackPlan(
            kind=akind,
            victim_client_ip=attack.pop("victim",
                                        client_spec.ip if client_spec
                                        else (chronos_spec.ip if chronos_spec else "")),
            resolver_ip=resolver_spec.ip if resolver_spec else "",
            nameserver_ip=ns_spec.ip if ns_spec else "",
            qnames=_csv(attack.pop("qnames", "")) or (
                [actors["chronos"].qname] if akind == "chronos" and "chronos" in actors
                else (client_actor.pool_hostnames if client_actor else list(cfg.zones))),
            malicious_addresses=malicious,
            time_shift_ms=shift_s * 1000,
            start_ms=int(float(attack.pop("start", "0")) * 1000),
            discovery=attack.pop("discovery", "control"),
            silence_count=int(silence) if (silence := attack.pop("silence", None)) else None,
            spoof_rate_per_s=float(attack.pop("rate", "2")),
            icmp_mtu=int(attack.pop("mtu", "68")),
            replant_interval_s=int(attack.pop("replant", "30")),
            attempt_window_s=int(attack.pop("attempt_window", "150")),
            plant_ttl=int(attack.pop("plant_ttl", "90000")),
            n_probes=int(attack.pop("probes", "3")),
            probe_spacing_ms=int(attack.pop("probe_spacing", "2000")),
            ipid_step_hint=int(hint) if (hint := attack.pop("step_hint", None)) else None,
            poison_round=int(attack.pop("poison_round", "0")),
            poison_records=int(attack.pop("records", "89")),
            poison_ttl=int(attack.pop("poison_ttl", "90000")),
        )
        attack.pop("shift", None)
        attack.pop("addresses", None)
        attack.pop("records", None)
        _reject_unknown(attack, cfg.attack.get("line", 0))
        orchestrator = AttackOrchestrator(
            net, actors["attacker"], plan,
            victim_variant=actors.get("victim_variant"),
            chronos_client=actors.get("chronos"),
        )

    return ScenarioRuntime(config=cfg, net=net, actors=actors,
                           orchestrator=orchestrator, plan=plan)


def _make_server(net: Network, host, opts: dict, line: int) -> NtpServer:
    server = NtpServer(
        net, host,
        stratum=int(opts.pop("stratum", "2")),
        upstream_ref=opts.pop("upstream", "7.7.7.1"),
        offset_ms=float(opts.pop("offset", "0")) * 1000,
        rate_limit_enabled=_parse_bool(opts.pop("rate_limit", "on"), "rate_limit", line),
        min_interarrival_s=float(opts.pop("min_interarrival", "1")),
        burst=int(opts.pop("burst", "8")),
        penalty_s=int(opts.pop("penalty", "300")),
        kod_before_silence=_parse_bool(opts.pop("kod", "on"), "kod", line),
        trickle_every=int(opts.pop("trickle", "0")),
        control_exposed=_parse_bool(opts.pop("control", "off"), "control", line),
    )
    _reject_unknown(opts, line)
    return server
