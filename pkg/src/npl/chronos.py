"""Pool-sampling NTP client: 24 hourly lookups, union pool, trim-mean picker.

The client gathers its server pool from repeated DNS answers, so one cached
malicious RRset with a long TTL freezes the remaining lookups and stuffs
the pool. With 89 injected addresses against 4 honest ones per hour, the
two-thirds takeover condition holds iff poisoning lands within the first
12 transactions (N <= 11 honest rounds first).

The time-selection stand-in (sample k, trim d, average) is deliberately
simple: the takeover argument is about the pool fraction, and no trim level
survives a two-thirds-malicious pool.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from statistics import fmean

from npl.errors import InsufficientPool

HONEST = "honest"
MALICIOUS = "malicious"

GENERATION_QUERIES = 24
QUERY_INTERVAL_S = 3600


@dataclass
class ChronosPool:
    members: dict[str, str] = field(default_factory=dict)  # address -> provenance
    queries_done: int = 0
    generation_complete: bool = False

    @property
    def malicious_count(self) -> int:
        return sum(1 for p in self.members.values() if p == MALICIOUS)

    @property
    def honest_count(self) -> int:
        return sum(1 for p in self.members.values() if p == HONEST)


def pool_generate_step(pool: ChronosPool, addresses: list[str],
                       malicious: set[str] | frozenset[str] = frozenset()) -> ChronosPool:
    """Fold one hourly DNS answer into the pool (union semantics)."""
    if pool.generation_complete:
        raise ValueError("pool generation already complete")
    for addr in addresses:
        provenance = MALICIOUS if addr in malicious else HONEST
        # Union: a known address never flips provenance.
        pool.members.setdefault(addr, provenance)
    pool.queries_done += 1
    if pool.queries_done >= GENERATION_QUERIES:
        pool.generation_complete = True
    return pool


def attack_succeeds(pool: ChronosPool) -> bool:
    """Two-thirds takeover test on the finished pool.

    malicious >= ceil(2/3 * |pool|), evaluated in integers: 3*mal >= 2*total.
    """
    if not pool.generation_complete:
        raise ValueError("pool generation not complete")
    total = len(pool.members)
    if total == 0:
        return False
    return 3 * pool.malicious_count >= 2 * total


def chronos_bound(records_per_poison: int, addrs_per_honest_response: int) -> int:
    """Largest number N of honest rounds the attacker can afford to lose.

    From (2/3) * (r + a*N) <= r, i.e. 2*a*N <= r.
    """
    if records_per_poison < 1 or addrs_per_honest_response < 1:
        raise ValueError("both counts must be >= 1")
    return records_per_poison // (2 * addrs_per_honest_response)


def chronos_select_time(
    pool: ChronosPool,
    offsets: dict[str, float],
    k: int = 15,
    d: int = 4,
    rng: random.Random | None = None,
) -> tuple[float, float]:
    """Sample k pool members, trim the d highest/lowest offsets, average.

    ``offsets`` maps each address to the offset its server would serve.
    Returns (chosen offset, malicious fraction of the surviving set).
    """
    if not pool.generation_complete:
        raise ValueError("pool generation not complete")
    if k > len(pool.members):
        raise InsufficientPool(f"k={k} exceeds pool size {len(pool.members)}")
    if 2 * d >= k:
        raise ValueError("need 2*d < k")
    rng = rng or random.Random()
    sample = rng.sample(sorted(pool.members), k)
    ranked = sorted(sample, key=lambda a: (offsets[a], a))
    surviving = ranked[d : k - d] if d else ranked
    chosen = fmean(offsets[a] for a in surviving)
    mal = sum(1 for a in surviving if pool.members[a] == MALICIOUS)
    return chosen, mal / len(surviving)


class ChronosClient:
    """Event-driven pool generator: one DNS lookup per simulated hour."""

    def __init__(
        self,
        net,
        host,
        qname: str,
        resolver_ip: str,
        malicious: frozenset[str] | set[str] = frozenset(),
        interval_s: int = QUERY_INTERVAL_S,
        queries: int = GENERATION_QUERIES,
        start_ms: int = 0,
        on_complete=None,
    ):
        from npl.dns import dns_lookup

        self._dns_lookup = dns_lookup
        self.net = net
        self.host = host
        self.qname = qname.lower()
        self.resolver_ip = resolver_ip
        self.malicious = frozenset(malicious)
        self.interval_ms = interval_s * 1000
        self.queries = queries
        self.on_complete = on_complete
        self.pool = ChronosPool()
        self._rng = net.rng(f"chronos/{host.name}")
        net.schedule(start_ms, self._step)

    def _step(self) -> None:
        if self.pool.queries_done >= self.queries:
            return

        def on_answer(addresses):
            pool_generate_step(self.pool, addresses, self.malicious)
            if self.pool.queries_done >= self.queries:
                self.pool.generation_complete = True
                if self.on_complete:
                    self.on_complete(self.pool)
            else:
                self.net.schedule_in(self.interval_ms, self._step)

        def on_fail():
            # Lookup failed outright: burn the slot and move on.
            pool_generate_step(self.pool, [], self.malicious)
            if self.pool.queries_done >= self.queries:
                self.pool.generation_complete = True
                if self.on_complete:
                    self.on_complete(self.pool)
            else:
                self.net.schedule_in(self.interval_ms, self._step)

        self._dns_lookup(self.net, self.host, self._rng, self.resolver_ip,
                         self.qname, on_answer, on_fail)
