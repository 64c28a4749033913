"""Attack-probability analysis: closed forms and Monte Carlo estimation.

P1(n) is the chance that n servers picked blind all rate-limit; P2(m, n)
the chance that an attacker who knows the client's m upstreams finds at
least n rate limiters among them. Both are driven by the measured fraction
of rate-limiting pool servers (38%).
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

DEFAULT_P_RATE = 0.38

_Z95 = 1.959963984540054  # two-sided 95%


def p1(n: int, p_rate: float = DEFAULT_P_RATE) -> float:
    """Probability of silencing n blindly-discovered servers: p_rate**n."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if not 0 <= p_rate <= 1:
        raise ValueError("p_rate must be a probability")
    return p_rate**n


def p2(m: int, n: int, p_rate: float = DEFAULT_P_RATE) -> float:
    """Probability that at least n of m known servers rate-limit."""
    if not 0 <= n <= m:
        raise ValueError("need 0 <= n <= m")
    if not 0 <= p_rate <= 1:
        raise ValueError("p_rate must be a probability")
    # comb() is exact; only the final products are floating point.
    return sum(
        math.comb(m, i) * p_rate**i * (1 - p_rate) ** (m - i)
        for i in range(n, m + 1)
    )


def removal_target(m: int) -> int:
    """Associations the attacker must remove for a client with m upstreams.

    A strict majority must go (floor(m/2) + 1, so that the attacker's
    replacements outnumber the survivors); the ntpd MINCLOCK analysis
    tightens that to m-2 for larger m.
    """
    return max(m // 2 + 1, m - 2)


@dataclass
class ProbabilityRow:
    m: int
    n: int
    p1: float
    p2: float


@dataclass
class MonteCarloRow:
    m: int
    n: int
    scenario: int
    trials: int
    successes: int
    estimate: float
    ci_low: float
    ci_high: float

    @property
    def ci_half_width(self) -> float:
        return (self.ci_high - self.ci_low) / 2


@dataclass
class ProbabilityTable:
    p_rate: float
    rows: list[ProbabilityRow] = field(default_factory=list)
    mc_rows: list[MonteCarloRow] = field(default_factory=list)


def table3(p_rate: float = DEFAULT_P_RATE, m_max: int = 9) -> ProbabilityTable:
    """Vulnerability probabilities for clients with m = 1..m_max upstreams."""
    table = ProbabilityTable(p_rate=p_rate)
    for m in range(1, m_max + 1):
        n = removal_target(m)
        table.rows.append(ProbabilityRow(m=m, n=n, p1=p1(n, p_rate), p2=p2(m, n, p_rate)))
    return table


def wilson_interval(successes: int, trials: int, z: float = _Z95) -> tuple[float, float]:
    """Wilson score interval; better behaved than the normal approximation
    when successes are scarce."""
    if trials <= 0:
        raise ValueError("trials must be positive")
    phat = successes / trials
    denom = 1 + z**2 / trials
    center = (phat + z**2 / (2 * trials)) / denom
    half = (z / denom) * math.sqrt(phat * (1 - phat) / trials + z**2 / (4 * trials**2))
    return max(0.0, center - half), min(1.0, center + half)


def monte_carlo_vulnerability(
    scenario: int,
    m: int,
    trials: int,
    seed: int,
    p_rate: float = DEFAULT_P_RATE,
    n: int | None = None,
) -> MonteCarloRow:
    """Estimate the attack-success probability by sampling pool draws.

    Scenario 1: the attacker discovers the client's servers one at a time
    and must silence all n it runs into. Scenario 2: the attacker knows the
    client's m servers up front; n or more rate limiters among them suffice.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if scenario not in (1, 2):
        raise ValueError("scenario must be 1 or 2")
    n = removal_target(m) if n is None else n
    rng = random.Random(seed)
    successes = 0
    if scenario == 1:
        for _ in range(trials):
            if all(rng.random() < p_rate for _ in range(n)):
                successes += 1
    else:
        for _ in range(trials):
            limiting = sum(rng.random() < p_rate for _ in range(m))
            if limiting >= n:
                successes += 1
    lo, hi = wilson_interval(successes, trials)
    return MonteCarloRow(
        m=m, n=n, scenario=scenario, trials=trials, successes=successes,
        estimate=successes / trials, ci_low=lo, ci_high=hi,
    )


def _binom_pmf(i: int, n: int, p: float) -> float:
    if p == 0.0:
        return 1.0 if i == 0 else 0.0
    if p == 1.0:
        return 1.0 if i == n else 0.0
    log_pmf = (
        math.lgamma(n + 1) - math.lgamma(i + 1) - math.lgamma(n - i + 1)
        + i * math.log(p) + (n - i) * math.log1p(-p)
    )
    return math.exp(log_pmf)


def binomial_sf(k: int, n: int, p: float) -> float:
    """P(X >= k) for X ~ Binomial(n, p).

    Sums whichever tail is shorter, in log space, so huge n with tiny p
    (the blind-spoof regime) stays accurate.
    """
    if k <= 0:
        return 1.0
    if k > n:
        return 0.0
    if k <= n // 2:
        below = math.fsum(_binom_pmf(i, n, p) for i in range(k))
        return max(0.0, 1.0 - below)
    return min(1.0, math.fsum(_binom_pmf(i, n, p) for i in range(k, n + 1)))


def consistent_with_rate(successes: int, attempts: int, p_max: float, alpha: float = 0.01) -> bool:
    """One-sided binomial test: is the success count consistent with a
    per-attempt probability of at most p_max?"""
    return binomial_sf(successes, attempts, p_max) >= alpha


def render_table(table: ProbabilityTable, fmt: str = "tsv") -> str:
    if fmt == "tsv":
        lines = ["m\tn\tP1\tP2"]
        for row in table.rows:
            lines.append(f"{row.m}\t{row.n}\t{row.p1 * 100:.1f}%\t{row.p2 * 100:.1f}%")
        return "\n".join(lines)
    if fmt == "markdown":
        lines = [
            "| m | n | P1(n) | P2(m,n) |",
            "|---|---|-------|---------|",
        ]
        for row in table.rows:
            lines.append(
                f"| {row.m} | {row.n} | {row.p1 * 100:.1f}% | {row.p2 * 100:.1f}% |"
            )
        return "\n".join(lines)
    raise ValueError(f"unknown format {fmt!r}")
