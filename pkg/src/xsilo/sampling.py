"""Oblivious batch selection and effective sampling fractions.

SWOR batches are drawn jointly from the shared plaintext token list with a
seeded Fisher-Yates shuffle, so every party computes the same batch without
communicating and learns only which of its *own* tokens were chosen.
Poisson batches need no coordination at all.

When malicious parties know whether their own samples were drawn, the number
of honest samples in a SWOR batch is hypergeometric, which weakens the
amplification relative to Poisson sampling at the same mean batch size.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import secrets
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gammaln
from scipy.stats import norm

from .mixnet import TokenList
from .prg import HashStream

SWOR_DOMAIN = b"xsilo-swor"
EXACT_HYPERGEOM_LIMIT = 10**6


class BatchTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class Swor:
    b: int


@dataclass(frozen=True)
class Poisson:
    gamma: float

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")


@dataclass(frozen=True)
class BatchSpec:
    scheme: Swor | Poisson
    joint_seed: bytes
    round: int = 0

    def for_round(self, round: int) -> "BatchSpec":
        return BatchSpec(self.scheme, self.joint_seed, round)


# ---------------------------------------------------------------------------
# Joint seed: commit, reveal, XOR
# ---------------------------------------------------------------------------


def seed_contribution(rng: np.random.Generator | None = None, nbytes: int = 32) -> bytes:
    return secrets.token_bytes(nbytes) if rng is None else rng.bytes(nbytes)


def commit(contribution: bytes, party_id: int) -> bytes:
    return hashlib.sha256(b"xsilo-commit" + party_id.to_bytes(4, "little") + contribution).digest()


def joint_seed(commitments: dict[int, bytes], reveals: dict[int, bytes]) -> bytes:
    """XOR of revealed contributions after checking each against its commitment."""
    if set(commitments) != set(reveals):
        raise ValueError("every committed party must reveal")
    lengths = {len(r) for r in reveals.values()}
    if len(lengths) != 1:
        raise ValueError("contributions must have equal length")
    out = bytes(lengths.pop())
    for pid in sorted(reveals):
        if commit(reveals[pid], pid) != commitments[pid]:
            raise ValueError(f"party {pid} revealed a value that does not match its commitment")
        out = bytes(a ^ b for a, b in zip(out, reveals[pid]))
    return out


# ---------------------------------------------------------------------------
# Batch selection
# ---------------------------------------------------------------------------


def swor_indices(n: int, b: int, seed: bytes, round: int) -> list[int]:
    """First ``b`` positions of a Fisher-Yates shuffle of ``range(n)``.

    Step ``t`` swaps position ``t`` with ``t + randbelow(n - t)`` drawn from
    the hash stream keyed by ``(seed, round)``.
    """
    if b > n:
        raise BatchTooLarge(f"batch size {b} exceeds list size {n}")
    if b < 0:
        raise ValueError("batch size must be non-negative")
    stream = HashStream(seed, round, SWOR_DOMAIN)
    idx = list(range(n))
    for t in range(b):
        j = t + stream.randbelow(n - t)
        idx[t], idx[j] = idx[j], idx[t]
    return idx[:b]


def select_batch_swor(tokens: TokenList, spec: BatchSpec) -> set[bytes]:
    if not isinstance(spec.scheme, Swor):
        raise TypeError("select_batch_swor needs a Swor scheme")
    if tokens.layer != 0:
        raise ValueError("token list must be fully decrypted")
    chosen = swor_indices(len(tokens.entries), spec.scheme.b, spec.joint_seed, spec.round)
    return {tokens.entries[i] for i in chosen}


def local_batch(batch: set[bytes], own_tokens: Sequence[bytes]) -> list[int]:
    """Indices of a party's own samples whose tokens are in the joint batch."""
    return [j for j, t in enumerate(own_tokens) if t in batch]


def select_batch_poisson(local_count: int, gamma: float, rng: np.random.Generator) -> np.ndarray:
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    return np.flatnonzero(rng.random(local_count) < gamma)


# ---------------------------------------------------------------------------
# Hypergeometric distribution
# ---------------------------------------------------------------------------


def hypergeom_logpmf(k, n: int, n_success: int, draws: int) -> np.ndarray:
    """log P[X = k], X ~ Hypergeometric(population n, successes n_success, draws)."""
    k = np.asarray(k, dtype=np.float64)

    def log_comb(a, c):
        return gammaln(a + 1) - gammaln(c + 1) - gammaln(a - c + 1)

    lo = max(0, draws - (n - n_success))
    hi = min(draws, n_success)
    with np.errstate(invalid="ignore"):
        out = log_comb(n_success, k) + log_comb(n - n_success, draws - k) - log_comb(n, draws)
    return np.where((k >= lo) & (k <= hi), out, -np.inf)


def hypergeom_cdf(k: int, n: int, n_success: int, draws: int) -> float:
    lo = max(0, draws - (n - n_success))
    hi = min(draws, n_success)
    if k < lo:
        return 0.0
    if k >= hi:
        return 1.0
    logp = hypergeom_logpmf(np.arange(lo, hi + 1), n, n_success, draws)
    m = logp.max()
    p = np.exp(logp - m)
    p /= p.sum()
    # sum the shorter tail for accuracy near 1
    below = k - lo + 1
    if below <= len(p) - below:
        return float(min(1.0, p[:below].sum()))
    return float(max(0.0, 1.0 - p[below:].sum()))


def hypergeom_quantile(q: float, n: int, n_success: int, draws: int) -> int:
    """Smallest integer ``Q`` with ``P[X <= Q] >= q``."""
    lo = max(0, draws - (n - n_success))
    hi = min(draws, n_success)
    if q <= 0:
        return lo
    if q >= 1 or lo == hi:
        return hi
    if n > EXACT_HYPERGEOM_LIMIT:
        mean = draws * n_success / n
        var = draws * (n_success / n) * (1 - n_success / n) * (n - draws) / max(n - 1, 1)
        # continuity-corrected normal approximation
        return int(min(hi, max(lo, math.ceil(mean + math.sqrt(var) * norm.ppf(q) - 0.5))))
    ks = np.arange(lo, hi + 1)
    logp = hypergeom_logpmf(ks, n, n_success, draws)
    p = np.exp(logp - logp.max())
    p /= p.sum()
    # upper-tail sums: tail[i] = P[X >= ks[i]]
    tail = np.cumsum(p[::-1])[::-1]
    # P[X <= ks[i]] = 1 - tail[i+1]; want the first i where 1 - tail[i+1] >= q
    upper = np.append(tail[1:], 0.0)
    ok = np.flatnonzero(upper <= 1 - q)
    return int(ks[ok[0]])


# ---------------------------------------------------------------------------
# Effective sampling fractions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AmplificationQuery:
    n: int
    n_honest: int
    b: int
    delta_slack: float = 0.0

    def __post_init__(self):
        if not 0 < self.n_honest <= self.n:
            raise ValueError("need 0 < n_honest <= n")
        if not 0 <= self.b <= self.n:
            raise ValueError("need 0 <= b <= n")
        if not 0 <= self.delta_slack < 1:
            raise ValueError("delta_slack must lie in [0, 1)")


def effective_fraction_swor(q: AmplificationQuery) -> float:
    """Worst-case sampling fraction for honest samples, optionally with a delta slack.

    With zero slack every batch slot may go to an honest sample. With slack
    ``s`` the count is bounded by the ``1 - s`` quantile of the hypergeometric
    distribution, and ``s`` is added to the reported delta.
    """
    if q.delta_slack == 0:
        top = min(q.b, q.n_honest)
    else:
        top = hypergeom_quantile(1 - q.delta_slack, q.n, q.n_honest, q.b)
    return min(1.0, top / q.n_honest)


def effective_fraction_poisson(gamma: float) -> float:
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    return gamma


@dataclass(frozen=True)
class CurveRow:
    adv_frac: float
    slack: float
    swor_frac: float
    poisson_frac: float


def amplification_curve(
    n: int, b: int, delta_slacks: Iterable[float], adversary_fractions: Iterable[float]
) -> list[CurveRow]:
    slacks = list(delta_slacks)
    advs = list(adversary_fractions)
    if not slacks or not advs:
        raise ValueError("grids must be non-empty")
    gamma = b / n
    rows = []
    for a in advs:
        n_honest = max(1, round(n * (1 - a)))
        for s in slacks:
            swor = effective_fraction_swor(AmplificationQuery(n, n_honest, b, s))
            rows.append(CurveRow(a, s, swor, effective_fraction_poisson(gamma)))
    return rows


CURVE_HEADER = ("adv_frac", "slack", "swor_frac", "poisson_frac")


def curve_to_csv(rows: Sequence[CurveRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_HEADER)
    for r in rows:
        w.writerow([repr(r.adv_frac), repr(r.slack), repr(r.swor_frac), repr(r.poisson_frac)])
    return buf.getvalue()
