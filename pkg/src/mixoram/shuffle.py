"""Seeded permutations, public record allocation and round-count formulas.

Permutations are produced by Fisher-Yates driven by an AES-CTR keystream
keyed with the permutation seed, with rejection sampling so every draw is
unbiased.  ``apply`` uses the gather convention: out[i] = items[mapping[i]],
so ``mapping`` itself is the permuted identity list and an item at position
p moves to position invert(p).

Round counts use the natural logarithm throughout, with a ceiling because
rounds are integral (minimum one round).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import Indivisible, NotAProbabilityVector, SizeMismatch

CASCADE_LAYERED = "cascade-layered"
CASCADE_REBUILD = "cascade-rebuild"
PARALLEL_LAYERED = "parallel-layered"
PARALLEL_REBUILD = "parallel-rebuild"
DESIGNS = (CASCADE_LAYERED, CASCADE_REBUILD, PARALLEL_LAYERED, PARALLEL_REBUILD)

LAYERED_DESIGNS = (CASCADE_LAYERED, PARALLEL_LAYERED)
REBUILD_DESIGNS = (CASCADE_REBUILD, PARALLEL_REBUILD)
PARALLEL_DESIGNS = (PARALLEL_LAYERED, PARALLEL_REBUILD)


class SeedStream:
    """Deterministic byte stream: AES-CTR keystream under a seed key."""

    def __init__(self, seed: bytes):
        if len(seed) not in (16, 32):
            raise SizeMismatch("permutation seed must be 128 or 256 bits")
        self._enc = Cipher(algorithms.AES(seed), modes.CTR(bytes(16))).encryptor()
        self._buf = b""
        self._pos = 0

    def take(self, count: int) -> bytes:
        if self._pos + count > len(self._buf):
            fresh = self._enc.update(bytes(max(1024, count)))
            self._buf = self._buf[self._pos:] + fresh
            self._pos = 0
        out = self._buf[self._pos: self._pos + count]
        self._pos += count
        return out

    def below(self, bound: int) -> int:
        """Unbiased uniform draw in [0, bound) by rejection sampling."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        if bound == 1:
            return 0
        nbytes = (bound.bit_length() + 7) // 8
        cap = (256 ** nbytes // bound) * bound
        while True:
            value = int.from_bytes(self.take(nbytes), "big")
            if value < cap:
                return value % bound


@dataclass(frozen=True)
class Permutation:
    """Bijection on [0, n); regenerable exactly from its seed."""

    mapping: tuple
    seed: bytes | None = None

    @property
    def n(self) -> int:
        return len(self.mapping)

    def apply(self, items):
        if len(items) != self.n:
            raise SizeMismatch(f"{len(items)} items for a {self.n}-permutation")
        m = self.mapping
        return [items[m[i]] for i in range(self.n)]

    def invert(self) -> "Permutation":
        inv = [0] * self.n
        for i, src in enumerate(self.mapping):
            inv[src] = i
        return Permutation(mapping=tuple(inv))

    def destination(self, position: int) -> int:
        """New position of the item currently at ``position``."""
        return self.invert().mapping[position]


def permutation_from_seed(seed: bytes, n: int) -> Permutation:
    """Fisher-Yates over [0, n) driven by the seed keystream."""
    if n < 1:
        raise SizeMismatch("n must be >= 1")
    stream = SeedStream(seed)
    items = list(range(n))
    for i in range(n - 1, 0, -1):
        j = stream.below(i + 1)
        items[i], items[j] = items[j], items[i]
    return Permutation(mapping=tuple(items), seed=seed)


def identity_permutation(n: int) -> Permutation:
    return Permutation(mapping=tuple(range(n)))


def compose(outer: Permutation, inner: Permutation) -> Permutation:
    """compose(q, p).apply(x) == q.apply(p.apply(x))"""
    if outer.n != inner.n:
        raise SizeMismatch("size mismatch in composition")
    return Permutation(mapping=tuple(inner.mapping[j] for j in outer.mapping))


@dataclass
class Allocation:
    """One mix's outgoing routing for a round of the stratified shuffle.

    ``outgoing[dest]`` lists the global slots this mix currently holds that
    move to ``dest``'s chunk, ordered by destination position;
    ``new_slots`` maps each held slot to its next-round global slot.
    """

    round: int
    epoch: int
    mix: int
    outgoing: dict = field(default_factory=dict)
    new_slots: dict = field(default_factory=dict)


def public_allocation(seed_pub: bytes | Permutation, n: int, m: int, idx: int,
                      round: int = 0, epoch: int = 0) -> Allocation:
    """Record allocation for one mix at one round.

    The permuted index list is cut into m chunks of n/m; chunk i holds the
    current slots whose records move to mix i.  Mix ``idx`` keeps only the
    entries it currently holds, those in [idx*n/m, (idx+1)*n/m).
    """
    if n % m != 0:
        raise Indivisible(f"m={m} does not divide n={n}")
    if not 0 <= idx < m:
        raise ValueError("mix index out of range")
    perm = seed_pub if isinstance(seed_pub, Permutation) else permutation_from_seed(seed_pub, n)
    chunk = n // m
    lo, hi = idx * chunk, (idx + 1) * chunk
    alloc = Allocation(round=round, epoch=epoch, mix=idx,
                       outgoing={i: [] for i in range(m)})
    for pos, slot in enumerate(perm.mapping):
        if lo <= slot < hi:
            dest = pos // chunk
            alloc.outgoing[dest].append(slot)
            alloc.new_slots[slot] = pos
    return alloc


def round_count(design: str, n: int, s: int | None = None, m: int = 1) -> int:
    """Rounds per permutation phase.

    parallel-layered  ceil((m/2) ln(n/s)),  parallel-rebuild  ceil(2m ln n);
    cascade designs process in m sequential hops, so m is returned.
    """
    if design not in DESIGNS:
        raise ValueError(f"unknown design {design!r}")
    if design in (CASCADE_LAYERED, CASCADE_REBUILD):
        return m
    if design == PARALLEL_LAYERED:
        if s is None or not 1 <= s < n:
            raise ValueError("parallel-layered needs 1 <= s < n")
        return max(1, math.ceil((m / 2) * math.log(n / s)))
    return max(1, math.ceil(2 * m * math.log(n)))


def krts_bound(n: int, k: int) -> float:
    """Upper bound on the expected rounds for a k-transposition shuffle of n
    cards to mix: (2n/k) ln n."""
    return (2 * n / k) * math.log(n)


def krts_simulate(n: int, k: int, rng) -> int:
    """Stopping time of the marking process: each round picks k distinct
    positions, transposes them pairwise on coin tosses and marks them;
    returns the first round at which all n cards are marked."""
    if k % 2 != 0 or not 2 <= k <= n:
        raise ValueError("k must be even and 2 <= k <= n")
    marked = [False] * n
    remaining = n
    deck = list(range(n))
    rounds = 0
    while remaining > 0:
        rounds += 1
        picks = rng.sample(range(n), k)
        for a, b in zip(picks[0::2], picks[1::2]):
            if rng.getrandbits(1):
                deck[a], deck[b] = deck[b], deck[a]
        for pos in picks:
            if not marked[pos]:
                marked[pos] = True
                remaining -= 1
    return rounds


def merge_bound(n: int, s: int, k: int = 1) -> float:
    """Rounds to merge two indistinguishable sets of sizes n-s and s:
    (n/(2k)) ln(n/s); k=1 recovers the plain transposition bound."""
    if s == n:
        return 0.0
    return (n / (2 * k)) * math.log(n / s)


def phi_potential(weights) -> float:
    """Sum of squared deviations of a position distribution from uniform."""
    total = math.fsum(weights)
    if abs(total - 1.0) > 1e-9:
        raise NotAProbabilityVector(f"weights sum to {total}")
    n = len(weights)
    return math.fsum((w - 1.0 / n) ** 2 for w in weights)


def phi_expected(n: int, m: int, m_a: int, t: int) -> float:
    """Closed-form expected potential after t parallel rounds with m - m_a
    honest mixes over chunks of k = n/m: (1 - (m-m_a)(k-1)/(n-1))^t."""
    if n % m != 0:
        raise Indivisible(f"m={m} does not divide n={n}")
    if not 0 <= m_a < m:
        raise ValueError("need at least one honest mix")
    k = n // m
    return (1 - (m - m_a) * (k - 1) / (n - 1)) ** t
