"""Deterministic multi-node simulation and the statistics experiments.

Everything here is driven by a :class:`Scenario` plus its seed: protocol
randomness comes from one ``random.Random`` stream and Monte Carlo
experiments from ``numpy`` generators derived per trial block, so a report
is regenerable bit for bit.  The transcript observer sits on the loopback
transport and sees every frame, which gives the cost audit its
communication totals, the privacy probes their adversary view, and every
end-to-end run a plaintext-exposure tripwire (each payload embeds a fixed
sentinel pattern that must never appear on the wire).
"""

from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import stats

from . import wire
from .client import Client, expected_layers
from .errors import ConfigMismatch
from .group import get_group, keygen
from .mixnode import MixNode, StorageNode
from .shuffle import (CASCADE_LAYERED, CASCADE_REBUILD, DESIGNS,
                      PARALLEL_LAYERED, PARALLEL_REBUILD, krts_bound,
                      merge_bound, phi_expected, round_count)
from .storage import StorageServer
from .wire import LoopbackNet

SENTINEL = b"PLAINTEXT-EXPOSD"  # 16 bytes, embedded in every test payload


@dataclass
class Scenario:
    design: str = CASCADE_LAYERED
    n: int = 16
    b: int = 32                  # payload bytes per record
    s: int = 0                   # 0 resolves to ceil(sqrt(n))
    m: int = 2
    m_a: int = 0                 # corrupted mixes (honest-but-curious)
    d: int = 0                   # extra per-access refreshes
    seed: int = 0
    kappa: int = 128
    group: str = "p256"
    transport: str = "inproc"
    trials: int = 1000
    r_override: int | None = None

    def resolve(self) -> "Scenario":
        if self.design not in DESIGNS:
            raise ConfigMismatch(f"unknown design {self.design!r}")
        if not 0 <= self.m_a < self.m:
            raise ConfigMismatch("need m_a < m: at least one honest mix")
        out = Scenario(**asdict(self))
        if out.s == 0:
            out.s = math.ceil(math.sqrt(out.n))
        return out

    def rounds(self) -> int:
        return self.r_override or round_count(self.design, self.n, self.s, self.m)


class TranscriptObserver:
    """Frame tap: shapes for indistinguishability, byte totals for costs,
    sentinel scanning for the no-plaintext-exposure invariant."""

    def __init__(self, sentinel: bytes | None = SENTINEL):
        self.frames: list[tuple] = []
        self.sentinel = sentinel
        self.exposures: list[tuple] = []
        self.eviction_record_bytes = 0

    def __call__(self, src: str, dst: str, frame: wire.Frame):
        self.frames.append((src, dst, frame.ftype, frame.epoch, frame.phase,
                            frame.round, len(frame.payload)))
        if frame.ftype in (wire.T_RECORD_BATCH, wire.T_DB_STORE) \
                and frame.phase in (wire.W_PHASE_UNWRAP, wire.W_PHASE_ED,
                                    wire.W_PHASE_WRAP):
            records = wire.decode_batch(frame.payload)
            self.eviction_record_bytes += sum(len(c) for _, c in records)
        if self.sentinel and src != "client" and dst != "client" \
                and self.sentinel in frame.payload:
            self.exposures.append((src, dst, frame.ftype, frame.phase, frame.round))

    def shape(self) -> tuple:
        return tuple(self.frames)


@dataclass
class EvictionTranscript:
    """Per-epoch audit record: message log, per-mix counters, byte totals."""

    epoch: int
    frames: tuple
    mix_counters: dict
    record_bytes: int


@dataclass
class ExperimentReport:
    name: str
    scenario: dict
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    verdicts: list = field(default_factory=list)   # (check, ok, detail)

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.verdicts)

    def check(self, name: str, ok: bool, detail: str = ""):
        self.verdicts.append((name, bool(ok), detail))

    def csv_text(self) -> str:
        if not self.rows:
            return ""
        cols = list(self.rows[0])
        lines = [",".join(cols)]
        for row in self.rows:
            lines.append(",".join(_fmt(row[c]) for c in cols))
        return "\n".join(lines) + "\n"

    def summary_text(self) -> str:
        lines = [f"experiment={self.name}"]
        for k in sorted(self.scenario):
            lines.append(f"scenario.{k}={_fmt(self.scenario[k])}")
        for k in sorted(self.summary):
            lines.append(f"{k}={_fmt(self.summary[k])}")
        for name, ok, detail in self.verdicts:
            lines.append(f"verdict.{name}={'PASS' if ok else 'FAIL'}"
                         + (f" ({detail})" if detail else ""))
        lines.append(f"result={'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"

    def write(self, outdir: str) -> str:
        import os
        sc = self.scenario
        base = f"{sc.get('design', self.name)}_{sc.get('n', 0)}_{sc.get('m', 0)}_{sc.get('seed', 0)}"
        path = os.path.join(outdir, base + ".csv")
        os.makedirs(outdir, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(self.csv_text())
        with open(os.path.join(outdir, base + ".summary.txt"), "w") as fh:
            fh.write(self.summary_text())
        return path


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".12g")
    return str(v)


# ---------------------------------------------------------------------------
# deployments


@dataclass
class Deployment:
    scenario: Scenario
    net: LoopbackNet
    observer: TranscriptObserver
    server: StorageServer
    storage: StorageNode
    mixes: list
    client: Client
    rng: random.Random

    def payload(self, v: int) -> bytes:
        """Deterministic sentinel-carrying payload for record v."""
        body = v.to_bytes(8, "big") + SENTINEL
        if len(body) >= self.scenario.b:
            return body[: self.scenario.b]
        filler = self.rng_for(v).randbytes(self.scenario.b - len(body))
        return body + filler

    def rng_for(self, v: int) -> random.Random:
        return random.Random((self.scenario.seed << 20) ^ 0x5EED ^ v)

    def mix_counter_totals(self) -> dict:
        total = {"encryptions": 0, "perm_elements": 0, "bytes_sent": 0}
        for mix in self.mixes:
            for k, v in mix.counters.snapshot().items():
                total[k] += v
        return total

    def transcript(self) -> EvictionTranscript:
        return EvictionTranscript(
            epoch=self.client.epoch,
            frames=self.observer.shape(),
            mix_counters={m.node_id: m.counters.snapshot() for m in self.mixes},
            record_bytes=self.observer.eviction_record_bytes)


def build_deployment(sc: Scenario, *, skip_client_layer: bool = False,
                     skip_ed: bool = False) -> Deployment:
    sc = sc.resolve()
    if sc.transport != "inproc":
        raise ConfigMismatch("build_deployment drives the in-process transport; "
                             "use the cli node role for tcp")
    group = get_group(sc.group)
    rng = random.Random(sc.seed)
    net = LoopbackNet()
    observer = TranscriptObserver()
    net.observers.append(observer)

    privates, publics = [], []
    for _ in range(sc.m):
        x, y = keygen(group, rng)
        privates.append(x)
        publics.append(y)

    client = Client(design=sc.design, n=sc.n, payload_bytes=sc.b, s=sc.s,
                    mix_pubkeys=publics, group=group, net=net, rng=rng,
                    kappa=sc.kappa, d=sc.d, r_override=sc.r_override,
                    skip_client_layer=skip_client_layer)
    server = StorageServer(n=sc.n, cell_bytes=client.cell_bytes, s=sc.s,
                           payload_bits=8 * sc.b)
    storage = StorageNode(server, net)
    mixes = [MixNode(i, group, privates[i], net, skip_ed=skip_ed)
             for i in range(sc.m)]

    net.register("db", storage.handle)
    net.register("client", client.handle)
    for mix in mixes:
        net.register(mix.node_id, mix.handle)
    return Deployment(scenario=sc, net=net, observer=observer, server=server,
                      storage=storage, mixes=mixes, client=client, rng=rng)


def cost_formulas(design: str, n: int, m: int, r: int, cell: int) -> dict:
    """Closed-form eviction costs (totals over all mixes), with the integral
    round count substituted for the parallel designs."""
    if design == CASCADE_LAYERED:
        return {"comm_bytes": (m + 1) * n * cell, "encryptions": m * n,
                "perm_elements": m * n}
    if design == CASCADE_REBUILD:
        return {"comm_bytes": 3 * m * n * cell, "encryptions": 4 * m * n,
                "perm_elements": 2 * m * n}
    if design == PARALLEL_LAYERED:
        return {"comm_bytes": (r + 2) * n * cell, "encryptions": r * n,
                "perm_elements": 2 * r * n}
    return {"comm_bytes": (2 * r + m + 2) * n * cell,
            "encryptions": 2 * r * n + 2 * m * n, "perm_elements": 4 * r * n}


def cost_formulas_real(design: str, n: int, s: int, m: int, cell: int) -> dict:
    """The same rows with the real-valued round expressions (per-mix rates
    times m), for reporting ceiling slack on the parallel designs."""
    if design == PARALLEL_LAYERED:
        r = (m / 2) * math.log(n / s)
        return {"comm_bytes": (r + 2) * n * cell, "encryptions": (n / 2) * math.log(n / s) * m,
                "perm_elements": m * math.log(n / s) * (n / m) * m}
    if design == PARALLEL_REBUILD:
        r = 2 * m * math.log(n)
        return {"comm_bytes": (2 * r + m + 2) * n * cell,
                "encryptions": n * (4 * math.log(n) + 2),
                "perm_elements": 8 * m * math.log(n) * (n / m) * m}
    return cost_formulas(design, n, m, m, cell)


# ---------------------------------------------------------------------------
# end-to-end protocol experiments


def run_eviction_e2e(sc: Scenario, evictions: int = 1) -> ExperimentReport:
    """preprocess -> s mixed accesses -> eviction (repeated) -> full readback."""
    sc = sc.resolve()
    report = ExperimentReport("eviction_e2e", asdict(sc))
    t0 = time.perf_counter()
    dep = build_deployment(sc)
    reference = [dep.payload(v) for v in range(sc.n)]
    dep.client.preprocess(list(reference))

    for _ in range(evictions):
        for _ in range(sc.s):
            v = dep.rng.randrange(sc.n)
            if dep.rng.getrandbits(1):
                new = dep.payload(dep.rng.randrange(1 << 30))[: sc.b]
                dep.client.access("write", v, new)
                reference[v] = new
            else:
                got = dep.client.access("read", v)
                if got != reference[v]:
                    report.check("read_matches", False, f"v={v}")
        dep.client.evict()

    mismatches = sum(1 for v in range(sc.n) if dep.client.peek(v) != reference[v])
    elapsed = time.perf_counter() - t0
    report.check("roundtrip", mismatches == 0, f"{mismatches} mismatching records")
    report.check("sentinel", not dep.observer.exposures,
                 f"{len(dep.observer.exposures)} plaintext exposures")

    if evictions == 1:
        want = cost_formulas(sc.design, sc.n, sc.m, sc.rounds(), dep.client.cell_bytes)
        got = dep.mix_counter_totals()
        report.check("cost_comm", dep.observer.eviction_record_bytes == want["comm_bytes"],
                     f"measured={dep.observer.eviction_record_bytes} formula={want['comm_bytes']}")
        report.check("cost_enc", got["encryptions"] == want["encryptions"],
                     f"measured={got['encryptions']} formula={want['encryptions']}")
        report.check("cost_perm", got["perm_elements"] == want["perm_elements"],
                     f"measured={got['perm_elements']} formula={want['perm_elements']}")
    report.summary.update(elapsed_s=elapsed, r=sc.rounds(),
                          cell_bytes=dep.client.cell_bytes,
                          evictions=evictions)
    report.rows.append({"design": sc.design, "n": sc.n, "m": sc.m, "s": sc.s,
                        "seed": sc.seed, "elapsed_s": elapsed,
                        "result": "PASS" if report.passed else "FAIL"})
    return report


def audit_costs(sc: Scenario) -> ExperimentReport:
    """Instrument one full eviction and compare every cost counter with the
    closed forms; parallel rows also report their real-valued slack."""
    sc = sc.resolve()
    report = ExperimentReport("audit_costs", asdict(sc))
    dep = build_deployment(sc)
    dep.client.preprocess([dep.payload(v) for v in range(sc.n)])
    dep.client.evict()

    r = sc.rounds()
    cell = dep.client.cell_bytes
    want = cost_formulas(sc.design, sc.n, sc.m, r, cell)
    got = dep.mix_counter_totals()
    got["comm_bytes"] = dep.observer.eviction_record_bytes
    for key in ("comm_bytes", "encryptions", "perm_elements"):
        report.check(key, got[key] == want[key],
                     f"measured={got[key]} formula={want[key]}")
    real = cost_formulas_real(sc.design, sc.n, sc.s, sc.m, cell)
    for key in ("encryptions", "perm_elements"):
        slack = got[key] - real[key]
        report.summary[f"slack_{key}"] = slack
        # one ceiling step changes at most one round of work
        per_round = {"encryptions": sc.n, "perm_elements": 2 * sc.n}[key]
        report.check(f"slack_{key}_bounded",
                     sc.design in (CASCADE_LAYERED, CASCADE_REBUILD)
                     or abs(slack) <= per_round,
                     f"|{slack:.1f}| vs one round = {per_round}")
    report.summary.update(r=r, cell_bytes=cell, **{f"measured_{k}": v for k, v in got.items()})
    report.rows.append({"design": sc.design, "n": sc.n, "m": sc.m, "seed": sc.seed,
                        **{f"measured_{k}": v for k, v in got.items()},
                        **{f"formula_{k}": v for k, v in want.items()}})
    return report


def run_indistinguishability_probe(sc: Scenario, seq_a: list, seq_b: list) -> ExperimentReport:
    """Run two query sequences on fresh identical deployments and compare
    the adversary-visible transcript shapes."""
    sc = sc.resolve()
    report = ExperimentReport("indistinguishability", asdict(sc))
    if len(seq_a) != len(seq_b):
        report.check("comparable", False,
                     f"sequence lengths differ: {len(seq_a)} vs {len(seq_b)}")
        return report
    shapes = []
    for seq in (seq_a, seq_b):
        dep = build_deployment(sc)
        dep.client.preprocess([dep.payload(v) for v in range(sc.n)])
        start = len(dep.observer.frames)
        for op, v, data in seq:
            dep.client.access(op, v, data)
        dep.client.evict()
        frame_shape = tuple((src, dst, ftype, phase, rnd, size)
                            for src, dst, ftype, _, phase, rnd, size
                            in dep.observer.frames[start:])
        log_shape = tuple((e.op, e.array, e.actor) for e in dep.server.export_view())
        shapes.append((frame_shape, log_shape))
    report.check("frame_shape_equal", shapes[0][0] == shapes[1][0],
                 f"{len(shapes[0][0])} frames")
    report.check("storage_shape_equal", shapes[0][1] == shapes[1][1],
                 f"{len(shapes[0][1])} storage ops")
    report.summary["frames"] = len(shapes[0][0])
    return report


# ---------------------------------------------------------------------------
# statistics experiments (vectorised models of the shuffle layer)


def _batch_perms(rng: np.random.Generator, trials: int, n: int) -> np.ndarray:
    return np.argsort(rng.random((trials, n)), axis=1)


def run_phi_experiment(sc: Scenario, ts=(5, 10, 20), trials: int | None = None,
                       tolerance: float = 0.10) -> ExperimentReport:
    """Monte Carlo of the adversary's posterior for one marked record under
    a stratified shuffle with m_a corrupted mixes, against the closed form.

    Checks the relative error of E[phi(t)] at each requested t and the
    1/n^2 threshold at t = ceil(2 (m/(m-m_a)) ln n).
    """
    sc = sc.resolve()
    trials = trials or sc.trials
    n, m, m_a = sc.n, sc.m, sc.m_a
    k = n // m
    report = ExperimentReport("phi_potential", asdict(sc))
    rng = np.random.default_rng(sc.seed)
    t_threshold = math.ceil(2 * (m / (m - m_a)) * math.log(n))
    t_max = max(max(ts), t_threshold)

    w = np.zeros((trials, n))
    w[:, 0] = 1.0
    honest = list(range(m_a, m))
    empirical = {}
    for t in range(1, t_max + 1):
        perm = _batch_perms(rng, trials, n)
        moved = np.empty_like(w)
        np.put_along_axis(moved, perm, w, axis=1)
        w = moved
        for i in honest:
            seg = w[:, i * k:(i + 1) * k]
            seg[:] = seg.mean(axis=1, keepdims=True)
        if t in ts or t == t_threshold:
            empirical[t] = float(((w - 1.0 / n) ** 2).sum(axis=1).mean())

    for t in ts:
        form = phi_expected(n, m, m_a, t)
        err = abs(empirical[t] - form) / form
        report.check(f"phi_t{t}", err <= tolerance,
                     f"empirical={empirical[t]:.6g} form={form:.6g} rel_err={err:.3f}")
        report.rows.append({"t": t, "empirical": empirical[t], "closed_form": form,
                            "rel_err": err})
    thr = empirical[t_threshold]
    report.check("phi_threshold", thr <= 1.0 / n ** 2,
                 f"E[phi({t_threshold})]={thr:.6g} vs 1/n^2={1.0 / n ** 2:.6g}")
    report.summary.update(t_threshold=t_threshold, phi_at_threshold=thr,
                          trials=trials)
    return report


def run_krts_experiment(n: int, k: int, trials: int, seed: int = 0) -> ExperimentReport:
    """Vectorised marking process for the k-transposition shuffle: mean
    stopping time against the (2n/k) ln n bound.  The pairwise coin-toss
    swaps do not influence the stopping time, which only watches marks."""
    report = ExperimentReport("krts", {"n": n, "k": k, "trials": trials, "seed": seed})
    rng = np.random.default_rng(seed)
    marked = np.zeros((trials, n), dtype=bool)
    stop = np.zeros(trials, dtype=np.int64)
    alive = np.arange(trials)
    t = 0
    while alive.size:
        t += 1
        picks = np.argpartition(rng.random((alive.size, n)), k - 1, axis=1)[:, :k]
        np.put_along_axis(marked[alive], picks, True, axis=1)
        done = marked[alive].all(axis=1)
        stop[alive[done]] = t
        alive = alive[~done]
    mean = float(stop.mean())
    bound = krts_bound(n, k)
    se = float(stop.std(ddof=1) / math.sqrt(trials))
    report.check("mean_below_bound", mean < bound,
                 f"mean={mean:.2f} (se={se:.3f}) bound={bound:.2f}")
    report.summary.update(mean=mean, bound=bound, se=se)
    report.rows.append({"n": n, "k": k, "trials": trials, "mean": mean, "bound": bound})
    return report


def _arrangement_index(positions: np.ndarray, n: int) -> np.ndarray:
    """Rank of a sorted s-subset among all C(n, s) subsets (combinadic)."""
    _, s = positions.shape
    pos = np.sort(positions, axis=1)
    comb = np.array([[math.comb(p, j + 1) for j in range(s)] for p in range(n)],
                    dtype=np.int64)
    idx = np.zeros(len(positions), dtype=np.int64)
    for j in range(s):
        idx += comb[pos[:, j], j]
    return idx


def run_merge_experiment(n: int, s: int, rounds: int, trials: int,
                         seed: int = 0, alpha: float = 0.001) -> ExperimentReport:
    """2-transposition merge of s marked cells among n from a fixed start;
    chi-squared uniformity over the C(n, s) arrangements after ``rounds``."""
    report = ExperimentReport("oblivious_merge",
                              {"n": n, "s": s, "rounds": rounds, "trials": trials,
                               "seed": seed})
    rng = np.random.default_rng(seed)
    state = np.zeros((trials, n), dtype=bool)
    state[:, :s] = True
    rows = np.arange(trials)
    for _ in range(rounds):
        a = rng.integers(0, n, size=trials)
        b = rng.integers(0, n - 1, size=trials)
        b += (b >= a)
        do = rng.integers(0, 2, size=trials).astype(bool)
        va, vb = state[rows, a].copy(), state[rows, b].copy()
        state[rows[do], a[do]] = vb[do]
        state[rows[do], b[do]] = va[do]
    positions = np.nonzero(state)[1].reshape(trials, s)
    bins = math.comb(n, s)
    counts = np.bincount(_arrangement_index(positions, n), minlength=bins)
    chi2, p = stats.chisquare(counts)
    report.check("uniform", p > alpha, f"chi2={chi2:.1f} p={p:.3g} bins={bins}")
    report.summary.update(chi2=float(chi2), p_value=float(p), bins=bins)
    report.rows.append({"n": n, "s": s, "rounds": rounds, "trials": trials,
                        "chi2": float(chi2), "p": float(p)})
    return report


def run_miss_experiment(sc: Scenario, trials: int | None = None) -> ExperimentReport:
    """Fraction of records that never visit the designated honest mix over
    one eviction's rounds, against e^{-r/m} (the design's negligible-miss
    bound) and the exact per-round form (1 - 1/m)^r.

    A record is processed at its round-0 chunk and then at the chunk each
    public permutation assigns it, r arrivals in total; local shuffles never
    move a record between chunks.
    """
    sc = sc.resolve()
    trials = trials or sc.trials
    n, m = sc.n, sc.m
    r = sc.rounds()
    k = n // m
    honest = m - 1
    report = ExperimentReport("honest_miss", asdict(sc))
    rng = np.random.default_rng(sc.seed)
    fractions = np.empty(trials)
    block = max(1, 10 ** 6 // n)
    done = 0
    while done < trials:
        cnt = min(block, trials - done)
        pos = np.tile(np.arange(n), (cnt, 1))
        visited = (pos // k) == honest
        for _ in range(r - 1):
            dest = _batch_perms(rng, cnt, n)
            pos = np.take_along_axis(dest, pos, axis=1)
            visited |= (pos // k) == honest
        fractions[done:done + cnt] = 1.0 - visited.mean(axis=1)
        done += cnt
    mean = float(fractions.mean())
    se = float(fractions.std(ddof=1) / math.sqrt(trials)) or 1e-12
    bound = math.exp(-r / m)
    exact = (1 - 1 / m) ** r
    report.check("below_bound", mean <= bound + 3 * se,
                 f"empirical={mean:.5f} bound={bound:.5f} 3se={3 * se:.5f}")
    report.check("matches_exact", abs(mean - exact) <= 3 * se,
                 f"empirical={mean:.5f} exact={exact:.5f} 3se={3 * se:.5f}")
    report.summary.update(mean=mean, bound=bound, exact=exact, se=se, r=r)
    report.rows.append({"n": n, "m": m, "r": r, "mean": mean, "bound": bound,
                        "exact": exact})
    return report


def run_coupon_experiment(n: int, s: int, d: int = 1, histories: int = 10 ** 4,
                          seed: int = 0, tolerance: float = 0.15) -> ExperimentReport:
    """Access/eviction histories with s*d uniform distinct refreshes per
    epoch: epochs until every record was fetched once, against the
    coupon-collector form, plus the mean peeled-epoch count per access."""
    report = ExperimentReport("coupon_layers",
                              {"n": n, "s": s, "d": d, "histories": histories,
                               "seed": seed})
    rng = np.random.default_rng(seed)
    per_epoch = s * d
    fetched = np.zeros((histories, n), dtype=bool)
    cover = np.zeros(histories, dtype=np.int64)
    last_refresh = np.zeros((histories, n), dtype=np.int64)
    peel_sum = 0.0
    peel_count = 0
    alive = np.arange(histories)
    epoch = 0
    max_epochs = int(40 * (n / per_epoch) * (math.log(n) + 1)) + 50
    while alive.size and epoch < max_epochs:
        epoch += 1
        picks = np.argpartition(rng.random((histories, n)), per_epoch - 1,
                                axis=1)[:, :per_epoch]
        rows = np.arange(histories)[:, None]
        peel_sum += float((epoch - last_refresh[rows, picks]).sum())
        peel_count += picks.size
        last_refresh[rows, picks] = epoch
        np.put_along_axis(fetched, picks, True, axis=1)
        done = fetched[alive].all(axis=1)
        cover[alive[done]] = epoch
        alive = alive[~done]
    if alive.size:
        cover[alive] = max_epochs
    e_all, e_per = expected_layers(n, s, d, 1)
    mean_cover = float(cover.mean())
    err = abs(mean_cover - e_all) / e_all
    mean_peel = peel_sum / peel_count
    report.check("coverage_vs_formula", err <= tolerance,
                 f"mean={mean_cover:.2f} formula={e_all:.2f} rel_err={err:.3f}")
    report.check("peel_below_bound", mean_peel <= e_per,
                 f"mean_peeled={mean_peel:.2f} bound={e_per:.2f}")
    report.summary.update(mean_cover=mean_cover, e_all=e_all,
                          mean_peeled=mean_peel, e_per_bound=e_per)
    report.rows.append({"n": n, "s": s, "d": d, "histories": histories,
                        "mean_cover": mean_cover, "e_all": e_all,
                        "mean_peeled": mean_peel})
    return report


def run_uniformity_experiment(n: int = 12, s: int = 3, m: int = 4,
                              trials: int = 10 ** 5, seed: int = 0,
                              alpha: float = 0.001) -> ExperimentReport:
    """Final positions of the s accessed records after one parallel layered
    eviction (all mixes honest, fresh seeds per trial): chi-squared over the
    C(n, s) arrangement space and over the single-target slot."""
    report = ExperimentReport("final_uniformity",
                              {"n": n, "s": s, "m": m, "trials": trials, "seed": seed})
    r = round_count(PARALLEL_LAYERED, n, s, m)
    k = n // m
    rng = np.random.default_rng(seed)
    pos = np.tile(np.arange(s), (trials, 1))   # accessed records sit at slots 0..s-1
    rows = np.arange(trials)[:, None]
    for _ in range(r):
        local_dest = np.argsort(rng.random((trials, m, k)), axis=2)
        chunk = pos // k
        pos = chunk * k + local_dest[rows, chunk, pos % k]
        global_dest = _batch_perms(rng, trials, n)
        pos = np.take_along_axis(global_dest, pos, axis=1)
    bins = math.comb(n, s)
    counts = np.bincount(_arrangement_index(pos, n), minlength=bins)
    chi2, p = stats.chisquare(counts)
    report.check("arrangement_uniform", p > alpha,
                 f"chi2={chi2:.1f} p={p:.3g} bins={bins}")
    target_counts = np.bincount(pos[:, 0], minlength=n)
    chi2_t, p_t = stats.chisquare(target_counts)
    report.check("target_slot_uniform", p_t > alpha,
                 f"chi2={chi2_t:.1f} p={p_t:.3g} bins={n}")
    report.summary.update(rounds=r, p_arrangement=float(p), p_target=float(p_t))
    report.rows.append({"n": n, "s": s, "m": m, "rounds": r, "trials": trials,
                        "p_arrangement": float(p), "p_target": float(p_t)})
    return report


def merge_rounds_criterion(n: int, s: int) -> int:
    """Twice the merge bound, rounded up (the acceptance round budget)."""
    return math.ceil(2 * merge_bound(n, s, 1))
