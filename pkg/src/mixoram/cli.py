"""Operator entry point: run simulations, nodes, audits and statistics.

Configuration is line-oriented ``key=value`` (via --config) with explicit
command-line flags taking precedence.  Exit code 0 means every assertion of
the invoked experiment passed.  Set MIXORAM_LOG=debug|info|warning for
verbosity.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import random
import sys

from . import harness
from .client import Client, expected_layers
from .errors import MixOramError
from .group import get_group, keygen
from .harness import Scenario
from .mixnode import MixNode, StorageNode
from .shuffle import DESIGNS
from .storage import StorageServer, load_snapshot, save_snapshot
from .wire import TcpNet

log = logging.getLogger("mixoram")

_DEFAULTS = dict(design="cascade-layered", n=16, b=32, s=0, m=2, ma=0, d=0,
                 seed=0, kappa=128, group="p256", transport="inproc",
                 trials=1000, r_override=0, out="", listen="127.0.0.1:0",
                 peers="", role="", key_file="", k=2, rounds=0, evictions=1,
                 snapshot="")

_INT_KEYS = {"n", "b", "s", "m", "ma", "d", "seed", "kappa", "trials",
             "r_override", "k", "rounds", "evictions"}


def _read_config(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise MixOramError(f"bad config line: {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _merge(args: argparse.Namespace) -> dict:
    cfg = dict(_DEFAULTS)
    if getattr(args, "config", None):
        for key, value in _read_config(args.config).items():
            if key not in cfg:
                raise MixOramError(f"unknown config key {key!r}")
            cfg[key] = int(value) if key in _INT_KEYS else value
    for key in cfg:
        cli_val = getattr(args, key, None)
        if cli_val is not None:
            cfg[key] = cli_val
    return cfg


def _scenario(cfg: dict) -> Scenario:
    return Scenario(design=cfg["design"], n=cfg["n"], b=cfg["b"], s=cfg["s"],
                    m=cfg["m"], m_a=cfg["ma"], d=cfg["d"], seed=cfg["seed"],
                    kappa=cfg["kappa"], group=cfg["group"],
                    transport=cfg["transport"], trials=cfg["trials"],
                    r_override=cfg["r_override"] or None).resolve()


def _finish(report, out: str) -> int:
    if out:
        path = report.write(out)
        log.info("report written to %s", path)
    sys.stdout.write(report.summary_text())
    return 0 if report.passed else 1


# -- tcp deployment (all roles in one process, real sockets) -----------------


def _run_tcp_sim(sc: Scenario) -> harness.ExperimentReport:
    from dataclasses import asdict

    group = get_group(sc.group)
    rng = random.Random(sc.seed)
    privates, publics = [], []
    for _ in range(sc.m):
        x, y = keygen(group, rng)
        privates.append(x)
        publics.append(y)

    nets = {}
    node_ids = ["db", "client"] + [f"mix{i}" for i in range(sc.m)]
    for node in node_ids:
        nets[node] = TcpNet(node, ("127.0.0.1", 0), {})
    addresses = {node: net.address for node, net in nets.items()}
    for net in nets.values():
        net.peers.update(addresses)

    class _Fanout:
        """Client-side view of the network: send via own endpoint."""

        def __init__(self, net):
            self._net = net

        def send(self, dst, frame):
            self._net.send(dst, frame)

    try:
        client = Client(design=sc.design, n=sc.n, payload_bytes=sc.b, s=sc.s,
                        mix_pubkeys=publics, group=group,
                        net=_Fanout(nets["client"]), rng=rng, kappa=sc.kappa,
                        d=sc.d, r_override=sc.r_override,
                        mix_addresses=[addresses[f"mix{i}"] for i in range(sc.m)])
        server = StorageServer(n=sc.n, cell_bytes=client.cell_bytes, s=sc.s,
                               payload_bits=8 * sc.b)
        storage = StorageNode(server, _Fanout(nets["db"]))
        mixes = [MixNode(i, group, privates[i], _Fanout(nets[f"mix{i}"]),
                         address=addresses[f"mix{i}"]) for i in range(sc.m)]
        nets["db"].register("db", storage.handle)
        nets["client"].register("client", client.handle)
        for mix in mixes:
            nets[mix.node_id].register(mix.node_id, mix.handle)

        report = harness.ExperimentReport("eviction_e2e_tcp", asdict(sc))
        reference = []
        base = random.Random(sc.seed ^ 0xTCP if False else sc.seed + 7)
        for v in range(sc.n):
            reference.append(v.to_bytes(8, "big") + base.randbytes(sc.b - 8))
        client.preprocess(list(reference))
        for _ in range(sc.s):
            v = rng.randrange(sc.n)
            if rng.getrandbits(1):
                new = base.randbytes(sc.b)
                client.access("write", v, new)
                reference[v] = new
            else:
                client.access("read", v)
        client.evict()
        bad = sum(1 for v in range(sc.n) if client.peek(v) != reference[v])
        report.check("roundtrip", bad == 0, f"{bad} mismatching records")
        report.summary["transport"] = "tcp"
        return report
    finally:
        for net in nets.values():
            net.close()


# -- subcommands ----------------------------------------------------------------


def cmd_sim(args) -> int:
    cfg = _merge(args)
    sc = _scenario(cfg)
    if sc.transport == "tcp":
        report = _run_tcp_sim(sc)
    else:
        report = harness.run_eviction_e2e(sc, evictions=cfg["evictions"])
    return _finish(report, cfg["out"])


def cmd_audit(args) -> int:
    cfg = _merge(args)
    report = harness.audit_costs(_scenario(cfg))
    return _finish(report, cfg["out"])


def cmd_node(args) -> int:
    cfg = _merge(args)
    role = cfg["role"]
    if role not in ("storage", "mix"):
        raise MixOramError("node role must be storage or mix")
    host, port = cfg["listen"].rsplit(":", 1)
    peers = {}
    if cfg["peers"]:
        for part in cfg["peers"].split(","):
            name, addr = part.split("=", 1)
            phost, pport = addr.rsplit(":", 1)
            peers[name] = (phost, int(pport))
    group = get_group(cfg["group"])
    net = TcpNet("node", (host, int(port)), peers)
    net.node_id = role_id = "db" if role == "storage" else cfg.get("node_id", "mix0")
    if role == "storage":
        cell = cfg["b"] + 2 * max(1, math.ceil(math.ceil(math.log2(cfg["n"])) / 8)) \
            if "layered" in cfg["design"] else cfg["b"]
        server = StorageServer(n=cfg["n"], cell_bytes=cell,
                               s=cfg["s"] or math.ceil(math.sqrt(cfg["n"])),
                               payload_bits=8 * cfg["b"])
        if cfg["snapshot"] and os.path.exists(cfg["snapshot"]):
            server = load_snapshot(cfg["snapshot"])
        node = StorageNode(server, net)
    else:
        if not cfg["key_file"]:
            raise MixOramError("a mix node needs --key-file (hex private scalar)")
        with open(cfg["key_file"]) as fh:
            private = int(fh.read().strip(), 16)
        index = int(role_id[3:]) if role_id.startswith("mix") else 0
        node = MixNode(index, group, private, net, address=net.address)
    net.register(role_id, node.handle)
    log.info("%s node listening on %s:%s", role, *net.address)
    try:
        import time
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        return 0
    finally:
        if role == "storage" and cfg["snapshot"]:
            save_snapshot(node.server, cfg["snapshot"])
        net.close()


def cmd_stats(args) -> int:
    cfg = _merge(args)
    kind = args.kind
    out = cfg["out"]
    if kind == "phi":
        sc = _scenario(cfg)
        return _finish(harness.run_phi_experiment(
            sc, trials=cfg["trials"]), out)
    if kind == "krts":
        return _finish(harness.run_krts_experiment(
            cfg["n"], cfg["k"], cfg["trials"], seed=cfg["seed"]), out)
    if kind == "merge":
        s = cfg["s"] or 2
        rounds = cfg["rounds"] or harness.merge_rounds_criterion(cfg["n"], s)
        return _finish(harness.run_merge_experiment(
            cfg["n"], s, rounds, cfg["trials"], seed=cfg["seed"]), out)
    if kind == "coupon":
        n, s, d = cfg["n"], cfg["s"] or 1, max(1, cfg["d"])
        e_all, e_per = expected_layers(n, s, d, 1)
        sys.stdout.write(f"E_all={e_all:.1f}\nE_per_round_bound={e_per:.2f}\n")
        if n <= 4096 and cfg["trials"]:
            report = harness.run_coupon_experiment(
                n, s, d, histories=cfg["trials"], seed=cfg["seed"])
            return _finish(report, out)
        return 0
    raise MixOramError(f"unknown stats kind {kind!r}")


def cmd_reinit(args) -> int:
    cfg = _merge(args)
    sc = _scenario(cfg)
    dep = harness.build_deployment(sc)
    payloads = [dep.payload(v) for v in range(sc.n)]
    dep.client.preprocess(list(payloads))
    for _ in range(min(sc.s, 4)):
        dep.client.access("read", dep.rng.randrange(sc.n))
    dep.client.evict()
    before = dep.client.epoch
    dep.client.reinitialize()
    ok = dep.client.epoch == 0 and not dep.client.history \
        and all(dep.client.peek(v) == payloads[v] for v in range(sc.n))
    sys.stdout.write(f"reinitialized: epochs {before} -> {dep.client.epoch}, "
                     f"history cleared, readback {'ok' if ok else 'BROKEN'}\n")
    return 0 if ok else 1


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixoram",
        description="delegated ORAM eviction simulator and statistics harness")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--design", choices=DESIGNS)
        p.add_argument("--n", type=int)
        p.add_argument("--b", type=int, help="record payload bytes")
        p.add_argument("--s", type=int, help="cache slots (0 = ceil sqrt n)")
        p.add_argument("--m", type=int, help="number of mixes")
        p.add_argument("--ma", type=int, help="corrupted mixes")
        p.add_argument("--d", type=int, help="extra per-access refreshes")
        p.add_argument("--r-override", dest="r_override", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--kappa", type=int, choices=(128, 256))
        p.add_argument("--group", choices=("p256", "toy"))
        p.add_argument("--transport", choices=("inproc", "tcp"))
        p.add_argument("--trials", type=int)
        p.add_argument("--out", help="directory for CSV reports")

    p_sim = sub.add_parser("sim", help="run one end-to-end eviction scenario")
    common(p_sim)
    p_sim.add_argument("--evictions", type=int)
    p_sim.set_defaults(func=cmd_sim)

    p_audit = sub.add_parser("audit", help="check cost counters against the closed forms")
    common(p_audit)
    p_audit.set_defaults(func=cmd_audit)

    p_node = sub.add_parser("node", help="serve one role over TCP")
    common(p_node)
    p_node.add_argument("--role", choices=("storage", "mix"))
    p_node.add_argument("--listen")
    p_node.add_argument("--peers", help="name=host:port,...")
    p_node.add_argument("--key-file", dest="key_file")
    p_node.add_argument("--snapshot", help="storage snapshot file")
    p_node.set_defaults(func=cmd_node)

    p_stats = sub.add_parser("stats", help="run a statistics experiment")
    p_stats.add_argument("kind", choices=("phi", "krts", "merge", "coupon"))
    common(p_stats)
    p_stats.add_argument("--k", type=int, help="cards per round (krts)")
    p_stats.add_argument("--rounds", type=int, help="merge rounds")
    p_stats.set_defaults(func=cmd_stats)

    p_reinit = sub.add_parser("reinit", help="database reset clearing layered history")
    common(p_reinit)
    p_reinit.set_defaults(func=cmd_reinit)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("MIXORAM_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MixOramError as exc:
        parser.exit(2, f"error: {exc}\n")


if __name__ == "__main__":
    sys.exit(main())
