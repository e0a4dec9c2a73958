"""Mix and storage state machines for the four eviction designs.

A :class:`MixNode` reacts to frames only: an INSTRUCTION bootstraps the
per-epoch key/seed schedule (all derivation happens up front, before any
records arrive), RECORD_BATCH frames drive the phase pipeline.  Cascade
designs pass the whole database mix to mix; parallel designs hold one
n/m chunk each and exchange records every round according to the public
allocation.  Storage is itself a node that serves DB_FETCH and DB_STORE.

Slot conventions: a record batch entry is (global_slot, cell).  Inside a
parallel round a mix only ever holds slots of one chunk; the local shuffle
keeps records inside the chunk and the public allocation then reassigns
global slots for the next round.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from . import cipher, wire
from .cipher import PHASE_ED, PHASE_WRAP
from .errors import BadInstruction, MissingBatch, PhaseOrderViolation, SizeMismatch
from .group import (GroupElement, agree, derive, element_from_bytes,
                    private_chain, public_chain)
from .shuffle import (CASCADE_LAYERED, CASCADE_REBUILD, DESIGNS,
                      PARALLEL_LAYERED, PARALLEL_REBUILD, Permutation,
                      permutation_from_seed, public_allocation)
from .storage import StorageServer


@dataclass(frozen=True)
class MixInstruction:
    """Eviction bootstrap message for one mix.

    alphas carries the private chain heads: one element for layered, (old,
    new) for rebuild.  betas, m_scalars and client_pub only appear for the
    parallel designs; rebuild carries an (old, new) pair of each.
    """

    design: str
    db: str
    epoch: int
    kappa: int
    n: int
    r: int
    mix_list: tuple
    alphas: tuple
    betas: tuple = ()
    m_scalars: tuple = ()
    client_pub: GroupElement | None = None

    def validate(self):
        if self.design not in DESIGNS:
            raise BadInstruction(f"unknown design {self.design!r}")
        if self.epoch < 1 or self.n < 1 or self.kappa not in (128, 256):
            raise BadInstruction("bad epoch, n or kappa")
        m = len(self.mix_list)
        if m < 1:
            raise BadInstruction("empty mix list")
        rebuild = self.design in (CASCADE_REBUILD, PARALLEL_REBUILD)
        parallel = self.design in (PARALLEL_LAYERED, PARALLEL_REBUILD)
        if len(self.alphas) != (2 if rebuild else 1):
            raise BadInstruction("wrong private element count")
        if parallel:
            if self.n % m != 0:
                raise BadInstruction("m must divide n")
            want = 2 if rebuild else 1
            if len(self.betas) != want or len(self.m_scalars) != want:
                raise BadInstruction("missing public allocation elements")
            if self.r < 1:
                raise BadInstruction("parallel designs need r >= 1")
            if rebuild and self.client_pub is None:
                raise BadInstruction("rebuild public chain needs the client element")
        else:
            if self.betas or self.m_scalars:
                raise BadInstruction("cascade instructions carry no public elements")
        for el in self.alphas + self.betas:
            if el.is_identity:
                raise BadInstruction("identity group element in instruction")


def encode_instruction(instr: MixInstruction) -> bytes:
    out = [struct.pack(">BHQHQ", DESIGNS.index(instr.design), instr.kappa,
                       instr.n, instr.r, instr.epoch)]
    wire.put_bytes(out, instr.db.encode())
    out.append(struct.pack(">B", len(instr.mix_list)))
    for host, port in instr.mix_list:
        wire.put_bytes(out, host.encode())
        out.append(struct.pack(">H", port))
    for group_of in (instr.alphas, instr.betas):
        out.append(struct.pack(">B", len(group_of)))
        for el in group_of:
            out.append(el.encode())
    out.append(struct.pack(">B", len(instr.m_scalars)))
    for sc in instr.m_scalars:
        out.append(sc.to_bytes(32, "big"))
    out.append(struct.pack(">B", 0 if instr.client_pub is None else 1))
    if instr.client_pub is not None:
        out.append(instr.client_pub.encode())
    return b"".join(out)


def decode_instruction(payload: bytes, group) -> MixInstruction:
    rd = wire._Reader(payload)
    design_i, kappa, n, r, epoch = struct.unpack(">BHQHQ", rd.take(21))
    if design_i >= len(DESIGNS):
        raise BadInstruction("unknown design code")
    db = rd.take_bytes().decode()
    (m,) = struct.unpack(">B", rd.take(1))
    mix_list = []
    for _ in range(m):
        host = rd.take_bytes().decode()
        (port,) = struct.unpack(">H", rd.take(2))
        mix_list.append((host, port))
    fields = []
    for _ in range(2):
        (count,) = struct.unpack(">B", rd.take(1))
        fields.append(tuple(element_from_bytes(group, rd.take(group.element_size))
                            for _ in range(count)))
    (count,) = struct.unpack(">B", rd.take(1))
    scalars = tuple(int.from_bytes(rd.take(32), "big") for _ in range(count))
    (has_pub,) = struct.unpack(">B", rd.take(1))
    client_pub = element_from_bytes(group, rd.take(group.element_size)) if has_pub else None
    rd.done()
    instr = MixInstruction(design=DESIGNS[design_i], db=db, epoch=epoch, kappa=kappa,
                           n=n, r=r, mix_list=tuple(mix_list), alphas=fields[0],
                           betas=fields[1], m_scalars=scalars, client_pub=client_pub)
    instr.validate()
    return instr


@dataclass
class CostCounters:
    encryptions: int = 0
    perm_elements: int = 0
    bytes_sent: int = 0

    def snapshot(self) -> dict:
        return {"encryptions": self.encryptions, "perm_elements": self.perm_elements,
                "bytes_sent": self.bytes_sent}


@dataclass
class MixState:
    """Per-epoch schedule and pipeline position of one mix."""

    design: str
    epoch: int
    n: int
    m: int
    r: int
    idx: int
    kappa: int
    db: str
    wrap: list = field(default_factory=list)      # DerivedSecrets per round (new keys)
    unwrap: list = field(default_factory=list)    # DerivedSecrets per round (old keys)
    ed_old_key: bytes | None = None
    ed_new_key: bytes | None = None
    pub_old: list = field(default_factory=list)   # public seeds, previous schedule
    pub_new: list = field(default_factory=list)   # public seeds, this schedule
    stage: int = 0                                # highest wire phase accepted so far

    @property
    def chunk(self) -> int:
        return self.n // self.m


_STAGE_ORDER = {wire.W_PHASE_UNWRAP: 1, wire.W_PHASE_ED: 2, wire.W_PHASE_WRAP: 3}


class MixNode:
    """One mix: bootstrap on instruction, then shuffle records phase by phase."""

    def __init__(self, index: int, group, private_key: int, net, *,
                 address: tuple[str, int] | None = None, skip_ed: bool = False):
        self.index = index
        self.node_id = f"mix{index}"
        self.group = group
        self.private = private_key
        self.net = net
        self.address = address or (self.node_id, 0)
        self.skip_ed = skip_ed  # test hook: disable the E/D pass entirely
        self.counters = CostCounters()
        self.states: dict[int, MixState] = {}
        self._buffers: dict[tuple, dict] = {}   # (epoch, phase, round) -> sender -> records
        self._early: list[wire.Frame] = []      # batches that beat their instruction
        self._perm_cache: dict[bytes, Permutation] = {}

    # -- frame entry -------------------------------------------------------

    def handle(self, frame: wire.Frame):
        if frame.ftype == wire.T_INSTRUCTION:
            self._bootstrap(decode_instruction(frame.payload, self.group))
            early, self._early = self._early, []
            for pending in early:
                self.handle(pending)
        elif frame.ftype == wire.T_RECORD_BATCH:
            if frame.epoch not in self.states:
                self._early.append(frame)
                return
            self._accept_batch(frame)
        elif frame.ftype == wire.T_ACK:
            pass
        else:
            raise SizeMismatch(f"mix cannot serve frame type {frame.ftype:#x}")

    def _send(self, dst: str, ftype: int, epoch: int, phase: int, rnd: int,
              payload: bytes, record_bytes: int = 0):
        self.counters.bytes_sent += record_bytes
        self.net.send(dst, wire.Frame(ftype, epoch, phase, rnd, self.index, payload))

    def _perm(self, seed: bytes, n: int) -> Permutation:
        key = seed + n.to_bytes(4, "big")
        if key not in self._perm_cache:
            self._perm_cache[key] = permutation_from_seed(seed, n)
        return self._perm_cache[key]

    # -- bootstrap -----------------------------------------------------------

    def _bootstrap(self, instr: MixInstruction):
        if self.address not in instr.mix_list:
            raise BadInstruction(f"{self.node_id} is not in the instruction mix list")
        idx = instr.mix_list.index(self.address)
        st = MixState(design=instr.design, epoch=instr.epoch, n=instr.n,
                      m=len(instr.mix_list), r=instr.r, idx=idx,
                      kappa=instr.kappa, db=instr.db)
        kappa = instr.kappa

        if instr.design == CASCADE_LAYERED:
            ss = agree(self.private, instr.alphas[0])
            st.wrap = [derive(ss, kappa)]
        elif instr.design == CASCADE_REBUILD:
            ss_old = agree(self.private, instr.alphas[0])
            ss_new = agree(self.private, instr.alphas[1])
            st.unwrap = [derive(ss_old, kappa)]
            st.wrap = [derive(ss_new, kappa)]
            st.ed_old_key = st.unwrap[0].enc_key
            st.ed_new_key = st.wrap[0].enc_key
        elif instr.design == PARALLEL_LAYERED:
            ss0 = agree(self.private, instr.alphas[0])
            chain = private_chain(instr.alphas[0], ss0, kappa, instr.r)
            st.wrap = [derive(ss, kappa) for _, ss in chain]
            sk0 = instr.betas[0] ** instr.m_scalars[0]
            pub = public_chain(instr.betas[0], sk0, kappa, instr.r)
            st.pub_new = [derive(sk, kappa).perm_seed for _, sk in pub]
        else:  # parallel rebuild: old chains to undo, new chains to apply
            ss_old0 = agree(self.private, instr.alphas[0])
            old = private_chain(instr.alphas[0], ss_old0, kappa, instr.r + 1)
            st.unwrap = [derive(ss, kappa) for _, ss in old[:instr.r]]
            st.ed_old_key = derive(old[instr.r][1], kappa).enc_key
            ss_new0 = agree(self.private, instr.alphas[1])
            new = private_chain(instr.alphas[1], ss_new0, kappa, instr.r + 1)
            st.wrap = [derive(ss, kappa) for _, ss in new[:instr.r]]
            st.ed_new_key = derive(new[instr.r][1], kappa).enc_key
            sk_old0 = instr.betas[0] ** instr.m_scalars[0]
            pub_old = public_chain(instr.betas[0], sk_old0, kappa, instr.r, instr.client_pub)
            st.pub_old = [derive(sk, kappa).perm_seed for _, sk in pub_old]
            sk_new0 = instr.betas[1] ** instr.m_scalars[1]
            pub_new = public_chain(instr.betas[1], sk_new0, kappa, instr.r, instr.client_pub)
            st.pub_new = [derive(sk, kappa).perm_seed for _, sk in pub_new]

        self.states[instr.epoch] = st
        self._fetch(st)

    def _fetch(self, st: MixState):
        if st.design == CASCADE_LAYERED:
            if st.idx == 0:
                self._send(st.db, wire.T_DB_FETCH, st.epoch, wire.W_PHASE_WRAP, 0,
                           wire.encode_fetch(list(range(st.n))))
        elif st.design == CASCADE_REBUILD:
            if st.idx == 0:
                self._send(st.db, wire.T_DB_FETCH, st.epoch, wire.W_PHASE_UNWRAP, 0,
                           wire.encode_fetch(list(range(st.n))))
        elif st.design == PARALLEL_LAYERED:
            lo = st.idx * st.chunk
            self._send(st.db, wire.T_DB_FETCH, st.epoch, wire.W_PHASE_WRAP, 0,
                       wire.encode_fetch(list(range(lo, lo + st.chunk))))
        else:
            # fetch the DB slots whose round r-1 encrypt-time slots fall in
            # this mix's chunk, per the final public allocation being undone
            perm = self._perm(st.pub_old[st.r - 1], st.n)
            lo, hi = st.idx * st.chunk, (st.idx + 1) * st.chunk
            slots = [p for p in range(st.n) if lo <= perm.mapping[p] < hi]
            self._send(st.db, wire.T_DB_FETCH, st.epoch, wire.W_PHASE_UNWRAP, 0,
                       wire.encode_fetch(slots))

    # -- batch plumbing ------------------------------------------------------

    def _accept_batch(self, frame: wire.Frame):
        st = self.states[frame.epoch]
        stage = _STAGE_ORDER[frame.phase]
        if stage < st.stage:
            raise PhaseOrderViolation(
                f"{self.node_id} got phase {frame.phase} after phase {st.stage}")
        st.stage = stage
        records = wire.decode_batch(frame.payload)
        if frame.sender == wire.DB_SENDER and st.design == PARALLEL_REBUILD:
            # relabel fetched records with their encrypt-time slots
            perm = self._perm(st.pub_old[st.r - 1], st.n)
            records = [(perm.mapping[slot], cell) for slot, cell in records]
        key = (frame.epoch, frame.phase, frame.round)
        buf = self._buffers.setdefault(key, {})
        buf[frame.sender] = records
        if len(buf) >= self._barrier(st, frame.phase, frame.round):
            del self._buffers[key]
            merged = []
            for sender in sorted(buf):
                merged.extend(buf[sender])
            self._process(st, frame.phase, frame.round, merged)

    def _barrier(self, st: MixState, phase: int, rnd: int) -> int:
        if st.design in (CASCADE_LAYERED, CASCADE_REBUILD):
            return 1
        if phase == wire.W_PHASE_ED:
            return st.m if rnd == 0 else 1
        return 1 if rnd == 0 else st.m

    def assert_round_complete(self, epoch: int):
        """Raise MissingBatch if any barrier is still waiting on peers."""
        for (ep, phase, rnd), buf in self._buffers.items():
            if ep == epoch:
                st = self.states[ep]
                want = self._barrier(st, phase, rnd)
                raise MissingBatch(
                    f"{self.node_id} epoch {ep} phase {phase} round {rnd}: "
                    f"{len(buf)}/{want} batches")

    # -- phase processing ----------------------------------------------------

    def _process(self, st: MixState, phase: int, rnd: int, records: list):
        if st.design == CASCADE_LAYERED:
            self._cascade_layered(st, records)
        elif st.design == CASCADE_REBUILD:
            self._cascade_rebuild(st, phase, records)
        elif phase == wire.W_PHASE_ED:
            self._parallel_ed(st, rnd, records)
        else:
            self._parallel_round(st, phase, rnd, records)

    # cascade -----------------------------------------------------------------

    def _cascade_layered(self, st: MixState, records: list):
        cells = self._as_array(records, st.n)
        secrets = st.wrap[0]
        wrapped = [self._layered_wrap_cell(c, secrets.enc_key, st.n) for c in cells]
        self.counters.encryptions += st.n
        out = self._perm(secrets.perm_seed, st.n).apply(wrapped)
        self.counters.perm_elements += st.n
        batch = list(enumerate(out))
        if st.idx + 1 < st.m:
            self._emit_batch(f"mix{st.idx + 1}", st, wire.W_PHASE_WRAP, st.idx + 1, batch)
        else:
            self._store(st, batch)

    def _cascade_rebuild(self, st: MixState, phase: int, records: list):
        cells = self._as_array(records, st.n)
        if phase == wire.W_PHASE_UNWRAP:
            key = st.unwrap[0].enc_key
            cells = [cipher.ctr_layer_bytes(c, key, i, epoch=st.epoch - 1, phase=PHASE_WRAP)
                     for i, c in enumerate(cells)]
            self.counters.encryptions += st.n
            cells = self._perm(st.unwrap[0].perm_seed, st.n).invert().apply(cells)
            self.counters.perm_elements += st.n
            batch = list(enumerate(cells))
            if st.idx + 1 < st.m:
                self._emit_batch(f"mix{st.idx + 1}", st, wire.W_PHASE_UNWRAP, st.idx + 1, batch)
            else:
                # last mix keeps the batch and starts the E/D pass itself
                st.stage = _STAGE_ORDER[wire.W_PHASE_ED]
                self._cascade_rebuild(st, wire.W_PHASE_ED, batch)
        elif phase == wire.W_PHASE_ED:
            cells = self._ed_pass(st, list(enumerate(cells)))
            batch = cells
            if st.idx > 0:
                self._emit_batch(f"mix{st.idx - 1}", st, wire.W_PHASE_ED, st.m - st.idx, batch)
            else:
                self._emit_batch(f"mix{st.m - 1}", st, wire.W_PHASE_WRAP, 0, batch)
        else:
            perm = self._perm(st.wrap[0].perm_seed, st.n)
            cells = perm.apply(cells)
            self.counters.perm_elements += st.n
            key = st.wrap[0].enc_key
            cells = [cipher.ctr_layer_bytes(c, key, i, epoch=st.epoch, phase=PHASE_WRAP)
                     for i, c in enumerate(cells)]
            self.counters.encryptions += st.n
            batch = list(enumerate(cells))
            if st.idx > 0:
                self._emit_batch(f"mix{st.idx - 1}", st, wire.W_PHASE_WRAP, st.m - st.idx, batch)
            else:
                self._store(st, batch)

    # parallel ----------------------------------------------------------------

    def _parallel_round(self, st: MixState, phase: int, rnd: int, records: list):
        unwrapping = phase == wire.W_PHASE_UNWRAP
        if rnd >= st.r:
            if rnd != st.r or unwrapping:
                raise PhaseOrderViolation(f"round {rnd} outside schedule")
            self._store(st, records)
            return
        chunk = st.chunk
        lo = st.idx * chunk
        records = sorted(records)          # order given by the previous allocation
        self.counters.perm_elements += chunk
        slots = [slot for slot, _ in records]
        if slots != list(range(lo, lo + chunk)):
            raise SizeMismatch(f"{self.node_id} holds a broken chunk at round {rnd}")
        cells = [cell for _, cell in records]

        if unwrapping:
            j = st.r - 1 - rnd             # undoing old round j
            key = st.unwrap[j].enc_key
            cells = [cipher.ctr_layer_bytes(c, key, lo + i, epoch=st.epoch - 1,
                                            phase=PHASE_WRAP)
                     for i, c in enumerate(cells)]
            self.counters.encryptions += chunk
            inv = self._perm(st.unwrap[j].perm_seed, chunk).invert()
            cells = inv.apply(cells)
            self.counters.perm_elements += chunk
            if rnd + 1 < st.r:
                dest_of = self._perm(st.pub_old[j - 1], st.n).mapping
                out = [(dest_of[lo + i], cells[i]) for i in range(chunk)]
                self._dispatch(st, wire.W_PHASE_UNWRAP, rnd + 1, out)
            else:
                out = [(lo + i, cells[i]) for i in range(chunk)]
                self._dispatch(st, wire.W_PHASE_ED, 0, out)
            return

        # wrapping round: shuffle locally, encrypt at the new positions,
        # then allocate globally for the next round
        secrets = st.wrap[rnd]
        local = self._perm(secrets.perm_seed, chunk)
        shuffled = local.apply(cells)
        self.counters.perm_elements += chunk
        if st.design == PARALLEL_LAYERED:
            cells = [self._layered_wrap_cell(c, secrets.enc_key, st.n) for c in shuffled]
        else:
            cells = [cipher.ctr_layer_bytes(c, secrets.enc_key, lo + i,
                                            epoch=st.epoch, phase=PHASE_WRAP)
                     for i, c in enumerate(shuffled)]
        self.counters.encryptions += chunk
        alloc = public_allocation(self._perm(st.pub_new[rnd], st.n), st.n, st.m,
                                  st.idx, round=rnd, epoch=st.epoch)
        out = [(alloc.new_slots[lo + i], cells[i]) for i in range(chunk)]
        self._dispatch(st, wire.W_PHASE_WRAP, rnd + 1, out)

    def _parallel_ed(self, st: MixState, hop: int, records: list):
        records = sorted(records)
        cells = self._ed_pass(st, records)
        nxt = (st.idx + 1) % st.m
        if hop + 1 < st.m:
            self._emit_batch(f"mix{nxt}", st, wire.W_PHASE_ED, hop + 1, cells)
        else:
            self._emit_batch(f"mix{nxt}", st, wire.W_PHASE_WRAP, 0, cells)

    # helpers -----------------------------------------------------------------

    def _ed_pass(self, st: MixState, records: list) -> list:
        """Remove this mix's old E/D layer and add the new one in a single
        keystream application, so cells are never half-stripped."""
        if self.skip_ed:
            return records
        out = []
        for slot, cell in records:
            ks_old = cipher.ctr_keystream(st.ed_old_key, st.epoch - 1, PHASE_ED,
                                          slot, len(cell))
            ks_new = cipher.ctr_keystream(st.ed_new_key, st.epoch, PHASE_ED,
                                          slot, len(cell))
            out.append((slot, bytes(c ^ a ^ b for c, a, b in zip(cell, ks_old, ks_new))))
        self.counters.encryptions += 2 * len(records)
        return out

    def _layered_wrap_cell(self, cell: bytes, key: bytes, n: int) -> bytes:
        lab = cipher.label_bytes(n)
        rec = cipher.LayeredRecord(iv_token=cell[:lab], body=cell[lab:])
        return cipher.layered_wrap(rec, key).cell

    def _as_array(self, records: list, n: int) -> list:
        if len(records) != n:
            raise SizeMismatch(f"batch of {len(records)}, want {n}")
        cells = [None] * n
        for slot, cell in records:
            cells[slot] = cell
        if any(c is None for c in cells):
            raise SizeMismatch("batch does not cover all slots")
        return cells

    def _emit_batch(self, dst: str, st: MixState, phase: int, rnd: int, records: list):
        payload = wire.encode_batch(records)
        self._send(dst, wire.T_RECORD_BATCH, st.epoch, phase, rnd, payload,
                   record_bytes=sum(len(c) for _, c in records))

    def _dispatch(self, st: MixState, phase: int, rnd: int, out: list):
        chunk = st.chunk
        groups = {i: [] for i in range(st.m)}
        for slot, cell in out:
            groups[slot // chunk].append((slot, cell))
        for dest in range(st.m):
            self._emit_batch(f"mix{dest}", st, phase, rnd, groups[dest])

    def _store(self, st: MixState, records: list):
        payload = wire.encode_batch(sorted(records))
        self._send(st.db, wire.T_DB_STORE, st.epoch, wire.W_PHASE_WRAP, st.r,
                   payload, record_bytes=sum(len(c) for _, c in records))
        self._send("client", wire.T_ACK, st.epoch, wire.W_PHASE_WRAP, st.r, b"")

    def held_slots(self, epoch: int) -> list[int]:
        """Slots sitting in unprocessed buffers (test introspection)."""
        out = []
        for (ep, _, _), buf in self._buffers.items():
            if ep == epoch:
                for records in buf.values():
                    out.extend(slot for slot, _ in records)
        return sorted(out)


class StorageNode:
    """Frame adapter over :class:`StorageServer` for DB fetch/store traffic."""

    def __init__(self, server: StorageServer, net):
        self.server = server
        self.net = net
        self.node_id = "db"

    def handle(self, frame: wire.Frame):
        actor = wire.node_name(frame.sender)
        if frame.ftype == wire.T_DB_FETCH:
            slots = wire.decode_fetch(frame.payload)
            records = [(s, self.server.db_read(s, actor=actor, round=frame.round))
                       for s in slots]
            self.net.send(actor, wire.Frame(wire.T_RECORD_BATCH, frame.epoch,
                                            frame.phase, frame.round,
                                            wire.DB_SENDER, wire.encode_batch(records)))
        elif frame.ftype == wire.T_DB_STORE:
            if frame.epoch > self.server.epoch and frame.sender != wire.CLIENT_SENDER:
                # first store of a new eviction: rotate the server epoch and
                # flush the cache, whose write-backs already happened
                self.server.epoch = frame.epoch
                self.server.cache_flush()
            for slot, cell in wire.decode_batch(frame.payload):
                if frame.phase == wire.W_PHASE_CACHE:
                    self.server.cache_write(slot, cell, actor=actor)
                else:
                    self.server.db_write(slot, cell, actor=actor, round=frame.round)
            self.net.send(actor, wire.Frame(wire.T_ACK, frame.epoch, frame.phase,
                                            frame.round, wire.DB_SENDER, b""))
        else:
            raise SizeMismatch(f"storage cannot serve frame type {frame.ftype:#x}")
