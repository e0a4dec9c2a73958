"""Client-side ORAM logic for all four designs.

The client owns every secret: its key pair, a symmetric key for the
innermost record layer, the per-mix exponents behind each eviction's
instructions, and (for the layered designs) the virtual-to-remote index
table.  Eviction work is delegated: the client only samples fresh group
elements, ships one instruction per mix and afterwards replays the
permutation schedule on indices to keep its table current.  Nothing the
client sends contains plaintext or another mix's secrets.

Epoch convention: ``self.epoch`` counts completed evictions.  Layers
currently on the database carry that epoch tag (0 right after
preprocessing); eviction e re-keys the database from tag e-1 to tag e.
"""

from __future__ import annotations

import hmac as hmac_mod
import hashlib
import math
import threading
import time

from . import cipher, wire
from .cipher import PHASE_CLIENT, PHASE_ED, PHASE_STASH, PHASE_WRAP
from .errors import (CacheFull, ConfigMismatch, ExhaustedHistory,
                     SizeMismatch, StaleState)
from .group import (GroupElement, derive, generator, keygen, private_chain,
                    public_chain, random_scalar)
from .mixnode import MixInstruction, encode_instruction
from .shuffle import (CASCADE_LAYERED, CASCADE_REBUILD, DESIGNS,
                      LAYERED_DESIGNS, PARALLEL_DESIGNS, PARALLEL_LAYERED,
                      PARALLEL_REBUILD, Permutation, permutation_from_seed,
                      round_count)


def harmonic(n: int) -> float:
    if n < 10 ** 5:
        return math.fsum(1.0 / i for i in range(1, n + 1))
    return math.log(n) + 0.5772156649015329 + 1 / (2 * n)


def expected_layers(n: int, s: int, d: int, r: int) -> tuple[float, float]:
    """Coupon-collector bounds for the layered designs.

    Returns (expected evictions until every record was fetched once,
    expected layer depth per record at decryption), with d the per-access
    refresh divisor (d=1 is the unmodified access method).
    """
    if n < 1 or s < 1 or d < 1:
        raise ConfigMismatch("need n, s, d >= 1")
    h = harmonic(n)
    e_all = n / (s * d) * h
    e_per = r / (s * d) * ((n + 1) / 2 * (h - 0.5) + 0.5)
    return e_all, e_per


class _EpochKeys:
    """Cached derived secrets for one layered eviction epoch."""

    def __init__(self, priv, pub_seeds=None):
        self.priv = priv            # per mix: list of DerivedSecrets (one per round)
        self.pub_seeds = pub_seeds  # per round public seed (parallel only)


class Client:
    """Single-owner ORAM client; one outstanding access or eviction at a time."""

    def __init__(self, *, design: str, n: int, payload_bytes: int, s: int,
                 mix_pubkeys, group, net, rng, kappa: int = 128, d: int = 0,
                 db_id: str = "db", mix_addresses=None, r_override: int | None = None,
                 skip_client_layer: bool = False):
        if design not in DESIGNS:
            raise ConfigMismatch(f"unknown design {design!r}")
        if n < 1:
            raise ConfigMismatch("empty database")
        if payload_bytes % cipher.BLOCK != 0 or payload_bytes == 0:
            raise ConfigMismatch("payload size must be a positive block multiple")
        if not 1 <= s <= n:
            raise ConfigMismatch("need 1 <= s <= n")
        m = len(mix_pubkeys)
        if design in PARALLEL_DESIGNS and n % m != 0:
            raise ConfigMismatch("m must divide n for the parallel designs")
        self.design = design
        self.n = n
        self.payload_bytes = payload_bytes
        self.s = s
        self.m = m
        self.kappa = kappa
        self.d = d
        self.group = group
        self.net = net
        self.rng = rng
        self.db_id = db_id
        self.mix_pubkeys = list(mix_pubkeys)
        self.mix_addresses = tuple(mix_addresses or ((f"mix{i}", 0) for i in range(m)))
        self.skip_client_layer = skip_client_layer
        self.layered = design in LAYERED_DESIGNS
        self.parallel = design in PARALLEL_DESIGNS
        self.lab = cipher.label_bytes(n)
        self.cell_bytes = (2 * self.lab + payload_bytes) if self.layered else payload_bytes
        self.r = r_override or round_count(design, n, s, m)

        self.private, self.public = keygen(group, rng)
        self.sym_key = rng.getrandbits(kappa).to_bytes(kappa // 8, "big")

        self.epoch = 0
        self.ready = False
        self.mid_eviction = False
        self._mailbox: list[wire.Frame] = []
        self._mail_lock = threading.Lock()
        self.last_layer_count = 0
        self.last_epochs_peeled = 0

        # layered: index table plus the whole epoch history for trial and
        # error; rebuild: only the current schedule and the previous heads
        self.table: list[int] = []
        self.rev_table: list[int] = []
        self.history: list[_EpochKeys] = []
        self._g = generator(group)

        # chain heads, advanced once per eviction (layered) or replaced by
        # fresh exponents (rebuild)
        self._z: list[int] = []
        self._m_scalars: list[int] = []
        self._alpha_heads: list[tuple[GroupElement, GroupElement]] = []
        self._beta_heads: list[GroupElement] = []
        self._sk_head: GroupElement | None = None
        self._old_alphas: list[GroupElement] = []
        self._old_betas: list[GroupElement] = []
        self._cur: _EpochKeys | None = None       # rebuild current schedule
        self._cur_ed: list[bytes] = []
        self._pending = None

        self.cache: dict[int, bytes] = {}         # virtual index -> latest payload
        self._cache_slot: dict[int, int] = {}
        self._accessed: set[int] = set()

    # -- transport helpers ---------------------------------------------------

    def handle(self, frame: wire.Frame):
        with self._mail_lock:
            self._mailbox.append(frame)

    def _post(self, dst: str, ftype: int, payload: bytes, epoch=None, phase=0, rnd=0):
        self.net.send(dst, wire.Frame(ftype, self.epoch if epoch is None else epoch,
                                      phase, rnd, wire.CLIENT_SENDER, payload))

    def _collect(self, ftype: int, count: int) -> list[wire.Frame]:
        if hasattr(self.net, "pump"):
            self.net.pump()
        else:
            deadline = time.monotonic() + 60
            while True:
                with self._mail_lock:
                    if sum(1 for f in self._mailbox if f.ftype == ftype) >= count:
                        break
                if time.monotonic() > deadline:
                    raise TimeoutError("no response from the deployment")
                time.sleep(0.002)
        with self._mail_lock:
            got = [f for f in self._mailbox if f.ftype == ftype][:count]
            for f in got:
                self._mailbox.remove(f)
        return got

    def _db_fetch(self, slots: list[int]) -> list[tuple[int, bytes]]:
        self._post(self.db_id, wire.T_DB_FETCH, wire.encode_fetch(slots))
        frame = self._collect(wire.T_RECORD_BATCH, 1)[0]
        return wire.decode_batch(frame.payload)

    def _db_store(self, records: list[tuple[int, bytes]], epoch=None):
        self._post(self.db_id, wire.T_DB_STORE, wire.encode_batch(records), epoch=epoch)
        self._collect(wire.T_ACK, 1)

    def _cache_upload(self, slot: int, cell: bytes):
        # cache traffic shares the store frame type; slot is a cache index
        payload = wire.encode_batch([(slot, cell)])
        self._post(self.db_id, wire.T_DB_STORE, payload, phase=wire.W_PHASE_CACHE)
        self._collect(wire.T_ACK, 1)

    # -- key schedules ---------------------------------------------------------

    def _derive_layered_epoch(self, advance: bool) -> tuple[_EpochKeys, list, list]:
        """Secrets for the next eviction from the current chain heads.

        Returns (epoch keys, per-mix alphas to send, per-mix betas to send);
        the advanced heads are stashed in ``self._pending`` until finalize.
        """
        rounds = self.r if self.design == PARALLEL_LAYERED else 1
        alphas = [head[0] for head in self._alpha_heads]
        betas = list(self._beta_heads)
        priv = []
        new_heads = []
        for alpha, ss in self._alpha_heads:
            chain = private_chain(alpha, ss, self.kappa, rounds + 1)
            priv.append([derive(ss_j, self.kappa) for _, ss_j in chain[:rounds]])
            new_heads.append(chain[rounds])
        pub_seeds = None
        new_beta_heads = None
        new_sk = None
        if self.design == PARALLEL_LAYERED:
            pub = public_chain(self._beta_heads[0], self._sk_head, self.kappa, rounds + 1)
            pub_seeds = [derive(sk, self.kappa).perm_seed for _, sk in pub[:rounds]]
            new_sk = pub[rounds][1]
            new_beta_heads = []
            for beta in self._beta_heads:
                chain = public_chain(beta, self._sk_head, self.kappa, rounds + 1)
                new_beta_heads.append(chain[rounds][0])
        keys = _EpochKeys(priv, pub_seeds)
        if advance:
            self._pending = ("layered", keys, new_heads, new_beta_heads, new_sk)
        return keys, alphas, betas

    def _sample_rebuild_epoch(self) -> tuple[_EpochKeys, list, list, list, list]:
        """Fresh exponents and the derived schedule for a rebuild eviction."""
        rounds = self.r if self.design == PARALLEL_REBUILD else 1
        z = [random_scalar(self.group, self.rng) for _ in range(self.m)]
        alphas = [self._g ** zi for zi in z]
        priv = []
        ed = []
        for i in range(self.m):
            ss0 = self.mix_pubkeys[i] ** z[i]
            if self.design == PARALLEL_REBUILD:
                chain = private_chain(alphas[i], ss0, self.kappa, rounds + 1)
                priv.append([derive(ss_j, self.kappa) for _, ss_j in chain[:rounds]])
                ed.append(derive(chain[rounds][1], self.kappa).enc_key)
            else:
                secrets = derive(ss0, self.kappa)
                priv.append([secrets])
                ed.append(secrets.enc_key)
        pub_seeds = None
        betas = []
        m_scalars = []
        if self.design == PARALLEL_REBUILD:
            m_scalars = [random_scalar(self.group, self.rng) for _ in range(self.m)]
            betas = [self._beta_of(m_scalars, i) for i in range(self.m)]
            sk0 = self._g ** self._product(m_scalars)
            pub = public_chain(betas[0], sk0, self.kappa, rounds, self.public)
            pub_seeds = [derive(sk, self.kappa).perm_seed for _, sk in pub]
        keys = _EpochKeys(priv, pub_seeds)
        return keys, ed, z, m_scalars, [alphas, betas]

    def _product(self, scalars, skip: int | None = None) -> int:
        out = 1
        for i, sc in enumerate(scalars):
            if i != skip:
                out = out * sc % self.group.order
        return out

    def _beta_of(self, m_scalars, i: int) -> GroupElement:
        return self._g ** self._product(m_scalars, skip=i)

    # -- preprocessing -----------------------------------------------------------

    def preprocess(self, payloads: list[bytes]):
        """Encrypt, permute and upload the initial database."""
        if self.ready:
            raise ConfigMismatch("client already initialised")
        if len(payloads) != self.n:
            raise ConfigMismatch(f"{len(payloads)} payloads for n={self.n}")
        for p in payloads:
            if len(p) != self.payload_bytes:
                raise SizeMismatch("payload size mismatch")

        if self.layered:
            self._z = [random_scalar(self.group, self.rng) for _ in range(self.m)]
            self._alpha_heads = []
            for i, z in enumerate(self._z):
                self._alpha_heads.append((self._g ** z, self.mix_pubkeys[i] ** z))
            if self.design == PARALLEL_LAYERED:
                self._m_scalars = [random_scalar(self.group, self.rng)
                                   for _ in range(self.m)]
                self._beta_heads = [self._beta_of(self._m_scalars, i)
                                    for i in range(self.m)]
                self._sk_head = self._g ** self._product(self._m_scalars)
            cells = [self._make_record(v, payload).cell
                     for v, payload in enumerate(payloads)]
            seed = self.rng.getrandbits(self.kappa).to_bytes(self.kappa // 8, "big")
            perm = permutation_from_seed(seed, self.n)
            uploaded = perm.apply(cells)
            inv = perm.invert()
            self.table = [inv.mapping[v] for v in range(self.n)]
            self._rebuild_reverse()
        else:
            keys, ed, z, m_scalars, elements = self._sample_rebuild_epoch()
            self._cur, self._cur_ed = keys, ed
            self._z, self._m_scalars = z, m_scalars
            self._old_alphas, self._old_betas = elements
            cells = [self._base_cell(v, payloads[v]) for v in range(self.n)]
            uploaded = self._apply_rebuild_schedule(cells)

        self._db_store(list(enumerate(uploaded)), epoch=0)
        self.ready = True

    def _base_cell(self, v: int, payload: bytes) -> bytes:
        """Client layer plus both E/D layers, counters fixed at the virtual
        index (rebuild designs)."""
        cell = payload
        if not self.skip_client_layer:
            cell = cipher.ctr_layer_bytes(cell, self.sym_key, v, epoch=0,
                                          phase=PHASE_CLIENT)
        for key in self._cur_ed:
            cell = cipher.ctr_layer_bytes(cell, key, v, epoch=self.epoch,
                                          phase=PHASE_ED)
        return cell

    def _apply_rebuild_schedule(self, cells: list[bytes]) -> list[bytes]:
        """Run the wrap phase locally on an array in encrypt-time order."""
        arr = list(cells)
        if self.design == CASCADE_REBUILD:
            for idx in range(self.m - 1, -1, -1):
                secrets = self._cur.priv[idx][0]
                arr = permutation_from_seed(secrets.perm_seed, self.n).apply(arr)
                arr = [cipher.ctr_layer_bytes(c, secrets.enc_key, pos,
                                              epoch=self.epoch, phase=PHASE_WRAP)
                       for pos, c in enumerate(arr)]
            return arr
        chunk = self.n // self.m
        for j in range(self.r):
            nxt = []
            for i in range(self.m):
                secrets = self._cur.priv[i][j]
                part = permutation_from_seed(secrets.perm_seed, chunk) \
                    .apply(arr[i * chunk:(i + 1) * chunk])
                nxt.extend(cipher.ctr_layer_bytes(c, secrets.enc_key, i * chunk + t,
                                                  epoch=self.epoch, phase=PHASE_WRAP)
                           for t, c in enumerate(part))
            arr = permutation_from_seed(self._cur.pub_seeds[j], self.n).apply(nxt)
        return arr

    # -- lookups -------------------------------------------------------------

    def _check_ready(self):
        if not self.ready or self.mid_eviction:
            raise StaleState("client state does not cover a lookup right now")

    def lookup(self, v: int) -> tuple[int, list]:
        """Remote slot of a virtual index, plus the (mix, counter) hop trace
        needed to peel rebuild layers."""
        self._check_ready()
        if not 0 <= v < self.n:
            raise ConfigMismatch("virtual index out of range")
        if self.layered:
            return self.table[v], []
        if self.design == CASCADE_REBUILD:
            pos = v
            trace = []
            for idx in range(self.m - 1, -1, -1):
                perm = self._perm_cache(self._cur.priv[idx][0].perm_seed, self.n)
                pos = perm.invert().mapping[pos]
                trace.append((idx, pos))
            return pos, trace
        chunk = self.n // self.m
        pos = v
        trace = []
        for j in range(self.r):
            i = pos // chunk
            local = self._perm_cache(self._cur.priv[i][j].perm_seed, chunk)
            pos = i * chunk + local.invert().mapping[pos % chunk]
            trace.append((i, j, pos))
            pub = self._perm_cache(self._cur.pub_seeds[j], self.n)
            pos = pub.invert().mapping[pos]
        return pos, trace

    def _reverse_lookup(self, slot: int) -> int:
        """Virtual index currently stored at a DB slot."""
        if self.layered:
            return self.rev_table[slot]
        if self.design == CASCADE_REBUILD:
            pos = slot
            for idx in range(self.m):
                pos = self._perm_cache(self._cur.priv[idx][0].perm_seed, self.n).mapping[pos]
            return pos
        chunk = self.n // self.m
        pos = slot
        for j in range(self.r - 1, -1, -1):
            pos = self._perm_cache(self._cur.pub_seeds[j], self.n).mapping[pos]
            i = pos // chunk
            local = self._perm_cache(self._cur.priv[i][j].perm_seed, chunk)
            pos = i * chunk + local.mapping[pos % chunk]
        return pos

    _perms: dict = None

    def _perm_cache(self, seed: bytes, size: int) -> Permutation:
        if self._perms is None:
            self._perms = {}
        key = (seed, size)
        if key not in self._perms:
            self._perms[key] = permutation_from_seed(seed, size)
        return self._perms[key]

    def _rebuild_reverse(self):
        self.rev_table = [0] * self.n
        for v, slot in enumerate(self.table):
            self.rev_table[slot] = v

    # -- decryption ------------------------------------------------------------

    def _record_token(self, epoch: int, body: bytes) -> bytes:
        """IV token for a fresh record: a PRF over the refresh epoch and the
        plaintext body.  Gives the trial check 8*lab extra verification bits
        beyond the label while staying inside the record geometry, and makes
        refreshed cells unlinkable across epochs."""
        mac = hmac_mod.new(self.sym_key, epoch.to_bytes(8, "big") + body,
                           hashlib.sha256).digest()
        return mac[: self.lab]

    def _make_record(self, v: int, payload: bytes, epoch: int | None = None) -> cipher.LayeredRecord:
        body = v.to_bytes(self.lab, "big") + payload
        token = self._record_token(self.epoch if epoch is None else epoch, body)
        rec = cipher.make_layered(v, payload, self.n, iv_token=token)
        return rec if self.skip_client_layer else cipher.layered_wrap(rec, self.sym_key)

    def _client_unwrap_layered(self, rec: cipher.LayeredRecord):
        return rec if self.skip_client_layer else cipher.layered_unwrap(rec, self.sym_key)

    def _trial_match(self, candidate: cipher.LayeredRecord, v: int, epoch: int) -> bool:
        if cipher.layered_label(candidate, self.n) != v:
            return False
        return candidate.iv_token == self._record_token(epoch, candidate.body)

    def decrypt_layered(self, cell: bytes, v: int) -> bytes:
        """Trial and error: peel epochs newest first, testing label and token
        under the client key at each epoch boundary."""
        rec = cipher.layered_from_cell(cell, self.n, self.payload_bytes)
        peeled = 0
        pos = self.table[v]
        for e in range(self.epoch, -1, -1):
            candidate = self._client_unwrap_layered(rec)
            if self._trial_match(candidate, v, e):
                self.last_layer_count = peeled + (0 if self.skip_client_layer else 1)
                self.last_epochs_peeled = self.epoch - e
                return candidate.body[self.lab:]
            if e == 0:
                break
            keys = self.history[e - 1]
            if self.design == CASCADE_LAYERED:
                for idx in range(self.m - 1, -1, -1):
                    rec = cipher.layered_unwrap(rec, keys.priv[idx][0].enc_key)
                    peeled += 1
            else:
                arrivals = self._parallel_epoch_arrivals(keys, pos)
                pos = arrivals[0][1]
                for j in range(self.r - 1, -1, -1):
                    mix = arrivals[j][0]
                    rec = cipher.layered_unwrap(rec, keys.priv[mix][j].enc_key)
                    peeled += 1
        raise ExhaustedHistory(f"no epoch yields label {v}")

    def _parallel_epoch_arrivals(self, keys: _EpochKeys, end_pos: int) -> list:
        """Back-simulate one layered eviction: (holding mix, arrival slot)
        per round, given the record's end-of-epoch position."""
        chunk = self.n // self.m
        pos = end_pos
        arrivals = [None] * self.r
        for j in range(self.r - 1, -1, -1):
            pub = self._perm_cache(keys.pub_seeds[j], self.n)
            post = pub.mapping[pos]
            i = post // chunk
            local = self._perm_cache(keys.priv[i][j].perm_seed, chunk)
            pos = i * chunk + local.mapping[post % chunk]
            arrivals[j] = (i, pos)
        return arrivals

    def decrypt_rebuild(self, cell: bytes, v: int, trace: list) -> bytes:
        """Peel wrap layers along the hop trace, then the E/D layers, then
        the client layer with the original index as counter."""
        peeled = 0
        for entry in reversed(trace):
            if self.design == CASCADE_REBUILD:
                idx, counter = entry
                key = self._cur.priv[idx][0].enc_key
            else:
                idx, j, counter = entry
                key = self._cur.priv[idx][j].enc_key
            cell = cipher.ctr_layer_bytes(cell, key, counter, epoch=self.epoch,
                                          phase=PHASE_WRAP)
            peeled += 1
        for key in self._cur_ed:
            cell = cipher.ctr_layer_bytes(cell, key, v, epoch=self.epoch,
                                          phase=PHASE_ED)
            peeled += 1
        if not self.skip_client_layer:
            cell = cipher.ctr_layer_bytes(cell, self.sym_key, v, epoch=0,
                                          phase=PHASE_CLIENT)
            peeled += 1
        self.last_layer_count = peeled
        return cell

    def _decrypt(self, cell: bytes, v: int, trace: list) -> bytes:
        if self.layered:
            return self.decrypt_layered(cell, v)
        return self.decrypt_rebuild(cell, v, trace)

    # -- the access method -------------------------------------------------------

    def access(self, op: str, v: int, data: bytes | None = None) -> bytes:
        """One read or write, with the dummy-fetch pattern hiding."""
        self._check_ready()
        if op not in ("read", "write"):
            raise ConfigMismatch(f"bad op {op!r}")
        if op == "write" and (data is None or len(data) != self.payload_bytes):
            raise SizeMismatch("write needs a full payload")
        in_cache = v in self.cache
        if not in_cache and len(self.cache) >= self.s:
            raise CacheFull("cache at capacity, evict first")

        slot, trace = self.lookup(v)
        if in_cache:
            fetch_slot = self._pick_dummy()
        else:
            fetch_slot = slot
        (got_slot, cell), = self._db_fetch([fetch_slot])
        self._accessed.add(got_slot)

        # harden against timing: re-encrypt and upload before any trial
        # and error decryption happens
        cache_slot = self._cache_slot.setdefault(v, len(self._cache_slot))
        self._cache_upload(cache_slot, self._temp_wrap(cell, got_slot))

        if in_cache:
            payload = self.cache[v]
        else:
            payload = self._decrypt(cell, v, trace)
        if op == "write":
            payload = bytes(data)
        self.cache[v] = payload

        for extra_slot in self._pick_extras(fetch_slot):
            (xs, xcell), = self._db_fetch([extra_slot])
            self._accessed.add(xs)
            xv = self._reverse_lookup(xs)
            if xv in self.cache:
                continue
            xpayload = self._decrypt(xcell, xv, self._trace_of(xv))
            self._post(self.db_id, wire.T_DB_STORE,
                       wire.encode_batch([(xs, self._fresh_cell(xv, xpayload))]))
            self._collect(wire.T_ACK, 1)
        return payload

    def _trace_of(self, v: int) -> list:
        return [] if self.layered else self.lookup(v)[1]

    def _temp_wrap(self, cell: bytes, slot: int) -> bytes:
        if self.layered:
            rec = cipher.layered_from_cell(cell, self.n, self.payload_bytes)
            return cipher.layered_wrap(rec, self.sym_key).cell
        return cipher.ctr_layer_bytes(cell, self.sym_key, slot,
                                      epoch=self.epoch, phase=PHASE_STASH)

    def _pick_dummy(self) -> int:
        candidates = [s for s in range(self.n) if s not in self._accessed]
        if not candidates:
            return self.rng.randrange(self.n)
        return candidates[self.rng.randrange(len(candidates))]

    def _pick_extras(self, primary: int) -> list[int]:
        if self.d <= 0:
            return []
        pool = [s for s in range(self.n)
                if s not in self._accessed and s != primary]
        self.rng.shuffle(pool)
        return pool[: self.d]

    def _fresh_cell(self, v: int, payload: bytes) -> bytes:
        """A record as it must sit on the database right now: single client
        layer for layered designs, the full current stack for rebuild."""
        if self.layered:
            return self._make_record(v, payload).cell
        _, trace = self.lookup(v)
        cell = payload
        if not self.skip_client_layer:
            cell = cipher.ctr_layer_bytes(cell, self.sym_key, v, epoch=0,
                                          phase=PHASE_CLIENT)
        for key in self._cur_ed:
            cell = cipher.ctr_layer_bytes(cell, key, v, epoch=self.epoch,
                                          phase=PHASE_ED)
        for entry in trace:
            if self.design == CASCADE_REBUILD:
                idx, counter = entry
                key = self._cur.priv[idx][0].enc_key
            else:
                idx, j, counter = entry
                key = self._cur.priv[idx][j].enc_key
            cell = cipher.ctr_layer_bytes(cell, key, counter, epoch=self.epoch,
                                          phase=PHASE_WRAP)
        return cell

    def peek(self, v: int) -> bytes:
        """Verification read outside the access method (no cache traffic)."""
        self._check_ready()
        if v in self.cache:
            return self.cache[v]
        slot, trace = self.lookup(v)
        (_, cell), = self._db_fetch([slot])
        return self._decrypt(cell, v, trace)

    # -- eviction ------------------------------------------------------------

    def make_instructions(self) -> dict[int, MixInstruction]:
        """Instruction set for the next eviction; fresh randomness is
        sampled here and committed when the eviction finalises."""
        self._check_ready()
        epoch = self.epoch + 1
        common = dict(design=self.design, db=self.db_id, epoch=epoch,
                      kappa=self.kappa, n=self.n,
                      r=self.r if self.parallel else 0,
                      mix_list=self.mix_addresses)
        out = {}
        if self.layered:
            keys, alphas, betas = self._derive_layered_epoch(advance=True)
            for i in range(self.m):
                out[i] = MixInstruction(
                    alphas=(alphas[i],),
                    betas=(betas[i],) if self.design == PARALLEL_LAYERED else (),
                    m_scalars=(self._m_scalars[i],) if self.design == PARALLEL_LAYERED else (),
                    **common)
        else:
            keys, ed, z, m_scalars, (alphas, betas) = self._sample_rebuild_epoch()
            self._pending = ("rebuild", keys, ed, z, m_scalars, alphas, betas)
            for i in range(self.m):
                out[i] = MixInstruction(
                    alphas=(self._old_alphas[i], alphas[i]),
                    betas=(self._old_betas[i], betas[i]) if self.design == PARALLEL_REBUILD else (),
                    m_scalars=((self._m_scalars[i], m_scalars[i])
                               if self.design == PARALLEL_REBUILD else ()),
                    client_pub=self.public if self.design == PARALLEL_REBUILD else None,
                    **common)
        for instr in out.values():
            instr.validate()
        return out

    def evict(self):
        """Write the cache back, delegate the shuffle, refresh local state."""
        self._check_ready()
        writeback = []
        for v, payload in sorted(self.cache.items()):
            slot, _ = self.lookup(v)
            writeback.append((slot, self._fresh_cell(v, payload)))
        instructions = self.make_instructions()
        self.mid_eviction = True
        try:
            if writeback:
                self._db_store(writeback)
            epoch = self.epoch + 1
            for i, instr in instructions.items():
                self.net.send(f"mix{i}", wire.Frame(
                    wire.T_INSTRUCTION, epoch, 0, 0, wire.CLIENT_SENDER,
                    encode_instruction(instr)))
            acks = 1 if self.design in (CASCADE_LAYERED, CASCADE_REBUILD) else self.m
            self._collect(wire.T_ACK, acks)
            self._finalize_eviction()
        finally:
            self.mid_eviction = False

    def _finalize_eviction(self):
        kind = self._pending[0]
        if kind == "layered":
            _, keys, new_heads, new_betas, new_sk = self._pending
            self.history.append(keys)
            self._alpha_heads = new_heads
            if new_betas is not None:
                self._beta_heads = new_betas
                self._sk_head = new_sk
            self._update_table(keys)
        else:
            _, keys, ed, z, m_scalars, alphas, betas = self._pending
            self._cur, self._cur_ed = keys, ed
            self._z, self._m_scalars = z, m_scalars
            self._old_alphas, self._old_betas = alphas, betas
        self._pending = None
        self.epoch += 1
        self.cache.clear()
        self._cache_slot.clear()
        self._accessed.clear()

    def _update_table(self, keys: _EpochKeys):
        """Replay the eviction's permutations on the index table."""
        if self.design == CASCADE_LAYERED:
            transform = list(range(self.n))
            for idx in range(self.m):
                inv = self._perm_cache(keys.priv[idx][0].perm_seed, self.n).invert()
                transform = [inv.mapping[t] for t in transform]
        else:
            chunk = self.n // self.m
            transform = list(range(self.n))
            for j in range(self.r):
                nxt = []
                for pos in transform:
                    i = pos // chunk
                    local = self._perm_cache(keys.priv[i][j].perm_seed, chunk)
                    nxt.append(i * chunk + local.invert().mapping[pos % chunk])
                pub_inv = self._perm_cache(keys.pub_seeds[j], self.n).invert()
                transform = [pub_inv.mapping[pos] for pos in nxt]
        self.table = [transform[slot] for slot in self.table]
        self._rebuild_reverse()

    # -- maintenance ----------------------------------------------------------

    def reinitialize(self, payloads: list[bytes] | None = None):
        """Database reset: read everything back, clear the layered history
        and upload a freshly preprocessed database."""
        self._check_ready()
        if payloads is None:
            payloads = [self.peek(v) for v in range(self.n)]
        self.ready = False
        self.epoch = 0
        self.history.clear()
        self.table = []
        self._perms = {}
        self.cache.clear()
        self._cache_slot.clear()
        self._accessed.clear()
        self._cur = None
        self._cur_ed = []
        self.preprocess(payloads)

    def storage_accounting(self) -> dict:
        """Core client state sizes, in bits, by category."""
        index_bits = self.n * max(1, math.ceil(math.log2(self.n))) if self.layered else 0
        scalars = len(self._z) + len(self._m_scalars)
        elements = 2 * len(self._alpha_heads) + len(self._beta_heads) \
            + (1 if self._sk_head is not None else 0) \
            + len(self._old_alphas) + len(self._old_betas)
        scalar_bits = scalars * self.group.order.bit_length()
        element_bits = elements * 8 * self.group.element_size
        history_bits = sum(
            sum(len(sec.enc_key) + len(sec.perm_seed) for per_mix in keys.priv
                for sec in per_mix) * 8
            + (len(keys.pub_seeds) * self.kappa if keys.pub_seeds else 0)
            for keys in self.history)
        return {"index_table_bits": index_bits, "scalar_bits": scalar_bits,
                "element_bits": element_bits, "schedule_cache_bits": history_bits,
                "scalar_count": scalars, "element_count": elements}
