"""Record ciphering for the two eviction families.

Layered records are wrapped in two stages with AES-CBC: the label||payload
body is encrypted under the IV token, then the IV token itself is masked
with the first cipher block of the fresh body (single-block CFB), so every
layer is removable in LIFO order and all field sizes are preserved bit for
bit.  Bodies are one label-width longer than a block multiple, so the CBC
stage uses ciphertext stealing for the ragged tail; block-aligned inputs
take the plain SP 800-38A CBC path.

Rebuild records are b-byte cells XORed with an AES-CTR keystream whose
counter block is (epoch || phase || slot || block).  Putting the slot index
in the counter keeps the scheme commutative and self-inverse per (key,
epoch, phase, slot); the epoch and phase fields only separate keystream
domains between the unwrap, encrypt-decrypt and wrap passes that reuse one
key over the same slot range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import CounterOutOfRange, SizeMismatch

BLOCK = 16

PHASE_CLIENT = 0
PHASE_ED = 1
PHASE_WRAP = 2
PHASE_STASH = 3


def label_bytes(n: int) -> int:
    """Width of the index label (and IV token) for an n-record database."""
    if n < 1:
        raise SizeMismatch("database must hold at least one record")
    return max(1, math.ceil(math.ceil(math.log2(n)) / 8)) if n > 1 else 1


def _aes(key: bytes):
    return algorithms.AES(key)


def _ecb_encrypt_block(key: bytes, block: bytes) -> bytes:
    enc = Cipher(_aes(key), modes.ECB()).encryptor()
    return enc.update(block) + enc.finalize()


def _cbc_encrypt(key: bytes, iv: bytes, data: bytes) -> bytes:
    enc = Cipher(_aes(key), modes.CBC(iv)).encryptor()
    return enc.update(data) + enc.finalize()


def _cbc_decrypt(key: bytes, iv: bytes, data: bytes) -> bytes:
    dec = Cipher(_aes(key), modes.CBC(iv)).decryptor()
    return dec.update(data) + dec.finalize()


def cts_encrypt(key: bytes, iv: bytes, data: bytes) -> bytes:
    """CBC with ciphertext stealing on the ragged tail (swap only when
    ragged, so aligned inputs are bit-exact standard CBC)."""
    if len(data) < BLOCK:
        raise SizeMismatch("need at least one block")
    tail = len(data) % BLOCK
    if tail == 0:
        return _cbc_encrypt(key, iv, data)
    head = data[: len(data) - tail]
    last = data[len(data) - tail:]
    full = _cbc_encrypt(key, iv, head + last + bytes(BLOCK - tail))
    c_prev = full[-2 * BLOCK: -BLOCK]  # stolen-from block
    c_last = full[-BLOCK:]
    return full[: -2 * BLOCK] + c_last + c_prev[:tail]


def cts_decrypt(key: bytes, iv: bytes, data: bytes) -> bytes:
    if len(data) < BLOCK:
        raise SizeMismatch("need at least one block")
    tail = len(data) % BLOCK
    if tail == 0:
        return _cbc_decrypt(key, iv, data)
    head = data[: len(data) - BLOCK - tail]     # C_1 .. C_{k-1}
    y = data[len(data) - BLOCK - tail: len(data) - tail]  # E(C_k xor (P*||0))
    z = data[len(data) - tail:]                 # C_k[:tail]
    dy = _cbc_decrypt(key, bytes(BLOCK), y)     # raw block decrypt of y
    c_k = z + dy[tail:]
    p_star = bytes(a ^ b for a, b in zip(dy[:tail], z))
    return _cbc_decrypt(key, iv, head + c_k) + p_star


@dataclass(frozen=True)
class LayeredRecord:
    """IV token plus label||payload cell; all sizes fixed per deployment."""

    iv_token: bytes
    body: bytes

    @property
    def cell(self) -> bytes:
        return self.iv_token + self.body


def layered_sizes(n: int, payload_bytes: int) -> tuple[int, int]:
    """(iv_token length, body length) in bytes for the given geometry."""
    lab = label_bytes(n)
    return lab, lab + payload_bytes


def make_layered(virtual_index: int, payload: bytes, n: int, rng=None,
                 iv_token: bytes | None = None) -> LayeredRecord:
    lab = label_bytes(n)
    if not 0 <= virtual_index < n:
        raise SizeMismatch("virtual index out of range")
    if iv_token is None:
        iv_token = rng.getrandbits(8 * lab).to_bytes(lab, "big")
    elif len(iv_token) != lab:
        raise SizeMismatch("iv token width mismatch")
    return LayeredRecord(iv_token=iv_token, body=virtual_index.to_bytes(lab, "big") + payload)


def layered_from_cell(cell: bytes, n: int, payload_bytes: int) -> LayeredRecord:
    lab, body_len = layered_sizes(n, payload_bytes)
    if len(cell) != lab + body_len:
        raise SizeMismatch(f"cell is {len(cell)} bytes, want {lab + body_len}")
    return LayeredRecord(iv_token=cell[:lab], body=cell[lab:])


def layered_label(rec: LayeredRecord, n: int) -> int:
    """Label of a fully decrypted record."""
    return int.from_bytes(rec.body[: label_bytes(n)], "big")


def _check_key(key: bytes):
    if len(key) not in (16, 32):
        raise SizeMismatch("key must be 128 or 256 bits")


def layered_wrap(rec: LayeredRecord, key: bytes) -> LayeredRecord:
    """Add one encryption layer: CBC body under the token, then mask the
    token with the first fresh cipher block."""
    _check_key(key)
    if len(rec.body) < BLOCK:
        raise SizeMismatch("body shorter than one cipher block")
    iv_full = rec.iv_token + bytes(BLOCK - len(rec.iv_token))
    body = cts_encrypt(key, iv_full, rec.body)
    mask = _ecb_encrypt_block(key, body[:BLOCK])
    token = bytes(a ^ b for a, b in zip(rec.iv_token, mask))
    return LayeredRecord(iv_token=token, body=body)


def layered_unwrap(rec: LayeredRecord, key: bytes) -> LayeredRecord:
    _check_key(key)
    if len(rec.body) < BLOCK:
        raise SizeMismatch("body shorter than one cipher block")
    mask = _ecb_encrypt_block(key, rec.body[:BLOCK])
    token = bytes(a ^ b for a, b in zip(rec.iv_token, mask))
    iv_full = token + bytes(BLOCK - len(token))
    body = cts_decrypt(key, iv_full, rec.body)
    return LayeredRecord(iv_token=token, body=body)


@dataclass(frozen=True)
class RebuildRecord:
    """Fixed-size cell onioned with index-counter CTR layers."""

    body: bytes
    index: int


def ctr_nonce(epoch: int, phase: int, counter: int) -> bytes:
    """16-byte initial counter block: epoch u64 || phase u8 || slot u32 ||
    block u24 (the low three bytes count cipher blocks within the cell)."""
    return epoch.to_bytes(8, "big") + bytes([phase]) + counter.to_bytes(4, "big") + bytes(3)


def ctr_keystream(key: bytes, epoch: int, phase: int, counter: int, length: int) -> bytes:
    enc = Cipher(_aes(key), modes.CTR(ctr_nonce(epoch, phase, counter))).encryptor()
    return enc.update(bytes(length)) + enc.finalize()


def ctr_layer(rec: RebuildRecord, key: bytes, counter: int, *, epoch: int,
              phase: int, n: int | None = None) -> RebuildRecord:
    """XOR one keystream layer onto the cell.  Self-inverse and commutative
    for any set of (key, epoch, phase, counter) tuples."""
    _check_key(key)
    if counter < 0 or counter >= 2 ** 32 or (n is not None and counter >= n):
        raise CounterOutOfRange(f"counter={counter}")
    ks = ctr_keystream(key, epoch, phase, counter, len(rec.body))
    return RebuildRecord(body=bytes(a ^ b for a, b in zip(rec.body, ks)), index=counter)


def ctr_layer_bytes(cell: bytes, key: bytes, counter: int, *, epoch: int,
                    phase: int, n: int | None = None) -> bytes:
    """ctr_layer on a bare cell, for pipeline code that works on bytes."""
    return ctr_layer(RebuildRecord(cell, counter), key, counter,
                     epoch=epoch, phase=phase, n=n).body
