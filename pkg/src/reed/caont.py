"""Convergent all-or-nothing packaging of chunks.

A chunk is transformed into a package whose final ``STUB_SIZE`` bytes (the
stub) are later encrypted under a renewable per-file key, while the leading
part (the trimmed package) is deterministic in (chunk, key) and therefore
deduplicable. Two schemes are provided:

* basic: mask the chunk plus a zero canary with a keystream derived from
  the chunk key, then append ``tail = key XOR H(head)``. Cheap, but all
  chunks masked under one shared key leak their pairwise XOR.
* enhanced: symmetrically encrypt the chunk first, append the key, and mask
  that with a keystream derived from ``h = H(ciphertext || key)``; the tail
  is the XOR-fold of the head pieces XOR h. Masks differ per chunk even
  under a shared key.

Both schemes give |trimmed| == |chunk| and |stub| == 64, and both detect
every modification of the trimmed package or the stub on reconstruction.
"""

from __future__ import annotations

import hashlib
import hmac
import os
from typing import Sequence

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import AuthenticationFailure, IntegrityViolation, PackageTooSmall

KEY_SIZE = 32
TAIL_SIZE = 32
PIECE_SIZE = 32
STUB_SIZE = 64
CANARY = bytes(32)

GCM_NONCE_SIZE = 12
GCM_TAG_SIZE = 16
STUB_FILE_OVERHEAD = GCM_NONCE_SIZE + GCM_TAG_SIZE

SCHEME_BASIC = 0
SCHEME_ENHANCED = 1
SCHEME_NAMES = {SCHEME_BASIC: "basic", SCHEME_ENHANCED: "enhanced"}
SCHEME_IDS = {v: k for k, v in SCHEME_NAMES.items()}

_ZERO_COUNTER = bytes(16)


def _keystream_xor(key: bytes, data: bytes) -> bytes:
    # AES-256 in counter mode over a zero initial counter; encrypting data
    # directly is exactly data XOR keystream(key).
    enc = Cipher(algorithms.AES(key), modes.CTR(_ZERO_COUNTER)).encryptor()
    return enc.update(data) + enc.finalize()


def mask(key: bytes, length: int) -> bytes:
    """Deterministic pseudo-random stream: AES-256-CTR over a zero block."""
    if len(key) != KEY_SIZE:
        raise ValueError("mask key must be 32 bytes")
    if length < 1:
        raise ValueError("mask length must be >= 1")
    return _keystream_xor(key, bytes(length))


def _xor32(a: bytes, b: bytes) -> bytes:
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(32, "big")


def self_xor(data: bytes) -> bytes:
    """XOR-fold consecutive 32-byte pieces; a ragged tail is zero-extended."""
    if not data:
        raise ValueError("self_xor requires non-empty input")
    arr = np.frombuffer(data, dtype=np.uint8)
    pad = -len(arr) % PIECE_SIZE
    if pad:
        arr = np.concatenate([arr, np.zeros(pad, dtype=np.uint8)])
    return np.bitwise_xor.reduce(arr.reshape(-1, PIECE_SIZE), axis=0).tobytes()


def split_package(package: bytes, stub_size: int = STUB_SIZE) -> tuple[bytes, bytes]:
    """Split a serialized package into (trimmed, stub) at len - stub_size."""
    if len(package) <= stub_size:
        raise PackageTooSmall(
            f"package of {len(package)} bytes cannot yield a {stub_size}-byte stub")
    return package[:-stub_size], package[-stub_size:]


def join_package(trimmed: bytes, stub: bytes) -> bytes:
    return trimmed + stub


def basic_encrypt(chunk: bytes, key: bytes) -> tuple[bytes, bytes]:
    """Basic scheme: returns (trimmed, stub) with |trimmed| == |chunk|."""
    if not chunk:
        raise ValueError("cannot encrypt an empty chunk")
    if len(key) != KEY_SIZE:
        raise ValueError("chunk key must be 32 bytes")
    head = _keystream_xor(key, chunk + CANARY)
    tail = _xor32(key, hashlib.sha256(head).digest())
    return split_package(head + tail)


def basic_decrypt(trimmed: bytes, stub: bytes) -> bytes:
    """Invert basic_encrypt; raises IntegrityViolation on a broken canary."""
    package = join_package(trimmed, stub)
    if len(package) < 65:
        raise PackageTooSmall("basic package must be at least 65 bytes")
    head, tail = package[:-TAIL_SIZE], package[-TAIL_SIZE:]
    key = _xor32(hashlib.sha256(head).digest(), tail)
    plain = _keystream_xor(key, head)
    if not hmac.compare_digest(plain[-len(CANARY):], CANARY):
        raise IntegrityViolation("canary mismatch: trimmed package or stub was modified")
    return plain[:-len(CANARY)]


def mle_encrypt(chunk: bytes, key: bytes) -> bytes:
    """Deterministic symmetric encryption so identical inputs deduplicate."""
    if not chunk:
        raise ValueError("cannot encrypt an empty chunk")
    if len(key) != KEY_SIZE:
        raise ValueError("chunk key must be 32 bytes")
    return _keystream_xor(key, chunk)


def mle_decrypt(ciphertext: bytes, key: bytes) -> bytes:
    return _keystream_xor(key, ciphertext)


def enhanced_encrypt(chunk: bytes, key: bytes) -> tuple[bytes, bytes]:
    """Enhanced scheme: returns (trimmed, stub) with |trimmed| == |chunk|.

    The mask key is ``h = H(C1 || key)`` rather than the chunk key itself,
    so learning the chunk key alone does not unmask the package.
    """
    c1 = mle_encrypt(chunk, key)
    inner = c1 + key
    h = hashlib.sha256(inner).digest()
    head = _keystream_xor(h, inner)
    tail = _xor32(self_xor(head), h)
    return split_package(head + tail)


def enhanced_decrypt(trimmed: bytes, stub: bytes) -> bytes:
    """Invert enhanced_encrypt; raises IntegrityViolation if H(C1||key) != h."""
    package = join_package(trimmed, stub)
    if len(package) < 65:
        raise PackageTooSmall("enhanced package must be at least 65 bytes")
    head, tail = package[:-TAIL_SIZE], package[-TAIL_SIZE:]
    h = _xor32(self_xor(head), tail)
    inner = _keystream_xor(h, head)
    if not hmac.compare_digest(hashlib.sha256(inner).digest(), h):
        raise IntegrityViolation("hash key mismatch: trimmed package or stub was modified")
    c1, key = inner[:-KEY_SIZE], inner[-KEY_SIZE:]
    return mle_decrypt(c1, key)


def encrypt_chunk(scheme: int, chunk: bytes, key: bytes) -> tuple[bytes, bytes]:
    if scheme == SCHEME_BASIC:
        return basic_encrypt(chunk, key)
    if scheme == SCHEME_ENHANCED:
        return enhanced_encrypt(chunk, key)
    raise ValueError(f"unknown scheme id {scheme}")


def decrypt_chunk(scheme: int, trimmed: bytes, stub: bytes) -> bytes:
    if scheme == SCHEME_BASIC:
        return basic_decrypt(trimmed, stub)
    if scheme == SCHEME_ENHANCED:
        return enhanced_decrypt(trimmed, stub)
    raise ValueError(f"unknown scheme id {scheme}")


def encrypt_stub_file(stubs: Sequence[bytes], file_key: bytes) -> bytes:
    """Authenticated encryption of the concatenated stubs of one file.

    Layout: 12-byte random nonce || ciphertext || 16-byte tag. Stub order is
    preserved, so stub i always belongs to chunk i of the file recipe.
    """
    if len(file_key) != KEY_SIZE:
        raise ValueError("file key must be 32 bytes")
    plain = b"".join(stubs)
    nonce = os.urandom(GCM_NONCE_SIZE)
    return nonce + AESGCM(file_key).encrypt(nonce, plain, None)


def decrypt_stub_file(blob: bytes, file_key: bytes,
                      stub_size: int = STUB_SIZE) -> list[bytes]:
    """Invert encrypt_stub_file; raises AuthenticationFailure on wrong key."""
    if len(file_key) != KEY_SIZE:
        raise ValueError("file key must be 32 bytes")
    if len(blob) < STUB_FILE_OVERHEAD:
        raise AuthenticationFailure("stub file blob is truncated")
    nonce, rest = blob[:GCM_NONCE_SIZE], blob[GCM_NONCE_SIZE:]
    try:
        plain = AESGCM(file_key).decrypt(nonce, rest, None)
    except InvalidTag as exc:
        raise AuthenticationFailure("stub file failed authentication") from exc
    if len(plain) % stub_size:
        raise AuthenticationFailure("stub file plaintext is not stub-aligned")
    return [plain[i:i + stub_size] for i in range(0, len(plain), stub_size)]
