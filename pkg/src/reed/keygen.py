"""Server-aided chunk key generation over blinded RSA.

The key manager holds a system-wide RSA pair. A client multiplies a chunk
fingerprint by ``r**e`` for a fresh random ``r``, the manager raises the
blinded value to ``d`` under per-client rate limiting, and the client strips
the blinding with ``r**-1`` and hashes the result into a 32-byte chunk key.
The manager never sees the fingerprint; the client never sees ``d``; equal
fingerprints give equal keys across clients, which is what makes the
resulting ciphertexts deduplicable.

In similarity mode a single request per segment is issued, using the
segment's minimum fingerprint as its representative.
"""

from __future__ import annotations

import hashlib
import math
import secrets
import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Protocol

from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import rsa

from . import wire
from .chunking import Segment
from .errors import InvalidOperand, RateLimited, SignatureInvalid, ZeroFingerprint

DEFAULT_MODULUS_BITS = 1024
DEFAULT_RATE_CAPACITY = 10_000
DEFAULT_RATE_REFILL = 10_000.0
DEFAULT_BATCH_CAP = 256


@dataclass(frozen=True)
class ManagerPublicKey:
    n: int
    e: int

    @property
    def width(self) -> int:
        """Byte width of wire values and of the hashed key preimage."""
        return (self.n.bit_length() + 7) // 8


@dataclass(frozen=True)
class ManagerKeyPair:
    n: int
    e: int
    d: int

    @classmethod
    def generate(cls, bits: int = DEFAULT_MODULUS_BITS) -> "ManagerKeyPair":
        key = rsa.generate_private_key(public_exponent=65537, key_size=bits)
        priv = key.private_numbers()
        pub = priv.public_numbers
        return cls(n=pub.n, e=pub.e, d=priv.d)

    @property
    def public(self) -> ManagerPublicKey:
        return ManagerPublicKey(n=self.n, e=self.e)

    def save_pem(self, path: str) -> None:
        # Reconstruct the full CRT form so the key round-trips through PEM.
        p, q = rsa.rsa_recover_prime_factors(self.n, self.e, self.d)
        priv = rsa.RSAPrivateNumbers(
            p=p, q=q, d=self.d,
            dmp1=rsa.rsa_crt_dmp1(self.d, p),
            dmq1=rsa.rsa_crt_dmq1(self.d, q),
            iqmp=rsa.rsa_crt_iqmp(p, q),
            public_numbers=rsa.RSAPublicNumbers(self.e, self.n),
        ).private_key()
        pem = priv.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )
        with open(path, "wb") as fh:
            fh.write(pem)

    @classmethod
    def load_pem(cls, path: str) -> "ManagerKeyPair":
        with open(path, "rb") as fh:
            key = serialization.load_pem_private_key(fh.read(), password=None)
        priv = key.private_numbers()
        return cls(n=priv.public_numbers.n, e=priv.public_numbers.e, d=priv.d)

    @classmethod
    def load_or_create(cls, path: str, bits: int = DEFAULT_MODULUS_BITS) -> "ManagerKeyPair":
        import os
        if os.path.exists(path):
            return cls.load_pem(path)
        pair = cls.generate(bits)
        pair.save_pem(path)
        return pair


@dataclass
class BlindedRequest:
    """Client-held blinding context; ``r`` itself never leaves the client."""

    fp_int: int
    value: int
    r_inv: int
    pub: ManagerPublicKey


def blind(fp: bytes, pub: ManagerPublicKey, r: int | None = None) -> BlindedRequest:
    """Blind a fingerprint for the manager: value = fp * r**e mod n.

    ``r`` is drawn fresh and uniformly from the units mod n; passing it
    explicitly is a test hook (r=1 sends the bare fingerprint).
    """
    fp_int = int.from_bytes(fp, "big")
    if fp_int == 0:
        raise ZeroFingerprint("fingerprint encodes to 0; input is corrupt")
    if fp_int >= pub.n:
        raise InvalidOperand("fingerprint does not fit below the modulus")
    if r is None:
        while True:
            r = secrets.randbelow(pub.n - 1) + 1
            if math.gcd(r, pub.n) == 1:
                break
    r_inv = pow(r, -1, pub.n)
    value = fp_int * pow(r, pub.e, pub.n) % pub.n
    return BlindedRequest(fp_int=fp_int, value=value, r_inv=r_inv, pub=pub)


def derive_chunk_key(s: int, width: int) -> bytes:
    """Hash the unblinded signature into a 32-byte chunk key.

    The preimage is the fixed-width big-endian encoding of ``s`` (the
    modulus width), so leading zeros cannot create ambiguity.
    """
    return hashlib.sha256(s.to_bytes(width, "big")).digest()


def unblind(signed: int, req: BlindedRequest) -> bytes:
    """Strip the blinding and verify s**e == fp before hashing into a key."""
    if not 1 <= signed <= req.pub.n - 1:
        raise InvalidOperand("signed value outside the modulus range")
    s = signed * req.r_inv % req.pub.n
    if pow(s, req.pub.e, req.pub.n) != req.fp_int:
        raise SignatureInvalid("manager response failed verification")
    return derive_chunk_key(s, req.pub.width)


class TokenBucket:
    """Per-client token bucket; thread-safe, injectable clock for tests."""

    def __init__(self, capacity: int = DEFAULT_RATE_CAPACITY,
                 refill_rate: float = DEFAULT_RATE_REFILL,
                 clock: Callable[[], float] = time.monotonic):
        self.capacity = capacity
        self.refill_rate = refill_rate
        self._clock = clock
        self._lock = threading.Lock()
        self._state: dict[str, tuple[float, float]] = {}  # client -> (tokens, ts)

    def try_acquire(self, client_id: str, n: int = 1) -> bool:
        now = self._clock()
        with self._lock:
            tokens, ts = self._state.get(client_id, (float(self.capacity), now))
            tokens = min(float(self.capacity), tokens + (now - ts) * self.refill_rate)
            if tokens < n:
                self._state[client_id] = (tokens, now)
                return False
            self._state[client_id] = (tokens - n, now)
            return True

    def tokens(self, client_id: str) -> float:
        now = self._clock()
        with self._lock:
            tokens, ts = self._state.get(client_id, (float(self.capacity), now))
            return min(float(self.capacity), tokens + (now - ts) * self.refill_rate)


class KeyManagerService:
    """Signing side of the protocol plus its wire frame handler."""

    def __init__(self, keypair: ManagerKeyPair,
                 rate_capacity: int = DEFAULT_RATE_CAPACITY,
                 rate_refill: float = DEFAULT_RATE_REFILL,
                 batch_cap: int = DEFAULT_BATCH_CAP,
                 clock: Callable[[], float] = time.monotonic):
        self.keypair = keypair
        self.limiter = TokenBucket(rate_capacity, rate_refill, clock)
        self.batch_cap = batch_cap
        self._signed_count = 0
        self._count_lock = threading.Lock()

    @property
    def public_key(self) -> ManagerPublicKey:
        return self.keypair.public

    @property
    def signed_count(self) -> int:
        return self._signed_count

    def sign(self, blinded: int, client_id: str) -> int:
        return self.sign_batch([blinded], client_id)[0]

    def sign_batch(self, values: list[int], client_id: str) -> list[int]:
        """Element-wise signature; consumes one limiter token per value."""
        if len(values) > self.batch_cap:
            raise InvalidOperand(f"batch of {len(values)} exceeds cap {self.batch_cap}")
        for v in values:
            if not 1 <= v <= self.keypair.n - 1:
                raise InvalidOperand("blinded value outside the modulus range")
        if values and not self.limiter.try_acquire(client_id, len(values)):
            raise RateLimited(f"client {client_id} exceeded the key generation rate")
        out = [pow(v, self.keypair.d, self.keypair.n) for v in values]
        with self._count_lock:
            self._signed_count += len(values)
        return out

    def handle_frame(self, msg_type: int, payload: bytes, client_id: str) -> tuple[int, bytes]:
        width = self.public_key.width
        try:
            if msg_type == wire.MSG_KEYGEN:
                values = wire.decode_int_list(payload, width)
                signed = self.sign_batch(values, client_id)
                return wire.MSG_KEYGEN | wire.RESP_FLAG, wire.encode_int_list(signed, width)
            if msg_type == wire.MSG_MANAGER_PUBKEY:
                pub = self.public_key
                body = (wire.prefixed(pub.n.to_bytes(width, "big"))
                        + wire.prefixed(pub.e.to_bytes(4, "big")))
                return wire.MSG_MANAGER_PUBKEY | wire.RESP_FLAG, body
        except RateLimited as exc:
            raise wire.ServiceError(wire.ERR_RATE_LIMITED, str(exc)) from exc
        except InvalidOperand as exc:
            raise wire.ServiceError(wire.ERR_BAD_REQUEST, str(exc)) from exc
        raise wire.ServiceError(wire.ERR_BAD_REQUEST, f"unknown message type {msg_type:#x}")


class ManagerBackend(Protocol):
    def request(self, msg_type: int, payload: bytes) -> tuple[int, bytes]: ...


class KeySession:
    """Client-side session: blinds, submits batches, unblinds.

    Works over any backend exposing request(); the in-process LocalBackend
    and the TCP connection run the exact same codecs.
    """

    def __init__(self, backend: ManagerBackend, batch_cap: int = DEFAULT_BATCH_CAP):
        self._backend = backend
        self.batch_cap = batch_cap
        self._pub: ManagerPublicKey | None = None
        self.request_count = 0  # fingerprints submitted for signing

    @property
    def public_key(self) -> ManagerPublicKey:
        if self._pub is None:
            msg_type, payload = self._backend.request(wire.MSG_MANAGER_PUBKEY, b"")
            wire.raise_for_frame(msg_type, payload)
            r = wire.Reader(payload)
            n = int.from_bytes(r.bytes_u32(), "big")
            e = int.from_bytes(r.bytes_u32(), "big")
            r.done()
            self._pub = ManagerPublicKey(n=n, e=e)
        return self._pub

    def _sign_values(self, values: list[int]) -> list[int]:
        payload = wire.encode_int_list(values, self.public_key.width)
        msg_type, body = self._backend.request(wire.MSG_KEYGEN, payload)
        wire.raise_for_frame(msg_type, body)
        signed = wire.decode_int_list(body, self.public_key.width)
        if len(signed) != len(values):
            raise SignatureInvalid("manager returned a short batch")
        return signed

    def keys_for_fingerprints(self, fps: Iterable[bytes]) -> list[bytes]:
        """One chunk key per fingerprint, in order, batched on the wire."""
        pub = self.public_key
        requests = [blind(fp, pub) for fp in fps]
        keys: list[bytes] = []
        for i in range(0, len(requests), self.batch_cap):
            batch = requests[i:i + self.batch_cap]
            signed = self._sign_values([req.value for req in batch])
            self.request_count += len(batch)
            keys.extend(unblind(s, req) for s, req in zip(signed, batch))
        return keys

    def key_for_fingerprint(self, fp: bytes) -> bytes:
        return self.keys_for_fingerprints([fp])[0]

    def segment_key(self, seg: Segment) -> bytes:
        """Key a whole segment by its minimum (representative) fingerprint."""
        return self.key_for_fingerprint(seg.representative)

    def segment_keys(self, segments: Iterable[Segment]) -> list[bytes]:
        return self.keys_for_fingerprints([s.representative for s in segments])
