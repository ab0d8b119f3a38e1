"""Acceptance suite: one test per criterion, one printed line per criterion.

Each test prints ``[acceptance] criterion NN <name>: PASS`` (or FAIL with the
measured value) to the real stdout, so the lines show up even under pytest
capture. Criterion 10 carries a known-infeasible clause; see the failure
message for the measured numbers.
"""

import hashlib
import os
import random
import sys
import time

import pytest

from reed import caont
from reed.chunking import (ChunkingParams, SegmentationParams, chunk_stream,
                           fingerprint, segment)
from reed.client import download, rekey_file, upload
from reed.errors import AccessDenied, AtInitialState, IntegrityViolation
from reed.keygen import KeyManagerService, KeySession, blind, unblind
from reed.rekeying import (DerivationKeyPair, derive_file_key, new_state,
                           unwind, unwind_to, unwrap_state, wind)
from reed.traceharness import (MODE_CHUNK, MODE_SIMILARITY, TraceRecord,
                               generate_trace, replay, synthesize_chunk)
from reed.wire import LocalBackend


def report(number: int, name: str, ok: bool = True, detail: str = "") -> None:
    line = f"[acceptance] criterion {number:2d} {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f"  ({detail})"
    print(line, file=sys.__stdout__, flush=True)


def tree_digest(root: str) -> str:
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            h.update(os.path.relpath(path, root).encode())
            with open(path, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def write_file(tmp_path, name: str, data: bytes) -> str:
    path = os.path.join(str(tmp_path), name)
    with open(path, "wb") as fh:
        fh.write(data)
    return path


def test_criterion_01_round_trip_both_schemes():
    rng = random.Random(0x5EED01)
    start = time.monotonic()
    for _ in range(1000):
        length = rng.randint(1, 16384)
        chunk = rng.randbytes(length)
        key = rng.randbytes(32)
        for scheme in (caont.SCHEME_BASIC, caont.SCHEME_ENHANCED):
            trimmed, stub = caont.encrypt_chunk(scheme, chunk, key)
            assert caont.decrypt_chunk(scheme, trimmed, stub) == chunk
    elapsed = time.monotonic() - start
    assert elapsed < 30.0
    report(1, "round-trip, 1000 chunks, both schemes", detail=f"{elapsed:.1f}s")


def test_criterion_02_stub_overhead_exact():
    chunk = os.urandom(8192)
    key = os.urandom(32)
    for scheme in (caont.SCHEME_BASIC, caont.SCHEME_ENHANCED):
        trimmed, stub = caont.encrypt_chunk(scheme, chunk, key)
        assert len(trimmed) == 8192
        assert len(stub) == 64
        assert len(stub) / len(chunk) == 64 / 8192 == 0.0078125
    report(2, "stub overhead 64/8192 == 0.78125%")


def test_criterion_03_integrity_completeness():
    rng = random.Random(0x5EED03)
    start = time.monotonic()
    for _ in range(20):
        chunk = rng.randbytes(rng.randint(1, 128))
        key = rng.randbytes(32)
        for scheme in (caont.SCHEME_BASIC, caont.SCHEME_ENHANCED):
            trimmed, stub = caont.encrypt_chunk(scheme, chunk, key)
            package = trimmed + stub
            for bit in range(len(package) * 8):
                mod = bytearray(package)
                mod[bit // 8] ^= 1 << (bit % 8)
                with pytest.raises(IntegrityViolation):
                    caont.decrypt_chunk(scheme, bytes(mod[:len(trimmed)]),
                                        bytes(mod[len(trimmed):]))
        # the even-piece same-bit pattern keeps the xor-fold intact but must
        # still trip the enhanced scheme's hash comparison
        trimmed, stub = caont.enhanced_encrypt(chunk, key)
        package = bytearray(trimmed + stub)
        head_len = len(package) - 32
        pieces = (head_len + 31) // 32
        assert pieces >= 2
        package[0] ^= 0x10
        package[32] ^= 0x10
        with pytest.raises(IntegrityViolation):
            caont.enhanced_decrypt(bytes(package[:len(trimmed)]),
                                   bytes(package[len(trimmed):]))
    elapsed = time.monotonic() - start
    assert elapsed < 60.0
    report(3, "integrity: every single-bit flip detected", detail=f"{elapsed:.1f}s")


def test_criterion_04_oprf_matches_direct_exponentiation(manager_keypair):
    service = KeyManagerService(manager_keypair)
    session = KeySession(LocalBackend(service))
    rng = random.Random(0x5EED04)
    width = manager_keypair.public.width
    for _ in range(100):
        fp = rng.randbytes(32)
        expected = hashlib.sha256(
            pow(int.from_bytes(fp, "big"), manager_keypair.d,
                manager_keypair.n).to_bytes(width, "big")).digest()
        assert session.key_for_fingerprint(fp) == expected
    fp = rng.randbytes(32)
    first = blind(fp, manager_keypair.public)
    second = blind(fp, manager_keypair.public)
    assert first.value != second.value
    assert unblind(service.sign(first.value, "a"), first) == \
        unblind(service.sign(second.value, "b"), second)
    report(4, "key protocol equals direct RSA oracle, blinding-independent")


def test_criterion_05_key_regression_and_decryptability():
    owner = DerivationKeyPair.generate()
    base = new_state("alice", owner)
    for k in range(1, 6):
        forward = base
        for _ in range(k):
            forward = wind(forward, owner)
        back = forward
        for _ in range(k):
            back = unwind(back)
        assert back == base

    states = [base]
    for _ in range(4):
        states.append(wind(states[-1], owner))
    stub_blobs = [caont.encrypt_stub_file([os.urandom(64)], derive_file_key(s))
                  for s in states]
    for held in range(5):
        for target in range(5):
            if target <= held:
                key = derive_file_key(unwind_to(states[held], target))
                caont.decrypt_stub_file(stub_blobs[target], key)
            else:
                with pytest.raises(AtInitialState):
                    unwind_to(states[held], target)
                for v in range(held + 1):
                    key = derive_file_key(unwind_to(states[held], v))
                    with pytest.raises(Exception):
                        caont.decrypt_stub_file(stub_blobs[target], key)

    # a revoked holder of version v cannot obtain version v+1 at all: the new
    # wrap has no entry for them
    from reed.rekeying import generate_access_keypair, wrap_state
    alice_key, bob_key = generate_access_keypair(), generate_access_keypair()
    next_state = wind(states[-1], owner)
    new_wrap = wrap_state(next_state, ["alice"],
                          {"alice": alice_key.public_key()})
    with pytest.raises(AccessDenied):
        unwrap_state(new_wrap, bob_key, "bob")
    report(5, "key regression chain and decryptability matrix")


def test_criterion_06_active_rekey_preserves_dedup(cluster, identities, tmp_path):
    cluster.register(*identities.values())
    data = random.Random(0x5EED06).randbytes(64 << 20)
    path = write_file(tmp_path, "big.bin", data)
    store = cluster.store_session()
    fid = upload(path, policy=["alice", "bob"], identity=identities["alice"],
                 store=store, keys=cluster.key_session(),
                 chunk_params=ChunkingParams(mode="fixed", fixed_size=8192))
    _, wrapped = store.get_state(fid)
    old_state = unwrap_state(wrapped, identities["alice"].access_key, "alice")
    old_file_key = derive_file_key(old_state)
    _, old_stub = store.get_stub(fid)
    containers = os.path.join(cluster.data_root, "containers")
    before = tree_digest(containers)

    rekey_file(fid, new_policy=["alice"], mode="active",
               identity=identities["alice"], store=store)

    assert tree_digest(containers) == before
    version, new_stub = store.get_stub(fid)
    assert version == 1 and new_stub != old_stub
    with pytest.raises(Exception):
        caont.decrypt_stub_file(new_stub, old_file_key)
    assert download(fid, identity=identities["alice"], store=store) == data
    with pytest.raises(AccessDenied):
        download(fid, identity=identities["bob"], store=store)
    report(6, "active rekey of 64MB: zero container bytes changed")


def test_criterion_07_similarity_key_request_reduction(cluster, identities,
                                                       tmp_path):
    cluster.register(identities["alice"])
    data = random.Random(0x5EED07).randbytes(64 << 20)
    path = write_file(tmp_path, "unique.bin", data)
    chunk_params = ChunkingParams(avg_size=8192)
    seg_params = SegmentationParams(avg_size=1_048_576, avg_chunk_size=8192)

    chunks = chunk_stream(data, chunk_params)
    segments = segment([(c, fingerprint(c)) for c in chunks], seg_params)

    sim_keys = cluster.key_session()
    upload(path, policy=["alice"], identity=identities["alice"],
           store=cluster.store_session(), keys=sim_keys, keying="similarity",
           chunk_params=chunk_params, seg_params=seg_params)
    assert sim_keys.request_count == len(segments)

    chunk_keys = cluster.key_session()
    upload(path, policy=["alice"], identity=identities["alice"],
           store=cluster.store_session(), keys=chunk_keys, keying="chunk",
           chunk_params=chunk_params, seg_params=seg_params)
    assert chunk_keys.request_count == len(chunks)
    assert chunk_keys.request_count >= 100 * sim_keys.request_count
    report(7, "segment keying request count",
           detail=f"{sim_keys.request_count} vs {chunk_keys.request_count} "
                  f"({chunk_keys.request_count / sim_keys.request_count:.0f}x)")


def brute_force_physical(snapshots, mode: str, params: SegmentationParams) -> int:
    """Bytes of distinct (chunk content, key id) pairs, counted directly."""
    stored = set()
    total = 0
    for snap in snapshots:
        chunks = [synthesize_chunk(r.fp_hex, r.size) for r in snap]
        fps = [hashlib.sha256(c).digest() for c in chunks]
        if mode == MODE_CHUNK:
            key_ids = fps
        else:
            key_ids = []
            group: list[int] = []
            size = 0
            for i, fp in enumerate(fps):
                group.append(i)
                size += len(chunks[i])
                fire = (size >= params.min_size
                        and int.from_bytes(fp, "big") % params.divisor
                        == params.divisor - 1)
                if size > params.max_size or fire or i == len(fps) - 1:
                    rep = min(fps[j] for j in group)
                    key_ids.extend([rep] * len(group))
                    group, size = [], 0
        for chunk, key_id in zip(chunks, key_ids):
            ident = (chunk, key_id)
            if ident not in stored:
                stored.add(ident)
                total += len(chunk)
    return total


def test_criterion_08_extreme_binning_dedup_law():
    size = 8192
    params = SegmentationParams(avg_size=4 * size, avg_chunk_size=size)

    def digest_of(fp_hex):
        return hashlib.sha256(synthesize_chunk(fp_hex, size)).digest()

    def residue(fp_hex):
        return int.from_bytes(digest_of(fp_hex), "big") % params.divisor

    pool = [f"{i:012x}" for i in range(1, 400)]
    boundary = sorted((fp for fp in pool if residue(fp) == 3), key=digest_of)
    interior = sorted((fp for fp in pool if residue(fp) != 3), key=digest_of)
    a = min(pool, key=digest_of)
    d = boundary[0] if boundary[0] != a else boundary[1]
    b, c = [fp for fp in interior if digest_of(fp) > digest_of(a)][:2]
    e, f = [fp for fp in interior if digest_of(fp) > digest_of(d)][:2]
    t1 = [fp for fp in boundary if fp != d][0]
    t2 = [fp for fp in boundary if fp not in (d, t1)
          and digest_of(fp) > digest_of(d)][0]

    snap = [TraceRecord(x, size) for x in [a, b, c, t1, d, e, f, t2, a, b, c, d]]
    rep = replay([snap], MODE_SIMILARITY, avg_segment_size=4 * size,
                 avg_chunk_size=size)
    assert rep.key_requests == 3  # segments keyed A, D, A
    assert rep.totals.physical == 9 * size  # A, B, C once; D twice
    assert rep.totals.physical == brute_force_physical([snap], MODE_SIMILARITY,
                                                       params)

    # oracle equivalence over a generated trace of at most 1,000 chunks
    trace = generate_trace(seed=0x5EED08, snapshots=4, chunks_per_snapshot=120,
                           mutation_rate=0.3)
    assert sum(len(s) for s in trace) <= 1000
    for mode in (MODE_CHUNK, MODE_SIMILARITY):
        got = replay(trace, mode, avg_segment_size=32768, avg_chunk_size=8192)
        want = brute_force_physical(trace, mode,
                                    SegmentationParams(avg_size=32768,
                                                       avg_chunk_size=8192))
        assert got.totals.physical == want
    report(8, "extreme-binning A/D/A law and brute-force oracle equivalence")


def test_criterion_09_exact_duplicate_snapshot():
    snap = generate_trace(seed=0x5EED09, snapshots=1, chunks_per_snapshot=150,
                          mutation_rate=0.0)[0]
    rep = replay([snap, snap], MODE_SIMILARITY, avg_segment_size=131072,
                 avg_chunk_size=8192)
    first, second = rep.rows
    assert second.physical - first.physical == 0
    assert second.stub - first.stub == 64 * len(snap) + caont.STUB_FILE_OVERHEAD
    report(9, "duplicate snapshot adds 0 physical and 64*n+28 stub bytes")


def test_criterion_10_mode_comparison_ordering():
    trace = generate_trace(seed=0x5EED10, snapshots=10, chunks_per_snapshot=600,
                           mutation_rate=0.1)  # 90% inter-snapshot overlap
    sim = replay(trace, MODE_SIMILARITY)
    chunk = replay(trace, MODE_CHUNK)
    assert sim.totals.physical >= chunk.totals.physical
    assert sim.totals.stub == chunk.totals.stub
    assert chunk.totals.saving > 0.80
    if not sim.totals.saving > 0.80:
        report(10, "mode comparison ordering", ok=False,
               detail=f"similarity saving {sim.totals.saving:.3f} <= 0.80; "
                      f"chunk saving {chunk.totals.saving:.3f}; "
                      "infeasible at 90% iid overlap, see decisions ledger")
        pytest.fail(
            "criterion 10: ordering, stub equality, and chunk-mode saving all "
            f"hold, but similarity saving is {sim.totals.saving:.3f}. With 10 "
            "snapshots at 90% iid inter-snapshot overlap, unique data is 19% "
            "of logical, and a changed segment representative re-encrypts the "
            "whole segment, adding roughly twice the mutation rate in physical "
            "bytes per snapshot regardless of segment size. The >80% clause "
            "is unattainable for segment keying on this trace shape.")
    report(10, "mode comparison ordering")


def test_criterion_11_basic_scheme_weakness():
    rng = random.Random(0x5EED11)
    key = rng.randbytes(32)
    m1, m2 = rng.randbytes(300), rng.randbytes(300)
    plain_xor = bytes(a ^ b for a, b in
                      zip(m1 + caont.CANARY, m2 + caont.CANARY))[:300]
    b1, _ = caont.basic_encrypt(m1, key)
    b2, _ = caont.basic_encrypt(m2, key)
    assert bytes(a ^ b for a, b in zip(b1, b2)) == plain_xor
    e1, _ = caont.enhanced_encrypt(m1, key)
    e2, _ = caont.enhanced_encrypt(m2, key)
    assert bytes(a ^ b for a, b in zip(e1, e2)) != plain_xor
    report(11, "shared-key XOR leak in basic scheme, absent in enhanced")


def test_criterion_12_durability_and_idempotence(cluster, identities, tmp_path):
    cluster.register(identities["alice"])
    data = random.Random(0x5EED12).randbytes(2 << 20)
    path = write_file(tmp_path, "durable.bin", data)
    fid = upload(path, policy=["alice"], identity=identities["alice"],
                 store=cluster.store_session(), keys=cluster.key_session())
    before = cluster.store_session().stats()

    cluster.restart_storage()

    store = cluster.store_session()
    assert store.stats().physical_bytes == before.physical_bytes
    assert download(fid, identity=identities["alice"], store=store) == data
    upload(path, policy=["alice"], identity=identities["alice"],
           store=store, keys=cluster.key_session())
    assert store.stats().physical_bytes == before.physical_bytes
    report(12, "restart durability and idempotent re-upload")
