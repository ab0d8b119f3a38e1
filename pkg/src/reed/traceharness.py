"""Replay fingerprint traces through the full pipeline and measure savings.

A trace is a sequence of snapshots, each a list of (fingerprint hex, chunk
size) records. Chunks are synthesized by repeating the fingerprint bytes to
the recorded size, so equal records give equal content. Each snapshot is
uploaded as one file to an in-process server and the cumulative logical,
physical, and stub byte counts are reported after every snapshot, for both
per-chunk and similarity (per-segment) key generation.

Text format: one record per line as ``fp_hex<TAB>size``; lines beginning
``#snapshot`` separate snapshots; blank lines are ignored.
"""

from __future__ import annotations

import os
import random
import tempfile
from dataclasses import dataclass, field
from typing import Iterable

from . import caont
from .chunking import Chunk, SegmentationParams, fingerprint, segment
from .client import StoreSession
from .errors import TraceParseError
from .keygen import KeyManagerService, KeySession, ManagerKeyPair
from .rekeying import DerivationKeyPair, derive_file_key, new_state
from .server import StorageService
from .wire import LocalBackend

MODE_CHUNK = "chunk"
MODE_SIMILARITY = "similarity"
MAX_RECORD_SIZE = 65536


@dataclass(frozen=True)
class TraceRecord:
    fp_hex: str
    size: int


@dataclass
class SnapshotRow:
    snapshot: int
    logical: int
    physical: int
    stub: int

    @property
    def saving(self) -> float:
        if self.logical == 0:
            return 0.0
        return 1.0 - (self.physical + self.stub) / self.logical


@dataclass
class SavingsReport:
    mode: str
    rows: list[SnapshotRow] = field(default_factory=list)
    key_requests: int = 0

    @property
    def totals(self) -> SnapshotRow:
        return self.rows[-1]

    def to_tsv(self) -> str:
        lines = ["snapshot\tlogical\tphysical\tstub\tsaving"]
        for row in self.rows:
            lines.append(f"{row.snapshot}\t{row.logical}\t{row.physical}"
                         f"\t{row.stub}\t{row.saving:.6f}")
        return "\n".join(lines) + "\n"


def synthesize_chunk(fp_hex: str, size: int) -> bytes:
    """Repeat the fingerprint bytes up to the recorded chunk size."""
    if size < 1:
        raise ValueError("chunk size must be >= 1")
    pattern = bytes.fromhex(fp_hex)
    reps = size // len(pattern) + 1
    return (pattern * reps)[:size]


def parse_trace(text: str | Iterable[str],
                drop_zero_chunks: bool = False) -> list[list[TraceRecord]]:
    """Parse trace text into snapshots; raises TraceParseError with line number."""
    if isinstance(text, str):
        lines = text.splitlines()
    else:
        lines = list(text)
    snapshots: list[list[TraceRecord]] = []
    current: list[TraceRecord] | None = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#snapshot"):
            if current is not None:
                snapshots.append(current)
            current = []
            continue
        if line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise TraceParseError("expected fp_hex<TAB>size", lineno)
        fp_hex, size_text = parts
        try:
            pattern = bytes.fromhex(fp_hex)
        except ValueError:
            raise TraceParseError(f"bad fingerprint hex {fp_hex!r}", lineno) from None
        if not pattern:
            raise TraceParseError("empty fingerprint", lineno)
        try:
            size = int(size_text)
        except ValueError:
            raise TraceParseError(f"bad size {size_text!r}", lineno) from None
        if not 1 <= size <= MAX_RECORD_SIZE:
            raise TraceParseError(f"size {size} outside [1, {MAX_RECORD_SIZE}]", lineno)
        if drop_zero_chunks and not any(pattern):
            continue
        if current is None:
            current = []
        current.append(TraceRecord(fp_hex=fp_hex, size=size))
    if current is not None:
        snapshots.append(current)
    return snapshots


def load_trace(path: str, drop_zero_chunks: bool = False) -> list[list[TraceRecord]]:
    with open(path) as fh:
        return parse_trace(fh.read(), drop_zero_chunks)


def format_trace(snapshots: list[list[TraceRecord]]) -> str:
    lines = []
    for i, snap in enumerate(snapshots):
        lines.append(f"#snapshot {i}")
        for rec in snap:
            lines.append(f"{rec.fp_hex}\t{rec.size}")
    return "\n".join(lines) + "\n"


def generate_trace(seed: int, snapshots: int, chunks_per_snapshot: int,
                   mutation_rate: float) -> list[list[TraceRecord]]:
    """Deterministic synthetic trace; each snapshot mutates the given fraction
    of the previous snapshot's records to fresh unique content."""
    if not 0.0 <= mutation_rate <= 1.0:
        raise ValueError("mutation rate must be within [0, 1]")
    rng = random.Random(seed)

    def fresh() -> TraceRecord:
        return TraceRecord(fp_hex=f"{rng.getrandbits(48):012x}",
                           size=rng.randint(2048, 16384))

    out: list[list[TraceRecord]] = []
    current = [fresh() for _ in range(chunks_per_snapshot)]
    out.append(current)
    for _ in range(snapshots - 1):
        current = [fresh() if rng.random() < mutation_rate else rec
                   for rec in current]
        out.append(current)
    return out


def replay(snapshots: list[list[TraceRecord]], mode: str,
           avg_segment_size: int = 1_048_576, avg_chunk_size: int = 8192,
           workdir: str | None = None) -> SavingsReport:
    """Feed every snapshot through keying, encryption, and storage.

    Runs single-threaded against an in-process server so the report is a
    pure function of the trace and the parameters. Rows carry cumulative
    counters, mirroring how the server accumulates state over backups.
    """
    if mode not in (MODE_CHUNK, MODE_SIMILARITY):
        raise ValueError(f"unknown keying mode {mode!r}")
    workdir = workdir or tempfile.mkdtemp(prefix="reed-trace-")
    service = StorageService(os.path.join(workdir, "data"),
                             os.path.join(workdir, "keys"))
    manager = KeyManagerService(ManagerKeyPair.generate())
    keys = KeySession(LocalBackend(manager))
    store = StoreSession(LocalBackend(service))
    owner_keys = DerivationKeyPair.generate()
    seg_params = SegmentationParams(avg_size=avg_segment_size,
                                    avg_chunk_size=avg_chunk_size)

    report = SavingsReport(mode=mode)
    try:
        for snap_idx, records in enumerate(snapshots):
            chunks = [Chunk(synthesize_chunk(r.fp_hex, r.size)) for r in records]
            fps = [fingerprint(c) for c in chunks]
            if not chunks:
                per_chunk_keys = []
            elif mode == MODE_CHUNK:
                per_chunk_keys = keys.keys_for_fingerprints(fps)
            else:
                segments = segment(list(zip(chunks, fps)), seg_params)
                seg_keys = keys.segment_keys(segments)
                per_chunk_keys = []
                for seg_key, seg_obj in zip(seg_keys, segments):
                    per_chunk_keys.extend([seg_key] * len(seg_obj.chunks))

            stubs = []
            batch: list[tuple[bytes, bytes]] = []
            batch_bytes = 0
            for chunk, key in zip(chunks, per_chunk_keys):
                trimmed, stub = caont.enhanced_encrypt(chunk.data, key)
                stubs.append(stub)
                fp = fingerprint(trimmed)
                if batch and batch_bytes + len(trimmed) > 4 * 1024 * 1024:
                    store.put_packages(batch)
                    batch, batch_bytes = [], 0
                batch.append((fp, trimmed))
                batch_bytes += len(trimmed)
            if batch:
                store.put_packages(batch)

            state = new_state("trace", owner_keys)
            stub_blob = caont.encrypt_stub_file(stubs, derive_file_key(state))
            store.put_stub(f"trace-{snap_idx:06d}", 0, stub_blob)

            stats = store.stats()
            report.rows.append(SnapshotRow(snapshot=snap_idx,
                                           logical=stats.logical_bytes,
                                           physical=stats.physical_bytes,
                                           stub=stats.stub_bytes))
        report.key_requests = keys.request_count
    finally:
        service.close()
    return report
