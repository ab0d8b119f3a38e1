"""Dedup server: fingerprint index, container packing, blob stores, service.

Trimmed packages are deduplicated by their SHA-256 fingerprint and packed
into append-only 4MB containers. Recipes and stub files live under the data
root; wrapped key states and user public keys live under a separate key
root. The index is an append-only log replayed into memory at startup, so
acknowledged writes survive a restart.
"""

from __future__ import annotations

import hashlib
import json
import os
import socketserver
import struct
import threading
from dataclasses import dataclass

from . import wire
from .errors import (FingerprintMismatch, InvalidOperand, NotFound,
                     VersionConflict)

CONTAINER_SIZE = 4 * 1024 * 1024
_INDEX_RECORD = struct.Struct(">32sIII")  # fp, container id, offset, length


class FingerprintIndex:
    """fingerprint -> (container, offset, length), backed by an append log."""

    def __init__(self, path: str):
        self._path = path
        self._table: dict[bytes, tuple[int, int, int]] = {}
        if os.path.exists(path):
            with open(path, "rb") as fh:
                data = fh.read()
            usable = len(data) - len(data) % _INDEX_RECORD.size
            for off in range(0, usable, _INDEX_RECORD.size):
                fp, cid, coff, length = _INDEX_RECORD.unpack_from(data, off)
                self._table[fp] = (cid, coff, length)
        self._fh = open(path, "ab")

    def __len__(self) -> int:
        return len(self._table)

    def __contains__(self, fp: bytes) -> bool:
        return fp in self._table

    def get(self, fp: bytes) -> tuple[int, int, int]:
        try:
            return self._table[fp]
        except KeyError:
            raise NotFound(f"unknown fingerprint {fp.hex()}") from None

    def entries(self):
        return self._table.items()

    def append(self, records: list[tuple[bytes, int, int, int]]) -> None:
        buf = b"".join(_INDEX_RECORD.pack(*rec) for rec in records)
        self._fh.write(buf)
        self._fh.flush()
        os.fsync(self._fh.fileno())
        for fp, cid, coff, length in records:
            self._table[fp] = (cid, coff, length)

    def close(self) -> None:
        self._fh.close()


class ContainerStore:
    """Append-only container files; rotation keeps each at or below capacity."""

    def __init__(self, root: str, capacity: int = CONTAINER_SIZE):
        self.root = root
        self.capacity = capacity
        os.makedirs(root, exist_ok=True)
        self._open_id = 0
        self._open_size = 0
        self._fh = None

    def _path(self, cid: int) -> str:
        return os.path.join(self.root, f"{cid:08d}.bin")

    def recover(self, index: FingerprintIndex) -> None:
        """Resume the highest container; drop any unacknowledged tail."""
        ends: dict[int, int] = {}
        for _, (cid, off, length) in index.entries():
            ends[cid] = max(ends.get(cid, 0), off + length)
        if ends:
            self._open_id = max(ends)
            self._open_size = ends[self._open_id]
            path = self._path(self._open_id)
            if os.path.getsize(path) > self._open_size:
                with open(path, "r+b") as fh:
                    fh.truncate(self._open_size)

    def _ensure_open(self):
        if self._fh is None:
            self._fh = open(self._path(self._open_id), "ab")

    def append(self, data: bytes) -> tuple[int, int]:
        if len(data) > self.capacity:
            raise ValueError("item exceeds container capacity")
        if self._open_size and self._open_size + len(data) > self.capacity:
            self.flush()
            self._fh.close()
            self._fh = None
            self._open_id += 1
            self._open_size = 0
        self._ensure_open()
        offset = self._open_size
        self._fh.write(data)
        self._open_size += len(data)
        return self._open_id, offset

    def flush(self) -> None:
        if self._fh is not None:
            self._fh.flush()
            os.fsync(self._fh.fileno())

    def read(self, cid: int, offset: int, length: int) -> bytes:
        return self.read_many(cid, [(offset, length)])[0]

    def read_many(self, cid: int, spans: list[tuple[int, int]]) -> list[bytes]:
        """Read several (offset, length) spans with one container open."""
        if cid == self._open_id:
            self.flush()
        out = []
        with open(self._path(cid), "rb") as fh:
            for offset, length in spans:
                fh.seek(offset)
                out.append(fh.read(length))
        return out

    @property
    def count(self) -> int:
        return self._open_id + (1 if self._open_size else 0)

    def close(self) -> None:
        if self._fh is not None:
            self.flush()
            self._fh.close()
            self._fh = None


class BlobStore:
    """Versioned id-addressed blobs with an atomically advanced CURRENT pointer."""

    def __init__(self, root: str):
        self.root = root
        os.makedirs(root, exist_ok=True)
        self._lock = threading.Lock()
        self._sizes: dict[str, int] = {}  # kind -> stored bytes
        for kind in os.listdir(root):
            total = 0
            kind_dir = os.path.join(root, kind)
            for obj in os.listdir(kind_dir):
                obj_dir = os.path.join(kind_dir, obj)
                for name in os.listdir(obj_dir):
                    if name.endswith(".bin"):
                        total += os.path.getsize(os.path.join(obj_dir, name))
            self._sizes[kind] = total

    def _obj_dir(self, kind: str, obj_id: str) -> str:
        return os.path.join(self.root, kind, obj_id.encode("utf-8").hex())

    @staticmethod
    def _atomic_write(path: str, data: bytes) -> None:
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    def _current(self, obj_dir: str) -> int | None:
        try:
            with open(os.path.join(obj_dir, "CURRENT"), "rb") as fh:
                return int(fh.read().decode("ascii"))
        except FileNotFoundError:
            return None

    def put(self, kind: str, obj_id: str, version: int, blob: bytes,
            expected_prev: int | None = None) -> None:
        obj_dir = self._obj_dir(kind, obj_id)
        with self._lock:
            os.makedirs(obj_dir, exist_ok=True)
            current = self._current(obj_dir)
            if expected_prev is not None and current != expected_prev:
                raise VersionConflict(
                    f"{kind}/{obj_id}: current version is {current}, expected {expected_prev}")
            path = os.path.join(obj_dir, f"{version:010d}.bin")
            old = os.path.getsize(path) if os.path.exists(path) else 0
            self._atomic_write(path, blob)
            self._sizes[kind] = self._sizes.get(kind, 0) + len(blob) - old
            if current is None or version > current:
                self._atomic_write(os.path.join(obj_dir, "CURRENT"),
                                   str(version).encode("ascii"))

    def get(self, kind: str, obj_id: str, version: int | None = None) -> tuple[int, bytes]:
        obj_dir = self._obj_dir(kind, obj_id)
        with self._lock:
            v = self._current(obj_dir) if version is None else version
            if v is None:
                raise NotFound(f"{kind}/{obj_id} does not exist")
            path = os.path.join(obj_dir, f"{v:010d}.bin")
            try:
                with open(path, "rb") as fh:
                    return v, fh.read()
            except FileNotFoundError:
                raise NotFound(f"{kind}/{obj_id} has no version {v}") from None

    def stored_bytes(self, kind: str) -> int:
        with self._lock:
            return self._sizes.get(kind, 0)


@dataclass(frozen=True)
class ServerStats:
    logical_bytes: int
    physical_bytes: int
    stub_bytes: int
    container_count: int
    index_entries: int

    @property
    def saving(self) -> float:
        if self.logical_bytes == 0:
            return 0.0
        return 1.0 - (self.physical_bytes + self.stub_bytes) / self.logical_bytes


_BLOB_KINDS = {
    wire.MSG_RECIPE: "recipe",
    wire.MSG_STUB_FILE: "stub",
    wire.MSG_WRAPPED_STATE: "state",
    wire.MSG_USER_KEY: "userkey",
}
_KEY_KINDS = {"state", "userkey"}


class StorageService:
    """Message-level service; the TCP layer and tests share this object."""

    def __init__(self, data_root: str, key_root: str,
                 container_size: int = CONTAINER_SIZE):
        os.makedirs(data_root, exist_ok=True)
        os.makedirs(key_root, exist_ok=True)
        self.data_root = data_root
        self.key_root = key_root
        self._lock = threading.RLock()
        self.index = FingerprintIndex(os.path.join(data_root, "index.log"))
        self.containers = ContainerStore(os.path.join(data_root, "containers"),
                                         container_size)
        self.containers.recover(self.index)
        self.data_blobs = BlobStore(os.path.join(data_root, "blobs"))
        self.key_blobs = BlobStore(os.path.join(key_root, "blobs"))
        self._counters_path = os.path.join(data_root, "counters.json")
        self._logical = 0
        if os.path.exists(self._counters_path):
            with open(self._counters_path) as fh:
                self._logical = json.load(fh).get("logical_bytes", 0)
        self._physical = sum(length for _, (_, _, length) in self.index.entries())

    def close(self) -> None:
        self.containers.close()
        self.index.close()

    def _blob_store(self, kind: str) -> BlobStore:
        return self.key_blobs if kind in _KEY_KINDS else self.data_blobs

    def _persist_counters(self) -> None:
        tmp = self._counters_path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump({"logical_bytes": self._logical}, fh)
        os.replace(tmp, self._counters_path)

    # -- operations --------------------------------------------------------

    def dedup_query(self, fps: list[bytes]) -> list[bool]:
        with self._lock:
            return [fp in self.index for fp in fps]

    def store_packages(self, items: list[tuple[bytes, bytes]]) -> int:
        """Atomically ingest a batch; duplicates cost no container bytes."""
        for fp, data in items:
            if hashlib.sha256(data).digest() != fp:
                raise FingerprintMismatch(
                    f"package does not hash to {fp.hex()}; batch rejected")
        with self._lock:
            records = []
            seen: set[bytes] = set()
            new_bytes = 0
            for fp, data in items:
                if fp in self.index or fp in seen:
                    continue
                cid, off = self.containers.append(data)
                records.append((fp, cid, off, len(data)))
                seen.add(fp)
                new_bytes += len(data)
            if records:
                self.containers.flush()
                self.index.append(records)
            self._logical += sum(len(data) for _, data in items)
            self._physical += new_bytes
            self._persist_counters()
            return len(records)

    def get_packages(self, fps: list[bytes]) -> list[bytes]:
        with self._lock:
            entries = [self.index.get(fp) for fp in fps]
        by_container: dict[int, list[int]] = {}
        for pos, (cid, _, _) in enumerate(entries):
            by_container.setdefault(cid, []).append(pos)
        out: list[bytes] = [b""] * len(fps)
        for cid in sorted(by_container):
            positions = by_container[cid]
            spans = [entries[pos][1:] for pos in positions]
            for pos, data in zip(positions, self.containers.read_many(cid, spans)):
                out[pos] = data
        return out

    def put_blob(self, kind: str, obj_id: str, version: int, blob: bytes,
                 expected_prev: int | None = None) -> None:
        self._blob_store(kind).put(kind, obj_id, version, blob, expected_prev)

    def get_blob(self, kind: str, obj_id: str,
                 version: int | None = None) -> tuple[int, bytes]:
        return self._blob_store(kind).get(kind, obj_id, version)

    def stats(self) -> ServerStats:
        with self._lock:
            return ServerStats(
                logical_bytes=self._logical,
                physical_bytes=self._physical,
                stub_bytes=self.data_blobs.stored_bytes("stub"),
                container_count=self.containers.count,
                index_entries=len(self.index),
            )

    # -- wire dispatch -------------------------------------------------------

    def handle_frame(self, msg_type: int, payload: bytes,
                     client_id: str = "") -> tuple[int, bytes]:
        try:
            return self._dispatch(msg_type, payload)
        except wire.ServiceError:
            raise
        except (NotFound, FingerprintMismatch, VersionConflict, InvalidOperand) as exc:
            raise wire.error_for_exception(exc) from exc

    def _dispatch(self, msg_type: int, payload: bytes) -> tuple[int, bytes]:
        resp = msg_type | wire.RESP_FLAG
        if msg_type == wire.MSG_DEDUP_QUERY:
            fps = wire.decode_fingerprint_list(payload)
            return resp, wire.encode_bitmap(self.dedup_query(fps))
        if msg_type == wire.MSG_PUT_PACKAGES:
            stored = self.store_packages(wire.decode_package_items(payload))
            return resp, wire.u32(stored)
        if msg_type == wire.MSG_GET_PACKAGES:
            blobs = self.get_packages(wire.decode_fingerprint_list(payload))
            return resp, wire.encode_byte_list(blobs)
        if msg_type in _BLOB_KINDS:
            return resp, self._handle_blob(_BLOB_KINDS[msg_type], payload)
        if msg_type == wire.MSG_STATS:
            s = self.stats()
            return resp, wire.encode_stats(s.logical_bytes, s.physical_bytes,
                                           s.stub_bytes, s.container_count,
                                           s.index_entries)
        raise wire.ServiceError(wire.ERR_BAD_REQUEST,
                                f"unknown message type {msg_type:#x}")

    def _handle_blob(self, kind: str, payload: bytes) -> bytes:
        r = wire.Reader(payload)
        op = r.u8()
        obj_id = r.bytes_u32().decode("utf-8")
        if op == wire.BLOB_PUT:
            version = r.u32()
            expected = r.u32() if r.u8() else None
            blob = r.bytes_u32()
            r.done()
            self.put_blob(kind, obj_id, version, blob, expected)
            return b""
        if op == wire.BLOB_GET:
            version = r.u32()
            r.done()
            v = None if version == wire.VERSION_CURRENT else version
            got_version, blob = self.get_blob(kind, obj_id, v)
            return wire.encode_blob_response(got_version, blob)
        raise wire.ServiceError(wire.ERR_BAD_REQUEST, f"unknown blob op {op}")


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self):
        client_id = self.client_address[0]
        while True:
            try:
                msg_type, payload = wire.read_frame(self.request)
            except (ConnectionError, OSError):
                return
            try:
                resp_type, body = self.server.service.handle_frame(
                    msg_type, payload, client_id)
            except wire.ServiceError as err:
                resp_type, body = wire.MSG_ERROR, wire.encode_error(err)
            except Exception as exc:  # never kill the connection loop
                err = wire.ServiceError(wire.ERR_INTERNAL, repr(exc))
                resp_type, body = wire.MSG_ERROR, wire.encode_error(err)
            try:
                wire.write_frame(self.request, resp_type, body)
            except OSError:
                return


class _ThreadingServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class FrameServer:
    """TCP front for any service exposing handle_frame()."""

    def __init__(self, service, host: str = "127.0.0.1", port: int = 0):
        self.service = service
        self._server = _ThreadingServer((host, port), _FrameHandler)
        self._server.service = service
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address

    def start(self) -> "FrameServer":
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        name="reed-server", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=5)
