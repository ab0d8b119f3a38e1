"""Binary wire protocol shared by the dedup server and the key manager.

Frame layout: 4-byte big-endian payload length, 1-byte message type, payload.
All integers are big-endian. Request type ``T`` is answered with ``T | 0x80``
or with an error frame (type 0x7F, payload = 2-byte code plus UTF-8 message).

Blob message families (recipe, stub file, wrapped key state, user public
key) share one request type per family; the first payload byte selects the
operation (0x00 put, 0x01 get).
"""

from __future__ import annotations

import socket
import struct

from . import errors

MAX_FRAME = 64 * 1024 * 1024

MSG_DEDUP_QUERY = 0x01
MSG_PUT_PACKAGES = 0x02
MSG_GET_PACKAGES = 0x03
MSG_RECIPE = 0x04
MSG_STUB_FILE = 0x05
MSG_WRAPPED_STATE = 0x06
MSG_USER_KEY = 0x07
MSG_STATS = 0x08
MSG_KEYGEN = 0x10
MSG_MANAGER_PUBKEY = 0x11
MSG_ERROR = 0x7F
RESP_FLAG = 0x80

BLOB_PUT = 0x00
BLOB_GET = 0x01
VERSION_CURRENT = 0xFFFFFFFF

ERR_NOT_FOUND = 1
ERR_FINGERPRINT_MISMATCH = 2
ERR_VERSION_CONFLICT = 3
ERR_RATE_LIMITED = 4
ERR_BAD_REQUEST = 5
ERR_ACCESS_DENIED = 6
ERR_INTERNAL = 7

_ERR_EXC = {
    ERR_NOT_FOUND: errors.NotFound,
    ERR_FINGERPRINT_MISMATCH: errors.FingerprintMismatch,
    ERR_VERSION_CONFLICT: errors.VersionConflict,
    ERR_RATE_LIMITED: errors.RateLimited,
    ERR_BAD_REQUEST: errors.InvalidOperand,
    ERR_ACCESS_DENIED: errors.AccessDenied,
    ERR_INTERNAL: errors.StorageUnavailable,
}

_EXC_ERR = {
    errors.NotFound: ERR_NOT_FOUND,
    errors.FingerprintMismatch: ERR_FINGERPRINT_MISMATCH,
    errors.VersionConflict: ERR_VERSION_CONFLICT,
    errors.RateLimited: ERR_RATE_LIMITED,
    errors.InvalidOperand: ERR_BAD_REQUEST,
    errors.AccessDenied: ERR_ACCESS_DENIED,
}


class ServiceError(Exception):
    """Raised by a service handler; serialized as an error frame."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


def error_for_exception(exc: Exception) -> ServiceError:
    code = _EXC_ERR.get(type(exc), ERR_INTERNAL)
    return ServiceError(code, str(exc))


def encode_error(err: ServiceError) -> bytes:
    return struct.pack(">H", err.code) + err.message.encode("utf-8")


def raise_for_frame(msg_type: int, payload: bytes) -> None:
    """Map an error frame back to the typed exception it encodes."""
    if msg_type != MSG_ERROR:
        return
    if len(payload) < 2:
        raise errors.TransportError("malformed error frame")
    code = struct.unpack(">H", payload[:2])[0]
    message = payload[2:].decode("utf-8", "replace")
    raise _ERR_EXC.get(code, errors.StorageUnavailable)(message)


# -- framing -------------------------------------------------------------------


def write_frame(sock: socket.socket, msg_type: int, payload: bytes) -> None:
    sock.sendall(struct.pack(">IB", len(payload), msg_type) + payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        part = sock.recv(n - len(buf))
        if not part:
            raise ConnectionError("peer closed the connection")
        buf.extend(part)
    return bytes(buf)


def read_frame(sock: socket.socket) -> tuple[int, bytes]:
    header = _recv_exact(sock, 5)
    length, msg_type = struct.unpack(">IB", header)
    if length > MAX_FRAME:
        raise errors.TransportError(f"frame of {length} bytes exceeds limit")
    return msg_type, _recv_exact(sock, length)


class LocalBackend:
    """In-process request path used by the trace harness and tests.

    Runs the same payload codecs as the TCP path against a service object
    exposing handle_frame(msg_type, payload, client_id).
    """

    def __init__(self, service, client_id: str = "local"):
        self._service = service
        self._client_id = client_id

    def request(self, msg_type: int, payload: bytes) -> tuple[int, bytes]:
        try:
            return self._service.handle_frame(msg_type, payload, self._client_id)
        except ServiceError as err:
            return MSG_ERROR, encode_error(err)


# -- payload codecs --------------------------------------------------------------


class Reader:
    """Cursor over a payload; raises InvalidOperand on truncation."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    @property
    def pos(self) -> int:
        return self._pos

    def take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise errors.InvalidOperand("truncated payload")
        out = self._data[self._pos:self._pos + n]
        self._pos += n
        return out

    def rest(self) -> bytes:
        out = self._data[self._pos:]
        self._pos = len(self._data)
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def bytes_u32(self) -> bytes:
        return self.take(self.u32())

    def done(self) -> None:
        if self._pos != len(self._data):
            raise errors.InvalidOperand("trailing bytes in payload")


def u32(value: int) -> bytes:
    return struct.pack(">I", value)


def u64(value: int) -> bytes:
    return struct.pack(">Q", value)


def prefixed(data: bytes) -> bytes:
    return u32(len(data)) + data


def encode_fingerprint_list(fps: list[bytes]) -> bytes:
    parts = [u32(len(fps))]
    for fp in fps:
        if len(fp) != 32:
            raise errors.InvalidOperand("fingerprints must be 32 bytes")
        parts.append(fp)
    return b"".join(parts)


def decode_fingerprint_list(payload: bytes) -> list[bytes]:
    r = Reader(payload)
    fps = [r.take(32) for _ in range(r.u32())]
    r.done()
    return fps


def encode_bitmap(bits: list[bool]) -> bytes:
    # bit i lives in byte i // 8 at position i % 8, least significant first
    out = bytearray((len(bits) + 7) // 8)
    for i, b in enumerate(bits):
        if b:
            out[i // 8] |= 1 << (i % 8)
    return bytes(out)


def decode_bitmap(payload: bytes, count: int) -> list[bool]:
    return [bool(payload[i // 8] >> (i % 8) & 1) for i in range(count)]


def encode_package_items(items: list[tuple[bytes, bytes]]) -> bytes:
    parts = [u32(len(items))]
    for fp, data in items:
        if len(fp) != 32:
            raise errors.InvalidOperand("fingerprints must be 32 bytes")
        parts.append(fp)
        parts.append(prefixed(data))
    return b"".join(parts)


def decode_package_items(payload: bytes) -> list[tuple[bytes, bytes]]:
    r = Reader(payload)
    items = [(r.take(32), r.bytes_u32()) for _ in range(r.u32())]
    r.done()
    return items


def encode_byte_list(blobs: list[bytes]) -> bytes:
    return u32(len(blobs)) + b"".join(prefixed(b) for b in blobs)


def decode_byte_list(payload: bytes) -> list[bytes]:
    r = Reader(payload)
    blobs = [r.bytes_u32() for _ in range(r.u32())]
    r.done()
    return blobs


def encode_blob_put(obj_id: str, version: int, blob: bytes,
                    expected_prev: int | None = None) -> bytes:
    head = bytes([BLOB_PUT]) + prefixed(obj_id.encode("utf-8")) + u32(version)
    if expected_prev is None:
        return head + bytes([0]) + prefixed(blob)
    return head + bytes([1]) + u32(expected_prev) + prefixed(blob)


def encode_blob_get(obj_id: str, version: int | None = None) -> bytes:
    v = VERSION_CURRENT if version is None else version
    return bytes([BLOB_GET]) + prefixed(obj_id.encode("utf-8")) + u32(v)


def encode_blob_response(version: int, blob: bytes) -> bytes:
    return u32(version) + prefixed(blob)


def decode_blob_response(payload: bytes) -> tuple[int, bytes]:
    r = Reader(payload)
    version, blob = r.u32(), r.bytes_u32()
    r.done()
    return version, blob


def encode_int_list(values: list[int], width: int) -> bytes:
    parts = [u32(len(values))]
    for v in values:
        parts.append(v.to_bytes(width, "big"))
    return b"".join(parts)


def decode_int_list(payload: bytes, width: int) -> list[int]:
    r = Reader(payload)
    values = [int.from_bytes(r.take(width), "big") for _ in range(r.u32())]
    r.done()
    return values


def encode_stats(logical: int, physical: int, stub: int,
                 containers: int, index_entries: int) -> bytes:
    return struct.pack(">QQQQQ", logical, physical, stub, containers, index_entries)


def decode_stats(payload: bytes) -> tuple[int, int, int, int, int]:
    return struct.unpack(">QQQQQ", payload)
