"""Framed, authenticated, ordered messages between Alice and Bob.

Wire layout (integers little-endian)::

    magic(4) | version(1) | msg_type(1) | seq(8) | payload_len(4) | payload | tag(16)

The tag is a keyed BLAKE2b digest over every preceding byte. Sequence numbers
start at 0 and increase by one per direction; any gap or repeat is fatal.
Two bindings share one endpoint class: an in-process loopback and a TCP
socket. Both log every frame to a transcript with exact byte counts.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import os
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "MAGIC",
    "VERSION",
    "HEADER_LEN",
    "TAG_LEN",
    "MsgType",
    "Frame",
    "TransportError",
    "FramingIncomplete",
    "BadMagic",
    "BadVersion",
    "BadTag",
    "BadSeq",
    "LinkClosed",
    "UnexpectedMessage",
    "PeerAborted",
    "encode_frame",
    "decode_frame",
    "TranscriptEntry",
    "Endpoint",
    "loopback_pair",
    "tcp_listen",
    "tcp_connect",
    "parse_hostport",
    "encode_varints",
    "decode_varints",
    "encode_indices",
    "decode_indices",
]

MAGIC = b"DQKD"
VERSION = 1
_HEADER = struct.Struct("<4sBBQI")
HEADER_LEN = _HEADER.size  # 18
TAG_LEN = 16
MAX_PAYLOAD = (1 << 32) - 1


class MsgType(enum.IntEnum):
    BASIS_ANNOUNCE = 1
    INTENSITY_ANNOUNCE = 2
    DETECT_INDICES = 3
    SIFT_CONFIRM = 4
    PE_SUMMARY = 5
    EC_PARITY = 6
    VERIFY_SEED = 7
    VERIFY_DIGEST = 8
    PA_SEED = 9
    ABORT = 10
    CALIBRATE = 11


@dataclass(frozen=True)
class Frame:
    msg_type: int
    seq: int
    payload: bytes = b""
    magic: bytes = MAGIC
    version: int = VERSION

    @property
    def wire_length(self) -> int:
        return HEADER_LEN + len(self.payload) + TAG_LEN


class TransportError(Exception):
    """Base class of every link failure."""


class FramingIncomplete(TransportError):
    """Not enough bytes for a whole frame yet."""


class BadMagic(TransportError):
    pass


class BadVersion(TransportError):
    pass


class BadTag(TransportError):
    pass


class BadSeq(TransportError):
    pass


class LinkClosed(TransportError):
    pass


class UnexpectedMessage(TransportError):
    pass


class PeerAborted(TransportError):
    """The peer sent ABORT; ``reason`` is its stated cause."""

    def __init__(self, reason: str):
        super().__init__(f"peer aborted: {reason}")
        self.reason = reason


def _tag(auth_key: bytes, data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=TAG_LEN, key=auth_key).digest()


def encode_frame(f: Frame, auth_key: bytes) -> bytes:
    payload = bytes(f.payload)
    if len(payload) > MAX_PAYLOAD:
        raise ValueError(f"payload of {len(payload)} bytes exceeds the 32-bit length field")
    if not 0 <= f.seq < 1 << 64:
        raise ValueError("seq must fit in 64 bits")
    head = _HEADER.pack(f.magic, f.version, int(f.msg_type), f.seq, len(payload))
    body = head + payload
    return body + _tag(auth_key, body)


def decode_frame(data, auth_key: bytes, expected_seq: Optional[int] = None) -> Frame:
    """Parse one frame from the start of ``data``.

    The tag is checked before any header field is trusted, so a corrupted
    frame reports ``BadTag`` unless its length field now points past the end
    of the buffer, which reads as ``FramingIncomplete``. Trailing bytes are
    ignored; use ``Frame.wire_length`` to advance.
    """
    data = bytes(data)
    if len(data) < HEADER_LEN:
        raise FramingIncomplete(f"have {len(data)} of {HEADER_LEN} header bytes")
    magic, version, msg_type, seq, plen = _HEADER.unpack_from(data)
    total = HEADER_LEN + plen + TAG_LEN
    if len(data) < total:
        raise FramingIncomplete(f"have {len(data)} of {total} frame bytes")
    body = data[: HEADER_LEN + plen]
    if not hmac.compare_digest(_tag(auth_key, body), data[HEADER_LEN + plen : total]):
        raise BadTag("authentication tag mismatch")
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    if expected_seq is not None and seq != expected_seq:
        raise BadSeq(f"expected seq {expected_seq}, got {seq}")
    return Frame(msg_type, seq, data[HEADER_LEN : HEADER_LEN + plen], magic, version)


# -- compact integer encodings ------------------------------------------------


def encode_varints(values) -> bytes:
    """LEB128 encoding of non-negative integers."""
    v = np.asarray(values, dtype=np.uint64)
    if v.size == 0:
        return b""
    # number of 7-bit groups for each value
    nbits = np.zeros(v.size, dtype=np.int64)
    nz = v > 0
    nbits[nz] = np.floor(np.log2(v[nz].astype(np.float64))).astype(np.int64) + 1
    # float log2 can be off by one near powers of two; fix it exactly
    too_small = nz & ((v >> nbits.astype(np.uint64)) > 0)
    nbits[too_small] += 1
    groups = np.maximum((nbits + 6) // 7, 1)
    out = np.empty(int(groups.sum()), dtype=np.uint8)
    starts = np.concatenate([[0], np.cumsum(groups)[:-1]])
    for g in range(int(groups.max())):
        sel = groups > g
        byte = (v[sel] >> np.uint64(7 * g)) & np.uint64(0x7F)
        more = (groups[sel] > g + 1).astype(np.uint8) << 7
        out[starts[sel] + g] = byte.astype(np.uint8) | more
    return out.tobytes()


def decode_varints(data: bytes) -> np.ndarray:
    b = np.frombuffer(data, dtype=np.uint8)
    if b.size == 0:
        return np.zeros(0, dtype=np.uint64)
    if b[-1] & 0x80:
        raise ValueError("truncated varint")
    ends = np.flatnonzero((b & 0x80) == 0)
    starts = np.concatenate([[0], ends[:-1] + 1])
    lengths = ends - starts + 1
    if lengths.max() > 10:
        raise ValueError("varint longer than 64 bits")
    out = np.zeros(ends.size, dtype=np.uint64)
    for g in range(int(lengths.max())):
        sel = lengths > g
        out[sel] |= (b[starts[sel] + g] & 0x7F).astype(np.uint64) << np.uint64(7 * g)
    return out


def encode_indices(indices) -> bytes:
    """Strictly increasing indices as delta varints."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx[0] < 0 or np.any(np.diff(idx) <= 0)):
        raise ValueError("indices must be non-negative and strictly increasing")
    return encode_varints(np.diff(idx, prepend=0) if idx.size else idx)


def decode_indices(data: bytes) -> np.ndarray:
    return np.cumsum(decode_varints(data).astype(np.int64))


# -- endpoints ----------------------------------------------------------------


@dataclass(frozen=True)
class TranscriptEntry:
    direction: str  # "sent" or "recv"
    msg_type: str
    seq: int
    payload_bytes: int
    wire_bytes: int


class Endpoint:
    """One side of an authenticated, ordered link.

    Subclasses supply ``_write`` and ``_read_some``; framing, sequence
    checks and the transcript live here so both bindings behave alike.
    """

    def __init__(self, auth_key: bytes, name: str = ""):
        self.auth_key = bytes(auth_key)
        self.name = name
        self.transcript: list[TranscriptEntry] = []
        self._send_seq = 0
        self._recv_seq = 0
        self._buf = bytearray()
        self._closed = False
        self._send_lock = threading.Lock()

    # binding hooks
    def _write(self, data: bytes) -> None:
        raise NotImplementedError

    def _read_some(self, timeout: Optional[float]) -> bytes:
        """Return more bytes, or b"" once the peer has closed."""
        raise NotImplementedError

    def _close(self) -> None:
        pass

    def send(self, msg_type: MsgType, payload: bytes = b"") -> Frame:
        if self._closed:
            raise LinkClosed("endpoint is closed")
        with self._send_lock:
            f = Frame(int(msg_type), self._send_seq, bytes(payload))
            data = encode_frame(f, self.auth_key)
            self._write(data)
            self._send_seq += 1
            self.transcript.append(
                TranscriptEntry("sent", MsgType(f.msg_type).name, f.seq, len(f.payload), len(data))
            )
        return f

    def recv(self, expect: Optional[MsgType] = None, timeout: Optional[float] = None) -> Frame:
        """Next frame from the peer; raises on any framing or auth failure."""
        while True:
            try:
                f = decode_frame(self._buf, self.auth_key, self._recv_seq)
                break
            except FramingIncomplete:
                chunk = self._read_some(timeout)
                if not chunk:
                    raise LinkClosed("peer closed the link") from None
                self._buf += chunk
        del self._buf[: f.wire_length]
        self._recv_seq += 1
        try:
            name = MsgType(f.msg_type).name
        except ValueError:
            raise UnexpectedMessage(f"unknown message type {f.msg_type}") from None
        self.transcript.append(TranscriptEntry("recv", name, f.seq, len(f.payload), f.wire_length))
        if expect is not None and f.msg_type != expect:
            if f.msg_type == MsgType.ABORT:
                raise PeerAborted(f.payload.decode("utf-8", "replace"))
            raise UnexpectedMessage(f"expected {MsgType(expect).name}, got {name}")
        return f

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._close()

    # transcript summaries
    def bytes_sent(self) -> int:
        return sum(e.wire_bytes for e in self.transcript if e.direction == "sent")

    def bytes_received(self) -> int:
        return sum(e.wire_bytes for e in self.transcript if e.direction == "recv")

    def totals_by_type(self) -> dict:
        out: dict = {}
        for e in self.transcript:
            key = f"{e.direction}:{e.msg_type}"
            n, b = out.get(key, (0, 0))
            out[key] = (n + 1, b + e.wire_bytes)
        return {k: {"frames": n, "bytes": b} for k, (n, b) in sorted(out.items())}


class LoopbackEndpoint(Endpoint):
    _EOF = object()

    def __init__(self, auth_key: bytes, inbox: queue.Queue, outbox: queue.Queue, name: str = ""):
        super().__init__(auth_key, name)
        self._inbox = inbox
        self._outbox = outbox

    def _write(self, data: bytes) -> None:
        self._outbox.put(data)

    def _read_some(self, timeout):
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no data from peer") from None
        if item is self._EOF:
            # keep reporting EOF to later readers
            self._inbox.put(item)
            return b""
        return item

    def _close(self) -> None:
        self._outbox.put(self._EOF)

    def inject(self, data: bytes) -> None:
        """Deliver raw bytes to this endpoint as if sent by the peer (tests)."""
        self._inbox.put(bytes(data))


def loopback_pair(auth_key: bytes = b"", names=("alice", "bob")):
    """Two in-process endpoints joined by queues."""
    a_to_b, b_to_a = queue.Queue(), queue.Queue()
    a = LoopbackEndpoint(auth_key, b_to_a, a_to_b, names[0])
    b = LoopbackEndpoint(auth_key, a_to_b, b_to_a, names[1])
    return a, b


class SocketEndpoint(Endpoint):
    def __init__(self, sock: socket.socket, auth_key: bytes, name: str = ""):
        super().__init__(auth_key, name)
        self.sock = sock
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _write(self, data: bytes) -> None:
        self.sock.sendall(data)

    def _read_some(self, timeout):
        self.sock.settimeout(timeout)
        try:
            return self.sock.recv(1 << 20)
        except socket.timeout:
            raise TimeoutError("no data from peer") from None
        except OSError:
            return b""

    def _close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def parse_hostport(text: str, default_host: str = "127.0.0.1"):
    """"host:port" or ":port" or "port"; the port may come from DECOYQKD_PORT."""
    host, _, port = text.rpartition(":")
    if not port:
        port = os.environ.get("DECOYQKD_PORT", "")
    if not port.isdigit():
        raise ValueError(f"bad host:port {text!r}")
    return host or default_host, int(port)


def tcp_listen(host: str, port: int, auth_key: bytes, timeout: Optional[float] = 60.0, ready=None) -> SocketEndpoint:
    """Accept one connection. ``ready`` (if given) is called with the bound port."""
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        srv.bind((host, port))
        srv.listen(1)
        if ready is not None:
            ready(srv.getsockname()[1])
        srv.settimeout(timeout)
        conn, _ = srv.accept()
    finally:
        srv.close()
    conn.settimeout(None)
    return SocketEndpoint(conn, auth_key, "listen")


def tcp_connect(host: str, port: int, auth_key: bytes, timeout: float = 30.0) -> SocketEndpoint:
    """Connect, retrying until the listener is up or ``timeout`` passes."""
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=5.0)
            sock.settimeout(None)
            return SocketEndpoint(sock, auth_key, "connect")
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.05)
