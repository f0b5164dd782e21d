"""Two-process split inference over a byte stream, plus the lossless and timing baselines.

Wire format (every message)::

    "RSP1" | version u8 | type u8 | payload length varint | payload

Session: the head sends HELLO (config hash and model fingerprint); the tail
answers HELLO on a match or ERROR otherwise. The head then sends one FRAME
per token (payload is a serialized ``FramePacket``) and finally END, which
the tail acknowledges with END. Any protocol violation makes the tail send
ERROR and abort the session.
"""
from __future__ import annotations

import enum
import math
import socket
import time
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch

from . import range_coder as rc
from .codec import CodecError, FramePacket, SequenceCodec

WIRE_MAGIC = b"RSP1"
WIRE_VERSION = 1
PROTOCOL_OVERHEAD = 0.09
MAX_PAYLOAD = 1 << 26


class MessageType(enum.IntEnum):
    HELLO = 0
    FRAME = 1
    END = 2
    ERROR = 3


class SessionError(RuntimeError):
    """Protocol violation, peer error or transport failure."""


@dataclass(frozen=True)
class WireMessage:
    type: MessageType
    payload: bytes = b""

    def to_bytes(self) -> bytes:
        return WIRE_MAGIC + bytes([WIRE_VERSION, int(self.type)]) + rc.write_varint(len(self.payload)) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "WireMessage":
        msg, pos = _parse(bytes(data), 0)
        if pos != len(data):
            raise SessionError("trailing bytes after wire message")
        return msg


def _parse(data: bytes, pos: int) -> tuple[WireMessage, int]:
    if data[pos:pos + 4] != WIRE_MAGIC:
        raise SessionError("bad wire magic")
    if len(data) < pos + 6:
        raise SessionError("truncated wire header")
    if data[pos + 4] != WIRE_VERSION:
        raise SessionError(f"unsupported wire version {data[pos + 4]}")
    try:
        kind = MessageType(data[pos + 5])
    except ValueError as exc:
        raise SessionError(f"unknown message type {data[pos + 5]}") from exc
    try:
        n, p = rc.read_varint(data, pos + 6)
    except rc.CorruptStreamError as exc:
        raise SessionError(str(exc)) from exc
    if p + n > len(data):
        raise SessionError("truncated wire payload")
    return WireMessage(kind, data[p:p + n]), p + n


# ---------------------------------------------------------------- transports


class Transport:
    """Reliable ordered byte stream over a pair of binary file objects."""

    def __init__(self, reader, writer, closer=None):
        self.reader, self.writer, self._closer = reader, writer, closer
        self.bytes_sent = 0
        self.bytes_received = 0

    @classmethod
    def from_socket(cls, sock: socket.socket) -> "Transport":
        f = sock.makefile("rwb")

        def close():
            f.close()
            sock.close()

        return cls(f, f, close)

    def send(self, msg: WireMessage) -> None:
        data = msg.to_bytes()
        try:
            self.writer.write(data)
            self.writer.flush()
        except OSError as exc:
            raise SessionError(f"transport failure while sending: {exc}") from exc
        self.bytes_sent += len(data)

    def _read_exact(self, n: int) -> bytes:
        try:
            data = self.reader.read(n)
        except OSError as exc:
            raise SessionError(f"transport failure while receiving: {exc}") from exc
        if data is None or len(data) != n:
            raise SessionError("connection closed mid-message")
        return data

    def recv(self) -> WireMessage | None:
        """Next message, or None on a clean end of stream between messages."""
        try:
            head = self.reader.read(6)
        except OSError as exc:
            raise SessionError(f"transport failure while receiving: {exc}") from exc
        if not head:
            return None
        if len(head) < 6:
            raise SessionError("connection closed mid-message")
        raw = bytearray(head)
        while True:
            b = self._read_exact(1)
            raw += b
            if not b[0] & 0x80:
                break
            if len(raw) > 16:
                raise SessionError("varint too long")
        n, _ = rc.read_varint(bytes(raw), 6)
        if n > MAX_PAYLOAD:
            raise SessionError(f"payload of {n} bytes exceeds limit")
        raw += self._read_exact(n)
        self.bytes_received += len(raw)
        return WireMessage.from_bytes(bytes(raw))

    def close(self) -> None:
        if self._closer is not None:
            self._closer()


def loopback_pair() -> tuple[Transport, Transport]:
    """Two connected transports over a local socket pair."""
    a, b = socket.socketpair()
    return Transport.from_socket(a), Transport.from_socket(b)


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {addr!r}")
    return host, int(port)


# ---------------------------------------------------------------- sessions


def hello_payload(codec: SequenceCodec) -> bytes:
    return bytes.fromhex(codec.model.config.config_hash()) + codec.model.fingerprint()


@dataclass
class HeadResult:
    n_frames: int
    payload_bits: int
    network_seconds: float
    coding_seconds: float
    bytes_sent: int


@dataclass
class TailResult:
    y: np.ndarray
    logits: torch.Tensor
    frames_at_emit: list[int] = field(default_factory=list)
    decode_seconds: float = 0.0
    payload_bits: int = 0

    @property
    def n_frames(self) -> int:
        return int(self.y.shape[0])


def serve_head(transport: Transport, codec: SequenceCodec, tokens) -> HeadResult:
    """Send one sequence: HELLO, one FRAME per token, END."""
    transport.send(WireMessage(MessageType.HELLO, hello_payload(codec)))
    reply = transport.recv()
    if reply is None:
        raise SessionError("tail closed the connection during HELLO")
    if reply.type == MessageType.ERROR:
        raise SessionError(f"tail rejected HELLO: {reply.payload.decode(errors='replace')}")
    if reply.type != MessageType.HELLO or reply.payload != hello_payload(codec):
        raise SessionError("unexpected HELLO reply")
    t0 = time.perf_counter()
    y, w, params, _ = codec.analyze(tokens)
    t1 = time.perf_counter()
    coding = 0.0
    bits = 0
    for i in range(y.shape[0]):
        c0 = time.perf_counter()
        tables = codec._y_tables(params, i)
        packet = FramePacket(i, rc.encode(w[i].tolist(), codec.w_tables), rc.encode(y[i].tolist(), tables))
        coding += time.perf_counter() - c0
        bits += packet.payload_bits
        transport.send(WireMessage(MessageType.FRAME, packet.to_bytes()))
    transport.send(WireMessage(MessageType.END))
    reply = transport.recv()
    if reply is None or reply.type != MessageType.END:
        detail = reply.payload.decode(errors="replace") if reply is not None else "connection closed"
        raise SessionError(f"session did not close cleanly: {detail}")
    return HeadResult(int(y.shape[0]), bits, t1 - t0, coding, transport.bytes_sent)


def _abort(transport: Transport, reason: str) -> SessionError:
    try:
        transport.send(WireMessage(MessageType.ERROR, reason.encode()))
    except SessionError:
        pass
    return SessionError(reason)


def serve_tail(transport: Transport, codec: SequenceCodec, max_sessions: int | None = None,
               on_prediction=None) -> list[TailResult]:
    """Serve sessions until the peer closes the stream (or ``max_sessions`` completed).

    ``on_prediction(index, logits)`` is called as soon as each frame is decoded.
    """
    results: list[TailResult] = []
    expected = hello_payload(codec)
    while max_sessions is None or len(results) < max_sessions:
        msg = transport.recv()
        if msg is None:
            break
        if msg.type != MessageType.HELLO:
            raise _abort(transport, f"expected HELLO, got {msg.type.name}")
        if msg.payload != expected:
            raise _abort(transport, "config hash mismatch: head and tail use different checkpoints")
        transport.send(WireMessage(MessageType.HELLO, expected))
        decoder = codec.frame_decoder()
        frames_at_emit: list[int] = []
        received = 0
        seconds = 0.0
        bits = 0
        while True:
            msg = transport.recv()
            if msg is None:
                raise SessionError("connection closed before END")
            if msg.type == MessageType.END:
                break
            if msg.type != MessageType.FRAME:
                raise _abort(transport, f"unexpected {msg.type.name} inside a session")
            try:
                packet = FramePacket.from_bytes(msg.payload)
            except CodecError as exc:
                raise _abort(transport, str(exc)) from exc
            if packet.index != decoder.next_index:
                raise _abort(transport, f"frame {packet.index} out of order or duplicated "
                                        f"(expected frame {decoder.next_index})")
            received += 1
            t0 = time.perf_counter()
            try:
                _, logits = decoder.push(packet)
            except CodecError as exc:
                raise _abort(transport, str(exc)) from exc
            seconds += time.perf_counter() - t0
            bits += packet.payload_bits
            frames_at_emit.append(received)
            if on_prediction is not None:
                on_prediction(packet.index, logits)
        out = decoder.result()
        transport.send(WireMessage(MessageType.END))
        results.append(TailResult(out.y, out.logits, frames_at_emit, seconds, bits))
    return results


# ---------------------------------------------------------------- baselines


@dataclass
class LosslessResult:
    raw_bits: int
    compressed_bits: int
    seconds: float
    n_tokens: int

    @property
    def bpt(self) -> float:
        return self.compressed_bits / self.n_tokens

    @property
    def ms_per_token(self) -> float:
        return 1e3 * self.seconds / self.n_tokens


def serialize_int16(values) -> bytes:
    """Little-endian 16-bit, row-major T x E."""
    a = np.asarray(values)
    if a.ndim != 2:
        raise ValueError("expected a T x E array")
    if np.issubdtype(a.dtype, np.integer):
        if a.size and (a.min() < -32768 or a.max() > 32767):
            raise ValueError("values do not fit in 16 bits")
        return a.astype("<i2").tobytes(order="C")
    return a.astype("<f2").tobytes(order="C")


def lossless_baseline(values, level: int = 9) -> LosslessResult:
    """Raw DEFLATE (RFC 1951) of the 16-bit serialization."""
    raw = serialize_int16(values)
    t0 = time.perf_counter()
    comp = zlib.compressobj(level, zlib.DEFLATED, -15)
    data = comp.compress(raw) + comp.flush()
    seconds = time.perf_counter() - t0
    return LosslessResult(8 * len(raw), 8 * len(data), seconds, int(np.asarray(values).shape[0]))


@dataclass
class TimingReport:
    raw_bits_per_token: float
    coded_bits_per_token: float
    coding_ms_per_token: float
    overhead: float
    crossover_mbps: float
    always_beneficial: bool
    derivation: str


def timing_report(raw_bits_per_token: float, coded_bits_per_token: float, coding_ms_per_token: float,
                  overhead: float = PROTOCOL_OVERHEAD) -> TimingReport:
    """Link speed below which coding plus sending beats sending raw activations.

    With both transmissions inflated by the protocol overhead ``o``, coding wins when
    ``(1+o) coded / v + t < (1+o) raw / v``, i.e. ``v < (1+o)(raw - coded) / t``.
    """
    if coding_ms_per_token < 0:
        raise ValueError("coding time must be non-negative")
    saved = raw_bits_per_token - coded_bits_per_token
    derivation = (f"v* = (1 + {overhead:g}) * ({raw_bits_per_token:g} - {coded_bits_per_token:g}) bits"
                  f" / {coding_ms_per_token:g} ms")
    if saved <= 0:
        return TimingReport(raw_bits_per_token, coded_bits_per_token, coding_ms_per_token, overhead, 0.0, False,
                            derivation + " -> coding never pays off")
    if coding_ms_per_token == 0:
        return TimingReport(raw_bits_per_token, coded_bits_per_token, coding_ms_per_token, overhead, math.inf, True,
                            derivation + " -> zero coding time, always beneficial")
    bps = (1.0 + overhead) * saved / (coding_ms_per_token * 1e-3)
    return TimingReport(raw_bits_per_token, coded_bits_per_token, coding_ms_per_token, overhead, bps / 1e6, False,
                        derivation + f" = {bps / 1e6:.2f} Mbps")
