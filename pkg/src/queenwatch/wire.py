"""Host/device framing protocol.

Host -> device, 28 bytes per sample:

    offset  size  field
    0       4     t_in   f32 LE
    4       4     t_out  f32 LE
    8       4     h_in   f32 LE
    12      4     h_out  f32 LE
    16      4     p_in   f32 LE
    20      4     p_out  f32 LE
    24      4     end marker FF FF FF FF (a NaN pattern; NaN payloads are illegal)

Device -> host, 7 bytes per decision:

    0   1  magic 0xB5
    1   1  label (0 or 1)
    2   4  score_q i32 LE
    6   1  XOR of bytes 0..5
"""
from __future__ import annotations

import enum
import math
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import List, Optional

from .errors import BadReply, NonFinitePayload, Timeout, TransportClosed, WireError
from .infer import Decision, eval_quant, prepare_features
from .quantize import QuantForest

MARKER = b"\xff\xff\xff\xff"
PAYLOAD_BYTES = 24
FRAME_BYTES = PAYLOAD_BYTES + len(MARKER)
REPLY_MAGIC = 0xB5
REPLY_BYTES = 7

_PAYLOAD = struct.Struct("<6f")
_REPLY = struct.Struct("<BBi")


def encode_sample(floats) -> bytes:
    if len(floats) != 6:
        raise NonFinitePayload(f"expected 6 readings, got {len(floats)}")
    for v in floats:
        if not math.isfinite(v):
            raise NonFinitePayload(f"non-finite reading {v!r}")
    try:
        payload = _PAYLOAD.pack(*floats)
    except (OverflowError, struct.error) as exc:
        raise NonFinitePayload(str(exc)) from None
    return payload + MARKER


def decode_payload(payload: bytes):
    """Six floats, or None when any of them is NaN/Inf."""
    vals = _PAYLOAD.unpack(payload)
    return vals if all(math.isfinite(v) for v in vals) else None


@dataclass
class DecoderState:
    buffer: bytearray = field(default_factory=bytearray)
    consumed: int = 0
    errors: int = 0
    hunting: bool = False
    skipped: int = 0  # bytes dropped from the history since synchronization was lost


_HISTORY = PAYLOAD_BYTES + len(MARKER) - 1


def decode_stream(state: DecoderState, chunk: bytes):
    """Feed bytes; return (frames, state). The state is updated in place.

    In sync the decoder expects the marker right after every 24 payload bytes.
    On a mismatch it counts one error and hunts for the next marker. If at
    least 24 bytes separate that marker from the first 25 bytes of the broken
    frame, the 24 bytes just before it are taken as a frame, so a damaged
    marker costs only its own frame.
    """
    frames: List[tuple] = []
    data = bytes(chunk)
    pos = 0
    n = len(data)
    buf = state.buffer
    state.consumed += n
    while pos < n:
        if state.hunting:
            pos = _hunt(state, data, pos, frames)
            continue
        take = min(FRAME_BYTES - len(buf), n - pos)
        buf += data[pos: pos + take]
        pos += take
        if len(buf) < FRAME_BYTES:
            break
        _check_frame(state, frames)
    # a resync may leave a complete frame in the buffer after the final chunk byte
    while not state.hunting and len(buf) >= FRAME_BYTES:
        _check_frame(state, frames)
    return frames, state


def _emit(state, payload, frames):
    vals = decode_payload(payload)
    if vals is None:
        state.errors += 1
    else:
        frames.append(vals)


def _check_frame(state: DecoderState, frames):
    buf = state.buffer
    if buf[PAYLOAD_BYTES:FRAME_BYTES] == MARKER:
        _emit(state, bytes(buf[:PAYLOAD_BYTES]), frames)
        del buf[:FRAME_BYTES]
        return
    state.errors += 1
    at = buf.find(MARKER)
    if at >= 0:
        del buf[: at + len(MARKER)]
        return
    # the last bytes may open a marker or the next payload
    del buf[: len(buf) - (len(MARKER) - 1)]
    state.hunting = True
    state.skipped = 0


def _hunt(state: DecoderState, data, pos, frames):
    hist = bytes(state.buffer)
    seg = hist + data[pos:]
    at = seg.find(MARKER)
    if at < 0:
        keep = seg[-_HISTORY:]
        state.skipped += len(seg) - len(keep)
        state.buffer[:] = keep
        return len(data)
    # a marker past a full history starts at >= 24, so the window lies inside seg
    before = state.skipped + at
    if before >= PAYLOAD_BYTES:
        _emit(state, seg[at - PAYLOAD_BYTES: at], frames)
    state.buffer.clear()
    state.hunting = False
    state.skipped = 0
    return pos + at + len(MARKER) - len(hist)


class StreamDecoder:
    """Convenience wrapper keeping its own DecoderState."""

    def __init__(self):
        self.state = DecoderState()

    def feed(self, chunk: bytes):
        frames, _ = decode_stream(self.state, chunk)
        return frames

    @property
    def errors(self) -> int:
        return self.state.errors


def encode_reply(d: Decision) -> bytes:
    body = _REPLY.pack(REPLY_MAGIC, d.label, d.score_q)
    x = 0
    for b in body:
        x ^= b
    return body + bytes([x])


def parse_reply(data: bytes) -> Decision:
    if len(data) != REPLY_BYTES:
        raise BadReply(f"reply is {len(data)} bytes, expected {REPLY_BYTES}")
    x = 0
    for b in data[:6]:
        x ^= b
    if x != data[6]:
        raise BadReply("checksum mismatch")
    magic, label, score = _REPLY.unpack(data[:6])
    if magic != REPLY_MAGIC:
        raise BadReply(f"bad magic {magic:#04x}")
    if label not in (0, 1) or label != (1 if score >= 0 else 0):
        raise BadReply(f"label {label} inconsistent with score {score}")
    return Decision(label, score)


# --- transports ---------------------------------------------------------------

class Transport:
    """Duplex byte stream. read() returns b'' when idle, raises TransportClosed at EOF."""

    def read(self, max_bytes: int, timeout: Optional[float] = None) -> bytes:
        raise NotImplementedError

    def write(self, data: bytes) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass


class _Pipe:
    def __init__(self):
        self.data = bytearray()
        self.closed = False
        self.cond = threading.Condition()


class LoopbackEnd(Transport):
    def __init__(self, rx: _Pipe, tx: _Pipe):
        self._rx, self._tx = rx, tx

    def read(self, max_bytes, timeout=None):
        rx = self._rx
        with rx.cond:
            if not rx.data and not rx.closed and timeout:
                rx.cond.wait_for(lambda: rx.data or rx.closed, timeout)
            if rx.data:
                out = bytes(rx.data[:max_bytes])
                del rx.data[:max_bytes]
                return out
            if rx.closed:
                raise TransportClosed("peer closed")
            return b""

    def write(self, data):
        tx = self._tx
        with tx.cond:
            if tx.closed:
                raise TransportClosed("peer closed")
            tx.data += data
            tx.cond.notify_all()

    def close(self):
        for p in (self._rx, self._tx):
            with p.cond:
                p.closed = True
                p.cond.notify_all()


def loopback_pair():
    """(host_end, device_end) connected in memory."""
    a, b = _Pipe(), _Pipe()
    return LoopbackEnd(a, b), LoopbackEnd(b, a)


class ReplayTransport(Transport):
    """Reads a recorded byte stream, collects everything written."""

    def __init__(self, data: bytes, chunk: int = 4096):
        self._data = bytes(data)
        self._pos = 0
        self._chunk = chunk
        self.written = bytearray()

    @classmethod
    def from_file(cls, path, chunk=4096):
        with open(path, "rb") as fh:
            return cls(fh.read(), chunk)

    def read(self, max_bytes, timeout=None):
        if self._pos >= len(self._data):
            raise TransportClosed("end of replay")
        out = self._data[self._pos: self._pos + min(max_bytes, self._chunk)]
        self._pos += len(out)
        return out

    def write(self, data):
        self.written += data


class SerialTransport(Transport):
    """pyserial adapter; only imported when selected."""

    def __init__(self, port: str, baudrate: int = 115200):
        try:
            import serial  # type: ignore
        except ImportError:
            raise WireError("the serial transport needs the 'pyserial' package") from None
        self._port = serial.Serial(port, baudrate=baudrate, timeout=0)

    def read(self, max_bytes, timeout=None):
        if timeout:
            self._port.timeout = timeout
        return self._port.read(max_bytes)

    def write(self, data):
        self._port.write(data)

    def close(self):
        self._port.close()


# --- device side --------------------------------------------------------------

class LoopState(enum.Enum):
    WAIT_FRAME = "WAIT_FRAME"
    INFER = "INFER"
    REPLY = "REPLY"
    STOPPED = "STOPPED"


@dataclass
class LoopExit:
    reason: str
    frames: int
    errors: int


class DeviceLoop:
    """WAIT_FRAME -> INFER -> REPLY -> WAIT_FRAME over an abstract transport."""

    def __init__(self, transport: Transport, model: QuantForest, read_size: int = 64,
                 poll_timeout: float = 0.05):
        model.check()
        self.transport = transport
        self.model = model
        self.decoder = StreamDecoder()
        self.state = LoopState.WAIT_FRAME
        self.read_size = read_size
        self.poll_timeout = poll_timeout
        self.frames = 0
        self.latencies_ns = deque(maxlen=4096)
        self._pending = deque()
        self._stop = threading.Event()

    def stop(self):
        self._stop.set()

    def step(self) -> int:
        """One read + handle every complete frame; returns replies sent."""
        data = self.transport.read(self.read_size, self.poll_timeout)
        if not data:
            return 0
        sent = 0
        for vals in self.decoder.feed(data):
            t0 = time.perf_counter_ns()
            self.state = LoopState.INFER
            d = eval_quant(self.model, prepare_features(vals, self.model.scaler, self.model.spec,
                                                        self.model.feature_mask))
            self.state = LoopState.REPLY
            self.transport.write(encode_reply(d))
            self.latencies_ns.append(time.perf_counter_ns() - t0)
            self.frames += 1
            sent += 1
            self.state = LoopState.WAIT_FRAME
        return sent

    def run(self, max_frames: Optional[int] = None) -> LoopExit:
        reason = "stopped"
        try:
            while not self._stop.is_set():
                if max_frames is not None and self.frames >= max_frames:
                    reason = "frame limit"
                    break
                self.step()
        except TransportClosed as exc:
            reason = f"transport closed: {exc}"
        except WireError as exc:
            reason = f"transport failure: {exc}"
        except OSError as exc:
            reason = f"transport failure: {exc}"
        self.state = LoopState.STOPPED
        return LoopExit(reason, self.frames, self.decoder.errors)


def device_loop(transport: Transport, model: QuantForest, max_frames=None) -> LoopExit:
    return DeviceLoop(transport, model).run(max_frames)


def serve_in_thread(transport: Transport, model: QuantForest):
    loop = DeviceLoop(transport, model)
    th = threading.Thread(target=loop.run, name="queenwatch-device", daemon=True)
    th.start()
    return loop, th


# --- host side ----------------------------------------------------------------

def host_request(transport: Transport, floats, timeout: float = 1.0) -> Decision:
    transport.write(encode_sample(floats))
    deadline = time.monotonic() + timeout
    buf = bytearray()
    while len(buf) < REPLY_BYTES:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise Timeout(f"no reply within {timeout} s")
        buf += transport.read(REPLY_BYTES - len(buf), remaining)
    return parse_reply(bytes(buf))


def payload_bytes(n_readings: int = 6) -> int:
    return 4 * n_readings


def write_replay(samples, path) -> int:
    """Record a host stream of frames for the replay transport."""
    data = b"".join(encode_sample(s) for s in samples)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def read_replies(data: bytes):
    return [parse_reply(data[i: i + REPLY_BYTES]) for i in range(0, len(data) - REPLY_BYTES + 1, REPLY_BYTES)]

