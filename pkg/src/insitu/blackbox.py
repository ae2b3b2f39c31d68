"""Instrument abstraction: the trainer's only window onto the optics.

An instrument accepts phase patterns and returns sensor images, full stop.
LocalInstrument wraps the simulated bench in process; RemoteInstrument speaks
a small framed TCP protocol to a bench served elsewhere (serve_sim here, or
real hardware speaking the same frames). Both round values through float32,
the wire precision, so a training run is bit-identical either way.

Frame layout: u32 little-endian body length, u8 message type, body. Replies
echo the request type with the high bit set; error replies are type 0x7f with
a u16 code and a UTF-8 message. Arrays travel as little-endian float32,
C order. A malformed body gets an error reply and the connection lives on; an
oversized length or a half frame is unrecoverable and drops the connection.
"""

from __future__ import annotations

import os
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass

import numpy as np

from . import optics
from .errors import ConfigError, InstrumentError, ProtocolError

PROTOCOL_VERSION = 1
MAX_PAYLOAD = 64 * 1024 * 1024

MSG_HELLO = 0x01
MSG_DESCRIBE = 0x02
MSG_SET_INPUT = 0x03
MSG_MEASURE = 0x04
MSG_MEASURE_BATCH = 0x05
MSG_ERROR = 0x7F
REPLY_BIT = 0x80

ERR_MALFORMED = 1
ERR_UNKNOWN_TYPE = 2
ERR_VERSION = 3

ADDRESS_ENV_VAR = "INSITU_INSTRUMENT_ADDR"


@dataclass(frozen=True)
class EnvDescriptor:
    """What a trainer may know about an instrument: grid sizes and the
    modulator's level count. Nothing about what sits between them."""

    height: int
    width: int
    levels: int
    sensor_height: int
    sensor_width: int
    version: int = PROTOCOL_VERSION

    @property
    def slm_shape(self):
        return (self.height, self.width)

    @property
    def sensor_shape(self):
        return (self.sensor_height, self.sensor_width)

    def pack(self) -> bytes:
        return struct.pack("<5I", self.height, self.width, self.levels,
                           self.sensor_height, self.sensor_width)

    @classmethod
    def unpack(cls, payload: bytes, version: int = PROTOCOL_VERSION):
        if len(payload) != 20:
            raise ProtocolError(f"descriptor body is {len(payload)} bytes, expected 20")
        return cls(*struct.unpack("<5I", payload), version=version)


def encode_frame(msg_type: int, payload: bytes = b"") -> bytes:
    if not 0 <= msg_type <= 0xFF:
        raise ValueError(f"message type {msg_type} out of range")
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(payload)} bytes exceeds the "
                            f"{MAX_PAYLOAD} byte limit")
    return struct.pack("<IB", len(payload), msg_type) + payload


def encode_error(code: int, message: str) -> bytes:
    return encode_frame(MSG_ERROR, struct.pack("<H", code) + message.encode())


def split_frame(data: bytes):
    """Parse one frame off the front of a buffer; returns ((type, payload),
    remainder) or None if the buffer holds less than a full frame."""
    if len(data) < 5:
        return None
    length, msg_type = struct.unpack_from("<IB", data)
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"frame length {length} exceeds the {MAX_PAYLOAD} byte limit")
    if len(data) < 5 + length:
        return None
    return (msg_type, data[5:5 + length]), data[5 + length:]


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            raise ProtocolError("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket):
    header = _recv_exact(sock, 5)
    length, msg_type = struct.unpack("<IB", header)
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"frame length {length} exceeds the {MAX_PAYLOAD} byte limit")
    return msg_type, _recv_exact(sock, length) if length else b""


def _to_wire(array) -> bytes:
    return np.ascontiguousarray(array, dtype="<f4").tobytes()


def _from_wire(payload: bytes, shape) -> np.ndarray:
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)


# ---------------------------------------------------------------------------
# local instrument

class LocalInstrument:
    """In-process bench with the same observable behaviour as the remote one.

    stream picks the noise stream; it mirrors the server's per-connection
    numbering, so LocalInstrument(config, stream=0) reproduces the first
    connection to serve_sim(config) bit for bit.
    """

    def __init__(self, config: optics.BenchConfig, stream: int = 0):
        self._config = config
        self._rng = np.random.default_rng((config.seed, stream))
        self._input = None
        self._count = 0
        h, w = config.shape
        self.descriptor = EnvDescriptor(h, w, 2 ** config.slm_bits, h, w)

    @property
    def measurement_count(self) -> int:
        return self._count

    def set_input(self, phase) -> None:
        if phase is None:
            self._input = None
            return
        arr = np.asarray(phase, dtype=np.float64)
        if arr.shape != self._config.shape:
            raise ValueError(f"input shape {arr.shape} != grid {self._config.shape}")
        self._input = _from_wire(_to_wire(arr), arr.shape)

    def measure_batch(self, phases) -> np.ndarray:
        arr = np.asarray(phases, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[1:] != self._config.shape:
            raise ValueError(f"phase stack shape {arr.shape} != (M,) + {self._config.shape}")
        wire = _from_wire(_to_wire(arr), arr.shape)
        images = optics.run_bench_batch(self._config, self._input, wire, self._rng)
        self._count += arr.shape[0]
        return _from_wire(_to_wire(images), images.shape)

    def measure(self, phase) -> np.ndarray:
        return self.measure_batch(np.asarray(phase, dtype=np.float64)[None])[0]

    def close(self) -> None:
        pass


# ---------------------------------------------------------------------------
# protocol server

class _BenchSession:
    """Per-connection bench state and request dispatch (shared by tests that
    poke the protocol without sockets)."""

    def __init__(self, config: optics.BenchConfig, stream: int):
        self.config = config
        self.rng = np.random.default_rng((config.seed, stream))
        self.input = None
        h, w = config.shape
        self.descriptor = EnvDescriptor(h, w, 2 ** config.slm_bits, h, w)

    def respond(self, msg_type: int, payload: bytes) -> bytes:
        h, w = self.config.shape
        frame_bytes = h * w * 4
        if msg_type == MSG_HELLO:
            if len(payload) != 4:
                return encode_error(ERR_MALFORMED, "hello body must be a u32 version")
            (version,) = struct.unpack("<I", payload)
            if version != PROTOCOL_VERSION:
                return encode_error(ERR_VERSION, f"protocol version {version} "
                                                 f"unsupported, this is {PROTOCOL_VERSION}")
            return encode_frame(MSG_HELLO | REPLY_BIT, struct.pack("<I", PROTOCOL_VERSION))
        if msg_type == MSG_DESCRIBE:
            if payload:
                return encode_error(ERR_MALFORMED, "describe takes no body")
            return encode_frame(MSG_DESCRIBE | REPLY_BIT, self.descriptor.pack())
        if msg_type == MSG_SET_INPUT:
            if not payload:
                self.input = None
                return encode_frame(MSG_SET_INPUT | REPLY_BIT)
            if len(payload) != frame_bytes:
                return encode_error(ERR_MALFORMED, f"input body is {len(payload)} "
                                                   f"bytes, expected {frame_bytes}")
            self.input = _from_wire(payload, (h, w))
            return encode_frame(MSG_SET_INPUT | REPLY_BIT)
        if msg_type == MSG_MEASURE:
            if len(payload) != frame_bytes:
                return encode_error(ERR_MALFORMED, f"phase body is {len(payload)} "
                                                   f"bytes, expected {frame_bytes}")
            image = self._run(_from_wire(payload, (1, h, w)))
            return encode_frame(MSG_MEASURE | REPLY_BIT, _to_wire(image[0]))
        if msg_type == MSG_MEASURE_BATCH:
            if len(payload) < 4:
                return encode_error(ERR_MALFORMED, "batch body needs a u32 count")
            (count,) = struct.unpack_from("<I", payload)
            if count < 1 or len(payload) != 4 + count * frame_bytes:
                return encode_error(ERR_MALFORMED, f"batch of {count} needs "
                                                   f"{4 + count * frame_bytes} bytes, got {len(payload)}")
            images = self._run(_from_wire(payload[4:], (count, h, w)))
            return encode_frame(MSG_MEASURE_BATCH | REPLY_BIT,
                                struct.pack("<I", count) + _to_wire(images))
        return encode_error(ERR_UNKNOWN_TYPE, f"unknown message type {msg_type:#04x}")

    def _run(self, phases: np.ndarray) -> np.ndarray:
        return optics.run_bench_batch(self.config, self.input, phases, self.rng)


class _SimHandler(socketserver.BaseRequestHandler):
    def handle(self):
        session = _BenchSession(self.server.config, self.server.claim_stream())
        while True:
            try:
                msg_type, payload = read_frame(self.request)
            except (ProtocolError, OSError):
                return
            try:
                self.request.sendall(session.respond(msg_type, payload))
            except OSError:
                return


class SimServer(socketserver.ThreadingTCPServer):
    """Serves a simulated bench over TCP, one noise stream per connection."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, config: optics.BenchConfig, host: str = "127.0.0.1",
                 port: int = 0):
        self.config = config
        self._stream_lock = threading.Lock()
        self._next_stream = 0
        super().__init__((host, port), _SimHandler)

    def claim_stream(self) -> int:
        with self._stream_lock:
            stream = self._next_stream
            self._next_stream += 1
        return stream

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start_background(self) -> "SimServer":
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return self


def serve_sim(config: optics.BenchConfig, host: str = "127.0.0.1",
              port: int = 0) -> SimServer:
    """Build a bench server; call .serve_forever() (or .start_background()
    in tests) and .shutdown()/.server_close() when done."""
    return SimServer(config, host, port)


# ---------------------------------------------------------------------------
# protocol client

class RemoteInstrument:
    """Client for a bench served over TCP. Same surface as LocalInstrument."""

    def __init__(self, address: str, timeout: float = 30.0):
        host, _, port = address.rpartition(":")
        if not host or not port.isdigit():
            raise ConfigError(f"instrument address must be host:port, got {address!r}")
        try:
            self._sock = socket.create_connection((host, int(port)), timeout=timeout)
        except OSError as exc:
            raise InstrumentError(f"cannot reach instrument at {address}: {exc}") from exc
        self._count = 0
        reply = self._request(MSG_HELLO, struct.pack("<I", PROTOCOL_VERSION))
        (version,) = struct.unpack("<I", reply)
        if version != PROTOCOL_VERSION:
            self.close()
            raise InstrumentError(f"instrument speaks protocol {version}, "
                                  f"this client speaks {PROTOCOL_VERSION}")
        self.descriptor = EnvDescriptor.unpack(self._request(MSG_DESCRIBE, b""),
                                               version=version)

    @property
    def measurement_count(self) -> int:
        return self._count

    def _request(self, msg_type: int, payload: bytes) -> bytes:
        try:
            self._sock.sendall(encode_frame(msg_type, payload))
            reply_type, reply = read_frame(self._sock)
        except socket.timeout as exc:
            raise InstrumentError("instrument timed out") from exc
        except OSError as exc:
            raise InstrumentError(f"instrument connection failed: {exc}") from exc
        if reply_type == MSG_ERROR:
            code = struct.unpack_from("<H", reply)[0] if len(reply) >= 2 else 0
            raise InstrumentError(f"instrument error {code}: "
                                  f"{reply[2:].decode(errors='replace')}")
        if reply_type != (msg_type | REPLY_BIT):
            raise ProtocolError(f"reply type {reply_type:#04x} does not match "
                                f"request {msg_type:#04x}")
        return reply

    def set_input(self, phase) -> None:
        if phase is None:
            self._request(MSG_SET_INPUT, b"")
            return
        arr = np.asarray(phase, dtype=np.float64)
        if arr.shape != self.descriptor.slm_shape:
            raise ValueError(f"input shape {arr.shape} != grid {self.descriptor.slm_shape}")
        self._request(MSG_SET_INPUT, _to_wire(arr))

    def measure_batch(self, phases) -> np.ndarray:
        arr = np.asarray(phases, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[1:] != self.descriptor.slm_shape:
            raise ValueError(f"phase stack shape {arr.shape} != (M,) + "
                             f"{self.descriptor.slm_shape}")
        count = arr.shape[0]
        reply = self._request(MSG_MEASURE_BATCH,
                              struct.pack("<I", count) + _to_wire(arr))
        (got,) = struct.unpack_from("<I", reply)
        expected = 4 + got * self.descriptor.sensor_height * self.descriptor.sensor_width * 4
        if got != count or len(reply) != expected:
            raise ProtocolError(f"batch reply carries {got} images "
                                f"({len(reply)} bytes) for a batch of {count}")
        self._count += count
        return _from_wire(reply[4:], (count,) + self.descriptor.sensor_shape)

    def measure(self, phase) -> np.ndarray:
        arr = np.asarray(phase, dtype=np.float64)
        if arr.shape != self.descriptor.slm_shape:
            raise ValueError(f"phase shape {arr.shape} != grid {self.descriptor.slm_shape}")
        reply = self._request(MSG_MEASURE, _to_wire(arr))
        self._count += 1
        return _from_wire(reply, self.descriptor.sensor_shape)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


def connect_instrument(config: optics.BenchConfig, address: str | None = None):
    """LocalInstrument on config, unless an address (argument or the
    INSITU_INSTRUMENT_ADDR variable) points at a served bench."""
    if address is None:
        address = os.environ.get(ADDRESS_ENV_VAR) or None
    if address is None:
        return LocalInstrument(config)
    return RemoteInstrument(address)
