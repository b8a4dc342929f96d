"""Edge/cloud deployment, frame codec, passive tap, and capture files.

Frames are ``"SLKF" | version u8 | msg_type u8 | session u32 | len u32 | payload``
(little-endian). Feature frames carry the flattened edge output as raw
binary32 and nothing else, so the tensor shape never crosses the wire.

Two transports drive the same session logic: an in-process simulation used
by all experiments, and TCP sockets for the CLI services.
"""
from __future__ import annotations

import enum
import logging
import socket
import socketserver
import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import (
    BadMagic,
    ChecksumMismatch,
    FormatVersionMismatch,
    FrameError,
    InconsistentDim,
    IoFailure,
    PayloadLengthMismatch,
    ProtocolError,
    Timeout,
    TrailingBytes,
    Truncated,
    UnknownType,
    UnsupportedVersion,
)
from .models import flatten_features

log = logging.getLogger(__name__)

MAGIC = b"SLKF"
VERSION = 1
HEADER = struct.Struct("<4sBBII")
HEADER_SIZE = HEADER.size  # 14
MAX_PAYLOAD = 64 << 20


class MsgType(enum.IntEnum):
    INPUT = 1
    FEATURE = 2
    OUTPUT_SCORE = 3
    OUTPUT_HARD = 4
    SESSION_HELLO = 5
    ACK = 6
    ERROR = 7


class OutputMode(str, enum.Enum):
    SCORE = "score"
    HARD = "hard"
    NONE = "none"


@dataclass(frozen=True)
class Frame:
    msg_type: int
    session_id: int
    payload: bytes = b""


def encode_frame(frame: Frame) -> bytes:
    if frame.msg_type not in MsgType.__members__.values():
        raise UnknownType(f"msg_type {frame.msg_type}")
    return HEADER.pack(MAGIC, VERSION, frame.msg_type, frame.session_id, len(frame.payload)) + bytes(frame.payload)


def parse_header(buf) -> tuple[int, int, int]:
    """Validate the 14-byte header; returns (msg_type, session_id, payload_len)."""
    if len(buf) < HEADER_SIZE:
        if bytes(buf[:4]) != MAGIC[: min(4, len(buf))]:
            raise BadMagic(f"bad magic {bytes(buf[:4])!r}")
        raise Truncated(f"{len(buf)} bytes, header needs {HEADER_SIZE}")
    magic, version, msg_type, session_id, length = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}")
    if msg_type not in MsgType.__members__.values():
        raise UnknownType(f"msg_type {msg_type}")
    if length > MAX_PAYLOAD:
        raise Truncated(f"declared payload {length} exceeds the {MAX_PAYLOAD}-byte limit")
    return msg_type, session_id, length


def decode_frame(buf: bytes) -> Frame:
    """Decode exactly one frame; never reads past the declared payload length."""
    msg_type, session_id, length = parse_header(buf)
    end = HEADER_SIZE + length
    if len(buf) < end:
        raise Truncated(f"payload has {len(buf) - HEADER_SIZE} of {length} bytes")
    if len(buf) > end:
        raise TrailingBytes(f"{len(buf) - end} bytes after the frame")
    return Frame(msg_type, session_id, bytes(buf[HEADER_SIZE:end]))


class FrameReader:
    """Incremental parser for a byte stream that may split frames arbitrarily."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Frame]:
        self._buf += data
        frames = []
        while len(self._buf) >= HEADER_SIZE:
            _, _, length = parse_header(self._buf)
            end = HEADER_SIZE + length
            if len(self._buf) < end:
                break
            frames.append(decode_frame(bytes(self._buf[:end])))
            del self._buf[:end]
        return frames

    @property
    def pending(self) -> int:
        return len(self._buf)


# ---------------------------------------------------------------- payloads


def pack_f32(values) -> bytes:
    return np.ascontiguousarray(np.asarray(values, dtype="<f4")).tobytes()


def unpack_f32(payload: bytes) -> np.ndarray:
    if len(payload) % 4:
        raise PayloadLengthMismatch(f"{len(payload)} bytes is not a whole number of binary32 values")
    return np.frombuffer(payload, dtype="<f4")


def pack_shape(shape) -> bytes:
    return struct.pack("<3I", *shape)


def unpack_shape(payload: bytes) -> tuple[int, int, int]:
    if len(payload) != 12:
        raise PayloadLengthMismatch("hello payload must be three u32 dimensions")
    return struct.unpack("<3I", payload)


def error_frame(session_id: int, code: int, message: str) -> Frame:
    return Frame(MsgType.ERROR, session_id, struct.pack("<H", code) + message.encode("utf-8"))


def parse_error(frame: Frame) -> tuple[int, str]:
    if len(frame.payload) < 2:
        return 0, ""
    return struct.unpack_from("<H", frame.payload)[0], frame.payload[2:].decode("utf-8", "replace")


ERR_PROTOCOL = 1
ERR_LENGTH = 2
ERR_STATE = 3
ERR_UPSTREAM = 4


# ---------------------------------------------------------------- sessions


@dataclass(frozen=True)
class SessionConfig:
    output_mode: OutputMode
    input_shape: tuple
    feature_shape: tuple

    @property
    def feature_bytes(self) -> int:
        c, h, w = self.feature_shape
        return 4 * c * h * w

    @property
    def input_bytes(self) -> int:
        c, h, w = self.input_shape
        return 4 * c * h * w


class CloudSession:
    """Cloud side of one session: reshape the feature payload, run the cloud part, reply."""

    def __init__(self, cloud, config: SessionConfig):
        self.cloud = cloud
        self.config = config
        self.session_id: int | None = None

    def handle(self, data: bytes) -> tuple[bytes, bool]:
        """Returns (reply bytes, close?)."""
        try:
            frame = decode_frame(data)
        except FrameError as exc:
            return encode_frame(error_frame(self.session_id or 0, ERR_PROTOCOL, str(exc))), True
        sid = frame.session_id
        if frame.msg_type == MsgType.SESSION_HELLO:
            try:
                shape = unpack_shape(frame.payload)
            except FrameError as exc:
                return encode_frame(error_frame(sid, ERR_PROTOCOL, str(exc))), True
            if tuple(shape) != tuple(self.config.input_shape):
                return encode_frame(error_frame(sid, ERR_STATE, f"input shape {shape} not served")), True
            self.session_id = sid
            return encode_frame(Frame(MsgType.ACK, sid)), False
        if self.session_id is None or sid != self.session_id:
            return encode_frame(error_frame(sid, ERR_STATE, "no session")), True
        if frame.msg_type != MsgType.FEATURE:
            return encode_frame(error_frame(sid, ERR_STATE, f"unexpected msg_type {frame.msg_type}")), False
        if len(frame.payload) != self.config.feature_bytes:
            return encode_frame(
                error_frame(sid, ERR_LENGTH, f"feature payload {len(frame.payload)} != {self.config.feature_bytes}")
            ), False
        return encode_frame(self.respond(sid, frame.payload)), False

    def respond(self, sid: int, payload: bytes) -> Frame:
        feat = torch.from_numpy(unpack_f32(payload).copy()).reshape(1, *self.config.feature_shape)
        with torch.no_grad():
            logits = self.cloud(feat.to(_param_dtype(self.cloud)))
            probs = torch.softmax(logits, dim=1).to(torch.float32)[0]
        mode = self.config.output_mode
        if mode == OutputMode.SCORE:
            return Frame(MsgType.OUTPUT_SCORE, sid, pack_f32(probs.numpy()))
        if mode == OutputMode.HARD:
            return Frame(MsgType.OUTPUT_HARD, sid, struct.pack("<H", int(probs.argmax())))
        return Frame(MsgType.ACK, sid)


def _param_dtype(part):
    params = part.parameters()
    return params[0].dtype if params else torch.float32


class EdgeSession:
    """Edge side of one session; ``upstream`` sends bytes to the cloud and returns its reply."""

    def __init__(self, edge, input_shape, upstream):
        self.edge = edge
        self.input_shape = tuple(input_shape)
        self.upstream = upstream
        self.session_id: int | None = None

    def handle(self, data: bytes) -> tuple[bytes, bool]:
        try:
            frame = decode_frame(data)
        except FrameError as exc:
            return encode_frame(error_frame(self.session_id or 0, ERR_PROTOCOL, str(exc))), True
        sid = frame.session_id
        if frame.msg_type == MsgType.SESSION_HELLO:
            try:
                shape = unpack_shape(frame.payload)
            except FrameError as exc:
                return encode_frame(error_frame(sid, ERR_PROTOCOL, str(exc))), True
            if tuple(shape) != self.input_shape:
                return encode_frame(error_frame(sid, ERR_STATE, f"edge expects input {self.input_shape}")), True
            reply = self.upstream(data)
            self.session_id = sid
            return reply, decode_frame(reply).msg_type == MsgType.ERROR
        if self.session_id is None or sid != self.session_id:
            return encode_frame(error_frame(sid, ERR_STATE, "no session")), True
        if frame.msg_type != MsgType.INPUT:
            return encode_frame(error_frame(sid, ERR_STATE, f"unexpected msg_type {frame.msg_type}")), False
        expected = 4 * int(np.prod(self.input_shape))
        if len(frame.payload) != expected:
            return encode_frame(error_frame(sid, ERR_LENGTH, f"input payload {len(frame.payload)} != {expected}")), False
        return self.upstream(encode_frame(Frame(MsgType.FEATURE, sid, self.features(frame.payload)))), False

    def features(self, payload: bytes) -> bytes:
        x = torch.from_numpy(unpack_f32(payload).copy()).reshape(1, *self.input_shape)
        with torch.no_grad():
            feat = self.edge(x.to(_param_dtype(self.edge)))
        return pack_f32(flatten_features(feat).to(torch.float32).numpy())


# ---------------------------------------------------------------- capture files

CAPTURE_MAGIC = b"SLKX"
CAPTURE_VERSION = 1
CAPTURE_HEADER = struct.Struct("<4sHII")


def encode_capture(rows: np.ndarray) -> bytes:
    rows = np.asarray(rows, dtype="<f4")
    if rows.ndim != 2:
        raise InconsistentDim("capture rows must form an N x d matrix")
    n, d = rows.shape
    body = CAPTURE_HEADER.pack(CAPTURE_MAGIC, CAPTURE_VERSION, n, d) + rows.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_capture(raw: bytes) -> np.ndarray:
    if len(raw) < CAPTURE_HEADER.size + 4:
        raise Truncated("capture file shorter than its header")
    magic, version, n, d = CAPTURE_HEADER.unpack_from(raw)
    if magic != CAPTURE_MAGIC:
        raise BadMagic(f"bad capture magic {magic!r}")
    if version != CAPTURE_VERSION:
        raise FormatVersionMismatch(f"capture version {version}")
    if len(raw) != CAPTURE_HEADER.size + 4 * n * d + 4:
        raise Truncated(f"capture body length does not match N={n}, d={d}")
    if struct.unpack("<I", raw[-4:])[0] != zlib.crc32(raw[:-4]):
        raise ChecksumMismatch("capture CRC32 does not match")
    return np.frombuffer(raw[CAPTURE_HEADER.size : -4], dtype="<f4").reshape(n, d)


def write_capture(path, rows) -> None:
    try:
        Path(path).write_bytes(encode_capture(rows))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_capture(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return decode_capture(raw)


class Sniffer:
    """Read-only observer of the edge-to-cloud byte stream.

    Every feature frame's payload becomes one capture row. ``d`` is fixed by
    the first feature frame. The sniffer never returns or alters bytes.
    """

    def __init__(self):
        self._reader = FrameReader()
        self._rows: list[bytes] = []
        self.d: int | None = None
        self.broken = False

    def observe(self, data: bytes) -> None:
        if self.broken:
            return
        try:
            frames = self._reader.feed(data)
        except FrameError as exc:
            # a tap cannot resynchronise a corrupted stream; stop parsing, keep rows
            log.warning("sniffer lost framing: %s", exc)
            self.broken = True
            return
        for frame in frames:
            if frame.msg_type != MsgType.FEATURE:
                continue
            d = len(frame.payload) // 4
            if self.d is None:
                self.d = d
            elif d != self.d or len(frame.payload) % 4:
                raise InconsistentDim(f"feature frame with {len(frame.payload)} bytes, expected {4 * self.d}")
            self._rows.append(frame.payload)

    @property
    def n(self) -> int:
        return len(self._rows)

    def matrix(self) -> np.ndarray:
        if not self._rows:
            return np.zeros((0, self.d or 0), dtype="<f4")
        return np.frombuffer(b"".join(self._rows), dtype="<f4").reshape(len(self._rows), self.d)

    def save(self, path) -> None:
        write_capture(path, self.matrix())


# ---------------------------------------------------------------- simulated transport


class Link:
    """In-process edge-to-cloud hop with read-only taps on both directions."""

    def __init__(self, cloud_session: CloudSession):
        self.cloud_session = cloud_session
        self.taps: list = []
        self.closed = False

    def attach(self, tap) -> None:
        self.taps.append(tap)

    def send(self, data: bytes) -> bytes:
        if self.closed:
            return encode_frame(error_frame(0, ERR_UPSTREAM, "link closed"))
        for tap in self.taps:
            tap.observe(data)
        reply, close = self.cloud_session.handle(data)
        self.closed = close
        return reply


class SimulatedDeployment:
    """Client-facing edge node wired to a cloud node through a tappable link."""

    def __init__(self, split_model, input_shape, mode="score"):
        self.split = split_model
        self.config = SessionConfig(OutputMode(mode), tuple(input_shape), tuple(split_model.feature_shape))
        self.taps: list = []

    def attach(self, tap) -> None:
        """Taps attached here observe every link opened afterwards."""
        self.taps.append(tap)

    def open(self):
        link = Link(CloudSession(self.split.cloud, self.config))
        for tap in self.taps:
            link.attach(tap)
        return SimTransport(EdgeSession(self.split.edge, self.config.input_shape, link.send))


class SimTransport:
    def __init__(self, edge_session: EdgeSession):
        self.edge_session = edge_session
        self.closed = False

    def exchange(self, data: bytes) -> bytes:
        if self.closed:
            raise ProtocolError("session closed")
        reply, close = self.edge_session.handle(data)
        self.closed = close
        return reply

    def close(self) -> None:
        self.closed = True


# ---------------------------------------------------------------- socket transport


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def recv_frame_bytes(sock: socket.socket) -> bytes | None:
    """Read one frame's bytes from a socket; None on clean EOF before a header."""
    head = _recv_exact(sock, HEADER_SIZE, allow_eof=True)
    if head is None:
        return None
    _, _, length = parse_header(head)
    return head + _recv_exact(sock, length)


def _recv_exact(sock, n, allow_eof=False):
    chunks, got = [], 0
    while got < n:
        try:
            chunk = sock.recv(n - got)
        except socket.timeout as exc:
            raise Timeout("peer did not answer in time") from exc
        if not chunk:
            if allow_eof and got == 0:
                return None
            raise Truncated(f"stream ended after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


class SocketTransport:
    def __init__(self, addr: str, timeout: float = 10.0):
        self.sock = socket.create_connection(parse_addr(addr), timeout=timeout)
        self.sock.settimeout(timeout)

    def exchange(self, data: bytes) -> bytes:
        self.sock.sendall(data)
        reply = recv_frame_bytes(self.sock)
        if reply is None:
            raise ProtocolError("connection closed by peer")
        return reply

    def close(self) -> None:
        self.sock.close()


class _SessionHandler(socketserver.BaseRequestHandler):
    def handle(self):
        session = self.server.make_session()
        try:
            while True:
                try:
                    data = recv_frame_bytes(self.request)
                except FrameError as exc:
                    self.request.sendall(encode_frame(error_frame(0, ERR_PROTOCOL, str(exc))))
                    return
                if data is None:
                    return
                reply, close = session.handle(data)
                self.request.sendall(reply)
                if close:
                    return
        except (OSError, ProtocolError) as exc:
            log.info("session ended: %s", exc)
        finally:
            closer = getattr(session, "close", None)
            if closer:
                closer()


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, addr, make_session):
        self.make_session = make_session
        super().__init__(addr, _SessionHandler)


class _UpstreamEdgeSession(EdgeSession):
    def __init__(self, edge, input_shape, cloud_addr, timeout):
        self._transport = SocketTransport(cloud_addr, timeout)
        super().__init__(edge, input_shape, self._transport.exchange)

    def close(self):
        self._transport.close()


def cloud_server(cloud, config: SessionConfig, listen: str) -> _Server:
    return _Server(parse_addr(listen), lambda: CloudSession(cloud, config))


def edge_server(edge, input_shape, listen: str, cloud_addr: str, timeout: float = 10.0) -> _Server:
    return _Server(parse_addr(listen), lambda: _UpstreamEdgeSession(edge, input_shape, cloud_addr, timeout))


class TapProxy:
    """TCP pass-through placed on the edge-to-cloud hop; bytes are relayed unchanged."""

    def __init__(self, listen: str, upstream: str, sniffer: Sniffer):
        self.sniffer = sniffer
        self.upstream = upstream
        self.sock = socket.create_server(parse_addr(listen))
        self.address = self.sock.getsockname()
        self._stop = threading.Event()
        self._lock = threading.Lock()

    def serve_forever(self) -> None:
        self.sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                down, _ = self.sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            up = socket.create_connection(parse_addr(self.upstream))
            threading.Thread(target=self._pump, args=(down, up, True), daemon=True).start()
            threading.Thread(target=self._pump, args=(up, down, False), daemon=True).start()

    def _pump(self, src, dst, observe):
        try:
            while True:
                data = src.recv(65536)
                if not data:
                    break
                if observe:
                    with self._lock:
                        try:
                            self.sniffer.observe(data)
                        except InconsistentDim as exc:
                            log.warning("%s", exc)
                dst.sendall(data)
        except OSError:
            pass
        finally:
            for s in (src, dst):
                try:
                    s.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass

    def shutdown(self) -> None:
        self._stop.set()
        self.sock.close()


# ---------------------------------------------------------------- client

_session_counter = iter(range(1, 1 << 32))


class Client:
    """Queries the deployment one image at a time, counting every inference."""

    def __init__(self, transport, input_shape, mode="score", session_id: int | None = None):
        self.transport = transport
        self.input_shape = tuple(input_shape)
        self.mode = OutputMode(mode)
        self.session_id = next(_session_counter) if session_id is None else session_id
        self.queries = 0
        reply = decode_frame(self.transport.exchange(encode_frame(Frame(MsgType.SESSION_HELLO, self.session_id, pack_shape(self.input_shape)))))
        if reply.msg_type != MsgType.ACK:
            raise ProtocolError(f"session refused: {parse_error(reply)[1]}")

    def infer(self, image):
        """One query. Returns probabilities (score), a class index (hard) or None (none)."""
        arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
        if tuple(arr.shape[-3:]) != self.input_shape or arr.size != int(np.prod(self.input_shape)):
            raise ProtocolError(f"image shape {arr.shape} does not match session {self.input_shape}")
        self.queries += 1
        try:
            reply = decode_frame(self.transport.exchange(encode_frame(Frame(MsgType.INPUT, self.session_id, pack_f32(arr.reshape(-1))))))
        except FrameError as exc:
            raise ProtocolError(str(exc)) from exc
        if reply.msg_type == MsgType.ERROR:
            raise ProtocolError(parse_error(reply)[1])
        if reply.msg_type == MsgType.OUTPUT_SCORE:
            return unpack_f32(reply.payload).copy()
        if reply.msg_type == MsgType.OUTPUT_HARD:
            return struct.unpack("<H", reply.payload)[0]
        if reply.msg_type == MsgType.ACK:
            return None
        raise ProtocolError(f"unexpected reply type {reply.msg_type}")

    def close(self) -> None:
        self.transport.close()


def client_infer(client: Client, image):
    return client.infer(image)
