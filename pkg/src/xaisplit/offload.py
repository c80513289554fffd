"""Online runtime: wire protocol, client/server halves, simulated link and latency accounting.

Frames on the stream are ``[u32 length][body]``; every integer is big-endian.
A request body is a FeaturePacket, a response body is a LogitsReply.  The
server never answers a packet it cannot validate; the client treats the missing
reply as a timeout and falls back to its local head.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .codec import CodecError, Quantizer, decode_block, encode_block
from .nn import SplitModel, combine, split_features

log = logging.getLogger(__name__)

MAGIC = b"XSPF"
VERSION = 1
# quantizer_id values: 0 is the model's feature quantizer, RAW_INPUT marks an
# edge-only packet carrying the 8-bit raw input instead of features
FEATURE_QUANTIZER = 0
RAW_INPUT = 255

_PACKET_HEAD = struct.Struct(">4sBIIB")
_REPLY_HEAD = struct.Struct(">IH")
_FRAME = struct.Struct(">I")
MAX_FRAME = 1 << 24

MODES = ("partitioned", "edge_only", "local_only")


class ProtocolError(ValueError):
    """Malformed packet; ``reason`` is a short machine-readable tag."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


class TransportError(ConnectionError):
    pass


# ----------------------------------------------------------------------- protocol


@dataclass(frozen=True)
class FeaturePacket:
    sample_id: int
    quantizer_id: int
    block: bytes
    version: int = VERSION

    def to_bytes(self) -> bytes:
        return _PACKET_HEAD.pack(MAGIC, self.version, self.sample_id, len(self.block), self.quantizer_id) + self.block

    @classmethod
    def from_bytes(cls, buf: bytes) -> FeaturePacket:
        if len(buf) < _PACKET_HEAD.size:
            raise ProtocolError("truncated", f"{len(buf)} bytes is shorter than the {_PACKET_HEAD.size}-byte header")
        magic, version, sid, plen, qid = _PACKET_HEAD.unpack_from(buf)
        if magic != MAGIC:
            raise ProtocolError("bad_magic", repr(magic))
        if version != VERSION:
            raise ProtocolError("bad_version", str(version))
        block = bytes(buf[_PACKET_HEAD.size:])
        if len(block) < plen:
            raise ProtocolError("truncated", f"payload_len {plen} but {len(block)} bytes follow")
        if len(block) > plen:
            raise ProtocolError("trailing_bytes", f"payload_len {plen} but {len(block)} bytes follow")
        return cls(sid, qid, block, version)

    @property
    def payload_len(self) -> int:
        return len(self.block)


@dataclass(frozen=True)
class LogitsReply:
    sample_id: int
    logits: np.ndarray

    def to_bytes(self) -> bytes:
        z = np.asarray(self.logits, dtype=">f4").ravel()
        return _REPLY_HEAD.pack(self.sample_id, z.size) + z.tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> LogitsReply:
        if len(buf) < _REPLY_HEAD.size:
            raise ProtocolError("truncated", "reply shorter than its header")
        sid, count = _REPLY_HEAD.unpack_from(buf)
        body = buf[_REPLY_HEAD.size:]
        if len(body) != 4 * count:
            raise ProtocolError("truncated", f"class_count {count} needs {4 * count} bytes, got {len(body)}")
        return cls(sid, np.frombuffer(body, dtype=">f4").astype(np.float64))

    def __eq__(self, other):
        return (isinstance(other, LogitsReply) and self.sample_id == other.sample_id
                and np.array_equal(np.asarray(self.logits, np.float32), np.asarray(other.logits, np.float32)))


def frame(body: bytes) -> bytes:
    return _FRAME.pack(len(body)) + body


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TransportError("connection closed mid-frame" if buf else "connection closed")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes:
    (n,) = _FRAME.unpack(_recv_exact(sock, _FRAME.size))
    if n > MAX_FRAME:
        raise TransportError(f"frame of {n} bytes exceeds the {MAX_FRAME}-byte limit")
    return _recv_exact(sock, n)


# ----------------------------------------------------------------------- link + cost model


@dataclass(frozen=True)
class LinkModel:
    bandwidth_bps: float
    fixed_rtt_s: float = 0.0

    def __post_init__(self):
        if not self.bandwidth_bps > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth_bps}")
        if self.fixed_rtt_s < 0:
            raise ValueError(f"rtt must be non-negative, got {self.fixed_rtt_s}")


def simulate_link(nbytes: int, link: LinkModel) -> float:
    if nbytes < 0:
        raise ValueError("byte count must be non-negative")
    return 8.0 * nbytes / link.bandwidth_bps + link.fixed_rtt_s


@dataclass(frozen=True)
class CostModel:
    """Compute times from operation counts, so reported latency does not depend on the host."""

    client_flops: float = 1e8
    server_flops: float = 1e10
    # LZW + quantization cost on the client, per input symbol
    compress_s_per_symbol: float = 2e-7

    def client(self, flops: float) -> float:
        return flops / self.client_flops

    def server(self, flops: float) -> float:
        return flops / self.server_flops


@dataclass
class LatencyReport:
    sample_id: int
    mode: str
    t_extract: float = 0.0
    t_local: float = 0.0
    t_compress: float = 0.0
    t_tx: float = 0.0
    t_remote: float = 0.0
    t_combine: float = 0.0
    payload_bytes: int = 0
    fallback: bool = False

    @property
    def t_total(self) -> float:
        """Local head overlaps transmit + remote compute."""
        return self.t_extract + self.t_compress + max(self.t_local, self.t_tx + self.t_remote) + self.t_combine

    @property
    def t_serial(self) -> float:
        return self.t_extract + self.t_local + self.t_compress + self.t_tx + self.t_remote + self.t_combine

    def to_dict(self) -> dict:
        d = asdict(self)
        d["t_total"] = self.t_total
        d["t_serial"] = self.t_serial
        return d


# ----------------------------------------------------------------------- server


def raw_to_bytes(x: np.ndarray) -> bytes:
    """8-bit encoding of an input image with values in [0, 1]."""
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8).tobytes()


def bytes_to_raw(b: bytes, shape) -> np.ndarray:
    return np.frombuffer(b, dtype=np.uint8).astype(np.float64).reshape(shape) / 255.0


class ServerCore:
    """Stateless request handler shared by the TCP server and the in-process transport."""

    def __init__(self, model: SplitModel, quantizers: dict[int, Quantizer] | None = None):
        model._check_ready()
        self.model = model
        if quantizers is None:
            quantizers = {FEATURE_QUANTIZER: Quantizer(model.centers.data)} if model.centers is not None else {}
        self.quantizers = quantizers
        h, w, c = model.extractor.output_shape()
        self.rest_shape = (h, w, c - model.k)
        self.input_shape = model.extractor.cfg.input_shape
        self.dropped: Counter = Counter()
        self.served = 0
        self._lock = threading.Lock()

    def _decode(self, pkt: FeaturePacket) -> np.ndarray:
        try:
            sym, _ = decode_block(pkt.block)
        except CodecError as e:
            raise ProtocolError("bad_block", str(e)) from None
        if pkt.quantizer_id == RAW_INPUT:
            if len(sym) != int(np.prod(self.input_shape)):
                raise ProtocolError("truncated", f"{len(sym)} raw symbols for input {self.input_shape}")
            x = bytes_to_raw(sym, (1,) + tuple(self.input_shape))
            return self.model.logits(x)[0]
        q = self.quantizers.get(pkt.quantizer_id)
        if q is None:
            raise ProtocolError("unknown_quantizer", str(pkt.quantizer_id))
        if len(sym) != int(np.prod(self.rest_shape)):
            raise ProtocolError("truncated", f"{len(sym)} symbols for features {self.rest_shape}")
        idx = np.frombuffer(sym, dtype=np.uint8)
        if idx.max(initial=0) >= q.levels:
            raise ProtocolError("bad_block", "symbol outside the quantizer's range")
        rest = q.dequantize(idx).reshape((1,) + self.rest_shape)
        return self.model.remote_logits(rest)[0]

    def handle(self, body: bytes) -> bytes | None:
        """Reply body for a request body, or None when the packet is dropped."""
        try:
            pkt = FeaturePacket.from_bytes(body)
            z = self._decode(pkt)
        except ProtocolError as e:
            with self._lock:
                self.dropped[e.reason] += 1
            log.warning("dropped packet: %s", e)
            return None
        with self._lock:
            self.served += 1
        return LogitsReply(pkt.sample_id, z).to_bytes()

    @property
    def dropped_total(self) -> int:
        return sum(self.dropped.values())


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        core: ServerCore = self.server.core
        while True:
            try:
                body = read_frame(self.request)
            except (TransportError, OSError):
                return
            reply = core.handle(body)
            if reply is not None:
                self.request.sendall(frame(reply))


class OffloadServer(socketserver.ThreadingTCPServer):
    """One thread per connection; frames within a connection are handled in order."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, core: ServerCore, host: str = "127.0.0.1", port: int = 0):
        self.core = core
        super().__init__((host, port), _Handler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start(self) -> OffloadServer:
        threading.Thread(target=self.serve_forever, name="offload-server", daemon=True).start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


def server_loop(core: ServerCore, host: str, port: int) -> None:
    """Serve until interrupted."""
    with OffloadServer(core, host, port) as srv:
        log.info("serving on %s:%d", *srv.address)
        try:
            srv.serve_forever()
        except KeyboardInterrupt:
            pass


# ----------------------------------------------------------------------- client transports


class LoopbackTransport:
    """Calls a ServerCore directly; a dropped packet surfaces as a timeout."""

    def __init__(self, core: ServerCore):
        self.core = core
        self._pending: bytes | None = None

    def send(self, body: bytes) -> None:
        self._pending = self.core.handle(body)

    def receive(self, timeout: float) -> bytes:
        reply, self._pending = self._pending, None
        if reply is None:
            raise TimeoutError("no reply")
        return reply

    def close(self) -> None:
        pass


class TcpTransport:
    def __init__(self, host: str, port: int, connect_timeout: float = 2.0):
        self.addr = (host, port)
        self.connect_timeout = connect_timeout
        self.sock: socket.socket | None = None

    def _connect(self) -> socket.socket:
        if self.sock is None:
            try:
                self.sock = socket.create_connection(self.addr, timeout=self.connect_timeout)
            except OSError as e:
                raise TransportError(f"cannot connect to {self.addr[0]}:{self.addr[1]}: {e}") from e
            self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return self.sock

    def send(self, body: bytes) -> None:
        try:
            self._connect().sendall(frame(body))
        except OSError as e:
            self.close()
            raise TransportError(str(e)) from e

    def receive(self, timeout: float) -> bytes:
        sock = self._connect()
        sock.settimeout(timeout)
        try:
            return read_frame(sock)
        except (OSError, TransportError):
            # a late reply would desynchronize the stream, so start a fresh connection
            self.close()
            raise

    def close(self) -> None:
        if self.sock is not None:
            self.sock.close()
            self.sock = None


# ----------------------------------------------------------------------- client


@dataclass
class Offloader:
    """Client half: runs the three inference modes against a transport."""

    model: SplitModel
    transport: object | None
    link: LinkModel
    cost: CostModel = field(default_factory=CostModel)
    timeout_s: float = 0.5
    quantizer_id: int = FEATURE_QUANTIZER

    def __post_init__(self):
        self.model._check_ready()
        self.quantizer = Quantizer(self.model.centers.data) if self.model.centers is not None else None
        self.flops = self.model.flops()

    def _exchange(self, sample_id: int, body: bytes, local=None):
        """Send, run ``local`` while waiting, then receive; returns (local_result, reply or None)."""
        if self.transport is None:
            return (local() if local else None), None
        try:
            self.transport.send(body)
        except TransportError as e:
            log.warning("sample %d: send failed (%s); local fallback", sample_id, e)
            return (local() if local else None), None
        out = local() if local else None
        try:
            reply = LogitsReply.from_bytes(self.transport.receive(self.timeout_s))
        except (TimeoutError, OSError, TransportError, ProtocolError) as e:
            log.warning("sample %d: no usable reply (%s); local fallback", sample_id, e)
            return out, None
        if reply.sample_id != sample_id:
            raise ProtocolError("sample_id_mismatch", f"sent {sample_id}, got {reply.sample_id}")
        return out, reply

    def local_only(self, x: np.ndarray, sample_id: int = 0):
        f = self.model.client_features(x[None])
        top, _ = split_features(f, self.model.k)
        z = self.model.local_logits(top)[0]
        rep = LatencyReport(sample_id, "local_only", t_extract=self.cost.client(self.flops["extract"]),
                            t_local=self.cost.client(self.flops["local"]))
        return z, rep

    def partitioned(self, x: np.ndarray, sample_id: int = 0):
        m = self.model
        f = m.client_features(x[None])
        top, rest = split_features(f, m.k)
        block = encode_block(self.quantizer.quantize(rest), self.quantizer.bits)
        pkt = FeaturePacket(sample_id, self.quantizer_id, block).to_bytes()
        local, reply = self._exchange(sample_id, pkt, lambda: m.local_logits(top)[0])
        rep = LatencyReport(sample_id, "partitioned", payload_bytes=len(pkt),
                            t_extract=self.cost.client(self.flops["extract"]),
                            t_local=self.cost.client(self.flops["local"]),
                            t_compress=self.cost.compress_s_per_symbol * rest.size)
        if reply is None:
            # the client waited out the full timeout before giving up
            rep.fallback = True
            rep.t_tx = self.timeout_s
            return local, rep
        rep.t_tx = simulate_link(len(pkt), self.link)
        rep.t_remote = self.cost.server(self.flops["remote"])
        rep.t_combine = self.cost.client(3 * m.classes)
        return combine(local, reply.logits, m.alpha), rep

    def edge_only(self, x: np.ndarray, sample_id: int = 0):
        raw = raw_to_bytes(x)
        pkt = FeaturePacket(sample_id, RAW_INPUT, encode_block(raw, 8)).to_bytes()
        _, reply = self._exchange(sample_id, pkt)
        rep = LatencyReport(sample_id, "edge_only", payload_bytes=len(pkt),
                            t_compress=self.cost.compress_s_per_symbol * len(raw))
        if reply is None:
            rep.fallback = True
            rep.t_tx = self.timeout_s
            z, lrep = self.local_only(x, sample_id)
            rep.t_extract, rep.t_local = lrep.t_extract, lrep.t_local
            return z, rep
        rep.t_tx = simulate_link(len(pkt), self.link)
        rep.t_remote = self.cost.server(sum(self.flops.values()))
        return reply.logits, rep

    def infer(self, x: np.ndarray, mode: str, sample_id: int = 0):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
        return getattr(self, mode)(x, sample_id)

    def run(self, images: np.ndarray, mode: str, first_id: int = 0):
        """Per-sample logits (N, classes) and LatencyReports for a batch of inputs."""
        zs, reps = [], []
        for i, x in enumerate(images):
            z, r = self.infer(x, mode, (first_id + i) & 0xFFFFFFFF)
            zs.append(z)
            reps.append(r)
        return np.stack(zs), reps


def client_infer(model: SplitModel, x: np.ndarray, link: LinkModel, transport, cost: CostModel | None = None,
                 timeout_s: float = 0.5, sample_id: int = 0):
    """Partitioned inference of one sample; returns (class, logits, LatencyReport)."""
    z, rep = Offloader(model, transport, link, cost or CostModel(), timeout_s).partitioned(x, sample_id)
    return int(np.argmax(z)), z, rep


def run_modes(model: SplitModel, images: np.ndarray, mode: str, link: LinkModel, transport=None,
              cost: CostModel | None = None, timeout_s: float = 0.5):
    """Logits and LatencyReports for every image under one runtime mode."""
    return Offloader(model, transport, link, cost or CostModel(), timeout_s).run(images, mode)


def summarize(reports: list[LatencyReport], preds=None, labels=None) -> dict:
    """Mean / p95 latency, payload and fallback statistics for a list of reports."""
    if not reports:
        raise ValueError("no reports to summarize")
    tot = np.array([r.t_total for r in reports])
    out = {
        "n": len(reports),
        "mode": reports[0].mode,
        "mean_t_total": float(tot.mean()),
        "p95_t_total": float(np.percentile(tot, 95)),
        "mean_t_serial": float(np.mean([r.t_serial for r in reports])),
        "mean_t_tx": float(np.mean([r.t_tx for r in reports])),
        "mean_payload_bytes": float(np.mean([r.payload_bytes for r in reports])),
        "fallback_rate": float(np.mean([r.fallback for r in reports])),
    }
    if preds is not None and labels is not None:
        out["accuracy"] = float(np.mean(np.asarray(preds) == np.asarray(labels)))
    return out

