"""Split-training wire protocol and session driver.

Every exchange between the label-holding client and the compute server is a
length-prefixed frame:

    u32 size          bytes that follow the size field
    u32 magic         0x53564C31
    u8  kind          message kind (see MessageKind)
    u32 epoch         0-based epoch index
    u32 batch         0-based batch index within the epoch
    u8  rank          number of payload dimensions (0 = no payload)
    u32 dims[rank]
    f32 payload[]     C-order values

All integers and floats are little-endian. One training step is the sequence
SMASHED_FORWARD -> SERVER_FORWARD -> GRAD_TO_SERVER -> GRAD_TO_CLIENT for the
same (epoch, batch); EPOCH_MARK closes an epoch and END_SESSION the session.

A malicious server differs from the honest one only by keeping copies of the
smashed activations it receives during the final epoch — it never alters a
byte it sends, which is what the stealth check in eval verifies.
"""

import hashlib
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
import torch

from .errors import (
    DimensionError,
    FormatError,
    ProtocolViolation,
    SessionError,
)
from .nn.core import OptimizerConfig, optimizer_step

FRAME_MAGIC = 0x53564C31
MAX_FRAME_BYTES = 1 << 30


class MessageKind(IntEnum):
    SMASHED_FORWARD = 1
    SERVER_FORWARD = 2
    GRAD_TO_SERVER = 3
    GRAD_TO_CLIENT = 4
    EPOCH_MARK = 5
    END_SESSION = 6


@dataclass
class ProtocolMessage:
    kind: MessageKind
    epoch: int
    batch: int
    payload: np.ndarray | None = None  # float32, or None for marks


def encode_message(msg):
    """Serialize one message to a complete frame (size prefix included)."""
    if msg.payload is None:
        dims, body = (), b""
    else:
        arr = np.ascontiguousarray(msg.payload, dtype="<f4")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        dims, body = arr.shape, arr.tobytes()
    head = struct.pack(
        "<IBIIB", FRAME_MAGIC, int(msg.kind), msg.epoch, msg.batch, len(dims)
    )
    if dims:
        head += struct.pack(f"<{len(dims)}I", *dims)
    size = len(head) + len(body)
    return struct.pack("<I", size) + head + body


def decode_message(frame):
    """Parse a complete frame back into a ProtocolMessage."""
    if len(frame) < 4:
        raise FormatError("frame shorter than its size field")
    (size,) = struct.unpack_from("<I", frame, 0)
    if size != len(frame) - 4:
        raise FormatError(f"frame size field {size} != {len(frame) - 4} actual bytes")
    if size < 14:
        raise FormatError(f"frame body too short ({size} bytes)")
    magic, kind, epoch, batch, rank = struct.unpack_from("<IBIIB", frame, 4)
    if magic != FRAME_MAGIC:
        raise FormatError(f"bad frame magic 0x{magic:08x}")
    try:
        kind = MessageKind(kind)
    except ValueError:
        raise FormatError(f"unknown message kind {kind}")
    off = 4 + 14
    if rank == 0:
        if size != 14:
            raise FormatError("mark message carries unexpected payload")
        return ProtocolMessage(kind, epoch, batch, None)
    if len(frame) < off + 4 * rank:
        raise FormatError("frame truncated inside dims")
    dims = struct.unpack_from(f"<{rank}I", frame, off)
    off += 4 * rank
    n = 1
    for d in dims:
        n *= d
    if size != 14 + 4 * rank + 4 * n:
        raise FormatError(f"frame size field inconsistent with dims {dims}")
    payload = np.frombuffer(frame, dtype="<f4", count=n, offset=off).reshape(dims)
    return ProtocolMessage(kind, epoch, batch, payload.copy())


# ---------------------------------------------------------------------------
# message log


@dataclass
class LogEntry:
    kind: int
    epoch: int
    batch: int
    size: int
    digest: bytes  # sha256 of the full frame
    data: bytes | None = None  # only kept in "full" mode


class MessageLog:
    """Verbatim record of every frame seen by one endpoint.

    mode="digest" keeps per-frame hashes and headers (enough to prove two
    byte streams identical); mode="full" also retains the raw bytes so a
    divergence can be reported with its exact byte offset.
    """

    LOG_MAGIC = b"SLG1"

    def __init__(self, mode="digest"):
        if mode not in ("digest", "full"):
            raise FormatError(f"unknown log mode {mode!r}")
        self.mode = mode
        self.entries = []

    def record(self, frame):
        _, kind, epoch, batch, _ = struct.unpack_from("<IBIIB", frame, 4)
        self.entries.append(
            LogEntry(
                kind=kind,
                epoch=epoch,
                batch=batch,
                size=len(frame),
                digest=hashlib.sha256(frame).digest(),
                data=frame if self.mode == "full" else None,
            )
        )

    def __len__(self):
        return len(self.entries)

    def total_bytes(self):
        return sum(e.size for e in self.entries)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.LOG_MAGIC)
            mode_flag = 1 if self.mode == "full" else 0
            f.write(struct.pack("<BI", mode_flag, len(self.entries)))
            for e in self.entries:
                f.write(struct.pack("<BIII", e.kind, e.epoch, e.batch, e.size))
                f.write(e.digest)
                if self.mode == "full":
                    f.write(e.data)

    @classmethod
    def load(cls, path):
        raw = open(path, "rb").read()
        if raw[:4] != cls.LOG_MAGIC:
            raise FormatError(f"{path}: bad message log magic")
        mode_flag, count = struct.unpack_from("<BI", raw, 4)
        log = cls(mode="full" if mode_flag else "digest")
        off = 9
        for _ in range(count):
            if off + 13 + 32 > len(raw):
                raise FormatError(f"{path}: truncated message log")
            kind, epoch, batch, size = struct.unpack_from("<BIII", raw, off)
            off += 13
            digest = raw[off : off + 32]
            off += 32
            data = None
            if mode_flag:
                if off + size > len(raw):
                    raise FormatError(f"{path}: truncated frame data")
                data = raw[off : off + size]
                off += size
            log.entries.append(LogEntry(kind, epoch, batch, size, digest, data))
        if off != len(raw):
            raise FormatError(f"{path}: trailing bytes in message log")
        return log


# ---------------------------------------------------------------------------
# transports


class InProcEndpoint:
    def __init__(self, inbox, outbox):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def send_frame(self, frame):
        if self._closed:
            raise SessionError("endpoint closed")
        self._outbox.put(frame)

    def recv_frame(self):
        if self._closed:
            raise SessionError("endpoint closed")
        frame = self._inbox.get()
        if frame is None:
            raise SessionError("peer disconnected")
        return frame

    def close(self):
        if not self._closed:
            self._closed = True
            self._outbox.put(None)


def inproc_pair():
    """Two connected in-process endpoints (frames still cross as bytes)."""
    a, b = queue.Queue(), queue.Queue()
    return InProcEndpoint(a, b), InProcEndpoint(b, a)


class SocketEndpoint:
    def __init__(self, sock):
        self._sock = sock

    def send_frame(self, frame):
        try:
            self._sock.sendall(frame)
        except OSError as e:
            raise SessionError(f"send failed: {e}")

    def _recv_exact(self, n):
        chunks = []
        while n:
            try:
                chunk = self._sock.recv(min(n, 1 << 20))
            except OSError as e:
                raise SessionError(f"recv failed: {e}")
            if not chunk:
                raise SessionError("peer closed connection")
            chunks.append(chunk)
            n -= len(chunk)
        return b"".join(chunks)

    def recv_frame(self):
        head = self._recv_exact(4)
        (size,) = struct.unpack("<I", head)
        if size > MAX_FRAME_BYTES:
            raise FormatError(f"frame of {size} bytes exceeds limit")
        return head + self._recv_exact(size)

    def close(self):
        try:
            self._sock.close()
        except OSError:
            pass


def tcp_listen(host, port):
    """Block until one peer connects; returns the endpoint and bound port."""
    srv = socket.create_server((host, port))
    bound = srv.getsockname()[1]
    conn, _ = srv.accept()
    srv.close()
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return SocketEndpoint(conn), bound


def tcp_connect(host, port):
    sock = socket.create_connection((host, port), timeout=30)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    sock.settimeout(None)
    return SocketEndpoint(sock)


def tcp_pair(host="127.0.0.1"):
    """Loopback socket pair for single-process TCP runs."""
    srv = socket.create_server((host, 0))
    port = srv.getsockname()[1]
    out = {}

    def _accept():
        conn, _ = srv.accept()
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        out["conn"] = conn

    t = threading.Thread(target=_accept)
    t.start()
    client_sock = socket.create_connection((host, port))
    client_sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    t.join()
    srv.close()
    return SocketEndpoint(out["conn"]), SocketEndpoint(client_sock)


# ---------------------------------------------------------------------------
# session


class Session:
    """One party's view of a protocol exchange over some endpoint."""

    def __init__(self, endpoint, log=None):
        self.endpoint = endpoint
        self.log = log
        self.ended = False

    def send(self, msg):
        if self.ended:
            raise SessionError("session already ended")
        frame = encode_message(msg)
        if self.log is not None:
            self.log.record(frame)
        self.endpoint.send_frame(frame)
        if msg.kind == MessageKind.END_SESSION:
            self.ended = True

    def recv(self):
        if self.ended:
            raise SessionError("session already ended")
        frame = self.endpoint.recv_frame()
        if self.log is not None:
            self.log.record(frame)
        msg = decode_message(frame)
        if msg.kind == MessageKind.END_SESSION:
            self.ended = True
        return msg

    def close(self):
        self.endpoint.close()


def _expect(msg, kind, epoch=None, batch=None):
    if msg.kind != kind:
        raise ProtocolViolation(f"expected {kind.name}, got {msg.kind.name}")
    if epoch is not None and msg.epoch != epoch:
        raise ProtocolViolation(f"{kind.name}: expected epoch {epoch}, got {msg.epoch}")
    if batch is not None and msg.batch != batch:
        raise ProtocolViolation(f"{kind.name}: expected batch {batch}, got {msg.batch}")
    return msg


# ---------------------------------------------------------------------------
# training session


@dataclass
class SessionConfig:
    epochs: int = 5
    batch_size: int = 64
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    record_last_epoch: bool = True
    transport: str = "inproc"  # "inproc" | "tcp"


@dataclass
class TrainingRecorder:
    """What a malicious server keeps: last-epoch smashed batches, and the
    final server outputs for those same batches (computed after training)."""

    smashed: list = field(default_factory=list)
    outputs: list = field(default_factory=list)


@dataclass
class TrainLog:
    epoch_loss: list = field(default_factory=list)


def batch_indices(n, batch_size, rng):
    """Shuffled batch index arrays; a trailing singleton is dropped because
    batch-norm cannot train on a single sample."""
    order = rng.permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if batches and len(batches[-1]) == 1:
        batches.pop()
    return batches


def softmax_grad(logits, labels):
    """d(mean cross-entropy)/d(logits) and the loss value."""
    z = logits - logits.max(dim=1, keepdim=True).values
    p = torch.exp(z)
    p = p / p.sum(dim=1, keepdim=True)
    n = logits.shape[0]
    loss = -(torch.log(p[torch.arange(n), labels] + 1e-12)).mean()
    onehot = torch.zeros_like(p)
    onehot[torch.arange(n), labels] = 1.0
    return (p - onehot) / n, float(loss)


def run_client_party(session, client, last, train, cfg):
    """Drive training from the label holder's side; mutates client and last."""
    rng = np.random.default_rng(cfg.seed)
    opt_c, opt_l = None, None
    log = TrainLog()
    for epoch in range(cfg.epochs):
        batches = batch_indices(len(train), cfg.batch_size, rng)
        losses = []
        for b, idx in enumerate(batches):
            x = torch.from_numpy(train.pixels[idx])
            labels = torch.from_numpy(train.labels[idx])
            smashed, ctx_c = client.forward(x, train_mode=True)
            session.send(
                ProtocolMessage(MessageKind.SMASHED_FORWARD, epoch, b, smashed.numpy())
            )
            reply = _expect(session.recv(), MessageKind.SERVER_FORWARD, epoch, b)
            server_out = torch.from_numpy(reply.payload)
            logits, ctx_l = last.forward(server_out, train_mode=True)
            dlogits, loss = softmax_grad(logits, labels)
            losses.append(loss)
            d_server_out, grads_l = last.backward(ctx_l, dlogits)
            opt_l = optimizer_step(last, grads_l, cfg.optimizer, opt_l)
            session.send(
                ProtocolMessage(MessageKind.GRAD_TO_SERVER, epoch, b, d_server_out.numpy())
            )
            reply = _expect(session.recv(), MessageKind.GRAD_TO_CLIENT, epoch, b)
            _, grads_c = client.backward(ctx_c, torch.from_numpy(reply.payload))
            opt_c = optimizer_step(client, grads_c, cfg.optimizer, opt_c)
        session.send(ProtocolMessage(MessageKind.EPOCH_MARK, epoch, len(batches)))
        log.epoch_loss.append(float(np.mean(losses)))
    session.send(ProtocolMessage(MessageKind.END_SESSION, cfg.epochs, 0))
    return log


def run_server_party(session, server, cfg, malicious=False):
    """Serve forward/backward requests until END_SESSION; mutates server.

    A malicious server additionally copies the smashed activations received
    during the final epoch into the returned recorder. Nothing it sends
    differs from the honest behaviour.
    """
    recorder = TrainingRecorder() if malicious else None
    opt = None
    epoch, next_batch = 0, 0
    pending = None  # (epoch, batch, ctx) awaiting the gradient message
    while True:
        msg = session.recv()
        if msg.kind == MessageKind.END_SESSION:
            if pending is not None:
                raise ProtocolViolation("session ended with a step in flight")
            break
        if msg.kind == MessageKind.EPOCH_MARK:
            if pending is not None:
                raise ProtocolViolation("epoch mark with a step in flight")
            if msg.epoch != epoch:
                raise ProtocolViolation(f"epoch mark {msg.epoch} while in epoch {epoch}")
            epoch += 1
            next_batch = 0
            continue
        if msg.kind == MessageKind.SMASHED_FORWARD:
            if pending is not None:
                raise ProtocolViolation("new forward before previous gradient")
            _expect(msg, MessageKind.SMASHED_FORWARD, epoch, next_batch)
            if malicious and cfg.record_last_epoch and msg.epoch == cfg.epochs - 1:
                recorder.smashed.append(msg.payload.copy())
            x = torch.from_numpy(msg.payload)
            out, ctx = server.forward(x, train_mode=True)
            pending = (msg.epoch, msg.batch, ctx)
            session.send(
                ProtocolMessage(MessageKind.SERVER_FORWARD, msg.epoch, msg.batch, out.numpy())
            )
            continue
        if msg.kind == MessageKind.GRAD_TO_SERVER:
            if pending is None:
                raise ProtocolViolation("gradient message with no forward in flight")
            pe, pb, ctx = pending
            _expect(msg, MessageKind.GRAD_TO_SERVER, pe, pb)
            dx, grads = server.backward(ctx, torch.from_numpy(msg.payload))
            opt = optimizer_step(server, grads, cfg.optimizer, opt)
            session.send(ProtocolMessage(MessageKind.GRAD_TO_CLIENT, pe, pb, dx.numpy()))
            pending = None
            next_batch = pb + 1
            continue
        raise ProtocolViolation(f"client sent server-only message {msg.kind.name}")
    return recorder


def fill_recorder_outputs(server, recorder, batch_size=256):
    """Compute the final server's output for every recorded smashed batch."""
    recorder.outputs = []
    for arr in recorder.smashed:
        out = server.infer(torch.from_numpy(arr))
        recorder.outputs.append(np.ascontiguousarray(out.numpy(), dtype=np.float32))
    return recorder


def run_split_training(model, train, cfg, server_role="honest", log_mode="digest"):
    """Run one complete training session between in-process parties.

    Returns (model, recorder, log, train_log); recorder is None for an honest
    server. The message log is taken at the client endpoint and covers every
    frame in both directions.
    """
    if server_role not in ("honest", "malicious"):
        raise SessionError(f"unknown server role {server_role!r}")
    if cfg.transport == "inproc":
        server_end, client_end = inproc_pair()
    elif cfg.transport == "tcp":
        server_end, client_end = tcp_pair()
    else:
        raise SessionError(f"unknown transport {cfg.transport!r}")
    log = MessageLog(mode=log_mode)
    result = {}

    def _serve():
        try:
            result["recorder"] = run_server_party(
                Session(server_end), model.server, cfg, malicious=(server_role == "malicious")
            )
        except BaseException as e:  # propagated to the caller after join
            result["error"] = e

    thread = threading.Thread(target=_serve, name="server-party")
    thread.start()
    try:
        train_log = run_client_party(Session(client_end, log), model.client, model.last, train, cfg)
    finally:
        thread.join()
        client_end.close()
        server_end.close()
    if "error" in result:
        raise result["error"]
    recorder = result["recorder"]
    if recorder is not None:
        fill_recorder_outputs(model.server, recorder)
    return model, recorder, log, train_log


# ---------------------------------------------------------------------------
# recorder serialization

RECORDER_MAGIC = b"SRC1"
RECORDER_VERSION = 1


def save_recorder(recorder, path):
    if len(recorder.outputs) != len(recorder.smashed):
        raise DimensionError(
            f"recorder holds {len(recorder.smashed)} smashed batches but "
            f"{len(recorder.outputs)} output batches"
        )
    with open(path, "wb") as f:
        f.write(RECORDER_MAGIC)
        f.write(struct.pack("<II", RECORDER_VERSION, len(recorder.smashed)))
        for smashed, output in zip(recorder.smashed, recorder.outputs):
            for arr in (smashed, output):
                arr = np.ascontiguousarray(arr, dtype="<f4")
                f.write(struct.pack("<B", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(arr.tobytes())


def load_recorder(path):
    raw = open(path, "rb").read()
    if raw[:4] != RECORDER_MAGIC:
        raise FormatError(f"{path}: bad recorder magic")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != RECORDER_VERSION:
        raise FormatError(f"{path}: unsupported recorder version {version}")
    off = 12
    rec = TrainingRecorder()

    def take_array():
        nonlocal off
        if off + 1 > len(raw):
            raise FormatError(f"{path}: truncated recorder file")
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = 1
        for d in dims:
            n *= d
        if off + 4 * n > len(raw):
            raise FormatError(f"{path}: truncated recorder payload")
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims).copy()
        off += 4 * n
        return arr

    for _ in range(count):
        rec.smashed.append(take_array())
        rec.outputs.append(take_array())
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes in recorder file")
    return rec
