"""Data-parallel adversarial training with a deterministic weighted all-reduce.

A coordinator owns the authoritative model.  For every global mini-batch it
splits the indices into contiguous shards, asks each worker for the mean
gradient over its shard, reduces the replies in worker-id order and sends
the reduced gradient back so every replica applies the same SGD step.

Workers draw attack randomness from per-sample streams keyed by
``(seed, epoch, global index)``, so the perturbation a sample receives does
not depend on the worker count.

Wire formats (little-endian):

Gradient frame::

    u32 magic 0x52474431 | u32 length of everything after this field |
    u32 epoch | u32 step | u16 worker | u32 shard size | payload | u32 CRC-32(payload)

Control envelope (coordinator <-> worker)::

    u32 magic 0x52474331 | u32 body length | u8 kind | body

Both transports carry the same envelopes: ``inprocess`` passes the bytes
through queues between threads, ``socket`` sends them over TCP.
"""
from __future__ import annotations

import queue
import socket
import struct
import subprocess
import sys
import threading
import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attacks import PerturbationSpec
from .data import Dataset
from .models import Model
from .persistence import checkpoint_from_bytes, checkpoint_to_bytes, dataset_from_bytes, dataset_to_bytes
from .training import (EpochMetrics, OptimizerState, TrainConfig, TrainResult, _Recorder, check_finite,
                       adversarial_batch_grads, batches, lr_at_epoch, sgd_step)

FRAME_MAGIC = 0x52474431
CONTROL_MAGIC = 0x52474331
_FRAME_FIELDS = struct.Struct("<IIHI")
TRANSPORTS = ("inprocess", "socket")

HELLO, SETUP, STEP, REPLY, UPDATE, STOP, ERROR = range(1, 8)
_KIND_NAMES = {HELLO: "HELLO", SETUP: "SETUP", STEP: "STEP", REPLY: "REPLY", UPDATE: "UPDATE",
               STOP: "STOP", ERROR: "ERROR"}


class DistributedError(RuntimeError):
    pass


class FrameError(ValueError):
    pass


# ---------------------------------------------------------------------------
# sharding

def shard_batch(indices, workers: int) -> list[np.ndarray]:
    """Contiguous split; the first ``N mod W`` shards get one extra sample."""
    indices = np.asarray(indices)
    if workers < 1:
        raise ValueError(f"worker count must be >= 1, got {workers}")
    if workers > len(indices):
        raise ValueError(f"{workers} workers for a batch of {len(indices)} would leave empty shards")
    return np.array_split(indices, workers)


@dataclass(frozen=True)
class ShardPlan:
    workers: int
    shards: tuple[tuple[np.ndarray, ...], ...]

    @classmethod
    def for_epoch(cls, seed: int, epoch: int, n: int, batch_size: int, workers: int) -> "ShardPlan":
        return cls(workers, tuple(tuple(shard_batch(b, workers)) for b in batches(seed, epoch, n, batch_size)))


# ---------------------------------------------------------------------------
# gradient frames

@dataclass(frozen=True)
class GradientFrame:
    epoch: int
    step: int
    worker: int
    shard_size: int
    payload: bytes
    checksum: int

    @classmethod
    def build(cls, epoch: int, step: int, worker: int, shard_size: int, payload: bytes) -> "GradientFrame":
        return cls(epoch, step, worker, shard_size, payload, zlib.crc32(payload))

    def verify(self) -> None:
        if zlib.crc32(self.payload) != self.checksum:
            raise FrameError(f"checksum mismatch in gradient frame from worker {self.worker} "
                             f"(epoch {self.epoch}, step {self.step})")


def encode_frame(frame: GradientFrame) -> bytes:
    body = (_FRAME_FIELDS.pack(frame.epoch, frame.step, frame.worker, frame.shard_size) + frame.payload
            + struct.pack("<I", frame.checksum))
    return struct.pack("<II", FRAME_MAGIC, len(body)) + body


def decode_frame(buf: bytes) -> GradientFrame:
    """Parse one frame; the checksum is carried, not verified (see ``GradientFrame.verify``)."""
    if len(buf) < 8:
        raise FrameError(f"gradient frame truncated: {len(buf)} bytes")
    magic, length = struct.unpack_from("<II", buf)
    if magic != FRAME_MAGIC:
        raise FrameError(f"bad gradient frame magic 0x{magic:08x}")
    if len(buf) != 8 + length or length < _FRAME_FIELDS.size + 4:
        raise FrameError(f"gradient frame length field {length} does not match {len(buf) - 8} bytes")
    epoch, step, worker, shard_size = _FRAME_FIELDS.unpack_from(buf, 8)
    payload = bytes(buf[8 + _FRAME_FIELDS.size:len(buf) - 4])
    (checksum,) = struct.unpack_from("<I", buf, len(buf) - 4)
    return GradientFrame(epoch, step, worker, shard_size, payload, checksum)


def canonical_names(params: dict) -> list[str]:
    return sorted(params)


def pack_gradients(grads: dict[str, np.ndarray], dtype) -> bytes:
    dt = np.dtype(dtype).newbyteorder("<")
    return b"".join(np.ascontiguousarray(grads[k], dtype=dt).tobytes() for k in canonical_names(grads))


def unpack_gradients(payload: bytes, shapes: dict[str, tuple], dtype) -> dict[str, np.ndarray]:
    dt = np.dtype(dtype).newbyteorder("<")
    total = sum(int(np.prod(s)) for s in shapes.values())
    if len(payload) != total * dt.itemsize:
        raise FrameError(f"payload holds {len(payload)} bytes, expected {total * dt.itemsize}")
    flat = np.frombuffer(payload, dtype=dt).astype(np.dtype(dtype))
    out, pos = {}, 0
    for name in canonical_names(shapes):
        size = int(np.prod(shapes[name]))
        out[name] = flat[pos:pos + size].reshape(shapes[name])
        pos += size
    return out


def worker_step(model: Model, data: Dataset, shard, spec: PerturbationSpec | None, seed: int, epoch: int,
                step: int, worker: int) -> tuple[GradientFrame, float, int]:
    """Shard-mean gradient on perturbed inputs as a frame, plus summed loss and correct count."""
    shard = np.asarray(shard)
    if shard.size == 0:
        raise ValueError(f"worker {worker} received an empty shard")
    if shard.min() < 0 or shard.max() >= len(data):
        raise ValueError(f"worker {worker}: shard indices out of range [0, {len(data)})")
    loss, correct, grads = adversarial_batch_grads(model, data, shard, spec, seed, epoch)
    frame = GradientFrame.build(epoch, step, worker, len(shard), pack_gradients(grads, model.dtype))
    return frame, loss * len(shard), correct


def all_reduce_mean(frames: list[GradientFrame], shapes: dict[str, tuple], dtype,
                    workers: int | None = None) -> dict[str, np.ndarray]:
    """Shard-size-weighted mean, accumulated in worker-id order whatever the arrival order."""
    if not frames:
        raise DistributedError("no gradient frames to reduce")
    workers = len(frames) if workers is None else workers
    by_id: dict[int, GradientFrame] = {}
    for f in frames:
        if f.worker in by_id:
            raise DistributedError(f"duplicate frame from worker {f.worker}")
        by_id[f.worker] = f
    missing = sorted(set(range(workers)) - set(by_id))
    if missing or len(by_id) != workers:
        raise DistributedError(f"missing frames from workers {missing}" if missing
                               else f"unexpected worker ids {sorted(set(by_id) - set(range(workers)))}")
    ordered = [by_id[w] for w in range(workers)]
    if len({(f.epoch, f.step) for f in ordered}) != 1:
        raise DistributedError("frames disagree on (epoch, step): "
                               + ", ".join(f"worker {f.worker}: ({f.epoch}, {f.step})" for f in ordered))
    for f in ordered:
        f.verify()
    total = sum(f.shard_size for f in ordered)
    dt = np.dtype(dtype)
    acc = None
    for f in ordered:
        g = unpack_gradients(f.payload, shapes, dt)
        c = dt.type(f.shard_size / total)
        if acc is None:
            acc = {k: c * v for k, v in g.items()}
        else:
            for k, v in g.items():
                acc[k] = acc[k] + c * v
    return acc


# ---------------------------------------------------------------------------
# control envelopes

def encode_message(kind: int, body: bytes = b"") -> bytes:
    return struct.pack("<IIB", CONTROL_MAGIC, len(body), kind) + body


def decode_message(buf: bytes) -> tuple[int, bytes]:
    if len(buf) < 9:
        raise DistributedError(f"control message truncated: {len(buf)} bytes")
    magic, length, kind = struct.unpack_from("<IIB", buf)
    if magic != CONTROL_MAGIC:
        raise DistributedError(f"bad control message magic 0x{magic:08x}")
    if len(buf) != 9 + length:
        raise DistributedError(f"control message length {length} does not match {len(buf) - 9} bytes")
    if kind not in _KIND_NAMES:
        raise DistributedError(f"unknown control message kind {kind}")
    return kind, bytes(buf[9:])


def _blob(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def _read_blob(buf: bytes, pos: int) -> tuple[bytes, int]:
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if pos + n > len(buf):
        raise DistributedError("control message blob truncated")
    return buf[pos:pos + n], pos + n


def _spec_text(spec: PerturbationSpec | None) -> bytes:
    if spec is None:
        return b""
    items = {"norm": spec.norm, "eps": repr(spec.eps),
             "step_size": "" if spec.step_size is None else repr(spec.step_size), "steps": spec.steps,
             "rand_init": int(spec.rand_init), "restarts": spec.restarts,
             "target": "" if spec.target is None else spec.target, "rng_seed": spec.rng_seed}
    return "".join(f"{k}={v}\n" for k, v in items.items()).encode()


def _spec_from_text(raw: bytes) -> PerturbationSpec | None:
    if not raw:
        return None
    items = dict(line.split("=", 1) for line in raw.decode().splitlines() if line)
    return PerturbationSpec(items["norm"], float(items["eps"]),
                            float(items["step_size"]) if items["step_size"] else None, int(items["steps"]),
                            bool(int(items["rand_init"])), int(items["restarts"]),
                            int(items["target"]) if items["target"] else None, int(items["rng_seed"]))


def setup_message(worker: int, workers: int, seed: int, spec, model: Model, data: Dataset) -> bytes:
    body = (struct.pack("<HHq", worker, workers, seed) + _blob(_spec_text(spec))
            + _blob(checkpoint_to_bytes(model)) + _blob(dataset_to_bytes(data)))
    return encode_message(SETUP, body)


# ---------------------------------------------------------------------------
# worker side

class WorkerNode:
    """Message handler holding one model replica; transport-agnostic."""

    def __init__(self):
        self.model: Model | None = None
        self.data: Dataset | None = None
        self.spec = None
        self.seed = 0
        self.worker = -1
        self.state: OptimizerState | None = None

    def handle(self, msg: bytes) -> bytes | None:
        kind, body = decode_message(msg)
        if kind == SETUP:
            self.worker, _, self.seed = struct.unpack_from("<HHq", body)
            pos = struct.calcsize("<HHq")
            spec_raw, pos = _read_blob(body, pos)
            ckpt, pos = _read_blob(body, pos)
            data_raw, pos = _read_blob(body, pos)
            self.spec = _spec_from_text(spec_raw)
            self.model = checkpoint_from_bytes(ckpt)
            self.data = dataset_from_bytes(data_raw)
            self.state = OptimizerState.zeros_like(self.model)
            return None
        if kind == STEP:
            epoch, step, count = struct.unpack_from("<III", body)
            idx = np.frombuffer(body, dtype="<u4", count=count, offset=12).astype(np.int64)
            frame, loss_sum, correct = worker_step(self.model, self.data, idx, self.spec, self.seed, epoch,
                                                   step, self.worker)
            return encode_message(REPLY, struct.pack("<dI", loss_sum, correct) + encode_frame(frame))
        if kind == UPDATE:
            lr, momentum, wd = struct.unpack_from("<ddd", body)
            shapes = {k: v.shape for k, v in self.model.params.items()}
            grads = unpack_gradients(body[24:], shapes, self.model.dtype)
            sgd_step(self.model, grads, self.state, lr, momentum, wd)
            return None
        if kind == STOP:
            return None
        raise DistributedError(f"worker cannot handle {_KIND_NAMES[kind]} messages")


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def recv_message(sock: socket.socket) -> bytes:
    head = _recv_exact(sock, 9)
    (_, length, _) = struct.unpack("<IIB", head)
    return head + _recv_exact(sock, length)


def run_worker(address: tuple[str, int], timeout: float | None = 300.0) -> None:
    """Connect to a coordinator and serve requests until told to stop."""
    node = WorkerNode()
    with socket.create_connection(address, timeout=timeout) as sock:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.sendall(encode_message(HELLO))
        while True:
            msg = recv_message(sock)
            kind, _ = decode_message(msg)
            try:
                reply = node.handle(msg)
            except Exception as exc:  # report, then stop serving
                sock.sendall(encode_message(ERROR, f"{type(exc).__name__}: {exc}".encode()))
                raise
            if reply is not None:
                sock.sendall(reply)
            if kind == STOP:
                return


# ---------------------------------------------------------------------------
# coordinator transports

class _InProcessLink:
    def __init__(self, worker: int):
        self.worker = worker
        self.inbox: queue.Queue = queue.Queue()
        self.outbox: queue.Queue = queue.Queue()
        self.thread = threading.Thread(target=self._serve, daemon=True, name=f"worker-{worker}")
        self.thread.start()

    def _serve(self):
        node = WorkerNode()
        while True:
            msg = self.inbox.get()
            try:
                reply = node.handle(msg)
            except Exception as exc:
                self.outbox.put(encode_message(ERROR, f"{type(exc).__name__}: {exc}".encode()))
                return
            if reply is not None:
                self.outbox.put(reply)
            if decode_message(msg)[0] == STOP:
                return

    def send(self, msg: bytes) -> None:
        self.inbox.put(msg)

    def recv(self) -> bytes:
        return self.outbox.get()

    def close(self) -> None:
        self.thread.join(timeout=5)


class _SocketLink:
    def __init__(self, worker: int, sock: socket.socket):
        self.worker = worker
        self.sock = sock

    def send(self, msg: bytes) -> None:
        self.sock.sendall(msg)

    def recv(self) -> bytes:
        return recv_message(self.sock)

    def close(self) -> None:
        self.sock.close()


def _accept_workers(server: socket.socket, workers: int, timeout: float) -> list[_SocketLink]:
    links = []
    server.settimeout(timeout)
    for w in range(workers):
        try:
            conn, _ = server.accept()
        except socket.timeout:
            raise DistributedError(f"only {w} of {workers} workers connected within {timeout:g}s") from None
        conn.settimeout(timeout)
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        kind, _ = decode_message(recv_message(conn))
        if kind != HELLO:
            raise DistributedError(f"worker {w} opened with {_KIND_NAMES[kind]} instead of HELLO")
        links.append(_SocketLink(w, conn))
    return links


def _launch_socket_workers(address, workers: int, mode: str):
    """Start local workers that connect to ``address``; returns a joiner."""
    if mode == "thread":
        threads = [threading.Thread(target=run_worker, args=(address,), daemon=True) for _ in range(workers)]
        for t in threads:
            t.start()
        return lambda: [t.join(timeout=5) for t in threads]
    if mode == "process":
        host, port = address
        procs = [subprocess.Popen([sys.executable, "-m", "robustkit", "worker", "--connect", f"{host}:{port}"])
                 for _ in range(workers)]

        def join():
            for p in procs:
                try:
                    p.wait(timeout=10)
                except subprocess.TimeoutExpired:
                    p.kill()
        return join
    if mode == "external":
        return lambda: None
    raise ValueError(f"socket worker mode must be thread, process or external, got {mode!r}")


def _where(epoch: int, step: int) -> str:
    return "during setup" if epoch < 0 else f"at epoch {epoch} step {step}"


def _send(link, msg: bytes, epoch: int, step: int) -> None:
    try:
        link.send(msg)
    except (ConnectionError, OSError) as exc:
        raise DistributedError(f"worker {link.worker} disconnected {_where(epoch, step)}: {exc}") from None


def _run_coordinator(links, model: Model, train: Dataset, val: Dataset | None, config: TrainConfig,
                     out_dir, on_step: Callable | None) -> TrainResult:
    workers = len(links)
    spec = config.attack
    shapes = {k: v.shape for k, v in model.params.items()}
    for link in links:
        _send(link, setup_message(link.worker, workers, config.seed, spec, model, train), -1, -1)
    state = OptimizerState.zeros_like(model)
    rec = _Recorder(model, val, config, out_dir)
    for epoch in range(config.epochs):
        start = time.perf_counter()
        lr = lr_at_epoch(config, epoch)
        loss_sum, correct = 0.0, 0
        for step, idx in enumerate(batches(config.seed, epoch, len(train), config.batch_size)):
            shards = shard_batch(idx, workers)
            requests = [encode_message(STEP, struct.pack("<III", epoch, step, len(s))
                                       + np.asarray(s, dtype="<u4").tobytes()) for s in shards]
            for link, req in zip(links, requests):
                _send(link, req, epoch, step)
            frames = []
            for link in links:
                try:
                    reply = link.recv()
                except (ConnectionError, OSError) as exc:
                    raise DistributedError(f"worker {link.worker} disconnected at epoch {epoch} step {step}: "
                                           f"{exc}") from None
                kind, body = decode_message(reply)
                if kind == ERROR:
                    raise DistributedError(f"worker {link.worker} failed at epoch {epoch} step {step}: "
                                           f"{body.decode()}")
                if kind != REPLY:
                    raise DistributedError(f"worker {link.worker} sent {_KIND_NAMES[kind]} at epoch {epoch} "
                                           f"step {step}")
                ls, c = struct.unpack_from("<dI", body)
                frame = decode_frame(body[12:])
                if frame.worker != link.worker:
                    raise DistributedError(f"worker {link.worker} answered with id {frame.worker}")
                frames.append(frame)
                loss_sum += ls
                correct += c
            check_finite(loss_sum, epoch, step)
            grads = all_reduce_mean(frames, shapes, model.dtype, workers)
            update = encode_message(UPDATE, struct.pack("<ddd", lr, config.momentum, config.weight_decay)
                                    + pack_gradients(grads, model.dtype))
            for link in links:
                _send(link, update, epoch, step)
            sgd_step(model, grads, state, lr, config.momentum, config.weight_decay)
            if on_step is not None:
                on_step(epoch, step, model)
        acc = correct / len(train)
        eps = spec.eps if spec is not None else None
        rec.end_epoch(epoch, EpochMetrics(epoch, "train", loss_sum / len(train), acc if spec is None else None,
                                          acc if spec is not None else None, eps, time.perf_counter() - start))
    for link in links:
        try:
            link.send(encode_message(STOP))
        except OSError:
            pass
    return rec.finish(state.step)


def distributed_train(model: Model, train: Dataset, val: Dataset | None, config: TrainConfig, workers: int,
                      transport: str = "inprocess", out_dir=None, socket_workers: str = "thread",
                      host: str = "127.0.0.1", port: int = 0, timeout: float = 300.0,
                      on_listen: Callable | None = None, on_step: Callable | None = None) -> TrainResult:
    """Train ``model`` in place across ``workers`` replicas.

    ``socket_workers`` selects how socket-transport workers start: ``thread``
    and ``process`` launch them locally, ``external`` waits for workers
    started elsewhere (``robustkit worker --connect HOST:PORT``).
    ``on_listen`` receives the bound address.
    """
    config.validate()
    if workers < 1:
        raise ValueError(f"worker count must be >= 1, got {workers}")
    if workers > config.batch_size:
        raise ValueError(f"{workers} workers exceed the batch size {config.batch_size}")
    if transport not in TRANSPORTS:
        raise ValueError(f"transport must be one of {TRANSPORTS}, got {transport!r}")
    if len(train) == 0:
        raise ValueError("training set is empty")
    train.check_domain()
    if len(train) % config.batch_size and len(train) % config.batch_size < workers:
        raise ValueError(f"the last batch of {len(train) % config.batch_size} samples cannot be split "
                         f"across {workers} workers")
    if transport == "inprocess":
        links = [_InProcessLink(w) for w in range(workers)]
        try:
            return _run_coordinator(links, model, train, val, config, out_dir, on_step)
        finally:
            for link in links:
                link.close()
    with socket.create_server((host, port)) as server:
        address = server.getsockname()[:2]
        if on_listen is not None:
            on_listen(address)
        join = _launch_socket_workers(address, workers, socket_workers)
        links = _accept_workers(server, workers, timeout)
        try:
            return _run_coordinator(links, model, train, val, config, out_dir, on_step)
        finally:
            for link in links:
                link.close()
            join()
