"""TCP streaming service.

One generation thread owns the streaming session and is the only place
prompts are applied, always between micro steps. A single emitter thread
owns all socket writes; readers parse client control records and hand
them to the generation thread through an inbox. Frames are broadcast to
every connected viewer through a bounded queue, so a stalled consumer
slows generation down instead of ballooning memory.

Wire format: see protocol. Clients send prompt/start/stop/status records
with strictly increasing seq numbers; the server answers each with an
ack, a status_reply, or an error, and greets new connections with a
hello record before any frames.
"""

import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

from .partition import PartitionScheme
from .protocol import (
    CLIENT_CONTROL_SCHEMA,
    SERVER_CONTROL_SCHEMA,
    FrameEncoder,
    MessageStream,
    WireError,
    encode_control,
    validate_control,
)
from .streamer import StreamSession
from .toyworld import NUM_CLASSES

_SENTINEL = object()


@dataclass
class _Client:
    cid: int
    sock: socket.socket
    active: bool = False      # hello sent; eligible for broadcast frames
    dead: bool = False
    last_seq: int = -1
    lock: threading.Lock = field(default_factory=threading.Lock)


class StreamServer:
    """Serves one generated stream to any number of viewers."""

    def __init__(
        self,
        velocity_fn: Callable,
        scheme: PartitionScheme,
        frame_shape: Tuple[int, int, int] = (1, 16, 16),
        host: str = "127.0.0.1",
        port: int = 0,
        initial_class: int = 0,
        cfg_w: float = 1.0,
        seed: int = 0,
        stream_id: int = 0,
        num_classes: int = NUM_CLASSES,
        autostart: bool = False,
        max_frames: Optional[int] = None,
        max_queue: int = 256,
        frame_interval: float = 0.0,
    ):
        self._velocity_fn = velocity_fn
        self._scheme = scheme
        self._frame_shape = frame_shape
        self._initial_class = initial_class
        self._cfg_w = cfg_w
        self._seed = seed
        self._stream_id = stream_id
        self._num_classes = num_classes
        self._max_frames = max_frames
        self._frame_interval = frame_interval

        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen()
        # poll instead of blocking: a close() from another thread does not
        # reliably wake a blocked accept()
        self._listener.settimeout(0.2)
        self.address = self._listener.getsockname()

        self._out: "queue.Queue" = queue.Queue(maxsize=max_queue)
        self._requests: "queue.Queue" = queue.Queue()
        self._clients = {}
        self._clients_lock = threading.Lock()
        self._next_cid = 0
        self._shutdown = threading.Event()
        self._started = threading.Event()
        self._stopped = False  # stream halted by a stop request
        self._session: Optional[StreamSession] = None
        self._encoder = FrameEncoder(stream_id=stream_id)
        self._threads = []
        if autostart:
            self._started.set()

    @property
    def port(self) -> int:
        return self.address[1]

    def start(self) -> "StreamServer":
        for name, fn in (
            ("acceptor", self._accept_loop),
            ("generator", self._generate_loop),
            ("emitter", self._emit_loop),
        ):
            t = threading.Thread(target=fn, name=f"stream-{name}", daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def __enter__(self) -> "StreamServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        self._shutdown.set()
        try:
            self._listener.close()
        except OSError:
            pass
        self._out.put(_SENTINEL)
        for t in self._threads:
            t.join(timeout=5)
        with self._clients_lock:
            clients = list(self._clients.values())
        for c in clients:
            try:
                c.sock.close()
            except OSError:
                pass

    # accepting

    def _accept_loop(self) -> None:
        while not self._shutdown.is_set():
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._clients_lock:
                cid = self._next_cid
                self._next_cid += 1
                client = _Client(cid=cid, sock=sock)
                self._clients[cid] = client
            hello = {
                "type": "hello",
                "stream_id": self._stream_id,
                "width": self._frame_shape[2],
                "height": self._frame_shape[1],
                "scheme": {
                    "K": self._scheme.K, "N": self._scheme.N,
                    "c": self._scheme.c, "s": self._scheme.s,
                },
            }
            self._enqueue(("to", cid, encode_control(hello, SERVER_CONTROL_SCHEMA)))
            reader = threading.Thread(
                target=self._read_loop, args=(client,),
                name=f"stream-reader-{cid}", daemon=True,
            )
            reader.start()

    # reading

    def _read_loop(self, client: _Client) -> None:
        stream = MessageStream()
        while not self._shutdown.is_set() and not client.dead:
            try:
                data = client.sock.recv(4096)
            except OSError:
                break
            if not data:
                break
            try:
                messages = stream.feed(data)
            except WireError:
                self._reply(client, {"type": "error", "seq": 0,
                                     "reason": "malformed control bytes"})
                break
            for record in messages:
                if isinstance(record, dict):
                    self._handle_record(client, record)
        self._drop(client)

    def _handle_record(self, client: _Client, record: dict) -> None:
        try:
            validate_control(record, CLIENT_CONTROL_SCHEMA)
        except WireError as e:
            self._reply(client, {"type": "error", "seq": int(record.get("seq", 0)),
                                 "reason": str(e)})
            return
        seq = record["seq"]
        with client.lock:
            if seq <= client.last_seq:
                self._reply(client, {
                    "type": "error", "seq": seq,
                    "reason": f"seq {seq} not above {client.last_seq}",
                })
                return
            client.last_seq = seq
        self._requests.put((client, record))

    # generation

    def _generate_loop(self) -> None:
        while not self._shutdown.is_set():
            self._drain_requests()
            budget_spent = (
                self._max_frames is not None
                and self._session is not None
                and self._session.buf.frames_emitted >= self._max_frames
            )
            if not self._started.is_set() or self._stopped or budget_spent:
                time.sleep(0.002)
                continue
            if self._session is None:
                self._session = StreamSession(
                    self._velocity_fn, self._scheme, self._frame_shape,
                    schedule=self._initial_class, cfg_w=self._cfg_w, seed=self._seed,
                )
            chunk = self._session.step()
            if chunk is None:
                continue
            for offset, frame in enumerate(chunk.frames):
                data = self._encoder.encode(frame, chunk.start_index + offset)
                self._enqueue(("frame", None, data))
            if self._frame_interval:
                time.sleep(self._frame_interval * self._scheme.c)

    def _drain_requests(self) -> None:
        while True:
            try:
                client, record = self._requests.get_nowait()
            except queue.Empty:
                return
            kind = record["type"]
            seq = record["seq"]
            if kind == "start":
                self._started.set()
                self._stopped = False
                self._ack(client, seq)
            elif kind == "stop":
                self._stopped = True
                self._ack(client, seq)
            elif kind == "prompt":
                self._apply_prompt(client, record)
            elif kind == "status":
                self._reply(client, self._status_record(seq))

    def _apply_prompt(self, client: _Client, record: dict) -> None:
        class_id = record["class_id"]
        if not 0 <= class_id < self._num_classes:
            self._reply(client, {
                "type": "error", "seq": record["seq"],
                "reason": f"class_id {class_id} outside [0, {self._num_classes})",
            })
            return
        if self._session is None:
            # stream not started yet: steer the opening condition
            self._initial_class = class_id
            micro, emitted = 0, 0
        else:
            micro, emitted = self._session.set_condition(class_id)
        self._reply(client, {
            "type": "ack", "seq": record["seq"],
            "applied_at_micro_step": micro, "frames_emitted": emitted,
        })

    def _ack(self, client: _Client, seq: int) -> None:
        micro = self._session.micro_steps_done if self._session else 0
        emitted = self._session.buf.frames_emitted if self._session else 0
        self._reply(client, {
            "type": "ack", "seq": seq,
            "applied_at_micro_step": micro, "frames_emitted": emitted,
        })

    def _status_record(self, seq: int) -> dict:
        running = self._started.is_set() and not self._stopped
        if self._session is None:
            return {
                "type": "status_reply", "seq": seq, "running": running,
                "micro_step": 0, "frames_emitted": 0,
                "active_class": self._initial_class, "tau": [],
            }
        st = self._session.status()
        return {
            "type": "status_reply", "seq": seq, "running": running,
            "micro_step": st["micro_step"], "micro_counter": st["micro_counter"],
            "frames_emitted": st["frames_emitted"],
            "active_class": st["active_class"], "tau": st["tau"],
        }

    def _reply(self, client: _Client, record: dict) -> None:
        self._enqueue(("to", client.cid, encode_control(record, SERVER_CONTROL_SCHEMA)))

    # emitting

    def _enqueue(self, item) -> None:
        while not self._shutdown.is_set():
            try:
                self._out.put(item, timeout=0.1)
                return
            except queue.Full:
                continue

    def _emit_loop(self) -> None:
        while True:
            item = self._out.get()
            if item is _SENTINEL:
                return
            kind, cid, data = item
            if kind == "to":
                with self._clients_lock:
                    client = self._clients.get(cid)
                if client is not None and not client.dead:
                    self._send(client, data)
                    client.active = True
            else:
                with self._clients_lock:
                    targets = [c for c in self._clients.values()
                               if c.active and not c.dead]
                for client in targets:
                    self._send(client, data)

    def _send(self, client: _Client, data: bytes) -> None:
        try:
            client.sock.sendall(data)
        except OSError:
            self._drop(client)

    def _drop(self, client: _Client) -> None:
        client.dead = True
        with self._clients_lock:
            self._clients.pop(client.cid, None)
        try:
            client.sock.close()
        except OSError:
            pass


class StreamClient:
    """Test-friendly viewer: collects frames and control records."""

    def __init__(self, host: str, port: int, connect_timeout: float = 5.0):
        self.sock = socket.create_connection((host, port), timeout=connect_timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.frames = []
        self.controls = []
        self._cv = threading.Condition()
        self._closed = False
        self._seq = 0
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        stream = MessageStream()
        while not self._closed:
            try:
                data = self.sock.recv(4096)
            except OSError:
                break
            if not data:
                break
            for msg in stream.feed(data):
                with self._cv:
                    if isinstance(msg, dict):
                        self.controls.append(msg)
                    else:
                        self.frames.append(msg)
                    self._cv.notify_all()
        with self._cv:
            self._closed = True
            self._cv.notify_all()

    def _send(self, record: dict) -> int:
        record = dict(record, seq=self._seq)
        self._seq += 1
        self.sock.sendall(encode_control(record, CLIENT_CONTROL_SCHEMA))
        return record["seq"]

    def send_raw(self, record: dict) -> None:
        """Escape hatch for malformed or fixed-seq records."""
        self.sock.sendall(encode_control(record, None))

    def start(self) -> int:
        return self._send({"type": "start"})

    def stop(self) -> int:
        return self._send({"type": "stop"})

    def prompt(self, class_id: int) -> int:
        return self._send({"type": "prompt", "class_id": class_id})

    def status(self) -> int:
        return self._send({"type": "status"})

    def wait_control(self, predicate, timeout: float = 5.0) -> dict:
        deadline = time.monotonic() + timeout
        with self._cv:
            while True:
                for rec in self.controls:
                    if predicate(rec):
                        return rec
                remaining = deadline - time.monotonic()
                if remaining <= 0 or self._closed:
                    raise TimeoutError(f"no matching control record; saw {self.controls}")
                self._cv.wait(remaining)

    def wait_hello(self, timeout: float = 5.0) -> dict:
        return self.wait_control(lambda r: r["type"] == "hello", timeout)

    def wait_reply(self, seq: int, timeout: float = 5.0) -> dict:
        return self.wait_control(
            lambda r: r.get("seq") == seq and r["type"] != "hello", timeout
        )

    def wait_frames(self, n: int, timeout: float = 10.0) -> list:
        deadline = time.monotonic() + timeout
        with self._cv:
            while len(self.frames) < n:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TimeoutError(f"got {len(self.frames)}/{n} frames")
                if self._closed and len(self.frames) < n:
                    remaining = min(remaining, 0.25)
                self._cv.wait(remaining)
            return list(self.frames[:n])

    def frame_array(self, n: int) -> np.ndarray:
        msgs = self.wait_frames(n)
        return np.stack([m.to_array() for m in msgs])

    def close(self) -> None:
        self._closed = True
        try:
            self.sock.close()
        except OSError:
            pass

    def __enter__(self) -> "StreamClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def serve(
    velocity_fn,
    scheme: PartitionScheme,
    frame_shape=(1, 16, 16),
    host: str = "127.0.0.1",
    port: int = 5317,
    **kwargs,
) -> StreamServer:
    """Construct and start a server; caller owns shutdown."""
    server = StreamServer(
        velocity_fn, scheme, frame_shape, host=host, port=port, **kwargs
    )
    return server.start()
