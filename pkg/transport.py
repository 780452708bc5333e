"""Coordinator/worker messages over TCP.

Every message is an envelope serialised as UTF-8 JSON and framed by a 4-byte
big-endian length. The coordinator side is a worker pool: one connection per
block tag, each read by its own thread into a FIFO queue, so results are
committed in tag order whatever order the workers answer in.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import struct
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

from madts import EliteSet, MadtsConfig, WorkerReport, WorkerSession, feedback_from_list, feedback_to_list
from search_space import Block, BlockTag, Chromosome, SearchSpace, space_from_dict, tag_to_str


LOGGER = logging.getLogger("macc")

PROTOCOL_VERSION = 1
MAX_FRAME_BYTES = 16 * 1024 * 1024
HEADER = struct.Struct(">I")
COORD = "coord"
CONNECT_ATTEMPTS = 3
IDLE_TIMEOUT = 120.0


class ProtocolError(ValueError):
    """Bytes or envelopes that violate the wire protocol."""


class WorkerFailure(RuntimeError):
    """A worker disconnected, timed out or reported an error mid-generation."""


class MsgType(str, Enum):
    HELLO = "Hello"
    DISPATCH_BLOCKS = "DispatchBlocks"
    LOCAL_STEP_DONE = "LocalStepDone"
    REQUEST_ELITES = "RequestElites"
    ELITES = "Elites"
    GLOBAL_FEEDBACK = "GlobalFeedback"
    SHUTDOWN = "Shutdown"
    ERROR = "Error"


REQUIRED_FIELDS = {
    MsgType.HELLO: (),
    MsgType.DISPATCH_BLOCKS: ("blocks", "context", "local_steps", "elites"),
    MsgType.LOCAL_STEP_DONE: ("step",),
    MsgType.REQUEST_ELITES: (),
    MsgType.ELITES: ("blocks", "estimates", "snapshot", "proposals", "fits"),
    MsgType.GLOBAL_FEEDBACK: ("feedback",),
    MsgType.SHUTDOWN: (),
    MsgType.ERROR: ("message",),
}


@dataclass(frozen=True)
class Envelope:
    msg_type: MsgType
    generation: int = 0
    worker_tag: str = COORD
    payload: dict = field(default_factory=dict)
    protocol_version: int = PROTOCOL_VERSION

    def to_dict(self) -> dict:
        return {
            "protocol_version": self.protocol_version,
            "msg_type": self.msg_type.value,
            "generation": self.generation,
            "worker_tag": self.worker_tag,
            "payload": self.payload,
        }


def frame_encode(envelope: Envelope) -> bytes:
    body = json.dumps(envelope.to_dict(), separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    if len(body) > MAX_FRAME_BYTES:
        raise ProtocolError(f"frame of {len(body)} bytes exceeds the {MAX_FRAME_BYTES}-byte limit")
    return HEADER.pack(len(body)) + body


def _envelope_from_dict(data) -> Envelope:
    if not isinstance(data, dict):
        raise ProtocolError("envelope must be a JSON object")
    version, generation = data.get("protocol_version"), data.get("generation")
    if isinstance(version, bool) or not isinstance(version, int):
        raise ProtocolError("protocol_version must be an integer")
    if isinstance(generation, bool) or not isinstance(generation, int) or generation < 0:
        raise ProtocolError("generation must be a non-negative integer")
    try:
        msg_type = MsgType(data.get("msg_type"))
    except ValueError:
        raise ProtocolError(f"unknown msg_type {data.get('msg_type')!r}") from None
    worker_tag, payload = data.get("worker_tag"), data.get("payload")
    if not isinstance(worker_tag, str):
        raise ProtocolError("worker_tag must be a string")
    if not isinstance(payload, dict):
        raise ProtocolError("payload must be a JSON object")
    missing = [name for name in REQUIRED_FIELDS[msg_type] if name not in payload]
    if missing:
        raise ProtocolError(f"{msg_type.value} payload lacks {', '.join(missing)}")
    return Envelope(msg_type, generation, worker_tag, payload, version)


def frame_decode(data: bytes) -> Optional[tuple[Envelope, int]]:
    """Decode the first frame of ``data``.

    Returns ``(envelope, bytes_consumed)``, or ``None`` when more bytes are
    needed. The declared length is checked before the body is touched.
    """
    if len(data) < HEADER.size:
        return None
    (length,) = HEADER.unpack_from(data)
    if length > MAX_FRAME_BYTES:
        raise ProtocolError(f"declared frame length {length} exceeds the {MAX_FRAME_BYTES}-byte limit")
    end = HEADER.size + length
    if len(data) < end:
        return None
    try:
        body = json.loads(bytes(data[HEADER.size:end]).decode("utf-8"))
    except (ValueError, RecursionError) as exc:
        raise ProtocolError(f"frame body is not UTF-8 JSON: {exc}") from exc
    return _envelope_from_dict(body), end


class FrameReader:
    """Accumulates stream bytes and yields complete envelopes in order."""

    def __init__(self):
        self._buffer = bytearray()

    def feed(self, data: bytes) -> list[Envelope]:
        self._buffer.extend(data)
        envelopes = []
        while True:
            decoded = frame_decode(self._buffer)
            if decoded is None:
                return envelopes
            envelope, consumed = decoded
            del self._buffer[:consumed]
            envelopes.append(envelope)


def send_envelope(sock: socket.socket, envelope: Envelope, lock: Optional[threading.Lock] = None):
    frame = frame_encode(envelope)
    if lock is None:
        sock.sendall(frame)
        return
    with lock:
        sock.sendall(frame)


def recv_envelope(sock: socket.socket, reader: FrameReader, pending: list) -> Envelope:
    """Next envelope from ``sock``; raises ConnectionError on EOF."""
    while not pending:
        data = sock.recv(65536)
        if not data:
            raise ConnectionError("peer closed the connection")
        pending.extend(reader.feed(data))
    return pending.pop(0)


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must look like HOST:PORT, got {address!r}")
    return host or "127.0.0.1", int(port)


def _blocks_to_lists(blocks) -> list:
    return [list(block.alleles) for block in blocks]


@dataclass
class _Connection:
    sock: socket.socket
    inbox: "queue.Queue[Optional[Envelope]]"
    send_lock: threading.Lock = field(default_factory=threading.Lock)
    alive: bool = True


class TcpWorkerPool:
    """Coordinator session: drives M+1 remote workers through the generation barrier."""

    def __init__(self, space: SearchSpace, bind_address: str, hello_payload: dict,
                 reply_timeout: float = 600.0, register_timeout: float = 60.0):
        self.space = space
        self.hello_payload = hello_payload
        self.reply_timeout = reply_timeout
        self.register_timeout = register_timeout
        self.master_seed = int(hello_payload.get("master_seed", 0))
        self._expected = {tag_to_str(tag): tag for tag in space.block_tags}
        self._connections: dict[BlockTag, _Connection] = {}
        self._registered = threading.Condition()
        self._pending_restore: dict[BlockTag, dict] = {}
        self._children: list[subprocess.Popen] = []
        self._closing = False
        host, port = parse_address(bind_address)
        self._server = socket.create_server((host, port))
        self.address = "%s:%d" % self._server.getsockname()[:2]
        self._acceptor = threading.Thread(target=self._accept_loop, name="macc-accept", daemon=True)
        self._acceptor.start()
        LOGGER.info(
            f"Coordinator listening on {self.address}",
            extra={"event": "coordinator_listening"},
        )

    def _accept_loop(self):
        while not self._closing:
            try:
                sock, _ = self._server.accept()
            except OSError:
                return
            threading.Thread(target=self._register, args=(sock,), daemon=True).start()

    def _reject(self, sock: socket.socket, message: str):
        LOGGER.warning(message, extra={"event": "worker_rejected"})
        try:
            send_envelope(sock, Envelope(MsgType.ERROR, payload={"message": message}))
        finally:
            sock.close()

    def _register(self, sock: socket.socket):
        reader, pending = FrameReader(), []
        try:
            sock.settimeout(self.register_timeout)
            hello = recv_envelope(sock, reader, pending)
            sock.settimeout(None)
        except (OSError, ConnectionError, ProtocolError) as exc:
            LOGGER.warning(f"Handshake failed: {exc}", extra={"event": "worker_rejected"})
            sock.close()
            return
        if hello.protocol_version != PROTOCOL_VERSION:
            self._reject(sock, f"protocol version {hello.protocol_version} != {PROTOCOL_VERSION}")
            return
        if hello.msg_type != MsgType.HELLO or hello.worker_tag not in self._expected:
            self._reject(sock, f"expected Hello from a known block tag, got {hello.msg_type.value} from {hello.worker_tag!r}")
            return
        tag = self._expected[hello.worker_tag]
        with self._registered:
            held = self._connections.get(tag)
            if held is not None and held.alive:
                duplicate = True
            else:
                duplicate = False
                connection = _Connection(sock, queue.Queue())
                self._connections[tag] = connection
        if duplicate:
            self._reject(sock, f"block tag {hello.worker_tag} already has a worker")
            return
        send_envelope(sock, Envelope(MsgType.HELLO, worker_tag=COORD, payload=self.hello_payload), connection.send_lock)
        LOGGER.info(
            f"Worker registered for block {hello.worker_tag}",
            extra={"event": "worker_registered", "worker_tag": hello.worker_tag},
        )
        with self._registered:
            self._registered.notify_all()
        for envelope in pending:
            connection.inbox.put(envelope)
        self._read_loop(tag, connection, reader)

    def _read_loop(self, tag: BlockTag, connection: _Connection, reader: FrameReader):
        try:
            while True:
                data = connection.sock.recv(65536)
                if not data:
                    break
                for envelope in reader.feed(data):
                    connection.inbox.put(envelope)
        except (OSError, ProtocolError) as exc:
            LOGGER.warning(
                f"Connection to worker {tag_to_str(tag)} failed: {exc}",
                extra={"event": "worker_lost", "worker_tag": tag_to_str(tag)},
            )
        connection.alive = False
        connection.inbox.put(None)
        with self._registered:
            self._registered.notify_all()

    def wait_for_workers(self, timeout: Optional[float] = None) -> None:
        """Block until every block tag has a live worker."""
        timeout = self.register_timeout if timeout is None else timeout
        deadline = time.monotonic() + timeout
        with self._registered:
            while not self._all_live():
                left = deadline - time.monotonic()
                if left <= 0:
                    missing = [tag_to_str(t) for t in self.space.block_tags if not self._live(t)]
                    raise WorkerFailure(f"no worker registered for block(s) {', '.join(missing)}")
                self._registered.wait(left)

    def _live(self, tag) -> bool:
        connection = self._connections.get(tag)
        return connection is not None and connection.alive

    def _all_live(self) -> bool:
        return all(self._live(tag) for tag in self.space.block_tags)

    def _send(self, tag: BlockTag, envelope: Envelope):
        connection = self._connections.get(tag)
        if connection is None or not connection.alive:
            raise WorkerFailure(f"worker {tag_to_str(tag)} is not connected")
        try:
            send_envelope(connection.sock, envelope, connection.send_lock)
        except OSError as exc:
            raise WorkerFailure(f"cannot reach worker {tag_to_str(tag)}: {exc}") from exc

    def _expect(self, tag: BlockTag, msg_type: MsgType, generation: int) -> Envelope:
        try:
            envelope = self._connections[tag].inbox.get(timeout=self.reply_timeout)
        except queue.Empty:
            raise WorkerFailure(f"worker {tag_to_str(tag)} timed out waiting for {msg_type.value}") from None
        if envelope is None:
            raise WorkerFailure(f"worker {tag_to_str(tag)} disconnected")
        if envelope.msg_type == MsgType.ERROR:
            raise WorkerFailure(f"worker {tag_to_str(tag)} reported: {envelope.payload['message']}")
        if envelope.msg_type != msg_type or envelope.generation != generation:
            raise WorkerFailure(
                f"worker {tag_to_str(tag)} sent {envelope.msg_type.value} for generation "
                f"{envelope.generation}, expected {msg_type.value} for {generation}"
            )
        return envelope

    def dispatch(self, generation, blocks, context, local_steps, elite_count) -> dict[BlockTag, WorkerReport]:
        if not self._all_live():
            self.wait_for_workers()
        for tag in self.space.block_tags:
            payload = {
                "blocks": _blocks_to_lists(blocks[tag]),
                "context": list(context.alleles),
                "local_steps": local_steps,
                "elites": elite_count,
            }
            if tag in self._pending_restore:
                payload["restore"] = self._pending_restore[tag]
            self._send(tag, Envelope(MsgType.DISPATCH_BLOCKS, generation, tag_to_str(tag), payload))
        self._pending_restore.clear()
        for step in range(1, local_steps + 1):
            for tag in self.space.block_tags:
                done = self._expect(tag, MsgType.LOCAL_STEP_DONE, generation)
                if done.payload["step"] != step:
                    raise WorkerFailure(f"worker {tag_to_str(tag)} acknowledged step {done.payload['step']}, expected {step}")
        for tag in self.space.block_tags:
            self._send(tag, Envelope(MsgType.REQUEST_ELITES, generation, tag_to_str(tag)))
        reports = {}
        for tag in self.space.block_tags:
            body = self._expect(tag, MsgType.ELITES, generation).payload
            elites = EliteSet(
                tag,
                tuple(Block(tag, tuple(int(a) for a in alleles)) for alleles in body["blocks"]),
                tuple(float(e) for e in body["estimates"]),
            )
            reports[tag] = WorkerReport(elites, body["snapshot"], int(body["proposals"]), int(body["fits"]))
        return reports

    def feedback(self, generation, feedback):
        for tag in self.space.block_tags:
            payload = {"feedback": feedback_to_list(feedback.get(tag, {}))}
            self._send(tag, Envelope(MsgType.GLOBAL_FEEDBACK, generation, tag_to_str(tag), payload))

    def restore(self, snapshots, feedback):
        """Resend worker state with the next dispatch, after dropping stale replies."""
        for tag in self.space.block_tags:
            connection = self._connections.get(tag)
            if connection is not None and connection.alive:
                while True:
                    try:
                        connection.inbox.get_nowait()
                    except queue.Empty:
                        break
            self._pending_restore[tag] = {
                "snapshot": snapshots.get(tag),
                "feedback": feedback_to_list(feedback.get(tag, {})),
            }

    def attach_children(self, children: list[subprocess.Popen]):
        self._children.extend(children)

    def close(self, grace: float = 10.0):
        """Broadcast Shutdown, then close every socket and reap spawned workers."""
        self._closing = True
        for tag, connection in list(self._connections.items()):
            if connection.alive:
                try:
                    send_envelope(connection.sock, Envelope(MsgType.SHUTDOWN, worker_tag=tag_to_str(tag)), connection.send_lock)
                except OSError:
                    pass
        deadline = time.monotonic() + grace
        for child in self._children:
            try:
                child.wait(timeout=max(0.0, deadline - time.monotonic()))
            except subprocess.TimeoutExpired:
                child.kill()
                child.wait()
        for connection in self._connections.values():
            connection.sock.close()
        self._server.close()


def coordinator_serve(bind_address: str, space: SearchSpace, hello_payload: dict, **kwargs) -> TcpWorkerPool:
    """Bind and start accepting workers; call ``wait_for_workers`` before the run."""
    return TcpWorkerPool(space, bind_address, hello_payload, **kwargs)


def spawn_workers(address: str, space: SearchSpace, extra_args=()) -> list[subprocess.Popen]:
    """Launch one ``worker`` subprocess per block tag against ``address``."""
    script = Path(__file__).with_name("macc_search.py")
    return [
        subprocess.Popen(
            [sys.executable, str(script), "worker", "--connect", address, "--tag", tag_to_str(tag), *extra_args]
        )
        for tag in space.block_tags
    ]


def _connect(address: str, attempts: int, backoff: float) -> socket.socket:
    host, port = parse_address(address)
    for attempt in range(attempts):
        try:
            return socket.create_connection((host, port), timeout=IDLE_TIMEOUT)
        except OSError as exc:
            if attempt == attempts - 1:
                raise
            delay = backoff * (2 ** attempt)
            LOGGER.warning(
                f"Connection to {address} failed ({exc}); retrying in {delay:.1f}s",
                extra={"event": "connect_retry"},
            )
            time.sleep(delay)
    raise AssertionError("unreachable")


def worker_connect(
    address: str,
    worker_tag: BlockTag,
    evaluator_factory: Callable[[dict, SearchSpace], object],
    attempts: int = CONNECT_ATTEMPTS,
    backoff: float = 0.5,
    idle_timeout: float = IDLE_TIMEOUT,
) -> int:
    """Serve one block tag until Shutdown. Returns the process exit code."""
    label = tag_to_str(worker_tag)
    try:
        sock = _connect(address, attempts, backoff)
    except OSError as exc:
        LOGGER.error(
            f"Could not reach coordinator at {address}: {exc}",
            extra={"event": "connect_failed", "worker_tag": label},
        )
        return 1
    reader, pending = FrameReader(), []
    session: Optional[WorkerSession] = None
    evaluator = None
    elite_count = 0
    master_seed = 0
    try:
        with sock:
            sock.settimeout(idle_timeout)
            try:
                send_envelope(sock, Envelope(MsgType.HELLO, worker_tag=label))
                while True:
                    envelope = recv_envelope(sock, reader, pending)
                    kind, body = envelope.msg_type, envelope.payload
                    if kind == MsgType.ERROR:
                        LOGGER.error(
                            f"Coordinator error: {body['message']}",
                            extra={"event": "coordinator_error", "worker_tag": label},
                        )
                        return 1
                    if kind == MsgType.SHUTDOWN:
                        LOGGER.info("Shutdown received", extra={"event": "worker_shutdown", "worker_tag": label})
                        return 0
                    try:
                        if kind == MsgType.HELLO:
                            space = space_from_dict(body["space"])
                            master_seed = int(body["master_seed"])
                            evaluator = evaluator_factory(body["evaluator"], space)
                            session = WorkerSession(space, worker_tag, MadtsConfig(**body["madts"]), evaluator, master_seed)
                            continue
                        if session is None:
                            raise ProtocolError(f"{kind.value} received before Hello")
                        tag = session.tag
                        if kind == MsgType.DISPATCH_BLOCKS:
                            if "restore" in body:
                                restore = body["restore"]
                                session.restore(restore["snapshot"], feedback_from_list(tag, restore["feedback"]), master_seed)
                            blocks = [Block(tag, tuple(int(a) for a in alleles)) for alleles in body["blocks"]]
                            context = Chromosome(tuple(int(a) for a in body["context"]))
                            local_steps, elite_count = int(body["local_steps"]), int(body["elites"])
                            session.begin(envelope.generation, blocks, context)
                            for step in range(1, local_steps + 1):
                                session.step()
                                send_envelope(sock, Envelope(MsgType.LOCAL_STEP_DONE, envelope.generation, label, {"step": step}))
                        elif kind == MsgType.REQUEST_ELITES:
                            report = session.finish(elite_count)
                            payload = {
                                "blocks": _blocks_to_lists(report.elites.blocks),
                                "estimates": list(report.elites.estimates),
                                "snapshot": report.snapshot,
                                "proposals": report.proposals,
                                "fits": report.fits,
                            }
                            send_envelope(sock, Envelope(MsgType.ELITES, envelope.generation, label, payload))
                        elif kind == MsgType.GLOBAL_FEEDBACK:
                            session.apply_feedback(envelope.generation, feedback_from_list(tag, body["feedback"]))
                    except ProtocolError:
                        raise
                    except (KeyError, TypeError, ValueError) as exc:
                        message = f"malformed {kind.value} payload: {exc!r}"
                        LOGGER.error(
                            message,
                            extra={"event": "malformed_payload", "worker_tag": label, "generation": envelope.generation},
                        )
                        send_envelope(sock, Envelope(MsgType.ERROR, envelope.generation, label, {"message": message}))
            except socket.timeout:
                LOGGER.error(
                    f"No coordinator traffic for {idle_timeout:.0f}s; exiting",
                    extra={"event": "worker_idle_timeout", "worker_tag": label},
                )
                return 1
            except (ConnectionError, OSError, ProtocolError) as exc:
                LOGGER.error(
                    f"Worker session ended: {exc}",
                    extra={"event": "worker_failed", "worker_tag": label},
                )
                return 1
    finally:
        if evaluator is not None:
            evaluator.close()
