"""TCP coordinator/worker transport for the hand-off federation protocol.

One coordinator owns the global model; workers connect, announce themselves,
and take strictly sequential turns: the coordinator sends the current global
weights to one worker, waits for that worker's trained weights, installs
them, and moves to the next node.  Weights travel as 32-bit floats inside
checksummed bundles, so a networked session and an in-process run agree
bitwise at the serialized level.

The transport carries no TLS and no authentication.  It models the trust
topology of cooperating hospitals on a private network and must not be
exposed to untrusted networks as-is.
"""

from __future__ import annotations

import logging
import select
import socket
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .data import load_matrix
from .errors import ConfigError, IntegrityError, ProtocolError
from .federation import FederationPlan
from .gan import GanConfig, GanModel, build_gan, load_weight_arrays, train, weight_arrays
from .rng import model_stream_index

log = logging.getLogger(__name__)

HELLO = 1
ASSIGN = 2
GLOBAL_WEIGHTS = 3
TRAINED_WEIGHTS = 4
END = 5
ERROR = 6

TYPE_NAMES = {
    HELLO: "HELLO",
    ASSIGN: "ASSIGN",
    GLOBAL_WEIGHTS: "GLOBAL_WEIGHTS",
    TRAINED_WEIGHTS: "TRAINED_WEIGHTS",
    END: "END",
    ERROR: "ERROR",
}

MAX_PAYLOAD = 256 * 1024 * 1024
_U32_MAX = 0xFFFFFFFF

_LEN = struct.Struct(">I")
_HEADER = struct.Struct(">BII")  # type code, round, node_id
_ASSIGN_BODY = struct.Struct(">I32s")  # epoch budget, config digest


@dataclass(frozen=True)
class Message:
    type: int
    round: int
    node_id: int
    payload: bytes = b""

    @property
    def type_name(self) -> str:
        return TYPE_NAMES.get(self.type, f"type {self.type}")


def _check_message(msg: Message) -> None:
    if msg.type not in TYPE_NAMES:
        raise ProtocolError(f"unknown message type code {msg.type}")
    for label, value in (("round", msg.round), ("node_id", msg.node_id)):
        if not (0 <= value <= _U32_MAX):
            raise ProtocolError(f"{label} {value} outside 32-bit range")
    if len(msg.payload) > MAX_PAYLOAD:
        raise ProtocolError(
            f"payload of {len(msg.payload)} bytes exceeds the 256 MiB cap"
        )
    if msg.type in (HELLO, END) and msg.payload:
        raise ProtocolError(f"{msg.type_name} must carry an empty payload")


def encode_message(msg: Message) -> bytes:
    """Frame: 4-byte payload length, 1-byte type, 4-byte round, 4-byte
    node_id (all big-endian), then the payload."""
    _check_message(msg)
    return (_LEN.pack(len(msg.payload))
            + _HEADER.pack(msg.type, msg.round, msg.node_id)
            + msg.payload)


def decode_message(data: bytes) -> Message:
    """Parse exactly one complete frame; trailing bytes are an error."""
    if len(data) < _LEN.size + _HEADER.size:
        raise ProtocolError("truncated frame: incomplete header")
    (length,) = _LEN.unpack_from(data, 0)
    if length > MAX_PAYLOAD:
        raise ProtocolError(
            f"payload length {length} exceeds the 256 MiB cap"
        )
    type_code, round_index, node_id = _HEADER.unpack_from(data, _LEN.size)
    expected = _LEN.size + _HEADER.size + length
    if len(data) < expected:
        raise ProtocolError(
            f"truncated frame: expected {expected} bytes, got {len(data)}"
        )
    if len(data) > expected:
        raise ProtocolError(
            f"{len(data) - expected} trailing bytes after frame"
        )
    msg = Message(type_code, round_index, node_id,
                  bytes(data[_LEN.size + _HEADER.size:expected]))
    _check_message(msg)
    return msg


@dataclass(frozen=True)
class WeightsBundle:
    """Serialized model parameters: per-array shapes plus a flat 32-bit
    float block in generator-then-discriminator order."""

    shapes: tuple[tuple[int, int], ...]
    values: np.ndarray  # flat float32

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float32).ravel()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "shapes",
                           tuple((int(r), int(c)) for r, c in self.shapes))
        want = sum(r * c for r, c in self.shapes)
        if want != self.values.size:
            raise IntegrityError(
                f"bundle declares {want} values but holds {self.values.size}"
            )

    def __eq__(self, other):
        return (isinstance(other, WeightsBundle)
                and self.shapes == other.shapes
                and np.array_equal(self.values, other.values))

    def to_bytes(self) -> bytes:
        head = struct.pack(">H", len(self.shapes))
        head += b"".join(struct.pack(">II", r, c) for r, c in self.shapes)
        block = self.values.astype("<f4").tobytes()
        body = head + block
        return body + struct.pack(">I", zlib.crc32(body))


def bundle_from_arrays(arrays) -> WeightsBundle:
    """Bundle a weight_arrays()-ordered list; biases become n-by-1 entries."""
    shapes = []
    flats = []
    for arr in arrays:
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 1:
            shapes.append((arr.size, 1))
        elif arr.ndim == 2:
            shapes.append(arr.shape)
        else:
            raise ConfigError(f"cannot bundle a rank-{arr.ndim} array")
        flats.append(arr.astype(np.float32).ravel())
    return WeightsBundle(tuple(shapes), np.concatenate(flats))


def encode_weights(model: GanModel) -> bytes:
    """Serialize a model's parameters: 2-byte array count, 4-byte rows and
    cols per array, little-endian float32 values, 4-byte CRC32."""
    return bundle_from_arrays(weight_arrays(model)).to_bytes()


def decode_weights(data: bytes) -> WeightsBundle:
    if len(data) < 2 + 4:
        raise IntegrityError("truncated bundle: missing header")
    (count,) = struct.unpack_from(">H", data, 0)
    head_size = 2 + 8 * count
    if len(data) < head_size + 4:
        raise IntegrityError("truncated bundle: missing shape table")
    shapes = []
    for i in range(count):
        rows, cols = struct.unpack_from(">II", data, 2 + 8 * i)
        if rows < 1 or cols < 1:
            raise IntegrityError(f"bundle entry {i} has empty shape "
                                 f"({rows}, {cols})")
        shapes.append((rows, cols))
    value_count = sum(r * c for r, c in shapes)
    expected = head_size + 4 * value_count + 4
    if len(data) != expected:
        raise IntegrityError(
            f"bundle length {len(data)} does not match declared shapes "
            f"(expected {expected})"
        )
    body = data[:expected - 4]
    (want_crc,) = struct.unpack_from(">I", data, expected - 4)
    got_crc = zlib.crc32(body)
    if got_crc != want_crc:
        raise IntegrityError(
            f"bundle checksum mismatch: stored {want_crc:#010x}, "
            f"computed {got_crc:#010x}"
        )
    values = np.frombuffer(data, dtype="<f4", count=value_count,
                           offset=head_size)
    return WeightsBundle(tuple(shapes), values)


def arrays_from_bundle(bundle: WeightsBundle) -> list[np.ndarray]:
    """Expand a bundle back into float64 arrays; n-by-1 entries flatten to
    bias vectors."""
    out = []
    offset = 0
    for rows, cols in bundle.shapes:
        n = rows * cols
        chunk = bundle.values[offset:offset + n].astype(np.float64)
        out.append(chunk if cols == 1 else chunk.reshape(rows, cols))
        offset += n
    return out


def apply_bundle(model: GanModel, bundle: WeightsBundle) -> None:
    load_weight_arrays(model, arrays_from_bundle(bundle))


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    parts = []
    remaining = n
    while remaining:
        try:
            chunk = sock.recv(min(remaining, 1 << 20))
        except socket.timeout as exc:
            raise ProtocolError("timed out waiting for peer") from exc
        if not chunk:
            raise ProtocolError("connection closed mid-frame")
        parts.append(chunk)
        remaining -= len(chunk)
    return b"".join(parts)


def _recv_message(sock: socket.socket) -> Message:
    (length,) = _LEN.unpack(_recv_exact(sock, _LEN.size))
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"payload length {length} exceeds the 256 MiB cap")
    type_code, round_index, node_id = _HEADER.unpack(
        _recv_exact(sock, _HEADER.size))
    payload = _recv_exact(sock, length) if length else b""
    msg = Message(type_code, round_index, node_id, payload)
    _check_message(msg)
    return msg


def _send_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode_message(msg))


def assign_payload(budget: int, digest: bytes) -> bytes:
    if len(digest) != 32:
        raise ProtocolError("config digest must be 32 bytes")
    return _ASSIGN_BODY.pack(budget, digest)


def parse_assign(payload: bytes) -> tuple[int, bytes]:
    if len(payload) != _ASSIGN_BODY.size:
        raise ProtocolError(
            f"ASSIGN payload must be {_ASSIGN_BODY.size} bytes, "
            f"got {len(payload)}"
        )
    budget, digest = _ASSIGN_BODY.unpack(payload)
    return budget, digest


@dataclass
class SessionState:
    expected_workers: int
    workers: dict[int, socket.socket] = field(default_factory=dict)
    round_index: int = 0
    node_index: int = 0


class _SessionAborted(ProtocolError):
    """Raised after the ERROR broadcast has already gone out."""


class _Coordinator:
    def __init__(self, config: GanConfig, plan: FederationPlan,
                 timeout: float):
        if plan.silo_count < 1:
            raise ConfigError("plan needs at least one silo")
        self.config = config
        self.plan = plan
        self.timeout = timeout
        self.state = SessionState(expected_workers=plan.silo_count)
        self.digest = config.digest()

    def _abort(self, reason: str):
        log.error("aborting session: %s", reason)
        note = Message(ERROR, self.state.round_index, 0, reason.encode())
        for sock in self.state.workers.values():
            try:
                _send_message(sock, note)
            except OSError:
                pass
        raise _SessionAborted(reason)

    def collect_workers(self, listener: socket.socket) -> None:
        pending: list[socket.socket] = []
        while len(self.state.workers) < self.state.expected_workers:
            ready, _, _ = select.select(
                [listener] + pending, [], [], self.timeout)
            if not ready:
                self._abort("timed out waiting for workers to connect")
            for sock in ready:
                if sock is listener:
                    conn, addr = listener.accept()
                    conn.settimeout(self.timeout)
                    log.info("connection from %s", addr)
                    pending.append(conn)
                    continue
                pending.remove(sock)
                msg = _recv_message(sock)
                if msg.type != HELLO:
                    self._abort(
                        f"expected HELLO, got {msg.type_name}")
                if msg.node_id >= self.state.expected_workers:
                    self._abort(
                        f"HELLO from unknown node {msg.node_id}")
                if msg.node_id in self.state.workers:
                    self._abort(
                        f"duplicate HELLO for node {msg.node_id}")
                self.state.workers[msg.node_id] = sock
                log.info("node %d joined (%d of %d)", msg.node_id,
                         len(self.state.workers),
                         self.state.expected_workers)

    def _abort_stray(self, sock: socket.socket) -> None:
        stray = next(n for n, s in self.state.workers.items() if s is sock)
        try:
            msg = _recv_message(sock)
            detail = msg.type_name
        except ProtocolError as exc:
            detail = str(exc)
        self._abort(f"node {stray} spoke out of turn ({detail})")

    def _await_trained(self, node_id: int) -> Message:
        active = self.state.workers[node_id]
        others = [s for n, s in self.state.workers.items() if n != node_id]
        while True:
            ready, _, _ = select.select([active] + others, [], [],
                                        self.timeout)
            if not ready:
                self._abort(
                    f"timed out waiting for node {node_id} to train")
            for sock in ready:
                if sock is not active:
                    self._abort_stray(sock)
            for sock in ready:
                msg = _recv_message(sock)
                if msg.type == ERROR:
                    self._abort(
                        f"node {node_id} reported: "
                        f"{msg.payload.decode(errors='replace')}")
                if msg.type != TRAINED_WEIGHTS:
                    self._abort(
                        f"expected TRAINED_WEIGHTS from node {node_id}, "
                        f"got {msg.type_name}")
                if (msg.round, msg.node_id) != (self.state.round_index,
                                                node_id):
                    self._abort(
                        f"TRAINED_WEIGHTS labeled (round {msg.round}, "
                        f"node {msg.node_id}), expected "
                        f"(round {self.state.round_index}, node {node_id})")
                return msg

    def _turn(self, global_model: GanModel, round_index: int,
              node_id: int) -> None:
        # nothing should be in flight between turns; buffered data means a
        # worker sent a frame before being asked
        early, _, _ = select.select(list(self.state.workers.values()),
                                    [], [], 0)
        for stray_sock in early:
            self._abort_stray(stray_sock)
        sock = self.state.workers[node_id]
        budget = self.plan.epochs_per_node[node_id]
        try:
            _send_message(sock, Message(
                ASSIGN, round_index, node_id,
                assign_payload(budget, self.digest)))
            _send_message(sock, Message(
                GLOBAL_WEIGHTS, round_index, node_id,
                encode_weights(global_model)))
        except OSError as exc:
            self._abort(f"node {node_id} unreachable: {exc}")
        reply = self._await_trained(node_id)
        apply_bundle(global_model, decode_weights(reply.payload))
        log.info("round %d node %d installed", round_index, node_id)

    def run(self, listener: socket.socket) -> WeightsBundle:
        self.collect_workers(listener)
        listener.close()
        global_model = build_gan(self.config)
        try:
            for round_index in range(self.plan.rounds):
                self.state.round_index = round_index
                for node_id in range(self.plan.silo_count):
                    self.state.node_index = node_id
                    try:
                        self._turn(global_model, round_index, node_id)
                    except _SessionAborted:
                        raise
                    except (ProtocolError, IntegrityError, OSError) as exc:
                        self._abort(
                            f"round {round_index} node {node_id} failed: "
                            f"{exc}")
            final = Message(END, self.plan.rounds, 0)
            for sock in self.state.workers.values():
                try:
                    _send_message(sock, final)
                except OSError:
                    pass
            return decode_weights(encode_weights(global_model))
        finally:
            for sock in self.state.workers.values():
                sock.close()


def coordinator_run(config: GanConfig, plan: FederationPlan,
                    bind_address=("127.0.0.1", 0), timeout: float = 600.0,
                    on_listen=None) -> WeightsBundle:
    """Serve one full federation session and return the final weights.

    on_listen, if given, receives the bound (host, port) once the socket is
    listening; useful when binding to port 0.
    """
    coordinator = _Coordinator(config, plan, timeout)
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        listener.bind(bind_address)
        listener.listen(plan.silo_count)
        listener.settimeout(timeout)
        if on_listen is not None:
            on_listen(listener.getsockname())
        return coordinator.run(listener)
    finally:
        listener.close()


def worker_run(data_path, connect_address, node_id: int, config: GanConfig,
               timeout: float = 600.0) -> int:
    """Join a session, train on the local silo each turn, return exit status
    (0 on a clean END, 1 on any failure)."""
    try:
        matrix = load_matrix(data_path)
    except Exception as exc:
        log.error("node %d: cannot load %s: %s", node_id, data_path, exc)
        return 1
    if matrix.cols != config.feature_dim:
        log.error("node %d: data has %d features, config expects %d",
                  node_id, matrix.cols, config.feature_dim)
        return 1
    try:
        sock = socket.create_connection(connect_address, timeout=timeout)
    except OSError as exc:
        log.error("node %d: cannot connect to %s: %s", node_id,
                  connect_address, exc)
        return 1
    budget = None
    try:
        with sock:
            sock.settimeout(timeout)
            _send_message(sock, Message(HELLO, 0, node_id))
            while True:
                msg = _recv_message(sock)
                if msg.type == ASSIGN:
                    if msg.node_id != node_id:
                        log.error("node %d: ASSIGN addressed to node %d",
                                  node_id, msg.node_id)
                        return 1
                    budget, digest = parse_assign(msg.payload)
                    if digest != config.digest():
                        log.error("node %d: config digest mismatch with "
                                  "coordinator", node_id)
                        return 1
                elif msg.type == GLOBAL_WEIGHTS:
                    if msg.node_id != node_id:
                        log.error("node %d: weights addressed to node %d",
                                  node_id, msg.node_id)
                        return 1
                    if budget is None:
                        log.error("node %d: GLOBAL_WEIGHTS before ASSIGN",
                                  node_id)
                        return 1
                    local = build_gan(config, stream_index=model_stream_index(
                        msg.round, node_id))
                    apply_bundle(local, decode_weights(msg.payload))
                    train(local, matrix, budget)
                    _send_message(sock, Message(
                        TRAINED_WEIGHTS, msg.round, node_id,
                        encode_weights(local)))
                    log.info("node %d: round %d trained %d epochs",
                             node_id, msg.round, budget)
                    budget = None
                elif msg.type == END:
                    log.info("node %d: session complete", node_id)
                    return 0
                elif msg.type == ERROR:
                    log.error("node %d: coordinator aborted: %s", node_id,
                              msg.payload.decode(errors="replace"))
                    return 1
                else:
                    log.error("node %d: unexpected %s", node_id,
                              msg.type_name)
                    return 1
    except (ProtocolError, IntegrityError, ConfigError, OSError) as exc:
        log.error("node %d: session failed: %s", node_id, exc)
        return 1
