"""Wire protocol for executing external simulators as probabilistic programs.

Framing: each message is a 32-bit unsigned little-endian length followed by
that many bytes of UTF-8 JSON. The JSON object carries a ``type`` field
naming the variant in lower_snake_case; unknown extra fields are ignored,
missing required fields are an error. Frames above 16 MiB are rejected.

Conversation (protocol version 1):

    client  -> Handshake{protocol_version, client_name}
    server  -> HandshakeAck{protocol_version}
    server  -> Run{run_id, config}
    client  -> SampleRequest{label, dist}   (any number of times)
    server  -> SampleResponse{value}        (exactly one per request)
    client  -> Observe{label, dist, value}  (no reply)
    client  -> RunResult{outputs}           (ends the run)

After RunResult the connection is idle; the server may send another Run.
Either side may send Error{code, message}. The controller owns all
randomness: a compliant client draws nothing on its own, which is what
makes record/redirect execution and hence every inference engine work
unchanged over the bridge. See PROTOCOL.md for byte-level examples.
"""

from __future__ import annotations

import json
import socket
import struct
from dataclasses import dataclass
from typing import Optional, Union

from .distributions import (
    Distribution,
    Value,
    dist_from_json,
    dist_to_json,
    value_from_json,
    value_to_json,
)
from .trace import ExecutionContext, ExecutionMode, Trace

__all__ = [
    "PROTOCOL_VERSION",
    "MAX_FRAME_BYTES",
    "DEFAULT_RUN_TIMEOUT",
    "ProtocolError",
    "Handshake",
    "HandshakeAck",
    "Run",
    "SampleRequest",
    "SampleResponse",
    "Observe",
    "RunResult",
    "ErrorMessage",
    "WireMessage",
    "encode_message",
    "decode_message",
    "send_message",
    "recv_message",
    "BridgeController",
    "BridgedModel",
    "BridgeClient",
    "serve_sir_client",
    "listen_and_accept",
]

PROTOCOL_VERSION = 1
MAX_FRAME_BYTES = 16 * 1024 * 1024
DEFAULT_RUN_TIMEOUT = 300.0


class ProtocolError(Exception):
    """Typed protocol failure; ``code`` is a stable machine-readable string."""

    OVERSIZE_FRAME = "oversize_frame"
    TRUNCATED_FRAME = "truncated_frame"
    INVALID_UTF8 = "invalid_utf8"
    MALFORMED_JSON = "malformed_json"
    UNKNOWN_TYPE = "unknown_type"
    MISSING_FIELD = "missing_field"
    INVALID_FIELD = "invalid_field"
    PROTOCOL_STATE = "protocol_state"
    VERSION_MISMATCH = "version_mismatch"
    TRANSPORT = "transport"
    TIMEOUT = "timeout"
    CLIENT_ERROR = "client_error"

    def __init__(self, code: str, message: str, addresses=None):
        self.code = code
        self.addresses = list(addresses) if addresses else []
        super().__init__(f"[{code}] {message}")


@dataclass(frozen=True)
class Handshake:
    protocol_version: int
    client_name: str


@dataclass(frozen=True)
class HandshakeAck:
    protocol_version: int


@dataclass(frozen=True)
class Run:
    run_id: str
    config: dict


@dataclass(frozen=True)
class SampleRequest:
    label: str
    dist: Distribution


@dataclass(frozen=True)
class SampleResponse:
    value: Value


@dataclass(frozen=True)
class Observe:
    label: str
    dist: Distribution
    value: Value


@dataclass(frozen=True)
class RunResult:
    outputs: dict


@dataclass(frozen=True)
class ErrorMessage:
    code: str
    message: str


WireMessage = Union[
    Handshake, HandshakeAck, Run, SampleRequest, SampleResponse, Observe, RunResult, ErrorMessage
]


def _payload(msg: WireMessage) -> dict:
    # Canonical field order per variant, type first.
    if isinstance(msg, Handshake):
        return {"type": "handshake", "protocol_version": msg.protocol_version,
                "client_name": msg.client_name}
    if isinstance(msg, HandshakeAck):
        return {"type": "handshake_ack", "protocol_version": msg.protocol_version}
    if isinstance(msg, Run):
        return {"type": "run", "run_id": msg.run_id, "config": msg.config}
    if isinstance(msg, SampleRequest):
        return {"type": "sample_request", "label": msg.label, "dist": dist_to_json(msg.dist)}
    if isinstance(msg, SampleResponse):
        return {"type": "sample_response", "value": value_to_json(msg.value)}
    if isinstance(msg, Observe):
        return {"type": "observe", "label": msg.label, "dist": dist_to_json(msg.dist),
                "value": value_to_json(msg.value)}
    if isinstance(msg, RunResult):
        return {"type": "run_result", "outputs": {k: value_to_json(v) for k, v in msg.outputs.items()}}
    if isinstance(msg, ErrorMessage):
        return {"type": "error", "code": msg.code, "message": msg.message}
    raise TypeError(f"not a wire message: {msg!r}")


def encode_message(msg: WireMessage) -> bytes:
    """Encode to a complete frame: little-endian u32 length + JSON payload."""
    payload = json.dumps(_payload(msg), separators=(",", ":"), allow_nan=False).encode("utf-8")
    if len(payload) > MAX_FRAME_BYTES:
        raise ProtocolError(ProtocolError.OVERSIZE_FRAME, f"payload of {len(payload)} bytes")
    return struct.pack("<I", len(payload)) + payload


def _field(obj: dict, name: str, kinds, type_name: str):
    if name not in obj:
        raise ProtocolError(ProtocolError.MISSING_FIELD, f"{type_name} missing field {name!r}")
    value = obj[name]
    if kinds is not None and (not isinstance(value, kinds) or isinstance(value, bool)):
        raise ProtocolError(ProtocolError.INVALID_FIELD, f"{type_name}.{name} has wrong type")
    return value


def _decode_dist(obj: dict, name: str, type_name: str) -> Distribution:
    raw = _field(obj, name, dict, type_name)
    try:
        return dist_from_json(raw)
    except ValueError as exc:
        raise ProtocolError(ProtocolError.INVALID_FIELD, f"{type_name}.{name}: {exc}") from exc


def _decode_value(obj: dict, name: str, type_name: str) -> Value:
    if name not in obj:
        raise ProtocolError(ProtocolError.MISSING_FIELD, f"{type_name} missing field {name!r}")
    try:
        return value_from_json(obj[name])
    except (ValueError, TypeError) as exc:
        raise ProtocolError(ProtocolError.INVALID_FIELD, f"{type_name}.{name}: {exc}") from exc


def _decode_payload(payload: bytes) -> WireMessage:
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ProtocolError(ProtocolError.INVALID_UTF8, str(exc)) from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProtocolError(ProtocolError.MALFORMED_JSON, str(exc)) from exc
    if not isinstance(obj, dict):
        raise ProtocolError(ProtocolError.MALFORMED_JSON, "payload is not a JSON object")
    msg_type = obj.get("type")
    if not isinstance(msg_type, str):
        raise ProtocolError(ProtocolError.MISSING_FIELD, "payload missing 'type'")

    if msg_type == "handshake":
        return Handshake(
            protocol_version=_field(obj, "protocol_version", int, msg_type),
            client_name=_field(obj, "client_name", str, msg_type),
        )
    if msg_type == "handshake_ack":
        return HandshakeAck(protocol_version=_field(obj, "protocol_version", int, msg_type))
    if msg_type == "run":
        return Run(
            run_id=_field(obj, "run_id", str, msg_type),
            config=_field(obj, "config", dict, msg_type),
        )
    if msg_type == "sample_request":
        return SampleRequest(
            label=_field(obj, "label", str, msg_type),
            dist=_decode_dist(obj, "dist", msg_type),
        )
    if msg_type == "sample_response":
        return SampleResponse(value=_decode_value(obj, "value", msg_type))
    if msg_type == "observe":
        return Observe(
            label=_field(obj, "label", str, msg_type),
            dist=_decode_dist(obj, "dist", msg_type),
            value=_decode_value(obj, "value", msg_type),
        )
    if msg_type == "run_result":
        outputs = _field(obj, "outputs", dict, msg_type)
        decoded = {}
        for key, raw in outputs.items():
            try:
                decoded[str(key)] = value_from_json(raw)
            except (ValueError, TypeError) as exc:
                raise ProtocolError(
                    ProtocolError.INVALID_FIELD, f"run_result.outputs[{key!r}]: {exc}"
                ) from exc
        return RunResult(outputs=decoded)
    if msg_type == "error":
        return ErrorMessage(
            code=_field(obj, "code", str, msg_type),
            message=_field(obj, "message", str, msg_type),
        )
    raise ProtocolError(ProtocolError.UNKNOWN_TYPE, f"unknown message type {msg_type!r}")


def decode_message(frame: bytes) -> WireMessage:
    """Decode one complete frame (length prefix included)."""
    if len(frame) < 4:
        raise ProtocolError(ProtocolError.TRUNCATED_FRAME, f"{len(frame)} bytes is shorter than a length prefix")
    (length,) = struct.unpack("<I", frame[:4])
    if length > MAX_FRAME_BYTES:
        raise ProtocolError(ProtocolError.OVERSIZE_FRAME, f"declared payload of {length} bytes")
    if len(frame) < 4 + length:
        raise ProtocolError(
            ProtocolError.TRUNCATED_FRAME,
            f"declared {length} payload bytes, {len(frame) - 4} available",
        )
    return _decode_payload(frame[4 : 4 + length])


# ---------------------------------------------------------------------------
# Socket transport
# ---------------------------------------------------------------------------

def send_message(sock: socket.socket, msg: WireMessage) -> None:
    try:
        sock.sendall(encode_message(msg))
    except OSError as exc:
        raise ProtocolError(ProtocolError.TRANSPORT, f"send failed: {exc}") from exc


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except socket.timeout as exc:
            raise ProtocolError(ProtocolError.TIMEOUT, "peer did not answer in time") from exc
        except OSError as exc:
            raise ProtocolError(ProtocolError.TRANSPORT, f"recv failed: {exc}") from exc
        if not chunk:
            raise ProtocolError(ProtocolError.TRANSPORT, "connection closed by peer")
        buf.extend(chunk)
    return bytes(buf)


def recv_message(sock: socket.socket, max_frame: int = MAX_FRAME_BYTES) -> WireMessage:
    header = _recv_exact(sock, 4)
    (length,) = struct.unpack("<I", header)
    if length > max_frame:
        raise ProtocolError(ProtocolError.OVERSIZE_FRAME, f"declared payload of {length} bytes")
    payload = _recv_exact(sock, length)
    return _decode_payload(payload)


# ---------------------------------------------------------------------------
# Controller (server side)
# ---------------------------------------------------------------------------

class BridgeController:
    """Serves one connected client's random draws and records its observes.

    The controller performs the handshake lazily on the first run and then
    executes any number of sequential runs over the same connection. Each
    run produces a Trace indistinguishable from a native model's, so the
    inference engines operate on bridged simulators unchanged.
    """

    def __init__(self, sock: socket.socket, timeout: float = DEFAULT_RUN_TIMEOUT,
                 max_frame: int = MAX_FRAME_BYTES):
        self.sock = sock
        self.timeout = timeout
        self.max_frame = max_frame
        self.client_name: Optional[str] = None
        self._handshaken = False
        self._run_counter = 0
        if timeout is not None:
            sock.settimeout(timeout)

    def handshake(self) -> None:
        msg = recv_message(self.sock, self.max_frame)
        if not isinstance(msg, Handshake):
            self._abort(ProtocolError.PROTOCOL_STATE, f"expected handshake, got {type(msg).__name__}")
        if msg.protocol_version != PROTOCOL_VERSION:
            self._abort(
                ProtocolError.VERSION_MISMATCH,
                f"client speaks version {msg.protocol_version}, controller speaks {PROTOCOL_VERSION}",
            )
        self.client_name = msg.client_name
        send_message(self.sock, HandshakeAck(PROTOCOL_VERSION))
        self._handshaken = True

    def execute(self, run_config: dict, mode: ExecutionMode, seed: int,
                run_id: Optional[str] = None) -> Trace:
        """Drive one run of the remote simulator and return its trace."""
        if not self._handshaken:
            self.handshake()
        self._run_counter += 1
        rid = run_id if run_id is not None else f"run-{self._run_counter}"
        send_message(self.sock, Run(run_id=rid, config=dict(run_config)))

        ctx = ExecutionContext(mode, seed)
        while True:
            try:
                msg = recv_message(self.sock, self.max_frame)
            except ProtocolError as exc:
                exc.addresses = ctx.addresses()
                raise
            if isinstance(msg, SampleRequest):
                value = ctx.sample(msg.label, msg.dist)
                send_message(self.sock, SampleResponse(value))
            elif isinstance(msg, Observe):
                ctx.observe(msg.label, msg.dist, msg.value)
            elif isinstance(msg, RunResult):
                return ctx.finish(msg.outputs)
            elif isinstance(msg, ErrorMessage):
                raise ProtocolError(
                    ProtocolError.CLIENT_ERROR,
                    f"client reported [{msg.code}] {msg.message}",
                    addresses=ctx.addresses(),
                )
            else:
                self._abort(
                    ProtocolError.PROTOCOL_STATE,
                    f"unexpected {type(msg).__name__} during a run",
                    addresses=ctx.addresses(),
                )

    def _abort(self, code: str, message: str, addresses=None):
        try:
            send_message(self.sock, ErrorMessage(code, message))
        except ProtocolError:
            pass
        raise ProtocolError(code, message, addresses=addresses)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class BridgedModel:
    """Model-interface adapter: each run() drives one protocol run."""

    def __init__(self, controller: BridgeController, run_config: dict):
        self.controller = controller
        self.run_config = dict(run_config)

    def run(self, mode: ExecutionMode, seed: int) -> Trace:
        return self.controller.execute(self.run_config, mode, seed)


# ---------------------------------------------------------------------------
# Client harness
# ---------------------------------------------------------------------------

class BridgeClient:
    """Client-side harness: handshake, then serve runs with a program callable.

    The program receives a context whose sample/observe calls travel over the
    wire, plus the Run config object; whatever mapping it returns becomes the
    RunResult outputs. Useful for in-process loopback tests and as a
    reference for client implementations in other languages.
    """

    def __init__(self, sock: socket.socket, client_name: str = "epi-infer-client"):
        self.sock = sock
        self.client_name = client_name

    def handshake(self) -> None:
        send_message(self.sock, Handshake(PROTOCOL_VERSION, self.client_name))
        ack = recv_message(self.sock)
        if not isinstance(ack, HandshakeAck):
            raise ProtocolError(
                ProtocolError.PROTOCOL_STATE, f"expected handshake_ack, got {type(ack).__name__}"
            )
        if ack.protocol_version != PROTOCOL_VERSION:
            raise ProtocolError(
                ProtocolError.VERSION_MISMATCH, f"controller speaks version {ack.protocol_version}"
            )

    def serve(self, program) -> int:
        """Serve runs until the controller closes the connection; returns the run count."""
        self.handshake()
        served = 0
        while True:
            try:
                msg = recv_message(self.sock)
            except ProtocolError as exc:
                if exc.code == ProtocolError.TRANSPORT:
                    return served  # controller hung up between runs: normal end
                raise
            if isinstance(msg, Run):
                ctx = ClientContext(self.sock)
                outputs = program(ctx, msg.config)
                send_message(self.sock, RunResult(dict(outputs or ctx.outputs)))
                served += 1
            elif isinstance(msg, ErrorMessage):
                raise ProtocolError(ProtocolError.CLIENT_ERROR, f"[{msg.code}] {msg.message}")
            else:
                send_message(
                    self.sock,
                    ErrorMessage(ProtocolError.PROTOCOL_STATE, f"unexpected {type(msg).__name__}"),
                )
                raise ProtocolError(
                    ProtocolError.PROTOCOL_STATE, f"unexpected {type(msg).__name__}"
                )


class ClientContext:
    """Execution-context lookalike whose draws are served by the controller."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.outputs: dict = {}

    def sample(self, label: str, dist: Distribution) -> Value:
        send_message(self.sock, SampleRequest(label, dist))
        reply = recv_message(self.sock)
        if isinstance(reply, ErrorMessage):
            raise ProtocolError(ProtocolError.CLIENT_ERROR, f"[{reply.code}] {reply.message}")
        if not isinstance(reply, SampleResponse):
            raise ProtocolError(
                ProtocolError.PROTOCOL_STATE,
                f"expected sample_response, got {type(reply).__name__}",
            )
        return reply.value

    def observe(self, label: str, dist: Distribution, value: Value) -> None:
        send_message(self.sock, Observe(label, dist, value))

    def set_output(self, name: str, value) -> None:
        self.outputs[str(name)] = value


def serve_sir_client(sock: socket.socket, client_name: str = "loopback-sir") -> int:
    """Serve the built-in SIR over a connection (in-process loopback client).

    Runs the native simulator body against a ClientContext, which proves the
    protocol transparent: every random draw and observation crosses the wire.
    """
    from .config import model_spec_from_json

    def program(ctx, config):
        spec = model_spec_from_json(config)
        return spec.execute(ctx)

    return BridgeClient(sock, client_name).serve(program)


def listen_and_accept(host: str, port: int, timeout: Optional[float] = None):
    """Listen on host:port, accept one client, and return (controller, listener)."""
    listener = socket.create_server((host, port))
    if timeout is not None:
        listener.settimeout(timeout)
    conn, _addr = listener.accept()
    return BridgeController(conn), listener
