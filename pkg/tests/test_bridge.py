"""Wire codec, protocol state machine, and controller/client loopback."""

import socket
import struct
import threading
import time

import numpy as np
import pytest

from epi_infer.bridge import (
    MAX_FRAME_BYTES,
    PROTOCOL_VERSION,
    BridgeController,
    BridgedModel,
    ErrorMessage,
    Handshake,
    HandshakeAck,
    Observe,
    ProtocolError,
    Run,
    RunResult,
    SampleRequest,
    SampleResponse,
    decode_message,
    encode_message,
    recv_message,
    send_message,
    serve_sir_client,
)
from epi_infer.config import model_spec_from_json
from epi_infer.distributions import Bernoulli, Binomial, Categorical, Poisson, Uniform
from epi_infer.inference import run_is, run_lmh
from epi_infer.trace import Record

RUN_CONFIG = {
    "model": "sir",
    "population": 200,
    "initial_infected": 5,
    "horizon_days": 25,
    "dt": 1.0,
    "priors": {
        "beta": {"family": "uniform", "params": {"low": 0.05, "high": 1.0}},
        "gamma": {"family": "uniform", "params": {"low": 0.05, "high": 0.5}},
    },
    "policy": {"start_day": 0, "contact_reduction": 0.0, "vaccination_coverage": 0.0},
    "icu": {"rho": 0.05},
    "data": [{"day": 5, "count": 3}, {"day": 10, "count": 8}],
}

ALL_MESSAGES = [
    Handshake(1, "simulator-x"),
    HandshakeAck(1),
    Run("run-1", {"model": "sir", "nested": {"a": [1, 2.5, True]}}),
    SampleRequest("beta", Uniform(0.05, 1.0)),
    SampleRequest("n", Binomial(10, 0.25)),
    SampleRequest("cat", Categorical((0.2, 0.3, 0.5))),
    SampleResponse(0.5),
    SampleResponse(2),
    SampleResponse(2.0),
    SampleResponse(True),
    SampleResponse((1.0, 2.5, -3.75)),
    SampleResponse(1e308),
    SampleResponse(5e-324),
    Observe("obs", Poisson(2.0), 2),
    Observe("flag", Bernoulli(0.5), False),
    RunResult({"total_cases": 12, "peak_day": 3, "series": (0.0, 1.0)}),
    RunResult({}),
    ErrorMessage("sim_failure", "numerical blowup at t=3"),
]


@pytest.mark.parametrize("msg", ALL_MESSAGES, ids=lambda m: type(m).__name__)
def test_codec_round_trip_identity(msg):
    assert decode_message(encode_message(msg)) == msg


def test_codec_preserves_integer_real_distinction():
    assert isinstance(decode_message(encode_message(SampleResponse(2))).value, int)
    decoded = decode_message(encode_message(SampleResponse(2.0))).value
    assert isinstance(decoded, float) and not isinstance(decoded, bool)
    assert decode_message(encode_message(SampleResponse(True))).value is True


def test_encode_layout_matches_specified_framing():
    frame = encode_message(SampleResponse(0.5))
    (length,) = struct.unpack("<I", frame[:4])
    assert frame[4:] == b'{"type":"sample_response","value":0.5}'
    assert length == len(frame) - 4

    frame = encode_message(HandshakeAck(1))
    assert frame[4:] == b'{"type":"handshake_ack","protocol_version":1}'


@pytest.mark.parametrize(
    "frame,code",
    [
        (b"\x05\x00\x00\x00{}", ProtocolError.TRUNCATED_FRAME),
        (b"\x01\x00", ProtocolError.TRUNCATED_FRAME),
        (struct.pack("<I", MAX_FRAME_BYTES + 1) + b"x", ProtocolError.OVERSIZE_FRAME),
        (struct.pack("<I", 2) + b"\xff\xfe", ProtocolError.INVALID_UTF8),
        (struct.pack("<I", 4) + b"nope", ProtocolError.MALFORMED_JSON),
        (struct.pack("<I", 4) + b'"hi"', ProtocolError.MALFORMED_JSON),
        (struct.pack("<I", 21) + b'{"type":"warp_drive"}', ProtocolError.UNKNOWN_TYPE),
        (struct.pack("<I", 18) + b'{"type":"observe"}', ProtocolError.MISSING_FIELD),
        (struct.pack("<I", 2) + b"{}", ProtocolError.MISSING_FIELD),
    ],
)
def test_decode_error_codes(frame, code):
    with pytest.raises(ProtocolError) as err:
        decode_message(frame)
    assert err.value.code == code


def test_decode_observe_schema_instance():
    payload = (
        b'{"type":"observe","label":"obs",'
        b'"dist":{"family":"poisson","params":{"rate":2.0}},"value":2}'
    )
    msg = decode_message(struct.pack("<I", len(payload)) + payload)
    assert msg == Observe("obs", Poisson(2.0), 2)


def test_decode_ignores_unknown_extra_fields():
    payload = b'{"type":"handshake_ack","protocol_version":1,"future_field":[1,2]}'
    assert decode_message(struct.pack("<I", len(payload)) + payload) == HandshakeAck(1)


def test_fuzz_random_frames_never_crash():
    rng = np.random.default_rng(123)
    outcomes = {"error": 0, "ok": 0}
    for _ in range(2000):
        kind = rng.integers(0, 3)
        if kind == 0:
            blob = rng.bytes(int(rng.integers(0, 64)))
        elif kind == 1:
            payload = rng.bytes(int(rng.integers(0, 48)))
            blob = struct.pack("<I", len(payload)) + payload
        else:
            payload = b'{"type":' + rng.bytes(int(rng.integers(0, 24)))
            blob = struct.pack("<I", len(payload)) + payload
        try:
            decode_message(blob)
            outcomes["ok"] += 1
        except ProtocolError:
            outcomes["error"] += 1
    assert outcomes["error"] + outcomes["ok"] == 2000


def _loopback():
    server_sock, client_sock = socket.socketpair()
    thread = threading.Thread(target=_client_main, args=(client_sock,), daemon=True)
    thread.start()
    return BridgeController(server_sock, timeout=30.0), thread


def _client_main(sock):
    try:
        serve_sir_client(sock)
    except ProtocolError:
        pass
    finally:
        sock.close()


def test_loopback_bridged_trace_equals_native_trace():
    controller, thread = _loopback()
    try:
        bridged = controller.execute(RUN_CONFIG, Record(), 321)
    finally:
        controller.close()
    thread.join(timeout=5)

    native = model_spec_from_json(RUN_CONFIG).build_model().run(Record(), 321)
    assert bridged == native  # addresses, dists, values, outputs, accumulators


def test_loopback_sequential_runs_reuse_connection():
    controller, thread = _loopback()
    try:
        first = controller.execute(RUN_CONFIG, Record(), 1)
        second = controller.execute(RUN_CONFIG, Record(), 2)
    finally:
        controller.close()
    thread.join(timeout=5)
    assert first.seed == 1 and second.seed == 2
    assert first != second


def test_loopback_inference_engines_are_transparent():
    controller, thread = _loopback()
    try:
        model = BridgedModel(controller, RUN_CONFIG)
        bridged_is = run_is(model, 40, 99)
        bridged_lmh = run_lmh(model, 60, 10, 7)
    finally:
        controller.close()
    thread.join(timeout=5)

    native = model_spec_from_json(RUN_CONFIG).build_model()
    assert bridged_is == run_is(native, 40, 99)
    assert bridged_lmh == run_lmh(native, 60, 10, 7)


def test_empty_client_run_yields_empty_trace():
    server_sock, client_sock = socket.socketpair()

    def immediate_result(sock):
        send_message(sock, Handshake(PROTOCOL_VERSION, "noop"))
        recv_message(sock)  # ack
        recv_message(sock)  # run
        send_message(sock, RunResult({}))
        sock.close()

    thread = threading.Thread(target=immediate_result, args=(client_sock,), daemon=True)
    thread.start()
    controller = BridgeController(server_sock, timeout=5.0)
    trace = controller.execute({}, Record(), 4)
    controller.close()
    thread.join(timeout=5)
    assert trace.entries == ()
    assert trace.log_joint == 0.0


def test_single_degenerate_sample_request():
    server_sock, client_sock = socket.socketpair()

    def one_draw(sock):
        send_message(sock, Handshake(PROTOCOL_VERSION, "one-draw"))
        recv_message(sock)
        recv_message(sock)
        send_message(sock, SampleRequest("beta", Bernoulli(1.0)))
        reply = recv_message(sock)
        assert reply == SampleResponse(True)
        send_message(sock, RunResult({}))
        sock.close()

    thread = threading.Thread(target=one_draw, args=(client_sock,), daemon=True)
    thread.start()
    controller = BridgeController(server_sock, timeout=5.0)
    trace = controller.execute({}, Record(), 4)
    controller.close()
    thread.join(timeout=5)
    assert len(trace.entries) == 1
    assert trace.entries[0].value is True
    assert trace.entries[0].log_prob == 0.0


def test_out_of_order_message_is_a_protocol_state_error():
    server_sock, client_sock = socket.socketpair()
    client_sock.sendall(encode_message(SampleRequest("x", Bernoulli(0.5))))
    controller = BridgeController(server_sock, timeout=2.0)
    with pytest.raises(ProtocolError) as err:
        controller.handshake()
    assert err.value.code == ProtocolError.PROTOCOL_STATE
    assert recv_message(client_sock).code == ProtocolError.PROTOCOL_STATE
    client_sock.close()


def test_handshake_version_mismatch():
    server_sock, client_sock = socket.socketpair()
    client_sock.sendall(encode_message(Handshake(2, "from-the-future")))
    controller = BridgeController(server_sock, timeout=2.0)
    with pytest.raises(ProtocolError) as err:
        controller.handshake()
    assert err.value.code == ProtocolError.VERSION_MISMATCH
    assert recv_message(client_sock).code == ProtocolError.VERSION_MISMATCH
    client_sock.close()


def test_client_error_aborts_run_with_client_code():
    server_sock, client_sock = socket.socketpair()

    def failing(sock):
        send_message(sock, Handshake(PROTOCOL_VERSION, "failing"))
        recv_message(sock)
        recv_message(sock)
        send_message(sock, ErrorMessage("sim_failure", "NaN in step 3"))
        sock.close()

    thread = threading.Thread(target=failing, args=(client_sock,), daemon=True)
    thread.start()
    controller = BridgeController(server_sock, timeout=5.0)
    with pytest.raises(ProtocolError) as err:
        controller.execute({}, Record(), 1)
    assert err.value.code == ProtocolError.CLIENT_ERROR
    assert "sim_failure" in str(err.value)
    thread.join(timeout=5)


def test_disconnect_mid_run_reports_partial_addresses():
    server_sock, client_sock = socket.socketpair()

    def vanishing(sock):
        send_message(sock, Handshake(PROTOCOL_VERSION, "vanishing"))
        recv_message(sock)
        recv_message(sock)
        send_message(sock, SampleRequest("beta", Uniform(0.0, 1.0)))
        recv_message(sock)
        sock.close()  # drop mid-run

    thread = threading.Thread(target=vanishing, args=(client_sock,), daemon=True)
    thread.start()
    controller = BridgeController(server_sock, timeout=5.0)
    with pytest.raises(ProtocolError) as err:
        controller.execute({}, Record(), 1)
    assert err.value.code == ProtocolError.TRANSPORT
    assert [a.label for a in err.value.addresses] == ["beta"]
    thread.join(timeout=5)


def test_run_timeout():
    server_sock, client_sock = socket.socketpair()

    def sleepy(sock):
        send_message(sock, Handshake(PROTOCOL_VERSION, "sleepy"))
        recv_message(sock)
        recv_message(sock)
        time.sleep(1.0)
        sock.close()

    thread = threading.Thread(target=sleepy, args=(client_sock,), daemon=True)
    thread.start()
    controller = BridgeController(server_sock, timeout=0.25)
    with pytest.raises(ProtocolError) as err:
        controller.execute({}, Record(), 1)
    assert err.value.code == ProtocolError.TIMEOUT
    thread.join(timeout=5)


def test_oversize_outgoing_frame_rejected():
    huge = Run("r", {"blob": "x" * (MAX_FRAME_BYTES + 10)})
    with pytest.raises(ProtocolError) as err:
        encode_message(huge)
    assert err.value.code == ProtocolError.OVERSIZE_FRAME
