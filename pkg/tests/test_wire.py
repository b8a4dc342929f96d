import struct
import threading

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from splitleak import models as M
from splitleak import wire as W
from splitleak.errors import (
    BadMagic,
    ChecksumMismatch,
    FrameError,
    InconsistentDim,
    ProtocolError,
    TrailingBytes,
    Truncated,
    UnknownType,
    UnsupportedVersion,
)

frames = st.builds(
    W.Frame,
    st.sampled_from(list(W.MsgType)),
    st.integers(0, 2**32 - 1),
    st.binary(max_size=64),
)


@settings(max_examples=200)
@given(frames)
def test_frame_roundtrip(frame):
    raw = W.encode_frame(frame)
    assert len(raw) == 14 + len(frame.payload)
    assert W.decode_frame(raw) == frame


def test_feature_frame_layout():
    raw = W.encode_frame(W.Frame(W.MsgType.FEATURE, 7, W.pack_f32([1.0])))
    assert raw == b"SLKF" + bytes([1, 2]) + struct.pack("<II", 7, 4) + struct.pack("<f", 1.0)
    assert W.decode_frame(raw).payload == b"\x00\x00\x80\x3f"


def test_decode_errors():
    good = W.encode_frame(W.Frame(W.MsgType.ACK, 1, b"abc"))
    with pytest.raises(BadMagic):
        W.decode_frame(b"XXXX" + good[4:])
    with pytest.raises(UnsupportedVersion):
        W.decode_frame(good[:4] + b"\x02" + good[5:])
    with pytest.raises(UnknownType):
        W.decode_frame(good[:5] + b"\x09" + good[6:])
    with pytest.raises(Truncated):
        W.decode_frame(good[:-1])
    with pytest.raises(Truncated):
        W.decode_frame(good[:10])
    with pytest.raises(TrailingBytes):
        W.decode_frame(good + b"\x00")


def test_fuzz_random_bytes_never_crash():
    rng = np.random.default_rng(0)
    valid = W.encode_frame(W.Frame(W.MsgType.FEATURE, 3, bytes(16)))
    outcomes = {"frame": 0, "error": 0}
    for i in range(1000):
        if i % 2:
            raw = rng.bytes(int(rng.integers(0, 40)))
        else:  # mutate a valid frame so the header checks are exercised too
            buf = bytearray(valid)
            for _ in range(int(rng.integers(1, 4))):
                buf[int(rng.integers(0, len(buf)))] = int(rng.integers(0, 256))
            raw = bytes(buf[: int(rng.integers(0, len(buf) + 1))])
        try:
            W.decode_frame(raw)
            outcomes["frame"] += 1
        except FrameError:
            outcomes["error"] += 1
    assert sum(outcomes.values()) == 1000 and outcomes["error"] > 0


@settings(max_examples=50)
@given(st.lists(frames, min_size=1, max_size=6), st.integers(1, 7))
def test_reader_handles_arbitrary_chunking(fs, chunk):
    raw = b"".join(W.encode_frame(f) for f in fs)
    reader = W.FrameReader()
    got = []
    for i in range(0, len(raw), chunk):
        got += reader.feed(raw[i : i + chunk])
    assert got == fs and reader.pending == 0


# ---------------------------------------------------------------- deployment


@pytest.fixture(scope="module")
def target():
    model = M.build_model(M.preset("tinyvgg16"), seed=2)
    return model, M.split_at(model, model.spec.block_split(2))


def _client(split, mode="score", sniffer=None):
    dep = W.SimulatedDeployment(split, (3, 16, 16), mode)
    if sniffer is not None:
        dep.attach(sniffer)
    return W.Client(dep.open(), (3, 16, 16), mode)


def test_zero_input_feature_payload_is_inprocess_edge(target):
    model, split = target
    sn = W.Sniffer()
    _client(split, sniffer=sn).infer(torch.zeros(3, 16, 16))
    with torch.no_grad():
        ref = M.flatten_features(split.edge(torch.zeros(1, 3, 16, 16))).numpy().astype("<f4").tobytes()
    assert sn.matrix().tobytes() == ref


def test_feature_payload_has_no_shape_fields(target):
    _, split = target
    sn = W.Sniffer()
    dep = W.SimulatedDeployment(split, (3, 16, 16))
    seen = []
    dep.attach(type("Tap", (), {"observe": lambda self, b: seen.append(b)})())
    W.Client(dep.open(), (3, 16, 16)).infer(torch.rand(3, 16, 16))
    feature = [W.decode_frame(b) for b in seen if W.decode_frame(b).msg_type == W.MsgType.FEATURE][0]
    assert len(feature.payload) == 4 * 32 * 4 * 4


def test_score_and_hard_replies(target):
    model, split = target
    score, hard = _client(split, "score"), _client(split, "hard")
    g = torch.Generator().manual_seed(3)
    for _ in range(5):
        x = torch.rand(3, 16, 16, generator=g)
        p = score.infer(x)
        assert abs(float(p.sum()) - 1) < 1e-5
        assert hard.infer(x) == int(np.argmax(p))


def test_none_mode_returns_nothing(target):
    _, split = target
    assert _client(split, "none").infer(torch.rand(3, 16, 16)) is None


def test_networked_equals_inprocess_bitwise(target):
    model, split = target
    client = _client(split)
    x = torch.rand(20, 3, 16, 16, generator=torch.Generator().manual_seed(4))
    for i in range(20):
        with torch.no_grad():
            ref = torch.softmax(model(x[i : i + 1]), 1)[0].numpy()
        assert client.infer(x[i]).tobytes() == ref.tobytes()
    assert client.queries == 20


def test_stream_of_100_and_capture_count(target):
    _, split = target
    sn = W.Sniffer()
    client = _client(split, sniffer=sn)
    x = torch.rand(100, 3, 16, 16, generator=torch.Generator().manual_seed(5))
    for i in range(100):
        client.infer(x[i])
    assert sn.matrix().shape == (100, 512) and sn.d == 512
    with torch.no_grad():
        ref = split.edge(x[37:38]).reshape(-1).numpy()
    assert np.array_equal(sn.matrix()[37], ref)


def test_sniffer_passivity(target):
    _, split = target
    x = torch.rand(10, 3, 16, 16, generator=torch.Generator().manual_seed(6))
    plain, tapped = _client(split), _client(split, sniffer=W.Sniffer())
    for i in range(10):
        assert plain.infer(x[i]).tobytes() == tapped.infer(x[i]).tobytes()


def test_sniffer_ignores_non_feature_frames():
    sn = W.Sniffer()
    sn.observe(W.encode_frame(W.Frame(W.MsgType.INPUT, 1, bytes(8))))
    sn.observe(W.encode_frame(W.Frame(W.MsgType.OUTPUT_SCORE, 1, bytes(8))))
    assert sn.n == 0 and sn.matrix().shape[0] == 0


def test_sniffer_inconsistent_dim():
    sn = W.Sniffer()
    sn.observe(W.encode_frame(W.Frame(W.MsgType.FEATURE, 1, bytes(8))))
    with pytest.raises(InconsistentDim):
        sn.observe(W.encode_frame(W.Frame(W.MsgType.FEATURE, 1, bytes(12))))


def test_wrong_input_length_keeps_session(target):
    _, split = target
    dep = W.SimulatedDeployment(split, (3, 16, 16))
    client = W.Client(dep.open(), (3, 16, 16))
    reply = W.decode_frame(client.transport.exchange(W.encode_frame(W.Frame(W.MsgType.INPUT, client.session_id, bytes(12)))))
    assert reply.msg_type == W.MsgType.ERROR and W.parse_error(reply)[0] == W.ERR_LENGTH
    assert client.infer(torch.zeros(3, 16, 16)) is not None


def test_cloud_rejects_wrong_feature_length(target):
    _, split = target
    cfg = W.SessionConfig(W.OutputMode.SCORE, (3, 16, 16), split.feature_shape)
    cloud = W.CloudSession(split.cloud, cfg)
    cloud.handle(W.encode_frame(W.Frame(W.MsgType.SESSION_HELLO, 9, W.pack_shape((3, 16, 16)))))
    reply, close = cloud.handle(W.encode_frame(W.Frame(W.MsgType.FEATURE, 9, bytes(4))))
    assert W.decode_frame(reply).msg_type == W.MsgType.ERROR and not close


def test_client_shape_check(target):
    _, split = target
    with pytest.raises(ProtocolError):
        _client(split).infer(torch.zeros(3, 8, 8))


def test_capture_file_roundtrip(tmp_path):
    rows = np.random.default_rng(0).normal(size=(5, 7)).astype(np.float32)
    W.write_capture(tmp_path / "c.slkx", rows)
    assert np.array_equal(W.read_capture(tmp_path / "c.slkx"), rows)
    raw = bytearray((tmp_path / "c.slkx").read_bytes())
    assert raw[:4] == b"SLKX" and len(raw) == 14 + 4 * 35 + 4
    raw[20] ^= 1
    with pytest.raises(ChecksumMismatch):
        W.decode_capture(bytes(raw))
    with pytest.raises(Truncated):
        W.decode_capture(bytes(raw[:-5]))


def test_socket_deployment_with_tap(target):
    """Client -> edge -> tap proxy -> cloud over real TCP sockets."""
    model, split = target
    cfg = W.SessionConfig(W.OutputMode.SCORE, (3, 16, 16), split.feature_shape)
    cloud = W.cloud_server(split.cloud, cfg, "127.0.0.1:0")
    sn = W.Sniffer()
    tap = W.TapProxy("127.0.0.1:0", "127.0.0.1:%d" % cloud.server_address[1], sn)
    edge = W.edge_server(split.edge, (3, 16, 16), "127.0.0.1:0", "127.0.0.1:%d" % tap.address[1])
    threads = [threading.Thread(target=s.serve_forever, daemon=True) for s in (cloud, tap, edge)]
    for t in threads:
        t.start()
    try:
        client = W.Client(W.SocketTransport("127.0.0.1:%d" % edge.server_address[1]), (3, 16, 16))
        x = torch.rand(8, 3, 16, 16, generator=torch.Generator().manual_seed(7))
        for i in range(8):
            with torch.no_grad():
                ref = torch.softmax(model(x[i : i + 1]), 1)[0].numpy()
            assert client.infer(x[i]).tobytes() == ref.tobytes()
        client.close()
        assert sn.n == 8 and sn.d == 512
    finally:
        for s in (cloud, edge):
            s.shutdown()
            s.server_close()
        tap.shutdown()
