import struct
import threading

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from splitbd.data import ImageBatch, load_dataset
from splitbd.errors import DimensionError, FormatError, ProtocolViolation, SessionError
from splitbd.nn import build_split_model, build_subnetwork, save_params
from splitbd.nn.layers import ReLU
from splitbd.protocol import (
    FRAME_MAGIC,
    MessageKind,
    MessageLog,
    ProtocolMessage,
    Session,
    SessionConfig,
    TrainingRecorder,
    batch_indices,
    decode_message,
    encode_message,
    inproc_pair,
    load_recorder,
    run_server_party,
    run_split_training,
    save_recorder,
    softmax_grad,
    tcp_pair,
)


def small_batch(n=64, seed=0, classes=10):
    rng = np.random.default_rng(seed)
    pixels = rng.random((n, 1, 28, 28), dtype=np.float32)
    labels = rng.integers(0, classes, size=n).astype(np.int64)
    return ImageBatch(pixels=pixels, labels=labels)


# ---------------------------------------------------------------------------
# frame layout


def test_mark_frame_bytes_hand_oracle():
    # size(4) | magic(4) | kind(1) | epoch(4) | batch(4) | rank(1) == 18 bytes
    frame = encode_message(ProtocolMessage(MessageKind.EPOCH_MARK, 1, 2, None))
    expected = struct.pack("<I", 14) + struct.pack("<IBIIB", 0x53564C31, 5, 1, 2, 0)
    assert expected == b"\x0e\x00\x00\x001LVS\x05\x01\x00\x00\x00\x02\x00\x00\x00\x00"
    assert frame == expected


def test_payload_frame_bytes_hand_oracle():
    frame = encode_message(
        ProtocolMessage(MessageKind.SMASHED_FORWARD, 0, 0, np.array([1.0], dtype=np.float32))
    )
    expected = (
        struct.pack("<I", 22)
        + struct.pack("<IBIIB", FRAME_MAGIC, 1, 0, 0, 1)
        + struct.pack("<I", 1)
        + struct.pack("<f", 1.0)
    )
    assert frame == expected
    assert frame.endswith(b"\x00\x00\x80?")  # 1.0f little-endian


def test_frame_size_arithmetic():
    payload = np.zeros((8, 16, 14, 14), dtype=np.float32)
    frame = encode_message(ProtocolMessage(MessageKind.SMASHED_FORWARD, 3, 7, payload))
    assert len(frame) == 4 + 14 + 4 * 4 + 4 * 8 * 16 * 14 * 14


@given(
    kind=st.sampled_from(list(MessageKind)),
    epoch=st.integers(0, 2**32 - 1),
    batch=st.integers(0, 2**32 - 1),
    shape=st.lists(st.integers(1, 5), min_size=1, max_size=4),
    seed=st.integers(0, 2**31),
)
@settings(max_examples=60, deadline=None)
def test_frame_roundtrip_exact(kind, epoch, batch, shape, seed):
    rng = np.random.default_rng(seed)
    payload = rng.standard_normal(shape).astype(np.float32)
    msg = decode_message(encode_message(ProtocolMessage(kind, epoch, batch, payload)))
    assert msg.kind == kind and msg.epoch == epoch and msg.batch == batch
    assert msg.payload.shape == tuple(shape)
    assert np.array_equal(msg.payload, payload)


def test_mark_roundtrip():
    msg = decode_message(encode_message(ProtocolMessage(MessageKind.END_SESSION, 9, 0, None)))
    assert msg.kind == MessageKind.END_SESSION and msg.payload is None


def test_decode_rejects_garbage():
    good = encode_message(ProtocolMessage(MessageKind.EPOCH_MARK, 0, 0, None))
    with pytest.raises(FormatError, match="size field"):
        decode_message(good[:-1])
    with pytest.raises(FormatError, match="shorter"):
        decode_message(b"\x01\x02")
    with pytest.raises(FormatError, match="magic"):
        decode_message(good[:4] + b"XXXX" + good[8:])
    bad_kind = struct.pack("<I", 14) + struct.pack("<IBIIB", FRAME_MAGIC, 9, 0, 0, 0)
    with pytest.raises(FormatError, match="unknown message kind"):
        decode_message(bad_kind)
    too_short = struct.pack("<I", 4) + good[4:8]
    with pytest.raises(FormatError, match="too short"):
        decode_message(too_short)


def test_decode_rejects_mark_with_payload():
    frame = encode_message(
        ProtocolMessage(MessageKind.SMASHED_FORWARD, 0, 0, np.ones(2, dtype=np.float32))
    )
    # rewrite rank to 0 without shrinking the frame
    broken = bytearray(frame)
    broken[17] = 0
    with pytest.raises(FormatError, match="unexpected payload"):
        decode_message(bytes(broken))


def test_decode_rejects_inconsistent_dims():
    frame = encode_message(
        ProtocolMessage(MessageKind.SMASHED_FORWARD, 0, 0, np.ones((2, 3), dtype=np.float32))
    )
    broken = bytearray(frame)
    struct.pack_into("<I", broken, 18, 4)  # claim dim0 == 4, payload still 2x3
    with pytest.raises(FormatError, match="inconsistent with dims"):
        decode_message(bytes(broken))
    # dims table runs off the end of the frame
    head = struct.pack("<I", 14 + 4) + struct.pack("<IBIIB", FRAME_MAGIC, 1, 0, 0, 3)
    with pytest.raises(FormatError, match="truncated inside dims"):
        decode_message(head + struct.pack("<I", 1))


# ---------------------------------------------------------------------------
# message log


def frames_for_log():
    return [
        encode_message(ProtocolMessage(MessageKind.SMASHED_FORWARD, 0, b, np.full(3, b, "f4")))
        for b in range(4)
    ] + [encode_message(ProtocolMessage(MessageKind.END_SESSION, 1, 0, None))]


def test_log_roundtrip_digest(tmp_path):
    log = MessageLog(mode="digest")
    for frame in frames_for_log():
        log.record(frame)
    assert len(log) == 5
    assert log.total_bytes() == sum(len(f) for f in frames_for_log())
    path = str(tmp_path / "m.bin")
    log.save(path)
    back = MessageLog.load(path)
    assert back.mode == "digest"
    assert back.entries == log.entries


def test_log_roundtrip_full(tmp_path):
    log = MessageLog(mode="full")
    for frame in frames_for_log():
        log.record(frame)
    path = str(tmp_path / "m.bin")
    log.save(path)
    back = MessageLog.load(path)
    assert [e.data for e in back.entries] == frames_for_log()


def test_log_rejects_corruption(tmp_path):
    log = MessageLog()
    for frame in frames_for_log():
        log.record(frame)
    path = str(tmp_path / "m.bin")
    log.save(path)
    raw = open(path, "rb").read()
    bad = str(tmp_path / "bad.bin")
    open(bad, "wb").write(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        MessageLog.load(bad)
    open(bad, "wb").write(raw[:-10])
    with pytest.raises(FormatError, match="truncated"):
        MessageLog.load(bad)
    open(bad, "wb").write(raw + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        MessageLog.load(bad)
    with pytest.raises(FormatError, match="mode"):
        MessageLog(mode="verbose")


# ---------------------------------------------------------------------------
# transports


def test_inproc_pair_delivery():
    a, b = inproc_pair()
    frame = encode_message(ProtocolMessage(MessageKind.EPOCH_MARK, 0, 0, None))
    a.send_frame(frame)
    assert b.recv_frame() == frame
    b.close()
    with pytest.raises(SessionError):
        b.send_frame(frame)
    with pytest.raises(SessionError, match="disconnected"):
        a.recv_frame()  # close() queued a poison pill for the peer


def test_tcp_preserves_order_10k():
    a, b = tcp_pair()
    count = 10_000

    def pump():
        for i in range(count):
            a.send_frame(encode_message(ProtocolMessage(MessageKind.EPOCH_MARK, 0, i, None)))

    t = threading.Thread(target=pump)
    t.start()
    seen = [decode_message(b.recv_frame()).batch for _ in range(count)]
    t.join()
    a.close()
    b.close()
    assert seen == list(range(count))


def test_session_refuses_traffic_after_end():
    a, b = inproc_pair()
    sa, sb = Session(a), Session(b)
    sa.send(ProtocolMessage(MessageKind.END_SESSION, 0, 0, None))
    with pytest.raises(SessionError, match="already ended"):
        sa.send(ProtocolMessage(MessageKind.EPOCH_MARK, 0, 0, None))
    assert sb.recv().kind == MessageKind.END_SESSION
    with pytest.raises(SessionError, match="already ended"):
        sb.recv()


# ---------------------------------------------------------------------------
# client-side helpers


def test_batch_indices_drops_trailing_singleton():
    rng = np.random.default_rng(0)
    sizes = [len(b) for b in batch_indices(129, 64, rng)]
    assert sizes == [64, 64]
    sizes = [len(b) for b in batch_indices(130, 64, rng)]
    assert sizes == [64, 64, 2]
    assert [len(b) for b in batch_indices(2, 64, rng)] == [2]
    assert batch_indices(1, 64, rng) == []


def test_batch_indices_is_a_permutation():
    rng = np.random.default_rng(3)
    batches = batch_indices(130, 64, rng)
    assert sorted(np.concatenate(batches).tolist()) == list(range(130))


def test_softmax_grad_matches_autograd():
    torch.manual_seed(0)
    logits = torch.randn(16, 10, dtype=torch.float64)
    labels = torch.randint(0, 10, (16,))
    grad, loss = softmax_grad(logits, labels)
    leaf = logits.clone().requires_grad_(True)
    ref = torch.nn.functional.cross_entropy(leaf, labels)
    ref.backward()
    assert abs(loss - float(ref.detach())) < 1e-9
    assert torch.allclose(grad, leaf.grad, atol=1e-12)


# ---------------------------------------------------------------------------
# server party state machine


def scripted_server(preloaded, server=None, epochs=2):
    """Feed pre-encoded frames to a server party and return its exception."""
    server_end, client_end = inproc_pair()
    for msg in preloaded:
        client_end.send_frame(encode_message(msg))
    if server is None:
        server = build_subnetwork([ReLU()], (2, 4, 4), seed=0)
    cfg = SessionConfig(epochs=epochs)
    return server_end, client_end, server, cfg


def smashed(epoch, batch, value=0.5):
    return ProtocolMessage(
        MessageKind.SMASHED_FORWARD, epoch, batch, np.full((2, 2, 4, 4), value, "f4")
    )


def test_server_rejects_gradient_without_forward():
    end, _, server, cfg = scripted_server(
        [ProtocolMessage(MessageKind.GRAD_TO_SERVER, 0, 0, np.ones((2, 2, 4, 4), "f4"))]
    )
    with pytest.raises(ProtocolViolation, match="no forward in flight"):
        run_server_party(Session(end), server, cfg)


def test_server_rejects_second_forward_mid_step():
    end, _, server, cfg = scripted_server([smashed(0, 0), smashed(0, 1)])
    with pytest.raises(ProtocolViolation, match="before previous gradient"):
        run_server_party(Session(end), server, cfg)


def test_server_rejects_epoch_mark_mid_step():
    end, _, server, cfg = scripted_server(
        [smashed(0, 0), ProtocolMessage(MessageKind.EPOCH_MARK, 0, 1, None)]
    )
    with pytest.raises(ProtocolViolation, match="step in flight"):
        run_server_party(Session(end), server, cfg)


def test_server_rejects_end_mid_step():
    end, _, server, cfg = scripted_server(
        [smashed(0, 0), ProtocolMessage(MessageKind.END_SESSION, 0, 0, None)]
    )
    with pytest.raises(ProtocolViolation, match="ended with a step in flight"):
        run_server_party(Session(end), server, cfg)


def test_server_rejects_wrong_batch_and_epoch_numbers():
    end, _, server, cfg = scripted_server([smashed(0, 5)])
    with pytest.raises(ProtocolViolation, match="batch"):
        run_server_party(Session(end), server, cfg)
    end, _, server, cfg = scripted_server([smashed(3, 0)])
    with pytest.raises(ProtocolViolation, match="epoch"):
        run_server_party(Session(end), server, cfg)


def test_server_rejects_server_only_kinds():
    end, _, server, cfg = scripted_server(
        [ProtocolMessage(MessageKind.SERVER_FORWARD, 0, 0, np.ones((1, 2, 4, 4), "f4"))]
    )
    with pytest.raises(ProtocolViolation, match="server-only"):
        run_server_party(Session(end), server, cfg)


# ---------------------------------------------------------------------------
# full sessions


def test_split_training_loss_decreases(tiny_root):
    data = load_dataset("digits28", tiny_root)
    train = data.train.subset(np.arange(256))
    model = build_split_model("smallcnn", (2, 3, 1), 10, seed=5)
    cfg = SessionConfig(epochs=2, batch_size=64, seed=5)
    _, recorder, log, tl = run_split_training(model, train, cfg, server_role="honest")
    assert recorder is None
    assert len(tl.epoch_loss) == 2
    assert tl.epoch_loss[-1] < tl.epoch_loss[0]
    # 4 frames per batch, one epoch mark per epoch, one end-of-session
    batches = 256 // 64
    assert len(log) == 2 * (4 * batches + 1) + 1


def test_malicious_session_indistinguishable_and_records(tiny_root):
    data = load_dataset("digits28", tiny_root)
    train = data.train.subset(np.arange(192))
    cfg = SessionConfig(epochs=2, batch_size=64, seed=9)
    m1 = build_split_model("smallcnn", (2, 3, 1), 10, seed=9)
    _, rec, log_bad, _ = run_split_training(m1, train, cfg, server_role="malicious")
    m2 = build_split_model("smallcnn", (2, 3, 1), 10, seed=9)
    _, none_rec, log_good, _ = run_split_training(m2, train, cfg, server_role="honest")
    assert none_rec is None
    assert [e.digest for e in log_bad.entries] == [e.digest for e in log_good.entries]
    # the recorder holds exactly the final epoch's smashed batches ...
    assert len(rec.smashed) == 192 // 64
    assert all(arr.shape == (64, 16, 14, 14) for arr in rec.smashed)
    # ... and outputs consistent with the final server applied to them
    assert len(rec.outputs) == len(rec.smashed)
    for e, o in zip(rec.smashed, rec.outputs):
        ref = m1.server.infer(torch.from_numpy(e)).numpy()
        assert np.array_equal(ref, o)


def test_transport_choice_does_not_change_training(tiny_root):
    data = load_dataset("digits28", tiny_root)
    train = data.train.subset(np.arange(128))
    blobs = {}
    for transport in ("inproc", "tcp"):
        model = build_split_model("smallcnn", (2, 3, 1), 10, seed=4)
        cfg = SessionConfig(epochs=1, batch_size=64, seed=4, transport=transport)
        run_split_training(model, train, cfg)
        blobs[transport] = (
            save_params(model.client) + save_params(model.server) + save_params(model.last)
        )
    assert blobs["inproc"] == blobs["tcp"]


def test_split_training_rejects_unknown_role_and_transport():
    model = build_split_model("smallcnn", (2, 3, 1), 10, seed=0)
    train = small_batch(4)
    with pytest.raises(SessionError, match="role"):
        run_split_training(model, train, SessionConfig(epochs=1), server_role="curious")
    with pytest.raises(SessionError, match="transport"):
        run_split_training(model, train, SessionConfig(epochs=1, transport="carrier-pigeon"))


# ---------------------------------------------------------------------------
# recorder serialization


def test_recorder_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(1)
    rec = TrainingRecorder()
    for _ in range(3):
        rec.smashed.append(rng.standard_normal((4, 2, 3, 3)).astype(np.float32))
        rec.outputs.append(rng.standard_normal((4, 10)).astype(np.float32))
    path = str(tmp_path / "rec.bin")
    save_recorder(rec, path)
    back = load_recorder(path)
    assert len(back.smashed) == 3
    for a, b in zip(rec.smashed + rec.outputs, back.smashed + back.outputs):
        assert a.shape == b.shape and np.array_equal(a, b)


def test_recorder_save_requires_filled_outputs(tmp_path):
    rec = TrainingRecorder(smashed=[np.zeros((2, 2), "f4")], outputs=[])
    with pytest.raises(DimensionError, match="output batches"):
        save_recorder(rec, str(tmp_path / "rec.bin"))


def test_recorder_load_rejects_corruption(tmp_path):
    rec = TrainingRecorder(
        smashed=[np.ones((2, 3), "f4")], outputs=[np.zeros((2, 4), "f4")]
    )
    path = str(tmp_path / "rec.bin")
    save_recorder(rec, path)
    raw = open(path, "rb").read()
    bad = str(tmp_path / "bad.bin")
    open(bad, "wb").write(b"ZZZZ" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        load_recorder(bad)
    open(bad, "wb").write(raw[:-6])
    with pytest.raises(FormatError, match="truncated"):
        load_recorder(bad)
