import io
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from maser import mkhe
from maser.errors import Abort, FormatError
from maser.model import Architecture, ModelParams
from maser.protocol import messages as wire
from maser.protocol.messages import FRAME_OVERHEAD, Kind, Message, decode_frame, encode_frame, read_frame
from maser.protocol.transport import Hub, ServerEndpoint, SimChannel, TcpChannel, TcpHubServer
from maser.sparsify import Mask

DIGEST = b"\x11" * 32


@given(st.sampled_from(list(Kind)), st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1), st.binary(max_size=512))
def test_frame_round_trip(kind, rnd, sender, payload):
    msg = Message(kind, rnd, sender, payload)
    frame = encode_frame(msg)
    assert len(frame) == FRAME_OVERHEAD + len(payload)
    decoded, used = decode_frame(frame)
    assert decoded == msg and used == len(frame)
    assert read_frame(io.BytesIO(frame)) == msg


def test_frame_layout():
    frame = encode_frame(Message(Kind.LOCAL_MASK, 3, 2, b"xy"))
    assert frame == (11).to_bytes(4, "little") + bytes([4]) + (3).to_bytes(4, "little") + (2).to_bytes(4, "little") + b"xy"


def test_truncated_frames_surface_nothing():
    frame = encode_frame(Message(Kind.GLOBAL_MASK, 1, 0, b"payload"))
    for cut in range(len(frame)):
        with pytest.raises(FormatError):
            decode_frame(frame[:cut])
        assert decode_frame(frame[:cut], final=False) == (None, 0)
        if cut:
            with pytest.raises(FormatError):
                read_frame(io.BytesIO(frame[:cut]))
    assert read_frame(io.BytesIO(b"")) is None


def test_oversize_and_unknown_kind():
    frame = encode_frame(Message(Kind.ABORT, 0, 0, b"x" * 100))
    with pytest.raises(FormatError, match="exceeds"):
        decode_frame(frame, max_frame=50)
    with pytest.raises(FormatError, match="exceeds"):
        read_frame(io.BytesIO(frame), max_frame=50)
    bad = bytearray(encode_frame(Message(Kind.ABORT, 0, 0, b"")))
    bad[4] = 200
    with pytest.raises(FormatError, match="unknown"):
        decode_frame(bytes(bad))
    with pytest.raises(FormatError):
        decode_frame((4).to_bytes(4, "little") + b"\0" * 4)


def test_stream_of_frames():
    msgs = [Message(Kind.LOCAL_MASK, i, i % 3, bytes([i]) * i) for i in range(10)]
    stream = io.BytesIO(b"".join(encode_frame(m) for m in msgs))
    out = []
    while (m := read_frame(stream)) is not None:
        out.append(m)
    assert out == msgs


# ---------------------------------------------------------------- payloads


def test_payload_round_trips():
    ref = mkhe.setup(16, seed=1)
    rng = np.random.default_rng(0)
    sk, share = mkhe.keygen(ref, 0, rng)
    pk = mkhe.aggregate_pk([share])
    cts = [mkhe.encrypt(rng.uniform(-1, 1, 8), pk, ref, rng) for _ in range(3)]
    parts = [mkhe.partial_dec(c, sk, rng) for c in cts]
    model = ModelParams.from_flat(Architecture((3, 2, 2)), rng.normal(size=14))
    mask = Mask(rng.integers(0, 2, 14), 5)

    assert wire.unpack_hello(wire.pack_hello(DIGEST)) == (wire.PROTOCOL_VERSION, DIGEST)
    assert wire.unpack_model(wire.pack_model(model)) == model
    assert wire.unpack_mask(wire.pack_mask(mask)) == mask
    assert wire.unpack_enc_slices(wire.pack_enc_slices(pk.digest(), mask.digest(), cts), ref.params) == (
        pk.digest(), mask.digest(), cts)
    assert wire.unpack_agg_slices(wire.pack_agg_slices(mask.digest(), cts), ref.params) == (mask.digest(), cts)
    assert wire.unpack_partials(wire.pack_partials(parts), ref.params) == parts


def test_malformed_payloads():
    ref = mkhe.setup(16, seed=1)
    model = ModelParams.zeros(Architecture((3, 2)))
    with pytest.raises(FormatError):
        wire.unpack_model(wire.pack_model(model)[:-1])
    with pytest.raises(FormatError):
        wire.unpack_model(b"\xff\xff\xff\xff")
    with pytest.raises(FormatError):
        wire.unpack_enc_slices(DIGEST, ref.params)
    with pytest.raises(FormatError):
        wire.unpack_partials(b"\x01\0\0\0\x05\0\0\0abc", ref.params)


def test_content_size_is_count_times_item():
    ref = mkhe.setup(16, seed=1)
    rng = np.random.default_rng(0)
    _, share = mkhe.keygen(ref, 0, rng)
    pk = mkhe.aggregate_pk([share])
    for k in (1, 2, 5):
        cts = [mkhe.encrypt([0.5], pk, ref, rng) for _ in range(k)]
        msg = Message(Kind.ENC_SLICES, 1, 0, wire.pack_enc_slices(pk.digest(), DIGEST, cts))
        assert wire.content_size(msg) == k * mkhe.ciphertext_nbytes(16)
    plain = Message(Kind.GLOBAL_MASK, 1, 0, b"12345")
    assert wire.content_size(plain) == 5


# --------------------------------------------------------------- transport


def test_sim_channel_hello_and_routing():
    hub = Hub(2, DIGEST)
    a = SimChannel(hub, 0)
    a.send(Message(Kind.LOCAL_MASK, 1, 0, b"m"))
    assert hub.server_inbox.get_nowait() == Message(Kind.LOCAL_MASK, 1, 0, b"m")
    a.send(Message(Kind.PUB_KEY_SHARE, 0, 0, b"k"))
    assert hub.km_inbox.get_nowait().payload == b"k"
    ServerEndpoint(hub).send_to(0, Message(Kind.GLOBAL_MASK, 1, wire.SERVER_ID, b"g"))
    assert a.recv(1).payload == b"g"
    with pytest.raises(TimeoutError):
        a.recv(0.01)


def test_hub_rejects_bad_parties():
    hub = Hub(2, DIGEST)
    SimChannel(hub, 0)
    with pytest.raises(Exception, match="already connected"):
        SimChannel(hub, 0)
    with pytest.raises(Exception, match="outside"):
        SimChannel(hub, 5)


def test_spoofed_sender_becomes_abort():
    hub = Hub(2, DIGEST)
    chan = SimChannel(hub, 1)
    chan.send(Message(Kind.LOCAL_MASK, 1, 0, b"x"))  # claims to be client 0
    msg = hub.server_inbox.get_nowait()
    assert msg.kind == Kind.ABORT and msg.sender == 1


def test_tcp_rejects_wrong_reference_digest():
    hub = Hub(1, DIGEST)
    server = TcpHubServer(hub)
    try:
        with pytest.raises(Abort):
            TcpChannel(*server.address, 0, b"\x22" * 32, connect_timeout=5)
    finally:
        server.close()


def test_five_concurrent_tcp_clients_interleave_cleanly():
    m, per_client = 5, 40
    hub = Hub(m, DIGEST)
    server = TcpHubServer(hub)
    expected = {}
    errors = []

    def run(cid):
        try:
            chan = TcpChannel(*server.address, cid, DIGEST, connect_timeout=5)
            rng = np.random.default_rng(cid)
            sent = []
            for i in range(per_client):
                payload = rng.bytes(int(rng.integers(0, 3000)))
                msg = Message(Kind.LOCAL_MASK, i, cid, payload)
                chan.send(msg)
                sent.append(msg)
            expected[cid] = sent
            echo = chan.recv(10)
            assert echo.kind == Kind.ROUND_DONE
            chan.close()
        except Exception as exc:  # pragma: no cover - reported below
            errors.append(exc)

    threads = [threading.Thread(target=run, args=(c,)) for c in range(m)]
    for t in threads:
        t.start()
    received = {c: [] for c in range(m)}
    for _ in range(m * per_client):
        msg = hub.server_inbox.get(timeout=20)
        received[msg.sender].append(msg)
    hub.broadcast(Message(Kind.ROUND_DONE, 0, wire.SERVER_ID, b""), range(m))
    for t in threads:
        t.join(20)
    server.close()
    assert not errors
    for c in range(m):
        assert received[c] == expected[c]
    summary = hub.ledger.round_summary(3)
    assert summary[Kind.LOCAL_MASK][0] == m


def test_truncated_tcp_stream_raises_fault():
    import socket

    hub = Hub(1, DIGEST)
    server = TcpHubServer(hub)
    try:
        sock = socket.create_connection(server.address)
        sock.sendall(encode_frame(Message(Kind.HELLO, 0, 0, wire.pack_hello(DIGEST))))
        ack = read_frame(sock.makefile("rb"))
        assert ack.kind == Kind.HELLO
        frame = encode_frame(Message(Kind.LOCAL_MASK, 1, 0, b"abcdef"))
        sock.sendall(frame[:-3])
        sock.close()
        msg = hub.server_inbox.get(timeout=5)
        assert msg.kind == Kind.ABORT and b"dropped" in msg.payload
        assert hub.server_inbox.empty()  # the partial message never surfaced
    finally:
        server.close()
