import math
import time

import numpy as np
import pytest

from maser import mkhe
from maser.config import DataConfig, ExperimentConfig, SchemeConfig, TransportConfig
from maser.errors import Abort, ConfigError, FormatError
from maser.model import TrainConfig
from maser.protocol import experiment as ex
from maser.protocol import messages as wire
from maser.protocol.messages import Kind, Message
from maser.protocol.roles import Phase, RoundState, Server
from maser.protocol.transport import SimChannel, TrafficLedger
from maser.report import strip_wall_clock


def small_cfg(**changes):
    base = dict(
        m=3,
        rounds=1,
        kappa=0.5,
        seed=0,
        hidden=(8,),
        data=DataConfig(samples=300, test_size=200, features=10, classes=2),
        train=TrainConfig(lr=0.05, local_epochs=1, batch_size=32),
        scheme=SchemeConfig(n=256),
        transport=TransportConfig(timeout=30),
    )
    base.update(changes)
    return ExperimentConfig(**base)


def rows_only(csv_text):
    return [ln for ln in strip_wall_clock(csv_text).splitlines() if not ln.startswith("#")]


# --------------------------------------------------------------- round state


def test_round_state_advances_strictly():
    state = RoundState(1)
    state.advance(Phase.Train)
    state.advance(Phase.Encrypt)
    with pytest.raises(Exception):
        state.advance(Phase.MaskVote)
    with pytest.raises(Exception):
        state.advance(Phase.Encrypt)


# ------------------------------------------------------------- key ceremony


def test_ceremony_single_client():
    cfg = small_cfg(m=1)
    ref = cfg.scheme.reference(cfg.seed)
    pk, held = ex.run_key_ceremony(cfg, ref)
    _, share = mkhe.keygen(ref, 0, np.random.default_rng([cfg.seed, 1, 0, 0]))
    assert pk.b_sum == share.b and pk.contributor_ids == {0}
    assert held[0] == pk


@pytest.mark.parametrize("transport", ["sim", "tcp"])
def test_ceremony_five_clients_agree(transport):
    cfg = small_cfg(m=5)
    ref = cfg.scheme.reference(cfg.seed)
    pk, held = ex.run_key_ceremony(cfg, ref, transport=transport)
    assert len(held) == 5
    assert {k.digest() for k in held.values()} == {pk.digest()}


def test_ceremony_missing_client_times_out():
    cfg = small_cfg(m=3, transport=TransportConfig(timeout=1.0))
    ref = cfg.scheme.reference(cfg.seed)
    start = time.monotonic()
    with pytest.raises(Abort) as err:
        ex.run_key_ceremony(cfg, ref, clients=[0, 1])
    assert err.value.phase == "KeyGen"
    assert time.monotonic() - start < 10


def test_key_manager_sees_no_secret_material():
    cfg = small_cfg(m=3)
    ref = cfg.scheme.reference(cfg.seed)
    with ex.Deployment(cfg, ref, None) as dep:
        dep.start(ceremony_only=True)
        Server(ref, 3, None, dep.server_endpoint, 30).await_public_key()
        dep.join(30)
        km = dep.keymanager
        assert not any(isinstance(v, mkhe.SecretKey) for v in vars(km).values())


# ---------------------------------------------------- plaintext equivalence


@pytest.mark.parametrize("m", [2, 3, 5])
@pytest.mark.parametrize("kappa", [0.1, 0.5, 1.0])
def test_encrypted_round_matches_plaintext(m, kappa):
    cfg = small_cfg(m=m, kappa=kappa, seed=m)
    report = ex.run_experiment(cfg)
    shards, _, arch = ex.build_shards(cfg)
    expect = ex.plaintext_round(ex.initial_model(cfg, arch), shards, cfg, 1)
    assert np.max(np.abs(report.final_model.flatten() - expect.flatten())) <= 1e-3


def test_multi_slice_multi_round_equivalence():
    cfg = small_cfg(m=3, rounds=3, kappa=0.5, scheme=SchemeConfig(n=32))
    report = ex.run_experiment(cfg)
    assert all(r.slice_count > 1 for r in report.rows[1:])
    _, plain = ex.run_plaintext(cfg)
    assert np.max(np.abs(report.final_model.flatten() - plain.flatten())) <= 1e-3


def test_masked_out_parameters_are_exactly_zero():
    cfg = small_cfg(kappa=0.1)
    report = ex.run_experiment(cfg)
    shards, _, arch = ex.build_shards(cfg)
    flat = report.final_model.flatten()
    kept = report.rows[-1].kept_count
    assert np.count_nonzero(flat) <= kept
    assert np.sum(flat == 0) >= arch.param_count - kept


def test_slice_count_and_ciphertext_bytes():
    cfg = small_cfg(m=3, scheme=SchemeConfig(n=64))
    per_slice = 3 * (2 * mkhe.ciphertext_nbytes(64) + mkhe.partial_dec_nbytes(64))
    counts = {}
    for kappa in (0.1, 0.9):
        report = ex.run_experiment(cfg.replace(kappa=kappa))
        row = report.rows[-1]
        assert row.slice_count == math.ceil(row.kept_count / 32)
        assert row.ciphertext_bytes == row.slice_count * per_slice
        assert row.msgs_by_kind[Kind.ENC_SLICES] == 3
        counts[kappa] = (row.slice_count, row.ciphertext_bytes)
    (s1, b1), (s9, b9) = counts[0.1], counts[0.9]
    assert s9 > s1 and b9 * s1 == b1 * s9


# ------------------------------------------------------------------ runs


def test_training_sanity_three_rounds():
    cfg = small_cfg(rounds=3, kappa=0.5, data=DataConfig(samples=600, test_size=400, features=10, classes=2))
    report = ex.run_experiment(cfg)
    assert report.rows[-1].test_accuracy >= 0.7


def test_liveness_every_round_reaches_reconstruct():
    cfg = small_cfg(rounds=3)
    report = ex.run_experiment(cfg)
    assert [r.round for r in report.rows] == [0, 1, 2, 3]
    assert report.status == "ok"
    for row in report.rows[1:]:
        assert set(row.timings_ms) == {p.name for p in Phase}
    assert report.rows[0].key_bytes > 0 and report.rows[0].ciphertext_bytes == 0


def test_sim_and_tcp_transcripts_identical():
    cfg = small_cfg(rounds=2, m=3)
    sim = ex.run_experiment(cfg, transport="sim")
    tcp = ex.run_experiment(cfg, transport="tcp")
    assert rows_only(sim.to_csv()) == rows_only(tcp.to_csv())
    assert np.array_equal(sim.final_model.flatten(), tcp.final_model.flatten())


def test_malicious_minority_barely_moves_accuracy():
    data = DataConfig(samples=1000, test_size=500, features=10, classes=2)
    honest = small_cfg(m=5, rounds=3, kappa=0.3, data=data)
    bad = honest.replace(malicious=((0, "random_mask"), (3, "random_mask")))
    a = ex.run_experiment(honest).rows[-1].test_accuracy
    b = ex.run_experiment(bad).rows[-1].test_accuracy
    assert abs(a - b) <= 0.03


def test_malicious_majority_needs_override():
    with pytest.raises(ConfigError):
        small_cfg(m=5, malicious=((0, "random_mask"), (1, "random_mask"), (2, "inverted_mask")))
    small_cfg(m=5, allow_malicious_majority=True,
              malicious=((0, "random_mask"), (1, "random_mask"), (2, "inverted_mask")))


# ---------------------------------------------------------- secret audit


def test_no_message_ever_carries_secret_key(monkeypatch):
    seen = []
    original = TrafficLedger.record

    def tap(self, msg):
        seen.append(msg)
        original(self, msg)

    monkeypatch.setattr(TrafficLedger, "record", tap)
    cfg = small_cfg(rounds=2)
    ref = cfg.scheme.reference(cfg.seed)
    shards, test, arch = ex.build_shards(cfg)
    with ex.Deployment(cfg, ref, shards) as dep:
        dep.start()
        ex.drive_rounds(cfg, dep, test, arch)
        secrets = [mkhe.serialize(c._sk) for c in dep.clients.values()]
        secret_polys = [s[9:] for s in secrets]  # poly bytes after tag, version and id

    kinds = {m.kind for m in seen}
    assert kinds >= {Kind.PUB_KEY_SHARE, Kind.AGG_PUB_KEY, Kind.ENC_SLICES, Kind.PARTIAL_DECS}
    params = ref.params
    for msg in seen:
        for poly in secret_polys:
            assert poly not in msg.payload
        # every payload parses under its own schema into non-secret objects
        if msg.kind == Kind.PUB_KEY_SHARE:
            obj = mkhe.deserialize(msg.payload, params)
            assert not isinstance(obj, mkhe.SecretKey)
        if msg.kind in (Kind.ENC_SLICES, Kind.AGG_ENC_SLICES, Kind.PARTIAL_DECS):
            items = wire._unpack_items(memoryview(msg.payload), {Kind.ENC_SLICES: 64, Kind.AGG_ENC_SLICES: 32}.get(msg.kind, 0))
            assert all(it[0] != mkhe.TAG_SECRET_KEY for it in items)


def test_secret_key_bytes_rejected_by_every_unpacker():
    ref = mkhe.setup(16, seed=0)
    sk, _ = mkhe.keygen(ref, 0, np.random.default_rng(0))
    blob = mkhe.serialize(sk)
    with pytest.raises(FormatError):
        wire.unpack_partials(wire._pack_items([blob]), ref.params)
    with pytest.raises(FormatError):
        wire.unpack_enc_slices(b"\0" * 64 + wire._pack_items([blob]), ref.params)
    with pytest.raises(FormatError):
        mkhe.deserialize(blob, ref.params, expect=mkhe.PublicKeyShare)


# ------------------------------------------------------------ abort safety


class Corrupting(ex.Deployment):
    """Client ``victim`` truncates its ``target`` message in round ``when``."""

    victim, target, when = 1, Kind.ENC_SLICES, 2

    def channel(self, party_id):
        chan = super().channel(party_id)
        if party_id != self.victim:
            return chan
        send = chan.send

        def corrupt(msg):
            if msg.kind == self.target and msg.round == self.when:
                msg = Message(msg.kind, msg.round, msg.sender, msg.payload[: len(msg.payload) // 2])
            send(msg)

        chan.send = corrupt
        return chan


@pytest.mark.parametrize("kind,phase", [
    (Kind.LOCAL_MASK, "Train"),
    (Kind.ENC_SLICES, "Encrypt"),
    (Kind.PARTIAL_DECS, "PartialDec"),
])
def test_malformed_message_aborts_without_corrupting_model(kind, phase):
    cfg = small_cfg(rounds=2, transport=TransportConfig(timeout=20))
    ref = cfg.scheme.reference(cfg.seed)
    shards, test, arch = ex.build_shards(cfg)
    dep_cls = type("C", (Corrupting,), {"target": kind})
    with dep_cls(cfg, ref, shards) as dep:
        dep.start()
        server = Server(ref, cfg.m, ex.initial_model(cfg, arch), dep.server_endpoint, 20, test)
        server.await_public_key()
        after_one, _ = server.run_round(1)
        snapshot = after_one.flatten().copy()
        with pytest.raises(Abort) as err:
            server.run_round(2)
        assert err.value.round == 2 and err.value.phase == phase
        assert np.array_equal(server.global_model.flatten(), snapshot)
        dep.join(20)
        assert all(isinstance(e, Abort) for e in dep.errors.values())


def test_run_experiment_attaches_partial_report():
    cfg = small_cfg(rounds=3, transport=TransportConfig(timeout=20))
    ref = cfg.scheme.reference(cfg.seed)
    shards, test, arch = ex.build_shards(cfg)
    with Corrupting(cfg, ref, shards) as dep:
        dep.start()
        with pytest.raises(Abort) as err:
            ex.drive_rounds(cfg, dep, test, arch)
    report = err.value.report
    assert report.aborted and [r.round for r in report.rows] == [0, 1]
    assert "# status aborted" in report.to_csv()


def test_stale_public_key_digest_aborts():
    cfg = small_cfg(rounds=1, transport=TransportConfig(timeout=20))

    class WrongPk(ex.Deployment):
        def channel(self, party_id):
            chan = super().channel(party_id)
            if party_id == 0:
                send = chan.send

                def swap(msg):
                    if msg.kind == Kind.ENC_SLICES:
                        msg = Message(msg.kind, msg.round, msg.sender, b"\0" * 32 + msg.payload[32:])
                    send(msg)

                chan.send = swap
            return chan

    ref = cfg.scheme.reference(cfg.seed)
    shards, test, arch = ex.build_shards(cfg)
    with WrongPk(cfg, ref, shards) as dep:
        dep.start()
        with pytest.raises(Abort, match="different public key"):
            ex.drive_rounds(cfg, dep, test, arch)


# ------------------------------------------------------------------ data


def test_idx_datasets_split_disjointly(mnist_dir):
    cfg = small_cfg(
        data=DataConfig(source="idx", images=str(mnist_dir / "mnist5k-images.idx3-ubyte"),
                        labels=str(mnist_dir / "mnist5k-labels.idx1-ubyte"), train_size=2000, test_size=3000),
    )
    train, test = ex.load_datasets(cfg)
    assert len(train) == 2000 and len(test) == 3000
    rows = {r.tobytes() for r in train.X}
    assert sum(r.tobytes() in rows for r in test.X[:500]) <= 5  # MNIST has a few exact duplicates at most
    with pytest.raises(Exception):
        ex.load_datasets(cfg.replace(data=DataConfig(source="idx", images=cfg.data.images, labels=cfg.data.labels,
                                                      train_size=4000, test_size=3000)))
