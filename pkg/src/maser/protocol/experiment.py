"""Wiring parties together and running whole experiments.

:class:`Deployment` starts the key manager and the clients as threads attached
to one hub, over the in-memory transport or real loopback TCP sockets. The
server actor runs on the caller's thread. :func:`run_plaintext` replays the
same training and masking without encryption; it is both the FedAvg baseline
and the oracle for the encrypted pipeline.
"""

from __future__ import annotations

import logging
import threading

import numpy as np

from .. import mkhe, sparsify
from ..config import ExperimentConfig, config_items
from ..data import Dataset, load_idx, partition, synthetic
from ..errors import Abort, MaserError
from ..model import ModelParams, accuracy, fedavg, init_model
from ..report import ExperimentReport, RoundRow
from .messages import KEYMANAGER_ID, Kind
from .roles import Client, KeyManager, RoundRecord, Server, client_mask, client_update
from .transport import (
    Hub,
    LocalKeyManagerEndpoint,
    ServerEndpoint,
    SimChannel,
    TcpChannel,
    TcpHubServer,
)

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Train and test sets, deterministic in ``cfg.seed``."""
    d = cfg.data
    if d.source == "synthetic":
        full = synthetic(d.samples + d.test_size, d.features, d.classes, d.separation, d.noise, seed=cfg.seed)
        return full[: d.samples], full[d.samples :]
    full = load_idx(d.images, d.labels)
    order = np.random.default_rng([cfg.seed, 77]).permutation(len(full))
    if d.test_images:
        test = load_idx(d.test_images, d.test_labels)
        if d.test_size:
            test = test[: d.test_size]
        n_train = d.train_size or len(full)
        return full[np.sort(order[:n_train])], test
    n_train = d.train_size or max(len(full) - d.test_size, 0)
    n_test = d.test_size or len(full) - n_train
    if n_train + n_test > len(full) or n_train == 0:
        raise MaserError(f"cannot take {n_train} train + {n_test} test samples from {len(full)}")
    return full[np.sort(order[:n_train])], full[np.sort(order[n_train : n_train + n_test])]


def build_shards(cfg: ExperimentConfig):
    """(client shards, test set, architecture)."""
    train, test = load_datasets(cfg)
    shards = partition(train, cfg.m, cfg.partition, cfg.alpha, seed=cfg.seed)
    return shards, test, cfg.architecture(train.feature_count, train.class_count)


def initial_model(cfg: ExperimentConfig, arch) -> ModelParams:
    return init_model(arch, np.random.default_rng([cfg.seed, 9]))


# --------------------------------------------------------------------------
# deployment
# --------------------------------------------------------------------------


class Deployment:
    """Hub, key manager and client threads for one run.

    ``clients`` restricts which client ids are started (to simulate an absent
    party); ``transport`` overrides ``cfg.transport.kind``. With
    ``keymanager=False`` the key manager is expected to connect over TCP.
    """

    def __init__(
        self,
        cfg: ExperimentConfig,
        ref: mkhe.CommonReference,
        shards,
        transport: str | None = None,
        clients=None,
        port: int = 0,
        keymanager: bool = True,
    ):
        self.cfg = cfg
        self.ref = ref
        self.shards = shards
        self.kind = transport or cfg.transport.kind
        self.client_ids = list(range(cfg.m)) if clients is None else list(clients)
        self.local_keymanager = keymanager
        self.hub = Hub(cfg.m, ref.digest(), cfg.transport.max_frame)
        self.server_endpoint = ServerEndpoint(self.hub)
        self.tcp = TcpHubServer(self.hub, cfg.transport.host, port) if self.kind == "tcp" else None
        self.clients: dict[int, Client] = {}
        self.keymanager: KeyManager | None = None
        self.errors: dict[str, BaseException] = {}
        self._threads: list[threading.Thread] = []

    def _spawn(self, name: str, fn) -> None:
        def target():
            try:
                fn()
            except BaseException as exc:  # surfaced through self.errors
                logger.debug("%s failed", name, exc_info=True)
                self.errors[name] = exc

        t = threading.Thread(target=target, name=name, daemon=True)
        self._threads.append(t)
        t.start()

    def channel(self, party_id: int):
        if self.tcp is None:
            return SimChannel(self.hub, party_id)
        host, port = self.tcp.address
        return TcpChannel(host, port, party_id, self.ref.digest(), self.cfg.transport.max_frame)

    def start(self, ceremony_only: bool = False) -> "Deployment":
        if self.local_keymanager:
            endpoint = LocalKeyManagerEndpoint(self.hub)
            self.keymanager = KeyManager(self.ref, self.cfg.m, endpoint, self.cfg.transport.timeout)
            self._spawn("keymanager", self.keymanager.run)
        for cid in self.client_ids:
            self._spawn(f"client-{cid}", lambda cid=cid: self._client_main(cid, ceremony_only))
        return self

    def _client_main(self, cid: int, ceremony_only: bool) -> None:
        client = Client(
            cid,
            self.ref,
            self.shards[cid] if self.shards is not None else None,
            self.cfg.train,
            self.cfg.kappa,
            self.channel(cid),
            self.cfg.seed,
            self.cfg.transport.timeout,
            self.cfg.behavior_of(cid),
        )
        self.clients[cid] = client
        if ceremony_only:
            client.key_ceremony()
        else:
            client.run()

    def join(self, timeout: float | None = None) -> None:
        for t in self._threads:
            t.join(timeout)

    def close(self) -> None:
        if self.tcp is not None:
            self.tcp.close()

    def __enter__(self) -> "Deployment":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def run_key_ceremony(cfg: ExperimentConfig, ref: mkhe.CommonReference, transport: str | None = None, clients=None):
    """Run only the key-generation exchange.

    Returns ``(server_pk, {client id: pk as received})``; raises Abort when a
    share is missing at the deadline.
    """
    with Deployment(cfg, ref, None, transport=transport, clients=clients) as dep:
        dep.start(ceremony_only=True)
        server = Server(ref, cfg.m, None, dep.server_endpoint, cfg.transport.timeout)
        try:
            pk = server.await_public_key()
        except Abort as exc:
            dep.hub.abort_all(str(exc))
            raise
        finally:
            dep.join(cfg.transport.timeout)
        for exc in dep.errors.values():
            raise exc
        return pk, {cid: c.pk for cid, c in dep.clients.items()}


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------


def _row(rep: int, seed: int, rnd: int, acc, ledger, record: RoundRecord | None = None) -> RoundRow:
    summary = ledger.round_summary(rnd)
    return RoundRow(
        rep=rep,
        seed=seed,
        round=rnd,
        test_accuracy=acc,
        kept_count=record.kept_count if record else 0,
        slice_count=record.slice_count if record else 0,
        timings_ms=dict(record.timings_ms) if record else {},
        bytes_by_kind={k: v[1] for k, v in summary.items() if k != Kind.HELLO},
        msgs_by_kind={k: v[0] for k, v in summary.items() if k != Kind.HELLO},
        overhead_bytes=sum(v[2] for k, v in summary.items() if k != Kind.HELLO),
    )


def run_experiment(cfg: ExperimentConfig, rep: int = 0, transport: str | None = None, on_round=None) -> ExperimentReport:
    """Run ``cfg.rounds`` encrypted rounds for one seed with every party in-process.

    Aborts propagate as :class:`Abort` with the partial report attached as
    ``exc.report``.
    """
    ref = cfg.scheme.reference(cfg.seed)
    shards, test, arch = build_shards(cfg)
    with Deployment(cfg, ref, shards, transport=transport) as dep:
        dep.start()
        return drive_rounds(cfg, dep, test, arch, rep, on_round)


def drive_rounds(cfg: ExperimentConfig, dep: Deployment, test: Dataset, arch, rep: int = 0, on_round=None) -> ExperimentReport:
    """Server side of a run: key ceremony, ``cfg.rounds`` rounds, shutdown."""
    report = ExperimentReport(config_items(cfg))
    server = Server(dep.ref, cfg.m, initial_model(cfg, arch), dep.server_endpoint, cfg.transport.timeout, test)
    try:
        server.await_public_key()
        acc0 = accuracy(server.global_model, test) if len(test) else None
        report.rows.append(_row(rep, cfg.seed, 0, acc0, dep.hub.ledger))
        for t in range(1, cfg.rounds + 1):
            _, record = server.run_round(t)
            report.rows.append(_row(rep, cfg.seed, t, record.test_accuracy, dep.hub.ledger, record))
            if on_round is not None:
                on_round(report.rows[-1])
        server.finish(cfg.rounds)
        dep.join(cfg.transport.timeout)
        for name, exc in dep.errors.items():
            raise Abort(f"{name} failed: {exc}") from exc
    except Abort as exc:
        report.status = f"aborted: {exc}"
        exc.report = report
        dep.hub.abort_all(str(exc))
        raise
    report.final_model = server.global_model
    return report


def plaintext_round(model: ModelParams, shards, cfg: ExperimentConfig, rnd: int, prune: bool = True) -> ModelParams:
    """One round without encryption.

    ``prune=True`` reproduces MASER's arithmetic exactly (same local training,
    same masks and vote, equal-weight mean). ``prune=False`` is vanilla
    FedAvg weighted by shard size.
    """
    locals_ = [client_update(model, shards[c], cfg.train, cfg.seed, c, rnd) for c in range(cfg.m)]
    if not prune:
        sizes = np.array([len(s) for s in shards], dtype=np.float64)
        return fedavg(locals_, sizes / sizes.sum())
    masks = [client_mask(locals_[c], cfg.kappa, cfg.behavior_of(c), cfg.seed, c, rnd) for c in range(cfg.m)]
    global_mask = sparsify.vote_masks(masks, round=rnd)
    masked = [sparsify.apply_mask(lm, global_mask) for lm in locals_]
    return fedavg(masked, [1.0 / cfg.m] * cfg.m)


def run_plaintext(cfg: ExperimentConfig, prune: bool = True):
    """Returns (accuracy after each round including round 0, final model)."""
    shards, test, arch = build_shards(cfg)
    model = initial_model(cfg, arch)
    accs = [accuracy(model, test)]
    for t in range(1, cfg.rounds + 1):
        model = plaintext_round(model, shards, cfg, t, prune)
        accs.append(accuracy(model, test))
    return accs, model


def run_remote_keymanager(cfg: ExperimentConfig, host: str, port: int) -> mkhe.AggregatedPublicKey:
    """Key-manager role for TCP deployments where it runs as its own process."""
    ref = cfg.scheme.reference(cfg.seed)
    channel = TcpChannel(host, port, KEYMANAGER_ID, ref.digest(), cfg.transport.max_frame)
    try:
        return KeyManager(ref, cfg.m, channel, cfg.transport.timeout).run()
    finally:
        channel.close()
