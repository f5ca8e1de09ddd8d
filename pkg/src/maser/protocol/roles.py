"""The three MASER parties: key manager, client and server.

Each role is a blocking actor over an endpoint with ``send``/``recv`` (clients)
or ``send_to``/``broadcast``/``recv`` (server side). Randomness for every
client-side step is derived from ``(seed, purpose, client id, round)``, so a run
is reproducible regardless of message interleaving.
"""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .. import mkhe, sparsify
from ..data import Dataset
from ..errors import Abort, FormatError, MaserError, ProtocolError
from ..model import ModelParams, TrainConfig, accuracy, local_train
from ..sparsify import Mask
from . import messages as wire
from .messages import KEYMANAGER_ID, SERVER_ID, Kind, Message

logger = logging.getLogger(__name__)

# rng stream tags
_KEYGEN, _TRAIN, _ENCRYPT, _PARTIAL, _MALICIOUS = 1, 2, 3, 4, 5


def party_rng(seed: int, purpose: int, cid: int, rnd: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, purpose, cid, rnd])


class Phase(enum.IntEnum):
    Distribute = 0
    Train = 1
    MaskVote = 2
    Encrypt = 3
    Aggregate = 4
    PartialDec = 5
    Merge = 6
    Reconstruct = 7


@dataclass
class RoundState:
    round: int
    phase: Phase = Phase.Distribute
    pending: set = field(default_factory=set)

    def advance(self, phase: Phase) -> None:
        if phase <= self.phase:
            raise ProtocolError(f"phase {phase.name} cannot follow {self.phase.name}")
        self.phase = phase


def malicious_mask(behavior: str, honest_mask: Mask, rng: np.random.Generator) -> Mask:
    """The bogus mask a misbehaving client submits instead of ``honest_mask``."""
    if behavior == "random_mask":
        return Mask(rng.integers(0, 2, size=honest_mask.param_count).astype(bool), honest_mask.round)
    if behavior == "all_ones_mask":
        return Mask(np.ones(honest_mask.param_count, dtype=bool), honest_mask.round)
    if behavior == "inverted_mask":
        return ~honest_mask
    raise ValueError(f"unknown malicious behavior {behavior!r}")


def client_update(
    global_model: ModelParams, shard: Dataset, cfg: TrainConfig, seed: int, cid: int, rnd: int
) -> ModelParams:
    """Local training step shared by the encrypted client and the plaintext oracle."""
    ref = global_model if cfg.mu > 0 else None
    return local_train(global_model, shard, cfg, global_ref=ref, rng=party_rng(seed, _TRAIN, cid, rnd))


def client_mask(local: ModelParams, kappa: float, behavior: str | None, seed: int, cid: int, rnd: int) -> Mask:
    honest = sparsify.gen_mask(local, kappa, round=rnd)
    if behavior is None:
        return honest
    return malicious_mask(behavior, honest, party_rng(seed, _MALICIOUS, cid, rnd))


# --------------------------------------------------------------------------
# Key manager
# --------------------------------------------------------------------------


class KeyManager:
    """Sums public-key shares; never sees secret keys."""

    def __init__(self, ref: mkhe.CommonReference, m: int, endpoint, timeout: float):
        self.ref = ref
        self.m = m
        self.endpoint = endpoint
        self.timeout = timeout
        self.pk: mkhe.AggregatedPublicKey | None = None

    def run(self) -> mkhe.AggregatedPublicKey:
        deadline = time.monotonic() + self.timeout
        shares: dict[int, mkhe.PublicKeyShare] = {}
        while len(shares) < self.m:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise Abort(f"key ceremony timed out with {len(shares)} of {self.m} shares", phase="KeyGen", round=0)
            try:
                msg = self.endpoint.recv(remaining)
            except TimeoutError:
                continue
            if msg.kind != Kind.PUB_KEY_SHARE:
                raise Abort(f"key manager got {msg.kind.name}", phase="KeyGen", round=0)
            try:
                share = mkhe.deserialize(msg.payload, self.ref.params, expect=mkhe.PublicKeyShare)
            except MaserError as exc:
                raise Abort(f"bad share from {msg.sender}: {exc}", phase="KeyGen", round=0) from exc
            if share.client_id != msg.sender:
                raise Abort(f"share names client {share.client_id} but came from {msg.sender}", phase="KeyGen", round=0)
            if share.client_id in shares:
                raise Abort(f"duplicate share from client {share.client_id}", phase="KeyGen", round=0)
            shares[share.client_id] = share
        self.pk = mkhe.aggregate_pk(shares[c] for c in sorted(shares))
        self.endpoint.broadcast(Message(Kind.AGG_PUB_KEY, 0, KEYMANAGER_ID, mkhe.serialize(self.pk)))
        return self.pk


# --------------------------------------------------------------------------
# Client
# --------------------------------------------------------------------------


class Client:
    def __init__(
        self,
        cid: int,
        ref: mkhe.CommonReference,
        shard: Dataset,
        train_cfg: TrainConfig,
        kappa: float,
        channel,
        seed: int,
        timeout: float,
        behavior: str | None = None,
    ):
        self.cid = cid
        self.ref = ref
        self.shard = shard
        self.train_cfg = train_cfg
        self.kappa = kappa
        self.channel = channel
        self.seed = seed
        self.timeout = timeout
        self.behavior = behavior
        self._sk, self._share = mkhe.keygen(ref, cid, party_rng(seed, _KEYGEN, cid))
        self.pk: mkhe.AggregatedPublicKey | None = None
        self.rounds_done = 0

    def _send(self, kind: Kind, rnd: int, payload: bytes) -> None:
        self.channel.send(Message(kind, rnd, self.cid, payload))

    def _recv(self, kind: Kind, rnd: int | None = None) -> Message:
        msg = self.channel.recv(self.timeout)
        if msg.kind == Kind.ABORT:
            raise Abort(f"server aborted: {msg.payload.decode(errors='replace')}", round=msg.round)
        if msg.kind != kind or (rnd is not None and msg.round != rnd):
            raise ProtocolError(f"client {self.cid} expected {kind.name} round {rnd}, got {msg.kind.name} round {msg.round}")
        return msg

    def key_ceremony(self) -> mkhe.AggregatedPublicKey:
        self._send(Kind.PUB_KEY_SHARE, 0, mkhe.serialize(self._share))
        msg = self._recv(Kind.AGG_PUB_KEY, 0)
        self.pk = mkhe.deserialize(msg.payload, self.ref.params, expect=mkhe.AggregatedPublicKey)
        if self.cid not in self.pk.contributor_ids:
            raise ProtocolError(f"aggregated key does not include client {self.cid}")
        return self.pk

    def run(self) -> None:
        try:
            if self.pk is None:
                self.key_ceremony()
            while True:
                msg = self.channel.recv(self.timeout)
                if msg.kind == Kind.ROUND_DONE:
                    return
                if msg.kind == Kind.ABORT:
                    raise Abort(f"server aborted: {msg.payload.decode(errors='replace')}", round=msg.round)
                if msg.kind != Kind.GLOBAL_MODEL:
                    raise ProtocolError(f"client {self.cid} expected GLOBAL_MODEL, got {msg.kind.name}")
                self.run_round(msg.round, wire.unpack_model(msg.payload))
        except Abort:
            raise
        except Exception as exc:
            # let the server abort promptly instead of waiting out its deadline
            try:
                self._send(Kind.ABORT, 0, f"client {self.cid} failed: {exc}".encode())
            except Exception:
                pass
            raise

    def run_round(self, rnd: int, global_model: ModelParams) -> None:
        params = self.ref.params
        local = client_update(global_model, self.shard, self.train_cfg, self.seed, self.cid, rnd)
        mask = client_mask(local, self.kappa, self.behavior, self.seed, self.cid, rnd)
        self._send(Kind.LOCAL_MASK, rnd, wire.pack_mask(mask))

        global_mask = wire.unpack_mask(self._recv(Kind.GLOBAL_MASK, rnd).payload)
        slices = sparsify.make_slices(local, global_mask, params.slots)
        rng = party_rng(self.seed, _ENCRYPT, self.cid, rnd)
        cts = [mkhe.encrypt(s, self.pk, self.ref, rng) for s in slices.slices]
        self._send(Kind.ENC_SLICES, rnd, wire.pack_enc_slices(self.pk.digest(), slices.mask_digest, cts))

        msg = self._recv(Kind.AGG_ENC_SLICES, rnd)
        mask_digest, agg = wire.unpack_agg_slices(msg.payload, params)
        if mask_digest != global_mask.digest():
            raise ProtocolError("aggregated slices refer to a different global mask")
        rng = party_rng(self.seed, _PARTIAL, self.cid, rnd)
        parts = [mkhe.partial_dec(ct, self._sk, rng) for ct in agg]
        self._send(Kind.PARTIAL_DECS, rnd, wire.pack_partials(parts))
        self.rounds_done += 1


# --------------------------------------------------------------------------
# Server
# --------------------------------------------------------------------------


@dataclass
class RoundRecord:
    round: int
    test_accuracy: float | None
    timings_ms: dict[str, float]
    kept_count: int
    slice_count: int


class Server:
    """Round driver. ``global_model`` changes only when a round completes."""

    def __init__(
        self,
        ref: mkhe.CommonReference,
        m: int,
        initial_model: ModelParams,
        endpoint,
        timeout: float,
        test_data: Dataset | None = None,
    ):
        self.ref = ref
        self.m = m
        self.global_model = initial_model
        self.endpoint = endpoint
        self.timeout = timeout
        self.test_data = test_data
        self.pk: mkhe.AggregatedPublicKey | None = None
        self.state: RoundState | None = None

    def await_public_key(self) -> mkhe.AggregatedPublicKey:
        msg = self._next(deadline=time.monotonic() + self.timeout, phase="KeyGen", rnd=0)
        if msg.kind != Kind.AGG_PUB_KEY:
            raise Abort(f"expected AGG_PUB_KEY, got {msg.kind.name}", phase="KeyGen", round=0)
        pk = mkhe.deserialize(msg.payload, self.ref.params, expect=mkhe.AggregatedPublicKey)
        if pk.contributor_ids != frozenset(range(self.m)):
            raise Abort(f"aggregated key covers {sorted(pk.contributor_ids)}", phase="KeyGen", round=0)
        self.pk = pk
        return pk

    def _next(self, deadline: float, phase: str, rnd: int) -> Message:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise Abort("timed out", phase=phase, round=rnd)
        try:
            msg = self.endpoint.recv(remaining)
        except TimeoutError:
            raise Abort(f"timed out waiting on clients {sorted(self.state.pending) if self.state else ''}",
                        phase=phase, round=rnd) from None
        if msg.kind == Kind.ABORT:
            raise Abort(f"party {msg.sender}: {msg.payload.decode(errors='replace')}", phase=phase, round=rnd)
        return msg

    def _collect(self, kind: Kind, rnd: int, parse) -> dict[int, object]:
        """Wait for one ``kind`` message per client, parsed with ``parse(payload)``."""
        state = self.state
        state.pending = set(range(self.m))
        deadline = time.monotonic() + self.timeout
        out: dict[int, object] = {}
        phase = state.phase.name
        while state.pending:
            msg = self._next(deadline, phase, rnd)
            if msg.kind != kind or msg.round != rnd:
                raise Abort(f"unexpected {msg.kind.name} (round {msg.round}) from {msg.sender}", phase=phase, round=rnd)
            if msg.sender not in state.pending:
                raise Abort(f"duplicate or unknown sender {msg.sender}", phase=phase, round=rnd)
            try:
                out[msg.sender] = parse(msg.payload)
            except (FormatError, MaserError, ValueError) as exc:
                raise Abort(f"malformed {kind.name} from {msg.sender}: {exc}", phase=phase, round=rnd) from exc
            state.pending.discard(msg.sender)
        return out

    def run_round(self, rnd: int) -> tuple[ModelParams, RoundRecord]:
        try:
            return self._run_round(rnd)
        except Abort as exc:
            self.endpoint.abort_all(str(exc), rnd)
            raise

    def _run_round(self, rnd: int) -> tuple[ModelParams, RoundRecord]:
        if self.pk is None:
            raise ProtocolError("key ceremony has not completed")
        params = self.ref.params
        self.state = state = RoundState(rnd)
        timings: dict[str, float] = {}
        clock = time.perf_counter()

        def lap(phase: Phase) -> None:
            nonlocal clock
            now = time.perf_counter()
            timings[phase.name] = timings.get(phase.name, 0.0) + (now - clock) * 1000.0
            clock = now

        payload = wire.pack_model(self.global_model)
        for cid in range(self.m):
            self.endpoint.send_to(cid, Message(Kind.GLOBAL_MODEL, rnd, SERVER_ID, payload))
        lap(Phase.Distribute)

        state.advance(Phase.Train)
        masks = self._collect(Kind.LOCAL_MASK, rnd, wire.unpack_mask)
        lap(Phase.Train)

        state.advance(Phase.MaskVote)
        arch = self.global_model.arch
        for cid, mk in masks.items():
            if mk.param_count != arch.param_count:
                raise Abort(f"mask from {cid} covers {mk.param_count} params, model has {arch.param_count}",
                            phase=state.phase.name, round=rnd)
        global_mask = sparsify.vote_masks([masks[c] for c in sorted(masks)], round=rnd)
        kept = global_mask.popcount()
        if kept == 0:
            raise Abort("global mask keeps no parameters", phase=state.phase.name, round=rnd)
        expected_slices = math.ceil(kept / params.slots)
        mask_bytes = wire.pack_mask(global_mask)
        for cid in range(self.m):
            self.endpoint.send_to(cid, Message(Kind.GLOBAL_MASK, rnd, SERVER_ID, mask_bytes))
        lap(Phase.MaskVote)

        state.advance(Phase.Encrypt)
        uploads = self._collect(Kind.ENC_SLICES, rnd, lambda p: wire.unpack_enc_slices(p, params))
        pk_digest, mask_digest = self.pk.digest(), global_mask.digest()
        for cid, (pkd, mkd, cts) in uploads.items():
            if pkd != pk_digest:
                raise Abort(f"client {cid} encrypted under a different public key", phase="Encrypt", round=rnd)
            if mkd != mask_digest:
                raise Abort(f"client {cid} sliced with a stale mask", phase="Encrypt", round=rnd)
            if len(cts) != expected_slices:
                raise Abort(f"client {cid} sent {len(cts)} slices, expected {expected_slices}", phase="Encrypt", round=rnd)
        lap(Phase.Encrypt)

        state.advance(Phase.Aggregate)
        aggregated = [mkhe.ct_add(uploads[c][2][i] for c in sorted(uploads)) for i in range(expected_slices)]
        agg_payload = wire.pack_agg_slices(mask_digest, aggregated)
        for cid in range(self.m):
            self.endpoint.send_to(cid, Message(Kind.AGG_ENC_SLICES, rnd, SERVER_ID, agg_payload))
        lap(Phase.Aggregate)

        state.advance(Phase.PartialDec)
        partials = self._collect(Kind.PARTIAL_DECS, rnd, lambda p: wire.unpack_partials(p, params))
        for cid, parts in partials.items():
            if len(parts) != expected_slices:
                raise Abort(f"client {cid} sent {len(parts)} partials, expected {expected_slices}", phase="PartialDec", round=rnd)
            if any(p.client_id != cid for p in parts):
                raise Abort(f"client {cid} sent partials labelled for another client", phase="PartialDec", round=rnd)
        lap(Phase.PartialDec)

        state.advance(Phase.Merge)
        averaged = []
        for i, ct in enumerate(aggregated):
            try:
                plain = mkhe.merge(ct, [partials[c][i] for c in sorted(partials)], self.m, self.pk.contributor_ids)
            except ProtocolError as exc:
                raise Abort(str(exc), phase="Merge", round=rnd) from exc
            averaged.append(mkhe.decode(plain, params.slots, params) / self.m)
        lap(Phase.Merge)

        state.advance(Phase.Reconstruct)
        new_model = sparsify.reconstruct(sparsify.SliceSet(tuple(averaged), kept, mask_digest), global_mask, arch)
        lap(Phase.Reconstruct)

        self.global_model = new_model
        acc = accuracy(new_model, self.test_data) if self.test_data is not None and len(self.test_data) else None
        record = RoundRecord(rnd, acc, timings, kept, expected_slices)
        logger.info("round %d done: kept=%d slices=%d acc=%s", rnd, kept, expected_slices, acc)
        return new_model, record

    def finish(self, rounds: int) -> None:
        for cid in range(self.m):
            self.endpoint.send_to(cid, Message(Kind.ROUND_DONE, rounds, SERVER_ID, b""))
