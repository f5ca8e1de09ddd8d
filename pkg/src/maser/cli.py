"""Command-line entry point.

    maser sim        --config FILE [--seed S] [--reps R] [--out CSV] [--transport sim|tcp]
    maser server     --config FILE [--seed S] [--out CSV] [--port P] [--external-keymanager]
    maser client     --config FILE --id I [--seed S] [--host H] [--port P]
    maser keymanager --config FILE [--seed S] [--host H] [--port P]
    maser summarize  CSV [CSV ...]

Exit codes: 0 success, 2 bad configuration or input, 3 protocol abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .config import ExperimentConfig, config_items, parse_config
from .errors import Abort, ConfigError, FormatError, MaserError
from .protocol.experiment import Deployment, build_shards, drive_rounds, run_experiment, run_remote_keymanager
from .protocol.roles import Client
from .protocol.transport import TcpChannel
from .report import ExperimentReport, format_summary, summarize

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3

log = logging.getLogger("maser")


def _load(args) -> ExperimentConfig:
    cfg = parse_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    transport = {}
    if getattr(args, "host", None):
        transport["host"] = args.host
    if getattr(args, "port", None) is not None:
        transport["port"] = args.port
    if getattr(args, "transport", None):
        transport["kind"] = args.transport
    if transport:
        changes["transport"] = dataclasses.replace(cfg.transport, **transport)
    return cfg.replace(**changes) if changes else cfg


def _progress(row) -> None:
    acc = "-" if row.test_accuracy is None else f"{row.test_accuracy:.4f}"
    log.info("rep %d round %d  acc=%s  slices=%d  bytes=%d", row.rep, row.round, acc, row.slice_count, row.total_bytes)


def _finish(report: ExperimentReport, out: str | None) -> None:
    if out:
        report.write_csv(out)
        print(f"wrote {out}", file=sys.stderr)
    if report.rows and not report.aborted:
        print(format_summary(summarize([("report", report.to_csv())])))


def cmd_sim(args) -> int:
    cfg = _load(args)
    combined = ExperimentReport(config_items(cfg))
    for r in range(args.reps):
        rep_cfg = cfg.replace(seed=cfg.seed + r)
        try:
            combined.extend(run_experiment(rep_cfg, rep=r, on_round=_progress))
        except Abort as exc:
            partial = getattr(exc, "report", None)
            if partial is not None:
                combined.extend(partial)
            combined.status = f"aborted: {exc}"
            _finish(combined, args.out)
            print(f"aborted: {exc}", file=sys.stderr)
            return EXIT_ABORT
    _finish(combined, args.out)
    return EXIT_OK


def cmd_server(args) -> int:
    cfg = _load(args)
    _, test, arch = build_shards(cfg)
    ref = cfg.scheme.reference(cfg.seed)
    with Deployment(cfg, ref, None, transport="tcp", clients=[], port=cfg.transport.port,
                    keymanager=not args.external_keymanager) as dep:
        host, port = dep.tcp.address
        print(f"listening on {host}:{port}", file=sys.stderr, flush=True)
        dep.start()
        try:
            report = drive_rounds(cfg, dep, test, arch, on_round=_progress)
        except Abort as exc:
            partial = getattr(exc, "report", None) or ExperimentReport(config_items(cfg), status=f"aborted: {exc}")
            _finish(partial, args.out)
            print(f"aborted: {exc}", file=sys.stderr)
            return EXIT_ABORT
    _finish(report, args.out)
    return EXIT_OK


def cmd_client(args) -> int:
    cfg = _load(args)
    if not 0 <= args.id < cfg.m:
        raise ConfigError("--id", f"client id must be in [0, {cfg.m})")
    shards, _, _ = build_shards(cfg)
    ref = cfg.scheme.reference(cfg.seed)
    t = cfg.transport
    channel = TcpChannel(t.host, t.port, args.id, ref.digest(), t.max_frame, connect_timeout=t.timeout)
    client = Client(args.id, ref, shards[args.id], cfg.train, cfg.kappa, channel, cfg.seed, t.timeout,
                    cfg.behavior_of(args.id))
    try:
        client.run()
    except Abort as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    finally:
        channel.close()
    print(f"client {args.id} finished {client.rounds_done} rounds", file=sys.stderr)
    return EXIT_OK


def cmd_keymanager(args) -> int:
    cfg = _load(args)
    try:
        pk = run_remote_keymanager(cfg, cfg.transport.host, cfg.transport.port)
    except Abort as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    print(f"aggregated public key {pk.digest().hex()[:16]} from {len(pk.contributor_ids)} clients", file=sys.stderr)
    return EXIT_OK


def cmd_summarize(args) -> int:
    print(format_summary(summarize(args.csv)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maser", description="Federated learning with multi-key encrypted aggregation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, network: bool = False):
        p.add_argument("--config", required=True, help="INI or JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override experiment.seed")
        if network:
            p.add_argument("--host", default=None, help="override transport.host")
            p.add_argument("--port", type=int, default=None, help="override transport.port")

    p = sub.add_parser("sim", help="run every party in one process")
    common(p)
    p.add_argument("--reps", type=int, default=1, help="repetitions, seeded seed, seed+1, ...")
    p.add_argument("--out", default=None, help="CSV output path")
    p.add_argument("--transport", choices=("sim", "tcp"), default=None, help="override transport.kind")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("server", help="run the server (and by default the key manager) over TCP")
    common(p, network=True)
    p.add_argument("--out", default=None, help="CSV output path")
    p.add_argument("--external-keymanager", action="store_true", help="wait for a separate keymanager process")
    p.set_defaults(func=cmd_server)

    p = sub.add_parser("client", help="run one client over TCP")
    common(p, network=True)
    p.add_argument("--id", type=int, required=True, help="client id in [0, m)")
    p.set_defaults(func=cmd_client)

    p = sub.add_parser("keymanager", help="run the key manager as its own TCP party")
    common(p, network=True)
    p.set_defaults(func=cmd_keymanager)

    p = sub.add_parser("summarize", help="mean and stddev per metric across CSV reports")
    p.add_argument("csv", nargs="+")
    p.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if getattr(args, "reps", 1) < 1:
        print("error: --reps must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error [{exc.key}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MaserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
