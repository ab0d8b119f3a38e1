"""Command line tools: ``reed`` (client and servers) and ``reed-trace``.

Exit codes: 0 success, 2 access denied, 3 integrity violation, 4 transport
failure, 5 rate limited, 1 anything else.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from . import caont, errors, traceharness
from .client import (ClientIdentity, Connection, StoreSession, download,
                     register_identity, rekey_file, upload)
from .config import Config, parse_address, parse_size
from .keygen import KeyManagerService, KeySession, ManagerKeyPair
from .server import FrameServer, StorageService

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ACCESS_DENIED = 2
EXIT_INTEGRITY = 3
EXIT_TRANSPORT = 4
EXIT_RATE_LIMITED = 5


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, errors.AccessDenied):
        return EXIT_ACCESS_DENIED
    if isinstance(exc, (errors.IntegrityViolation, errors.AuthenticationFailure,
                        errors.FingerprintMismatch)):
        return EXIT_INTEGRITY
    if isinstance(exc, errors.TransportError):
        return EXIT_TRANSPORT
    if isinstance(exc, errors.RateLimited):
        return EXIT_RATE_LIMITED
    return EXIT_ERROR


def _store_session(cfg: Config) -> StoreSession:
    host, port = parse_address(cfg.get("client", "server"))
    return StoreSession(Connection(host, port))


def _key_session(cfg: Config) -> KeySession:
    host, port = parse_address(cfg.get("client", "manager"))
    return KeySession(Connection(host, port),
                      batch_cap=cfg.getint("manager", "batch_cap"))


def _identity(cfg: Config, create_user: str | None = None) -> ClientIdentity:
    directory = cfg.get("client", "identity_dir")
    if create_user is not None:
        if os.path.exists(os.path.join(directory, "identity.json")):
            identity = ClientIdentity.load(directory)
            if identity.user_id != create_user:
                raise errors.ReedError(
                    f"identity dir already holds keys for {identity.user_id!r}")
            return identity
        identity = ClientIdentity.create(create_user)
        identity.save(directory)
        return identity
    return ClientIdentity.load(directory)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="reed")
    parser.add_argument("--config", help="path to an INI config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen-register", help="create and register an identity")
    p.add_argument("--user", required=True)

    p = sub.add_parser("upload", help="upload a file")
    p.add_argument("path")
    p.add_argument("--policy", required=True, help="comma-separated user ids")
    p.add_argument("--scheme", choices=["basic", "enhanced"])
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--fixed", action="store_true", help="fixed-size chunking")
    mode.add_argument("--rabin", action="store_true", help="content-defined chunking")
    p.add_argument("--keying", choices=["chunk", "similarity"])

    p = sub.add_parser("download", help="download a file by id")
    p.add_argument("file_id")
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("rekey", help="advance a file's key state")
    p.add_argument("file_id")
    p.add_argument("--policy", required=True)
    p.add_argument("--mode", choices=["lazy", "active"], default="lazy")

    sub.add_parser("stats", help="print server storage counters")

    sub.add_parser("serve-store", help="run the dedup storage server")
    sub.add_parser("serve-manager", help="run the key manager")

    args = parser.parse_args(argv)
    try:
        cfg = Config.load(args.config)
        return _run(args, cfg)
    except errors.ReedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


def _run(args, cfg: Config) -> int:
    if args.command == "keygen-register":
        identity = _identity(cfg, create_user=args.user)
        register_identity(_store_session(cfg), identity)
        print(f"registered {identity.user_id}")
        return EXIT_OK

    if args.command == "upload":
        identity = _identity(cfg)
        scheme_name = args.scheme or cfg.get("client", "scheme")
        keying = args.keying or cfg.get("client", "keying")
        chunk_params = cfg.chunk_params
        if args.fixed:
            chunk_params = dataclasses.replace(chunk_params, mode="fixed")
        elif args.rabin:
            chunk_params = dataclasses.replace(chunk_params, mode="rabin")
        file_id = upload(
            args.path,
            policy=args.policy.split(","),
            identity=identity,
            store=_store_session(cfg),
            keys=_key_session(cfg),
            scheme=caont.SCHEME_IDS[scheme_name],
            keying=keying,
            chunk_params=chunk_params,
            seg_params=cfg.segment_params,
            workers=cfg.getint("client", "encrypt_workers"),
            allow_basic_with_similarity=cfg.getbool(
                "client", "allow_basic_with_similarity"),
        )
        print(file_id)
        return EXIT_OK

    if args.command == "download":
        identity = _identity(cfg)
        data = download(args.file_id, identity=identity, store=_store_session(cfg),
                        workers=cfg.getint("client", "encrypt_workers"))
        with open(args.output, "wb") as fh:
            fh.write(data)
        print(f"wrote {len(data)} bytes to {args.output}")
        return EXIT_OK

    if args.command == "rekey":
        identity = _identity(cfg)
        version = rekey_file(args.file_id, new_policy=args.policy.split(","),
                             mode=args.mode, identity=identity,
                             store=_store_session(cfg))
        print(f"new key state version {version}")
        return EXIT_OK

    if args.command == "stats":
        stats = _store_session(cfg).stats()
        print(f"logical_bytes\t{stats.logical_bytes}")
        print(f"physical_bytes\t{stats.physical_bytes}")
        print(f"stub_bytes\t{stats.stub_bytes}")
        print(f"container_count\t{stats.container_count}")
        print(f"index_entries\t{stats.index_entries}")
        print(f"saving\t{stats.saving:.4f}")
        return EXIT_OK

    if args.command == "serve-store":
        host, port = parse_address(cfg.get("server", "listen"))
        service = StorageService(cfg.get("server", "data_root"),
                                 cfg.get("server", "key_root"),
                                 cfg.getint("server", "container_size"))
        server = FrameServer(service, host, port).start()
        print(f"storage server on {server.address[0]}:{server.address[1]}")
        _serve_until_interrupt(server, service)
        return EXIT_OK

    if args.command == "serve-manager":
        host, port = parse_address(cfg.get("manager", "listen"))
        keypair = ManagerKeyPair.load_or_create(cfg.get("manager", "key_file"))
        service = KeyManagerService(
            keypair,
            rate_capacity=cfg.getint("manager", "rate_capacity"),
            rate_refill=float(cfg.get("manager", "rate_refill")),
            batch_cap=cfg.getint("manager", "batch_cap"))
        server = FrameServer(service, host, port).start()
        print(f"key manager on {server.address[0]}:{server.address[1]}")
        _serve_until_interrupt(server)
        return EXIT_OK

    raise AssertionError(f"unhandled command {args.command}")


def _serve_until_interrupt(server: FrameServer, service=None) -> None:
    import time
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
        if service is not None:
            service.close()


def trace_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="reed-trace")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("replay", help="replay a trace and report savings")
    p.add_argument("trace")
    p.add_argument("--mode", choices=["chunk", "similarity"], required=True)
    p.add_argument("--avg-segment", default="1M")
    p.add_argument("--avg-chunk", default="8192")
    p.add_argument("--report", help="write the TSV report here (default stdout)")
    p.add_argument("--drop-zero", action="store_true",
                   help="filter out zero-filled chunks before replay")

    p = sub.add_parser("gen", help="generate a synthetic trace")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--snapshots", type=int, required=True)
    p.add_argument("--chunks", type=int, required=True)
    p.add_argument("--mutate", type=float, required=True)
    p.add_argument("-o", "--output", help="output path (default stdout)")

    args = parser.parse_args(argv)
    try:
        if args.command == "replay":
            snapshots = traceharness.load_trace(args.trace, args.drop_zero)
            report = traceharness.replay(
                snapshots, args.mode,
                avg_segment_size=parse_size(args.avg_segment),
                avg_chunk_size=parse_size(args.avg_chunk))
            text = report.to_tsv()
            if args.report:
                with open(args.report, "w") as fh:
                    fh.write(text)
            else:
                sys.stdout.write(text)
            return EXIT_OK
        if args.command == "gen":
            trace = traceharness.generate_trace(args.seed, args.snapshots,
                                                args.chunks, args.mutate)
            text = traceharness.format_trace(trace)
            if args.output:
                with open(args.output, "w") as fh:
                    fh.write(text)
            else:
                sys.stdout.write(text)
            return EXIT_OK
    except errors.ReedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
