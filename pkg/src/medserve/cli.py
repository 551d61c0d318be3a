"""Command-line entry points for every service and tool in the stack."""

from __future__ import annotations

import argparse
import asyncio
import json
import os
import sys
import time
from pathlib import Path

from .batching import BatchPolicy
from .gateway import Gateway, GatewayConfig, RetryPolicy
from .hpa import (
    HPAConfig,
    ReplicaPoolModel,
    emit_timeline,
    plot_timeline,
    simulate,
)
from .loadgen import LoadgenError, LoadProfile, load_corpus, run_closed_loop
from .matrix import default_config_json, load_matrix_config, run_matrix
from .phi_service import PhiService
from .report import emit_report
from .server import InferenceServer, ServerConfig, load_server_config
from .tokens import AUTH_KEY_ENV, sign_token


def _env_int(name: str, default: int) -> int:
    return int(os.environ.get(name, default))


def server_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="medserve-server",
        description="Dynamic-batching inference server (HTTP + framed RPC + metrics)",
    )
    parser.add_argument("--registry", required=True, help="model registry root directory")
    parser.add_argument("--config", help="flat key=value config file (batch.*, executors.*)")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port-http", type=int, default=_env_int("SRV_PORT_HTTP", 8000))
    parser.add_argument("--port-rpc", type=int, default=_env_int("SRV_PORT_RPC", 8001))
    parser.add_argument("--port-metrics", type=int, default=_env_int("SRV_PORT_METRICS", 8002))
    args = parser.parse_args(argv)

    if args.config:
        config = load_server_config(
            args.config,
            args.registry,
            host=args.host,
            http_port=args.port_http,
            rpc_port=args.port_rpc,
            metrics_port=args.port_metrics,
        )
    else:
        config = ServerConfig(
            registry_root=args.registry,
            host=args.host,
            http_port=args.port_http,
            rpc_port=args.port_rpc,
            metrics_port=args.port_metrics,
            policy=BatchPolicy(max_batch_size=1, max_queue_delay_ms=5.0),
        )

    async def main() -> None:
        server = InferenceServer(config)
        async for _ in _aiter_serve(server):
            print(
                f"medserve-server ready http={config.host}:{server.http_port} "
                f"rpc={config.host}:{server.rpc_port} "
                f"metrics={config.host}:{server.metrics_port}",
                flush=True,
            )

    asyncio.run(main())
    return 0


async def _aiter_serve(*services):
    """Start services, yield once, then block until a termination signal."""
    import signal

    loop = asyncio.get_running_loop()
    stop = asyncio.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, stop.set)
    for svc in services:
        await svc.start()
    yield None
    await stop.wait()
    for svc in reversed(services):
        await svc.stop()


def gateway_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="medserve-gateway",
        description="Authenticating gateway with identifier scrubbing",
    )
    parser.add_argument("--listen-port", type=int, default=9000)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--upstream", required=True, help="inference server as host:port")
    parser.add_argument("--model", default="sentiment", help="model name to invoke upstream")
    parser.add_argument(
        "--phi-mode", choices=("inline", "remote"), default="inline",
        help="scrub in-process or call the preprocess service",
    )
    parser.add_argument("--phi-url", default="127.0.0.1:9100", help="preprocess service host:port")
    parser.add_argument("--max-retries", type=int, default=2)
    parser.add_argument("--per-try-timeout-ms", type=float, default=2000.0)
    parser.add_argument("--total-timeout-ms", type=float, default=5000.0)
    parser.add_argument("--backoff-ms", type=float, default=50.0)
    args = parser.parse_args(argv)

    up_host, _, up_port = args.upstream.rpartition(":")
    phi_host, _, phi_port = args.phi_url.rpartition(":")
    config = GatewayConfig(
        upstream_host=up_host or "127.0.0.1",
        upstream_port=int(up_port),
        host=args.host,
        listen_port=args.listen_port,
        model=args.model,
        phi_mode=args.phi_mode,
        phi_host=phi_host or "127.0.0.1",
        phi_port=int(phi_port),
        retry=RetryPolicy(
            max_retries=args.max_retries,
            per_try_timeout_ms=args.per_try_timeout_ms,
            total_timeout_ms=args.total_timeout_ms,
            backoff_ms=args.backoff_ms,
        ),
    )

    async def main() -> None:
        gateway = Gateway(config)
        async for _ in _aiter_serve(gateway):
            print(f"medserve-gateway ready http={config.host}:{gateway.port}", flush=True)

    asyncio.run(main())
    return 0


def phi_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="medserve-phi", description="Identifier scrubbing / normalization service"
    )
    parser.add_argument("--listen-port", type=int, default=9100)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--max-seq-len", type=int, default=128)
    args = parser.parse_args(argv)

    async def main() -> None:
        service = PhiService(args.host, args.listen_port, args.max_seq_len)
        async for _ in _aiter_serve(service):
            print(f"medserve-phi ready http={args.host}:{service.port}", flush=True)

    asyncio.run(main())
    return 0


def token_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="medserve-token", description="Mint a signed bearer token"
    )
    parser.add_argument("--sub", default="loadgen")
    parser.add_argument("--scope", default="infer")
    parser.add_argument("--ttl", type=int, default=3600, help="lifetime in seconds")
    parser.add_argument(
        "--key", help=f"signing key (default: ${AUTH_KEY_ENV})", default=None
    )
    args = parser.parse_args(argv)
    key = args.key if args.key is not None else os.environ.get(AUTH_KEY_ENV, "")
    if not key:
        print(f"error: no key; pass --key or set {AUTH_KEY_ENV}", file=sys.stderr)
        return 2
    print(sign_token(key.encode("utf-8"), args.sub, args.scope, int(time.time()) + args.ttl))
    return 0


def loadgen_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="loadgen", description="Closed-loop load generator")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="single load run against one target")
    run_p.add_argument("--users", type=int, required=True)
    run_p.add_argument("--duration", type=float, default=60.0, help="seconds")
    run_p.add_argument("--warmup", type=float, default=5.0, help="seconds excluded from stats")
    run_p.add_argument("--target", required=True, help="http://host:port/path or host:port for rpc")
    run_p.add_argument("--protocol", choices=("http", "rpc"), default="http")
    run_p.add_argument("--corpus", required=True, help="file with one JSON body per line")
    run_p.add_argument("--token-file", help="bearer token file (gateway targets)")
    run_p.add_argument("--metrics-url", help="scrape batch stats from this /metrics URL")
    run_p.add_argument("--health-url", help="poll this URL for readiness (use with rpc targets)")
    run_p.add_argument("--label", default="run", help="framework_mode label in the report")
    run_p.add_argument("--batch", type=int, default=1, help="batch column in the report")
    run_p.add_argument("--out", required=True, help="report output directory")

    matrix_p = sub.add_parser("matrix", help="run the full benchmark matrix")
    matrix_p.add_argument("--config", help="matrix config JSON (default: built-in matrix)")
    matrix_p.add_argument("--out", required=True, help="report output directory")

    init_p = sub.add_parser("init-config", help="write the default matrix config")
    init_p.add_argument("--out", required=True, help="path for the config JSON")

    args = parser.parse_args(argv)

    if args.command == "init-config":
        Path(args.out).write_text(default_config_json() + "\n", encoding="utf-8")
        print(f"wrote {args.out}")
        return 0

    try:
        if args.command == "run":
            token = None
            if args.token_file:
                token = Path(args.token_file).read_text(encoding="utf-8").strip()
            profile = LoadProfile(
                target=args.target,
                users=args.users,
                duration_s=args.duration,
                warmup_s=args.warmup,
                protocol=args.protocol,
                corpus=load_corpus(args.corpus),
                token=token,
                metrics_url=args.metrics_url,
                health_url=args.health_url,
                label=args.label,
                batch=args.batch,
            )
            report = asyncio.run(run_closed_loop(profile))
            emit_report([report], args.out)
            print(
                f"{report.label}: p50={report.p50_ms:.1f}ms p95={report.p95_ms:.1f}ms "
                f"rps={report.throughput_rps:.1f} outcomes={report.outcome_counts}"
            )
            print(f"report written to {args.out}")
            return 0
        config = load_matrix_config(args.config) if args.config else None
        from .matrix import MatrixConfig

        run_matrix(config or MatrixConfig(), args.out)
        print(f"report written to {args.out}")
        return 0
    except LoadgenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def hpasim_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="hpasim", description="Replica autoscaler simulation over a load trace"
    )
    parser.add_argument("--trace", required=True, help="CSV of time_s,offered_rps")
    parser.add_argument("--capacity-rps", type=float, required=True)
    parser.add_argument("--min", type=int, default=2)
    parser.add_argument("--max", type=int, default=10)
    parser.add_argument("--target", type=float, default=0.60)
    parser.add_argument("--tolerance", type=float, default=0.10)
    parser.add_argument("--sync-period", type=float, default=15.0)
    parser.add_argument("--readiness-delay", type=float, default=10.0)
    parser.add_argument("--stabilization", type=float, default=300.0)
    parser.add_argument("--initial", type=int, default=None, help="default: --min")
    parser.add_argument("--duration", type=float, default=None)
    parser.add_argument("--out", required=True, help="timeline CSV path")
    parser.add_argument("--plot", help="also render a PNG of the timeline")
    args = parser.parse_args(argv)

    trace = []
    for lineno, line in enumerate(Path(args.trace).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        t, _, rps = line.partition(",")
        if lineno == 1 and not t.replace(".", "", 1).isdigit():
            continue  # header row
        trace.append((float(t), float(rps)))
    if not trace:
        print("error: trace file has no data rows", file=sys.stderr)
        return 1

    cfg = HPAConfig(
        min_replicas=args.min,
        max_replicas=args.max,
        target_utilization=args.target,
        tolerance=args.tolerance,
        sync_period_s=args.sync_period,
        scale_down_stabilization_s=args.stabilization,
    )
    pool = ReplicaPoolModel(
        per_replica_capacity_rps=args.capacity_rps,
        initial_replicas=args.initial if args.initial is not None else args.min,
        readiness_delay_s=args.readiness_delay,
    )
    rows = simulate(trace, pool, cfg, args.duration)
    emit_timeline(rows, args.out)
    print(f"timeline written to {args.out} ({len(rows)} rows)")
    if args.plot:
        plot_timeline(rows, args.plot)
        print(f"plot written to {args.plot}")
    return 0


_COMMANDS = {
    "server": server_main,
    "gateway": gateway_main,
    "phi": phi_main,
    "token": token_main,
    "loadgen": loadgen_main,
    "hpasim": hpasim_main,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if not argv or argv[0] not in _COMMANDS:
        names = ", ".join(_COMMANDS)
        print(f"usage: python -m medserve {{{names}}} ...", file=sys.stderr)
        return 2
    return _COMMANDS[argv[0]](argv[1:])
