"""Service mode: the same network core paced on the wall clock, with one
ETSI 014 HTTP endpoint per KME."""

from __future__ import annotations

import json
import logging
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import uvicorn

from .api import HttpKmsClient, LocalKmsClient, create_app
from .consumers import InvariantViolation
from .events import EventLog
from .report import emit_report
from .scenario import ScenarioConfig
from .simulation import Network, build_network, check_invariants, schedule

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_INVARIANT = 2
EXIT_INTERRUPTED = 3


class StartupError(RuntimeError):
    pass


class WallClockLog(EventLog):
    """Event log that also stamps each record with elapsed wall time."""

    def __init__(self, sink=None) -> None:
        super().__init__(sink)
        self._t0 = time.monotonic()

    def emit(self, time_s, kind, payload):
        payload = dict(payload)
        payload["wall_s"] = round(time.monotonic() - self._t0, 6)
        return super().emit(time_s, kind, payload)


def bind_sockets(host: str, ports: list[int]) -> list[socket.socket]:
    """Bind every port up front; on any failure close what was opened."""
    socks: list[socket.socket] = []
    try:
        for port in ports:
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            # accepted sockets inherit this; uvicorn writes headers and body separately
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            try:
                s.bind((host, port))
            except OSError as exc:
                s.close()
                raise StartupError(f"cannot bind {host}:{port}: {exc.strerror or exc}") from None
            s.listen(128)
            socks.append(s)
    except StartupError:
        for s in socks:
            s.close()
        raise
    return socks


@dataclass
class Service:
    network: Network
    servers: list[uvicorn.Server] = field(default_factory=list)
    threads: list[threading.Thread] = field(default_factory=list)
    sockets: list[socket.socket] = field(default_factory=list)
    urls: dict[str, str] = field(default_factory=dict)

    def shutdown(self) -> None:
        for srv in self.servers:
            srv.should_exit = True
        for t in self.threads:
            t.join(timeout=5)
        for s in self.sockets:
            try:
                s.close()
            except OSError:
                pass


def start_service(
    config: ScenarioConfig,
    log: EventLog,
    host: str = "127.0.0.1",
    base_port: int = 0,
    consumers: str = "http",
) -> Service:
    """Bind and start one HTTP server per KME, then wire the network to them.

    ``base_port=0`` picks free ports.  ``consumers`` selects how the
    scenario's own consumers reach the KMS: ``http``, ``local`` or ``none``.
    """
    kme_ids = sorted(set(config.kme_ids.values()))
    ports = [0 if base_port == 0 else base_port + i for i in range(len(kme_ids))]
    socks = bind_sockets(host, ports)

    net = build_network(config, log=log)
    service = Service(net, sockets=socks)
    try:
        for kme_id, sock in zip(kme_ids, socks):
            port = sock.getsockname()[1]
            service.urls[kme_id] = f"http://{host}:{port}"
            app = create_app(net.kms, kme_id)
            server = uvicorn.Server(uvicorn.Config(app, log_level="warning", lifespan="off"))
            t = threading.Thread(target=server.run, kwargs={"sockets": [sock]}, daemon=True, name=f"kme-{kme_id}")
            t.start()
            service.servers.append(server)
            service.threads.append(t)
        deadline = time.monotonic() + 10
        while not all(s.started for s in service.servers):
            if time.monotonic() > deadline or not all(t.is_alive() for t in service.threads):
                raise StartupError("KME servers failed to start")
            time.sleep(0.01)
    except BaseException:
        service.shutdown()
        raise

    if consumers == "http":
        master_urls, slave_urls = {}, {}
        for store in net.kms.stores.values():
            b = store.binding
            master_urls[b.slave_sae_id] = service.urls[b.source_kme_id]
            slave_urls[b.master_sae_id] = service.urls[b.target_kme_id]
        client = HttpKmsClient(master_urls, slave_urls)
        for c in net.consumers:
            c.client = client
            c.measure_wall_time = True
    elif consumers == "local":
        client = LocalKmsClient(net.kms)
        for c in net.consumers:
            c.client = client
    else:
        net.consumers.clear()
    return service


def serve(
    config: ScenarioConfig,
    time_scale: float = 1.0,
    out_dir: str | Path | None = None,
    host: str = "127.0.0.1",
    base_port: int = 0,
    duration: float | None = None,
    consumers: str = "http",
    stop: threading.Event | None = None,
    on_ready=None,
) -> int:
    """Run the network in service mode; returns a process exit code."""
    if time_scale <= 0:
        raise ValueError("time_scale must be positive")
    stop = stop or threading.Event()
    out = Path(out_dir) if out_dir is not None else None
    sink = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        sink = open(out / "events.jsonl", "w", encoding="utf-8", buffering=1)
    log = WallClockLog(sink)
    try:
        service = start_service(config, log, host, base_port, consumers)
    except StartupError:
        if sink:
            sink.close()
        raise
    net = service.network
    if out is not None:
        (out / "endpoints.json").write_text(json.dumps(service.urls, indent=2, sort_keys=True) + "\n")
        net.registry.save(out / "puf_registry.jsonl")
    logger.info("KME endpoints: %s", service.urls)
    if on_ready is not None:
        on_ready(service)

    code = EXIT_OK
    try:
        schedule(net)
        until = config.duration_s if duration is None else duration
        finished = net.clock.run_realtime(until, time_scale, stop)
        if not finished:
            code = EXIT_INTERRUPTED
        try:
            check_invariants(net, log.records)
        except InvariantViolation as exc:
            logger.error("invariant violated: %s", exc)
            code = EXIT_INVARIANT
    finally:
        service.shutdown()
        log.flush()
        if sink:
            sink.close()
        if out is not None:
            emit_report(log.records, out, config)
    return code
