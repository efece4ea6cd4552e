"""Real-socket stats transport for worker nodes.

A worker answers newline-delimited JSON requests on TCP. The only request
the head needs is ``{"op": "stats"}``; the reply carries the node's
:class:`~sandmesh.mesh.NodeStats` fields. :func:`query_stats` fans a request
out to a list of workers and keeps the replies that arrive in time, sorted
by node id like the simulated broadcast.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import socketserver
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from typing import Callable

from sandmesh.mesh import NodeStats

log = logging.getLogger(__name__)


def parse_addr(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


def local_stats(node_id: str, max_vms: int = 3, active_vms: int = 0) -> NodeStats:
    """Stats for this machine from /proc (falls back to zeros elsewhere)."""
    total = free = 0.0
    try:
        with open("/proc/meminfo", encoding="ascii") as fh:
            info = {line.split(":")[0]: float(line.split()[1]) / 1024.0 for line in fh}
        total = info.get("MemTotal", 0.0)
        free = min(total, info.get("MemAvailable", info.get("MemFree", 0.0)))
    except OSError:
        pass
    try:
        load = os.getloadavg()[0]
    except OSError:
        load = 0.0
    return NodeStats(node_id, total, free, load, active_vms, max_vms)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        for raw in self.rfile:
            try:
                req = json.loads(raw)
            except json.JSONDecodeError:
                self._reply({"error": "bad json"})
                continue
            if req.get("op") == "stats":
                self._reply(asdict(self.server.stats_fn()))
            else:
                self._reply({"error": f"unknown op {req.get('op')!r}"})

    def _reply(self, doc: dict) -> None:
        self.wfile.write((json.dumps(doc, sort_keys=True) + "\n").encode())
        self.wfile.flush()


class NodeServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr: tuple[str, int], stats_fn: Callable[[], NodeStats]) -> None:
        super().__init__(addr, _Handler)
        self.stats_fn = stats_fn

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t


def _ask(addr: str, timeout_s: float) -> NodeStats | None:
    try:
        with socket.create_connection(parse_addr(addr), timeout=timeout_s) as sock:
            sock.settimeout(timeout_s)
            sock.sendall(b'{"op": "stats"}\n')
            buf = b""
            while not buf.endswith(b"\n"):
                chunk = sock.recv(4096)
                if not chunk:
                    return None
                buf += chunk
        return NodeStats(**json.loads(buf))
    except (OSError, ValueError, TypeError) as exc:
        log.debug("no stats from %s: %s", addr, exc)
        return None


def query_stats(addrs: list[str], timeout_s: float) -> list[NodeStats]:
    """Broadcast a stats request; silent or broken workers are left out."""
    if not addrs:
        return []
    with ThreadPoolExecutor(max_workers=min(32, len(addrs))) as pool:
        replies = list(pool.map(lambda a: _ask(a, timeout_s), addrs))
    return sorted((r for r in replies if r is not None), key=lambda s: s.node)
