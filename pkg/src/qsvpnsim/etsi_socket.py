"""Line-oriented JSON socket transport for the delivery endpoints (demo).

One JSON request per line, one JSON response per line, using the same
schema-v1 dicts as the in-process dispatcher.  This exists so the endpoints
are reachable from outside the process for demos; the simulation proper
stays in-process.
"""

from __future__ import annotations

import json
import socket
import socketserver
import threading

from .etsi import Etsi004Endpoint, Etsi014Endpoint, handle_wire


class EtsiRequestHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        for line in self.rfile:
            line = line.strip()
            if not line:
                continue
            try:
                request = json.loads(line)
            except json.JSONDecodeError as exc:
                response = {"status": "BadRequest", "message": str(exc)}
            else:
                response = handle_wire(self.server.endpoint_014,  # type: ignore[attr-defined]
                                       self.server.endpoint_004,  # type: ignore[attr-defined]
                                       request)
            self.wfile.write((json.dumps(response) + "\n").encode())
            self.wfile.flush()


class EtsiServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int],
                 endpoint_014: Etsi014Endpoint | None,
                 endpoint_004: Etsi004Endpoint | None) -> None:
        super().__init__(address, EtsiRequestHandler)
        self.endpoint_014 = endpoint_014
        self.endpoint_004 = endpoint_004


def serve_endpoint(endpoint_014: Etsi014Endpoint | None,
                   endpoint_004: Etsi004Endpoint | None,
                   host: str = "127.0.0.1", port: int = 0,
                   background: bool = False) -> EtsiServer:
    server = EtsiServer((host, port), endpoint_014, endpoint_004)
    if background:
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
    else:
        print(f"serving key-delivery endpoint on {server.server_address}")
        server.serve_forever()
    return server


def request(host: str, port: int, body: dict, timeout: float = 5.0) -> dict:
    """One-shot client helper."""
    with socket.create_connection((host, port), timeout=timeout) as conn:
        conn.sendall((json.dumps(body) + "\n").encode())
        data = b""
        while not data.endswith(b"\n"):
            chunk = conn.recv(65536)
            if not chunk:
                break
            data += chunk
    return json.loads(data.decode())


def serve_scenario_endpoint(scenario: str, node: str, host: str, port: int,
                            seed: int | None = None,
                            prefill_ms: float = 10_000.0) -> None:
    """Build a scenario, produce key material, then serve the node's endpoint."""
    from .scenario import build_network
    from .topology import load_scenario

    cfg = load_scenario(scenario)
    build = build_network(cfg, seed=seed, capture=False)
    for link in build.qkd.links.values():
        link.advance(prefill_ms)
    runtime = build.nodes[node]
    serve_endpoint(runtime.etsi014, runtime.etsi004, host, port)
