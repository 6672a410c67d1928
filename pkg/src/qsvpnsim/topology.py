"""Topology and scenario configuration.

Configs are JSON documents with a published schema (version 1, documented in
docs/config-schema.md).  ``load_topology`` parses, validates the structural
invariants (exactly one hub, no QKD links on PQC-only nodes, no dangling
endpoints, connected transport graph) and returns a typed config.

Calibration: the three delay knobs -- ephemeral-agreement compute, KMS
processing, and the local key-source call -- have global defaults and may be
overridden per node.  The shipped five-node scenario pins them so the
reference latency figures come out at their published means; they are
calibration, not prediction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import DisconnectedTopology, SchemaError
from .keystore import Technology
from .qkd import QkdLinkProfile
from .sdn import Domain, NodeRole, Policy, SourceKind
from .skip import CalibrationDelays
from .transport import pair_key

SCHEMA_VERSION = 1
BUILTIN_SCENARIOS = ("fieldtrial5",)


@dataclass
class NodeConfig:
    node_id: str
    role: NodeRole
    domain: Domain
    nbma: str
    calibration: dict = field(default_factory=dict)


@dataclass
class QkdLinkConfig:
    profile: QkdLinkProfile
    delivery_interface: str = "etsi014"  # which standard shape serves this link


@dataclass
class TransportLinkConfig:
    pair: tuple[str, str]
    one_way_delay_ms: float
    jitter_ms: float = 0.0
    loss_rate: float = 0.0


@dataclass
class PqcConfig:
    params: str = "ML-KEM-1024"
    provider: str = "stub"
    pool_min_blocks: int = 8
    block_bits: int = 256


@dataclass
class TrafficConfig:
    src: str
    dst: str
    start_ms: float
    interval_ms: float
    count: int
    payload_bytes: int = 64
    stream: str = ""


@dataclass
class EventConfig:
    at_ms: float
    kind: str
    link_id: str
    rate_factor: float = 1.0


@dataclass
class TopologyConfig:
    name: str
    seed: int
    duration_ms: float
    warmup_ms: float
    nodes: list[NodeConfig]
    qkd_links: list[QkdLinkConfig]
    transport_links: list[TransportLinkConfig]
    policy: Policy
    pqc: PqcConfig
    calibration: CalibrationDelays
    node_calibration: dict[str, CalibrationDelays]
    events: list[EventConfig]
    traffic: list[TrafficConfig]
    sa_lifetime_s: float = 600.0
    ppk_len: int = 32
    policy_tick_ms: float = 10_000.0
    qkd_tick_ms: float = 1000.0
    key_lifetime_ms: float = 24 * 3600 * 1000.0

    def node(self, node_id: str) -> NodeConfig:
        for node in self.nodes:
            if node.node_id == node_id:
                return node
        raise SchemaError(f"unknown node {node_id}")

    def hub(self) -> NodeConfig:
        return next(n for n in self.nodes if n.role is NodeRole.HUB)

    def spokes(self) -> list[NodeConfig]:
        return [n for n in self.nodes if n.role is NodeRole.SPOKE]

    def calibration_for(self, node_id: str) -> CalibrationDelays:
        return self.node_calibration[node_id]

    def node_pairs(self) -> list[tuple[str, str]]:
        ids = sorted(n.node_id for n in self.nodes)
        return [(a, b) for i, a in enumerate(ids) for b in ids[i + 1:]]


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise SchemaError(f"{where}: missing required field {key!r}")
    return obj[key]


def _parse_nodes(raw: list, where: str) -> list[NodeConfig]:
    nodes = []
    for i, item in enumerate(raw):
        ctx = f"{where}.nodes[{i}]"
        try:
            role = NodeRole(_require(item, "role", ctx))
            domain = Domain(_require(item, "domain", ctx))
        except ValueError as exc:
            raise SchemaError(f"{ctx}: {exc}") from exc
        nodes.append(NodeConfig(
            node_id=_require(item, "node_id", ctx), role=role, domain=domain,
            nbma=item.get("nbma", f"nbma-{item.get('node_id')}"),
            calibration=dict(item.get("calibration", {})),
        ))
    if not nodes:
        raise SchemaError(f"{where}: at least one node required")
    return nodes


def load_topology(source: str | Path | dict) -> TopologyConfig:
    """Parse and validate a topology/scenario document."""
    if isinstance(source, dict):
        raw = source
        where = "<dict>"
    else:
        path = Path(source)
        where = str(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{where}: not valid JSON: {exc}") from exc
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"{where}: unsupported schema_version {version!r} "
                          f"(supported: {SCHEMA_VERSION})")
    nodes = _parse_nodes(_require(raw, "nodes", where), where)
    node_ids = {n.node_id for n in nodes}
    if len(node_ids) != len(nodes):
        raise SchemaError(f"{where}: duplicate node ids")
    hubs = [n for n in nodes if n.role is NodeRole.HUB]
    if len(hubs) != 1:
        raise SchemaError(f"{where}: exactly one HUB required, found {len(hubs)}")

    qkd_links = []
    qkd_by_node: dict[str, list[str]] = {n.node_id: [] for n in nodes}
    for i, item in enumerate(raw.get("qkd_links", [])):
        ctx = f"{where}.qkd_links[{i}]"
        endpoints = tuple(_require(item, "endpoints", ctx))
        if len(endpoints) != 2 or endpoints[0] == endpoints[1]:
            raise SchemaError(f"{ctx}: endpoints must be two distinct nodes")
        for ep in endpoints:
            if ep not in node_ids:
                raise SchemaError(f"{ctx}: endpoint {ep!r} is not a topology node")
        try:
            technology = Technology(_require(item, "technology", ctx))
        except ValueError as exc:
            raise SchemaError(f"{ctx}: {exc}") from exc
        profile = QkdLinkProfile(
            link_id=_require(item, "link_id", ctx),
            endpoints=endpoints,  # type: ignore[arg-type]
            technology=technology,
            skr_bps=_require(item, "skr_bps", ctx),
            block_size_bits=item.get("block_size_bits", 256),
        )
        try:
            profile.validate()
        except Exception as exc:
            raise SchemaError(f"{ctx}: {exc}") from exc
        interface = item.get("delivery_interface", "etsi014")
        if interface not in ("etsi014", "etsi004"):
            raise SchemaError(f"{ctx}: delivery_interface must be etsi014 or etsi004")
        qkd_links.append(QkdLinkConfig(profile, interface))
        for ep in endpoints:
            qkd_by_node[ep].append(profile.link_id)
    for node in nodes:
        if node.domain is Domain.PQC_ONLY and qkd_by_node[node.node_id]:
            raise SchemaError(
                f"{where}: node {node.node_id} is PQC_ONLY but carries QKD links")

    transport = []
    seen_pairs = set()
    for i, item in enumerate(_require(raw, "transport_links", where)):
        ctx = f"{where}.transport_links[{i}]"
        pair = tuple(_require(item, "pair", ctx))
        if len(pair) != 2 or pair[0] == pair[1]:
            raise SchemaError(f"{ctx}: pair must name two distinct nodes")
        for ep in pair:
            if ep not in node_ids:
                raise SchemaError(f"{ctx}: endpoint {ep!r} is not a topology node")
        key = pair_key(*pair)
        if key in seen_pairs:
            raise SchemaError(f"{ctx}: duplicate transport link for pair {key}")
        seen_pairs.add(key)
        loss = item.get("loss_rate", 0.0)
        if not 0.0 <= loss <= 1.0:
            raise SchemaError(f"{ctx}: loss_rate must be within [0, 1]")
        delay = _require(item, "one_way_delay_ms", ctx)
        if delay < 0:
            raise SchemaError(f"{ctx}: negative delay")
        transport.append(TransportLinkConfig(
            pair=key, one_way_delay_ms=delay,
            jitter_ms=item.get("jitter_ms", 0.0), loss_rate=loss,
        ))

    # transport graph must connect every node
    adjacency: dict[str, set[str]] = {n: set() for n in node_ids}
    for link in transport:
        adjacency[link.pair[0]].add(link.pair[1])
        adjacency[link.pair[1]].add(link.pair[0])
    reached = set()
    frontier = [next(iter(node_ids))]
    while frontier:
        current = frontier.pop()
        if current in reached:
            continue
        reached.add(current)
        frontier.extend(adjacency[current] - reached)
    if reached != node_ids:
        missing = sorted(node_ids - reached)
        raise DisconnectedTopology(
            f"{where}: transport graph does not reach {missing}")

    policy_raw = raw.get("policy", {})
    try:
        preference = [SourceKind(p) for p in policy_raw.get("source_preference",
                                                            ["QKD", "PQC"])]
    except ValueError as exc:
        raise SchemaError(f"{where}.policy: {exc}") from exc
    policy = Policy(
        source_preference=preference,
        buffer_threshold_bits=policy_raw.get("buffer_threshold_bits", 512),
        require_ppk=policy_raw.get("require_ppk", True),
        rekey_margin_s=policy_raw.get("rekey_margin_s", 60.0),
        hysteresis_s=policy_raw.get("hysteresis_s", 30.0),
    )
    sa_lifetime_s = policy_raw.get("sa_lifetime_s", 600.0)
    if policy.rekey_margin_s >= sa_lifetime_s:
        raise SchemaError(f"{where}.policy: rekey margin must be below the SA lifetime")
    min_block = min((l.profile.block_size_bits for l in qkd_links), default=256)
    if policy.buffer_threshold_bits < min_block:
        raise SchemaError(f"{where}.policy: buffer threshold below one key block")

    pqc_raw = raw.get("pqc", {})
    pqc = PqcConfig(
        params=pqc_raw.get("params", "ML-KEM-1024"),
        provider=pqc_raw.get("provider", "stub"),
        pool_min_blocks=pqc_raw.get("pool_min_blocks", 8),
        block_bits=pqc_raw.get("block_bits", 256),
    )

    cal_raw = raw.get("calibration", {})
    calibration = CalibrationDelays(
        ecdh_compute_ms=cal_raw.get("ecdh_compute_ms", 10.0),
        kms_processing_ms=cal_raw.get("kms_processing_ms", 260.0),
        skip_local_call_ms=cal_raw.get("skip_local_call_ms", 20.0),
    )
    node_calibration = {}
    for node in nodes:
        merged = {
            "ecdh_compute_ms": calibration.ecdh_compute_ms,
            "kms_processing_ms": calibration.kms_processing_ms,
            "skip_local_call_ms": calibration.skip_local_call_ms,
        }
        merged.update(node.calibration)
        node_calibration[node.node_id] = CalibrationDelays(**merged)

    events = []
    for i, item in enumerate(raw.get("events", [])):
        ctx = f"{where}.events[{i}]"
        kind = _require(item, "kind", ctx)
        if kind not in ("FIBER_CUT", "RECOVERY", "NOISE_INCREASE"):
            raise SchemaError(f"{ctx}: unknown event kind {kind!r}")
        link_id = _require(item, "link_id", ctx)
        if link_id not in {l.profile.link_id for l in qkd_links}:
            raise SchemaError(f"{ctx}: unknown link {link_id!r}")
        events.append(EventConfig(
            at_ms=_require(item, "at_ms", ctx), kind=kind, link_id=link_id,
            rate_factor=item.get("rate_factor", 1.0),
        ))

    traffic = []
    for i, item in enumerate(raw.get("traffic", [])):
        ctx = f"{where}.traffic[{i}]"
        src = _require(item, "src", ctx)
        dst = _require(item, "dst", ctx)
        for ep in (src, dst):
            if ep not in node_ids:
                raise SchemaError(f"{ctx}: endpoint {ep!r} is not a topology node")
        if src == dst:
            raise SchemaError(f"{ctx}: src and dst must differ")
        traffic.append(TrafficConfig(
            src=src, dst=dst, start_ms=item.get("start_ms", 0.0),
            interval_ms=item.get("interval_ms", 1000.0),
            count=item.get("count", 1),
            payload_bytes=item.get("payload_bytes", 64),
            stream=item.get("stream", f"{src}->{dst}"),
        ))

    return TopologyConfig(
        name=raw.get("name", "unnamed"),
        seed=raw.get("seed", 1),
        duration_ms=raw.get("duration_ms", 60_000.0),
        warmup_ms=raw.get("warmup_ms", 5000.0),
        nodes=nodes, qkd_links=qkd_links, transport_links=transport,
        policy=policy, pqc=pqc, calibration=calibration,
        node_calibration=node_calibration, events=events, traffic=traffic,
        sa_lifetime_s=sa_lifetime_s,
        ppk_len=policy_raw.get("ppk_len", 32),
        policy_tick_ms=raw.get("policy_tick_ms", 10_000.0),
        qkd_tick_ms=raw.get("qkd_tick_ms", 1000.0),
        key_lifetime_ms=raw.get("key_lifetime_ms", 24 * 3600 * 1000.0),
    )


def builtin_scenario_path(name: str) -> Path:
    if name not in BUILTIN_SCENARIOS:
        raise SchemaError(f"unknown built-in scenario {name!r} "
                          f"(available: {', '.join(BUILTIN_SCENARIOS)})")
    with resources.as_file(resources.files("qsvpnsim.data") / f"{name}.json") as path:
        return Path(path)


def load_scenario(name_or_path: str | Path) -> TopologyConfig:
    """Load a built-in scenario by name, or any config by path."""
    candidate = Path(str(name_or_path))
    if candidate.exists():
        return load_topology(candidate)
    if str(name_or_path) in BUILTIN_SCENARIOS:
        return load_topology(builtin_scenario_path(str(name_or_path)))
    raise SchemaError(f"no such scenario or file: {name_or_path}")
