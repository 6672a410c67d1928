"""Scenario assembly and execution.

``build_network`` wires the whole stack from a validated topology config:
per-node stores sharing per-pair ledgers, QKD links feeding both endpoint
stores, the controller-plus-agents control plane on the hub, per-pair PQC
pool managers, key-source services with router clients, IKE endpoints and
the overlay routers.  ``run_scenario`` drives the event loop over the
configured duration with production ticks, policy ticks, scripted link
events and traffic streams; ``measure_sa_setup`` runs back-to-back setups
for one pair in a clean network and returns per-phase statistics.

Everything is seeded from the config's RNG seed; two runs with the same
config and seed execute the identical event sequence.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .crypto import prf_stream
from .dmvpn import NhrpServer, OverlayRouter
from .errors import ScenarioPanic
from .etsi import Etsi004Endpoint, Etsi014Endpoint
from .ike import IkeEndpoint
from .kem import KmsInitiator, KmsResponder, PqcPairManager, make_provider
from .keystore import KeyStore, PairLedger, Technology, pair_key
from .metrics import MeasurementStats, ScenarioMetrics, ScenarioResult
from .qkd import DegradationEvent, EventKind, QkdLink, QkdNetwork
from .sdn import Controller, NodeAgent, NodeDescriptor, RelayParticipant, SourceKind
from .sim import Scheduler
from .skip import SkipClient, SkipService
from .topology import TopologyConfig, load_scenario
from .transport import Network, TransportLink

MEASUREMENT_MODES = ("ECDH_ONLY", "PPK", "PPK_QKD", "PPK_PQC")


@dataclass
class NodeRuntime:
    node_id: str
    store: KeyStore
    agent: NodeAgent
    skip_service: SkipService
    skip_client: SkipClient
    ike: IkeEndpoint
    router: OverlayRouter
    etsi014: Etsi014Endpoint | None = None
    etsi004: Etsi004Endpoint | None = None


@dataclass
class NetworkBuild:
    cfg: TopologyConfig
    mode: str
    sched: Scheduler
    net: Network
    controller: Controller
    nodes: dict[str, NodeRuntime]
    qkd: QkdNetwork
    ledgers: dict[tuple[str, str], PairLedger]
    pqc_managers: dict[tuple[str, str], PqcPairManager]
    metrics: ScenarioMetrics
    nhrp: NhrpServer
    seed: int

    def node(self, node_id: str) -> NodeRuntime:
        return self.nodes[node_id]


def _derive_rng(seed: int, name: str) -> random.Random:
    return random.Random(f"{seed}|{name}")


def build_network(cfg: TopologyConfig, seed: int | None = None,
                  mode: str = "PPK", capture: bool = True) -> NetworkBuild:
    seed = cfg.seed if seed is None else seed
    use_ppk = mode != "ECDH_ONLY"
    sched = Scheduler()
    metrics = ScenarioMetrics()
    net = Network(sched, _derive_rng(seed, "net"), capture=capture)
    for link in cfg.transport_links:
        net.add_link(TransportLink(
            pair=link.pair, one_way_delay_ms=link.one_way_delay_ms,
            jitter_ms=link.jitter_ms, loss_rate=link.loss_rate))
    node_ids = sorted(n.node_id for n in cfg.nodes)
    for node_id in node_ids:
        net.attach_rpc_replies(node_id)

    # stores + per-pair ledgers and sources
    stores = {node_id: KeyStore(node_id) for node_id in node_ids}
    ledgers: dict[tuple[str, str], PairLedger] = {}
    relay_sources: dict[tuple[str, str], str] = {}
    pqc_sources: dict[tuple[str, str], str] = {}
    threshold = cfg.policy.buffer_threshold_bits
    for pair in cfg.node_pairs():
        ledger = PairLedger(pair)
        ledgers[pair] = ledger
        relay_sources[pair] = f"relay:{pair[0]}|{pair[1]}"
        pqc_sources[pair] = f"pqc:{pair[0]}|{pair[1]}"
        for node_id in pair:
            stores[node_id].register_pair(pair, ledger)
            stores[node_id].register_source(relay_sources[pair], pair,
                                            technology=Technology.RELAYED)
            stores[node_id].register_source(pqc_sources[pair], pair,
                                            technology=Technology.PQC_KEM)
    for link_cfg in cfg.qkd_links:
        profile = link_cfg.profile
        pair = pair_key(*profile.endpoints)
        for node_id in pair:
            stores[node_id].register_source(profile.link_id, pair,
                                            technology=profile.technology,
                                            threshold_bits=threshold)

    # control plane: controller colocated with the hub
    hub_id = cfg.hub().node_id
    controller = Controller(sched, cfg.policy, net=net, node_id=hub_id,
                            rng=_derive_rng(seed, "controller"))
    qkd_by_node: dict[str, list[str]] = {n: [] for n in node_ids}
    for link_cfg in cfg.qkd_links:
        for endpoint in link_cfg.profile.endpoints:
            qkd_by_node[endpoint].append(link_cfg.profile.link_id)
    for node_cfg in cfg.nodes:
        controller.register_node(NodeDescriptor(
            node_id=node_cfg.node_id, role=node_cfg.role, domain=node_cfg.domain,
            qkd_links=qkd_by_node[node_cfg.node_id],
            skip_address=f"skip://{node_cfg.node_id}",
            agent_session=f"agent-{node_cfg.node_id}"))
    for link_cfg in cfg.qkd_links:
        controller.register_link(link_cfg.profile.link_id, link_cfg.profile.endpoints)
    for pair in cfg.node_pairs():
        controller.watch_pair(pair)

    agents = {
        node_id: NodeAgent(node_id, hub_id, net, sched, stores[node_id],
                           _derive_rng(seed, f"agent/{node_id}"))
        for node_id in node_ids
    }
    for node_id in node_ids:
        RelayParticipant(node_id, hub_id, net, sched, stores[node_id],
                         ledgers, relay_sources, cfg.key_lifetime_ms)

    # QKD links: blocks land at both endpoint stores; both agents report
    qkd = QkdNetwork()
    for link_cfg in cfg.qkd_links:
        profile = link_cfg.profile
        a, b = pair_key(*profile.endpoints)

        def on_status(link_id: str, status, at, _a=a, _b=b) -> None:
            for node_id in (_a, _b):
                stats = stores[node_id].buffer_level(link_id)
                agents[node_id].report_link(link_id, status, stats.available_bits)

        link = QkdLink(profile, stores[a], stores[b],
                       key_lifetime_ms=cfg.key_lifetime_ms,
                       on_status_change=on_status)
        link.seed_stream(f"{seed}/qkd/{profile.link_id}")
        qkd.add(link)

    # PQC plane: responder + initiator per node, a pool manager per pair
    providers = {
        node_id: make_provider(cfg.pqc.provider, cfg.pqc.params,
                               _derive_rng(seed, f"kem/{node_id}"))
        for node_id in node_ids
    }
    responders = {node_id: KmsResponder(node_id, net, providers[node_id])
                  for node_id in node_ids}
    initiators = {node_id: KmsInitiator(node_id, net, sched, providers[node_id])
                  for node_id in node_ids}
    pqc_managers: dict[tuple[str, str], PqcPairManager] = {}
    for pair in cfg.node_pairs():
        psk = prf_stream(b"kms-psk", f"{seed}|{pair[0]}|{pair[1]}", 32)
        for node_id in pair:
            responders[node_id].set_pair(pair, psk, ledgers[pair],
                                         pqc_sources[pair], cfg.key_lifetime_ms)
        pqc_managers[pair] = PqcPairManager(
            net, sched, pair, initiators[pair[0]], psk, ledgers[pair],
            pqc_sources[pair], stores[pair[0]],
            block_bits=cfg.pqc.block_bits,
            pool_min_blocks=cfg.pqc.pool_min_blocks)

    # SKIP services + router clients
    nodes: dict[str, NodeRuntime] = {}
    nhrp = NhrpServer(hub_id, net, sched)
    ike_psk = prf_stream(b"ike-psk", str(seed), 32)
    for node_id in node_ids:
        cal = cfg.calibration_for(node_id)
        service = SkipService(
            node_id, stores[node_id], agents[node_id], net, sched, cal,
            controller_node=hub_id,
            pqc_managers=pqc_managers,
            supported_ppk_lengths=(cfg.ppk_len,),
            default_ppk_len=cfg.ppk_len)
        service.peers = [n for n in node_ids if n != node_id]
        router_psk = prf_stream(b"skip-psk", f"{seed}|{node_id}", 32)
        psk_id = f"router-{node_id}"
        service.register_credential(psk_id, router_psk)
        client = SkipClient(service, client_id=f"router-{node_id}",
                            psk_id=psk_id, psk=router_psk)
        ike = IkeEndpoint(
            node_id, net, sched, _derive_rng(seed, f"ike/{node_id}"),
            psk=ike_psk, cal=cal, dh_name="toy", skip_client=client,
            require_ppk=cfg.policy.require_ppk if use_ppk else False,
            use_ppk_default=use_ppk,
            ppk_len=cfg.ppk_len, lifetime_s=cfg.sa_lifetime_s,
            rekey_margin_s=cfg.policy.rekey_margin_s,
            metrics=metrics)
        node_cfg = cfg.node(node_id)
        router = OverlayRouter(ike, hub_id, node_cfg.nbma, net, sched, metrics)
        nodes[node_id] = NodeRuntime(
            node_id=node_id, store=stores[node_id], agent=agents[node_id],
            skip_service=service, skip_client=client, ike=ike, router=router)

    # standard-shaped delivery endpoints over each QKD link
    for link_cfg in cfg.qkd_links:
        profile = link_cfg.profile
        for end, other in (profile.endpoints, profile.endpoints[::-1]):
            runtime = nodes[end]
            if link_cfg.delivery_interface == "etsi014":
                if runtime.etsi014 is None:
                    runtime.etsi014 = Etsi014Endpoint(stores[end], end, {})
                runtime.etsi014.add_peer(other, profile.link_id)
            else:
                if runtime.etsi004 is None:
                    runtime.etsi004 = Etsi004Endpoint(stores[end], end, {})
                runtime.etsi004.add_peer(other, profile.link_id)

    return NetworkBuild(
        cfg=cfg, mode=mode, sched=sched, net=net, controller=controller,
        nodes=nodes, qkd=qkd, ledgers=ledgers, pqc_managers=pqc_managers,
        metrics=metrics, nhrp=nhrp, seed=seed)


# --- background processes ----------------------------------------------------


def _qkd_tick_loop(build: NetworkBuild):
    tick = build.cfg.qkd_tick_ms
    while True:
        yield tick
        for link_id in sorted(build.qkd.links):
            link = build.qkd.links[link_id]
            link.advance(tick)
            a, b = pair_key(*link.profile.endpoints)
            for node_id in (a, b):
                stats = build.nodes[node_id].store.buffer_level(link_id)
                build.nodes[node_id].agent.report_link(
                    link_id, link.status, stats.available_bits)


def _policy_tick_loop(build: NetworkBuild, first_at: float):
    delay = first_at - build.sched.now
    if delay > 0:
        yield delay
    while True:
        build.controller.policy_tick()
        now = build.sched.now
        for node_id in sorted(build.nodes):
            store = build.nodes[node_id].store
            for source in sorted(store._stats):
                stats = store.buffer_level(source)
                build.metrics.record_buffers(now, node_id, source,
                                             stats.available_bits,
                                             stats.reserved_bits)
        yield build.cfg.policy_tick_ms


def _expiry_loop(build: NetworkBuild, node_id: str):
    while True:
        yield 60_000.0
        build.nodes[node_id].store.expire_sweep(build.sched.now)


def _boot_spoke(build: NetworkBuild, node_id: str):
    runtime = build.nodes[node_id]
    yield from runtime.router.nhrp_register()
    hub = build.controller.node_id
    yield from runtime.ike.establish(hub)
    runtime.ike.start_rekey_loop(hub)


def _traffic_loop(build: NetworkBuild, stream_cfg):
    start_delay = stream_cfg.start_ms - build.sched.now
    if start_delay > 0:
        yield start_delay
    runtime = build.nodes[stream_cfg.src]
    payload_seed = f"{stream_cfg.stream}"
    for seq in range(stream_cfg.count):
        payload = prf_stream(b"payload", f"{payload_seed}|{seq}",
                             stream_cfg.payload_bytes)
        build.metrics.record_send(stream_cfg.stream, stream_cfg.src, stream_cfg.dst)
        try:
            runtime.router.send_app_packet(stream_cfg.dst, payload,
                                           stream=stream_cfg.stream, seq=seq)
        except Exception as exc:  # routed errors count as losses
            build.metrics.record_failure("send", (stream_cfg.src, stream_cfg.dst),
                                         f"{type(exc).__name__}: {exc}",
                                         build.sched.now)
        yield stream_cfg.interval_ms


def _schedule_events(build: NetworkBuild) -> None:
    for event in build.cfg.events:
        degradation = DegradationEvent(
            link_id=event.link_id, kind=EventKind(event.kind),
            at=event.at_ms, rate_factor=event.rate_factor)
        build.sched.call_at(event.at_ms, build.qkd.inject_event, degradation)


def start_background(build: NetworkBuild) -> None:
    """Schedule production, policy, expiry, boot, scripted events, traffic."""
    cfg = build.cfg
    sched = build.sched
    for pair in sorted(build.pqc_managers):
        build.pqc_managers[pair].start()
    sched.spawn(_qkd_tick_loop(build))
    sched.spawn(_policy_tick_loop(build, first_at=max(0.0, cfg.warmup_ms - 1000.0)))
    for node_id in sorted(build.nodes):
        sched.spawn(_expiry_loop(build, node_id))
    hub_id = build.controller.node_id
    for index, node_id in enumerate(sorted(build.nodes)):
        if node_id == hub_id:
            continue
        at = cfg.warmup_ms + 200.0 * index
        sched.call_at(at, lambda n=node_id: sched.spawn(_boot_spoke(build, n)))
    _schedule_events(build)
    for stream_cfg in cfg.traffic:
        sched.spawn(_traffic_loop(build, stream_cfg))


def finalize_checks(build: NetworkBuild) -> None:
    """End-of-run invariant pass; raises ScenarioPanic on breach."""
    for node_id in sorted(build.nodes):
        build.nodes[node_id].store.check_conservation()
    for record in build.metrics.sa_records:
        identity = record.t_sa_init + record.t_get_key + record.t_ike_auth
        if identity != record.total:
            raise ScenarioPanic(
                f"latency decomposition broken for {record.sa_id}: "
                f"{identity} != {record.total}")
    for service_node in sorted(build.nodes):
        service = build.nodes[service_node].skip_service
        for ppk_id, sync_at, fetch_done in service.fetch_log:
            build.metrics.record_sync_overlap(ppk_id, sync_at, fetch_done)
            if sync_at > fetch_done:
                raise ScenarioPanic(
                    f"key-source sync for {ppk_id} completed after the fetch")


def run_scenario(cfg_or_name: TopologyConfig | str, duration_ms: float | None = None,
                 seed: int | None = None, mode: str = "PPK",
                 capture: bool = True) -> ScenarioResult:
    """Build, run and check a full scenario; returns the frozen result."""
    cfg = cfg_or_name if isinstance(cfg_or_name, TopologyConfig) \
        else load_scenario(cfg_or_name)
    if mode not in ("PPK", "ECDH_ONLY"):
        raise ScenarioPanic(f"run mode must be PPK or ECDH_ONLY, got {mode!r}")
    build = build_network(cfg, seed=seed, mode=mode, capture=capture)
    start_background(build)
    duration = cfg.duration_ms if duration_ms is None else duration_ms
    build.sched.run(until=duration)
    finalize_checks(build)
    for action in build.controller.decision_log:
        build.metrics.record_decision(action)
    result = ScenarioResult.from_metrics(
        cfg.name, build.seed, mode, duration, build.sched.events_run, build.metrics)
    return result


def measure_sa_setup(cfg_or_name: TopologyConfig | str, pair: tuple[str, str],
                     mode: str, runs: int, seed: int | None = None,
                     spacing_ms: float = 1000.0) -> MeasurementStats:
    """Back-to-back SA setups for one pair; per-phase mean and variance."""
    cfg = cfg_or_name if isinstance(cfg_or_name, TopologyConfig) \
        else load_scenario(cfg_or_name)
    if mode not in MEASUREMENT_MODES:
        raise ScenarioPanic(f"unknown measurement mode {mode!r}")
    if mode == "PPK_QKD":
        cfg.policy.source_preference = [SourceKind.QKD]
    elif mode == "PPK_PQC":
        cfg.policy.source_preference = [SourceKind.PQC]
    build = build_network(cfg, seed=seed,
                          mode="ECDH_ONLY" if mode == "ECDH_ONLY" else "PPK",
                          capture=False)
    for manager_pair in sorted(build.pqc_managers):
        build.pqc_managers[manager_pair].start()
    build.sched.spawn(_qkd_tick_loop(build))
    build.sched.spawn(_policy_tick_loop(build, first_at=max(0.0, cfg.warmup_ms - 1000.0)))
    initiator, responder = pair
    records = []

    def setups():
        while build.sched.now < cfg.warmup_ms:
            yield cfg.warmup_ms - build.sched.now
        for _ in range(runs):
            sa = yield from build.nodes[initiator].ike.establish(responder)
            records.append(build.metrics.sa_records[-1])
            peer_sa = build.nodes[responder].ike.sas.get(sa.sa_id)
            build.nodes[initiator].ike.delete_sa(sa)
            if peer_sa is not None:
                build.nodes[responder].ike.delete_sa(peer_sa)
            yield spacing_ms

    proc = build.sched.spawn(setups())
    build.sched.run_until_complete(
        proc, limit=cfg.warmup_ms + runs * (spacing_ms + 10_000.0))
    if proc.error is not None:
        raise proc.error
    if not proc.done:
        raise ScenarioPanic(f"measurement did not finish {runs} setups")
    finalize_checks(build)
    return MeasurementStats.from_records(pair_key(*pair), mode, records)
