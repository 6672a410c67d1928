"""Deterministic desk-scale simulator for hybrid quantum-safe VPN key
orchestration: simulated QKD links and a PQC encapsulation channel feed
per-node key stores, a centralized controller plans key paths (direct,
hub-relayed, or PQC) with failover, and a simplified IKEv2 state machine
with preshared-key mixing drives a hub-and-spoke overlay with on-demand
direct tunnels."""

from .errors import QsVpnError
from .metrics import MeasurementStats, ScenarioResult
from .scenario import build_network, measure_sa_setup, run_scenario
from .topology import TopologyConfig, load_scenario, load_topology

__version__ = "0.1.0"

__all__ = [
    "QsVpnError",
    "MeasurementStats",
    "ScenarioResult",
    "TopologyConfig",
    "build_network",
    "load_scenario",
    "load_topology",
    "measure_sa_setup",
    "run_scenario",
    "__version__",
]
