"""Run metrics: per-SA latency decomposition, rekeys, deliveries, decisions.

Everything a scenario emits funnels through :class:`ScenarioMetrics`; the
finished run is frozen into a :class:`ScenarioResult`, which serializes to
JSON and feeds the CSV report writer.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .dmvpn import DeliveryRecord
from .ike import RekeyRecord, SecurityAssociation


@dataclass
class SaRecord:
    pair: tuple[str, str]
    initiator: str
    mode: str
    source: str
    ppk_id: str | None
    t_sa_init: float
    t_get_key: float
    t_ike_auth: float
    total: float
    created_at: float
    sa_id: str
    rekey: bool


@dataclass
class StreamStats:
    stream: str
    src: str
    dst: str
    sent: int = 0
    delivered: int = 0
    via_hub: int = 0
    direct: int = 0
    decrypt_failures: int = 0
    replay_errors: int = 0
    other_errors: int = 0

    @property
    def not_delivered(self) -> int:
        return self.sent - self.delivered


class ScenarioMetrics:
    def __init__(self) -> None:
        self.sa_records: list[SaRecord] = []
        self.rekey_records: list[RekeyRecord] = []
        self.deliveries: list[DeliveryRecord] = []
        self.hop_events: list[tuple[float, tuple[str, str], int]] = []
        self.decisions: list[dict] = []
        self.buffer_series: list[tuple[float, str, str, int, int]] = []
        self.failures: list[dict] = []
        self.sync_overlaps: list[tuple[str, float, float]] = []
        self.streams: dict[str, StreamStats] = {}
        self._last_hops: dict[tuple[str, str], int] = {}

    # -- recording hooks ---------------------------------------------------

    def record_sa(self, sa: SecurityAssociation, initiator: str) -> None:
        self.sa_records.append(SaRecord(
            pair=sa.tunnel, initiator=initiator,
            mode="PPK" if sa.ppk_used else "ECDH",
            source=sa.source, ppk_id=sa.ppk_id,
            t_sa_init=sa.latency.t_sa_init, t_get_key=sa.latency.t_get_key,
            t_ike_auth=sa.latency.t_ike_auth, total=sa.latency.total,
            created_at=sa.created_at, sa_id=sa.sa_id, rekey=sa.rekey_of is not None,
        ))

    def record_rekey(self, record: RekeyRecord) -> None:
        self.rekey_records.append(record)

    def record_send(self, stream: str, src: str, dst: str) -> None:
        stats = self.streams.setdefault(stream, StreamStats(stream, src, dst))
        stats.sent += 1

    def record_delivery(self, record: DeliveryRecord) -> None:
        self.deliveries.append(record)
        stats = self.streams.setdefault(
            record.stream, StreamStats(record.stream, record.src, record.dst))
        if record.ok:
            stats.delivered += 1
            if record.hops == 2:
                stats.via_hub += 1
            else:
                stats.direct += 1
            pair = tuple(sorted((record.src, record.dst)))
            if self._last_hops.get(pair) != record.hops:
                self._last_hops[pair] = record.hops
                self.hop_events.append((record.delivered_at, pair, record.hops))
        elif record.error == "DecryptFailure":
            stats.decrypt_failures += 1
        elif record.error == "ReplayedSequence":
            stats.replay_errors += 1
        else:
            stats.other_errors += 1

    def record_decision(self, action) -> None:
        self.decisions.append({
            "at": action.at, "pair": list(action.pair),
            "previous": action.previous.value if action.previous else None,
            "source": action.source.value, "reason": action.reason,
        })

    def record_failure(self, what: str, pair: tuple[str, str], message: str,
                       at: float) -> None:
        self.failures.append({"what": what, "pair": list(pair),
                              "message": message, "at": at})

    def record_buffers(self, at: float, node: str, source: str,
                       available: int, reserved: int) -> None:
        self.buffer_series.append((at, node, source, available, reserved))

    def record_sync_overlap(self, ppk_id: str, sync_at: float, fetch_done: float) -> None:
        self.sync_overlaps.append((ppk_id, sync_at, fetch_done))

    # -- summaries ------------------------------------------------------------

    def decrypt_failures(self) -> int:
        return sum(s.decrypt_failures for s in self.streams.values())

    def total_losses(self) -> int:
        return sum(s.not_delivered for s in self.streams.values())


@dataclass
class ScenarioResult:
    name: str
    seed: int
    mode: str
    duration_ms: float
    events_run: int
    sa_records: list[dict]
    rekey_records: list[dict]
    hop_events: list
    decisions: list[dict]
    stream_stats: list[dict]
    buffer_series: list
    failures: list[dict]
    sync_overlaps: list
    decrypt_failures: int
    losses: int

    @classmethod
    def from_metrics(cls, name: str, seed: int, mode: str, duration_ms: float,
                     events_run: int, metrics: ScenarioMetrics) -> "ScenarioResult":
        return cls(
            name=name, seed=seed, mode=mode, duration_ms=duration_ms,
            events_run=events_run,
            sa_records=[{**asdict(r), "pair": list(r.pair)} for r in metrics.sa_records],
            rekey_records=[{**asdict(r), "tunnel": list(r.tunnel)}
                           for r in metrics.rekey_records],
            hop_events=[[t, list(pair), hops] for t, pair, hops in metrics.hop_events],
            decisions=list(metrics.decisions),
            stream_stats=[{**asdict(s), "not_delivered": s.not_delivered}
                          for s in metrics.streams.values()],
            buffer_series=[list(row) for row in metrics.buffer_series],
            failures=list(metrics.failures),
            sync_overlaps=[list(row) for row in metrics.sync_overlaps],
            decrypt_failures=metrics.decrypt_failures(),
            losses=metrics.total_losses(),
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioResult":
        data = json.loads(Path(path).read_text())
        return cls(**data)


@dataclass
class PhaseStats:
    mean: float
    variance: float
    count: int


@dataclass
class MeasurementStats:
    pair: tuple[str, str]
    mode: str
    runs: int
    t_sa_init: PhaseStats
    t_get_key: PhaseStats
    t_ike_auth: PhaseStats
    total: PhaseStats
    records: list[SaRecord]

    @staticmethod
    def phase(values: list[float]) -> PhaseStats:
        n = len(values)
        if n == 0:
            return PhaseStats(0.0, 0.0, 0)
        mean = sum(values) / n
        variance = sum((v - mean) ** 2 for v in values) / n
        return PhaseStats(mean, variance, n)

    @classmethod
    def from_records(cls, pair: tuple[str, str], mode: str,
                     records: list[SaRecord]) -> "MeasurementStats":
        return cls(
            pair=pair, mode=mode, runs=len(records),
            t_sa_init=cls.phase([r.t_sa_init for r in records]),
            t_get_key=cls.phase([r.t_get_key for r in records]),
            t_ike_auth=cls.phase([r.t_ike_auth for r in records]),
            total=cls.phase([r.total for r in records]),
            records=records,
        )
