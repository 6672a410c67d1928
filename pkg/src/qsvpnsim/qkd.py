"""Simulated point-to-point QKD links.

A link produces identical key blocks at both endpoint stores at a configured
secret key rate.  Physics is out of scope: discrete- and continuous-variable
systems differ only in profile metadata and default rates, and channel
degradation is modeled purely as a rate reduction (or outright outage).

Production uses a bit accumulator integrated piecewise over status changes,
so an ``advance`` spanning a scheduled degradation event splits the interval
at the event boundary.  The accumulator is kept in integer microbits to make
quantization deterministic.  Key bytes are a pure function of
``(stream seed, link id, block index)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .crypto import prf_stream
from .errors import AlreadyStarted, LinkUnknown, MalformedBlock
from .keystore import DEFAULT_KEY_LIFETIME_MS, KeyBlock, KeyStore, Technology

DEFAULT_DV_SKR_BPS = 1000
DEFAULT_CV_SKR_BPS = 2000
DEFAULT_BLOCK_BITS = 256

_MICRO = 1_000_000


class LinkStatus(str, Enum):
    UP = "UP"
    DEGRADED = "DEGRADED"
    DOWN = "DOWN"


class EventKind(str, Enum):
    NOISE_INCREASE = "NOISE_INCREASE"
    FIBER_CUT = "FIBER_CUT"
    RECOVERY = "RECOVERY"


@dataclass
class QkdLinkProfile:
    link_id: str
    endpoints: tuple[str, str]
    technology: Technology
    skr_bps: int
    block_size_bits: int = DEFAULT_BLOCK_BITS
    status: LinkStatus = LinkStatus.UP
    degraded_rate_factor: float = 1.0

    def validate(self) -> None:
        if self.skr_bps <= 0:
            raise MalformedBlock(f"link {self.link_id}: skr_bps must be > 0")
        if self.block_size_bits <= 0 or self.block_size_bits % 8 != 0:
            raise MalformedBlock(f"link {self.link_id}: block size must be a positive multiple of 8")
        if not 0.0 < self.degraded_rate_factor <= 1.0:
            raise MalformedBlock(f"link {self.link_id}: rate factor must be in (0, 1]")
        if self.technology not in (Technology.DV_QKD, Technology.CV_QKD):
            raise MalformedBlock(f"link {self.link_id}: not a QKD technology")


@dataclass
class DegradationEvent:
    link_id: str
    kind: EventKind
    at: float
    rate_factor: float = 1.0


StatusCallback = Callable[[str, LinkStatus, float], None]


class QkdLink:
    """One simulated link pair; ``advance`` appends blocks to both stores."""

    def __init__(
        self,
        profile: QkdLinkProfile,
        store_a: KeyStore,
        store_b: KeyStore,
        key_lifetime_ms: float = DEFAULT_KEY_LIFETIME_MS,
        on_status_change: StatusCallback | None = None,
    ) -> None:
        profile.validate()
        self.profile = profile
        self.stores = (store_a, store_b)
        self.key_lifetime_ms = key_lifetime_ms
        self.on_status_change = on_status_change
        self._seed: str | None = None
        self._started = False
        self._t = 0.0
        self._acc_microbits = 0
        self._next_index = 0
        self._pending: list[DegradationEvent] = []

    # -- configuration -------------------------------------------------------

    def seed_stream(self, seed: str | int) -> None:
        """Fix the deterministic key-byte stream; must precede production."""
        if self._started:
            raise AlreadyStarted(f"link {self.profile.link_id} already produced material")
        self._seed = str(seed)

    # -- state ---------------------------------------------------------------

    @property
    def status(self) -> LinkStatus:
        return self.profile.status

    @property
    def effective_rate_bps(self) -> float:
        if self.profile.status is LinkStatus.DOWN:
            return 0.0
        if self.profile.status is LinkStatus.DEGRADED:
            return self.profile.skr_bps * self.profile.degraded_rate_factor
        return float(self.profile.skr_bps)

    @property
    def remainder_bits(self) -> float:
        return self._acc_microbits / _MICRO

    @property
    def blocks_emitted(self) -> int:
        return self._next_index

    # -- operations ------------------------------------------------------------

    def inject_event(self, event: DegradationEvent) -> LinkStatus:
        """Apply (or queue) a degradation event; returns the current status.

        Events timed in the future are queued and applied during the
        ``advance`` that crosses them; events at or before the link's local
        time take effect immediately (production up to the event time is
        integrated first).
        """
        if event.at > self._t:
            self._pending.append(event)
            self._pending.sort(key=lambda e: e.at)
            return self.profile.status
        self._integrate(self._t)
        self._apply(event)
        return self.profile.status

    def advance(self, dt_ms: float) -> list[KeyBlock]:
        """Advance the link's local clock by *dt_ms*, emitting key blocks.

        Emits identical blocks at both endpoint stores; whole blocks only,
        with the sub-block remainder carried in the accumulator.
        """
        if dt_ms <= 0:
            return []
        self._started = True
        target = self._t + dt_ms
        emitted: list[KeyBlock] = []
        while self._pending and self._pending[0].at <= target:
            event = self._pending.pop(0)
            emitted.extend(self._integrate(event.at))
            self._apply(event)
        emitted.extend(self._integrate(target))
        return emitted

    # -- internals ---------------------------------------------------------

    def _integrate(self, until: float) -> list[KeyBlock]:
        dt = until - self._t
        if dt < 0:
            raise LinkUnknown(f"link {self.profile.link_id}: time went backwards")
        self._acc_microbits += int(round(self.effective_rate_bps * dt * 1000.0))
        self._t = until
        block_microbits = self.profile.block_size_bits * _MICRO
        out: list[KeyBlock] = []
        while self._acc_microbits >= block_microbits:
            self._acc_microbits -= block_microbits
            out.append(self._emit_block(until))
        return out

    def _emit_block(self, at: float) -> KeyBlock:
        link_id = self.profile.link_id
        index = self._next_index
        self._next_index += 1
        seed = self._seed if self._seed is not None else "default"
        key_bytes = prf_stream(b"qkd-key", f"{seed}|{link_id}|{index}",
                               self.profile.block_size_bits // 8)
        template = KeyBlock(
            key_id=f"{link_id}.{index:010d}",
            key_bytes=key_bytes,
            origin=link_id,
            technology=self.profile.technology,
            created_at=at,
            expires_at=at + self.key_lifetime_ms,
        )
        for store in self.stores:
            store.ingest(KeyBlock(
                key_id=template.key_id, key_bytes=template.key_bytes,
                origin=template.origin, technology=template.technology,
                created_at=template.created_at, expires_at=template.expires_at,
            ))
        return template

    def _apply(self, event: DegradationEvent) -> None:
        profile = self.profile
        if event.kind is EventKind.FIBER_CUT:
            profile.status = LinkStatus.DOWN
        elif event.kind is EventKind.RECOVERY:
            profile.status = LinkStatus.UP
            profile.degraded_rate_factor = 1.0
        elif event.kind is EventKind.NOISE_INCREASE:
            if not 0.0 < event.rate_factor <= 1.0:
                raise MalformedBlock(f"rate_factor {event.rate_factor} out of (0, 1]")
            profile.status = LinkStatus.DEGRADED
            profile.degraded_rate_factor = event.rate_factor
        if self.on_status_change is not None:
            self.on_status_change(profile.link_id, profile.status, event.at)


class QkdNetwork:
    """Registry of links keyed by link id."""

    def __init__(self) -> None:
        self._links: dict[str, QkdLink] = {}

    def add(self, link: QkdLink) -> None:
        self._links[link.profile.link_id] = link

    def get(self, link_id: str) -> QkdLink:
        if link_id not in self._links:
            raise LinkUnknown(f"unknown QKD link {link_id}")
        return self._links[link_id]

    def advance(self, link_id: str, dt_ms: float) -> list[KeyBlock]:
        return self.get(link_id).advance(dt_ms)

    def advance_all(self, dt_ms: float) -> None:
        for link in self._links.values():
            link.advance(dt_ms)

    def inject_event(self, event: DegradationEvent) -> LinkStatus:
        return self.get(event.link_id).inject_event(event)

    def seed_stream(self, link_id: str, seed: str | int) -> None:
        self.get(link_id).seed_stream(seed)

    @property
    def links(self) -> dict[str, QkdLink]:
        return dict(self._links)
