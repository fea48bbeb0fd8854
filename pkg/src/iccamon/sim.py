"""Deterministic virtual sensor stations.

Each node executes the firmware loop — read sensors, store locally, show
on the display, format the frame, send, wait — against a simulated clock,
so a 24-hour deployment replays in well under a second and every byte it
emits is a pure function of (scenario set, seed, horizon).

The generated signal follows the observed field behaviour: particulate
levels rise in the morning and evening traffic peaks, fall at night, and
drop to their lowest right after a rain, recovering gradually. Sensor
noise is a uniform ±fraction per channel, and readings pass through the
binary sensor codec so the values on the wire are exactly the quantized
values a hardware node would report.
"""

from __future__ import annotations

import json
import logging
import math
import random
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterator

import requests

from .sensor import PmFrame, decode_pm_frame, decode_temp, encode_pm_frame, encode_temp
from .store import StationRecord
from .telemetry import TelemetryFrame, serialize

logger = logging.getLogger(__name__)

DAY_S = 24 * 3600


@dataclass(frozen=True)
class RainEvent:
    start_ts: int
    duration_s: int
    attenuation: float

    def __post_init__(self):
        if not 0.0 < self.attenuation <= 1.0:
            raise ValueError(f"attenuation must be in (0, 1], got {self.attenuation}")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")


@dataclass(frozen=True)
class Scenario:
    label: str
    base_pm25: float
    base_pm10: float
    traffic_amplitude: float = 0.0
    peak_morning_h: float = 8.0
    peak_evening_h: float = 18.0
    peak_width_h: float = 2.0
    rain: tuple[RainEvent, ...] = ()
    rain_recovery_s: int = 7200
    temp_base_c: float = 24.0
    temp_amplitude_c: float = 6.0
    noise: float = 0.10

    def __post_init__(self):
        if not 0.0 <= self.noise <= 0.5:
            raise ValueError(f"noise must be in [0, 0.5], got {self.noise}")
        if self.base_pm25 < 0 or self.base_pm10 < 0 or self.traffic_amplitude < 0:
            raise ValueError("PM baselines and amplitude must be >= 0")
        if self.peak_width_h <= 0:
            raise ValueError("peak_width_h must be positive")


def _hour_of_day(ts: float) -> float:
    return (ts % DAY_S) / 3600.0


def _circular_hours(a: float, b: float) -> float:
    d = abs(a - b) % 24.0
    return min(d, 24.0 - d)


def _bump(hour: float, center: float, width: float) -> float:
    d = _circular_hours(hour, center)
    return math.exp(-0.5 * (d / width) ** 2)


_peak_norm_cache: dict[tuple[float, float, float], float] = {}


def _diurnal(scenario: Scenario, ts: float) -> float:
    """Double-peak traffic profile, normalized to unit maximum."""
    key = (scenario.peak_morning_h, scenario.peak_evening_h, scenario.peak_width_h)
    peak = _peak_norm_cache.get(key)
    if peak is None:
        peak = max(
            _bump(minute / 60.0, key[0], key[2]) + _bump(minute / 60.0, key[1], key[2])
            for minute in range(24 * 60)
        )
        _peak_norm_cache[key] = peak
    hour = _hour_of_day(ts)
    return (_bump(hour, key[0], key[2]) + _bump(hour, key[1], key[2])) / peak


def _rain_factor(scenario: Scenario, ts: float) -> float:
    """Multiplicative washout: the full attenuation during an event, then a
    linear recovery back to 1 over rain_recovery_s."""
    factor = 1.0
    for ev in scenario.rain:
        end = ev.start_ts + ev.duration_s
        if ev.start_ts <= ts < end:
            factor *= ev.attenuation
        elif end <= ts < end + scenario.rain_recovery_s:
            progress = (ts - end) / scenario.rain_recovery_s
            factor *= ev.attenuation + (1.0 - ev.attenuation) * progress
    return factor


def true_signal(scenario: Scenario, ts: float) -> tuple[float, float, float]:
    """Noise-free (pm25, pm10, temp_c) at a simulation timestamp."""
    d = _diurnal(scenario, ts) if scenario.traffic_amplitude else 0.0
    r = _rain_factor(scenario, ts)
    pm25 = max(scenario.base_pm25 + scenario.traffic_amplitude * d, 0.0) * r
    pm10 = max(scenario.base_pm10 + scenario.traffic_amplitude * d, 0.0) * r
    hour = _hour_of_day(ts)
    temp = scenario.temp_base_c + scenario.temp_amplitude_c * math.sin(
        2.0 * math.pi * (hour - 9.0) / 24.0
    )
    return pm25, pm10, temp


def sample(scenario: Scenario, ts: float, rng: random.Random) -> tuple[float, float, float]:
    """One noisy reading: each channel scaled by (1 + u), u ~ U[-noise, +noise]."""
    pm25, pm10, temp = true_signal(scenario, ts)
    n = scenario.noise

    def jitter(v: float) -> float:
        return max(v * (1.0 + rng.uniform(-n, n)), 0.0)

    return jitter(pm25), jitter(pm10), jitter(temp)


class Phase(Enum):
    CONFIGURE = "configure"
    READ = "read"
    STORE_LOCAL = "store_local"
    DISPLAY = "display"
    FORMAT = "format"
    SEND = "send"
    WAIT = "wait"


_CYCLE = (Phase.READ, Phase.STORE_LOCAL, Phase.DISPLAY, Phase.FORMAT, Phase.SEND, Phase.WAIT)


def verify_phase_trace(trace: list[Phase]) -> None:
    """Assert a node's executed phases follow Configure, then whole cycles."""
    if not trace:
        return
    if trace[0] is not Phase.CONFIGURE:
        raise AssertionError(f"trace must start with CONFIGURE, got {trace[0]}")
    body = trace[1:]
    for i, phase in enumerate(body):
        expected = _CYCLE[i % len(_CYCLE)]
        if phase is not expected:
            raise AssertionError(f"phase {i + 1}: expected {expected}, got {phase}")


@dataclass(frozen=True)
class Reading:
    ts: int
    pm25: int
    pm10: int
    temp_c: float


@dataclass
class StepResult:
    phase: Phase
    display_line: str | None = None
    delivered: int = 0
    failed: bool = False


@dataclass
class NodeCounters:
    generated: int = 0
    delivered: int = 0
    failed_attempts: int = 0
    dropped: int = 0


class Node:
    """One virtual station running the firmware loop on the sim clock."""

    def __init__(
        self,
        station: StationRecord,
        scenario: Scenario,
        seed: int,
        start_ts: int,
        buffer_cap: int | None = None,
    ):
        self.station = station
        self.scenario = scenario
        self.rng = random.Random(f"{seed}:{station.station_id}")
        self.clock = start_ts
        self.phase = Phase.CONFIGURE
        self.buffer: deque[TelemetryFrame] = deque()
        self.buffer_cap = buffer_cap
        self.seq = 0
        self.local_log: list[Reading] = []
        self.counters = NodeCounters()
        self.trace: list[Phase] = []
        self._reading: Reading | None = None

    def step(self, transport) -> StepResult:
        """Execute the current phase and advance to the next."""
        phase = self.phase
        self.trace.append(phase)
        result = StepResult(phase=phase)

        if phase is Phase.CONFIGURE:
            self.phase = Phase.READ

        elif phase is Phase.READ:
            self._reading = self._read_sensors()
            self.phase = Phase.STORE_LOCAL

        elif phase is Phase.STORE_LOCAL:
            self.local_log.append(self._reading)
            self.phase = Phase.DISPLAY

        elif phase is Phase.DISPLAY:
            r = self._reading
            result.display_line = (
                f"[{self.station.station_id}] ts={r.ts} "
                f"PM2.5={r.pm25} ug/m3 PM10={r.pm10} ug/m3 T={r.temp_c:.4f} C"
            )
            logger.debug("%s", result.display_line)
            self.phase = Phase.FORMAT

        elif phase is Phase.FORMAT:
            self.seq += 1
            r = self._reading
            self.buffer.append(
                TelemetryFrame(
                    station_id=self.station.station_id,
                    token=self.station.token,
                    seq=self.seq,
                    ts=r.ts,
                    pm25=float(r.pm25),
                    pm10=float(r.pm10),
                    temp_c=r.temp_c,
                )
            )
            self.counters.generated += 1
            if self.buffer_cap is not None and len(self.buffer) > self.buffer_cap:
                self.buffer.popleft()
                self.counters.dropped += 1
            self.phase = Phase.SEND

        elif phase is Phase.SEND:
            # drain the buffer head-first; on failure frames stay queued for
            # catch-up on a later cycle
            while self.buffer:
                if transport.send(self.buffer[0], now=self.clock):
                    self.buffer.popleft()
                    result.delivered += 1
                    self.counters.delivered += 1
                else:
                    self.counters.failed_attempts += 1
                    result.failed = True
                    break
            self.phase = Phase.WAIT

        elif phase is Phase.WAIT:
            self.clock += self.station.report_period_s
            self.phase = Phase.READ

        return result

    def run_cycle(self, transport) -> list[StepResult]:
        """Steps through one whole firmware cycle (ending after WAIT)."""
        results = []
        while True:
            result = self.step(transport)
            results.append(result)
            if result.phase is Phase.WAIT:
                return results

    def _read_sensors(self) -> Reading:
        ts = self.clock
        raw25, raw10, rawt = sample(self.scenario, ts, self.rng)
        # quantize at the sensor boundary, then cross the binary codec so
        # the wire emulation is exercised on every read
        frame = PmFrame(
            pm1_0_std=_u16(raw25 * 0.6),
            pm2_5_std=_u16(raw25),
            pm10_std=_u16(raw10),
            pm1_0_atm=_u16(raw25 * 0.6),
            pm2_5_atm=_u16(raw25),
            pm10_atm=_u16(raw10),
        )
        decoded = decode_pm_frame(encode_pm_frame(frame))
        temp = decode_temp(encode_temp(rawt))
        return Reading(ts=ts, pm25=decoded.pm2_5_std, pm10=decoded.pm10_std, temp_c=temp)

    def check_conservation(self) -> None:
        c = self.counters
        if c.generated != c.delivered + len(self.buffer) + c.dropped:
            raise AssertionError(
                f"{self.station.station_id}: generated {c.generated} != delivered "
                f"{c.delivered} + buffered {len(self.buffer)} + dropped {c.dropped}"
            )


def _u16(v: float) -> int:
    return max(0, min(0xFFFF, round(v)))


# -- transports --------------------------------------------------------------


class OfflineFileTransport:
    """Writes frames to an NDJSON file for later replay; never fails."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh = open(self.path, "w", encoding="utf-8")

    def send(self, frame: TelemetryFrame, now: int) -> bool:
        self._fh.write(serialize(frame) + "\n")
        return True

    def close(self) -> None:
        self._fh.flush()
        self._fh.close()


class HttpTransport:
    """Delivers frames to a running ingestion server."""

    def __init__(self, base_url: str, timeout: float = 5.0):
        self.url = base_url.rstrip("/") + "/v1/telemetry"
        self.timeout = timeout
        self._session = requests.Session()

    def send(self, frame: TelemetryFrame, now: int) -> bool:
        try:
            resp = self._session.post(
                self.url, data=serialize(frame).encode("utf-8"), timeout=self.timeout
            )
        except requests.RequestException:
            return False
        # 409 means the platform already holds this seq (a retried send whose
        # ack was lost); the frame is safe to drop from the buffer
        return resp.status_code in (202, 409)

    def close(self) -> None:
        self._session.close()


class CallableTransport:
    """In-process delivery through any (text) -> status_code callable."""

    def __init__(self, ingest: Callable[[str], int]):
        self._ingest = ingest

    def send(self, frame: TelemetryFrame, now: int) -> bool:
        return self._ingest(serialize(frame)) in (202, 409)

    def close(self) -> None:
        pass


class BlackoutTransport:
    """Wraps a transport, failing every send inside the outage windows."""

    def __init__(self, inner, outages: list[tuple[int, int]]):
        self.inner = inner
        self.outages = list(outages)

    def send(self, frame: TelemetryFrame, now: int) -> bool:
        for t0, t1 in self.outages:
            if t0 <= now < t1:
                return False
        return self.inner.send(frame, now)

    def close(self) -> None:
        self.inner.close()


# -- fleet runs ---------------------------------------------------------------


@dataclass
class NodeReport:
    station_id: str
    generated: int
    delivered: int
    buffered: int
    failed_attempts: int
    dropped: int


@dataclass
class FleetReport:
    seed: int
    start_ts: int
    horizon_s: int
    nodes: list[NodeReport] = field(default_factory=list)

    @property
    def total_delivered(self) -> int:
        return sum(n.delivered for n in self.nodes)

    def to_json_obj(self) -> dict:
        return {
            "seed": self.seed,
            "start_ts": self.start_ts,
            "horizon_s": self.horizon_s,
            "totals": {
                "generated": sum(n.generated for n in self.nodes),
                "delivered": self.total_delivered,
                "buffered": sum(n.buffered for n in self.nodes),
                "failed_attempts": sum(n.failed_attempts for n in self.nodes),
                "dropped": sum(n.dropped for n in self.nodes),
            },
            "nodes": [vars(n) for n in self.nodes],
        }


@dataclass(frozen=True)
class FleetMember:
    station: StationRecord
    scenario: Scenario


def run_fleet(
    members: list[FleetMember],
    horizon_s: int,
    transport,
    seed: int = 0,
    start_ts: int = 1700000000,
    buffer_cap: int | None = None,
) -> FleetReport:
    """Interleave all nodes on the simulated clock until the horizon.

    Nodes run whole firmware cycles in earliest-clock order (ties broken by
    station id), so runs are reproducible for a given (members, seed,
    horizon) regardless of wall-clock timing.
    """
    if not members:
        raise ValueError("need at least one fleet member")
    nodes = [
        Node(m.station, m.scenario, seed=seed, start_ts=start_ts, buffer_cap=buffer_cap)
        for m in members
    ]
    end = start_ts + horizon_s
    while True:
        due = [n for n in nodes if n.clock < end]
        if not due:
            break
        node = min(due, key=lambda n: (n.clock, n.station.station_id))
        node.run_cycle(transport)
        node.check_conservation()

    report = FleetReport(seed=seed, start_ts=start_ts, horizon_s=horizon_s)
    for node in nodes:
        verify_phase_trace(node.trace)
        node.check_conservation()
        report.nodes.append(
            NodeReport(
                station_id=node.station.station_id,
                generated=node.counters.generated,
                delivered=node.counters.delivered,
                buffered=len(node.buffer),
                failed_attempts=node.counters.failed_attempts,
                dropped=node.counters.dropped,
            )
        )
    return report


def iter_offline_frames(path: str | Path) -> Iterator[str]:
    """Yield the frame lines of an offline capture file."""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield line


# -- fleet config files -------------------------------------------------------


def load_fleet_config(path: str | Path) -> tuple[list[FleetMember], int]:
    """Parse a fleet scenario file.

    Returns (members, start_ts). Rain events are given as offsets from the
    run start (start_offset_s) and resolved to absolute timestamps here.
    """
    obj = json.loads(Path(path).read_text())
    start_ts = int(obj.get("start_ts", 1700000000))
    members = []
    for entry in obj["stations"]:
        station = StationRecord(
            station_id=entry["station_id"],
            display_name=entry.get("display_name", entry["station_id"]),
            lat=float(entry["lat"]),
            lon=float(entry["lon"]),
            token=entry["token"],
            report_period_s=int(entry.get("report_period_s", 1200)),
            created_at=start_ts,
        )
        sc = dict(entry["scenario"])
        rain = tuple(
            RainEvent(
                start_ts=start_ts + int(r["start_offset_s"]),
                duration_s=int(r["duration_s"]),
                attenuation=float(r["attenuation"]),
            )
            for r in sc.pop("rain", ())
        )
        scenario = Scenario(rain=rain, **sc)
        members.append(FleetMember(station=station, scenario=scenario))
    if not members:
        raise ValueError(f"{path}: no stations defined")
    return members, start_ts
