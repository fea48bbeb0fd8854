"""Append-only per-station time-series persistence.

Layout under the data directory:

    stations.json              station registry
    series/<station_id>.ndjson one JSON record per line, append-only

A record line mirrors the wire frame minus the token, plus quality flags.
Recovery discards a final line without its trailing newline, so a crash
mid-write never surfaces a torn record. An in-memory index (records sorted
by timestamp, seen sequence numbers) is rebuilt on open; logs are small at
desk scale.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import threading
import time
import zlib
from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from pathlib import Path

logger = logging.getLogger(__name__)

BEYOND_SENSOR_RANGE = "beyond_sensor_range"

_JSON_SEP = (",", ":")


class StorageError(Exception):
    pass


class UnknownStationError(LookupError):
    pass


class BackupIntegrityError(StorageError):
    pass


@dataclass(frozen=True)
class Measurement:
    station_id: str
    seq: int
    ts: int
    pm25: float
    pm10: float
    temp_c: float
    flags: frozenset[str] = frozenset()

    def to_json_obj(self) -> dict:
        return {
            "station_id": self.station_id,
            "seq": self.seq,
            "ts": self.ts,
            "pm25": self.pm25,
            "pm10": self.pm10,
            "temp_c": self.temp_c,
            "flags": sorted(self.flags),
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "Measurement":
        return cls(
            station_id=obj["station_id"],
            seq=obj["seq"],
            ts=obj["ts"],
            pm25=float(obj["pm25"]),
            pm10=float(obj["pm10"]),
            temp_c=float(obj["temp_c"]),
            flags=frozenset(obj.get("flags", ())),
        )


@dataclass(frozen=True)
class StationRecord:
    station_id: str
    display_name: str
    lat: float
    lon: float
    token: str
    report_period_s: int = 1200
    created_at: int = 0

    def __post_init__(self):
        if self.report_period_s <= 0:
            raise ValueError("report_period_s must be positive")
        if not -90.0 <= self.lat <= 90.0 or not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"location out of bounds: ({self.lat}, {self.lon})")

    def to_json_obj(self) -> dict:
        return {
            "station_id": self.station_id,
            "display_name": self.display_name,
            "lat": self.lat,
            "lon": self.lon,
            "token": self.token,
            "report_period_s": self.report_period_s,
            "created_at": self.created_at,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "StationRecord":
        return cls(**obj)


class _StationLog:
    """One station's series file plus its in-memory index."""

    def __init__(self, path: Path):
        self.path = path
        self.lock = threading.Lock()
        self.records: list[Measurement] = []  # kept sorted by ts
        self.ts_index: list[int] = []
        self.seqs: set[int] = set()
        self.last_seq = 0
        self._fh = None

    def recover(self) -> None:
        if not self.path.exists():
            return
        raw = self.path.read_bytes()
        complete, _, tail = raw.rpartition(b"\n")
        if tail:
            # drop the torn bytes on disk too, so the next append starts a
            # fresh line instead of gluing onto the fragment
            logger.warning("discarding torn record tail (%d bytes) in %s", len(tail), self.path)
            with open(self.path, "r+b") as fh:
                fh.truncate(len(raw) - len(tail))
        for lineno, line in enumerate(complete.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                m = Measurement.from_json_obj(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise StorageError(f"{self.path}:{lineno}: corrupt record: {exc}") from exc
            if m.seq in self.seqs:
                continue
            self._index(m)

    def _index(self, m: Measurement) -> None:
        pos = bisect_right(self.ts_index, m.ts)
        self.records.insert(pos, m)
        self.ts_index.insert(pos, m.ts)
        self.seqs.add(m.seq)
        self.last_seq = max(self.last_seq, m.seq)

    def handle(self):
        if self._fh is None:
            self._fh = open(self.path, "ab")
        return self._fh

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class TimeSeriesStore:
    """Durable per-station measurement logs with duplicate suppression.

    One writer per station log (enforced with a per-station lock); readers
    see a consistent snapshot taken under the same lock.
    """

    REGISTRY_FILE = "stations.json"
    SERIES_DIR = "series"
    MANIFEST_FILE = "manifest.json"

    def __init__(self, data_dir: str | Path, fsync: bool = True):
        self.data_dir = Path(data_dir)
        self.series_dir = self.data_dir / self.SERIES_DIR
        self.series_dir.mkdir(parents=True, exist_ok=True)
        self._fsync = fsync
        self._registry_lock = threading.Lock()
        self._stations: dict[str, StationRecord] = {}
        self._logs: dict[str, _StationLog] = {}
        self._load_registry()
        for station_id in self._stations:
            self._open_log(station_id).recover()

    # -- registry ----------------------------------------------------------

    def _load_registry(self) -> None:
        path = self.data_dir / self.REGISTRY_FILE
        if not path.exists():
            return
        try:
            entries = json.loads(path.read_text())
        except ValueError as exc:
            raise StorageError(f"corrupt registry {path}: {exc}") from exc
        for obj in entries:
            record = StationRecord.from_json_obj(obj)
            self._stations[record.station_id] = record

    def _save_registry(self) -> None:
        path = self.data_dir / self.REGISTRY_FILE
        tmp = path.with_suffix(".json.tmp")
        payload = json.dumps(
            [r.to_json_obj() for r in self._stations.values()], indent=2, ensure_ascii=False
        )
        tmp.write_text(payload + "\n")
        os.replace(tmp, path)

    def upsert_station(self, record: StationRecord) -> None:
        with self._registry_lock:
            self._stations[record.station_id] = record
            self._save_registry()
            self._open_log(record.station_id)

    def get_station(self, station_id: str) -> StationRecord:
        try:
            return self._stations[station_id]
        except KeyError:
            raise UnknownStationError(station_id) from None

    def station_ids(self) -> list[str]:
        return sorted(self._stations)

    def stations(self) -> list[StationRecord]:
        return [self._stations[sid] for sid in self.station_ids()]

    def token_registry(self) -> dict[str, str]:
        return {sid: rec.token for sid, rec in self._stations.items()}

    # -- series ------------------------------------------------------------

    def _open_log(self, station_id: str) -> _StationLog:
        if station_id not in self._logs:
            self._logs[station_id] = _StationLog(self.series_dir / f"{station_id}.ndjson")
        return self._logs[station_id]

    def _log_for(self, station_id: str) -> _StationLog:
        if station_id not in self._stations:
            raise UnknownStationError(station_id)
        return self._open_log(station_id)

    def append(self, m: Measurement) -> int | None:
        """Durably append one measurement.

        Returns the record offset in the station log, or None when the
        (station, seq) pair was already stored (the log is unchanged).
        """
        log = self._log_for(m.station_id)
        with log.lock:
            if m.seq in log.seqs:
                return None
            line = json.dumps(m.to_json_obj(), separators=_JSON_SEP, ensure_ascii=False) + "\n"
            fh = log.handle()
            try:
                fh.write(line.encode("utf-8"))
                fh.flush()
                if self._fsync:
                    os.fsync(fh.fileno())
            except OSError as exc:
                raise StorageError(f"append to {log.path} failed: {exc}") from exc
            offset = len(log.records)
            log._index(m)
            return offset

    def query_range(self, station_id: str, t0: float, t1: float) -> list[Measurement]:
        """All records with ts in [t0, t1], ascending by ts."""
        if t0 > t1:
            raise ValueError(f"empty range: t0={t0} > t1={t1}")
        log = self._log_for(station_id)
        with log.lock:
            lo = bisect_left(log.ts_index, t0)
            hi = bisect_right(log.ts_index, t1)
            return log.records[lo:hi]

    def latest(self, station_id: str) -> Measurement | None:
        log = self._log_for(station_id)
        with log.lock:
            return log.records[-1] if log.records else None

    def count(self, station_id: str) -> int:
        return len(self._log_for(station_id).records)

    def last_seq(self, station_id: str) -> int:
        return self._log_for(station_id).last_seq

    def close(self) -> None:
        for log in self._logs.values():
            log.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- backups -----------------------------------------------------------

    def backup(self, dest_dir: str | Path) -> dict:
        """Byte-identical copy of registry and series files, plus a manifest
        of per-station record counts and per-file CRC32 checksums."""
        dest = Path(dest_dir)
        (dest / self.SERIES_DIR).mkdir(parents=True, exist_ok=True)
        locks = [self._open_log(sid).lock for sid in self.station_ids()]
        for lock in locks:
            lock.acquire()
        try:
            manifest: dict = {
                "created_at": int(time.time()),
                "files": {},
                "station_counts": {},
            }
            registry_src = self.data_dir / self.REGISTRY_FILE
            if registry_src.exists():
                shutil.copyfile(registry_src, dest / self.REGISTRY_FILE)
                manifest["files"][self.REGISTRY_FILE] = _crc32(dest / self.REGISTRY_FILE)
            for sid in self.station_ids():
                log = self._logs[sid]
                rel = f"{self.SERIES_DIR}/{sid}.ndjson"
                if log.path.exists():
                    shutil.copyfile(log.path, dest / rel)
                    manifest["files"][rel] = _crc32(dest / rel)
                manifest["station_counts"][sid] = len(log.records)
        finally:
            for lock in reversed(locks):
                lock.release()
        (dest / self.MANIFEST_FILE).write_text(json.dumps(manifest, indent=2) + "\n")
        return manifest


def _crc32(path: Path) -> int:
    return zlib.crc32(path.read_bytes()) & 0xFFFFFFFF


def verify_backup(backup_dir: str | Path) -> dict:
    """Recompute backup checksums against the manifest.

    Returns the manifest; raises BackupIntegrityError on any mismatch or
    missing file.
    """
    backup = Path(backup_dir)
    manifest_path = backup / TimeSeriesStore.MANIFEST_FILE
    if not manifest_path.exists():
        raise BackupIntegrityError(f"no manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    for rel, expected in manifest.get("files", {}).items():
        path = backup / rel
        if not path.exists():
            raise BackupIntegrityError(f"backup file missing: {rel}")
        actual = _crc32(path)
        if actual != expected:
            raise BackupIntegrityError(
                f"checksum mismatch for {rel}: manifest {expected:#010x}, file {actual:#010x}"
            )
    return manifest


def restore_backup(backup_dir: str | Path, data_dir: str | Path) -> None:
    """Verify a backup and copy its files into a data directory."""
    manifest = verify_backup(backup_dir)
    backup = Path(backup_dir)
    target = Path(data_dir)
    (target / TimeSeriesStore.SERIES_DIR).mkdir(parents=True, exist_ok=True)
    for rel in manifest.get("files", {}):
        shutil.copyfile(backup / rel, target / rel)
