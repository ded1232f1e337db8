"""Segmented, append-only, circular in-memory frame log.

One writer appends to the active segment; readers take per-segment read locks,
so reads of sealed segments never contend with the writer. Sealed segments are
written to disk in the background for crash recovery only; reads never touch disk.
"""

from __future__ import annotations

import logging
import os
import struct
import threading
import zlib
from bisect import bisect_left, bisect_right
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import FrameFormatError, FrameTooLargeError, InvalidRangeError, SegmentFormatError
from .frames import Frame, read_frame, serialize_frame, serialized_size
from .rwlock import ReadWriteLock

logger = logging.getLogger(__name__)

MAGIC_PLAIN = b"MEZSEG01"
MAGIC_ENCRYPTED = b"MEZSEGX1"
NONCE_SIZE = 12
SEGMENT_SUFFIX = ".seg"
MAX_TS = (1 << 64) - 1

_U32 = struct.Struct("<I")


class AppendResult(Enum):
    APPENDED = "appended"
    REJECTED_STALE = "rejected_stale"


class PersistStatus(Enum):
    PERSISTED = "persisted"
    IO_ERROR = "io_error"
    SKIPPED = "skipped"


@dataclass
class LogConfig:
    capacity_bytes: int
    segment_count: int = 16
    persist_dir: Optional[Path] = None
    encrypt_at_rest: bool = False
    encryption_key: Optional[bytes] = None

    def __post_init__(self) -> None:
        if self.persist_dir is not None:
            self.persist_dir = Path(self.persist_dir)
        if self.capacity_bytes <= 0:
            raise ValueError("capacity_bytes must be > 0.")
        if self.segment_count < 2:
            raise ValueError("segment_count must be >= 2.")
        if self.capacity_bytes // self.segment_count < 1:
            raise ValueError("capacity_bytes is too small for the segment count.")
        if self.encrypt_at_rest:
            if self.encryption_key is None or len(self.encryption_key) not in (16, 24, 32):
                raise ValueError("encrypt_at_rest requires a 16, 24 or 32 byte encryption_key.")

    @property
    def segment_budget(self) -> int:
        return self.capacity_bytes // self.segment_count


@dataclass
class RangeResult:
    frames: List[Frame]
    truncated_start: bool = False

    @property
    def timestamps(self) -> List[int]:
        return [frame.ts for frame in self.frames]


@dataclass
class RecoveryReport:
    loaded: int = 0
    discarded: int = 0
    skipped: int = 0
    files: List[str] = field(default_factory=list)
    discarded_files: List[str] = field(default_factory=list)

    def merge(self, other: "RecoveryReport") -> None:
        self.loaded += other.loaded
        self.discarded += other.discarded
        self.skipped += other.skipped
        self.files.extend(other.files)
        self.discarded_files.extend(other.discarded_files)


class LogSegment:
    def __init__(self) -> None:
        self.timestamps: List[int] = []
        self.frames: List[Frame] = []
        self.nbytes = 0
        self.sealed = False
        self.crc32: Optional[int] = None
        self.recycled = False
        self.path: Optional[Path] = None
        self.lock = ReadWriteLock()

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def first_ts(self) -> Optional[int]:
        return self.timestamps[0] if self.timestamps else None

    @property
    def last_ts(self) -> Optional[int]:
        return self.timestamps[-1] if self.timestamps else None

    def add(self, frame: Frame, nbytes: int) -> None:
        self.timestamps.append(frame.ts)
        self.frames.append(frame)
        self.nbytes += nbytes

    def serialize_body(self) -> bytes:
        return _U32.pack(len(self.frames)) + b"".join(serialize_frame(f) for f in self.frames)

    def seal(self) -> None:
        if not self.sealed:
            self.crc32 = zlib.crc32(self.serialize_body()) & 0xFFFFFFFF
            self.sealed = True

    @classmethod
    def from_frames(cls, frames: List[Frame]) -> "LogSegment":
        segment = cls()
        for frame in frames:
            segment.add(frame, serialized_size(frame))
        segment.seal()
        return segment


# -- segment files -------------------------------------------------------------


def segment_filename(camera_id: str, first_ts: int) -> str:
    return f"{camera_id}-{first_ts}{SEGMENT_SUFFIX}"


def parse_segment_filename(name: str) -> Optional[Tuple[str, int]]:
    if not name.endswith(SEGMENT_SUFFIX):
        return None
    camera_id, sep, ts_text = name[: -len(SEGMENT_SUFFIX)].rpartition("-")
    if not sep or not camera_id or not ts_text.isdigit():
        return None
    return camera_id, int(ts_text)


def encode_segment_file(body: bytes, key: Optional[bytes] = None) -> bytes:
    if key is None:
        return MAGIC_PLAIN + body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)
    nonce = os.urandom(NONCE_SIZE)
    payload = nonce + AESGCM(key).encrypt(nonce, body, MAGIC_ENCRYPTED)
    return MAGIC_ENCRYPTED + payload + _U32.pack(zlib.crc32(payload) & 0xFFFFFFFF)


def decode_segment_file(data: bytes, key: Optional[bytes] = None) -> bytes:
    """Verify magic and CRC trailer and return the plaintext segment body."""
    magic = data[: len(MAGIC_PLAIN)]
    if magic not in (MAGIC_PLAIN, MAGIC_ENCRYPTED):
        raise SegmentFormatError(f"Bad segment magic {magic!r}.")
    if len(data) < len(magic) + _U32.size * 2:
        raise SegmentFormatError("Truncated segment file.")
    payload = data[len(magic) : -_U32.size]
    (stored,) = _U32.unpack(data[-_U32.size :])
    if zlib.crc32(payload) & 0xFFFFFFFF != stored:
        raise SegmentFormatError("Segment CRC mismatch.")
    if magic == MAGIC_PLAIN:
        return payload
    if key is None:
        raise SegmentFormatError("Encrypted segment but no key configured.")
    try:
        return AESGCM(key).decrypt(payload[:NONCE_SIZE], payload[NONCE_SIZE:], MAGIC_ENCRYPTED)
    except InvalidTag as exc:
        raise SegmentFormatError("Segment failed authentication.") from exc


def parse_segment_body(body: bytes) -> List[Frame]:
    if len(body) < _U32.size:
        raise SegmentFormatError("Segment body too short.")
    (count,) = _U32.unpack_from(body, 0)
    offset = _U32.size
    frames: List[Frame] = []
    try:
        for _ in range(count):
            frame, offset = read_frame(body, offset)
            if frames and frame.ts <= frames[-1].ts:
                raise SegmentFormatError("Segment timestamps are not strictly increasing.")
            frames.append(frame)
    except FrameFormatError as exc:
        raise SegmentFormatError(str(exc)) from exc
    if offset != len(body):
        raise SegmentFormatError("Trailing bytes in segment body.")
    return frames


def read_segment_file(path: Path, key: Optional[bytes] = None) -> List[Frame]:
    return parse_segment_body(decode_segment_file(Path(path).read_bytes(), key))


# -- the log -------------------------------------------------------------------


class MemLog:
    def __init__(self, config: LogConfig, camera_id: str = ""):
        self.config = config
        self.camera_id = camera_id
        self._budget = config.segment_budget
        self._slots: List[Optional[LogSegment]] = [None] * config.segment_count
        self._cursor = 0
        self._slots[0] = LogSegment()
        self._last_ts: Optional[int] = None
        self._ring_lock = threading.Lock()
        self._appended = threading.Condition(self._ring_lock)
        self._writer_lock = threading.Lock()
        self._executor: Optional[ThreadPoolExecutor] = None
        if config.persist_dir is not None:
            self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="memlog-persist")
        self._pending: List[Future] = []
        self._closed = False
        self.persist_failures = 0

    # properties ---------------------------------------------------------------

    @property
    def last_ts(self) -> Optional[int]:
        return self._last_ts

    @property
    def write_cursor(self) -> int:
        return self._cursor

    @property
    def oldest_ts(self) -> Optional[int]:
        for segment in self.segments():
            if segment.timestamps:
                return segment.timestamps[0]
        return None

    def segments(self) -> List[LogSegment]:
        """Resident segments, oldest first; the last one is the active segment."""
        with self._ring_lock:
            count = len(self._slots)
            ordered = [self._slots[(self._cursor + 1 + i) % count] for i in range(count)]
        return [segment for segment in ordered if segment is not None]

    def resident_bytes(self) -> int:
        return sum(segment.nbytes for segment in self.segments())

    def __len__(self) -> int:
        return sum(len(segment) for segment in self.segments())

    # writes -------------------------------------------------------------------

    def append(self, frame: Frame) -> AppendResult:
        nbytes = serialized_size(frame)
        if nbytes > self._budget:
            raise FrameTooLargeError(nbytes, self._budget)
        with self._writer_lock:
            if self._last_ts is not None and frame.ts <= self._last_ts:
                return AppendResult.REJECTED_STALE
            active = self._slots[self._cursor]
            assert active is not None
            if active.timestamps and active.nbytes + nbytes > self._budget:
                active = self._rotate()
            with active.lock.write_locked():
                active.add(frame, nbytes)
            if not self.camera_id:
                self.camera_id = frame.camera_id
            with self._appended:
                self._last_ts = frame.ts
                self._appended.notify_all()
        return AppendResult.APPENDED

    def flush(self) -> Optional[Future]:
        """Seal the active segment now (if it holds entries) and schedule persistence."""
        with self._writer_lock:
            active = self._slots[self._cursor]
            if active is None or not active.timestamps:
                return None
            self._rotate()
            return self._pending[-1] if self._pending else None

    def _rotate(self) -> LogSegment:
        sealed = self._slots[self._cursor]
        assert sealed is not None
        with sealed.lock.write_locked():
            sealed.seal()
        logger.debug(
            "event=segment_sealed camera=%s first_ts=%s entries=%d crc=%08x",
            self.camera_id,
            sealed.first_ts,
            len(sealed),
            sealed.crc32 or 0,
        )
        self._schedule(self.seal_and_persist, sealed)

        next_index = (self._cursor + 1) % len(self._slots)
        victim = self._slots[next_index]
        if victim is not None:
            # waits only for readers of the victim segment
            with victim.lock.write_locked():
                victim.recycled = True
            self._schedule(self._remove_file, victim)
        fresh = LogSegment()
        with self._ring_lock:
            self._slots[next_index] = fresh
            self._cursor = next_index
        return fresh

    def _schedule(self, fn, segment: LogSegment) -> None:
        if self._executor is None or self._closed:
            return
        self._pending = [future for future in self._pending if not future.done()]
        self._pending.append(self._executor.submit(fn, segment))

    def seal_and_persist(self, segment: LogSegment) -> PersistStatus:
        if self.config.persist_dir is None:
            return PersistStatus.SKIPPED
        if not segment.sealed:
            with segment.lock.write_locked():
                segment.seal()
        if segment.first_ts is None:
            return PersistStatus.SKIPPED
        camera_id = self.camera_id or segment.frames[0].camera_id
        path = self.config.persist_dir / segment_filename(camera_id, segment.first_ts)
        key = self.config.encryption_key if self.config.encrypt_at_rest else None
        try:
            data = encode_segment_file(segment.serialize_body(), key)
            self.config.persist_dir.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)
        except OSError as exc:
            self.persist_failures += 1
            logger.warning("event=persist_failed camera=%s path=%s error=%s", camera_id, path, exc)
            return PersistStatus.IO_ERROR
        segment.path = path
        logger.debug("event=segment_persisted camera=%s path=%s", camera_id, path)
        return PersistStatus.PERSISTED

    def _remove_file(self, segment: LogSegment) -> None:
        if segment.path is None:
            return
        try:
            segment.path.unlink(missing_ok=True)
        except OSError as exc:
            logger.warning("event=remove_failed path=%s error=%s", segment.path, exc)

    # reads --------------------------------------------------------------------

    def get(self, ts: int) -> Optional[Frame]:
        segments = self.segments()
        firsts = [segment.first_ts for segment in segments]
        candidates = [
            (first, index) for index, first in enumerate(firsts) if first is not None
        ]
        pos = bisect_right([first for first, _ in candidates], ts) - 1
        if pos < 0:
            return None
        segment = segments[candidates[pos][1]]
        with segment.lock.read_locked():
            if segment.recycled:
                return None
            index = bisect_left(segment.timestamps, ts)
            if index < len(segment.timestamps) and segment.timestamps[index] == ts:
                return segment.frames[index]
        return None

    def get_range(self, start: int, end: int) -> RangeResult:
        if start > end:
            raise InvalidRangeError(f"start {start} is after end {end}.")
        frames: List[Frame] = []
        oldest: Optional[int] = None
        for segment in self.segments():
            with segment.lock.read_locked():
                if segment.recycled or not segment.timestamps:
                    continue
                stamps = segment.timestamps
                if oldest is None:
                    oldest = stamps[0]
                if stamps[-1] < start or stamps[0] > end:
                    continue
                lo = bisect_left(stamps, start)
                hi = bisect_right(stamps, end)
                frames.extend(segment.frames[lo:hi])
        return RangeResult(frames=frames, truncated_start=oldest is not None and start < oldest)

    def wait_for_append(self, after_ts: Optional[int], timeout: Optional[float] = None) -> bool:
        """Block until an entry newer than ``after_ts`` exists (or the log closes)."""

        def ready() -> bool:
            if self._closed:
                return True
            if self._last_ts is None:
                return False
            return after_ts is None or self._last_ts > after_ts

        with self._appended:
            return self._appended.wait_for(ready, timeout)

    # lifecycle ----------------------------------------------------------------

    def drain(self) -> None:
        for future in list(self._pending):
            future.result()

    def close(self) -> None:
        with self._appended:
            self._closed = True
            self._appended.notify_all()
        if self._executor is not None:
            self._executor.shutdown(wait=True)

    def _install_recovered(self, segments: List[LogSegment]) -> None:
        with self._ring_lock:
            for index, segment in enumerate(segments):
                self._slots[index] = segment
            self._cursor = len(segments)
            self._slots[self._cursor] = LogSegment()
            self._last_ts = segments[-1].last_ts if segments else None


# -- recovery ------------------------------------------------------------------


def _load_segment(path: Path, config: LogConfig) -> LogSegment:
    parsed = parse_segment_filename(path.name)
    frames = read_segment_file(path, config.encryption_key)
    if not frames:
        raise SegmentFormatError("Empty segment.")
    if parsed is not None and frames[0].ts != parsed[1]:
        raise SegmentFormatError("File name does not match first timestamp.")
    segment = LogSegment.from_frames(frames)
    if segment.nbytes > config.segment_budget:
        raise SegmentFormatError("Segment exceeds the configured segment budget.")
    segment.path = path
    return segment


def recover(config: LogConfig, camera_id: str) -> Tuple[MemLog, RecoveryReport]:
    """Rebuild a camera's log from its persisted segments, skipping corrupt files."""
    log = MemLog(config, camera_id)
    report = RecoveryReport()
    if config.persist_dir is None or not config.persist_dir.is_dir():
        return log, report

    loaded: List[LogSegment] = []
    for path in sorted(config.persist_dir.glob(f"*{SEGMENT_SUFFIX}")):
        parsed = parse_segment_filename(path.name)
        if parsed is None or parsed[0] != camera_id:
            continue
        report.files.append(path.name)
        try:
            loaded.append(_load_segment(path, config))
        except (SegmentFormatError, OSError) as exc:
            report.discarded += 1
            report.discarded_files.append(path.name)
            logger.warning("event=segment_discarded camera=%s file=%s reason=%s", camera_id, path.name, exc)

    loaded.sort(key=lambda segment: segment.first_ts or 0)
    ordered: List[LogSegment] = []
    for segment in loaded:
        if ordered and (segment.first_ts or 0) <= (ordered[-1].last_ts or 0):
            report.discarded += 1
            report.discarded_files.append(segment.path.name if segment.path else "")
            continue
        ordered.append(segment)

    keep = ordered[-(config.segment_count - 1) :] if ordered else []
    report.skipped = len(ordered) - len(keep)
    report.loaded = len(keep)
    log._install_recovered(keep)
    logger.info(
        "event=recovery camera=%s loaded=%d discarded=%d skipped=%d",
        camera_id,
        report.loaded,
        report.discarded,
        report.skipped,
    )
    return log, report


def recover_all(config: LogConfig) -> Dict[str, Tuple[MemLog, RecoveryReport]]:
    if config.persist_dir is None or not config.persist_dir.is_dir():
        return {}
    cameras = set()
    for path in config.persist_dir.glob(f"*{SEGMENT_SUFFIX}"):
        parsed = parse_segment_filename(path.name)
        if parsed is not None:
            cameras.add(parsed[0])
    return {camera_id: recover(config, camera_id) for camera_id in sorted(cameras)}
