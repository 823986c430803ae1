"""Bring the recording channels and the X-ray machine log onto one clock."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .signal import AudioSignal


class AlignmentError(ValueError):
    pass


@dataclass
class ChannelSet:
    physician: AudioSignal
    assistant: AudioSignal
    ambient: AudioSignal
    # one flag per second; False marks a missing (black) X-ray frame
    image_present: np.ndarray

    def durations(self) -> dict[str, float]:
        return {
            "physician": self.physician.duration_s,
            "assistant": self.assistant.duration_s,
            "ambient": self.ambient.duration_s,
            "image": float(len(self.image_present)),
        }


@dataclass(frozen=True)
class XrayLogRecord:
    t_s: float
    fluoro: int = 0
    dsa: int = 0
    moving: int = 0
    beep: int = 0

    def __post_init__(self):
        for name in ("fluoro", "dsa", "moving", "beep"):
            if getattr(self, name) not in (0, 1):
                raise AlignmentError(f"log flag {name} must be 0 or 1")

    @property
    def flags(self) -> tuple[int, int, int]:
        return (self.fluoro, self.dsa, self.moving)


def _pad(sig: AudioSignal, seconds: float) -> AudioSignal:
    n = int(round(seconds * sig.sample_rate))
    return AudioSignal(np.concatenate([np.zeros(n), sig.samples]), sig.sample_rate)


def _trim(sig: AudioSignal, seconds: int) -> AudioSignal:
    return AudioSignal(sig.samples[: seconds * sig.sample_rate], sig.sample_rate)


def align_by_lag(channels: ChannelSet, lag_s: float) -> ChannelSet:
    """Zero-prefix whichever side started recording later, then trim to a common length.

    ``lag_s`` is the ambient lag relative to the physician channel as returned by
    ``cross_correlate_lag(physician, ambient)``. A positive lag means the shared
    content shows up later on the ambient track, so the physician-side channels
    (physician, assistant, X-ray frames) get ``lag_s`` of leading zeros and the
    padded X-ray seconds are marked absent. A negative lag pads the ambient
    track. Every channel is then cut to the same whole number of seconds.
    """
    shortest = min(channels.physician.duration_s, channels.ambient.duration_s)
    if abs(lag_s) >= shortest:
        raise AlignmentError("non-overlapping channels")
    phys, asst, amb = channels.physician, channels.assistant, channels.ambient
    image = np.asarray(channels.image_present, dtype=bool)
    if lag_s > 0:
        phys = _pad(phys, lag_s)
        asst = _pad(asst, lag_s)
        image = np.concatenate([np.zeros(math.ceil(lag_s - 1e-9), dtype=bool), image])
    elif lag_s < 0:
        amb = _pad(amb, -lag_s)
    common = int(math.floor(min(phys.duration_s, asst.duration_s, amb.duration_s, len(image)) + 1e-9))
    return ChannelSet(_trim(phys, common), _trim(asst, common), _trim(amb, common), image[:common])


def rebase_log_timestamps(
    log: list[XrayLogRecord], audio_events: list[float], mode: str = "first"
) -> list[XrayLogRecord]:
    """Shift log times so the beep records land on the detected audio events.

    ``mode="first"`` anchors on the first beep and the first event;
    ``mode="median"`` pairs beeps and events in order and uses the median offset.
    """
    beeps = [r.t_s for r in log if r.beep]
    if not beeps or not audio_events:
        raise AlignmentError("cannot rebase: need at least one beep record and one audio event")
    events = sorted(audio_events)
    if mode == "first":
        offset = events[0] - beeps[0]
    elif mode == "median":
        n = min(len(beeps), len(events))
        offset = float(np.median(np.asarray(events[:n]) - np.asarray(beeps[:n])))
    else:
        raise AlignmentError(f"unknown rebase mode {mode!r}")
    return [replace(r, t_s=r.t_s + offset) for r in log]


def log_to_per_second(log: list[XrayLogRecord], T_s: int) -> np.ndarray:
    """Zero-order hold of the log flags at every whole second; shape ``T_s x 3``."""
    if T_s < 1:
        raise AlignmentError("T_s must be >= 1")
    out = np.zeros((T_s, 3), dtype=np.int64)
    if not log:
        return out
    times = np.array([r.t_s for r in log], dtype=np.float64)
    flags = np.array([r.flags for r in log], dtype=np.int64)
    # latest record with t_s <= t; stable for duplicate timestamps
    idx = np.searchsorted(times, np.arange(T_s), side="right") - 1
    valid = idx >= 0
    out[valid] = flags[idx[valid]]
    return out


LOG_HEADER = ["t_s", "fluoro", "dsa", "moving", "beep"]


def read_log_csv(path) -> list[XrayLogRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != LOG_HEADER:
            raise AlignmentError(f"{path}: expected header {','.join(LOG_HEADER)}")
        records = [
            XrayLogRecord(float(row["t_s"]), *(int(row[k]) for k in LOG_HEADER[1:])) for row in reader
        ]
    if any(b.t_s < a.t_s for a, b in zip(records, records[1:])):
        raise AlignmentError(f"{path}: timestamps must be non-decreasing")
    return records


def write_log_csv(path, log: list[XrayLogRecord]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in log:
            w.writerow([f"{r.t_s:.3f}", r.fluoro, r.dsa, r.moving, r.beep])
