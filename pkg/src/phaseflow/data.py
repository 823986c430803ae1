"""Phase timelines, the entropy-ordered dataset split, and a synthetic corpus generator."""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .align import XrayLogRecord, log_to_per_second, read_log_csv
from .features import (
    LOG_DIM,
    MFCC_DIM,
    EmbeddingManifest,
    OperationRecord,
    assemble_operation,
    encode_xray_log,
)
from .signal import AudioSignal

N_CLASSES = 9
N_PHASES = 8
TRANSITION = 0

# Index 0 is the transition filler. The corpus manifest is authoritative;
# these are the defaults written by the synthetic generator.
DEFAULT_LABEL_NAMES = (
    "Transition",
    "Preparation",
    "Puncture",
    "Positioning of the Guide Wire",
    "Pouch Preparation",
    "Catheter Positioning",
    "Catheter Adjustment",
    "Catheter Control",
    "Closing",
)


class DataError(ValueError):
    pass


@dataclass
class PhaseTimeline:
    labels: np.ndarray
    label_names: tuple[str, ...] = DEFAULT_LABEL_NAMES

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1:
            raise DataError("labels must be one id per second")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= N_CLASSES):
            raise DataError(f"phase ids must lie in [0, {N_CLASSES})")
        if len(self.label_names) != N_CLASSES:
            raise DataError(f"need {N_CLASSES} label names")
        self.label_names = tuple(self.label_names)

    def __len__(self) -> int:
        return self.labels.size

    def phase_durations(self) -> np.ndarray:
        """Seconds spent in each of the 8 surgical phases (transition excluded)."""
        return np.bincount(self.labels, minlength=N_CLASSES)[1:].astype(np.float64)


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]

    def __post_init__(self):
        ids = self.train + self.val + self.test
        if len(set(ids)) != len(ids):
            raise DataError("split subsets overlap")

    def to_dict(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test}


# ---------------------------------------------------------------------------
# Entropy split
# ---------------------------------------------------------------------------


def phase_percentages(ops: Sequence[PhaseTimeline]) -> np.ndarray:
    """Share of each phase's corpus-wide duration that falls in each operation (n_ops x 8)."""
    if not ops:
        raise DataError("need at least one operation")
    dur = np.vstack([op.phase_durations() for op in ops])
    totals = dur.sum(axis=0)
    if np.any(totals == 0):
        missing = [DEFAULT_LABEL_NAMES[i + 1] for i in np.flatnonzero(totals == 0)]
        raise DataError(f"phase never observed: {missing}")
    return dur / totals


def operation_entropy(vector) -> float:
    """Shannon entropy (nats) of the renormalized vector, with 0 ln 0 = 0."""
    v = np.asarray(vector, dtype=np.float64)
    if np.any(v < 0):
        raise DataError("entries must be non-negative")
    s = v.sum()
    if s <= 0:
        raise DataError("all-zero vector has no entropy")
    p = v[v > 0] / s
    return float(-(p * np.log(p)).sum())


def stratified_split(ops: Mapping[str, PhaseTimeline], n_val: int = 5, n_test: int = 5) -> DatasetSplit:
    """Sort operations by entropy (ascending, ties by id); first ``n_val`` validate,
    the next ``n_test`` test, the rest train."""
    if len(ops) < n_val + n_test + 1:
        raise DataError(f"need at least {n_val + n_test + 1} operations, got {len(ops)}")
    ids = sorted(ops)
    pct = phase_percentages([ops[i] for i in ids])
    ent = [operation_entropy(row) for row in pct]
    order = [i for _, i in sorted(zip(ent, ids))]
    return DatasetSplit(
        train=order[n_val + n_test :],
        val=order[:n_val],
        test=order[n_val : n_val + n_test],
    )


# ---------------------------------------------------------------------------
# Label / dataset files
# ---------------------------------------------------------------------------


def write_labels_csv(path, labels) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["second", "phase_id"])
        for t, y in enumerate(np.asarray(labels)):
            w.writerow([t, int(y)])


def read_labels_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["second", "phase_id"]:
            raise DataError(f"{path}: expected header second,phase_id")
        rows = [(int(r["second"]), int(r["phase_id"])) for r in reader]
    if [s for s, _ in rows] != list(range(len(rows))):
        raise DataError(f"{path}: seconds must run 0..T-1 in order")
    return np.array([y for _, y in rows], dtype=np.int64)


@dataclass
class Dataset:
    root: Path
    label_names: tuple[str, ...]
    entries: list[dict]
    seed: int | None = None

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        obj = json.loads(path.read_text())
        return cls(path.parent, tuple(obj["label_names"]), list(obj["operations"]), obj.get("seed"))

    def ids(self) -> list[str]:
        return [e["operation_id"] for e in self.entries]

    def entry(self, op_id: str) -> dict:
        for e in self.entries:
            if e["operation_id"] == op_id:
                return e
        raise DataError(f"unknown operation {op_id}")

    def timeline(self, op_id: str) -> PhaseTimeline:
        return PhaseTimeline(read_labels_csv(self.root / self.entry(op_id)["labels"]), self.label_names)

    def log(self, op_id: str) -> list[XrayLogRecord]:
        return read_log_csv(self.root / self.entry(op_id)["log"])

    def record(self, op_id: str) -> OperationRecord:
        e = self.entry(op_id)
        manifest = EmbeddingManifest.load(self.root / e["features"])
        labels = read_labels_csv(self.root / e["labels"])
        flags = log_to_per_second(self.log(op_id), len(labels))
        rec = assemble_operation(manifest, flags, labels=labels)
        rec.meta["label_names"] = self.label_names
        return rec

    def records(self, ids=None) -> list[OperationRecord]:
        return [self.record(i) for i in (ids if ids is not None else self.ids())]


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

# Phases sharing a mean in a channel cannot be told apart from that channel alone.
DEFAULT_CONFUSIONS = {
    "physician": [[0, 5, 6]],
    "assistant": [[1, 2], [3, 4], [7, 8]],
    "ambient": [[2, 3], [6, 7]],
    "xray_image": [[3, 4], [6, 7]],
}
DEFAULT_NOISE_GAIN = {"physician": 1.0, "assistant": 1.5, "ambient": 1.2, "xray_image": 1.0}

FLUORO_PHASES = (3, 5, 6)
DSA_PHASES = (7,)


@dataclass
class SynthConfig:
    n_operations: int = 28
    phase_duration_s: tuple[int, int] = (30, 300)
    # optional per-phase override: phase id -> (lo, hi)
    phase_ranges: dict[int, tuple[int, int]] = field(default_factory=dict)
    transition_s: tuple[int, int] = (2, 8)
    dims: dict[str, int] = field(
        default_factory=lambda: {"physician": 64, "assistant": 64, "ambient": MFCC_DIM, "xray_image": 64}
    )
    class_sep: float = 1.0
    noise_scale: float = 0.3
    op_shift: float = 0.1
    confusions: dict[str, list[list[int]]] = field(default_factory=lambda: {k: [list(g) for g in v] for k, v in DEFAULT_CONFUSIONS.items()})
    noise_gain: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_NOISE_GAIN))
    moving_s: int = 10
    # log clock = audio clock + offset drawn from this range
    log_offset_s: tuple[float, float] = (30.0, 600.0)
    # audio rendering
    audio_rate: int = 2000
    ambient_lag_s: float | None = None  # None -> uniform in +-max_ambient_lag_s per operation
    max_ambient_lag_s: float = 30.0
    ambient_snr_db: float = 10.0
    mic_noise: float = 0.01  # headset self-noise (std)
    write_audio: bool = True
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.phase_duration_s
        if not (0 < lo <= hi):
            raise DataError("phase duration range must be positive")
        for p, (a, b) in self.phase_ranges.items():
            if not (0 < a <= b):
                raise DataError(f"phase {p}: duration range must be positive")
        if not (0 <= self.transition_s[0] <= self.transition_s[1]):
            raise DataError("bad transition range")
        self.phase_ranges = {int(k): tuple(v) for k, v in self.phase_ranges.items()}

    @classmethod
    def from_dict(cls, obj: dict) -> "SynthConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise DataError(f"unknown synth config keys: {sorted(unknown)}")
        kw = dict(obj)
        for key in ("phase_duration_s", "transition_s", "log_offset_s"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def range_for(self, phase: int) -> tuple[int, int]:
        return self.phase_ranges.get(phase, self.phase_duration_s)


def _rng(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng([seed, *(zlib.crc32(str(k).encode()) for k in keys)])


def _class_means(cfg: SynthConfig, channel: str) -> np.ndarray:
    """(N_CLASSES x D) means for one channel, shared by every operation."""
    D = cfg.dims[channel]
    means = _rng(cfg.seed, "means", channel).normal(0.0, cfg.class_sep, size=(N_CLASSES, D))
    for group in cfg.confusions.get(channel, []):
        means[list(group)] = means[group[0]]
    return means


def synth_timeline(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    parts = []
    for phase in range(1, N_PHASES + 1):
        if phase > 1:
            n = int(rng.integers(cfg.transition_s[0], cfg.transition_s[1] + 1))
            parts.append(np.zeros(n, dtype=np.int64))
        lo, hi = cfg.range_for(phase)
        parts.append(np.full(int(rng.integers(lo, hi + 1)), phase, dtype=np.int64))
    return np.concatenate(parts)


def flags_from_labels(labels: np.ndarray, moving_s: int = 10) -> np.ndarray:
    """Per-second (fluoro, dsa, moving): fluoroscopy while positioning the guide wire or
    catheter, DSA during catheter control, C-arm motion at the start of the guide-wire
    phase and at the end of catheter control."""
    flags = np.zeros((labels.size, 3), dtype=np.int64)
    flags[:, 0] = np.isin(labels, FLUORO_PHASES)
    flags[:, 1] = np.isin(labels, DSA_PHASES)
    for phase, at_start in ((3, True), (7, False)):
        idx = np.flatnonzero(labels == phase)
        if idx.size:
            n = min(moving_s, max(1, idx.size // 3))
            flags[idx[:n] if at_start else idx[-n:], 2] = 1
    return flags


def flags_to_log(flags: np.ndarray, offset_s: float) -> list[XrayLogRecord]:
    """State-change records on the log clock; an X-ray activation (fluoro or DSA
    switching on) carries ``beep=1``."""
    records = [XrayLogRecord(round(offset_s, 3), *map(int, flags[0]), beep=0)]
    active_prev = bool(flags[0, 0] or flags[0, 1])
    for t in range(1, flags.shape[0]):
        if np.array_equal(flags[t], flags[t - 1]):
            continue
        active = bool(flags[t, 0] or flags[t, 1])
        beep = int(active and (not active_prev or (flags[t, 1] and not flags[t - 1, 1])))
        records.append(XrayLogRecord(round(t + offset_s, 3), *map(int, flags[t]), beep=beep))
        active_prev = active
    return records


def activation_times(log: list[XrayLogRecord]) -> list[float]:
    return [r.t_s for r in log if r.beep]


def synth_generate(cfg: SynthConfig) -> list[OperationRecord]:
    """Class-conditional Gaussian features for every channel plus labels and X-ray log."""
    means = {c: _class_means(cfg, c) for c in cfg.dims}
    records = []
    for i in range(cfg.n_operations):
        op_id = f"op{i:03d}"
        rng = _rng(cfg.seed, "op", i)
        labels = synth_timeline(cfg, rng)
        T = labels.size
        feats = {}
        for c in ("physician", "assistant", "ambient", "xray_image"):
            crng = _rng(cfg.seed, "features", i, c)
            D = cfg.dims[c]
            shift = crng.normal(0.0, cfg.op_shift, size=D)
            noise = crng.normal(0.0, cfg.noise_scale * cfg.noise_gain.get(c, 1.0), size=(T, D))
            feats[c] = (means[c][labels] + shift + noise).astype(np.float32)
        flags = flags_from_labels(labels, cfg.moving_s)
        offset = float(rng.uniform(*cfg.log_offset_s))
        log = flags_to_log(flags, offset)
        lag = cfg.ambient_lag_s if cfg.ambient_lag_s is not None else float(
            np.round(rng.uniform(-cfg.max_ambient_lag_s, cfg.max_ambient_lag_s), 3)
        )
        rec = OperationRecord(
            op_id,
            {c: feats[c] for c in ("physician", "assistant", "ambient")},
            feats["xray_image"],
            encode_xray_log(flags),
            labels,
            meta={"log": log, "log_offset_s": offset, "ambient_lag_s": lag, "beeps_audio_s": [t - offset for t in activation_times(log)]},
        )
        records.append(rec)
    return records


# ---------------------------------------------------------------------------
# Synthetic audio
# ---------------------------------------------------------------------------

BEEP_FREQ_HZ = 542.0


def ramp_tone(sample_rate: int, duration_s: float = 3.0, ramp_s: float = 1.0, rise_db: float = 30.0,
              amplitude: float = 0.3, freq_hz: float = BEEP_FREQ_HZ) -> np.ndarray:
    """Tone whose level rises exponentially by ``rise_db`` over ``ramp_s`` and then holds."""
    t = np.arange(int(round(duration_s * sample_rate))) / sample_rate
    env = amplitude * np.minimum(1.0, 10.0 ** (rise_db / 20.0 * (t / ramp_s - 1.0)))
    return env * np.sin(2 * np.pi * freq_hz * t)


def speech_like(rng: np.random.Generator, n: int, sample_rate: int, notch_hz=(440.0, 640.0)) -> np.ndarray:
    """Noise gated by a piecewise-constant syllable envelope with pauses.

    The spectrum is notched around the warning-tone band so that syllable
    onsets cannot pass for a tone ramp.
    """
    env = np.empty(n)
    pos = 0
    while pos < n:
        seg = int(rng.uniform(0.1, 0.5) * sample_rate)
        level = 0.0 if rng.random() < 0.3 else rng.uniform(0.03, 0.2)
        env[pos : pos + seg] = level
        pos += seg
    x = env * rng.standard_normal(n)
    if notch_hz is not None:
        spec = np.fft.rfft(x)
        f = np.fft.rfftfreq(n, 1.0 / sample_rate)
        spec[(f >= notch_hz[0]) & (f <= notch_hz[1])] = 0.0
        x = np.fft.irfft(spec, n)
    return x


def synth_audio(rec: OperationRecord, cfg: SynthConfig) -> dict[str, AudioSignal]:
    """Render physician / assistant / ambient tracks for one synthetic operation.

    The physician track carries a rising 542 Hz tone at each X-ray activation.
    The ambient track hears the physician track ``ambient_lag_s`` later, plus
    room noise at ``ambient_snr_db``.
    """
    sr = cfg.audio_rate
    idx = int(rec.operation_id[2:]) if rec.operation_id.startswith("op") else 0
    rng = _rng(cfg.seed, "audio", idx)
    n = rec.T * sr
    phys = speech_like(rng, n, sr) + rng.normal(0.0, cfg.mic_noise, n)
    tone = ramp_tone(sr)
    for t in rec.meta["beeps_audio_s"]:
        i = int(round(t * sr))
        seg = tone[: max(0, n - i)]
        phys[i : i + seg.size] += seg
    asst = speech_like(rng, n, sr) + 0.3 * phys + rng.normal(0.0, cfg.mic_noise, n)
    lag = rec.meta["ambient_lag_s"]
    k = int(round(abs(lag) * sr))
    if lag >= 0:
        heard = np.concatenate([np.zeros(k), phys])
    else:
        heard = phys[k:]
    p_sig = np.mean(heard**2)
    noise = rng.standard_normal(heard.size) * np.sqrt(p_sig / 10 ** (cfg.ambient_snr_db / 10))
    amb = heard + noise
    clip = lambda x: AudioSignal(np.clip(x, -1.0, 1.0), sr)
    return {"physician": clip(phys), "assistant": clip(asst), "ambient": clip(amb)}
