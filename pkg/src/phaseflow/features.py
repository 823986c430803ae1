"""Per-second feature sequences: FTR1 files, X-ray log encoding and operation assembly."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .signal import AudioSignal

log = logging.getLogger(__name__)

CHANNELS = ("physician", "assistant", "ambient", "xray_image", "xray_log")
SPEECH_CHANNELS = ("physician", "assistant", "ambient")
LOG_REPEAT = 64
LOG_DIM = 3 * LOG_REPEAT
MFCC_DIM = 40
DEFAULT_EMBED_DIM = 1024

FTR_MAGIC = b"FTR1"
FTR_VERSION = 1


class FeatureError(ValueError):
    pass


@dataclass
class FeatureSequence:
    values: np.ndarray  # T x D
    channel_id: str = "physician"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise FeatureError("feature values must be a T x D matrix")
        if not np.all(np.isfinite(v)):
            raise FeatureError("corrupt features: non-finite values")
        self.values = v

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def encode_xray_log(flags) -> np.ndarray:
    """Indicator vector [fluoro, dsa, moving] with each entry repeated 64 times (192 dims)."""
    flags = np.asarray(flags)
    if flags.shape[-1] != 3:
        raise FeatureError("expected (fluoro, dsa, moving) triples")
    if not np.isin(flags, (0, 1)).all():
        raise FeatureError("log flags must be binary")
    return np.repeat(flags.astype(np.float32), LOG_REPEAT, axis=-1)


# ---------------------------------------------------------------------------
# FTR1 files
# ---------------------------------------------------------------------------


def write_feature_file(path, values) -> None:
    v = np.ascontiguousarray(values, dtype="<f4")
    if v.ndim != 2:
        raise FeatureError("feature values must be a T x D matrix")
    T, D = v.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(FTR_MAGIC + struct.pack("<III", FTR_VERSION, T, D) + v.tobytes())


def load_feature_file(path, channel_id: str = "physician") -> FeatureSequence:
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:4] != FTR_MAGIC:
        raise FeatureError(f"{path}: unrecognized format")
    version, T, D = struct.unpack_from("<III", buf, 4)
    if version != FTR_VERSION:
        raise FeatureError(f"{path}: unrecognized format (version {version})")
    if len(buf) - 16 < 4 * T * D:
        raise FeatureError(f"{path}: truncated file")
    values = np.frombuffer(buf, dtype="<f4", count=T * D, offset=16).reshape(T, D)
    if not np.all(np.isfinite(values)):
        raise FeatureError(f"{path}: corrupt features")
    return FeatureSequence(values.astype(np.float32), channel_id)


def stub_embed(signal_or_seed, channel_id: str, D: int = DEFAULT_EMBED_DIM, T: int = 1) -> FeatureSequence:
    """Deterministic stand-in for a pretrained extractor.

    Row ``t`` comes from a generator seeded by ``(seed, channel_id, t)``; an
    :class:`AudioSignal` is reduced to a seed by hashing its samples.
    """
    if D < 1 or T < 1:
        raise FeatureError("D and T must be >= 1")
    if isinstance(signal_or_seed, AudioSignal):
        digest = hashlib.sha256(signal_or_seed.samples.tobytes()).digest()
        seed = int.from_bytes(digest[:8], "little")
    else:
        seed = int(signal_or_seed)
    key = zlib.crc32(channel_id.encode())
    rows = [np.random.default_rng([seed, key, t]).standard_normal(D) for t in range(T)]
    return FeatureSequence(np.vstack(rows).astype(np.float32), channel_id)


# ---------------------------------------------------------------------------
# Manifests and operation records
# ---------------------------------------------------------------------------


@dataclass
class ChannelEntry:
    path: str
    dim: int
    seconds: int


@dataclass
class EmbeddingManifest:
    operation_id: str
    channels: dict[str, ChannelEntry]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        secs = {c.seconds for c in self.channels.values()}
        if len(secs) > 1:
            raise FeatureError(f"{self.operation_id}: channels declare different durations {sorted(secs)}")

    @classmethod
    def from_dict(cls, obj: dict, root=".") -> "EmbeddingManifest":
        chans = {name: ChannelEntry(str(c["path"]), int(c["dim"]), int(c["seconds"])) for name, c in obj["channels"].items()}
        return cls(str(obj["operation_id"]), chans, Path(root))

    @classmethod
    def load(cls, path) -> "EmbeddingManifest":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), path.parent)

    def to_dict(self) -> dict:
        return {
            "operation_id": self.operation_id,
            "channels": {
                n: {"path": c.path, "dim": c.dim, "seconds": c.seconds} for n, c in sorted(self.channels.items())
            },
        }

    def load_channel(self, name: str) -> FeatureSequence:
        if name not in self.channels:
            raise FeatureError(f"{self.operation_id}: missing channel {name}")
        entry = self.channels[name]
        seq = load_feature_file(self.root / entry.path, name)
        if seq.dim != entry.dim or seq.T != entry.seconds:
            raise FeatureError(
                f"{self.operation_id}/{name}: file is {seq.T}x{seq.dim}, manifest says {entry.seconds}x{entry.dim}"
            )
        return seq


@dataclass
class OperationRecord:
    """One operation's per-second model inputs and (optionally) its phase labels."""

    operation_id: str
    speech: dict[str, np.ndarray]  # channel -> T x D
    xray_image: np.ndarray  # T x D_x
    xray_log: np.ndarray  # T x 192
    labels: np.ndarray | None = None  # T phase ids
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.xray_image.shape[0]

    @property
    def image_input(self) -> np.ndarray:
        """Image features followed by the encoded log vector, T x (D_x + 192)."""
        return np.concatenate([self.xray_image, self.xray_log], axis=1)


def assemble_operation(
    manifest: EmbeddingManifest,
    log_flags,
    mfcc_ambient: FeatureSequence | None = None,
    labels=None,
) -> OperationRecord:
    """Load every channel named in the manifest and bind them to the per-second log states.

    ``mfcc_ambient`` overrides an ``ambient`` entry in the manifest.
    """
    speech = {}
    for name in ("physician", "assistant"):
        speech[name] = manifest.load_channel(name).values
    ambient = mfcc_ambient if mfcc_ambient is not None else manifest.load_channel("ambient")
    if ambient.dim != MFCC_DIM:
        log.warning("%s: ambient features have %d dims (expected %d)", manifest.operation_id, ambient.dim, MFCC_DIM)
    speech["ambient"] = ambient.values
    image = manifest.load_channel("xray_image").values
    encoded = encode_xray_log(np.asarray(log_flags).reshape(-1, 3))
    lengths = {n: v.shape[0] for n, v in speech.items()}
    lengths["xray_image"] = image.shape[0]
    lengths["xray_log"] = encoded.shape[0]
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        lengths["labels"] = labels.shape[0]
    if len(set(lengths.values())) != 1:
        raise FeatureError(f"misaligned operation {manifest.operation_id}: {lengths}")
    return OperationRecord(manifest.operation_id, speech, image, encoded, labels)
