"""Speech and image phase models, their training loop, and merged inference.

Both models end in a two-stage MS-TCN. The autoregressive connection is a
learned table indexed by the previous second's label whose row is added to
every stage's logits at the current second. Because it acts per time step it
never leaks a label into neighbouring seconds through the acausal
convolutions, so greedy left-to-right decoding is exact.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import evaluate
from .data import DEFAULT_LABEL_NAMES, N_CLASSES, PhaseTimeline
from .features import LOG_DIM, SPEECH_CHANNELS, OperationRecord
from .nn import (
    AdamState,
    BlockParams,
    GmuParams,
    LdamConfig,
    StageParams,
    Tensor,
    adam_step,
    gmu_forward,
    ldam_loss,
    load_checkpoint,
    mstcn_forward,
    no_grad,
    residual_block_forward,
    save_checkpoint,
    zero_grad,
)
from .nn.layers import conv1d_dilated, init_uniform, zeros_param
from .nn.optim import DEFAULT_LR, DEFAULT_WEIGHT_DECAY
from .nn.tensor import add, matmul

log = logging.getLogger(__name__)

SEGMENT_S = 180


class ModelError(ValueError):
    pass


def adaptive_pool_matrix(in_dim: int, out_dim: int) -> np.ndarray:
    """Averaging matrix (out_dim x in_dim) with adaptive-average-pooling bin edges."""
    P = np.zeros((out_dim, in_dim))
    for i in range(out_dim):
        lo = (i * in_dim) // out_dim
        hi = -((-(i + 1) * in_dim) // out_dim)
        P[i, lo:hi] = 1.0 / (hi - lo)
    return P


def shifted_feed(labels: np.ndarray, carry: int) -> np.ndarray:
    """Previous-second labels: ``feed[t] = labels[t-1]`` and ``feed[0] = carry``."""
    labels = np.asarray(labels, dtype=np.int64)
    return np.concatenate([[carry], labels[:-1]]).astype(np.int64)


@dataclass
class SpeechConfig:
    input_dims: dict[str, int]
    channels: tuple[str, ...] = SPEECH_CHANNELS
    n_refine: int = 2
    pool_dim: int = 256
    tcn_channels: int = 64
    n_layers: int = 7
    n_stages: int = 2
    kernel_size: int = 3
    n_classes: int = N_CLASSES
    padding: str = "acausal_same"


@dataclass
class ImageConfig:
    image_dim: int
    use_log: bool = True
    proj_dim: int = 256
    tcn_channels: int = 64
    n_layers: int = 4
    n_stages: int = 2
    kernel_size: int = 3
    n_classes: int = N_CLASSES
    padding: str = "acausal_same"

    @property
    def input_dim(self) -> int:
        return self.image_dim + (LOG_DIM if self.use_log else 0)


class PhaseModel:
    """Shared machinery: stages, autoregressive tables, decoding, checkpoints."""

    kind = ""

    def __init__(self, cfg, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self.n_classes = cfg.n_classes
        self._build(self.rng)
        stage_in = self.temporal_dim
        self.stages = []
        for s in range(cfg.n_stages):
            self.stages.append(
                StageParams.init(
                    self.rng,
                    stage_in if s == 0 else cfg.n_classes,
                    cfg.tcn_channels,
                    cfg.n_classes,
                    cfg.n_layers,
                    cfg.kernel_size,
                    cfg.padding,
                    self.dtype,
                )
            )
        # columns: previous label 0..n-1, then the start token
        self.ar = [zeros_param((cfg.n_classes, cfg.n_classes + 1), self.dtype) for _ in range(cfg.n_stages)]

    # subclass hooks -----------------------------------------------------
    def _build(self, rng) -> None:
        raise NotImplementedError

    @property
    def temporal_dim(self) -> int:
        raise NotImplementedError

    def inputs(self, op: OperationRecord) -> list[np.ndarray]:
        """Per-channel T x D arrays this model consumes."""
        raise NotImplementedError

    def embed(self, xs: list[Tensor]) -> Tensor:
        """Map per-channel D x T tensors to the TCN input sequence."""
        raise NotImplementedError

    def _own_parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    # ------------------------------------------------------------------
    @property
    def start_token(self) -> int:
        return self.n_classes

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"{self.kind}.{k}": v for k, v in self._own_parameters().items()}
        for s, stage in enumerate(self.stages):
            out.update(stage.named_parameters(f"{self.kind}.stage{s}."))
        for s, table in enumerate(self.ar):
            out[f"{self.kind}.ar.stage{s}"] = table
        return out

    def base_logits(self, xs: Sequence[np.ndarray]) -> list[Tensor]:
        """Per-stage logits without the autoregressive term, for one segment."""
        ts = [Tensor(np.ascontiguousarray(x.T, dtype=self.dtype)) for x in xs]
        return mstcn_forward(self.embed(ts), self.stages)

    def segment_logits(self, xs: Sequence[np.ndarray], feed: np.ndarray) -> list[Tensor]:
        """Per-stage logits for one segment given the previous-second labels ``feed``."""
        base = self.base_logits(xs)
        onehot = np.zeros((self.n_classes + 1, len(feed)), dtype=self.dtype)
        onehot[feed, np.arange(len(feed))] = 1.0
        onehot_t = Tensor(onehot)
        return [add(b, matmul(a, onehot_t)) for b, a in zip(base, self.ar)]

    def forward(self, op: OperationRecord, prev_labels=None, segment_s: int = SEGMENT_S) -> list[np.ndarray]:
        """Per-stage logits (n_classes x T) over a whole operation.

        ``prev_labels`` are the labels fed back one second later; ``None`` feeds
        the model's own greedy predictions.
        """
        if prev_labels is None:
            prev_labels = self.decode(op, segment_s)
        prev_labels = np.asarray(prev_labels, dtype=np.int64)
        if prev_labels.shape != (op.T,):
            raise ModelError("prev_labels must have one entry per second")
        xs = self.inputs(op)
        outs: list[list[np.ndarray]] = [[] for _ in self.stages]
        carry = self.start_token
        with no_grad():
            for s0 in range(0, op.T, segment_s):
                s1 = min(op.T, s0 + segment_s)
                feed = shifted_feed(prev_labels[s0:s1], carry)
                for k, lg in enumerate(self.segment_logits([x[s0:s1] for x in xs], feed)):
                    outs[k].append(lg.data)
                carry = int(prev_labels[s1 - 1])
        return [np.concatenate(o, axis=1) for o in outs]

    def decode(self, op: OperationRecord, segment_s: int = SEGMENT_S) -> np.ndarray:
        """Greedy left-to-right labels, feeding each second's argmax into the next."""
        xs = self.inputs(op)
        labels = np.empty(op.T, dtype=np.int64)
        prev = self.start_token
        table = self.ar[-1].data
        with no_grad():
            for s0 in range(0, op.T, segment_s):
                s1 = min(op.T, s0 + segment_s)
                final = self.base_logits([x[s0:s1] for x in xs])[-1].data
                for t in range(s1 - s0):
                    prev = int(np.argmax(final[:, t] + table[:, prev]))
                    labels[s0 + t] = prev
        return labels

    # checkpoints ---------------------------------------------------------
    def describe(self) -> dict:
        cfg = asdict(self.cfg)
        if "channels" in cfg:
            cfg["channels"] = list(cfg["channels"])
        return {"kind": self.kind, "config": cfg}

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, {k: v.data for k, v in self.named_parameters().items()})
        path.with_suffix(".json").write_text(json.dumps(self.describe(), indent=2, sort_keys=True) + "\n")

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ModelError(f"checkpoint mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
        for k, p in params.items():
            if arrays[k].shape != p.data.shape:
                raise ModelError(f"{k}: checkpoint shape {arrays[k].shape} != {p.data.shape}")
            p.data = arrays[k].astype(self.dtype)


class SpeechModel(PhaseModel):
    """Per-channel residual refinement, pooling to a shared width, GMU fusion, MS-TCN."""

    kind = "speech"

    def _build(self, rng) -> None:
        cfg: SpeechConfig = self.cfg
        missing = [c for c in cfg.channels if c not in cfg.input_dims]
        if missing:
            raise ModelError(f"no input dim for channels {missing}")
        self.refine = {
            c: [BlockParams.init(rng, cfg.input_dims[c], 1, self.dtype) for _ in range(cfg.n_refine)]
            for c in cfg.channels
        }
        self.pool = {
            c: Tensor(adaptive_pool_matrix(cfg.input_dims[c], cfg.pool_dim).astype(self.dtype)) for c in cfg.channels
        }
        self.gmu = GmuParams.init(rng, [cfg.pool_dim] * len(cfg.channels), cfg.pool_dim, self.dtype)

    @property
    def temporal_dim(self) -> int:
        return self.cfg.pool_dim

    def inputs(self, op: OperationRecord) -> list[np.ndarray]:
        out = []
        for c in self.cfg.channels:
            if c not in op.speech:
                raise ModelError(f"{op.operation_id}: missing speech channel {c}")
            x = op.speech[c]
            if x.shape[1] != self.cfg.input_dims[c]:
                raise ModelError(f"{op.operation_id}/{c}: dim {x.shape[1]} != {self.cfg.input_dims[c]}")
            out.append(x)
        return out

    def embed(self, xs: list[Tensor]) -> Tensor:
        pooled = []
        for c, x in zip(self.cfg.channels, xs):
            for blk in self.refine[c]:
                x = residual_block_forward(x, blk, 1)
            pooled.append(matmul(self.pool[c], x))
        return gmu_forward(pooled, self.gmu)

    def _own_parameters(self) -> dict[str, Tensor]:
        out = {}
        for c in self.cfg.channels:
            for i, blk in enumerate(self.refine[c]):
                out.update(blk.named_parameters(f"refine.{c}.{i}."))
        out.update(self.gmu.named_parameters("gmu.", list(self.cfg.channels)))
        return out


class ImageModel(PhaseModel):
    """X-ray features concatenated with the encoded log, 1x1 conv, MS-TCN."""

    kind = "image"

    def _build(self, rng) -> None:
        cfg: ImageConfig = self.cfg
        d = cfg.input_dim
        self.w_proj = init_uniform(rng, (cfg.proj_dim, d, 1), d, self.dtype)
        self.b_proj = init_uniform(rng, (cfg.proj_dim,), d, self.dtype)

    @property
    def temporal_dim(self) -> int:
        return self.cfg.proj_dim

    def inputs(self, op: OperationRecord) -> list[np.ndarray]:
        x = op.image_input if self.cfg.use_log else op.xray_image
        if x.shape[1] != self.cfg.input_dim:
            raise ModelError(f"{op.operation_id}: image input dim {x.shape[1]} != {self.cfg.input_dim}")
        return [x]

    def embed(self, xs: list[Tensor]) -> Tensor:
        return conv1d_dilated(xs[0], self.w_proj, self.b_proj, 1, self.cfg.padding)

    def _own_parameters(self) -> dict[str, Tensor]:
        return {"proj.w": self.w_proj, "proj.b": self.b_proj}


def speech_forward(op: OperationRecord, model: SpeechModel, prev_label_feed=None) -> list[np.ndarray]:
    return model.forward(op, prev_label_feed)


def image_forward(op: OperationRecord, model: ImageModel, prev_label_feed=None) -> list[np.ndarray]:
    return model.forward(op, prev_label_feed)


def load_model(path, dtype=np.float32) -> PhaseModel:
    """Rebuild a model from a checkpoint and its JSON sidecar."""
    path = Path(path)
    meta_path = path.with_suffix(".json")
    if not path.exists() or not meta_path.exists():
        raise ModelError(f"missing checkpoint {path} or {meta_path}")
    meta = json.loads(meta_path.read_text())
    cfg = dict(meta["config"])
    if meta["kind"] == "speech":
        cfg["channels"] = tuple(cfg["channels"])
        model: PhaseModel = SpeechModel(SpeechConfig(**cfg), dtype=dtype)
    elif meta["kind"] == "image":
        model = ImageModel(ImageConfig(**cfg), dtype=dtype)
    else:
        raise ModelError(f"unknown model kind {meta['kind']!r}")
    model.load_arrays(load_checkpoint(path))
    return model


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    segment_s: int = SEGMENT_S
    epochs: int = 30
    seed: int = 0
    teacher_forcing: bool = True
    lr: float = DEFAULT_LR
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    ldam_max_margin: float = 0.5
    ldam_s: float = 30.0

    def __post_init__(self):
        if self.segment_s < 1:
            raise ModelError("segment_s must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_acc: float = float("nan")
    val_f1: float = float("nan")


def class_counts(ops: Sequence[OperationRecord], n_classes: int = N_CLASSES) -> np.ndarray:
    return sum(np.bincount(op.labels, minlength=n_classes) for op in ops)


def segment_loss(model: PhaseModel, xs, labels: np.ndarray, feed: np.ndarray, ldam: LdamConfig) -> Tensor:
    """Sum of the LDAM losses of all stages for one segment."""
    total = None
    for lg in model.segment_logits(xs, feed):
        loss = ldam_loss(lg, labels, ldam)
        total = loss if total is None else add(total, loss)
    return total


def train(
    model: PhaseModel,
    train_ops: Sequence[OperationRecord],
    cfg: TrainConfig,
    val_ops: Sequence[OperationRecord] = (),
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> list[EpochStats]:
    """Adam over 180 s segments of shuffled operations; returns per-epoch history."""
    if not train_ops:
        raise ModelError("empty training set")
    if any(op.labels is None for op in train_ops):
        raise ModelError("training operations need labels")
    ldam = LdamConfig.from_counts(class_counts(train_ops, model.n_classes), cfg.ldam_max_margin, cfg.ldam_s)
    params = model.named_parameters()
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        losses = []
        for idx in rng.permutation(len(train_ops)):
            op = train_ops[idx]
            xs = model.inputs(op)
            fed = op.labels if cfg.teacher_forcing else model.decode(op, cfg.segment_s)
            carry = model.start_token
            for s0 in range(0, op.T, cfg.segment_s):
                s1 = min(op.T, s0 + cfg.segment_s)
                feed = shifted_feed(fed[s0:s1], carry)
                carry = int(fed[s1 - 1])
                zero_grad(params)
                loss = segment_loss(model, [x[s0:s1] for x in xs], op.labels[s0:s1], feed, ldam)
                loss.backward()
                adam_step(params, state)
                losses.append(float(loss.data))
        stats = EpochStats(epoch, float(np.mean(losses)))
        if val_ops:
            preds = [model.decode(op, cfg.segment_s) for op in val_ops]
            stats.val_acc = float(np.mean([evaluate.frame_accuracy(p, op.labels) for p, op in zip(preds, val_ops)]))
            stats.val_f1 = float(np.mean([evaluate.macro_f1(p, op.labels) for p, op in zip(preds, val_ops)]))
        log.info(
            "%s epoch %d loss %.4f val_acc %.2f val_f1 %.2f (%.1fs)",
            model.kind, epoch, stats.train_loss, stats.val_acc, stats.val_f1, time.perf_counter() - t0,
        )
        history.append(stats)
        if on_epoch:
            on_epoch(stats)
    return history


def write_history_csv(path, history: Sequence[EpochStats], seed: int | None = None) -> None:
    lines = [] if seed is None else [f"# seed={seed}"]
    lines.append("epoch,train_loss,val_acc,val_f1")
    for h in history:
        lines.append(f"{h.epoch},{h.train_loss:.6f},{h.val_acc:.4f},{h.val_f1:.4f}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Merged inference
# ---------------------------------------------------------------------------

SPEECH_PHASES = ("Preparation", "Puncture")


@dataclass
class SwitchConfig:
    trigger_phase: str = "Puncture"
    consecutive_s: int = 30
    speech_phases: tuple[str, ...] = SPEECH_PHASES
    image_phases: tuple[str, ...] = tuple(n for n in DEFAULT_LABEL_NAMES[1:] if n not in SPEECH_PHASES)

    def validate(self, label_names: Sequence[str]) -> int:
        if self.consecutive_s < 1:
            raise ModelError("consecutive_s must be >= 1")
        phases = set(label_names[1:])
        sp, ip = set(self.speech_phases), set(self.image_phases)
        if sp & ip or (sp | ip) != phases:
            raise ModelError("speech and image phase sets must partition the surgical phases")
        if self.trigger_phase not in label_names:
            raise ModelError(f"unknown trigger phase {self.trigger_phase!r}")
        return list(label_names).index(self.trigger_phase)


def switch_time(speech_labels: np.ndarray, trigger: int, k: int) -> int | None:
    """Last second of the first run of ``k`` consecutive ``trigger`` predictions."""
    run = 0
    for t, y in enumerate(speech_labels):
        run = run + 1 if y == trigger else 0
        if run == k:
            return t
    return None


def merged_infer(
    op: OperationRecord,
    speech: SpeechModel,
    image: ImageModel,
    sw: SwitchConfig | None = None,
    label_names: Sequence[str] | None = None,
    segment_s: int = SEGMENT_S,
) -> PhaseTimeline:
    """Speech labels up to the switch second, image labels afterwards.

    The switch second is stored in ``op.meta["switch_s"]`` (None if it never fires).
    """
    sw = sw or SwitchConfig()
    names = label_names or op.meta.get("label_names") or DEFAULT_LABEL_NAMES
    trigger = sw.validate(names)
    speech_labels = speech.decode(op, segment_s)
    t_star = switch_time(speech_labels, trigger, sw.consecutive_s)
    op.meta["switch_s"] = t_star
    if t_star is None:
        return PhaseTimeline(speech_labels, tuple(names))
    image_labels = image.decode(op, segment_s)
    return PhaseTimeline(np.concatenate([speech_labels[: t_star + 1], image_labels[t_star + 1 :]]), tuple(names))
