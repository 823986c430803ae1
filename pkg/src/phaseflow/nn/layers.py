"""Model building blocks: dilated 1-D convolution, GMU fusion, MS-TCN stages.

All sequence tensors are laid out channels-first, ``C x T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, _make, add, concat, matmul, mul, relu, sigmoid, softmax, tanh

PADDING_MODES = ("acausal_same", "causal")


def conv1d_dilated(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None,
    dilation: int = 1,
    padding: str = "acausal_same",
) -> Tensor:
    """Dilated convolution over time; output keeps the input length.

    ``acausal_same`` pads ``(k-1)/2 * dilation`` zeros on both sides, ``causal``
    pads ``(k-1) * dilation`` on the left only.
    """
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    if padding not in PADDING_MODES:
        raise ValueError(f"unknown padding mode {padding!r}")
    if x.data.ndim != 2 or weight.data.ndim != 3:
        raise ValueError(f"expected input C_in x T and weight C_out x C_in x k, got {x.shape}, {weight.shape}")
    c_out, c_in, k = weight.shape
    if x.shape[0] != c_in:
        raise ValueError(f"input has {x.shape[0]} channels, weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} != ({c_out},)")
    if padding == "acausal_same":
        if k % 2 == 0:
            raise ValueError("acausal_same padding needs an odd kernel size")
        left = right = (k - 1) // 2 * dilation
    else:
        left, right = (k - 1) * dilation, 0

    T = x.shape[1]
    xp = np.pad(x.data, ((0, 0), (left, right)))
    # im2col: row ci*k + j holds input channel ci shifted by tap j
    cols = np.stack([xp[:, j * dilation : j * dilation + T] for j in range(k)], axis=1).reshape(c_in * k, T)
    w2 = weight.data.reshape(c_out, c_in * k)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]

    def bw(g):
        gw = (g @ cols.T).reshape(weight.shape)
        gcols = (w2.T @ g).reshape(c_in, k, T)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, j * dilation : j * dilation + T] += gcols[:, j, :]
        gx = gxp[:, left : left + T]
        gb = g.sum(axis=1) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, bw if bias is not None else (lambda g: bw(g)[:2]), "conv1d")


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape: tuple[int, ...], dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


# ---------------------------------------------------------------------------
# Gated multimodal unit
# ---------------------------------------------------------------------------


@dataclass
class GmuParams:
    """Per-modality tanh projections ``w_h[k]`` (D_model x D_k) and gates
    ``w_z[k]`` (D_model x sum D_k)."""

    w_h: list[Tensor]
    w_z: list[Tensor]

    @classmethod
    def init(cls, rng, input_dims: list[int], model_dim: int, dtype=np.float32) -> "GmuParams":
        total = sum(input_dims)
        return cls(
            w_h=[init_uniform(rng, (model_dim, d), d, dtype) for d in input_dims],
            w_z=[init_uniform(rng, (model_dim, total), total, dtype) for _ in input_dims],
        )

    @property
    def n_modalities(self) -> int:
        return len(self.w_h)

    def named_parameters(self, prefix: str, names: list[str] | None = None) -> dict[str, Tensor]:
        names = names or [str(i) for i in range(self.n_modalities)]
        out = {}
        for name, wh in zip(names, self.w_h):
            out[f"{prefix}w_h.{name}"] = wh
        for name, wz in zip(names, self.w_z):
            out[f"{prefix}w_z.{name}"] = wz
        return out


def gmu_forward(inputs: list[Tensor], params: GmuParams) -> Tensor:
    """Fuse K modality sequences (each D_k x T) into one D_model x T sequence.

    h_k = tanh(W_hk x_k), z_k = sigmoid(W_zk [x_1; ...; x_K]), output sum_k h_k * z_k.
    """
    if len(inputs) != params.n_modalities:
        raise ValueError(f"GMU built for {params.n_modalities} modalities, got {len(inputs)}")
    for k, (x, wh) in enumerate(zip(inputs, params.w_h)):
        if x.shape[0] != wh.shape[1]:
            raise ValueError(f"modality {k}: dim {x.shape[0]} != {wh.shape[1]}")
    joint = concat(inputs, axis=0) if len(inputs) > 1 else inputs[0]
    out = None
    for x, wh, wz in zip(inputs, params.w_h, params.w_z):
        o = mul(tanh(matmul(wh, x)), sigmoid(matmul(wz, joint)))
        out = o if out is None else add(out, o)
    return out


# ---------------------------------------------------------------------------
# Temporal convolutional stages
# ---------------------------------------------------------------------------


@dataclass
class BlockParams:
    w1: Tensor  # C x C x k, dilated
    b1: Tensor
    w2: Tensor  # C x C x 1
    b2: Tensor

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}w1": self.w1, f"{prefix}b1": self.b1, f"{prefix}w2": self.w2, f"{prefix}b2": self.b2}

    @classmethod
    def init(cls, rng, channels: int, kernel_size: int, dtype=np.float32) -> "BlockParams":
        fan1 = channels * kernel_size
        return cls(
            w1=init_uniform(rng, (channels, channels, kernel_size), fan1, dtype),
            b1=init_uniform(rng, (channels,), fan1, dtype),
            w2=init_uniform(rng, (channels, channels, 1), channels, dtype),
            b2=init_uniform(rng, (channels,), channels, dtype),
        )


def residual_block_forward(d_prev: Tensor, block: BlockParams, dilation: int, padding: str = "acausal_same") -> Tensor:
    """d_hat = ReLU(W1 * d_prev + b1) (dilated); d = d_prev + W2 * d_hat + b2 (1x1)."""
    c = d_prev.shape[0]
    if block.w1.shape[:2] != (c, c) or block.w2.shape[:2] != (c, c):
        raise ValueError(f"residual block expects {block.w1.shape[0]} channels, got {c}")
    d_hat = relu(conv1d_dilated(d_prev, block.w1, block.b1, dilation, padding))
    return add(d_prev, conv1d_dilated(d_hat, block.w2, block.b2, 1, padding))


@dataclass
class StageParams:
    w_in: Tensor  # C x D x 1
    b_in: Tensor
    blocks: list[BlockParams]
    w_out: Tensor  # n_classes x C x 1
    b_out: Tensor
    padding: str = "acausal_same"

    @classmethod
    def init(
        cls,
        rng,
        in_dim: int,
        channels: int,
        n_classes: int,
        n_layers: int,
        kernel_size: int = 3,
        padding: str = "acausal_same",
        dtype=np.float32,
    ) -> "StageParams":
        if n_layers < 1:
            raise ValueError("a stage needs at least one layer")
        return cls(
            w_in=init_uniform(rng, (channels, in_dim, 1), in_dim, dtype),
            b_in=init_uniform(rng, (channels,), in_dim, dtype),
            blocks=[BlockParams.init(rng, channels, kernel_size, dtype) for _ in range(n_layers)],
            w_out=init_uniform(rng, (n_classes, channels, 1), channels, dtype),
            b_out=init_uniform(rng, (n_classes,), channels, dtype),
            padding=padding,
        )

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    @property
    def kernel_size(self) -> int:
        return self.blocks[0].w1.shape[2]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}w_in": self.w_in, f"{prefix}b_in": self.b_in}
        for i, blk in enumerate(self.blocks):
            out.update(blk.named_parameters(f"{prefix}block{i}."))
        out[f"{prefix}w_out"] = self.w_out
        out[f"{prefix}b_out"] = self.b_out
        return out


def stage_forward(x: Tensor, params: StageParams) -> Tensor:
    """Single-stage TCN: 1x1 in, L dilated residual blocks (dilation 2^l), 1x1 out.

    Returns raw class logits (n_classes x T).
    """
    d = conv1d_dilated(x, params.w_in, params.b_in, 1, params.padding)
    for layer, block in enumerate(params.blocks):
        d = residual_block_forward(d, block, 2**layer, params.padding)
    return conv1d_dilated(d, params.w_out, params.b_out, 1, params.padding)


def mstcn_forward(x: Tensor, stages: list[StageParams]) -> list[Tensor]:
    """Run stacked stages; every stage after the first sees the softmax of its predecessor."""
    if not stages:
        raise ValueError("need at least one stage")
    outputs = [stage_forward(x, stages[0])]
    for stage in stages[1:]:
        outputs.append(stage_forward(softmax(outputs[-1], axis=0), stage))
    return outputs


def receptive_field(n_layers: int, kernel_size: int = 3) -> int:
    """Closed-form receptive field of one stage with dilations 1, 2, ..., 2^(L-1)."""
    return 1 + (kernel_size - 1) * (2**n_layers - 1)


# ---------------------------------------------------------------------------
# LDAM loss
# ---------------------------------------------------------------------------


@dataclass
class LdamConfig:
    """Label-distribution-aware margins ``C / n_j^(1/4)`` with logit scale ``s``."""

    class_counts: np.ndarray
    margin_scale: float
    s: float = 30.0
    margins: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        counts = np.asarray(self.class_counts, dtype=np.float64)
        if np.any(counts < 1):
            raise ValueError("class counts must be >= 1")
        if self.margin_scale < 0:
            raise ValueError("margin scale must be >= 0")
        if self.s <= 0:
            raise ValueError("logit scale s must be > 0")
        self.class_counts = counts
        self.margins = self.margin_scale / counts**0.25

    @classmethod
    def from_counts(cls, counts, max_margin: float = 0.5, s: float = 30.0) -> "LdamConfig":
        """Pick C so the rarest class gets ``max_margin``. Zero counts are clipped to 1."""
        counts = np.maximum(np.asarray(counts, dtype=np.float64), 1.0)
        return cls(counts, max_margin * counts.min() ** 0.25, s)


def ldam_loss(logits: Tensor, labels: np.ndarray, cfg: LdamConfig) -> Tensor:
    """Mean over frames of the margin-adjusted, scaled softmax cross-entropy."""
    n_classes, T = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (T,):
        raise ValueError(f"labels shape {labels.shape} != ({T},)")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError("label out of range")
    if len(cfg.margins) != n_classes:
        raise ValueError(f"LDAM configured for {len(cfg.margins)} classes, logits have {n_classes}")
    cols = np.arange(T)
    adj = logits.data.astype(np.float64, copy=True)
    adj[labels, cols] -= cfg.margins[labels]
    adj *= cfg.s
    adj -= adj.max(axis=0, keepdims=True)
    lse = np.log(np.exp(adj).sum(axis=0))
    loss = np.mean(lse - adj[labels, cols])
    prob = np.exp(adj - lse)

    def bw(g):
        grad = prob.copy()
        grad[labels, cols] -= 1.0
        return ((g * cfg.s / T) * grad).astype(logits.dtype, copy=False),

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "ldam")
