"""Proposal head: shared parameters usable as a dilated conv or as an FC map.

The head is the standard region-proposal shape: a 3x3 hidden convolution with
ReLU followed by two 1x1 sibling outputs (one objectness logit, four box
deltas per cell). The same parameter storage drives both forward forms, so
the convolutional sweep (:func:`forward_conv`) and the per-patch
fully-connected form (:func:`forward_fc`) can never drift apart.

Training support is self-contained: the multi-task loss (weighted smooth-L1
box regression plus binary cross entropy), exact analytic gradients through
the fully-connected path, and a plain SGD update. Feature maps and the boxes
being refined are treated as constants; only head parameters receive
gradients.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .geometry import Delta4
from .tensor import ConvWeights, conv2d_dilated, fc_from_conv

CHECKPOINT_MAGIC = b"RPNHEAD\x00"
CHECKPOINT_VERSION = 1


@dataclass
class LossConfig:
    """Multi-task loss settings: total = lam * L_reg + L_cls."""

    lam: float = 5.0
    beta: float = 1.0

    def __post_init__(self) -> None:
        if self.lam <= 0:
            raise ValueError(f"lam must be > 0, got {self.lam}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")


@dataclass
class RpnHeadParams:
    """Head parameters: hidden 3x3 conv plus 1x1 objectness/regression outputs."""

    hidden: ConvWeights
    obj_weight: np.ndarray  # (1, c_mid)
    obj_bias: np.ndarray  # (1,)
    reg_weight: np.ndarray  # (4, c_mid)
    reg_bias: np.ndarray  # (4,)

    def __post_init__(self) -> None:
        self.obj_weight = np.asarray(self.obj_weight, dtype=np.float64)
        self.obj_bias = np.asarray(self.obj_bias, dtype=np.float64)
        self.reg_weight = np.asarray(self.reg_weight, dtype=np.float64)
        self.reg_bias = np.asarray(self.reg_bias, dtype=np.float64)
        c_mid = self.hidden.out_channels
        if self.obj_weight.shape != (1, c_mid) or self.obj_bias.shape != (1,):
            raise ValueError("objectness weights must be (1, c_mid) with bias (1,)")
        if self.reg_weight.shape != (4, c_mid) or self.reg_bias.shape != (4,):
            raise ValueError("regression weights must be (4, c_mid) with bias (4,)")

    @property
    def in_channels(self) -> int:
        return self.hidden.in_channels

    @property
    def mid_channels(self) -> int:
        return self.hidden.out_channels

    @property
    def kernel(self) -> tuple[int, int]:
        return self.hidden.kernel

    def copy(self) -> "RpnHeadParams":
        return RpnHeadParams(
            hidden=self.hidden.copy(),
            obj_weight=self.obj_weight.copy(),
            obj_bias=self.obj_bias.copy(),
            reg_weight=self.reg_weight.copy(),
            reg_bias=self.reg_bias.copy(),
        )

    def tensors(self) -> dict[str, np.ndarray]:
        """Named parameter tensors in a fixed order."""
        return {
            "hidden_weight": self.hidden.weight,
            "hidden_bias": self.hidden.bias,
            "obj_weight": self.obj_weight,
            "obj_bias": self.obj_bias,
            "reg_weight": self.reg_weight,
            "reg_bias": self.reg_bias,
        }

    @classmethod
    def initialize(
        cls,
        in_channels: int,
        mid_channels: int,
        rng: np.random.Generator,
        kernel: tuple[int, int] = (3, 3),
        weight_std: float = 0.01,
    ) -> "RpnHeadParams":
        """Zero-mean normal weights (default std 0.01), zero biases."""
        m, n = kernel
        return cls(
            hidden=ConvWeights(
                rng.normal(0.0, weight_std, size=(mid_channels, in_channels, m, n)),
                np.zeros(mid_channels),
            ),
            obj_weight=rng.normal(0.0, weight_std, size=(1, mid_channels)),
            obj_bias=np.zeros(1),
            reg_weight=rng.normal(0.0, weight_std, size=(4, mid_channels)),
            reg_bias=np.zeros(4),
        )

    @classmethod
    def zeros(
        cls, in_channels: int, mid_channels: int, kernel: tuple[int, int] = (3, 3)
    ) -> "RpnHeadParams":
        m, n = kernel
        return cls(
            hidden=ConvWeights(
                np.zeros((mid_channels, in_channels, m, n)), np.zeros(mid_channels)
            ),
            obj_weight=np.zeros((1, mid_channels)),
            obj_bias=np.zeros(1),
            reg_weight=np.zeros((4, mid_channels)),
            reg_bias=np.zeros(4),
        )


@dataclass
class HeadGradients:
    """Gradient tensors matching :class:`RpnHeadParams` shapes."""

    hidden_weight: np.ndarray
    hidden_bias: np.ndarray
    obj_weight: np.ndarray
    obj_bias: np.ndarray
    reg_weight: np.ndarray
    reg_bias: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "hidden_weight": self.hidden_weight,
            "hidden_bias": self.hidden_bias,
            "obj_weight": self.obj_weight,
            "obj_bias": self.obj_bias,
            "reg_weight": self.reg_weight,
            "reg_bias": self.reg_bias,
        }

    @classmethod
    def zeros_like(cls, params: RpnHeadParams) -> "HeadGradients":
        return cls(**{k: np.zeros_like(v) for k, v in params.tensors().items()})


@dataclass(frozen=True)
class HeadOutput:
    """Per-anchor head output: one objectness logit and one box delta."""

    logit: float
    delta: Delta4


@dataclass
class FcForward:
    """Recorded fully-connected forward pass over a batch of patches."""

    patches: np.ndarray  # (B, c_in * m * n)
    pre_hidden: np.ndarray  # (B, c_mid)
    hidden: np.ndarray  # (B, c_mid)
    logits: np.ndarray  # (B,)
    deltas: np.ndarray  # (B, 4)

    def __len__(self) -> int:
        return self.patches.shape[0]


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    cls: float
    reg: float


def forward_conv(
    features: np.ndarray, params: RpnHeadParams, dilation: int
) -> tuple[np.ndarray, np.ndarray]:
    """Convolutional sweep over a feature map.

    Returns ``(logits, deltas)`` with shapes ``(H, W)`` and ``(4, H, W)``;
    one objectness logit and one delta per cell.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != params.in_channels:
        raise ValueError(
            f"feature map has {features.shape[0]} channels, head expects {params.in_channels}"
        )
    hidden = np.maximum(conv2d_dilated(features, params.hidden, dilation), 0.0)
    logits = np.tensordot(params.obj_weight, hidden, axes=1)[0] + params.obj_bias[0]
    deltas = np.tensordot(params.reg_weight, hidden, axes=1) + params.reg_bias[:, None, None]
    return logits, deltas


def forward_fc_batch(patches: np.ndarray, params: RpnHeadParams) -> FcForward:
    """Fully-connected forward over flattened patches, recording activations.

    ``patches`` is ``(B, c_in * m * n)`` (or ``(B, c_in, m, n)``), flattened
    in the channel-major order fixed by :func:`~anchoraug.tensor.fc_from_conv`.
    """
    p = np.asarray(patches, dtype=np.float64)
    if p.ndim == 4:
        p = p.reshape(p.shape[0], -1)
    if p.ndim != 2:
        raise ValueError(f"patches must be (B, D) or (B, C, m, n), got shape {p.shape}")
    matrix, bias = fc_from_conv(params.hidden)
    if p.shape[1] != matrix.shape[1]:
        raise ValueError(f"patch size {p.shape[1]} does not match head input {matrix.shape[1]}")
    pre_hidden = p @ matrix.T + bias
    hidden = np.maximum(pre_hidden, 0.0)
    logits = hidden @ params.obj_weight[0] + params.obj_bias[0]
    deltas = hidden @ params.reg_weight.T + params.reg_bias
    return FcForward(patches=p, pre_hidden=pre_hidden, hidden=hidden, logits=logits, deltas=deltas)


def forward_fc(patch: np.ndarray, params: RpnHeadParams) -> HeadOutput:
    """Head output for a single ``(c_in, m, n)`` patch."""
    fwd = forward_fc_batch(np.asarray(patch, dtype=np.float64).reshape(1, -1), params)
    return HeadOutput(logit=float(fwd.logits[0]), delta=Delta4.from_array(fwd.deltas[0]))


def bce_with_logits(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Numerically stable binary cross entropy on logits."""
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    return np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))


def smooth_l1(x: np.ndarray, beta: float) -> np.ndarray:
    """Smooth L1: 0.5 x^2 / beta for |x| < beta, else |x| - 0.5 beta."""
    ax = np.abs(np.asarray(x, dtype=np.float64))
    if beta == 0.0:
        return ax
    return np.where(ax < beta, 0.5 * ax * ax / beta, ax - 0.5 * beta)


def _smooth_l1_grad(x: np.ndarray, beta: float) -> np.ndarray:
    if beta == 0.0:
        return np.sign(x)
    return np.where(np.abs(x) < beta, x / beta, np.sign(x))


def loss(
    logits: np.ndarray,
    deltas: np.ndarray,
    positive: np.ndarray,
    delta_targets: np.ndarray,
    cfg: LossConfig,
    num_examples: int | None = None,
) -> LossBreakdown:
    """Multi-task loss over one sampled minibatch.

    ``positive`` is a boolean mask over the batch; ``delta_targets`` has one
    row per positive, in batch order. The classification part is the mean
    BCE over all examples; the regression part is the summed smooth-L1 over
    positive deltas divided by the number of examples; the total weights the
    regression part by ``cfg.lam``.
    """
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    positive = np.asarray(positive, dtype=bool).reshape(-1)
    n = num_examples if num_examples is not None else logits.shape[0]
    if n == 0:
        raise ValueError("loss over an empty minibatch is undefined")
    targets = np.asarray(delta_targets, dtype=np.float64).reshape(-1, 4)
    if targets.shape[0] != int(positive.sum()):
        raise ValueError("delta_targets must provide one row per positive example")
    cls_part = float(np.sum(bce_with_logits(logits, positive.astype(np.float64))) / n)
    reg_part = float(np.sum(smooth_l1(deltas[positive] - targets, cfg.beta)) / n)
    return LossBreakdown(total=cfg.lam * reg_part + cls_part, cls=cls_part, reg=reg_part)


def backward(
    fwd: FcForward,
    positive: np.ndarray,
    delta_targets: np.ndarray,
    cfg: LossConfig,
    params: RpnHeadParams,
    num_examples: int | None = None,
) -> HeadGradients:
    """Exact analytic gradients of :func:`loss` w.r.t. the head parameters.

    Patches (hence features and the boxes that produced them) are constants;
    gradients flow only through the fully-connected path. ``num_examples``
    overrides the normalization denominator when this batch is one shard of
    a larger minibatch.
    """
    positive = np.asarray(positive, dtype=bool).reshape(-1)
    n = num_examples if num_examples is not None else len(fwd)
    if n == 0:
        raise ValueError("backward over an empty minibatch is undefined")
    targets = np.asarray(delta_targets, dtype=np.float64).reshape(-1, 4)

    # d L_cls / d logit = (sigmoid(logit) - y) / n, in a stable form.
    x = fwd.logits
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
    dlogits = (sig - positive.astype(np.float64)) / n

    ddeltas = np.zeros_like(fwd.deltas)
    if targets.shape[0] != int(positive.sum()):
        raise ValueError("delta_targets must provide one row per positive example")
    if targets.shape[0] > 0:
        ddeltas[positive] = (cfg.lam / n) * _smooth_l1_grad(fwd.deltas[positive] - targets, cfg.beta)

    dhidden = dlogits[:, None] * params.obj_weight[0][None, :] + ddeltas @ params.reg_weight
    dpre = dhidden * (fwd.pre_hidden > 0.0)

    c_in = params.in_channels
    m, n_k = params.kernel
    return HeadGradients(
        hidden_weight=(dpre.T @ fwd.patches).reshape(params.mid_channels, c_in, m, n_k),
        hidden_bias=dpre.sum(axis=0),
        obj_weight=(dlogits @ fwd.hidden)[None, :],
        obj_bias=np.array([dlogits.sum()]),
        reg_weight=ddeltas.T @ fwd.hidden,
        reg_bias=ddeltas.sum(axis=0),
    )


def sgd_step(params: RpnHeadParams, grads: HeadGradients, epsilon: float) -> RpnHeadParams:
    """Plain gradient step: every tensor moves by ``-epsilon * grad``."""
    g = grads.tensors()
    return RpnHeadParams(
        hidden=ConvWeights(
            params.hidden.weight - epsilon * g["hidden_weight"],
            params.hidden.bias - epsilon * g["hidden_bias"],
        ),
        obj_weight=params.obj_weight - epsilon * g["obj_weight"],
        obj_bias=params.obj_bias - epsilon * g["obj_bias"],
        reg_weight=params.reg_weight - epsilon * g["reg_weight"],
        reg_bias=params.reg_bias - epsilon * g["reg_bias"],
    )


@dataclass
class MomentumState:
    """Velocity buffers for the optional momentum variant of the update."""

    velocity: list[HeadGradients]

    @classmethod
    def for_heads(cls, heads: list[RpnHeadParams]) -> "MomentumState":
        return cls(velocity=[HeadGradients.zeros_like(p) for p in heads])


def sgd_step_momentum(
    params: RpnHeadParams,
    grads: HeadGradients,
    velocity: HeadGradients,
    epsilon: float,
    momentum: float,
) -> RpnHeadParams:
    """Heavy-ball update; mutates ``velocity`` in place."""
    for key, v in velocity.tensors().items():
        v *= momentum
        v += grads.tensors()[key]
    return sgd_step(params, velocity, epsilon)


def _write_tensor(out, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    out.write(struct.pack("<I", arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(arr.tobytes())


def _read_tensor(buf, offset: int) -> tuple[np.ndarray, int]:
    (ndim,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    shape = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
    offset += 8 * count
    return arr, offset


def save_checkpoint(path, heads: list[RpnHeadParams]) -> None:
    """Write head parameters as versioned little-endian float64 binary.

    Layout: magic, version (u32), head count (u32); then per head six
    tensors (hidden weight/bias, objectness weight/bias, regression
    weight/bias), each as ndim (u32), dims (u32 each), raw float64 data.
    Round-trips bit-exactly.
    """
    with open(path, "wb") as out:
        out.write(CHECKPOINT_MAGIC)
        out.write(struct.pack("<II", CHECKPOINT_VERSION, len(heads)))
        for params in heads:
            for arr in params.tensors().values():
                _write_tensor(out, arr)


def load_checkpoint(path) -> list[RpnHeadParams]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a head checkpoint (bad magic)")
    version, num_heads = struct.unpack_from("<II", buf, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = len(CHECKPOINT_MAGIC) + 8
    heads = []
    for _ in range(num_heads):
        tensors = []
        for _ in range(6):
            arr, offset = _read_tensor(buf, offset)
            tensors.append(arr)
        hw, hb, ow, ob, rw, rb = tensors
        heads.append(
            RpnHeadParams(
                hidden=ConvWeights(hw, hb),
                obj_weight=ow,
                obj_bias=ob,
                reg_weight=rw,
                reg_bias=rb,
            )
        )
    return heads
