"""Self-check harnesses: conv/FC agreement and analytic-gradient validation.

These back the ``verify`` command and double as test oracles. Both are
deterministic given the generator passed in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .head import (
    LossConfig,
    RpnHeadParams,
    backward,
    forward_conv,
    forward_fc,
    forward_fc_batch,
    loss,
)
from .tensor import roi_align

EQUIVALENCE_TOLERANCE = 1e-9
GRADIENT_TOLERANCE = 1e-4


@dataclass
class EquivalenceReport:
    instances: int
    cells_checked: int
    max_abs_diff: float

    @property
    def passed(self) -> bool:
        return self.max_abs_diff <= EQUIVALENCE_TOLERANCE


@dataclass
class GradientReport:
    params_checked: int
    max_rel_error: float
    per_tensor: dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= GRADIENT_TOLERANCE


def conv_fc_equivalence(
    rng: np.random.Generator,
    instances: int = 100,
    corrupt_layout: bool = False,
) -> EquivalenceReport:
    """Compare the conv sweep against RoI-Align + FC on on-grid anchors.

    Each instance draws a random head and feature map (channels <= 8, dims
    <= 32, dilation 1..4) and checks all four corner cells plus random
    interior cells: the 3x3 RoI patch over the cell's on-grid anchor, pushed
    through the FC form, must reproduce the conv output at that cell.

    ``corrupt_layout`` is a negative-control hook: it feeds the FC form a
    patch flattened in the wrong order, which a sound harness must flag.
    """
    max_diff = 0.0
    cells_checked = 0
    for _ in range(instances):
        c_in = int(rng.integers(1, 9))
        h = int(rng.integers(3, 33))
        w = int(rng.integers(3, 33))
        dilation = int(rng.integers(1, 5))
        c_mid = int(rng.integers(4, 17))
        params = RpnHeadParams.initialize(c_in, c_mid, rng, weight_std=0.5)
        features = rng.normal(size=(c_in, h, w))
        logits, deltas = forward_conv(features, params, dilation)
        cells = [(0, 0), (0, w - 1), (h - 1, 0), (h - 1, w - 1)]
        for _ in range(8):
            cells.append((int(rng.integers(0, h)), int(rng.integers(0, w))))
        half = 1.5 * dilation
        for r, c in cells:
            cx, cy = c + 0.5, r + 0.5
            patch = roi_align(
                features, np.array([cx - half, cy - half, cx + half, cy + half]), 3, 3
            )
            if corrupt_layout:
                patch = patch.transpose(1, 2, 0)
            out = forward_fc(patch, params)
            diff = abs(out.logit - logits[r, c])
            diff = max(diff, float(np.max(np.abs(out.delta.to_array() - deltas[:, r, c]))))
            max_diff = max(max_diff, diff)
            cells_checked += 1
    return EquivalenceReport(instances=instances, cells_checked=cells_checked, max_abs_diff=max_diff)


def gradient_check(
    rng: np.random.Generator,
    params_per_tensor: int = 20,
    step: float = 1e-5,
    batch_size: int = 24,
) -> GradientReport:
    """Central finite differences against the analytic backward pass.

    Perturbs randomly chosen entries of every parameter tensor and compares
    the loss slope against the recorded gradient. Weights are drawn wide
    (std 0.5) so hidden pre-activations stay clear of the ReLU kink at the
    finite-difference step size.
    """
    c_in, c_mid = 6, 16
    params = RpnHeadParams.initialize(c_in, c_mid, rng, weight_std=0.5)
    patches = rng.normal(size=(batch_size, c_in * 9))
    positive = rng.random(batch_size) < 0.5
    positive[0] = True
    targets = rng.normal(scale=0.8, size=(int(positive.sum()), 4))
    cfg = LossConfig()

    def total_loss(p: RpnHeadParams) -> float:
        fwd = forward_fc_batch(patches, p)
        return loss(fwd.logits, fwd.deltas, positive, targets, cfg).total

    fwd = forward_fc_batch(patches, params)
    grads = backward(fwd, positive, targets, cfg, params)

    max_rel = 0.0
    per_tensor: dict[str, float] = {}
    checked = 0
    for name, tensor in params.tensors().items():
        grad = grads.tensors()[name]
        flat = tensor.reshape(-1)
        take = min(params_per_tensor, flat.size)
        picks = rng.choice(flat.size, size=take, replace=False)
        worst = 0.0
        for idx in picks:
            original = flat[idx]
            flat[idx] = original + step
            up = total_loss(params)
            flat[idx] = original - step
            down = total_loss(params)
            flat[idx] = original
            fd = (up - down) / (2.0 * step)
            analytic = grad.reshape(-1)[idx]
            rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-8)
            worst = max(worst, rel)
            checked += 1
        per_tensor[name] = worst
        max_rel = max(max_rel, worst)
    return GradientReport(params_checked=checked, max_rel_error=max_rel, per_tensor=per_tensor)
