"""Soft Dice loss, hard Dice metric, and finite-difference gradient checks."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidTargetError, NumericError, ShapeError

DICE_SMOOTH = 1e-5


def _soft_dice_parts(logits, target, eps, include_background=False):
    if logits.shape != target.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} differ")
    if logits.ndim < 3 or logits.shape[1] < 2:
        raise ShapeError("expected (N, K + 1, *spatial) with at least one foreground class")
    if not bool(((target == 0) | (target == 1)).all()) or not bool((target.sum(1) == 1).all()):
        raise InvalidTargetError("target is not a one-hot map over the channel axis")
    probs = torch.softmax(logits, dim=1)
    reduce = (0,) + tuple(range(2, logits.ndim))
    first = 0 if include_background else 1
    inter = (probs * target).sum(reduce)[first:]
    size = probs.sum(reduce)[first:] + target.sum(reduce)[first:]
    dice = (2.0 * inter + eps) / (size + eps)
    return probs, inter, size, dice


def soft_dice_loss(logits, target_onehot, eps: float = DICE_SMOOTH, include_background: bool = False):
    """Batch soft Dice loss and its gradient.

    ``logits`` and ``target_onehot`` are ``(N, K + 1, *spatial)``. Class
    statistics are summed over the batch and all voxels before the ratio. By
    default the loss averages the K foreground classes; ``include_background``
    averages all K + 1 channels instead.

    Returns ``(loss, grad)`` where ``grad`` is d(loss)/d(logits).
    """
    logits = torch.as_tensor(logits).detach()
    target = torch.as_tensor(target_onehot, dtype=logits.dtype)
    probs, inter, size, dice = _soft_dice_parts(logits, target, eps, include_background)
    k = dice.numel()
    first = 0 if include_background else 1
    loss = 1.0 - dice.mean()

    # d(loss)/d(probs) per foreground class, then back through the softmax
    bshape = (1, k) + (1,) * (logits.ndim - 2)
    num = (2.0 * inter + eps).reshape(bshape)
    den = (size + eps).reshape(bshape)
    dprobs = torch.zeros_like(probs)
    dprobs[:, first:] = -(2.0 * target[:, first:] * den - num) / (den * den) / k
    grad = probs * (dprobs - (probs * dprobs).sum(1, keepdim=True))
    return loss, grad


class _SoftDice(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logits, target, eps, include_background):
        loss, grad = soft_dice_loss(logits, target, eps, include_background)
        ctx.save_for_backward(grad)
        return loss

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad_out * grad, None, None, None


def dice_loss(logits, target_onehot, eps: float = DICE_SMOOTH,
              include_background: bool = False) -> torch.Tensor:
    """Autograd-aware soft Dice loss backed by the hand-derived gradient."""
    return _SoftDice.apply(logits, torch.as_tensor(target_onehot, dtype=logits.dtype), eps,
                           include_background)


# ---------------------------------------------------------------------------
# evaluation metric
# ---------------------------------------------------------------------------


@dataclass
class DiceReport:
    per_class_dice: list[float]
    mean_foreground_dice: float

    @classmethod
    def from_per_class(cls, values) -> "DiceReport":
        values = [float(v) for v in values]
        return cls(values, float(np.mean(values)))

    def to_table(self) -> str:
        lines = ["class  dice(%)"]
        for c, d in enumerate(self.per_class_dice, start=1):
            lines.append(f"{c:>5}  {100 * d:7.2f}")
        lines.append(f" mean  {100 * self.mean_foreground_dice:7.2f}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({"per_class_dice": self.per_class_dice,
                           "mean_foreground_dice": self.mean_foreground_dice})


def hard_dice_score(pred, gt, num_classes: int | None = None) -> DiceReport:
    """Per-class Dice of two label maps (1 if both empty, 0 if only one is)."""
    from .volume import LabelMap

    if isinstance(pred, LabelMap) and isinstance(gt, LabelMap):
        if pred.num_classes != gt.num_classes:
            raise ShapeError(f"class counts differ: {pred.num_classes} vs {gt.num_classes}")
        num_classes = num_classes or gt.num_classes
    p = np.asarray(getattr(pred, "data", pred))
    g = np.asarray(getattr(gt, "data", gt))
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    if num_classes is None:
        num_classes = max(int(p.max()), int(g.max()), 1)
    values = []
    for c in range(1, num_classes + 1):
        pc = p == c
        gc = g == c
        total = int(pc.sum()) + int(gc.sum())
        values.append(1.0 if total == 0 else 2.0 * int((pc & gc).sum()) / total)
    return DiceReport.from_per_class(values)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_difference_gradcheck(fn, point, step: float = 1e-5, grad=None, coords=None) -> float:
    """Max relative error between an analytic gradient and central differences.

    ``fn`` maps a tensor to a scalar. The analytic gradient is ``grad`` if
    given, otherwise obtained from autograd. ``coords`` optionally restricts
    the check to a subset of flat indices.
    """
    x = torch.as_tensor(point, dtype=torch.float64).detach().clone()
    if grad is None:
        xg = x.clone().requires_grad_(True)
        value = fn(xg)
        (analytic,) = torch.autograd.grad(value, xg)
    else:
        analytic = torch.as_tensor(grad, dtype=torch.float64)
    analytic = analytic.detach().reshape(-1)
    flat = x.reshape(-1)
    idx = range(flat.numel()) if coords is None else coords
    worst = 0.0
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + step
            up = float(fn(x))
            flat[i] = orig - step
            down = float(fn(x))
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite function value near coordinate {i}")
            central = (up - down) / (2.0 * step)
            a = float(analytic[i])
            err = abs(a - central) / max(abs(a), abs(central), 1e-12)
            worst = max(worst, err)
    return worst
