"""Training objectives: supervised Dice+CE, pseudo-label generation, the
confidence-gated unified unsupervised loss, and the symmetric cross loss.

All functions accept torch tensors shaped (K,D,H,W) or (N,K,D,H,W) (labels
without the class axis) and return 0-dim torch tensors so they can sit on
the autograd path; numpy arrays and the core volume types are converted.
Supervised terms are summed over the labeled sub-batch, the unsupervised
loss is a mean over all voxels so patch/batch size does not rescale it.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .volumes import LabelVolume, LogitVolume, ProbVolume

DICE_EPS = 1e-5
LOG_CLAMP = 1e-7

UNSUP_MODES = ("usl", "nll_only", "mse_only")
SUP_MODES = ("ce", "dice", "ce+dice")


@dataclass(frozen=True)
class USLConfig:
    """Confidence gate thresholds. t2 < t1; values outside (0,1) are allowed
    so the degenerate single-branch variants remain expressible."""

    t1: float = 0.9
    t2: float = 0.1

    def __post_init__(self):
        if not self.t2 < self.t1:
            raise ValueError(f"need t2 < t1, got t1={self.t1}, t2={self.t2}")


@dataclass(frozen=True)
class PseudoLabel:
    """Soft (probability) or hard (argmax) training target."""

    mode: str
    soft: ProbVolume | None = None
    hard: LabelVolume | None = None

    def __post_init__(self):
        if self.mode not in ("soft", "hard"):
            raise ValueError(f"unknown pseudo-label mode {self.mode!r}")
        if self.mode == "soft" and (self.soft is None or self.hard is not None):
            raise ValueError("soft mode requires exactly the soft payload")
        if self.mode == "hard" and (self.hard is None or self.soft is not None):
            raise ValueError("hard mode requires exactly the hard payload")


def _to_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x
    if isinstance(x, LogitVolume):
        x = x.values
    elif isinstance(x, ProbVolume):
        x = x.values
    elif isinstance(x, LabelVolume):
        return torch.as_tensor(np.asarray(x.classes), dtype=torch.long)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _batched(t):
    """Add a leading batch axis to a single (K,D,H,W) volume."""
    return t.unsqueeze(0) if t.ndim == 4 else t


def _batched_labels(y):
    return y.unsqueeze(0) if y.ndim == 3 else y


def softmax_array(arr: np.ndarray) -> np.ndarray:
    """Max-stabilized softmax over axis 0 of a (K,...) array, in double."""
    arr = np.asarray(arr, dtype=np.float64)
    shifted = arr - arr.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def softmax_probs(logits):
    """Per-voxel softmax over the class axis (max-stabilized).

    Tensors map to tensors (autograd-safe); LogitVolume maps to ProbVolume.
    """
    if isinstance(logits, torch.Tensor):
        cdim = 0 if logits.ndim == 4 else 1
        return torch.softmax(logits, dim=cdim)
    arr = logits.values if isinstance(logits, LogitVolume) else logits
    return ProbVolume(softmax_array(arr))


def dice_loss(probs, target):
    """Soft Dice loss on probabilities, averaged over foreground classes and
    summed over the batch: 1 - (2*sum(p*y)+eps)/(sum(p)+sum(y)+eps)."""
    p = _batched(_to_tensor(probs))
    y = _batched_labels(_to_tensor(target))
    if p.shape[0] != y.shape[0] or p.shape[2:] != y.shape[1:]:
        raise ValueError(f"shape mismatch probs {tuple(p.shape)} vs target {tuple(y.shape)}")
    k = p.shape[1]
    total = p.new_zeros(())
    for n in range(p.shape[0]):
        per_class = []
        for c in range(1, k):
            pc = p[n, c]
            yc = (y[n] == c).to(p.dtype)
            inter = (pc * yc).sum()
            dice = (2.0 * inter + DICE_EPS) / (pc.sum() + yc.sum() + DICE_EPS)
            per_class.append(1.0 - dice)
        total = total + torch.stack(per_class).mean()
    return total


def ce_loss(logits, target):
    """Cross-entropy: per-sample mean over voxels, summed over the batch."""
    lg = _batched(_to_tensor(logits))
    y = _batched_labels(_to_tensor(target)).long()
    if lg.shape[0] != y.shape[0] or lg.shape[2:] != y.shape[1:]:
        raise ValueError(f"shape mismatch logits {tuple(lg.shape)} vs target {tuple(y.shape)}")
    per_voxel = F.cross_entropy(lg, y, reduction="none")
    return per_voxel.flatten(1).mean(dim=1).sum()


def supervised_loss(logits_a, logits_b, target, mode="ce+dice"):
    """Dice and/or CE applied to both models' labeled predictions."""
    if mode not in SUP_MODES:
        raise ValueError(f"unknown supervised mode {mode!r}")
    la, lb = _batched(_to_tensor(logits_a)), _batched(_to_tensor(logits_b))
    total = la.new_zeros(())
    if mode in ("dice", "ce+dice"):
        total = total + dice_loss(softmax_probs(la), target)
        total = total + dice_loss(softmax_probs(lb), target)
    if mode in ("ce", "ce+dice"):
        total = total + ce_loss(la, target) + ce_loss(lb, target)
    return total


def make_pseudo_label(logits, mode) -> PseudoLabel:
    """Soft pseudo-label = softmax; hard = per-voxel argmax with ties broken
    toward the lowest class index."""
    arr = np.asarray(
        logits.values if isinstance(logits, LogitVolume)
        else logits.detach().numpy() if isinstance(logits, torch.Tensor)
        else logits, dtype=np.float64)
    if mode == "soft":
        shifted = arr - arr.max(axis=0, keepdims=True)
        e = np.exp(shifted)
        return PseudoLabel(mode="soft", soft=ProbVolume(e / e.sum(axis=0, keepdims=True)))
    if mode == "hard":
        hard = np.argmax(arr, axis=0).astype(np.uint8)
        return PseudoLabel(mode="hard", hard=LabelVolume(hard, num_classes=arr.shape[0]))
    raise ValueError(f"unknown pseudo-label mode {mode!r}")


def _usl_maps(logits_a, probs_b, cfg, mode, multiclass_gates):
    la = _batched(_to_tensor(logits_a))
    pb = _batched(_to_tensor(probs_b, dtype=la.dtype))
    if la.shape != pb.shape:
        raise ValueError(f"shape mismatch logits {tuple(la.shape)} vs probs {tuple(pb.shape)}")
    k = la.shape[1]
    qa = softmax_probs(la)
    mse = ((qa - pb) ** 2).mean(dim=1)

    if mode == "mse_only":
        return mse
    if k != 2 and not multiclass_gates:
        raise ValueError("gated modes are defined for the binary task (K=2); "
                         "set multiclass_gates=True for the provisional K>2 variant")

    if k == 2:
        p = pb[:, 1]
        q = qa[:, 1]
        nll_fg = p * -torch.log(q.clamp(min=LOG_CLAMP))
        nll_bg = (1.0 - p) * -torch.log((1.0 - q).clamp(min=LOG_CLAMP))
        if mode == "nll_only":
            return torch.where(p > 0.5, nll_fg, nll_bg)
        gate1 = p > cfg.t1
        gate2 = p < cfg.t2
        return torch.where(gate1, nll_fg, torch.where(gate2, nll_bg, mse))

    # provisional K>2 gating: confident-max NLL branch, MSE elsewhere
    pmax, cls = pb.max(dim=1)
    q_at = qa.gather(1, cls.unsqueeze(1)).squeeze(1)
    nll = pmax * -torch.log(q_at.clamp(min=LOG_CLAMP))
    if mode == "nll_only":
        return nll
    return torch.where(pmax > cfg.t1, nll, mse)


def usl(logits_a, probs_b, cfg: USLConfig, mode="usl", multiclass_gates=False):
    """Confidence-gated unsupervised loss of model A's logits against model
    B's (detached) probabilities, averaged over all voxels.

    Binary gates on the partner's foreground probability p:
      p > t1        -> p * -log(q_fg)            (confident foreground)
      p < t2        -> (1-p) * -log(q_bg)        (confident background)
      t2 <= p <= t1 -> mean_c (q_c - p_c)^2      (uncertain: soft MSE)
    """
    if mode not in UNSUP_MODES:
        raise ValueError(f"unknown unsupervised mode {mode!r}")
    return _usl_maps(logits_a, probs_b, cfg, mode, multiclass_gates).mean()


def loss_mode_select(mode):
    """Table-style selector over the three unsupervised objectives."""
    if mode not in UNSUP_MODES:
        raise ValueError(f"unknown unsupervised mode {mode!r}")

    def fn(logits_a, probs_b, cfg, multiclass_gates=False):
        return usl(logits_a, probs_b, cfg, mode=mode, multiclass_gates=multiclass_gates)

    fn.__name__ = mode
    return fn


def unsupervised_loss(logits_a, logits_b, cfg: USLConfig, mode="usl",
                      multiclass_gates=False):
    """Symmetric cross supervision: each model learns from the other's
    detached softmax (pseudo-labels carry no gradient)."""
    la, lb = _batched(_to_tensor(logits_a)), _batched(_to_tensor(logits_b))
    pa = softmax_probs(la).detach()
    pb = softmax_probs(lb).detach()
    return (usl(la, pb, cfg, mode=mode, multiclass_gates=multiclass_gates)
            + usl(lb, pa, cfg, mode=mode, multiclass_gates=multiclass_gates))
