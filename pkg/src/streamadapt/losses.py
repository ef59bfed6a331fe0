"""Batch loss assembly and exact gradients over the adaptable tensors.

The adaptation objective is
``align_weight * mean(alignment over covered queries) + mean(self-training)
+ mean(prediction entropy)``; pretraining swaps in a supervised
cross-entropy term instead. Every term contributes an exact gradient:
cross-entropy and entropy attach at the logits, alignment attaches directly
at the encoder outputs, and one reverse pass through the network does the
rest. Anchors, pseudo-labels and reference probabilities are constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .alignment import AnchorSet, alignment_loss_and_grad, mse_alignment_loss_and_grad
from .model import ForwardTrace, ModelConfig, backward_batch, row_entropy
from .pseudo import CLAMP_EPS


@dataclass
class LossSpec:
    """Active loss terms and their targets for one batch.

    ``anchors`` holds one AnchorSet (or None) per batch sample; samples
    without references contribute no alignment term and the alignment mean
    runs over covered samples only. ``pseudo_labels`` / ``labels`` are
    per-sample class indices for the self-training / supervised terms.
    """

    align_weight: float = 0.0
    anchors: list[AnchorSet | None] | None = None
    mse_align: bool = False
    pseudo_labels: np.ndarray | None = None
    entropy: bool = False
    labels: np.ndarray | None = None


@dataclass
class LossBreakdown:
    align: float = 0.0
    self_train: float = 0.0
    entropy: float = 0.0
    supervised: float = 0.0
    total: float = 0.0
    covered: int = 0
    clamped: int = field(default=0, repr=False)


def total_loss(align_mean: float, self_train_mean: float, entropy_mean: float,
               align_weight: float) -> float:
    """Weighted adaptation objective from per-batch term means."""
    for name, val in (("align", align_mean), ("self_train", self_train_mean),
                      ("entropy", entropy_mean)):
        if not np.isfinite(val):
            raise FloatingPointError(f"non-finite {name} loss component: {val}")
    return align_weight * align_mean + self_train_mean + entropy_mean


def _ce_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    grad = probs.copy()
    grad[np.arange(len(labels)), labels] -= 1.0
    return grad


def _ce_values(probs: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, int]:
    picked = probs[np.arange(len(labels)), labels]
    clamped = int(np.sum(picked < CLAMP_EPS))
    return -np.log(np.maximum(picked, CLAMP_EPS)), clamped


def batch_loss_terms(trace: ForwardTrace, spec: LossSpec
                     ) -> tuple[LossBreakdown, np.ndarray, np.ndarray | None]:
    """Loss values plus dL/dlogits and dL/d(encoder outputs)."""
    n = trace.batch_size
    probs = trace.probs
    dlogits = np.zeros_like(trace.logits)
    dtokens: np.ndarray | None = None
    out = LossBreakdown()

    if spec.entropy:
        ent = row_entropy(probs)
        out.entropy = float(ent.mean())
        logp = np.log(np.clip(probs, CLAMP_EPS, None))
        dlogits += -(probs * (logp + ent[:, None])) / n

    if spec.pseudo_labels is not None:
        values, clamped = _ce_values(probs, spec.pseudo_labels)
        out.self_train = float(values.mean())
        out.clamped += clamped
        dlogits += _ce_grad(probs, spec.pseudo_labels) / n

    if spec.labels is not None:
        values, clamped = _ce_values(probs, spec.labels)
        out.supervised = float(values.mean())
        out.clamped += clamped
        dlogits += _ce_grad(probs, spec.labels) / n

    if spec.anchors is not None:
        covered = [i for i, a in enumerate(spec.anchors) if a is not None]
        out.covered = len(covered)
        if covered:
            dtokens = np.zeros_like(trace.encoder_outputs)
            loss_fn = mse_alignment_loss_and_grad if spec.mse_align \
                else alignment_loss_and_grad
            total = 0.0
            for i in covered:
                target = spec.anchors[i].anchors if spec.mse_align \
                    else spec.anchors[i]
                val, grad = loss_fn(trace.encoder_outputs[i], target)
                total += val
                dtokens[i] = grad
            out.align = total / len(covered)
            dtokens *= spec.align_weight / len(covered)

    out.total = (spec.align_weight * out.align + out.self_train + out.entropy
                 + out.supervised)
    if not np.isfinite(out.total):
        raise FloatingPointError(f"non-finite batch loss: {out}")
    return out, dlogits, dtokens


def loss_gradients(params: dict[str, np.ndarray], config: ModelConfig,
                   mask: dict[str, bool], trace: ForwardTrace, spec: LossSpec
                   ) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Exact gradients of the mean batch loss for every masked-true tensor.

    Gradients still flow *through* frozen tensors; they are just not
    emitted for them.
    """
    breakdown, dlogits, dtokens = batch_loss_terms(trace, spec)
    grads = backward_batch(params, config, trace, dlogits, dtokens)
    return breakdown, {name: g for name, g in grads.items() if mask.get(name)}
