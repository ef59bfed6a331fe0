"""Stable anchors and the cosine alignment loss.

Each query with references gets one anchor per modality: a softmax(-entropy)
weighted combination of the references' current encoder outputs, so the most
confident references dominate. The loss pulls the query's encoder outputs
toward its anchors in cosine distance. Anchors are treated as constants in
the backward pass; only the query's path receives gradient, which keeps the
stable references from being dragged toward uncertain queries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, forward_batch
from .retrieval import ReferenceSet


@dataclass(frozen=True)
class AnchorSet:
    """Per-modality anchor vectors (3, D) plus the reference weights."""

    anchors: np.ndarray
    weights: np.ndarray
    ref_ids: tuple[str, ...]


def anchor_weights(entropies: np.ndarray) -> np.ndarray:
    """softmax(-entropy): strictly decreasing in reference entropy."""
    z = -np.asarray(entropies, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def anchors_from_outputs(ref_outputs: np.ndarray, entropies: np.ndarray,
                         ref_ids: tuple[str, ...] = (),
                         weighting: str = "entropy") -> AnchorSet:
    """Build anchors from precomputed reference encoder outputs (L, 3, D)."""
    if ref_outputs.shape[0] == 0:
        raise ValueError("cannot build anchors from an empty reference set")
    if weighting == "entropy":
        w = anchor_weights(entropies)
    elif weighting == "uniform":
        w = np.full(ref_outputs.shape[0], 1.0 / ref_outputs.shape[0])
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    anchors = np.einsum("l,lmd->md", w, ref_outputs)
    return AnchorSet(anchors=anchors, weights=w, ref_ids=ref_ids)


def build_anchors(refs: ReferenceSet, params: dict[str, np.ndarray],
                  config: ModelConfig) -> AnchorSet:
    """Entropy-weighted anchors for a nonempty reference set."""
    if len(refs) == 0:
        raise ValueError("cannot build anchors from an empty reference set")
    records = [hit.record for hit in refs.refs]
    trace = forward_batch(params, config,
                          np.stack([r.v for r in records]),
                          np.stack([r.t for r in records]),
                          np.stack([r.a for r in records]))
    return anchors_from_outputs(trace.encoder_outputs, refs.entropies(),
                                tuple(r.id for r in records))


def alignment_loss(encoder_outputs: np.ndarray, anchors: AnchorSet) -> float:
    """Sum over modalities of (1 - cosine(query output, anchor)); in [0, 6]."""
    return alignment_loss_and_grad(encoder_outputs, anchors)[0]


def alignment_loss_and_grad(encoder_outputs: np.ndarray, anchors: AnchorSet
                            ) -> tuple[float, np.ndarray]:
    """Loss plus its gradient w.r.t. the query's encoder outputs (3, D)."""
    f = encoder_outputs
    a = anchors.anchors
    fn = np.linalg.norm(f, axis=-1)
    an = np.linalg.norm(a, axis=-1)
    if np.any(fn == 0.0) or np.any(an == 0.0):
        raise ValueError("zero-norm encoder output or anchor")
    cos = (f * a).sum(axis=-1) / (fn * an)
    loss = float((1.0 - cos).sum())
    # d(1-cos)/df = -(a/(|f||a|) - cos * f/|f|^2)
    grad = -(a / (fn * an)[:, None] - (cos / fn**2)[:, None] * f)
    return loss, grad


def mse_alignment_loss_and_grad(encoder_outputs: np.ndarray,
                                reference_mean: np.ndarray) -> tuple[float, np.ndarray]:
    """Ablation variant: squared distance to the unweighted reference mean."""
    diff = encoder_outputs - reference_mean
    return float((diff * diff).sum()), 2.0 * diff
