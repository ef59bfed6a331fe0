"""Reference-augmented pseudo-labels and the self-training loss.

A query's class scores blend its own predicted probabilities with a
similarity-softmax-weighted vote of its references' probabilities. The
argmax of the blend is the pseudo-label (ties resolve to class 0, "real"),
used as a hard one-hot target for a cross-entropy self-training term; the
pseudo-label itself is a constant for gradient purposes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, forward_batch
from .retrieval import ReferenceSet

CLAMP_EPS = 1e-12


@dataclass(frozen=True)
class PseudoLabel:
    query_id: str
    combined_scores: np.ndarray
    label: int
    used_references: int
    query_weight: float
    reference_weight: float


def similarity_weights(sims: np.ndarray) -> np.ndarray:
    """softmax over total similarities (temperature 1)."""
    z = np.asarray(sims, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def combine_scores(query_probs: np.ndarray, ref_probs: np.ndarray | None,
                   sims: np.ndarray | None, query_weight: float,
                   reference_weight: float) -> np.ndarray:
    if ref_probs is None or len(ref_probs) == 0:
        return query_weight * query_probs
    w = similarity_weights(sims)
    return query_weight * query_probs + reference_weight * (w @ ref_probs)


def pseudo_label_from_probs(query_id: str, query_probs: np.ndarray,
                            ref_probs: np.ndarray | None, sims: np.ndarray | None,
                            query_weight: float, reference_weight: float) -> PseudoLabel:
    scores = combine_scores(query_probs, ref_probs, sims, query_weight,
                            reference_weight)
    n_refs = 0 if ref_probs is None else len(ref_probs)
    # np.argmax returns the first maximum, which is the tie-break to class 0
    return PseudoLabel(query_id=query_id, combined_scores=scores,
                       label=int(np.argmax(scores)), used_references=n_refs,
                       query_weight=query_weight, reference_weight=reference_weight)


def make_pseudo_label(query_probs: np.ndarray, refs: ReferenceSet,
                      params: dict[str, np.ndarray], config: ModelConfig,
                      query_weight: float = 0.5, reference_weight: float = 0.5
                      ) -> PseudoLabel:
    """Pseudo-label for one query given its reference set.

    Reference probabilities come from the current parameters, the same
    snapshot that produced the retrieval entropies.
    """
    if query_weight < 0 or reference_weight < 0:
        raise ValueError("weights must be nonnegative")
    if len(refs) == 0:
        return pseudo_label_from_probs(refs.query_id, query_probs, None, None,
                                       query_weight, reference_weight)
    records = [hit.record for hit in refs.refs]
    trace = forward_batch(params, config,
                          np.stack([r.v for r in records]),
                          np.stack([r.t for r in records]),
                          np.stack([r.a for r in records]))
    return pseudo_label_from_probs(refs.query_id, query_probs, trace.probs,
                                   refs.sims(), query_weight, reference_weight)


def self_training_loss(query_probs: np.ndarray, label: int) -> float:
    """-ln p[label]; the probability is clamped at 1e-12 if degenerate."""
    p = float(query_probs[label])
    return -float(np.log(max(p, CLAMP_EPS)))
