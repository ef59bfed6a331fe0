"""Reference retrieval: summed cosine similarity, Top-K, entropy filter.

A query is matched against the memory bank on the raw stored feature
vectors (the retrieval embeddings), never on encoder outputs. The K most
similar candidates are then filtered to those the current model is
confident about (entropy strictly below the threshold); survivors act as
source-domain proxies for alignment and pseudo-labeling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bank import MemoryBank
from .data import VideoRecord
from .model import ModelConfig, forward_batch

RANK_SIMILARITY = "similarity"
RANK_ENTROPY = "entropy"


@dataclass(frozen=True)
class ReferenceHit:
    record: VideoRecord
    sim_total: float
    entropy: float
    bank_pos: int  # scan-order index; smaller = inserted earlier


@dataclass(frozen=True)
class ReferenceSet:
    """Stable references for one query, sorted by total similarity (desc)."""

    query_id: str
    refs: tuple[ReferenceHit, ...]

    def __len__(self) -> int:
        return len(self.refs)

    def sims(self) -> np.ndarray:
        return np.array([r.sim_total for r in self.refs])

    def entropies(self) -> np.ndarray:
        return np.array([r.entropy for r in self.refs])


def modality_sim(x: np.ndarray, y: np.ndarray) -> float:
    """Cosine similarity of two nonzero vectors."""
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.dot(x, y) / (nx * ny))


def total_sim(q: VideoRecord, c: VideoRecord) -> float:
    """Sum of per-modality cosine similarities, in [-3, 3]."""
    return (modality_sim(q.v, c.v) + modality_sim(q.t, c.t)
            + modality_sim(q.a, c.a))


def bank_similarities(query: VideoRecord, entries: tuple[VideoRecord, ...]) -> np.ndarray:
    """total_sim against every bank entry, vectorized over the bank."""
    sims = np.zeros(len(entries))
    for name in ("v", "t", "a"):
        qv = query.modality(name)
        mat = np.stack([e.modality(name) for e in entries])
        norms = np.linalg.norm(mat, axis=1) * np.linalg.norm(qv)
        sims += (mat @ qv) / norms
    return sims


def select_references(query: VideoRecord, entries: tuple[VideoRecord, ...],
                      sims: np.ndarray, entropies: np.ndarray, top_k: int,
                      entropy_threshold: float, *, rank_by: str = RANK_SIMILARITY,
                      apply_entropy_filter: bool = True) -> ReferenceSet:
    """Core selection given precomputed similarities and current entropies.

    Ranking ties break toward the older bank entry, then lexicographic id,
    so results are deterministic. ``rank_by``/``apply_entropy_filter``
    support the retrieval ablations; defaults implement the full mechanism.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    candidates = [i for i, e in enumerate(entries) if e.id != query.id]
    if rank_by == RANK_SIMILARITY:
        key = lambda i: (-sims[i], i, entries[i].id)
    elif rank_by == RANK_ENTROPY:
        key = lambda i: (entropies[i], i, entries[i].id)
    else:
        raise ValueError(f"unknown ranking {rank_by!r}")
    shortlist = sorted(candidates, key=key)[:top_k]
    if apply_entropy_filter:
        shortlist = [i for i in shortlist if entropies[i] < entropy_threshold]
    shortlist.sort(key=lambda i: (-sims[i], i, entries[i].id))
    hits = tuple(ReferenceHit(entries[i], float(sims[i]), float(entropies[i]), i)
                 for i in shortlist)
    return ReferenceSet(query_id=query.id, refs=hits)


def retrieve(bank: MemoryBank, query: VideoRecord, top_k: int,
             entropy_threshold: float, params: dict[str, np.ndarray],
             config: ModelConfig) -> ReferenceSet:
    """Top-K similar bank entries with current-model entropy below threshold.

    May legitimately return an empty set: the bank can be empty, hold only
    the query itself, or every shortlisted candidate can be too uncertain.
    """
    entries = bank.scan()
    if not entries:
        return ReferenceSet(query_id=query.id, refs=())
    xv = np.stack([e.v for e in entries])
    xt = np.stack([e.t for e in entries])
    xa = np.stack([e.a for e in entries])
    entropies = forward_batch(params, config, xv, xt, xa).entropies()
    sims = bank_similarities(query, entries)
    return select_references(query, entries, sims, entropies, top_k,
                             entropy_threshold)
