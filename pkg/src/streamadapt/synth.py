"""Synthetic two-domain feature streams for desk-scale experiments.

Generative model, per modality: a record drawn for event ``e`` with class
``c`` is ``domain_mean + event_offset[e] + class_offset[c] + noise``. Both
domains share the event and class structure; the target domain's mean is
displaced by a vector of length ``shift``, which is what a topic-level
distribution shift looks like at feature level. Per-event fake fractions
come from a skewed distribution so most events are heavily imbalanced,
mirroring how real news events skew almost entirely real or fake.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, VideoRecord

MODALITIES = ("v", "t", "a")


@dataclass(frozen=True)
class SynthSpec:
    """Knobs for the two-domain generator.

    ``imbalance`` is the probability that an event is single-class; the
    remaining events draw their fake fraction from Beta(2, 2). ``shift``
    is the L2 norm of the target domain's displacement per modality.
    """

    events: int = 40
    per_event: int = 12
    dims: int = 16
    shift: float = 2.0
    imbalance: float = 0.85
    class_sep: float = 1.0
    event_scale: float = 2.0
    noise_scale: float = 1.0

    def validate(self) -> None:
        if self.events < 1 or self.per_event < 1 or self.dims < 1:
            raise ValueError("events, per_event and dims must be positive")
        if not 0.0 <= self.imbalance <= 1.0:
            raise ValueError("imbalance must lie in [0, 1]")
        if self.shift < 0 or self.class_sep < 0 or self.event_scale < 0 or self.noise_scale < 0:
            raise ValueError("scales must be nonnegative")


def _fake_fractions(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    single = rng.random(spec.events) < spec.imbalance
    coin = rng.integers(0, 2, spec.events).astype(np.float64)
    mild = rng.beta(2.0, 2.0, spec.events)
    return np.where(single, coin, mild)


def _event_labels(fraction: float, n: int) -> np.ndarray:
    n_fake = int(round(fraction * n))
    return np.array([1] * n_fake + [0] * (n - n_fake), dtype=np.int64)


def generate_synthetic(spec: SynthSpec, seed: int) -> tuple[Dataset, Dataset]:
    """Build a (source, target) pair of datasets; bit-reproducible per seed.

    The shared structure (class offsets, event offsets, per-event fake
    fractions, shift direction) comes from one stream, so two domains
    generated with ``shift=0`` have coinciding event means and differ only
    in their record noise.
    """
    spec.validate()
    ss = np.random.SeedSequence(seed)
    structure_rng, source_rng, target_rng = (
        np.random.default_rng(child) for child in ss.spawn(3))

    d, e = spec.dims, spec.events
    class_offsets = {m: structure_rng.normal(0.0, spec.class_sep, size=(2, d))
                     for m in MODALITIES}
    event_offsets = {m: structure_rng.normal(0.0, spec.event_scale, size=(e, d))
                     for m in MODALITIES}
    shift_dirs = {}
    for m in MODALITIES:
        raw = structure_rng.normal(size=d)
        shift_dirs[m] = raw / np.linalg.norm(raw)
    fractions = _fake_fractions(spec, structure_rng)

    datasets = []
    for role, rng, displacement in (
            ("source", source_rng, 0.0),
            ("target", target_rng, spec.shift)):
        prefix = role[0] * 3  # "sss" / "ttt" keeps ids distinct across domains
        records: list[VideoRecord] = []
        eval_labels: dict[str, int] = {}
        arrival = 0
        for ev in range(e):
            labels = _event_labels(fractions[ev], spec.per_event)
            noise = {m: rng.normal(0.0, spec.noise_scale, size=(spec.per_event, d))
                     for m in MODALITIES}
            for j in range(spec.per_event):
                c = int(labels[j])
                feats = {}
                for m in MODALITIES:
                    mean = (event_offsets[m][ev] + class_offsets[m][c]
                            + displacement * shift_dirs[m])
                    feats[m] = mean + noise[m][j]
                rec_id = f"{prefix}-e{ev:03d}-{j:03d}"
                records.append(VideoRecord(
                    id=rec_id, event_id=f"e{ev:03d}", arrival_index=arrival,
                    v=feats["v"], t=feats["t"], a=feats["a"],
                    label=c if role == "source" else None))
                if role == "target":
                    eval_labels[rec_id] = c
                arrival += 1
        datasets.append(Dataset(tuple(records), role, (d, d, d),
                                eval_labels if role == "target" else {}))
    return datasets[0], datasets[1]


def corrupt_features(dataset: Dataset, noise_scale: float, seed: int) -> Dataset:
    """Additive-Gaussian corruption of a dataset's stored features.

    Desk-scale stand-in for pixel/text corruptions when comparing shift
    severities with MMD: corruption perturbs records in place while a
    domain shift moves the whole cloud.
    """
    rng = np.random.default_rng(seed)
    records = []
    for rec in dataset.records:
        records.append(VideoRecord(
            id=rec.id, event_id=rec.event_id, arrival_index=rec.arrival_index,
            v=rec.v + rng.normal(0.0, noise_scale, rec.v.shape),
            t=rec.t + rng.normal(0.0, noise_scale, rec.t.shape),
            a=rec.a + rng.normal(0.0, noise_scale, rec.a.shape),
            label=rec.label))
    return Dataset(tuple(records), dataset.role, dataset.modality_dims,
                   dict(dataset.eval_labels))
