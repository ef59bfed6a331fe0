"""Feature-stream datasets: record types, on-disk format, and batch plans.

On-disk format is line-delimited JSON. The first line is a header object
with the single key ``"_meta"`` carrying ``role`` and ``modality_dims``;
every following line is one record with string ``id`` and ``event_id``,
integer ``arrival_index``, optional integer ``label`` (0=real, 1=fake),
and three numeric arrays ``v``, ``t``, ``a``. Floats are serialized via
``repr`` so a save/load round trip is exact.

Target-role datasets may carry labels for evaluation only: they are
stripped off the records at load time and quarantined behind
:meth:`Dataset.evaluation_labels` so the adaptation path cannot see them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

FORMAT_NAME = "feature-stream/v1"
ROLES = ("source", "target")


class DatasetFormatError(ValueError):
    """Malformed dataset file; carries the offending 1-based line number."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = f" (line {line}" + (f", field {field})" if field else ")") if line else ""
        super().__init__(f"{message}{where}")


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=np.float64)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class VideoRecord:
    """One video's precomputed per-modality feature vectors.

    The stored vectors double as retrieval embeddings and model inputs;
    they must be finite and not all-zero (cosine similarity is undefined
    on a zero vector).
    """

    id: str
    event_id: str
    arrival_index: int
    v: np.ndarray
    t: np.ndarray
    a: np.ndarray
    label: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "v", _freeze(self.v))
        object.__setattr__(self, "t", _freeze(self.t))
        object.__setattr__(self, "a", _freeze(self.a))

    def modality(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def dims(self) -> tuple[int, int, int]:
        return (self.v.shape[0], self.t.shape[0], self.a.shape[0])


def validate_record(rec: VideoRecord, dims: tuple[int, int, int], line: int | None = None) -> None:
    for name, want in zip(("v", "t", "a"), dims):
        vec = rec.modality(name)
        if vec.ndim != 1 or vec.shape[0] != want:
            raise DatasetFormatError(
                f"record {rec.id!r}: expected {want}-dim vector, got shape {vec.shape}",
                line=line, field=name)
        if not np.all(np.isfinite(vec)):
            raise DatasetFormatError(
                f"record {rec.id!r}: non-finite value", line=line, field=name)
        if not np.any(vec):
            raise DatasetFormatError(
                f"record {rec.id!r}: all-zero vector", line=line, field=name)
    if rec.label is not None and rec.label not in (0, 1):
        raise DatasetFormatError(
            f"record {rec.id!r}: label must be 0 or 1, got {rec.label!r}",
            line=line, field="label")
    if rec.arrival_index < 0:
        raise DatasetFormatError(
            f"record {rec.id!r}: negative arrival_index", line=line, field="arrival_index")


@dataclass(frozen=True)
class Dataset:
    """Immutable ordered collection of records with one role.

    ``eval_labels`` holds labels quarantined from a target-role stream;
    it is populated only through :func:`load_dataset` /
    :func:`streamadapt.synth.generate_synthetic` and exposed solely via
    :meth:`evaluation_labels`.
    """

    records: tuple[VideoRecord, ...]
    role: str
    modality_dims: tuple[int, int, int]
    eval_labels: Mapping[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.role not in ROLES:
            raise DatasetFormatError(f"unknown role {self.role!r}")
        seen: set[str] = set()
        prev = -1
        for rec in self.records:
            validate_record(rec, self.modality_dims)
            if rec.id in seen:
                raise DatasetFormatError(f"duplicate record id {rec.id!r}")
            seen.add(rec.id)
            if rec.arrival_index <= prev:
                raise DatasetFormatError(
                    f"record {rec.id!r}: arrival_index {rec.arrival_index} not strictly increasing")
            prev = rec.arrival_index
            if self.role == "source" and rec.label is None:
                raise DatasetFormatError(f"source record {rec.id!r} is missing a label")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self, rec_id: str) -> VideoRecord:
        idx = self._index().get(rec_id)
        if idx is None:
            raise KeyError(rec_id)
        return self.records[idx]

    def _index(self) -> dict[str, int]:
        # cached lazily on the (frozen) instance
        idx = self.__dict__.get("_id_index")
        if idx is None:
            idx = {r.id: i for i, r in enumerate(self.records)}
            self.__dict__["_id_index"] = idx
        return idx

    def feature_matrices(self, records: Iterable[VideoRecord] | None = None
                         ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stack features into (N, D_v), (N, D_t), (N, D_a) float64 matrices."""
        recs = self.records if records is None else tuple(records)
        if not recs:
            d = self.modality_dims
            return tuple(np.zeros((0, di)) for di in d)  # type: ignore[return-value]
        return (np.stack([r.v for r in recs]),
                np.stack([r.t for r in recs]),
                np.stack([r.a for r in recs]))

    def labels(self) -> np.ndarray:
        """Training labels; only a source dataset exposes them this way."""
        if self.role != "source":
            raise PermissionError(
                "target labels are evaluation-only; use evaluation_labels()")
        return np.array([r.label for r in self.records], dtype=np.int64)

    def evaluation_labels(self) -> dict[str, int] | None:
        """Ground-truth labels for scoring a target stream, or None.

        Never consumed by the adaptation loop itself; reports use it to
        compute accuracy-style metrics after the fact.
        """
        if self.role == "source":
            return {r.id: int(r.label) for r in self.records}
        return dict(self.eval_labels) if self.eval_labels else None


def _parse_meta(obj: dict, line: int) -> tuple[str, tuple[int, int, int]]:
    meta = obj.get("_meta")
    if not isinstance(meta, dict):
        raise DatasetFormatError("first line must be a '_meta' header object", line=line)
    role = meta.get("role")
    if role not in ROLES:
        raise DatasetFormatError(f"header role must be one of {ROLES}, got {role!r}",
                                 line=line, field="role")
    dims = meta.get("modality_dims")
    if (not isinstance(dims, list) or len(dims) != 3
            or not all(isinstance(d, int) and d > 0 for d in dims)):
        raise DatasetFormatError("header modality_dims must be three positive integers",
                                 line=line, field="modality_dims")
    return role, (dims[0], dims[1], dims[2])


def load_dataset(path: str | Path, role: str) -> Dataset:
    """Load and validate a feature-stream file.

    ``role`` is the caller's expectation and must match the file header.
    Labels in a target file are moved into the dataset's quarantined
    evaluation mapping. Missing ``arrival_index`` fields are assigned
    from line order.
    """
    if role not in ROLES:
        raise DatasetFormatError(f"unknown role {role!r}")
    path = Path(path)
    records: list[VideoRecord] = []
    eval_labels: dict[str, int] = {}
    file_role: str | None = None
    dims: tuple[int, int, int] | None = None
    with path.open("r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"invalid JSON: {exc.msg}", line=line_no) from exc
            if file_role is None:
                file_role, dims = _parse_meta(obj, line_no)
                if file_role != role:
                    raise DatasetFormatError(
                        f"file declares role {file_role!r}, expected {role!r}",
                        line=line_no, field="role")
                continue
            rec = _parse_record(obj, dims, line_no, default_arrival=len(records))
            validate_record(rec, dims, line=line_no)
            if role == "source" and rec.label is None:
                raise DatasetFormatError(
                    f"source record {rec.id!r} is missing a label",
                    line=line_no, field="label")
            if role == "target" and rec.label is not None:
                eval_labels[rec.id] = rec.label
                rec = VideoRecord(rec.id, rec.event_id, rec.arrival_index,
                                  rec.v, rec.t, rec.a, label=None)
            records.append(rec)
    if file_role is None:
        raise DatasetFormatError("empty file: missing '_meta' header", line=1)
    try:
        return Dataset(tuple(records), role, dims, eval_labels)
    except DatasetFormatError as exc:
        raise DatasetFormatError(f"{path.name}: {exc}") from exc


def _parse_record(obj: dict, dims: tuple[int, int, int], line: int,
                  default_arrival: int) -> VideoRecord:
    if not isinstance(obj, dict):
        raise DatasetFormatError("record line must be an object", line=line)
    for key in ("id", "event_id", "v", "t", "a"):
        if key not in obj:
            raise DatasetFormatError("missing field", line=line, field=key)
    rec_id = obj["id"]
    if not isinstance(rec_id, str) or not rec_id:
        raise DatasetFormatError("id must be a non-empty string", line=line, field="id")
    event_id = obj["event_id"]
    if not isinstance(event_id, str) or not event_id:
        raise DatasetFormatError("event_id must be a non-empty string",
                                 line=line, field="event_id")
    arrival = obj.get("arrival_index", default_arrival)
    if not isinstance(arrival, int) or isinstance(arrival, bool):
        raise DatasetFormatError("arrival_index must be an integer",
                                 line=line, field="arrival_index")
    label = obj.get("label")
    if label is not None and (not isinstance(label, int) or isinstance(label, bool)):
        raise DatasetFormatError("label must be an integer", line=line, field="label")
    vecs = {}
    for name in ("v", "t", "a"):
        arr = obj[name]
        if not isinstance(arr, list):
            raise DatasetFormatError("modality must be a numeric array",
                                     line=line, field=name)
        try:
            vecs[name] = np.asarray(arr, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise DatasetFormatError(f"modality not numeric: {exc}",
                                     line=line, field=name) from exc
    return VideoRecord(rec_id, event_id, arrival, vecs["v"], vecs["t"], vecs["a"], label)


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset in the line-record format; inverse of load_dataset."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        meta = {"_meta": {"format": FORMAT_NAME, "role": dataset.role,
                          "modality_dims": list(dataset.modality_dims)}}
        fh.write(json.dumps(meta) + "\n")
        for rec in dataset.records:
            label = rec.label
            if label is None and dataset.role == "target":
                label = dataset.eval_labels.get(rec.id)
            obj: dict = {"id": rec.id, "event_id": rec.event_id,
                         "arrival_index": rec.arrival_index}
            if label is not None:
                obj["label"] = int(label)
            obj["v"] = rec.v.tolist()
            obj["t"] = rec.t.tolist()
            obj["a"] = rec.a.tolist()
            fh.write(json.dumps(obj) + "\n")


@dataclass(frozen=True)
class BatchPlan:
    """Partition of a dataset's record ids into consecutive batches."""

    batches: tuple[tuple[str, ...], ...]
    mode: str
    batch_size: int

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for i, batch in enumerate(self.batches[:-1] if self.batches else ()):
            if len(batch) != self.batch_size:
                raise ValueError(f"batch {i} has {len(batch)} entries, want {self.batch_size}")

    def record_ids(self) -> tuple[str, ...]:
        return tuple(rid for batch in self.batches for rid in batch)


def _chunk(ids: list[str], batch_size: int) -> tuple[tuple[str, ...], ...]:
    return tuple(tuple(ids[i:i + batch_size]) for i in range(0, len(ids), batch_size))


def plan_random_batches(dataset: Dataset, batch_size: int, seed: int) -> BatchPlan:
    """Seeded uniform permutation of record ids, chunked into batches."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    ids = [dataset.records[i].id for i in rng.permutation(len(dataset.records))]
    return BatchPlan(_chunk(ids, batch_size), "random", batch_size)


def plan_eventwise_batches(dataset: Dataset, batch_size: int) -> BatchPlan:
    """Group the stream by event and chunk the regrouped order.

    Events are ordered by their first arrival; records within an event by
    arrival. Batches keep a constant size, so a batch may straddle an
    event boundary when event sizes do not divide evenly.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order: dict[str, list[VideoRecord]] = {}
    for rec in dataset.records:  # records are already arrival-sorted
        order.setdefault(rec.event_id, []).append(rec)
    ids = [rec.id for event in order.values() for rec in event]
    return BatchPlan(_chunk(ids, batch_size), "event-wise", batch_size)
