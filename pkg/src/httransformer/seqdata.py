"""Event-sequence data model: schemas, ingestion, splitting, padded batching.

A dataset file is newline-delimited JSON, one record per line:

    {"id": "u1", "labels": {"task": 3},
     "events": [{"t": 0.0, "code": 2, "amount": 9.5}, ...]}

A schema file is a flat JSON object mapping field name to a type string,
either ``"numerical"`` or ``"categorical:<cardinality>"``.  The timestamp key
``t`` is implicit and reserved.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

TIMESTAMP_KEY = "t"


class ParseError(ValueError):
    """Malformed dataset record; message carries the line number."""


class ValidationError(ValueError):
    """Record content violates the schema or ordering invariants."""


class ConfigError(ValueError):
    """Invalid configuration value."""


@dataclass(frozen=True)
class FieldSchema:
    """One event field: categorical with a fixed code range, or numerical."""

    name: str
    kind: str  # "categorical" | "numerical"
    cardinality: int | None = None

    def __post_init__(self):
        if self.kind not in ("categorical", "numerical"):
            raise ConfigError(f"field {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if self.cardinality is None or self.cardinality < 2:
                raise ConfigError(f"field {self.name!r}: categorical cardinality must be >= 2")
        elif self.cardinality is not None:
            raise ConfigError(f"field {self.name!r}: numerical fields have no cardinality")


def validate_schema(fields):
    names = [f.name for f in fields]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate field names in schema")
    if TIMESTAMP_KEY in names:
        raise ConfigError(f"{TIMESTAMP_KEY!r} is reserved for timestamps")
    return list(fields)


def categorical_fields(schema):
    return [f for f in schema if f.kind == "categorical"]


def numerical_fields(schema):
    return [f for f in schema if f.kind == "numerical"]


@dataclass
class EventSequence:
    """Chronologically ordered events of one entity, stored columnwise."""

    id: str
    timestamps: np.ndarray                      # (N,) float64, nondecreasing
    categorical_values: dict[str, np.ndarray]   # field -> (N,) int64
    numerical_values: dict[str, np.ndarray]     # field -> (N,) float64
    labels: dict[str, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.timestamps)

    def validate(self, schema):
        n = len(self.timestamps)
        if n and np.any(np.diff(self.timestamps) < 0):
            raise ValidationError(f"sequence {self.id!r}: timestamps are not nondecreasing")
        for f in schema:
            col = self.categorical_values if f.kind == "categorical" else self.numerical_values
            if f.name not in col:
                raise ValidationError(f"sequence {self.id!r}: missing field {f.name!r}")
            values = col[f.name]
            if len(values) != n:
                raise ValidationError(f"sequence {self.id!r}: field {f.name!r} length mismatch")
            if f.kind == "categorical" and n:
                lo, hi = values.min(), values.max()
                if lo < 0 or hi >= f.cardinality:
                    raise ValidationError(
                        f"sequence {self.id!r}: field {f.name!r} code out of range [0, {f.cardinality})"
                    )
        return self

    def truncated(self, max_len):
        """Keep the most recent ``max_len`` events."""
        if len(self) <= max_len:
            return self
        return EventSequence(
            id=self.id,
            timestamps=self.timestamps[-max_len:],
            categorical_values={k: v[-max_len:] for k, v in self.categorical_values.items()},
            numerical_values={k: v[-max_len:] for k, v in self.numerical_values.items()},
            labels=self.labels,
        )


class Dataset:
    """Immutable list of validated sequences sharing one schema."""

    def __init__(self, sequences, schema):
        self.sequences = list(sequences)
        self.schema = validate_schema(schema)

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    def subset(self, indices):
        return Dataset([self.sequences[i] for i in indices], self.schema)

    def label_classes(self, task):
        values = [s.labels[task] for s in self.sequences if task in s.labels]
        if not values:
            raise ValidationError(f"no sequence carries label {task!r}")
        return max(values) + 1


# -- schema and dataset files -------------------------------------------------


def schema_to_doc(schema):
    """Field order is meaningful (it fixes encoder layout) and must survive IO."""
    return {
        f.name: "numerical" if f.kind == "numerical" else f"categorical:{f.cardinality}"
        for f in validate_schema(schema)
    }


def schema_from_doc(doc):
    fields = []
    items = doc if isinstance(doc, list) else doc.items()
    for name, spec in items:
        if spec == "numerical":
            fields.append(FieldSchema(name, "numerical"))
        elif isinstance(spec, str) and spec.startswith("categorical:"):
            fields.append(FieldSchema(name, "categorical", int(spec.split(":", 1)[1])))
        else:
            raise ConfigError(f"schema entry {name!r}: bad type {spec!r}")
    return validate_schema(fields)


def save_schema(path, schema):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema_to_doc(schema), fh, indent=2)
        fh.write("\n")


def load_schema(path):
    with open(path, encoding="utf-8") as fh:
        return schema_from_doc(json.load(fh))


def _sequence_from_record(record, schema):
    events = record.get("events", [])
    n = len(events)
    timestamps = np.empty(n, dtype=np.float64)
    cat = {f.name: np.empty(n, dtype=np.int64) for f in categorical_fields(schema)}
    num = {f.name: np.empty(n, dtype=np.float64) for f in numerical_fields(schema)}
    for i, ev in enumerate(events):
        if TIMESTAMP_KEY not in ev:
            raise ValidationError(f"event {i}: missing timestamp {TIMESTAMP_KEY!r}")
        timestamps[i] = float(ev[TIMESTAMP_KEY])
        for f in schema:
            if f.name not in ev:
                raise ValidationError(f"event {i}: missing field {f.name!r}")
            if f.kind == "categorical":
                cat[f.name][i] = int(ev[f.name])
            else:
                num[f.name][i] = float(ev[f.name])
    labels = {str(k): int(v) for k, v in record.get("labels", {}).items()}
    return EventSequence(str(record["id"]), timestamps, cat, num, labels)


def load_dataset(path, schema):
    """Read an NDJSON dataset, validating every record against ``schema``."""
    schema = validate_schema(schema)
    sequences = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if "id" not in record:
                raise ParseError(f"{path}:{lineno}: record has no 'id'")
            try:
                seq = _sequence_from_record(record, schema)
                seq.validate(schema)
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            sequences.append(seq)
    return Dataset(sequences, schema)


def save_dataset(path, dataset):
    with open(path, "w", encoding="utf-8") as fh:
        for seq in dataset:
            events = []
            for i in range(len(seq)):
                ev = {TIMESTAMP_KEY: float(seq.timestamps[i])}
                for name, col in seq.categorical_values.items():
                    ev[name] = int(col[i])
                for name, col in seq.numerical_values.items():
                    ev[name] = float(col[i])
                events.append(ev)
            record = {"id": seq.id, "labels": dict(seq.labels), "events": events}
            fh.write(json.dumps(record, sort_keys=True) + "\n")


# -- splitting -----------------------------------------------------------------


def split_indices(ids, fractions, seed):
    """Three disjoint, exhaustive index groups, a function of (ids, seed) only.

    Sizes are exact via largest-remainder apportionment; the permutation is
    drawn over id-sorted items so input order cannot leak into the split.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ConfigError("fractions must be three positive numbers")
    if not math.isclose(sum(fractions), 1.0, rel_tol=0, abs_tol=1e-9):
        raise ConfigError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(ids)
    ideal = [f * n for f in fractions]
    sizes = [int(x) for x in ideal]
    remainders = sorted(range(3), key=lambda i: (ideal[i] - sizes[i], -i), reverse=True)
    for i in range(n - sum(sizes)):
        sizes[remainders[i % 3]] += 1

    order = sorted(range(n), key=lambda i: ids[i])
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [order[i] for i in perm]
    a, b = sizes[0], sizes[0] + sizes[1]
    return shuffled[:a], shuffled[a:b], shuffled[b:]


def split_dataset(dataset, fractions, seed):
    """Partition into train/val/test; deterministic given (sequence ids, seed)."""
    groups = split_indices([s.id for s in dataset], fractions, seed)
    return tuple(dataset.subset(g) for g in groups)


# -- time-scale statistics -------------------------------------------------------


def compute_time_stats(dataset):
    """Time-scale constants (m, M) for positional encoding.

    m is the 1st percentile of positive timestamps (floored at 1e-6), M the
    99th percentile of all timestamps, clamped so M >= m.  Computed from
    whatever split is passed in; callers should pass the training split.
    """
    if len(dataset) == 0:
        raise ValidationError("compute_time_stats: empty dataset")
    all_ts = np.concatenate([s.timestamps for s in dataset if len(s)])
    positive = all_ts[all_ts > 0.0]
    if positive.size == 0:
        raise ValidationError("compute_time_stats: no positive timestamps (degenerate time scale)")
    m = max(1e-6, float(np.percentile(positive, 1)))
    big = float(np.percentile(all_ts, 99))
    return m, max(m, big)


# -- batching --------------------------------------------------------------------


@dataclass
class PaddedBatch:
    """B sequences padded to a common length L; content beyond ``lengths[b]`` is pad."""

    ids: list
    lengths: np.ndarray                      # (B,) int64
    timestamps: np.ndarray                   # (B, L) float64, 0 at pads
    categorical: dict[str, np.ndarray]       # field -> (B, L) int64, 0 at pads
    numerical: dict[str, np.ndarray]         # field -> (B, L) float64, 0 at pads
    labels: dict[str, np.ndarray]            # task -> (B,) int64, -1 where absent

    @property
    def batch_size(self):
        return len(self.ids)

    @property
    def max_len(self):
        return self.timestamps.shape[1]

    @property
    def valid(self):
        return np.arange(self.max_len)[None, :] < self.lengths[:, None]


def pad_sequences(sequences, schema):
    """Stack sequences into one PaddedBatch (no truncation, no shuffling)."""
    b = len(sequences)
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    L = max(1, int(lengths.max())) if b else 1
    timestamps = np.zeros((b, L), dtype=np.float64)
    cat = {f.name: np.zeros((b, L), dtype=np.int64) for f in categorical_fields(schema)}
    num = {f.name: np.zeros((b, L), dtype=np.float64) for f in numerical_fields(schema)}
    tasks = sorted({t for s in sequences for t in s.labels})
    labels = {t: np.full(b, -1, dtype=np.int64) for t in tasks}
    for i, s in enumerate(sequences):
        n = len(s)
        timestamps[i, :n] = s.timestamps
        for name in cat:
            cat[name][i, :n] = s.categorical_values[name]
        for name in num:
            num[name][i, :n] = s.numerical_values[name]
        for t, v in s.labels.items():
            labels[t][i] = v
    return PaddedBatch([s.id for s in sequences], lengths, timestamps, cat, num, labels)


def make_batches(dataset, batch_size, max_len, seed, pool_factor=8, shuffle=True):
    """Padded batches with seed-deterministic order.

    Sequences longer than ``max_len`` keep their most recent events.  To curb
    pad waste, shuffled sequences are grouped into pools of
    ``batch_size * pool_factor`` and sorted by length inside each pool before
    being cut into batches; the batch order is then shuffled again.  With
    ``shuffle=False`` batches follow dataset order (no pooling).
    """
    if batch_size < 1 or max_len < 1:
        raise ConfigError("batch_size and max_len must be >= 1")
    truncated = [s.truncated(max_len) for s in dataset]
    n = len(truncated)
    if n == 0:
        return []
    if shuffle:
        rng = np.random.default_rng(seed)
        order = rng.permutation(n)
        groups = []
        pool = max(batch_size, batch_size * pool_factor)
        for start in range(0, n, pool):
            chunk = sorted(order[start:start + pool], key=lambda i: (len(truncated[i]), i))
            groups.extend(chunk[j:j + batch_size] for j in range(0, len(chunk), batch_size))
        rng.shuffle(groups)
    else:
        groups = [list(range(j, min(j + batch_size, n))) for j in range(0, n, batch_size)]
    return [pad_sequences([truncated[i] for i in g], dataset.schema) for g in groups]
