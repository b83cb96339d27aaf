"""Field schemas, vocabularies, CSV ingestion, synthetic data, and batching."""

from __future__ import annotations

import csv
import hashlib
import struct
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .autograd import stable_sigmoid
from .errors import ContractError, DataError, SchemaError, SynthSpecError
from .seeding import derive_seed

CATEGORICAL = "categorical"
NUMERIC = "numeric"

CACHE_MAGIC = b"MMBD"
CACHE_VERSION = 1


@dataclass(frozen=True)
class FieldSchema:
    """Ordered feature fields plus the label column.

    Numeric fields are quantile-bucketized into ``buckets`` bins at vocab
    build time and treated as categorical afterwards, so the model stays
    purely embedding based.
    """

    fields: tuple[tuple[str, str], ...]
    label_column: str
    min_count: int = 1
    buckets: int = 10
    delimiter: str = ","

    def __post_init__(self):
        if len(self.fields) < 1:
            raise SchemaError("schema needs at least one feature field")
        names = [n for n, _ in self.fields]
        if len(set(names)) != len(names):
            raise SchemaError("field names must be unique")
        if self.label_column in names:
            raise SchemaError(f"label column {self.label_column!r} is also a feature field")
        for name, kind in self.fields:
            if kind not in (CATEGORICAL, NUMERIC):
                raise SchemaError(f"field {name!r} has unknown kind {kind!r}")
        if self.min_count < 1:
            raise SchemaError("min_count must be >= 1")
        if self.buckets < 1:
            raise SchemaError("buckets must be >= 1")

    @property
    def n_fields(self) -> int:
        return len(self.fields)

    @property
    def field_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.fields)


class Vocabulary:
    """Per-field value -> index maps; index 0 is the shared OOV/padding slot.

    Categorical fields map raw strings.  Numeric fields map through the
    quantile bucket boundaries recorded at build time; their ``maps``
    entry stays empty.
    """

    def __init__(self, maps: Sequence[dict[str, int]],
                 boundaries: Sequence[np.ndarray | None]):
        if len(maps) != len(boundaries):
            raise ContractError("maps and boundaries must align per field")
        self.maps = list(maps)
        self.boundaries = list(boundaries)
        self._inverse: list[dict[int, str] | None] = [None] * len(self.maps)

    @property
    def sizes(self) -> list[int]:
        """Vocabulary size per field, OOV slot included."""
        out = []
        for m, b in zip(self.maps, self.boundaries):
            out.append(len(m) + 1 if b is None else len(b) + 2)
        return out

    @property
    def total_features(self) -> int:
        return sum(self.sizes)

    def index_of(self, field: int, raw: str) -> int:
        bounds = self.boundaries[field]
        if bounds is None:
            return self.maps[field].get(raw, 0)
        try:
            value = float(raw)
        except ValueError:
            return 0
        return int(np.searchsorted(bounds, value, side="right")) + 1

    def value_of(self, field: int, index: int) -> str:
        """Inverse lookup for categorical fields; OOV decodes to ''."""
        if self.boundaries[field] is not None:
            raise ContractError("numeric-bucketized fields cannot be decoded losslessly")
        inv = self._inverse[field]
        if inv is None:
            inv = {i: v for v, i in self.maps[field].items()}
            self._inverse[field] = inv
        return inv.get(index, "")


@dataclass
class Batch:
    """Encoded index matrix (rows × fields) plus binary labels."""

    indices: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.indices.ndim != 2:
            raise ContractError("indices must be 2-d (rows × fields)")
        if self.labels.shape != (self.indices.shape[0],):
            raise ContractError("labels length must match row count")
        if self.labels.size and not np.isin(self.labels, (0.0, 1.0)).all():
            raise ContractError("labels must be binary")

    @property
    def n(self) -> int:
        return self.indices.shape[0]

    @property
    def n_fields(self) -> int:
        return self.indices.shape[1]

    def take(self, sel) -> "Batch":
        return Batch(self.indices[sel], self.labels[sel])

    def validate_indices(self, vocab: Vocabulary) -> None:
        for f, size in enumerate(vocab.sizes):
            if self.n and int(self.indices[:, f].max()) >= size:
                raise ContractError(f"index out of vocabulary range in field {f}")

    def digest(self) -> str:
        """Content digest of the encoded data (split-isolation checks, caching)."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.indices, dtype="<u4").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<u1").tobytes())
        return h.hexdigest()


# -- CSV ingestion ------------------------------------------------------


@contextmanager
def _open_rows(source, delimiter: str):
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            yield csv.reader(fh, delimiter=delimiter)
    elif hasattr(source, "read"):
        yield csv.reader(source, delimiter=delimiter)
    else:
        yield csv.reader(iter(source), delimiter=delimiter)


def read_table(source, delimiter: str = ",") -> tuple[list[str], list[list[str]]]:
    """Slurp a CSV into (header, rows); desk-scale datasets only."""
    with _open_rows(source, delimiter) as reader:
        header = next(reader, None)
        if header is None:
            raise DataError("empty input stream")
        rows = [row for row in reader if row]
    return header, rows


def _column_positions(header: list[str], schema: FieldSchema) -> dict[str, int]:
    pos = {}
    for name in (*schema.field_names, schema.label_column):
        if name not in header:
            raise SchemaError(f"missing column {name!r} in header")
        pos[name] = header.index(name)
    return pos


def build_vocab_rows(header: list[str], rows: list[list[str]],
                     schema: FieldSchema, min_count: int | None = None) -> Vocabulary:
    mc = schema.min_count if min_count is None else min_count
    if not rows:
        raise DataError("no data rows in input stream")
    cols = _column_positions(header, schema)
    counts: list[dict[str, int]] = [{} for _ in schema.fields]
    numeric: list[list[float]] = [[] for _ in schema.fields]
    for rownum, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise DataError(f"row {rownum}: expected {len(header)} columns, got {len(row)}")
        for f, (name, kind) in enumerate(schema.fields):
            raw = row[cols[name]]
            if kind == CATEGORICAL:
                counts[f][raw] = counts[f].get(raw, 0) + 1
            else:
                try:
                    numeric[f].append(float(raw))
                except ValueError:
                    pass
    maps: list[dict[str, int]] = []
    bounds: list[np.ndarray | None] = []
    for f, (name, kind) in enumerate(schema.fields):
        if kind == CATEGORICAL:
            table: dict[str, int] = {}
            for value, c in counts[f].items():  # first-seen order
                if c >= mc:
                    table[value] = len(table) + 1
            maps.append(table)
            bounds.append(None)
        else:
            vals = np.asarray(numeric[f], dtype=np.float64)
            if vals.size:
                qs = np.linspace(0.0, 1.0, schema.buckets + 1)[1:-1]
                edges = np.unique(np.quantile(vals, qs))
            else:
                edges = np.empty(0, dtype=np.float64)
            maps.append({})
            bounds.append(edges)
    return Vocabulary(maps, bounds)


def build_vocab(source, schema: FieldSchema, min_count: int | None = None) -> Vocabulary:
    """Build per-field vocabularies from a CSV stream.

    Values seen fewer than ``min_count`` times map to the OOV index 0;
    the rest get contiguous indices in first-seen order starting at 1.
    """
    header, rows = read_table(source, schema.delimiter)
    return build_vocab_rows(header, rows, schema, min_count)


def encode_rows(header: list[str], rows: list[list[str]],
                schema: FieldSchema, vocab: Vocabulary) -> Batch:
    if not rows:
        raise DataError("no data rows in input stream")
    cols = _column_positions(header, schema)
    label_col = cols[schema.label_column]
    field_cols = [cols[name] for name in schema.field_names]
    indices = np.zeros((len(rows), schema.n_fields), dtype=np.uint32)
    labels = np.zeros(len(rows), dtype=np.float64)
    for rownum, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise DataError(f"row {rownum}: expected {len(header)} columns, got {len(row)}")
        raw_label = row[label_col]
        try:
            y = float(raw_label)
        except ValueError:
            raise DataError(f"row {rownum}: label {raw_label!r} is not a number") from None
        if y not in (0.0, 1.0):
            raise DataError(f"row {rownum}: label must be 0 or 1, got {raw_label!r}")
        labels[rownum - 1] = y
        for f in range(schema.n_fields):
            indices[rownum - 1, f] = vocab.index_of(f, row[field_cols[f]])
    return Batch(indices, labels)


def encode(source, schema: FieldSchema, vocab: Vocabulary) -> Batch:
    """Map CSV rows to an index matrix; unseen values go to index 0."""
    header, rows = read_table(source, schema.delimiter)
    return encode_rows(header, rows, schema, vocab)


def decode(batch: Batch, schema: FieldSchema, vocab: Vocabulary) -> list[list[str]]:
    """Recover raw values for encoded rows (categorical fields only)."""
    out = []
    for r in range(batch.n):
        out.append([vocab.value_of(f, int(batch.indices[r, f]))
                    for f in range(schema.n_fields)])
    return out


# -- binary dataset cache ------------------------------------------------

_CACHE_HEADER = struct.Struct("<HQH")  # version, row count, field count


def save_dataset(data: Batch, path) -> None:
    """Write the MMBD binary cache: u32 indices row-major, u8 labels, LE."""
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(_CACHE_HEADER.pack(CACHE_VERSION, data.n, data.n_fields))
        fh.write(np.ascontiguousarray(data.indices, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(data.labels, dtype="<u1").tobytes())


def load_dataset(path) -> Batch:
    blob = Path(path).read_bytes()
    if blob[:4] != CACHE_MAGIC:
        raise DataError(f"{path}: bad magic at byte 0")
    if len(blob) < 4 + _CACHE_HEADER.size:
        raise DataError(f"{path}: truncated header at byte {len(blob)}")
    version, n, nf = _CACHE_HEADER.unpack_from(blob, 4)
    if version != CACHE_VERSION:
        raise DataError(f"{path}: unsupported cache version {version}")
    start = 4 + _CACHE_HEADER.size
    need = start + n * nf * 4 + n
    if len(blob) != need:
        raise DataError(f"{path}: expected {need} bytes, got {len(blob)} "
                        f"(truncated at byte {len(blob)})")
    indices = np.frombuffer(blob, dtype="<u4", count=n * nf, offset=start)
    labels = np.frombuffer(blob, dtype="<u1", count=n, offset=start + n * nf * 4)
    return Batch(indices.reshape(n, nf).astype(np.uint32),
                 labels.astype(np.float64))


# -- deterministic splitting and batching --------------------------------


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64)
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def hash_split(n_rows: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic 8:1:1 split keyed on row number."""
    bucket = _splitmix64(np.arange(n_rows, dtype=np.uint64)) % np.uint64(10)
    return (np.nonzero(bucket < 8)[0],
            np.nonzero(bucket == 8)[0],
            np.nonzero(bucket == 9)[0])


def batches(data: Batch, batch_size: int, shuffle_seed: int | None = None,
            epoch: int = 0) -> Iterator[Batch]:
    """Deterministic mini-batches; the last partial batch is kept.

    The shuffle is keyed by (shuffle_seed, epoch); with ``shuffle_seed``
    None the dataset order is preserved (evaluation).
    """
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    if shuffle_seed is None:
        order = np.arange(data.n)
    else:
        rng = np.random.default_rng(derive_seed(shuffle_seed, f"shuffle-epoch:{epoch}"))
        order = rng.permutation(data.n)
    for start in range(0, data.n, batch_size):
        yield data.take(order[start:start + batch_size])


# -- planted-importance synthetic data ------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic CTR data with known field importance.

    Labels are Bernoulli(sigmoid(sum over informative fields of a fixed
    per-value weight)); noise fields are drawn independently of the label.
    """

    n_rows: int
    cardinalities: tuple[int, ...]
    informative: tuple[int, ...]
    weight_scale: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n_rows < 10:
            raise SynthSpecError("n_rows must be at least 10")
        if not self.cardinalities:
            raise SynthSpecError("need at least one field")
        if any(c < 2 for c in self.cardinalities):
            raise SynthSpecError("every field cardinality must be >= 2")
        if not self.informative:
            raise SynthSpecError("label rule needs at least one informative field")
        if len(set(self.informative)) != len(self.informative):
            raise SynthSpecError("duplicate informative field index")
        if not set(self.informative) <= set(range(self.n_fields)):
            raise SynthSpecError("informative field index out of range")
        if not self.weight_scale > 0:
            raise SynthSpecError("weight_scale must be positive")

    @property
    def n_fields(self) -> int:
        return len(self.cardinalities)

    @property
    def noise(self) -> tuple[int, ...]:
        info = set(self.informative)
        return tuple(f for f in range(self.n_fields) if f not in info)

    @property
    def field_names(self) -> tuple[str, ...]:
        return tuple(f"f{i}" for i in range(self.n_fields))

    def schema(self) -> FieldSchema:
        return FieldSchema(fields=tuple((n, CATEGORICAL) for n in self.field_names),
                           label_column="label")

    def vocabulary(self) -> Vocabulary:
        maps = [{f"v{k}": k + 1 for k in range(card)} for card in self.cardinalities]
        return Vocabulary(maps, [None] * self.n_fields)


@dataclass(frozen=True)
class SynthTruth:
    """Ground truth of the generating rule, for recovery scoring."""

    importance: tuple[float, ...]  # per-field variance of the logit contribution
    bayes_auc: float
    base_rate: float


def _synth_weights(spec: SynthSpec) -> dict[int, np.ndarray]:
    out = {}
    for f in spec.informative:
        rng = np.random.default_rng(derive_seed(spec.seed, f"synth-weights:f{f}"))
        out[f] = rng.normal(0.0, spec.weight_scale, size=spec.cardinalities[f])
    return out


def _combo_probs(spec: SynthSpec, weights: dict[int, np.ndarray]) -> np.ndarray:
    """Click probability of every informative-value combination (all equally likely)."""
    n_combos = 1
    for f in spec.informative:
        n_combos *= spec.cardinalities[f]
    if n_combos > 2_000_000:
        raise SynthSpecError("too many value combinations for exact Bayes computation")
    logits = np.zeros(1)
    for f in spec.informative:
        logits = (logits[:, None] + weights[f][None, :]).ravel()
    return stable_sigmoid(logits)


def _bayes_auc_of(probs: np.ndarray) -> float:
    """Expected AUC of the true click probability used as the ranking score."""
    uniq, counts = np.unique(probs, return_counts=True)  # ascending
    pos = counts * uniq
    neg = counts * (1.0 - uniq)
    below = np.cumsum(neg) - neg  # negative mass strictly below each score
    num = float(np.sum(pos * below) + 0.5 * np.sum(pos * neg))
    den = float(pos.sum() * neg.sum())
    return num / den


def synth_truth(spec: SynthSpec) -> SynthTruth:
    weights = _synth_weights(spec)
    probs = _combo_probs(spec, weights)
    importance = tuple(
        float(np.var(weights[f])) if f in weights else 0.0
        for f in range(spec.n_fields))
    return SynthTruth(importance=importance,
                      bayes_auc=_bayes_auc_of(probs),
                      base_rate=float(np.mean(probs)))


def synth_table(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """Generate raw value ids (n × F) and labels for the whole spec."""
    values = np.empty((spec.n_rows, spec.n_fields), dtype=np.int64)
    for f in range(spec.n_fields):
        rng = np.random.default_rng(derive_seed(spec.seed, f"synth-values:f{f}"))
        values[:, f] = rng.integers(0, spec.cardinalities[f], size=spec.n_rows)
    weights = _synth_weights(spec)
    logits = np.zeros(spec.n_rows)
    for f in spec.informative:
        logits += weights[f][values[:, f]]
    rng = np.random.default_rng(derive_seed(spec.seed, "synth-labels"))
    labels = (rng.random(spec.n_rows) < stable_sigmoid(logits)).astype(np.float64)
    return values, labels


def _split_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(n * 0.8)
    n_valid = int(n * 0.1)
    return n_train, n_valid, n - n_train - n_valid


def synth_generate(spec: SynthSpec) -> tuple[Batch, Batch, Batch, SynthTruth]:
    """Generate encoded train/valid/test splits (8:1:1) plus ground truth."""
    truth = synth_truth(spec)
    if not 0.05 < truth.base_rate < 0.95:
        raise SynthSpecError(f"label base rate {truth.base_rate:.4f} outside (0.05, 0.95); "
                             "reduce weight_scale or reseed")
    values, labels = synth_table(spec)
    full = Batch((values + 1).astype(np.uint32), labels)
    n_train, n_valid, _ = _split_sizes(spec.n_rows)
    train = full.take(slice(0, n_train))
    valid = full.take(slice(n_train, n_train + n_valid))
    test = full.take(slice(n_train + n_valid, spec.n_rows))
    return train, valid, test, truth


def synth_write_csv(spec: SynthSpec, out_dir) -> dict[str, int]:
    """Write train/valid/test CSVs plus ground truth; returns row counts."""
    import json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth = synth_truth(spec)
    if not 0.05 < truth.base_rate < 0.95:
        raise SynthSpecError(f"label base rate {truth.base_rate:.4f} outside (0.05, 0.95); "
                             "reduce weight_scale or reseed")
    values, labels = synth_table(spec)
    n_train, n_valid, n_test = _split_sizes(spec.n_rows)
    bounds = {"train": (0, n_train),
              "valid": (n_train, n_train + n_valid),
              "test": (n_train + n_valid, spec.n_rows)}
    header = ",".join((*spec.field_names, "label"))
    for split, (lo, hi) in bounds.items():
        lines = [header]
        for r in range(lo, hi):
            cells = [f"v{values[r, f]}" for f in range(spec.n_fields)]
            cells.append(str(int(labels[r])))
            lines.append(",".join(cells))
        (out / f"{split}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    truth_doc = {
        "fields": list(spec.field_names),
        "informative": list(spec.informative),
        "importance": [float(x) for x in truth.importance],
        "bayes_auc": truth.bayes_auc,
        "base_rate": truth.base_rate,
    }
    (out / "ground_truth.json").write_text(
        json.dumps(truth_doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"train": n_train, "valid": n_valid, "test": n_test}
