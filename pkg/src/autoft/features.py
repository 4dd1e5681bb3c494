"""Field schemas, vocabularies and index-list encoding of categorical rows.

An instance is stored as one list of active feature indices per field. Index
0 of every field is reserved for out-of-vocabulary values. For batched
computation a :class:`DomainDataset` packs the lists into padded
``(N, max_len)`` index arrays with matching averaging weights (``1/len`` on
real slots, 0 on padding), so a field embedding is ``sum(w * V[idx])``.
"""

from __future__ import annotations

import configparser
import csv
import enum
import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, SchemaError, ShapeError

OOV = 0


class Arity(str, enum.Enum):
    ONE_HOT = "onehot"
    MULTI_HOT = "multihot"


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


class Split(str, enum.Enum):
    TRAIN = "train"
    VALID = "valid"
    TEST = "test"


@dataclass(frozen=True)
class FieldSchema:
    name: str
    arity: Arity = Arity.ONE_HOT
    delimiter: str = "|"
    # multi-hot cells list the most recent feature first; the first ``max_len`` are kept
    max_len: int = 50

    def tokens(self, cell: str) -> list[str]:
        if self.arity is Arity.ONE_HOT:
            return [cell]
        toks = [t for t in cell.split(self.delimiter) if t != ""]
        return toks[: self.max_len]


@dataclass(frozen=True)
class Schema:
    fields: tuple[FieldSchema, ...]
    label_column: str = "label"
    rating_threshold: float | None = None

    def __post_init__(self):
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate field names in schema: {names}")
        if not names:
            raise ConfigError("schema declares no fields")

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.fields]

    def __len__(self) -> int:
        return len(self.fields)

    def parse_label(self, cell: str, row_number: int | None = None) -> int:
        where = f" (row {row_number})" if row_number is not None else ""
        try:
            value = float(cell)
        except (TypeError, ValueError):
            raise DataError(f"unparsable label {cell!r}{where}") from None
        if self.rating_threshold is not None:
            return int(value > self.rating_threshold)
        if value not in (0.0, 1.0):
            raise DataError(f"label must be 0 or 1, got {cell!r}{where}")
        return int(value)

    # Schema files are INI: a [label] section plus one [field:NAME] section per
    # field, in field order.
    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["label"] = {"column": self.label_column}
        if self.rating_threshold is not None:
            cp["label"]["threshold"] = repr(self.rating_threshold)
        for f in self.fields:
            sec = {"arity": f.arity.value}
            if f.arity is Arity.MULTI_HOT:
                sec.update(delimiter=f.delimiter, max_len=str(f.max_len))
            cp[f"field:{f.name}"] = sec
        lines = []
        for name in cp.sections():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in cp[name].items())
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str) -> Schema:
        # no inline comments: ";" and "#" are valid multi-hot delimiters
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"bad schema file: {exc}") from None
        if "label" not in cp:
            raise ConfigError("schema file needs a [label] section")
        fields = []
        for name in cp.sections():
            if not name.startswith("field:"):
                continue
            sec = cp[name]
            try:
                arity = Arity(sec.get("arity", "onehot").lower())
            except ValueError:
                raise ConfigError(f"unknown arity {sec.get('arity')!r} for {name}") from None
            try:
                max_len = sec.getint("max_len", 50)
            except ValueError:
                raise ConfigError(f"bad max_len {sec.get('max_len')!r} for {name}") from None
            fields.append(FieldSchema(name=name[len("field:"):], arity=arity,
                                      delimiter=sec.get("delimiter", "|"), max_len=max_len))
        thr = cp["label"].get("threshold")
        try:
            threshold = float(thr) if thr else None
        except ValueError:
            raise ConfigError(f"bad label threshold {thr!r}") from None
        return cls(tuple(fields), cp["label"].get("column", "label"), threshold)

    @classmethod
    def load(cls, path: str | Path) -> Schema:
        try:
            return cls.from_ini(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read schema file {path}: {exc}") from None


@dataclass
class Vocabulary:
    """Per-field feature-string to index maps; index 0 is OOV in every field."""

    maps: list[dict[str, int]]

    def size(self, i: int) -> int:
        return len(self.maps[i]) + 1

    @property
    def sizes(self) -> list[int]:
        return [self.size(i) for i in range(len(self.maps))]

    def index(self, i: int, token: str) -> int:
        return self.maps[i].get(token, OOV)

    def to_json(self) -> str:
        return json.dumps({"maps": self.maps}, sort_keys=False, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> Vocabulary:
        return cls([dict(m) for m in json.loads(text)["maps"]])

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        try:
            return cls.from_json(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read vocabulary {path}: {exc}") from None


@dataclass(frozen=True)
class EncodedInstance:
    indices: tuple[tuple[int, ...], ...]
    label: int


def _check_columns(row: Mapping[str, str], schema: Schema, row_number: int | None = None) -> None:
    for f in schema.fields:
        if f.name not in row or row[f.name] is None:
            where = f" (row {row_number})" if row_number is not None else ""
            raise SchemaError(f"missing column for field {f.name!r}{where}")


def build_vocab(rows: Iterable[Mapping[str, str]], schema: Schema, min_count: int = 1) -> Vocabulary:
    if min_count < 0:
        raise ConfigError("min_count must be nonnegative")
    counts = [Counter() for _ in schema.fields]
    order: list[dict[str, None]] = [{} for _ in schema.fields]
    for n, row in enumerate(rows, start=1):
        _check_columns(row, schema, n)
        for i, f in enumerate(schema.fields):
            for tok in f.tokens(row[f.name]):
                counts[i][tok] += 1
                order[i].setdefault(tok, None)
    maps = []
    for i in range(len(schema.fields)):
        kept = [t for t in order[i] if counts[i][t] >= min_count]
        maps.append({t: j + 1 for j, t in enumerate(kept)})
    return Vocabulary(maps)


def encode_instance(row: Mapping[str, str], schema: Schema, vocab: Vocabulary, row_number: int | None = None) -> EncodedInstance:
    _check_columns(row, schema, row_number)
    if schema.label_column not in row:
        raise SchemaError(f"missing label column {schema.label_column!r}")
    per_field = []
    for i, f in enumerate(schema.fields):
        toks = f.tokens(row[f.name])
        per_field.append(tuple(vocab.index(i, t) for t in toks) or (OOV,))
    return EncodedInstance(tuple(per_field), schema.parse_label(row[schema.label_column], row_number))


def read_csv_rows(path: str | Path) -> list[dict[str, str]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise DataError(f"{path}: missing header row")
            return list(reader)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


@dataclass
class Batch:
    """Packed minibatch: per field ``(idx, weights)`` arrays of shape (B, L_i)."""

    fields: list[tuple[np.ndarray, np.ndarray]]
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def pack(instances: Sequence[EncodedInstance], n_fields: int | None = None) -> Batch:
    m = n_fields if n_fields is not None else len(instances[0].indices)
    fields = []
    for i in range(m):
        lists = [inst.indices[i] for inst in instances]
        width = max((len(l) for l in lists), default=1)
        idx = np.zeros((len(lists), width), dtype=np.int64)
        wts = np.zeros((len(lists), width), dtype=np.float64)
        for r, l in enumerate(lists):
            idx[r, : len(l)] = l
            wts[r, : len(l)] = 1.0 / len(l)
        fields.append((idx, wts))
    labels = np.array([inst.label for inst in instances], dtype=np.float64)
    return Batch(fields, labels)


@dataclass
class DomainDataset:
    instances: list[EncodedInstance]
    domain: Domain
    split: Split
    vocab_digest: str = ""
    _packed: Batch | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def packed(self) -> Batch:
        if self._packed is None:
            self._packed = pack(self.instances)
        return self._packed

    @property
    def labels(self) -> np.ndarray:
        return self.packed.labels

    def batch(self, rows: np.ndarray) -> Batch:
        p = self.packed
        return Batch([(idx[rows], w[rows]) for idx, w in p.fields], p.labels[rows])

    @classmethod
    def from_csv(cls, path: str | Path, schema: Schema, vocab: Vocabulary, domain: Domain, split: Split) -> DomainDataset:
        rows = read_csv_rows(path)
        insts = [encode_instance(r, schema, vocab, n) for n, r in enumerate(rows, start=2)]
        return cls(insts, Domain(domain), Split(split), vocab.digest())

    @classmethod
    def concat(cls, parts: Sequence[DomainDataset], domain: Domain, split: Split) -> DomainDataset:
        digests = {p.vocab_digest for p in parts}
        if len(digests) > 1:
            raise ConfigError("datasets were encoded with different vocabularies")
        return cls([i for p in parts for i in p.instances], domain, split, digests.pop() if digests else "")


def embed_batch(tables: Sequence[np.ndarray], batch: Batch) -> np.ndarray:
    """Field embeddings of a batch, shape (B, m, k)."""
    if len(tables) != len(batch.fields):
        raise ShapeError(f"{len(tables)} embedding tables for {len(batch.fields)} fields")
    out = []
    for V, (idx, w) in zip(tables, batch.fields):
        if idx.size and (idx.max() >= V.shape[0] or idx.min() < 0):
            raise ShapeError(f"feature index {int(idx.max())} outside table with {V.shape[0]} rows")
        out.append(np.einsum("bl,blk->bk", w, V[idx]))
    return np.stack(out, axis=1)


def embed_lookup(tables: Sequence[np.ndarray], inst: EncodedInstance) -> np.ndarray:
    """Concatenated per-field mean embedding of one instance, length m*k."""
    return embed_batch(tables, pack([inst], len(tables)))[0].reshape(-1)


def scatter_embedding_grad(grads: Sequence[np.ndarray], batch: Batch, d_fields: np.ndarray) -> None:
    """Accumulate d(loss)/d(table) given d(loss)/d(field embedding) of shape (B, m, k)."""
    for i, (idx, w) in enumerate(batch.fields):
        contrib = w[:, :, None] * d_fields[:, i, None, :]
        np.add.at(grads[i], idx.ravel(), contrib.reshape(-1, contrib.shape[-1]))
