"""Glue between raw rows, encoded datasets and training stages."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping

from .features import Domain, DomainDataset, Schema, Split, Vocabulary, build_vocab, encode_instance, read_csv_rows
from .errors import DataError

DOMAINS = ("source", "target")
SPLITS = ("train", "valid", "test")


@dataclass
class Datasets:
    vocab: Vocabulary
    parts: dict[tuple[str, str], DomainDataset]

    def __getitem__(self, key: tuple[str, str]) -> DomainDataset:
        return self.parts[key]

    def all(self, split: str) -> DomainDataset:
        """Source and target instances of one split, source first."""
        return DomainDataset.concat([self.parts[("source", split)], self.parts[("target", split)]], Domain.SOURCE, Split(split))


def load_rows(data_dir: str | Path) -> dict[tuple[str, str], list[dict[str, str]]]:
    data_dir = Path(data_dir)
    rows = {}
    for d in DOMAINS:
        for s in SPLITS:
            p = data_dir / f"{d}_{s}.csv"
            if not p.exists():
                raise DataError(f"missing data file {p}")
            rows[(d, s)] = read_csv_rows(p)
    return rows


def vocab_from_rows(rows: Mapping[tuple[str, str], list], schema: Schema, min_count: int = 1) -> Vocabulary:
    """Vocabulary over source and target training rows together."""
    return build_vocab(rows[("source", "train")] + rows[("target", "train")], schema, min_count)


def encode_rows(rows: Mapping[tuple[str, str], list], schema: Schema, vocab: Vocabulary) -> Datasets:
    digest = vocab.digest()
    parts = {}
    for (d, s), rs in rows.items():
        insts = [encode_instance(r, schema, vocab, n) for n, r in enumerate(rs, start=2)]
        parts[(d, s)] = DomainDataset(insts, Domain(d), Split(s), digest)
    return Datasets(vocab, parts)


def prepare(rows: Mapping[tuple[str, str], list], schema: Schema, min_count: int = 1) -> Datasets:
    return encode_rows(rows, schema, vocab_from_rows(rows, schema, min_count))
