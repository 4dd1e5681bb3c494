"""Synthetic two-domain CTR data with a known pairwise-interaction ground truth.

Fields: ``user``, ``item``, ``category`` (fixed per item), ``context`` and a
multi-hot ``genres`` field (fixed per item). Every feature has one latent
vector shared by both domains; multi-hot fields use the mean of their
latents. The click logit of a domain is

    offset + sum of feature biases + scale * sum_{i<j} u_i^T M_ij u_j

where the biases and the field-pair matrices ``M_ij`` are domain-specific.
Target values are ``cos(t) * source + sin(t) * fresh`` with
``t = divergence * pi/2``: divergence 0 reproduces the source weights
exactly, 1 draws them independently at the same scale. Users are disjoint
between domains unless ``user_overlap`` > 0; a fraction ``item_overlap`` of
the target item pool comes from the source catalogue.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .features import Arity, FieldSchema, Schema
from .numerics import SeededRng, sigmoid

FIELDS = ("user", "item", "category", "context", "genres")
SPLITS = (("train", 0.8), ("valid", 0.1), ("test", 0.1))


@dataclass
class SynthSpec:
    n_users: int = 600
    n_items: int = 400
    n_categories: int = 20
    n_contexts: int = 8
    n_genres: int = 15
    latent_dim: int = 8
    n_source: int = 50_000
    n_target: int = 5_000
    divergence: float = 0.5
    item_overlap: float = 0.6
    user_overlap: float = 0.0
    interaction_scale: float = 1.0
    bias_scale: float = 0.5
    deterministic_labels: bool = False
    seed: int = 42

    def __post_init__(self):
        for name in ("n_users", "n_items", "n_categories", "n_contexts", "n_genres", "latent_dim", "n_source", "n_target"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("divergence", "item_overlap", "user_overlap"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")


def schema() -> Schema:
    fs = [FieldSchema(n) for n in FIELDS[:-1]] + [FieldSchema("genres", Arity.MULTI_HOT, "|", 50)]
    return Schema(tuple(fs), label_column="label")


@dataclass
class SynthData:
    spec: SynthSpec
    rows: dict[tuple[str, str], list[dict[str, str]]]
    manifest: dict = field(default_factory=dict)
    logits: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)


def _genre_lists(rng: SeededRng, n_items: int, n_genres: int) -> list[list[int]]:
    out = []
    for _ in range(n_items):
        k = 1 + int(rng.integers(3))
        out.append(sorted(set(int(g) for g in rng.integers(n_genres, k))))
    return out


def _mix(a, b, theta: float):
    return math.cos(theta) * a + math.sin(theta) * b


def generate(spec: SynthSpec) -> SynthData:
    rng = SeededRng(spec.seed)
    r = spec.latent_dim
    theta = spec.divergence * math.pi / 2

    n_shared_users = round(spec.user_overlap * spec.n_users)
    src_users = list(range(spec.n_users))
    tgt_users = src_users[:n_shared_users] + [spec.n_users + j for j in range(spec.n_users - n_shared_users)]
    n_shared_items = round(spec.item_overlap * spec.n_items)
    src_items = list(range(spec.n_items))
    tgt_items = src_items[:n_shared_items] + [spec.n_items + j for j in range(spec.n_items - n_shared_items)]
    pools = {
        "user": max(tgt_users[-1], src_users[-1]) + 1,
        "item": max(tgt_items[-1], src_items[-1]) + 1,
        "category": spec.n_categories,
        "context": spec.n_contexts,
        "genres": spec.n_genres,
    }

    meta_rng = rng.child(1)
    item_cat = meta_rng.integers(spec.n_categories, pools["item"])
    genres = _genre_lists(meta_rng, pools["item"], spec.n_genres)

    # latents are shared by both domains; biases and pair matrices are domain-specific
    wrng = rng.child(0)
    latents = {f: wrng.normal((n, r), r ** -0.25) for f, n in pools.items()}
    bias_src = {f: wrng.normal(n, spec.bias_scale) for f, n in pools.items()}
    bias_tgt = {f: _mix(bias_src[f], wrng.normal(n, spec.bias_scale), theta) for f, n in pools.items()}
    pairs = [(i, j) for i in range(len(FIELDS)) for j in range(i + 1, len(FIELDS))]
    pair_src = {p: wrng.normal((r, r), r ** -0.5) for p in pairs}
    pair_tgt = {p: _mix(pair_src[p], wrng.normal((r, r), r ** -0.5), theta) for p in pairs}

    rows: dict[tuple[str, str], list[dict[str, str]]] = {}
    true_logits: dict[tuple[str, str], np.ndarray] = {}
    offsets = {}
    for d_idx, (domain, users, items, n, biases, mats) in enumerate((
        ("source", src_users, src_items, spec.n_source, bias_src, pair_src),
        ("target", tgt_users, tgt_items, spec.n_target, bias_tgt, pair_tgt),
    )):
        drng = rng.child(2, d_idx)
        u = np.asarray(users)[drng.integers(len(users), n)]
        it = np.asarray(items)[drng.integers(len(items), n)]
        ctx = drng.integers(spec.n_contexts, n)
        cat = item_cat[it]
        ids = {"user": u, "item": it, "category": cat, "context": ctx}
        vecs = [latents[f][ids[f]] for f in FIELDS[:-1]]
        bias = sum(biases[f][ids[f]] for f in FIELDS[:-1])
        g_vec = np.stack([latents["genres"][genres[i]].mean(axis=0) for i in range(pools["item"])])
        g_bias = np.array([biases["genres"][genres[i]].mean() for i in range(pools["item"])])
        vecs.append(g_vec[it])
        bias = bias + g_bias[it]
        pair = sum(np.einsum("na,ab,nb->n", vecs[i], mats[(i, j)], vecs[j]) for i, j in pairs)
        scores = bias + spec.interaction_scale * pair
        offset = -float(np.median(scores))
        offsets[domain] = offset
        logits = scores + offset
        if spec.deterministic_labels:
            labels = (logits > 0).astype(int)
        else:
            labels = (drng.uniform(n) < sigmoid(logits)).astype(int)
        feats = [
            {
                "user": f"u{u[k]}",
                "item": f"i{it[k]}",
                "category": f"c{cat[k]}",
                "context": f"x{ctx[k]}",
                "genres": "|".join(f"g{g}" for g in genres[it[k]]),
                "label": str(int(labels[k])),
            }
            for k in range(n)
        ]
        order = drng.permutation(n)
        start = 0
        for k, (split, frac) in enumerate(SPLITS):
            stop = n if k == len(SPLITS) - 1 else start + int(round(frac * n))
            rows[(domain, split)] = [feats[j] for j in order[start:stop]]
            true_logits[(domain, split)] = logits[order[start:stop]]
            start = stop

    manifest = {
        "spec": asdict(spec),
        "fields": list(FIELDS),
        "offsets": offsets,
        "latents": {f: v.tolist() for f, v in latents.items()},
        "bias_source": {f: v.tolist() for f, v in bias_src.items()},
        "bias_target": {f: v.tolist() for f, v in bias_tgt.items()},
        "pair_source": {f"{FIELDS[i]}*{FIELDS[j]}": m.tolist() for (i, j), m in pair_src.items()},
        "pair_target": {f"{FIELDS[i]}*{FIELDS[j]}": m.tolist() for (i, j), m in pair_tgt.items()},
        "item_category": item_cat.tolist(),
        "item_genres": genres,
    }
    return SynthData(spec, rows, manifest, true_logits)


def rows_to_csv(rows: list[dict[str, str]]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=[*FIELDS, "label"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def write(data: SynthData, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for (domain, split), rows in sorted(data.rows.items()):
            p = out / f"{domain}_{split}.csv"
            p.write_text(rows_to_csv(rows), encoding="utf-8")
            written.append(p)
        p = out / "schema.ini"
        p.write_text(schema().to_ini(), encoding="utf-8")
        written.append(p)
        p = out / "manifest.json"
        p.write_text(json.dumps(data.manifest, sort_keys=True, indent=1), encoding="utf-8")
        written.append(p)
    except OSError as exc:
        raise DataError(f"cannot write synthetic data to {out}: {exc}") from None
    return written
