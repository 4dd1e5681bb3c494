"""AUC / LogLoss, routing-fraction reports and multi-run result tables."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dcn import PROB_CLAMP, cross_entropy
from .errors import DataError, MetricUndefinedError, ShapeError
from .policy import COMPONENTS, read_route_dump


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], len(xs)]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(len(x))
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auc(labels: Sequence[float], scores: Sequence[float]) -> float:
    """Rank-sum (Mann-Whitney) AUC with ties counted as one half."""
    y = np.asarray(labels, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape:
        raise ShapeError(f"labels {y.shape} and scores {s.shape} differ in shape")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC needs at least one positive and one negative label")
    r = midranks(s)
    return float((r[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def logloss(labels: Sequence[float], scores: Sequence[float]) -> float:
    y = np.asarray(labels, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape:
        raise ShapeError(f"labels {y.shape} and scores {s.shape} differ in shape")
    return float(np.mean(cross_entropy(y, s)))


def metrics(labels, scores) -> dict[str, float]:
    return {"auc": auc(labels, scores), "logloss": logloss(labels, scores), "n": int(len(labels))}


# -- routing --------------------------------------------------------------------

@dataclass
class RoutingReport:
    pretrained: dict[str, np.ndarray]
    n_instances: int

    @property
    def finetuned(self) -> dict[str, np.ndarray]:
        return {c: 1.0 - p for c, p in self.pretrained.items()}

    def finetune_by_depth(self, component: str) -> list[float]:
        return [float(v) for v in self.finetuned[component]]

    def rows(self) -> list[tuple[str, int, float]]:
        return [(c, u, float(v)) for c in COMPONENTS for u, v in enumerate(self.pretrained.get(c, ()))]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["component", "unit", "pretrained_fraction"])
        for c, u, v in self.rows():
            w.writerow([c, u, repr(v)])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"instances: {self.n_instances}"]
        for c in COMPONENTS:
            if len(self.pretrained.get(c, ())) == 0:
                continue
            pre = " ".join(f"{v:.3f}" for v in self.pretrained[c])
            ft = " ".join(f"{v:.3f}" for v in self.finetuned[c])
            lines.append(f"{c:<6} pretrained: {pre}")
            lines.append(f"{'':<6} finetuned:  {ft}")
        return "\n".join(lines)


def routing_fractions(route_dump: str | Path | Mapping[str, np.ndarray]) -> RoutingReport:
    bits = read_route_dump(route_dump) if isinstance(route_dump, (str, Path)) else route_dump
    n = len(next(iter(bits.values()))) if bits else 0
    pre = {}
    for comp in COMPONENTS:
        b = np.asarray(bits.get(comp, np.zeros((n, 0))), dtype=np.float64)
        pre[comp] = b.mean(axis=0) if n else np.zeros(b.shape[1])
    return RoutingReport(pre, n)


# -- result tables ------------------------------------------------------------------

METHOD_ORDER = ["Target-only", "Source-only", "Source-Fine-Tune", "Source-AutoFT", "All", "All-Fine-Tune",
                "All-Embedding", "All-Cross", "All-Deep", "All-Cross & Deep", "All-AutoFT"]


@dataclass
class MethodSummary:
    method: str
    auc: list[float] = field(default_factory=list)
    logloss: list[float] = field(default_factory=list)
    n: list[int] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)

    @staticmethod
    def _stats(v: list[float]) -> tuple[float, float]:
        a = np.asarray(v, dtype=np.float64)
        return float(a.mean()), float(a.std()) if len(a) > 1 else 0.0

    @property
    def auc_stats(self):
        return self._stats(self.auc)

    @property
    def logloss_stats(self):
        return self._stats(self.logloss)


def _method_key(name: str):
    base = name.split(" ", 1)[-1] if name.startswith("DNN ") else name
    pos = METHOD_ORDER.index(base) if base in METHOD_ORDER else len(METHOD_ORDER)
    return (name.startswith("DNN "), pos, name)


def read_run(run_dir: str | Path) -> dict | None:
    """Method, seed and test metrics of a finished run, or None if it has none."""
    run_dir = Path(run_dir)
    info_path, log_path = run_dir / "run.json", run_dir / "metrics.jsonl"
    if not info_path.exists() or not log_path.exists():
        return None
    info = json.loads(info_path.read_text())
    test = None
    for line in log_path.read_text().splitlines():
        rec = json.loads(line)
        if rec.get("split") == "test":
            test = rec
    if test is None:
        return None
    return {"method": info["method"], "seed": info["seed"], "auc": test["auc"], "logloss": test["logloss"], "n": test["n"]}


def results_table(run_dirs: Iterable[str | Path]) -> list[MethodSummary]:
    by_method: dict[str, MethodSummary] = {}
    for d in run_dirs:
        r = read_run(d)
        if r is None:
            continue
        s = by_method.setdefault(r["method"], MethodSummary(r["method"]))
        s.auc.append(r["auc"])
        s.logloss.append(r["logloss"])
        s.n.append(r["n"])
        s.seeds.append(r["seed"])
    return sorted(by_method.values(), key=lambda s: _method_key(s.method))


def table_csv(rows: Sequence[MethodSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "auc_mean", "auc_std", "logloss_mean", "logloss_std", "n_seeds"])
    for s in rows:
        am, asd = s.auc_stats
        lm, lsd = s.logloss_stats
        w.writerow([s.method, f"{am:.6f}", f"{asd:.6f}", f"{lm:.6f}", f"{lsd:.6f}", len(s.seeds)])
    return buf.getvalue()


def absent_runs(run_dirs: Iterable[str | Path]) -> list[str]:
    """Run directories with no completed test evaluation."""
    return [str(d) for d in run_dirs if read_run(d) is None]


def table_text(rows: Sequence[MethodSummary], absent: Sequence[str] = ()) -> str:
    tail = "".join(f"absent: {a}\n" for a in absent)
    if not rows:
        return "no completed runs\n" + tail
    best_auc = max(s.auc_stats[0] for s in rows)
    best_ll = min(s.logloss_stats[0] for s in rows)
    width = max(len("method"), *(len(s.method) for s in rows))
    out = [f"{'method':<{width}}  {'AUC':>17}  {'LogLoss':>17}  seeds"]
    for s in rows:
        am, asd = s.auc_stats
        lm, lsd = s.logloss_stats
        fa = "*" if am == best_auc else " "
        fl = "*" if lm == best_ll else " "
        out.append(f"{s.method:<{width}}  {am:.4f}±{asd:.4f}{fa}     {lm:.4f}±{lsd:.4f}{fl}     {len(s.seeds)}")
    out.append("* best value in column")
    return "\n".join(out) + "\n" + tail


def base_rate_logloss(labels: Sequence[float]) -> float:
    """LogLoss of the constant predictor at the empirical positive rate."""
    y = np.asarray(labels, dtype=np.float64)
    p = min(max(float(y.mean()), PROB_CLAMP), 1.0 - PROB_CLAMP)
    return -(p * math.log(p) + (1 - p) * math.log(1 - p))
