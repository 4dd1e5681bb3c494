"""Paired-seed transfer benchmark on the synthetic two-domain data.

For each seed one Source-only model is pretrained and then reused by
Fine-Tune, AutoFT and the ablation stages, so every method of a seed starts
from the same checkpoint. Target-only trains from scratch on the target
domain. All scores are target-domain test AUC.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import synth
from .evaluation import RoutingReport, routing_fractions
from .pipeline import Datasets, prepare
from .policy import COMPONENTS
from .training import RunConfig, Stage, evaluate_model, run_autoft, run_finetune, run_pretrain

BENCHMARK_SEEDS = (0, 1, 2, 3, 4)
BENCHMARK_RUN = {"epochs": 10, "lam": 1e-4, "reg_scope": "all", "pretrain_data": "source", "policy_learning_rate": 1e-2}
DEFAULT_STAGES = (Stage.TARGET_ONLY, Stage.FINETUNE, Stage.AUTOFT)
ABLATIONS = (Stage.ABLATION_EMBEDDING, Stage.ABLATION_CROSS, Stage.ABLATION_DEEP, Stage.ABLATION_CROSS_DEEP)


@dataclass
class SeedOutcome:
    seed: int
    auc: dict[str, float] = field(default_factory=dict)
    routes: RoutingReport | None = None


def benchmark_data(spec: synth.SynthSpec | None = None) -> Datasets:
    spec = spec or synth.SynthSpec()
    return prepare(synth.generate(spec).rows, synth.schema())


def run_seed(ds: Datasets, seed: int, stages: Iterable[Stage] = DEFAULT_STAGES, **overrides) -> SeedOutcome:
    base = RunConfig(seed=seed, **{**BENCHMARK_RUN, **overrides})
    tr, va, te = ds[("target", "train")], ds[("target", "valid")], ds[("target", "test")]
    sizes = ds.vocab.sizes
    if base.pretrain_data == "all":
        pre_train, pre_valid = ds.all("train"), ds.all("valid")
    else:
        pre_train, pre_valid = ds[("source", "train")], ds[("source", "valid")]
    pre = run_pretrain(pre_train, pre_valid, sizes, replace(base, stage=Stage.PRETRAIN)).model
    out = SeedOutcome(seed)
    out.auc[Stage.PRETRAIN.value] = evaluate_model(pre, te)[0]["auc"]
    for stage in stages:
        cfg = replace(base, stage=stage)
        if stage is Stage.TARGET_ONLY:
            model = run_pretrain(tr, va, sizes, cfg).model
        elif stage is Stage.FINETUNE:
            model = run_finetune(pre, tr, va, cfg).model
        else:
            model = run_autoft(pre, tr, va, cfg).model
        metrics, routes = evaluate_model(model, te)
        out.auc[stage.value] = metrics["auc"]
        if stage is Stage.AUTOFT:
            bits = {c: np.concatenate([r.bits(c) for r in routes]) for c in COMPONENTS}
            out.routes = routing_fractions(bits)
    return out


def run_benchmark(seeds: Sequence[int] = BENCHMARK_SEEDS, stages: Iterable[Stage] = DEFAULT_STAGES,
                  ds: Datasets | None = None, **overrides) -> list[SeedOutcome]:
    ds = ds or benchmark_data()
    stages = tuple(stages)
    return [run_seed(ds, s, stages, **overrides) for s in seeds]


def mean_auc(outcomes: Sequence[SeedOutcome], stage: Stage | str) -> float:
    key = Stage(stage).value
    return float(np.mean([o.auc[key] for o in outcomes]))


def wins(outcomes: Sequence[SeedOutcome], a: Stage | str, b: Stage | str) -> int:
    ka, kb = Stage(a).value, Stage(b).value
    return sum(o.auc[ka] > o.auc[kb] for o in outcomes)
