"""Adam, minibatch loops and the pretrain / fine-tune / AutoFT / target-only stages.

Stage trainability:

=================  ==========================================================
pretrain           fresh bank, everything trainable
target_only        fresh bank, everything trainable, target data only
finetune           bank copied from the checkpoint, everything trainable
autoft, ablation_* source bank frozen; target bank and enabled policies train
=================  ==========================================================

Randomness is keyed off ``RunConfig.seed``: the epoch shuffle uses the child
stream ``(seed, 1, epoch)``, Gumbel noise ``(seed, 2, epoch, batch)``,
parameter init ``(seed, 0)`` and policy init ``(seed, 3)``.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Iterator, Mapping

import numpy as np

from .dcn import Architecture, Backbone, DcnParams, backward_batch, batch_loss, forward_batch, init_params
from .errors import ConfigError, VocabMismatchError
from .evaluation import auc, logloss
from .features import Batch, DomainDataset
from .numerics import SeededRng
from .policy import (AutoftModel, Mode, RouteDecision, autoft_forward_batch, autoft_loss, build_model,
                     straight_through_backward)

log = logging.getLogger(__name__)


class Stage(str, enum.Enum):
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"
    AUTOFT = "autoft"
    TARGET_ONLY = "target_only"
    ABLATION_EMBEDDING = "ablation_embedding"
    ABLATION_CROSS = "ablation_cross"
    ABLATION_DEEP = "ablation_deep"
    ABLATION_CROSS_DEEP = "ablation_cross_deep"


POLICIES_BY_STAGE = {
    Stage.AUTOFT: ("embed", "cross", "deep"),
    Stage.ABLATION_EMBEDDING: ("embed",),
    Stage.ABLATION_CROSS: ("cross",),
    Stage.ABLATION_DEEP: ("deep",),
    Stage.ABLATION_CROSS_DEEP: ("cross", "deep"),
}

METHOD_SUFFIX = {
    Stage.FINETUNE: "Fine-Tune",
    Stage.AUTOFT: "AutoFT",
    Stage.ABLATION_EMBEDDING: "Embedding",
    Stage.ABLATION_CROSS: "Cross",
    Stage.ABLATION_DEEP: "Deep",
    Stage.ABLATION_CROSS_DEEP: "Cross & Deep",
}


@dataclass
class RunConfig:
    stage: Stage = Stage.PRETRAIN
    seed: int = 0
    learning_rate: float = 1e-3
    policy_learning_rate: float = 1e-2
    batch_size: int = 256
    epochs: int = 10
    lam: float = 0.0
    reg_scope: str = "weights"
    reg_policies: bool = False
    patience: int = 3
    min_delta: float = 1e-4
    tau_start: float = 5.0
    tau_end: float = 0.5
    k: int = 16
    cross_layers: int = 3
    deep_layers: tuple[int, ...] = (64, 32)
    backbone: Backbone = Backbone.DCN
    policy_hidden: int = 64
    pretrained_bias: float = 0.5
    policy_output_relu: bool = True
    policy_logit_offset: float = 1.0
    pretrain_data: str = "all"

    def __post_init__(self):
        self.stage = Stage(self.stage)
        self.backbone = Backbone(self.backbone)
        self.deep_layers = tuple(int(v) for v in self.deep_layers)
        if self.pretrain_data not in ("all", "source"):
            raise ConfigError(f"pretrain_data must be 'all' or 'source', got {self.pretrain_data!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size >= 1, epochs >= 0 and patience >= 1 required")
        if self.learning_rate <= 0 or self.tau_start <= 0 or self.tau_end <= 0 or self.lam < 0:
            raise ConfigError("learning rates and temperatures must be positive, lambda nonnegative")

    def architecture(self, field_sizes) -> Architecture:
        return Architecture(tuple(field_sizes), self.k, self.cross_layers, self.deep_layers, self.backbone)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage"] = self.stage.value
        d["backbone"] = self.backbone.value
        d["deep_layers"] = list(self.deep_layers)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**dict(d))


def tau_at(epoch: int, epochs: int, start: float, end: float) -> float:
    """Exponential decay from ``start`` (epoch 0) to ``end`` (last epoch)."""
    if epochs <= 1:
        return start
    return start * (end / start) ** (epoch / (epochs - 1))


# -- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **kw) -> AdamState:
        return cls({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()}, **kw)


def adam_step(state: AdamState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              lr: float | Callable[[str], float]) -> None:
    """Bias-corrected Adam update, in place, over the keys of ``state``."""
    if set(state.m) != set(params):
        raise ConfigError("Adam state does not mirror the trainable parameter set")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr(name) if callable(lr) else lr
        p -= step * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- early stopping -------------------------------------------------------------

@dataclass
class StopDecision:
    stop: bool
    best_epoch: int          # 1-based, 0 if history is empty


def early_stop(history: list[float], patience: int = 3, min_delta: float = 1e-4) -> StopDecision:
    """Stop once ``patience`` consecutive epochs fail to beat the best AUC by more than ``min_delta``."""
    if patience < 1:
        raise ConfigError("patience must be >= 1")
    best, best_epoch, stale = -math.inf, 0, 0
    for epoch, v in enumerate(history, start=1):
        if v > best + min_delta:
            best, best_epoch, stale = v, epoch, 0
        else:
            stale += 1
    return StopDecision(stale >= patience, best_epoch)


# -- loops ------------------------------------------------------------------------

def iter_batches(n: int, batch_size: int, order: np.ndarray | None = None) -> Iterator[np.ndarray]:
    order = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


@dataclass
class RunResult:
    model: DcnParams | AutoftModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


class _Learner:
    """What a training loop needs from a model family."""

    def params(self) -> dict[str, np.ndarray]: ...
    def lr(self, name: str) -> float: ...
    def loss_and_grads(self, batch: Batch, tau: float, rng: SeededRng) -> tuple[float, dict]: ...
    def predict(self, batch: Batch) -> np.ndarray: ...
    def snapshot(self): ...
    def restore(self, snap) -> None: ...


class _DcnLearner(_Learner):
    def __init__(self, params: DcnParams, cfg: RunConfig):
        self.model, self.cfg = params, cfg

    def params(self):
        return self.model.tensors

    def lr(self, name):
        return self.cfg.learning_rate

    def loss_and_grads(self, batch, tau, rng):
        tape = forward_batch(batch, self.model)
        loss = batch_loss(batch.labels, tape.yhat, self.cfg.lam, self.model, self.cfg.reg_scope)
        return loss, backward_batch(self.model, tape, batch.labels, self.cfg.lam, self.cfg.reg_scope)

    def predict(self, batch):
        return forward_batch(batch, self.model).yhat

    def snapshot(self):
        return {k: v.copy() for k, v in self.model.tensors.items()}

    def restore(self, snap):
        for k, v in snap.items():
            self.model.tensors[k][...] = v


class _AutoftLearner(_Learner):
    def __init__(self, model: AutoftModel, cfg: RunConfig):
        self.model, self.cfg = model, cfg
        self._params = model.trainable()

    def params(self):
        return self._params

    def lr(self, name):
        return self.cfg.policy_learning_rate if name.startswith("policy.") else self.cfg.learning_rate

    def loss_and_grads(self, batch, tau, rng):
        tape, _ = autoft_forward_batch(self.model, batch, tau, rng, Mode.TRAIN)
        c = self.cfg
        loss = autoft_loss(self.model, batch.labels, tape.yhat, c.lam, c.reg_scope, c.reg_policies)
        return loss, straight_through_backward(self.model, tape, batch.labels, c.lam, c.reg_scope, c.reg_policies)

    def predict(self, batch):
        tape, _ = autoft_forward_batch(self.model, batch, 1.0, None, Mode.INFER)
        return tape.yhat

    def snapshot(self):
        return {k: v.copy() for k, v in self._params.items()}

    def restore(self, snap):
        for k, v in snap.items():
            self._params[k][...] = v


def predict_dataset(learner: _Learner, data: DomainDataset, batch_size: int = 4096) -> np.ndarray:
    return np.concatenate([learner.predict(data.batch(rows)) for rows in iter_batches(len(data), batch_size)])


def _fit(learner: _Learner, train: DomainDataset, valid: DomainDataset, cfg: RunConfig,
         on_step: Callable[[int, int, float], None] | None = None) -> tuple[list[dict], int]:
    if len(train) == 0:
        raise ConfigError("training set is empty")
    params = learner.params()
    state = AdamState.for_params(params)
    root = SeededRng(cfg.seed)
    history, val_aucs, best_snap, best_epoch = [], [], None, 0
    for epoch in range(cfg.epochs):
        tau = tau_at(epoch, cfg.epochs, cfg.tau_start, cfg.tau_end)
        order = root.child(1, epoch).permutation(len(train))
        losses = []
        for b, rows in enumerate(iter_batches(len(train), cfg.batch_size, order)):
            loss, grads = learner.loss_and_grads(train.batch(rows), tau, root.child(2, epoch, b))
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch + 1}, batch {b}")
            adam_step(state, params, grads, learner.lr)
            losses.append(loss)
            if on_step is not None:
                on_step(epoch, b, loss)
        scores = predict_dataset(learner, valid)
        rec = {"epoch": epoch + 1, "split": "valid", "auc": auc(valid.labels, scores),
               "logloss": logloss(valid.labels, scores), "tau": tau, "train_loss": float(np.mean(losses))}
        history.append(rec)
        val_aucs.append(rec["auc"])
        log.info("epoch %d valid auc %.4f logloss %.4f tau %.3f", epoch + 1, rec["auc"], rec["logloss"], tau)
        decision = early_stop(val_aucs, cfg.patience, cfg.min_delta)
        if decision.best_epoch == epoch + 1:
            best_snap, best_epoch = learner.snapshot(), epoch + 1
        if decision.stop:
            break
    if best_snap is not None:
        learner.restore(best_snap)
    return history, best_epoch


def _check_vocab(expected: str | None, data: DomainDataset) -> None:
    if expected and data.vocab_digest and expected != data.vocab_digest:
        raise VocabMismatchError("checkpoint vocabulary does not match the dataset vocabulary")


def _check_arch(arch: Architecture, data: DomainDataset) -> None:
    if not data.instances:
        return
    m = len(data.instances[0].indices)
    if m != arch.m:
        raise VocabMismatchError(f"checkpoint has {arch.m} fields, data has {m}")
    for i, (idx, _) in enumerate(data.packed.fields):
        if idx.size and idx.max() >= arch.field_sizes[i]:
            raise VocabMismatchError(f"field {i} index {int(idx.max())} exceeds checkpoint vocabulary size {arch.field_sizes[i]}")


def run_pretrain(train: DomainDataset, valid: DomainDataset, field_sizes, cfg: RunConfig,
                 on_step=None) -> RunResult:
    """Fresh bank trained on ``train``; also used for target-only runs."""
    params = init_params(cfg.architecture(field_sizes), SeededRng(cfg.seed).child(0))
    history, best = _fit(_DcnLearner(params, cfg), train, valid, cfg, on_step)
    return RunResult(params, history, best)


def run_finetune(pretrained: DcnParams, train: DomainDataset, valid: DomainDataset, cfg: RunConfig,
                 vocab_digest: str | None = None, on_step=None) -> RunResult:
    _check_vocab(vocab_digest, train)
    _check_arch(pretrained.arch, train)
    params = pretrained.copy()
    history, best = _fit(_DcnLearner(params, cfg), train, valid, cfg, on_step)
    return RunResult(params, history, best)


def run_autoft(pretrained: DcnParams, train: DomainDataset, valid: DomainDataset, cfg: RunConfig,
               vocab_digest: str | None = None, on_step=None) -> RunResult:
    if cfg.stage not in POLICIES_BY_STAGE:
        raise ConfigError(f"stage {cfg.stage.value} is not an AutoFT stage")
    _check_vocab(vocab_digest, train)
    _check_arch(pretrained.arch, train)
    model = build_model(pretrained, POLICIES_BY_STAGE[cfg.stage], SeededRng(cfg.seed).child(3),
                        cfg.policy_hidden, cfg.pretrained_bias, cfg.policy_output_relu, cfg.policy_logit_offset)
    history, best = _fit(_AutoftLearner(model, cfg), train, valid, cfg, on_step)
    return RunResult(model, history, best)


def evaluate_model(model: DcnParams | AutoftModel, data: DomainDataset, batch_size: int = 4096) -> tuple[dict, list[RouteDecision]]:
    """Test metrics plus, for AutoFT models, the inference-mode routes."""
    routes = []
    scores = []
    for rows in iter_batches(len(data), batch_size):
        batch = data.batch(rows)
        if isinstance(model, AutoftModel):
            tape, route = autoft_forward_batch(model, batch, 1.0, None, Mode.INFER)
            routes.append(route)
            scores.append(tape.yhat)
        else:
            scores.append(forward_batch(batch, model).yhat)
    s = np.concatenate(scores)
    return {"auc": auc(data.labels, s), "logloss": logloss(data.labels, s), "n": len(data)}, routes


def method_name(cfg: RunConfig) -> str:
    origin = "All" if cfg.pretrain_data == "all" else "Source"
    if cfg.stage is Stage.PRETRAIN:
        name = "All" if cfg.pretrain_data == "all" else "Source-only"
    elif cfg.stage is Stage.TARGET_ONLY:
        name = "Target-only"
    else:
        name = f"{origin}-{METHOD_SUFFIX[cfg.stage]}"
    return f"DNN {name}" if cfg.backbone is Backbone.DNN else name
