"""Instance-conditioned routing between a frozen source bank and a trainable target bank.

Three small policy networks emit one binary decision per embedding field,
per cross layer and per deep layer. A decision of 1 routes the instance
through the frozen pre-trained parameters, 0 through the fine-tuned copy.
Each decision is a two-way categorical (index 0 = pretrained, 1 =
finetuned) sampled with the Gumbel-max trick during training; the backward
pass substitutes the Gumbel-softmax relaxation ``Y_0`` for the hard bit
(straight-through), so mixing coefficients in the backward pass are always
the soft values while the forward activations come from the hard route.

Running the forward pass with ``relax=True`` mixes with ``Y_0`` instead of
the hard bit; for that "soft forward" the backward pass is the exact
gradient, which is what the finite-difference tests check.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import checkpoint
from .dcn import Architecture, Backbone, DcnParams, cross_entropy, regularized
from .errors import ConfigError, DataError, ParameterError, ShapeError
from .features import Batch, embed_batch, scatter_embedding_grad
from .numerics import SeededRng, log_softmax, sigmoid, softmax

COMPONENTS = ("embed", "cross", "deep")


class Mode(str, enum.Enum):
    TRAIN = "train"
    INFER = "infer"


@dataclass
class PolicyNetwork:
    """Two fully connected layers producing ``decisions`` logit pairs."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    output_relu: bool = True

    @property
    def decisions(self) -> int:
        return self.W2.shape[0] // 2

    @property
    def in_dim(self) -> int:
        return self.W1.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def copy(self) -> PolicyNetwork:
        return PolicyNetwork(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy(), self.output_relu)


def init_policy(in_dim: int, decisions: int, rng: SeededRng, hidden: int = 64,
                pretrained_bias: float = 0.5, out_scale: float = 0.01, output_relu: bool = True,
                logit_offset: float = 1.0) -> PolicyNetwork:
    """He-uniform hidden layer, near-zero output weights.

    Output biases are ``logit_offset`` plus ``pretrained_bias`` on every
    pretrained logit. The common offset cancels in the softmax but keeps
    both logits of a pair off the kink of an output ReLU.
    """
    bound = np.sqrt(6.0 / in_dim)
    W1 = rng.uniform((hidden, in_dim), -bound, bound)
    W2 = rng.uniform((2 * decisions, hidden), -out_scale, out_scale)
    b2 = np.full(2 * decisions, float(logit_offset))
    b2[0::2] += pretrained_bias
    return PolicyNetwork(W1, np.zeros(hidden), W2, b2, output_relu)


@dataclass
class PolicyOutput:
    hard: np.ndarray                 # (B, n) 1.0 = pretrained
    soft: np.ndarray | None          # (B, n) Y_0, train mode only
    x: np.ndarray
    pre1: np.ndarray
    h1: np.ndarray
    pre2: np.ndarray
    logits: np.ndarray               # (B, n, 2)
    gumbel: np.ndarray | None


def policy_logits(net: PolicyNetwork, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    if x.shape[-1] != net.in_dim:
        raise ShapeError(f"policy input has length {x.shape[-1]}, network expects {net.in_dim}")
    pre1 = x @ net.W1.T + net.b1
    h1 = np.maximum(pre1, 0.0)
    pre2 = h1 @ net.W2.T + net.b2
    out = np.maximum(pre2, 0.0) if net.output_relu else pre2
    return pre1, h1, pre2, out.reshape(len(x), net.decisions, 2)


def policy_forward(net: PolicyNetwork, x: np.ndarray, tau: float, rng: SeededRng | None, mode: Mode | str = Mode.TRAIN) -> PolicyOutput:
    """Route decisions for a batch of policy inputs ``x`` of shape (B, in_dim).

    Train: perturb the log-probabilities of each pair with independent
    standard Gumbel noise, take the argmax as the hard decision and keep the
    temperature-``tau`` softmax of the perturbed pair as the relaxation.
    Infer: argmax of the raw logits, no noise.
    """
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    pre1, h1, pre2, logits = policy_logits(net, x)
    if Mode(mode) is Mode.INFER:
        hard = (logits[..., 0] >= logits[..., 1]).astype(np.float64)
        return PolicyOutput(hard, None, x, pre1, h1, pre2, logits, None)
    g = rng.gumbel(logits.shape)
    pert = log_softmax(logits, axis=-1) + g
    hard = (pert[..., 0] >= pert[..., 1]).astype(np.float64)
    soft = softmax(pert, tau, axis=-1)[..., 0]
    return PolicyOutput(hard, soft, x, pre1, h1, pre2, logits, g)


def policy_backward(net: PolicyNetwork, out: PolicyOutput, d_soft: np.ndarray, tau: float) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of the policy parameters and of its input, given d(loss)/d(Y_0)."""
    y0 = out.soft
    dpair = d_soft * y0 * (1.0 - y0) / tau       # dY_0/dz_0 = -dY_0/dz_1
    dpre2 = np.stack([dpair, -dpair], axis=-1).reshape(len(y0), -1)
    if net.output_relu:
        dpre2 = dpre2 * (out.pre2 > 0)
    grads = {"W2": dpre2.T @ out.h1, "b2": dpre2.sum(axis=0)}
    dpre1 = (dpre2 @ net.W2) * (out.pre1 > 0)
    grads["W1"] = dpre1.T @ out.x
    grads["b1"] = dpre1.sum(axis=0)
    return grads, dpre1 @ net.W1


# -- model ---------------------------------------------------------------------

@dataclass
class AutoftModel:
    source: DcnParams
    target: DcnParams
    policies: dict[str, PolicyNetwork] = field(default_factory=dict)

    @property
    def arch(self) -> Architecture:
        return self.target.arch

    @property
    def enabled(self) -> tuple[str, ...]:
        return tuple(c for c in COMPONENTS if c in self.policies)

    def trainable(self) -> dict[str, np.ndarray]:
        """Views of every trainable tensor, keyed as in the gradient dict."""
        out = {f"target/{k}": v for k, v in self.target.tensors.items()}
        for comp, net in self.policies.items():
            out.update({f"policy.{comp}/{k}": v for k, v in net.tensors().items()})
        return out

    def all_tensors(self) -> dict[str, np.ndarray]:
        out = {f"source/{k}": v for k, v in self.source.tensors.items()}
        out.update(self.trainable())
        return out

    def source_digest(self) -> str:
        return self.source.digest()

    def save(self, path, vocab_digest: str = "", extra: Mapping | None = None) -> None:
        meta = {
            "kind": "autoft",
            "arch": self.arch.to_dict(),
            "vocab_digest": vocab_digest,
            "policies": {c: {"output_relu": n.output_relu} for c, n in self.policies.items()},
            **(extra or {}),
        }
        checkpoint.save(path, meta, self.all_tensors())

    @classmethod
    def load(cls, path) -> tuple[AutoftModel, dict]:
        meta, tensors = checkpoint.load(path)
        if meta.get("kind") != "autoft":
            raise ConfigError(f"{path} is not an AutoFT checkpoint (kind={meta.get('kind')!r})")
        arch = Architecture.from_dict(meta["arch"])
        bank = lambda prefix: DcnParams(arch, {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
        policies = {}
        for comp in sorted(meta["policies"], key=COMPONENTS.index):
            info = meta["policies"][comp]
            t = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith(f"policy.{comp}/")}
            policies[comp] = PolicyNetwork(t["W1"], t["b1"], t["W2"], t["b2"], bool(info["output_relu"]))
        return cls(bank("source/"), bank("target/"), policies), meta


def decision_counts(arch: Architecture) -> dict[str, int]:
    return {"embed": arch.m, "cross": arch.cross_layers, "deep": len(arch.deep_layers)}


def build_model(pretrained: DcnParams, enabled: Iterable[str], rng: SeededRng, hidden: int = 64,
                pretrained_bias: float = 0.5, output_relu: bool = True, logit_offset: float = 1.0) -> AutoftModel:
    """Frozen source bank = ``pretrained``; target bank is a copy of it."""
    arch = pretrained.arch
    counts = decision_counts(arch)
    policies = {}
    for comp in COMPONENTS:
        if comp not in set(enabled):
            continue
        if comp not in counts:
            raise ConfigError(f"unknown policy component {comp!r}")
        if counts[comp] == 0:
            continue
        policies[comp] = init_policy(arch.d, counts[comp], rng.child(COMPONENTS.index(comp)), hidden,
                                     pretrained_bias, output_relu=output_relu, logit_offset=logit_offset)
    return AutoftModel(pretrained.copy(), pretrained.copy(), policies)


# -- routed layers ---------------------------------------------------------------

def mix_field_embeddings(p_e: np.ndarray, src: Sequence[np.ndarray], tgt: Sequence[np.ndarray], batch: Batch) -> np.ndarray:
    """Per field, ``p * source lookup + (1 - p) * target lookup``; returns (B, m*k)."""
    es, et = embed_batch(src, batch), embed_batch(tgt, batch)
    p = np.asarray(p_e, dtype=np.float64).reshape(len(batch), -1)
    if p.shape[1] != es.shape[1]:
        raise ShapeError(f"{p.shape[1]} field decisions for {es.shape[1]} fields")
    return (p[:, :, None] * es + (1.0 - p[:, :, None]) * et).reshape(len(batch), -1)


def routed_cross_forward(x0: np.ndarray, xl: np.ndarray, p, src: tuple[np.ndarray, np.ndarray], tgt: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    x0, xl = np.asarray(x0, dtype=np.float64), np.asarray(xl, dtype=np.float64)
    if x0.shape != xl.shape or x0.shape[-1] != src[0].shape[0] or src[0].shape != tgt[0].shape:
        raise ShapeError(f"routed cross shapes x0={x0.shape} xl={xl.shape} w={src[0].shape}/{tgt[0].shape}")
    p = np.expand_dims(np.asarray(p, dtype=np.float64), -1) if x0.ndim > 1 else float(p)
    fs = x0 * np.expand_dims(xl @ src[0], -1) + src[1] + xl
    ft = x0 * np.expand_dims(xl @ tgt[0], -1) + tgt[1] + xl
    return p * fs + (1.0 - p) * ft


def routed_deep_forward(h: np.ndarray, p, src: tuple[np.ndarray, np.ndarray], tgt: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if src[0].shape != tgt[0].shape or src[0].shape[1] != h.shape[-1]:
        raise ShapeError(f"routed deep shapes h={h.shape} w={src[0].shape}/{tgt[0].shape}")
    p = np.expand_dims(np.asarray(p, dtype=np.float64), -1) if h.ndim > 1 else float(p)
    fs = np.maximum(h @ src[0].T + src[1], 0.0)
    ft = np.maximum(h @ tgt[0].T + tgt[1], 0.0)
    return p * fs + (1.0 - p) * ft


# -- full routed network -----------------------------------------------------------

@dataclass
class RouteDecision:
    p_e: np.ndarray
    p_c: np.ndarray
    p_d: np.ndarray
    soft: dict[str, np.ndarray] = field(default_factory=dict)

    def bits(self, component: str) -> np.ndarray:
        return {"embed": self.p_e, "cross": self.p_c, "deep": self.p_d}[component]


@dataclass
class AutoftTape:
    batch: Batch
    tau: float
    es: np.ndarray
    et: np.ndarray
    x0: np.ndarray
    mix: dict[str, np.ndarray]          # forward mixing coefficients
    back: dict[str, np.ndarray]         # backward mixing coefficients
    policy_out: dict[str, PolicyOutput]
    xs: list[np.ndarray]
    s_src: list[np.ndarray]
    s_tgt: list[np.ndarray]
    hs: list[np.ndarray]
    z_src: list[np.ndarray]
    z_tgt: list[np.ndarray]
    concat: np.ndarray
    logit: np.ndarray
    yhat: np.ndarray


def _decide(model: AutoftModel, comp: str, x: np.ndarray, n: int, tau: float, rng: SeededRng | None,
            mode: Mode, relax: bool, forced: Mapping[str, np.ndarray] | None, outs: dict):
    B = len(x)
    if forced is not None and comp in forced:
        a = np.broadcast_to(np.asarray(forced[comp], dtype=np.float64), (B, n)).copy()
        return a, a, a
    net = model.policies.get(comp)
    if net is None or n == 0:
        z = np.zeros((B, n))
        return z, z, z
    out = policy_forward(net, x, tau, rng.child(COMPONENTS.index(comp)) if rng is not None else None, mode)
    outs[comp] = out
    if out.soft is None:
        return out.hard, out.hard, out.hard
    fwd = out.soft if relax else out.hard
    return out.hard, fwd, out.soft


def autoft_forward_batch(model: AutoftModel, batch: Batch, tau: float = 1.0, rng: SeededRng | None = None,
                         mode: Mode | str = Mode.TRAIN, relax: bool = False,
                         forced: Mapping[str, np.ndarray] | None = None) -> tuple[AutoftTape, RouteDecision]:
    """Routed forward pass.

    ``forced`` maps a component name to fixed decisions (broadcast to (B, n))
    that replace its policy. Components without an enabled policy are forced
    to 0, i.e. always fine-tuned.
    """
    mode = Mode(mode)
    if mode is Mode.TRAIN and rng is None and any(c not in (forced or {}) for c in model.policies):
        raise ParameterError("train mode needs an rng for Gumbel sampling")
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    src, tgt, arch = model.source, model.target, model.arch
    B, m, k = len(batch), arch.m, arch.k
    counts = decision_counts(arch)
    outs: dict[str, PolicyOutput] = {}
    hard, mix, back = {}, {}, {}

    es, et = embed_batch(src.embeddings, batch), embed_batch(tgt.embeddings, batch)
    x_src = es.reshape(B, -1)
    hard["embed"], mix["embed"], back["embed"] = _decide(model, "embed", x_src, m, tau, rng, mode, relax, forced, outs)
    a = mix["embed"][:, :, None]
    x0 = (a * es + (1.0 - a) * et).reshape(B, -1)
    for comp in ("cross", "deep"):
        hard[comp], mix[comp], back[comp] = _decide(model, comp, x0, counts[comp], tau, rng, mode, relax, forced, outs)

    xs, s_src, s_tgt = [x0], [], []
    for l in range(arch.cross_layers):
        (ws, bs), (wt, bt) = src.cross(l), tgt.cross(l)
        x = xs[-1]
        ss, st = x @ ws, x @ wt
        s_src.append(ss)
        s_tgt.append(st)
        a = mix["cross"][:, l][:, None]
        xs.append(a * (x0 * ss[:, None] + bs) + (1.0 - a) * (x0 * st[:, None] + bt) + x)
    hs, z_src, z_tgt = [x0], [], []
    for l in range(len(arch.deep_layers)):
        (ws, bs), (wt, bt) = src.deep(l), tgt.deep(l)
        zs, zt = hs[-1] @ ws.T + bs, hs[-1] @ wt.T + bt
        z_src.append(zs)
        z_tgt.append(zt)
        a = mix["deep"][:, l][:, None]
        hs.append(a * np.maximum(zs, 0.0) + (1.0 - a) * np.maximum(zt, 0.0))
    concat = np.concatenate([xs[-1], hs[-1]], axis=1) if arch.backbone is Backbone.DCN else hs[-1]
    logit = concat @ tgt["pred.w"] + tgt["pred.b"][0]
    tape = AutoftTape(batch, tau, es, et, x0, mix, back, outs, xs, s_src, s_tgt, hs, z_src, z_tgt,
                      concat, logit, sigmoid(logit))
    soft = {c: o.soft for c, o in outs.items() if o.soft is not None}
    return tape, RouteDecision(hard["embed"], hard["cross"], hard["deep"], soft)


def straight_through_backward(model: AutoftModel, tape: AutoftTape, labels: np.ndarray, lam: float = 0.0,
                              scope: str = "weights", reg_policies: bool = False) -> dict[str, np.ndarray]:
    """Gradients for the target bank and the enabled policies.

    Keys follow :meth:`AutoftModel.trainable`. The source bank is frozen and
    receives nothing.
    """
    src, tgt, arch = model.source, model.target, model.arch
    B = len(labels)
    g = {k: np.zeros_like(v) for k, v in tgt.tensors.items()}
    dmix = {}

    dlogit = (tape.yhat - labels) / B
    g["pred.w"] = tape.concat.T @ dlogit
    g["pred.b"][0] = dlogit.sum()
    dconcat = np.outer(dlogit, tgt["pred.w"])
    if arch.backbone is Backbone.DCN:
        dx, dh = dconcat[:, : arch.d], dconcat[:, arch.d :]
    else:
        dx, dh = np.zeros((B, arch.d)), dconcat

    dmix["deep"] = np.zeros((B, len(arch.deep_layers)))
    for l in reversed(range(len(arch.deep_layers))):
        (ws, _), (wt, _) = src.deep(l), tgt.deep(l)
        c = tape.back["deep"][:, l][:, None]
        zs, zt = tape.z_src[l], tape.z_tgt[l]
        dmix["deep"][:, l] = np.sum(dh * (np.maximum(zs, 0.0) - np.maximum(zt, 0.0)), axis=1)
        dzt = (1.0 - c) * dh * (zt > 0)
        dzs = c * dh * (zs > 0)
        g[f"deep.w.{l}"] = dzt.T @ tape.hs[l]
        g[f"deep.b.{l}"] = dzt.sum(axis=0)
        dh = dzt @ wt + dzs @ ws
    dx0 = dh

    x0 = tape.x0
    dmix["cross"] = np.zeros((B, arch.cross_layers))
    for l in reversed(range(arch.cross_layers)):
        (ws, bs), (wt, bt) = src.cross(l), tgt.cross(l)
        c = tape.back["cross"][:, l]
        ss, st = tape.s_src[l], tape.s_tgt[l]
        dmix["cross"][:, l] = np.sum(dx * (x0 * (ss - st)[:, None] + (bs - bt)), axis=1)
        dxx0 = np.einsum("bd,bd->b", dx, x0)
        ds_s, ds_t = c * dxx0, (1.0 - c) * dxx0
        g[f"cross.w.{l}"] = tape.xs[l].T @ ds_t
        g[f"cross.b.{l}"] = ((1.0 - c)[:, None] * dx).sum(axis=0)
        dx0 = dx0 + dx * (c * ss + (1.0 - c) * st)[:, None]
        dx = dx + ds_s[:, None] * ws + ds_t[:, None] * wt
    dx0 = dx0 + dx

    out = {}
    for comp in ("cross", "deep"):
        if comp in tape.policy_out:
            net = model.policies[comp]
            pg, dinput = policy_backward(net, tape.policy_out[comp], dmix[comp], tape.tau)
            out.update({f"policy.{comp}/{k}": v for k, v in pg.items()})
            dx0 = dx0 + dinput

    dfield = dx0.reshape(B, arch.m, arch.k)
    ce = tape.back["embed"][:, :, None]
    dmix["embed"] = np.sum(dfield * (tape.es - tape.et), axis=2)
    emb_grads = [g[f"emb.{i}"] for i in range(arch.m)]
    scatter_embedding_grad(emb_grads, tape.batch, (1.0 - ce) * dfield)
    if "embed" in tape.policy_out:
        # policy input is the frozen source embedding: its input gradient is dropped
        pg, _ = policy_backward(model.policies["embed"], tape.policy_out["embed"], dmix["embed"], tape.tau)
        out.update({f"policy.embed/{k}": v for k, v in pg.items()})

    if lam:
        for name, v in tgt.tensors.items():
            if regularized(name, scope):
                g[name] += 2.0 * lam * v
        if reg_policies:
            for comp, net in model.policies.items():
                for k in ("W1", "W2"):
                    key = f"policy.{comp}/{k}"
                    if key in out:
                        out[key] += 2.0 * lam * getattr(net, k)
    out.update({f"target/{k}": v for k, v in g.items()})
    return out


def autoft_loss(model: AutoftModel, labels: np.ndarray, yhat: np.ndarray, lam: float = 0.0,
                scope: str = "weights", reg_policies: bool = False) -> float:
    reg = 0.0
    if lam:
        reg = model.target.sq_norm(scope)
        if reg_policies:
            reg += sum(float(np.sum(n.W1 ** 2) + np.sum(n.W2 ** 2)) for n in model.policies.values())
    return float(np.mean(cross_entropy(labels, yhat))) + lam * reg


# -- route dumps -------------------------------------------------------------------

ROUTE_COLUMNS = ("instance_id", "p_e", "p_c", "p_d")


def _bits(row: np.ndarray) -> str:
    return "".join("1" if v >= 0.5 else "0" for v in row)


def write_route_dump(path: str | Path, routes: Iterable[RouteDecision], start_id: int = 0) -> int:
    """One row per instance: id and the p_e / p_c / p_d bit strings (1 = pretrained)."""
    n = start_id
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROUTE_COLUMNS)
        for r in routes:
            for b in range(len(r.p_e)):
                w.writerow([n, _bits(r.p_e[b]), _bits(r.p_c[b]), _bits(r.p_d[b])])
                n += 1
    return n - start_id


def read_route_dump(path: str | Path) -> dict[str, np.ndarray]:
    """Parse a route dump into (N, units) 0/1 arrays per component."""
    cols = {"p_e": [], "p_c": [], "p_d": []}
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read route dump {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != ROUTE_COLUMNS:
            raise DataError(f"{path} line 1: expected header {','.join(ROUTE_COLUMNS)}")
        widths = None
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise DataError(f"{path} line {lineno}: expected 4 cells, got {len(row)}")
            cells = row[1:]
            if any(set(c) - {"0", "1"} for c in cells):
                raise DataError(f"{path} line {lineno}: routing bits must be 0/1")
            w_ = tuple(len(c) for c in cells)
            if widths is None:
                widths = w_
            elif w_ != widths:
                raise DataError(f"{path} line {lineno}: bit-string lengths {w_} differ from {widths}")
            for key, c in zip(cols, cells):
                cols[key].append([int(ch) for ch in c])
    names = {"p_e": "embed", "p_c": "cross", "p_d": "deep"}
    out = {}
    for key, rows in cols.items():
        width = widths[list(cols).index(key)] if widths else 0
        out[names[key]] = np.array(rows, dtype=np.int64).reshape(len(rows), width)
    return out
