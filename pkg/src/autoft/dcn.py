"""Deep & Cross Network backbone with hand-written backward passes.

All computation is batched: a forward pass over a :class:`~autoft.features.Batch`
of B instances records a :class:`ForwardTape`, and :func:`backward_batch`
turns that tape into gradients of

    mean_b CE(y_b, yhat_b) + lambda * ||W||^2

for every tensor of a :class:`DcnParams` bank. Single-instance helpers
(:func:`forward`, :func:`backward`) wrap the batched code with B = 1.

Parameter tensors are held in a flat, ordered ``dict`` keyed as::

    emb.{i}      (n_i, k)     embedding table of field i
    cross.w.{l}  (d,)         cross layer weight
    cross.b.{l}  (d,)         cross layer bias
    deep.w.{l}   (out, in)    deep layer weight
    deep.b.{l}   (out,)       deep layer bias
    pred.w       (D,)         prediction weight over [x_cross, h_deep]
    pred.b       (1,)         prediction bias
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import checkpoint
from .errors import ConfigError, ShapeError
from .features import Batch, EncodedInstance, embed_batch, pack, scatter_embedding_grad
from .numerics import SeededRng, relu, sigmoid

PROB_CLAMP = 1e-7


class Backbone(str, enum.Enum):
    DCN = "dcn"
    DNN = "dnn"


@dataclass(frozen=True)
class Architecture:
    field_sizes: tuple[int, ...]
    k: int = 16
    cross_layers: int = 3
    deep_layers: tuple[int, ...] = (64, 32)
    backbone: Backbone = Backbone.DCN

    def __post_init__(self):
        object.__setattr__(self, "field_sizes", tuple(int(n) for n in self.field_sizes))
        object.__setattr__(self, "deep_layers", tuple(int(n) for n in self.deep_layers))
        object.__setattr__(self, "backbone", Backbone(self.backbone))
        if self.backbone is Backbone.DNN:
            object.__setattr__(self, "cross_layers", 0)
        if self.k < 1 or not self.field_sizes or min(self.field_sizes) < 1:
            raise ConfigError(f"invalid architecture {self}")

    @property
    def m(self) -> int:
        return len(self.field_sizes)

    @property
    def d(self) -> int:
        return self.m * self.k

    @property
    def deep_out(self) -> int:
        return self.deep_layers[-1] if self.deep_layers else self.d

    @property
    def pred_in(self) -> int:
        cross = self.d if self.backbone is Backbone.DCN else 0
        return cross + self.deep_out

    def to_dict(self) -> dict:
        out = asdict(self)
        out["field_sizes"] = list(self.field_sizes)
        out["deep_layers"] = list(self.deep_layers)
        out["backbone"] = self.backbone.value
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> Architecture:
        return cls(tuple(d["field_sizes"]), int(d["k"]), int(d["cross_layers"]), tuple(d["deep_layers"]), Backbone(d["backbone"]))


def is_weight(name: str) -> bool:
    return name.startswith(("cross.w.", "deep.w.")) or name == "pred.w"


def regularized(name: str, scope: str = "weights") -> bool:
    if scope == "weights":
        return is_weight(name)
    if scope == "all":
        return True
    if scope == "none":
        return False
    raise ConfigError(f"unknown regularization scope {scope!r}")


@dataclass
class DcnParams:
    arch: Architecture
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def embeddings(self) -> list[np.ndarray]:
        return [self.tensors[f"emb.{i}"] for i in range(self.arch.m)]

    def cross(self, l: int) -> tuple[np.ndarray, np.ndarray]:
        return self.tensors[f"cross.w.{l}"], self.tensors[f"cross.b.{l}"]

    def deep(self, l: int) -> tuple[np.ndarray, np.ndarray]:
        return self.tensors[f"deep.w.{l}"], self.tensors[f"deep.b.{l}"]

    def copy(self) -> DcnParams:
        return DcnParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def sq_norm(self, scope: str = "weights") -> float:
        return float(sum(np.sum(v * v) for k, v in self.tensors.items() if regularized(k, scope)))

    def digest(self) -> str:
        return checkpoint.tensor_digest(self.tensors)

    def save(self, path, vocab_digest: str = "", extra: Mapping | None = None) -> None:
        meta = {"kind": "dcn", "arch": self.arch.to_dict(), "vocab_digest": vocab_digest, **(extra or {})}
        checkpoint.save(path, meta, self.tensors)

    @classmethod
    def load(cls, path) -> tuple[DcnParams, dict]:
        meta, tensors = checkpoint.load(path)
        if meta.get("kind") != "dcn":
            raise ConfigError(f"{path} is not a DCN checkpoint (kind={meta.get('kind')!r})")
        return cls(Architecture.from_dict(meta["arch"]), tensors), meta


def tensor_shapes(arch: Architecture) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for i, n in enumerate(arch.field_sizes):
        shapes[f"emb.{i}"] = (n, arch.k)
    for l in range(arch.cross_layers):
        shapes[f"cross.w.{l}"] = (arch.d,)
        shapes[f"cross.b.{l}"] = (arch.d,)
    fan_in = arch.d
    for l, out in enumerate(arch.deep_layers):
        shapes[f"deep.w.{l}"] = (out, fan_in)
        shapes[f"deep.b.{l}"] = (out,)
        fan_in = out
    shapes["pred.w"] = (arch.pred_in,)
    shapes["pred.b"] = (1,)
    return shapes


def init_params(arch: Architecture, rng: SeededRng) -> DcnParams:
    """Embeddings U(+-1/sqrt(k)); ReLU layers He-uniform; cross/prediction LeCun-uniform; zero biases."""
    tensors = {}
    for name, shape in tensor_shapes(arch).items():
        if name.startswith("emb."):
            bound = 1.0 / np.sqrt(arch.k)
        elif name.startswith("deep.w."):
            bound = np.sqrt(6.0 / shape[1])
        elif name.startswith("cross.w.") or name == "pred.w":
            bound = np.sqrt(3.0 / shape[0])
        else:
            tensors[name] = np.zeros(shape)
            continue
        tensors[name] = rng.uniform(shape, -bound, bound)
    return DcnParams(arch, tensors)


def zero_params(arch: Architecture) -> DcnParams:
    return DcnParams(arch, {name: np.zeros(shape) for name, shape in tensor_shapes(arch).items()})


# -- single layers ------------------------------------------------------------

def cross_layer_forward(x0: np.ndarray, xl: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``x0 * <xl, w> + b + xl``; works on (d,) vectors or (B, d) batches."""
    x0, xl, w, b = (np.asarray(a, dtype=np.float64) for a in (x0, xl, w, b))
    if not (x0.shape == xl.shape and x0.shape[-1] == w.shape[-1] == b.shape[-1]):
        raise ShapeError(f"cross layer shapes x0={x0.shape} xl={xl.shape} w={w.shape} b={b.shape}")
    s = xl @ w
    return x0 * np.expand_dims(s, -1) + b + xl


def deep_layer_forward(h: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    h, w, b = (np.asarray(a, dtype=np.float64) for a in (h, w, b))
    if w.ndim != 2 or w.shape[1] != h.shape[-1] or w.shape[0] != b.shape[-1]:
        raise ShapeError(f"deep layer shapes h={h.shape} w={w.shape} b={b.shape}")
    return relu(h @ w.T + b)


def predict(x_cross: np.ndarray | None, h_deep: np.ndarray, w_o: np.ndarray, b_o) -> float:
    parts = [h_deep] if x_cross is None else [x_cross, h_deep]
    z = np.concatenate([np.ravel(p) for p in parts])
    if z.shape != np.shape(w_o):
        raise ShapeError(f"prediction input length {z.size} does not match weight length {np.size(w_o)}")
    return sigmoid(float(z @ w_o) + float(np.ravel(b_o)[0]))


def cross_entropy(y, yhat) -> np.ndarray:
    p = np.clip(np.asarray(yhat, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    return -y * np.log(p) - (1.0 - y) * np.log(1.0 - p)


def loss(y: int, yhat: float, lam: float, params: DcnParams | None = None, scope: str = "weights") -> float:
    reg = lam * params.sq_norm(scope) if (params is not None and lam) else 0.0
    return float(cross_entropy(y, yhat)) + reg


def batch_loss(labels: np.ndarray, yhat: np.ndarray, lam: float, params: DcnParams | None = None, scope: str = "weights") -> float:
    reg = lam * params.sq_norm(scope) if (params is not None and lam) else 0.0
    return float(np.mean(cross_entropy(labels, yhat))) + reg


# -- full network ---------------------------------------------------------------

@dataclass
class ForwardTape:
    batch: Batch
    x0: np.ndarray                  # (B, d)
    xs: list[np.ndarray]            # cross states x^(0..Lc)
    ss: list[np.ndarray]            # <x^(l), w_l>, (B,)
    hs: list[np.ndarray]            # deep states h^(0..Ld)
    zs: list[np.ndarray]            # deep pre-activations
    concat: np.ndarray              # prediction input (B, D)
    logit: np.ndarray               # (B,)
    yhat: np.ndarray                # (B,)


def forward_batch(batch: Batch, params: DcnParams) -> ForwardTape:
    arch = params.arch
    emb = embed_batch(params.embeddings, batch)
    x0 = emb.reshape(len(batch), arch.d)
    xs, ss = [x0], []
    for l in range(arch.cross_layers):
        w, b = params.cross(l)
        s = xs[-1] @ w
        ss.append(s)
        xs.append(x0 * s[:, None] + b + xs[-1])
    hs, zs = [x0], []
    for l in range(len(arch.deep_layers)):
        w, b = params.deep(l)
        z = hs[-1] @ w.T + b
        zs.append(z)
        hs.append(np.maximum(z, 0.0))
    concat = np.concatenate([xs[-1], hs[-1]], axis=1) if arch.backbone is Backbone.DCN else hs[-1]
    logit = concat @ params["pred.w"] + params["pred.b"][0]
    return ForwardTape(batch, x0, xs, ss, hs, zs, concat, logit, sigmoid(logit))


def backward_batch(params: DcnParams, tape: ForwardTape, labels: np.ndarray, lam: float = 0.0, scope: str = "weights") -> dict[str, np.ndarray]:
    arch = params.arch
    B = len(labels)
    grads = params.zeros_like()
    dlogit = (tape.yhat - labels) / B
    grads["pred.w"] = tape.concat.T @ dlogit
    grads["pred.b"][0] = dlogit.sum()
    dconcat = np.outer(dlogit, params["pred.w"])
    if arch.backbone is Backbone.DCN:
        dx, dh = dconcat[:, : arch.d], dconcat[:, arch.d :]
    else:
        dx, dh = np.zeros((B, arch.d)), dconcat

    for l in reversed(range(len(arch.deep_layers))):
        w, _ = params.deep(l)
        dz = dh * (tape.zs[l] > 0)
        grads[f"deep.w.{l}"] = dz.T @ tape.hs[l]
        grads[f"deep.b.{l}"] = dz.sum(axis=0)
        dh = dz @ w
    dx0 = dh

    x0 = tape.x0
    for l in reversed(range(arch.cross_layers)):
        w, _ = params.cross(l)
        # x_{l+1} = x0 * s + b + x_l,  s = <x_l, w>
        ds = np.einsum("bd,bd->b", dx, x0)
        grads[f"cross.w.{l}"] = tape.xs[l].T @ ds
        grads[f"cross.b.{l}"] = dx.sum(axis=0)
        dx0 = dx0 + dx * tape.ss[l][:, None]
        dx = dx + ds[:, None] * w
    dx0 = dx0 + dx

    emb_grads = [grads[f"emb.{i}"] for i in range(arch.m)]
    scatter_embedding_grad(emb_grads, tape.batch, dx0.reshape(B, arch.m, arch.k))

    if lam:
        for name, v in params.tensors.items():
            if regularized(name, scope):
                grads[name] += 2.0 * lam * v
    return grads


def forward(inst: EncodedInstance, params: DcnParams) -> tuple[float, ForwardTape]:
    tape = forward_batch(pack([inst], params.arch.m), params)
    return float(tape.yhat[0]), tape


def backward(inst: EncodedInstance, params: DcnParams, tape: ForwardTape, y: int, lam: float = 0.0, scope: str = "weights") -> dict[str, np.ndarray]:
    return backward_batch(params, tape, np.array([float(y)]), lam, scope)


def predict_dataset(params: DcnParams, batches: Iterable[Batch]) -> np.ndarray:
    return np.concatenate([forward_batch(b, params).yhat for b in batches])
