"""Finite-difference oracles shared by the unit and acceptance tests."""

from __future__ import annotations

import numpy as np

from autoft.dcn import Architecture, backward_batch, batch_loss, forward_batch, init_params
from autoft.features import EncodedInstance, pack
from autoft.numerics import SeededRng, finite_difference_check
from autoft.policy import COMPONENTS, Mode, autoft_forward_batch, autoft_loss, build_model, straight_through_backward


def random_batch(field_sizes, n, rng: SeededRng, multi_hot=(1,)):
    insts = []
    for _ in range(n):
        idx = []
        for i, size in enumerate(field_sizes):
            width = 1 + int(rng.integers(3)) if i in multi_hot else 1
            idx.append(tuple(int(v) for v in rng.integers(size, width)))
        insts.append(EncodedInstance(tuple(idx), int(rng.integers(2))))
    return pack(insts)


def _jitter_biases(tensors, rng: SeededRng, scale=0.1):
    for name, t in tensors.items():
        if ".b." in name or name == "pred.b":
            t[...] = rng.normal(t.shape, scale)


def dcn_fd_errors(arch: Architecture, seed: int, lam=0.01, scope="all", n=6, h=1e-5) -> dict[str, float]:
    """Max relative FD error of the batched DCN backward, per parameter tensor."""
    rng = SeededRng(seed, 77)
    params = init_params(arch, SeededRng(seed).child(0))
    _jitter_biases(params.tensors, rng.child(1))
    batch = random_batch(arch.field_sizes, n, rng.child(2))
    tape = forward_batch(batch, params)
    grads = backward_batch(params, tape, batch.labels, lam, scope)
    errs = {}
    for name, t in params.tensors.items():
        orig = t.copy()

        def f(x, t=t, orig=orig):
            t[...] = x.reshape(orig.shape)
            v = batch_loss(batch.labels, forward_batch(batch, params).yhat, lam, params, scope)
            t[...] = orig
            return v

        errs[name] = finite_difference_check(f, orig, grads[name], h)
    return errs


def toy_autoft(arch: Architecture, seed: int, hidden=5, enabled=COMPONENTS):
    rng = SeededRng(seed, 88)
    pre = init_params(arch, SeededRng(seed).child(0))
    _jitter_biases(pre.tensors, rng.child(1))
    model = build_model(pre, enabled, SeededRng(seed).child(3), hidden=hidden)
    for t in model.target.tensors.values():
        t += rng.child(2).normal(t.shape, 0.2)
    for i, net in enumerate(model.policies.values()):
        net.W2[...] = rng.child(4, i).uniform(net.W2.shape, -0.5, 0.5)
    return model


def autoft_fd_errors(arch: Architecture, seed: int, tau=1.0, lam=0.01, scope="all", n=6, h=1e-5) -> dict[str, float]:
    """Max relative FD error of the soft-forward AutoFT backward, per trainable tensor."""
    model = toy_autoft(arch, seed)
    batch = random_batch(arch.field_sizes, n, SeededRng(seed, 89))

    def loss():
        tape, _ = autoft_forward_batch(model, batch, tau, SeededRng(seed, 99), Mode.TRAIN, relax=True)
        return autoft_loss(model, batch.labels, tape.yhat, lam, scope)

    tape, _ = autoft_forward_batch(model, batch, tau, SeededRng(seed, 99), Mode.TRAIN, relax=True)
    grads = straight_through_backward(model, tape, batch.labels, lam, scope)
    errs = {}
    for name, t in model.trainable().items():
        orig = t.copy()

        def f(x, t=t, orig=orig):
            t[...] = x.reshape(orig.shape)
            v = loss()
            t[...] = orig
            return v

        errs[name] = finite_difference_check(f, orig, grads[name], h)
    return errs


# criterion number -> "PASS ..."/"FAIL ..." line, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {criterion:>2} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    ACCEPTANCE[criterion] = line
    print(line)
