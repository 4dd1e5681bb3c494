from __future__ import annotations

import numpy as np
import pytest

from autoft import synth
from autoft.dcn import Architecture, init_params
from autoft.features import EncodedInstance, pack
from autoft.numerics import SeededRng
from autoft.pipeline import prepare


def random_instances(field_sizes, n, rng: SeededRng, multi_hot=(), max_len=3):
    out = []
    for _ in range(n):
        idx = []
        for i, size in enumerate(field_sizes):
            width = 1 + int(rng.integers(max_len)) if i in multi_hot else 1
            idx.append(tuple(int(v) for v in rng.integers(size, width)))
        out.append(EncodedInstance(tuple(idx), int(rng.integers(2))))
    return out


@pytest.fixture
def toy_arch():
    return Architecture((5, 4), k=4, cross_layers=2, deep_layers=(6, 3))


@pytest.fixture
def toy_params(toy_arch):
    return init_params(toy_arch, SeededRng(7))


@pytest.fixture
def toy_batch(toy_arch):
    insts = random_instances(toy_arch.field_sizes, 6, SeededRng(11), multi_hot=(1,))
    return pack(insts)


@pytest.fixture(scope="session")
def small_synth():
    spec = synth.SynthSpec(n_users=60, n_items=40, n_source=2000, n_target=600, seed=3)
    return synth.generate(spec)


@pytest.fixture(scope="session")
def small_datasets(small_synth):
    return prepare(small_synth.rows, synth.schema())


@pytest.fixture(scope="session")
def small_data_dir(tmp_path_factory, small_synth):
    d = tmp_path_factory.mktemp("synth")
    synth.write(small_synth, d)
    return d


def flat(tensors, names):
    return np.concatenate([tensors[n].ravel() for n in names])


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
