from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from autoft import synth
from autoft.dcn import Backbone
from autoft.errors import ConfigError, VocabMismatchError
from autoft.features import DomainDataset
from autoft.numerics import SeededRng
from autoft.pipeline import prepare
from autoft.policy import Mode, autoft_forward_batch, build_model
from autoft.training import (POLICIES_BY_STAGE, AdamState, RunConfig, Stage, _AutoftLearner, adam_step,
                             early_stop, evaluate_model, method_name, run_autoft, run_finetune,
                             run_pretrain, tau_at)

SMALL = dict(k=4, cross_layers=2, deep_layers=(8, 4), batch_size=64, policy_hidden=8)


class TestAdam:
    def test_first_step_closed_form(self):
        p = {"w": np.array([1.0])}
        adam_step(AdamState.for_params(p), p, {"w": np.array([0.5])}, 0.01)
        assert p["w"][0] - 1.0 == pytest.approx(-0.01, abs=1e-6)

    def test_zero_gradient_is_no_op(self):
        p = {"w": np.array([1.0, -2.0])}
        state = AdamState.for_params(p)
        for _ in range(5):
            adam_step(state, p, {"w": np.zeros(2)}, 0.1)
        assert p["w"].tolist() == [1.0, -2.0]

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=6))
    def test_identical_gradients_identical_updates(self, gs):
        p = {"a": np.zeros(1), "b": np.zeros(1)}
        state = AdamState.for_params(p)
        for g in gs:
            adam_step(state, p, {"a": np.array([g]), "b": np.array([g])}, 0.01)
        assert p["a"][0] == p["b"][0]

    def test_state_must_mirror_params(self):
        p = {"w": np.zeros(1)}
        with pytest.raises(ConfigError):
            adam_step(AdamState.for_params({"v": np.zeros(1)}), p, {"w": np.zeros(1)}, 0.1)
        with pytest.raises(ConfigError):
            adam_step(AdamState.for_params(p), p, {"w": np.zeros(2)}, 0.1)

    def test_per_name_learning_rate(self):
        p = {"a": np.zeros(1), "b": np.zeros(1)}
        adam_step(AdamState.for_params(p), p, {"a": np.ones(1), "b": np.ones(1)}, lambda n: 0.1 if n == "a" else 0.01)
        assert p["a"][0] == pytest.approx(-0.1) and p["b"][0] == pytest.approx(-0.01)


class TestEarlyStop:
    def test_rising_never_stops(self):
        h = [0.5 + 0.01 * i for i in range(30)]
        assert all(not early_stop(h[:n]).stop for n in range(1, 31))
        assert early_stop(h).best_epoch == 30

    def test_flat_stops_at_patience_plus_one(self):
        stops = [n for n in range(1, 10) if early_stop([0.7] * n, patience=3).stop]
        assert stops[0] == 4

    def test_trace(self):
        h = [0.6, 0.7, 0.69, 0.69, 0.69]
        assert not early_stop(h[:4]).stop
        d = early_stop(h)
        assert d.stop and d.best_epoch == 2

    def test_min_delta(self):
        assert early_stop([0.7, 0.70005, 0.70009, 0.7001]).stop

    def test_empty_and_bad_patience(self):
        assert early_stop([]) == early_stop([], 1)
        assert early_stop([]).best_epoch == 0
        with pytest.raises(ConfigError):
            early_stop([0.5], patience=0)


class TestTemperature:
    def test_endpoints(self):
        assert tau_at(0, 10, 5.0, 0.5) == 5.0
        assert tau_at(9, 10, 5.0, 0.5) == pytest.approx(0.5, rel=1e-12)

    def test_geometric(self):
        taus = [tau_at(e, 6, 5.0, 0.5) for e in range(6)]
        ratios = np.array(taus[1:]) / np.array(taus[:-1])
        assert np.allclose(ratios, ratios[0]) and ratios[0] < 1

    def test_single_epoch(self):
        assert tau_at(0, 1, 5.0, 0.5) == 5.0


class TestRunConfig:
    def test_round_trip(self):
        cfg = RunConfig(stage=Stage.AUTOFT, deep_layers=(3,), backbone=Backbone.DNN)
        assert RunConfig.from_dict(cfg.to_dict()) == cfg

    def test_validation(self):
        with pytest.raises(ConfigError):
            RunConfig(pretrain_data="everything")
        with pytest.raises(ConfigError):
            RunConfig(batch_size=0)
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"bogus": 1})

    @pytest.mark.parametrize("stage, data, backbone, name", [
        (Stage.PRETRAIN, "all", Backbone.DCN, "All"),
        (Stage.PRETRAIN, "source", Backbone.DCN, "Source-only"),
        (Stage.TARGET_ONLY, "all", Backbone.DCN, "Target-only"),
        (Stage.FINETUNE, "all", Backbone.DCN, "All-Fine-Tune"),
        (Stage.AUTOFT, "source", Backbone.DCN, "Source-AutoFT"),
        (Stage.ABLATION_CROSS_DEEP, "all", Backbone.DCN, "All-Cross & Deep"),
        (Stage.AUTOFT, "all", Backbone.DNN, "DNN All-AutoFT"),
    ])
    def test_method_name(self, stage, data, backbone, name):
        assert method_name(RunConfig(stage=stage, pretrain_data=data, backbone=backbone)) == name


@pytest.fixture(scope="module")
def pretrained(small_datasets):
    cfg = RunConfig(epochs=2, seed=1, **SMALL)
    return run_pretrain(small_datasets.all("train"), small_datasets.all("valid"), small_datasets.vocab.sizes, cfg)


class TestPretrain:
    def test_separable_data(self):
        spec = synth.SynthSpec(n_users=40, n_items=30, n_source=3000, n_target=300, interaction_scale=0.0,
                               bias_scale=1.0, deterministic_labels=True, seed=5)
        ds = prepare(synth.generate(spec).rows, synth.schema())
        res = run_pretrain(ds["source", "train"], ds["source", "valid"], ds.vocab.sizes,
                           RunConfig(epochs=20, learning_rate=1e-2, **SMALL))
        assert evaluate_model(res.model, ds["source", "train"])[0]["auc"] > 0.95

    def test_loss_decreases_over_first_epoch(self, small_datasets):
        losses = []
        run_pretrain(small_datasets.all("train"), small_datasets.all("valid"), small_datasets.vocab.sizes,
                     RunConfig(epochs=1, learning_rate=1e-2, **SMALL), on_step=lambda e, b, l: losses.append(l))
        w = 10
        assert np.mean(losses[-w:]) < np.mean(losses[:w])

    def test_deterministic_checkpoint(self, small_datasets, tmp_path):
        cfg = RunConfig(epochs=2, seed=4, **SMALL)
        for name in ("a", "b"):
            res = run_pretrain(small_datasets.all("train"), small_datasets.all("valid"), small_datasets.vocab.sizes, cfg)
            res.model.save(tmp_path / f"{name}.bin", small_datasets.vocab.digest())
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_history_records(self, pretrained):
        assert [r["epoch"] for r in pretrained.history] == [1, 2]
        assert all(r["split"] == "valid" and 0 <= r["auc"] <= 1 and np.isfinite(r["train_loss"]) for r in pretrained.history)
        assert 1 <= pretrained.best_epoch <= 2

    def test_best_epoch_restored(self, small_datasets):
        cfg = RunConfig(epochs=6, seed=0, learning_rate=5e-2, patience=1, **SMALL)
        res = run_pretrain(small_datasets.all("train"), small_datasets.all("valid"), small_datasets.vocab.sizes, cfg)
        valid = small_datasets.all("valid")
        best = res.history[res.best_epoch - 1]["auc"]
        assert evaluate_model(res.model, valid)[0]["auc"] == best

    def test_empty_training_set(self, small_datasets):
        empty = DomainDataset([], small_datasets.all("train").domain, small_datasets.all("train").split)
        with pytest.raises(ConfigError):
            run_pretrain(empty, small_datasets.all("valid"), small_datasets.vocab.sizes, RunConfig(epochs=1, **SMALL))


class TestFinetune:
    def test_zero_epochs_is_identity(self, pretrained, small_datasets):
        res = run_finetune(pretrained.model, small_datasets["target", "train"], small_datasets["target", "valid"],
                           RunConfig(stage=Stage.FINETUNE, epochs=0, **SMALL), small_datasets.vocab.digest())
        assert res.model.digest() == pretrained.model.digest()
        assert res.model is not pretrained.model

    def test_does_not_mutate_input(self, pretrained, small_datasets):
        before = pretrained.model.digest()
        run_finetune(pretrained.model, small_datasets["target", "train"], small_datasets["target", "valid"],
                     RunConfig(stage=Stage.FINETUNE, epochs=1, **SMALL))
        assert pretrained.model.digest() == before

    def test_self_transfer_tiny_lr(self, pretrained, small_datasets):
        train, valid = small_datasets.all("train"), small_datasets.all("valid")
        base = evaluate_model(pretrained.model, valid)[0]["auc"]
        res = run_finetune(pretrained.model, train, valid, RunConfig(stage=Stage.FINETUNE, epochs=2, learning_rate=1e-6, **SMALL))
        assert abs(evaluate_model(res.model, valid)[0]["auc"] - base) < 0.005

    def test_vocab_mismatch(self, pretrained, small_datasets):
        with pytest.raises(VocabMismatchError):
            run_finetune(pretrained.model, small_datasets["target", "train"], small_datasets["target", "valid"],
                         RunConfig(stage=Stage.FINETUNE, epochs=1, **SMALL), "not-the-digest")
        assert issubclass(VocabMismatchError, ConfigError)

    def test_seeded_reproducibility(self, pretrained, small_datasets):
        cfg = RunConfig(stage=Stage.FINETUNE, epochs=1, seed=3, **SMALL)
        a, b = (run_finetune(pretrained.model, small_datasets["target", "train"], small_datasets["target", "valid"], cfg)
                for _ in range(2))
        assert a.model.digest() == b.model.digest() and a.history == b.history


class TestAutoft:
    def run(self, pretrained, ds, stage=Stage.AUTOFT, epochs=2, **kw):
        cfg = RunConfig(stage=stage, epochs=epochs, seed=2, **{**SMALL, **kw})
        return run_autoft(pretrained.model, ds["target", "train"], ds["target", "valid"], cfg, ds.vocab.digest())

    def test_source_bank_frozen(self, pretrained, small_datasets):
        res = self.run(pretrained, small_datasets)
        assert res.model.source_digest() == pretrained.model.digest()
        assert res.model.target.digest() != pretrained.model.digest()

    def test_adam_buffers_only_for_trainable(self, pretrained, small_datasets):
        model = build_model(pretrained.model, POLICIES_BY_STAGE[Stage.ABLATION_CROSS], SeededRng(0), hidden=4)
        state = AdamState.for_params(_AutoftLearner(model, RunConfig()).params())
        assert not any(k.startswith("source/") for k in state.m)
        assert {k.split("/")[0] for k in state.m} == {"target", "policy.cross"}
        assert "target/pred.w" in state.m and "target/emb.0" in state.m

    @pytest.mark.parametrize("stage", list(POLICIES_BY_STAGE))
    def test_stage_policies(self, pretrained, small_datasets, stage):
        res = self.run(pretrained, small_datasets, stage, epochs=1)
        assert tuple(res.model.policies) == POLICIES_BY_STAGE[stage]

    def test_cross_deep_ablation_never_routes_embeddings(self, pretrained, small_datasets):
        res = self.run(pretrained, small_datasets, Stage.ABLATION_CROSS_DEEP, epochs=1)
        _, routes = evaluate_model(res.model, small_datasets["target", "test"])
        assert all(not r.p_e.any() for r in routes)
        assert sum(len(r.p_e) for r in routes) == len(small_datasets["target", "test"])

    def test_losses_finite_each_step(self, pretrained, small_datasets):
        losses = []
        cfg = RunConfig(stage=Stage.AUTOFT, epochs=2, **SMALL)
        run_autoft(pretrained.model, small_datasets["target", "train"], small_datasets["target", "valid"], cfg,
                   on_step=lambda e, b, l: losses.append(l))
        assert losses and np.all(np.isfinite(losses))

    def test_rejects_non_autoft_stage(self, pretrained, small_datasets):
        with pytest.raises(ConfigError):
            self.run(pretrained, small_datasets, Stage.FINETUNE)

    def test_deterministic(self, pretrained, small_datasets, tmp_path):
        for name in ("a", "b"):
            self.run(pretrained, small_datasets).model.save(tmp_path / f"{name}.bin", "d")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_history_has_temperature(self, pretrained, small_datasets):
        res = self.run(pretrained, small_datasets, epochs=3, patience=5)
        assert [r["tau"] for r in res.history] == pytest.approx([5.0, 5.0 * 0.1 ** 0.5, 0.5])

    def test_inference_is_deterministic(self, pretrained, small_datasets):
        res = self.run(pretrained, small_datasets, epochs=1)
        batch = small_datasets["target", "test"].batch(np.arange(20))
        a = autoft_forward_batch(res.model, batch, mode=Mode.INFER)[0].yhat
        assert np.array_equal(a, autoft_forward_batch(res.model, batch, mode=Mode.INFER)[0].yhat)
