"""Warm-up schedule, optimizer step, training loop, evaluation and reports."""

import csv
import io
import json
import math
from types import SimpleNamespace
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossald import autodiff as ad
from crossald import losses, segnet, synth_data, trainer
from crossald.autodiff import Tensor
from crossald.sampler import SamplerConfig
from crossald.trainer import TrainConfig, TrainingDivergence
from test_losses import brute_metrics


@pytest.fixture(scope="module")
def ds_path(tmp_path_factory):
    root = tmp_path_factory.mktemp("trainds")
    synth_data.generate_dataset(root, H=16, W=16, n_train=8, n_eval=4, seed=2)
    return root


@pytest.fixture(scope="module")
def ds(ds_path):
    return synth_data.load_dataset(ds_path)


def tiny(**kw):
    base = dict(total_iters=6, base_width=4, eval_every=3, labeled_fraction=0.25, sampler=SamplerConfig(iters=2))
    base.update(kw)
    return TrainConfig(**base)


class TestWarmup:
    def test_endpoints(self):
        assert trainer.warmup_weight(50, 50, 0.1) == 0.1
        assert trainer.warmup_weight(80, 50, 0.1) == 0.1
        assert trainer.warmup_weight(0, 50, 1.0) == pytest.approx(math.exp(-5))
        assert round(trainer.warmup_weight(0, 50, 1.0), 6) == 0.006738
        assert trainer.warmup_weight(25, 50, 1.0) == pytest.approx(math.exp(-1.25))
        assert round(trainer.warmup_weight(25, 50, 1.0), 4) == 0.2865

    def test_bad_ramp(self):
        with pytest.raises(ValueError):
            trainer.warmup_weight(1, 0, 1.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 1000), st.floats(0.0, 10.0), st.integers(0, 2000), st.integers(0, 2000))
    def test_monotone(self, T, lam, t1, t2):
        lo, hi = sorted((t1, t2))
        assert trainer.warmup_weight(lo, T, lam) <= trainer.warmup_weight(hi, T, lam)
        assert trainer.warmup_weight(hi, T, lam) <= lam


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [
            {"total_iters": 0},
            {"rampup_iters": 0},
            {"rampup_iters": 20, "total_iters": 10},
            {"lr": 0.0},
            {"momentum": 1.0},
            {"regularizer": "bogus"},
            {"regularizer": "cross_ald", "batch_unlabeled": 3},
            {"labeled_fraction": 0.0},
            {"lambda_cross_max": -1.0},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_default_ramp(self):
        assert TrainConfig(total_iters=2000).rampup_iters == 800

    def test_dict_round_trip(self):
        cfg = TrainConfig(sampler=SamplerConfig(norm_p=math.inf, n_particles=3))
        back = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back == cfg


class TestStep:
    def test_plain_gradient_step(self, ds):
        cfg = tiny(momentum=0.0, regularizer="none", lr=0.05)
        state = trainer.init_state(cfg, 3)
        before = {k: v.copy() for k, v in state.model.params.items()}
        x, y = ds.images[:2], ds.masks[:2]
        params = segnet.param_tensors(state.model, requires_grad=True)
        loss = losses.dice_loss(segnet.forward(state.model, Tensor(x), params), Tensor(trainer.one_hot(y, 3)))
        grads = ad.backward(loss)
        trainer.train_step(state, (x, y), None)
        for k, p in params.items():
            g = grads[p]
            assert state.model.params[k].tobytes() == (before[k] - np.float32(0.05) * g).astype(np.float32).tobytes()
            # the float32 subtraction rounds each coordinate, so the norm identity holds to ~1e-4
            moved = np.linalg.norm(state.model.params[k].astype(np.float64) - before[k])
            assert moved == pytest.approx(0.05 * np.linalg.norm(g.astype(np.float64)), rel=1e-3, abs=1e-9)

    def test_momentum_buffer(self, ds):
        cfg = tiny(regularizer="none")
        state = trainer.init_state(cfg, 3)
        p0 = {k: v.copy() for k, v in state.model.params.items()}
        trainer.train_step(state, (ds.images[:2], ds.masks[:2]), None)
        v1 = {k: v.copy() for k, v in state.velocity.items()}
        p1 = {k: v.copy() for k, v in state.model.params.items()}
        trainer.train_step(state, (ds.images[2:4], ds.masks[2:4]), None)
        for k in v1:
            # first step: the buffer is the raw gradient
            np.testing.assert_allclose(p1[k], p0[k] - np.float32(0.01) * v1[k], atol=1e-7)
            np.testing.assert_allclose(state.model.params[k], p1[k] - np.float32(0.01) * state.velocity[k], atol=1e-7)
        assert state.iter == 2 and [h["iter"] for h in state.history] == [0, 1]

    def test_supervised_loss_decreases(self, tmp_path):
        synth_data.generate_dataset(tmp_path, H=16, W=16, n_train=4, n_eval=1, seed=0)
        d = synth_data.load_dataset(tmp_path)
        cfg = tiny(regularizer="none", total_iters=100, labeled_fraction=1.0, lr=0.05, eval_every=100)
        state = trainer.train(cfg, d)
        first, last = state.history[0]["sup_loss"], state.history[-1]["sup_loss"]
        assert last < first

    def test_non_finite_reports_component(self, ds, monkeypatch):
        cfg = tiny(regularizer="ranmixup", lambda_cross_max=1.0, rampup_iters=1)
        state = trainer.init_state(cfg, 3)
        monkeypatch.setattr(trainer, "regularizer_loss", lambda *a: SimpleNamespace(item=lambda: math.nan))
        with pytest.raises(TrainingDivergence) as info:
            trainer.train_step(state, (ds.images[:2], ds.masks[:2]), ds.images[2:4])
        assert info.value.component == "regularizer" and info.value.iteration == 0

    @pytest.mark.parametrize("reg", trainer.REGULARIZERS)
    def test_every_regularizer_runs(self, ds, reg):
        cfg = tiny(regularizer=reg, total_iters=2, lambda_cross_max=1.0, rampup_iters=1)
        state = trainer.train(cfg, ds)
        h = state.history[-1]
        assert math.isfinite(h["sup_loss"]) and math.isfinite(h["reg_loss"])
        if reg != "none":
            assert h["reg_loss"] > 0
        assert all(np.isfinite(v).all() for v in state.model.params.values())


class TestZeroWeightReduction:
    @pytest.mark.parametrize("reg", ["cross_ald", "vat", "svgd_consistency"])
    def test_trajectory_equals_supervised(self, ds, reg):
        sup = trainer.train(tiny(regularizer="none"), ds)
        zero = trainer.train(tiny(regularizer=reg, lambda_cross_max=0.0), ds)
        for k in sup.model.params:
            assert sup.model.params[k].tobytes() == zero.model.params[k].tobytes()


class TestEvaluate:
    def test_oracle_stub_scores_100(self, ds):
        lookup = {img.tobytes(): m for img, m in zip(ds.eval_images, ds.eval_masks)}
        model = segnet.init_model(segnet.Arch(base_width=2), 0)
        rep = trainer.evaluate(model, ds.eval_images, ds.eval_masks, predict=lambda x: np.stack([lookup[i.tobytes()] for i in x]))
        assert rep == losses.MetricReport(100.0, 100.0, 0.0, 0.0)

    def test_uniform_model_equals_background_baseline(self, ds):
        m = segnet.init_model(segnet.Arch(base_width=2), 0)
        m.params["head.w"][:] = 0
        rep = trainer.evaluate_dataset(m, ds)
        # ties go to class 0, so the prediction is all background
        per_image = [brute_metrics(np.zeros_like(g), g, 3) for g in ds.eval_masks]
        want = [math.fsum(col) / len(per_image) for col in zip(*per_image)]
        assert rep.dice_pct == 0.0 and rep.jaccard_pct == 0.0
        assert [rep.dice_pct, rep.jaccard_pct, rep.hd95_px, rep.asd_px] == pytest.approx(want, rel=1e-12)

    def test_deterministic_and_pure(self, ds):
        m = segnet.init_model(segnet.Arch(base_width=4), 1)
        before = {k: v.copy() for k, v in m.params.items()}
        a = trainer.evaluate_dataset(m, ds)
        b = trainer.evaluate_dataset(m, ds)
        assert a == b
        assert all(np.array_equal(before[k], m.params[k]) for k in before)

    def test_empty(self):
        m = segnet.init_model(segnet.Arch(base_width=2), 0)
        with pytest.raises(ValueError):
            trainer.evaluate(m, np.zeros((0, 1, 8, 8)), np.zeros((0, 8, 8)))


class TestRunTraining:
    def test_artifacts_and_determinism(self, ds_path, tmp_path):
        cfg = tiny(regularizer="cross_ald")
        r1 = trainer.run_training(cfg, ds_path, tmp_path / "a")
        r2 = trainer.run_training(cfg, ds_path, tmp_path / "b")
        for name in ("checkpoint.bin", "curves.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        j1 = json.loads((tmp_path / "a" / "report.json").read_text())
        j2 = json.loads((tmp_path / "b" / "report.json").read_text())
        assert j1.pop("runtime_sec") >= 0 and j2.pop("runtime_sec") >= 0
        assert j1 == j2
        assert set(r1) >= {"config", "history", "final_metrics", "runtime_sec"}
        assert set(r1["final_metrics"]) == {"dice_pct", "jaccard_pct", "hd95_px", "asd_px"}
        assert r1["config"]["sampler"]["n_particles"] == 2
        assert [h["iter"] for h in r1["history"]] == [3, 6]

    def test_curves_csv(self, ds_path, tmp_path):
        trainer.run_training(tiny(regularizer="none"), ds_path, tmp_path)
        rows = list(csv.reader(io.StringIO((tmp_path / "curves.csv").read_text())))
        assert rows[0] == ["iter", "sup_loss", "reg_loss", "lambda", "dice", "jaccard", "hd95", "asd"]
        assert len(rows) == 1 + 6
        assert rows[1][0] == "1" and rows[1][4] == "" and rows[3][4] != ""

    def test_missing_dataset(self, tmp_path):
        with pytest.raises(synth_data.DatasetError, match="manifest.json"):
            trainer.run_training(tiny(), tmp_path / "nope", tmp_path / "out")
