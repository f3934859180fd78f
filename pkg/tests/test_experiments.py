"""Diversity study, ladder and particle sweep plumbing."""

import csv
import io

import numpy as np
import pytest

from crossald import experiments, losses, segnet, synth_data, trainer
from crossald.sampler import SamplerConfig
from crossald.segnet import Arch


@pytest.fixture(scope="module")
def ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("exp")
    synth_data.generate_dataset(root, H=16, W=16, n_train=8, n_eval=2, seed=6)
    return synth_data.load_dataset(root)


def tiny(**kw):
    base = dict(total_iters=2, base_width=2, eval_every=2, labeled_fraction=0.25, sampler=SamplerConfig(iters=1))
    base.update(kw)
    return trainer.TrainConfig(**base)


class TestPickImages:
    def test_sorted_distinct_deterministic(self):
        a = experiments.pick_images(40, 3, 0)
        assert a == sorted(set(a)) and len(a) == 3 and a == experiments.pick_images(40, 3, 0)

    def test_too_many(self):
        with pytest.raises(ValueError):
            experiments.pick_images(2, 3, 0)


class TestDiversity:
    def test_rows_match_direct_computation(self, ds):
        model = segnet.init_model(Arch(base_width=2), 0)
        cfg = SamplerConfig(iters=2)
        rows = experiments.diversity(model, ds.images, [1, 4], [2, 3], cfg)
        assert len(rows) == 3 * 2 * 2
        r = next(r for r in rows if (r["method"], r["n_particles"], r["image_index"]) == ("svgdf", 3, 4))
        pset = experiments.run_method("svgdf", model, ds.images[4], SamplerConfig(iters=2, n_particles=3), np.random.default_rng([0, 4, 3]))
        assert r["mean_sse"] == losses.mean_pairwise_sse(pset.particles)

    def test_threads_do_not_change_results(self, ds):
        model = segnet.init_model(Arch(base_width=2), 0)
        a = experiments.diversity(model, ds.images, [0, 2], [2], SamplerConfig(iters=2))
        b = experiments.diversity(model, ds.images, [0, 2], [2], SamplerConfig(iters=2), threads=3)
        assert a == b

    def test_summary_and_csv(self):
        rows = [
            {"method": "vat", "n_particles": 2, "image_index": 0, "mean_sse": 1.0},
            {"method": "vat", "n_particles": 2, "image_index": 5, "mean_sse": 3.0},
        ]
        assert experiments.summarize_diversity(rows) == {("vat", 2): 2.0}
        lines = list(csv.reader(io.StringIO(experiments.diversity_csv(rows))))
        assert lines[0] == experiments.DIVERSITY_FIELDS
        assert lines[-1] == ["vat", "2", "mean", "2.0"]

    def test_unknown_method(self, ds):
        model = segnet.init_model(Arch(base_width=2), 0)
        with pytest.raises(ValueError):
            experiments.run_method("langevin", model, ds.images[0], SamplerConfig(), np.random.default_rng(0))

    def test_empty_n_list(self, ds):
        with pytest.raises(ValueError):
            experiments.diversity(segnet.init_model(Arch(base_width=2), 0), ds.images, [0], [], SamplerConfig())


class TestSweeps:
    def test_ladder_rows_and_median(self, ds):
        rows = experiments.ladder(tiny(), ds, ["none", "ranmixup"], seeds=[0, 1, 2])
        assert [(r["regularizer"], r["seed"]) for r in rows] == [(g, s) for g in ("none", "ranmixup") for s in (0, 1, 2)]
        dice = sorted(r["dice"] for r in rows if r["regularizer"] == "none")
        assert experiments.median_dice(rows, "regularizer", "none") == dice[1]
        # ladder rows equal stand-alone training
        direct = experiments.train_final(tiny(regularizer="none", seed=1), ds)
        assert rows[1]["dice"] == direct.dice_pct

    def test_particle_sweep_csv(self, ds, tmp_path):
        rows = experiments.particle_sweep(tiny(regularizer="cross_ald"), ds, [1, 2], seeds=[0])
        path = experiments.write_csv(experiments.runs_csv(rows), tmp_path / "sub" / "sweep.csv")
        parsed = list(csv.DictReader(io.StringIO(path.read_text())))
        assert list(parsed[0]) == experiments.RUN_FIELDS
        assert [int(r["n_particles"]) for r in parsed] == [1, 2]
