"""Particle-diversity study, regularizer ladder and particle-count sweep."""

from __future__ import annotations

import csv
import io
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import losses, sampler, segnet, trainer
from .sampler import SamplerConfig
from .segnet import Arch, SegModel
from .synth_data import Dataset

DIVERSITY_METHODS = ("vat", "svgd", "svgdf")
DIVERSITY_FIELDS = ["method", "n_particles", "image_index", "mean_sse"]
RUN_FIELDS = ["regularizer", "n_particles", "seed", "dice", "jaccard", "hd95", "asd"]


def pick_images(n_total: int, k: int, seed: int) -> list[int]:
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(n_total, size=k, replace=False))


def run_method(method: str, model: SegModel, anchor: np.ndarray, cfg: SamplerConfig, rng: np.random.Generator):
    if method == "vat":
        return sampler.vat_multi_restart(model, anchor, cfg, rng)
    if method == "svgd":
        return sampler.svgd_sample(model, anchor, cfg, rng)
    if method == "svgdf":
        return sampler.svgdf_sample(model, anchor, cfg, rng)
    raise ValueError(f"unknown method {method!r}; valid: {', '.join(DIVERSITY_METHODS)}")


def diversity(
    model: SegModel,
    images: np.ndarray,
    image_indices: Sequence[int],
    n_list: Sequence[int],
    base: SamplerConfig,
    methods: Sequence[str] = DIVERSITY_METHODS,
    threads: int = 1,
) -> list[dict]:
    """Mean pairwise SSE per (method, N, image).

    For a given image and N every method starts from the same initial
    particles, so differences come from the update dynamics alone.
    """
    if not n_list:
        raise ValueError("n_list must not be empty")

    def one(job):
        method, n, idx = job
        cfg = replace(base, n_particles=n)
        rng = np.random.default_rng([base.seed, idx, n])
        pset = run_method(method, model, images[idx], cfg, rng)
        return {"method": method, "n_particles": n, "image_index": idx, "mean_sse": losses.mean_pairwise_sse(pset.particles)}

    jobs = [(m, n, i) for m in methods for n in n_list for i in image_indices]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, jobs))
    return [one(j) for j in jobs]


def summarize_diversity(rows: Iterable[dict]) -> dict[tuple[str, int], float]:
    groups: dict[tuple[str, int], list[float]] = {}
    for r in rows:
        groups.setdefault((r["method"], r["n_particles"]), []).append(r["mean_sse"])
    return {k: float(np.mean(v)) for k, v in groups.items()}


def diversity_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DIVERSITY_FIELDS)
    for r in rows:
        w.writerow([r["method"], r["n_particles"], r["image_index"], repr(r["mean_sse"])])
    for (method, n), v in summarize_diversity(rows).items():
        w.writerow([method, n, "mean", repr(v)])
    return buf.getvalue()


def run_diversity(
    dataset: Dataset,
    n_list: Sequence[int],
    base: SamplerConfig,
    model_seed: int = 0,
    n_images: int = 3,
    base_width: int = 8,
    threads: int = 1,
) -> list[dict]:
    """Seeded random model, ``n_images`` seeded picks from the training split."""
    model = segnet.init_model(Arch(num_classes=dataset.manifest.C, base_width=base_width), model_seed)
    idx = pick_images(dataset.manifest.n_train, n_images, base.seed)
    return diversity(model, dataset.images, idx, n_list, base, threads=threads)


# ---------------------------------------------------------------- training sweeps


def train_final(config: trainer.TrainConfig, dataset: Dataset) -> losses.MetricReport:
    state = trainer.train(config, dataset)
    return trainer.evaluate_dataset(state.model, dataset)


def _row(config: trainer.TrainConfig, rep: losses.MetricReport) -> dict:
    return {
        "regularizer": config.regularizer,
        "n_particles": config.sampler.n_particles,
        "seed": config.seed,
        "dice": rep.dice_pct,
        "jaccard": rep.jaccard_pct,
        "hd95": rep.hd95_px,
        "asd": rep.asd_px,
    }


def ladder(base: trainer.TrainConfig, dataset: Dataset, regularizers: Sequence[str], seeds: Sequence[int]) -> list[dict]:
    rows = []
    for reg in regularizers:
        for s in seeds:
            cfg = replace(base, regularizer=reg, seed=s)
            rows.append(_row(cfg, train_final(cfg, dataset)))
    return rows


def particle_sweep(base: trainer.TrainConfig, dataset: Dataset, n_list: Sequence[int], seeds: Sequence[int]) -> list[dict]:
    rows = []
    for n in n_list:
        for s in seeds:
            cfg = replace(base, seed=s, sampler=replace(base.sampler, n_particles=n))
            rows.append(_row(cfg, train_final(cfg, dataset)))
    return rows


def median_dice(rows: Iterable[dict], key: str, value) -> float:
    return float(statistics.median(r["dice"] for r in rows if r[key] == value))


def runs_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RUN_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def write_csv(text: str, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)
    return p
