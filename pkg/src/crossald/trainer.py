"""Semi-supervised training: supervised Dice + warmed-up consistency regularizer.

Per step::

    loss = mean_l dice(f(x_l), onehot(y_l))
           + lambda_cs(t) * 0                       # contrastive hook, not implemented
           + lambda(t) * regularizer(unlabeled batch)

followed by one SGD-with-momentum update. Batch selection and the
regularizer's own randomness use separate generator streams, so a zero
regularizer weight leaves the parameter trajectory identical to plain
supervised training.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import cross_ald, losses, sampler, segnet, synth_data
from .autodiff import Tensor
from .cross_ald import MixConfig
from .losses import MetricReport
from .sampler import SamplerConfig
from .segnet import Arch, SegModel

logger = logging.getLogger(__name__)

REGULARIZERS = (
    "none",
    "vat",
    "vat_mixup",
    "ranmixup",
    "svgd_consistency",
    "svgdf_consistency",
    "cross_ald",
)
PAIRED = {"vat_mixup", "ranmixup", "cross_ald"}
CURVE_FIELDS = ["iter", "sup_loss", "reg_loss", "lambda", "dice", "jaccard", "hd95", "asd"]


class TrainingDivergence(FloatingPointError):
    def __init__(self, component: str, iteration: int):
        super().__init__(f"non-finite {component} loss at iteration {iteration}")
        self.component = component
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 2000
    batch_labeled: int = 2
    batch_unlabeled: int = 2
    lr: float = 0.01
    momentum: float = 0.9
    lambda_cross_max: float = 0.1
    lambda_cs: float = 0.0
    rampup_iters: int | None = None  # None -> 0.4 * total_iters
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    mix: MixConfig = field(default_factory=MixConfig)
    regularizer: str = "cross_ald"
    labeled_fraction: float = 0.05
    base_width: int = 8
    eval_every: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.rampup_iters is None:
            object.__setattr__(self, "rampup_iters", max(1, int(round(0.4 * self.total_iters))))
        self.validate()

    def validate(self) -> None:
        if int(self.total_iters) != self.total_iters or self.total_iters < 1:
            raise ValueError(f"total_iters must be >= 1, got {self.total_iters}")
        if not 1 <= self.rampup_iters <= self.total_iters:
            raise ValueError(f"rampup_iters must lie in [1, total_iters], got {self.rampup_iters}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.lambda_cross_max < 0 or self.lambda_cs < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}; valid: {', '.join(REGULARIZERS)}")
        if self.regularizer in PAIRED and self.batch_unlabeled % 2:
            raise ValueError(f"{self.regularizer} pairs unlabeled images; batch_unlabeled must be even")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError(f"labeled_fraction must lie in (0, 1], got {self.labeled_fraction}")
        if self.base_width < 2:
            raise ValueError(f"base_width must be >= 2, got {self.base_width}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sampler"] = self.sampler.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("sampler"), dict):
            d["sampler"] = SamplerConfig.from_dict(d["sampler"])
        if isinstance(d.get("mix"), dict):
            d["mix"] = MixConfig(**d["mix"])
        return cls(**d)


@dataclass
class TrainState:
    model: SegModel
    config: TrainConfig
    velocity: dict[str, np.ndarray]
    data_rng: np.random.Generator
    reg_rng: np.random.Generator
    iter: int = 0
    history: list[dict] = field(default_factory=list)


def warmup_weight(t: float, T: int, lambda_max: float) -> float:
    """``lambda_max * exp(-5 (1 - min(t,T)/T)^2)``."""
    if T < 1:
        raise ValueError(f"ramp length must be >= 1, got {T}")
    phase = 1.0 - min(max(t, 0.0), T) / T
    return float(lambda_max * math.exp(-5.0 * phase * phase))


def init_state(config: TrainConfig, num_classes: int = 3) -> TrainState:
    model = segnet.init_model(Arch(num_classes=num_classes, base_width=config.base_width), config.seed)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    root = np.random.SeedSequence(config.seed)
    data_seq, reg_seq = root.spawn(2)
    return TrainState(model, config, velocity, np.random.default_rng(data_seq), np.random.default_rng(reg_seq))


def one_hot(masks: np.ndarray, num_classes: int) -> np.ndarray:
    """[B,H,W] labels -> [B,C,H,W] float one-hot."""
    masks = np.asarray(masks)
    out = np.zeros((masks.shape[0], num_classes) + masks.shape[1:], dtype=np.float32)
    for c in range(num_classes):
        out[:, c] = masks == c
    return out


def cs_loss(state: TrainState, x_l: np.ndarray, x_u: np.ndarray) -> Tensor | None:
    """Contrastive inter-class term; a weight hook only, always absent."""
    return None


# ---------------------------------------------------------------- regularizers


def regularizer_loss(state: TrainState, params: dict[str, Tensor], x_u: np.ndarray) -> Tensor:
    """The configured consistency term on an unlabeled batch [B,1,H,W]."""
    cfg = state.config
    model = state.model
    rng = state.reg_rng
    name = cfg.regularizer
    scfg = cfg.sampler

    if name == "ranmixup":
        return cross_ald.ranmixup_batch(model, x_u, cfg.mix, rng, params)

    if name == "vat":
        adv = sampler.sample_batch(model, x_u, replace(scfg, n_particles=1), rng, "vat")[:, 0]
        target = segnet.predict_probs(model, x_u)
        probs = segnet.forward(model, Tensor(adv), params)
        return ad.mean(losses.kl_per_sample(probs, target))

    if name == "vat_mixup":
        adv = sampler.sample_batch(model, x_u, replace(scfg, n_particles=1), rng, "vat")
        loss, _ = cross_ald.cross_ald_batch(model, x_u, adv, cfg.mix, rng, params)
        return loss

    method = {"svgd_consistency": "pixel", "svgdf_consistency": "feature", "cross_ald": "feature"}[name]
    parts = sampler.sample_batch(model, x_u, scfg, rng, method)
    if name == "cross_ald":
        loss, _ = cross_ald.cross_ald_batch(model, x_u, parts, cfg.mix, rng, params)
        return loss
    picks = [int(rng.integers(scfg.n_particles)) for _ in range(len(x_u))]
    adv = np.stack([parts[b, n] for b, n in enumerate(picks)])
    target = segnet.predict_probs(model, x_u)
    probs = segnet.forward(model, Tensor(adv), params)
    return ad.mean(losses.dice_loss_per_sample(probs, Tensor(target), stop_grad_q=True))


# ---------------------------------------------------------------- step


def train_step(state: TrainState, labeled_batch: tuple[np.ndarray, np.ndarray], unlabeled_batch: np.ndarray | None) -> TrainState:
    """One optimizer update on the total loss; returns the (mutated) state."""
    cfg = state.config
    model = state.model
    x_l, y_l = labeled_batch
    params = segnet.param_tensors(model, requires_grad=True)

    probs = segnet.forward(model, Tensor(np.asarray(x_l, dtype=np.float32)), params)
    sup = losses.dice_loss(probs, Tensor(one_hot(y_l, model.arch.num_classes)))
    if not math.isfinite(sup.item()):
        raise TrainingDivergence("supervised", state.iter)
    total = sup

    lam = warmup_weight(state.iter, cfg.rampup_iters, cfg.lambda_cross_max)
    reg_value = 0.0
    if cfg.regularizer != "none" and lam > 0 and unlabeled_batch is not None and len(unlabeled_batch):
        reg = regularizer_loss(state, params, np.asarray(unlabeled_batch, dtype=np.float32))
        reg_value = reg.item()
        if not math.isfinite(reg_value):
            raise TrainingDivergence("regularizer", state.iter)
        total = total + reg * lam

    lam_cs = warmup_weight(state.iter, cfg.rampup_iters, cfg.lambda_cs)
    if lam_cs > 0:
        cs = cs_loss(state, x_l, unlabeled_batch)
        if cs is not None:
            total = total + cs * lam_cs

    grads = ad.backward(total)
    for name, p in params.items():
        g = grads.get(p)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise TrainingDivergence("gradient", state.iter)
        v = state.velocity[name]
        v *= np.float32(cfg.momentum)
        v += g
        model.params[name] = (model.params[name] - np.float32(cfg.lr) * v).astype(np.float32)

    state.history.append({"iter": state.iter, "sup_loss": sup.item(), "reg_loss": reg_value, "lambda": lam})
    state.iter += 1
    return state


def sample_batches(state: TrainState, dataset: synth_data.Dataset, labeled: list[int], unlabeled: list[int]):
    cfg = state.config
    rng = state.data_rng
    lab = np.asarray(labeled)
    pick = rng.choice(lab, size=cfg.batch_labeled, replace=len(lab) < cfg.batch_labeled)
    x_l = dataset.images[pick]
    y_l = dataset.masks[pick]
    x_u = None
    if unlabeled:
        order = rng.permutation(np.asarray(unlabeled))
        k = min(cfg.batch_unlabeled, len(order))
        if cfg.regularizer in PAIRED:
            k -= k % 2
        x_u = dataset.images[order[:k]]
    return (x_l, y_l), x_u


# ---------------------------------------------------------------- evaluation


def evaluate(
    model: SegModel,
    images: np.ndarray,
    masks: np.ndarray,
    chunk: int = 16,
    predict: Callable[[np.ndarray], np.ndarray] | None = None,
) -> MetricReport:
    """Argmax predictions scored with :func:`losses.seg_metrics`, averaged over images.

    ``predict`` maps an image batch to label maps; it defaults to the model's argmax.
    """
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if len(images) != len(masks):
        raise ValueError(f"{len(images)} images but {len(masks)} masks")
    predict = predict or (lambda x: segnet.predict_mask(model, x))
    preds = np.concatenate([predict(images[i:i + chunk]) for i in range(0, len(images), chunk)])
    C = model.arch.num_classes
    return losses.average_reports([losses.seg_metrics(p, m, C) for p, m in zip(preds, masks)])


def evaluate_dataset(model: SegModel, dataset: synth_data.Dataset) -> MetricReport:
    return evaluate(model, dataset.eval_images, dataset.eval_masks)


# ---------------------------------------------------------------- full run


def train(config: TrainConfig, dataset: synth_data.Dataset, log_every: int = 0) -> TrainState:
    """Train from scratch on ``dataset``; evaluations are stored in the history."""
    m = dataset.manifest
    labeled = synth_data.split_labels(m.n_train, config.labeled_fraction, m.seed)
    unlabeled = [i for i in range(m.n_train) if i not in set(labeled)]
    state = init_state(config, m.C)
    for _ in range(config.total_iters):
        lab_batch, unl_batch = sample_batches(state, dataset, labeled, unlabeled)
        train_step(state, lab_batch, unl_batch)
        done = state.iter
        if done % config.eval_every == 0 or done == config.total_iters:
            report = evaluate_dataset(state.model, dataset)
            state.history[-1]["eval"] = report.as_dict()
        if log_every and done % log_every == 0:
            h = state.history[-1]
            logger.info("iter %d sup %.4f reg %.4f lambda %.4f", done, h["sup_loss"], h["reg_loss"], h["lambda"])
    return state


def curves_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_FIELDS)
    for h in history:
        ev = h.get("eval")
        row = [h["iter"] + 1, repr(h["sup_loss"]), repr(h["reg_loss"]), repr(h["lambda"])]
        if ev:
            row += [repr(ev["dice_pct"]), repr(ev["jaccard_pct"]), repr(ev["hd95_px"]), repr(ev["asd_px"])]
        else:
            row += ["", "", "", ""]
        w.writerow(row)
    return buf.getvalue()


def run_training(config: TrainConfig, dataset_path: str | Path, out_dir: str | Path, log_every: int = 0) -> dict:
    """Load data, train, write ``report.json``, ``curves.csv`` and ``checkpoint.bin``."""
    config.validate()
    dataset = synth_data.load_dataset(dataset_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    state = train(config, dataset, log_every)
    runtime = time.perf_counter() - t0

    evals = [
        {"iter": h["iter"] + 1, "sup_loss": h["sup_loss"], "reg_loss": h["reg_loss"], "lambda": h["lambda"], "metrics": h["eval"]}
        for h in state.history
        if "eval" in h
    ]
    report = {
        "config": config.to_dict(),
        "dataset": str(dataset_path),
        "labeled_indices": synth_data.split_labels(dataset.manifest.n_train, config.labeled_fraction, dataset.manifest.seed),
        "history": evals,
        "final_metrics": evals[-1]["metrics"],
        "runtime_sec": runtime,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "curves.csv").write_text(curves_csv(state.history))
    segnet.save_checkpoint(state.model, out / "checkpoint.bin")
    return report
