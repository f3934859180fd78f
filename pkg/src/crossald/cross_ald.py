"""Cross-ALD regularizer and the mixup-style baselines.

Given two unlabeled images and their adversarial particle sets, a mixing
weight ``gamma ~ Beta(alpha, alpha)`` and one particle index per image are
drawn; the model's prediction on the mixed particles is pulled (Dice) toward
its detached prediction on the equally mixed clean images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import losses, segnet
from .autodiff import Tensor
from .sampler import ParticleSet
from .segnet import SegModel


@dataclass(frozen=True)
class MixConfig:
    alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0 or not math.isfinite(self.alpha):
            raise ValueError(f"alpha must be a positive finite number, got {self.alpha}")


# ---------------------------------------------------------------- Beta sampling


def _log_gamma_variate(shape: float, rng: np.random.Generator) -> float:
    """log of a Gamma(shape, 1) draw.

    Marsaglia-Tsang squeeze/rejection for shape >= 1; for shape < 1 the
    boost ``G(a) = G(a+1) * U^(1/a)`` is applied in log space so tiny shapes
    do not underflow.
    """
    if shape < 1.0:
        u = rng.random()
        while u == 0.0:
            u = rng.random()
        return _log_gamma_variate(shape + 1.0, rng) + math.log(u) / shape
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x = rng.standard_normal()
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = rng.random()
        if u < 1.0 - 0.0331 * x ** 4:
            return math.log(d * v)
        if u > 0.0 and math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
            return math.log(d * v)


def sample_beta(alpha: float, rng: np.random.Generator) -> float:
    """Draw from the symmetric Beta(alpha, alpha) as ``X / (X + Y)``, X, Y ~ Gamma(alpha)."""
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    lx = _log_gamma_variate(alpha, rng)
    ly = _log_gamma_variate(alpha, rng)
    # X/(X+Y) = 1/(1+exp(ly-lx)), stable for extreme log ratios
    z = ly - lx
    if z > 0:
        e = math.exp(-z)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(z))


# ---------------------------------------------------------------- mixing


def mix(a, b, gamma: float):
    """Convex combination ``gamma*a + (1-gamma)*b`` for arrays or tensors."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        a = a if isinstance(a, Tensor) else Tensor(a)
        b = b if isinstance(b, Tensor) else Tensor(b)
        if a.shape != b.shape:
            raise ad.ShapeError(f"mix: shapes {a.shape} and {b.shape} differ")
        return ad.add(ad.scale(a, gamma), ad.scale(b, 1.0 - gamma))
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ad.ShapeError(f"mix: shapes {a.shape} and {b.shape} differ")
    dtype = np.result_type(a.dtype, b.dtype, np.float32)
    out = gamma * a.astype(np.float64) + (1.0 - gamma) * b.astype(np.float64)
    return out.astype(dtype)


@dataclass(frozen=True)
class PairDraw:
    gamma: float
    n: int
    m: int


def draw_pair(alpha: float, n_i: int, n_j: int, rng: np.random.Generator) -> PairDraw:
    """gamma first, then the two particle indices."""
    gamma = sample_beta(alpha, rng)
    n = int(rng.integers(n_i))
    m = int(rng.integers(n_j))
    return PairDraw(gamma, n, m)


# ---------------------------------------------------------------- losses


def _mixed_dice(model: SegModel, params, adv: np.ndarray, clean: np.ndarray) -> Tensor:
    """Mean over pairs of ``dice(f(adv_k), stopgrad f(clean_k))``; inputs [P,1,H,W]."""
    target = segnet.predict_probs(model, clean)
    probs = segnet.forward(model, Tensor(adv), params)
    return ad.mean(losses.dice_loss_per_sample(probs, Tensor(target), stop_grad_q=True))


def cross_ald_batch(
    model: SegModel,
    anchors: np.ndarray,
    particles: np.ndarray,
    mix_cfg: MixConfig,
    rng: np.random.Generator,
    params: dict[str, Tensor] | None = None,
    draws: Sequence[PairDraw] | None = None,
) -> tuple[Tensor, list[PairDraw]]:
    """Cross-ALD loss over consecutive anchor pairs (0,1), (2,3), ...

    ``anchors`` is [2P,1,H,W] and ``particles`` [2P,N,1,H,W]. One
    ``(gamma, n, m)`` draw per pair unless ``draws`` is given.
    """
    anchors = np.asarray(anchors, dtype=np.float32)
    particles = np.asarray(particles, dtype=np.float32)
    if len(anchors) % 2:
        raise ValueError(f"need an even number of anchors to pair, got {len(anchors)}")
    if particles.shape[0] != anchors.shape[0] or particles.shape[2:] != anchors.shape[1:]:
        raise ValueError(f"particles {particles.shape} do not match anchors {anchors.shape}")
    P = len(anchors) // 2
    N = particles.shape[1]
    if draws is None:
        draws = [draw_pair(mix_cfg.alpha, N, N, rng) for _ in range(P)]
    adv, clean = [], []
    for k, d in enumerate(draws):
        i, j = 2 * k, 2 * k + 1
        adv.append(mix(particles[i, d.n], particles[j, d.m], d.gamma))
        clean.append(mix(anchors[i], anchors[j], d.gamma))
    p = params if params is not None else segnet.param_tensors(model)
    return _mixed_dice(model, p, np.stack(adv), np.stack(clean)), list(draws)


def cross_ald_loss(
    model: SegModel,
    x_i: np.ndarray,
    x_j: np.ndarray,
    pset_i: ParticleSet,
    pset_j: ParticleSet,
    mix_cfg: MixConfig,
    rng: np.random.Generator,
    params: dict[str, Tensor] | None = None,
    draw: PairDraw | None = None,
) -> Tensor:
    """Cross-ALD loss for one image pair. ``draw`` pins (gamma, n, m)."""
    x_i = np.asarray(x_i, dtype=np.float32)
    x_j = np.asarray(x_j, dtype=np.float32)
    if not np.array_equal(pset_i.anchor, x_i) or not np.array_equal(pset_j.anchor, x_j):
        raise ValueError("particle set anchors do not match the given images")
    if draw is None:
        draw = draw_pair(mix_cfg.alpha, len(pset_i), len(pset_j), rng)
    adv = mix(pset_i.particles[draw.n], pset_j.particles[draw.m], draw.gamma)
    clean = mix(x_i, x_j, draw.gamma)
    p = params if params is not None else segnet.param_tensors(model)
    return _mixed_dice(model, p, adv[None], clean[None])


def ranmixup_batch(
    model: SegModel,
    anchors: np.ndarray,
    mix_cfg: MixConfig,
    rng: np.random.Generator,
    params: dict[str, Tensor] | None = None,
    gammas: Sequence[float] | None = None,
) -> Tensor:
    """Mixup on clean pairs: ``dice(f(mix(x_i,x_j)), mix(f(x_i), f(x_j)))``, target detached."""
    anchors = np.asarray(anchors, dtype=np.float32)
    if len(anchors) % 2:
        raise ValueError(f"need an even number of anchors to pair, got {len(anchors)}")
    P = len(anchors) // 2
    if gammas is None:
        gammas = [sample_beta(mix_cfg.alpha, rng) for _ in range(P)]
    probs = segnet.predict_probs(model, anchors)
    mixed = np.stack([mix(anchors[2 * k], anchors[2 * k + 1], g) for k, g in enumerate(gammas)])
    target = np.stack([mix(probs[2 * k], probs[2 * k + 1], g) for k, g in enumerate(gammas)])
    p = params if params is not None else segnet.param_tensors(model)
    out = segnet.forward(model, Tensor(mixed), p)
    return ad.mean(losses.dice_loss_per_sample(out, Tensor(target), stop_grad_q=True))


def ranmixup_loss(
    model: SegModel,
    x_i: np.ndarray,
    x_j: np.ndarray,
    mix_cfg: MixConfig,
    rng: np.random.Generator,
    params: dict[str, Tensor] | None = None,
    gamma: float | None = None,
) -> Tensor:
    """RanMixup baseline for one unlabeled pair."""
    anchors = np.stack([np.asarray(x_i, dtype=np.float32), np.asarray(x_j, dtype=np.float32)])
    return ranmixup_batch(model, anchors, mix_cfg, rng, params, None if gamma is None else [gamma])
