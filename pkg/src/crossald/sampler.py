"""Adversarial particle generation inside an epsilon-ball.

All samplers share one update: each particle moves a fixed distance ``tau``
along the l2-normalized Stein direction

    phi_i = 1/N sum_j [ k(e_j, e_i) grad_j log P + grad_{x_j} k(e_j, e_i) ]

where ``e = embed(x)`` and ``log P`` is, up to a constant, the discrepancy
between the model's prediction on the particle and on the clean anchor. With
one particle the kernel terms vanish and the update is normalized projected
gradient ascent, which is how the VAT baseline is run.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import losses, segnet
from .autodiff import Tensor
from .segnet import SegModel

KERNEL_SPACES = ("pixel", "feature")
BANDWIDTH_FLOOR = 1e-6
NORMALIZE_EPS = 1e-12


@dataclass(frozen=True)
class SamplerConfig:
    epsilon: float = 0.1
    norm_p: float = 2
    tau: float = 0.05
    iters: int = 5
    eta: float = 0.01
    n_particles: int = 2
    kernel_space: str = "feature"
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.norm_p not in (2, math.inf):
            raise ValueError(f"norm_p must be 2 or inf, got {self.norm_p}")
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if not self.eta >= 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if int(self.iters) != self.iters or self.iters < 1:
            raise ValueError(f"iters must be a positive integer, got {self.iters}")
        if int(self.n_particles) != self.n_particles or self.n_particles < 1:
            raise ValueError(f"n_particles must be a positive integer, got {self.n_particles}")
        if self.kernel_space not in KERNEL_SPACES:
            raise ValueError(f"kernel_space must be one of {KERNEL_SPACES}, got {self.kernel_space!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(d["norm_p"]):
            d["norm_p"] = "inf"
        if math.isinf(d["epsilon"]):
            d["epsilon"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        d = dict(d)
        for key in ("norm_p", "epsilon"):
            if isinstance(d.get(key), str):
                d[key] = float(d[key])
        return cls(**d)


@dataclass
class ParticleSet:
    anchor: np.ndarray
    particles: np.ndarray  # [N, *anchor.shape]
    config: SamplerConfig = field(default_factory=SamplerConfig)

    def __len__(self) -> int:
        return len(self.particles)

    def check(self, tol: float = 1e-5) -> None:
        if self.particles.shape[1:] != self.anchor.shape:
            raise ValueError(f"particle shape {self.particles.shape[1:]} != anchor shape {self.anchor.shape}")
        norms = ball_norms(self.particles, self.anchor, self.config.norm_p)
        if math.isfinite(self.config.epsilon) and (norms > self.config.epsilon + tol).any():
            raise ValueError(f"particle outside ball: max norm {norms.max()} > {self.config.epsilon}")


class SamplerDivergence(FloatingPointError):
    def __init__(self, iteration: int, message: str = "non-finite gradient"):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


# ---------------------------------------------------------------- geometry


def _disp_norm(delta: np.ndarray, norm_p: float) -> float:
    """Norm of a float64 displacement; the single definition used for feasibility."""
    d = delta.reshape(-1)
    if math.isinf(norm_p):
        return float(np.abs(d).max()) if d.size else 0.0
    return math.sqrt(float(np.dot(d, d)))


def ball_norms(particles: np.ndarray, anchor: np.ndarray, norm_p: float) -> np.ndarray:
    anchor = np.asarray(anchor, dtype=np.float32)
    return np.array([_disp_norm(np.asarray(p, dtype=np.float64) - anchor, norm_p) for p in particles])


def project_ball(candidate: np.ndarray, anchor: np.ndarray, epsilon: float, norm_p: float = 2) -> np.ndarray:
    """Project ``candidate`` onto the ``norm_p`` ball of radius ``epsilon`` around ``anchor``.

    l2 rescales the displacement radially, l-inf clamps each coordinate.
    ``epsilon = inf`` disables the projection.
    """
    candidate = np.asarray(candidate, dtype=np.float32)
    anchor = np.asarray(anchor, dtype=np.float32)
    if candidate.shape != anchor.shape:
        raise ValueError(f"candidate shape {candidate.shape} != anchor shape {anchor.shape}")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if math.isinf(epsilon):
        return candidate.copy()
    if norm_p not in (2, math.inf):
        raise ValueError(f"norm_p must be 2 or inf, got {norm_p}")
    delta = candidate.astype(np.float64) - anchor
    norm = _disp_norm(delta, norm_p)
    if norm <= epsilon:
        return candidate.copy()
    if math.isinf(norm_p):
        out = anchor + np.clip(delta, -epsilon, epsilon)
    else:
        out = anchor + delta * (epsilon / norm)
    out = out.astype(np.float32)
    # float32 rounding can land a hair outside; pull back until feasible
    shrink = 1e-6
    while _disp_norm(out.astype(np.float64) - anchor, norm_p) > epsilon:
        out = (anchor + (out.astype(np.float64) - anchor) * (1.0 - shrink)).astype(np.float32)
        shrink = min(2.0 * shrink, 1.0)
    return out


def project_all(particles: np.ndarray, anchor: np.ndarray, epsilon: float, norm_p: float) -> np.ndarray:
    return np.stack([project_ball(p, anchor, epsilon, norm_p) for p in particles])


# ---------------------------------------------------------------- kernel


def rbf_kernel(a, b, sigma: float) -> float:
    """``exp(-|a-b|^2 / (2 sigma^2))``."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"kernel arguments have shapes {a.shape} and {b.shape}")
    d2 = float(np.sum((a - b) ** 2))
    return math.exp(-d2 / (2.0 * sigma * sigma))


def pairwise_sq_dists(emb: np.ndarray) -> np.ndarray:
    e = np.asarray(emb, dtype=np.float64).reshape(len(emb), -1)
    sq = (e * e).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (e @ e.T)
    np.fill_diagonal(d2, 0.0)
    return np.maximum(d2, 0.0)


def median_bandwidth(embeddings) -> float:
    """Median heuristic: ``sigma^2 = median_{i<j} |e_i - e_j|^2 / (2 ln(N+1))``."""
    emb = np.asarray(embeddings, dtype=np.float64)
    n = len(emb)
    if n < 2:
        return math.sqrt(BANDWIDTH_FLOOR)
    d2 = pairwise_sq_dists(emb)
    med = float(np.median(d2[np.triu_indices(n, k=1)]))
    sigma2 = max(med / (2.0 * math.log(n + 1)), BANDWIDTH_FLOOR)
    return math.sqrt(sigma2)


def kernel_matrix(emb: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-pairwise_sq_dists(emb) / (2.0 * sigma * sigma))


# ---------------------------------------------------------------- SVGD core


LogpGrad = Callable[[np.ndarray], np.ndarray]
Embedding = Callable[[Tensor], Tensor]


def repulsion_closed_form(x: np.ndarray, kmat: np.ndarray, sigma: float) -> np.ndarray:
    """``R_i = sum_j grad_{x_j} k(x_j, x_i) = sum_j k_ji (x_i - x_j) / sigma^2`` (identity embedding)."""
    flat = x.reshape(len(x), -1).astype(np.float64)
    rows = kmat.sum(axis=0)[:, None] * flat - kmat.T @ flat
    return (rows / (sigma * sigma)).reshape(x.shape)


def repulsion_autodiff(x: np.ndarray, embed: Embedding, sigma: float) -> np.ndarray:
    """Repulsion term with gradients taken through ``embed`` by reverse mode.

    ``grad_{x_j} k(e_j, e_i) = J_j^T [k_ji (e_i - e_j) / sigma^2]``: one forward
    pass of ``embed`` and, for each shift p, one backward pass pairing every
    particle j with (j + p) mod n.
    """
    n = len(x)
    xt = Tensor(x, requires_grad=True)
    e = embed(xt)
    emb = e.data.reshape(n, -1).astype(np.float64)
    K = kernel_matrix(emb, sigma)
    out = np.zeros((n,) + x.shape[1:], dtype=np.float64)
    for p in range(1, n):
        partner = (np.arange(n) + p) % n
        cot = K[np.arange(n), partner, None] * (emb[partner] - emb) / (sigma * sigma)
        g = ad.backward(ad.sum(e * Tensor(cot.reshape(e.shape))))[xt]
        out[partner] += g.astype(np.float64).reshape(out.shape)
    return out


def stein_direction(
    x: np.ndarray,
    logp_grads: np.ndarray,
    embed: Embedding | None,
    sigma: float | None = None,
) -> tuple[np.ndarray, float]:
    """Unnormalized Stein direction phi for every particle, plus the bandwidth used."""
    n = len(x)
    if embed is None:
        emb = x.reshape(n, -1)
    else:
        emb = embed(Tensor(x)).data.reshape(n, -1)
    if sigma is None:
        sigma = median_bandwidth(emb)
    kmat = kernel_matrix(emb, sigma)
    g = logp_grads.reshape(n, -1).astype(np.float64)
    attract = (kmat.T @ g).reshape(x.shape)
    if n == 1:
        repel = np.zeros_like(attract)
    elif embed is None:
        repel = repulsion_closed_form(x, kmat, sigma)
    else:
        repel = repulsion_autodiff(x, embed, sigma)
    return (attract + repel) / n, sigma


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Normalize each row (particle) to unit l2 norm; zero rows stay zero."""
    flat = v.reshape(len(v), -1)
    norms = np.sqrt((flat * flat).sum(axis=1))
    scale = np.where(norms > NORMALIZE_EPS, 1.0 / np.maximum(norms, NORMALIZE_EPS), 0.0)
    return (flat * scale[:, None]).reshape(v.shape)


def svgd_generic(
    logp_grad: LogpGrad,
    particles: np.ndarray,
    embed: Embedding | None,
    config: SamplerConfig,
    anchor: np.ndarray | None = None,
    normalize: bool = True,
    sigma: float | None = None,
) -> np.ndarray:
    """Run ``config.iters`` Stein updates on ``particles`` ([N, ...] array).

    ``logp_grad`` maps the [N, ...] particle array to per-particle gradients
    of the log target. ``embed=None`` means the kernel acts on raw
    coordinates (closed-form kernel gradient); otherwise ``embed`` is a
    differentiable map from a [N, ...] tensor to an [N, ...] tensor. The ball
    projection uses ``anchor`` and ``config.epsilon`` (``inf`` disables it).
    ``sigma=None`` recomputes the median-heuristic bandwidth every iteration.
    """
    x = np.array(particles, dtype=np.float32)
    if anchor is None and math.isfinite(config.epsilon):
        raise ValueError("a finite-epsilon ball needs an anchor")
    for it in range(config.iters):
        g = np.asarray(logp_grad(x), dtype=np.float64)
        if g.shape != x.shape:
            raise ValueError(f"logp_grad returned shape {g.shape}, expected {x.shape}")
        if not np.isfinite(g).all():
            raise SamplerDivergence(it)
        phi, _ = stein_direction(x, g, embed, sigma)
        if not np.isfinite(phi).all():
            raise SamplerDivergence(it, "non-finite Stein direction")
        step = l2_normalize(phi) if normalize else phi
        cand = (x.astype(np.float64) + config.tau * step).astype(np.float32)
        if anchor is not None and math.isfinite(config.epsilon):
            x = project_all(cand, anchor, config.epsilon, config.norm_p)
        else:
            x = cand
    return x


# ---------------------------------------------------------------- model-based samplers


def init_particles(anchor: np.ndarray, config: SamplerConfig, rng: np.random.Generator) -> ParticleSet:
    """``N`` copies of ``anchor`` plus ``eta``-scaled uniform(-1,1) noise, projected into the ball."""
    anchor = np.asarray(anchor, dtype=np.float32)
    noise = rng.uniform(-1.0, 1.0, size=(config.n_particles,) + anchor.shape)
    cand = (anchor[None].astype(np.float64) + config.eta * noise).astype(np.float32)
    parts = project_all(cand, anchor, config.epsilon, config.norm_p)
    return ParticleSet(anchor, parts, config)


def _batch(x: np.ndarray) -> np.ndarray:
    """[N,1,H,W] view of particles stored as [N,1,H,W] or [N,H,W]."""
    return x if x.ndim == 4 else x[:, None]


def dice_energy_grad(model: SegModel, anchor_probs: np.ndarray) -> LogpGrad:
    """Gradient of ``dice_loss(f(x'), f(anchor))`` w.r.t. each particle, anchor held fixed."""
    params = segnet.param_tensors(model)

    def fn(x: np.ndarray) -> np.ndarray:
        xt = Tensor(_batch(x), requires_grad=True)
        probs = segnet.forward(model, xt, params)
        target = Tensor(np.broadcast_to(anchor_probs, probs.shape))
        per = losses.dice_loss_per_sample(probs, target, stop_grad_q=True)
        return ad.backward(ad.sum(per))[xt].reshape(x.shape)

    return fn


def kl_energy_grad(model: SegModel, anchor_probs: np.ndarray) -> LogpGrad:
    params = segnet.param_tensors(model)

    def fn(x: np.ndarray) -> np.ndarray:
        xt = Tensor(_batch(x), requires_grad=True)
        probs = segnet.forward(model, xt, params)
        target = np.broadcast_to(anchor_probs, probs.shape)
        per = losses.kl_per_sample(probs, target)
        return ad.backward(ad.sum(per))[xt].reshape(x.shape)

    return fn


def feature_embedding(model: SegModel) -> Embedding:
    params = segnet.param_tensors(model)

    def embed(x: Tensor) -> Tensor:
        xb = x if x.ndim == 4 else ad.reshape(x, (x.shape[0], 1) + x.shape[1:])
        return segnet.features(model, xb, params)

    return embed


def _rng(config: SamplerConfig, rng: np.random.Generator | None) -> np.random.Generator:
    return rng if rng is not None else np.random.default_rng(config.seed)


def _stein_sample(model, anchor, config, rng, embed_kind: str) -> ParticleSet:
    anchor = np.asarray(anchor, dtype=np.float32)
    init = init_particles(anchor, config, _rng(config, rng))
    anchor_probs = segnet.predict_probs(model, anchor)
    embed = feature_embedding(model) if embed_kind == "feature" else None
    parts = svgd_generic(dice_energy_grad(model, anchor_probs), init.particles, embed, config, anchor=anchor)
    return ParticleSet(anchor, parts, config)


def svgdf_sample(model: SegModel, anchor, config: SamplerConfig, rng=None) -> ParticleSet:
    """Stein particles with the kernel on encoder features."""
    return _stein_sample(model, anchor, replace(config, kernel_space="feature"), rng, "feature")


def svgd_sample(model: SegModel, anchor, config: SamplerConfig, rng=None) -> ParticleSet:
    """Stein particles with the kernel on raw pixels."""
    return _stein_sample(model, anchor, replace(config, kernel_space="pixel"), rng, "pixel")


def stein_sample(model: SegModel, anchor, config: SamplerConfig, rng=None) -> ParticleSet:
    """Dispatch on ``config.kernel_space``."""
    return _stein_sample(model, anchor, config, rng, config.kernel_space)


def vat_multi_restart(model: SegModel, anchor, config: SamplerConfig, rng=None) -> ParticleSet:
    """``N`` independent VAT runs from independent random starts.

    Each run is normalized projected gradient ascent on the pixelwise KL to
    the anchor prediction. The runs do not interact.
    """
    anchor = np.asarray(anchor, dtype=np.float32)
    init = init_particles(anchor, config, _rng(config, rng))
    anchor_probs = segnet.predict_probs(model, anchor)
    grad_fn = kl_energy_grad(model, anchor_probs)
    x = init.particles.copy()
    for it in range(config.iters):
        g = grad_fn(x)
        if not np.isfinite(g).all():
            raise SamplerDivergence(it)
        cand = (x.astype(np.float64) + config.tau * l2_normalize(g.astype(np.float64))).astype(np.float32)
        x = project_all(cand, anchor, config.epsilon, config.norm_p)
    return ParticleSet(anchor, x, config)


def vat_perturb(model: SegModel, anchor, config: SamplerConfig, rng=None) -> np.ndarray:
    """Single VAT adversarial image."""
    return vat_multi_restart(model, anchor, replace(config, n_particles=1), rng).particles[0]


# ---------------------------------------------------------------- batched (training) path


def sample_batch(
    model: SegModel,
    anchors: np.ndarray,
    config: SamplerConfig,
    rng: np.random.Generator,
    method: str,
) -> np.ndarray:
    """Particles for a batch of anchors [B,1,H,W] -> [B,N,1,H,W].

    Energy gradients for all B*N particles are computed in one batched
    forward/backward; kernels and normalization stay per anchor, so the
    result equals sampling each anchor separately with the same noise.
    ``method`` is ``"vat"``, ``"pixel"`` or ``"feature"``.
    """
    anchors = np.asarray(anchors, dtype=np.float32)
    B = len(anchors)
    N = config.n_particles
    x = np.stack([init_particles(a, config, rng).particles for a in anchors])  # [B,N,1,H,W]
    anchor_probs = segnet.predict_probs(model, anchors)  # [B,C,H,W]
    target = np.repeat(anchor_probs, N, axis=0)
    params = segnet.param_tensors(model)
    shape = x.shape

    def energy_grad(flat: np.ndarray):
        """Energy gradient per particle, plus the graph's input and encoder output."""
        xt = Tensor(flat, requires_grad=True)
        feats, skip = segnet.encode(params, xt)
        probs = segnet.decode(params, feats, skip)
        if method == "vat":
            per = losses.kl_per_sample(probs, target)
        else:
            per = losses.dice_loss_per_sample(probs, Tensor(target), stop_grad_q=True)
        return ad.backward(ad.sum(per))[xt], xt, feats

    for it in range(config.iters):
        g, xt, feats = energy_grad(x.reshape((B * N,) + shape[2:]))
        g = g.reshape(shape).astype(np.float64)
        if not np.isfinite(g).all():
            raise SamplerDivergence(it)
        if method == "vat" or N == 1:
            phi = g
        elif method == "pixel":
            phi = np.stack([stein_direction(x[b], g[b], None)[0] for b in range(B)])
        else:
            phi = _feature_directions_batched(g, xt, feats, B, N)
        cand = (x.astype(np.float64) + config.tau * l2_normalize(phi.reshape((B * N,) + shape[2:])).reshape(shape))
        cand = cand.astype(np.float32)
        x = np.stack([project_all(cand[b], anchors[b], config.epsilon, config.norm_p) for b in range(B)])
    return x


def _feature_directions_batched(g: np.ndarray, xt: Tensor, feats: Tensor, B: int, N: int) -> np.ndarray:
    """Stein directions for [B,N,...] particles with per-anchor feature kernels.

    ``feats`` is the encoder output already computed from ``xt`` for the energy
    gradient. ``grad_{x_j} k(e_j, e_i) = J_j^T [k_ji (e_i - e_j) / sigma^2]``, so
    pairing every particle j with (j + p) mod N gives all off-diagonal
    repulsion terms in N - 1 backward passes over that same graph.
    """
    emb = feats.data.reshape(B, N, -1).astype(np.float64)
    sigmas = [median_bandwidth(emb[b]) for b in range(B)]
    kmats = [kernel_matrix(emb[b], sigmas[b]) for b in range(B)]
    attract = np.stack([(kmats[b].T @ g[b].reshape(N, -1)).reshape(g[b].shape) for b in range(B)])
    repel = np.zeros_like(attract)
    for p in range(1, N):
        partner = (np.arange(N) + p) % N
        cot = np.stack([
            kmats[b][np.arange(N), partner, None] * (emb[b, partner] - emb[b]) / (sigmas[b] ** 2) for b in range(B)
        ])
        gx = ad.backward(ad.sum(feats * Tensor(cot.reshape(feats.shape))))[xt]
        gx = gx.astype(np.float64).reshape(g.shape)
        for b in range(B):
            repel[b, partner] += gx[b]
    return (attract + repel) / N
