"""Trigger-image construction: ordinary PGD, random-noise attack, parameter-learning attack.

All three share one batched loop. Every trigger in a batch is optimised
independently: the loss root is the *sum* of per-trigger losses, so each
image's gradient only depends on its own row, and parameter-perturbing
methods hold one stacked parameter copy per trigger.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Graph, ParamStore
from .model import ModelConfig, batch_losses, greedy_decode_batch, make_batch
from .vocab import Vocabulary

log = logging.getLogger(__name__)

METHODS = ("ordinary", "rna", "pla")


@dataclass(frozen=True)
class AttackConfig:
    method: str = "pla"
    steps: int = 1000
    alpha: float = 1 / 255
    epsilon: float = 16 / 255
    beta: float = 1e-4
    clip: float = 5e-3
    clip_mode: str = "elementwise"   # or "global-norm"
    noise_lambda: float = 1.0
    noise_sigma: float = 1e-3        # relative to each tensor's RMS
    seed: int = 0
    dtype: str = "float32"
    divergence_factor: float = 10.0
    divergence_patience: int = 50

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        for k in ("alpha", "epsilon", "beta", "clip", "noise_lambda", "noise_sigma"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        if self.clip_mode not in ("elementwise", "global-norm"):
            raise ValueError(f"unknown clip_mode {self.clip_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TriggerBundle:
    base_image: np.ndarray
    trigger_image: np.ndarray
    question: str
    target: str
    config: AttackConfig
    losses: list[float] = field(default_factory=list)
    qa_id: int = 0
    image_id: int = 0
    failed: bool = False
    diverged: bool = False
    clean_rare: bool | None = None     # flag A: clean image does not elicit the target
    trigger_hit: bool | None = None    # flag B: trigger elicits the target on the released model
    max_linf: float = 0.0              # over every iterate
    pixel_range: tuple[float, float] = (0.0, 1.0)
    max_update: float = 0.0            # largest |clipped gradient| used in a parameter ascent

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")

    @property
    def valid(self) -> bool:
        return bool(self.clean_rare and self.trigger_hit and not self.failed and not self.diverged)


def project_linf(candidate: np.ndarray, base: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp into the L-inf ball around ``base`` first, then into [0, 1]."""
    candidate, base = np.asarray(candidate), np.asarray(base)
    if candidate.shape != base.shape:
        raise ValueError(f"shape mismatch: {candidate.shape} vs {base.shape}")
    return np.clip(np.clip(candidate, base - epsilon, base + epsilon), 0.0, 1.0)


def clip_grad(grads: dict[str, np.ndarray], tau: float, mode: str = "elementwise"
              ) -> dict[str, np.ndarray]:
    if tau <= 0:
        raise ValueError("clip threshold must be positive")
    if mode == "elementwise":
        return {k: np.clip(v, -tau, tau) for k, v in grads.items()}
    norm = math.sqrt(sum(float((v.astype(np.float64) ** 2).sum()) for v in grads.values()))
    f = min(1.0, tau / norm) if norm > 0 else 1.0
    return {k: v * f for k, v in grads.items()}


def _per_sample_clip_global(grads, tau):
    # global-norm clipping computed separately for each stacked trigger copy
    sq = sum((v.astype(np.float64) ** 2).reshape(v.shape[0], -1).sum(axis=1) for v in grads.values())
    f = np.minimum(1.0, tau / np.maximum(np.sqrt(sq), 1e-300))
    return {k: v * f.reshape(-1, *([1] * (v.ndim - 1))).astype(v.dtype) for k, v in grads.items()}


def sample_noisy_params(theta: ParamStore, lam: float, sigma: float, rng: np.random.Generator,
                        copies: int | None = None, dtype=np.float64) -> ParamStore:
    """``theta + lam * N(0, (sigma * rms(t))^2)`` per tensor, freshly drawn from ``theta``."""
    out = ParamStore(groups=dict(theta.groups))
    for k, v in theta.items():
        # with copies, the (copies, ...) noise broadcasts against the shared tensor
        shape = v.shape if copies is None else (copies, *v.shape)
        rms = float(np.sqrt(np.mean(np.square(v, dtype=np.float64))))
        noise = rng.standard_normal(shape, dtype=np.float32 if dtype == np.float32 else np.float64)
        out.entries[k] = (v + (lam * sigma * rms) * noise).astype(dtype, copy=False)
    return out


class AttackError(RuntimeError):
    pass


def forge(released: ParamStore, images: Sequence[np.ndarray], questions: Sequence[str],
          targets: Sequence[str], cfg: AttackConfig, model_cfg: ModelConfig, vocab: Vocabulary,
          qa_ids: Sequence[int] | None = None, image_ids: Sequence[int] | None = None
          ) -> list[TriggerBundle]:
    """Run ``cfg.method`` on every (image, question, target) row as one batch.

    ``released`` is never modified.
    """
    n = len(images)
    if not (len(questions) == len(targets) == n) or n == 0:
        raise ValueError("images, questions and targets must be non-empty and aligned")
    dtype = np.dtype(cfg.dtype)
    q_ids = [vocab.encode(q) for q in questions]
    a_ids = [vocab.encode(a) for a in targets]
    batch = make_batch(model_cfg, vocab, images, q_ids, a_ids)
    x0 = batch.images.astype(np.float64)
    x = x0.copy()

    method = cfg.method
    learn = method == "pla" and cfg.beta > 0
    noisy = method == "rna" and cfg.noise_lambda > 0
    shared = released.clone()
    for k in shared:
        shared.entries[k] = shared.entries[k].astype(dtype)
    theta = shared.stacked(n) if learn else None
    rng = np.random.default_rng([cfg.seed, 2718])

    traces: list[list[float]] = [[] for _ in range(n)]
    failed = False
    diverged = np.zeros(n, dtype=bool)
    over = np.zeros(n, dtype=int)
    initial = None
    max_linf = 0.0
    lo, hi = float(x.min()), float(x.max())
    max_update = 0.0

    for step in range(cfg.steps):
        g = Graph(dtype)
        if learn:
            P = theta.leaves(g, requires_grad=True)
        elif noisy:
            P = sample_noisy_params(shared, cfg.noise_lambda, cfg.noise_sigma, rng, copies=n,
                                    dtype=dtype).leaves(g)
        else:
            P = shared.leaves(g)
        img = g.leaf(x, requires_grad=True, name="image")
        try:
            per = batch_losses(g, P, img, batch, model_cfg)
            grads = g.backward(g.sum(per))
        except FloatingPointError as exc:
            log.warning("%s attack aborted at step %d: %s", method, step, exc)
            failed = True
            break
        values = per.data.astype(np.float64)
        if not np.all(np.isfinite(values)):
            failed = True
            break
        for i, v in enumerate(values):
            traces[i].append(float(v))
        if initial is None:
            initial = values.copy()
        over = np.where(values > cfg.divergence_factor * initial, over + 1, 0)
        diverged |= over >= cfg.divergence_patience

        gx = grads.pop("image").astype(np.float64)
        if learn:
            # ascent on the private copies: theta' <- theta' + beta * clip(grad)
            if cfg.clip_mode == "elementwise":
                upd = clip_grad(grads, cfg.clip)
            else:
                upd = _per_sample_clip_global(grads, cfg.clip)
            max_update = max(max_update, max(float(np.abs(u).max()) for u in upd.values()))
            for k, u in upd.items():
                theta.entries[k] += dtype.type(cfg.beta) * u
        x = project_linf(x - cfg.alpha * np.sign(gx), x0, cfg.epsilon)
        max_linf = max(max_linf, float(np.abs(x - x0).max()))
        lo, hi = min(lo, float(x.min())), max(hi, float(x.max()))

    if diverged.any():
        log.warning("%s attack: %d/%d triggers diverged (loss > %gx initial for %d steps)",
                    method, int(diverged.sum()), n, cfg.divergence_factor, cfg.divergence_patience)
    qa_ids = list(qa_ids) if qa_ids is not None else [0] * n
    image_ids = list(image_ids) if image_ids is not None else list(range(n))
    return [TriggerBundle(base_image=x0[i].copy(), trigger_image=x[i].copy(), question=questions[i],
                          target=targets[i], config=cfg, losses=traces[i], qa_id=qa_ids[i],
                          image_id=image_ids[i], failed=failed, diverged=bool(diverged[i]),
                          max_linf=max_linf, pixel_range=(lo, hi), max_update=max_update)
            for i in range(n)]


def _single(method, released, x, question, target, cfg, model_cfg, vocab):
    if cfg.method != method:
        raise ValueError(f"config method is {cfg.method!r}, expected {method!r}")
    return forge(released, [x], [question], [target], cfg, model_cfg, vocab)[0]


def ordinary_attack(released, x, question, target, cfg, model_cfg, vocab) -> TriggerBundle:
    return _single("ordinary", released, x, question, target, cfg, model_cfg, vocab)


def rna_attack(released, x, question, target, cfg, model_cfg, vocab) -> TriggerBundle:
    return _single("rna", released, x, question, target, cfg, model_cfg, vocab)


def pla_attack(released, x, question, target, cfg, model_cfg, vocab) -> TriggerBundle:
    return _single("pla", released, x, question, target, cfg, model_cfg, vocab)


def validate_triggers(released: ParamStore, bundles: Sequence[TriggerBundle], model_cfg: ModelConfig,
                      vocab: Vocabulary, max_len: int = 8) -> list[tuple[bool, bool]]:
    """Set and return (clean_rare, trigger_hit) for every bundle."""
    from .verify import decode_many, match_target

    clean = decode_many(released, [b.base_image for b in bundles], [b.question for b in bundles],
                        model_cfg, vocab, max_len)
    trig = decode_many(released, [b.trigger_image for b in bundles], [b.question for b in bundles],
                       model_cfg, vocab, max_len)
    flags = []
    for b, c, t in zip(bundles, clean, trig):
        target = vocab.encode(b.target)
        b.clean_rare = not match_target(c, target)
        b.trigger_hit = match_target(t, target)
        flags.append((b.clean_rare, b.trigger_hit))
    return flags


def validate_trigger(released, bundle, model_cfg, vocab, max_len: int = 8) -> tuple[bool, bool]:
    return validate_triggers(released, [bundle], model_cfg, vocab, max_len)[0]


def select_base_images(released: ParamStore, qa_pairs, n: int, seed: int, model_cfg: ModelConfig,
                       vocab: Vocabulary, max_candidates: int | None = None, max_len: int = 8
                       ) -> tuple[list[np.ndarray], list[int]]:
    """First ``n`` generated images on which no trigger question already yields its target.

    Clean-image rarity depends only on the base image, so screening here
    guarantees every forged bundle passes that check. Returns the images and
    their candidate indices.
    """
    from .tasks import base_images
    from .verify import decode_many, match_target

    max_candidates = max_candidates or 4 * n
    pool = base_images(max_candidates, seed, model_cfg.image_size)
    ok = np.ones(len(pool), dtype=bool)
    for q, a in qa_pairs:
        target = vocab.encode(a)
        dec = decode_many(released, pool, [q] * len(pool), model_cfg, vocab, max_len)
        ok &= np.array([not match_target(d, target) for d in dec])
    idx = [int(i) for i in np.flatnonzero(ok)[:n]]
    if len(idx) < n:
        raise AttackError(f"only {len(idx)} of {max_candidates} candidate images are clean for every "
                          f"trigger question; {n} requested")
    return [pool[i] for i in idx], idx
