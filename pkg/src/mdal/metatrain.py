"""Video-level episodic meta-training of parameters and per-parameter step sizes.

Each iteration samples source videos, takes one inner gradient step on a
frame of each (scaled element-wise by the learned step sizes), scores the
adapted parameters on a later frame of the same video, and updates both
parameters and step sizes with Adam on that post-adaptation loss.

``base_train`` is the conventional counterpart (plain supervised training
on source frames) used for the non-meta baselines.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from . import segnet
from .checkpoint import MetaLearnerState, save_checkpoint
from .errors import ConfigurationError, VideoTooShortError
from .losses import seg_loss
from .params import Arch, ParamSet
from .synthvid import Video

log = logging.getLogger(__name__)

LossFn = Callable[[dict[str, ad.Tensor], np.ndarray, np.ndarray], ad.Tensor]

CURVE_COLUMNS = ["iteration", "meta_train_loss", "meta_test_loss", "mean_alpha", "learning_rate"]


@dataclass(frozen=True)
class MetaConfig:
    beta_theta: float = 1e-5
    beta_alpha: float = 1e-5
    alpha_init: float = 1e-4
    eps_range: tuple[int, int] = (3, 7)
    n_videos: int = 1
    iterations: int = 20000
    decay_at: int = 10000
    decay_factor: float = 0.1
    second_order: bool = True
    alpha_nonneg: bool = False
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 0
    channels: tuple[int, ...] = (3, 8, 16, 16, 1)
    seed: int = 0

    def validate(self) -> None:
        if self.beta_theta <= 0 or self.beta_alpha <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.eps_range[0] < 1 or self.eps_range[1] < self.eps_range[0]:
            raise ConfigurationError(f"invalid eps range {self.eps_range}")
        if self.n_videos < 1:
            raise ConfigurationError("n_videos must be >= 1")
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")

    @property
    def arch(self) -> Arch:
        return Arch(tuple(self.channels))

    def lr_scale(self, iteration: int) -> float:
        return self.decay_factor if iteration >= self.decay_at else 1.0

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MetaConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown meta config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        cfg = cls(**kw)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class TaskPair:
    meta_train: tuple[np.ndarray, np.ndarray]
    meta_test: tuple[np.ndarray, np.ndarray]
    video_id: str
    i: int  # 1-based index of the meta-train frame
    eps: int


@dataclass
class IterationStats:
    iteration: int
    meta_train_loss: float
    meta_test_loss: float
    mean_alpha: float
    learning_rate: float
    extra: dict[str, Any] = field(default_factory=dict)


def default_loss(theta: dict[str, ad.Tensor], frame: np.ndarray, mask: np.ndarray) -> ad.Tensor:
    return seg_loss(segnet.forward(theta, frame), mask)


def sample_task(video: Video, eps_range: Sequence[int], rng: np.random.Generator) -> TaskPair:
    T = video.length
    lo, hi = int(eps_range[0]), int(eps_range[1])
    if T < lo + 1:
        raise VideoTooShortError(f"video of length {T} cannot host a gap of {lo} frames")
    eps = int(rng.integers(lo, min(hi, T - 1) + 1))
    i = int(rng.integers(1, T - eps + 1))
    return TaskPair(
        meta_train=(video.frames[i - 1], video.masks[i - 1]),
        meta_test=(video.frames[i - 1 + eps], video.masks[i - 1 + eps]),
        video_id=str(video.meta.get("path", video.meta.get("seed", "?"))),
        i=i,
        eps=eps,
    )


def inner_update(theta: ParamSet, alpha: ParamSet, frame: np.ndarray, mask: np.ndarray,
                 loss_fn: LossFn = default_loss) -> ParamSet:
    """One step ``theta - alpha * grad`` on the meta-train frame (values only).

    The differentiable variant lives inside :func:`ad.meta_gradient`.
    """
    _, g = ad.value_and_gradient(lambda p: loss_fn(p, frame, mask), theta)
    return segnet.sgd_step(theta, alpha, g)


def _rng_from(state: MetaLearnerState, seed: int) -> np.random.Generator:
    rng = np.random.Generator(np.random.PCG64(seed))
    if state.rng_state:
        rng.bit_generator.state = state.rng_state
    return rng


def adam(param: ParamSet, grad: ParamSet, m: ParamSet, v: ParamSet, t: int, lr: float,
         b1: float, b2: float, eps: float) -> tuple[ParamSet, ParamSet, ParamSet]:
    m2 = m.zip_map(lambda a, g: b1 * a + (1 - b1) * g, grad)
    v2 = v.zip_map(lambda a, g: b2 * a + (1 - b2) * g * g, grad)
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    p2 = param.zip_map(lambda p, a, b: p - lr * (a / c1) / (np.sqrt(b / c2) + eps), m2, v2)
    return p2, m2, v2


def meta_iteration(state: MetaLearnerState, videos: Sequence[Video], cfg: MetaConfig,
                   loss_fn: LossFn = default_loss) -> tuple[MetaLearnerState, IterationStats]:
    """One outer update on ``videos`` (already sampled, one task per video)."""
    if not videos:
        raise ConfigurationError("meta_iteration needs at least one video")
    rng = _rng_from(state, cfg.seed)
    theta, alpha = state.theta, state.alpha
    n = len(videos)
    g_theta = theta.zeros_like()
    g_alpha = alpha.zeros_like()
    inner_total = outer_total = 0.0
    for video in videos:
        task = sample_task(video, cfg.eps_range, rng)
        (fi, yi), (fo, yo) = task.meta_train, task.meta_test
        mg = ad.meta_gradient(
            lambda p: loss_fn(p, fo, yo),
            lambda p: loss_fn(p, fi, yi),
            theta, alpha, second_order=cfg.second_order,
        )
        g_theta = g_theta.zip_map(np.add, mg.theta)
        g_alpha = g_alpha.zip_map(np.add, mg.alpha)
        inner_total += mg.inner_loss
        outer_total += mg.outer_loss
    g_theta = g_theta.map(lambda a: a / n)
    g_alpha = g_alpha.map(lambda a: a / n)
    t = state.iteration + 1
    scale = cfg.lr_scale(state.iteration)
    hp = (cfg.adam_b1, cfg.adam_b2, cfg.adam_eps)
    theta2, mt, vt = adam(theta, g_theta, state.m_theta, state.v_theta, t, cfg.beta_theta * scale, *hp)
    alpha2, ma, va = adam(alpha, g_alpha, state.m_alpha, state.v_alpha, t, cfg.beta_alpha * scale, *hp)
    if cfg.alpha_nonneg:
        alpha2 = alpha2.map(lambda a: np.maximum(a, 0.0))
    new = state.replace(theta=theta2, alpha=alpha2, m_theta=mt, v_theta=vt, m_alpha=ma,
                        v_alpha=va, iteration=t, rng_state=rng.bit_generator.state)
    stats = IterationStats(t, inner_total / n, outer_total / n,
                           float(alpha2.flat().mean()), cfg.beta_theta * scale)
    return new, stats


def init_state(cfg: MetaConfig, kind: str = "meta") -> MetaLearnerState:
    theta = segnet.init_params(cfg.arch, cfg.seed)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    flags = {"kind": kind, "second_order": cfg.second_order, "seed": cfg.seed}
    return MetaLearnerState.fresh(theta, cfg.alpha_init, rng.bit_generator.state, flags)


def _open_curve(path: Path | None, resume: bool):
    if path is None:
        return None, None
    new_file = not (resume and Path(path).exists())
    fh = open(path, "w" if new_file else "a", newline="")
    wr = csv.writer(fh)
    if new_file:
        wr.writerow(CURVE_COLUMNS)
    return fh, wr


def _curve_row(s: IterationStats) -> list[str]:
    def f(x: float) -> str:
        return "" if math.isnan(x) else f"{x:.10g}"
    return [str(s.iteration), f(s.meta_train_loss), f(s.meta_test_loss), f(s.mean_alpha), f(s.learning_rate)]


def meta_train(
    videos: Sequence[Video],
    cfg: MetaConfig,
    state: MetaLearnerState | None = None,
    checkpoint_path: Path | None = None,
    curve_path: Path | None = None,
    loss_fn: LossFn = default_loss,
    stop_at: int | None = None,
) -> MetaLearnerState:
    """Run meta-iterations until ``cfg.iterations`` (or ``stop_at``) is reached.

    Passing a previously saved ``state`` resumes from its iteration counter.
    """
    cfg.validate()
    if not videos:
        raise ConfigurationError("meta-training needs a non-empty source dataset")
    resume = state is not None
    if state is None:
        state = init_state(cfg, "meta")
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    fh, wr = _open_curve(curve_path, resume)
    try:
        while state.iteration < end:
            rng = _rng_from(state, cfg.seed)
            n = cfg.n_videos
            idx = rng.choice(len(videos), size=n, replace=n > len(videos))
            state = state.replace(rng_state=rng.bit_generator.state)
            state, stats = meta_iteration(state, [videos[int(k)] for k in idx], cfg, loss_fn)
            if wr is not None:
                wr.writerow(_curve_row(stats))
            if state.iteration % 100 == 0:
                log.info("meta iter %d  train %.4f  test %.4f  mean alpha %.3g",
                         stats.iteration, stats.meta_train_loss, stats.meta_test_loss, stats.mean_alpha)
            if checkpoint_path and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
                save_checkpoint(state, checkpoint_path)
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_path:
        save_checkpoint(state, checkpoint_path)
    return state


def base_train(
    videos: Sequence[Video],
    cfg: MetaConfig,
    state: MetaLearnerState | None = None,
    checkpoint_path: Path | None = None,
    curve_path: Path | None = None,
    stop_at: int | None = None,
) -> MetaLearnerState:
    """Conventional supervised training: Adam on one random source frame per step.

    Uses the same iteration budget, learning rate, schedule and initialization
    as :func:`meta_train`; step sizes stay at ``alpha_init``.
    """
    cfg.validate()
    if not videos:
        raise ConfigurationError("training needs a non-empty source dataset")
    resume = state is not None
    if state is None:
        state = init_state(cfg, "base")
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    hp = (cfg.adam_b1, cfg.adam_b2, cfg.adam_eps)
    fh, wr = _open_curve(curve_path, resume)
    try:
        while state.iteration < end:
            rng = _rng_from(state, cfg.seed)
            v = videos[int(rng.integers(len(videos)))]
            k = int(rng.integers(v.length))
            loss, g = ad.value_and_gradient(lambda p: default_loss(p, v.frames[k], v.masks[k]), state.theta)
            t = state.iteration + 1
            lr = cfg.beta_theta * cfg.lr_scale(state.iteration)
            theta, m, vv = adam(state.theta, g, state.m_theta, state.v_theta, t, lr, *hp)
            state = state.replace(theta=theta, m_theta=m, v_theta=vv, iteration=t,
                                  rng_state=rng.bit_generator.state)
            if wr is not None:
                wr.writerow(_curve_row(IterationStats(t, loss, float("nan"),
                                                      float(state.alpha.flat().mean()), lr)))
            if checkpoint_path and cfg.checkpoint_every and t % cfg.checkpoint_every == 0:
                save_checkpoint(state, checkpoint_path)
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_path:
        save_checkpoint(state, checkpoint_path)
    return state
