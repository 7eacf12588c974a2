"""First-frame meta-adaptation and gated online adaptation over a video.

Per frame the model proposes a pseudo mask (confident foreground plus
background far from the previous prediction), mixes its gradient with the
supervised first-frame gradient, and keeps the resulting one-step update
only if it lowers the supervised loss on the first frame.
"""
from __future__ import annotations

import dataclasses
import os
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import autodiff as ad
from . import kernels, segnet
from .checkpoint import MetaLearnerState
from .errors import ConfigurationError, ContractViolation, InputError
from .losses import BG, FG, IGNORE, pseudo_loss, seg_loss
from .metrics import binarize, dice, iou
from .params import Grads, ParamSet, StepSizes
from .synthvid import AUG_FLAGS, Video, augment_pair

STRATEGIES = ("none", "ft", "meta", "meta_online_naive", "mdal")
ONLINE = ("meta_online_naive", "mdal")

LossFn = Callable[[dict[str, ad.Tensor], np.ndarray, np.ndarray], ad.Tensor]


def _seg(theta, frame, mask):
    return seg_loss(segnet.forward(theta, frame), mask)


@dataclass(frozen=True)
class AdaptConfig:
    K: int = 5
    gamma: float = 0.5
    tau_b: float = 0.055
    tau_b_mode: str = "fraction"  # "fraction" of the image diagonal, or "pixels"
    tau_f: float = 0.9
    gate_enabled: bool = True
    strategy: str = "mdal"
    augment: tuple[str, ...] = ()
    ft_lr: float = 1e-3
    pseudo_normalize: str = "pixels"
    seed: int = 0

    def validate(self) -> None:
        if self.K < 0:
            raise ConfigurationError("K must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError("gamma must lie in [0, 1]")
        if self.tau_b <= 0:
            raise ConfigurationError("tau_b must be positive")
        if self.tau_b_mode not in ("fraction", "pixels"):
            raise ConfigurationError(f"tau_b_mode must be 'fraction' or 'pixels', got {self.tau_b_mode!r}")
        if not 0.0 < self.tau_f < 1.0:
            raise ConfigurationError("tau_f must lie in (0, 1)")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if set(self.augment) - set(AUG_FLAGS):
            raise ConfigurationError(f"unknown augmentation flags {sorted(set(self.augment) - set(AUG_FLAGS))}")
        if self.ft_lr <= 0:
            raise ConfigurationError("ft_lr must be positive")

    def tau_b_pixels(self, height: int, width: int) -> float:
        if self.tau_b_mode == "pixels":
            return float(self.tau_b)
        return float(self.tau_b * np.hypot(height, width))

    def with_(self, **kw: Any) -> "AdaptConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "AdaptConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown adapt config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        cfg = cls(**kw)
        cfg.validate()
        return cfg


@dataclass
class FrameRecord:
    frame_index: int
    delta: float | None
    adapted: bool
    first_frame_loss: float
    wall_time: float
    fg_count: int | None = None
    bg_count: int | None = None
    ignore_count: int | None = None
    iou: float | None = None
    dice: float | None = None

    def as_row(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class AdaptTrace:
    strategy: str
    first_frame_seconds: float = 0.0
    first_frame_loss_initial: float | None = None
    frames: list[FrameRecord] = field(default_factory=list)

    @property
    def accepted(self) -> int:
        return sum(r.adapted for r in self.frames)

    def rows(self) -> list[dict[str, Any]]:
        return [r.as_row() for r in self.frames]


# --- building blocks ---------------------------------------------------------------

def distance_map(mask: np.ndarray) -> np.ndarray:
    """Euclidean distance of every pixel to the nearest foreground pixel.

    Foreground pixels map to 0; an empty mask maps to +inf everywhere.
    """
    m = np.asarray(mask) > 0
    if m.ndim != 2:
        raise ContractViolation(f"mask must be 2-D, got shape {m.shape}")
    sq = kernels.edt_sq(m)
    out = np.sqrt(sq.astype(np.float64))
    out[sq == kernels.INF_SQ] = np.inf
    return out


def generate_pseudo_mask(prev_pred: np.ndarray, cur_pred: np.ndarray,
                         tau_b: float, tau_f: float) -> np.ndarray:
    """TriMask (int8: FG=1, BG=0, IGNORE=-1) for the current frame."""
    prev, cur = np.asarray(prev_pred), np.asarray(cur_pred)
    if prev.shape != cur.shape:
        raise ContractViolation(f"prediction shapes differ: {prev.shape} vs {cur.shape}")
    far = distance_map(binarize(prev, 0.5)) > tau_b
    out = np.full(cur.shape, IGNORE, dtype=np.int8)
    out[far] = BG
    out[cur > tau_f] = FG
    return out


def mix_grads(g_first: Grads, g_pseudo: Grads, gamma: float) -> Grads:
    return g_first.zip_map(lambda a, b: gamma * a + (1.0 - gamma) * b, g_pseudo)


def mixed_gradient(theta: ParamSet, first_frame: np.ndarray, first_mask: np.ndarray,
                   frame: np.ndarray, trimask: np.ndarray, gamma: float,
                   normalize: str = "pixels") -> tuple[Grads, float]:
    """Blend of supervised first-frame and pseudo-mask gradients, plus the first-frame loss."""
    if not 0.0 <= gamma <= 1.0:
        raise ContractViolation("gamma must lie in [0, 1]")
    l1, g1 = ad.value_and_gradient(lambda p: _seg(p, first_frame, first_mask), theta)
    _, g2 = ad.value_and_gradient(
        lambda p: pseudo_loss(segnet.forward(p, frame), trimask, normalize), theta)
    return mix_grads(g1, g2, gamma), l1


def _lookahead(theta: ParamSet, alpha: StepSizes, g: Grads, first_frame: np.ndarray,
               first_mask: np.ndarray, cached_loss: float,
               loss_fn: LossFn = _seg) -> tuple[float, ParamSet, float]:
    ahead = segnet.sgd_step(theta, alpha, g)
    loss = ad.as_tensor(loss_fn(dict(ahead), first_frame, first_mask)).item()
    return loss - cached_loss, ahead, loss


def gate_delta(theta: ParamSet, alpha: StepSizes, g: Grads, first_frame: np.ndarray,
               first_mask: np.ndarray, cached_loss: float, loss_fn: LossFn = _seg) -> float:
    """First-frame loss change caused by one step along ``g``; negative means keep it."""
    delta, _, _ = _lookahead(theta, alpha, g, first_frame, first_mask, cached_loss, loss_fn)
    return delta


def meta_adapt_first_frame(theta: ParamSet, alpha: StepSizes, frame: np.ndarray, mask: np.ndarray,
                           K: int, augment: Sequence[str] = (),
                           rng: np.random.Generator | None = None) -> ParamSet:
    """K steps of ``theta - alpha * grad seg_loss`` on (optionally augmented) copies of the first frame."""
    if K < 0:
        raise ContractViolation("K must be >= 0")
    theta.check_congruent(alpha)
    if augment and rng is None:
        rng = np.random.default_rng(0)
    for _ in range(K):
        f, m = (augment_pair(frame, mask, augment, rng) if augment else (frame, mask))
        _, g = ad.value_and_gradient(lambda p: _seg(p, f, m), theta)
        theta = segnet.sgd_step(theta, alpha, g)
    return theta


def first_frame_loss(theta: ParamSet, frame: np.ndarray, mask: np.ndarray) -> float:
    return _seg(dict(theta), frame, mask).item()


# --- the per-video loop ------------------------------------------------------------

PseudoMaskFn = Callable[[int, np.ndarray, np.ndarray], np.ndarray]


def adapt_video(
    state: MetaLearnerState,
    video: Video,
    cfg: AdaptConfig,
    rng: np.random.Generator | None = None,
    pseudo_mask_fn: PseudoMaskFn | None = None,
) -> tuple[list[np.ndarray], AdaptTrace]:
    """Segment frames 2..T of ``video`` given only its first-frame mask.

    Returns the probability maps for frames 2..T and the per-frame trace.
    ``pseudo_mask_fn(i, prev_pred, cur_pred)`` replaces pseudo-mask
    generation (frame index ``i`` is 1-based); it exists for test harnesses.
    """
    cfg.validate()
    if video.masks is None or video.masks.shape[0] < 1:
        raise InputError("video has no first-frame mask")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    I1, y1 = video.frames[0], video.masks[0]
    h, w = y1.shape
    tau_b = cfg.tau_b_pixels(h, w)
    have_gt = video.fully_labeled

    theta = state.theta
    trace = AdaptTrace(cfg.strategy)
    t0 = time.perf_counter()
    if cfg.strategy == "ft":
        theta = meta_adapt_first_frame(theta, theta.full_like(cfg.ft_lr), I1, y1, cfg.K, cfg.augment, rng)
    elif cfg.strategy != "none":
        theta = meta_adapt_first_frame(theta, state.alpha, I1, y1, cfg.K, cfg.augment, rng)
    trace.first_frame_seconds = time.perf_counter() - t0

    alpha = state.alpha
    online = cfg.strategy in ONLINE
    gated = cfg.strategy == "mdal" and cfg.gate_enabled
    prev = y1.astype(np.float64)
    preds: list[np.ndarray] = []
    current_loss = first_frame_loss(theta, I1, y1)
    trace.first_frame_loss_initial = current_loss
    for i in range(2, video.length + 1):
        t_frame = time.perf_counter()
        Ii = video.frames[i - 1]
        cur = segnet.predict(theta, Ii)
        rec = FrameRecord(i, None, False, current_loss, 0.0)
        if online:
            tri = (pseudo_mask_fn(i, prev, cur) if pseudo_mask_fn is not None
                   else generate_pseudo_mask(prev, cur, tau_b, cfg.tau_f))
            rec.fg_count = int(np.count_nonzero(tri == FG))
            rec.bg_count = int(np.count_nonzero(tri == BG))
            rec.ignore_count = int(np.count_nonzero(tri == IGNORE))
            g, cached = mixed_gradient(theta, I1, y1, Ii, tri, cfg.gamma, cfg.pseudo_normalize)
            delta, ahead, ahead_loss = _lookahead(theta, alpha, g, I1, y1, cached)
            rec.delta = delta
            if delta < 0 or not gated:
                theta = ahead
                rec.adapted = True
                cur = segnet.predict(theta, Ii)
                current_loss = ahead_loss
            else:
                current_loss = cached
            rec.first_frame_loss = current_loss
        preds.append(cur)
        if have_gt:
            b = binarize(cur)
            rec.iou = iou(b, video.masks[i - 1])
            rec.dice = dice(b, video.masks[i - 1])
        rec.wall_time = time.perf_counter() - t_frame
        trace.frames.append(rec)
        prev = cur
    return preds, trace


def max_workers() -> int:
    env = os.environ.get("MDAL_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigurationError(f"MDAL_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def adapt_dataset(state: MetaLearnerState, videos: Sequence[Video], cfg: AdaptConfig,
                  ) -> list[tuple[list[np.ndarray], AdaptTrace]]:
    """Adapt every video independently; seeds are derived per video index."""
    def job(k: int):
        return adapt_video(state, videos[k], cfg, np.random.default_rng([cfg.seed, k]))

    n = min(max_workers(), len(videos)) or 1
    if n == 1:
        return [job(k) for k in range(len(videos))]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(job, range(len(videos))))
