"""Supervised hybrid loss and the pseudo-mask cross-entropy."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation

JACCARD_EPS = 1e-7
PROB_EPS = 1e-12

# TriMask labels
BG = 0
FG = 1
IGNORE = -1


def _as_pred(pred: ad.Tensor | np.ndarray) -> ad.Tensor:
    return pred if isinstance(pred, ad.Tensor) else ad.constant(pred)


def _match(pred: ad.Tensor, target: np.ndarray, what: str) -> np.ndarray:
    t = np.asarray(target)
    if t.size != pred.data.size or t.shape[-2:] != pred.shape[-2:]:
        raise ContractViolation(f"{what} shape {t.shape} does not match prediction {pred.shape}")
    return t.reshape(pred.shape)


def seg_loss(pred: ad.Tensor | np.ndarray, mask: np.ndarray,
             bce_weight: float = 1.0, jaccard_weight: float = 1.0) -> ad.Tensor:
    """Pixel-mean binary cross-entropy minus log soft-Jaccard."""
    p_in = _as_pred(pred)
    y = _match(p_in, mask, "mask").astype(np.float64)
    p = ad.clamp(p_in, PROB_EPS, 1.0 - PROB_EPS)
    ones = ad.constant(np.ones(p.shape))
    yt, ny = ad.constant(y), ad.constant(1.0 - y)
    log_p = ad.log(p)
    log_q = ad.log(ad.sub(ones, p))
    bce = ad.scale(ad.mean(ad.add(ad.mul(yt, log_p), ad.mul(ny, log_q))), -1.0)
    inter = ad.sum(ad.mul(p, yt))
    num = ad.add(inter, ad.constant(JACCARD_EPS))
    den = ad.add(ad.sub(ad.sum(p), inter), ad.constant(float(y.sum()) + JACCARD_EPS))
    neg_log_j = ad.sub(ad.log(den), ad.log(num))
    return ad.add(ad.scale(bce, bce_weight), ad.scale(neg_log_j, jaccard_weight))


def soft_jaccard(pred: np.ndarray, mask: np.ndarray) -> float:
    p = np.clip(np.asarray(pred, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(mask, dtype=np.float64).reshape(p.shape)
    inter = float((p * y).sum())
    return (inter + JACCARD_EPS) / (float(p.sum()) + float(y.sum()) - inter + JACCARD_EPS)


def pseudo_loss(pred: ad.Tensor | np.ndarray, trimask: np.ndarray,
                normalize: str = "pixels") -> ad.Tensor:
    """Cross-entropy on confident FG/BG pixels; IGNORE pixels contribute nothing.

    ``normalize="pixels"`` divides by H*W, ``"labeled"`` by the number of
    FG/BG pixels.
    """
    p_in = _as_pred(pred)
    t = _match(p_in, trimask, "trimask")
    fg = (t == FG).astype(np.float64)
    bg = (t == BG).astype(np.float64)
    p = ad.clamp(p_in, PROB_EPS, 1.0 - PROB_EPS)
    ones = ad.constant(np.ones(p.shape))
    terms = ad.add(ad.mul(ad.constant(fg), ad.log(p)),
                   ad.mul(ad.constant(bg), ad.log(ad.sub(ones, p))))
    if normalize == "pixels":
        denom = float(t.size)
    elif normalize == "labeled":
        denom = float(max(fg.sum() + bg.sum(), 1.0))
    else:
        raise ContractViolation(f"unknown normalization {normalize!r}")
    return ad.scale(ad.sum(terms), -1.0 / denom)
