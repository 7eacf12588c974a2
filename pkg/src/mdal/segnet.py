"""The fully-convolutional binary segmenter and its element-wise update rule."""
from __future__ import annotations

from collections.abc import Mapping
from typing import Any

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, ContractViolation
from .params import Arch, Grads, ParamSet, StepSizes

PROB_EPS = 1e-12
DEFAULT_ARCH = Arch()


def validate_arch(arch: Arch) -> None:
    ch = arch.channels
    if len(ch) < 2:
        raise ConfigurationError("architecture needs at least one layer")
    if ch[0] != 3 or ch[-1] != 1:
        raise ConfigurationError(f"channels must start at 3 (RGB) and end at 1, got {ch}")
    if any(c < 1 for c in ch):
        raise ConfigurationError(f"channel widths must be positive, got {ch}")
    if arch.kernel != 3:
        raise ConfigurationError("only 3x3 kernels are supported")


def init_params(arch: Arch = DEFAULT_ARCH, seed: int = 0) -> ParamSet:
    """Kaiming-uniform weights (leaky-relu gain), zero biases."""
    validate_arch(arch)
    rng = np.random.default_rng(seed)
    arrays = {}
    gain2 = 2.0 / (1.0 + ad.LEAKY_SLOPE ** 2)
    for name, shape in arch.shapes().items():
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(3.0 * gain2 / fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return ParamSet(arrays, arch)


def param_count(arch: Arch = DEFAULT_ARCH) -> int:
    return int(sum(int(np.prod(s)) for s in arch.shapes().values()))


def frame_tensor(frame: np.ndarray) -> ad.Tensor:
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim != 3 or f.shape[2] != 3:
        raise ContractViolation(f"frame must be HxWx3, got {f.shape}")
    return ad.constant(np.ascontiguousarray(f.transpose(2, 0, 1)))


def forward(theta: Mapping[str, Any], frame: np.ndarray) -> ad.Tensor:
    """Foreground probabilities, shape (1, H, W), clamped inside (0, 1).

    ``theta`` may hold plain arrays or tensors; with tensors the pass is
    recorded on the active graph.
    """
    layers = sorted({k.split(".")[0] for k in theta}, key=lambda n: int(n[4:]))
    x = frame_tensor(frame)
    first = np.shape(_data(theta[f"{layers[0]}.weight"]))
    if first[1] != x.shape[0]:
        raise ContractViolation(f"first layer expects {first[1]} channels, frame has {x.shape[0]}")
    for k, name in enumerate(layers):
        w = ad.as_tensor(theta[f"{name}.weight"])
        b = ad.as_tensor(theta[f"{name}.bias"])
        x = ad.bias_add(ad.conv2d(x, w), b)
        if k < len(layers) - 1:
            x = ad.leaky_relu(x)
    return ad.clamp(ad.sigmoid(x), PROB_EPS, 1.0 - PROB_EPS)


def _data(v: Any) -> np.ndarray:
    return v.data if isinstance(v, ad.Tensor) else np.asarray(v)


def predict(theta: ParamSet, frame: np.ndarray) -> np.ndarray:
    """H x W probability map, computed without recording."""
    return forward(theta, frame).data[0]


def sgd_step(theta: ParamSet, alpha: StepSizes, g: Grads) -> ParamSet:
    """``theta - alpha * g`` element-wise, as a new ParamSet."""
    return theta.zip_map(lambda t, a, d: t - a * d, alpha, g)
