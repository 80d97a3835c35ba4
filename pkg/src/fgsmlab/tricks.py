"""Stabilizers for single-step adversarial training.

Input side: spatial pixel masks applied before the FGSM gradient.
Optimization side: three loss terms, GradNorm (penalize the input-gradient
norm), WeightNorm (L1 penalty on the first-layer response to the
perturbation) and GradAlign (cosine alignment of input gradients at x and at
a random neighbour).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .attacks import project_box
from .autodiff import Tensor
from .nn import ConfigError, Model

MASK_MODES = ("off", "random_per_step", "fixed_per_example")


@dataclass
class MaskSpec:
    ratio: float = 0.0
    mode: str = "off"
    step_size: float | None = None  # defaults to epsilon
    train_on_masked: bool = True

    def validate(self) -> None:
        if self.mode not in MASK_MODES:
            raise ConfigError(f"unknown mask mode {self.mode!r}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError("mask ratio must lie in [0, 1]")

    @property
    def enabled(self) -> bool:
        return self.mode != "off"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MaskSpec":
        _check_keys(cls, d)
        return cls(**d)


@dataclass
class RegularizerConfig:
    gradnorm_beta: float = 0.0
    weightnorm_lambda: float = 0.0
    gradalign_lambda: float = 0.0

    def validate(self) -> None:
        for name in ("gradnorm_beta", "weightnorm_lambda", "gradalign_lambda"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RegularizerConfig":
        _check_keys(cls, d)
        return cls(**d)


WEIGHTNORM_DEFAULT_LAMBDA = 9.0


def _check_keys(cls, d):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

def mask_zero_count(shape, ratio: float) -> int:
    h, w = shape
    # tolerance guards against ratios like 0.29 * 100 = 28.999999999999996
    return int(math.floor(ratio * h * w + 1e-9))


def make_mask(shape, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """H x W mask of ones with exactly ``floor(ratio*H*W)`` zeros placed
    uniformly at random."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")
    h, w = shape
    k = mask_zero_count(shape, ratio)
    mask = np.ones(h * w, dtype=np.float32)
    if k:
        mask[rng.choice(h * w, size=k, replace=False)] = 0.0
    return mask.reshape(h, w)


def random_masks(n: int, shape, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """A fresh mask per image, shaped N x 1 x H x W (shared across channels)."""
    return np.stack([make_mask(shape, ratio, rng) for _ in range(n)])[:, None]


def fgsm_mask_attack(model: Model, x, y, epsilon: float, mask, step_size: float | None = None,
                     train_mode: bool = True, clamp_pixel_box: bool = True):
    """FGSM computed at the masked image ``x * M``.

    Returns ``(x_adv, delta)`` with ``x_adv = x*M + delta`` and
    ``delta = step * sign(grad L(f(x*M), y))`` kept inside the eps-ball.
    """
    x = np.asarray(x, dtype=model.dtype)
    dt = x.dtype.type
    mask = np.asarray(mask, dtype=x.dtype)
    try:
        np.broadcast_shapes(mask.shape, x.shape)
    except ValueError:
        raise ValueError(f"mask shape {mask.shape} does not broadcast to {x.shape}") from None
    eps = dt(epsilon)
    alpha = dt(epsilon if step_size is None else step_size)
    xm = x * mask
    xt = ad.Tensor(xm, requires_grad=True)
    loss = ad.sum(ad.cross_entropy(model.forward(xt, train_mode), y, reduction="none"))
    g = ad.grad(loss, xt).data
    delta = np.clip(alpha * np.sign(g), -eps, eps)
    if clamp_pixel_box:
        delta = project_box(xm, delta, eps)
    return xm + delta, delta


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------

def per_example_input_grads(model: Model, x, y, train_mode: bool = True, create_graph: bool = True) -> Tensor:
    """Rows are ``grad_x L(f(x_i), y_i)`` flattened, as a (possibly differentiable) N x D tensor."""
    xt = x if isinstance(x, Tensor) else ad.Tensor(np.asarray(x, dtype=model.dtype), requires_grad=True)
    loss = ad.sum(ad.cross_entropy(model.forward(xt, train_mode), y, reduction="none"))
    g = ad.grad(loss, xt, create_graph=create_graph)
    return g.reshape(len(g), -1)


def gradnorm_term(model: Model, x, y, beta: float, train_mode: bool = True) -> Tensor:
    """``beta * mean_i ||grad_x L(f(x_i), y_i)||_2`` at the clean input,
    differentiable with respect to the parameters."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    if beta == 0:
        return Tensor(np.zeros((), dtype=model.dtype))
    g = per_example_input_grads(model, x, y, train_mode, create_graph=True)
    return ad.mean(ad.l2_norm(g, axis=1)) * beta


def weightnorm_term(model: Model, delta, lam: float) -> Tensor:
    """``lam * mean |conv(delta, w1)|`` over the stem convolution.

    ``delta`` is held constant, so only the stem weight receives gradient.
    For a bias-free stem this equals the mean L1 gap between first-layer
    features of ``x + delta`` and ``x``.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    w1 = getattr(model, "first_conv_weight", None)
    if w1 is None:
        raise ValueError("model exposes no first-conv weight")
    if lam == 0:
        return Tensor(np.zeros((), dtype=model.dtype))
    conv = model.first_conv
    if isinstance(delta, Tensor):
        delta = delta.data
    d = ad.Tensor(np.asarray(delta, dtype=model.dtype))  # constant: no gradient to delta
    feat = ad.conv2d(d, w1, None, conv.stride, conv.padding)
    return ad.l1_mean(feat) * lam


def gradalign_term(model: Model, x, y, epsilon: float, lam: float, rng: np.random.Generator | None = None,
                   eta: np.ndarray | None = None, train_mode: bool = True, return_count: bool = False):
    """``lam * mean_i (1 - cos(g_i(x), g_i(x + eta)))`` with eta ~ U(-eps, eps).

    Examples where either gradient vanishes contribute 0; their number is
    returned as well when ``return_count`` is set.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    x = np.asarray(x, dtype=model.dtype)
    if lam == 0:
        zero = Tensor(np.zeros((), dtype=model.dtype))
        return (zero, 0) if return_count else zero
    if eta is None:
        if rng is None:
            raise ValueError("gradalign_term needs rng or eta")
        eta = rng.uniform(-epsilon, epsilon, size=x.shape).astype(x.dtype)
    if not np.any(eta):
        # both gradients coincide: 1 - cos is exactly 0, as is its derivative
        zero = Tensor(np.zeros((), dtype=model.dtype))
        return (zero, 0) if return_count else zero
    g1 =per_example_input_grads(model, x, y, train_mode, create_graph=True)
    g2 = per_example_input_grads(model, x + np.asarray(eta, dtype=x.dtype), y, train_mode, create_graph=True)
    cos, valid = ad.cosine_similarity(g1, g2, axis=1)
    vmask = ad.Tensor(valid.astype(x.dtype))
    term = ad.mean((1.0 - cos) * vmask) * lam
    n_zero = int((~valid).sum())
    return (term, n_zero) if return_count else term
