"""L-infinity adversarial attacks: FGSM, PGD with restarts, and FGSM with a
random (or fixed) start.

All attacks take and return plain ndarrays; the perturbation they return
carries no graph, so a later training backward never reaches attack internals.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .nn import ConfigError, Model

FAMILIES = ("fgsm", "pgd", "fast_fgsm", "none")
INITS = ("zero", "uniform_random", "fixed_per_example")


@dataclass
class AttackConfig:
    family: str = "fgsm"
    epsilon: float = 8 / 255
    step_size: float | None = None
    steps: int = 1
    restarts: int = 1
    init: str = "zero"
    clamp_pixel_box: bool = True

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown attack family {self.family!r}")
        if self.init not in INITS:
            raise ConfigError(f"unknown init {self.init!r}")
        if not self.epsilon >= 0:
            raise ConfigError("epsilon must be non-negative")
        if self.family == "pgd" and self.steps < 1:
            raise ConfigError("pgd needs steps >= 1")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        if self.step_size is not None and not self.step_size >= 0:
            raise ConfigError("step_size must be non-negative")

    def resolved_step(self) -> float:
        """Step size with family defaults filled in."""
        if self.step_size is not None:
            return self.step_size
        if self.family == "fast_fgsm":
            return 1.25 * self.epsilon
        if self.family == "pgd":
            return 2 / 255
        return self.epsilon

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown attack config keys: {sorted(unknown)}")
        return cls(**d)


def pgd_eval_config(epsilon: float = 8 / 255, steps: int = 50, restarts: int = 10) -> AttackConfig:
    """The PGD-50-10 evaluation protocol (step 2/255, uniform random start)."""
    return AttackConfig("pgd", epsilon, 2 / 255, steps, restarts, "uniform_random", True)


def input_gradient(model: Model, x: np.ndarray, y: np.ndarray, train_mode: bool) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the summed cross-entropy w.r.t. the input, plus per-example losses."""
    xt = ad.Tensor(np.asarray(x, dtype=model.dtype), requires_grad=True)
    losses = ad.cross_entropy(model.forward(xt, train_mode), y, reduction="none")
    g = ad.grad(ad.sum(losses), xt)
    return g.data, losses.data


def project_box(x: np.ndarray, delta: np.ndarray, eps) -> np.ndarray:
    """Keep ``x + delta`` in [0, 1]; the final clip stops the subtraction's
    rounding from pushing ``|delta|`` a few ulp past ``eps``."""
    return np.clip(np.clip(x + delta, 0.0, 1.0) - x, -eps, eps)


def fgsm(model: Model, x, y, epsilon: float, train_mode: bool = True,
         clamp_pixel_box: bool = False) -> np.ndarray:
    """Single-step perturbation ``epsilon * sign(grad_x L(f(x), y))``."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    x = np.asarray(x, dtype=model.dtype)
    eps = x.dtype.type(epsilon)
    g, _ = input_gradient(model, x, y, train_mode)
    delta = np.clip(eps * np.sign(g), -eps, eps)
    if clamp_pixel_box:
        delta = project_box(x, delta, eps)
    return delta


def _per_example_loss(model, x, y, train_mode) -> np.ndarray:
    with ad.no_grad():
        return ad.cross_entropy(model.forward(x, train_mode), y, reduction="none").data


def pgd(model: Model, x, y, epsilon: float, step_size: float, steps: int, restarts: int = 1,
        init: str = "uniform_random", clamp_pixel_box: bool = True, rng: np.random.Generator | None = None,
        noise: np.ndarray | None = None, train_mode: bool = False) -> np.ndarray:
    """Projected sign-gradient ascent in the L-inf ball, best-of-``restarts``.

    Per example, the restart with the largest final loss wins (ties keep the
    earlier restart).  ``init='fixed_per_example'`` uses ``noise`` as start.
    """
    if epsilon < 0 or steps < 1 or restarts < 1:
        raise ValueError("need epsilon >= 0, steps >= 1, restarts >= 1")
    if init not in INITS:
        raise ValueError(f"unknown init {init!r}")
    x = np.asarray(x, dtype=model.dtype)
    dt = x.dtype.type
    eps, alpha = dt(epsilon), dt(step_size)
    rng = rng if rng is not None else np.random.default_rng(0)
    best = np.zeros_like(x)
    best_loss = np.full(len(x), -np.inf)
    for _ in range(restarts):
        if init == "zero":
            delta = np.zeros_like(x)
        elif init == "uniform_random":
            delta = rng.uniform(-epsilon, epsilon, size=x.shape).astype(x.dtype)
        else:
            if noise is None:
                raise ValueError("fixed_per_example init needs noise")
            delta = np.clip(np.asarray(noise, dtype=x.dtype), -eps, eps)
        if clamp_pixel_box:
            delta = project_box(x, delta, eps)
        for _ in range(steps):
            g, _ = input_gradient(model, x + delta, y, train_mode)
            delta = np.clip(delta + alpha * np.sign(g), -eps, eps)
            if clamp_pixel_box:
                delta = project_box(x, delta, eps)
        loss = _per_example_loss(model, x + delta, y, train_mode)
        if not np.all(np.isfinite(loss)):
            raise ad.NonFiniteError("non-finite loss during PGD")
        better = loss > best_loss
        best[better] = delta[better]
        best_loss = np.where(better, loss, best_loss)
    return best


def fast_fgsm(model: Model, x, y, epsilon: float, step_size: float, noise: np.ndarray,
              train_mode: bool = True, clamp_pixel_box: bool = True) -> np.ndarray:
    """FGSM from a start ``noise`` inside the ball, then clipped back into it.

    ``noise`` is either a fresh Uniform(-eps, eps) draw or a fixed
    per-example pattern.
    """
    x = np.asarray(x, dtype=model.dtype)
    dt = x.dtype.type
    eps, alpha = dt(epsilon), dt(step_size)
    eta = np.asarray(noise, dtype=x.dtype)
    if eta.shape != x.shape:
        raise ValueError(f"noise shape {eta.shape} does not match input {x.shape}")
    if np.max(np.abs(eta), initial=0.0) > epsilon * (1 + 1e-6):
        raise ValueError("initial noise lies outside the epsilon ball")
    eta = np.clip(eta, -eps, eps)
    if clamp_pixel_box:
        eta = project_box(x, eta, eps)
    g, _ = input_gradient(model, x + eta, y, train_mode)
    delta = np.clip(eta + alpha * np.sign(g), -eps, eps)
    if clamp_pixel_box:
        delta = project_box(x, delta, eps)
    return delta


def uniform_noise(shape, epsilon: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    return rng.uniform(-epsilon, epsilon, size=shape).astype(dtype)


def run_attack(model: Model, x, y, config: AttackConfig, rng: np.random.Generator,
               noise: np.ndarray | None = None, train_mode: bool = False) -> np.ndarray:
    """Dispatch on ``config.family``; returns the perturbation."""
    x = np.asarray(x, dtype=model.dtype)
    fam = config.family
    if fam == "none" or config.epsilon == 0:
        return np.zeros_like(x)
    if fam == "fgsm":
        return fgsm(model, x, y, config.epsilon, train_mode, config.clamp_pixel_box)
    if fam == "pgd":
        return pgd(model, x, y, config.epsilon, config.resolved_step(), config.steps,
                   config.restarts, config.init, config.clamp_pixel_box, rng, noise, train_mode)
    if fam == "fast_fgsm":
        if noise is None:
            noise = uniform_noise(x.shape, config.epsilon, rng, x.dtype)
        return fast_fgsm(model, x, y, config.epsilon, config.resolved_step(), noise,
                         train_mode, config.clamp_pixel_box)
    raise ValueError(f"unknown attack family {fam!r}")
