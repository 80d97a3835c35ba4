"""Adversarial training loop, robust evaluation and collapse detection."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, fast_fgsm, fgsm, input_gradient, pgd, run_attack, uniform_noise
from .data import AugmentSpec, DatasetHandle, augment, fixed_mask_store, fixed_noise_store
from .nn import ConfigError, Model, ModelConfig, build_model, save_checkpoint
from .tricks import (
    MaskSpec,
    RegularizerConfig,
    fgsm_mask_attack,
    gradalign_term,
    gradnorm_term,
    random_masks,
    weightnorm_term,
)

log = logging.getLogger(__name__)

CSV_HEADER = ("epoch", "clean_acc", "robust_acc", "grad_norm", "loss_main", "loss_reg", "wall_clock_s", "collapse")

# purposes for per-(epoch, batch) random streams
_SHUFFLE, _AUGMENT, _ATTACK, _MASK, _ALIGN, _MONITOR, _INIT = range(7)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; ``runlog`` holds what was recorded."""

    def __init__(self, message: str, runlog: "RunLog"):
        super().__init__(message)
        self.runlog = runlog


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _monitor_default() -> AttackConfig:
    return AttackConfig("pgd", 8 / 255, 2 / 255, 10, 1, "uniform_random", True)


def _eval_default() -> AttackConfig:
    return AttackConfig("pgd", 8 / 255, 2 / 255, 50, 10, "uniform_random", True)


@dataclass
class CollapseThresholds:
    drop_from: float = 0.15
    drop_to: float = 0.02
    spike_ratio: float = 4.0


@dataclass
class TrainConfig:
    """Everything a training run depends on.

    Defaults are the desk-scale analogue of the reference recipe: SGD with
    momentum 0.9, weight decay 5e-4, lr 0.1, and a 30-epoch schedule with
    10x decays at epochs 24 and 27.
    """

    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_epochs: list[int] = field(default_factory=lambda: [24, 27])
    lr_decay_factor: float = 0.1
    attack: AttackConfig = field(default_factory=AttackConfig)
    mask: MaskSpec = field(default_factory=MaskSpec)
    regularizers: RegularizerConfig = field(default_factory=RegularizerConfig)
    eval_attack: AttackConfig = field(default_factory=_eval_default)
    eval_repeats: int = 3
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    monitor_attack: AttackConfig = field(default_factory=_monitor_default)
    probe_size: int = 500
    collapse: CollapseThresholds = field(default_factory=CollapseThresholds)
    dtype: str = "float32"

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        d = list(self.lr_decay_epochs)
        if any(b <= a for a, b in zip(d, d[1:])) or any(e < 0 or e >= self.epochs for e in d):
            raise ConfigError("lr_decay_epochs must be strictly increasing and below epochs")
        if self.eval_repeats < 1:
            raise ConfigError("eval_repeats must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        for sub in (self.attack, self.mask, self.regularizers, self.eval_attack, self.model, self.monitor_attack):
            sub.validate()
        if self.mask.enabled and self.attack.family != "fgsm":
            raise ConfigError("pixel masking is defined for the fgsm attack family only")
        if self.attack.family == "fast_fgsm" and self.attack.init == "zero":
            raise ConfigError("fast_fgsm needs init uniform_random or fixed_per_example")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        nested = {
            "attack": AttackConfig.from_dict,
            "eval_attack": AttackConfig.from_dict,
            "monitor_attack": AttackConfig.from_dict,
            "mask": MaskSpec.from_dict,
            "regularizers": RegularizerConfig.from_dict,
            "model": ModelConfig.from_dict,
            "augment": lambda v: AugmentSpec(**v),
            "collapse": lambda v: CollapseThresholds(**v),
        }
        for key, make in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = make(d[key])
        if "lr_decay_epochs" in d:
            d["lr_decay_epochs"] = [int(v) for v in d["lr_decay_epochs"]]
        return cls(**d)


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Piecewise-constant schedule ``lr0 * factor ** #(decay epochs <= epoch)``."""
    k = sum(1 for e in config.lr_decay_epochs if e <= epoch)
    return config.lr * config.lr_decay_factor**k


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    clean_acc: float
    robust_acc: float
    mean_input_grad_norm: float
    loss_main: float
    loss_reg: float
    wall_clock_s: float
    collapse_flag: bool = False

    def csv_row(self) -> list[str]:
        return [
            str(self.epoch), repr(self.clean_acc), repr(self.robust_acc), repr(self.mean_input_grad_norm),
            repr(self.loss_main), repr(self.loss_reg), repr(self.wall_clock_s), str(int(self.collapse_flag)),
        ]


@dataclass
class CollapseEvent:
    epoch: int
    trigger: str  # robust_drop | gradnorm_spike | both
    pre_value: float
    post_value: float


@dataclass
class RunLog:
    config: dict
    records: list[EpochRecord] = field(default_factory=list)
    events: list[CollapseEvent] = field(default_factory=list)
    status: str = "running"
    diagnostic: str = ""
    final: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "config": self.config,
                "records": [asdict(r) for r in self.records],
                "events": [asdict(e) for e in self.events],
                "status": self.status,
                "diagnostic": self.diagnostic,
                "final": self.final,
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "RunLog":
        d = json.loads(text)
        return cls(
            config=d["config"],
            records=[EpochRecord(**r) for r in d["records"]],
            events=[CollapseEvent(**e) for e in d["events"]],
            status=d["status"],
            diagnostic=d.get("diagnostic", ""),
            final=d.get("final", {}),
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.records:
            w.writerow(r.csv_row())
        return buf.getvalue()

    @staticmethod
    def records_from_csv(text: str) -> list[EpochRecord]:
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != CSV_HEADER:
            raise ValueError(f"RunLog CSV header must be {','.join(CSV_HEADER)}")
        out = []
        for row in rows[1:]:
            e, c, r, g, lm, lr_, wc, col = row
            out.append(EpochRecord(int(e), float(c), float(r), float(g), float(lm), float(lr_), float(wc), bool(int(col))))
        return out

    def save(self, directory, stem: str = "runlog") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        jp = directory / f"{stem}.json"
        cp = directory / f"{stem}.csv"
        jp.write_text(self.to_json())
        cp.write_text(self.to_csv())
        return jp, cp

    @classmethod
    def load(cls, path) -> "RunLog":
        return cls.from_json(Path(path).read_text())


# ---------------------------------------------------------------------------
# SGD
# ---------------------------------------------------------------------------

def sgd_step(params, grads, velocity, lr: float, momentum: float, weight_decay: float):
    """One SGD-with-momentum update with coupled weight decay.

    ``v <- momentum * v + (g + wd * p)``; ``p <- p - lr * v``.  Works on lists
    of ndarrays and returns ``(new_params, new_velocity)``.
    """
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError("parameter, gradient and velocity shapes must agree")
        if not np.all(np.isfinite(g)):
            raise ad.NonFiniteError("non-finite gradient in sgd_step")
        d = g + weight_decay * p if weight_decay else g
        v = momentum * v + d
        new_v.append(v.astype(p.dtype, copy=False))
        new_p.append((p - lr * v).astype(p.dtype, copy=False))
    return new_p, new_v


class SGD:
    def __init__(self, params, momentum: float, weight_decay: float):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads, lr: float) -> None:
        new_p, self.velocity = sgd_step(
            [p.data for p in self.params], grads, self.velocity, lr, self.momentum, self.weight_decay
        )
        for p, v in zip(self.params, new_p):
            p.data = v


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    clean_acc: float
    robust_acc: float
    robust_var: float
    robust_per_repeat: list[float]


def _predict(model: Model, x: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return np.argmax(model.forward(x, False).data, axis=1)


def evaluate(model: Model, data: DatasetHandle, eval_attack: AttackConfig, repeats: int = 3,
             seed: int = 0, batch_size: int = 256) -> EvalResult:
    """Clean accuracy once, robust accuracy ``repeats`` times with independent seeds.

    An example counts as robust only if it is classified correctly both
    clean and under attack (the unperturbed point is inside the ball, so
    the worst case can never be better than clean).
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    clean = np.zeros(len(data), dtype=bool)
    pos = 0
    for _, x, y in data.batches(batch_size):
        clean[pos : pos + len(y)] = _predict(model, x) == y
        pos += len(y)
    clean_acc = float(clean.mean()) if len(data) else 0.0
    if eval_attack.family == "none":
        return EvalResult(clean_acc, clean_acc, 0.0, [clean_acc] * repeats)
    accs = []
    for r in range(repeats):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(r,)))
        robust = np.zeros(len(data), dtype=bool)
        pos = 0
        for _, x, y in data.batches(batch_size):
            delta = run_attack(model, x, y, eval_attack, rng, train_mode=False)
            robust[pos : pos + len(y)] = (_predict(model, x + delta) == y) & clean[pos : pos + len(y)]
            pos += len(y)
        accs.append(float(robust.mean()))
    return EvalResult(clean_acc, float(np.mean(accs)), float(np.var(accs)), accs)


def mean_input_grad_norm(model: Model, data: DatasetHandle, batch_size: int = 256) -> float:
    """Average per-example ``||grad_x L||_2`` in eval mode."""
    total, n = 0.0, 0
    for _, x, y in data.batches(batch_size):
        g, _ = input_gradient(model, x, y, train_mode=False)
        total += float(np.sqrt((g.reshape(len(g), -1).astype(np.float64) ** 2).sum(axis=1)).sum())
        n += len(y)
    return total / max(n, 1)


# ---------------------------------------------------------------------------
# collapse detection
# ---------------------------------------------------------------------------

def detect_collapse(history, drop_from: float = 0.15, drop_to: float = 0.02,
                    spike_ratio: float = 4.0) -> list[CollapseEvent]:
    """Find abrupt robustness collapses and input-gradient-norm spikes.

    ``robust_drop``: robust accuracy falls from >= ``drop_from`` to
    <= ``drop_to`` between consecutive epochs.  ``gradnorm_spike``: the mean
    input-gradient norm grows by at least ``spike_ratio`` between consecutive
    epochs.  Both in the same epoch give one event with trigger ``both``.
    """
    history = list(history)
    if len(history) < 2:
        raise ValueError("need at least two epoch records")
    events = []
    for prev, cur in zip(history, history[1:]):
        drop = prev.robust_acc >= drop_from and cur.robust_acc <= drop_to
        g0, g1 = prev.mean_input_grad_norm, cur.mean_input_grad_norm
        spike = g0 > 0 and g1 / g0 >= spike_ratio
        if drop and spike:
            events.append(CollapseEvent(cur.epoch, "both", prev.robust_acc, cur.robust_acc))
        elif drop:
            events.append(CollapseEvent(cur.epoch, "robust_drop", prev.robust_acc, cur.robust_acc))
        elif spike:
            events.append(CollapseEvent(cur.epoch, "gradnorm_spike", g0, g1))
    return events


def co_fired(events: list[CollapseEvent], window: int = 1) -> bool:
    """True if every robust drop has a grad-norm spike within ``window`` epochs."""
    drops = [e.epoch for e in events if e.trigger in ("robust_drop", "both")]
    spikes = [e.epoch for e in events if e.trigger in ("gradnorm_spike", "both")]
    return all(any(abs(d - s) <= window for s in spikes) for d in drops)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


class _Stores:
    def __init__(self, config: TrainConfig, image_shape, sidecar_dir):
        self.noise = None
        self.mask = None
        seed = config.seed
        if config.attack.family in ("fast_fgsm", "pgd") and config.attack.init == "fixed_per_example":
            path = Path(sidecar_dir) / "fixed_noise.bin" if sidecar_dir else None
            self.noise = fixed_noise_store(config.attack.epsilon, image_shape, seed, path)
        if config.mask.mode == "fixed_per_example":
            path = Path(sidecar_dir) / "fixed_mask.bin" if sidecar_dir else None
            self.mask = fixed_mask_store(config.mask.ratio, image_shape, seed, path)

    def save(self):
        for store in (self.noise, self.mask):
            if store is not None and store.path is not None:
                store.save()


def adversarial_batch(model: Model, config: TrainConfig, idx, x, y, seed: int, epoch: int, batch: int,
                      stores: _Stores):
    """Training input and perturbation for one batch, per the attack/mask config."""
    atk = config.attack
    if atk.family == "none" or atk.epsilon == 0:
        return x, np.zeros_like(x)
    if atk.family == "fgsm" and config.mask.enabled:
        h, w = x.shape[2:]
        if config.mask.mode == "fixed_per_example":
            masks = stores.mask.batch(idx)
        else:
            masks = random_masks(len(x), (h, w), config.mask.ratio, _stream(seed, epoch, batch, _MASK))
        x_adv, delta = fgsm_mask_attack(model, x, y, atk.epsilon, masks, config.mask.step_size,
                                        train_mode=True, clamp_pixel_box=atk.clamp_pixel_box)
        if not config.mask.train_on_masked:
            x_adv = x + delta
        return x_adv, delta
    if atk.family == "fgsm":
        delta = fgsm(model, x, y, atk.epsilon, train_mode=True, clamp_pixel_box=atk.clamp_pixel_box)
        return x + delta, delta
    rng = _stream(seed, epoch, batch, _ATTACK)
    noise = stores.noise.batch(idx) if stores.noise is not None else None
    if atk.family == "fast_fgsm":
        if noise is None:
            noise = uniform_noise(x.shape, atk.epsilon, rng, x.dtype)
        delta = fast_fgsm(model, x, y, atk.epsilon, atk.resolved_step(), noise,
                          train_mode=True, clamp_pixel_box=atk.clamp_pixel_box)
    else:
        delta = pgd(model, x, y, atk.epsilon, atk.resolved_step(), atk.steps, atk.restarts, atk.init,
                    atk.clamp_pixel_box, rng, noise, train_mode=True)
    return x + delta, delta


def training_loss(model: Model, config: TrainConfig, x, x_adv, y, delta, rng_align):
    """``(total, main, reg)``: CE at the adversarial input plus enabled terms."""
    main = ad.cross_entropy(model.forward(x_adv, True, update_stats=True), y)
    reg_cfg = config.regularizers
    terms = []
    if reg_cfg.gradnorm_beta > 0:
        terms.append(gradnorm_term(model, x, y, reg_cfg.gradnorm_beta, train_mode=True))
    if reg_cfg.weightnorm_lambda > 0:
        terms.append(weightnorm_term(model, delta, reg_cfg.weightnorm_lambda))
    if reg_cfg.gradalign_lambda > 0:
        terms.append(gradalign_term(model, x, y, config.attack.epsilon, reg_cfg.gradalign_lambda,
                                    rng=rng_align, train_mode=True))
    if not terms:
        return main, main, None
    reg = terms[0]
    for t in terms[1:]:
        reg = reg + t
    return main + reg, main, reg


def train(config: TrainConfig, data: DatasetHandle, probe: DatasetHandle | None = None,
          out_dir=None, model: Model | None = None, progress: bool = False) -> tuple[Model, RunLog]:
    """Run adversarial training and return the final model and its RunLog.

    ``probe`` is the held-out subset used for per-epoch monitoring (clean and
    PGD-probe accuracy, input-gradient norm).  Without one, ``probe_size``
    stratified examples are split off ``data`` and excluded from training.
    With ``out_dir`` the RunLog, final checkpoint and any fixed-pattern
    sidecars are written there.
    """
    config.validate()
    dtype = np.dtype(config.dtype)
    seed = config.seed
    if probe is None:
        probe = data.stratified(min(config.probe_size, len(data) // 2), seed=seed)
        data = data.select(np.flatnonzero(~np.isin(data.indices, probe.indices)))
    elif len(probe) > config.probe_size:
        probe = probe.stratified(config.probe_size, seed=seed)
    if tuple(config.model.input_shape) != data.image_shape:
        raise ConfigError(f"model input {config.model.input_shape} != data {data.image_shape}")
    if config.model.num_classes != data.num_classes:
        raise ConfigError("model num_classes does not match the dataset")

    if model is None:
        init_seed = int(np.random.SeedSequence(seed, spawn_key=(0, 0, _INIT)).generate_state(1)[0])
        model = build_model(config.model, init_seed, dtype=dtype)
    params = model.parameters()
    opt = SGD(params, config.momentum, config.weight_decay)
    stores = _Stores(config, data.image_shape, out_dir)
    runlog = RunLog(config=config.to_dict())
    thr = config.collapse

    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        t0 = time.perf_counter()
        main_sum = reg_sum = 0.0
        seen = 0
        try:
            for b, (idx, x, y) in enumerate(data.batches(config.batch_size, _stream(seed, epoch, 0, _SHUFFLE))):
                x = augment(x, config.augment, _stream(seed, epoch, b, _AUGMENT)).astype(dtype, copy=False)
                x_adv, delta = adversarial_batch(model, config, idx, x, y, seed, epoch, b, stores)
                total, main, reg = training_loss(model, config, x, x_adv, y, delta,
                                                 _stream(seed, epoch, b, _ALIGN))
                if not np.isfinite(total.item()):
                    raise ad.NonFiniteError(f"loss is {total.item()}")
                grads = ad.grad(total, params, allow_unused=True)
                opt.step([g.data for g in grads], lr)
                main_sum += main.item() * len(y)
                reg_sum += (reg.item() if reg is not None else 0.0) * len(y)
                seen += len(y)
        except (ad.NonFiniteError, FloatingPointError) as exc:
            runlog.status = "diverged"
            runlog.diagnostic = f"epoch {epoch}: {exc}"
            if out_dir is not None:
                runlog.save(out_dir)
            raise DivergenceError(runlog.diagnostic, runlog) from exc
        wall = time.perf_counter() - t0

        mon_seed = int(np.random.SeedSequence(seed, spawn_key=(epoch, 0, _MONITOR)).generate_state(1)[0])
        mon = evaluate(model, probe, config.monitor_attack, 1, seed=mon_seed)
        gnorm = mean_input_grad_norm(model, probe)
        runlog.records.append(EpochRecord(epoch, mon.clean_acc, mon.robust_acc, gnorm,
                                          main_sum / seen, reg_sum / seen, wall))
        if len(runlog.records) >= 2:
            runlog.events = detect_collapse(runlog.records, thr.drop_from, thr.drop_to, thr.spike_ratio)
            flagged = {e.epoch for e in runlog.events}
            for r in runlog.records:
                r.collapse_flag = r.epoch in flagged
        if progress:
            r = runlog.records[-1]
            log.info("epoch %d lr %.4g clean %.3f robust %.3f gnorm %.4g loss %.4f reg %.4f (%.1fs)",
                     epoch, lr, r.clean_acc, r.robust_acc, r.mean_input_grad_norm, r.loss_main, r.loss_reg, wall)

    runlog.status = "completed"
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out / "checkpoint.bin", meta={"seed": seed})
        stores.save()
        runlog.save(out)
    return model, runlog
