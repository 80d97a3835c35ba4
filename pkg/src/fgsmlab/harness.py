"""Experiment runner: trick presets, sweeps, summaries and curve files.

Command line::

    python -m fgsmlab train   --config run.yaml --out runs/a [--tricks "Str2 + Smooth"] [--epsilon 8/255 ...]
    python -m fgsmlab eval    --checkpoint runs/a/checkpoint.bin --data-source cifar10 --data-path ...
    python -m fgsmlab sweep   experiment.yaml [--workers 2]
    python -m fgsmlab summarize runs/experiment
    python -m fgsmlab curves  runs/a/runlog.json --out runs/a/curves
    python -m fgsmlab train --print-config

Exit codes: 0 success, 2 invalid configuration, 3 training diverged,
4 missing or malformed data.
"""
from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import io
import json
import logging
import os
import re
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import yaml

from .data import DataFormatError, DatasetHandle, load_cifar_binary, synth_dataset
from .nn import ConfigError, load_checkpoint
from .training import DivergenceError, RunLog, TrainConfig, detect_collapse, evaluate, train

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_DATA = 0, 2, 3, 4
OUT_ENV = "FGSMLAB_OUT"

# No published values for these two; untuned starting points, override with --beta / --ga-lambda.
DEFAULT_GRADNORM_BETA = 0.1
DEFAULT_GRADALIGN_LAMBDA = 0.2


# ---------------------------------------------------------------------------
# trick presets
# ---------------------------------------------------------------------------

def _mask(ratio, mode):
    def apply(d):
        d["mask"].update(ratio=ratio, mode=mode)
    return apply


def _set(path, value):
    def apply(d):
        node = d
        *head, last = path.split(".")
        for k in head:
            node = node[k]
        node[last] = value
    return apply


def _smooth(d):
    d["model"].update(activation="softplus_param", softplus_alpha=2.0)


def _fast(init):
    def apply(d):
        d["attack"].update(family="fast_fgsm", init=init, step_size=None)
    return apply


def _pgd_at(d):
    d["attack"].update(family="pgd", steps=10, restarts=1, step_size=2 / 255, init="uniform_random")


TRICKS = {
    "FGSM": lambda d: None,
    "Mask": _mask(0.3, "random_per_step"),
    "Mask-Fixed": _mask(0.5, "fixed_per_example"),
    "Str2": _set("model.first_conv_stride", 2),
    "Smooth": _smooth,
    "GradNorm": _set("regularizers.gradnorm_beta", DEFAULT_GRADNORM_BETA),
    "WeightNorm": _set("regularizers.weightnorm_lambda", 9.0),
    "GradAlign": _set("regularizers.gradalign_lambda", DEFAULT_GRADALIGN_LAMBDA),
    "F+FGSM": _fast("uniform_random"),
    "Fixed-Noise": _fast("fixed_per_example"),
    "PGD-10": _pgd_at,
}


def parse_tricks(label: str) -> list[str]:
    """Split ``"Str2 + Smooth"`` into preset names.

    Names may themselves contain ``+`` (``F+FGSM``), so a piece is split on
    bare ``+`` only when it is not a known name as a whole.
    """
    lookup = {k.lower(): k for k in TRICKS}
    out = []
    for piece in re.split(r"\s+\+\s+|,", label):
        piece = piece.strip()
        if not piece:
            continue
        parts = [piece] if piece.lower() in lookup else [p.strip() for p in piece.split("+") if p.strip()]
        for n in parts:
            key = lookup.get(n.lower())
            if key is None:
                raise ConfigError(f"unknown trick {n!r}; known: {sorted(TRICKS)}")
            out.append(key)
    return out


def compose_tricks(label: str, base: TrainConfig | dict | None = None) -> TrainConfig:
    """Apply the tricks named in ``label`` (e.g. ``"Str2 + Smooth"``) on top of ``base``."""
    if base is None:
        d = TrainConfig().to_dict()
    elif isinstance(base, TrainConfig):
        d = base.to_dict()
    else:
        d = copy.deepcopy(base)
    for name in parse_tricks(label):
        TRICKS[name](d)
    cfg = TrainConfig.from_dict(d)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# config values and overrides
# ---------------------------------------------------------------------------

def parse_value(text: str):
    """Parse a flag value: rationals like ``8/255``, numbers, booleans, lists, or strings."""
    s = text.strip()
    low = s.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null"):
        return None
    if "," in s:
        return [parse_value(p) for p in s.split(",") if p.strip()]
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(Fraction(s))
    except (ValueError, ZeroDivisionError):
        return s


def set_dotted(d: dict, dotted: str, value) -> None:
    node = d
    *head, last = dotted.split(".")
    for k in head:
        if k not in node or not isinstance(node[k], dict):
            raise ConfigError(f"unknown config section {k!r} in {dotted!r}")
        node = node[k]
    if last not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    if last == "lr_decay_epochs" and not isinstance(value, list):
        value = [] if value is None else [value]
    node[last] = value


def _flatten(d: dict, prefix="") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


ALIASES = {
    "epsilon": ("attack.epsilon", "eval_attack.epsilon", "monitor_attack.epsilon"),
    "stride": ("model.first_conv_stride",),
    "activation": ("model.activation",),
    "alpha": ("model.softplus_alpha",),
    "arch": ("model.arch",),
    "mask-ratio": ("mask.ratio",),
    "mask-mode": ("mask.mode",),
    "beta": ("regularizers.gradnorm_beta",),
    "wn-lambda": ("regularizers.weightnorm_lambda",),
    "ga-lambda": ("regularizers.gradalign_lambda",),
    "family": ("attack.family",),
}


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | cifar10 | cifar100
    path: str | None = None
    train_size: int | None = 5000
    test_size: int | None = 1000
    subset: str = "stratified"  # stratified | first
    synth_classes: int = 10
    synth_image_size: int = 32
    synth_seed: int = 0
    synth_noise: float = 0.3
    synth_contrast: float = 0.1

    def validate(self) -> None:
        if self.source not in ("synthetic", "cifar10", "cifar100"):
            raise ConfigError(f"unknown data source {self.source!r}")
        if self.subset not in ("stratified", "first"):
            raise ConfigError("subset must be 'stratified' or 'first'")
        if self.source != "synthetic" and not self.path:
            raise ConfigError(f"data source {self.source} needs a path")


def _subset(ds: DatasetHandle, n: int | None, how: str) -> DatasetHandle:
    if n is None or n >= len(ds):
        return ds
    return ds.stratified(n) if how == "stratified" else ds.first(n)


def load_data(cfg: DataConfig) -> tuple[DatasetHandle, DatasetHandle]:
    cfg.validate()
    if cfg.source == "synthetic":
        n_train = cfg.train_size or 5000
        n_test = cfg.test_size or 1000
        full = synth_dataset(n_train + n_test, cfg.synth_classes, cfg.synth_image_size, cfg.synth_seed,
                             noise=cfg.synth_noise, contrast=cfg.synth_contrast)
        return full.first(n_train), full.select(np.arange(n_train, n_train + n_test))
    train_ds = load_cifar_binary(cfg.path, cfg.source, "train")
    test_ds = load_cifar_binary(cfg.path, cfg.source, "test")
    return _subset(train_ds, cfg.train_size, cfg.subset), _subset(test_ds, cfg.test_size, cfg.subset)


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

def run_seed(experiment_seed: int, label: str, repeat: int) -> int:
    """Per-run seed from ``(experiment seed, label, repeat)``.

    Keyed by label rather than position so adding configs or repeats never
    changes the streams of existing runs.
    """
    ss = np.random.SeedSequence(experiment_seed, spawn_key=(zlib.crc32(label.encode()), repeat))
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


def execute_run(config: TrainConfig, data_cfg: DataConfig, out_dir, final_eval: bool = True) -> RunLog:
    """Train, optionally run the final robust evaluation, and write everything to ``out_dir``."""
    train_ds, test_ds = load_data(data_cfg)
    out_dir = Path(out_dir)
    probe = test_ds if len(test_ds) else None
    model, runlog = train(config, train_ds, probe=probe, out_dir=out_dir)
    if final_eval and len(test_ds):
        res = evaluate(model, test_ds, config.eval_attack, config.eval_repeats, seed=config.seed)
        runlog.final = dataclasses.asdict(res)
    runlog.config = {**config.to_dict(), "data": dataclasses.asdict(data_cfg)}
    runlog.save(out_dir)
    return runlog


def _run_job(args) -> tuple[str, str, str]:
    cfg_dict, data_dict, out_dir, final_eval = args
    config = TrainConfig.from_dict(cfg_dict)
    try:
        rl = execute_run(config, DataConfig(**data_dict), out_dir, final_eval)
        return out_dir, rl.status, ""
    except DivergenceError as exc:
        exc.runlog.config = {**cfg_dict, "data": data_dict}
        exc.runlog.save(out_dir)
        return out_dir, "diverged", str(exc)


@dataclass
class RunSpec:
    label: str
    config: TrainConfig
    repeats: int = 1


@dataclass
class ExperimentSpec:
    name: str
    runs: list[RunSpec]
    output_dir: str
    data: DataConfig = field(default_factory=DataConfig)
    baselines: list[str] = field(default_factory=list)
    seed: int = 0
    workers: int = 1
    final_eval: bool = True

    def validate(self) -> None:
        labels = [r.label for r in self.runs]
        if len(labels) != len(set(labels)):
            raise ConfigError("run labels must be unique")
        missing = set(self.baselines) - set(labels)
        if missing:
            raise ConfigError(f"baselines not among runs: {sorted(missing)}")
        self.data.validate()
        for r in self.runs:
            if r.repeats < 1:
                raise ConfigError(f"{r.label}: repeats must be >= 1")
            r.config.validate()

    @classmethod
    def from_dict(cls, d: dict, root: str | None = None) -> "ExperimentSpec":
        """Build from a parsed YAML mapping.

        Each run entry has a ``label``; ``tricks`` (defaulting to the label)
        selects presets and ``overrides`` holds dotted-key overrides, both
        applied on top of the experiment-wide ``base`` config.
        """
        d = dict(d)
        base_d = dict(d.get("base", {}) or {})
        base = TrainConfig.from_dict(base_d).to_dict()
        if "lr_decay_epochs" not in base_d:
            base["lr_decay_epochs"] = scaled_decay_epochs(base["epochs"])
        runs = []
        for entry in d.get("runs", []):
            label = entry["label"]
            cfg_d = compose_tricks(entry.get("tricks", label), base).to_dict()
            overrides = _flatten(entry.get("overrides", {}) or {})
            for k, v in overrides.items():
                set_dotted(cfg_d, k, parse_value(v) if isinstance(v, str) else v)
            if "epochs" in overrides and "lr_decay_epochs" not in overrides and "lr_decay_epochs" not in base_d:
                cfg_d["lr_decay_epochs"] = scaled_decay_epochs(cfg_d["epochs"])
            runs.append(RunSpec(label, TrainConfig.from_dict(cfg_d), int(entry.get("repeats", 1))))
        out = d.get("output_dir") or os.path.join(root or os.environ.get(OUT_ENV, "runs"), d["name"])
        return cls(
            name=d["name"],
            runs=runs,
            output_dir=out,
            data=DataConfig(**d.get("data", {})),
            baselines=list(d.get("baselines", [])),
            seed=int(d.get("seed", 0)),
            workers=int(d.get("workers", 1)),
            final_eval=bool(d.get("final_eval", True)),
        )


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in label.replace(" + ", "+")).strip("_")


def run_experiment(spec: ExperimentSpec, workers: int | None = None) -> list["SummaryRow"]:
    """Run every (config, repeat), then regenerate the summary from the logs."""
    spec.validate()
    root = Path(spec.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    jobs = []
    for r in spec.runs:
        for k in range(r.repeats):
            cfg = TrainConfig.from_dict(r.config.to_dict())
            cfg.seed = run_seed(spec.seed, r.label, k)
            out = root / _slug(r.label) / f"rep{k}"
            out.mkdir(parents=True, exist_ok=True)
            (out / "label.txt").write_text(r.label + "\n")
            jobs.append((cfg.to_dict(), dataclasses.asdict(spec.data), str(out), spec.final_eval))
    workers = workers or spec.workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    for out, status, msg in results:
        if status != "completed":
            log.warning("%s: %s %s", out, status, msg)
    return summarize(root, baselines=spec.baselines)


# ---------------------------------------------------------------------------
# summaries and curves
# ---------------------------------------------------------------------------

@dataclass
class SummaryRow:
    label: str
    runs: int
    clean_mean: float
    clean_var: float
    robust_mean: float
    robust_var: float
    collapse_events: int
    seeds: list[int] = field(default_factory=list)
    baseline: bool = False
    config: dict = field(default_factory=dict)  # resolved config, seed excluded

    def fmt(self) -> tuple[str, str]:
        return (f"{100 * self.clean_mean:.1f}±{1e4 * self.clean_var:.2f}",
                f"{100 * self.robust_mean:.1f}±{1e4 * self.robust_var:.2f}")


def _find_runlogs(root: Path) -> dict[str, list[Path]]:
    groups: dict[str, list[Path]] = {}
    for p in sorted(root.rglob("runlog.json")):
        label_file = p.parent / "label.txt"
        label = label_file.read_text().strip() if label_file.exists() else p.parent.name
        groups.setdefault(label, []).append(p)
    return groups


def summarize(root, baselines=()) -> list[SummaryRow]:
    """Rebuild ``summary.csv``/``summary.json``/``summary.md`` under ``root`` from the stored RunLogs.

    Reads logs only; never modifies them.
    """
    root = Path(root)
    rows = []
    for label, paths in sorted(_find_runlogs(root).items()):
        cleans, robusts, seeds, n_events = [], [], [], 0
        config = {}
        for p in paths:
            rl = RunLog.load(p)
            config = {k: v for k, v in rl.config.items() if k != "seed"}
            seeds.append(int(rl.config.get("seed", 0)))
            th = rl.config.get("collapse", {})
            events = detect_collapse(rl.records, **th) if len(rl.records) >= 2 else []
            n_events += sum(1 for e in events if e.trigger in ("robust_drop", "both"))
            if rl.final:
                cleans.append(rl.final["clean_acc"])
                robusts.extend(rl.final["robust_per_repeat"])
            elif rl.records:
                cleans.append(rl.records[-1].clean_acc)
                robusts.append(rl.records[-1].robust_acc)
        rows.append(SummaryRow(
            label, len(paths),
            float(np.mean(cleans)) if cleans else float("nan"), float(np.var(cleans)) if cleans else float("nan"),
            float(np.mean(robusts)) if robusts else float("nan"), float(np.var(robusts)) if robusts else float("nan"),
            n_events, seeds, label in baselines, config,
        ))
    rows.sort(key=lambda r: (not r.baseline, r.label))
    _write_summary(root, rows)
    return rows


def _write_summary(root: Path, rows: list[SummaryRow]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "runs", "clean_mean", "clean_var", "robust_mean", "robust_var", "collapse_events", "seeds"])
    for r in rows:
        w.writerow([r.label, r.runs, repr(r.clean_mean), repr(r.clean_var), repr(r.robust_mean),
                    repr(r.robust_var), r.collapse_events, " ".join(map(str, r.seeds))])
    (root / "summary.csv").write_text(buf.getvalue())
    (root / "summary.json").write_text(json.dumps([dataclasses.asdict(r) for r in rows], indent=2, sort_keys=True))
    lines = ["| Method | Clean % (mean±var) | Robust % (mean±var) | Collapses | Runs |", "|---|---|---|---|---|"]
    for r in rows:
        c, rb = r.fmt()
        lines.append(f"| {r.label}{' (baseline)' if r.baseline else ''} | {c} | {rb} | {r.collapse_events} | {r.runs} |")
    (root / "summary.md").write_text("\n".join(lines) + "\n")


CURVES = {
    "robust_acc": "robust_acc",
    "clean_acc": "clean_acc",
    "grad_norm": "mean_input_grad_norm",
    "loss_main": "loss_main",
    "loss_reg": "loss_reg",
}


def emit_curves(runlog: RunLog, out_dir) -> list[Path]:
    """One ``epoch,<metric>,collapse`` CSV per metric; deterministic bytes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    flagged = {e.epoch for e in runlog.events}
    paths = []
    for name, attr in CURVES.items():
        lines = [f"epoch,{name},collapse"]
        for r in runlog.records:
            lines.append(f"{r.epoch},{getattr(r, attr)!r},{int(r.collapse_flag or r.epoch in flagged)}")
        p = out_dir / f"{name}.csv"
        p.write_text("\n".join(lines) + "\n")
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file with TrainConfig fields (and an optional data section)")
    p.add_argument("--tricks", help='trick combination, e.g. "Str2 + Smooth"')
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any field by dotted key, e.g. attack.steps=10")
    for flat in _flatten(TrainConfig().to_dict()):
        p.add_argument(f"--{flat}", dest=f"cfg:{flat}", default=None, help=argparse.SUPPRESS)
    for alias, targets in ALIASES.items():
        p.add_argument(f"--{alias}", dest=f"alias:{alias}", default=None, metavar="V", help=f"sets {', '.join(targets)}")
    p.add_argument("--data-source", dest="data:source", metavar="NAME", help="synthetic | cifar10 | cifar100")
    p.add_argument("--data-path", dest="data:path", metavar="PATH", help="directory with the CIFAR binary batches")
    p.add_argument("--train-size", dest="data:train_size", metavar="N")
    p.add_argument("--test-size", dest="data:test_size", metavar="N")
    p.add_argument("--print-config", action="store_true", help="print the fully resolved config and exit")


def scaled_decay_epochs(epochs: int) -> list[int]:
    """Default decay points (24 and 27 of 30) rescaled to ``epochs``."""
    pts = sorted({int(epochs * 0.8), int(epochs * 0.9)})
    return [p for p in pts if 0 < p < epochs]


def resolve_config(args) -> tuple[TrainConfig, DataConfig]:
    file_d = {}
    if args.config:
        file_d = yaml.safe_load(Path(args.config).read_text()) or {}
    data_d = dataclasses.asdict(DataConfig())
    data_d.update(file_d.pop("data", {}) or {})
    cfg_d = TrainConfig.from_dict(file_d).to_dict()
    if args.tricks:
        cfg_d = compose_tricks(args.tricks, cfg_d).to_dict()
    for key, val in vars(args).items():
        if val is None:
            continue
        if key.startswith("cfg:"):
            set_dotted(cfg_d, key[4:], parse_value(val))
        elif key.startswith("alias:"):
            for target in ALIASES[key[6:]]:
                set_dotted(cfg_d, target, parse_value(val))
        elif key.startswith("data:"):
            field_name = key[5:]
            data_d[field_name] = parse_value(val) if field_name != "path" else val
    set_keys = set()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        set_dotted(cfg_d, k.strip(), parse_value(v))
        set_keys.add(k.strip())
    decay_given = ("lr_decay_epochs" in file_d or "lr_decay_epochs" in set_keys
                   or getattr(args, "cfg:lr_decay_epochs", None) is not None)
    if not decay_given:
        cfg_d["lr_decay_epochs"] = scaled_decay_epochs(cfg_d["epochs"])
    cfg = TrainConfig.from_dict(cfg_d)
    cfg.validate()
    data_cfg = DataConfig(**data_d)
    data_cfg.validate()
    return cfg, data_cfg


def _dump_config(cfg: TrainConfig, data_cfg: DataConfig) -> str:
    return yaml.safe_dump({**cfg.to_dict(), "data": dataclasses.asdict(data_cfg)}, sort_keys=False)


def _cmd_train(args) -> int:
    cfg, data_cfg = resolve_config(args)
    if args.print_config:
        sys.stdout.write(_dump_config(cfg, data_cfg))
        return EXIT_OK
    out = Path(args.out or os.path.join(os.environ.get(OUT_ENV, "runs"), "train"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(_dump_config(cfg, data_cfg))
    try:
        rl = execute_run(cfg, data_cfg, out, final_eval=not args.no_final_eval)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    if rl.final:
        print(f"clean {rl.final['clean_acc']:.4f}  robust {rl.final['robust_acc']:.4f} ± {rl.final['robust_var']:.2g}")
    for e in rl.events:
        print(f"collapse event: epoch {e.epoch} {e.trigger} {e.pre_value:.4g} -> {e.post_value:.4g}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg, data_cfg = resolve_config(args)
    if args.print_config:
        sys.stdout.write(_dump_config(cfg, data_cfg))
        return EXIT_OK
    model, _ = load_checkpoint(args.checkpoint)
    _, test_ds = load_data(data_cfg)
    res = evaluate(model, test_ds, cfg.eval_attack, cfg.eval_repeats, seed=cfg.seed)
    print(json.dumps(dataclasses.asdict(res), indent=2))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    d = yaml.safe_load(Path(args.spec).read_text())
    spec = ExperimentSpec.from_dict(d)
    if args.out:
        spec.output_dir = args.out
    spec.validate()
    rows = run_experiment(spec, workers=args.workers)
    sys.stdout.write((Path(spec.output_dir) / "summary.md").read_text())
    return EXIT_OK if rows else EXIT_CONFIG


def _cmd_summarize(args) -> int:
    summarize(args.root, baselines=args.baseline or [])
    sys.stdout.write((Path(args.root) / "summary.md").read_text())
    return EXIT_OK


def _cmd_curves(args) -> int:
    rl = RunLog.load(args.runlog)
    out = args.out or str(Path(args.runlog).parent / "curves")
    for p in emit_curves(rl, out):
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fgsmlab", description="FGSM adversarial-training experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    _add_config_flags(p)
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/train)")
    p.add_argument("--no-final-eval", action="store_true", help="skip the final PGD evaluation")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="robust evaluation of a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=False)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="run an experiment spec")
    p.add_argument("spec", help="experiment YAML")
    p.add_argument("--out", help="overrides output_dir from the experiment file")
    p.add_argument("--workers", type=int, help="parallel worker processes")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("summarize", help="rebuild summary tables from RunLogs")
    p.add_argument("root")
    p.add_argument("--baseline", action="append")
    p.set_defaults(func=_cmd_summarize)

    p = sub.add_parser("curves", help="write plot-ready curve files for a RunLog")
    p.add_argument("runlog")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_curves)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and not args.print_config and not args.checkpoint:
        parser.error("eval needs --checkpoint")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, DataFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
