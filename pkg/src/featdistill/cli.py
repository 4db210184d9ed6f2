"""Experiment runner: ``featdistill <command> --config run.yaml``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import platform
import re
import sys
import time
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import __version__
from . import distill as D
from . import verify
from .data import (
    TEST,
    Dataset,
    FormatError,
    load_cifar_binary,
    load_idx,
    synth_blobs,
    train_test_split,
)
from .nn import (
    BLOCK_END,
    PRE_RELU,
    SIMPLE,
    ConfigurationError,
    Model,
    ModelSpec,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import EVALUATION, TRAINING
from .train import (
    TrainConfig,
    TrainResult,
    _kl_and_ce,
    compute_margins,
    error_rate,
    predict_logits,
    train_student,
    train_teacher,
)

logger = logging.getLogger("featdistill")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
DATASET_KINDS = ("synth_blobs", "idx", "cifar10", "cifar100")
_SAFE_NAME = re.compile(r"^[A-Za-z0-9._-]+$")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DatasetConfig:
    kind: str = "synth_blobs"
    # idx
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    # cifar binary
    train_files: tuple[str, ...] | None = None
    test_files: tuple[str, ...] | None = None
    # synth_blobs
    num_classes: int = 10
    per_class: int = 40
    image_size: int = 16
    channels: int = 1
    noise: float = 0.35
    test_fraction: float = 0.25
    data_seed: int = 0
    # stratified subsample of the training split
    train_subset: int | None = None

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigurationError(f"kind: expected one of {DATASET_KINDS}, got {self.kind!r}")
        need = {
            "idx": ("train_images", "train_labels", "test_images", "test_labels"),
            "cifar10": ("train_files", "test_files"),
            "cifar100": ("train_files", "test_files"),
        }.get(self.kind, ())
        for name in need:
            if getattr(self, name) is None:
                raise ConfigurationError(f"{name}: required for kind {self.kind!r}")
        if min(self.num_classes, self.per_class, self.image_size, self.channels) < 1:
            raise ConfigurationError("num_classes, per_class, image_size, channels: must be >= 1")
        if not (0 < self.test_fraction < 1):
            raise ConfigurationError("test_fraction: must lie in (0, 1)")
        if self.train_subset is not None and self.train_subset < 2:
            raise ConfigurationError("train_subset: must be >= 2")

    def path_fields(self) -> list[str]:
        return ["train_images", "train_labels", "test_images", "test_labels", "train_files", "test_files"]


@dataclass
class ArchConfig:
    """Architecture without the data-dependent fields (classes, input shape)."""

    groups: tuple[int, ...] = (16, 32, 64)
    blocks_per_group: int = 1
    width_multiplier: float = 1.0
    block_kind: str = SIMPLE

    def __post_init__(self):
        self.spec(10, (1, 8, 8))

    def spec(self, num_classes: int, input_shape) -> ModelSpec:
        return ModelSpec(
            self.groups, self.blocks_per_group, self.width_multiplier, num_classes, tuple(input_shape), self.block_kind
        )


@dataclass
class TeacherConfig:
    checkpoint: str | None = None
    model: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class StudentConfig:
    checkpoint: str | None = None  # only read by ``eval``
    model: ArchConfig = field(default_factory=lambda: ArchConfig(groups=(8, 16, 32)))
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class ExperimentConfig:
    name: str = "run"
    output_dir: str = "runs"
    seed: int = 0
    # student seeds for ``ablate``
    seeds: tuple[int, ...] = (0, 1, 2)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    distill: D.DistillConfig = field(default_factory=D.DistillConfig)

    def __post_init__(self):
        if not _SAFE_NAME.match(self.name):
            raise ConfigurationError(f"name: {self.name!r} is not filesystem-safe")
        if not self.seeds:
            raise ConfigurationError("seeds: need at least one seed")


# fields that exist on the library types but are set elsewhere in a config file
_EXCLUDED = {TrainConfig: {"seed": "set the top-level seed instead"}}


def _type_name(hint) -> str:
    return getattr(hint, "__name__", str(hint))


def _coerce(value, hint, path: str):
    origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _coerce(value, inner, path)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{path}: expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigurationError(f"{path}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    ok = {
        bool: isinstance(value, bool),
        int: isinstance(value, int) and not isinstance(value, bool),
        float: isinstance(value, (int, float)) and not isinstance(value, bool),
        str: isinstance(value, str),
    }.get(hint)
    if ok is None:
        raise TypeError(f"{path}: unsupported field type {hint}")
    if not ok:
        raise ConfigurationError(f"{path}: expected {_type_name(hint)}, got {type(value).__name__} {value!r}")
    return float(value) if hint is float else value


def _build(cls, data, path: str = ""):
    """Strictly build dataclass ``cls`` from a mapping; errors name the offending field."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    excluded = _EXCLUDED.get(cls, {})
    prefix = f"{path}." if path else ""
    for key in data:
        if key in excluded:
            raise ConfigurationError(f"{prefix}{key}: not allowed here; {excluded[key]}")
        if key not in names:
            raise ConfigurationError(f"{prefix}{key}: unknown key")
    kwargs = {k: _coerce(v, hints[k], f"{prefix}{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigurationError as exc:
        msg = str(exc)
        raise ConfigurationError(msg if msg.startswith(prefix) else f"{prefix}{msg}") from None


def _resolve_paths(cfg: ExperimentConfig, base: Path) -> None:
    def resolve(value, where):
        p = Path(value)
        p = p if p.is_absolute() else base / p
        if not p.exists():
            raise ConfigurationError(f"{where}: no such file {str(p)!r}")
        return str(p)

    ds = cfg.dataset
    for name in ds.path_fields():
        value = getattr(ds, name)
        if value is None:
            continue
        if isinstance(value, tuple):
            setattr(ds, name, tuple(resolve(v, f"dataset.{name}[{i}]") for i, v in enumerate(value)))
        else:
            setattr(ds, name, resolve(value, f"dataset.{name}"))
    if cfg.teacher.checkpoint is not None:
        cfg.teacher.checkpoint = resolve(cfg.teacher.checkpoint, "teacher.checkpoint")
    if cfg.student.checkpoint is not None:
        cfg.student.checkpoint = resolve(cfg.student.checkpoint, "student.checkpoint")


def parse_config(data: dict, base_dir=".") -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data)
    _resolve_paths(cfg, Path(base_dir))
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config: no such file {str(path)!r}") from None
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config: not valid YAML: {exc}") from None
    return parse_config(data, path.parent)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Plain-data form of ``cfg`` that ``parse_config`` accepts back."""

    def plain(v):
        if dataclasses.is_dataclass(v):
            skip = _EXCLUDED.get(type(v), {})
            return {f.name: plain(getattr(v, f.name)) for f in dataclasses.fields(v) if f.name not in skip}
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        return v

    return plain(cfg)


# ---------------------------------------------------------------------------
# data and models


def load_datasets(ds: DatasetConfig) -> tuple[Dataset, Dataset]:
    if ds.kind == "synth_blobs":
        full = synth_blobs(ds.num_classes, ds.per_class, ds.image_size, ds.data_seed, ds.channels, ds.noise)
        train, test = train_test_split(full, ds.test_fraction, ds.data_seed)
    elif ds.kind == "idx":
        train = load_idx(ds.train_images, ds.train_labels, ds.num_classes)
        test = load_idx(ds.test_images, ds.test_labels, ds.num_classes, split=TEST)
    else:
        label_bytes = 1 if ds.kind == "cifar10" else 2
        train = load_cifar_binary(ds.train_files, label_bytes)
        test = load_cifar_binary(ds.test_files, label_bytes, split=TEST)
    if ds.train_subset is not None and ds.train_subset < len(train):
        train, _ = train_test_split(train, 1.0 - ds.train_subset / len(train), ds.data_seed)
    return train, test


def _specs(cfg: ExperimentConfig, train: Dataset) -> tuple[ModelSpec, ModelSpec]:
    shape = train.images.shape[1:]
    return (
        cfg.teacher.model.spec(train.num_classes, shape),
        cfg.student.model.spec(train.num_classes, shape),
    )


def _load_model(spec: ModelSpec, path) -> Model:
    model = build_model(spec, 0)
    model.load_state_dict(load_checkpoint(path))
    return model


def obtain_teacher(cfg: ExperimentConfig, train: Dataset, test: Dataset, run_dir: Path) -> Model:
    spec, _ = _specs(cfg, train)
    if cfg.teacher.checkpoint is not None:
        logger.info("loading teacher from %s", cfg.teacher.checkpoint)
        return _load_model(spec, cfg.teacher.checkpoint)
    tcfg = dataclasses.replace(cfg.teacher.train, seed=cfg.seed)
    res = train_teacher(
        spec, train, test, tcfg,
        metrics_path=run_dir / "teacher_metrics.csv",
        checkpoint_path=run_dir / "teacher.ckpt",
    )
    _write_json(run_dir / "teacher_summary.json", _summary(res))
    return res.model


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _summary(res: TrainResult) -> dict:
    last = res.history[-1]
    return {
        "final": dataclasses.asdict(last),
        "best_test_error_pct": min(r.test_error_pct for r in res.history),
        "parameters": res.model.parameter_count,
        "epochs": len(res.history),
    }


def write_manifest(run_dir: Path, command: str, cfg: ExperimentConfig | None, threads: int, argv, seed: int = 0) -> None:
    """Record everything needed to repeat a run; verify commands have no config."""
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config_to_dict(cfg) if cfg is not None else None,
        "seed": cfg.seed if cfg is not None else seed,
        "seeds": list(cfg.seeds) if cfg is not None else [seed],
        "threads": threads,
        "versions": {
            "featdistill": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
            "platform": platform.platform(),
        },
        "started_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    _write_json(run_dir / "manifest.json", manifest)


# ---------------------------------------------------------------------------
# commands


def run_student(
    cfg: ExperimentConfig,
    teacher: Model | None,
    train: Dataset,
    test: Dataset,
    dcfg: D.DistillConfig,
    seed: int,
    out_dir: Path,
    margins: D.MarginSpec | None = None,
) -> TrainResult:
    out_dir.mkdir(parents=True, exist_ok=True)
    _, spec = _specs(cfg, train)
    scfg = dataclasses.replace(cfg.student.train, seed=seed)
    res = train_student(
        spec, teacher, train, test, scfg, dcfg, margins,
        metrics_path=out_dir / "metrics.csv",
        checkpoint_path=out_dir / "student.ckpt",
    )
    if res.margins is not None:
        res.margins.save(out_dir / "margins.txt")
    _write_json(out_dir / "summary.json", _summary(res))
    return res


def ablation_matrix(base: D.DistillConfig) -> list[tuple[str, D.DistillConfig]]:
    """The four cumulative rungs, each adding one component to the previous."""
    rung1 = dataclasses.replace(
        base, method=D.FITNETS_L2, tap_position=BLOCK_END, teacher_bn_mode=EVALUATION, with_kd=False
    )
    rung2 = dataclasses.replace(rung1, tap_position=PRE_RELU)
    rung3 = dataclasses.replace(rung2, teacher_bn_mode=TRAINING)
    rung4 = dataclasses.replace(rung3, method=D.PROPOSED)
    return [
        ("L2 @ block end", rung1),
        ("+ pre-ReLU", rung2),
        ("+ teacher BN train", rung3),
        ("+ margin/partial L2", rung4),
    ]


@dataclass
class AblationResult:
    labels: list[str]
    errors: np.ndarray  # [rung, seed] final test error in percent
    seeds: tuple[int, ...]

    @property
    def means(self) -> np.ndarray:
        return self.errors.mean(axis=1)

    @property
    def stds(self) -> np.ndarray:
        return self.errors.std(axis=1, ddof=1) if self.errors.shape[1] > 1 else np.zeros(len(self.labels))

    def table(self) -> str:
        width = max(22, *(len(l) + 2 for l in self.labels))
        head = " " * 6 + "".join(l.rjust(width) for l in self.labels)
        err = "Error " + "".join(f"{m:.2f} ± {s:.2f}".rjust(width) for m, s in zip(self.means, self.stds))
        diffs = ["-"] + [f"{d:+.2f}" for d in np.diff(self.means)]
        diff = "Diff  " + "".join(d.rjust(width) for d in diffs)
        return "\n".join([head, err, diff])

    def to_dict(self) -> dict:
        return {
            "labels": self.labels,
            "seeds": list(self.seeds),
            "errors": self.errors.tolist(),
            "mean": self.means.tolist(),
            "std": self.stds.tolist(),
        }


def run_ablation(cfg: ExperimentConfig, teacher: Model, train: Dataset, test: Dataset, run_dir: Path) -> AblationResult:
    rungs = ablation_matrix(cfg.distill)
    errors = np.zeros((len(rungs), len(cfg.seeds)))
    for i, (label, dcfg) in enumerate(rungs):
        # margins depend on the teacher and data only, so seeds share them
        margins = compute_margins(teacher, train, dcfg) if dcfg.method == D.PROPOSED else None
        for j, seed in enumerate(cfg.seeds):
            logger.info("ablation rung %d (%s) seed %d", i + 1, label, seed)
            res = run_student(cfg, teacher, train, test, dcfg, seed, run_dir / f"rung{i + 1}_seed{seed}", margins)
            errors[i, j] = res.history[-1].test_error_pct
    result = AblationResult([l for l, _ in rungs], errors, tuple(cfg.seeds))
    (run_dir / "ablation.txt").write_text(result.table() + "\n")
    _write_json(run_dir / "ablation.json", result.to_dict())
    return result


def _cmd_train_teacher(cfg, run_dir, out):
    train, test = load_datasets(cfg.dataset)
    cfg.teacher.checkpoint = None
    obtain_teacher(cfg, train, test, run_dir)
    print(f"teacher checkpoint: {run_dir / 'teacher.ckpt'}", file=out)
    return EXIT_OK


def _cmd_run(cfg, run_dir, out):
    train, test = load_datasets(cfg.dataset)
    # a baseline run still loads a given teacher so its KL-with-teacher is reported
    wants_teacher = cfg.distill.method != D.NO_DISTILL or cfg.teacher.checkpoint is not None
    teacher = obtain_teacher(cfg, train, test, run_dir) if wants_teacher else None
    res = run_student(cfg, teacher, train, test, cfg.distill, cfg.seed, run_dir)
    last = res.history[-1]
    print(f"test error {last.test_error_pct:.2f}%  kl {last.kl_with_teacher:.4f}  ce {last.ce_with_gt:.4f}", file=out)
    return EXIT_OK


def _cmd_ablate(cfg, run_dir, out):
    train, test = load_datasets(cfg.dataset)
    teacher = obtain_teacher(cfg, train, test, run_dir)
    result = run_ablation(cfg, teacher, train, test, run_dir)
    print(result.table(), file=out)
    return EXIT_OK


def _cmd_eval(cfg, run_dir, out):
    train, test = load_datasets(cfg.dataset)
    t_spec, s_spec = _specs(cfg, train)
    ckpt = cfg.student.checkpoint or run_dir / "student.ckpt"
    if not Path(ckpt).exists():
        raise ConfigurationError(f"student.checkpoint: no such file {str(ckpt)!r}")
    student = _load_model(s_spec, ckpt)
    s_logits = predict_logits(student, test)
    report = {"checkpoint": str(ckpt), "test_error_pct": error_rate(s_logits, test.labels)}
    t_ckpt = cfg.teacher.checkpoint or run_dir / "teacher.ckpt"
    if Path(t_ckpt).exists():
        t_logits = predict_logits(_load_model(t_spec, t_ckpt), test)
        kl, ce = _kl_and_ce(t_logits, s_logits, test.labels)
        report.update(kl_with_teacher=kl, ce_with_gt=ce, teacher_test_error_pct=error_rate(t_logits, test.labels))
    _write_json(run_dir / "eval.json", report)
    print(json.dumps(report, sort_keys=True), file=out)
    return EXIT_OK


def _cmd_verify_gradients(seed: int, out) -> int:
    reports = verify.gradient_suite(seed)
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:<26} max rel err {r.max_rel_error:.3e}  points {r.points}  skipped {r.skipped_near_kink}", file=out)
    failed = [r.name for r in reports if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=out)
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_verify_margins(seed: int, out) -> int:
    reports = verify.margin_suite(seed=seed)
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(
            f"{status} mu={r.mu:+.1f} sigma={r.sigma:.1f}  closed {r.closed_form:+.10f}  "
            f"mc {r.monte_carlo:+.6f} ± {r.standard_error:.2e}  z {r.z:.2f}  n_neg {r.negatives}",
            file=out,
        )
    return EXIT_OK if all(r.passed for r in reports) else EXIT_RUNTIME


COMMANDS = {
    "run": _cmd_run,
    "ablate": _cmd_ablate,
    "train-teacher": _cmd_train_teacher,
    "eval": _cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="featdistill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*COMMANDS, "verify-gradients", "verify-margins"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, required=name in COMMANDS)
        p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--threads", type=int, default=1, help="BLAS threads (1 keeps runs bitwise reproducible)")
    return parser


def main(argv=None, out=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    out = sys.stdout if out is None else out
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("error: --threads: must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=args.threads):
            if args.command in ("verify-gradients", "verify-margins"):
                seed = args.seed or 0
                if args.out is not None:
                    write_manifest(args.out, args.command, None, args.threads, argv, seed)
                verify_cmd = _cmd_verify_gradients if args.command == "verify-gradients" else _cmd_verify_margins
                return verify_cmd(seed, out)
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg.seed = args.seed
            run_dir = (args.out or Path(cfg.output_dir)) / cfg.name
            write_manifest(run_dir, args.command, cfg, args.threads, argv)
            return COMMANDS[args.command](cfg, run_dir, out)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, D.ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # runtime failures map to exit 1 with a diagnostic
        logger.exception("run failed")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
