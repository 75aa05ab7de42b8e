from __future__ import annotations

import contextlib
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from pydantic import ValidationError

from cli import metrics, plots
from cli.config import RunConfig, dump_run_config, flatten
from cli.utils import compact_json, now_utc_iso, sha256_text
from m2at import attacks, evaluation, nn
from m2at import tensor as T
from m2at.data import LabeledImageSet, load_cifar10, sha256_file, subset, synth_blobs
from m2at.errors import ConfigError
from m2at.schemas.config import PIXEL_SCALE, ModelConfig
from m2at.schemas.records import CurvePoint, EvalReport, SweepPoint, TransferReport
from m2at.seeding import BatchStreams, substream
from m2at.training import SequenceClock, train as run_training

log = structlog.get_logger(__name__)

METRICS_NAME = "metrics.jsonl"
FINAL_CHECKPOINT = "final.ckpt"
BEST_CHECKPOINT = "best.ckpt"
ATTACK_DUMP = "attack_dump.npz"


@contextlib.contextmanager
def config_errors() -> Iterator[None]:
    """Surface pydantic validation failures as ConfigError."""
    try:
        yield
    except ValidationError as exc:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in exc.errors())
        raise ConfigError(problems) from None


# Keys that move or display a run without changing its numbers.
RUN_ID_IGNORED = ("run.output_dir", "run.progress", "data.root")


def run_id_for(config: RunConfig) -> str:
    """Content hash of the resolved config in deterministic mode, random otherwise."""
    if config.run.deterministic:
        flat = {k: v for k, v in flatten(config).items() if k not in RUN_ID_IGNORED}
        return sha256_text(compact_json(flat))[:16]
    return str(uuid.uuid4())


def output_dir(config: RunConfig) -> Path:
    path = Path(config.run.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_datasets(config: RunConfig) -> Tuple[LabeledImageSet, LabeledImageSet]:
    """Train and test sets named by the ``data`` section, subset when asked."""
    d = config.data
    if d.source == "cifar10":
        root = config.data_root()
        if root is None:
            raise ConfigError("no CIFAR-10 directory: set data.root or M2AT_DATA_ROOT")
        if not root.exists():
            raise FileNotFoundError(f"Dataset path not found: {root}")
        train_set, test_set = load_cifar10(root)
    else:
        c, h, w = d.synth_shape
        seed = config.run.seed
        train_set = synth_blobs(seed, d.synth_classes, d.synth_train, c, h, w, d.synth_margin, d.synth_noise, "train")
        test_set = synth_blobs(seed, d.synth_classes, d.synth_test, c, h, w, d.synth_margin, d.synth_noise, "test")
    if d.train_samples:
        train_set = subset(train_set, d.train_samples, config.run.seed)
    if d.test_samples:
        test_set = subset(test_set, d.test_samples, config.run.seed)
    return train_set, test_set


def eval_set(config: RunConfig) -> LabeledImageSet:
    _, test_set = load_datasets(config)
    if config.eval.samples:
        test_set = subset(test_set, config.eval.samples, config.run.seed)
    return test_set


# --- train ---------------------------------------------------------------------


@dataclass
class TrainRunResult:
    run_id: str
    output_dir: Path
    method: str
    epochs: int
    best_epoch: int
    best_accuracy: float
    final_accuracy: Dict[str, float] = field(default_factory=dict)
    records_written: int = 0
    files: List[Path] = field(default_factory=list)


def train(config: RunConfig) -> TrainRunResult:
    """Train per ``config``; writes run_config.yaml, metrics.jsonl and two checkpoints."""
    with config_errors():
        train_config = config.train_config()
    out = output_dir(config)
    train_set, test_set = load_datasets(config)
    with config_errors():
        model = config.build_model_config(train_set.input_shape, train_set.num_classes)
    run_id = run_id_for(config)
    config_path = dump_run_config(config, out)
    clock = SequenceClock() if config.run.deterministic else now_utc_iso
    log.info("cli.train", run_id=run_id, method=train_config.method, output_dir=str(out))

    with metrics.MetricsLog(out / METRICS_NAME, fresh=True) as sink, T.deterministic_mode(config.run.deterministic):
        result = run_training(
            train_config,
            model,
            train_set,
            test_set,
            run_id=run_id,
            clock=clock,
            sink=sink,
            progress=config.run.progress,
        )
        written = sink.count

    final_epoch = train_config.epochs - 1
    final = {
        r.attack: r.value
        for r in result.records
        if r.phase == "eval" and r.metric == "accuracy" and r.epoch == final_epoch and r.attack
    }
    files = [
        config_path,
        out / METRICS_NAME,
        nn.save_checkpoint(result.params, out / FINAL_CHECKPOINT),
        nn.save_checkpoint(result.best_params, out / BEST_CHECKPOINT),
    ]
    return TrainRunResult(
        run_id=run_id,
        output_dir=out,
        method=train_config.method,
        epochs=train_config.epochs,
        best_epoch=result.best_epoch,
        best_accuracy=result.best_accuracy,
        final_accuracy=final,
        records_written=written,
        files=files,
    )


def print_train_report(result: TrainRunResult) -> List[str]:
    lines = [f"\nTrained {result.method} for {result.epochs} epochs (run {result.run_id})"]
    for attack, value in result.final_accuracy.items():
        lines.append(f"  final {attack:<8} {value:.4f}")
    lines.append(f"  best epoch {result.best_epoch} (selection accuracy {result.best_accuracy:.4f})")
    lines.append(f"  {result.records_written} metrics records")
    for path in result.files:
        lines.append(f"  wrote {path}")
    return lines


# --- eval ----------------------------------------------------------------------


def model_id(checkpoint: Path) -> str:
    return f"{Path(checkpoint).stem}:{sha256_file(checkpoint)[:12]}"


@dataclass
class EvalRunResult:
    report: EvalReport
    files: List[Path]


def evaluate(config: RunConfig, checkpoint: Path, name: str = "eval") -> EvalRunResult:
    """Clean, FGSM, PGD-10, PGD-20 and CW-20 accuracy of one checkpoint."""
    params = nn.load_checkpoint(checkpoint)
    dataset = eval_set(config)
    with config_errors():
        suite = evaluation.standard_suite(config.attack.epsilon / PIXEL_SCALE, config.attack.alpha / PIXEL_SCALE)
        if config.eval.random_start:
            suite = [a if a is None or a.method == "fgsm" else a.replace(random_start=True) for a in suite]
    with T.deterministic_mode(config.run.deterministic):
        report = evaluation.evaluate(
            params, dataset, suite, model_id=model_id(checkpoint), seed=config.run.seed, batch_size=config.eval.batch_size
        )
    files = metrics.write_eval_report(report, output_dir(config), name, config.eval.parquet)
    return EvalRunResult(report, files)


def print_eval_report(result: EvalRunResult) -> List[str]:
    report = result.report
    lines = [f"\nEvaluated {report.model_id} on {report.n_samples} samples"]
    for entry in report.entries:
        lines.append(f"  {entry.attack:<8} {entry.correct:>6}/{entry.total:<6} {entry.accuracy:.4f}")
    for path in result.files:
        lines.append(f"  wrote {path}")
    return lines


# --- attack --------------------------------------------------------------------


@dataclass
class AttackDumpResult:
    path: Path
    attack: str
    n_samples: int
    clean_correct: int
    adversarial_correct: int
    max_delta: float


def attack(config: RunConfig, checkpoint: Path, count: int = 16) -> AttackDumpResult:
    """Attack the first ``count`` eval samples and dump clean/adversarial arrays to .npz."""
    params = nn.load_checkpoint(checkpoint)
    dataset = eval_set(config)
    batch = dataset.take(np.arange(min(count, len(dataset))))
    with config_errors():
        attack_config = config.attack_config(random_start=config.eval.random_start)
    with T.deterministic_mode(config.run.deterministic):
        streams = BatchStreams.for_range(config.run.seed, 0, 0, len(batch))
        x_adv = attacks.generate(params, batch.images, batch.labels, attack_config, streams)
        clean_pred = nn.predict(params, batch.images)
        adv_pred = nn.predict(params, x_adv.astype(params.dtype))
    path = output_dir(config) / ATTACK_DUMP
    delta = x_adv - batch.images.astype(np.float64)
    np.savez_compressed(
        path,
        clean=batch.images,
        adversarial=x_adv,
        delta=delta,
        labels=batch.labels,
        clean_prediction=clean_pred,
        adversarial_prediction=adv_pred,
    )
    return AttackDumpResult(
        path=path,
        attack=attack_config.label,
        n_samples=len(batch),
        clean_correct=int((clean_pred == batch.labels).sum()),
        adversarial_correct=int((adv_pred == batch.labels).sum()),
        max_delta=float(np.abs(delta).max(initial=0.0)),
    )


def print_attack_report(result: AttackDumpResult) -> List[str]:
    return [
        f"\n{result.attack} on {result.n_samples} samples",
        f"  clean correct:       {result.clean_correct}",
        f"  adversarial correct: {result.adversarial_correct}",
        f"  max |delta|:         {result.max_delta * PIXEL_SCALE:.4f}/255",
        f"  wrote {result.path}",
    ]


# --- sweep ---------------------------------------------------------------------


@dataclass
class SweepRunResult:
    points: List[SweepPoint]
    files: List[Path]

    def gap(self, series: str, epsilon: float, alpha: float) -> Optional[float]:
        """FGSM minus PGD accuracy at one grid cell (1/255 units)."""
        cell = {p.attack: p.accuracy for p in self.points if p.series == series and p.epsilon == epsilon and p.alpha == alpha}
        fgsm = cell.pop("FGSM", None)
        if fgsm is None or not cell:
            return None
        return fgsm - next(iter(cell.values()))


def sweep(config: RunConfig, checkpoints: Sequence[Path], names: Optional[Sequence[str]] = None) -> SweepRunResult:
    """FGSM/PGD accuracy over the configured (alpha, epsilon) grid for each checkpoint."""
    names = list(names) if names else [Path(c).stem for c in checkpoints]
    if len(names) != len(checkpoints):
        raise ConfigError(f"{len(names)} names for {len(checkpoints)} checkpoints")
    dataset = eval_set(config)
    with config_errors():
        base = config.attack_config(random_start=False, method="pgd", rounds=config.sweep.rounds, allow_overstep=True)
    budgets = [b / PIXEL_SCALE for b in config.sweep.budgets]
    step_sizes = [a / PIXEL_SCALE for a in config.sweep.step_sizes]
    points: List[SweepPoint] = []
    with T.deterministic_mode(config.run.deterministic):
        for name, checkpoint in zip(names, checkpoints):
            params = nn.load_checkpoint(checkpoint)
            points += evaluation.epsilon_sweep(
                params, dataset, base, budgets, step_sizes, series=name, seed=config.run.seed, batch_size=config.eval.batch_size
            )
    out = output_dir(config)
    files = metrics.write_sweep_report(points, out, "sweep", config.eval.parquet)
    files += plots.write_sweep_svgs(points, out)
    files.append(plots.write_sweep_spec(points, out))
    return SweepRunResult(points, files)


def print_sweep_report(result: SweepRunResult, epsilon: float = 8.0) -> List[str]:
    lines = [f"\nSweep: {len(result.points)} points"]
    for series in dict.fromkeys(p.series for p in result.points):
        for alpha in sorted({p.alpha for p in result.points if p.series == series}):
            gap = result.gap(series, epsilon, alpha)
            if gap is not None:
                lines.append(f"  {series} alpha={alpha:g}: FGSM - PGD gap at eps={epsilon:g} is {gap:+.4f}")
    for path in result.files:
        lines.append(f"  wrote {path}")
    return lines


# --- transfer ------------------------------------------------------------------


@dataclass
class TransferRunResult:
    report: TransferReport
    files: List[Path]


def transfer(config: RunConfig, checkpoints: Sequence[Path], names: Optional[Sequence[str]] = None) -> TransferRunResult:
    """Black-box transfer matrix (PGD-20 by default) across at least two checkpoints."""
    if len(checkpoints) < 2:
        raise ConfigError(f"transfer needs at least 2 checkpoints, got {len(checkpoints)}")
    names = list(names) if names else [Path(c).stem for c in checkpoints]
    if len(set(names)) != len(checkpoints):
        raise ConfigError(f"checkpoint names must be unique and match the checkpoints: {names}")
    models = {name: nn.load_checkpoint(path) for name, path in zip(names, checkpoints)}
    dataset = eval_set(config)
    with config_errors():
        attack_config = config.attack_config(
            random_start=config.eval.random_start, method="pgd", rounds=config.eval.transfer_rounds
        )
    with T.deterministic_mode(config.run.deterministic):
        report = evaluation.transfer_matrix(models, dataset, attack_config, seed=config.run.seed, batch_size=config.eval.batch_size)
    files = metrics.write_transfer_report(report, output_dir(config), "transfer", config.eval.parquet)
    return TransferRunResult(report, files)


def print_transfer_report(result: TransferRunResult) -> List[str]:
    report = result.report
    width = max(10, *(len(m) for m in report.models)) + 2
    lines = [f"\nTransfer ({report.attack}, {report.n_samples} samples); rows defend, columns attack"]
    lines.append("".ljust(width) + "".join(m.ljust(width) for m in report.models))
    for defender in report.models:
        cells = []
        for attacker in report.models:
            value = f"{report.accuracy[defender][attacker]:.4f}"
            cells.append((f"[{value}]" if attacker == defender else value).ljust(width))
        lines.append(defender.ljust(width) + "".join(cells))
    for path in result.files:
        lines.append(f"  wrote {path}")
    return lines


# --- curves ------------------------------------------------------------------


@dataclass
class CurvesRunResult:
    points: List[CurvePoint]
    files: List[Path]

    def final(self, series: str) -> Dict[str, float]:
        """Accuracy per attack at the last recorded epoch of one run."""
        epochs = [p.epoch for p in self.points if p.series == series]
        if not epochs:
            return {}
        last = max(epochs)
        return {p.attack: p.accuracy for p in self.points if p.series == series and p.epoch == last}


def curves(config: RunConfig, metrics_paths: Sequence[Path], names: Optional[Sequence[str]] = None) -> CurvesRunResult:
    """Held-out accuracy per epoch from one or more metrics.jsonl logs; CSV, JSONL, SVG and Vega-Lite output."""
    names = list(names) if names else [Path(p).parent.name or Path(p).stem for p in metrics_paths]
    if len(set(names)) != len(metrics_paths):
        raise ConfigError(f"run names must be unique and match the metrics files: {names}")
    points: List[CurvePoint] = []
    for name, path in zip(names, metrics_paths):
        try:
            records = metrics.read_metrics(path)
        except ValidationError as exc:
            raise ConfigError(f"{path} is not a metrics log: {exc.errors()[0]['msg']}") from None
        series = metrics.curve_points(records, name)
        if not series:
            raise ConfigError(f"{path} holds no per-epoch eval accuracy")
        log.info("curves.read", path=str(path), series=name, points=len(series))
        points += series
    out = output_dir(config)
    files = metrics.write_curve_report(points, out, "curves", config.eval.parquet)
    files.append(plots.write_curve_svg(points, out))
    files.append(plots.write_curve_spec(points, out))
    return CurvesRunResult(points, files)


def print_curves_report(result: CurvesRunResult) -> List[str]:
    lines = [f"\nCurves: {len(result.points)} points"]
    for series in dict.fromkeys(p.series for p in result.points):
        last = result.final(series)
        cells = ", ".join(f"{attack}={acc:.4f}" for attack, acc in last.items())
        lines.append(f"  {series} final epoch: {cells}")
    for path in result.files:
        lines.append(f"  wrote {path}")
    return lines


# --- gradcheck -----------------------------------------------------------------


def gradcheck(config: RunConfig) -> T.GradCheckReport:
    """Central-difference check of every parameter of a freshly initialized model (float64)."""
    g = config.gradcheck
    with config_errors():
        model = ModelConfig(arch=g.arch, input_shape=g.input_shape, num_classes=g.classes, width=g.width)
    rng = substream(config.run.seed, purpose="gradcheck")
    images = rng.uniform(0.0, 1.0, size=(g.batch, *g.input_shape))
    targets = nn.one_hot(rng.integers(0, g.classes, size=g.batch), g.classes)
    with T.float64_mode(), T.deterministic_mode(True):
        params = nn.init_params(model, config.run.seed, dtype=np.float64)
        graph, weights = nn.loss_graph(params, images, targets)
        report = T.grad_check(
            graph, tolerance=g.tolerance, wrt=list(weights.values()), max_entries=g.max_entries, seed=config.run.seed
        )
    log.info("cli.gradcheck", arch=g.arch, passed=report.passed, max_rel_error=report.max_rel_error)
    return report


def print_gradcheck_report(report: T.GradCheckReport) -> List[str]:
    lines = [f"\nGradient check (tolerance {report.tolerance:g})"]
    for entry in report.entries:
        shape = "x".join(str(s) for s in entry.shape)
        lines.append(f"  {entry.name:<24} {shape:<14} {entry.checked:>5} coords  max rel err {entry.max_rel_error:.3e}")
    lines.append(f"  {'PASS' if report.passed else 'FAIL'} (max rel err {report.max_rel_error:.3e})")
    return lines
