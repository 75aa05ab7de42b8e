"""Robustness measurement: attack suites, epsilon sweeps and transfer matrices.

evaluate(), epsilon_sweep() and transfer_matrix() all draw adversarial inputs
from :func:`adversarial_set`, so a transfer diagonal equals the white-box
number exactly.
"""
from __future__ import annotations

from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import structlog

from m2at import attacks, nn
from m2at.data import LabeledImageSet, iter_batches
from m2at.errors import ConfigError
from m2at.schemas.config import PIXEL_SCALE, AttackConfig
from m2at.schemas.records import EvalEntry, EvalReport, SweepPoint, TransferReport
from m2at.seeding import BatchStreams

log = structlog.get_logger(__name__)

CLEAN = "clean"
SWEEP_BUDGETS = (0, 2, 4, 8, 16, 24, 32)
SWEEP_STEP_SIZES = (2, 4, 8)


def attack_label(attack: Optional[AttackConfig]) -> str:
    return CLEAN if attack is None else attack.label


def standard_suite(epsilon: float = 8 / PIXEL_SCALE, step_size: float = 2 / PIXEL_SCALE) -> List[Optional[AttackConfig]]:
    """Clean, FGSM, PGD-10, PGD-20 and CW-20; evaluation attacks start at the clean image."""
    pgd = AttackConfig(method="pgd", epsilon=epsilon, step_size=step_size, rounds=10)
    return [
        None,
        AttackConfig(method="fgsm", epsilon=epsilon, step_size=step_size, rounds=1),
        pgd,
        pgd.replace(rounds=20),
        pgd.replace(rounds=20, loss_kind="margin"),
    ]


def _check_classes(params: nn.ModelParams, dataset: LabeledImageSet) -> None:
    if params.config.num_classes != dataset.num_classes:
        raise ConfigError(f"model has {params.config.num_classes} classes, dataset has {dataset.num_classes}")
    if tuple(params.config.input_shape) != dataset.input_shape:
        raise ConfigError(f"model expects {params.config.input_shape} inputs, dataset holds {dataset.input_shape}")


def adversarial_set(
    params: nn.ModelParams,
    dataset: LabeledImageSet,
    attack: Optional[AttackConfig],
    seed: int = 0,
    batch_size: int = 256,
) -> np.ndarray:
    """Adversarial copy of every image, attacked in fixed-order batches."""
    out = np.empty(dataset.images.shape, dtype=np.float64)
    for idx in iter_batches(len(dataset), batch_size):
        streams = BatchStreams(seed=seed, epoch=0, indices=tuple(int(i) for i in idx))
        out[idx] = attacks.generate(params, dataset.images[idx], dataset.labels[idx], attack, streams)
    return out


def count_correct(params: nn.ModelParams, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> int:
    predictions = nn.predict(params, np.asarray(images, dtype=params.dtype), batch_size)
    return int((predictions == labels).sum())


def _entry(attack: Optional[AttackConfig], correct: int, total: int) -> EvalEntry:
    if attack is None:
        return EvalEntry(attack=CLEAN, correct=correct, total=total)
    return EvalEntry(
        attack=attack.label,
        epsilon=attack.epsilon,
        step_size=attack.step_size,
        rounds=attack.rounds,
        correct=correct,
        total=total,
    )


def accuracy_under(
    params: nn.ModelParams,
    dataset: LabeledImageSet,
    attack: Optional[AttackConfig],
    seed: int = 0,
    batch_size: int = 256,
) -> EvalEntry:
    images = adversarial_set(params, dataset, attack, seed, batch_size)
    return _entry(attack, count_correct(params, images, dataset.labels, batch_size), len(dataset))


def evaluate(
    params: nn.ModelParams,
    dataset: LabeledImageSet,
    suite: Sequence[Optional[AttackConfig]],
    model_id: str = "model",
    seed: int = 0,
    batch_size: int = 256,
) -> EvalReport:
    """White-box accuracy of ``params`` under each attack of ``suite`` (``None`` is clean)."""
    _check_classes(params, dataset)
    entries = []
    for attack in suite:
        entry = accuracy_under(params, dataset, attack, seed, batch_size)
        log.info("eval.attack", model=model_id, attack=entry.attack, accuracy=entry.accuracy)
        entries.append(entry)
    return EvalReport(model_id=model_id, seed=seed, n_samples=len(dataset), entries=entries)


def epsilon_sweep(
    params: nn.ModelParams,
    dataset: LabeledImageSet,
    base: AttackConfig,
    budgets: Sequence[float],
    step_sizes: Sequence[float],
    series: str = "model",
    seed: int = 0,
    batch_size: int = 256,
) -> List[SweepPoint]:
    """FGSM and PGD accuracy over an (alpha, epsilon) grid; budgets in [0, 1] units.

    FGSM has no step size, so it is computed once per budget and repeated
    under every alpha. Points report budgets in 1/255 units.
    """
    _check_classes(params, dataset)
    if list(budgets) != sorted(budgets):
        raise ConfigError(f"sweep budgets must be ascending, got {list(budgets)}")
    if not budgets or not step_sizes:
        raise ConfigError("sweep needs at least one budget and one step size")
    pgd_base = base.replace(method="pgd", random_start=False, allow_overstep=True)
    fgsm_acc: Dict[float, float] = {}
    for eps in budgets:
        fgsm = AttackConfig(method="fgsm", epsilon=eps, rounds=1, clamp_valid_range=base.clamp_valid_range)
        fgsm_acc[eps] = accuracy_under(params, dataset, fgsm, seed, batch_size).accuracy
    points: List[SweepPoint] = []
    for alpha in step_sizes:
        for eps in budgets:
            points.append(_point(series, eps, alpha, "FGSM", fgsm_acc[eps]))
        for eps in budgets:
            pgd = pgd_base.replace(epsilon=eps, step_size=alpha)
            acc = accuracy_under(params, dataset, pgd, seed, batch_size).accuracy
            points.append(_point(series, eps, alpha, pgd.label, acc))
        log.info("eval.sweep_panel", series=series, alpha=alpha * PIXEL_SCALE)
    return points


def _point(series: str, eps: float, alpha: float, attack: str, accuracy: float) -> SweepPoint:
    return SweepPoint(
        series=series,
        epsilon=round(eps * PIXEL_SCALE, 6),
        alpha=round(alpha * PIXEL_SCALE, 6),
        attack=attack,
        accuracy=accuracy,
    )


def transfer_matrix(
    models: Mapping[str, nn.ModelParams],
    dataset: LabeledImageSet,
    attack: AttackConfig,
    seed: int = 0,
    batch_size: int = 256,
) -> TransferReport:
    """accuracy[defender][attacker]: each attacker's adversarial set is generated once."""
    names = list(models)
    if len(names) < 2:
        raise ConfigError(f"transfer matrix needs at least 2 models, got {len(names)}")
    classes = {models[name].config.num_classes for name in names}
    if len(classes) != 1:
        raise ConfigError(f"models disagree on class count: {sorted(classes)}")
    for name in names:
        _check_classes(models[name], dataset)
    correct: Dict[str, Dict[str, int]] = {d: {} for d in names}
    for attacker in names:
        images = adversarial_set(models[attacker], dataset, attack, seed, batch_size)
        for defender in names:
            correct[defender][attacker] = count_correct(models[defender], images, dataset.labels, batch_size)
        log.info("eval.transfer_attacker", attacker=attacker)
    total = len(dataset)
    accuracy = {d: {a: c / total for a, c in row.items()} for d, row in correct.items()}
    return TransferReport(
        models=names,
        attack=attack.label,
        n_samples=total,
        correct=correct,
        accuracy=accuracy,
        white_box={name: accuracy[name][name] for name in names},
    )
