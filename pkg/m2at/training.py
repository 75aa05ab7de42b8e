"""Training drivers: standard, PGD-AT, PGD+LS, AVmixup(gamma=1), M2AT and the ablation grid."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from tqdm import tqdm

from m2at import attacks, evaluation, masking, nn
from m2at.data import LabeledImageSet, augment_batch, iter_batches, subset
from m2at.errors import ConfigError, NonFiniteError, TrainingError
from m2at.schemas.config import AblationFlags, AttackConfig, ModelConfig, TrainConfig
from m2at.schemas.records import MetricsRecord
from m2at.seeding import BatchStreams, substream

log = structlog.get_logger(__name__)

BUDGET_TOLERANCE = 1e-6
SIMPLEX_TOLERANCE = 1e-6

Batch = Tuple[np.ndarray, np.ndarray]


@dataclass
class TrainingBatch:
    """Inputs and soft targets for one step, plus the clean image each input came from."""

    inputs: np.ndarray
    targets: np.ndarray
    origins: np.ndarray


class SequenceClock:
    """Logical timestamps: a zero-padded counter, identical across reruns."""

    def __init__(self) -> None:
        self._counter = itertools.count()

    def __call__(self) -> str:
        return f"{next(self._counter):08d}"


# --- batch builders ------------------------------------------------------------


def _onehot(labels: Sequence[int], num_classes: int) -> np.ndarray:
    return nn.one_hot(labels, num_classes)


def _off_class(labels: Sequence[int], num_classes: int) -> np.ndarray:
    return np.stack([masking.off_class_uniform(int(y), num_classes) for y in labels])


def build_batch_pgd_at(params: nn.ModelParams, batch: np.ndarray, labels: Sequence[int], attack: AttackConfig, streams: Optional[BatchStreams] = None) -> Batch:
    x_adv, _ = attacks.pgd(params, batch, labels, attack, streams)
    return x_adv, _onehot(labels, params.config.num_classes)


def build_batch_pgd_ls(params: nn.ModelParams, batch: np.ndarray, labels: Sequence[int], attack: AttackConfig, streams: BatchStreams) -> Batch:
    """PGD batch with per-sample smoothing (1 - lam) * onehot + lam * s_bar, lam ~ Beta(1, 1)."""
    x_adv, _ = attacks.pgd(params, batch, labels, attack, streams)
    k = params.config.num_classes
    lam = np.array([masking.sample_beta(1.0, rng) for rng in streams.each("smooth")])[:, None]
    return x_adv, (1.0 - lam) * _onehot(labels, k) + lam * _off_class(labels, k)


def avmixup_inputs(x: np.ndarray, delta: np.ndarray, labels: Sequence[int], num_classes: int, lam: np.ndarray, smoothing: bool) -> Batch:
    """lam * x + (1 - lam) * (x + delta); labels lam * onehot + (1 - lam) * s_bar when smoothing."""
    x = np.asarray(x, dtype=np.float64)
    weights = lam.reshape(-1, *([1] * (x.ndim - 1)))
    inputs = weights * x + (1.0 - weights) * (x + delta)
    onehot = _onehot(labels, num_classes)
    if not smoothing:
        return inputs, onehot
    col = lam[:, None]
    return inputs, col * onehot + (1.0 - col) * _off_class(labels, num_classes)


def build_batch_avmixup_g1(
    params: nn.ModelParams,
    batch: np.ndarray,
    labels: Sequence[int],
    attack: AttackConfig,
    streams: BatchStreams,
    smoothing: bool = True,
    lam: masking.PerSample = None,
) -> Batch:
    """Interpolate clean and fully perturbed images with lam ~ Beta(1, 1) per sample."""
    _, delta = attacks.pgd(params, batch, labels, attack, streams)
    lam_values = masking.draw_lambda2(streams, 1.0, lam)
    return avmixup_inputs(batch, delta, labels, params.config.num_classes, lam_values, smoothing)


def _masking_only(params: nn.ModelParams, batch: np.ndarray, labels: Sequence[int], attack: AttackConfig, streams: BatchStreams, smoothing: bool) -> TrainingBatch:
    _, delta = attacks.pgd(params, batch, labels, attack, streams)
    k = params.config.num_classes
    pairs = masking.masked_pairs(np.asarray(batch, dtype=np.float64), delta, labels, k, streams)
    inputs = np.concatenate([np.stack([p.xi for p in pairs]), np.stack([p.xi_bar for p in pairs])])
    if smoothing:
        targets = np.concatenate([np.stack([p.t for p in pairs]), np.stack([p.t_bar for p in pairs])])
    else:
        onehot = _onehot(labels, k)
        targets = np.concatenate([onehot, onehot])
    origins = np.concatenate([batch, batch]).astype(np.float64)
    return TrainingBatch(inputs, targets, origins)


def build_batch_ablation(
    flags: AblationFlags,
    params: nn.ModelParams,
    batch: np.ndarray,
    labels: Sequence[int],
    attack: AttackConfig,
    beta_alpha: float,
    streams: BatchStreams,
) -> TrainingBatch:
    """Training batch for one (masking, mixing, label smoothing) combination.

    Masking without mixing trains on both partial images, so the batch doubles.
    Mixing without masking interpolates the clean and fully perturbed image.
    """
    origins = np.asarray(batch, dtype=np.float64)
    masking_on, mixing_on, smoothing_on = flags.as_tuple()
    if masking_on and not mixing_on:
        return _masking_only(params, batch, labels, attack, streams, smoothing_on)
    if masking_on and mixing_on:
        if smoothing_on:
            inputs, targets = masking.m2at_batch(params, batch, labels, attack, beta_alpha, streams)
        else:
            _, delta = attacks.pgd(params, batch, labels, attack, streams)
            inputs, _ = masking.mask_and_mix(batch, delta, labels, params.config.num_classes, beta_alpha, streams)
            targets = _onehot(labels, params.config.num_classes)
        return TrainingBatch(inputs, targets, origins)
    if mixing_on:
        inputs, targets = build_batch_avmixup_g1(params, batch, labels, attack, streams, smoothing=smoothing_on)
    elif smoothing_on:
        inputs, targets = build_batch_pgd_ls(params, batch, labels, attack, streams)
    else:
        inputs, targets = build_batch_pgd_at(params, batch, labels, attack, streams)
    return TrainingBatch(inputs, targets, origins)


def build_training_batch(config: TrainConfig, params: nn.ModelParams, batch: np.ndarray, labels: Sequence[int], streams: BatchStreams) -> TrainingBatch:
    flags = config.flags()
    if flags is None:
        clean = np.asarray(batch, dtype=np.float64)
        return TrainingBatch(clean, _onehot(labels, params.config.num_classes), clean)
    return build_batch_ablation(flags, params, batch, labels, config.attack, config.beta_alpha, streams)


def check_batch(batch: TrainingBatch, epsilon: float) -> None:
    """Budget and label-simplex checks run before every forward pass."""
    if batch.inputs.shape != batch.origins.shape or batch.inputs.shape[0] != batch.targets.shape[0]:
        raise TrainingError(f"inputs {batch.inputs.shape}, origins {batch.origins.shape}, targets {batch.targets.shape}")
    drift = float(np.abs(batch.inputs - batch.origins).max(initial=0.0))
    if drift > epsilon + BUDGET_TOLERANCE:
        raise TrainingError(f"training input leaves the budget: |x - origin| = {drift} > {epsilon}")
    if (batch.targets < -SIMPLEX_TOLERANCE).any():
        raise TrainingError("training target has negative mass")
    sums = batch.targets.sum(axis=1)
    if np.abs(sums - 1.0).max(initial=0.0) > SIMPLEX_TOLERANCE:
        raise TrainingError(f"training targets do not sum to 1 (worst {float(sums[np.abs(sums - 1).argmax()])})")


# --- loop ----------------------------------------------------------------------


@dataclass
class TrainResult:
    params: nn.ModelParams
    best_params: nn.ModelParams
    best_epoch: int
    best_accuracy: float
    records: List[MetricsRecord] = field(default_factory=list)


class _Recorder:
    def __init__(self, run_id: str, seed: int, clock: Callable[[], str], sink: Optional[Callable[[MetricsRecord], None]]):
        self.run_id = run_id
        self.seed = seed
        self.clock = clock
        self.sink = sink
        self.records: List[MetricsRecord] = []

    def __call__(self, phase: str, epoch: Optional[int], metric: str, value: float, attack: Optional[str] = None) -> None:
        record = MetricsRecord(
            timestamp=self.clock(),
            run_id=self.run_id,
            phase=phase,
            epoch=epoch,
            metric=metric,
            value=float(value),
            attack=attack,
            seed=self.seed,
        )
        self.records.append(record)
        if self.sink is not None:
            self.sink(record)


def _check_data(model: ModelConfig, train_set: LabeledImageSet, eval_set: LabeledImageSet) -> None:
    for dataset in (train_set, eval_set):
        if dataset.num_classes != model.num_classes:
            raise ConfigError(f"{dataset.split} set has {dataset.num_classes} classes, model expects {model.num_classes}")
        if dataset.input_shape != tuple(model.input_shape):
            raise ConfigError(f"{dataset.split} set holds {dataset.input_shape} images, model expects {model.input_shape}")
    if len(train_set) == 0:
        raise ConfigError("training set is empty")


def _eval_attack(config: TrainConfig, rounds: int) -> AttackConfig:
    return config.attack.replace(method="pgd", rounds=rounds, random_start=False)


def train(
    config: TrainConfig,
    model: ModelConfig,
    train_set: LabeledImageSet,
    eval_set: LabeledImageSet,
    run_id: str = "run",
    clock: Optional[Callable[[], str]] = None,
    sink: Optional[Callable[[MetricsRecord], None]] = None,
    progress: bool = False,
    init: Optional[nn.ModelParams] = None,
) -> TrainResult:
    """Run ``config.epochs`` epochs and keep the model with the best PGD selection accuracy.

    Args:
        config: Method, schedule, attack and seeds.
        model: Architecture to initialize (ignored when ``init`` is given).
        train_set: Training data; class count must match ``model``.
        eval_set: Data for per-epoch clean and PGD accuracy.
        run_id: Written into every metrics record.
        clock: Timestamp source; defaults to a logical counter.
        sink: Receives each record as it is produced.
        progress: Show a tqdm bar over batches.
        init: Starting parameters.

    Returns:
        TrainResult with final params, best params and every metrics record.

    Raises:
        ConfigError: If datasets and model disagree.
        TrainingError: If the loss turns non-finite or a batch breaks its budget.
    """
    _check_data(model, train_set, eval_set)
    params = init if init is not None else nn.init_params(model, config.seed)
    opt = nn.OptimState.for_params(params, config.optimizer)
    record = _Recorder(run_id, config.seed, clock or SequenceClock(), sink)
    epsilon = 0.0 if config.flags() is None else config.attack.epsilon
    eval_data = subset(eval_set, config.eval_samples, config.seed) if config.eval_samples else eval_set
    eval_attack = _eval_attack(config, config.eval_rounds)
    select_attack = _eval_attack(config, config.select_rounds)
    best_params, best_epoch, best_accuracy = params, -1, -1.0
    n_batches = -(-len(train_set) // config.batch_size)
    log.info("train.start", method=config.method, epochs=config.epochs, n_train=len(train_set), parameters=params.num_parameters())

    bar = tqdm(total=config.epochs * n_batches, disable=not progress, desc=config.method, leave=False)
    try:
        for epoch in range(config.epochs):
            lr = opt.start_epoch(epoch, config.epochs)
            record("train", epoch, "lr", lr)
            losses: List[float] = []
            order = substream(config.seed, epoch, purpose="shuffle")
            for batch_index, idx in enumerate(iter_batches(len(train_set), config.batch_size, order)):
                streams = BatchStreams(config.seed, epoch, tuple(int(i) for i in idx))
                images = train_set.images[idx].astype(np.float64)
                if config.augment:
                    images = augment_batch(images, streams)
                batch = build_training_batch(config, params, images, train_set.labels[idx], streams)
                check_batch(batch, epsilon)
                try:
                    loss, grads = nn.loss_and_grads(params, batch.inputs.astype(params.dtype), batch.targets)
                except NonFiniteError as exc:
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch_index}: {exc}") from None
                try:
                    params = nn.sgd_step(params, grads, opt)
                except NonFiniteError as exc:
                    log.warning("train.step_rejected", epoch=epoch, batch=batch_index, reason=str(exc))
                    record("train", epoch, "rejected_step", batch_index)
                    bar.update(1)
                    continue
                losses.append(loss)
                bar.update(1)
            if losses:
                record("train", epoch, "loss", float(np.mean(losses)))

            clean = evaluation.accuracy_under(params, eval_data, None, config.seed, config.eval_batch_size)
            robust = evaluation.accuracy_under(params, eval_data, eval_attack, config.seed, config.eval_batch_size)
            record("eval", epoch, "accuracy", clean.accuracy, clean.attack)
            record("eval", epoch, "accuracy", robust.accuracy, robust.attack)
            selection = robust
            if config.select_rounds != config.eval_rounds:
                selection = evaluation.accuracy_under(params, eval_data, select_attack, config.seed, config.eval_batch_size)
                record("eval", epoch, "accuracy", selection.accuracy, selection.attack)
            if selection.accuracy > best_accuracy:
                best_params, best_epoch, best_accuracy = params, epoch, selection.accuracy
            log.info("train.epoch", epoch=epoch, lr=lr, clean=clean.accuracy, robust=robust.accuracy, best_epoch=best_epoch)
    finally:
        bar.close()

    record("eval", best_epoch, "best_accuracy", best_accuracy, select_attack.label)
    return TrainResult(params, best_params, best_epoch, best_accuracy, record.records)
