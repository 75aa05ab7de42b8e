"""White-box l-infinity attacks: FGSM, PGD and margin-loss PGD (CW-k).

Attack arithmetic runs in float64; only the model evaluation inside the
gradient function sees the parameter dtype. All returned arrays are float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import structlog

from m2at import nn
from m2at.errors import AttackError, NonFiniteError, ShapeError
from m2at.schemas.config import AttackConfig
from m2at.seeding import BatchStreams

log = structlog.get_logger(__name__)

GradFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def model_grad_fn(params: nn.ModelParams, loss_kind: str = "cross_entropy") -> GradFn:
    """Input-gradient oracle for ``params``; never touches the parameters."""

    def grad(x: np.ndarray, labels: np.ndarray) -> np.ndarray:
        images = np.asarray(x, dtype=params.dtype)
        return np.asarray(nn.input_gradient(params, images, labels, loss_kind), dtype=np.float64)

    return grad


def _per_sample_grad(grad_fn: GradFn, x: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient with a per-sample finiteness mask.

    A non-finite forward pass poisons the whole batch, so on failure each
    sample is retried alone to find the offenders. The batch-mean loss scales
    gradients by 1/n; per-sample retries are rescaled to keep signs comparable.
    """
    try:
        grad = grad_fn(x, labels)
    except NonFiniteError:
        grad = np.zeros_like(x)
        for i in range(x.shape[0]):
            try:
                grad[i] = grad_fn(x[i : i + 1], labels[i : i + 1])[0] / x.shape[0]
            except NonFiniteError:
                grad[i] = np.nan
    finite = np.isfinite(grad.reshape(grad.shape[0], -1)).all(axis=1)
    return grad, finite


def _check_inputs(x: np.ndarray, labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim < 2 or labels.shape != (x.shape[0],):
        raise ShapeError(f"attack needs a batch and one label per sample, got {x.shape} and {labels.shape}")
    return x, labels


def fgsm_step(grad: np.ndarray, epsilon: float) -> np.ndarray:
    """The raw FGSM perturbation; every entry is exactly -eps, 0 or +eps."""
    return epsilon * np.sign(grad)


def project_linf(candidate: np.ndarray, origin: np.ndarray, epsilon: float, clamp_valid_range: bool = True) -> np.ndarray:
    """Clip ``candidate`` into the eps-ball around ``origin``, then into [0, 1] if asked."""
    candidate = np.asarray(candidate, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    if candidate.shape != origin.shape:
        raise ShapeError(f"project_linf: candidate {candidate.shape} vs origin {origin.shape}")
    projected = np.clip(candidate, origin - epsilon, origin + epsilon)
    if clamp_valid_range:
        projected = np.clip(projected, 0.0, 1.0)
    return projected


def fgsm_with(
    grad_fn: GradFn,
    x: np.ndarray,
    labels: Sequence[int],
    epsilon: float,
    clamp_valid_range: bool = True,
) -> np.ndarray:
    """FGSM against an arbitrary gradient oracle.

    Raises:
        NonFiniteError: If a sample's gradient is non-finite; names the batch index.
    """
    x, labels = _check_inputs(x, labels)
    if epsilon == 0:
        return x.copy()
    grad, finite = _per_sample_grad(grad_fn, x, labels)
    if not finite.all():
        index = int(np.flatnonzero(~finite)[0])
        raise NonFiniteError(f"non-finite input gradient at batch index {index}", batch_index=index)
    x_adv = x + fgsm_step(grad, epsilon)
    if clamp_valid_range:
        x_adv = np.clip(x_adv, 0.0, 1.0)
    return x_adv


def fgsm(
    params: nn.ModelParams,
    x: np.ndarray,
    labels: Sequence[int],
    epsilon: float,
    clamp_valid_range: bool = True,
    loss_kind: str = "cross_entropy",
) -> np.ndarray:
    """x_adv = clamp(x + eps * sign(grad_x L))."""
    return fgsm_with(model_grad_fn(params, loss_kind), x, labels, epsilon, clamp_valid_range)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    delta: np.ndarray
    aborted: np.ndarray

    @property
    def aborted_indices(self) -> list:
        return [int(i) for i in np.flatnonzero(self.aborted)]


def random_start(x: np.ndarray, epsilon: float, streams: BatchStreams, clamp_valid_range: bool = True) -> np.ndarray:
    """Uniform draw inside the eps-ball, one substream per sample."""
    if len(streams) != x.shape[0]:
        raise ShapeError(f"{len(streams)} random streams for a batch of {x.shape[0]}")
    noise = np.stack([rng.uniform(-epsilon, epsilon, size=x.shape[1:]) for rng in streams.each("attack")])
    return project_linf(x + noise, x, epsilon, clamp_valid_range)


def run_pgd(
    grad_fn: GradFn,
    x: np.ndarray,
    labels: Sequence[int],
    config: AttackConfig,
    streams: Optional[BatchStreams] = None,
    rounds: Optional[int] = None,
) -> AttackResult:
    """k rounds of x_adv <- Proj(x_adv + alpha * sign(grad)).

    A sample whose gradient turns non-finite stops at its last finite iterate
    and is flagged in ``aborted``; the rest of the batch continues.
    """
    x, labels = _check_inputs(x, labels)
    rounds = config.rounds if rounds is None else rounds
    aborted = np.zeros(x.shape[0], dtype=bool)
    if config.epsilon == 0:
        return AttackResult(x.copy(), np.zeros_like(x), aborted)
    eps, alpha, clamp = config.epsilon, config.step_size, config.clamp_valid_range
    if config.random_start:
        streams = streams if streams is not None else BatchStreams.for_range(0, 0, 0, x.shape[0])
        x_adv = random_start(x, eps, streams, clamp)
    else:
        x_adv = x.copy()
    for _ in range(rounds):
        active = ~aborted
        if not active.any():
            break
        grad, finite = _per_sample_grad(grad_fn, x_adv[active], labels[active])
        newly = np.flatnonzero(active)[~finite]
        aborted[newly] = True
        keep = np.flatnonzero(active)[finite]
        step = x_adv[keep] + fgsm_step(grad[finite], alpha)
        x_adv[keep] = project_linf(step, x[keep], eps, clamp)
    return AttackResult(x_adv, x_adv - x, aborted)


def pgd_with(
    grad_fn: GradFn,
    x: np.ndarray,
    labels: Sequence[int],
    config: AttackConfig,
    streams: Optional[BatchStreams] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    result = run_pgd(grad_fn, x, labels, config, streams)
    if result.aborted.any():
        log.warning("attack.aborted", attack=config.label, samples=result.aborted_indices)
    return result.x_adv, result.delta


def pgd(
    params: nn.ModelParams,
    x: np.ndarray,
    labels: Sequence[int],
    config: AttackConfig,
    streams: Optional[BatchStreams] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """PGD with the loss named by ``config.loss_kind``; returns (x_adv, delta)."""
    return pgd_with(model_grad_fn(params, config.loss_kind), x, labels, config, streams)


def margin_pgd(
    params: nn.ModelParams,
    x: np.ndarray,
    labels: Sequence[int],
    config: AttackConfig,
    streams: Optional[BatchStreams] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """PGD maximizing max_{j != y} z_j - z_y (the CW-k column)."""
    return pgd(params, x, labels, config.replace(loss_kind="margin"), streams)


def generate(
    params: nn.ModelParams,
    x: np.ndarray,
    labels: Sequence[int],
    config: Optional[AttackConfig],
    streams: Optional[BatchStreams] = None,
) -> np.ndarray:
    """Adversarial inputs for any config; ``None`` means clean."""
    if config is None:
        return np.asarray(x, dtype=np.float64).copy()
    if config.method == "fgsm":
        return fgsm(params, x, labels, config.epsilon, config.clamp_valid_range, config.loss_kind)
    if config.method == "pgd":
        x_adv, _ = pgd(params, x, labels, config, streams)
        return x_adv
    raise AttackError(f"unknown attack method {config.method!r}")
