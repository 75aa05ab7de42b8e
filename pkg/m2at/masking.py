"""Box sampling, perturbation masking, area-ratio label smoothing and beta mixing."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from m2at import attacks, nn
from m2at.errors import ConfigError, MaskError, ShapeError
from m2at.schemas.config import AttackConfig
from m2at.seeding import BatchStreams

log = structlog.get_logger(__name__)

PerSample = Union[None, float, Sequence[float], np.ndarray]


@dataclass(frozen=True)
class MaskBox:
    """Integer rectangle [x1, x2) x [y1, y2); may be empty."""

    x1: int
    y1: int
    x2: int
    y2: int

    def validate(self, height: int, width: int) -> "MaskBox":
        if not (0 <= self.x1 <= self.x2 <= width and 0 <= self.y1 <= self.y2 <= height):
            raise MaskError(f"box {self} does not fit a {height}x{width} image")
        return self

    @property
    def area(self) -> int:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


def _check_lambda(name: str, value: float) -> float:
    if not 0.0 <= value <= 1.0:
        raise ConfigError(f"{name} must lie in [0, 1], got {value}")
    return float(value)


def box_at(height: int, width: int, lambda1: float, x1: int, y1: int) -> MaskBox:
    """Corner arithmetic for given top-left corners; side lengths round half up."""
    lambda1 = _check_lambda("lambda1", lambda1)
    scale = math.sqrt(1.0 - lambda1)
    x2 = min(width, int(math.floor(width * scale + 0.5)) + x1)
    y2 = min(height, int(math.floor(height * scale + 0.5)) + y1)
    return MaskBox(int(x1), int(y1), x2, y2).validate(height, width)


def sample_box(height: int, width: int, lambda1: float, rng: np.random.Generator) -> MaskBox:
    """Draw x1 uniformly from {0..W} and y1 from {0..H}, then build the box."""
    if height < 1 or width < 1:
        raise ShapeError(f"image extents must be >= 1, got {height}x{width}")
    _check_lambda("lambda1", lambda1)
    x1 = int(rng.integers(0, width + 1))
    y1 = int(rng.integers(0, height + 1))
    return box_at(height, width, lambda1, x1, y1)


def make_mask(box: MaskBox, height: int, width: int) -> np.ndarray:
    """Binary [H, W] mask, 1 exactly inside the half-open box."""
    box.validate(height, width)
    mask = np.zeros((height, width), dtype=np.float64)
    mask[box.y1 : box.y2, box.x1 : box.x2] = 1.0
    return mask


def area_ratio(box: MaskBox, height: int, width: int) -> float:
    box.validate(height, width)
    return box.area / (height * width)


def apply_mask(x: np.ndarray, delta: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Split the perturbation: (x + delta*M, x + delta*(1-M)); M broadcasts over channels."""
    x = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if x.shape != delta.shape:
        raise ShapeError(f"apply_mask: image {x.shape} vs perturbation {delta.shape}")
    if mask.shape != x.shape[-2:]:
        raise ShapeError(f"apply_mask: mask {mask.shape} vs image extents {x.shape[-2:]}")
    if not np.isin(mask, (0.0, 1.0)).all():
        raise MaskError("mask must be binary")
    return x + delta * mask, x + delta * (1.0 - mask)


def off_class_uniform(label: int, num_classes: int) -> np.ndarray:
    """0 at the true class, 1/(K-1) everywhere else."""
    if num_classes < 2:
        raise ConfigError(f"label smoothing needs K >= 2, got {num_classes}")
    s_bar = np.full(num_classes, 1.0 / (num_classes - 1))
    s_bar[label] = 0.0
    return s_bar


def smooth_labels(label: int, area: float, num_classes: int) -> Tuple[np.ndarray, np.ndarray]:
    """t = a*onehot(y) + (1-a)*s_bar for the inside image; t_bar swaps the weights."""
    area = _check_lambda("area ratio", area)
    s_bar = off_class_uniform(label, num_classes)
    onehot = np.zeros(num_classes)
    onehot[label] = 1.0
    return area * onehot + (1.0 - area) * s_bar, area * s_bar + (1.0 - area) * onehot


@dataclass
class PerturbedPair:
    """Inside- and outside-perturbed images of one sample and their labels."""

    xi: np.ndarray
    xi_bar: np.ndarray
    t: np.ndarray
    t_bar: np.ndarray
    area: float
    mask: np.ndarray
    delta_inside: np.ndarray
    delta_outside: np.ndarray


@dataclass
class MixedSample:
    x_tilde: np.ndarray
    y_tilde: np.ndarray
    lambda2: float


def perturbed_pair(x: np.ndarray, delta: np.ndarray, box: MaskBox, label: int, num_classes: int) -> PerturbedPair:
    height, width = x.shape[-2:]
    mask = make_mask(box, height, width)
    xi, xi_bar = apply_mask(x, delta, mask)
    area = area_ratio(box, height, width)
    t, t_bar = smooth_labels(label, area, num_classes)
    delta = np.asarray(delta, dtype=np.float64)
    return PerturbedPair(xi, xi_bar, t, t_bar, area, mask, delta * mask, delta * (1.0 - mask))


def mix(pair: PerturbedPair, lambda2: float) -> MixedSample:
    lambda2 = _check_lambda("lambda2", lambda2)
    x_tilde = lambda2 * pair.xi + (1.0 - lambda2) * pair.xi_bar
    y_tilde = lambda2 * pair.t + (1.0 - lambda2) * pair.t_bar
    return MixedSample(x_tilde, y_tilde, lambda2)


def sample_beta(alpha: float, rng: np.random.Generator) -> float:
    """Beta(alpha, alpha) via a ratio of gammas; alpha = 1 is a plain uniform draw."""
    if not alpha > 0:
        raise ConfigError(f"beta alpha must be > 0, got {alpha}")
    if alpha == 1.0:
        return float(rng.random())
    g1 = rng.standard_gamma(alpha)
    g2 = rng.standard_gamma(alpha)
    total = g1 + g2
    if total == 0.0:
        # both gammas underflow for tiny alpha; the limit puts half the mass at each end
        return float(rng.random() < 0.5)
    return float(g1 / total)


def per_sample(value: PerSample, count: int, name: str) -> Optional[np.ndarray]:
    """Broadcast a scalar or per-sample override to ``count`` entries."""
    if value is None:
        return None
    values = np.broadcast_to(np.asarray(value, dtype=np.float64), (count,)).copy()
    for v in values:
        _check_lambda(name, v)
    return values


def masked_pairs(
    x: np.ndarray,
    delta: np.ndarray,
    labels: Sequence[int],
    num_classes: int,
    streams: BatchStreams,
    lambda1: PerSample = None,
) -> List[PerturbedPair]:
    """Masking phase for a batch: per sample lambda1 ~ U[0,1], box, mask, smoothed labels."""
    n, _, height, width = x.shape
    forced = per_sample(lambda1, n, "lambda1")
    pairs = []
    for i in range(n):
        rng = streams.sample(i, "mask")
        draw = float(rng.random())
        l1 = draw if forced is None else float(forced[i])
        box = sample_box(height, width, l1, rng)
        pairs.append(perturbed_pair(x[i], delta[i], box, int(labels[i]), num_classes))
    return pairs


def draw_lambda2(streams: BatchStreams, alpha: float, lambda2: PerSample = None) -> np.ndarray:
    forced = per_sample(lambda2, len(streams), "lambda2")
    if forced is not None:
        return forced
    return np.array([sample_beta(alpha, rng) for rng in streams.each("mix")])


def mix_pairs(pairs: Sequence[PerturbedPair], lambdas: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mixed = [mix(pair, float(l2)) for pair, l2 in zip(pairs, lambdas)]
    return np.stack([m.x_tilde for m in mixed]), np.stack([m.y_tilde for m in mixed])


def mask_and_mix(
    x: np.ndarray,
    delta: np.ndarray,
    labels: Sequence[int],
    num_classes: int,
    alpha: float,
    streams: BatchStreams,
    lambda1: PerSample = None,
    lambda2: PerSample = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Masking then mixing for a batch whose perturbations are already known."""
    x = np.asarray(x, dtype=np.float64)
    if len(streams) != x.shape[0]:
        raise ShapeError(f"{len(streams)} random streams for a batch of {x.shape[0]}")
    pairs = masked_pairs(x, delta, labels, num_classes, streams, lambda1)
    return mix_pairs(pairs, draw_lambda2(streams, alpha, lambda2))


def m2at_batch(
    params: nn.ModelParams,
    batch: np.ndarray,
    labels: Sequence[int],
    attack: AttackConfig,
    alpha: float,
    streams: BatchStreams,
    lambda1: PerSample = None,
    lambda2: PerSample = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """PGD perturbation, masking and mixing for one batch; returns (x_tilde, y_tilde)."""
    _, delta = attacks.pgd(params, batch, labels, attack, streams)
    x_tilde, y_tilde = mask_and_mix(batch, delta, labels, params.config.num_classes, alpha, streams, lambda1, lambda2)
    log.debug("m2at.batch", n=len(streams), max_delta=float(np.abs(delta).max(initial=0.0)))
    return x_tilde, y_tilde
