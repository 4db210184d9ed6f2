"""Feature-distillation losses and channel margins.

The proposed loss compares a margin-clamped teacher feature with a regressed
student feature under a partial squared distance:

    L = sum_k w_k * d_p(max(F_t^k, m^k), r_k(F_s^k))

where ``d_p`` drops elements with ``S <= T <= 0`` and ``m^k`` holds one
negative margin per teacher channel, the mean of that channel's negative
responses.
"""

from __future__ import annotations

import io
import logging
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .nn import (
    BLOCK_END,
    PRE_RELU,
    SIMPLE,
    ConfigurationError,
    Model,
    Regressor,
)
from .tensor import (
    EVALUATION,
    TRAINING,
    DimensionError,
    Tensor,
    add,
    clamp_min_per_channel,
    kl_divergence_softened,
    mul,
    scale,
    softmax_cross_entropy,
    sub,
    tsum,
)

logger = logging.getLogger(__name__)

EMPIRICAL = "empirical"
CLOSED_FORM = "closed_form"

PROPOSED = "proposed"
KD = "kd"
FITNETS_L2 = "fitnets_l2"
NO_DISTILL = "none"
METHODS = (PROPOSED, KD, FITNETS_L2, NO_DISTILL)

_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)
# beyond this mu/sigma the negative tail mass underflows the direct ratio
ASYMPTOTIC_THRESHOLD = 8.0


class ParameterError(ValueError):
    """Invalid distribution parameters."""


class MarginWarning(UserWarning):
    """A channel never produced a negative response; its margin falls back to 0."""


# ---------------------------------------------------------------------------
# closed-form margin


@dataclass(frozen=True)
class TruncatedGaussianParams:
    mu: float
    sigma: float

    def __post_init__(self):
        if not (self.sigma > 0) or not math.isfinite(self.sigma):
            raise ParameterError(f"sigma must be finite and > 0, got {self.sigma}")
        if not math.isfinite(self.mu):
            raise ParameterError(f"mu must be finite, got {self.mu}")


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / _SQRT2)


def _tail_margin(t: float) -> float:
    """E[Z | Z < 0] for Z ~ N(t, 1) and large ``t``.

    Laplace's continued fraction for the Mills ratio, rearranged so that
    ``t - phi(t)/Phi(-t) = -1 / (t + 2/(t + 3/(t + ...)))`` and no
    cancellation occurs.  Forty levels reach double precision for t >= 8.
    """
    acc = t
    for k in range(40, 1, -1):
        acc = t + k / acc
    return -1.0 / acc


def margin_closed_form(params: TruncatedGaussianParams | float, sigma: float | None = None) -> float:
    """E[X | X < 0] for X ~ N(mu, sigma^2).

    Accepts either a :class:`TruncatedGaussianParams` or ``(mu, sigma)``.
    """
    if not isinstance(params, TruncatedGaussianParams):
        if sigma is None:
            raise ParameterError("sigma is required when mu is given as a number")
        params = TruncatedGaussianParams(float(params), float(sigma))
    mu, sigma = params.mu, params.sigma
    t = mu / sigma
    if t > ASYMPTOTIC_THRESHOLD:
        return sigma * _tail_margin(t)
    return mu - sigma * math.exp(-0.5 * t * t) / (_SQRT2PI * normal_cdf(-t))


# ---------------------------------------------------------------------------
# margin sets


@dataclass
class MarginSpec:
    """Per-tap, per-channel margins."""

    margins: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    source: str = EMPIRICAL

    def __post_init__(self):
        self.margins = OrderedDict(
            (k, np.asarray(v, dtype=np.float64).reshape(-1)) for k, v in self.margins.items()
        )
        for name, m in self.margins.items():
            if not np.all(np.isfinite(m)):
                raise ParameterError(f"margins for {name} contain non-finite values")
            if np.any(m > 0):
                raise ParameterError(f"margins for {name} must be <= 0")

    def __getitem__(self, tap: str) -> np.ndarray:
        return self.margins[tap]

    def __contains__(self, tap: str) -> bool:
        return tap in self.margins

    def to_text(self) -> str:
        lines = [f"# source {self.source}", "tap\tchannel\tmargin"]
        for name, m in self.margins.items():
            lines.extend(f"{name}\t{c}\t{v!r}" for c, v in enumerate(m.tolist()))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MarginSpec":
        source = EMPIRICAL
        rows: OrderedDict[str, dict[int, float]] = OrderedDict()
        for lineno, line in enumerate(io.StringIO(text), 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("# source"):
                source = line.split()[-1]
                continue
            if line.startswith("#") or line == "tap\tchannel\tmargin":
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"line {lineno}: expected 3 tab-separated fields")
            rows.setdefault(parts[0], {})[int(parts[1])] = float(parts[2])
        margins = OrderedDict()
        for name, chans in rows.items():
            if sorted(chans) != list(range(len(chans))):
                raise ValueError(f"tap {name}: channel indices are not contiguous from 0")
            margins[name] = np.array([chans[i] for i in range(len(chans))])
        return cls(margins, source)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "MarginSpec":
        with open(path) as fh:
            return cls.from_text(fh.read())


class MarginAccumulator:
    """Streaming per-channel sum and count of negative tap values."""

    def __init__(self):
        self.neg_sum: OrderedDict[str, np.ndarray] = OrderedDict()
        self.neg_count: OrderedDict[str, np.ndarray] = OrderedDict()

    def update(self, taps: Mapping[str, Tensor | np.ndarray]) -> None:
        for name, t in taps.items():
            x = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
            neg = np.minimum(x, 0.0)
            s = neg.sum(axis=(0, 2, 3))
            c = (x < 0).sum(axis=(0, 2, 3))
            if name in self.neg_sum:
                self.neg_sum[name] += s
                self.neg_count[name] += c
            else:
                self.neg_sum[name] = s
                self.neg_count[name] = c.astype(np.int64)

    def result(self) -> MarginSpec:
        margins = OrderedDict()
        for name, s in self.neg_sum.items():
            c = self.neg_count[name]
            empty = c == 0
            if np.any(empty):
                idx = np.flatnonzero(empty).tolist()
                msg = f"tap {name}: channels {idx} had no negative responses; margin set to 0"
                logger.warning(msg)
                warnings.warn(msg, MarginWarning, stacklevel=2)
            margins[name] = np.where(empty, 0.0, s / np.maximum(c, 1))
        return MarginSpec(margins, EMPIRICAL)


def margin_empirical(
    teacher: Model,
    batches: Iterable,
    bn_mode: str = TRAINING,
    tap_position: str = PRE_RELU,
) -> MarginSpec:
    """Average the teacher's negative pre-ReLU responses over a full data pass.

    ``batches`` yields input tensors or ``(tensor, labels)`` pairs that are
    already normalized for ``teacher``.  Teacher BN statistics are not touched.
    """
    if tap_position != PRE_RELU:
        raise ConfigurationError("tap_position: margins are defined on pre-ReLU taps")
    acc = MarginAccumulator()
    seen = False
    for batch in batches:
        x = batch[0] if isinstance(batch, tuple) else batch
        _, taps = teacher.forward_with_taps(x, bn_mode, update_stats=False, position=PRE_RELU)
        acc.update(taps)
        seen = True
    if not seen:
        raise ValueError("margin_empirical needs a nonempty batch stream")
    return acc.result()


def margins_from_bn(teacher: Model) -> MarginSpec:
    """Closed-form margins from the (beta, |gamma|) of the BN feeding each pre-ReLU tap.

    Only valid when the tap is a BN output, i.e. simple conv-BN-ReLU blocks.
    """
    if teacher.spec.block_kind != SIMPLE:
        raise ConfigurationError(
            "margin_source: closed-form margins need taps that are BN outputs; "
            f"{teacher.spec.block_kind} blocks merge a shortcut after BN, use empirical"
        )
    margins = OrderedDict()
    for tap, blocks in zip(teacher.taps, teacher.groups):
        bn = blocks[-1].bn1
        margins[tap.name] = np.array(
            [
                margin_closed_form(float(b), abs(float(g)))
                for b, g in zip(bn.beta.data, bn.gamma.data)
            ]
        )
    return MarginSpec(margins, CLOSED_FORM)


# ---------------------------------------------------------------------------
# transforms and distances


def margin_relu(features, margins) -> Tensor:
    """Teacher transform ``max(x, m_c)``; the result is a constant target."""
    x = features.detach() if isinstance(features, Tensor) else Tensor(features)
    return clamp_min_per_channel(x, np.asarray(margins, dtype=np.float64)).detach()


def _target_array(target) -> np.ndarray:
    return target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)


def partial_l2(target, prediction: Tensor) -> Tensor:
    """Sum of squared errors, skipping elements where ``S <= T <= 0``.

    ``target`` is treated as a constant.
    """
    t = _target_array(target)
    if t.shape != prediction.shape:
        raise DimensionError(f"partial_l2: target {t.shape} vs prediction {prediction.shape}")
    keep = ~((prediction.data <= t) & (t <= 0.0))
    diff = mul(sub(prediction, Tensor._wrap(t)), Tensor._wrap(keep.astype(np.float64)))
    return tsum(mul(diff, diff))


def l2_sum(target, prediction: Tensor) -> Tensor:
    t = _target_array(target)
    if t.shape != prediction.shape:
        raise DimensionError(f"l2: target {t.shape} vs prediction {prediction.shape}")
    diff = sub(prediction, Tensor._wrap(t))
    return tsum(mul(diff, diff))


def default_layer_weights(n_taps: int) -> list[float]:
    """Deepest tap weighs 1; each shallower tap half of the next deeper one."""
    return [0.5 ** (n_taps - 1 - i) for i in range(n_taps)]


def _weighted_feature_loss(teacher_taps, student_taps, regressors, layer_weights, per_tap):
    names = list(teacher_taps)
    if set(names) != set(student_taps):
        raise ConfigurationError(
            f"tap names differ: teacher {sorted(teacher_taps)} vs student {sorted(student_taps)}"
        )
    missing = [n for n in names if n not in regressors]
    if missing:
        raise ConfigurationError(f"no regressor for taps {missing}")
    weights = list(layer_weights) if layer_weights is not None else default_layer_weights(len(names))
    if len(weights) != len(names):
        raise ConfigurationError(f"layer_weights: {len(weights)} weights for {len(names)} taps")
    total = None
    for name, w in zip(names, weights):
        term = scale(per_tap(name, regressors[name](student_taps[name])), w)
        total = term if total is None else add(total, term)
    return total


def proposed_distill_loss(
    teacher_taps: Mapping[str, Tensor],
    student_taps: Mapping[str, Tensor],
    regressors: Mapping[str, Regressor],
    margins: MarginSpec,
    layer_weights: Sequence[float] | None = None,
) -> Tensor:
    """Weighted sum over taps of ``partial_l2(margin_relu(F_t), r(F_s))``.

    Taps are taken in the teacher map's order (shallow to deep).
    """
    for name in teacher_taps:
        if name not in margins:
            raise ConfigurationError(f"no margins for tap {name}")

    def per_tap(name, regressed):
        target = margin_relu(teacher_taps[name], margins[name])
        return partial_l2(target, regressed)

    return _weighted_feature_loss(teacher_taps, student_taps, regressors, layer_weights, per_tap)


def fitnets_l2_loss(
    teacher_taps: Mapping[str, Tensor],
    student_taps: Mapping[str, Tensor],
    regressors: Mapping[str, Regressor],
    layer_weights: Sequence[float] | None = None,
) -> Tensor:
    """Plain squared-error feature matching, no teacher transform and no skip."""

    def per_tap(name, regressed):
        return l2_sum(teacher_taps[name], regressed)

    return _weighted_feature_loss(teacher_taps, student_taps, regressors, layer_weights, per_tap)


def total_loss(task_loss: Tensor, distill_loss: Tensor, alpha: float) -> Tensor:
    if alpha < 0:
        raise ConfigurationError("alpha: must be >= 0")
    return add(task_loss, scale(distill_loss, alpha))


def kd_loss(teacher_logits, student_logits: Tensor, labels, temperature: float = 4.0, lam: float = 1.0) -> Tensor:
    """Cross-entropy plus ``lam * T^2 * KL(teacher_T || student_T)``."""
    task = softmax_cross_entropy(student_logits, labels)
    soft = kl_divergence_softened(teacher_logits, student_logits, temperature)
    return add(task, scale(soft, lam * temperature * temperature))


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DistillConfig:
    """Everything that selects and weights the distillation term."""

    method: str = PROPOSED
    alpha: float = 1e-3
    temperature: float = 4.0
    kd_lambda: float = 1.0
    layer_weights: tuple[float, ...] | None = None
    teacher_bn_mode: str = TRAINING
    tap_position: str = PRE_RELU
    margin_source: str = EMPIRICAL
    active_taps: tuple[str, ...] | None = None
    # also add the KD output term to a feature method
    with_kd: bool = False

    def __post_init__(self):
        if self.layer_weights is not None:
            self.layer_weights = tuple(float(w) for w in self.layer_weights)
        if self.active_taps is not None:
            self.active_taps = tuple(self.active_taps)
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigurationError(f"method: expected one of {METHODS}, got {self.method!r}")
        if not (self.alpha >= 0) or not math.isfinite(self.alpha):
            raise ConfigurationError(f"alpha: must be >= 0, got {self.alpha}")
        if not (self.temperature > 0):
            raise ConfigurationError(f"temperature: must be > 0, got {self.temperature}")
        if not (self.kd_lambda >= 0):
            raise ConfigurationError(f"kd_lambda: must be >= 0, got {self.kd_lambda}")
        if self.layer_weights is not None and any(not (w > 0) for w in self.layer_weights):
            raise ConfigurationError("layer_weights: every weight must be > 0")
        if self.teacher_bn_mode not in (TRAINING, EVALUATION):
            raise ConfigurationError(f"teacher_bn_mode: unknown mode {self.teacher_bn_mode!r}")
        if self.tap_position not in (PRE_RELU, BLOCK_END):
            raise ConfigurationError(f"tap_position: unknown position {self.tap_position!r}")
        if self.margin_source not in (EMPIRICAL, CLOSED_FORM):
            raise ConfigurationError(f"margin_source: unknown source {self.margin_source!r}")

    @property
    def uses_features(self) -> bool:
        return self.method in (PROPOSED, FITNETS_L2)
