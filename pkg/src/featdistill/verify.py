"""Self-checks behind the ``verify-gradients`` and ``verify-margins`` commands."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import distill as D
from . import tensor as T
from .tensor import Tensor

GRAD_TOLERANCE = 1e-4
KINK_TOLERANCE = 1e-3
MARGIN_GRID_MU = (-2.0, -1.0, 0.0, 1.0, 2.0)
MARGIN_GRID_SIGMA = (0.5, 1.0, 2.0)


# ---------------------------------------------------------------------------
# gradient suite


def _project(out: Tensor, weights: np.ndarray) -> Tensor:
    """Reduce to a scalar through fixed random weights so every output element matters."""
    if out.size == 1:
        return out
    return T.tsum(T.mul(out, Tensor(weights.reshape(out.shape))))


def _case(shape_fn, fn):
    """``shape_fn(rng)`` draws the checked input; ``fn(rng)`` returns ``op(x)`` with frozen extras."""
    return shape_fn, fn


def _const(rng, *shape):
    return Tensor(rng.normal(size=shape))


def _bn(mode):
    def make(rng):
        c = 3
        gamma, beta = _const(rng, c), _const(rng, c)
        rm, rv = rng.normal(size=c), rng.uniform(0.5, 2.0, size=c)
        return lambda x: T.batchnorm2d(x, gamma, beta, rm.copy(), rv.copy(), mode, update_stats=False)

    return make


def _bn_param(which):
    def make(rng):
        x = _const(rng, 4, 3, 3, 3)
        other = _const(rng, 3)
        rm, rv = np.zeros(3), np.ones(3)

        def f(p):
            g, b = (p, other) if which == "gamma" else (other, p)
            return T.batchnorm2d(x, g, b, rm.copy(), rv.copy(), T.TRAINING, update_stats=False)

        return f

    return make


def _partial_l2(rng):
    target = rng.normal(size=(2, 3, 3, 3))
    return lambda s: D.partial_l2(target, s)


# name -> (input shape, factory(rng) -> op of one tensor argument)
GRADIENT_CASES: dict[str, tuple[tuple[int, ...], Callable]] = {
    "add": ((3, 4), lambda rng: (lambda b: (lambda x: T.add(x, b)))(_const(rng, 3, 4))),
    "sub": ((3, 4), lambda rng: (lambda b: (lambda x: T.sub(b, x)))(_const(rng, 3, 4))),
    "mul": ((3, 4), lambda rng: (lambda b: (lambda x: T.mul(x, b)))(_const(rng, 3, 4))),
    "scale": ((3, 4), lambda rng: lambda x: T.scale(x, -1.7)),
    "sum": ((3, 4), lambda rng: lambda x: T.tsum(T.mul(x, x))),
    "mean": ((3, 4), lambda rng: lambda x: T.mean(T.mul(x, x))),
    "reshape": ((2, 6), lambda rng: lambda x: T.reshape(x, (3, 4))),
    "pad2d": ((2, 2, 4, 4), lambda rng: lambda x: T.pad2d(x, 1, -1, 2, 0)),
    "relu": ((3, 4), lambda rng: T.relu),
    "clamp_min_per_channel": (
        (2, 3, 3, 3),
        lambda rng: (lambda m: (lambda x: T.clamp_min_per_channel(x, m)))(-rng.uniform(0, 1, 3)),
    ),
    "matmul[a]": ((3, 4), lambda rng: (lambda b: (lambda x: T.matmul(x, b)))(_const(rng, 4, 5))),
    "matmul[b]": ((4, 5), lambda rng: (lambda a: (lambda x: T.matmul(a, x)))(_const(rng, 3, 4))),
    "linear[x]": (
        (3, 4),
        lambda rng: (lambda w, b: (lambda x: T.linear(x, w, b)))(_const(rng, 5, 4), _const(rng, 5)),
    ),
    "linear[weight]": ((5, 4), lambda rng: (lambda a: (lambda w: T.linear(a, w)))(_const(rng, 3, 4))),
    "linear[bias]": (
        (5,),
        lambda rng: (lambda a, w: (lambda b: T.linear(a, w, b)))(_const(rng, 3, 4), _const(rng, 5, 4)),
    ),
    "conv2d[x]": (
        (2, 2, 5, 5),
        lambda rng: (lambda w: (lambda x: T.conv2d(x, w, padding=1)))(_const(rng, 3, 2, 3, 3)),
    ),
    "conv2d[x,stride2]": (
        (2, 2, 5, 5),
        lambda rng: (lambda w: (lambda x: T.conv2d(x, w, stride=2)))(_const(rng, 3, 2, 3, 3)),
    ),
    "conv2d[weight]": (
        (3, 2, 3, 3),
        lambda rng: (lambda a: (lambda w: T.conv2d(a, w, padding=1)))(_const(rng, 2, 2, 4, 4)),
    ),
    "conv2d[bias]": (
        (3,),
        lambda rng: (lambda a, w: (lambda b: T.conv2d(a, w, b)))(_const(rng, 2, 2, 4, 4), _const(rng, 3, 2, 3, 3)),
    ),
    "max_pool2d": ((2, 2, 4, 4), lambda rng: lambda x: T.pool2d("max", x, 2)),
    "avg_pool2d": ((2, 2, 4, 4), lambda rng: lambda x: T.pool2d("avg", x, 2)),
    "batchnorm2d[training]": ((4, 3, 3, 3), _bn(T.TRAINING)),
    "batchnorm2d[evaluation]": ((4, 3, 3, 3), _bn(T.EVALUATION)),
    "batchnorm2d[gamma]": ((3,), _bn_param("gamma")),
    "batchnorm2d[beta]": ((3,), _bn_param("beta")),
    "softmax_cross_entropy": (
        (5, 4),
        lambda rng: (lambda y: (lambda z: T.softmax_cross_entropy(z, y)))(rng.integers(0, 4, 5)),
    ),
    "kl_divergence_softened": (
        (5, 4),
        lambda rng: (lambda t: (lambda z: T.kl_divergence_softened(t, z, 4.0)))(rng.normal(size=(5, 4))),
    ),
    "partial_l2": ((2, 3, 3, 3), _partial_l2),
}


@dataclass
class OpReport:
    name: str
    max_rel_error: float
    points: int
    skipped_near_kink: int

    @property
    def passed(self) -> bool:
        return self.points > 0 and self.max_rel_error < GRAD_TOLERANCE


def check_op(name: str, seed: int = 0, points: int = 20, perturbation: float = 1e-5, max_draws: int = 200) -> OpReport:
    """Finite-difference check of one registered op at ``points`` seeded non-kink points."""
    shape, factory = GRADIENT_CASES[name]
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst, accepted, skipped = 0.0, 0, 0
    for _ in range(max_draws):
        if accepted == points:
            break
        op = factory(rng)
        x0 = rng.normal(size=shape)
        probe = op(Tensor(x0))
        weights = rng.normal(size=probe.shape)
        res = T.grad_check(lambda x: _project(op(x), weights), x0, perturbation)
        if res.near_kink(KINK_TOLERANCE):
            skipped += 1
            continue
        worst = max(worst, res.max_rel_error)
        accepted += 1
    return OpReport(name, worst, accepted, skipped)


def gradient_suite(seed: int = 0, points: int = 20, ops=None) -> list[OpReport]:
    names = list(GRADIENT_CASES) if ops is None else list(ops)
    return [check_op(n, seed, points) for n in names]


# ---------------------------------------------------------------------------
# margin suite


@dataclass
class MarginReport:
    mu: float
    sigma: float
    closed_form: float
    monte_carlo: float
    standard_error: float
    negatives: int

    @property
    def z(self) -> float:
        return abs(self.closed_form - self.monte_carlo) / self.standard_error

    @property
    def passed(self) -> bool:
        return self.negatives >= 2 and self.z < 3.0


def monte_carlo_margin(mu: float, sigma: float, samples: int, rng: np.random.Generator) -> tuple[float, float, int]:
    """Mean and standard error of ``x | x < 0`` for ``x ~ N(mu, sigma^2)``."""
    x = rng.normal(mu, sigma, size=samples)
    neg = x[x < 0]
    if len(neg) < 2:
        return math.nan, math.inf, len(neg)
    return float(neg.mean()), float(neg.std(ddof=1) / math.sqrt(len(neg))), len(neg)


def margin_suite(samples: int = 10**6, seed: int = 0) -> list[MarginReport]:
    out = []
    for i, mu in enumerate(MARGIN_GRID_MU):
        for j, sigma in enumerate(MARGIN_GRID_SIGMA):
            rng = np.random.default_rng([seed, i, j])
            mc, se, k = monte_carlo_margin(mu, sigma, samples, rng)
            out.append(MarginReport(mu, sigma, D.margin_closed_form(mu, sigma), mc, se, k))
    return out
