"""Distributions, samplers and gradient estimators for halting variables."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# Uniform noise is kept strictly inside (0, 1) before its logit is taken.
NOISE_EPS = 1e-12
EMA_DECAY = 0.99
DEFAULT_TEMPERATURE = 2.0 / 3.0


class RngStream:
    """Counter-based random stream identified by ``(seed, *stream)``.

    Backed by the Philox generator, so a given ``(seed, stream, draw index)``
    always produces the same variate regardless of what other streams do.
    """

    def __init__(self, seed: int, *stream: int):
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        key = np.random.SeedSequence(self.seed, spawn_key=self.stream).generate_state(2, np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, *self.stream, *ids)

    def uniform(self, size=None) -> np.ndarray | float:
        return self._gen.random(size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream})"


def _check_prob(h, name="h"):
    arr = np.asarray(h, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0) or np.any(np.isnan(arr)):
        raise ValueError(f"{name} must lie in [0, 1], got {h!r}")
    return arr


def sample_bernoulli(h: float, rng: RngStream) -> int:
    _check_prob(h)
    return int(rng.uniform() < h)


def bernoulli(h, rng: RngStream) -> np.ndarray:
    """Vectorized Bernoulli draws, one per entry of ``h``; returns float 0/1."""
    h = _check_prob(h)
    return (rng.uniform(h.shape) < h).astype(np.float64)


def uniform_logit(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), NOISE_EPS, 1.0 - NOISE_EPS)
    return np.log(u) - np.log1p(-u)


def relaxed_bernoulli_from_logits(logits, temperature: float, noise) -> Tensor:
    """sigmoid((logits + logit(noise)) / temperature) for uniform ``noise``.

    Working from the halting logit avoids the probability clamp, so heads
    with very large logits saturate cleanly.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = ad.as_tensor(logits)
    return ad.sigmoid((logits + uniform_logit(noise)) * (1.0 / temperature))


def sample_relaxed_bernoulli(h, temperature: float, rng: RngStream | None = None, noise=None) -> Tensor:
    """Draw from RelaxedBernoulli(h; temperature), differentiable in ``h``.

    ``noise`` may be given explicitly; otherwise one uniform per entry of
    ``h`` is drawn from ``rng``.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    h = ad.as_tensor(h)
    if noise is None:
        noise = rng.uniform(h.shape)
    return relaxed_bernoulli_from_logits(ad.logit(h), temperature, noise)


def _last_axis(t: Tensor) -> list[Tensor]:
    lead = (slice(None),) * (t.ndim - 1)
    return [t[lead + (i,)] for i in range(t.shape[-1])]


def stick_break(gates) -> Tensor:
    """Weights z^l = g^l * prod_{i<l}(1 - g^i) along the last axis.

    The final gate must be exactly 1 so the weights use up the whole stick.
    """
    gates = ad.as_tensor(gates)
    vals = gates.value
    if np.any(vals < 0) or np.any(vals > 1):
        raise ValueError("gates must lie in [0, 1]")
    if not np.all(vals[..., -1] == 1.0):
        raise ValueError("final gate must equal 1")
    parts = _last_axis(gates)
    weights, stick = [], None
    for g in parts[:-1]:
        weights.append(g if stick is None else stick * g)
        stick = (1.0 - g) if stick is None else stick * (1.0 - g)
    weights.append(parts[-1] if stick is None else stick * parts[-1])
    return ad.stack(weights, axis=-1)


def halting_pmf(h) -> Tensor:
    """q(z = l) = h^l * prod_{i<l}(1 - h^i); requires h^L = 1."""
    h = ad.as_tensor(h)
    _check_prob(h.value)
    if not np.all(h.value[..., -1] == 1.0):
        raise ValueError("final halting probability must equal 1")
    return stick_break(h)


def expected_iterations(h) -> Tensor:
    """N = sum_l l * q(z = l)."""
    pmf = halting_pmf(h)
    return (pmf * np.arange(1, pmf.shape[-1] + 1, dtype=np.float64)).sum(axis=-1)


@dataclass(frozen=True)
class TruncatedGeometricPrior:
    """p(z) proportional to exp(-penalty * z) on {1, ..., support}."""

    penalty: float
    support: int

    def __post_init__(self):
        if not self.penalty > 0:
            raise ValueError(f"penalty must be positive, got {self.penalty}")
        if self.support < 1:
            raise ValueError(f"support must be >= 1, got {self.support}")

    @property
    def log_normalizer(self) -> float:
        t, n = self.penalty, self.support
        return math.log(math.expm1(t)) - math.log(-math.expm1(-t * n))

    def log_pmf(self, z: int) -> float:
        if not 1 <= z <= self.support or int(z) != z:
            raise ValueError(f"z={z} outside support 1..{self.support}")
        return self.log_normalizer - self.penalty * z

    def pmf(self) -> np.ndarray:
        z = np.arange(1, self.support + 1)
        return np.exp(self.log_normalizer - self.penalty * z)


def prior_log_pmf(prior: TruncatedGeometricPrior, z: int) -> float:
    return prior.log_pmf(z)


def expected_log_prior(prior: TruncatedGeometricPrior, h) -> Tensor:
    """E_q log p(z) = log_normalizer - penalty * N, computed analytically."""
    h = ad.as_tensor(h)
    if h.shape[-1] != prior.support:
        raise ValueError(f"h has {h.shape[-1]} iterations, prior support is {prior.support}")
    return prior.log_normalizer - prior.penalty * expected_iterations(h)


@dataclass
class EstimatorState:
    kind: str = "concrete"
    baseline: float = 0.0
    decay: float = EMA_DECAY
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if self.kind not in ("reinforce", "concrete"):
            raise ValueError(f"unknown estimator kind {self.kind!r}")

    def update(self, reward: float) -> float:
        self.baseline = self.decay * self.baseline + (1.0 - self.decay) * float(reward)
        return self.baseline


def reinforce_surrogate(log_likelihood: Tensor, log_q: Tensor, penalty: Tensor | float,
                        state: EstimatorState) -> Tensor:
    """Scalar loss whose gradient is minus the REINFORCE estimate of grad L.

    Per example the estimate is ``(log p - c) grad log q + grad log p -
    grad penalty``.  The reward ``log p - c`` enters as a constant, so the
    penalty contributes only its pathwise gradient.  Inputs are per-example
    vectors (or scalars); the loss is their batch mean.  The baseline is not
    updated here.
    """
    advantage = ad.stop_gradient(log_likelihood) - state.baseline
    objective = log_likelihood + advantage * log_q - penalty
    return -objective.mean()


def log10_variance(samples) -> float:
    """Mean per-coordinate unbiased variance across rows, log base 10.

    Returns ``-inf`` when the variance is exactly zero.
    """
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape[0] < 2:
        raise ValueError("variance probe needs at least 2 samples")
    var = float(arr.var(axis=0, ddof=1).mean())
    return -math.inf if var == 0.0 else math.log10(var)


@dataclass
class VarianceProbe:
    """Sliding-window gradient variance, one reading per pushed gradient."""

    window: int = 16
    _buf: deque = field(default_factory=deque, repr=False)

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window must be >= 2")
        self._buf = deque(maxlen=self.window)

    def push(self, grad_vector) -> float | None:
        self._buf.append(np.asarray(grad_vector, dtype=np.float64).ravel().copy())
        if len(self._buf) < 2:
            return None
        return log10_variance(np.stack(self._buf))


def variance_probe(gradients: Sequence, window: int = 16) -> list[float | None]:
    probe = VarianceProbe(window)
    return [probe.push(g) for g in gradients]
