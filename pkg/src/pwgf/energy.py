"""Energy functionals on pushed densities: drift fields and scalar estimates.

Each functional supplies the drift v(z) = grad_X (dF/drho)(rho_theta, .) at
T(z) on a batch, which feeds the parameter-gradient estimator, plus a Monte
Carlo estimate of F(rho_theta) with a standard error.

Conventions pinned here:

* Relative entropy reports the *unnormalized* KL (the intractable log Z_D is
  dropped); the analytic constant is added back only in quadratic-potential
  tests.  The additive constant does not affect the dynamics.
* The interaction energy over a single shared batch is the U-statistic with
  pair weight 1/(N(N-1)) (diagonal excluded), and the matching drift divides
  by N-1.  With that pairing the parameter gradient of the batch energy is
  exactly the vjp-based estimator, which the pathwise finite-difference
  tests rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, NumericalError
from .maps import PushforwardMap, pushforward_logdensity_batch
from .numerics import SampleBatch

_PAIR_CHUNK = 512  # rows per block in all-pairs kernels, bounds memory


# ---------------------------------------------------------------------------
# Potentials
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Potential:
    """Scalar potential with analytic gradient, both batched."""

    name: str
    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]


def _styblinski_tang_value(x: np.ndarray) -> np.ndarray:
    return 0.06 * np.sum(x ** 4 - 16.0 * x ** 2 + 5.0 * x, axis=-1)


def _styblinski_tang_grad(x: np.ndarray) -> np.ndarray:
    return 0.06 * (4.0 * x ** 3 - 32.0 * x + 5.0)


POTENTIALS = {
    "styblinski-tang": Potential("styblinski-tang",
                                 _styblinski_tang_value, _styblinski_tang_grad),
    "quadratic": Potential("quadratic",
                           lambda x: 0.5 * np.sum(x * x, axis=-1),
                           lambda x: np.array(x, copy=True)),
    "zero": Potential("zero",
                      lambda x: np.zeros(np.asarray(x).shape[:-1]),
                      lambda x: np.zeros_like(x)),
}


def get_potential(name: str) -> Potential:
    try:
        return POTENTIALS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown potential {name!r}; available: {sorted(POTENTIALS)}") from None


@dataclass
class DriftField:
    """Per-sample drift vectors aligned index-wise with the batch."""

    batch: SampleBatch
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.batch.z.shape:
            raise NumericalError("drift values misaligned with the batch")
        if not np.all(np.isfinite(self.values)):
            bad = int(np.argmax(~np.all(np.isfinite(self.values), axis=1)))
            raise NumericalError(f"non-finite drift at sample index {bad}")


# ---------------------------------------------------------------------------
# Drift fields
# ---------------------------------------------------------------------------

def drift_relative_entropy(pmap: PushforwardMap, batch: SampleBatch,
                           potential: Potential, diffusion: float,
                           cache=None) -> DriftField:
    """v(z) = grad V(T(z)) + D grad_x log rho_theta(T(z))."""
    if cache is None:
        cache = pmap.prepare(batch.z)
    _, grad_logrho = pushforward_logdensity_batch(pmap, cache, batch.reference)
    x = pmap.outputs(cache)
    return DriftField(batch, potential.grad(x) + diffusion * grad_logrho)


def drift_pme(pmap: PushforwardMap, batch: SampleBatch, m: float,
              cache=None) -> DriftField:
    """v(z) = m rho^(m-1) grad_x log rho at T(z).

    The product stays bounded near the support boundary even where the
    log-gradient blows up, because rho^(m-1) vanishes there at the same
    rate; the density factor is applied with overflow-safe exponentiation.
    """
    if cache is None:
        cache = pmap.prepare(batch.z)
    logrho, grad_logrho = pushforward_logdensity_batch(pmap, cache, batch.reference)
    weight = np.exp(np.clip((m - 1) * logrho, -745.0, 700.0))
    return DriftField(batch, m * weight[:, None] * grad_logrho)


def _kernel_grad_sum(x: np.ndarray, xp: np.ndarray, a: float, b: float,
                     exclude_self: bool) -> np.ndarray:
    """Row sums of grad J(x_i - xp_j) with grad J(r) = (|r|^(a-2) - |r|^(b-2)) r.

    Zero-distance pairs contribute zero by convention.  Chunked over rows to
    bound the pairwise-difference buffer.
    """
    n = x.shape[0]
    out = np.empty_like(x)
    for start in range(0, n, _PAIR_CHUNK):
        stop = min(start + _PAIR_CHUNK, n)
        diff = x[start:stop, None, :] - xp[None, :, :]
        r2 = np.sum(diff * diff, axis=2)
        pos = r2 > 0.0
        r2safe = np.where(pos, r2, 1.0)
        coef = np.where(pos,
                        r2safe ** ((a - 2.0) / 2.0) - r2safe ** ((b - 2.0) / 2.0),
                        0.0)
        # self pairs (r = 0, only under exclude_self) get coef 0 via the mask
        out[start:stop] = np.matmul(coef[:, None, :], diff)[:, 0, :]
    return out


def drift_interaction(pmap: PushforwardMap, batch: SampleBatch, a: float, b: float,
                      pair_batch: Optional[SampleBatch] = None,
                      cache=None, pair_cache=None) -> DriftField:
    """Monte Carlo convolution drift v(z) = mean_j grad J(T(z) - T(z'_j)).

    With the shared batch (default) the self pair is excluded and the mean
    divides by N-1, matching the U-statistic energy exactly.
    """
    if a <= b or b <= 0:
        raise ConfigurationError(f"kernel exponents need a > b > 0, got a={a}, b={b}")
    if cache is None:
        cache = pmap.prepare(batch.z)
    x = pmap.outputs(cache)
    shared = pair_batch is None or pair_batch is batch
    if shared:
        xp = x
        denom = max(x.shape[0] - 1, 1)
    else:
        if pair_cache is None:
            pair_cache = pmap.prepare(pair_batch.z)
        xp = pmap.outputs(pair_cache)
        denom = xp.shape[0]
    force = _kernel_grad_sum(x, xp, a, b, exclude_self=shared)
    return DriftField(batch, force / denom)


def drift_linear_potential(pmap: PushforwardMap, batch: SampleBatch,
                           potential: Potential, cache=None) -> DriftField:
    """v(z) = grad V(T(z)); pathwise-exact test functional F = int V drho."""
    if cache is None:
        cache = pmap.prepare(batch.z)
    return DriftField(batch, potential.grad(pmap.outputs(cache)))


# ---------------------------------------------------------------------------
# Scalar energy estimates
# ---------------------------------------------------------------------------

@dataclass
class EnergyEstimate:
    value: float
    stderr: float


def _mean_se(values: np.ndarray) -> EnergyEstimate:
    n = values.shape[0]
    se = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return EnergyEstimate(float(np.mean(values)), se)


def relative_entropy_estimate(pmap: PushforwardMap, batch: SampleBatch,
                              potential: Potential, diffusion: float,
                              cache=None) -> EnergyEstimate:
    """Unnormalized KL: mean of V(x)/D + log rho(x) over pushed samples."""
    if cache is None:
        cache = pmap.prepare(batch.z)
    logrho, _ = pushforward_logdensity_batch(pmap, cache, batch.reference)
    x = pmap.outputs(cache)
    return _mean_se(potential.value(x) / diffusion + logrho)


def pme_estimate(pmap: PushforwardMap, batch: SampleBatch, m: float,
                 cache=None) -> EnergyEstimate:
    """Internal energy 1/(m-1) E[rho^(m-1) at T(z)]."""
    if cache is None:
        cache = pmap.prepare(batch.z)
    logrho, _ = pushforward_logdensity_batch(pmap, cache, batch.reference)
    vals = np.exp(np.clip((m - 1) * logrho, -745.0, 700.0)) / (m - 1)
    return _mean_se(vals)


def interaction_estimate(pmap: PushforwardMap, batch: SampleBatch,
                         a: float, b: float,
                         pair_batch: Optional[SampleBatch] = None,
                         cache=None, pair_cache=None) -> EnergyEstimate:
    """(1/2) E J(|x - x'|): U-statistic on the shared batch, zero diagonal."""
    if cache is None:
        cache = pmap.prepare(batch.z)
    x = pmap.outputs(cache)
    shared = pair_batch is None or pair_batch is batch
    if shared:
        xp = x
    else:
        if pair_cache is None:
            pair_cache = pmap.prepare(pair_batch.z)
        xp = pmap.outputs(pair_cache)
    n = x.shape[0]
    row = np.empty(n)
    for start in range(0, n, _PAIR_CHUNK):
        stop = min(start + _PAIR_CHUNK, n)
        diff = x[start:stop, None, :] - xp[None, :, :]
        r2 = np.sum(diff * diff, axis=2)
        pos = r2 > 0.0
        r2safe = np.where(pos, r2, 1.0)
        J = np.where(pos,
                     r2safe ** (a / 2.0) / a - r2safe ** (b / 2.0) / b,
                     0.0)
        row[start:stop] = J.sum(axis=1)
    denom = max(n - 1, 1) if shared else xp.shape[0]
    per_sample = 0.5 * row / denom
    # row means are not independent; this stderr is the usual U-statistic proxy
    return _mean_se(per_sample)


def linear_potential_estimate(pmap: PushforwardMap, batch: SampleBatch,
                              potential: Potential, cache=None) -> EnergyEstimate:
    if cache is None:
        cache = pmap.prepare(batch.z)
    return _mean_se(potential.value(pmap.outputs(cache)))


# ---------------------------------------------------------------------------
# Functional objects used by the flow driver
# ---------------------------------------------------------------------------

class EnergyFunctional:
    """Bundle of a drift rule and an energy estimator for one functional kind."""

    kind: str
    needs_density: bool

    def drift(self, pmap, batch, cache=None) -> DriftField:
        raise NotImplementedError

    def energy(self, pmap, batch, cache=None) -> EnergyEstimate:
        raise NotImplementedError


class RelativeEntropyEnergy(EnergyFunctional):
    kind = "relative-entropy"
    needs_density = True

    def __init__(self, potential: Potential, diffusion: float):
        if diffusion <= 0:
            raise ConfigurationError(f"diffusion must be > 0, got {diffusion}")
        self.potential = potential
        self.diffusion = diffusion

    def drift(self, pmap, batch, cache=None):
        return drift_relative_entropy(pmap, batch, self.potential, self.diffusion, cache)

    def energy(self, pmap, batch, cache=None):
        return relative_entropy_estimate(pmap, batch, self.potential, self.diffusion, cache)


class PmeEnergy(EnergyFunctional):
    kind = "pme-internal"
    needs_density = True

    # m is real > 1: the experiments run non-integer exponents (e.g. 2.4)
    def __init__(self, m: float):
        if m <= 1:
            raise ConfigurationError(f"pme exponent must exceed 1, got {m}")
        self.m = float(m)

    def drift(self, pmap, batch, cache=None):
        return drift_pme(pmap, batch, self.m, cache)

    def energy(self, pmap, batch, cache=None):
        return pme_estimate(pmap, batch, self.m, cache)


class InteractionEnergy(EnergyFunctional):
    kind = "interaction"
    needs_density = False

    def __init__(self, a: float, b: float):
        if a <= b or b <= 0:
            raise ConfigurationError(f"kernel exponents need a > b > 0, got a={a}, b={b}")
        self.a = a
        self.b = b

    def drift(self, pmap, batch, cache=None):
        return drift_interaction(pmap, batch, self.a, self.b, cache=cache)

    def energy(self, pmap, batch, cache=None):
        return interaction_estimate(pmap, batch, self.a, self.b, cache=cache)


class LinearPotentialEnergy(EnergyFunctional):
    kind = "linear-potential"
    needs_density = False

    def __init__(self, potential: Potential):
        self.potential = potential

    def drift(self, pmap, batch, cache=None):
        return drift_linear_potential(pmap, batch, self.potential, cache)

    def energy(self, pmap, batch, cache=None):
        return linear_potential_estimate(pmap, batch, self.potential, cache)
