"""Low-level numerics: seeded reference sampling, matrix-free MINRES, dense pinv.

Dense matrices are plain ``numpy.ndarray`` (row-major, float64).  Reductions
over samples use numpy's fixed-order (pairwise) summation, which is
deterministic for a fixed input layout, so identical seeds give bit-identical
results.

Randomness comes from ``numpy.random.Generator`` seeded with PCG64; per-step
substreams are derived as ``seed ^ step`` by the caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, NumericalError

_LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Reference densities and sampling
# ---------------------------------------------------------------------------

class ReferenceDensity:
    """A density we can sample from and whose log-density we can differentiate.

    Subclasses implement ``sample``, ``log_density`` and ``grad_log_density``.
    All take/return batched arrays: points are rows of an (n, d) array.
    """

    dim: int

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def log_density(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad_log_density(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class Component:
    """One mixture component: a diagonal Gaussian or a uniform box."""

    weight: float
    kind: str  # "gaussian" | "uniform"
    mean: Optional[tuple] = None
    std: Optional[tuple] = None
    low: Optional[tuple] = None
    high: Optional[tuple] = None

    def validate(self, dim: int) -> None:
        if self.weight <= 0:
            raise ConfigurationError(f"component weight must be > 0, got {self.weight}")
        if self.kind == "gaussian":
            if self.mean is None or self.std is None:
                raise ConfigurationError("gaussian component needs mean and std")
            if len(self.mean) != dim or len(self.std) != dim:
                raise ConfigurationError(f"gaussian component dimension != {dim}")
            if any(s <= 0 for s in self.std):
                raise ConfigurationError("gaussian stddev entries must be > 0")
        elif self.kind == "uniform":
            if self.low is None or self.high is None:
                raise ConfigurationError("uniform component needs low and high bounds")
            if len(self.low) != dim or len(self.high) != dim:
                raise ConfigurationError(f"uniform component dimension != {dim}")
            if any(lo >= hi for lo, hi in zip(self.low, self.high)):
                raise ConfigurationError("uniform bounds must satisfy low < high")
        else:
            raise ConfigurationError(f"unknown component kind {self.kind!r}")


@dataclass(frozen=True)
class SamplerSpec:
    """Declarative reference-density spec.

    kind is one of ``gaussian``, ``gaussian-mixture``, ``uniform-box``,
    ``mixed``; the component list must be consistent with the kind and the
    weights must sum to 1.
    """

    kind: str
    dim: int
    components: tuple
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in ("gaussian", "gaussian-mixture", "uniform-box", "mixed"):
            raise ConfigurationError(f"unknown sampler kind {self.kind!r}")
        if not self.components:
            raise ConfigurationError("sampler spec needs at least one component")
        for c in self.components:
            c.validate(self.dim)
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-12:
            raise ConfigurationError(f"component weights must sum to 1, got {total}")
        kinds = {c.kind for c in self.components}
        if self.kind == "gaussian" and (kinds != {"gaussian"} or len(self.components) != 1):
            raise ConfigurationError("kind 'gaussian' requires exactly one gaussian component")
        if self.kind == "gaussian-mixture" and kinds != {"gaussian"}:
            raise ConfigurationError("kind 'gaussian-mixture' allows only gaussian components")
        if self.kind == "uniform-box" and (kinds != {"uniform"} or len(self.components) != 1):
            raise ConfigurationError("kind 'uniform-box' requires exactly one uniform component")

    def build(self) -> "MixtureReference":
        self.validate()
        return MixtureReference(self.dim, self.components)


class MixtureReference(ReferenceDensity):
    """Mixture of diagonal Gaussians and uniform boxes."""

    def __init__(self, dim: int, components: Sequence[Component]):
        self.dim = dim
        self.components = tuple(components)
        self._weights = np.array([c.weight for c in components], dtype=float)
        self._cum = np.cumsum(self._weights)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ConfigurationError(f"sample size must be >= 1, got {n}")
        u = rng.random(n)
        idx = np.searchsorted(self._cum, u, side="right")
        idx = np.minimum(idx, len(self.components) - 1)
        out = np.empty((n, self.dim), dtype=float)
        # One normal/uniform block per draw keeps stream consumption
        # independent of the component assignment layout.
        normals = rng.standard_normal((n, self.dim))
        uniforms = rng.random((n, self.dim))
        for k, comp in enumerate(self.components):
            mask = idx == k
            if not np.any(mask):
                continue
            if comp.kind == "gaussian":
                mean = np.asarray(comp.mean, dtype=float)
                std = np.asarray(comp.std, dtype=float)
                out[mask] = mean + normals[mask] * std
            else:
                low = np.asarray(comp.low, dtype=float)
                high = np.asarray(comp.high, dtype=float)
                out[mask] = low + uniforms[mask] * (high - low)
        return out

    def _component_logpdf(self, z: np.ndarray) -> np.ndarray:
        """(n, k) matrix of per-component log densities (−inf outside a box)."""
        z = np.atleast_2d(z)
        n = z.shape[0]
        logp = np.full((n, len(self.components)), -np.inf)
        for k, comp in enumerate(self.components):
            if comp.kind == "gaussian":
                mean = np.asarray(comp.mean, dtype=float)
                std = np.asarray(comp.std, dtype=float)
                q = (z - mean) / std
                logp[:, k] = -0.5 * np.sum(q * q, axis=1) - np.sum(np.log(std)) \
                    - 0.5 * self.dim * _LOG_2PI
            else:
                low = np.asarray(comp.low, dtype=float)
                high = np.asarray(comp.high, dtype=float)
                inside = np.all((z >= low) & (z <= high), axis=1)
                vol = float(np.prod(high - low))
                logp[inside, k] = -math.log(vol)
        return logp

    def log_density(self, z: np.ndarray) -> np.ndarray:
        logp = self._component_logpdf(z) + np.log(self._weights)
        m = np.max(logp, axis=1)
        safe = np.where(np.isfinite(m), m, 0.0)
        out = safe + np.log(np.sum(np.exp(logp - safe[:, None]), axis=1))
        return np.where(np.isfinite(m), out, -np.inf)

    def grad_log_density(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(z)
        logp = self._component_logpdf(z) + np.log(self._weights)
        m = np.max(logp, axis=1, keepdims=True)
        post = np.exp(logp - m)
        post /= np.sum(post, axis=1, keepdims=True)
        grad = np.zeros_like(z)
        for k, comp in enumerate(self.components):
            if comp.kind != "gaussian":
                continue  # uniform log-density is flat inside its box
            mean = np.asarray(comp.mean, dtype=float)
            std = np.asarray(comp.std, dtype=float)
            grad += post[:, k : k + 1] * (-(z - mean) / (std * std))
        return grad


@dataclass
class SampleBatch:
    """Points drawn from the reference density, plus provenance.

    Per-sample map evaluations are cached separately (see maps.MapCache);
    the batch only owns the raw draws.
    """

    z: np.ndarray
    reference: Optional[ReferenceDensity] = None
    seed: Optional[int] = None

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def dim(self) -> int:
        return self.z.shape[1]


def sample_reference(spec: SamplerSpec, n: int, seed: Optional[int] = None) -> SampleBatch:
    """Draw ``n`` i.i.d. points from the spec's density.

    Identical (spec, n, seed) yields bit-identical output.  ``seed``
    defaults to the spec's own seed.
    """
    if n < 1:
        raise ConfigurationError(f"sample size must be >= 1, got {n}")
    ref = spec.build()
    use_seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(use_seed)
    z = ref.sample(n, rng)
    return SampleBatch(z=z, reference=ref, seed=use_seed)


# ---------------------------------------------------------------------------
# Linear operators and solvers
# ---------------------------------------------------------------------------

@dataclass
class LinearOperator:
    """Symmetric operator given only as a matvec callback."""

    dim: int
    apply: Callable[[np.ndarray], np.ndarray]

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return self.apply(v)


@dataclass
class MinresResult:
    x: np.ndarray
    residual: float
    iterations: int
    converged: bool


def minres_min_norm(A: LinearOperator, b: np.ndarray, tol: float = 3e-4,
                    max_iter: Optional[int] = None) -> MinresResult:
    """Minimum-norm least-squares solve of a symmetric PSD system by MINRES.

    Starting from x0 = 0 the Krylov iterates stay in span{b, Ab, ...}; when b
    lies in range(A) (true by construction for the sample-averaged metric
    with a shared batch) the returned x therefore has no null-space component
    and is the pseudo-inverse solution.  Stops when the residual estimate
    drops below ``tol * ||b||`` or the least-squares test ||A r|| / (||A|| ||r||)
    does; on iteration exhaustion the best iterate is returned with
    ``converged=False`` and the caller decides whether to abort.

    Standard Paige-Saunders recurrence (Lanczos + Givens), no preconditioner.
    """
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(b)):
        raise NumericalError("minres: right-hand side contains non-finite entries")
    n = A.dim
    if b.shape != (n,):
        raise NumericalError(f"minres: rhs has shape {b.shape}, expected ({n},)")
    if max_iter is None:
        max_iter = 2 * n

    bnorm = float(np.linalg.norm(b))
    x = np.zeros(n)
    if bnorm == 0.0:
        return MinresResult(x=x, residual=0.0, iterations=0, converged=True)

    eps = np.finfo(float).eps
    r2 = b.copy()
    y = b.copy()
    beta1 = bnorm
    oldb = 0.0
    beta = beta1
    dbar = 0.0
    epsln = 0.0
    phibar = beta1
    cs = -1.0
    sn = 0.0
    w = np.zeros(n)
    w2 = np.zeros(n)
    r1 = r2
    tnorm2 = 0.0
    itn = 0
    converged = False

    while itn < max_iter:
        itn += 1
        v = y / beta
        y = A.apply(v)
        if not np.all(np.isfinite(y)):
            raise NumericalError(f"minres: matvec returned non-finite values at iteration {itn}")
        if itn >= 2:
            y -= (beta / oldb) * r1
        alfa = float(v @ y)
        y -= (alfa / beta) * r2
        r1 = r2
        r2 = y
        oldb = beta
        beta = float(np.linalg.norm(r2))
        tnorm2 += alfa * alfa + oldb * oldb + beta * beta
        anorm = math.sqrt(tnorm2)

        oldeps = epsln
        delta = cs * dbar + sn * alfa
        gbar = sn * dbar - cs * alfa
        epsln = sn * beta
        dbar = -cs * beta
        root = math.sqrt(gbar * gbar + dbar * dbar)

        gamma = math.sqrt(gbar * gbar + beta * beta)
        gamma = max(gamma, eps)
        cs = gbar / gamma
        sn = beta / gamma
        phi = cs * phibar
        phibar = sn * phibar

        w1 = w2
        w2 = w
        w = (v - oldeps * w1 - delta * w2) / gamma
        x += phi * w

        # test1: relative residual; test2: relative ||A r|| (least-squares stop
        # for inconsistent/singular systems).
        test1 = phibar / bnorm
        test2 = root / anorm if anorm > 0 else np.inf
        if test1 <= tol or test2 <= tol:
            converged = True
            break
        if beta <= anorm * eps:  # Krylov subspace exhausted: exact LS solution
            converged = True
            break
        y = r2

    residual = float(np.linalg.norm(A.apply(x) - b))
    return MinresResult(x=x, residual=residual, iterations=itn, converged=converged)


def dense_pinv_solve(A: np.ndarray, b: np.ndarray, rcond: float = 1e-10) -> np.ndarray:
    """Minimum-norm solve of a symmetric system via eigendecomposition.

    Eigenvalues below ``rcond * |lambda|_max`` are treated as exact zeros.
    Test oracle for the matrix-free solver; not used in the hot path.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise NumericalError(f"dense_pinv_solve: matrix must be square, got {A.shape}")
    if not (0.0 < rcond < 1.0):
        raise ConfigurationError(f"rcond must lie in (0, 1), got {rcond}")
    scale = max(1.0, float(np.max(np.abs(A))))
    if np.max(np.abs(A - A.T)) > 1e-8 * scale:
        raise NumericalError("dense_pinv_solve: input is not symmetric within tolerance")
    lam, V = np.linalg.eigh(0.5 * (A + A.T))
    cutoff = rcond * np.max(np.abs(lam)) if lam.size else 0.0
    inv = np.where(np.abs(lam) > cutoff, 1.0 / np.where(lam == 0, 1.0, lam), 0.0)
    return V @ (inv * (V.T @ b))
