"""Core dynamics: matrix-free metric operator, gradient estimator, kernel
projection, and time integration of theta_dot = -G^+ grad F.

Per step, one sample batch is shared (by default) between the metric, the
drift and the gradient; with that sharing the gradient lies exactly in the
range of the metric, MINRES from a zero start returns the minimum-norm
solution, and the inner product <grad F, eta> is nonpositive by
construction.

All sample reductions happen in a fixed order, so identical seeds produce
bit-identical runs.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .energy import EnergyFunctional, DriftField
from .errors import ConfigurationError, FlowAbort, NumericalError
from .maps import PushforwardMap, _DEGENERATE_LOGDET
from .numerics import (LinearOperator, MinresResult, ReferenceDensity,
                       SampleBatch, minres_min_norm)


# ---------------------------------------------------------------------------
# Metric operator and gradient estimator
# ---------------------------------------------------------------------------

class MetricOperator:
    """G(theta) v = (1/N) sum_i J_i^T (J_i v), never forming any J_i.

    Symmetric PSD by construction (an average of Gram terms).
    """

    def __init__(self, pmap: PushforwardMap, cache):
        self.pmap = pmap
        self.cache = cache
        self.dim = pmap.n_params
        self.n_samples = cache.z.shape[0]

    def apply(self, v: np.ndarray) -> np.ndarray:
        jv = self.pmap.param_jvp_batch(self.cache, v)
        if not np.all(np.isfinite(jv)):
            bad = int(np.argmax(~np.all(np.isfinite(jv), axis=1)))
            raise NumericalError(f"non-finite Jacobian product at sample index {bad}")
        return self.pmap.param_vjp_batch(self.cache, jv) / self.n_samples

    def quadratic_form(self, v: np.ndarray) -> float:
        """v^T G v as a mean of squared norms: exactly nonnegative in floats."""
        jv = self.pmap.param_jvp_batch(self.cache, v)
        return float(np.mean(np.sum(jv * jv, axis=1)))

    def operator(self) -> LinearOperator:
        return LinearOperator(dim=self.dim, apply=self.apply)


def metric_matvec(op: MetricOperator, v: np.ndarray) -> np.ndarray:
    return op.apply(v)


def dense_metric(pmap: PushforwardMap, cache) -> np.ndarray:
    """Assemble G densely from per-sample Jacobians (test oracle, small n only)."""
    n = pmap.n_params
    N = cache.z.shape[0]
    cols = np.empty((n, N, pmap.dim))
    e = np.zeros(n)
    for k in range(n):
        e[k] = 1.0
        cols[k] = pmap.param_jvp_batch(cache, e)
        e[k] = 0.0
    # cols[k, i, :] is column k of J_i; G = (1/N) sum_i J_i^T J_i
    return np.einsum("kid,lid->kl", cols, cols) / N


def grad_theta_F(pmap: PushforwardMap, cache, drift: DriftField) -> np.ndarray:
    """(1/N) sum_i (d_theta T(z_i))^T v(z_i)."""
    if drift.values.shape != cache.z.shape:
        raise NumericalError("drift misaligned with the prepared batch")
    return pmap.param_vjp_batch(cache, drift.values) / cache.z.shape[0]


def kernel_project(pmap: PushforwardMap, batch: SampleBatch, f: np.ndarray,
                   tol: float = 3e-4, max_iter: Optional[int] = None,
                   cache=None) -> Tuple[np.ndarray, MinresResult]:
    """Orthogonal projection of a field onto span{d_theta T} in L^2(lambda).

    Solves G xi = (1/N) sum_i J_i^T f_i and returns (J xi, solver result).
    """
    if cache is None:
        cache = pmap.prepare(batch.z)
    f = np.asarray(f, dtype=float)
    if f.shape != cache.z.shape:
        raise NumericalError("field misaligned with the batch")
    rhs = pmap.param_vjp_batch(cache, f) / cache.z.shape[0]
    op = MetricOperator(pmap, cache)
    res = minres_min_norm(op.operator(), rhs, tol=tol, max_iter=max_iter)
    return pmap.param_jvp_batch(cache, res.x), res


# ---------------------------------------------------------------------------
# States, metrics, integrators
# ---------------------------------------------------------------------------

@dataclass
class PwgfState:
    theta: np.ndarray
    t: float
    step: int


@dataclass
class StepRecord:
    step: int
    t: float
    energy: float
    kl: float
    kl_se: float
    grad_norm: float
    minres_iters: int
    minres_residual: float
    wall_ms: float
    det_sign_ok: bool
    descent: float  # <grad F, eta>, nonpositive at accepted steps


VelocityFn = Callable[[np.ndarray, int], Tuple[np.ndarray, object]]


def euler_step(theta: np.ndarray, h: float, velocity: VelocityFn):
    """theta + h * eta with eta from the stage-0 velocity evaluation."""
    eta, info = velocity(theta, 0)
    return theta + h * eta, info


def rk4_step(theta: np.ndarray, h: float, velocity: VelocityFn):
    """Classical fourth-order Runge-Kutta on theta_dot = eta(theta)."""
    k1, info = velocity(theta, 0)
    k2, _ = velocity(theta + 0.5 * h * k1, 1)
    k3, _ = velocity(theta + 0.5 * h * k2, 2)
    k4, _ = velocity(theta + h * k3, 3)
    return theta + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), info


_STEPPERS = {"euler": euler_step, "rk4": rk4_step}
RESAMPLING_POLICIES = ("frozen-per-step", "frozen-global", "fresh-per-stage")


@dataclass
class FlowOptions:
    h: float
    steps: int
    method: str = "euler"
    resampling: str = "frozen-per-step"
    n_metric: int = 1000
    n_energy: Optional[int] = None      # defaults to n_metric (shared batch)
    solver_tol: float = 3e-4
    solver_max_iter: Optional[int] = None
    seed: int = 0
    snapshot_times: Sequence[float] = ()
    snapshot_n: int = 5000
    deterministic: bool = True

    def validate(self):
        if self.h <= 0:
            raise ConfigurationError("integrator.h must be > 0")
        if self.steps < 0:
            raise ConfigurationError("integrator.steps must be >= 0")
        if self.method not in _STEPPERS:
            raise ConfigurationError(f"unknown integrator method {self.method!r}")
        if self.resampling not in RESAMPLING_POLICIES:
            raise ConfigurationError(f"unknown resampling policy {self.resampling!r}")
        if self.n_metric < 1:
            raise ConfigurationError("sampling.n_metric must be >= 1")
        if self.solver_tol <= 0:
            raise ConfigurationError("solver.tol must be > 0")


@dataclass
class FlowResult:
    state: PwgfState
    metrics: List[StepRecord]
    snapshots: List[Tuple[float, np.ndarray]]
    final_map: PushforwardMap
    skipped_snapshots: List[float] = field(default_factory=list)


class _StageInfo:
    __slots__ = ("pmap", "cache", "batch", "grad", "solve", "det_ok")

    def __init__(self, pmap, cache, batch, grad, solve, det_ok):
        self.pmap = pmap
        self.cache = cache
        self.batch = batch
        self.grad = grad
        self.solve = solve
        self.det_ok = det_ok


def run_flow(pmap: PushforwardMap, energy: EnergyFunctional,
             reference: ReferenceDensity, opts: FlowOptions) -> FlowResult:
    """Execute the parameter dynamics for opts.steps steps.

    Batch seeds follow the documented scheme: the batch at step k uses
    ``seed ^ k`` (stages of one step add 7919 * stage); snapshots use
    ``seed + 0x5A5A5A5A + index``.  Aborts raise FlowAbort with the partial
    state and metrics attached.
    """
    opts.validate()
    theta = pmap.theta.copy()
    metrics: List[StepRecord] = []
    snapshots: List[Tuple[float, np.ndarray]] = []
    pending = sorted(float(t) for t in opts.snapshot_times)
    n_energy = opts.n_energy if opts.n_energy is not None else opts.n_metric
    stepper = _STEPPERS[opts.method]
    global_batch: Optional[SampleBatch] = None

    def draw_batch(step: int, stage: int) -> SampleBatch:
        nonlocal global_batch
        if opts.resampling == "frozen-global":
            if global_batch is None:
                rng = np.random.default_rng(opts.seed ^ 0)
                global_batch = SampleBatch(reference.sample(opts.n_metric, rng),
                                           reference, opts.seed)
            return global_batch
        seed = (opts.seed ^ step) + (7919 * stage if opts.resampling == "fresh-per-stage" else 0)
        rng = np.random.default_rng(seed)
        return SampleBatch(reference.sample(opts.n_metric, rng), reference, seed)

    def stage_eval(theta_now: np.ndarray, batch: SampleBatch) -> Tuple[np.ndarray, _StageInfo]:
        cur = pmap.with_params(theta_now)
        cache = cur.prepare(batch.z)
        _, logdet, sign = cur.spatial_jacobians(cache)
        det_ok = bool(np.all(sign > 0) and np.all(logdet > _DEGENERATE_LOGDET))
        if not det_ok:
            bad = int(np.argmax((sign <= 0) | (logdet <= _DEGENERATE_LOGDET)))
            raise FlowAbort(
                f"Jacobian sign flip / degeneracy at sample index {bad}",
                reason="det-sign-flip", state=PwgfState(theta_now, np.nan, -1),
                metrics=metrics)
        drift = energy.drift(cur, batch, cache)
        g = grad_theta_F(cur, cache, drift)
        op = MetricOperator(cur, cache)
        res = minres_min_norm(op.operator(), -g, tol=opts.solver_tol,
                              max_iter=opts.solver_max_iter)
        if not res.converged:
            raise FlowAbort(
                f"MINRES hit the iteration cap ({res.iterations} iters, "
                f"residual {res.residual:.3e})",
                reason="minres-max-iter", state=PwgfState(theta_now, np.nan, -1),
                metrics=metrics)
        return res.x, _StageInfo(cur, cache, batch, g, res, det_ok)

    def record(step: int, t: float, info: Optional[_StageInfo],
               wall_ms: float) -> None:
        cur = info.pmap
        if n_energy == opts.n_metric:
            ebatch, ecache = info.batch, info.cache
        else:
            rng = np.random.default_rng((opts.seed ^ step) + 0x9E3779B9)
            ebatch = SampleBatch(reference.sample(n_energy, rng), reference)
            ecache = cur.prepare(ebatch.z)
        est = energy.energy(cur, ebatch, ecache)
        is_kl = energy.kind == "relative-entropy"
        solve = info.solve
        metrics.append(StepRecord(
            step=step, t=t, energy=est.value,
            kl=est.value if is_kl else math.nan,
            kl_se=est.stderr if is_kl else math.nan,
            grad_norm=float(np.linalg.norm(info.grad)),
            minres_iters=solve.iterations if solve is not None else 0,
            minres_residual=solve.residual if solve is not None else math.nan,
            wall_ms=wall_ms,
            det_sign_ok=info.det_ok,
            descent=float(info.grad @ solve.x) if solve is not None else math.nan))

    def take_snapshots(step: int, t: float, theta_now: np.ndarray) -> None:
        cur = pmap.with_params(theta_now)
        while pending and pending[0] <= t + 1e-12:
            when = pending.pop(0)
            rng = np.random.default_rng(opts.seed + 0x5A5A5A5A + len(snapshots))
            z = reference.sample(opts.snapshot_n, rng)
            snapshots.append((when, cur.outputs(cur.prepare(z))))

    for step in range(opts.steps):
        t = step * opts.h
        take_snapshots(step, t, theta)
        t0 = time.perf_counter()

        def velocity(th, stage, _step=step):
            batch = draw_batch(_step, stage if opts.resampling == "fresh-per-stage" else 0)
            return stage_eval(th, batch)

        try:
            theta_next, info = stepper(theta, opts.h, velocity)
        except FlowAbort as exc:
            exc.state = PwgfState(theta, t, step)
            exc.metrics = metrics
            raise
        wall_ms = (time.perf_counter() - t0) * 1000.0
        record(step, t, info, wall_ms)
        if not np.all(np.isfinite(theta_next)):
            raise FlowAbort("parameter vector became non-finite",
                            reason="non-finite-theta",
                            state=PwgfState(theta, t, step), metrics=metrics)
        theta = theta_next

    # terminal record: energy and gradient at the final state, no solve
    t_end = opts.steps * opts.h
    take_snapshots(opts.steps, t_end, theta)
    t0 = time.perf_counter()
    batch = draw_batch(opts.steps, 0)
    cur = pmap.with_params(theta)
    cache = cur.prepare(batch.z)
    _, logdet, sign = cur.spatial_jacobians(cache)
    det_ok = bool(np.all(sign > 0) and np.all(logdet > _DEGENERATE_LOGDET))
    drift = energy.drift(cur, batch, cache)
    g = grad_theta_F(cur, cache, drift)
    info = _StageInfo(cur, cache, batch, g, None, det_ok)
    record(opts.steps, t_end, info, (time.perf_counter() - t0) * 1000.0)

    state = PwgfState(theta=theta, t=t_end, step=opts.steps)
    return FlowResult(state=state, metrics=metrics, snapshots=snapshots,
                      final_map=cur, skipped_snapshots=list(pending))


# ---------------------------------------------------------------------------
# On-disk formats owned by this module
# ---------------------------------------------------------------------------

METRICS_HEADER = "step,t,energy,kl,grad_norm,minres_iters,minres_residual,wall_ms,det_sign_ok"


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_metrics_csv(records: Sequence[StepRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(METRICS_HEADER + "\n")
        for r in records:
            fh.write(",".join([
                str(r.step), _fmt(r.t), _fmt(r.energy), _fmt(r.kl),
                _fmt(r.grad_norm), str(r.minres_iters), _fmt(r.minres_residual),
                _fmt(r.wall_ms), "1" if r.det_sign_ok else "0",
            ]) + "\n")


def write_snapshot_csv(samples: np.ndarray, path) -> None:
    d = samples.shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(f"x{i}" for i in range(d)) + "\n")
        for row in samples:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
