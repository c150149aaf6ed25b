"""Parameterized push-forward maps with analytic derivatives.

Three architectures:

* ``AffineMap``            T(z) = A z + b
* ``PlanarFlowStack``      T = f_M o ... o f_1,  f(x) = x + tanh(w.x + b) u
* ``ResidualMLP``          T(z) = z + R(z), R a tanh MLP, output layer bias-free

Every map exposes batched primitives over a prepared forward cache:
outputs, spatial Jacobians with log-determinants, parameter-direction
derivatives (jvp), parameter-transposed products (vjp) and the spatial
gradient of the log-determinant.  All derivatives are analytic; finite
differences appear only in tests.

Parameter layout (canonical order of the flat vector theta):

* affine:           A row-major, then b
* planar stack:     per layer, in order: w, b, u   (layer-major)
* residual MLP:     per hidden layer: W row-major, then bias; finally the
                    output weight matrix row-major (no output bias)

Planar layers enforce invertibility by reading u through the reprojection
u_hat = u + (m(u.w) - u.w) w / |w|^2 with m(s) = -1 + log(1 + e^s), which
guarantees u_hat.w > -1 and hence a positive layer determinant.  All
parameter derivatives chain through this reprojection so that finite
differences on the raw parameters agree with the analytic products.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DegenerateJacobianError, NumericalError
from .numerics import ReferenceDensity

_DEGENERATE_LOGDET = -690.0  # log(1e-300)


@dataclass
class MapEvaluation:
    """Single-point forward evaluation: image, spatial Jacobian, log|det|."""

    z: np.ndarray
    x: np.ndarray
    jacobian: np.ndarray
    logdet: float
    sign: int


class PushforwardMap:
    """Base class; maps are immutable once constructed."""

    architecture: str
    dim: int
    n_params: int

    @property
    def theta(self) -> np.ndarray:
        """Flat parameter vector (read-only view)."""
        return self._theta

    def with_params(self, theta: np.ndarray) -> "PushforwardMap":
        raise NotImplementedError

    def hyperparams(self) -> dict:
        raise NotImplementedError

    def prepare(self, z: np.ndarray):
        """Run the forward pass on a batch (n, d) and cache intermediates."""
        raise NotImplementedError

    def outputs(self, cache) -> np.ndarray:
        raise NotImplementedError

    def spatial_jacobians(self, cache):
        """Return (J, logdet, sign): (n, d, d), (n,), (n,)."""
        raise NotImplementedError

    def param_jvp_batch(self, cache, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def param_vjp_batch(self, cache, y: np.ndarray) -> np.ndarray:
        """Sum over the batch of (d_theta T(z_i))^T y_i; returns (n_params,)."""
        raise NotImplementedError

    def grad_logdet_batch(self, cache) -> np.ndarray:
        raise NotImplementedError

    def _check_param_dim(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n_params,):
            raise NumericalError(
                f"parameter vector has shape {v.shape}, expected ({self.n_params},)")
        return v

    def _as_batch(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[None, :]
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise NumericalError(f"points have shape {z.shape}, expected (*, {self.dim})")
        return z


# ---------------------------------------------------------------------------
# Affine
# ---------------------------------------------------------------------------

class AffineCache:
    __slots__ = ("z", "x", "_dens")

    def __init__(self, z, x):
        self.z = z
        self.x = x
        self._dens = None


class AffineMap(PushforwardMap):
    """T(z) = A z + b with constant Jacobian A."""

    architecture = "affine"

    def __init__(self, matrix: np.ndarray, offset: np.ndarray):
        A = np.asarray(matrix, dtype=float)
        b = np.asarray(offset, dtype=float)
        d = A.shape[0]
        if A.shape != (d, d) or b.shape != (d,):
            raise ConfigurationError("affine map needs a square matrix and matching offset")
        self.dim = d
        self.n_params = d * d + d
        self._A = A.copy()
        self._b = b.copy()
        self._theta = np.concatenate([A.ravel(), b])
        self._theta.setflags(write=False)
        self._sign, self._logdet = np.linalg.slogdet(A)

    @classmethod
    def identity(cls, dim: int) -> "AffineMap":
        return cls(np.eye(dim), np.zeros(dim))

    @classmethod
    def from_params(cls, dim: int, theta: np.ndarray) -> "AffineMap":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (dim * dim + dim,):
            raise ConfigurationError("affine parameter vector has wrong length")
        return cls(theta[: dim * dim].reshape(dim, dim), theta[dim * dim :])

    def with_params(self, theta: np.ndarray) -> "AffineMap":
        return AffineMap.from_params(self.dim, theta)

    def hyperparams(self) -> dict:
        return {}

    @property
    def matrix(self) -> np.ndarray:
        return self._A.copy()

    @property
    def offset(self) -> np.ndarray:
        return self._b.copy()

    def prepare(self, z: np.ndarray) -> AffineCache:
        z = self._as_batch(z)
        return AffineCache(z, z @ self._A.T + self._b)

    def outputs(self, cache: AffineCache) -> np.ndarray:
        return cache.x

    def spatial_jacobians(self, cache: AffineCache):
        n = cache.z.shape[0]
        J = np.broadcast_to(self._A, (n, self.dim, self.dim)).copy()
        logdet = np.full(n, self._logdet)
        sign = np.full(n, self._sign)
        return J, logdet, sign

    def param_jvp_batch(self, cache: AffineCache, v: np.ndarray) -> np.ndarray:
        v = self._check_param_dim(v)
        d = self.dim
        dA = v[: d * d].reshape(d, d)
        db = v[d * d :]
        return cache.z @ dA.T + db

    def param_vjp_batch(self, cache: AffineCache, y: np.ndarray) -> np.ndarray:
        gA = y.T @ cache.z
        gb = y.sum(axis=0)
        return np.concatenate([gA.ravel(), gb])

    def grad_logdet_batch(self, cache: AffineCache) -> np.ndarray:
        return np.zeros_like(cache.z)


# ---------------------------------------------------------------------------
# Planar flow stack
# ---------------------------------------------------------------------------

def _softplus(s: float) -> float:
    return float(np.logaddexp(0.0, s))


def _sigmoid(s: float) -> float:
    if s >= 0:
        return 1.0 / (1.0 + math.exp(-s))
    e = math.exp(s)
    return e / (1.0 + e)


class _PlanarLayer:
    """Effective per-layer quantities derived from the raw parameters."""

    __slots__ = ("w", "b", "u", "wsq", "sbar", "g", "gp", "uhat", "kappa")

    def __init__(self, w: np.ndarray, b: float, u: np.ndarray):
        self.w = w
        self.b = b
        self.u = u
        self.wsq = float(w @ w)
        if self.wsq > 0.0:
            self.sbar = float(u @ w)
            m = -1.0 + _softplus(self.sbar)
            self.g = m - self.sbar
            self.gp = _sigmoid(self.sbar) - 1.0
            self.uhat = u + (self.g / self.wsq) * w
        else:
            # zero w: the layer is a pure translation, no constraint needed
            self.sbar = 0.0
            self.g = 0.0
            self.gp = 0.0
            self.uhat = u.copy()
        self.kappa = float(self.uhat @ self.w)  # > -1 by the reprojection


class PlanarCache:
    __slots__ = ("z", "x", "x_in", "s", "t", "tp", "_jac", "_dens")

    def __init__(self, z, x, x_in, s, t, tp):
        self.z = z
        self.x = x
        self.x_in = x_in  # list of per-layer inputs, len M
        self.s = s        # list of (n,) pre-activations
        self.t = t
        self.tp = tp
        self._jac = None  # lazy (J, logdet, sign, grad_logdet)
        self._dens = None


class PlanarFlowStack(PushforwardMap):
    """Stack of planar layers x -> x + tanh(w.x + b) u_hat."""

    architecture = "planar-flow-stack"

    def __init__(self, dim: int, n_layers: int, theta: np.ndarray):
        if n_layers < 1:
            raise ConfigurationError("planar stack needs at least one layer")
        self.dim = dim
        self.n_layers = n_layers
        self.n_params = n_layers * (2 * dim + 1)
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ConfigurationError(
                f"planar stack with {n_layers} layers in d={dim} needs "
                f"{self.n_params} parameters, got {theta.shape}")
        self._theta = theta.copy()
        self._theta.setflags(write=False)
        self._layers: List[_PlanarLayer] = []
        per = 2 * dim + 1
        for j in range(n_layers):
            base = j * per
            w = theta[base : base + dim]
            b = float(theta[base + dim])
            u = theta[base + dim + 1 : base + per]
            self._layers.append(_PlanarLayer(w.copy(), b, u.copy()))

    @classmethod
    def identity(cls, dim: int, n_layers: int, seed: int = 0,
                 bias_scale: float = 0.1) -> "PlanarFlowStack":
        """Exact identity map with randomized w, b so the flow can move.

        The always-on reprojection makes u_hat = 0 require
        u = log(e - 1) * w / |w|^2 rather than u = 0.
        """
        rng = np.random.default_rng(seed)
        per = 2 * dim + 1
        theta = np.zeros(n_layers * per)
        c = math.log(math.e - 1.0)
        for j in range(n_layers):
            w = rng.standard_normal(dim) / math.sqrt(dim)
            b = bias_scale * rng.standard_normal()
            u = (c / float(w @ w)) * w
            theta[j * per : j * per + dim] = w
            theta[j * per + dim] = b
            theta[j * per + dim + 1 : (j + 1) * per] = u
        return cls(dim, n_layers, theta)

    @classmethod
    def from_effective(cls, dim: int, layers: Sequence[tuple]) -> "PlanarFlowStack":
        """Build from (w, b, u_eff) triples, inverting the reprojection.

        Requires u_eff.w > -1 (the map these layers define must be
        invertible to exist at all).
        """
        per = 2 * dim + 1
        theta = np.zeros(len(layers) * per)
        for j, (w, b, u_eff) in enumerate(layers):
            w = np.asarray(w, dtype=float)
            u_eff = np.asarray(u_eff, dtype=float)
            wsq = float(w @ w)
            if wsq == 0.0:
                u = u_eff
            else:
                c = float(u_eff @ w)
                if c <= -1.0:
                    raise ConfigurationError("effective u.w must exceed -1")
                sbar = math.log(math.expm1(1.0 + c))  # inverse of m
                u = u_eff + ((sbar - c) / wsq) * w
            theta[j * per : j * per + dim] = w
            theta[j * per + dim] = float(b)
            theta[j * per + dim + 1 : (j + 1) * per] = u
        return cls(dim, len(layers), theta)

    def with_params(self, theta: np.ndarray) -> "PlanarFlowStack":
        return PlanarFlowStack(self.dim, self.n_layers, theta)

    def hyperparams(self) -> dict:
        return {"layers": self.n_layers}

    def prepare(self, z: np.ndarray) -> PlanarCache:
        x = self._as_batch(z)
        x_in, s_all, t_all, tp_all = [], [], [], []
        cur = x
        for lay in self._layers:
            s = cur @ lay.w + lay.b
            t = np.tanh(s)
            x_in.append(cur)
            s_all.append(s)
            t_all.append(t)
            tp_all.append(1.0 - t * t)
            cur = cur + t[:, None] * lay.uhat
        return PlanarCache(x, cur, x_in, s_all, t_all, tp_all)

    def outputs(self, cache: PlanarCache) -> np.ndarray:
        return cache.x

    def _jacobian_pass(self, cache: PlanarCache):
        if cache._jac is not None:
            return cache._jac
        n, d = cache.z.shape
        P = np.broadcast_to(np.eye(d), (n, d, d)).copy()
        logdet = np.zeros(n)
        gld = np.zeros((n, d))
        for j, lay in enumerate(self._layers):
            tp = cache.tp[j]
            t = cache.t[j]
            factor = 1.0 + tp * lay.kappa  # > 0 since kappa > -1, tp in (0, 1]
            logdet += np.log(factor)
            wP = lay.w @ P
            # d/ds log(1 + tanh'(s) kappa) with tanh'' = -2 tanh tanh'
            coef = (-2.0 * t * tp) * lay.kappa / factor
            gld += coef[:, None] * wP
            P = P + tp[:, None, None] * lay.uhat[None, :, None] * wP[:, None, :]
        sign = np.ones(n)
        cache._jac = (P, logdet, sign, gld)
        return cache._jac

    def spatial_jacobians(self, cache: PlanarCache):
        J, logdet, sign, _ = self._jacobian_pass(cache)
        return J, logdet, sign

    def grad_logdet_batch(self, cache: PlanarCache) -> np.ndarray:
        return self._jacobian_pass(cache)[3]

    def _unpack(self, v: np.ndarray, j: int):
        d = self.dim
        per = 2 * d + 1
        base = j * per
        return v[base : base + d], float(v[base + d]), v[base + d + 1 : base + per]

    def _duhat(self, lay: _PlanarLayer, dw: np.ndarray, du: np.ndarray) -> np.ndarray:
        """Tangent of the effective u under raw-parameter tangents (dw, du)."""
        if lay.wsq == 0.0:
            return du
        dsbar = float(du @ lay.w + lay.u @ dw)
        wdw = float(lay.w @ dw)
        return (du
                + (lay.gp * dsbar / lay.wsq) * lay.w
                + (lay.g / lay.wsq) * dw
                - (2.0 * lay.g * wdw / lay.wsq ** 2) * lay.w)

    def param_jvp_batch(self, cache: PlanarCache, v: np.ndarray) -> np.ndarray:
        v = self._check_param_dim(v)
        n = cache.z.shape[0]
        dx = np.zeros((n, self.dim))
        for j, lay in enumerate(self._layers):
            dw, db, du = self._unpack(v, j)
            duhat = self._duhat(lay, dw, du)
            ds = cache.x_in[j] @ dw + dx @ lay.w + db
            dx = dx + (cache.tp[j] * ds)[:, None] * lay.uhat + cache.t[j][:, None] * duhat
        return dx

    def param_vjp_batch(self, cache: PlanarCache, y: np.ndarray) -> np.ndarray:
        grads = np.zeros(self.n_params)
        d = self.dim
        per = 2 * d + 1
        ybar = np.asarray(y, dtype=float)
        if ybar.shape != cache.z.shape:
            raise NumericalError("vjp cotangent shape does not match the batch")
        for j in reversed(range(self.n_layers)):
            lay = self._layers[j]
            c = cache.tp[j] * (ybar @ lay.uhat)
            grad_b = float(c.sum())
            grad_w = c @ cache.x_in[j]
            grad_uhat = cache.t[j] @ ybar
            ybar = ybar + c[:, None] * lay.w[None, :]
            if lay.wsq > 0.0:
                wg = float(lay.w @ grad_uhat)
                grad_u = grad_uhat + (lay.gp * wg / lay.wsq) * lay.w
                grad_w = grad_w + (lay.gp * wg / lay.wsq) * lay.u \
                    + (lay.g / lay.wsq) * grad_uhat \
                    - (2.0 * lay.g * wg / lay.wsq ** 2) * lay.w
            else:
                grad_u = grad_uhat
            base = j * per
            grads[base : base + d] = grad_w
            grads[base + d] = grad_b
            grads[base + d + 1 : base + per] = grad_u
        return grads


# ---------------------------------------------------------------------------
# Residual MLP
# ---------------------------------------------------------------------------

class MlpCache:
    __slots__ = ("z", "x", "h", "tp", "_jac", "_gld", "_dens")

    def __init__(self, z, x, h, tp):
        self.z = z
        self.x = x
        self.h = h    # activations per hidden layer, h[0] is z
        self.tp = tp  # tanh' per hidden layer
        self._jac = None
        self._gld = None
        self._dens = None


class ResidualMLP(PushforwardMap):
    """T(z) = z + W_out tanh(...tanh(W_1 z + b_1)...), no output bias."""

    architecture = "residual-mlp"

    def __init__(self, dim: int, hidden: Sequence[int], theta: np.ndarray):
        hidden = tuple(int(h) for h in hidden)
        if not hidden or any(h < 1 for h in hidden):
            raise ConfigurationError("residual MLP needs positive hidden widths")
        self.dim = dim
        self.hidden = hidden
        sizes = (dim,) + hidden
        n = sum(sizes[k + 1] * sizes[k] + sizes[k + 1] for k in range(len(hidden)))
        n += dim * hidden[-1]
        self.n_params = n
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (n,):
            raise ConfigurationError(
                f"residual MLP {list(hidden)} in d={dim} needs {n} parameters, "
                f"got {theta.shape}")
        self._theta = theta.copy()
        self._theta.setflags(write=False)
        self._W: List[np.ndarray] = []
        self._b: List[np.ndarray] = []
        pos = 0
        for k in range(len(hidden)):
            fan_in, fan_out = sizes[k], sizes[k + 1]
            self._W.append(theta[pos : pos + fan_out * fan_in].reshape(fan_out, fan_in))
            pos += fan_out * fan_in
            self._b.append(theta[pos : pos + fan_out])
            pos += fan_out
        self._Wout = theta[pos : pos + dim * hidden[-1]].reshape(dim, hidden[-1])

    @classmethod
    def identity(cls, dim: int, hidden: Sequence[int], seed: int = 0) -> "ResidualMLP":
        """Random hidden layers, zero output weights: T is exactly the identity."""
        rng = np.random.default_rng(seed)
        hidden = tuple(int(h) for h in hidden)
        sizes = (dim,) + hidden
        parts = []
        for k in range(len(hidden)):
            fan_in, fan_out = sizes[k], sizes[k + 1]
            parts.append(rng.standard_normal(fan_out * fan_in) / math.sqrt(fan_in))
            parts.append(np.zeros(fan_out))
        parts.append(np.zeros(dim * hidden[-1]))
        return cls(dim, hidden, np.concatenate(parts))

    def with_params(self, theta: np.ndarray) -> "ResidualMLP":
        return ResidualMLP(self.dim, self.hidden, theta)

    def hyperparams(self) -> dict:
        return {"hidden": list(self.hidden)}

    def prepare(self, z: np.ndarray) -> MlpCache:
        z = self._as_batch(z)
        h = [z]
        tp = []
        cur = z
        for W, b in zip(self._W, self._b):
            a = cur @ W.T + b
            cur = np.tanh(a)
            h.append(cur)
            tp.append(1.0 - cur * cur)
        x = z + cur @ self._Wout.T
        return MlpCache(z, x, h, tp)

    def outputs(self, cache: MlpCache) -> np.ndarray:
        return cache.x

    def _jacobian_pass(self, cache: MlpCache):
        """Per-sample G_k = d h_k / d z and the assembled J = I + W_out G_L.

        G is carried transposed, Gt[n, r, a] = d h_a / d z_r, so every layer
        contraction is a flattened GEMM (Gt @ W.T) instead of a generic
        einsum; this is the hot path of density-based drifts.
        """
        if cache._jac is not None:
            return cache._jac
        n, d = cache.z.shape
        Gt = None
        Gt_list = []
        for k, W in enumerate(self._W):
            if Gt is None:
                Vt = np.broadcast_to(W.T, (n, d, W.shape[0]))
            else:
                Vt = Gt @ W.T
            Gt = cache.tp[k][:, None, :] * Vt
            Gt_list.append(Gt)
        Jt = Gt @ self._Wout.T
        Jt += np.eye(d)
        sign, logdet = np.linalg.slogdet(Jt)  # det(J^T) = det(J)
        cache._jac = (Jt.transpose(0, 2, 1), logdet, sign, Gt_list)
        return cache._jac

    def spatial_jacobians(self, cache: MlpCache):
        J, logdet, sign, _ = self._jacobian_pass(cache)
        return J, logdet, sign

    def grad_logdet_batch(self, cache: MlpCache) -> np.ndarray:
        """grad_z log|det J| by reverse mode through the Jacobian recursion.

        Jacobi's formula gives d/dz_l log det J = <J^{-T}, dJ/dz_l>, i.e. the
        gradient of z -> <M, J(z)> with M = J^{-T} held fixed, so one reverse
        sweep through G_k = tanh'(a_k) * (W_k G_{k-1}) yields all d components.
        """
        if cache._gld is not None:
            return cache._gld
        J, logdet, sign, Gt_list = self._jacobian_pass(cache)
        if np.any(sign <= 0) or np.any(logdet < _DEGENERATE_LOGDET):
            bad = int(np.argmax((sign <= 0) | (logdet < _DEGENERATE_LOGDET)))
            raise DegenerateJacobianError(
                f"spatial Jacobian is degenerate at sample index {bad}")
        # cotangents in the same transposed layout as Gt (see _jacobian_pass)
        L = len(self._W)
        Gbar = np.linalg.inv(J) @ self._Wout
        tpbar = [None] * L
        n, d = cache.z.shape
        for k in range(L - 1, -1, -1):
            if k > 0:
                Vt = Gt_list[k - 1] @ self._W[k].T
            else:
                Vt = np.broadcast_to(self._W[0].T, (n, d, self._W[0].shape[0]))
            tpbar[k] = np.sum(Gbar * Vt, axis=1)
            if k > 0:
                Vbar = cache.tp[k][:, None, :] * Gbar
                Gbar = Vbar @ self._W[k]
        # tanh'' chain: tp = 1 - h^2 depends on z through h
        hbar = -2.0 * cache.h[L] * tpbar[L - 1]
        for k in range(L - 1, 0, -1):
            abar = hbar * cache.tp[k]
            hbar = abar @ self._W[k] - 2.0 * cache.h[k] * tpbar[k - 1]
        cache._gld = (hbar * cache.tp[0]) @ self._W[0]
        return cache._gld

    def param_jvp_batch(self, cache: MlpCache, v: np.ndarray) -> np.ndarray:
        v = self._check_param_dim(v)
        dW, db, dWout = self._unpack(v)
        dh = None
        for k, (W, b) in enumerate(zip(self._W, self._b)):
            da = cache.h[k] @ dW[k].T + db[k]
            if dh is not None:
                da += dh @ W.T
            dh = cache.tp[k] * da
        return cache.h[-1] @ dWout.T + dh @ self._Wout.T

    def param_vjp_batch(self, cache: MlpCache, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape != cache.z.shape:
            raise NumericalError("vjp cotangent shape does not match the batch")
        grads = np.zeros(self.n_params)
        gWout = y.T @ cache.h[-1]
        delta = y @ self._Wout
        L = len(self._W)
        gW = [None] * L
        gb = [None] * L
        for k in range(L - 1, -1, -1):
            da = delta * cache.tp[k]
            gW[k] = da.T @ cache.h[k]
            gb[k] = da.sum(axis=0)
            if k > 0:
                delta = da @ self._W[k]
        pos = 0
        for k in range(L):
            size = gW[k].size
            grads[pos : pos + size] = gW[k].ravel()
            pos += size
            grads[pos : pos + gb[k].size] = gb[k]
            pos += gb[k].size
        grads[pos : pos + gWout.size] = gWout.ravel()
        return grads

    def _unpack(self, v: np.ndarray):
        sizes = (self.dim,) + self.hidden
        dW, db = [], []
        pos = 0
        for k in range(len(self.hidden)):
            fan_in, fan_out = sizes[k], sizes[k + 1]
            dW.append(v[pos : pos + fan_out * fan_in].reshape(fan_out, fan_in))
            pos += fan_out * fan_in
            db.append(v[pos : pos + fan_out])
            pos += fan_out
        dWout = v[pos :].reshape(self.dim, self.hidden[-1])
        return dW, db, dWout


# ---------------------------------------------------------------------------
# Spec-level single-point operations
# ---------------------------------------------------------------------------

def forward(pmap: PushforwardMap, z: np.ndarray) -> MapEvaluation:
    """Evaluate the map at one point with its Jacobian and log-determinant."""
    zb = pmap._as_batch(z)
    if zb.shape[0] != 1:
        raise NumericalError("forward() takes a single point; use prepare() for batches")
    cache = pmap.prepare(zb)
    J, logdet, sign = pmap.spatial_jacobians(cache)
    if sign[0] == 0 or logdet[0] < _DEGENERATE_LOGDET:
        raise DegenerateJacobianError("map Jacobian is degenerate at the given point")
    return MapEvaluation(z=zb[0], x=pmap.outputs(cache)[0], jacobian=J[0],
                         logdet=float(logdet[0]), sign=int(sign[0]))


def param_jvp(pmap: PushforwardMap, z: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Directional derivative of T_theta(z) along the parameter direction v."""
    cache = pmap.prepare(pmap._as_batch(z))
    return pmap.param_jvp_batch(cache, v)[0]


def param_vjp(pmap: PushforwardMap, z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Transposed product (d_theta T(z))^T y; adjoint of param_jvp."""
    y = np.asarray(y, dtype=float)
    if y.shape != (pmap.dim,):
        raise NumericalError(f"cotangent has shape {y.shape}, expected ({pmap.dim},)")
    cache = pmap.prepare(pmap._as_batch(z))
    return pmap.param_vjp_batch(cache, y[None, :])


def grad_logdet_z(pmap: PushforwardMap, z: np.ndarray) -> np.ndarray:
    """Spatial gradient of log|det dT/dz| at one point."""
    cache = pmap.prepare(pmap._as_batch(z))
    _, logdet, sign = pmap.spatial_jacobians(cache)
    if sign[0] == 0 or logdet[0] < _DEGENERATE_LOGDET:
        raise DegenerateJacobianError("map Jacobian is degenerate at the given point")
    return pmap.grad_logdet_batch(cache)[0]


def pushforward_logdensity_batch(pmap: PushforwardMap, cache,
                                 reference: ReferenceDensity):
    """Log-density of the pushed measure and its x-gradient at T(z).

    log rho(T(z)) = log ref(z) - log|det J_z|; the gradient solves
    J_z^T y = grad_z log ref(z) - grad_z log|det J_z|.

    Memoized on the cache (one batch pairs with one reference), so drift and
    energy estimates within a step share the work.
    """
    if cache._dens is not None:
        return cache._dens
    J, logdet, sign = pmap.spatial_jacobians(cache)
    bad = (sign <= 0) | (logdet < _DEGENERATE_LOGDET)
    if np.any(bad):
        raise DegenerateJacobianError(
            f"map Jacobian is degenerate at sample index {int(np.argmax(bad))}")
    logrho = reference.log_density(cache.z) - logdet
    g = reference.grad_log_density(cache.z) - pmap.grad_logdet_batch(cache)
    grad = np.linalg.solve(J.transpose(0, 2, 1), g[:, :, None])[:, :, 0]
    cache._dens = (logrho, grad)
    return cache._dens


def pushforward_logdensity(pmap: PushforwardMap, z: np.ndarray,
                           reference: ReferenceDensity):
    cache = pmap.prepare(pmap._as_batch(z))
    logrho, grad = pushforward_logdensity_batch(pmap, cache, reference)
    return float(logrho[0]), grad[0]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"PWGFMAP1"


def save_map(pmap: PushforwardMap, path) -> None:
    """Binary checkpoint: header (architecture, d, hyperparameters) + raw theta.

    Theta is stored as little-endian float64 in canonical order; round-trips
    are bit-exact.
    """
    header = {"architecture": pmap.architecture, "dim": pmap.dim,
              **pmap.hyperparams()}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    theta = np.ascontiguousarray(pmap.theta, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(theta.tobytes())


def load_map(path) -> PushforwardMap:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ConfigurationError(f"{path}: not a map checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        theta = np.frombuffer(fh.read(), dtype="<f8").astype(float)
    arch = header["architecture"]
    dim = header["dim"]
    if arch == "affine":
        return AffineMap.from_params(dim, theta)
    if arch == "planar-flow-stack":
        return PlanarFlowStack(dim, header["layers"], theta)
    if arch == "residual-mlp":
        return ResidualMLP(dim, header["hidden"], theta)
    raise ConfigurationError(f"{path}: unknown architecture {arch!r}")
