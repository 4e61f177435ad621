r"""Distances between 1-D empirical score distributions.

Entropic optimal transport between weighted samples :math:`(x_i, a_i)` and
:math:`(y_j, b_j)` with cost :math:`C_{ij} = |x_i - y_j|^r`:

.. math::
    \mathrm{OT}_\varepsilon(p, q) = \min_{\pi \in \Pi(a, b)}
        \langle \pi, C \rangle + \varepsilon\, \mathrm{KL}(\pi \,\|\, a \otimes b)

solved with log-domain Sinkhorn iterations (with Newton polishing of stalled
runs), and its debiased form

.. math::
    S_\varepsilon(p, q) = \mathrm{OT}_\varepsilon(p, q)
        - \tfrac12 \mathrm{OT}_\varepsilon(p, p) - \tfrac12 \mathrm{OT}_\varepsilon(q, q).

The squared MMD (V-statistic) with Gaussian or Laplacian kernels is also
provided. Every distance comes with its gradient with respect to the
sample locations.
"""

from dataclasses import dataclass

import numba
import numpy as np
from scipy.special import logsumexp

from ._validation import as_vector
from .errors import ConfigurationError, DataError, NumericalError

KINDS = ("sinkhorn", "mmd_gaussian", "mmd_laplacian")


@dataclass(frozen=True)
class ScoreDistribution:
    """A finite sample of scalar scores with (default uniform) weights."""

    samples: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        samples = as_vector(self.samples, "samples")
        if self.weights is None:
            weights = np.full(samples.size, 1.0 / samples.size)
        else:
            weights = as_vector(self.weights, "weights")
            if weights.size != samples.size:
                raise DataError("weights and samples differ in length")
            if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
                raise DataError("weights must be non-negative and sum to 1")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "weights", weights)

    def __len__(self):
        return self.samples.size


def as_distribution(x):
    return x if isinstance(x, ScoreDistribution) else ScoreDistribution(x)


@dataclass(frozen=True)
class DistanceConfig:
    kind: str = "sinkhorn"
    epsilon: float = 0.05
    cost_exponent: int = 2
    bandwidth: float = 1.0
    max_iterations: int = 500
    tolerance: float = 1e-6
    debiased: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"distance kind must be one of {KINDS}, got {self.kind!r}")
        if self.cost_exponent not in (1, 2):
            raise ConfigurationError("cost_exponent must be 1 or 2")
        if self.kind == "sinkhorn" and not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")
        if self.kind != "sinkhorn" and not self.bandwidth > 0:
            raise ConfigurationError("bandwidth must be positive")
        if int(self.max_iterations) < 1 or not self.tolerance > 0:
            raise ConfigurationError("max_iterations and tolerance must be positive")

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)


@dataclass(frozen=True)
class TransportPlan:
    matrix: np.ndarray
    dual_p: np.ndarray
    dual_q: np.ndarray
    iterations_used: int
    converged: bool


def _cost(x, y, exponent):
    with np.errstate(over="ignore", invalid="ignore"):
        diff = x[:, None] - y[None, :]
        return diff * diff if exponent == 2 else np.abs(diff)


def _cost_grad(x, y, exponent):
    """d C(x_i, y_j) / d x_i."""
    diff = x[:, None] - y[None, :]
    return 2.0 * diff if exponent == 2 else np.sign(diff)


@numba.njit(cache=True)
def _sinkhorn_loop(C, log_a, log_b, a, eps, max_iterations, tolerance, f, g):
    """Alternating log-domain updates of the dual potentials (f, g), in place.

    After each g-update the column marginals are exact, so convergence is
    judged on the L1 error of the row marginals.
    """
    n, m = C.shape
    it = 0
    converged = False
    while it < max_iterations:
        it += 1
        for i in range(n):
            mx = -np.inf
            for j in range(m):
                v = log_b[j] + (g[j] - C[i, j]) / eps
                if v > mx:
                    mx = v
            s = 0.0
            for j in range(m):
                s += np.exp(log_b[j] + (g[j] - C[i, j]) / eps - mx)
            f[i] = -eps * (mx + np.log(s))
        for j in range(m):
            mx = -np.inf
            for i in range(n):
                v = log_a[i] + (f[i] - C[i, j]) / eps
                if v > mx:
                    mx = v
            s = 0.0
            for i in range(n):
                s += np.exp(log_a[i] + (f[i] - C[i, j]) / eps - mx)
            g[j] = -eps * (mx + np.log(s))
        err = 0.0
        for i in range(n):
            s = 0.0
            for j in range(m):
                s += np.exp(log_a[i] + log_b[j] + (f[i] + g[j] - C[i, j]) / eps)
            err += abs(s - a[i])
        if not np.isfinite(err):
            break
        if err <= tolerance:
            converged = True
            break
    return it, converged


_SWEEPS_PER_ROUND = 50
_NEWTON_PER_ROUND = 10


def _semi_dual(f, C, log_a, log_b, a, b, eps):
    """g as the soft c-transform of f, the resulting plan and the dual value."""
    g = -eps * logsumexp(log_a[:, None] + (f[:, None] - C) / eps, axis=0)
    plan = np.exp(log_a[:, None] + log_b[None, :] + (f[:, None] + g[None, :] - C) / eps)
    return g, plan, float(a @ f + b @ g)


def _newton(f, C, log_a, log_b, a, b, eps, tolerance, steps):
    """Damped Newton ascent on the semi-dual in f.

    Plain Sinkhorn stalls when nearby samples compete for the same mass;
    a few Newton steps from a Sinkhorn warm start finish the job. The
    fixed point is the same, so this only changes the iteration count.
    """
    g, plan, value = _semi_dual(f, C, log_a, log_b, a, b, eps)
    safe_b = np.where(b > 0, b, 1.0)
    used = 0
    while used < steps:
        rows = plan.sum(axis=1)
        residual = a - rows
        if np.abs(residual).sum() <= tolerance:
            break
        used += 1
        hessian = (np.diag(rows) - (plan / safe_b) @ plan.T) / eps
        step = np.linalg.lstsq(hessian, residual, rcond=None)[0]
        slope = float(residual @ step)
        t = 1.0
        while t > 1e-10:
            g_new, plan_new, value_new = _semi_dual(f + t * step, C, log_a, log_b, a, b, eps)
            if np.all(np.isfinite(plan_new)) and value_new >= value + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            break
        f, g, plan, value = f + t * step, g_new, plan_new, value_new
    converged = np.abs(a - plan.sum(axis=1)).sum() <= tolerance
    return f, g, used, bool(converged)


def _sinkhorn(p, q, cfg):
    a, b = p.weights, q.weights
    eps = float(cfg.epsilon)
    tol = float(cfg.tolerance)
    max_iterations = int(cfg.max_iterations)
    C = _cost(p.samples, q.samples, cfg.cost_exponent)
    with np.errstate(divide="ignore"):
        log_a, log_b = np.log(a), np.log(b)
    f, g = np.zeros(a.size), np.zeros(b.size)
    it, converged = 0, False
    with np.errstate(over="ignore", invalid="ignore"):
        while it < max_iterations and not converged:
            k, converged = _sinkhorn_loop(
                C, log_a, log_b, a, eps, min(_SWEEPS_PER_ROUND, max_iterations - it), tol, f, g
            )
            it += k
            if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
                break
            if converged or it >= max_iterations:
                break
            f, g, k, converged = _newton(
                f, C, log_a, log_b, a, b, eps, tol, min(_NEWTON_PER_ROUND, max_iterations - it)
            )
            it += k
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
        raise NumericalError(
            f"non-finite Sinkhorn scaling at iteration {it} (epsilon={eps}); increase epsilon"
        )
    plan = np.exp(log_a[:, None] + log_b[None, :] + (f[:, None] + g[None, :] - C) / eps)
    # At the optimum <a, f> + <b, g> equals <plan, C> + eps * KL(plan | a x b).
    # The dual form is used because its error is second order in the
    # residual marginal error, which keeps finite differences clean.
    value = float(np.dot(a, f) + np.dot(b, g))
    if not np.isfinite(value):
        raise NumericalError(f"non-finite Sinkhorn value (epsilon={eps}); increase epsilon")
    return value, TransportPlan(plan, f, g, int(it), bool(converged))


def _canonical(p, q):
    """True when (p, q) should be swapped so that OT(p, q) is computed as OT(q, p)^T."""
    if len(p) != len(q):
        return len(p) > len(q)
    for u, v in ((p.samples, q.samples), (p.weights, q.weights)):
        diff = np.nonzero(u != v)[0]
        if diff.size:
            return u[diff[0]] > v[diff[0]]
    return False


def _ot(p, q, cfg):
    if _canonical(p, q):
        value, plan = _sinkhorn(q, p, cfg)
        plan = TransportPlan(plan.matrix.T, plan.dual_q, plan.dual_p,
                             plan.iterations_used, plan.converged)
        return value, plan
    return _sinkhorn(p, q, cfg)


def sinkhorn_plan(p, q, cfg=DistanceConfig()):
    """Raw entropic OT value and the optimal plan.

    Non-convergence is reported through ``plan.converged`` rather than
    raised; non-finite scalings raise :class:`NumericalError`.
    """
    if cfg.kind != "sinkhorn":
        raise ConfigurationError("sinkhorn_plan requires kind='sinkhorn'")
    return _ot(as_distribution(p), as_distribution(q), cfg)


def sinkhorn_divergence(p, q, cfg=DistanceConfig()):
    if cfg.kind != "sinkhorn":
        raise ConfigurationError("sinkhorn_divergence requires kind='sinkhorn'")
    p, q = as_distribution(p), as_distribution(q)
    return _sinkhorn_divergence_terms(p, q, cfg)[0]


def _sinkhorn_divergence_terms(p, q, cfg):
    v_pq, plan_pq = _ot(p, q, cfg)
    v_pp, plan_pp = _ot(p, p, cfg)
    v_qq, plan_qq = _ot(q, q, cfg)
    return v_pq - 0.5 * v_pp - 0.5 * v_qq, plan_pq, plan_pp, plan_qq


def _kernel(x, y, kind, sigma):
    diff = x[:, None] - y[None, :]
    if kind == "mmd_gaussian":
        return np.exp(-diff * diff / (2.0 * sigma * sigma))
    return np.exp(-np.abs(diff) / sigma)


def _kernel_grad(x, y, kind, sigma):
    """d k(x_i, y_j) / d x_i."""
    diff = x[:, None] - y[None, :]
    k = _kernel(x, y, kind, sigma)
    if kind == "mmd_gaussian":
        return -k * diff / (sigma * sigma)
    return -k * np.sign(diff) / sigma


def mmd(p, q, cfg):
    """Squared MMD V-statistic, clipped at zero against round-off."""
    if cfg.kind not in ("mmd_gaussian", "mmd_laplacian"):
        raise ConfigurationError("mmd requires an mmd_* kind")
    p, q = as_distribution(p), as_distribution(q)
    a, b, s = p.weights, q.weights, cfg.bandwidth
    kxx = a @ _kernel(p.samples, p.samples, cfg.kind, s) @ a
    kyy = b @ _kernel(q.samples, q.samples, cfg.kind, s) @ b
    kxy = a @ _kernel(p.samples, q.samples, cfg.kind, s) @ b
    return max(float(kxx + kyy - 2.0 * kxy), 0.0)


def distance(p, q, cfg):
    """The distance selected by ``cfg`` (debiased Sinkhorn unless ``debiased=False``)."""
    if cfg.kind == "sinkhorn":
        if cfg.debiased:
            return sinkhorn_divergence(p, q, cfg)
        return sinkhorn_plan(p, q, cfg)[0]
    return mmd(p, q, cfg)


def distance_and_grads(p, q, cfg):
    """Return ``(value, d value / d p.samples, d value / d q.samples)``.

    Sinkhorn gradients hold every transport plan fixed (envelope theorem).
    """
    p, q = as_distribution(p), as_distribution(q)
    x, y, a, b = p.samples, q.samples, p.weights, q.weights
    if cfg.kind == "sinkhorn":
        r = cfg.cost_exponent
        if not cfg.debiased:
            value, plan = _ot(p, q, cfg)
            P = plan.matrix
            gx = np.sum(P * _cost_grad(x, y, r), axis=1)
            gy = np.sum(P.T * _cost_grad(y, x, r), axis=1)
            return value, gx, gy
        value, pq, pp, qq = _sinkhorn_divergence_terms(p, q, cfg)
        gx = np.sum(pq.matrix * _cost_grad(x, y, r), axis=1)
        gy = np.sum(pq.matrix.T * _cost_grad(y, x, r), axis=1)
        # self terms: x appears in both arguments of OT(p, p)
        Pxx, Gxx = pp.matrix, _cost_grad(x, x, r)
        gx -= 0.5 * (np.sum(Pxx * Gxx, axis=1) + np.sum(Pxx.T * Gxx, axis=1))
        Pyy, Gyy = qq.matrix, _cost_grad(y, y, r)
        gy -= 0.5 * (np.sum(Pyy * Gyy, axis=1) + np.sum(Pyy.T * Gyy, axis=1))
        return value, gx, gy
    s = cfg.bandwidth
    value = mmd(p, q, cfg)
    # the self-kernel is symmetric, so both argument slots contribute equally
    gx = 2.0 * a * (_kernel_grad(x, x, cfg.kind, s) @ a) - 2.0 * a * (_kernel_grad(x, y, cfg.kind, s) @ b)
    gy = 2.0 * b * (_kernel_grad(y, y, cfg.kind, s) @ b) - 2.0 * b * (_kernel_grad(y, x, cfg.kind, s) @ a)
    return value, gx, gy


def distance_gradient(p, q, cfg):
    """Gradient of :func:`distance` with respect to the samples of ``p``."""
    return distance_and_grads(p, q, cfg)[1]
