"""Simulation of the slow-fast system and of its averaged limit, plus
weak-error studies over a grid of scale parameters.

Random streams: replicas are processed in fixed-size blocks and block
``b`` of stream ``key`` draws from ``Philox(SeedSequence(seed,
spawn_key=(*key, b)))``. Blocks are reduced independently and merged in
block order, so results depend only on ``(seed, M)`` and never on the
number of worker threads.
"""
from __future__ import annotations

import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .averaging import averaged_model
from .chain import advance
from .errors import EpsilonOutOfRange, InsufficientSignal, NonFiniteState, SlowFastError
from .model import effective_generator
from .stats import Moments, MonteCarloEstimate, merge_all

__all__ = [
    "SimConfig",
    "PathSample",
    "TestFunction",
    "test_function",
    "LimitEquation",
    "WeakErrorStudy",
    "OrderFit",
    "simulate_slow_fast",
    "simulate_averaged",
    "replica_stream",
    "run_replicas",
    "mc_expectation",
    "weak_error_study",
    "fit_order",
    "fit_power_law",
    "analytic_example_error",
    "DEFAULT_T_GRID",
    "DEFAULT_EPS_GRID",
]

BLOCK_SIZE = 10_000
DEFAULT_T_GRID = tuple(round(0.1 * k, 10) for k in range(1, 11))
DEFAULT_EPS_GRID = tuple(2.0**-k for k in range(4, 9))


@dataclass(frozen=True)
class SimConfig:
    eps: float = 0.05
    T: float = 1.0
    h_slow: float = 1e-3
    step_rule: str = "eps_scaled"
    step_c: float = 0.1
    M: int = 1000
    seed: int = 0
    t_grid: tuple = DEFAULT_T_GRID

    def __post_init__(self):
        if not (0 < self.eps <= 1):
            raise EpsilonOutOfRange(f"eps must lie in (0, 1], got {self.eps!r}")
        if self.step_rule not in ("fixed", "eps_scaled"):
            raise SlowFastError(f"unknown step rule {self.step_rule!r}")
        if self.M < 1 or self.h_slow <= 0 or self.T < 0:
            raise SlowFastError("need M >= 1, h_slow > 0 and T >= 0")

    @property
    def step(self):
        h = self.h_slow
        if self.step_rule == "eps_scaled":
            h = min(h, self.step_c * self.eps)
        return min(h, self.T) if self.T > 0 else h

    def with_eps(self, eps):
        return SimConfig(**{**self.__dict__, "eps": eps})


@dataclass(frozen=True)
class PathSample:
    """A batch of paths observed on ``times``.

    ``X`` has shape ``(P, len(times), n)``; ``alpha`` is ``(P, len(times))``
    or ``None`` for the averaged equation. ``sup_sq`` holds the running
    maximum of ``|X_t|^2`` over every simulated step.
    """

    times: np.ndarray
    X: np.ndarray
    alpha: Optional[np.ndarray]
    sup_sq: np.ndarray

    @property
    def terminal(self):
        last = None if self.alpha is None else self.alpha[:, -1]
        return self.X[:, -1], last


@dataclass(frozen=True)
class TestFunction:
    name: str
    fn: Callable

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=float))


def test_function(spec):
    """Look up a test function: ``coordinate(l)``, ``quadratic`` or ``cubic``.

    ``cubic`` is ``sum_l (x_l^3 - 3 x_l)``.
    """
    m = re.fullmatch(r"\s*coordinate\s*\(\s*(\d+)\s*\)\s*", spec)
    if m:
        l = int(m.group(1))
        return TestFunction(f"coordinate({l})", lambda x: x[..., l])
    if spec.strip() == "quadratic":
        return TestFunction("quadratic", lambda x: (x**2).sum(axis=-1))
    if spec.strip() == "cubic":
        return TestFunction("cubic", lambda x: (x**3 - 3.0 * x).sum(axis=-1))
    raise SlowFastError(f"unknown test function {spec!r}")


test_function.__test__ = False
TestFunction.__test__ = False


@dataclass(frozen=True)
class LimitEquation:
    """Plain drift/diffusion evaluators, batched over ``x`` of shape ``(M, n)``."""

    drift: Callable
    diffusion: Callable
    n: int = 1

    def coefficients(self, x):
        return self.drift(x), self.diffusion(x)


def _schedule(t_grid, h):
    """Substep counts and sizes between consecutive observation times."""
    out, prev = [], 0.0
    for t in t_grid:
        span = t - prev
        if span < 0:
            raise SlowFastError("t_grid must be increasing")
        k = 0 if span == 0 else max(1, math.ceil(span / h - 1e-9))
        out.append((k, span / k if k else 0.0))
        prev = t
    return out


def _obs_grid(cfg_t_grid, T):
    grid = np.asarray(cfg_t_grid if cfg_t_grid is not None else [T], dtype=float)
    if grid.size == 0 or np.any(grid < 0) or np.any(np.diff(grid) <= 0):
        raise SlowFastError("t_grid must be nonempty, nonnegative and increasing")
    return grid


def simulate_slow_fast(model, x0, alpha0, cfg, rng, n_paths=1):
    """Splitting scheme for the coupled slow-fast system.

    Each step of size ``h`` freezes ``x``, evolves the chain exactly under
    ``Q(x)/eps + Qtilde(x)/sqrt(eps)`` and integrates the drift
    ``K(x, .)/sqrt(eps) + b(x, .)`` against the chain's occupation times
    on the step. The diffusion uses ``sigma`` at the step-start state.
    """
    eps = cfg.eps
    times = _obs_grid(cfg.t_grid, cfg.T)
    n, m0 = model.n, model.m0
    x = np.tile(np.asarray(x0, dtype=float).reshape(1, n), (n_paths, 1))
    alpha = np.full(n_paths, int(alpha0), dtype=np.intp)
    rs = 1.0 / math.sqrt(eps)
    if model.x_independent:
        z = np.zeros((1, n))
        G_const = effective_generator(model.Q_at(z), model.Qtilde_at(z), eps)
        drift_const = model.k_table(z)[0] * rs + model.b_table(z)[0]
        sig_const = model.sigma_table(z)[0]
    X = np.empty((n_paths, times.size, n))
    A = np.empty((n_paths, times.size), dtype=np.intp)
    sup_sq = (x**2).sum(axis=1)
    t = 0.0
    for k_obs, (nsub, h) in enumerate(_schedule(times, cfg.step)):
        sqh = math.sqrt(h)
        for _ in range(nsub):
            occ = np.zeros((n_paths, m0))
            if model.x_independent:
                sig = sig_const[alpha]
                alpha = advance(G_const, alpha, h, rng, occ)
                drift = occ @ drift_const
            else:
                sig = model.sigma(x, alpha)
                G = model.Q(x) / eps + model.Qtilde(x) * rs
                tab = model.k_table(x) * rs + model.b_table(x)
                alpha = advance(G, alpha, h, rng, occ)
                drift = np.einsum("pj,pjl->pl", occ, tab)
            xi = rng.standard_normal((n_paths, sig.shape[-1]))
            x = x + drift + sqh * np.einsum("pld,pd->pl", sig, xi)
            t += h
            if not np.all(np.isfinite(x)):
                raise NonFiniteState(t)
            np.maximum(sup_sq, (x**2).sum(axis=1), out=sup_sq)
        t = float(times[k_obs])
        X[:, k_obs] = x
        A[:, k_obs] = alpha
    return PathSample(times=times, X=X, alpha=A, sup_sq=sup_sq)


def simulate_averaged(avg, x0, T, h, rng, n_paths=1, t_grid=None):
    """Euler-Maruyama for ``dX = Bbar(X) dt + S(X) dW`` with n-dim noise.

    ``avg`` is anything with ``coefficients(x) -> (Bbar, S)``, e.g. an
    :class:`~slowfast.averaging.AveragedModel` or a :class:`LimitEquation`.
    """
    if h > T and T > 0:
        raise SlowFastError("step h must not exceed T")
    times = _obs_grid(t_grid, T)
    x = np.tile(np.asarray(x0, dtype=float).reshape(1, -1), (n_paths, 1))
    n = x.shape[1]
    X = np.empty((n_paths, times.size, n))
    sup_sq = (x**2).sum(axis=1)
    t = 0.0
    for k_obs, (nsub, dt) in enumerate(_schedule(times, h)):
        sqh = math.sqrt(dt) if dt > 0 else 0.0
        for _ in range(nsub):
            B, S = avg.coefficients(x)
            xi = rng.standard_normal((n_paths, n))
            x = x + B * dt + sqh * np.einsum("pab,pb->pa", S, xi)
            t += dt
            if not np.all(np.isfinite(x)):
                raise NonFiniteState(t)
            np.maximum(sup_sq, (x**2).sum(axis=1), out=sup_sq)
        X[:, k_obs] = x
    return PathSample(times=times, X=X, alpha=None, sup_sq=sup_sq)


def replica_stream(seed, key, block):
    """Generator for replica block ``block`` of stream ``key``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(key) + (int(block),))
    return np.random.Generator(np.random.Philox(ss))


def run_replicas(simulate, reduce, M, seed, key=(), threads=1, block_size=BLOCK_SIZE):
    """Run ``M`` replicas blockwise and merge the per-block reductions.

    ``simulate(rng, n_paths)`` returns a :class:`PathSample`; ``reduce``
    maps it to a :class:`~slowfast.stats.Moments`.
    """
    sizes = [min(block_size, M - s) for s in range(0, M, block_size)]

    def one(b):
        return reduce(simulate(replica_stream(seed, key, b), sizes[b]))

    if threads and threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(one, range(len(sizes))))
    else:
        parts = [one(b) for b in range(len(sizes))]
    return merge_all(parts)


def _phi_reducer(phi):
    def reduce(sample):
        vals = np.column_stack(
            [phi(sample.X[:, k]) for k in range(sample.times.size)]
            + [sample.sup_sq]
        )
        return Moments.of(vals)

    return reduce


def mc_expectation(simulate, phi, t, M, seed, key=(), threads=1):
    """Monte Carlo estimate of ``E phi(X_t)``; ``t`` must be an observation time."""
    if M < 2:
        raise SlowFastError("need at least two replicas")
    found = {}

    def reduce(sample):
        idx = np.flatnonzero(np.isclose(sample.times, t, rtol=0, atol=1e-12))
        if idx.size == 0:
            raise SlowFastError(f"t={t} is not an observation time")
        found["k"] = idx[0]
        return Moments.of(phi(sample.X[:, idx[0]])[:, None])

    mom = run_replicas(simulate, reduce, M, seed, key=key, threads=threads)
    return MonteCarloEstimate(float(mom.mean[0]), float(mom.std_err[0]), M)


def _eps_key(eps):
    return (1, int(np.float64(eps).view(np.uint64)))


@dataclass
class WeakErrorStudy:
    eps_grid: np.ndarray
    error: np.ndarray
    std_err: np.ndarray
    t_at_max: np.ndarray
    t_grid: np.ndarray
    slow_mean: np.ndarray  # (len(eps_grid), len(t_grid))
    slow_se: np.ndarray
    avg_mean: np.ndarray  # (len(t_grid),)
    avg_se: np.ndarray
    sup_sq_mean: np.ndarray  # E sup_t |X^eps_t|^2 per eps
    sup_sq_se: np.ndarray
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class OrderFit:
    slope: float
    intercept: float
    r_squared: float


def weak_error_study(
    model,
    phi,
    eps_grid=DEFAULT_EPS_GRID,
    T=1.0,
    t_grid=DEFAULT_T_GRID,
    M=100_000,
    seed=0,
    x0=None,
    alpha0=0,
    h_slow=1e-3,
    step_rule="eps_scaled",
    step_c=0.1,
    threads=1,
    avg=None,
):
    """Sup-over-``t_grid`` weak error between the slow-fast and averaged systems.

    Standard errors of the two independent estimates are combined in
    quadrature at the time where the sup is attained. The averaged
    expectations are computed once and reused for every ``eps``.
    """
    if isinstance(phi, str):
        phi = test_function(phi)
    eps_grid = np.asarray(eps_grid, dtype=float)
    if np.any(np.diff(eps_grid) >= 0) or np.any(eps_grid <= 0) or np.any(eps_grid > 1):
        raise SlowFastError("eps_grid must be strictly decreasing within (0, 1]")
    t_grid = np.asarray(t_grid, dtype=float)
    x0 = np.zeros(model.n) if x0 is None else np.asarray(x0, dtype=float)
    avg = averaged_model(model) if avg is None else avg
    reduce = _phi_reducer(phi)
    nt = t_grid.size

    def sim_avg(rng, P):
        return simulate_averaged(avg, x0, T, min(h_slow, T), rng, P, t_grid)

    mom_avg = run_replicas(sim_avg, reduce, M, seed, key=(0,), threads=threads)
    avg_mean, avg_se = mom_avg.mean[:nt], mom_avg.std_err[:nt]

    rows = []
    for eps in eps_grid:
        cfg = SimConfig(
            eps=float(eps), T=T, h_slow=h_slow, step_rule=step_rule,
            step_c=step_c, M=M, seed=seed, t_grid=tuple(t_grid),
        )

        def sim(rng, P, cfg=cfg):
            return simulate_slow_fast(model, x0, alpha0, cfg, rng, P)

        rows.append(run_replicas(sim, reduce, M, seed, key=_eps_key(eps), threads=threads))

    slow_mean = np.array([r.mean[:nt] for r in rows])
    slow_se = np.array([r.std_err[:nt] for r in rows])
    diff = np.abs(slow_mean - avg_mean)
    k = diff.argmax(axis=1)
    idx = np.arange(eps_grid.size)
    return WeakErrorStudy(
        eps_grid=eps_grid,
        error=diff[idx, k],
        std_err=np.hypot(slow_se[idx, k], avg_se[k]),
        t_at_max=t_grid[k],
        t_grid=t_grid,
        slow_mean=slow_mean,
        slow_se=slow_se,
        avg_mean=avg_mean,
        avg_se=avg_se,
        sup_sq_mean=np.array([r.mean[nt] for r in rows]),
        sup_sq_se=np.array([r.std_err[nt] for r in rows]),
        metadata=dict(
            model=model.name, phi=phi.name, T=T, M=M, seed=seed,
            x0=x0.tolist(), alpha0=int(alpha0), h_slow=h_slow,
            step_rule=step_rule, step_c=step_c,
        ),
    )


def fit_power_law(eps, errors):
    """OLS of ``log error`` on ``log eps``."""
    lx = np.log(np.asarray(eps, dtype=float))
    ly = np.log(np.asarray(errors, dtype=float))
    A = np.column_stack([lx, np.ones_like(lx)])
    (slope, intercept), *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - A @ np.array([slope, intercept])
    ss_tot = ((ly - ly.mean()) ** 2).sum()
    r2 = 1.0 - (resid**2).sum() / ss_tot if ss_tot > 0 else 1.0
    return OrderFit(float(slope), float(intercept), float(r2))


def fit_order(study):
    """Fitted weak order; every error must exceed twice its standard error."""
    if len(study.eps_grid) < 2:
        raise SlowFastError("an order fit needs at least two eps values")
    weak = [
        float(e)
        for e, err, se in zip(study.eps_grid, study.error, study.std_err)
        if not (err > 0 and err > 2.0 * se)
    ]
    if weak:
        raise InsufficientSignal(weak)
    return fit_power_law(study.eps_grid, study.error)


def analytic_example_error(eps, T):
    """``(sqrt(eps)/2) (1 - exp(-2T/eps))``, the exact weak error of the
    two-state example with ``phi(x) = x``."""
    eps = np.asarray(eps, dtype=float)
    out = 0.5 * np.sqrt(eps) * -np.expm1(-2.0 * T / eps)
    return float(out) if out.ndim == 0 else out
