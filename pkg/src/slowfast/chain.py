"""Finite-state continuous-time Markov chain utilities.

Generators are plain ``(m0, m0)`` float arrays that already passed
:func:`slowfast.model.validate_generator`; batched variants accept a
leading axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln
from scipy.stats import poisson

from .errors import HorizonNegative, NotIrreducible

__all__ = [
    "ChainPath",
    "invariant_measure",
    "invariant_measures",
    "transition_matrix",
    "ergodicity_probe",
    "mixing_horizon",
    "sample_chain_frozen",
    "sample_states",
    "occupation_times",
]

UNIFORMIZATION_TAIL = 1e-14
_COND_LIMIT = 1e12


def _stationary_system(G):
    # mu G = 0 with the last balance equation replaced by sum(mu) = 1
    A = np.swapaxes(G, -1, -2).copy()
    A[..., -1, :] = 1.0
    rhs = np.zeros(G.shape[:-1])
    rhs[..., -1] = 1.0
    return A, rhs


def invariant_measure(G):
    """Stationary distribution of an irreducible generator.

    Raises
    ------
    NotIrreducible
        When the stationary system is singular or some weight is not
        strictly positive.
    """
    G = np.asarray(G, dtype=float)
    A, rhs = _stationary_system(G)
    if np.linalg.cond(A) > _COND_LIMIT:
        raise NotIrreducible("stationary system is singular")
    mu = np.linalg.solve(A, rhs)
    scale = np.abs(G).max()
    if np.any(mu <= 1e-12) or np.max(np.abs(mu @ G)) > 1e-10 * max(scale, 1.0):
        raise NotIrreducible(f"no strictly positive invariant measure: {mu}")
    return mu / mu.sum()


def invariant_measures(G):
    """Batched :func:`invariant_measure` over a stack ``(M, m0, m0)``."""
    G = np.asarray(G, dtype=float)
    A, rhs = _stationary_system(G)
    try:
        mu = np.linalg.solve(A, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        raise NotIrreducible("stationary system is singular") from None
    if np.any(mu <= 1e-12) or not np.all(np.isfinite(mu)):
        raise NotIrreducible("no strictly positive invariant measure in batch")
    return mu / mu.sum(axis=-1, keepdims=True)


def transition_matrix(G, t):
    """``exp(t G)`` by uniformization.

    With ``lam = max_i |g_ii|`` and ``P = I + G / lam`` the result is the
    Poisson(``lam t``) mixture of powers of ``P``, truncated once the
    remaining Poisson tail mass drops below 1e-14. Rows are renormalised.
    """
    if t < 0:
        raise HorizonNegative(f"t must be nonnegative, got {t!r}")
    G = np.asarray(G, dtype=float)
    m = G.shape[0]
    lam = float(np.max(np.abs(np.diag(G))))
    if lam == 0.0 or t == 0.0:
        return np.eye(m)
    lt = lam * t
    P = np.eye(m) + G / lam
    kmax = int(poisson.isf(UNIFORMIZATION_TAIL, lt)) + 1
    k = np.arange(kmax + 1)
    w = np.exp(k * np.log(lt) - lt - gammaln(k + 1))
    out = np.zeros((m, m))
    term = np.eye(m)
    for wk in w:
        out += wk * term
        term = term @ P
    out = np.clip(out, 0.0, None)
    return out / out.sum(axis=1, keepdims=True)


def ergodicity_probe(G, t_grid):
    """Worst-row total-variation distance to ``mu`` at each time.

    Total variation uses the half-L1 convention, so values lie in [0, 1].
    """
    mu = invariant_measure(G)
    return np.array(
        [
            0.5 * np.abs(transition_matrix(G, t) - mu).sum(axis=1).max()
            for t in np.asarray(t_grid, dtype=float)
        ]
    )


def mixing_horizon(G, tol=1e-8, t0=1.0):
    """Smallest doubling of ``t0`` at which the probe falls below ``tol``."""
    rate = float(np.max(np.abs(np.diag(G))))
    t = t0 / max(rate, 1e-300) if rate > 0 else t0
    for _ in range(200):
        if ergodicity_probe(G, [t])[0] < tol:
            return t
        t *= 2.0
    raise NotIrreducible("chain does not mix")


@dataclass(frozen=True)
class ChainPath:
    """A single right-continuous chain trajectory on ``[0, horizon]``."""

    initial_state: int
    jump_times: np.ndarray
    states: np.ndarray
    horizon: float

    def state_at(self, t):
        k = np.searchsorted(self.jump_times, t, side="right")
        return self.initial_state if k == 0 else int(self.states[k - 1])

    def occupation(self, m0):
        """Time spent in each state over ``[0, horizon]``."""
        edges = np.concatenate([[0.0], self.jump_times, [self.horizon]])
        labels = np.concatenate([[self.initial_state], self.states]).astype(int)
        return np.bincount(labels, weights=np.diff(edges), minlength=m0)


def sample_chain_frozen(G, i0, horizon, rng):
    """Exact exponential-clock sample of the chain generated by ``G``."""
    G = np.asarray(G, dtype=float)
    m = G.shape[0]
    times, states = [], []
    t, i = 0.0, int(i0)
    while True:
        rate = -G[i, i]
        if rate <= 0.0:
            break
        t += rng.exponential(1.0 / rate)
        if t > horizon:
            break
        p = np.clip(G[i], 0.0, None)
        p[i] = 0.0
        i = int(rng.choice(m, p=p / p.sum()))
        times.append(t)
        states.append(i)
    return ChainPath(
        initial_state=int(i0),
        jump_times=np.asarray(times, dtype=float),
        states=np.asarray(states, dtype=int),
        horizon=float(horizon),
    )


def _jump(G, state, rng):
    """Post-jump states for rows ``G[state]`` (batched, vectorised)."""
    m = G.shape[-1]
    rows = G[np.arange(state.shape[0]), state] if G.ndim == 3 else G[state]
    rows = np.clip(rows, 0.0, None)
    rows[np.arange(state.shape[0]), state] = 0.0
    cum = np.cumsum(rows, axis=1)
    u = rng.random(state.shape[0]) * cum[:, -1]
    nxt = (cum <= u[:, None]).sum(axis=1)
    return np.minimum(nxt, m - 1)


def advance(G, state, horizon, rng, occupation=None):
    """Evolve many independent chains for ``horizon`` time units.

    ``G`` is either one generator or a stack ``(M, m0, m0)`` aligned with
    ``state``. When ``occupation`` (shape ``(M, m0)``) is given, the time
    spent in each state is added to it in place. Returns the new states.
    """
    state = np.array(state, dtype=np.intp)
    M = state.shape[0]
    remaining = np.full(M, float(horizon))
    active = np.arange(M)
    while active.size:
        s = state[active]
        Ga = G[active] if G.ndim == 3 else G
        rate = -(Ga[np.arange(active.size), s, s] if G.ndim == 3 else G[s, s])
        tau = rng.exponential(size=active.size)
        with np.errstate(divide="ignore"):
            tau = np.where(rate > 0, tau / np.where(rate > 0, rate, 1.0), np.inf)
        rem = remaining[active]
        jumps = tau < rem
        if occupation is not None:
            occupation[active, s] += np.where(jumps, tau, rem)
        hit = active[jumps]
        if hit.size:
            Gh = G[hit] if G.ndim == 3 else G
            state[hit] = _jump(Gh, state[hit], rng)
            remaining[hit] -= tau[jumps]
        active = hit
    return state


def sample_states(G, i0, t, n_paths, rng):
    """Chain state at time ``t`` for ``n_paths`` independent paths."""
    return advance(np.asarray(G, dtype=float), np.full(n_paths, i0), t, rng)


def occupation_times(G, i0, horizon, n_paths, rng):
    """Per-path occupation times ``(n_paths, m0)`` over ``[0, horizon]``."""
    G = np.asarray(G, dtype=float)
    occ = np.zeros((n_paths, G.shape[0]))
    advance(G, np.full(n_paths, i0), horizon, rng, occupation=occ)
    return occ
