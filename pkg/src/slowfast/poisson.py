"""Cell problem ``-Q(x) Phi(x, .) = K(x, .)`` for a finite generator.

Solutions are fixed in the mu-centred gauge (``mu . Phi^l = 0``), which is
the gauge of the integral representation
``Phi(x, i) = int_0^inf E K(x, alpha_t^{x,i}) dt``.
"""
from __future__ import annotations

import numpy as np

from .chain import invariant_measure, invariant_measures, mixing_horizon, occupation_times
from .errors import NotCentered, SingularSystem, StepTooSmall
from .stats import MonteCarloEstimate

__all__ = [
    "solve_cell_problem",
    "solve_cell_problems",
    "phi_mc_estimate",
    "phi_jacobian",
    "phi_jacobians",
]

CENTERING_TOL = 1e-9


def _centred_solve(Q, rhs, mu):
    # (-Q + 1 mu) is the augmented system {-Q phi = rhs, mu phi = 0} folded
    # into one square, nonsingular matrix when Q is irreducible.
    A = -Q + np.ones(Q.shape[-1])[:, None] * mu[..., None, :]
    try:
        return np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        raise SingularSystem("cell problem matrix is singular") from None


def solve_cell_problem(Q, K, mu=None):
    """Centred solution ``Phi`` (shape ``(m0, n)``) of ``-Q Phi = K``.

    Raises
    ------
    NotCentered
        If some column of ``K`` has nonzero ``mu``-average.
    """
    Q = np.asarray(Q, dtype=float)
    K = np.asarray(K, dtype=float)
    squeeze = K.ndim == 1
    if squeeze:
        K = K[:, None]
    if mu is None:
        mu = invariant_measure(Q)
    avg = mu @ K
    for l, v in enumerate(avg):
        if abs(v) > CENTERING_TOL:
            raise NotCentered(l, float(v))
    phi = _centred_solve(Q, K, mu)
    return phi[:, 0] if squeeze else phi


def solve_cell_problems(Q, K, mu):
    """Batched solve over stacks ``Q (M, m0, m0)``, ``K (M, m0, n)``."""
    avg = np.einsum("mj,mjl->ml", mu, K)
    if np.any(np.abs(avg) > CENTERING_TOL):
        m, l = np.unravel_index(np.argmax(np.abs(avg)), avg.shape)
        raise NotCentered(int(l), float(avg[m, l]))
    return _centred_solve(Q, K, mu)


def phi_mc_estimate(model, x, i, l, t_max=None, M=10_000, rng=None):
    """Monte Carlo estimate of ``int_0^t_max E K^l(x, alpha_t^{x,i}) dt``.

    Each replica integrates the piecewise-constant ``K^l`` exactly along an
    exponential-clock chain path. ``t_max`` defaults to the time at which
    the chain's worst-row total variation to ``mu`` is below 1e-8.
    """
    if rng is None:
        rng = np.random.default_rng()
    Q = model.Q_at(x)
    Kl = model.K_at(x)[:, l]
    if not np.any(Kl):
        return MonteCarloEstimate(0.0, 0.0, M)
    if t_max is None:
        t_max = mixing_horizon(Q, tol=1e-8)
    vals = occupation_times(Q, i, t_max, M, rng) @ Kl
    return MonteCarloEstimate(float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(M)), M)


def _default_steps(x):
    return 1e-6 * (1.0 + np.abs(x))


def phi_jacobian(model, x, fd_step=None, analytic=None):
    """Jacobian ``dphi[i, l, k] = d Phi^l(x, i) / d x_k`` at a single point.

    Uses the model's analytic ``dQ``/``dK`` when both are present (unless
    ``analytic=False``), otherwise central differences of the centred
    solution with step ``fd_step`` (default ``1e-6 (1 + |x_k|)``).
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return phi_jacobians(model, x, fd_step=fd_step, analytic=analytic)[0]


def phi_jacobians(model, x, fd_step=None, analytic=None, Q=None, mu=None, phi=None):
    """Batched :func:`phi_jacobian` for ``x`` of shape ``(M, n)``."""
    x = np.asarray(x, dtype=float)
    if analytic is None:
        analytic = model.dK is not None and model.dQ is not None
    if analytic:
        return _analytic_jacobians(model, x, Q, mu, phi)
    return _fd_jacobians(model, x, fd_step)


def _analytic_jacobians(model, x, Q=None, mu=None, phi=None):
    # Differentiating -Q Phi = K gives -Q dPhi = dK + dQ Phi. The additive
    # constant is fixed by differentiating mu . Phi = 0, i.e.
    # mu . dPhi = -dmu . Phi, where dmu Q = -mu dQ and dmu . 1 = 0.
    if Q is None:
        Q = model.Q(x)
    if mu is None:
        mu = invariant_measures(Q)
    if phi is None:
        phi = solve_cell_problems(Q, model.k_table(x), mu)
    dK = model.dK(x)  # (M, m0, n, n) [i, l, k]
    dQ = model.dQ(x)  # (M, n, m0, m0)
    M, m0, n = phi.shape
    ones = np.ones(m0)
    out = np.empty((M, m0, n, n))
    At = np.swapaxes(-Q + ones[:, None] * mu[:, None, :], 1, 2)
    for k in range(n):
        # rhs[m, i, l] = dK[m, i, l, k] + sum_j dQ[m, k, i, j] phi[m, j, l]
        rhs = dK[..., k] + dQ[:, k] @ phi
        rhs = rhs - np.einsum("mj,mjl->ml", mu, rhs)[:, None, :]
        psi = _centred_solve(Q, rhs, mu)
        # dmu solves dmu (-Q + 1 mu) = mu dQ  (using dmu . 1 = 0)
        dmu = np.linalg.solve(At, np.einsum("mi,mij->mj", mu, dQ[:, k])[..., None])[..., 0]
        shift = -np.einsum("mj,mjl->ml", dmu, phi)
        out[..., k] = psi + shift[:, None, :]
    return out


def _fd_jacobians(model, x, fd_step):
    M, n = x.shape
    out = np.empty((M, model.m0, n, n))

    def centred_phi(xs):
        Q = model.Q(xs)
        mu = invariant_measures(Q)
        return solve_cell_problems(Q, model.k_table(xs), mu)

    for k in range(n):
        h = _default_steps(x[:, k]) if fd_step is None else np.full(M, float(fd_step))
        if np.any(h <= 0):
            raise StepTooSmall("finite-difference step must be positive")
        xp, xm = x.copy(), x.copy()
        xp[:, k] += h
        xm[:, k] -= h
        h_eff = (xp[:, k] - xm[:, k]) / 2.0
        if np.any(h_eff == 0):
            raise StepTooSmall("finite-difference step vanished in floating point")
        diff = (centred_phi(xp) - centred_phi(xm)) / (2.0 * h_eff[:, None, None])
        if not np.all(np.isfinite(diff)):
            raise StepTooSmall("finite differences produced non-finite values")
        out[..., k] = diff
    return out
