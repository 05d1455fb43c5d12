"""Averaged (homogenised) coefficients of the limit diffusion.

Per state ``j`` at a frozen slow state ``x``::

    (K (x) Phi)_{ml} = K_m Phi^l
    dPhi_K^l         = <d_x Phi^l, K>
    F^l              = sum_i Qtilde_{ji} Phi^l(i)
    B                = b + dPhi_K + F
    Sigma            = sigma sigma^T + (K (x) Phi) + (K (x) Phi)^T

and the limit equation has drift ``mu . B`` and diffusion matrix
``mu . Sigma``, whose symmetric square root drives the noise.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .chain import invariant_measures
from .errors import NotPositiveSemidefinite, NotSymmetric
from .poisson import phi_jacobians, solve_cell_problems

__all__ = [
    "LocalCoefficients",
    "AveragedCoefficients",
    "AveragedModel",
    "local_coefficients",
    "average",
    "sqrt_spd",
    "jacobi_eigh",
    "averaged_model",
]

SYM_TOL = 1e-10
PSD_CLAMP = 1e-10
JACOBI_THRESHOLD = 1e-14
JACOBI_MAX_SWEEPS = 30


@dataclass(frozen=True)
class LocalCoefficients:
    """Per-state coefficient arrays; leading axis is the chain state."""

    KtensorPhi: np.ndarray  # (m0, n, n)
    dPhiK: np.ndarray  # (m0, n)
    F: np.ndarray  # (m0, n)
    B: np.ndarray  # (m0, n)
    Sigma: np.ndarray  # (m0, n, n)
    mu: np.ndarray  # (m0,)
    phi: np.ndarray  # (m0, n)


@dataclass(frozen=True)
class AveragedCoefficients:
    Bbar: np.ndarray
    SigmaBar: np.ndarray
    S: np.ndarray


def _local_batch(model, x, phi_shift=None):
    Q = model.Q(x)
    mu = invariant_measures(Q)
    K = model.k_table(x)
    phi = solve_cell_problems(Q, K, mu)
    dphi = phi_jacobians(model, x, Q=Q, mu=mu, phi=phi)
    if phi_shift is not None:
        phi = phi + np.asarray(phi_shift, dtype=float)
    KtPhi = K[..., :, None] * phi[..., None, :]
    dPhiK = np.einsum("mjlk,mjk->mjl", dphi, K)
    F = model.Qtilde(x) @ phi
    B = model.b_table(x) + dPhiK + F
    sig = model.sigma_table(x)
    Sigma = sig @ np.swapaxes(sig, -1, -2) + KtPhi + np.swapaxes(KtPhi, -1, -2)
    Sigma = 0.5 * (Sigma + np.swapaxes(Sigma, -1, -2))
    return dict(KtensorPhi=KtPhi, dPhiK=dPhiK, F=F, B=B, Sigma=Sigma, mu=mu, phi=phi)


def local_coefficients(model, x, phi_shift=None):
    """Per-state coefficients at a single slow state ``x``.

    ``phi_shift`` adds a constant to each column of the cell-problem
    solution before assembly; used to probe gauge dependence.
    """
    x = np.asarray(x, dtype=float).reshape(1, model.n)
    parts = _local_batch(model, x, phi_shift)
    return LocalCoefficients(**{k: v[0] for k, v in parts.items()})


def average(local, mu=None):
    """mu-averages of ``B`` and ``Sigma``; returns ``(Bbar, SigmaBar)``."""
    mu = local.mu if mu is None else np.asarray(mu, dtype=float)
    Bbar = mu @ local.B
    SigmaBar = np.einsum("j,jab->ab", mu, local.Sigma)
    return Bbar, 0.5 * (SigmaBar + SigmaBar.T)


def jacobi_eigh(A):
    """Cyclic Jacobi eigendecomposition of symmetric matrices ``(..., n, n)``.

    Sweeps stop once the off-diagonal Frobenius norm is below 1e-14 times
    the matrix norm, or after 30 sweeps. Returns ``(eigenvalues, V)`` with
    ``A = V diag(w) V^T``.
    """
    A = np.array(A, dtype=float)
    shape = A.shape
    n = shape[-1]
    A = A.reshape(-1, n, n)
    V = np.broadcast_to(np.eye(n), A.shape).copy()
    scale = np.sqrt((A**2).sum(axis=(1, 2)))
    offmask = ~np.eye(n, dtype=bool)
    for _ in range(JACOBI_MAX_SWEEPS):
        off = np.sqrt((A[:, offmask] ** 2).sum(axis=1))
        if np.all(off <= JACOBI_THRESHOLD * scale):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[:, p, q]
                rot = apq != 0.0
                if not np.any(rot):
                    continue
                safe = np.where(rot, apq, 1.0)
                theta = (A[:, q, q] - A[:, p, p]) / (2.0 * safe)
                t = np.where(
                    rot,
                    np.copysign(1.0, theta) / (np.abs(theta) + np.hypot(theta, 1.0)),
                    0.0,
                )
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = (t * c)[:, None]
                c = c[:, None]
                Ap, Aq = A[:, :, p].copy(), A[:, :, q].copy()
                A[:, :, p] = c * Ap - s * Aq
                A[:, :, q] = s * Ap + c * Aq
                Rp, Rq = A[:, p, :].copy(), A[:, q, :].copy()
                A[:, p, :] = c * Rp - s * Rq
                A[:, q, :] = s * Rp + c * Rq
                Vp, Vq = V[:, :, p].copy(), V[:, :, q].copy()
                V[:, :, p] = c * Vp - s * Vq
                V[:, :, q] = s * Vp + c * Vq
    w = np.diagonal(A, axis1=1, axis2=2).copy()
    return w.reshape(shape[:-1]), V.reshape(shape)


def sqrt_spd(M):
    """Symmetric square root of a symmetric positive semidefinite matrix.

    Accepts a single matrix or a stack. Eigenvalues in ``[-1e-10, 0)`` are
    treated as zero.

    Raises
    ------
    NotSymmetric
        If ``M`` is asymmetric beyond 1e-10.
    NotPositiveSemidefinite
        If an eigenvalue is below ``-1e-10``.
    """
    M = np.asarray(M, dtype=float)
    MT = np.swapaxes(M, -1, -2)
    if np.max(np.abs(M - MT), initial=0.0) > SYM_TOL:
        raise NotSymmetric("matrix is not symmetric")
    w, V = jacobi_eigh(0.5 * (M + MT))
    if np.any(w < -PSD_CLAMP):
        raise NotPositiveSemidefinite(f"eigenvalue {w.min()!r} is negative")
    root = np.sqrt(np.clip(w, 0.0, None))
    S = (V * root[..., None, :]) @ np.swapaxes(V, -1, -2)
    return 0.5 * (S + np.swapaxes(S, -1, -2))


class AveragedModel:
    """Evaluators for the drift and diffusion factor of the limit equation.

    Point queries through :meth:`at` are memoised on the exact bytes of
    ``x``; batched queries through :meth:`coefficients` recompute unless
    the model is x-independent.
    """

    def __init__(self, model):
        self.model = model
        self.n = model.n
        self._cache = {}
        self._lock = threading.Lock()
        self._const = None

    def _compute(self, x):
        parts = _local_batch(self.model, x)
        mu = parts["mu"]
        Bbar = np.einsum("mj,mjl->ml", mu, parts["B"])
        SigmaBar = np.einsum("mj,mjab->mab", mu, parts["Sigma"])
        SigmaBar = 0.5 * (SigmaBar + np.swapaxes(SigmaBar, -1, -2))
        return Bbar, SigmaBar, sqrt_spd(SigmaBar)

    def at(self, x):
        x = np.ascontiguousarray(x, dtype=float).reshape(self.n)
        key = x.tobytes()
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        Bbar, SigmaBar, S = self._compute(x[None, :])
        coeffs = AveragedCoefficients(Bbar[0], SigmaBar[0], S[0])
        with self._lock:
            self._cache.setdefault(key, coeffs)
        return coeffs

    def clear_cache(self):
        with self._lock:
            self._cache.clear()

    def coefficients(self, x):
        """Batched ``(Bbar (M, n), S (M, n, n))`` at ``x`` of shape ``(M, n)``."""
        x = np.asarray(x, dtype=float).reshape(-1, self.n)
        if self.model.x_independent:
            if self._const is None:
                c = self.at(np.zeros(self.n))
                self._const = (c.Bbar, c.S)
            B, S = self._const
            M = x.shape[0]
            return (
                np.broadcast_to(B, (M, self.n)),
                np.broadcast_to(S, (M, self.n, self.n)),
            )
        Bbar, _, S = self._compute(x)
        return Bbar, S

    def drift(self, x):
        return self.coefficients(x)[0]

    def diffusion(self, x):
        return self.coefficients(x)[1]


def averaged_model(model):
    return AveragedModel(model)
