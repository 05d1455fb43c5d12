"""Coefficient bundles for slow-fast switching diffusions and their checks.

Evaluators are vectorised over a leading batch axis: ``x`` has shape
``(M, n)`` and state labels ``i`` are integer arrays of shape ``(M,)``.
States are labelled ``0, ..., m0 - 1``.

=============  ===========================  =======================
evaluator      arguments                    returns
=============  ===========================  =======================
``K``, ``b``   ``(x, i)``                   ``(M, n)``
``sigma``      ``(x, i)``                   ``(M, n, d)``
``Q``          ``x``                        ``(M, m0, m0)``
``Qtilde``     ``x``                        ``(M, m0, m0)``
``dK``         ``x``                        ``(M, m0, n, n)``, ``[., i, m, k] = d K_m / d x_k``
``dQ``         ``x``                        ``(M, n, m0, m0)``, ``[., k] = d Q / d x_k``
=============  ===========================  =======================
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .chain import invariant_measure
from .errors import (
    EpsilonOutOfRange,
    NegativeOffDiagonal,
    RowSumNonzero,
    SlowFastError,
    UnknownModel,
)

__all__ = [
    "SwitchingModel",
    "validate_generator",
    "check_centering",
    "total_rate",
    "effective_generator",
    "builtin_model",
    "MODEL_REGISTRY",
    "PAPER_Q",
]

ALGEBRAIC_TOL = 1e-12
EVALUATOR_TOL = 1e-9

PAPER_Q = np.array([[-1.0, 1.0], [1.0, -1.0]])


@dataclass(frozen=True)
class SwitchingModel:
    """Coefficients ``(K, b, sigma, Q, Qtilde)`` of a slow-fast system.

    ``dK`` and ``dQ`` are optional analytic Jacobians; when absent, callers
    fall back to finite differences. ``x_independent`` marks models whose
    coefficients do not depend on the slow state, which lets averaged
    quantities be computed once.
    """

    name: str
    n: int
    d: int
    m0: int
    K: Callable
    b: Callable
    sigma: Callable
    Q: Callable
    Qtilde: Callable
    dK: Optional[Callable] = None
    dQ: Optional[Callable] = None
    x_independent: bool = False
    params: dict = field(default_factory=dict)

    def _batch(self, x):
        x = np.asarray(x, dtype=float)
        return x.reshape(-1, self.n)

    def k_table(self, x):
        """K at every state, shape ``(M, m0, n)`` for a batch ``x``."""
        x = self._batch(x)
        M = x.shape[0]
        return np.stack(
            [self.K(x, np.full(M, i)) for i in range(self.m0)], axis=1
        )

    def b_table(self, x):
        x = self._batch(x)
        M = x.shape[0]
        return np.stack(
            [self.b(x, np.full(M, i)) for i in range(self.m0)], axis=1
        )

    def sigma_table(self, x):
        x = self._batch(x)
        M = x.shape[0]
        return np.stack(
            [self.sigma(x, np.full(M, i)) for i in range(self.m0)], axis=1
        )

    def Q_at(self, x):
        """Fast generator at a single point, shape ``(m0, m0)``."""
        return np.array(self.Q(self._batch(x))[0], dtype=float)

    def Qtilde_at(self, x):
        return np.array(self.Qtilde(self._batch(x))[0], dtype=float)

    def K_at(self, x):
        """K at a single point for all states, shape ``(m0, n)``."""
        return self.k_table(x)[0]


def validate_generator(M, tol=ALGEBRAIC_TOL):
    """Check that ``M`` is a conservative Q-matrix.

    Off-diagonal entries in ``[-tol, 0)`` are clamped to zero. Returns a
    fresh float array.

    Raises
    ------
    NegativeOffDiagonal
        If an off-diagonal entry is below ``-tol``.
    RowSumNonzero
        If a row sum exceeds ``tol`` in absolute value.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    G = np.array(M, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ValueError(f"generator must be square, got shape {G.shape}")
    if not np.all(np.isfinite(G)):
        raise ValueError("generator has non-finite entries")
    m = G.shape[0]
    off = ~np.eye(m, dtype=bool)
    bad = np.argwhere(off & (G < -tol))
    if bad.size:
        i, j = (int(v) for v in bad[0])
        raise NegativeOffDiagonal(i, j, float(G[i, j]))
    G[off & (G < 0)] = 0.0
    sums = G.sum(axis=1)
    for i, s in enumerate(sums):
        if abs(s) > tol:
            raise RowSumNonzero(i, float(s))
    return G


def total_rate(G):
    """Sum of all off-diagonal rates, equal to ``-trace(G)``."""
    G = np.asarray(G, dtype=float)
    return float(G.sum() - np.trace(G))


def effective_generator(Q, Qt, eps):
    """``Q / eps + Qt / sqrt(eps)``, the generator seen at scale ``eps``."""
    if not (0 < eps <= 1):
        raise EpsilonOutOfRange(f"eps must lie in (0, 1], got {eps!r}")
    Q = np.asarray(Q, dtype=float)
    Qt = np.asarray(Qt, dtype=float)
    return Q / eps + Qt / np.sqrt(eps)


@dataclass(frozen=True)
class CenteringReport:
    value: np.ndarray
    ok: bool


def check_centering(model, x, tol=EVALUATOR_TOL):
    """mu-average of ``K(x, .)``; ``ok`` when its sup-norm is within ``tol``."""
    mu = invariant_measure(model.Q_at(x))
    value = mu @ model.K_at(x)
    return CenteringReport(value=value, ok=bool(np.max(np.abs(value)) <= tol))


# ---------------------------------------------------------------------------
# built-in models


def _const_state_table(table):
    """Evaluator ``(x, i) -> table[i]`` for a state-only coefficient."""
    table = np.asarray(table, dtype=float)

    def ev(x, i):
        return table[np.asarray(i)]

    return ev


def _const_matrix(Mat):
    Mat = np.asarray(Mat, dtype=float)

    def ev(x):
        x = np.asarray(x)
        return np.broadcast_to(Mat, (x.shape[0],) + Mat.shape)

    return ev


def _check_params(name, params, allowed):
    extra = set(params) - set(allowed)
    if extra:
        raise SlowFastError(f"model {name!r} has no parameters {sorted(extra)}")


def _paper_example(params):
    _check_params("paper_example", params, {"K", "Q", "sigma", "b"})
    K = np.asarray(params.get("K", [1.0, -1.0]), dtype=float)
    Q = np.asarray(params.get("Q", PAPER_Q), dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or K.shape != (Q.shape[0],):
        raise SlowFastError("paper_example: K must have one entry per row of Q")
    m0 = Q.shape[0]
    sig = float(params.get("sigma", 1.0))
    b0 = float(params.get("b", 0.0))
    zero = np.zeros((m0, m0))
    return SwitchingModel(
        name="paper_example",
        n=1,
        d=1,
        m0=m0,
        K=_const_state_table(K[:, None]),
        b=_const_state_table(np.full((m0, 1), b0)),
        sigma=_const_state_table(np.full((m0, 1, 1), sig)),
        Q=_const_matrix(Q),
        Qtilde=_const_matrix(zero),
        dK=lambda x: np.zeros((np.shape(x)[0], m0, 1, 1)),
        dQ=lambda x: np.zeros((np.shape(x)[0], 1, m0, m0)),
        x_independent=True,
        params=dict(params),
    )


def _pure_diffusion(params):
    _check_params("pure_diffusion", params, {"n", "b", "sigma"})
    n = int(params.get("n", 1))
    if n < 1:
        raise SlowFastError("pure_diffusion: n must be positive")
    b = np.broadcast_to(np.asarray(params.get("b", 0.0), dtype=float), (n,))
    sig = np.asarray(params.get("sigma", 1.0), dtype=float)
    sig = sig * np.eye(n) if sig.ndim == 0 else sig.reshape(n, -1)
    d = sig.shape[1]
    m0 = 2
    return SwitchingModel(
        name="pure_diffusion",
        n=n,
        d=d,
        m0=m0,
        K=_const_state_table(np.zeros((m0, n))),
        b=_const_state_table(np.broadcast_to(b, (m0, n))),
        sigma=_const_state_table(np.broadcast_to(sig, (m0, n, d))),
        Q=_const_matrix(PAPER_Q),
        Qtilde=_const_matrix(np.zeros((m0, m0))),
        dK=lambda x: np.zeros((np.shape(x)[0], m0, n, n)),
        dQ=lambda x: np.zeros((np.shape(x)[0], n, m0, m0)),
        x_independent=True,
        params=dict(params),
    )


# state_dependent_demo: reversible rates q_ij = s_ij(x) exp((theta_j - theta_i)/2)
# with s symmetric, so mu(x) = softmax(theta(x)) in closed form.
_DEMO_S0 = {(0, 1): 1.0, (0, 2): 0.7, (1, 2): 1.3}
_DEMO_PHASE = {(0, 1): 0.0, (0, 2): 1.0, (1, 2): 2.0}


def _demo_theta(x):
    x1, x2 = x[:, 0], x[:, 1]
    th = np.stack(
        [0.8 * np.tanh(x1), 0.6 * np.sin(x2), -0.5 * np.tanh(x1 - x2)], axis=1
    )
    sech2_1 = 1.0 / np.cosh(x1) ** 2
    sech2_12 = 1.0 / np.cosh(x1 - x2) ** 2
    dth = np.zeros(x.shape[:1] + (3, 2))
    dth[:, 0, 0] = 0.8 * sech2_1
    dth[:, 1, 1] = 0.6 * np.cos(x2)
    dth[:, 2, 0] = -0.5 * sech2_12
    dth[:, 2, 1] = 0.5 * sech2_12
    return th, dth


def _demo_mu(x):
    th, dth = _demo_theta(x)
    w = np.exp(th - th.max(axis=1, keepdims=True))
    mu = w / w.sum(axis=1, keepdims=True)
    mean_dth = np.einsum("mj,mjk->mk", mu, dth)
    dmu = mu[:, :, None] * (dth - mean_dth[:, None, :])
    return mu, dmu


def _demo_Q(x, with_grad=False):
    x = np.asarray(x, dtype=float)
    M = x.shape[0]
    th, dth = _demo_theta(x)
    Q = np.zeros((M, 3, 3))
    dQ = np.zeros((M, 2, 3, 3))
    du = np.array([1.0, 0.5])
    for (i, j), s0 in _DEMO_S0.items():
        u = x[:, 0] + 0.5 * x[:, 1] + _DEMO_PHASE[(i, j)]
        s = s0 + 0.5 * np.sin(u) ** 2
        ds = (0.5 * np.sin(2 * u))[:, None] * du
        for a, c in ((i, j), (j, i)):
            e = np.exp(0.5 * (th[:, c] - th[:, a]))
            Q[:, a, c] = s * e
            dQ[:, :, a, c] = ds * e[:, None] + (s * e)[:, None] * 0.5 * (
                dth[:, c] - dth[:, a]
            )
    idx = np.arange(3)
    Q[:, idx, idx] = -Q.sum(axis=2)
    dQ[:, :, idx, idx] = -dQ.sum(axis=3)
    return (Q, dQ) if with_grad else Q


def _demo_k0(x):
    x1, x2 = x[:, 0], x[:, 1]
    M = x.shape[0]
    k0 = np.zeros((M, 3, 2))
    dk0 = np.zeros((M, 3, 2, 2))
    for i in range(3):
        k0[:, i, 0] = np.cos(x1 + i) + 0.5 * (i - 1)
        k0[:, i, 1] = np.sin(0.7 * x2 - i)
        dk0[:, i, 0, 0] = -np.sin(x1 + i)
        dk0[:, i, 1, 1] = 0.7 * np.cos(0.7 * x2 - i)
    return k0, dk0


def _state_dependent_demo(params):
    _check_params("state_dependent_demo", params, {"k_scale", "qt_scale"})
    ks = float(params.get("k_scale", 1.0))
    qs = float(params.get("qt_scale", 1.0))

    def K_all(x):
        x = np.asarray(x, dtype=float)
        mu, _ = _demo_mu(x)
        k0, _ = _demo_k0(x)
        return ks * (k0 - np.einsum("mj,mjl->ml", mu, k0)[:, None, :])

    def K(x, i):
        x = np.asarray(x, dtype=float)
        return K_all(x)[np.arange(x.shape[0]), np.asarray(i)]

    def dK(x):
        x = np.asarray(x, dtype=float)
        mu, dmu = _demo_mu(x)
        k0, dk0 = _demo_k0(x)
        dbar = np.einsum("mjl,mjk->mlk", k0, dmu) + np.einsum(
            "mj,mjlk->mlk", mu, dk0
        )
        return ks * (dk0 - dbar[:, None, :, :])

    def b(x, i):
        x = np.asarray(x, dtype=float)
        i = np.asarray(i)
        rate = (0.5 + 0.25 * i)[:, None]
        shift = 0.1 * np.stack([i, -i], axis=1)
        return -rate * x + shift

    def sigma(x, i):
        x = np.asarray(x, dtype=float)
        i = np.asarray(i)
        out = np.empty((x.shape[0], 2, 2))
        out[:, 0, 0] = 1.0 + 0.2 * np.sin(x[:, 0] + i)
        out[:, 0, 1] = 0.1
        out[:, 1, 0] = 0.1 * np.cos(x[:, 1])
        out[:, 1, 1] = 0.8 + 0.1 * np.cos(x[:, 0] - i)
        return out

    def Qtilde(x):
        x = np.asarray(x, dtype=float)
        M = x.shape[0]
        out = np.zeros((M, 3, 3))
        for i in range(3):
            for j in range(3):
                if i != j:
                    out[:, i, j] = qs * (
                        0.3 + 0.2 * np.cos(x[:, 0] - x[:, 1] + i + 2 * j)
                    )
        idx = np.arange(3)
        out[:, idx, idx] = -out.sum(axis=2)
        return out

    return SwitchingModel(
        name="state_dependent_demo",
        n=2,
        d=2,
        m0=3,
        K=K,
        b=b,
        sigma=sigma,
        Q=_demo_Q,
        Qtilde=Qtilde,
        dK=dK,
        dQ=lambda x: _demo_Q(x, with_grad=True)[1],
        params=dict(params),
    )


MODEL_REGISTRY = {
    "paper_example": _paper_example,
    "state_dependent_demo": _state_dependent_demo,
    "pure_diffusion": _pure_diffusion,
}


def builtin_model(name, params=None):
    """Instantiate a registered model by name."""
    try:
        factory = MODEL_REGISTRY[name]
    except KeyError:
        raise UnknownModel(
            f"unknown model {name!r}; known: {sorted(MODEL_REGISTRY)}"
        ) from None
    return factory(dict(params or {}))
