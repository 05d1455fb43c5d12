"""Exit criteria for the package, each at its stated tolerance.

Every test prints one ``[criterion k] PASS/FAIL`` line; the lines are also
collected in the pytest terminal summary.
"""
import json

import numpy as np
import pytest

from slowfast.averaging import averaged_model, sqrt_spd
from slowfast.chain import invariant_measure, sample_states, transition_matrix
from slowfast.cli import main
from slowfast.model import PAPER_Q, builtin_model
from slowfast.poisson import phi_mc_estimate, solve_cell_problem
from slowfast.sde import (
    DEFAULT_EPS_GRID,
    SimConfig,
    analytic_example_error,
    fit_order,
    simulate_averaged,
    simulate_slow_fast,
    weak_error_study,
)

from conftest import ALL_MODELS, acceptance_report, random_points

HEADLINE_SEED = 20241015
HEADLINE_M = 100_000


@pytest.fixture(scope="module")
def headline():
    return weak_error_study(
        builtin_model("paper_example"),
        "coordinate(0)",
        eps_grid=DEFAULT_EPS_GRID,
        T=1.0,
        M=HEADLINE_M,
        seed=HEADLINE_SEED,
        x0=[0.0],
        alpha0=0,
        step_rule="eps_scaled",
        step_c=0.1,
    )


def test_criterion_1_example_reproduction(headline):
    ref = analytic_example_error(headline.eps_grid, 1.0)
    z = np.abs(headline.error - ref) / headline.std_err
    ok = bool(np.all(z <= 3.0))
    detail = ", ".join(
        f"eps=2^{int(round(np.log2(e)))}: err={v:.5f} ref={r:.5f} |z|={zz:.2f}"
        for e, v, r, zz in zip(headline.eps_grid, headline.error, ref, z)
    )
    assert acceptance_report(1, "example reproduction (|z| <= 3)", ok, detail)


def test_criterion_2_order_fit(headline):
    fit = fit_order(headline)
    ok = 0.4 <= fit.slope <= 0.6 and fit.r_squared >= 0.98
    assert acceptance_report(
        2, "order fit (slope in [0.4, 0.6], r2 >= 0.98)", ok,
        f"slope={fit.slope:.4f} r2={fit.r_squared:.5f}",
    )


def test_criterion_3_cell_problem():
    worst_res = worst_cen = 0.0
    for name in ALL_MODELS:
        model = builtin_model(name)
        for x in random_points(model, 100, seed=303):
            Q = model.Q_at(x)
            mu = invariant_measure(Q)
            phi = solve_cell_problem(Q, model.K_at(x), mu)
            worst_res = max(worst_res, np.max(np.abs(Q @ phi + model.K_at(x))))
            worst_cen = max(worst_cen, np.max(np.abs(mu @ phi)))
    demo = builtin_model("state_dependent_demo")
    r = np.random.default_rng(304)
    zs = []
    for _ in range(5):
        x = r.normal(size=2)
        i, l = int(r.integers(3)), int(r.integers(2))
        Q = demo.Q_at(x)
        phi = solve_cell_problem(Q, demo.K_at(x))
        est = phi_mc_estimate(demo, x, i, l, M=4000, rng=r)
        zs.append(abs(est.mean - phi[i, l]) / est.std_err)
    ok = worst_res <= 1e-10 and worst_cen <= 1e-10 and max(zs) <= 3
    assert acceptance_report(
        3, "cell-problem exactness", ok,
        f"max residual={worst_res:.2e} max centering={worst_cen:.2e} "
        f"MC |z|={', '.join(f'{z:.2f}' for z in zs)}",
    )


def test_criterion_4_averaged_anchor():
    avg = averaged_model(builtin_model("paper_example"))
    dB = dS = 0.0
    for x in np.random.default_rng(404).normal(scale=3.0, size=(10, 1)):
        c = avg.at(x)
        dB = max(dB, abs(c.Bbar[0]))
        dS = max(dS, abs(c.S[0, 0] - np.sqrt(2.0)))
    ok = dB <= 1e-12 and dS <= 1e-12
    assert acceptance_report(4, "averaged anchor (Bbar=0, S=sqrt 2)", ok,
                             f"max|Bbar|={dB:.1e} max|S-sqrt2|={dS:.1e}")


def test_criterion_5_ctmc():
    r = np.random.default_rng(505)
    demo = builtin_model("state_dependent_demo")
    gens = [PAPER_Q, demo.Q_at(np.array([0.7, -1.2]))]
    for _ in range(8):
        m = int(r.integers(2, 6))
        G = r.uniform(0.05, 4.0, size=(m, m))
        np.fill_diagonal(G, 0.0)
        np.fill_diagonal(G, -G.sum(axis=1))
        gens.append(G)
    ck = rows = 0.0
    for G in gens:
        for t1, t2 in r.uniform(0, 3, size=(5, 2)):
            P1, P2, P12 = (transition_matrix(G, t) for t in (t1, t2, t1 + t2))
            ck = max(ck, np.max(np.abs(P12 - P1 @ P2)))
            rows = max(rows, np.max(np.abs(P12.sum(axis=1) - 1)))
    closed = 0.0
    for t in (0.1, 0.5, 2.0):
        e = np.exp(-2 * t)
        exact = 0.5 * np.array([[1 + e, 1 - e], [1 - e, 1 + e]])
        closed = max(closed, np.max(np.abs(transition_matrix(PAPER_Q, t) - exact)))
    n = 100_000
    zmax = 0.0
    for G, i0, t in ((PAPER_Q, 0, 0.4), (gens[1], 1, 0.3)):
        p = transition_matrix(G, t)[i0]
        freq = np.bincount(sample_states(G, i0, t, n, r), minlength=G.shape[0]) / n
        zmax = max(zmax, np.max(np.abs(freq - p) / np.sqrt(p * (1 - p) / n)))
    ok = ck <= 1e-8 and rows <= 1e-10 and closed <= 1e-10 and zmax <= 4
    assert acceptance_report(
        5, "CTMC correctness", ok,
        f"CK={ck:.1e} row-sum={rows:.1e} closed-form={closed:.1e} empirical max|z|={zmax:.2f}",
    )


def test_criterion_6_sqrt():
    r = np.random.default_rng(606)
    worst = 0.0
    for _ in range(500):
        n = int(r.integers(1, 9))
        cond = float(np.exp(r.uniform(0, np.log(1e6))))
        U, _ = np.linalg.qr(r.normal(size=(n, n)))
        w = np.exp(r.uniform(0, np.log(cond), size=n)) / cond
        w[0] = 1.0
        w[-1] = 1.0 / cond
        M = (U * w) @ U.T
        M = 0.5 * (M + M.T)
        S = sqrt_spd(M)
        worst = max(worst, np.max(np.abs(S @ S - M)))
    exact = max(
        np.max(np.abs(sqrt_spd(np.eye(5)) - np.eye(5))),
        np.max(np.abs(sqrt_spd(np.diag([4.0, 9.0, 0.25])) - np.diag([2.0, 3.0, 0.5]))),
    )
    ok = worst <= 1e-10 and exact <= 1e-14
    assert acceptance_report(6, "square root", ok,
                             f"max|SS-M|={worst:.2e} diag/identity err={exact:.1e}")


def test_criterion_7_degeneracy():
    s = np.array([[1.0, 0.3], [0.0, 0.8]])
    model = builtin_model("pure_diffusion", {"n": 2, "b": [0.5, -0.25], "sigma": s})
    avg = averaged_model(model)
    x0 = np.array([0.2, -0.1])
    M = 40_000
    lim = simulate_averaged(avg, x0, 1.0, 1e-3, np.random.default_rng(707), M, (1.0,))
    zs = []
    for k, eps in enumerate((2.0**-4, 2.0**-8)):
        cfg = SimConfig(eps=eps, t_grid=(1.0,))
        sf = simulate_slow_fast(model, x0, 0, cfg, np.random.default_rng(708 + k), M)
        for f in (lambda x: x, lambda x: x**2):
            a, b = f(sf.X[:, -1]), f(lim.X[:, -1])
            se = np.hypot(a.std(axis=0, ddof=1), b.std(axis=0, ddof=1)) / np.sqrt(M)
            zs.extend(np.abs(a.mean(axis=0) - b.mean(axis=0)) / se)
    ok = max(zs) <= 3
    assert acceptance_report(7, "degeneracy (K=0, Qtilde=0)", ok,
                             f"max |z| over moments = {max(zs):.2f}")


def test_criterion_8_moment_bound(headline):
    m = headline.sup_sq_mean
    ratio = m.max() / m.min()
    assert acceptance_report(8, "moment bound (max/min < 2)", ratio < 2,
                             f"E sup|X|^2 = {np.round(m, 4).tolist()} ratio={ratio:.3f}")


def test_criterion_9_determinism(tmp_path):
    cfg = {
        "command": "study",
        "model": {"name": "paper_example", "params": {}},
        "sim": {"M": 25_000, "seed": 909},
        "study": {"eps_grid": [0.0625, 0.015625]},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    blobs = []
    for k, threads in enumerate(("1", "1", "4")):
        out = tmp_path / f"run{k}"
        code = main(["--config", str(path), "--out", str(out), "--threads", threads])
        assert code in (0, 1)
        blobs.append((out / "study.csv").read_bytes())
    ok = blobs[0] == blobs[1] == blobs[2]
    assert acceptance_report(9, "determinism (byte-identical study.csv)", ok,
                             "runs: threads=1, threads=1, threads=4")
