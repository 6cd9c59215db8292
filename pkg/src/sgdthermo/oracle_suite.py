"""Enumeration and finite-difference checks, runnable as ``sgdthermo oracle``."""

from __future__ import annotations

import numpy as np

from . import diffusion, models

TOL = 1e-12


def _rel(a, b):
    scale = max(np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))) / scale)


def enumerated_coefficients(M, m):
    """Read each moment coefficient off the enumerated arrays at a representative index pattern."""
    e = diffusion.oracle_wor_moments(M, m)["enumerated"]
    zz, zc, cc = e["zeta_zeta"], e["zeta_chi"], e["chi_chi"]
    got = {"a0": zz[0, 0], "a1": -zc[0, 0, 1]}
    if M > 1:
        got["a0_off"] = zz[0, 1]
        got["a3"] = cc[0, 1, 0, 1]
        got["a4"] = cc[0, 1, 1, 0]
    if M > 2:
        got["a2"] = cc[0, 1, 0, 2]
        got["a5"] = cc[0, 1, 2, 0]
    if M > 3:
        got["a6"] = cc[0, 1, 2, 3]
    return got, e


def run_suite(coefficient_override: dict | None = None, seed: int = 0) -> dict:
    """Returns {"passed": bool, "checks": [...]}; each check names what it compared.

    ``coefficient_override`` adds offsets to the closed-form coefficients
    before comparison, which is how the negative control is exercised.
    """
    rng = np.random.default_rng(seed)
    checks = []

    def add(name, err, tol=TOL, **info):
        checks.append({"name": name, "error": err, "tol": tol, "pass": bool(err <= tol), **info})

    # WR diffusion against subset enumeration
    for M in range(2, 7):
        for m in range(1, M + 1):
            N = 3
            V = rng.normal(size=(N, M))
            gL = V.sum(axis=1)
            D = diffusion.diffusion_wr(V, gL, 0.1, m, M)
            O = diffusion.oracle_wr(V, gL, 0.1, m, M)
            err = 0.0 if m == M and not np.any(D) and np.max(np.abs(O)) < 1e-30 else _rel(D, O)
            add(f"wr M={M} m={m}", err)

    # WOR moment coefficients against ordering enumeration
    override = coefficient_override or {}
    for M in range(2, 7):
        for m in [d for d in range(1, M + 1) if M % d == 0]:
            ex = diffusion.exact_wor_moments(m, M)
            got, e = enumerated_coefficients(M, m)
            for key, val in got.items():
                closed = getattr(ex, key) + override.get(key, 0.0)
                add(f"wor-moment M={M} m={m} {key}", abs(closed - val), coefficient=key, M=M, m=m)
            add(f"wor-first-moments M={M} m={m}", max(np.max(np.abs(e["zeta"])), np.max(np.abs(e["chi"]))))

    # assembled WOR diffusion against direct enumeration of xi_hat
    for M, m in ((4, 2), (6, 2), (6, 3), (4, 1)):
        N = 3
        V = rng.normal(size=(N, M))
        U = rng.normal(size=(N, N, M))
        U = U + U.transpose(1, 0, 2)
        X = rng.normal(size=N)
        Y = 0.5 * np.eye(N)
        Dh = diffusion.diffusion_wor(V, U, X, Y, 0.1, m, M, "exact")
        add(f"wor-diffusion M={M} m={m}", _rel(Dh, diffusion.oracle_wor_diffusion(V, U, X, Y, 0.1, m)), tol=1e-10)

    # derivatives against central differences
    data = models.gen_regression_dataset(20, 0.1, 3)
    for model in (models.nonlinear_regression(), models.linearized_regression()):
        theta = rng.normal(0, 0.5, model.N)
        g = models.gradient(model, data, theta)
        fd = np.empty(model.N)
        for a in range(model.N):
            h = 1e-6 * max(1.0, abs(theta[a]))
            e = np.zeros(model.N)
            e[a] = h
            fd[a] = (models.loss(model, data, theta + e) - models.loss(model, data, theta - e)) / (2 * h)
        add(f"gradient-fd {model.kind}", _rel(g, fd), tol=1e-6)
        H = models.second_order(model, data, theta).H
        add(f"hessian-fd {model.kind}", _rel(H, models.fd_hessian(model, data, theta)), tol=1e-5)

    return {"passed": all(c["pass"] for c in checks), "checks": checks}
