"""Linearized stationary-state theory near a loss minimum.

Near a minimum the drift is eta * H0 * dtheta and the noise has diffusion
matrix D0, so the stationary law is Gaussian with covariance from the
Lyapunov relation  H0 S + S H0 = 2 D0 / eta.  The antisymmetric part
C = eta H0 S - D0 measures the rotating probability current.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffusion, models
from .errors import CorrectionTooLarge, InvalidArgument, NoMinimum, NotAMinimum

PINV_CUTOFF = 1e-12


def _sym(A):
    A = np.asarray(A, dtype=float)
    return 0.5 * (A + A.T)


# ---------------------------------------------------------------------------
# minimization

def landscape_value_and_grad(model, data, theta, landscape="plain", eta=None, m=None):
    """Value and gradient of L, n*L or n*L + deltaL."""
    b = models.evaluate(model, data, theta, want_V=landscape == "wor")
    if landscape == "plain":
        return b.loss, b.grad
    n = data.M / m
    if landscape == "scaled":
        return n * b.loss, n * b.grad
    if landscape == "wor":
        dL, g = diffusion.effective_loss_perturbation(model, data, theta, eta, m)
        return n * b.loss + dL, n * b.grad + g
    raise InvalidArgument(f"unknown landscape {landscape!r}")


def _correction_hessian(model, data, theta, eta, m):
    """Hessian of deltaL by central differences of its gradient."""
    N = theta.size
    K = np.empty((N, N))
    for a in range(N):
        h = 1e-5 * max(1.0, abs(theta[a]))
        e = np.zeros(N)
        e[a] = h
        gp = diffusion.effective_loss_perturbation(model, data, theta + e, eta, m)[1]
        gm = diffusion.effective_loss_perturbation(model, data, theta - e, eta, m)[1]
        K[:, a] = (gp - gm) / (2 * h)
    return _sym(K)


def landscape_hessian(model, data, theta, landscape="plain", eta=None, m=None):
    H = models.second_order(model, data, theta).H
    if landscape == "plain":
        return H
    n = data.M / m
    if landscape == "scaled":
        return n * H
    return _sym(n * H + _correction_hessian(model, data, theta, eta, m))


def find_minimum(model, data, theta_init, landscape="plain", eta=None, m=None,
                 tol=1e-10, max_iter=200) -> np.ndarray:
    """Damped Newton iteration with a backtracking line search.

    Stops once ||grad||_inf <= tol * max(1, |value|).
    """
    if landscape in ("wor", "scaled") and m is None:
        raise InvalidArgument(f"landscape {landscape!r} needs the minibatch size m")
    if landscape == "wor" and eta is None:
        raise InvalidArgument("landscape 'wor' needs eta")
    theta = np.array(theta_init, dtype=float)
    f, g = landscape_value_and_grad(model, data, theta, landscape, eta, m)
    for _ in range(max_iter):
        gnorm = np.max(np.abs(g))
        if gnorm <= tol * max(1.0, abs(f)):
            return theta
        H = landscape_hessian(model, data, theta, landscape, eta, m)
        w, O = np.linalg.eigh(H)
        floor = 1e-8 * max(np.max(np.abs(w)), 1e-300)
        w = np.maximum(np.abs(w), floor)  # positive definite surrogate
        p = -O @ ((O.T @ g) / w)
        slope = float(g @ p)
        alpha = 1.0
        while True:
            trial = theta + alpha * p
            f_new, g_new = landscape_value_and_grad(model, data, trial, landscape, eta, m)
            if np.isfinite(f_new) and f_new <= f + 1e-4 * alpha * slope:
                break
            # below rounding level the value cannot decrease; accept if the gradient shrinks
            if abs(alpha * slope) < 1e-12 * max(1.0, abs(f)) and np.max(np.abs(g_new)) < gnorm:
                break
            alpha *= 0.5
            if alpha < 1e-12:
                raise NoMinimum(f"line search failed at ||grad||_inf = {gnorm:.3e}")
        theta, f, g = trial, f_new, g_new
    raise NoMinimum(f"no convergence in {max_iter} Newton iterations (||grad||_inf = {np.max(np.abs(g)):.3e})")


# ---------------------------------------------------------------------------
# Lyapunov relation

def solve_lyapunov(H0, D0, eta) -> np.ndarray:
    """Solve H0 S + S H0 = 2 D0 / eta in the eigenbasis of H0."""
    H0 = _sym(H0)
    D0 = _sym(D0)
    h, O = np.linalg.eigh(H0)
    if np.any(h <= 0):
        raise NotAMinimum(f"Hessian has non-positive eigenvalue {h.min():.3e}")
    Dt = O.T @ D0 @ O
    Delta = 2.0 / eta * Dt / (h[:, None] + h[None, :])
    return _sym(O @ Delta @ O.T)


def lyapunov_residual(H0, S, D0, eta) -> float:
    target = 2.0 / eta * np.asarray(D0)
    r = H0 @ S + S @ H0 - target
    return float(np.linalg.norm(r) / max(np.linalg.norm(target), 1e-300))


def diffusion_hessian(D_fn, theta0, h_fd=1e-4) -> np.ndarray:
    """T[a, b, mu, g] = d_mu d_g D_ab at theta0 by central second differences."""
    theta0 = np.asarray(theta0, dtype=float)
    N = theta0.size
    steps = h_fd * np.maximum(1.0, np.abs(theta0))
    D0 = np.asarray(D_fn(theta0))
    T = np.empty(D0.shape + (N, N))
    shifted = {}

    def at(i, si, j, sj):
        key = (i, si, j, sj)
        if key not in shifted:
            t = theta0.copy()
            t[i] += si * steps[i]
            t[j] += sj * steps[j]
            shifted[key] = np.asarray(D_fn(t))
        return shifted[key]

    for mu in range(N):
        t = theta0.copy()
        t[mu] += steps[mu]
        up = np.asarray(D_fn(t))
        t[mu] -= 2 * steps[mu]
        dn = np.asarray(D_fn(t))
        T[:, :, mu, mu] = (up - 2 * D0 + dn) / steps[mu] ** 2
        for g in range(mu):
            val = (at(mu, 1, g, 1) - at(mu, 1, g, -1) - at(mu, -1, g, 1) + at(mu, -1, g, -1))
            val = val / (4 * steps[mu] * steps[g])
            T[:, :, mu, g] = val
            T[:, :, g, mu] = val
    return T


@dataclass
class CorrectedSolution:
    """S = base + delta, kept apart so tiny deviations survive rounding."""

    base: np.ndarray
    delta: np.ndarray
    iterations: int

    @property
    def sigma(self) -> np.ndarray:
        return self.base + self.delta


def solve_lyapunov_corrected_parts(H0, D_fn, theta0, eta, s=1.0, isotropic=0.0,
                                   h_fd=1e-4, tol=1e-10, max_iter=500,
                                   hessian=None) -> CorrectedSolution:
    """Solve s (H0 S + S H0) = (2 (isotropic I + D(theta0)) + HD S) / eta.

    The isotropic part is solved in closed form, S_base = isotropic/(eta s) H0^-1,
    and the rest by fixed-point iteration on delta = S - S_base.
    """
    H0 = _sym(H0)
    h, O = np.linalg.eigh(H0)
    if np.any(h <= 0):
        raise NotAMinimum(f"Hessian has non-positive eigenvalue {h.min():.3e}")
    base = isotropic / (eta * s) * _sym(O @ np.diag(1.0 / h) @ O.T)
    D0 = _sym(D_fn(theta0))
    T = diffusion_hessian(D_fn, theta0, h_fd) if hessian is None else hessian
    contract = lambda S: _sym(np.einsum("abmg,mg->ab", T, S))
    sH = s * H0
    base_term = contract(base)
    delta = solve_lyapunov(sH, D0 + 0.5 * base_term, eta)
    first = np.linalg.norm(delta)
    for k in range(1, max_iter + 1):
        new = solve_lyapunov(sH, D0 + 0.5 * (base_term + contract(delta)), eta)
        change = np.linalg.norm(new - delta)
        scale = np.linalg.norm(new)
        delta = new
        if not np.all(np.isfinite(delta)) or scale > 1e6 * max(first, 1e-300) + 1e6 * np.linalg.norm(base):
            raise CorrectionTooLarge(f"fixed-point iteration diverged at eta={eta:g}")
        if change <= tol * max(scale, 1e-300):
            return CorrectedSolution(base, delta, k)
    raise CorrectionTooLarge(f"fixed-point iteration did not settle in {max_iter} steps at eta={eta:g}")


def solve_lyapunov_corrected(H0, D_fn, theta0, eta, s=1.0, h_fd=1e-4, tol=1e-10, max_iter=500) -> np.ndarray:
    """Lyapunov relation with the varying-diffusion correction, D_fn giving the full diffusion matrix."""
    return solve_lyapunov_corrected_parts(H0, D_fn, theta0, eta, s=s, h_fd=h_fd, tol=tol, max_iter=max_iter).sigma


# ---------------------------------------------------------------------------
# circulation and rates

def pseudo_inverse(D, cutoff=PINV_CUTOFF):
    """Symmetric pseudo-inverse; also returns the number of dropped directions."""
    w, O = np.linalg.eigh(_sym(D))
    top = np.max(np.abs(w)) if w.size else 0.0
    keep = w > cutoff * top if top > 0 else np.zeros_like(w, dtype=bool)
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / w[keep]
    return _sym(O @ np.diag(inv) @ O.T), int(np.sum(~keep))


def circulation_and_rates(H0, S, D0, eta):
    """Circulation matrix, mean entropy production per step, mean area per step.

    C is built as eta (H0 S - S H0)/2, which equals eta H0 S - D0 whenever S
    solves the Lyapunov relation and is antisymmetric by construction.
    """
    H0 = _sym(H0)
    S = _sym(S)
    C = 0.5 * eta * (H0 @ S - S @ H0)
    C = 0.5 * (C - C.T)
    Dinv, _ = pseudo_inverse(D0)
    Sinv = np.linalg.inv(S)
    rate = -float(np.trace(C @ Dinv @ C @ Sinv))
    return C, rate, C.copy()


# ---------------------------------------------------------------------------
# Gaussian KL and exact posterior

def _kl_from_eigs(e):
    e = np.asarray(e, dtype=float)
    if np.any(e <= -1):
        raise InvalidArgument("candidate covariance is not positive definite")
    small = np.abs(e) < 1e-4
    out = np.empty_like(e)
    es = e[small]
    out[small] = es**2 / 2 - es**3 / 3 + es**4 / 4 - es**5 / 5
    el = e[~small]
    out[~small] = el - np.log1p(el)
    return float(np.sum(out))


def gaussian_kl_bits(sigma_ref, delta=None, mean_shift=None, sigma=None) -> float:
    """KL(N(mu, S) || N(mu_ref, S_ref)) in bits.

    S is given either directly or as ``delta`` = S - S_ref; the latter keeps
    precision when the two covariances agree to many digits.
    """
    sigma_ref = _sym(sigma_ref)
    if delta is None:
        if sigma is None:
            raise InvalidArgument("need sigma or delta")
        delta = _sym(sigma) - sigma_ref
    w, O = np.linalg.eigh(sigma_ref)
    if np.any(w <= 0):
        raise InvalidArgument("reference covariance is not positive definite")
    R = O / np.sqrt(w)  # S_ref^{-1/2} in the eigenbasis
    e = np.linalg.eigvalsh(_sym(R.T @ _sym(delta) @ R))
    total = _kl_from_eigs(e)
    if mean_shift is not None:
        z = R.T @ np.asarray(mean_shift, dtype=float)
        total += float(z @ z)
    return total / (2 * math.log(2))


@dataclass
class PosteriorSpec:
    theta0: np.ndarray
    sigma_po: np.ndarray


def exact_posterior(Psi, y, eps, lam) -> PosteriorSpec:
    Psi = np.asarray(Psi, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    H0 = Psi @ Psi.T / eps**2 + 2 * lam * np.eye(Psi.shape[0])
    sigma_po = _sym(np.linalg.inv(H0))
    theta0 = np.linalg.solve(H0, Psi @ y) / eps**2
    return PosteriorSpec(theta0, sigma_po)


def exact_posterior_and_kl(Psi, y, eps, lam, sigma_candidate=None, delta=None, mean=None):
    """Posterior of Bayesian linear regression and KL(candidate || posterior) in bits."""
    post = exact_posterior(Psi, y, eps, lam)
    if sigma_candidate is not None:
        S = _sym(sigma_candidate)
        if S.shape != post.sigma_po.shape or np.any(np.linalg.eigvalsh(S) <= 0):
            raise InvalidArgument("candidate covariance must be SPD and match the posterior shape")
    shift = None if mean is None else np.asarray(mean, dtype=float) - post.theta0
    kl = gaussian_kl_bits(post.sigma_po, delta=delta, mean_shift=shift, sigma=sigma_candidate)
    return post, kl


# ---------------------------------------------------------------------------
# theory bundles

@dataclass
class StationaryTheory:
    theta0: np.ndarray
    H0: np.ndarray
    D0: np.ndarray
    Sigma: np.ndarray
    C: np.ndarray
    eta: float
    mode: str
    entropy_rate: float = float("nan")
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        mat = lambda A: np.asarray(A).tolist()
        return {
            "mode": self.mode,
            "eta": self.eta,
            "theta0": mat(self.theta0),
            "H0": mat(self.H0),
            "D0": mat(self.D0),
            "Sigma": mat(self.Sigma),
            "C": mat(self.C),
            "entropy_rate": self.entropy_rate,
            "extra": {k: (mat(v) if isinstance(v, np.ndarray) else v) for k, v in self.extra.items()},
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, d):
        arr = lambda k: np.asarray(d[k], dtype=float)
        return cls(arr("theta0"), arr("H0"), arr("D0"), arr("Sigma"), arr("C"),
                   float(d["eta"]), d["mode"], float(d.get("entropy_rate", float("nan"))),
                   dict(d.get("extra", {})))

    @classmethod
    def from_json(cls, text_or_path):
        text = text_or_path
        if not str(text).lstrip().startswith("{"):
            with open(text_or_path) as fh:
                text = fh.read()
        return cls.from_dict(json.loads(text))


def _bundle(theta0, H0, D0, eta, mode, **extra):
    S = solve_lyapunov(H0, D0, eta)
    C, rate, _ = circulation_and_rates(H0, S, D0, eta)
    return StationaryTheory(theta0, _sym(H0), _sym(D0), S, C, eta, mode, rate, extra)


def wr_diffusion_at(model, data, theta, eta, m, variant="exact"):
    b = models.evaluate(model, data, theta)
    return diffusion.diffusion_wr(b.V, b.data_grad, eta, m, data.M, variant)


def wor_diffusion_at(model, data, theta, eta, m, variant="exact", H=None):
    b = models.evaluate(model, data, theta)
    if variant == "hdh":
        if H is None:
            H = models.second_order(model, data, theta).H
        D = diffusion.diffusion_wr(b.V, b.data_grad, eta, m, data.M)
        return diffusion.diffusion_wor(b.V, None, b.X, b.Y, eta, m, data.M, "hdh", H=H, D=D)
    U = models.sample_hessians(model, data, theta)
    return diffusion.diffusion_wor(b.V, U, b.X, b.Y, eta, m, data.M, variant)


def theory_sgd_wr(model, data, eta, m, theta0, d_variant="exact") -> StationaryTheory:
    H0 = models.second_order(model, data, theta0).H
    D0 = wr_diffusion_at(model, data, theta0, eta, m, d_variant)
    return _bundle(np.asarray(theta0, float), H0, D0, eta, "sgd-wr")


def theory_sgd_wor(model, data, eta, m, theta_start, d_variant="exact") -> StationaryTheory:
    """Epoch-level theory: centre at the minimizer of n L + deltaL."""
    theta_hat = find_minimum(model, data, theta_start, "wor", eta, m)
    H0 = landscape_hessian(model, data, theta_hat, "wor", eta, m)
    D0 = wor_diffusion_at(model, data, theta_hat, eta, m, d_variant)
    return _bundle(theta_hat, H0, D0, eta, "sgd-wor", theta_plain=np.asarray(theta_start, float))


def theory_earthquake(model, data, eta, zeta, theta0) -> StationaryTheory:
    """Linearized earthquake dynamics: drift eta H0, diffusion eta^2 zeta^2 H0^2 / 2.

    Mobility eta H0^2 against this diffusion gives an Einstein relation with
    inverse temperature 2 / (eta zeta^2), and Sigma = (eta zeta^2 / 2) H0.
    """
    H0 = models.second_order(model, data, theta0).H
    D0 = 0.5 * eta**2 * zeta**2 * H0 @ H0
    th = _bundle(np.asarray(theta0, float), H0, D0, eta, "earthquake", beta=2.0 / (eta * zeta**2))
    th.C = np.zeros_like(th.C)
    th.entropy_rate = 0.0
    return th


# ---------------------------------------------------------------------------
# posterior accuracy of SGLD / SGWORLD for the linearized model

def posterior_kl(model, data, eta, m, algorithm="sgld", wor_variant="hdh", h_fd=1e-4) -> dict:
    """Theory-side KL(stationary || posterior) in bits for one learning rate.

    algorithm is ``"sgld"``, ``"sgworld"`` or ``"sgworld-uncorrected"``.
    """
    if model.kind != "linearized-regression":
        raise InvalidArgument("the exact posterior is available for the linearized model only")
    Psi = models.psi(data.inputs[:, 0]).T
    y = data.outputs[:, 0]
    post = exact_posterior(Psi, y, model.eps, model.lam)
    theta0 = post.theta0
    H0 = models.second_order(model, data, theta0).H
    n = data.M / m
    if algorithm == "sgld":
        D_fn = lambda th: wr_diffusion_at(model, data, th, eta, m)
        sol = solve_lyapunov_corrected_parts(H0, D_fn, theta0, eta, s=1.0, isotropic=eta, h_fd=h_fd)
        # the isotropic part reproduces H0^-1, the posterior covariance, exactly
        kl = gaussian_kl_bits(sol.base, delta=sol.delta)
        return {"kl": kl, "sigma": sol.sigma, "mean": theta0}
    D_fn = lambda th: wor_diffusion_at(model, data, th, eta, m, wor_variant, H=H0)
    if algorithm == "sgworld":
        sol = solve_lyapunov_corrected_parts(H0, D_fn, theta0, eta, s=n, isotropic=eta * n, h_fd=h_fd)
        kl = gaussian_kl_bits(sol.base, delta=sol.delta)
        return {"kl": kl, "sigma": sol.sigma, "mean": theta0}
    if algorithm == "sgworld-uncorrected":
        theta_hat = find_minimum(model, data, theta0, "wor", eta, m)
        Hhat = landscape_hessian(model, data, theta_hat, "wor", eta, m)
        sol = solve_lyapunov_corrected_parts(Hhat, D_fn, theta_hat, eta, s=1.0, isotropic=eta * n, h_fd=h_fd)
        kl = gaussian_kl_bits(post.sigma_po, sigma=sol.sigma, mean_shift=theta_hat - theta0)
        return {"kl": kl, "sigma": sol.sigma, "mean": theta_hat}
    raise InvalidArgument(f"unknown algorithm {algorithm!r}")


def loglog_slope(x, y) -> float:
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    return float(np.polyfit(lx, ly, 1)[0])
