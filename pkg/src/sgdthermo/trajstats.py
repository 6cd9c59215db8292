"""Empirical stationary statistics of trajectories.

``StationaryAccumulator`` consumes record blocks as the engines produce them,
so ensembles of 1e8 steps never have to sit in memory; the plain functions
below work on whole trajectories and are what the accumulator is tested
against.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import models
from .errors import InsufficientData, InvalidArgument
from .stationary import pseudo_inverse

MIN_SAMPLES = 100
MIN_BIN_COUNT = 100


def _thetas(traj):
    return np.asarray(getattr(traj, "thetas", traj), dtype=float)


def empirical_moments(traj, theta_ref, burn_in=0):
    """Mean of dtheta = theta - theta_ref and the second-moment matrix <dtheta dtheta^T>."""
    X = _thetas(traj)[burn_in:] - np.asarray(theta_ref, float)
    if X.shape[0] < MIN_SAMPLES:
        raise InsufficientData(f"{X.shape[0]} records after burn-in; need {MIN_SAMPLES}")
    S = X.T @ X / X.shape[0]
    return X.mean(axis=0), 0.5 * (S + S.T)


def area_matrix(subtraj, theta0) -> np.ndarray:
    """Oriented area swept around theta0, summed over consecutive segments."""
    P = np.asarray(subtraj, dtype=float)
    if P.ndim != 2 or P.shape[0] < 2:
        raise InvalidArgument("need at least two points")
    d = P[:-1] - np.asarray(theta0, float)
    step = np.diff(P, axis=0)
    A = d.T @ step
    return 0.5 * (A - A.T)


def entropy_kernel(theory):
    """Q with sigma_k = dtheta_k^T Q (theta_{k+1} - theta_k)."""
    Dinv, _ = pseudo_inverse(theory.D0)
    return np.linalg.inv(theory.Sigma) @ np.asarray(theory.C) @ Dinv


def entropy_production(subtraj, theory) -> float:
    """sum_k v(theta_k) . D0^+ (theta_{k+1} - theta_k) with v(theta) = -C Sigma^-1 (theta - theta0)."""
    P = np.asarray(subtraj, dtype=float)
    if P.ndim != 2 or P.shape[1] != np.size(theory.theta0):
        raise InvalidArgument("subtrajectory dimension does not match the theory")
    if P.shape[0] < 2:
        return 0.0
    Dinv, _ = pseudo_inverse(theory.D0)
    Sinv = np.linalg.inv(theory.Sigma)
    total = 0.0
    for k in range(P.shape[0] - 1):
        v = -np.asarray(theory.C) @ Sinv @ (P[k] - theory.theta0)
        total += float(v @ Dinv @ (P[k + 1] - P[k]))
    return total


def window_sums(increments, ell):
    inc = np.asarray(increments, dtype=float)
    k = inc.size // ell
    return inc[: k * ell].reshape(k, ell).sum(axis=1)


def _symmetric_hist(samples, width, half_bins):
    idx = np.rint(np.asarray(samples) / width).astype(np.int64)
    idx = np.clip(idx, -half_bins - 1, half_bins + 1)  # outermost slots collect overflow
    return np.bincount(idx + half_bins + 1, minlength=2 * half_bins + 3)


def dft_from_hist(hist, width, half_bins, min_count=MIN_BIN_COUNT):
    """Points (sigma, ln P(-sigma)/P(sigma), n(sigma), n(-sigma)) for qualifying bin pairs, and excluded bins."""
    centre = half_bins + 1
    points, excluded = [], []
    for k in range(1, half_bins + 1):
        npos, nneg = int(hist[centre + k]), int(hist[centre - k])
        if npos >= min_count and nneg >= min_count:
            points.append((k * width, math.log(nneg / npos), npos, nneg))
        elif npos or nneg:
            excluded.append(k * width)
    return points, excluded


def dft_slope(points):
    """Weighted least-squares slope of ln P(sigma)/P(-sigma) against sigma, through the origin.

    Returns (slope, standard error); the weights are the inverse Poisson
    variances 1/(1/n+ + 1/n-).
    """
    if not points:
        return float("nan"), float("nan")
    s = np.array([p[0] for p in points])
    r = -np.array([p[1] for p in points])
    w = 1.0 / np.array([1.0 / p[2] + 1.0 / p[3] for p in points])
    denom = float(np.sum(w * s * s))
    return float(np.sum(w * s * r) / denom), float(1.0 / math.sqrt(denom))


def fluctuation_checks(sigma_samples: dict, bin_width, half_bins=60, min_count=MIN_BIN_COUNT) -> dict:
    """IFT value, DFT curve and mean sigma for each subtrajectory length.

    ``bin_width`` may be a number or a dict keyed like ``sigma_samples``.
    """
    out = {}
    for ell, samples in sigma_samples.items():
        x = np.asarray(samples, dtype=float)
        if x.size == 0:
            raise InsufficientData(f"no samples for length {ell}")
        w = bin_width[ell] if isinstance(bin_width, dict) else bin_width
        hist = _symmetric_hist(x, w, half_bins)
        points, excluded = dft_from_hist(hist, w, half_bins, min_count)
        slope, slope_se = dft_slope(points)
        out[ell] = {
            "ift": float(np.mean(np.exp(-x))),
            "mean_sigma": float(np.mean(x)),
            "count": int(x.size),
            "dft_curve": points,
            "excluded_bins": excluded,
            "dft_slope": slope,
            "dft_slope_se": slope_se,
        }
    return out


def fdt_trace_check(traj, model, data, theta0, eta, D0, burn_in=0):
    """(tr <grad L(theta) dtheta^T>, tr D0 / eta) over post-burn-in records."""
    X = _thetas(traj)[burn_in:]
    if X.shape[0] < MIN_SAMPLES:
        raise InsufficientData(f"{X.shape[0]} records after burn-in; need {MIN_SAMPLES}")
    theta0 = np.asarray(theta0, float)
    acc = 0.0
    for th in X:
        acc += float(models.gradient(model, data, th) @ (th - theta0))
    return acc / X.shape[0], float(np.trace(D0)) / eta


def fdt_trace_synthetic(thetas, H0, theta0, eta, D0):
    """Same check when the drift is exactly linear, grad L = H0 dtheta."""
    X = np.asarray(thetas, float) - theta0
    lhs = float(np.mean(np.einsum("ka,ab,kb->k", X, H0, X)))
    return lhs, float(np.trace(D0)) / eta


# ---------------------------------------------------------------------------
# streaming accumulation

@dataclass
class _EllStats:
    count: int = 0
    sum: float = 0.0
    sumsq: float = 0.0
    sum_exp: float = 0.0
    hist: np.ndarray | None = None
    kept: list = field(default_factory=list)
    carry: list = field(default_factory=list)


class StationaryAccumulator:
    """Streaming moments, area rates and entropy-production statistics for one run.

    Records with step < ``burn_in`` are ignored.  Area and sigma use
    consecutive post-burn-in records; rates are per engine step (using the
    recorded step gaps), so thinned or epoch-sampled trajectories work too.
    """

    def __init__(self, theta_ref, theory=None, ells=(1, 2, 3), burn_in=0, bin_width=None,
                 half_bins=60, keep_samples=10000, track_sigma=True):
        self.theta_ref = np.asarray(theta_ref, dtype=float)
        N = self.theta_ref.size
        self.burn_in = int(burn_in)
        self.n = 0
        self.sum = np.zeros(N)
        self.sum2 = np.zeros((N, N))
        self.area = np.zeros((N, N))
        self.area_steps = 0
        self.intervals = 0
        self.last = None
        self.last_step = None
        self.ells = tuple(ells)
        self.half_bins = half_bins
        self.keep_samples = keep_samples
        self.Q = None
        self.theory = theory
        self.bin_width = {}
        if theory is not None and track_sigma and float(theory.entropy_rate) > 0:
            self.Q = entropy_kernel(theory)
            for ell in self.ells:
                if bin_width is None:
                    # sigma over ell steps has variance close to twice its mean
                    self.bin_width[ell] = math.sqrt(2 * theory.entropy_rate * ell) / 10
                else:
                    self.bin_width[ell] = bin_width[ell] if isinstance(bin_width, dict) else bin_width
        self.ell_stats = {ell: _EllStats(hist=np.zeros(2 * half_bins + 3, dtype=np.int64)) for ell in self.ells}

    def update(self, steps, thetas):
        steps = np.asarray(steps)
        thetas = np.asarray(thetas, dtype=float)
        keep = steps >= self.burn_in
        steps, thetas = steps[keep], thetas[keep]
        if steps.size == 0:
            return
        X = thetas - self.theta_ref
        self.n += X.shape[0]
        self.sum += X.sum(axis=0)
        self.sum2 += X.T @ X
        if self.last is not None:
            P = np.vstack([self.last[None, :], X])
            S = np.concatenate([[self.last_step], steps])
        else:
            P, S = X, steps
        if P.shape[0] >= 2:
            d = P[:-1]
            step = np.diff(P, axis=0)
            A = d.T @ step
            self.area += 0.5 * (A - A.T)
            self.area_steps += int(S[-1] - S[0])
            self.intervals += P.shape[0] - 1
            if self.Q is not None:
                inc = np.einsum("ka,ab,kb->k", d, self.Q, step)
                self._add_increments(inc)
        self.last = X[-1].copy()
        self.last_step = int(steps[-1])

    def _add_increments(self, inc):
        for ell, st in self.ell_stats.items():
            seq = np.concatenate([np.asarray(st.carry), inc]) if st.carry else inc
            k = seq.size // ell
            sig = seq[: k * ell].reshape(k, ell).sum(axis=1)
            st.carry = list(seq[k * ell:])
            if k == 0:
                continue
            st.count += k
            st.sum += float(np.sum(sig))
            st.sumsq += float(np.sum(sig * sig))
            st.sum_exp += float(np.sum(np.exp(-sig)))
            st.hist += _symmetric_hist(sig, self.bin_width[ell], self.half_bins)
            room = self.keep_samples - len(st.kept)
            if room > 0:
                st.kept.extend(sig[:room].tolist())

    # -- results ---------------------------------------------------------
    def moments(self):
        if self.n < MIN_SAMPLES:
            raise InsufficientData(f"{self.n} records after burn-in; need {MIN_SAMPLES}")
        mu = self.sum / self.n
        S = self.sum2 / self.n
        return mu, 0.5 * (S + S.T)

    def area_rate(self):
        if self.area_steps == 0:
            raise InsufficientData("no post-burn-in intervals")
        return self.area / self.area_steps


def merge_report(accs, theory=None, label="") -> "FluctuationReport":
    """Combine per-run accumulators; standard errors come from the spread across runs."""
    if not accs:
        raise InsufficientData("no runs to merge")
    n = sum(a.n for a in accs)
    if n < MIN_SAMPLES:
        raise InsufficientData(f"{n} records after burn-in; need {MIN_SAMPLES}")
    N = accs[0].theta_ref.size
    mu = sum(a.sum for a in accs) / n
    S = sum(a.sum2 for a in accs) / n
    S = 0.5 * (S + S.T)
    steps = sum(a.area_steps for a in accs)
    area = sum(a.area for a in accs) / max(steps, 1)
    rates = np.array([a.area / a.area_steps for a in accs if a.area_steps])
    area_se = rates.std(axis=0, ddof=1) / math.sqrt(len(rates)) if len(rates) > 1 else np.full((N, N), np.nan)
    covs = np.array([0.5 * (a.sum2 + a.sum2.T) / a.n for a in accs if a.n])
    sigma_se = covs.std(axis=0, ddof=1) / math.sqrt(len(covs)) if len(covs) > 1 else np.full((N, N), np.nan)
    report = FluctuationReport(mu, S, area, area_se=area_se, Sigma_se=sigma_se, records=n,
                               steps=steps, label=label)
    a0 = accs[0]
    if a0.Q is not None:
        for ell in a0.ells:
            sts = [a.ell_stats[ell] for a in accs]
            cnt = sum(s.count for s in sts)
            if cnt == 0:
                continue
            hist = sum(s.hist for s in sts)
            w = a0.bin_width[ell]
            points, excluded = dft_from_hist(hist, w, a0.half_bins)
            slope, slope_se = dft_slope(points)
            mean = sum(s.sum for s in sts) / cnt
            var = sum(s.sumsq for s in sts) / cnt - mean**2
            kept = [x for s in sts for x in s.kept][: a0.keep_samples]
            report.sigma[ell] = {
                "count": cnt,
                "mean_sigma": mean,
                "mean_sigma_se": math.sqrt(max(var, 0.0) / cnt),
                "ift": sum(s.sum_exp for s in sts) / cnt,
                "dft_curve": points,
                "excluded_bins": excluded,
                "dft_slope": slope,
                "dft_slope_se": slope_se,
                "bin_width": w,
                "samples": kept,
            }
    if theory is not None:
        report.theory_entropy_rate = float(theory.entropy_rate)
    return report


@dataclass
class FluctuationReport:
    mu_emp: np.ndarray
    Sigma_emp: np.ndarray
    area_rate_emp: np.ndarray
    area_se: np.ndarray | None = None
    Sigma_se: np.ndarray | None = None
    records: int = 0
    steps: int = 0
    label: str = ""
    sigma: dict = field(default_factory=dict)
    fdt_trace: tuple | None = None
    theory_entropy_rate: float | None = None

    def ift(self, ell):
        return self.sigma[ell]["ift"]

    def to_dict(self) -> dict:
        mat = lambda A: None if A is None else np.asarray(A).tolist()
        return {
            "label": self.label,
            "records": self.records,
            "steps": self.steps,
            "mu_emp": mat(self.mu_emp),
            "Sigma_emp": mat(self.Sigma_emp),
            "Sigma_se": mat(self.Sigma_se),
            "area_rate_emp": mat(self.area_rate_emp),
            "area_se": mat(self.area_se),
            "sigma": {str(k): v for k, v in self.sigma.items()},
            "fdt_trace": None if self.fdt_trace is None else list(self.fdt_trace),
            "theory_entropy_rate": self.theory_entropy_rate,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, d):
        arr = lambda k: None if d.get(k) is None else np.asarray(d[k], dtype=float)
        rep = cls(arr("mu_emp"), arr("Sigma_emp"), arr("area_rate_emp"), arr("area_se"), arr("Sigma_se"),
                  d.get("records", 0), d.get("steps", 0), d.get("label", ""))
        rep.sigma = {int(k): v for k, v in d.get("sigma", {}).items()}
        rep.fdt_trace = None if d.get("fdt_trace") is None else tuple(d["fdt_trace"])
        rep.theory_entropy_rate = d.get("theory_entropy_rate")
        return rep

    def write_dft_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ell", "sigma", "log_ratio_neg_over_pos", "count_pos", "count_neg"])
            for ell, st in sorted(self.sigma.items()):
                for s, lr, npos, nneg in st["dft_curve"]:
                    w.writerow([ell, "%.17g" % s, "%.17g" % lr, npos, nneg])

    def write_sigma_hist_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ell", "sigma"])
            for ell, st in sorted(self.sigma.items()):
                for s in st["samples"]:
                    w.writerow([ell, "%.17g" % s])
