"""Minibatch-noise diffusion matrices for with- and without-replacement SGD.

With replacement (WR) the per-step noise xi = eta * grad(L - L_B) has an
exactly computable covariance.  Without replacement (WOR) the epoch-to-epoch
map is Markov; to second order in eta its noise is

    xi_hat = eta^2 (Z zeta + S chi)

where zeta, chi are functions of the epoch's batch sequence and Z, S depend on
V, U, X, Y at the start of the epoch.  Only the moments of zeta and chi enter.

The closed-form moment coefficients as usually quoted (``wor_coefficients``)
omit two correlations that exhaustive enumeration exposes: zeta sums to zero
so <zeta_i zeta_j> has an off-diagonal part, and chi products over four
distinct samples do not vanish when m > 1.  The a5 expression also differs from
enumeration for some (M, m).  ``exact_wor_moments`` carries the corrected set;
``diffusion_wor(variant="exact")`` uses it and ``variant="full"`` keeps the
quoted formula.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import models
from .errors import CapabilityError, InvalidArgument, OracleLimit


def _batch_count(m: int, M: int, need_integer: bool = False) -> float:
    if m <= 0 or m > M:
        raise InvalidArgument(f"minibatch size m={m} must satisfy 1 <= m <= M={M}")
    if need_integer and M % m:
        raise InvalidArgument(f"M={M} is not a multiple of m={m}")
    return M / m


def diffusion_wr(V, gradL, eta, m, M, variant="exact") -> np.ndarray:
    """Diffusion matrix of WR minibatch noise, D = <xi xi^T> / 2.

    ``gradL`` is the gradient of the data term only (V summed over samples).
    """
    V = np.asarray(V, dtype=float)
    gradL = np.asarray(gradL, dtype=float)
    n = _batch_count(m, M)
    if variant == "exact":
        if M == 1:
            return np.zeros((V.shape[0], V.shape[0]))
        D = eta**2 * (n - 1) / (2 * (M - 1)) * (M * V @ V.T - np.outer(gradL, gradL))
    elif variant == "approx":
        D = 0.5 * eta**2 * n * V @ V.T
    else:
        raise InvalidArgument(f"unknown variant {variant!r}")
    return 0.5 * (D + D.T)


@dataclass(frozen=True)
class WorCoefficients:
    a0: float
    a1: float
    a2: float
    a3: float
    a4: float
    a5: float

    def as_tuple(self):
        return (self.a0, self.a1, self.a2, self.a3, self.a4, self.a5)


@dataclass(frozen=True)
class ExactWorMoments:
    """Complete second-moment coefficients of zeta and chi.

    ``a0_off`` is <zeta_i zeta_j> for i != j and ``a6`` is <chi_ij chi_kl>
    with i, j, k, l all distinct; the remaining fields play the same role as
    in ``WorCoefficients``.
    """

    a0: float
    a0_off: float
    a1: float
    a2: float
    a3: float
    a4: float
    a5: float
    a6: float


def wor_coefficients(m: int, M: int) -> WorCoefficients:
    """The six rational moment coefficients in their commonly quoted form.

    Index patterns that need three distinct samples do not exist for M = 2, so
    a2 and a5 (whose formulas divide by M - 2) are set to zero there.
    """
    if M < 2:
        raise InvalidArgument("M must be >= 2")
    n = _batch_count(m, M, need_integer=True)
    a0 = (M - m) * (M + m) / (12 * m**2)
    a1 = (n + 1) * (M - m) / (12 * (M - 1))
    a3 = (M - m) * (M + m - 2) / (4 * (M - 1) ** 2)
    a4 = -((M - m) ** 2) / (4 * (M - 1) ** 2)
    if M > 2:
        a2 = (M - m) * (M * (M - 4) + (M - 4) * m + 6) / (12 * (M - 2) * (M - 1) ** 2)
        a5 = -(M - m) * (12 * M + (M - 4) * (M**2 + (6 + M) * m)) / (12 * (M - 2) * (M - 1) ** 2 * M)
    else:
        a2 = a5 = 0.0
    return WorCoefficients(a0, a1, a2, a3, a4, a5)


def exact_wor_moments(m: int, M: int) -> ExactWorMoments:
    quoted = wor_coefficients(m, M)
    p = (m - 1) / (M - 1)  # two given samples share a batch
    a0_off = -quoted.a0 / (M - 1)
    if M > 2:
        # three samples in strictly increasing batches, minus the squared mean
        a5 = (M - m) * (M - 2 * m) / (6 * (M - 1) * (M - 2)) - (M - m) ** 2 / (4 * (M - 1) ** 2)
    else:
        a5 = 0.0
    if M > 3:
        k = ((m - 2) * (m - 3) + (M - m) * (m - 1)) / ((M - 2) * (M - 3))
        a6 = p * (k - p) / 4
    else:
        a6 = 0.0
    return ExactWorMoments(
        quoted.a0, a0_off, quoted.a1, quoted.a2, quoted.a3, quoted.a4, a5, a6
    )


@dataclass
class WorBuildingBlocks:
    Z: np.ndarray
    B: np.ndarray
    C: np.ndarray
    F: np.ndarray
    G: np.ndarray
    S_delta: np.ndarray | None = None

    @property
    def total(self) -> np.ndarray:
        """Sum of S_delta over both sample indices."""
        return self.B.sum(axis=1)


def _z_matrix(V, U, X, Y, n):
    return n * (Y @ V - np.einsum("abi,b->ai", U, X))


def wor_building_blocks(V, U, X, Y, n, materialize: bool = False) -> WorBuildingBlocks:
    """Z, B, C, F, G for the WOR noise.

    By default S_delta is never allocated: B, C, F, G are contracted directly
    from U and V in O(M N^4).  ``materialize=True`` builds the N x M x M
    tensor and derives everything from it, which is what the tests compare to.
    """
    V = np.asarray(V, dtype=float)
    U = np.asarray(U, dtype=float)
    N, M = V.shape
    Z = _z_matrix(V, U, X, Y, n)
    if materialize:
        S = n**2 * np.einsum("abi,bj->aij", U, V)
        idx = np.arange(M)
        S[:, idx, idx] = 0.0
        B = S.sum(axis=1)
        C = S.sum(axis=2)
        F = np.einsum("aij,bij->ab", S, S)
        G = np.einsum("aij,bji->ab", S, S)
        return WorBuildingBlocks(Z, B, C, F, G, S)
    g = V.sum(axis=1)
    Usum = U.sum(axis=2)
    UV = np.einsum("abi,bi->ai", U, V)  # P_i V_i
    B = n**2 * (Usum @ V - UV)
    C = n**2 * (np.einsum("abi,b->ai", U, g) - UV)
    diag = np.einsum("ai,bi->ab", UV, UV)
    VVt = V @ V.T
    F = n**4 * (np.einsum("agi,gd,bdi->ab", U, VVt, U, optimize=True) - diag)
    W = np.einsum("gj,bdj->gbd", V, U)
    G = n**4 * (np.einsum("agi,gbd,di->ab", U, W, V, optimize=True) - diag)
    return WorBuildingBlocks(Z, B, C, F, G)


def _sym(A):
    return 0.5 * (A + A.T)


def diffusion_wor(V, U, X, Y, eta, m, M, variant="exact", H=None, D=None, blocks=None) -> np.ndarray:
    """Epoch-level diffusion matrix for WOR SGD.

    variant
        ``"exact"``: complete moment structure (matches enumeration).
        ``"full"``: the quoted closed form with the six quoted coefficients.
        ``"dominant"``: the single a2 B B^T term.
        ``"hdh"``: eta^2 n^3 / 12 * H D H, needing only the Hessian ``H`` and
        a WR diffusion matrix ``D`` (computed from V if not given).
    """
    n = _batch_count(m, M, need_integer=True)
    if variant == "hdh":
        if H is None:
            raise CapabilityError("hdh variant needs the Hessian H")
        if D is None:
            V = np.asarray(V, dtype=float)
            D = diffusion_wr(V, V.sum(axis=1), eta, m, M)
        return _sym(eta**2 * n**3 / 12 * H @ D @ H)
    if U is None:
        raise CapabilityError(f"variant {variant!r} needs per-sample Hessians")
    if m == M:
        return np.zeros((np.shape(V)[0],) * 2)
    bb = blocks if blocks is not None else wor_building_blocks(V, U, X, Y, n)
    Z, B, C, F, G = bb.Z, bb.B, bb.C, bb.F, bb.G
    if variant == "dominant":
        a2 = wor_coefficients(m, M).a2
        return _sym(0.5 * eta**4 * a2 * B @ B.T)
    if variant == "full":
        a = wor_coefficients(m, M)
        zz = a.a0 * Z @ Z.T
        a5 = a.a5
        distinct = 0.0
    elif variant == "exact":
        a = exact_wor_moments(m, M)
        z1 = Z.sum(axis=1)
        zz = (a.a0 - a.a0_off) * Z @ Z.T + a.a0_off * np.outer(z1, z1)
        a5 = a.a5
        s = bb.total
        BC = B + C
        distinct = a.a6 * (np.outer(s, s) - BC @ BC.T + F + G)
    else:
        raise InvalidArgument(f"unknown variant {variant!r}")
    BmC = B - C
    Dh = (
        zz
        + a.a1 * (Z @ BmC.T + BmC @ Z.T)
        + a.a2 * (B @ B.T + C @ C.T)
        + (a.a3 - 2 * a.a2) * F
        + (a.a4 - 2 * a5) * G
        + a5 * (B @ C.T + C @ B.T)
        + distinct
    )
    return _sym(0.5 * eta**4 * Dh)


def _delta_loss_value(bundle, eta, n, M) -> float:
    gL = bundle.data_grad
    g = bundle.grad
    VV = float(np.sum(bundle.V * bundle.V))
    tail = g @ g + (gL @ gL) / (M - 1) - M / (M - 1) * VV if M > 1 else g @ g
    return -eta * n * (n - 1) / 4 * float(tail)


def effective_loss_perturbation(model, data, theta, eta, m, want_gradient=True, method="auto"):
    """WOR landscape perturbation deltaL and optionally its gradient.

    The gradient is analytic when per-sample Hessians are available
    (``method="analytic"``) and otherwise central differences of deltaL.
    """
    M = data.M
    n = _batch_count(m, M, need_integer=True)
    theta = np.asarray(theta, dtype=float)
    b = models.evaluate(model, data, theta)
    dL = _delta_loss_value(b, eta, n, M)
    if not want_gradient:
        return dL, None
    if n == 1:
        return dL, np.zeros_like(theta)
    if method == "auto":
        method = "analytic" if model.per_sample_hessian else "fd"
    if method == "analytic":
        U = models.sample_hessians(model, data, theta)
        H = U.sum(axis=2) + b.Y
        HL = H - b.Y
        UV = np.einsum("gai,ai->g", U, b.V)
        tail = 2 * H @ b.grad + (2 * HL @ b.data_grad / (M - 1) - 2 * M / (M - 1) * UV if M > 1 else 0.0)
        return dL, -eta * n * (n - 1) / 4 * tail
    if method != "fd":
        raise InvalidArgument(f"unknown method {method!r}")
    grad = np.empty_like(theta)
    for a in range(theta.size):
        h = 1e-4 * max(1.0, abs(theta[a]))
        e = np.zeros_like(theta)
        e[a] = h
        up = _delta_loss_value(models.evaluate(model, data, theta + e), eta, n, M)
        dn = _delta_loss_value(models.evaluate(model, data, theta - e), eta, n, M)
        grad[a] = (up - dn) / (2 * h)
    return dL, grad


def wor_affine_correction(model, data, eta, m):
    """For the linearized model deltaL is quadratic, so its gradient is A theta + c."""
    if model.kind != "linearized-regression":
        raise CapabilityError("affine correction is exact only for the linearized model")
    N = model.N
    _, c = effective_loss_perturbation(model, data, np.zeros(N), eta, m)
    A = np.empty((N, N))
    for a in range(N):
        e = np.zeros(N)
        e[a] = 1.0
        A[:, a] = effective_loss_perturbation(model, data, e, eta, m)[1] - c
    return 0.5 * (A + A.T), c


# ---------------------------------------------------------------------------
# exhaustive-enumeration oracles

def oracle_wr(V, gradL, eta, m, M, max_subsets=100_000) -> np.ndarray:
    """<xi xi^T>/2 by averaging over every m-subset with equal weight."""
    V = np.asarray(V, dtype=float)
    N = V.shape[0]
    if m <= 0 or m > M:
        raise InvalidArgument(f"minibatch size m={m} must satisfy 1 <= m <= M={M}")
    count = math.comb(M, m)
    if count > max_subsets:
        raise OracleLimit(f"C({M},{m}) = {count} subsets exceeds {max_subsets}")
    per = M * V  # columns are d ell_i
    full = np.asarray(gradL, dtype=float)
    terms = [[] for _ in range(N * N)]
    for B in itertools.combinations(range(M), m):
        xi = eta * (full - per[:, B].mean(axis=1))
        outer = np.outer(xi, xi).ravel()
        for k in range(N * N):
            terms[k].append(outer[k])
    D = np.array([math.fsum(t) for t in terms]).reshape(N, N) / count / 2
    return D


def _epoch_batches(M, m):
    """Batch label of every sample, for every ordering of an epoch (as an array)."""
    perms = np.array(list(itertools.permutations(range(M))), dtype=np.int64)
    labels = np.empty_like(perms)
    rows = np.arange(perms.shape[0])[:, None]
    labels[rows, perms] = np.arange(M)[None, :] // m
    return labels


def oracle_wor_moments(M: int, m: int, max_M: int = 7) -> dict:
    """Moments of zeta and chi by enumerating every epoch ordering.

    Arithmetic is exact: zeta is scaled by 2 and chi by 2 (M - 1) so every
    sample value is an integer, and sums are accumulated in int64.
    Returns the enumerated moments, the quoted and the exact closed-form
    predictions of the same arrays, and the largest absolute deviation of each
    structure from each prediction.
    """
    if M > max_M:
        raise OracleLimit(f"M={M} needs {math.factorial(M)} orderings; limit is M <= {max_M}")
    n = _batch_count(m, M, need_integer=True)
    n = int(n)
    T = _epoch_batches(M, m)  # (P, M)
    P = T.shape[0]
    z2 = -(n - 1) + 2 * (n - 1 - T)  # 2 * zeta
    off = 1 - np.eye(M, dtype=np.int64)
    later = (T[:, :, None] > T[:, None, :]).astype(np.int64)
    c2 = -(M - m) * off[None] + 2 * (M - 1) * later  # 2 (M-1) * chi
    zs = 2
    cs = 2 * (M - 1)
    mean_z = z2.sum(axis=0) / (P * zs)
    mean_c = c2.sum(axis=0) / (P * cs)
    zz = np.einsum("pi,pj->ij", z2, z2) / (P * zs * zs)
    zc = np.einsum("pi,pjk->ijk", z2, c2) / (P * zs * cs)
    cf = c2.reshape(P, -1)
    cc = (cf.T @ cf).reshape(M, M, M, M) / (P * cs * cs)

    predicted = {
        "quoted": _moment_arrays(M, wor_coefficients(m, M), None),
        "exact": _moment_arrays(M, None, exact_wor_moments(m, M)),
    }
    enumerated = {"zeta": mean_z, "chi": mean_c, "zeta_zeta": zz, "zeta_chi": zc, "chi_chi": cc}
    deviation = {
        name: {k: float(np.max(np.abs(enumerated[k] - arrs[k]))) for k in arrs}
        for name, arrs in predicted.items()
    }
    return {"enumerated": enumerated, "predicted": predicted, "deviation": deviation,
            "coefficients": wor_coefficients(m, M), "exact": exact_wor_moments(m, M)}


def _moment_arrays(M, quoted: WorCoefficients | None, exact: ExactWorMoments | None) -> dict:
    d = np.eye(M)
    nd = 1 - d
    if exact is None:
        a0, a0_off, a1, a2, a3, a4, a5, a6 = (*quoted.as_tuple()[:1], 0.0, *quoted.as_tuple()[1:], 0.0)
    else:
        a0, a0_off, a1, a2, a3, a4, a5, a6 = (
            exact.a0, exact.a0_off, exact.a1, exact.a2, exact.a3, exact.a4, exact.a5, exact.a6)
    zz = a0 * d + a0_off * nd
    # a1 (1 - d_jk)(d_ik - d_ij)
    zc = a1 * nd[None, :, :] * (d[:, None, :] - d[:, :, None])
    I = d[:, None, :, None]  # d_ik
    J = d[None, :, None, :]  # d_jl
    L = d[:, None, None, :]  # d_il
    K = d[None, :, :, None]  # d_jk
    pair = nd[:, :, None, None] * nd[None, None, :, :]
    cc = pair * (
        a2 * (I * (1 - J) + J * (1 - I))
        + a3 * I * J
        + a4 * L * K
        + a5 * (L * (1 - K) + K * (1 - L))
        + a6 * (1 - I) * (1 - J) * (1 - L) * (1 - K)
    )
    return {"zeta": np.zeros(M), "chi": np.zeros((M, M)), "zeta_zeta": zz, "zeta_chi": zc, "chi_chi": cc}


def oracle_wor_diffusion(V, U, X, Y, eta, m, max_M: int = 7) -> np.ndarray:
    """<xi_hat xi_hat^T>/2 with xi_hat = eta^2 (Z zeta + S chi), averaged over all orderings."""
    V = np.asarray(V, dtype=float)
    N, M = V.shape
    if M > max_M:
        raise OracleLimit(f"M={M} exceeds enumeration limit {max_M}")
    n = int(_batch_count(m, M, need_integer=True))
    bb = wor_building_blocks(V, U, X, Y, n, materialize=True)
    T = _epoch_batches(M, m)
    zeta = -(n - 1) / 2 + (n - 1 - T)
    off = 1 - np.eye(M)
    chi = -(M - m) / (2 * (M - 1)) * off[None] + (T[:, :, None] > T[:, None, :])
    xi = eta**2 * (zeta @ bb.Z.T + np.einsum("aij,pij->pa", bb.S_delta, chi))
    return 0.5 * xi.T @ xi / xi.shape[0]
