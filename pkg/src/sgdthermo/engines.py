"""Training dynamics: GD, SGD with and without replacement, earthquake, SGLD, SGWORLD.

Every run draws its randomness in fixed-size chunks from a PCG64 stream seeded
by SeedSequence([seed, run_index]): first the batch-selection uniforms, then
the Gaussian normals.  The numba kernels used for the two regression models
and the generic numpy path consume those chunks identically, so the two
backends see the same batches and noise.

Batch indices are 0-based.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numba
import numpy as np

from . import diffusion, models
from .errors import CapabilityError, Diverged, InvalidArgument

MODES = ("gd", "sgd-wr", "sgd-wor", "earthquake", "sgld", "sgworld")
WOR_MODES = ("sgd-wor", "sgworld")
DEFAULT_CHUNK = 65536


@dataclass(frozen=True)
class EngineConfig:
    mode: str
    eta: float
    m: int = 1
    steps: int = 1000
    seed: int = 0
    zeta: float = 0.0
    thinning: int = 1  # steps for WR modes, epochs for WOR modes
    run_index: int = 0
    bound: float = 1e6
    inject_noise: bool = True
    correction: bool = True
    record_inner: bool = False
    backend: str = "auto"
    chunk: int = DEFAULT_CHUNK

    def validate(self, M: int) -> "EngineConfig":
        if self.mode not in MODES:
            raise InvalidArgument(f"unknown mode {self.mode!r}")
        if not self.eta > 0:
            raise InvalidArgument("eta must be > 0")
        m = M if self.mode in ("gd", "earthquake") else self.m
        if not 1 <= m <= M:
            raise InvalidArgument(f"minibatch size m={m} must satisfy 1 <= m <= M={M}")
        if self.mode in WOR_MODES:
            if M % m:
                raise InvalidArgument(f"M={M} is not a multiple of m={m}")
            if self.steps % (M // m):
                raise InvalidArgument(f"steps={self.steps} is not a whole number of epochs of {M // m} steps")
        if self.steps < 0 or self.thinning < 1 or self.chunk < 1:
            raise InvalidArgument("steps >= 0, thinning >= 1 and chunk >= 1 are required")
        if self.zeta < 0:
            raise InvalidArgument("zeta must be >= 0")
        if self.backend not in ("auto", "numba", "numpy"):
            raise InvalidArgument(f"unknown backend {self.backend!r}")
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class Trajectory:
    steps: np.ndarray
    thetas: np.ndarray
    config: EngineConfig
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.int64)
        self.thetas = np.asarray(self.thetas, dtype=float)
        if self.thetas.ndim != 2 or self.thetas.shape[0] != self.steps.size:
            raise InvalidArgument("steps and thetas disagree in length")
        if self.steps.size > 1 and np.any(np.diff(self.steps) <= 0):
            raise InvalidArgument("record steps must be strictly increasing")

    @property
    def theta_final(self) -> np.ndarray:
        return self.thetas[-1]

    @property
    def N(self) -> int:
        return self.thetas.shape[1]

    def __len__(self):
        return self.steps.size

    # binary layout: magic, N (u64), record count (u64), json length (u64),
    # config json, then per record the step and theta as little-endian float64
    _MAGIC = b"SGDTRJ01"

    def to_binary(self, path) -> None:
        cfg = json.dumps({"config": asdict(self.config), "meta": self.meta}, sort_keys=True).encode()
        body = np.column_stack([self.steps.astype("<f8"), self.thetas]).astype("<f8")
        with open(path, "wb") as fh:
            fh.write(self._MAGIC)
            fh.write(struct.pack("<QQQ", self.N, len(self), len(cfg)))
            fh.write(cfg)
            fh.write(body.tobytes())

    @classmethod
    def from_binary(cls, path) -> "Trajectory":
        from .errors import FormatError

        with open(path, "rb") as fh:
            if fh.read(8) != cls._MAGIC:
                raise FormatError("not a trajectory file")
            N, K, L = struct.unpack("<QQQ", fh.read(24))
            head = json.loads(fh.read(L))
            body = np.frombuffer(fh.read(), dtype="<f8")
        if body.size != K * (N + 1):
            raise FormatError("trajectory body has the wrong size")
        body = body.reshape(K, N + 1)
        return cls(body[:, 0].astype(np.int64), body[:, 1:].copy(), EngineConfig(**head["config"]), head["meta"])

    def to_csv(self, path) -> None:
        header = "step," + ",".join(f"theta{a}" for a in range(self.N))
        body = np.column_stack([self.steps, self.thetas])
        fmt = ["%d"] + ["%.17g"] * self.N
        np.savetxt(path, body, delimiter=",", header=header, comments="", fmt=fmt)

    @classmethod
    def from_csv(cls, path, config: EngineConfig) -> "Trajectory":
        body = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(body[:, 0].astype(np.int64), body[:, 1:], config)


# ---------------------------------------------------------------------------
# samplers

@numba.njit(cache=True)
def _partial_shuffle(perm, u):
    """Fisher-Yates on the first len(u) slots; perm[:len(u)] is then a uniform subset."""
    M = perm.size
    for j in range(u.size):
        k = j + int(u[j] * (M - j))
        if k > M - 1:
            k = M - 1
        t = perm[j]
        perm[j] = perm[k]
        perm[k] = t


@numba.njit(cache=True)
def _full_shuffle(perm, u):
    """Fisher-Yates with M - 1 uniforms."""
    M = perm.size
    for q in range(M - 1):
        i = M - 1 - q
        k = int(u[q] * (i + 1))
        if k > i:
            k = i
        t = perm[i]
        perm[i] = perm[k]
        perm[k] = t


def make_rng(seed: int, run_index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(run_index)])))


def sample_wr_batch(M: int, m: int, rng) -> np.ndarray:
    """Uniformly random m-subset of range(M)."""
    if not 1 <= m <= M:
        raise InvalidArgument(f"minibatch size m={m} must satisfy 1 <= m <= M={M}")
    perm = np.arange(M, dtype=np.int64)
    _partial_shuffle(perm, rng.random(m))
    return perm[:m].copy()


def sample_wor_epoch(M: int, m: int, rng) -> np.ndarray:
    """A random permutation of range(M) cut into n = M/m rows of m indices."""
    if m < 1 or m > M or M % m:
        raise InvalidArgument(f"M={M} must be a positive multiple of m={m}")
    perm = np.arange(M, dtype=np.int64)
    if M > 1:
        _full_shuffle(perm, rng.random(M - 1))
    return perm.reshape(M // m, m)


# ---------------------------------------------------------------------------
# numba kernels for the two scalar regression networks

_KIND_CODES = {"nonlinear-regression": 0, "linearized-regression": 1}


@numba.njit(cache=True)
def _grad_batch(kind, th, x, y, idx, cnt, scale2, lam, shift, g, t):
    """Gradient of L_B + R at th + shift, with L_B averaging over idx[:cnt]; t is scratch."""
    N = th.size
    for a in range(N):
        g[a] = 0.0
        t[a] = th[a] + shift[a]
    for q in range(cnt):
        i = idx[q]
        xi = x[i]
        if kind == 0:
            a1 = np.tanh(t[0] * xi + t[2])
            a2 = np.tanh(t[1] * xi + t[3])
            c = -scale2 * (y[i] - (t[4] * a1 + t[5] * a2 + t[6]))
            d1 = t[4] * (1.0 - a1 * a1)
            d2 = t[5] * (1.0 - a2 * a2)
            g[0] += c * d1 * xi
            g[1] += c * d2 * xi
            g[2] += c * d1
            g[3] += c * d2
            g[4] += c * a1
            g[5] += c * a2
            g[6] += c
        else:
            p0 = np.tanh(0.5 - xi)
            p1 = np.tanh(0.5 + xi)
            c = -scale2 * (y[i] - (t[0] * p0 + t[1] * p1 + t[2]))
            g[0] += c * p0
            g[1] += c * p1
            g[2] += c
    for a in range(N):
        g[a] = g[a] / cnt + 2.0 * lam * t[a]


@numba.njit(cache=True)
def _bad(th, bound):
    for a in range(th.size):
        v = th[a]
        if not (abs(v) <= bound):
            return True
    return False


@numba.njit(cache=True)
def _kernel_wr(kind, th, x, y, scale2, lam, eta, m, perm, unif, normals, noise, nsteps,
               shuffle, quake, zeta, rec_every, t0, rec_steps, rec_theta, bound):
    """WR-style steps: gd, sgd-wr, sgld and earthquake.  Returns (records, diverged step or -1)."""
    N = th.size
    g = np.empty(N)
    scratch = np.empty(N)
    shift = np.zeros(N)
    nrec = 0
    for k in range(nsteps):
        if shuffle:
            _partial_shuffle(perm, unif[k])
        if quake:
            for a in range(N):
                shift[a] = zeta * normals[k, a]
        _grad_batch(kind, th, x, y, perm, m, scale2, lam, shift, g, scratch)
        for a in range(N):
            th[a] -= eta * g[a]
        if noise > 0.0:
            for a in range(N):
                th[a] += noise * normals[k, a]
        t = t0 + k + 1
        if _bad(th, bound):
            return nrec, t
        if t % rec_every == 0:
            rec_steps[nrec] = t
            rec_theta[nrec, :] = th
            nrec += 1
    return nrec, -1


@numba.njit(cache=True)
def _kernel_wor(kind, th, x, y, scale2, lam, eta, m, perm, unif, normals, noise, nepochs,
                corr_A, corr_b, use_corr, rec_every, inner, e0, n, rec_steps, rec_theta, bound):
    """WOR epochs for sgd-wor and sgworld.  Returns (records, diverged step or -1)."""
    N = th.size
    M = perm.size
    g = np.empty(N)
    scratch = np.empty(N)
    shift = np.zeros(N)
    start = np.empty(N)
    batch = np.empty(m, dtype=np.int64)
    nrec = 0
    for e in range(nepochs):
        if n > 1:  # a single batch holds every sample in any order
            _full_shuffle(perm, unif[e])
        for a in range(N):
            start[a] = th[a]
        for j in range(n):
            for q in range(m):
                batch[q] = perm[j * m + q]
            _grad_batch(kind, th, x, y, batch, m, scale2, lam, shift, g, scratch)
            for a in range(N):
                th[a] -= eta * g[a]
            t = (e0 + e) * n + j + 1
            if _bad(th, bound):
                return nrec, t
            if inner and j < n - 1:
                rec_steps[nrec] = t
                rec_theta[nrec, :] = th
                nrec += 1
        if noise > 0.0:
            for a in range(N):
                th[a] += noise * normals[e, a]
        if use_corr:
            for a in range(N):
                acc = corr_b[a]
                for b in range(N):
                    acc += corr_A[a, b] * start[b]
                th[a] += eta * acc
        t = (e0 + e + 1) * n
        if _bad(th, bound):
            return nrec, t
        if inner or (e0 + e + 1) % rec_every == 0:
            rec_steps[nrec] = t
            rec_theta[nrec, :] = th
            nrec += 1
    return nrec, -1


# ---------------------------------------------------------------------------
# drivers

def _use_numba(model, cfg: EngineConfig, affine_ok: bool) -> bool:
    fast = model.kind in _KIND_CODES and affine_ok
    if cfg.backend == "numba":
        if not fast:
            raise CapabilityError(f"no numba kernel for {model.kind} in mode {cfg.mode}")
        return True
    return fast if cfg.backend == "auto" else False


def _numpy_grad(model, data, theta, idx):
    if idx is None:
        return models.gradient(model, data, theta)
    return models.batch_gradient(model, data, theta, idx)


def stream(model, data, theta_init, config: EngineConfig):
    """Yield (steps, thetas) record blocks; the first block holds the initial state at step 0.

    Raises Diverged as soon as ||theta||_inf exceeds ``config.bound``.
    """
    cfg = config.validate(data.M)
    theta = np.array(theta_init, dtype=float)
    if theta.shape != (model.N,):
        raise InvalidArgument(f"theta has shape {theta.shape}, model expects ({model.N},)")
    M, N = data.M, model.N
    rng = make_rng(cfg.seed, cfg.run_index)
    yield np.zeros(1, dtype=np.int64), theta[None, :].copy()
    if cfg.mode in WOR_MODES:
        yield from _stream_wor(model, data, theta, cfg, rng)
        return
    m = M if cfg.mode in ("gd", "earthquake") else cfg.m
    shuffle = cfg.mode in ("sgd-wr", "sgld") and m < M
    quake = cfg.mode == "earthquake"
    noise = np.sqrt(2 * cfg.eta) if cfg.mode == "sgld" and cfg.inject_noise else 0.0
    perm = np.arange(M, dtype=np.int64)
    fast = _use_numba(model, cfg, True)
    if fast:
        x = np.ascontiguousarray(data.inputs[:, 0])
        y = np.ascontiguousarray(data.outputs[:, 0])
        scale2 = 2.0 * model.sample_scale(M)
        kind = _KIND_CODES[model.kind]
    done = 0
    while done < cfg.steps:
        c = min(cfg.chunk, cfg.steps - done)
        unif = rng.random((c, m)) if shuffle else np.empty((c, 0))
        normals = rng.standard_normal((c, N)) if (noise > 0 or quake) else np.empty((c, 0))
        cap = c // cfg.thinning + 1
        rs = np.empty(cap, dtype=np.int64)
        rt = np.empty((cap, N))
        if fast:
            nrec, bad = _kernel_wr(kind, theta, x, y, scale2, model.lam, cfg.eta, m, perm, unif, normals,
                                   noise, c, shuffle, quake, cfg.zeta, cfg.thinning, done, rs, rt, cfg.bound)
        else:
            nrec, bad = _numpy_wr(model, data, theta, cfg, m, perm, unif, normals, noise, c,
                                  shuffle, quake, done, rs, rt)
        yield rs[:nrec], rt[:nrec]
        if bad >= 0:
            raise Diverged(f"||theta||_inf exceeded {cfg.bound:g} at step {bad}")
        done += c


def _numpy_wr(model, data, theta, cfg, m, perm, unif, normals, noise, c, shuffle, quake, t0, rs, rt):
    nrec = 0
    full = m == data.M and not shuffle
    for k in range(c):
        if shuffle:
            _partial_shuffle(perm, unif[k])
        point = theta + cfg.zeta * normals[k] if quake else theta
        g = _numpy_grad(model, data, point, None if full else perm[:m])
        theta -= cfg.eta * g
        if noise > 0:
            theta += noise * normals[k]
        t = t0 + k + 1
        if not np.all(np.abs(theta) <= cfg.bound):
            return nrec, t
        if t % cfg.thinning == 0:
            rs[nrec] = t
            rt[nrec] = theta
            nrec += 1
    return nrec, -1


def _stream_wor(model, data, theta, cfg, rng):
    M, N, m = data.M, model.N, cfg.m
    n = M // m
    epochs = cfg.steps // n
    sgworld = cfg.mode == "sgworld"
    noise = np.sqrt(2 * cfg.eta * n) if sgworld and cfg.inject_noise else 0.0
    use_corr = sgworld and cfg.correction and n > 1
    affine = use_corr and model.kind == "linearized-regression"
    A = np.zeros((N, N))
    b = np.zeros(N)
    if affine:
        A, b = diffusion.wor_affine_correction(model, data, cfg.eta, m)
    fast = _use_numba(model, cfg, affine or not use_corr)
    perm = np.arange(M, dtype=np.int64)
    if fast:
        x = np.ascontiguousarray(data.inputs[:, 0])
        y = np.ascontiguousarray(data.outputs[:, 0])
        scale2 = 2.0 * model.sample_scale(M)
        kind = _KIND_CODES[model.kind]
    per_chunk = max(1, cfg.chunk // n)
    done = 0
    while done < epochs:
        ce = min(per_chunk, epochs - done)
        unif = rng.random((ce, M - 1))
        normals = rng.standard_normal((ce, N)) if noise > 0 else np.empty((ce, 0))
        cap = ce * n if cfg.record_inner else ce // cfg.thinning + 1
        rs = np.empty(cap, dtype=np.int64)
        rt = np.empty((cap, N))
        if fast:
            nrec, bad = _kernel_wor(kind, theta, x, y, scale2, model.lam, cfg.eta, m, perm, unif, normals, noise,
                                    ce, A, b, affine, cfg.thinning, cfg.record_inner, done, n, rs, rt, cfg.bound)
        else:
            nrec, bad = _numpy_wor(model, data, theta, cfg, perm, unif, normals, noise, ce,
                                   use_corr, A if affine else None, b, done, n, rs, rt)
        yield rs[:nrec], rt[:nrec]
        if bad >= 0:
            raise Diverged(f"||theta||_inf exceeded {cfg.bound:g} at step {bad}")
        done += ce


def _numpy_wor(model, data, theta, cfg, perm, unif, normals, noise, ce, use_corr, A, b, e0, n, rs, rt):
    m = cfg.m
    nrec = 0
    for e in range(ce):
        if n > 1:
            _full_shuffle(perm, unif[e])
        start = theta.copy()
        for j in range(n):
            idx = perm[j * m:(j + 1) * m]
            theta -= cfg.eta * _numpy_grad(model, data, theta, None if m == data.M else idx)
            t = (e0 + e) * n + j + 1
            if not np.all(np.abs(theta) <= cfg.bound):
                return nrec, t
            if cfg.record_inner and j < n - 1:
                rs[nrec] = t
                rt[nrec] = theta
                nrec += 1
        if noise > 0:
            theta += noise * normals[e]
        if use_corr:
            if A is not None:
                grad = A @ start + b
            else:
                grad = diffusion.effective_loss_perturbation(model, data, start, cfg.eta, m)[1]
            theta += cfg.eta * grad
        t = (e0 + e + 1) * n
        if not np.all(np.abs(theta) <= cfg.bound):
            return nrec, t
        if cfg.record_inner or (e0 + e + 1) % cfg.thinning == 0:
            rs[nrec] = t
            rt[nrec] = theta
            nrec += 1
    return nrec, -1


def run(model, data, theta_init, config: EngineConfig) -> Trajectory:
    blocks = list(stream(model, data, theta_init, config))
    steps = np.concatenate([s for s, _ in blocks])
    thetas = np.concatenate([t for _, t in blocks])
    return Trajectory(steps, thetas, config)


def _require(config, allowed):
    if config.mode not in allowed:
        raise InvalidArgument(f"mode {config.mode!r} not handled here; expected one of {allowed}")


def run_sgd(model, data, theta_init, config: EngineConfig) -> Trajectory:
    _require(config, ("gd", "sgd-wr", "sgd-wor"))
    return run(model, data, theta_init, config)


def run_earthquake(model, data, theta_init, config: EngineConfig) -> Trajectory:
    _require(config, ("earthquake",))
    return run(model, data, theta_init, config)


def run_sgld(model, data, theta_init, config: EngineConfig) -> Trajectory:
    _require(config, ("sgld",))
    return run(model, data, theta_init, config)


def run_sgworld(model, data, theta_init, config: EngineConfig) -> Trajectory:
    _require(config, ("sgworld",))
    return run(model, data, theta_init, config)


def with_run(config: EngineConfig, run_index: int) -> EngineConfig:
    return replace(config, run_index=run_index)
