"""Datasets and the three small networks, with exact loss derivatives.

Every model has a loss of the form

    Loss(theta) = (1/M) sum_i ell_i(theta) + lam * |theta|^2

with ell_i = s * |y_i - f(x_i; theta)|^2.  For the two regression networks
s = M / (2 eps^2); for the MNIST linear classifier s = 1.

Parameter ordering for the nonlinear regression network is
(w1, w2, b1, b2, v1, v2, c) with
f(x) = v1 tanh(w1 x + b1) + v2 tanh(w2 x + b2) + c.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapabilityError, FormatError, InconsistentData, InvalidArgument

KINDS = ("nonlinear-regression", "linearized-regression", "linear-classifier")

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

# Largest per-sample Hessian tensor (N*N*M entries) we are willing to build.
U_BUDGET = 50_000_000


@dataclass(frozen=True)
class Dataset:
    """M input/output pairs stored as (M, d_in) and (M, d_out) float arrays."""

    inputs: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=float)
        Y = np.asarray(self.outputs, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.ndim != 2 or Y.ndim != 2:
            raise InvalidArgument("inputs and outputs must be 1-D or 2-D arrays")
        if X.shape[0] != Y.shape[0]:
            raise InvalidArgument(f"{X.shape[0]} inputs but {Y.shape[0]} outputs")
        if X.shape[0] < 1:
            raise InvalidArgument("dataset must contain at least one pair")
        X.setflags(write=False)
        Y.setflags(write=False)
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "outputs", Y)

    @property
    def M(self) -> int:
        return self.inputs.shape[0]

    @property
    def d_in(self) -> int:
        return self.inputs.shape[1]

    @property
    def d_out(self) -> int:
        return self.outputs.shape[1]

    def to_csv(self, path) -> None:
        header = ",".join(
            [f"x{k}" for k in range(self.d_in)] + [f"y{k}" for k in range(self.d_out)]
        )
        table = np.hstack([self.inputs, self.outputs])
        np.savetxt(path, table, delimiter=",", header=header, comments="", fmt="%.17g")

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        d_in = sum(1 for h in header if h.startswith("x"))
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(table[:, :d_in], table[:, d_in:])


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    n_params: int
    eps: float = 0.1
    lam: float = 10.0
    per_sample_hessian: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgument(f"unknown model kind {self.kind!r}")
        if self.lam < 0:
            raise InvalidArgument("lam must be >= 0")
        if self.eps <= 0:
            raise InvalidArgument("eps must be > 0")
        expected = {"nonlinear-regression": 7, "linearized-regression": 3}.get(self.kind)
        if expected is not None and self.n_params != expected:
            raise InvalidArgument(f"{self.kind} has {expected} parameters, got {self.n_params}")

    @property
    def N(self) -> int:
        return self.n_params

    def sample_scale(self, M: int) -> float:
        """Prefactor s in ell_i = s |y_i - f_i|^2."""
        if self.kind == "linear-classifier":
            return 1.0
        return M / (2.0 * self.eps**2)


def nonlinear_regression(eps=0.1, lam=10.0) -> ModelSpec:
    return ModelSpec("nonlinear-regression", 7, eps, lam, True)


def linearized_regression(eps=0.1, lam=10.0) -> ModelSpec:
    return ModelSpec("linearized-regression", 3, eps, lam, True)


def linear_classifier(d_in=49, d_out=10, lam=1e-2, M=None) -> ModelSpec:
    N = d_in * d_out
    capable = M is not None and N * N * M <= U_BUDGET
    return ModelSpec("linear-classifier", N, 1.0, lam, capable)


@dataclass
class DerivativeBundle:
    loss: float
    grad: np.ndarray
    V: np.ndarray | None
    X: np.ndarray
    Y: np.ndarray
    data_loss: float = 0.0
    data_grad: np.ndarray | None = field(default=None, repr=False)


@dataclass
class SecondOrderBundle:
    H: np.ndarray
    U: np.ndarray | None = None


# ---------------------------------------------------------------------------
# datasets

def gen_regression_dataset(M: int, eps: float, seed: int) -> Dataset:
    """Noisy samples of exp(-x^2) on the grid x_i = -3 + 0.03 (i - 1)."""
    if M <= 0:
        raise InvalidArgument("M must be positive")
    if eps < 0:
        raise InvalidArgument("eps must be non-negative")
    x = -3.0 + 0.03 * np.arange(M)
    rng = np.random.default_rng(seed)
    y = np.exp(-x**2) + eps * rng.standard_normal(M)
    return Dataset(x[:, None], y[:, None])


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx_images(path) -> np.ndarray:
    with _open(path) as fh:
        head = fh.read(16)
        if len(head) < 16:
            raise FormatError(f"{path}: truncated header")
        magic, count, rows, cols = struct.unpack(">IIII", head)
        if magic != IMAGES_MAGIC:
            raise FormatError(f"{path}: bad image magic 0x{magic:08x}")
        raw = fh.read()
    if len(raw) != count * rows * cols:
        raise FormatError(f"{path}: expected {count * rows * cols} pixel bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    with _open(path) as fh:
        head = fh.read(8)
        if len(head) < 8:
            raise FormatError(f"{path}: truncated header")
        magic, count = struct.unpack(">II", head)
        if magic != LABELS_MAGIC:
            raise FormatError(f"{path}: bad label magic 0x{magic:08x}")
        raw = fh.read()
    if len(raw) != count:
        raise FormatError(f"{path}: expected {count} labels, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).copy()


def pool_images(images: np.ndarray, block: int = 4) -> np.ndarray:
    """Non-overlapping block average, returned flattened and scaled to [0, 1]."""
    count, rows, cols = images.shape
    if rows % block or cols % block:
        raise InvalidArgument(f"{rows}x{cols} image not divisible into {block}x{block} blocks")
    pooled = images.astype(float).reshape(count, rows // block, block, cols // block, block)
    return pooled.mean(axis=(2, 4)).reshape(count, -1) / 255.0


def one_hot(labels: np.ndarray, classes: int = 10) -> np.ndarray:
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def load_mnist(images_path, labels_path) -> Dataset:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise InconsistentData(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if images.shape[1:] != (28, 28):
        raise FormatError(f"expected 28x28 images, got {images.shape[1:]}")
    if labels.size and labels.max() > 9:
        raise InconsistentData("label outside 0..9")
    return Dataset(pool_images(images, 4), one_hot(labels, 10))


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray, magic: int = LABELS_MAGIC) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", magic, labels.shape[0]))
        fh.write(labels.tobytes())


# ---------------------------------------------------------------------------
# network functions

def psi(x: np.ndarray) -> np.ndarray:
    """Fixed features of the linearized network, shape (len(x), 3)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    return np.stack([np.tanh(0.5 - x), np.tanh(0.5 + x), np.ones_like(x)], axis=1)


def predict(model: ModelSpec, inputs: np.ndarray, theta: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=float)
    if model.kind == "nonlinear-regression":
        x = inputs.reshape(-1)
        w1, w2, b1, b2, v1, v2, c = theta
        f = v1 * np.tanh(w1 * x + b1) + v2 * np.tanh(w2 * x + b2) + c
        return f[:, None]
    if model.kind == "linearized-regression":
        return (psi(inputs) @ theta)[:, None]
    W = theta.reshape(-1, inputs.shape[1])
    return inputs @ W.T


def _jacobian_scalar(model: ModelSpec, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """df/dtheta for the scalar-output regression networks, shape (M, N)."""
    if model.kind == "linearized-regression":
        return psi(x)
    w1, w2, b1, b2, v1, v2, c = theta
    a = np.tanh(w1 * x + b1)
    b = np.tanh(w2 * x + b2)
    da = 1.0 - a * a
    db = 1.0 - b * b
    return np.stack(
        [v1 * da * x, v2 * db * x, v1 * da, v2 * db, a, b, np.ones_like(x)], axis=1
    )


def _f_hessians_nonlinear(x: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Second derivatives of f for the nonlinear network, shape (M, 7, 7)."""
    w1, w2, b1, b2, v1, v2, c = theta
    out = np.zeros((x.size, 7, 7))
    # hidden unit k: weight index, bias index, output-weight index
    for (wi, bi, vi), w, b, v in (((0, 2, 4), w1, b1, v1), ((1, 3, 5), w2, b2, v2)):
        a = np.tanh(w * x + b)
        da = 1.0 - a * a
        dda = -2.0 * a * da
        out[:, wi, wi] = v * dda * x * x
        out[:, wi, bi] = out[:, bi, wi] = v * dda * x
        out[:, bi, bi] = v * dda
        out[:, wi, vi] = out[:, vi, wi] = da * x
        out[:, bi, vi] = out[:, vi, bi] = da
    return out


def _check_theta(model: ModelSpec, data: Dataset, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (model.N,):
        raise InvalidArgument(f"theta has shape {theta.shape}, model expects ({model.N},)")
    if model.kind == "linear-classifier" and model.N != data.d_in * data.d_out:
        raise InvalidArgument("classifier size does not match dataset dimensions")
    if model.kind != "linear-classifier" and (data.d_in != 1 or data.d_out != 1):
        raise InvalidArgument("regression models need scalar inputs and outputs")
    return theta


def _check_batch(batch, M: int) -> np.ndarray:
    idx = np.asarray(batch, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise InvalidArgument("empty batch")
    if idx.min() < 0 or idx.max() >= M:
        raise InvalidArgument("batch index out of range")
    if np.unique(idx).size != idx.size:
        raise InvalidArgument("duplicate batch indices")
    return idx


def sample_gradients(model: ModelSpec, data: Dataset, theta, idx=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample gradients d ell_i / d theta (rows) and residuals y_i - f_i."""
    inputs = data.inputs if idx is None else data.inputs[idx]
    outputs = data.outputs if idx is None else data.outputs[idx]
    s = model.sample_scale(data.M)
    r = outputs - predict(model, inputs, theta)
    if model.kind == "linear-classifier":
        # d ell / d W_ok = -2 r_o x_k, flattened row-major like theta
        G = (-2.0 * r[:, :, None] * inputs[:, None, :]).reshape(len(r), -1)
    else:
        J = _jacobian_scalar(model, inputs.reshape(-1), theta)
        G = -2.0 * s * r * J
    return G, r


def evaluate(model: ModelSpec, data: Dataset, theta, batch=None, want_V: bool = True) -> DerivativeBundle:
    """Loss, gradient and per-sample gradient matrix.

    Without ``batch`` the loss and gradient are those of the full objective.
    With a batch they are of L_B + R where L_B averages ell_i over the batch.
    ``V`` (N x M, V[a, i] = d_a ell_i / M) always covers the whole dataset.
    """
    theta = _check_theta(model, data, theta)
    M = data.M
    s = model.sample_scale(M)
    Xreg = 2.0 * model.lam * theta
    Yreg = 2.0 * model.lam * np.eye(model.N)
    R = model.lam * float(theta @ theta)

    V = None
    data_loss = None
    data_grad = None
    if want_V or batch is None:
        G, r = sample_gradients(model, data, theta)
        V = G.T / M
        data_loss = s * float(np.sum(r * r)) / M
        data_grad = V.sum(axis=1)
    if batch is None:
        loss_part, grad_part = data_loss, data_grad
    else:
        idx = _check_batch(batch, M)
        Gb, rb = sample_gradients(model, data, theta, idx)
        loss_part = s * float(np.sum(rb * rb)) / idx.size
        grad_part = Gb.mean(axis=0)
    return DerivativeBundle(
        loss=loss_part + R,
        grad=grad_part + Xreg,
        V=V if want_V else None,
        X=Xreg,
        Y=Yreg,
        data_loss=data_loss if data_loss is not None else float("nan"),
        data_grad=data_grad,
    )


def loss(model: ModelSpec, data: Dataset, theta) -> float:
    theta = np.asarray(theta, dtype=float)
    r = data.outputs - predict(model, data.inputs, theta)
    return model.sample_scale(data.M) * float(np.sum(r * r)) / data.M + model.lam * float(theta @ theta)


def gradient(model: ModelSpec, data: Dataset, theta) -> np.ndarray:
    return evaluate(model, data, theta, want_V=False).grad


def batch_gradient(model: ModelSpec, data: Dataset, theta, idx) -> np.ndarray:
    """Gradient of L_B + R without any validation; the engines' hot path."""
    G, _ = sample_gradients(model, data, theta, idx)
    return G.mean(axis=0) + 2.0 * model.lam * theta


def sample_hessians(model: ModelSpec, data: Dataset, theta) -> np.ndarray:
    """U tensor with U[b, a, i] = d_b d_a ell_i / M, shape (N, N, M)."""
    theta = _check_theta(model, data, theta)
    M, N = data.M, model.N
    if not model.per_sample_hessian or N * N * M > U_BUDGET:
        raise CapabilityError(
            f"per-sample Hessians need {N * N * M} entries; use the H D H approximation instead"
        )
    s = model.sample_scale(M)
    if model.kind == "linear-classifier":
        d_out, d_in = data.d_out, data.d_in
        U = np.zeros((N, N, M))
        for o in range(d_out):
            block = slice(o * d_in, (o + 1) * d_in)
            U[block, block, :] = 2.0 * np.einsum("ik,il->kli", data.inputs, data.inputs) / M
        return U
    x = data.inputs.reshape(-1)
    J = _jacobian_scalar(model, x, theta)
    per = 2.0 * s * np.einsum("ia,ib->iab", J, J)
    if model.kind == "nonlinear-regression":
        r = (data.outputs - predict(model, data.inputs, theta)).reshape(-1)
        per -= 2.0 * s * r[:, None, None] * _f_hessians_nonlinear(x, theta)
    return np.transpose(per, (1, 2, 0)) / M


def data_hessian(model: ModelSpec, data: Dataset, theta) -> np.ndarray:
    """Hessian of the data term L alone (no regularizer)."""
    theta = np.asarray(theta, dtype=float)
    M = data.M
    if model.kind == "linear-classifier":
        gram = 2.0 * data.inputs.T @ data.inputs / M
        return np.kron(np.eye(data.d_out), gram)
    s = model.sample_scale(M)
    x = data.inputs.reshape(-1)
    J = _jacobian_scalar(model, x, theta)
    H = 2.0 * s * J.T @ J / M
    if model.kind == "nonlinear-regression":
        r = (data.outputs - predict(model, data.inputs, theta)).reshape(-1)
        H -= 2.0 * s * np.einsum("i,iab->ab", r, _f_hessians_nonlinear(x, theta)) / M
    return 0.5 * (H + H.T)


def second_order(model: ModelSpec, data: Dataset, theta, want_U: bool = False) -> SecondOrderBundle:
    theta = _check_theta(model, data, theta)
    H = data_hessian(model, data, theta) + 2.0 * model.lam * np.eye(model.N)
    U = sample_hessians(model, data, theta) if want_U else None
    return SecondOrderBundle(H=H, U=U)


def fd_hessian(model: ModelSpec, data: Dataset, theta) -> np.ndarray:
    """Central differences of the analytic gradient, symmetrized."""
    theta = np.asarray(theta, dtype=float)
    N = theta.size
    H = np.empty((N, N))
    for a in range(N):
        h = 1e-5 * max(1.0, abs(theta[a]))
        e = np.zeros(N)
        e[a] = h
        H[a] = (gradient(model, data, theta + e) - gradient(model, data, theta - e)) / (2 * h)
    return 0.5 * (H + H.T)
