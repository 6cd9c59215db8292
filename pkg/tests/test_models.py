import gzip

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sgdthermo import models
from sgdthermo.errors import CapabilityError, FormatError, InconsistentData, InvalidArgument

thetas7 = st.lists(st.floats(-2, 2), min_size=7, max_size=7).map(np.array)
batches = st.lists(st.integers(0, 19), min_size=1, max_size=20, unique=True)


def _central_grad(model, data, theta, h=1e-6):
    g = np.empty(theta.size)
    for a in range(theta.size):
        e = np.zeros(theta.size)
        e[a] = h * max(1.0, abs(theta[a]))
        g[a] = (models.loss(model, data, theta + e) - models.loss(model, data, theta - e)) / (2 * e[a])
    return g


def test_dataset_is_deterministic_per_seed():
    a = models.gen_regression_dataset(50, 0.1, 7)
    b = models.gen_regression_dataset(50, 0.1, 7)
    c = models.gen_regression_dataset(50, 0.1, 8)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.outputs, b.outputs)
    assert not np.array_equal(a.outputs, c.outputs)
    assert a.M == 50 and a.d_in == 1 and a.d_out == 1


def test_dataset_csv_round_trip(tmp_path):
    d = models.gen_regression_dataset(30, 0.1, 2)
    d.to_csv(tmp_path / "d.csv")
    back = models.Dataset.from_csv(tmp_path / "d.csv")
    assert np.array_equal(back.inputs, d.inputs)
    assert np.array_equal(back.outputs, d.outputs)


def test_dataset_rejects_mismatched_lengths():
    with pytest.raises(InvalidArgument):
        models.Dataset(np.zeros(3), np.zeros(4))


def test_nonlinear_prediction_form():
    th = np.array([0.5, -1.0, 0.2, 0.3, 2.0, -0.5, 0.1])
    x = np.array([[0.7]])
    want = 2.0 * np.tanh(0.5 * 0.7 + 0.2) - 0.5 * np.tanh(-0.7 + 0.3) + 0.1
    assert models.predict(models.nonlinear_regression(), x, th)[0, 0] == pytest.approx(want, rel=1e-15)


def test_linearized_basis_prediction():
    th = np.array([1.0, 2.0, 3.0])
    x = np.array([[0.4]])
    want = float(th @ models.psi(np.array([0.4])).reshape(-1))
    assert models.predict(models.linearized_regression(), x, th)[0, 0] == pytest.approx(want)


@given(thetas7)
def test_nonlinear_gradient_matches_central_differences(th):
    data = models.gen_regression_dataset(20, 0.1, 3)
    model = models.nonlinear_regression()
    g = models.gradient(model, data, th)
    fd = _central_grad(model, data, th)
    assert np.max(np.abs(g - fd)) <= 1e-6 * max(1.0, np.max(np.abs(fd)))


@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3).map(np.array))
def test_linearized_gradient_and_hessian(th):
    data = models.gen_regression_dataset(20, 0.1, 3)
    model = models.linearized_regression()
    fd = _central_grad(model, data, th)
    g = models.gradient(model, data, th)
    assert np.max(np.abs(g - fd)) <= 1e-6 * max(1.0, np.max(np.abs(fd)))
    H = models.second_order(model, data, th).H
    assert np.allclose(H, models.fd_hessian(model, data, th), rtol=1e-6, atol=1e-6 * np.abs(H).max())


@given(thetas7)
def test_hessian_matches_fd_and_sums_per_sample_terms(th):
    data = models.gen_regression_dataset(20, 0.1, 3)
    model = models.nonlinear_regression()
    so = models.second_order(model, data, th, want_U=True)
    scale = np.abs(so.H).max()
    assert np.max(np.abs(so.H - models.fd_hessian(model, data, th))) <= 1e-5 * scale
    assert np.allclose(so.U.sum(axis=2) + 2 * model.lam * np.eye(7), so.H, atol=1e-10 * scale)


@given(thetas7, batches)
def test_batch_gradient_is_batch_mean(th, batch):
    data = models.gen_regression_dataset(20, 0.1, 3)
    model = models.nonlinear_regression()
    b = models.evaluate(model, data, th, batch=batch)
    V = b.V
    want = data.M * V[:, batch].mean(axis=1) + b.X
    assert np.allclose(b.grad, want, rtol=1e-12, atol=1e-9)
    assert np.allclose(models.batch_gradient(model, data, th, np.array(batch)), want, rtol=1e-12, atol=1e-9)


def test_full_batch_equals_full_gradient(small_data):
    model = models.nonlinear_regression()
    th = np.linspace(-1, 1, 7)
    full = models.evaluate(model, small_data, th)
    every = models.evaluate(model, small_data, th, batch=np.arange(20))
    assert np.allclose(full.grad, every.grad, rtol=1e-12)
    assert full.loss == pytest.approx(every.loss, rel=1e-12)
    assert np.allclose(full.V.sum(axis=1) + full.X, full.grad)


@pytest.mark.parametrize("bad", [[], [0, 0], [-1], [20]])
def test_invalid_batches(small_data, bad):
    with pytest.raises(InvalidArgument):
        models.evaluate(models.nonlinear_regression(), small_data, np.zeros(7), batch=bad)


def test_wrong_theta_shape(small_data):
    with pytest.raises(InvalidArgument):
        models.gradient(models.nonlinear_regression(), small_data, np.zeros(6))


def test_classifier_gradient_and_capability():
    rng = np.random.default_rng(0)
    data = models.Dataset(rng.random((15, 4)), models.one_hot(rng.integers(0, 3, 15), 3))
    model = models.linear_classifier(4, 3, lam=1e-2, M=15)
    th = rng.normal(size=12)
    assert np.allclose(models.gradient(model, data, th), _central_grad(model, data, th), rtol=1e-6, atol=1e-8)
    so = models.second_order(model, data, th, want_U=True)
    assert np.allclose(so.U.sum(axis=2) + 2e-2 * np.eye(12), so.H)
    big = models.linear_classifier(49, 10, M=60000)
    with pytest.raises(CapabilityError):
        models.sample_hessians(big, models.Dataset(np.zeros((2, 490 // 10)), np.zeros((2, 10))), np.zeros(490))


def _fake_mnist(tmp_path, count=5, label_magic=models.LABELS_MAGIC, labels=None):
    rng = np.random.default_rng(1)
    imgs = rng.integers(0, 256, (count, 28, 28))
    labels = rng.integers(0, 10, count) if labels is None else labels
    models.write_idx_images(tmp_path / "img.idx", imgs)
    models.write_idx_labels(tmp_path / "lab.idx", labels, magic=label_magic)
    return imgs, labels


def test_idx_round_trip_and_pooling(tmp_path):
    imgs, labels = _fake_mnist(tmp_path)
    data = models.load_mnist(tmp_path / "img.idx", tmp_path / "lab.idx")
    assert data.inputs.shape == (5, 49) and data.outputs.shape == (5, 10)
    assert data.inputs[0, 0] == pytest.approx(imgs[0, :4, :4].mean() / 255)
    assert np.array_equal(data.outputs.argmax(axis=1), labels)


def test_idx_gzip(tmp_path):
    _fake_mnist(tmp_path)
    raw = (tmp_path / "img.idx").read_bytes()
    with gzip.open(tmp_path / "img.idx.gz", "wb") as fh:
        fh.write(raw)
    assert np.array_equal(models.read_idx_images(tmp_path / "img.idx.gz"),
                          models.read_idx_images(tmp_path / "img.idx"))


def test_idx_bad_magic(tmp_path):
    _fake_mnist(tmp_path, label_magic=0x0803)
    with pytest.raises(FormatError):
        models.read_idx_labels(tmp_path / "lab.idx")


def test_idx_truncated(tmp_path):
    _fake_mnist(tmp_path)
    raw = (tmp_path / "img.idx").read_bytes()
    (tmp_path / "img.idx").write_bytes(raw[:-10])
    with pytest.raises(FormatError):
        models.read_idx_images(tmp_path / "img.idx")


def test_idx_count_mismatch(tmp_path):
    _fake_mnist(tmp_path, labels=np.arange(4))
    with pytest.raises(InconsistentData):
        models.load_mnist(tmp_path / "img.idx", tmp_path / "lab.idx")
