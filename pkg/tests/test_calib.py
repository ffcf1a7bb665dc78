import numpy as np
import pytest
from scipy.stats import norm

from fsascale.calib import (
    CalibConfig,
    CalibData,
    CalibModel,
    calib_dataset,
    elbo_loss,
    expected_loglik,
    kl_standard_normal,
    load_calib_model,
    predict_bounds,
    save_calib_model,
    train_calib,
)
from fsascale.data import SyntheticConfig, generate_synthetic
from fsascale.diffcore import Tensor
from fsascale.rng import make_rng
from oracles import conjugate_linear_posterior, finite_difference


def _model(apps=("a", "b", "c"), **kw):
    return CalibModel(list(apps), CalibConfig(**kw), make_rng(0, "calib-model"))


def _linear_data(n=500, seed=0):
    r = make_rng(seed, "calib-linear")
    x = r.uniform(0, 1, n)
    y = 2 * x + 1 + 0.1 * r.standard_normal(n)
    return CalibData(("a",), np.zeros(n, dtype=np.int64), x, y)


def test_kl_zero_iff_standard_normal():
    assert kl_standard_normal(Tensor(np.zeros(2)), Tensor(np.ones(2))).item() == 0.0
    assert kl_standard_normal(Tensor(np.array([1e-3, 0.0])), Tensor(np.ones(2))).item() > 0
    assert kl_standard_normal(Tensor(np.zeros(2)), Tensor(np.array([1.0, 1.01]))).item() > 0


def test_kl_unit_variance_closed_form():
    mu = np.array([0.3, -1.2])
    assert kl_standard_normal(Tensor(mu), Tensor(np.ones(2))).item() == pytest.approx(mu @ mu / 2, abs=1e-15)


def test_kl_nonnegative_random():
    r = make_rng(1)
    for _ in range(200):
        assert kl_standard_normal(Tensor(r.normal(size=2)), Tensor(np.exp(r.normal(size=2)))).item() >= 0


def test_task_embed_zero_weights_and_determinism():
    m = _model()
    for lin in (m.task_hidden, m.task_out):
        lin.weight.data[:] = 0
    m.task_hidden.bias.data[:] = np.linspace(-1, 1, 16)
    e = m.task_embed(np.array([1])).data[0]
    expect = np.maximum(np.linspace(-1, 1, 16), 0) @ m.task_out.weight.data + m.task_out.bias.data
    np.testing.assert_allclose(e, expect, rtol=0, atol=1e-15)
    m2 = _model()
    a, b = m2.task_embed(np.array([0, 0, 1])).data, m2.task_embed(np.array([0])).data
    np.testing.assert_array_equal(a[0], a[1])
    np.testing.assert_allclose(a[0], b[0], rtol=0, atol=1e-14)
    assert np.max(np.abs(a[0] - a[2])) > 1e-6


def test_unknown_app_raises():
    m = _model()
    with pytest.raises(KeyError, match="zzz"):
        predict_bounds(m, "zzz", 0.5, make_rng(0))
    with pytest.raises(KeyError):
        m.task_embed(np.array([3]))


def test_hyper_params_zero_weights_and_affine():
    m = _model()
    m.hyper.weight.data[:] = 0
    m.hyper.bias.data[:] = [1.0, 2.0, -0.5, 0.3]
    mu, sd = m.hyper_params(Tensor(make_rng(2).normal(size=(1, 16))))
    np.testing.assert_array_equal(mu.data[0], [1.0, 2.0])
    np.testing.assert_allclose(sd.data[0], np.log1p(np.exp([-0.5, 0.3])), rtol=1e-14)
    m = _model()
    i1, i2 = make_rng(3).normal(size=(2, 16))
    f = lambda v: m.hyper_params(Tensor(v[None]))[0].data[0]  # noqa: E731
    np.testing.assert_allclose(f(i1 + i2), f(i1) + f(i2) - m.hyper.bias.data[:2], atol=1e-12)
    assert np.all(m.hyper_params(Tensor(make_rng(4).normal(size=(50, 16)) * 20))[1].data > 0)


def test_expected_loglik_matches_analytic_integral():
    m = _model(init_obs_std=0.3)
    x, y = 0.4, 1.3
    mu, sd = (t.data[0] for t in m.hyper_params(m.task_embed(np.array([2]))))
    s = m.obs_std().data[0]
    resid = y - mu[0] * x - mu[1]
    analytic = -0.5 * np.log(2 * np.pi * s * s) - (resid**2 + x * x * sd[0] ** 2 + sd[1] ** 2) / (2 * s * s)
    mc = expected_loglik(m, [2], [x], [y], 10_000, make_rng(5)).item()
    assert abs(mc - analytic) <= 0.01 * abs(analytic)


def test_elbo_empty_batch():
    with pytest.raises(ValueError):
        elbo_loss(_model(), [], [], [], 4, make_rng(0))


def test_elbo_gradient_with_fixed_noise():
    m = _model(apps=("a", "b"), embed_dim=3)
    idx, cpu, y = np.array([0, 1, 1]), np.array([0.2, 0.5, 0.9]), np.array([0.5, 1.4, 2.2])
    names = ["hyper.weight", "task_hidden.weight", "obs_raw"]
    params = dict(m.named_parameters())
    arrays = [params[n].data.copy() for n in names]
    m.zero_grad()
    elbo_loss(m, idx, cpu, y, 4, make_rng(7)).backward()
    analytic = [params[n].grad.copy() for n in names]

    def f(*xs):
        for n, v in zip(names, xs):
            params[n].data = v
        return elbo_loss(m, idx, cpu, y, 4, make_rng(7)).item()

    numeric = finite_difference(f, [a.copy() for a in arrays], h=1e-6)
    for a, n in zip(analytic, numeric):
        assert np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3)) <= 1e-4


def test_linear_ground_truth_and_conjugate_oracle():
    data = _linear_data()
    cfg = CalibConfig(normalize=False, obs_std=0.1, batch_size=None)
    res = train_calib(data, cfg, make_rng(0, "calib-train"))
    assert res.elbo_curve[-1] < res.elbo_curve[0]
    mu, sd = res.model.posterior("a")
    assert np.all(np.abs(mu - np.array([2.0, 1.0])) <= 3 * sd)
    exact, _ = conjugate_linear_posterior(data.cpu, data.y, 0.1)
    assert np.all(np.abs(mu - exact) <= 0.05 * np.abs(exact))


def test_bounds_degenerate_posterior():
    m = _model(apps=("a",))
    m.hyper.weight.data[:] = 0
    m.hyper.bias.data[:] = [500.0, 10.0, -60.0, -60.0]
    bd = predict_bounds(m, "a", 0.5, make_rng(0), n_samples=50)
    assert bd.mean == pytest.approx(260.0, abs=1e-9)
    assert bd.std == pytest.approx(0.0, abs=1e-9)
    assert bd.lo == pytest.approx(260.0, abs=1e-9) and bd.hi == pytest.approx(260.0, abs=1e-9)


def test_bounds_order_and_floor():
    m = _model()
    r = make_rng(9)
    for app in ("a", "b", "c"):
        for u in (0.1, 0.5, 0.9):
            bd = predict_bounds(m, app, u, r, n_samples=200, z=3.0)
            assert 0 <= bd.lo <= bd.hi and (bd.lo <= bd.mean <= bd.hi or bd.mean < 0)


def test_bounds_clt():
    m = _model()
    mu, sd = m.posterior("b")
    n, u = 100_000, 0.6
    bd = predict_bounds(m, "b", u, make_rng(10), n_samples=n)
    exact_std = np.sqrt((u * sd[0]) ** 2 + sd[1] ** 2)
    assert abs(bd.mean - (mu[0] * u + mu[1])) <= 3 * exact_std / np.sqrt(n)


def test_bounds_affine_in_target():
    m = _model()
    means = [predict_bounds(m, "a", u, make_rng(11), n_samples=500).mean for u in (0.2, 0.4, 0.8)]
    slope = (means[1] - means[0]) / 0.2
    assert means[2] == pytest.approx(means[0] + 0.6 * slope, abs=1e-9)
    w_mean = (make_rng(11).standard_normal((500, 2))[:, 0] * m.posterior("a")[1][0]).mean() + m.posterior("a")[0][0]
    assert slope == pytest.approx(w_mean, rel=1e-9)


def test_bounds_input_validation():
    m = _model()
    with pytest.raises(ValueError):
        predict_bounds(m, "a", 1.0, make_rng(0))
    with pytest.raises(ValueError):
        predict_bounds(m, "a", 0.5, make_rng(0), n_samples=1)


def test_bounds_z_matches_gaussian_band():
    m = _model()
    bd = predict_bounds(m, "c", 0.5, make_rng(12), n_samples=20_000, z=norm.ppf(0.95))
    assert bd.hi - bd.mean == pytest.approx(norm.ppf(0.95) * bd.std, rel=1e-12)


def test_calib_dataset_excludes_sparse_apps(caplog):
    traces = generate_synthetic(SyntheticConfig(num_apps=2, days=1))
    data = calib_dataset(traces, min_points=10, end={"app000": 5, "app001": 144})
    assert data.apps == ("app001",)
    assert "app000" in caplog.text
    tr = traces["app001"]
    np.testing.assert_allclose(data.y, tr.workload / tr.pods)


def test_fleet_calibration_learns_each_app():
    traces = generate_synthetic(SyntheticConfig(num_apps=3, days=4, seed=2))
    data = calib_dataset(traces)
    res = train_calib(data, CalibConfig(epochs=600), make_rng(1))
    for i, app in enumerate(data.apps):
        sel = data.app == i
        X = np.column_stack([data.cpu[sel], np.ones(sel.sum())])
        ls = np.linalg.lstsq(X, data.y[sel], rcond=None)[0]
        mu, _ = res.model.posterior(app)
        assert abs(mu[0] * 0.5 + mu[1] - (ls[0] * 0.5 + ls[1])) <= 0.05 * abs(ls[0] * 0.5 + ls[1])


def test_calib_checkpoint_round_trip(tmp_path):
    m = _model()
    m.y_scale = np.array([1.0, 2.0, 3.0])
    save_calib_model(m, tmp_path / "c.ckpt")
    m2 = load_calib_model(tmp_path / "c.ckpt")
    a = predict_bounds(m, "c", 0.5, make_rng(1))
    b = predict_bounds(m2, "c", 0.5, make_rng(1))
    assert a == b
