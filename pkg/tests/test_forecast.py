import numpy as np
import pytest

from fsascale.data import SyntheticConfig, generate_synthetic, prepare_fleet
from fsascale.diffcore import Tensor
from fsascale.forecast import (
    ForecastConfig,
    ForecastModel,
    error_metrics,
    evaluate,
    load_forecast_model,
    make_batch,
    predict,
    predict_many,
    save_forecast_model,
    train_forecast,
)
from fsascale.representation import MultiScaleRepr, ReprStore
from fsascale.rng import make_rng
from oracles import finite_difference, naive_attention

TINY = dict(lookback=12, horizon=4, hidden=8, n_heads=2, embed_dim=2, repr_dim=3)


def _apps(days=3, num_apps=2, **kw):
    cfg = SyntheticConfig(num_apps=num_apps, days=days, seed=1, **kw)
    return prepare_fleet(generate_synthetic(cfg))


def _fake_store(apps, k=3, every=6):
    """Reps derived from trailing means so they are causal by construction."""
    store = ReprStore(k)
    for a in apps:
        for t in range(every - 1, len(a), every):
            w = a.values[max(0, t - 143) : t + 1]
            store.put(a.app_id, "daily", int(a.timestamps[t]), [w.mean(), w.std(), w[-1]])
            store.put(a.app_id, "weekly", int(a.timestamps[t]), [w.max(), w.min(), 0.0])
    return store


def _model(**kw):
    cfg = ForecastConfig(**{**TINY, **kw})
    return ForecastModel(cfg, 3, make_rng(0, "fc"))


def _np_linear(lin, x):
    return x @ lin.weight.data + lin.bias.data


def test_fuse_matches_naive_attention():
    m = _model()
    rng = make_rng(2)
    h = rng.normal(size=(2, 8))
    reps = {"daily": rng.normal(size=(2, 3)), "weekly": rng.normal(size=(2, 3))}
    out = m.fuse(Tensor(h), reps).data

    def mlp(mod, x):
        return _np_linear(mod.out, np.maximum(_np_linear(mod.hidden, x), 0))

    att = m.fusion
    for b in range(2):
        ctx = _np_linear(m.context_proj, h[b])
        tokens = np.stack([mlp(m.scale_proj["daily"], reps["daily"][b]), mlp(m.scale_proj["weekly"], reps["weekly"][b]), ctx])
        q = tokens @ att.q.kernel.data[0] + att.q.bias.data
        k = tokens @ att.k.kernel.data[0] + att.k.bias.data
        v = tokens @ att.v.kernel.data[0] + att.v.bias.data
        heads = [naive_attention(q[:, s], k[:, s], v[:, s], causal=False) for s in (slice(0, 4), slice(4, 8))]
        expect = ctx + _np_linear(att.out, np.concatenate(heads, axis=1))[-1]
        np.testing.assert_allclose(out[b], expect, rtol=0, atol=1e-12)


def test_fuse_single_token_is_positionwise():
    m = _model(use_repr=False)
    h = make_rng(3).normal(size=(1, 8))
    ctx = _np_linear(m.context_proj, h[0])
    att = m.fusion
    v = ctx @ att.v.kernel.data[0] + att.v.bias.data
    expect = ctx + _np_linear(att.out, v)
    np.testing.assert_allclose(m.fuse(Tensor(h), None).data[0], expect, rtol=0, atol=1e-12)


def test_fuse_invariant_to_scale_token_order():
    m = _model()
    rng = make_rng(4)
    h = Tensor(rng.normal(size=(2, 8)))
    same = rng.normal(size=(2, 3))
    m.scale_proj["weekly"].load_state_dict(m.scale_proj["daily"].state_dict())
    reps = {"daily": same, "weekly": same.copy()}
    a = m.fuse(h, reps).data
    m.cfg.scales = ["weekly", "daily"]
    b = m.fuse(h, reps).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_fuse_requires_context():
    with pytest.raises(ValueError):
        _model().fuse(None, {})


def test_config_rejects_zero_horizon():
    with pytest.raises(ValueError):
        ForecastConfig(horizon=0)


def test_nll_gradcheck_tiny():
    m = _model(horizon=2, lookback=3, hidden=4, embed_dim=1)
    apps = _apps(days=2)
    store = _fake_store(apps)
    batch = make_batch(apps, [(0, 200), (1, 220)], m.cfg, store)
    names = ["mu_head.weight", "decoder.U", "fusion.q.kernel", "encoder.W", "embedding"]
    params = dict(m.named_parameters())

    arrays = [params[n].data.copy() for n in names]
    m.zero_grad()
    m.nll(batch).backward()
    analytic = [params[n].grad.copy() for n in names]

    def f(*xs):
        for n, x in zip(names, xs):
            params[n].data = x
        return m.nll(batch).item()

    numeric = finite_difference(f, [a.copy() for a in arrays], h=1e-6)
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3)
        assert np.max(np.abs(a - n) / denom) <= 1e-4


def test_sigma_positive_and_quantiles_monotone():
    apps = _apps()
    m = ForecastModel(ForecastConfig(**TINY, use_repr=False), 2, make_rng(1))
    res = predict(m, apps[0], 100, None)
    assert np.all(res.std > 0)
    levels = sorted(res.quantiles)
    stacked = np.stack([res.quantiles[q] for q in levels])
    assert np.all(np.diff(stacked, axis=0) > 0)
    np.testing.assert_allclose(res.quantile(0.5), res.mean, rtol=0, atol=1e-9)


def test_constant_head_model():
    apps = _apps()
    m = ForecastModel(ForecastConfig(**TINY, use_repr=False), 2, make_rng(1))
    for _, p in m.named_parameters():
        p.data = np.zeros_like(p.data)
    m.mu_head.bias.data = np.array([0.7])
    res = predict(m, apps[1], 50, None)
    sc = apps[1].scaler
    np.testing.assert_allclose(res.mean, sc.mean + sc.std * 0.7, rtol=1e-12)
    np.testing.assert_allclose(res.std, sc.std * np.log(2.0), rtol=1e-12)


def test_predict_history_too_short():
    apps = _apps()
    m = ForecastModel(ForecastConfig(**TINY, use_repr=False), 2, make_rng(1))
    with pytest.raises(ValueError, match="history"):
        predict(m, apps[0], 5, None)


def test_forecast_is_causal():
    apps = _apps()
    store = _fake_store(apps)
    m = _model()
    origin = 200
    before = predict_many(m, apps[0], np.array([origin]), store=store)[0]
    # perturb every observation after the origin, rebuild reps the same causal way
    apps[0].values[origin + 1 :] += 50.0
    store2 = _fake_store(apps)
    after = predict_many(m, apps[0], np.array([origin]), store=store2)[0]
    assert np.max(np.abs(before.mean - after.mean)) <= 1e-12
    assert np.max(np.abs(before.std - after.std)) <= 1e-12


def test_predict_deterministic_and_reprs_match_store():
    apps = _apps()
    store = _fake_store(apps)
    m = _model()
    ts = int(apps[0].timestamps[150])
    reprs = store.multiscale(apps[0].app_id, ts, ["daily", "weekly"])
    a = predict(m, apps[0], 150, reprs)
    b = predict_many(m, apps[0], np.array([150]), store=store)[0]
    np.testing.assert_array_equal(a.mean, b.mean)


def test_train_missing_reprs_lists_keys():
    apps = _apps()
    store = ReprStore(3)
    with pytest.raises(LookupError, match="app000"):
        train_forecast(apps, store, ForecastConfig(**TINY, scales=["daily"], epochs=1, iters_per_epoch=1),
                       make_rng(0))


def test_train_decreases_nll_and_is_deterministic():
    apps = _apps()
    store = _fake_store(apps)
    cfg = ForecastConfig(**TINY, scales=["daily"], epochs=6, iters_per_epoch=5, batch_size=16, lr=1e-2)
    a = train_forecast(apps, store, cfg, make_rng(3))
    b = train_forecast(apps, store, cfg, make_rng(3))
    assert a.nll_curve[-1] < a.nll_curve[0]
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


def test_noiseless_periodic_forecast_accuracy():
    cfg = SyntheticConfig(num_apps=2, days=12, seed=4, noise_std=0, burst_rate=0, weekly_amp=0, trend_slope=0,
                          app_scale_spread=0)
    apps = prepare_fleet(generate_synthetic(cfg))
    fc = ForecastConfig(lookback=36, horizon=12, hidden=16, use_repr=False, epochs=40, iters_per_epoch=10, lr=1e-2)
    model = train_forecast(apps, None, fc, make_rng(0, "periodic")).model
    mae = evaluate(model, apps, None)["mae"]
    assert mae <= 0.2 * cfg.daily_amp


def test_error_metrics_examples():
    y = np.array([1.0, 2.0, 3.0])
    assert error_metrics(y, y) == {"mae": 0.0, "rmse": 0.0}
    m = error_metrics(y, y + 2.5)
    assert m["mae"] == pytest.approx(2.5) and m["rmse"] == pytest.approx(2.5)
    m = error_metrics(y, y - np.array([1.0, -2.0, 2.0]))
    assert m["mae"] == pytest.approx(5 / 3) and m["rmse"] == pytest.approx(np.sqrt(3))
    with pytest.raises(ValueError):
        error_metrics([], [])


def test_checkpoint_round_trip(tmp_path):
    apps = _apps()
    store = _fake_store(apps)
    m = _model()
    save_forecast_model(m, tmp_path / "f.ckpt")
    m2 = load_forecast_model(tmp_path / "f.ckpt")
    a = predict_many(m, apps[0], np.array([150, 160]), store=store)
    b = predict_many(m2, apps[0], np.array([150, 160]), store=store)
    for x, y in zip(a, b):
        assert x.mean.tobytes() == y.mean.tobytes()


def test_predict_uses_only_present_scales():
    apps = _apps()
    m = _model()
    reps = MultiScaleRepr(apps[0].app_id, 0, {"daily": np.zeros(3)})
    res = predict(m, apps[0], 150, reps)
    assert res.mean.shape == (4,)
