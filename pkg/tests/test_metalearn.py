import numpy as np
import pytest

from modmeta.diffcore import UnsupportedDepthError, constant, grad, leaf, ops
from modmeta.metalearn import (MetaConfig, Predictor, TaskData, TrainingDivergence, adam_init, adam_step, adapt,
                               adapt_params, clip_global_norm, init_state, latent_steps, mean_latent,
                               meta_gradient, meta_train, optimization_train, reptile_update, scratch_init,
                               scratch_train, validate)
from modmeta.models import HamiltonianModel, data_scaling
from modmeta.systems import build_dataset, default_spec


def tiny_tasks(n_mu=6, n_T=2, seed=0):
    spec = default_spec("mass_spring")
    ds = build_dataset(spec, n_mu, n_T, counts=(n_mu - 2, 1, 1), seed=seed)
    return spec, ds


def tiny_model(kind="shift", ds=None):
    scaling = None
    if ds is not None:
        x = np.concatenate([t.stacked()[0] for t in ds.train])
        y = np.concatenate([t.stacked()[1] for t in ds.train])
        scaling = data_scaling(x, y)
    return HamiltonianModel(1, (8, 8), kind, latent_dim=3, rank=2, **(scaling or {}))


class LinearLatentModel:
    """f(x; z) = x A + z, a field that is linear in the latent code."""

    kind = "shift"
    modulated = True
    latent_dim = 2

    def __init__(self, a):
        self.a = np.asarray(a)

    def field(self, p, z, x, create_graph=True):
        x = x if hasattr(x, "value") else constant(np.asarray(x))
        nb, n, d = x.shape
        xa = ops.reshape(ops.matmul(ops.reshape(x, (nb * n, d)), p["A"]), (nb, n, d))
        zz = ops.broadcast_to(ops.reshape(z, (nb, 1, d)), (nb, n, d))
        return ops.add(xa, zz)


# ------------------------------------------------------------------ config and Adam

def test_config_validation():
    assert MetaConfig().eta_val == MetaConfig().lr_in
    assert MetaConfig(lr_val=0.5).eta_val == 0.5
    with pytest.raises(ValueError):
        MetaConfig(n_out=-1)
    with pytest.raises(ValueError):
        MetaConfig(lr_out=0.0)
    with pytest.raises(ValueError):
        MetaConfig(batch_size=0)
    with pytest.raises(ValueError):
        MetaConfig(init="random")


def test_adam_first_step_is_lr_sign():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    g = {"w": np.array([0.5, -4.0, 1e-3])}
    new, st = adam_step(adam_init(p), p, g, 0.01)
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    np.testing.assert_allclose(new["w"] - p["w"], -0.01 * np.sign(g["w"]), rtol=1e-4)
    assert st.t == 1


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    new, _ = adam_step(adam_init(p), p, {"w": np.zeros(2)}, 0.1)
    assert np.array_equal(new["w"], p["w"])


def test_adam_scalar_quadratic_matches_simulation():
    p = {"t": np.array(1.0)}
    st = adam_init(p)
    for _ in range(100):
        p, st = adam_step(st, p, {"t": p["t"].copy()}, 0.1)
    # independent scalar simulation
    th, m, v = 1.0, 0.0, 0.0
    for t in range(1, 101):
        g = th
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        th -= 0.1 * (m / (1 - 0.9 ** t)) / ((v / (1 - 0.999 ** t)) ** 0.5 + 1e-8)
    assert abs(float(p["t"]) - th) < 1e-12
    assert abs(th) < 0.1


def test_adam_shape_mismatch():
    p = {"w": np.zeros(3)}
    with pytest.raises(ValueError):
        adam_step(adam_init(p), p, {"w": np.zeros(2)}, 0.1)


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    c = clip_global_norm(g, 1.0)
    assert np.isclose(np.sqrt(c["a"] ** 2 + c["b"] ** 2), 1.0)
    assert clip_global_norm(g, None) is g


# ------------------------------------------------------------------ latent steps and adaptation

def test_single_inner_step_is_exact_gradient_step():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(2, 2))
    model = LinearLatentModel(a)
    x = rng.normal(size=(1, 7, 2))
    y = rng.normal(size=(1, 7, 2))
    z0 = rng.normal(size=(1, 2))
    z1, trace = latent_steps(model, {"A": a}, z0, x, y, 1, 0.3)
    # loss = mean_i |x_i A + z - y_i|^2  =>  dL/dz = 2 mean_i (x_i A + z - y_i)
    g = 2 * np.mean(x[0] @ a + z0 - y[0], axis=0)
    np.testing.assert_allclose(z1[0], z0[0] - 0.3 * g, rtol=0, atol=1e-14)
    assert len(trace) == 2 and trace[1][0] < trace[0][0]


def test_mean_latent():
    assert np.array_equal(mean_latent(np.array([[1.0, 2.0], [3.0, 4.0]])), [2.0, 3.0])
    assert np.array_equal(mean_latent({0: np.array([1.0, 2.0]), 5: np.array([3.0, 4.0])}), [2.0, 3.0])
    with pytest.raises(ValueError):
        mean_latent(np.zeros((0, 2)))


def test_adapt_zero_steps_returns_start_and_freezes_base():
    spec, ds = tiny_tasks()
    model = tiny_model("ro", ds)
    params = model.init(np.random.default_rng(1))
    before = {k: v.copy() for k, v in params.items()}
    z_avg = np.array([0.1, -0.2, 0.3])
    z, _ = adapt(model, params, z_avg, ds.test, 0, 0.01)
    assert np.array_equal(z[0], z_avg)
    z, trace = adapt(model, params, z_avg, ds.test, 5, 0.01)
    assert trace[-1][0] < trace[0][0]
    for k in params:
        assert np.array_equal(params[k], before[k])


def test_adapt_empty_set_errors():
    model = tiny_model("ro")
    with pytest.raises(ValueError):
        adapt(model, model.init(np.random.default_rng(0)), np.zeros(3), [], 3, 0.01)


def test_meta_train_zero_iterations_returns_initial_state():
    spec, ds = tiny_tasks()
    model = tiny_model("shift", ds)
    cfg = MetaConfig(n_out=0, seed=3)
    st = meta_train(cfg, model, ds.train, ds.val, spec)
    ref = init_state(model, ds.train, cfg)
    assert st.iteration == 0 and st.history == [] and st.best is None
    for k in ref.params:
        assert np.array_equal(st.params[k], ref.params[k])
    assert np.array_equal(st.latents, np.zeros_like(st.latents))


def test_latent_persistence_and_determinism():
    spec, ds = tiny_tasks(n_mu=7)
    model = tiny_model("ro", ds)
    cfg = MetaConfig(n_out=4, n_in=2, n_cert=2, n_val=3, batch_size=2, seed=5)
    st = init_state(model, ds.train, cfg)
    snapshots = []
    for n in range(1, 5):
        st = meta_train(cfg.replace(n_out=n), model, ds.train, ds.val, spec, state=st)
        snapshots.append(st.latents.copy())
    for it in range(1, 4):
        touched = set(st.history[it]["tasks"])
        for row, k in enumerate(st.task_ids):
            if k not in touched:
                assert np.array_equal(snapshots[it][row], snapshots[it - 1][row])
    # resuming iteration by iteration equals one uninterrupted run
    st2 = meta_train(cfg, model, ds.train, ds.val, spec)
    assert [h["loss"] for h in st2.history] == [h["loss"] for h in st.history]
    assert np.array_equal(st2.latents, st.latents)
    st3 = meta_train(cfg, model, ds.train, ds.val, spec)
    assert [h["loss"] for h in st3.history] == [h["loss"] for h in st2.history]
    assert st3.best["iteration"] == st2.best["iteration"]


def test_zero_init_differs_only_in_start_code():
    spec, ds = tiny_tasks()
    model = tiny_model("shift", ds)
    params = model.init(np.random.default_rng(2))
    latents = np.zeros((len(ds.train), model.latent_dim))
    cfg = MetaConfig(n_val=4)
    a = validate(model, params, latents, ds.val, spec, cfg)
    b = validate(model, params, latents, ds.val, spec, cfg.replace(init="zero"))
    assert a == b


def test_divergence_reports_iteration_and_task():
    spec, ds = tiny_tasks()
    model = tiny_model("shift", ds)
    bad = [TaskData.from_task(t) for t in ds.train]
    labels = bad[1].labels.copy()
    labels[0, 0] = np.nan
    bad[1] = TaskData(bad[1].k, bad[1].mu, bad[1].states, labels, bad[1].trajectories)
    cfg = MetaConfig(n_out=5, n_in=1, batch_size=len(bad))
    with pytest.raises(TrainingDivergence) as info:
        meta_train(cfg, model, bad)
    assert info.value.iteration == 0
    assert info.value.tasks == [bad[1].k]


def test_meta_train_logs_mr_penalty(tmp_path):
    spec, ds = tiny_tasks()
    model = tiny_model("mr", ds)
    log = tmp_path / "log.jsonl"
    st = meta_train(MetaConfig(n_out=2, n_in=1, n_cert=2, n_val=1), model, ds.train, ds.val, spec, log_path=log)
    rec = st.history[-1]
    assert "penalty" in rec and "residual" in rec and "val_traj" in rec
    assert len(log.read_text().splitlines()) == 2


def test_meta_train_rejects_unmodulated():
    spec, ds = tiny_tasks()
    with pytest.raises(ValueError):
        meta_train(MetaConfig(n_out=1), tiny_model("none"), ds.train)


# ------------------------------------------------------------------ optimization-based baselines

def quad_loss(a, c):
    a = np.asarray(a, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)

    def loss_fn(p):
        t = p["t"]
        r = ops.sub(t, c if t.ndim == 2 else c[0])
        q = ops.mul(0.5, ops.mul(a if t.ndim == 2 else a[0], ops.square(r)))
        return ops.sum(q, axis=1) if t.ndim == 2 else ops.reshape(ops.sum(q), (1,))
    return loss_fn


def test_reptile_one_step_closed_form():
    theta = {"t": np.array([0.3, -1.2, 2.0])}
    c = np.array([[1.0, 0.5, -0.5], [-2.0, 0.0, 1.0]])
    new, _ = reptile_update(quad_loss(np.ones_like(c), c), theta, ["t"], 1, 0.02, 0.01, 2)
    expect = theta["t"] - 0.01 * 0.02 * (theta["t"] - c.mean(axis=0))
    np.testing.assert_allclose(new["t"], expect, rtol=0, atol=1e-14)


def test_reptile_adam_inner_first_step():
    theta = {"t": np.array([0.3, -1.2, 2.0])}
    c = np.array([[1.0, 0.5, -0.5], [-2.0, 0.0, 1.0]])
    new, _ = reptile_update(quad_loss(np.ones_like(c), c), theta, ["t"], 1, 0.02, 0.01, 2, optimizer="adam")
    g = theta["t"] - c
    # bias-corrected first Adam step is lr * g / (|g| + eps)
    expect = theta["t"] - 0.01 * np.mean(0.02 * g / (np.abs(g) + 1e-8), axis=0)
    np.testing.assert_allclose(new["t"], expect, rtol=0, atol=1e-14)
    with pytest.raises(ValueError):
        reptile_update(quad_loss(np.ones_like(c), c), theta, ["t"], 1, 0.02, 0.01, 2, optimizer="rmsprop")
    with pytest.raises(ValueError):
        MetaConfig(reptile_inner="rmsprop")


@pytest.mark.parametrize("n_in", [1, 2])
def test_maml_meta_gradient_matches_chain_rule(n_in):
    a = np.array([[0.7], [1.9], [1.0]])
    c = np.array([[0.4], [-1.5], [2.2]])
    th, eta = 0.8, 0.1
    per, g = meta_gradient(quad_loss(a, c), {"t": np.array([th])}, ["t"], n_in, eta, 3)
    t = np.full(3, th)
    for _ in range(n_in):
        t = t - eta * a[:, 0] * (t - c[:, 0])
    expect = np.sum((1 - eta * a[:, 0]) ** n_in * a[:, 0] * (t - c[:, 0]))
    assert abs(g["t"][0] - expect) < 1e-10
    _, g1 = meta_gradient(quad_loss(a, c), {"t": np.array([th])}, ["t"], n_in, eta, 3, first_order=True)
    assert abs(g1["t"][0] - np.sum(a[:, 0] * (t - c[:, 0]))) < 1e-10


def test_first_order_equals_stop_gradient():
    a = np.array([[0.7, 1.1], [1.9, 0.2]])
    c = np.array([[0.4, 0.0], [-1.5, 1.0]])
    theta = {"t": np.array([0.8, -0.3])}
    _, g_fo = meta_gradient(quad_loss(a, c), theta, ["t"], 2, 0.1, 2, first_order=True)
    # manual stop-gradient: inner gradients as constants
    leaf_t = leaf(theta["t"])
    p = ops.broadcast_to(ops.reshape(leaf_t, (1, 2)), (2, 2))
    for _ in range(2):
        gi = a * (p.value - c)
        p = ops.sub(p, constant(0.1 * gi))
    loss = ops.sum(quad_loss(a, c)({"t": p}))
    (g,) = grad(loss, [leaf_t])
    np.testing.assert_array_equal(g.value, g_fo["t"])


def test_depth_limit_suggests_first_order():
    def deep_loss(p):
        t = p["t"]
        s = ops.sum(ops.mul(ops.square(t), t))
        (g1,) = grad(s, [t], create_graph=True)
        (g2,) = grad(ops.sum(ops.square(g1)), [t], create_graph=True)
        (g3,) = grad(ops.sum(ops.square(g2)), [t], create_graph=True)
        return ops.sum(ops.square(g3), axis=1)

    with pytest.raises(UnsupportedDepthError, match="first-order"):
        meta_gradient(deep_loss, {"t": np.array([0.5, 0.2])}, ["t"], 1, 0.1, 2)
    meta_gradient(deep_loss, {"t": np.array([0.5, 0.2])}, ["t"], 1, 0.1, 2, first_order=True)


def test_anil_inner_loop_freezes_other_layers():
    spec, ds = tiny_tasks()
    model = tiny_model("none", ds)
    theta = model.init(np.random.default_rng(0))
    p, trace = adapt_params(model, "anil", theta, ds.test, 3, 1e-3)
    final = set(model.final_layer_names())
    for k in theta:
        if k in final:
            assert p[k].shape == (1,) + theta[k].shape and not np.array_equal(p[k][0], theta[k])
        elif p[k].ndim == theta[k].ndim:
            assert np.array_equal(p[k], theta[k])
        else:  # final bias: batched but not adapted
            assert np.array_equal(p[k][0], theta[k])
    assert trace[-1][0] < trace[0][0]


def test_zero_inner_steps_collapse_to_multitask():
    spec, ds = tiny_tasks()
    model = tiny_model("none", ds)
    cfg = MetaConfig(n_out=3, n_in=0, n_cert=10, batch_size=2, seed=1)
    runs = {m: optimization_train(m, cfg, model, ds.train) for m in ("maml", "anil", "multitask")}
    for m in ("maml", "anil"):
        assert [h["loss"] for h in runs[m].history] == [h["loss"] for h in runs["multitask"].history]
        for k in runs[m].params:
            assert np.array_equal(runs[m].params[k], runs["multitask"].params[k])


def test_baselines_reject_modulated_model():
    spec, ds = tiny_tasks()
    with pytest.raises(ValueError):
        optimization_train("maml", MetaConfig(n_out=1), tiny_model("ro"), ds.train)


# ------------------------------------------------------------------ scratch

def test_scratch_zero_steps_is_initial_model():
    spec, ds = tiny_tasks()
    model = tiny_model("none", ds)
    cfg = MetaConfig(seed=4)
    p, trace = scratch_train(cfg, model, ds.test, n_steps=0)
    init = scratch_init(model, 4, [t.k for t in ds.test])
    for k in p:
        assert np.array_equal(p[k], init[k])
    assert len(trace) == 1


def test_scratch_decreases_loss_and_is_deterministic():
    spec, ds = tiny_tasks()
    model = tiny_model("none", ds)
    cfg = MetaConfig(seed=4, lr_out=1e-2)
    p1, t1 = scratch_train(cfg, model, ds.train, n_steps=20)
    p2, t2 = scratch_train(cfg, model, ds.train, n_steps=20)
    assert np.all(t1[-1] < t1[0])
    for k in p1:
        assert np.array_equal(p1[k], p2[k])


# ------------------------------------------------------------------ predictor

def test_predictor_chunking_and_task_slices():
    spec, ds = tiny_tasks()
    model = tiny_model("ro", ds)
    params = model.init(np.random.default_rng(0))
    z = np.random.default_rng(1).normal(size=(2, 3))
    x = np.random.default_rng(2).normal(size=(2, 50, 2))
    full = Predictor(model, params, z, chunk=10_000).field(x)
    small = Predictor(model, params, z, chunk=7).field(x)
    np.testing.assert_allclose(full, small, rtol=0, atol=1e-13)
    one = Predictor(model, params, z).task(1).field(x[1])
    np.testing.assert_allclose(one, full[1], rtol=0, atol=1e-13)
    with pytest.raises(ValueError):
        Predictor(model, params)
