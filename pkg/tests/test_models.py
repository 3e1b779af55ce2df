import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modmeta.diffcore import check_gradient, grad, leaf, ops
from modmeta.models import (KINDS, GenericModel, HamiltonianModel, LayoutError, ModulatedMLP,
                            antisymmetrize_lower, generic_loss, load_checkpoint, save_checkpoint, spsd_core,
                            symplectic_loss, task_losses)
from modmeta.systems import default_spec, finite_difference, rk4_states, true_field

MODULATED = ("shift", "fw", "ro", "mr")


def small_h(kind, **kw):
    return HamiltonianModel(1, (6, 6), kind, latent_dim=3, rank=2, **kw)


def small_g(kind, **kw):
    return GenericModel(1, 2, (6, 6), kind, latent_dim=3, rank=2, **kw)


def rk4_model(model, p, z, x0, dt, n):
    f = lambda x: model.field(p, z, x, create_graph=False).value  # noqa: E731
    xs = [x0]
    x = x0
    for _ in range(n):
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        xs.append(x)
    return np.stack(xs)


# ------------------------------------------------------------------ modulated MLP

def test_layout_sizes():
    sizes = (2, 5, 4, 1)
    assert ModulatedMLP(sizes, "shift").n_mod == 5 + 4
    assert ModulatedMLP(sizes, "fw").n_mod == 5 * 2 + 5 + 4 * 5 + 4
    assert ModulatedMLP(sizes, "ro").n_mod == (5 + 2 + 5) + (4 + 5 + 4)
    assert ModulatedMLP(sizes, "mr", rank=3).n_mod == (2 + 5) + (3 + 4)
    with pytest.raises(LayoutError):
        ModulatedMLP(sizes, "lora")


def test_zero_hypernetwork_equals_base_bitwise():
    rng = np.random.default_rng(0)
    base = ModulatedMLP((2, 7, 7, 1), "none")
    bp = base.init(rng)
    h = leaf(rng.standard_normal((3, 11, 2)))
    ref = base.forward(bp, None, h).value
    z = rng.standard_normal((3, 10))
    for kind in MODULATED:
        net = ModulatedMLP((2, 7, 7, 1), kind)
        p = net.init(rng, hyper_scale=0.0)
        p.update(bp)
        out = net.forward(p, z, h).value
        assert np.array_equal(out, ref), kind


def test_ro_unit_vectors_change_one_entry():
    net = ModulatedMLP((3, 3, 1), "ro", latent_dim=1)
    p = net.init(np.random.default_rng(0), hyper_scale=0.0)
    hb = np.zeros(net.n_mod)
    hb[0] = 1.0          # u = e1
    hb[3 + 1] = 1.0      # v = e2
    p["hb"] = hb
    (dw,) = net.weight_corrections(p, [0.0])
    expected = np.zeros((3, 3))
    expected[0, 1] = 1.0
    assert np.array_equal(dw, expected)


def test_mr_rank_one_reproduces_ro():
    rng = np.random.default_rng(2)
    sizes = (4, 6, 1)
    ro = ModulatedMLP(sizes, "ro", latent_dim=2)
    mr = ModulatedMLP(sizes, "mr", latent_dim=2, rank=1)
    pr = ro.init(rng, hyper_scale=0.0)
    pm = mr.init(rng, hyper_scale=0.0)
    for k in ("W0", "b0", "W1", "b1"):
        pm[k] = pr[k]
    u, v = rng.standard_normal(6), rng.standard_normal(4)
    s = rng.standard_normal(6)
    pr["hb"] = np.concatenate([u, v, s])
    pm["U0"], pm["V0"] = u[:, None], v[None, :]
    pm["hb"] = np.concatenate([[1.0], s])
    h = leaf(rng.standard_normal((1, 20, 4)))
    z = np.zeros((1, 2))
    diff = np.abs(ro.forward(pr, z, h).value - mr.forward(pm, z, h).value).max()
    assert diff < 1e-12
    pm["hb"] = np.concatenate([[-1.0], s])
    base = ModulatedMLP(sizes, "shift", latent_dim=2)
    pb = {k: pr[k] for k in ("W0", "b0", "W1", "b1")}
    pb["hW"], pb["hb"] = np.zeros((6, 2)), s
    assert np.abs(base.forward(pb, z, h).value - mr.forward(pm, z, h).value).max() < 1e-12


@pytest.mark.parametrize("kind,bound", [("ro", 1), ("mr", 3), ("fw", None)])
def test_weight_correction_rank(kind, bound):
    net = ModulatedMLP((5, 12, 12, 1), kind, latent_dim=4, rank=3)
    p = net.init(np.random.default_rng(1), hyper_scale=1.0)
    for dw in net.weight_corrections(p, np.random.default_rng(5).standard_normal(4)):
        sv = np.linalg.svd(dw, compute_uv=False)
        if bound is None:
            assert sv[0] > 0
        else:
            assert np.all(sv[bound:] < 1e-10)


def test_bad_latent_shape():
    net = ModulatedMLP((2, 4, 1), "shift", latent_dim=3)
    p = net.init(np.random.default_rng(0))
    with pytest.raises(LayoutError):
        net.forward(p, np.zeros((1, 5)), leaf(np.zeros((1, 2, 2))))
    p["hW"] = np.zeros((2, 3))
    with pytest.raises(LayoutError):
        net.forward(p, np.zeros((1, 3)), leaf(np.zeros((1, 2, 2))))


# ------------------------------------------------------------------ Hamiltonian model

def test_constant_hamiltonian_gives_zero_field():
    m = small_h("none")
    p = m.init(np.random.default_rng(0))
    p["h.W2"] = np.zeros_like(p["h.W2"])
    f = m.field(p, None, np.random.default_rng(1).standard_normal((2, 5, 2)))
    assert np.all(f.value == 0)


@pytest.mark.parametrize("kind", KINDS)
def test_hamiltonian_field_matches_fd(kind):
    rng = np.random.default_rng(3)
    m = small_h(kind)
    p = m.init(rng, hyper_scale=0.3)
    z = rng.standard_normal((1, 3))
    x = rng.standard_normal(2)
    f = m.field(p, z, x).value[0, 0]
    h = 1e-5
    H = lambda s: m.energy(p, z, s).value[0, 0]  # noqa: E731
    dq = (H(x + [h, 0]) - H(x - [h, 0])) / (2 * h)
    dp = (H(x + [0, h]) - H(x - [0, h])) / (2 * h)
    assert np.allclose(f, [dp, -dq], atol=1e-6, rtol=0)


def test_learned_hamiltonian_conserved_along_rk4():
    rng = np.random.default_rng(4)
    m = small_h("ro")
    p = m.init(rng, hyper_scale=0.3)
    z = rng.standard_normal((1, 3))
    xs = rk4_model(m, p, z, rng.standard_normal((1, 1, 2)), 0.1, 30)
    H = m.energy(p, z, xs.reshape(1, -1, 2)).value
    assert np.max(np.abs(H - H[0, 0]) / abs(H[0, 0])) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(KINDS))
def test_hamiltonian_orthogonality(seed, kind):
    rng = np.random.default_rng(seed)
    m = small_h(kind)
    p = m.init(rng, hyper_scale=0.5)
    f, e, _ = m.field_and_grad(p, rng.standard_normal((2, 3)), rng.standard_normal((2, 4, 2)) * 3)
    assert np.max(np.abs(np.sum(e.value * f.value, axis=-1))) < 1e-12


# ------------------------------------------------------------------ GENERIC model

def test_antisymmetrize_and_spsd():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((4, 4, 2))
    sym = a + a.transpose(1, 0, 2)
    assert np.all(antisymmetrize_lower(sym).value == 0)
    lam = antisymmetrize_lower(a).value
    assert np.array_equal(lam, -lam.transpose(1, 0, 2))
    assert np.array_equal(spsd_core(np.eye(2)).value, np.eye(2))
    for _ in range(50):
        d = spsd_core(rng.standard_normal((2, 2))).value
        assert np.min(np.linalg.eigvalsh(d)) >= -1e-12


def test_zero_friction_is_canonical_flow():
    rng = np.random.default_rng(1)
    m = small_g("none")
    p = m.init(rng)
    p["dtil"] = np.zeros((2, 2))
    x = rng.standard_normal((1, 6, 4))
    f, e, _ = m.field_and_grad(p, None, x)
    assert np.all(f.value[..., 2:] == 0)
    assert np.array_equal(f.value[..., 0], e.value[..., 1])
    assert np.array_equal(f.value[..., 1], -e.value[..., 0])


def test_degeneracy_of_poisson_part():
    m = small_g("none")
    assert np.all(m.poisson @ m.entropy_grad == 0)
    assert np.array_equal(m.poisson, -m.poisson.T)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(KINDS))
def test_generic_energy_and_entropy_laws(seed, kind):
    rng = np.random.default_rng(seed)
    m = small_g(kind)
    p = m.init(rng, hyper_scale=0.5)
    z = rng.standard_normal((2, 3))
    x = rng.standard_normal((2, 4, 4))
    f, e, _ = m.field_and_grad(p, z, x)
    assert np.max(np.abs(np.sum(e.value * f.value, axis=-1))) < 1e-10
    assert np.min(f.value @ m.entropy_grad) >= -1e-12
    M = m.friction_matrix(p, z, x)
    assert np.max(np.abs(np.einsum("kia,kiac->kic", e.value, M))) < 1e-10
    assert np.max(np.abs(M - np.swapaxes(M, -1, -2))) < 1e-12


def test_additive_friction_can_break_psd():
    m = small_g("fw", friction="additive")
    rng = np.random.default_rng(0)
    p = m.init(rng)
    p["fd.hb"] = np.array([-5.0, 0.0, 0.0, -5.0])
    core = m.friction_core(p, np.zeros((1, 3)), 1).value[0]
    assert np.min(np.linalg.eigvalsh(core)) < 0


# ------------------------------------------------------------------ losses

@pytest.mark.parametrize("kind", KINDS)
def test_self_consistent_labels(kind):
    rng = np.random.default_rng(5)
    for m in (small_h(kind), small_g(kind)):
        p = m.init(rng, hyper_scale=0.3)
        z = rng.standard_normal((2, 3))
        x = rng.standard_normal((2, 7, m.state_dim))
        y = m.field(p, z, x).value
        assert task_losses(m, p, z, x, y, penalties=False).value.max() < 1e-20


def test_zero_labels_constant_model():
    m = small_h("none")
    p = m.init(np.random.default_rng(0))
    p["h.W2"] = np.zeros_like(p["h.W2"])
    x = np.random.default_rng(1).standard_normal((1, 5, 2))
    assert symplectic_loss(m, p, None, x, np.zeros_like(x)).value == 0.0


def test_empty_batch_rejected():
    m = small_h("none")
    p = m.init(np.random.default_rng(0))
    with pytest.raises(ValueError):
        symplectic_loss(m, p, None, np.zeros((1, 0, 2)), np.zeros((1, 0, 2)))
    with pytest.raises(TypeError):
        generic_loss(m, p, None, np.zeros((1, 3, 2)), np.zeros((1, 3, 2)))


def test_fd_labels_close_to_exact_field():
    spec = default_spec("mass_spring")
    mu = [2.0, 3.0]
    xs = rk4_states(spec, mu, [1.0, 0.5], 0.1, 30)
    lab = finite_difference(xs, 0.1)
    res = np.sum((lab[0] - true_field(spec, xs[1], mu)) ** 2)
    assert res < 1e-3


def test_mr_penalty_vanishes_for_orthonormal_zero_coefficients():
    m = small_g("mr")
    p = m.init(np.random.default_rng(0), hyper_scale=0.0)
    assert np.abs(m.penalty(p, np.zeros((2, 3))).value).max() < 1e-28
    p["eqp.hb"] = -np.ones_like(p["eqp.hb"])
    assert np.abs(m.penalty(p, np.zeros((2, 3))).value).max() < 1e-28


def test_mr_penalty_gradient_fd():
    rng = np.random.default_rng(7)
    m = small_h("mr")
    p = m.init(rng, hyper_scale=0.5)
    p["h.hb"] = np.abs(rng.standard_normal(p["h.hb"].shape))
    for k in ("h.U0", "h.V0", "h.U1", "h.V1"):
        p[k] = p[k] + 0.3 * rng.standard_normal(p[k].shape)
    z = rng.standard_normal((2, 3))
    for name in ("h.U0", "h.V1", "h.hW"):
        def f(node, name=name):
            q = dict(p)
            q[name] = node
            return ops.sum(m.penalty(q, z))
        assert check_gradient(f, p[name]) < 1e-6


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("family", ["h", "g"])
def test_loss_parameter_gradients_fd(kind, family):
    rng = np.random.default_rng(11)
    m = small_h(kind) if family == "h" else small_g(kind)
    p = m.init(rng, hyper_scale=0.3)
    # move MR bases off the orthonormal point, where the penalty gradient vanishes
    p = {k: v + 0.1 * rng.standard_normal(v.shape) if k.split(".")[-1][0] in "UV" else v for k, v in p.items()}
    x = rng.standard_normal((2, 4, m.state_dim))
    y = rng.standard_normal((2, 4, m.state_dim))
    z = rng.standard_normal((2, 3)) * 0.5
    for name in list(p) + ["z"]:
        def f(node, name=name):
            q, zz = dict(p), z
            if name == "z":
                zz = node
            else:
                q[name] = node
            return ops.sum(task_losses(m, q, zz, x, y))
        assert check_gradient(f, z if name == "z" else p[name]) < 1e-5, name


def test_loss_grad_second_order_available():
    # input-gradient inside the loss means parameter gradients are second order
    m = small_h("ro")
    rng = np.random.default_rng(0)
    p = {k: leaf(v) for k, v in m.init(rng, 0.3).items()}
    loss = symplectic_loss(m, p, rng.standard_normal((1, 3)), rng.standard_normal((1, 4, 2)),
                           rng.standard_normal((1, 4, 2)))
    gs = grad(loss, list(p.values()))
    assert all(np.all(np.isfinite(g.value)) for g in gs)


# ------------------------------------------------------------------ checkpoints

@pytest.mark.parametrize("make", [small_h, small_g])
def test_checkpoint_roundtrip(tmp_path, make):
    m = make("mr")
    p = m.init(np.random.default_rng(3), 0.1)
    lat = {0: np.arange(3.0) / 7, 4: -np.ones(3) / 3}
    save_checkpoint(tmp_path / "a.json", m, p, lat, {"note": 1})
    m2, p2, lat2, extra = load_checkpoint(tmp_path / "a.json")
    assert m2.describe() == m.describe() and extra == {"note": 1}
    assert all(np.array_equal(p[k], p2[k]) for k in p)
    assert all(np.array_equal(lat[k], lat2[k]) for k in lat)
    save_checkpoint(tmp_path / "b.json", m2, p2, lat2, extra)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
