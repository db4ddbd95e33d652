import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import central_diff, input_derivs_fd, reference_forward, rel, richardson_diff

from lsrkit import net
from lsrkit.errors import DimensionError, FileFormatError, UnsupportedActivationError


def _random_setup(seed, activation="tanh", hidden=(8, 6), d=2, out=2, n=5):
    arch = net.MlpArchitecture(d, out, hidden, activation)
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal(arch.param_count) * 0.7
    x = rng.uniform(-1, 1, (n, d))
    return arch, theta, x, rng


def test_architecture_param_count():
    arch = net.MlpArchitecture(2, 3, (4, 5))
    assert arch.param_count == 2 * 4 + 4 + 4 * 5 + 5 + 5 * 3 + 3
    with pytest.raises(ValueError):
        net.MlpArchitecture(2, 1, (0,))
    with pytest.raises(ValueError):
        net.MlpArchitecture(2, 1, (3,), "sigmoid")


def test_identity_layer():
    arch = net.MlpArchitecture(2, 2)
    theta = net.flatten([(np.eye(2), np.zeros(2))])
    assert np.array_equal(net.forward(arch, theta, np.array([[1.0, 2.0]])), [[1.0, 2.0]])


def test_zero_parameters_give_zero_output():
    arch = net.MlpArchitecture(2, 3, (8, 8), "tanh")
    assert np.array_equal(net.forward(arch, np.zeros(arch.param_count), np.ones((4, 2))), np.zeros((4, 3)))


@pytest.mark.parametrize("activation", net.ACTIVATIONS)
def test_forward_matches_reference(activation):
    arch = net.MlpArchitecture(2, 1, (8,), activation)
    theta = net.init_params(arch, 3)
    theta[-1] = 0.2
    x = np.array([[0.3, -0.7]])
    ref = reference_forward(arch.widths, activation, theta, x)
    assert np.allclose(net.forward(arch, theta, x), ref, rtol=1e-14, atol=1e-15)


def test_flatten_roundtrip_bit_exact(rng):
    arch = net.MlpArchitecture(3, 2, (5, 4))
    theta = rng.standard_normal(arch.param_count)
    assert np.array_equal(net.flatten(net.unflatten(arch, theta)), theta)
    with pytest.raises(DimensionError):
        net.unflatten(arch, theta[:-1])


def test_forward_dimension_error():
    arch = net.MlpArchitecture(2, 1, (3,))
    with pytest.raises(DimensionError):
        net.forward(arch, np.zeros(arch.param_count), np.ones((4, 3)))


def test_init_params():
    arch = net.MlpArchitecture(128, 128, (128,))
    a = net.init_params(arch, 5)
    assert np.array_equal(a, net.init_params(arch, 5))
    for w, b in net.unflatten(arch, a):
        assert np.all(b == 0.0)
        target = 2.0 / (w.shape[0] + w.shape[1])
        assert 0.8 * target <= w.var() <= 1.2 * target


def test_jvp_linear_layer(rng):
    arch = net.MlpArchitecture(3, 2)
    theta = rng.standard_normal(arch.param_count)
    dw, db = rng.standard_normal((3, 2)), rng.standard_normal(2)
    x = rng.standard_normal((4, 3))
    out = net.jvp(arch, theta, x, net.flatten([(dw, db)]))
    assert np.allclose(out, x @ dw + db, rtol=1e-14)


def test_jvp_zero_tangent():
    arch, theta, x, _ = _random_setup(0)
    assert np.array_equal(net.jvp(arch, theta, x, np.zeros(arch.param_count)), np.zeros((5, 2)))


@pytest.mark.parametrize("activation", net.ACTIVATIONS)
def test_jvp_finite_difference(activation):
    arch, theta, x, rng = _random_setup(1, activation)
    v = rng.standard_normal(arch.param_count)
    fd = central_diff(lambda t: net.forward(arch, theta if t is None else t, x), theta, v, 1e-5)
    assert rel(net.jvp(arch, theta, x, v), fd) <= 1e-6


def test_jvp_stacked_and_linear():
    arch, theta, x, rng = _random_setup(2)
    v1, v2 = rng.standard_normal((2, arch.param_count))
    stacked = net.jvp(arch, theta, x, np.column_stack([v1, v2]))
    assert stacked.shape == (5, 2, 2)
    assert np.allclose(stacked[..., 0], net.jvp(arch, theta, x, v1), rtol=1e-14, atol=1e-15)
    combo = net.jvp(arch, theta, x, 2.5 * v1 - 0.5 * v2)
    assert rel(combo, 2.5 * stacked[..., 0] - 0.5 * stacked[..., 1]) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), act=st.sampled_from(net.ACTIVATIONS), k=st.integers(1, 3))
def test_adjoint_identity(seed, act, k):
    arch, theta, x, rng = _random_setup(seed, act)
    v = rng.standard_normal((arch.param_count, k))
    u = rng.standard_normal((5, 2, k))
    lhs = np.einsum("nok,nok->", u, net.jvp(arch, theta, x, v))
    rhs = np.einsum("mk,mk->", net.vjp(arch, theta, x, u), v)
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1e-300) + 1e-13


def test_vjp_zero_and_shape_error():
    arch, theta, x, _ = _random_setup(3)
    assert np.array_equal(net.vjp(arch, theta, x, np.zeros((5, 2))), np.zeros(arch.param_count))
    with pytest.raises(DimensionError):
        net.vjp(arch, theta, x, np.zeros((4, 2)))


def test_vjp_linear_layer_single_point():
    arch = net.MlpArchitecture(2, 1)
    x = np.array([[0.5, -2.0]])
    g = net.vjp(arch, np.zeros(arch.param_count), x, np.ones((1, 1)))
    assert np.array_equal(g, [0.5, -2.0, 1.0])


def test_batch_invariance():
    arch, theta, x, rng = _random_setup(4)
    v = rng.standard_normal(arch.param_count)
    u = rng.standard_normal((5, 2))
    per_fwd = np.concatenate([net.forward(arch, theta, x[i : i + 1]) for i in range(5)])
    per_jvp = np.concatenate([net.jvp(arch, theta, x[i : i + 1], v) for i in range(5)])
    per_vjp = sum(net.vjp(arch, theta, x[i : i + 1], u[i : i + 1]) for i in range(5))
    assert np.max(np.abs(per_fwd - net.forward(arch, theta, x))) <= 1e-14
    assert np.max(np.abs(per_jvp - net.jvp(arch, theta, x, v))) <= 1e-14
    assert rel(per_vjp, net.vjp(arch, theta, x, u)) <= 1e-14


def test_input_jet_affine_network(rng):
    arch = net.MlpArchitecture(3, 2)
    w, b = rng.standard_normal((3, 2)), rng.standard_normal(2)
    jet = net.input_jet(arch, net.flatten([(w, b)]), rng.standard_normal((4, 3)))
    assert np.allclose(jet.grad, np.broadcast_to(w, (4, 3, 2)))
    assert np.array_equal(jet.hess_diag, np.zeros((4, 3, 2)))


def test_input_jet_single_tanh_unit():
    arch = net.MlpArchitecture(1, 1, (1,), "tanh")
    theta = net.flatten([(np.ones((1, 1)), np.zeros(1)), (np.ones((1, 1)), np.zeros(1))])
    jet = net.input_jet(arch, theta, np.zeros((1, 1)))
    assert jet.value[0, 0] == 0.0
    assert jet.grad[0, 0, 0] == 1.0
    assert jet.hess_diag[0, 0, 0] == 0.0


@pytest.mark.parametrize("activation", ["tanh", "tanh_sin"])
def test_input_jet_finite_difference(activation):
    arch = net.MlpArchitecture(2, 1, (16,), activation)
    theta = net.init_params(arch, 7)
    x = np.random.default_rng(7).uniform(-1, 1, (6, 2))
    jet = net.input_jet(arch, theta, x)
    grad, hess = input_derivs_fd(lambda p: net.forward(arch, theta, p), x, 1e-4)
    assert rel(jet.value, net.forward(arch, theta, x)) <= 1e-15
    assert rel(jet.grad, grad) <= 1e-5
    assert rel(jet.hess_diag, hess) <= 1e-5


def test_relu_rejected_for_jets():
    arch = net.MlpArchitecture(2, 1, (4,), "relu")
    theta = net.init_params(arch, 0)
    with pytest.raises(UnsupportedActivationError):
        net.input_jet(arch, theta, np.zeros((1, 2)))
    with pytest.raises(UnsupportedActivationError):
        net.jet_param_tangent(arch, theta, np.zeros((1, 2)), theta)


def test_jet_param_tangent_zero_and_affine(rng):
    arch, theta, x, _ = _random_setup(5)
    zero = net.jet_param_tangent(arch, theta, x, np.zeros(arch.param_count))
    assert all(np.array_equal(f, np.zeros_like(f)) for f in zero)
    lin = net.MlpArchitecture(2, 2)
    th = rng.standard_normal(lin.param_count)
    v = rng.standard_normal(lin.param_count)
    t = net.jet_param_tangent(lin, th, x, v)
    assert np.allclose(t.value, net.jvp(lin, th, x, v), rtol=1e-14)
    assert np.array_equal(t.hess_diag, np.zeros_like(t.hess_diag))


@pytest.mark.parametrize("activation", ["tanh", "tanh_sin"])
def test_jet_param_tangent_finite_difference(activation):
    arch, theta, x, rng = _random_setup(6, activation)
    v = rng.standard_normal(arch.param_count)
    t = net.jet_param_tangent(arch, theta, x, v)
    for i, field in enumerate(("value", "grad", "hess_diag")):
        fd = central_diff(lambda th: getattr(net.input_jet(arch, th, x), field), theta, v, 1e-5)
        assert rel(t[i], fd) <= 1e-5, field


def test_jet_vjp_is_adjoint_of_jet_tangent():
    arch, theta, x, rng = _random_setup(8, "tanh_sin")
    v = rng.standard_normal(arch.param_count)
    t = net.jet_param_tangent(arch, theta, x, v)
    cot = net.InputJet(*(rng.standard_normal(f.shape) for f in t))
    lhs = sum(float(np.sum(a * b)) for a, b in zip(cot, t))
    rhs = float(net.jet_vjp(arch, theta, x, cot) @ v)
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)
    shared = net.JetPass(arch, theta, x)
    assert np.array_equal(shared.vjp(cot), net.jet_vjp(arch, theta, x, cot))


def test_activation_derivatives_high_accuracy():
    z = np.linspace(-2, 2, 9)
    for name in ("tanh", "tanh_sin"):
        d = net._activation_derivs(name, z, 3)
        for k in range(3):
            fd = richardson_diff(lambda t: net._activation_derivs(name, t, 3)[k], z, np.ones_like(z), 1e-3)
            assert rel(d[k + 1], fd) <= 1e-9, (name, k)


def test_checkpoint_roundtrip(tmp_path, rng):
    arch = net.MlpArchitecture(2, 3, (7, 5), "tanh_sin")
    theta = rng.standard_normal(arch.param_count)
    p = tmp_path / "m.lsr1"
    net.save_checkpoint(p, arch, theta)
    data = p.read_bytes()
    assert data[:4] == b"LSR1"
    assert np.frombuffer(data[4:28], dtype="<u4").tolist() == [2, 3, 2, 7, 5, 2]
    arch2, theta2 = net.load_checkpoint(p)
    assert arch2 == arch
    assert np.array_equal(theta2, theta)


def test_checkpoint_corrupt(tmp_path):
    p = tmp_path / "bad.lsr1"
    p.write_bytes(b"LSR1\x02\x00")
    with pytest.raises(FileFormatError):
        net.load_checkpoint(p)
    p.write_bytes(b"XXXX")
    with pytest.raises(FileFormatError):
        net.load_checkpoint(p)
