"""Dense feed-forward network with hand-derived derivative propagation.

All passes share one representation: a layer state of shape ``(n, C, w)``
where channel 0 is the value and, for input jets on ``d`` axes, channels
``1..d`` hold first derivatives and ``d+1..2d`` the pure second
derivatives with respect to the inputs. Parameter tangents add a leading
tangent axis: ``(n, k, C, w)``.

Weights are stored ``(fan_in, fan_out)`` so a layer is ``a @ W + b``; the
flat parameter vector concatenates, layer by layer, the row-major weights
followed by the biases.
"""

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DimensionError, FileFormatError, LsrError, UnsupportedActivationError

ACTIVATIONS = ("tanh", "relu", "tanh_sin")
CHECKPOINT_MAGIC = b"LSR1"

# elements per tangent-batched array before chunking over tangents
_CHUNK_ELEMENTS = 1 << 23


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int
    output_dim: int
    hidden: tuple = ()
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; choose from {ACTIVATIONS}")
        if min((self.input_dim, self.output_dim) + self.hidden) < 1:
            raise ValueError("all layer widths must be >= 1")

    @property
    def widths(self):
        return (self.input_dim,) + self.hidden + (self.output_dim,)

    @property
    def n_layers(self):
        return len(self.hidden) + 1

    @property
    def param_count(self):
        w = self.widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(self.n_layers))

    def layer_offsets(self):
        """``(w_start, b_start, b_end, fan_in, fan_out)`` for every layer."""
        out, off = [], 0
        w = self.widths
        for i in range(self.n_layers):
            fi, fo = w[i], w[i + 1]
            out.append((off, off + fi * fo, off + fi * fo + fo, fi, fo))
            off += fi * fo + fo
        return out


class InputJet(NamedTuple):
    """Value and pure input derivatives; ``grad[n, i, o] = dq_o/dx_i``.

    When produced by :func:`jet_param_tangent` with several tangents, every
    field carries a trailing tangent axis.
    """

    value: np.ndarray
    grad: np.ndarray
    hess_diag: np.ndarray


def unflatten(arch, theta):
    """Per-layer ``(W, b)`` views into ``theta``."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (arch.param_count,):
        raise DimensionError(f"theta has shape {theta.shape}, expected ({arch.param_count},)")
    return [
        (theta[ws:bs].reshape(fi, fo), theta[bs:be])
        for ws, bs, be, fi, fo in arch.layer_offsets()
    ]


def flatten(params):
    return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in params])


def init_params(arch, seed):
    """Glorot-uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(arch.param_count)
    for ws, bs, _, fi, fo in arch.layer_offsets():
        limit = np.sqrt(6.0 / (fi + fo))
        theta[ws:bs] = rng.uniform(-limit, limit, size=fi * fo)
    return theta


# -- activations ------------------------------------------------------------


def _activation_derivs(name, z, order):
    """Return ``[s(z), s'(z), ..., s^(order)(z)]``."""
    if name == "tanh":
        t = np.tanh(z)
        out = [t]
        if order >= 1:
            d1 = 1.0 - t * t
            out.append(d1)
        if order >= 2:
            out.append(-2.0 * t * d1)
        if order >= 3:
            out.append(d1 * (4.0 * t * t - 2.0 * d1))
        return out
    if name == "relu":
        if order >= 2:
            raise UnsupportedActivationError("relu has no pointwise second derivative; use tanh or tanh_sin")
        out = [np.maximum(z, 0.0)]
        if order >= 1:
            out.append((z > 0.0).astype(np.float64))
        return out
    if name == "tanh_sin":
        # phi(z) = tanh(sin(pi (z + 1))) + z
        arg = np.pi * (z + 1.0)
        s = np.sin(arg)
        t = np.tanh(s)
        out = [t + z]
        if order >= 1:
            c = np.cos(arg)
            s1 = np.pi * c
            h1 = 1.0 - t * t
            out.append(h1 * s1 + 1.0)
        if order >= 2:
            s2 = -np.pi**2 * s
            h2 = -2.0 * t * h1
            out.append(h2 * s1 * s1 + h1 * s2)
        if order >= 3:
            s3 = -np.pi**3 * c
            h3 = h1 * (4.0 * t * t - 2.0 * h1)
            out.append(h3 * s1**3 + 3.0 * h2 * s1 * s2 + h1 * s3)
        return out
    raise ValueError(f"unknown activation {name!r}")


# -- core passes --------------------------------------------------------------


class _Trace:
    """Primal jet pass with everything the tangent and reverse passes need."""

    def __init__(self, arch, theta, x, d):
        self.arch = arch
        self.d = d
        self.params = unflatten(arch, theta)
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1 and arch.input_dim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[1] != arch.input_dim:
            raise DimensionError(f"inputs have shape {x.shape}, expected (n, {arch.input_dim})")
        n = x.shape[0]
        order = 1 if d == 0 else 3
        if d and arch.activation == "relu":
            raise UnsupportedActivationError("input jets need a twice-differentiable activation; relu is not")
        s = np.zeros((n, 1 + 2 * d, arch.input_dim))
        s[:, 0] = x
        for i in range(d):
            s[:, 1 + i, i] = 1.0
        self.inputs = []  # layer input states (n, C, fan_in)
        self.derivs = []  # activation derivatives at hidden pre-activations
        self.pre = []  # hidden pre-activation states (n, C, fan_out)
        last = arch.n_layers - 1
        for li, (w, b) in enumerate(self.params):
            self.inputs.append(s)
            z = s @ w
            z[:, 0] += b
            if li == last:
                s = z
                break
            sig = _activation_derivs(arch.activation, z[:, 0], order)
            self.pre.append(z)
            self.derivs.append(sig)
            s = self._act(z, sig)
        self.out = s

    def _act(self, z, sig):
        d = self.d
        out = np.empty_like(z)
        out[:, 0] = sig[0]
        if d:
            g = z[:, 1 : 1 + d]
            h = z[:, 1 + d :]
            s1 = sig[1][:, None]
            out[:, 1 : 1 + d] = s1 * g
            out[:, 1 + d :] = sig[2][:, None] * g * g + s1 * h
        return out

    def tangent(self, vk):
        """Push ``k`` parameter tangents ``vk`` (k, m) through the pass."""
        arch, d = self.arch, self.d
        k = vk.shape[0]
        offsets = arch.layer_offsets()
        last = arch.n_layers - 1
        t = None
        for li, ((w, _), (ws, bs, be, fi, fo)) in enumerate(zip(self.params, offsets)):
            s_in = self.inputs[li]
            n, c, _ = s_in.shape
            dw = vk[:, ws:bs].reshape(k, fi, fo)
            dz = (s_in.reshape(n * c, fi) @ dw.transpose(1, 0, 2).reshape(fi, k * fo)).reshape(n, c, k, fo)
            dz = dz.transpose(0, 2, 1, 3).copy()
            if t is not None:
                dz += t @ w
            dz[:, :, 0] += vk[:, bs:be]
            if li == last:
                return dz
            t = self._act_tangent(li, dz)

    def _act_tangent(self, li, dz):
        d = self.d
        sig = self.derivs[li]
        s1 = sig[1][:, None]
        out = np.empty_like(dz)
        dz0 = dz[:, :, 0]
        out[:, :, 0] = s1 * dz0
        if d:
            z = self.pre[li]
            g = z[:, None, 1 : 1 + d]
            h = z[:, None, 1 + d :]
            s1c = s1[:, :, None]
            s2 = sig[2][:, None, None]
            s3 = sig[3][:, None, None]
            dzc = dz0[:, :, None]
            dg = dz[:, :, 1 : 1 + d]
            dh = dz[:, :, 1 + d :]
            out[:, :, 1 : 1 + d] = s2 * dzc * g + s1c * dg
            out[:, :, 1 + d :] = (s3 * g * g + s2 * h) * dzc + 2.0 * s2 * g * dg + s1c * dh
        return out

    def reverse(self, bar):
        """Pull ``k`` output cotangents ``bar`` (n, k, C, out) back to (k, m)."""
        arch = self.arch
        n, k = bar.shape[:2]
        grad = np.empty((k, arch.param_count))
        offsets = arch.layer_offsets()
        for li in range(arch.n_layers - 1, -1, -1):
            w, _ = self.params[li]
            ws, bs, be, fi, fo = offsets[li]
            s_in = self.inputs[li]
            c = s_in.shape[1]
            zb = bar.transpose(0, 2, 1, 3).reshape(n * c, k * fo)
            gw = (s_in.reshape(n * c, fi).T @ zb).reshape(fi, k, fo)
            grad[:, ws:bs] = gw.transpose(1, 0, 2).reshape(k, fi * fo)
            grad[:, bs:be] = bar[:, :, 0].sum(axis=0)
            if li == 0:
                break
            bar = self._act_reverse(li - 1, bar @ w.T)
        return grad

    def _reverse_coefs(self, li):
        # cached per layer: s2 * g and s3 * g^2 + s2 * h
        cache = self.__dict__.setdefault("_coefs", {})
        if li not in cache:
            d, sig, z = self.d, self.derivs[li], self.pre[li]
            g, h = z[:, 1 : 1 + d], z[:, 1 + d :]
            s2g = sig[2][:, None] * g
            cache[li] = (s2g, (sig[3][:, None] * g) * g + sig[2][:, None] * h)
        return cache[li]

    def _act_reverse(self, li, ab):
        d = self.d
        sig = self.derivs[li]
        s1 = sig[1][:, None]
        zb = np.empty_like(ab)
        z0 = s1 * ab[:, :, 0]
        if d:
            s2g, hcoef = self._reverse_coefs(li)
            s1c = s1[:, :, None]
            gb = ab[:, :, 1 : 1 + d]
            hb = ab[:, :, 1 + d :]
            z0 = z0 + np.einsum("nkcw,ncw->nkw", gb, s2g) + np.einsum("nkcw,ncw->nkw", hb, hcoef)
            zb[:, :, 1 : 1 + d] = s1c * gb + 2.0 * s2g[:, None] * hb
            zb[:, :, 1 + d :] = s1c * hb
        zb[:, :, 0] = z0
        return zb


def _chunks(trace, k):
    n, c = trace.out.shape[:2]
    width = max(trace.arch.widths)
    step = max(1, _CHUNK_ELEMENTS // max(1, n * c * width))
    return [slice(i, min(i + step, k)) for i in range(0, k, step)]


def _tangent_matrix(arch, v):
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    vm = v[:, None] if single else v
    if vm.ndim != 2 or vm.shape[0] != arch.param_count:
        raise DimensionError(f"tangent has shape {v.shape}, expected ({arch.param_count},) or ({arch.param_count}, k)")
    return vm, single


def _push(trace, vm):
    """Tangent outputs stacked as ``(n, C, out, k)``."""
    n, c, o = trace.out.shape
    k = vm.shape[1]
    res = np.empty((n, c, o, k))
    vt = np.ascontiguousarray(vm.T)
    for sl in _chunks(trace, k):
        res[..., sl] = trace.tangent(vt[sl]).transpose(0, 2, 3, 1)
    return res


def _pull(trace, bar):
    """Cotangents ``bar`` of shape ``(n, C, out, k)`` to ``(m, k)``."""
    k = bar.shape[-1]
    res = np.empty((trace.arch.param_count, k))
    for sl in _chunks(trace, k):
        res[:, sl] = trace.reverse(np.ascontiguousarray(bar[..., sl].transpose(0, 3, 1, 2))).T
    return res


def _split_jet(arr, d):
    return InputJet(arr[:, 0], arr[:, 1 : 1 + d], arr[:, 1 + d :])


# -- public API -----------------------------------------------------------------


def forward(arch, theta, x):
    """Network outputs ``(n, output_dim)`` at the points ``x``."""
    return _Trace(arch, theta, x, 0).out[:, 0]


def jvp(arch, theta, x, v):
    """``J v`` with ``J = dq/dtheta``; ``(n, out)`` or ``(n, out, k)`` for stacked tangents."""
    vm, single = _tangent_matrix(arch, v)
    res = _push(_Trace(arch, theta, x, 0), vm)[:, 0]
    return res[..., 0] if single else res


def vjp(arch, theta, x, u):
    """``J^T u`` for cotangents ``u`` of shape ``(n, out)`` or ``(n, out, k)``."""
    trace = _Trace(arch, theta, x, 0)
    u = np.asarray(u, dtype=np.float64)
    n, _, o = trace.out.shape
    single = u.ndim == 2
    um = u[..., None] if single else u
    if um.shape[:2] != (n, o):
        raise DimensionError(f"cotangent has shape {u.shape}, expected ({n}, {o}[, k])")
    res = _pull(trace, um[:, None])
    return res[:, 0] if single else res


def input_jet(arch, theta, x):
    """Value, first and pure second input derivatives of the network."""
    x = np.asarray(x, dtype=np.float64)
    d = arch.input_dim
    return _split_jet(_Trace(arch, theta, x, d).out, d)


def jet_param_tangent(arch, theta, x, v):
    """Directional derivative of :func:`input_jet` along parameter tangent(s) ``v``."""
    vm, single = _tangent_matrix(arch, v)
    d = arch.input_dim
    res = _push(_Trace(arch, theta, x, d), vm)
    jet = _split_jet(res, d)
    if single:
        return InputJet(*(a[..., 0] for a in jet))
    return jet


class JetPass:
    """One primal jet evaluation whose adjoint can be pulled afterwards."""

    def __init__(self, arch, theta, x):
        self._trace = _Trace(arch, theta, x, arch.input_dim)
        self.jet = _split_jet(self._trace.out, arch.input_dim)

    def vjp(self, cot):
        return _jet_pull(self._trace, cot)


def jet_vjp(arch, theta, x, cot):
    """Adjoint of :func:`jet_param_tangent` for a single jet cotangent."""
    return _jet_pull(_Trace(arch, theta, x, arch.input_dim), cot)


def _jet_pull(trace, cot):
    d = trace.d
    n, c, o = trace.out.shape
    bar = np.zeros((n, c, o, 1))
    bar[:, 0, :, 0] = cot.value
    bar[:, 1 : 1 + d, :, 0] = cot.grad
    bar[:, 1 + d :, :, 0] = cot.hess_diag
    return _pull(trace, bar)[:, 0]


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(path, arch, theta):
    theta = np.asarray(theta, dtype="<f8")
    if theta.shape != (arch.param_count,):
        raise DimensionError("theta does not match architecture")
    header = [arch.input_dim, arch.output_dim, len(arch.hidden), *arch.hidden, ACTIVATIONS.index(arch.activation)]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack(f"<{len(header)}I", *header))
        fh.write(theta.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FileFormatError(f"{path}: not an LSR1 checkpoint")
    pos = 4

    def u32():
        nonlocal pos
        if pos + 4 > len(data):
            raise FileFormatError(f"{path}: truncated architecture header")
        (val,) = struct.unpack_from("<I", data, pos)
        pos += 4
        return val

    input_dim, output_dim, n_hidden = u32(), u32(), u32()
    hidden = tuple(u32() for _ in range(n_hidden))
    act = u32()
    if act >= len(ACTIVATIONS):
        raise FileFormatError(f"{path}: unknown activation id {act}")
    try:
        arch = MlpArchitecture(input_dim, output_dim, hidden, ACTIVATIONS[act])
    except ValueError as exc:
        raise FileFormatError(f"{path}: {exc}") from None
    if (len(data) - pos) != 8 * arch.param_count:
        raise FileFormatError(f"{path}: expected {arch.param_count} parameters, found {(len(data) - pos) / 8:g}")
    theta = np.frombuffer(data, dtype="<f8", offset=pos).astype(np.float64)
    return arch, theta
