"""Residual problems ``f(theta)`` and their Jacobian actions.

Every problem exposes the residual, the network outputs it is built from,
and four actions: ``J v``, ``J^T u`` (output Jacobian), ``(AJ) v`` and
``(AJ)^T u`` (residual Jacobian). Actions accept a single vector or a
matrix of stacked column vectors.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import net
from .errors import DimensionError, LsrError, UnsupportedActivationError

BURGERS_NU = 0.01 / np.pi


class ResidualProblem:
    """Base class; subclasses fill in the residual and the four actions."""

    arch: net.MlpArchitecture

    @property
    def param_dim(self):
        return self.arch.param_count

    @property
    def residual_dim(self):
        raise NotImplementedError

    @property
    def output_dim(self):
        raise NotImplementedError

    def residual_at(self, theta):
        raise NotImplementedError

    def output_at(self, theta):
        raise NotImplementedError

    def j_action(self, theta, v):
        raise NotImplementedError

    def jt_action(self, theta, u):
        raise NotImplementedError

    def aj_action(self, theta, v):
        raise NotImplementedError

    def gt_action(self, theta, u):
        """``(AJ)^T u``; the loss gradient is ``gt_action(theta, f(theta))``."""
        raise NotImplementedError

    def loss(self, theta):
        f = self.residual_at(theta)
        return 0.5 * float(f @ f)

    def loss_and_grad(self, theta):
        f = self.residual_at(theta)
        return 0.5 * float(f @ f), self.gt_action(theta, f)


def _cols(v):
    v = np.asarray(v, dtype=np.float64)
    return (v[:, None], True) if v.ndim == 1 else (v, False)


# -- data-driven residuals ----------------------------------------------------------


class SupervisedResidual(ResidualProblem):
    """``f = q(x) - targets`` with ``A = I``; rows ordered point-major."""

    def __init__(self, arch, x, targets):
        self.arch = arch
        self.x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.x.shape[1] != arch.input_dim and self.x.shape[0] == arch.input_dim:
            raise DimensionError(f"inputs must be (n, {arch.input_dim})")
        t = np.asarray(targets, dtype=np.float64)
        if t.size == len(self.x) * arch.output_dim:
            t = t.reshape(len(self.x), arch.output_dim)
        if t.shape != (len(self.x), arch.output_dim):
            raise DimensionError(f"targets have shape {t.shape}, expected ({len(self.x)}, {arch.output_dim})")
        self.targets = t

    @property
    def n_samples(self):
        return len(self.x)

    @property
    def residual_dim(self):
        return self.targets.size

    output_dim = residual_dim

    def take(self, idx):
        return SupervisedResidual(self.arch, self.x[idx], self.targets[idx])

    def output_at(self, theta):
        return net.forward(self.arch, theta, self.x).ravel()

    def residual_at(self, theta):
        return (net.forward(self.arch, theta, self.x) - self.targets).ravel()

    def j_action(self, theta, v):
        vm, single = _cols(v)
        out = net.jvp(self.arch, theta, self.x, vm).reshape(self.residual_dim, -1)
        return out[:, 0] if single else out

    aj_action = j_action

    def jt_action(self, theta, u):
        um, single = _cols(u)
        out = net.vjp(self.arch, theta, self.x, um.reshape(self.n_samples, self.arch.output_dim, -1))
        return out[:, 0] if single else out

    gt_action = jt_action


class ClassificationResidual(ResidualProblem):
    """``f = softmax(q) - onehot(label)`` per sample, flattened point-major."""

    def __init__(self, arch, x, labels, num_classes):
        if arch.output_dim != num_classes:
            raise DimensionError(f"network has {arch.output_dim} outputs but there are {num_classes} classes")
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise DimensionError(f"labels must lie in [0, {num_classes})")
        self.arch = arch
        self.x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if len(labels) != len(self.x):
            raise DimensionError("labels and inputs differ in length")
        self.labels = labels.astype(np.int64)
        self.num_classes = num_classes
        self.onehot = np.eye(num_classes)[self.labels]

    @property
    def n_samples(self):
        return len(self.x)

    @property
    def residual_dim(self):
        return self.n_samples * self.num_classes

    output_dim = residual_dim

    def take(self, idx):
        return ClassificationResidual(self.arch, self.x[idx], self.labels[idx], self.num_classes)

    def _softmax(self, theta):
        return softmax(net.forward(self.arch, theta, self.x))

    def output_at(self, theta):
        return net.forward(self.arch, theta, self.x).ravel()

    def residual_at(self, theta):
        return (self._softmax(theta) - self.onehot).ravel()

    def j_action(self, theta, v):
        vm, single = _cols(v)
        out = net.jvp(self.arch, theta, self.x, vm).reshape(self.residual_dim, -1)
        return out[:, 0] if single else out

    def jt_action(self, theta, u):
        um, single = _cols(u)
        out = net.vjp(self.arch, theta, self.x, um.reshape(self.n_samples, self.num_classes, -1))
        return out[:, 0] if single else out

    def _apply_a(self, s, t):
        # softmax Jacobian diag(s) - s s^T, per sample; t is (n, classes, k)
        s = s[:, :, None]
        return s * t - s * (s * t).sum(axis=1, keepdims=True)

    def aj_action(self, theta, v):
        vm, single = _cols(v)
        jv = net.jvp(self.arch, theta, self.x, vm)
        out = self._apply_a(self._softmax(theta), jv).reshape(self.residual_dim, -1)
        return out[:, 0] if single else out

    def gt_action(self, theta, u):
        um, single = _cols(u)
        au = self._apply_a(self._softmax(theta), um.reshape(self.n_samples, self.num_classes, -1))
        out = net.vjp(self.arch, theta, self.x, au)
        return out[:, 0] if single else out


class LinearResidual(ResidualProblem):
    """``f = A theta - b`` for a fixed matrix; ``q = A theta`` and ``J = A``.

    Not a network, but it speaks the same action protocol, so every LSR
    routine can be checked against dense least squares on it.
    """

    arch = None

    def __init__(self, a, b):
        self.a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        self.b = np.asarray(b, dtype=np.float64).ravel()
        if self.b.shape != (self.a.shape[0],):
            raise DimensionError(f"b has shape {self.b.shape}, expected ({self.a.shape[0]},)")

    @property
    def param_dim(self):
        return self.a.shape[1]

    @property
    def residual_dim(self):
        return self.a.shape[0]

    output_dim = residual_dim

    def output_at(self, theta):
        return self.a @ theta

    def residual_at(self, theta):
        return self.a @ theta - self.b

    def j_action(self, theta, v):
        return self.a @ v

    aj_action = j_action

    def jt_action(self, theta, u):
        return self.a.T @ u

    gt_action = jt_action


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- collocation ---------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Axis-aligned domain. ``time_axis`` gets initial rows at its lower end;
    ``periodic_axis`` gets value-periodicity pairs instead of Dirichlet faces."""

    lower: tuple
    upper: tuple
    periodic_axis: int = None
    time_axis: int = None

    def contains(self, pts, tol=0.0):
        pts = np.asarray(pts)
        return bool(np.all((pts >= np.asarray(self.lower) - tol) & (pts <= np.asarray(self.upper) + tol)))


POISSON_DOMAIN = Box((0.0, 0.0), (1.0, 1.0))
BURGERS_DOMAIN = Box((-1.0, 0.0), (1.0, 1.0), periodic_axis=0, time_axis=1)


@dataclass
class CollocationSet:
    interior: np.ndarray
    boundary: np.ndarray = None
    boundary_values: np.ndarray = None
    initial: np.ndarray = None
    initial_values: np.ndarray = None
    periodic_left: np.ndarray = None
    periodic_right: np.ndarray = None
    weights: dict = field(default_factory=lambda: {"interior": 1.0, "boundary": 1.0, "initial": 1.0})

    def __post_init__(self):
        d = self.interior.shape[1]
        for name in ("boundary", "initial", "periodic_left", "periodic_right"):
            if getattr(self, name) is None:
                setattr(self, name, np.empty((0, d)))
        for name, pts in (("boundary_values", self.boundary), ("initial_values", self.initial)):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(len(pts)))
        if any(w <= 0 for w in self.weights.values()):
            raise ValueError("collocation weights must be positive")


def sample_collocation(domain, n_interior, n_boundary=0, n_initial=0, seed=0):
    """Uniform interior points plus uniform points on each boundary face."""
    lo, hi = np.asarray(domain.lower, float), np.asarray(domain.upper, float)
    if lo.shape != hi.shape or np.any(hi <= lo):
        raise LsrError(f"empty domain {domain}")
    if min(n_interior, n_boundary, n_initial) < 0:
        raise ValueError("point counts must be non-negative")
    d = lo.size
    rng = np.random.default_rng(seed)
    interior = lo + (hi - lo) * rng.random((n_interior, d))

    faces = [a for a in range(d) if a not in (domain.periodic_axis, domain.time_axis)]
    n_faces = 2 * len(faces)
    boundary = np.empty((0, d))
    if n_faces and n_boundary:
        counts = np.full(n_faces, n_boundary // n_faces)
        counts[: n_boundary % n_faces] += 1
        parts = []
        for j, cnt in enumerate(counts):
            axis, side = faces[j // 2], j % 2
            pts = lo + (hi - lo) * rng.random((cnt, d))
            pts[:, axis] = hi[axis] if side else lo[axis]
            parts.append(pts)
        boundary = np.concatenate(parts)

    left = right = np.empty((0, d))
    if domain.periodic_axis is not None:
        n_pairs = n_boundary if not faces else 0
        left = lo + (hi - lo) * rng.random((n_pairs, d))
        left[:, domain.periodic_axis] = lo[domain.periodic_axis]
        right = left.copy()
        right[:, domain.periodic_axis] = hi[domain.periodic_axis]

    initial = np.empty((0, d))
    if domain.time_axis is not None:
        initial = lo + (hi - lo) * rng.random((n_initial, d))
        initial[:, domain.time_axis] = lo[domain.time_axis]

    return CollocationSet(interior, boundary, None, initial, None, left, right)


# -- PDE residuals --------------------------------------------------------------


def poisson_exact(x):
    x = np.atleast_2d(x)
    return np.sin(4 * np.pi * x[:, 0] ** 2) * np.sin(np.pi * x[:, 1])


def poisson_source(x):
    """Laplacian of ``sin(4 pi x^2) sin(pi y)``.

    q_xx = (8 pi cos(4 pi x^2) - 64 pi^2 x^2 sin(4 pi x^2)) sin(pi y)
    q_yy = -pi^2 sin(4 pi x^2) sin(pi y)
    """
    x = np.atleast_2d(x)
    px, py = x[:, 0], x[:, 1]
    a = 4 * np.pi * px**2
    sy = np.sin(np.pi * py)
    qxx = (8 * np.pi * np.cos(a) - 64 * np.pi**2 * px**2 * np.sin(a)) * sy
    qyy = -np.pi**2 * np.sin(a) * sy
    return qxx + qyy


@dataclass(frozen=True)
class TsonnConfig:
    q0: np.ndarray
    delta_tau: float

    def __post_init__(self):
        if not self.delta_tau > 0:
            raise ValueError("delta_tau must be positive")


class PdeResidual(ResidualProblem):
    """Stacked, group-weighted PDE residual.

    Row order: interior, Dirichlet boundary, initial, periodicity pairs.
    Outputs (for ``J``) are the network values at interior, boundary,
    initial, left-periodic and right-periodic points, in that order.

    With a :class:`TsonnConfig` attached, interior rows become
    ``base(q) + s (q - q0) / dtau`` where ``s`` is the problem's
    ``pseudo_time_sign``. This equals, up to an overall row sign, the
    pseudo-time residual ``(q - q0)/dtau - f(q)`` with ``f`` the evolution
    operator, and it reproduces ``base(q)`` exactly as ``dtau -> inf``.
    """

    pseudo_time_sign = 1.0

    def __init__(self, arch, coll, tsonn=None):
        if arch.input_dim != 2 or arch.output_dim != 1:
            raise DimensionError("PDE residuals need a 2-input, 1-output network")
        if arch.activation == "relu":
            raise UnsupportedActivationError("PDE residuals need second derivatives; relu is not supported")
        self.arch = arch
        self.coll = coll
        if tsonn is not None and len(tsonn.q0) != len(coll.interior):
            raise DimensionError(f"q0 has {len(tsonn.q0)} entries, interior has {len(coll.interior)} points")
        self.tsonn = tsonn
        c = coll
        self._out_pts = np.concatenate([c.interior, c.boundary, c.initial, c.periodic_left, c.periodic_right])
        self._n = (len(c.interior), len(c.boundary), len(c.initial), len(c.periodic_left))
        w = coll.weights
        self._sw = tuple(np.sqrt(w.get(k, 1.0)) for k in ("interior", "boundary", "initial", "boundary"))

    # subclass hooks: unweighted interior operator, its linearization, its adjoint
    def _interior(self, jet, pts):
        raise NotImplementedError

    def _interior_tangent(self, jet, tjet):
        raise NotImplementedError

    def _interior_cotangent(self, jet, c):
        raise NotImplementedError

    def with_tsonn(self, cfg):
        return type(self)(self.arch, self.coll, tsonn=cfg, **self._extra())

    def _extra(self):
        return {}

    @property
    def n_interior(self):
        return self._n[0]

    @property
    def residual_dim(self):
        ni, nb, n0, npair = self._n
        return ni + nb + n0 + npair

    @property
    def output_dim(self):
        return len(self._out_pts)

    def output_points(self):
        return self._out_pts

    def output_at(self, theta):
        return net.forward(self.arch, theta, self._out_pts)[:, 0]

    def _stack(self, interior, rest, boundary_ref=0.0, initial_ref=0.0):
        _, nb, n0, npair = self._n
        qb, q0, ql, qr = np.split(rest, np.cumsum([nb, n0, npair]))
        sw = self._sw
        return np.concatenate([sw[0] * interior, sw[1] * (qb - boundary_ref), sw[2] * (q0 - initial_ref), sw[3] * (ql - qr)])

    def j_action(self, theta, v):
        vm, single = _cols(v)
        out = net.jvp(self.arch, theta, self._out_pts, vm)[:, 0]
        return out[:, 0] if single else out

    def jt_action(self, theta, u):
        um, single = _cols(u)
        out = net.vjp(self.arch, theta, self._out_pts, um[:, None, :])
        return out[:, 0] if single else out

    def aj_action(self, theta, v):
        vm, single = _cols(v)
        ni = self._n[0]
        pts = self.coll.interior
        jet = net.input_jet(self.arch, theta, pts)
        tjet = net.jet_param_tangent(self.arch, theta, pts, vm)
        interior = self._interior_tangent(jet, tjet)
        if self.tsonn is not None:
            interior = interior + self.pseudo_time_sign * tjet.value[:, 0] / self.tsonn.delta_tau
        rest = net.jvp(self.arch, theta, self._out_pts[ni:], vm)[:, 0]
        out = self._stack(interior, rest)
        return out[:, 0] if single else out

    def _rows(self, theta, jp):
        interior = self._interior(jp.jet, self.coll.interior)
        if self.tsonn is not None:
            interior = interior + self.pseudo_time_sign * (jp.jet.value[:, 0] - self.tsonn.q0) / self.tsonn.delta_tau
        rest = net.forward(self.arch, theta, self._out_pts[self._n[0]:])[:, 0]
        return self._stack(interior, rest, self.coll.boundary_values, self.coll.initial_values)

    def residual_at(self, theta):
        return self._rows(theta, net.JetPass(self.arch, theta, self.coll.interior))

    def _pull(self, theta, jp, u):
        ni, nb, n0, _ = self._n
        sw = self._sw
        ui, ub, u0, up = np.split(u, np.cumsum([ni, nb, n0]))
        cot = self._interior_cotangent(jp.jet, sw[0] * ui)
        if self.tsonn is not None:
            cot.value[:, 0] += self.pseudo_time_sign * sw[0] * ui / self.tsonn.delta_tau
        g = jp.vjp(cot)
        rest = np.concatenate([sw[1] * ub, sw[2] * u0, sw[3] * up, -sw[3] * up])
        if rest.size:
            g = g + net.vjp(self.arch, theta, self._out_pts[ni:], rest[:, None])
        return g

    def gt_action(self, theta, u):
        u = np.asarray(u, dtype=np.float64)
        jp = net.JetPass(self.arch, theta, self.coll.interior)
        if u.ndim == 2:
            return np.stack([self._pull(theta, jp, col) for col in u.T], axis=1)
        return self._pull(theta, jp, u)

    def loss_and_grad(self, theta):
        jp = net.JetPass(self.arch, theta, self.coll.interior)
        f = self._rows(theta, jp)
        return 0.5 * float(f @ f), self._pull(theta, jp, f)

    def interior_values(self, q_out):
        """Slice interior entries out of an output-space vector."""
        return np.asarray(q_out)[: self._n[0]]


def _zero_cotangent(jet):
    return net.InputJet(np.zeros_like(jet.value), np.zeros_like(jet.grad), np.zeros_like(jet.hess_diag))


class PoissonResidual(PdeResidual):
    """``q_xx + q_yy - f_s`` on interior points, ``q - g`` on the boundary."""

    pseudo_time_sign = -1.0

    def __init__(self, arch, coll, source=poisson_source, tsonn=None):
        self.source = source
        self._fs = source(coll.interior) if len(coll.interior) else np.zeros(0)
        super().__init__(arch, coll, tsonn)

    def _extra(self):
        return {"source": self.source}

    def _interior(self, jet, pts):
        return jet.hess_diag[:, 0, 0] + jet.hess_diag[:, 1, 0] - self._fs

    def _interior_tangent(self, jet, tjet):
        return tjet.hess_diag[:, 0, 0] + tjet.hess_diag[:, 1, 0]

    def _interior_cotangent(self, jet, c):
        cot = _zero_cotangent(jet)
        cot.hess_diag[:, 0, 0] = c
        cot.hess_diag[:, 1, 0] = c
        return cot


class BurgersResidual(PdeResidual):
    """``q_t + q q_x - nu q_xx`` with inputs ordered ``(x, t)``."""

    pseudo_time_sign = 1.0

    def __init__(self, arch, coll, nu=BURGERS_NU, tsonn=None):
        self.nu = nu
        super().__init__(arch, coll, tsonn)

    def _extra(self):
        return {"nu": self.nu}

    def _interior(self, jet, pts):
        q = jet.value[:, 0]
        return jet.grad[:, 1, 0] + q * jet.grad[:, 0, 0] - self.nu * jet.hess_diag[:, 0, 0]

    def _interior_tangent(self, jet, tjet):
        q = jet.value[:, 0][:, None]
        qx = jet.grad[:, 0, 0][:, None]
        return tjet.grad[:, 1, 0] + q * tjet.grad[:, 0, 0] + qx * tjet.value[:, 0] - self.nu * tjet.hess_diag[:, 0, 0]

    def _interior_cotangent(self, jet, c):
        cot = _zero_cotangent(jet)
        cot.value[:, 0] = c * jet.grad[:, 0, 0]
        cot.grad[:, 0, 0] = c * jet.value[:, 0]
        cot.grad[:, 1, 0] = c
        cot.hess_diag[:, 0, 0] = -self.nu * c
        return cot


def supervised_residual(arch, x, targets):
    return SupervisedResidual(arch, x, targets)


def classification_residual(arch, x, labels, num_classes):
    return ClassificationResidual(arch, x, labels, num_classes)


def poisson_residual(arch, coll, source=poisson_source, bc=poisson_exact):
    coll = replace(coll, boundary_values=bc(coll.boundary) if len(coll.boundary) else np.zeros(0))
    return PoissonResidual(arch, coll, source)


def burgers_residual(arch, coll, nu=BURGERS_NU):
    # initial condition as printed: q(x, 0) = sin(pi x)
    coll = replace(coll, initial_values=np.sin(np.pi * coll.initial[:, 0]) if len(coll.initial) else np.zeros(0))
    return BurgersResidual(arch, coll, nu)


def tsonn_wrap(base, cfg):
    if not isinstance(base, PdeResidual):
        raise TypeError("tsonn_wrap needs a PDE residual")
    q0 = np.asarray(cfg.q0, dtype=np.float64)
    if q0.shape != (base.n_interior,):
        raise DimensionError(f"q0 has shape {q0.shape}, expected ({base.n_interior},)")
    return base.with_tsonn(TsonnConfig(q0, float(cfg.delta_tau)))
