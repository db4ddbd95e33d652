"""Iterative LSR for PDE residuals.

Each outer iteration runs one-shot LSR on the plain PDE residual (pseudo
time step 1e10) and then aligns the network with the refined interior
field by L-BFGS on the pseudo-time loss anchored at that field.
"""

import csv
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg
from scipy.interpolate import RegularGridInterpolator

from . import net
from .errors import LsrError
from .lsr import DEFAULT_OVERSAMPLE, lsr, lsr_predict_at
from .opt import LbfgsConfig, lbfgs_minimize
from .residual import BURGERS_NU, TsonnConfig, tsonn_wrap


@dataclass
class IlsrConfig:
    outer_iters: int = 5
    align_steps: int = 300
    delta_tau_align: float = 0.3
    delta_tau_lsr: float = 1e10
    rank: int = 400
    oversample: int = DEFAULT_OVERSAMPLE
    seed: int = 0
    lbfgs_history: int = 20
    strict_rank: bool = False

    def __post_init__(self):
        if self.outer_iters < 1 or self.align_steps < 1:
            raise ValueError("outer_iters and align_steps must be >= 1")
        if not (self.delta_tau_align > 0 and self.delta_tau_lsr > 0):
            raise ValueError("pseudo-time steps must be positive")


@dataclass
class IlsrTrace:
    iteration: list = field(default_factory=list)
    stage: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    rel_l2_error: list = field(default_factory=list)
    kappa: list = field(default_factory=list)
    y_norm: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    COLUMNS = ("iter", "stage", "loss", "rel_l2_error", "kappa", "y_norm", "seconds")

    def record(self, it, stage, loss, err, kappa, y_norm, seconds):
        self.iteration.append(it)
        self.stage.append(stage)
        self.loss.append(float(loss))
        self.rel_l2_error.append(float(err))
        self.kappa.append(float(kappa))
        self.y_norm.append(float(y_norm))
        self.seconds.append(float(seconds))

    def __len__(self):
        return len(self.iteration)

    def stage_values(self, stage, column="rel_l2_error"):
        vals = getattr(self, column)
        return [v for s, v in zip(self.stage, vals) if s == stage]

    def rows(self):
        return zip(self.iteration, self.stage, self.loss, self.rel_l2_error, self.kappa, self.y_norm, self.seconds)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for it, st, *vals in self.rows():
                w.writerow([it, st] + [repr(v) for v in vals])


@dataclass
class IlsrOutcome:
    theta_final: np.ndarray
    lsr_theta: np.ndarray
    last: object
    trace: IlsrTrace
    arch: net.MlpArchitecture

    def predict(self, x):
        """The refined predictor of the last LSR stage."""
        return lsr_predict_at(self.arch, self.lsr_theta, self.last.delta_theta, x)[:, 0]


def error_vs_reference(pred, ref):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if pred.shape != ref.shape:
        raise ValueError(f"prediction {pred.shape} and reference {ref.shape} differ")
    den = np.linalg.norm(ref)
    if den == 0.0:
        raise ValueError("reference has zero norm")
    return float(np.linalg.norm(pred - ref) / den)


def ilsr_run(problem, theta_init, cfg=None, reference=None, eval_points=None, log=None):
    """Alternate one-shot LSR and pseudo-time alignment.

    ``reference(points)`` gives the exact field on ``eval_points``; without
    it the error columns are NaN. ``theta`` changes only in the alignment
    stage. Errors are re-raised with the outer iteration attached.
    """
    cfg = cfg or IlsrConfig()
    arch = problem.arch
    theta = np.array(theta_init, dtype=np.float64)
    trace = IlsrTrace()
    ref = reference(eval_points) if reference is not None else None

    def err_of(values):
        return error_vs_reference(values, ref) if ref is not None else np.nan

    last = lsr_theta = None
    lbfgs = LbfgsConfig(history=cfg.lbfgs_history, max_steps=cfg.align_steps, grad_tol=0.0)
    for it in range(1, cfg.outer_iters + 1):
        try:
            t0 = time.perf_counter()
            q_int = net.forward(arch, theta, problem.coll.interior)[:, 0]
            lin = tsonn_wrap(problem, TsonnConfig(q_int, cfg.delta_tau_lsr))
            res, _ = lsr(lin, theta, cfg.rank, cfg.oversample, cfg.seed + it - 1, strict=cfg.strict_rank)
            last, lsr_theta = res, theta.copy()
            err = err_of(lsr_predict_at(arch, theta, res.delta_theta, eval_points)[:, 0]) if ref is not None else np.nan
            trace.record(it, "lsr", res.loss_after, err, res.kappa, res.y_norm, time.perf_counter() - t0)
            if log:
                log(f"iter {it} lsr   loss {res.loss_after:.3e} err {err:.3e} kappa {res.kappa:.2e}")

            t0 = time.perf_counter()
            anchor = problem.interior_values(res.q_lsr)
            align = tsonn_wrap(problem, TsonnConfig(anchor, cfg.delta_tau_align))
            theta, _ = lbfgs_minimize(align.loss_and_grad, theta, lbfgs)
            err = err_of(net.forward(arch, theta, eval_points)[:, 0]) if ref is not None else np.nan
            trace.record(it, "align", problem.loss(theta), err, np.nan, np.nan, time.perf_counter() - t0)
            if log:
                log(f"iter {it} align loss {trace.loss[-1]:.3e} err {err:.3e}")
        except LsrError as exc:
            raise type(exc)(f"outer iteration {it}: {exc}") from exc
    return IlsrOutcome(theta, lsr_theta, last, trace, arch)


def uniform_grid(lower, upper, n):
    """``n x n`` tensor grid over a 2-d box, flattened to (n*n, 2)."""
    xs = np.linspace(lower[0], upper[0], n)
    ys = np.linspace(lower[1], upper[1], n)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


# -- Burgers reference ---------------------------------------------------------------


class BurgersReference:
    """Crank-Nicolson finite differences for ``q_t + q q_x = nu q_xx``.

    Periodic in ``x`` on [-1, 1), initial value ``sin(pi x)``. Convection
    is central in conservative form; each step solves the implicit
    trapezoidal system by Newton iteration on a cyclic banded Jacobian.
    """

    def __init__(self, nx=2048, nt=2000, nu=BURGERS_NU, t_end=1.0, newton_tol=1e-12):
        self.nx, self.nt, self.nu = nx, nt, nu
        self.x = -1.0 + 2.0 * np.arange(nx) / nx
        self.t = np.linspace(0.0, t_end, nt + 1)
        self.u = self._solve(newton_tol)
        xs = np.append(self.x, 1.0)
        us = np.concatenate([self.u, self.u[:, :1]], axis=1)
        self._interp = RegularGridInterpolator((self.t, xs), us)

    def _rhs(self, u, dx):
        up, um = np.roll(u, -1), np.roll(u, 1)
        return -(up * up - um * um) / (4.0 * dx) + self.nu * (up - 2.0 * u + um) / dx**2

    def _jac(self, u, dx):
        n = self.nx
        idx = np.arange(n)
        up_i, um_i = (idx + 1) % n, (idx - 1) % n
        diag = np.full(n, -2.0 * self.nu / dx**2)
        upper = -u[up_i] / (2.0 * dx) + self.nu / dx**2
        lower = u[um_i] / (2.0 * dx) + self.nu / dx**2
        rows = np.concatenate([idx, idx, idx])
        cols = np.concatenate([idx, up_i, um_i])
        return scipy.sparse.csc_matrix((np.concatenate([diag, upper, lower]), (rows, cols)), shape=(n, n))

    def _solve(self, tol):
        dx = 2.0 / self.nx
        dt = self.t[1] - self.t[0]
        eye = scipy.sparse.identity(self.nx, format="csc")
        u = np.sin(np.pi * self.x)
        out = [u]
        for _ in range(self.nt):
            base = u + 0.5 * dt * self._rhs(u, dx)
            w = u.copy()
            for _ in range(50):
                g = w - 0.5 * dt * self._rhs(w, dx) - base
                step = scipy.sparse.linalg.spsolve(eye - 0.5 * dt * self._jac(w, dx), g)
                w -= step
                if np.max(np.abs(step)) <= tol * max(1.0, np.max(np.abs(w))):
                    break
            else:
                raise LsrError("Crank-Nicolson Newton iteration did not converge")
            u = w
            out.append(u)
        return np.array(out)

    def __call__(self, pts):
        pts = np.atleast_2d(pts)
        x = (pts[:, 0] + 1.0) % 2.0 - 1.0
        return self._interp(np.column_stack([pts[:, 1], x]))
