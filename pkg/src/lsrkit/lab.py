"""Analyses around a fixed linearization point.

Solver comparisons on the linearized least-squares problem, the loss
along the LSR direction, stationary-point probes, a scalar example where
the linear target is unreachable, and the output response of single
basis directions.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import linalg, net
from .errors import DimensionError, LsrError
from .lsr import DEFAULT_OVERSAMPLE, lsr
from .opt import AdamConfig, LbfgsConfig, adam_minimize, cgls_solve, lbfgs_minimize, lsqr_solve

SOLVERS = ("adam", "lbfgs", "cgls", "lsqr")
DEFAULT_BUDGETS = {"adam": 1000, "lbfgs": 200, "cgls": 200, "lsqr": 200}

# full-space direct solves materialize the matrix; refuse beyond this many entries
_DENSE_LIMIT = 1 << 26


@dataclass
class LinearizedProblem:
    """``min_y 0.5 ||G y + f0||^2`` for a fixed linear operator ``G``.

    ``G`` is ``AJV`` in the reduced mode and ``AJ`` in the full-space mode.
    """

    matvec: object
    rmatvec: object
    f0: np.ndarray
    n_cols: int
    dense: np.ndarray = field(default=None, repr=False)
    mode: str = "reduced"

    @classmethod
    def from_matrix(cls, g, f0, mode="reduced"):
        g = np.asarray(g, dtype=np.float64)
        f0 = np.asarray(f0, dtype=np.float64)
        if g.ndim != 2 or g.shape[0] != f0.size:
            raise DimensionError(f"operator {g.shape} does not match residual of size {f0.size}")
        return cls(lambda y: g @ y, lambda u: g.T @ u, f0, g.shape[1], g, mode)

    @classmethod
    def reduced(cls, problem, theta0, basis):
        """The reduced matrix ``AJV`` is small, so it is materialized."""
        return cls.from_matrix(problem.aj_action(theta0, basis.v), problem.residual_at(theta0))

    @classmethod
    def full_space(cls, problem, theta0):
        th = np.array(theta0, dtype=np.float64)
        return cls(lambda v: problem.aj_action(th, v), lambda u: problem.gt_action(th, u),
                   problem.residual_at(th), problem.param_dim, None, "full")

    @property
    def n_rows(self):
        return self.f0.size

    @property
    def rhs(self):
        return -self.f0

    def loss(self, y):
        r = self.matvec(y) + self.f0
        return 0.5 * float(r @ r)

    def loss_and_grad(self, y):
        r = self.matvec(y) + self.f0
        return 0.5 * float(r @ r), self.rmatvec(r)

    def matrix(self):
        if self.dense is None:
            if self.n_rows * self.n_cols > _DENSE_LIMIT:
                raise DimensionError(f"refusing to materialize a {self.n_rows} x {self.n_cols} operator")
            self.dense = self.matvec(np.eye(self.n_cols))
        return self.dense

    def direct_solve(self):
        g = self.matrix()
        if g.shape[0] >= g.shape[1]:
            return linalg.lstsq_qr(g, self.rhs)
        return np.linalg.lstsq(g, self.rhs, rcond=None)[0]


@dataclass
class SolverRow:
    solver: str
    iterations: int
    final_loss: float
    trace: list
    seconds: float = 0.0
    failed: bool = False
    message: str = ""

    COLUMNS = ("solver", "iterations", "final_loss", "seconds", "failed")

    def as_row(self):
        return (self.solver, self.iterations, self.final_loss, self.seconds, self.failed)


def _run_solver(name, lp, budget, seed, adam_cfg):
    y0 = np.zeros(lp.n_cols)
    if name == "adam":
        cfg = adam_cfg or AdamConfig()
        cfg = AdamConfig(**{**cfg.__dict__, "max_steps": budget})
        y, tr = adam_minimize(lp.loss_and_grad, y0, cfg, seed=seed, record_every=max(1, budget // 1000))
        return y, tr.step[-1], tr.loss
    if name == "lbfgs":
        y, tr = lbfgs_minimize(lp.loss_and_grad, y0, LbfgsConfig(max_steps=budget, grad_tol=0.0))
        return y, len(tr), tr.loss
    op = (lp.matvec, lp.rmatvec)
    if name == "cgls":
        y, norms = cgls_solve(op, lp.rhs, max_iters=budget, tol=0.0)
    elif name == "lsqr":
        y, norms = lsqr_solve(op, lp.rhs, max_iters=budget, tol=0.0)
    else:
        raise ValueError(f"unknown solver {name!r}; choose from {SOLVERS}")
    return y, len(norms) - 1, [0.5 * n * n for n in norms]


def compare_solvers(lp, budgets=None, seed=0, solvers=SOLVERS, adam_cfg=None):
    """Each solver from ``y = 0`` on ``lp``, then the direct QR solve.

    ``final_loss`` is recomputed from the returned iterate. A failing solver
    yields a flagged row instead of an exception.
    """
    budgets = {**DEFAULT_BUDGETS, **(budgets or {})}
    rows = []
    for name in solvers:
        b = int(budgets[name])
        if b < 1:
            raise ValueError(f"budget for {name} must be >= 1")
        t0 = time.perf_counter()
        try:
            y, iters, trace = _run_solver(name, lp, b, seed, adam_cfg)
            rows.append(SolverRow(name, iters, lp.loss(y), list(trace), time.perf_counter() - t0))
        except (LsrError, ArithmeticError, np.linalg.LinAlgError) as exc:
            rows.append(SolverRow(name, 0, np.nan, [], time.perf_counter() - t0, True, str(exc)))
    t0 = time.perf_counter()
    try:
        y = lp.direct_solve()
        loss = lp.loss(y)
        rows.append(SolverRow("direct", 1, loss, [loss], time.perf_counter() - t0))
    except (LsrError, ArithmeticError, np.linalg.LinAlgError) as exc:
        rows.append(SolverRow("direct", 0, np.nan, [], time.perf_counter() - t0, True, str(exc)))
    return rows


def solver_trace_rows(rows):
    """Long-format ``(solver, index, loss)`` rows of every solver trace."""
    return [(r.solver, i, v) for r in rows for i, v in enumerate(r.trace)]


# -- direction scan ---------------------------------------------------------------


def default_alphas():
    """33 log-spaced points on [1e-4, 2], plus 0, 1, -1e-2 and -1."""
    return sorted({0.0, 1.0, -1e-2, -1.0, *np.logspace(-4, np.log10(2.0), 33).tolist()})


@dataclass
class ScanRow:
    alpha: float
    nonlinear_loss: float
    linearized_loss: float
    flagged: bool = False

    COLUMNS = ("alpha", "nonlinear_loss", "linearized_loss", "flagged")

    def as_row(self):
        return (self.alpha, self.nonlinear_loss, self.linearized_loss, self.flagged)


def direction_scan(problem, theta0, delta_theta, alphas=None):
    """Nonlinear and linearized loss along ``theta0 + alpha * delta_theta``."""
    alphas = default_alphas() if alphas is None else [float(a) for a in alphas]
    if 0.0 not in alphas:
        raise ValueError("alphas must include 0")
    theta0 = np.asarray(theta0, dtype=np.float64)
    f0 = problem.residual_at(theta0)
    g = problem.aj_action(theta0, delta_theta)
    rows = []
    for a in alphas:
        fl = f0 + a * g
        lin = 0.5 * float(fl @ fl)
        if a == 0.0:
            nonlin = 0.5 * float(f0 @ f0)
        else:
            with np.errstate(over="ignore", invalid="ignore"):
                fn = problem.residual_at(theta0 + a * delta_theta)
                nonlin = 0.5 * float(fn @ fn)
        rows.append(ScanRow(a, nonlin, lin, not (np.isfinite(nonlin) and np.isfinite(lin))))
    return rows


# -- stationarity -------------------------------------------------------------------


@dataclass
class StationarityReport:
    grad_norm: float
    residual_norm: float
    correction_effect: float
    loss_before: float
    loss_after: float
    rank: int


def stationarity_probe(problem, theta0, rank=None, oversample=DEFAULT_OVERSAMPLE, seed=0):
    """``||(AJ)^T f||`` and the relative size ``||(AJ) dtheta*|| / ||f||`` of the LSR correction.

    ``rank`` defaults to the largest one the sketch allows.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    f = problem.residual_at(theta0)
    grad_norm = float(np.linalg.norm(problem.gt_action(theta0, f)))
    if rank is None:
        rank = max(1, min(problem.param_dim, problem.output_dim - oversample))
    res, basis = lsr(problem, theta0, rank, oversample, seed, strict=False)
    fn = float(np.linalg.norm(f))
    effect = float(np.linalg.norm(res.f_lsr - f)) / fn if fn > 0 else 0.0
    return StationarityReport(grad_norm, fn, effect, res.loss_before, res.loss_after, basis.rank)


# -- scalar example -----------------------------------------------------------------


SCALAR_TARGET = 1.0


def scalar_q(theta):
    return (theta - 1.0) ** 2 + 2.0


def scalar_dq(theta):
    return 2.0 * (theta - 1.0)


@dataclass
class ScalarRow:
    theta0: float
    q: float
    dq: float
    delta_theta: float
    linearized_prediction: float
    linearized_residual: float
    nonlinear_at_step: float

    COLUMNS = ("theta0", "q", "dq", "delta_theta", "linearized_prediction", "linearized_residual",
               "nonlinear_at_step")

    def as_row(self):
        return tuple(getattr(self, c) for c in self.COLUMNS)


@dataclass
class ScalarDemo:
    rows: list
    target: float
    min_q: float
    feasible: bool

    def summary(self):
        return (f"target {self.target:g}, min q = {self.min_q:g}: "
                f"{'feasible' if self.feasible else 'infeasible'} for the nonlinear model")


def scalar_demo(thetas=(0.0, 0.5, 1.0, 2.0)):
    """Linearize ``q(theta) = (theta - 1)^2 + 2`` toward the target 1.

    Where ``q' = 0`` the step is reported as 0: the linear model is flat
    there and cannot move toward the target.
    """
    rows = []
    for t in thetas:
        t = float(t)
        q, dq = scalar_q(t), scalar_dq(t)
        step = (SCALAR_TARGET - q) / dq if dq != 0.0 else 0.0
        pred = q + dq * step
        rows.append(ScalarRow(t, q, dq, step, pred, abs(pred - SCALAR_TARGET), scalar_q(t + step)))
    min_q = scalar_q(1.0)
    return ScalarDemo(rows, SCALAR_TARGET, min_q, min_q <= SCALAR_TARGET)


# -- subspace modes -----------------------------------------------------------------


def subspace_modes(arch, theta0, basis, x, indices):
    """``J v_i`` on the points ``x`` for the chosen basis columns.

    Returns ``(len(indices), n, output_dim)``; each mode is scaled to unit
    max-absolute value (an identically zero mode stays zero).
    """
    indices = [int(i) for i in indices]
    bad = [i for i in indices if not 0 <= i < basis.rank]
    if bad:
        raise IndexError(f"mode indices {bad} outside [0, {basis.rank})")
    if not indices:
        return np.zeros((0, len(x), arch.output_dim))
    modes = net.jvp(arch, theta0, x, basis.v[:, indices])  # (n, out, k)
    modes = np.moveaxis(modes, -1, 0)
    scale = np.abs(modes).reshape(len(indices), -1).max(axis=1)
    scale[scale == 0.0] = 1.0
    return modes / scale[:, None, None]


def zero_crossings(values):
    """Sign changes along a 1-d sequence, ignoring exact zeros."""
    s = np.sign(np.asarray(values, dtype=np.float64))
    s = s[s != 0]
    return int(np.count_nonzero(s[1:] != s[:-1]))
