"""Adam, L-BFGS, CGLS and LSQR on flat parameter vectors.

Adam and L-BFGS talk to the problem through a loss/gradient oracle, so the
same code trains networks, fits reduced linear problems and runs the
I-LSR alignment stage. CGLS and LSQR take the operator as a pair of
callables ``(matvec, rmatvec)``.
"""

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericalError, SolverBreakdown


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: int = 1000
    plateau_factor: float = 0.5
    plateau_patience: int = 20
    plateau_threshold: float = 1e-4
    plateau_window: int = 10
    min_lr: float = 0.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


@dataclass
class LbfgsConfig:
    history: int = 20
    max_steps: int = 500
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    grad_tol: float = 1e-12
    max_line_search: int = 25

    def __post_init__(self):
        if self.history < 1:
            raise ValueError("history must be >= 1")
        if not 0 < self.wolfe_c1 < self.wolfe_c2 < 1:
            raise ValueError("need 0 < c1 < c2 < 1")


@dataclass
class OptTrace:
    step: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    COLUMNS = ("step", "loss", "grad_norm", "lr", "seconds")

    def record(self, step, loss, grad_norm, lr, seconds):
        if self.step and step <= self.step[-1]:
            raise ValueError("trace steps must increase")
        self.step.append(int(step))
        self.loss.append(float(loss))
        self.grad_norm.append(float(grad_norm))
        self.lr.append(float(lr))
        self.seconds.append(float(seconds))

    def __len__(self):
        return len(self.step)

    @property
    def final_loss(self):
        return self.loss[-1] if self.loss else np.nan

    def rows(self):
        return zip(self.step, self.loss, self.grad_norm, self.lr, self.seconds)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in self.rows():
                w.writerow([row[0]] + [repr(v) for v in row[1:]])


class _Plateau:
    """ReduceLROnPlateau in 'min' mode with a relative threshold."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.lr = cfg.lr
        self.best = np.inf
        self.bad = 0

    def update(self, value):
        if value < self.best * (1.0 - self.cfg.plateau_threshold):
            self.best = value
            self.bad = 0
        else:
            self.bad += 1
            if self.bad > self.cfg.plateau_patience:
                self.lr = max(self.lr * self.cfg.plateau_factor, self.cfg.min_lr)
                self.bad = 0
        return self.lr


def _finite_or_raise(loss, step):
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss} at step {step}")


def adam_minimize(fun, theta, cfg=None, n_samples=None, batch_size=None, seed=0, monitor=None, record_every=1):
    """Adam with bias correction and a plateau learning-rate scheduler.

    Full-batch when ``n_samples`` is None: ``fun(theta) -> (loss, grad)``;
    the scheduler then sees the mean loss of every ``plateau_window``
    steps. Mini-batch otherwise: ``fun(theta, idx)`` sees a slice of a per-epoch permutation drawn from
    ``seed`` (a short final batch is kept), and the scheduler is fed once
    per epoch with ``monitor(theta)`` or, without a monitor, the mean batch
    loss of that epoch.
    """
    cfg = cfg or AdamConfig()
    theta = np.array(theta, dtype=np.float64)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    sched = _Plateau(cfg)
    trace = OptTrace()
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    b1, b2 = cfg.beta1, cfg.beta2

    def batches():
        while True:
            perm = rng.permutation(n_samples)
            for s in range(0, n_samples, batch_size):
                yield perm[s : s + batch_size], s + batch_size >= n_samples

    stream = batches() if n_samples is not None else None
    epoch_losses = []
    for step in range(1, cfg.max_steps + 1):
        if stream is None:
            loss, g = fun(theta)
            epoch_end = step % cfg.plateau_window == 0
        else:
            idx, epoch_end = next(stream)
            loss, g = fun(theta, idx)
        _finite_or_raise(loss, step)
        lr = sched.lr
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        mhat = m / (1 - b1**step)
        vhat = v / (1 - b2**step)
        theta -= lr * mhat / (np.sqrt(vhat) + cfg.eps)
        epoch_losses.append(loss)
        if epoch_end:
            value = monitor(theta) if monitor is not None else float(np.mean(epoch_losses))
            sched.update(value)
            epoch_losses = []
        if step % record_every == 0 or step == cfg.max_steps:
            trace.record(step, loss, np.linalg.norm(g), lr, time.perf_counter() - t0)
    return theta, trace


# -- L-BFGS ---------------------------------------------------------------------


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic interpolating (f, f') at a and b, or None."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    rad = d1 * d1 - ga * gb
    if rad < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(rad)
    x = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2)
    return x if np.isfinite(x) else None


def _strong_wolfe(phi, f0, g0, alpha, c1, c2, max_iter):
    """Line search satisfying the strong Wolfe conditions.

    ``phi(a) -> (f, dphi, payload)``. Returns ``(alpha, f, payload, evals)``
    or ``None`` on failure.
    """
    a_prev, f_prev, g_prev = 0.0, f0, g0
    evals = 0
    for i in range(max_iter):
        f, g, pay = phi(alpha)
        evals += 1
        if not np.isfinite(f) or f > f0 + c1 * alpha * g0 or (i > 0 and f >= f_prev):
            return _zoom(phi, f0, g0, a_prev, f_prev, g_prev, alpha, f, g, c1, c2, max_iter - evals, evals)
        if abs(g) <= -c2 * g0:
            return alpha, f, pay, evals
        if g >= 0:
            return _zoom(phi, f0, g0, alpha, f, g, a_prev, f_prev, g_prev, c1, c2, max_iter - evals, evals)
        a_prev, f_prev, g_prev = alpha, f, g
        alpha *= 2.0
    return None


def _zoom(phi, f0, g0, lo, flo, glo, hi, fhi, ghi, c1, c2, max_iter, evals):
    for _ in range(max(max_iter, 0)):
        trial = None
        if np.isfinite(fhi):
            trial = _cubic_min(lo, flo, glo, hi, fhi, ghi)
        left, right = min(lo, hi), max(lo, hi)
        width = right - left
        if trial is None or not (left + 0.1 * width <= trial <= right - 0.1 * width):
            trial = 0.5 * (lo + hi)
        f, g, pay = phi(trial)
        evals += 1
        if not np.isfinite(f) or f > f0 + c1 * trial * g0 or f >= flo:
            hi, fhi, ghi = trial, f, g
        else:
            if abs(g) <= -c2 * g0:
                return trial, f, pay, evals
            if g * (hi - lo) >= 0:
                hi, fhi, ghi = lo, flo, glo
            lo, flo, glo = trial, f, g
        if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
            break
    return None


def _two_loop(g, s_hist, y_hist):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a))
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def lbfgs_minimize(fun, theta, cfg=None):
    """L-BFGS with strong-Wolfe line search; ``fun(theta) -> (loss, grad)``.

    ``cfg.max_steps`` counts accepted parameter updates. When the line
    search fails, one backtracking steepest-descent step is taken instead
    and the curvature history is cleared.
    """
    cfg = cfg or LbfgsConfig()
    theta = np.array(theta, dtype=np.float64)
    trace = OptTrace()
    t0 = time.perf_counter()
    loss, g = fun(theta)
    _finite_or_raise(loss, 0)
    s_hist, y_hist = [], []
    for step in range(1, cfg.max_steps + 1):
        gnorm = np.linalg.norm(g)
        if gnorm <= cfg.grad_tol:
            break
        d = _two_loop(g, s_hist, y_hist)
        gd = g @ d
        if not gd < 0:
            s_hist, y_hist = [], []
            d, gd = -g, -gnorm**2
        alpha0 = min(1.0, 1.0 / np.abs(g).sum()) if not s_hist else 1.0

        def phi(a):
            th = theta + a * d
            f, gr = fun(th)
            return f, (gr @ d if np.isfinite(f) else np.nan), (th, gr)

        res = _strong_wolfe(phi, loss, gd, alpha0, cfg.wolfe_c1, cfg.wolfe_c2, cfg.max_line_search)
        if res is None:
            res = _backtrack(fun, theta, loss, g, cfg.wolfe_c1, cfg.max_line_search)
            s_hist, y_hist = [], []
            if res is None:
                break
        _, new_loss, (new_theta, new_g), _ = res
        _finite_or_raise(new_loss, step)
        s, y = new_theta - theta, new_g - g
        if s @ y > 1e-10 * np.sqrt((s @ s) * (y @ y)):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > cfg.history:
                s_hist.pop(0)
                y_hist.pop(0)
        theta, loss, g = new_theta, new_loss, new_g
        trace.record(step, loss, np.linalg.norm(g), np.nan, time.perf_counter() - t0)
    return theta, trace


def _backtrack(fun, theta, loss, g, c1, max_iter):
    d = -g
    gd = -(g @ g)
    a = 1.0 / max(1.0, np.linalg.norm(g))
    for i in range(max_iter * 2):
        th = theta + a * d
        f, gr = fun(th)
        if np.isfinite(f) and f <= loss + c1 * a * gd and f < loss:
            return a, f, (th, gr), i + 1
        a *= 0.5
    return None


# -- Krylov least squares ----------------------------------------------------------


def _operator(op):
    if callable(op):
        raise TypeError("pass the operator as a (matvec, rmatvec) pair or a dense matrix")
    if isinstance(op, np.ndarray):
        return (lambda v: op @ v), (lambda u: op.T @ u)
    return op


def cgls_solve(op, b, max_iters=100, tol=1e-10, x0=None):
    """CGLS for ``min ||A x - b||``; returns ``(x, residual norms)``.

    Stops when ``||A^T r|| <= tol * ||A^T b||``. A vanishing ``||A p||^2``
    with a nonzero normal residual raises :class:`SolverBreakdown`.
    """
    mv, rmv = _operator(op)
    b = np.asarray(b, dtype=np.float64)
    s0 = rmv(b)
    x = np.zeros_like(s0) if x0 is None else np.array(x0, dtype=np.float64)
    if x.shape != s0.shape:
        raise DimensionError("x0 does not match the operator")
    r = b - mv(x) if x0 is not None else b.copy()
    s = rmv(r)
    p = s.copy()
    gamma = s @ s
    ref = np.sqrt(s0 @ s0)
    trace = [np.linalg.norm(r)]
    if ref == 0.0 or np.sqrt(gamma) <= tol * ref:
        return x, trace
    for it in range(1, max_iters + 1):
        q = mv(p)
        delta = q @ q
        if delta == 0.0:
            raise SolverBreakdown(it)
        alpha = gamma / delta
        x += alpha * p
        r -= alpha * q
        s = rmv(r)
        gamma_new = s @ s
        trace.append(np.linalg.norm(r))
        if np.sqrt(gamma_new) <= tol * ref:
            break
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    return x, trace


def lsqr_solve(op, b, max_iters=100, tol=1e-10):
    """LSQR (Golub-Kahan bidiagonalization) for ``min ||A x - b||``.

    Same stopping rule and return shape as :func:`cgls_solve`; the residual
    norms in the trace are the recurrence estimates.
    """
    mv, rmv = _operator(op)
    b = np.asarray(b, dtype=np.float64)
    u = b.copy()
    beta = np.linalg.norm(u)
    v = rmv(u)
    x = np.zeros_like(v)
    trace = [beta]
    if beta == 0.0:
        return x, trace
    u /= beta
    v = v / beta
    alpha = np.linalg.norm(v)
    ref = alpha * beta
    if alpha == 0.0:
        return x, trace
    v /= alpha
    w = v.copy()
    phibar, rhobar = beta, alpha
    for it in range(1, max_iters + 1):
        u = mv(v) - alpha * u
        beta = np.linalg.norm(u)
        if beta > 0:
            u /= beta
        v_next = rmv(u) - beta * v
        alpha = np.linalg.norm(v_next)
        if alpha > 0:
            v_next /= alpha
        rho = np.hypot(rhobar, beta)
        if rho == 0.0:
            raise SolverBreakdown(it)
        c, s = rhobar / rho, beta / rho
        theta = s * alpha
        rhobar = -c * alpha
        phi = c * phibar
        phibar = s * phibar
        x += (phi / rho) * w
        w = v_next - (theta / rho) * w
        v = v_next
        trace.append(abs(phibar))
        # ||A^T r|| = phibar * alpha * |c|
        if abs(phibar * alpha * c) <= tol * ref or alpha == 0.0 or beta == 0.0:
            break
    return x, trace
