"""Linearized subspace refinement.

A trained state ``theta0`` is kept fixed. A low-rank basis ``V`` of the
parameter space is sketched from the output Jacobian, the reduced linear
least-squares problem ``(AJV) y = -f(theta0)`` is solved directly, and the
correction ``dtheta = V y`` defines the refined linear predictor
``q(theta0) + J dtheta``. ``theta0`` itself is never updated.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import linalg, net
from .errors import DimensionError, LsrError, NumericalError, RankDeficiencyError

OUTPUT_SPACE = "output_space"
RESIDUAL_SPACE = "residual_space"
DEFAULT_OVERSAMPLE = 10


@dataclass
class SubspaceBasis:
    v: np.ndarray
    sigma: np.ndarray
    preconditioned: bool = False
    source: str = OUTPUT_SPACE
    sketch_width: int = 0

    @property
    def rank(self):
        return self.v.shape[1]

    def prefix(self, r):
        """Basis spanned by the leading ``r`` directions."""
        if not 1 <= r <= self.rank:
            raise DimensionError(f"prefix rank {r} outside [1, {self.rank}]")
        return SubspaceBasis(self.v[:, :r], self.sigma[:r], self.preconditioned, self.source, self.sketch_width)

    def unpreconditioned(self):
        if not self.preconditioned:
            return self
        return SubspaceBasis(self.v * self.sigma, self.sigma, False, self.source, self.sketch_width)


@dataclass
class ReducedSystem:
    """Streaming triangular factor ``R`` and projected right-hand side ``z``."""

    r_factor: np.ndarray
    z: np.ndarray
    rows_seen: int = 0

    @classmethod
    def empty(cls, rank):
        return cls(np.zeros((rank, rank)), np.zeros(rank), 0)

    def update(self, y, b):
        y = np.asarray(y, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        r = self.r_factor.shape[0]
        if y.ndim != 2 or y.shape[1] != r or y.shape[0] != b.shape[0]:
            raise DimensionError(f"batch block {y.shape} / rhs {b.shape} do not fit rank {r}")
        if y.shape[0] == 0:
            return self
        q, r_new = linalg.householder_qr(np.vstack([self.r_factor, y]))
        self.z = q.T @ np.concatenate([self.z, b])
        self.r_factor = r_new
        self.rows_seen += y.shape[0]
        return self

    def solve(self):
        return linalg.solve_triangular(self.r_factor, self.z)


@dataclass
class LsrResult:
    delta_theta: np.ndarray
    y: np.ndarray
    q_lsr: np.ndarray
    f_lsr: np.ndarray
    loss_before: float
    loss_after: float
    kappa: float
    y_norm: float
    seconds: float = 0.0
    reduced: np.ndarray = field(default=None, repr=False)
    rhs: np.ndarray = field(default=None, repr=False)

    @property
    def rank(self):
        return self.y.size


def _param_mask(mask, m):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (m,):
        raise DimensionError(f"parameter mask has shape {mask.shape}, expected ({m},)")
    return mask


def random_param_mask(m, density, seed):
    """Boolean mask keeping a random ``density`` fraction of parameters."""
    rng = np.random.default_rng(seed)
    mask = np.zeros(m, dtype=bool)
    mask[rng.choice(m, size=max(1, int(round(density * m))), replace=False)] = True
    return mask


def _finish_basis(b, rank, precondition, source, width, strict=True, mask=None):
    svd = linalg.thin_svd_tall(b)
    if not strict:
        rank = min(rank, svd.sigma.size)
    if svd.sigma.size < rank:
        raise RankDeficiencyError(f"only {svd.sigma.size} singular directions survive truncation; rank {rank} requested")
    v = svd.v[:, :rank]
    sigma = svd.sigma[:rank]
    if mask is not None:
        v[~mask] = 0.0  # SVD rounding leaves ~1e-16 there
    if precondition:
        v = v / sigma
    return SubspaceBasis(np.ascontiguousarray(v), sigma, precondition, source, width)


def build_subspace(problem, theta0, rank, oversample=DEFAULT_OVERSAMPLE, seed=0, source=OUTPUT_SPACE,
                   precondition=False, param_mask=None, sketch_problem=None, strict=True):
    """Randomized-SVD basis of the dominant right singular directions.

    ``sketch_problem`` (a row subset of ``problem``) may stand in for the
    full problem to cut the sketching cost. With ``param_mask`` only the
    selected parameters are sketched and the basis vanishes elsewhere.
    Fewer than ``rank`` surviving singular directions raise
    :class:`RankDeficiencyError`, unless ``strict`` is False, in which case
    the basis is returned at the reduced rank.
    """
    sk = sketch_problem if sketch_problem is not None else problem
    m = sk.param_dim
    width = rank + oversample
    if rank < 1 or oversample < 0:
        raise DimensionError("rank must be >= 1 and oversample >= 0")
    if source == OUTPUT_SPACE:
        act, adj, rows = sk.j_action, sk.jt_action, sk.output_dim
    elif source == RESIDUAL_SPACE:
        act, adj, rows = sk.aj_action, sk.gt_action, sk.residual_dim
    else:
        raise ValueError(f"unknown basis source {source!r}")
    if width > rows:
        raise DimensionError(f"sketch width {width} exceeds the {rows} available rows")
    mask = _param_mask(param_mask, m)
    omega = linalg.gaussian_sketch(m, width, seed)
    if mask is not None:
        omega[~mask] = 0.0
    q, _ = linalg.householder_qr(act(theta0, omega))
    b = adj(theta0, q).T
    if mask is not None:
        b[:, ~mask] = 0.0
    return _finish_basis(b, rank, precondition, source, width, strict, mask)


def _solve_reduced(problem, theta0, basis, reduced, f0, t0):
    if not np.all(np.isfinite(reduced)):
        raise NumericalError("reduced matrix has non-finite entries")
    q, r = linalg.householder_qr(reduced)
    rhs = -f0
    y = linalg.solve_triangular(r, q.T @ rhs)
    dtheta = basis.v @ y
    f_lsr = f0 + reduced @ y
    q_lsr = problem.output_at(theta0) + problem.j_action(theta0, dtheta)
    return LsrResult(
        delta_theta=dtheta,
        y=y,
        q_lsr=q_lsr,
        f_lsr=f_lsr,
        loss_before=0.5 * float(f0 @ f0),
        loss_after=0.5 * float(f_lsr @ f_lsr),
        kappa=linalg.condition_number(r),
        y_norm=float(np.linalg.norm(y)),
        seconds=time.perf_counter() - t0,
        reduced=reduced,
        rhs=rhs,
    )


def _residual0(problem, theta0):
    f0 = problem.residual_at(theta0)
    if not np.all(np.isfinite(f0)):
        raise NumericalError("residual at theta0 is not finite")
    return f0


def one_shot_lsr(problem, theta0, basis):
    """Solve ``(AJV) y = -f(theta0)`` by Householder QR."""
    t0 = time.perf_counter()
    if basis.v.shape[0] != problem.param_dim:
        raise DimensionError(f"basis has {basis.v.shape[0]} rows, problem has {problem.param_dim} parameters")
    f0 = _residual0(problem, theta0)
    reduced = problem.aj_action(theta0, basis.v)
    return _solve_reduced(problem, theta0, basis, reduced, f0, t0)


def lsr(problem, theta0, rank, oversample=DEFAULT_OVERSAMPLE, seed=0, **basis_kw):
    """Basis construction followed by :func:`one_shot_lsr`."""
    t0 = time.perf_counter()
    basis = build_subspace(problem, theta0, rank, oversample, seed, **basis_kw)
    res = one_shot_lsr(problem, theta0, basis)
    res.seconds = time.perf_counter() - t0
    return res, basis


def _batches(n, batch_size):
    if batch_size is None or batch_size >= n:
        return [np.arange(n)]
    return [np.arange(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]


def batch_subspace(problem, theta0, rank, oversample=DEFAULT_OVERSAMPLE, seed=0, batch_size=None,
                   precondition=False, param_mask=None):
    """Accumulate ``H = sum_b Q_b^T J_b`` over batches, then SVD ``H``.

    Batches too small for the sketch-width QR are skipped.
    """
    m = problem.param_dim
    width = rank + oversample
    mask = _param_mask(param_mask, m)
    omega = linalg.gaussian_sketch(m, width, seed)
    if mask is not None:
        omega[~mask] = 0.0
    h = np.zeros((width, m))
    used = 0
    for idx in _batches(problem.n_samples, batch_size):
        sub = problem.take(idx)
        if sub.output_dim < width:
            continue
        q, _ = linalg.householder_qr(sub.j_action(theta0, omega))
        h += sub.jt_action(theta0, q).T
        used += 1
    if not used:
        raise DimensionError(f"no batch has the {width} output rows needed for the sketch QR")
    if mask is not None:
        h[:, ~mask] = 0.0
    return _finish_basis(h, rank, precondition, OUTPUT_SPACE, width, mask=mask)


def batch_lsr(problem, theta0, rank=None, oversample=DEFAULT_OVERSAMPLE, seed=0, batch_size=None, basis=None,
              precondition=False, param_mask=None):
    """Streaming LSR over sample batches of ``problem``.

    ``problem`` must expose ``n_samples`` and ``take(indices)``. A given
    ``basis`` is reused as is; otherwise it is accumulated batch by batch.
    The reduced system is assembled by stacked QR updates, so only an
    ``r x r`` factor is ever held.
    """
    t0 = time.perf_counter()
    if basis is None:
        if rank is None:
            raise ValueError("either rank or basis is required")
        basis = batch_subspace(problem, theta0, rank, oversample, seed, batch_size, precondition, param_mask)
    batches = [problem.take(idx) for idx in _batches(problem.n_samples, batch_size)]
    system = ReducedSystem.empty(basis.rank)
    f0_parts = []
    for sub in batches:
        f0 = _residual0(sub, theta0)
        f0_parts.append(f0)
        system.update(sub.aj_action(theta0, basis.v), -f0)
    y = system.solve()
    dtheta = basis.v @ y
    f0 = np.concatenate(f0_parts)
    f_lsr = np.concatenate([fb + sub.aj_action(theta0, dtheta) for fb, sub in zip(f0_parts, batches)])
    q_lsr = np.concatenate([sub.output_at(theta0) + sub.j_action(theta0, dtheta) for sub in batches])
    return LsrResult(
        delta_theta=dtheta,
        y=y,
        q_lsr=q_lsr,
        f_lsr=f_lsr,
        loss_before=0.5 * float(f0 @ f0),
        loss_after=0.5 * float(f_lsr @ f_lsr),
        kappa=linalg.condition_number(system.r_factor),
        y_norm=float(np.linalg.norm(y)),
        seconds=time.perf_counter() - t0,
    )


def lsr_predict_at(arch, theta0, delta_theta, x):
    """Refined predictor ``q(x; theta0) + J(x) dtheta`` at arbitrary inputs."""
    delta_theta = np.asarray(delta_theta, dtype=np.float64)
    if delta_theta.shape != (arch.param_count,):
        raise DimensionError(f"delta_theta has shape {delta_theta.shape}, expected ({arch.param_count},)")
    return net.forward(arch, theta0, x) + net.jvp(arch, theta0, x, delta_theta)


# -- rank sweeps -----------------------------------------------------------------


@dataclass
class RankRow:
    rank: int
    loss_before: float = np.nan
    loss_after: float = np.nan
    test_error_before: float = np.nan
    test_error_after: float = np.nan
    kappa: float = np.nan
    y_norm: float = np.nan
    seconds: float = np.nan
    peak_memory_estimate: int = 0
    failed: bool = False
    message: str = ""

    def as_row(self):
        return tuple(getattr(self, c) for c in RANK_COLUMNS)


RANK_COLUMNS = ("rank", "loss_before", "loss_after", "test_error_before", "test_error_after", "kappa", "y_norm", "seconds")


def memory_estimate(n, m, rank, width):
    """Bytes held by the sketch, its range basis, ``B`` and the reduced matrix."""
    return 8 * (m * width + n * width + width * m + n * rank + m * rank)


def select_rank(rows):
    """Largest rank in the leading run where ``loss_after`` strictly decreases."""
    best = None
    prev = np.inf
    for row in rows:
        if row.failed or not row.loss_after < prev:
            break
        best, prev = row.rank, row.loss_after
    return best


def rank_sweep(problem, theta0, ranks, oversample=DEFAULT_OVERSAMPLE, seed=0, test_error=None, precondition=False,
               source=OUTPUT_SPACE):
    """One-shot LSR at every rank in ``ranks`` from a single sketch.

    The basis and reduced matrix are built once at the largest rank; each
    smaller rank uses the leading columns. ``test_error(delta_theta)``, if
    given, fills the test-error columns (``delta_theta = 0`` for "before").
    ``seconds`` is the shared setup time plus that rank's own solve.
    Returns ``(rows, selected_rank)``.
    """
    ranks = [int(r) for r in ranks]
    if any(b <= a for a, b in zip(ranks, ranks[1:])) or not ranks:
        raise ValueError("ranks must be non-empty and strictly ascending")
    t0 = time.perf_counter()
    full = build_subspace(problem, theta0, ranks[-1], oversample, seed, source=source, precondition=precondition)
    f0 = _residual0(problem, theta0)
    reduced_full = problem.aj_action(theta0, full.v)
    setup = time.perf_counter() - t0
    err0 = test_error(np.zeros(problem.param_dim)) if test_error else np.nan
    width = ranks[-1] + oversample
    rows = []
    for r in ranks:
        row = RankRow(r, peak_memory_estimate=memory_estimate(problem.residual_dim, problem.param_dim, r, width))
        t1 = time.perf_counter()
        try:
            res = _solve_reduced(problem, theta0, full.prefix(r), reduced_full[:, :r].copy(), f0, t1)
        except (LsrError, np.linalg.LinAlgError) as exc:
            row.failed, row.message = True, str(exc)
            rows.append(row)
            continue
        row.loss_before, row.loss_after = res.loss_before, res.loss_after
        row.kappa, row.y_norm = res.kappa, res.y_norm
        row.test_error_before = err0
        row.test_error_after = test_error(res.delta_theta) if test_error else np.nan
        row.seconds = setup + (time.perf_counter() - t1)
        rows.append(row)
    return rows, select_rank(rows)
