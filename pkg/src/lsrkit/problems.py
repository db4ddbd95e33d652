"""Datasets and problem assembly for the shipped experiments.

``func2d`` fits sin(pi x) sin(pi y) on [-1, 1]^2; ``classify_synth`` is a
four-class Gaussian-blob task in the plane; ``poisson`` and ``burgers``
are the collocation PDE problems from :mod:`lsrkit.residual`.
"""

from dataclasses import dataclass

import numpy as np

from . import net, residual
from .ilsr import BurgersReference, error_vs_reference, uniform_grid
from .lsr import lsr_predict_at

PROBLEMS = ("func2d", "classify_synth", "poisson", "burgers")


def func2d_target(x):
    return np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])


def func2d_data(n_train, n_test, seed):
    """Uniform points on [-1, 1]^2; train and test come from one stream."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(n_train + n_test, 2))
    y = func2d_target(x)[:, None]
    return x[:n_train], y[:n_train], x[n_train:], y[n_train:]


def blob_centers(n_classes, radius=2.0):
    ang = 2.0 * np.pi * np.arange(n_classes) / n_classes + np.pi / 4.0
    return radius * np.column_stack([np.cos(ang), np.sin(ang)])


def blob_data(n_train, n_test, n_classes, std, seed):
    """Isotropic Gaussian blobs with centers evenly spaced on a circle."""
    rng = np.random.default_rng(seed)
    n = n_train + n_test
    labels = rng.integers(0, n_classes, size=n)
    x = blob_centers(n_classes)[labels] + std * rng.standard_normal((n, 2))
    return x[:n_train], labels[:n_train], x[n_train:], labels[n_train:]


def mse(pred, target):
    d = np.asarray(pred, dtype=np.float64).ravel() - np.asarray(target, dtype=np.float64).ravel()
    return float(np.mean(d * d))


def accuracy(logits, labels):
    return float(np.mean(np.argmax(logits, axis=1) == labels))


@dataclass
class Setup:
    """A problem instance plus how to score a (linearized) predictor on held-out points."""

    kind: str
    arch: net.MlpArchitecture
    problem: object
    eval_x: np.ndarray
    eval_ref: np.ndarray
    metric_name: str
    reference: object = None

    def score_outputs(self, out):
        if self.kind == "classify_synth":
            return accuracy(out, self.eval_ref)
        if self.kind == "func2d":
            return mse(out, self.eval_ref)
        return error_vs_reference(out[:, 0], self.eval_ref)

    def score(self, theta, delta_theta=None):
        """Metric of the network, or of the refined predictor when ``delta_theta`` is given."""
        if delta_theta is None:
            out = net.forward(self.arch, theta, self.eval_x)
        else:
            out = lsr_predict_at(self.arch, theta, delta_theta, self.eval_x)
        return self.score_outputs(out)


def build_setup(cfg):
    """Assemble the problem described by a :class:`lsrkit.cli.RunConfig`."""
    p = cfg.problem
    kind = p.kind
    hidden = tuple(cfg.net.hidden)
    seed = cfg.seeds.data
    if kind == "func2d":
        arch = net.MlpArchitecture(2, 1, hidden, cfg.net.activation)
        xtr, ytr, xte, yte = func2d_data(p.n_train, p.n_test, seed)
        return Setup(kind, arch, residual.supervised_residual(arch, xtr, ytr), xte, yte, "test_mse")
    if kind == "classify_synth":
        arch = net.MlpArchitecture(2, p.n_classes, hidden, cfg.net.activation)
        xtr, ltr, xte, lte = blob_data(p.n_train, p.n_test, p.n_classes, p.blob_std, seed)
        return Setup(kind, arch, residual.classification_residual(arch, xtr, ltr, p.n_classes), xte, lte,
                     "test_accuracy")
    if kind == "poisson":
        arch = net.MlpArchitecture(2, 1, hidden, cfg.net.activation)
        coll = residual.sample_collocation(residual.POISSON_DOMAIN, p.n_interior, p.n_boundary, seed=seed)
        grid = uniform_grid((0.0, 0.0), (1.0, 1.0), p.grid)
        return Setup(kind, arch, residual.poisson_residual(arch, coll), grid, residual.poisson_exact(grid),
                     "rel_l2_error", residual.poisson_exact)
    if kind == "burgers":
        arch = net.MlpArchitecture(2, 1, hidden, cfg.net.activation)
        coll = residual.sample_collocation(residual.BURGERS_DOMAIN, p.n_interior, p.n_boundary, p.n_initial,
                                           seed=seed)
        grid = uniform_grid((-1.0, 0.0), (1.0, 1.0), p.grid)
        ref = BurgersReference(nu=p.nu)
        return Setup(kind, arch, residual.burgers_residual(arch, coll, nu=p.nu), grid, ref(grid),
                     "rel_l2_error", ref)
    raise ValueError(f"unknown problem {kind!r}; choose from {PROBLEMS}")
