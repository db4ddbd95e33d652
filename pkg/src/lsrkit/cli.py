"""Command-line driver: ``lsrkit <command> --config <path> [options]``.

Configs are INI-style ``key = value`` files with ``[section]`` headers.
Unknown sections or keys are rejected. Every value not given in the file
falls back to the desk-scale default for the configured problem kind.

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 I/O error.
"""

import argparse
import configparser
import dataclasses
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import artifacts, lab, net, problems
from .errors import ConfigError, FileFormatError, LsrError
from .ilsr import IlsrConfig, ilsr_run
from .lsr import OUTPUT_SPACE, RANK_COLUMNS, RESIDUAL_SPACE, batch_lsr, build_subspace, lsr, lsr_predict_at, rank_sweep
from .opt import AdamConfig, LbfgsConfig, adam_minimize, lbfgs_minimize

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3
COMMANDS = ("train", "lsr", "ilsr", "experiment")
EXPERIMENTS = ("compare-solvers", "direction-scan", "stationarity", "scalar-demo", "rank-sweep", "modes")
OPTIMIZERS = ("adam", "lbfgs")


# -- configuration ------------------------------------------------------------------


@dataclass
class ProblemSection:
    kind: str = "func2d"
    n_train: int = 2000
    n_test: int = 500
    n_interior: int = 3000
    n_boundary: int = 400
    n_initial: int = 0
    n_classes: int = 4
    blob_std: float = 0.75
    nu: float = 0.01 / np.pi
    grid: int = 101


@dataclass
class NetSection:
    hidden: tuple = (64, 64, 64, 64)
    activation: str = "tanh"


@dataclass
class TrainSection:
    optimizer: str = "adam"
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 32
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    lbfgs_steps: int = 500
    lbfgs_history: int = 20


@dataclass
class LsrSection:
    rank: int = 400
    oversample: int = 10
    precondition: bool = False
    source: str = OUTPUT_SPACE
    batch_size: int = 256
    ranks: tuple = (50, 100, 200, 400)


@dataclass
class IlsrSection:
    outer_iters: int = 5
    align_steps: int = 300
    delta_tau_align: float = 0.3
    delta_tau_lsr: float = 1e10
    strict_rank: bool = False


@dataclass
class ExperimentSection:
    adam_steps: int = 100000
    adam_lr: float = 1e-3
    lbfgs_steps: int = 2000
    cgls_iters: int = 2000
    lsqr_iters: int = 2000
    full_space: bool = False
    mode_indices: tuple = (0, 1, 2, 3, 10, 50)


@dataclass
class SeedSection:
    data: int = 0
    init: int = 0
    sketch: int = 0


@dataclass
class OutputSection:
    dir: str = "runs"


SECTIONS = {
    "problem": ProblemSection,
    "net": NetSection,
    "train": TrainSection,
    "lsr": LsrSection,
    "ilsr": IlsrSection,
    "experiment": ExperimentSection,
    "seeds": SeedSection,
    "output": OutputSection,
}

# desk-scale defaults that differ from the section defaults above, per problem kind
DESK_DEFAULTS = {
    "func2d": {},
    "classify_synth": {
        "problem": {"n_train": 1500, "n_test": 500},
        "net": {"hidden": (32, 32)},
        "lsr": {"rank": 200, "ranks": (25, 50, 100, 200)},
        "experiment": {"mode_indices": (0, 1, 2, 3)},
    },
    "poisson": {
        "train": {"optimizer": "lbfgs"},
    },
    "burgers": {
        "problem": {"n_interior": 2000, "n_boundary": 200, "n_initial": 200},
        "train": {"optimizer": "lbfgs"},
        "lsr": {"rank": 300, "ranks": (50, 100, 200, 300)},
    },
}


@dataclass
class RunConfig:
    problem: ProblemSection = field(default_factory=ProblemSection)
    net: NetSection = field(default_factory=NetSection)
    train: TrainSection = field(default_factory=TrainSection)
    lsr: LsrSection = field(default_factory=LsrSection)
    ilsr: IlsrSection = field(default_factory=IlsrSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    seeds: SeedSection = field(default_factory=SeedSection)
    output: OutputSection = field(default_factory=OutputSection)

    def validate(self):
        p = self.problem
        if p.kind not in problems.PROBLEMS:
            raise ConfigError(f"problem.kind: {p.kind!r} is not one of {problems.PROBLEMS}")
        if self.net.activation not in net.ACTIVATIONS:
            raise ConfigError(f"net.activation: {self.net.activation!r} is not one of {net.ACTIVATIONS}")
        if self.train.optimizer not in OPTIMIZERS:
            raise ConfigError(f"train.optimizer: {self.train.optimizer!r} is not one of {OPTIMIZERS}")
        if self.lsr.source not in (OUTPUT_SPACE, RESIDUAL_SPACE):
            raise ConfigError(f"lsr.source: {self.lsr.source!r} is not one of {(OUTPUT_SPACE, RESIDUAL_SPACE)}")
        for name, sec in self.sections():
            for f in dataclasses.fields(sec):
                v = getattr(sec, f.name)
                vals = v if isinstance(v, tuple) else (v,)
                if any(isinstance(x, (int, float)) and not isinstance(x, bool) and x < 0 for x in vals):
                    raise ConfigError(f"{name}.{f.name}: must be >= 0, got {v!r}")
        if not self.net.hidden:
            raise ConfigError("net.hidden: at least one hidden layer is required")
        if min(self.net.hidden) < 1 or self.lsr.rank < 1:
            raise ConfigError("net.hidden widths and lsr.rank must be >= 1")
        if list(self.lsr.ranks) != sorted(set(self.lsr.ranks)) or not self.lsr.ranks:
            raise ConfigError("lsr.ranks: must be a non-empty strictly ascending list")
        return self

    def sections(self):
        return [(name, getattr(self, name)) for name in SECTIONS]

    def seed_dict(self):
        return dataclasses.asdict(self.seeds)


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(text, default, where):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.replace(",", " ").split())
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot read {text!r} as {type(default).__name__}") from None


def _line_of(text, section, key):
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
        elif current == section and "=" in s and s.split("=", 1)[0].strip().lower() == key:
            return i
    return None


def parse_config(text, source="<config>"):
    """Parse config text into a validated :class:`RunConfig`."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#",), default_section="\x00unused")
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    for name in cp.sections():
        if name not in SECTIONS:
            line = next((i for i, ln in enumerate(text.splitlines(), 1) if ln.strip() == f"[{name}]"), "?")
            raise ConfigError(f"{source}:{line}: unknown section [{name}]; "
                              f"valid sections: {', '.join(SECTIONS)}")
    kind = cp.get("problem", "kind", fallback=ProblemSection.kind).strip()
    if kind not in problems.PROBLEMS:
        raise ConfigError(f"{source}: problem.kind: {kind!r} is not one of {problems.PROBLEMS}")
    cfg = RunConfig()
    for name, cls in SECTIONS.items():
        values = dict(DESK_DEFAULTS[kind].get(name, {}))
        known = {f.name: f for f in dataclasses.fields(cls)}
        base = cls()
        if cp.has_section(name):
            for key, raw in cp.items(name):
                if key not in known:
                    line = _line_of(text, name, key)
                    raise ConfigError(f"{source}:{line}: unknown key {key!r} in [{name}]; "
                                      f"valid keys: {', '.join(known)}")
                values[key] = _convert(raw, getattr(base, key), f"{source}:{_line_of(text, name, key)}: {name}.{key}")
        setattr(cfg, name, cls(**values))
    return cfg.validate()


def load_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, source=path)


def serialize_config(cfg):
    lines = []
    for name, sec in cfg.sections():
        lines.append(f"[{name}]")
        for f in dataclasses.fields(sec):
            lines.append(f"{f.name} = {_format(getattr(sec, f.name))}")
        lines.append("")
    return "\n".join(lines)


# -- run plumbing -------------------------------------------------------------------


class Run:
    """Output directory, artifact bookkeeping and the manifest."""

    def __init__(self, cfg, out_dir, name):
        self.cfg = cfg
        self.dir = out_dir
        self.name = name
        self.started = time.time()
        self.files = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, filename):
        p = os.path.join(self.dir, filename)
        self.files.append(p)
        return p

    def finish(self, **extra):
        return artifacts.write_manifest(os.path.join(self.dir, f"{self.name}.manifest.txt"), serialize_config(self.cfg),
                                        self.cfg.seed_dict(), self.files, self.started, extra=extra)


def _initial_theta(setup, cfg, checkpoint):
    if checkpoint is None:
        return net.init_params(setup.arch, cfg.seeds.init)
    arch, theta = net.load_checkpoint(checkpoint)
    if arch != setup.arch:
        raise ConfigError(f"checkpoint architecture {arch} does not match the configured {setup.arch}")
    return theta


def _say(msg):
    print(msg, flush=True)


def train_theta(setup, cfg, theta0):
    """Baseline training: mini-batch Adam with a plateau scheduler, or full-batch L-BFGS."""
    t = cfg.train
    prob = setup.problem
    if t.optimizer == "lbfgs":
        return lbfgs_minimize(prob.loss_and_grad, theta0, LbfgsConfig(history=t.lbfgs_history, max_steps=t.lbfgs_steps))
    adam = AdamConfig(lr=t.lr, plateau_patience=t.plateau_patience, plateau_factor=t.plateau_factor)
    if hasattr(prob, "take") and t.batch_size > 0:
        n = prob.n_samples
        steps = t.epochs * -(-n // t.batch_size)
        adam = dataclasses.replace(adam, max_steps=steps)

        def fun(theta, idx):
            loss, g = prob.take(idx).loss_and_grad(theta)
            return loss / len(idx), g / len(idx)

        return adam_minimize(fun, theta0, adam, n_samples=n, batch_size=t.batch_size, seed=cfg.seeds.data,
                             monitor=lambda th: prob.loss(th) / n, record_every=max(1, steps // 1000))
    adam = dataclasses.replace(adam, max_steps=t.epochs)
    return adam_minimize(prob.loss_and_grad, theta0, adam, record_every=max(1, t.epochs // 1000))


def cmd_train(cfg, args):
    setup = problems.build_setup(cfg)
    run = Run(cfg, args.out, "train")
    theta0 = _initial_theta(setup, cfg, args.checkpoint)
    theta, trace = train_theta(setup, cfg, theta0)
    net.save_checkpoint(run.path("model.lsr1"), setup.arch, theta)
    trace.to_csv(run.path("train_trace.csv"))
    metric = setup.score(theta)
    run.finish(final_train_loss=repr(setup.problem.loss(theta)), **{setup.metric_name: repr(metric)})
    _say(f"final train loss {setup.problem.loss(theta):.6e}  {setup.metric_name} {metric:.6e}")
    return EXIT_OK


def cmd_lsr(cfg, args):
    setup = problems.build_setup(cfg)
    run = Run(cfg, args.out, "lsr")
    theta = _initial_theta(setup, cfg, args.checkpoint)
    c = cfg.lsr
    before = setup.score(theta)
    if args.batch:
        if not hasattr(setup.problem, "take"):
            raise ConfigError(f"--batch needs a sample-wise problem; {cfg.problem.kind} is not one")
        res = batch_lsr(setup.problem, theta, c.rank, c.oversample, cfg.seeds.sketch, c.batch_size,
                        precondition=c.precondition)
    else:
        res, _ = lsr(setup.problem, theta, c.rank, c.oversample, cfg.seeds.sketch, source=c.source,
                     precondition=c.precondition)
    after = setup.score(theta, res.delta_theta)
    artifacts.write_lsr_results(run.path("lsr_result.csv"), [artifacts.lsr_result_row(res, before, after)])
    artifacts.write_vector(run.path("delta_theta.vec"), res.delta_theta)
    artifacts.write_vector(run.path("prediction.vec"), lsr_predict_at(setup.arch, theta, res.delta_theta, setup.eval_x))
    run.finish(loss_before=repr(res.loss_before), loss_after=repr(res.loss_after))
    _say(f"rank {res.rank}  loss {res.loss_before:.6e} -> {res.loss_after:.6e}  "
         f"{setup.metric_name} {before:.6e} -> {after:.6e}  kappa {res.kappa:.3e}")
    return EXIT_OK if res.loss_after < res.loss_before else EXIT_NUMERICAL


def _ilsr_config(cfg):
    i = cfg.ilsr
    return IlsrConfig(outer_iters=i.outer_iters, align_steps=i.align_steps, delta_tau_align=i.delta_tau_align,
                      delta_tau_lsr=i.delta_tau_lsr, rank=cfg.lsr.rank, oversample=cfg.lsr.oversample,
                      seed=cfg.seeds.sketch, lbfgs_history=cfg.train.lbfgs_history, strict_rank=i.strict_rank)


def cmd_ilsr(cfg, args):
    if cfg.problem.kind not in ("poisson", "burgers"):
        raise ConfigError(f"ilsr needs a PDE problem, not {cfg.problem.kind}")
    setup = problems.build_setup(cfg)
    run = Run(cfg, args.out, "ilsr")
    theta = _initial_theta(setup, cfg, args.checkpoint)
    out = ilsr_run(setup.problem, theta, _ilsr_config(cfg), setup.reference, setup.eval_x, log=_say)
    out.trace.to_csv(run.path("ilsr_trace.csv"))
    net.save_checkpoint(run.path("ilsr_final.lsr1"), setup.arch, out.theta_final)
    net.save_checkpoint(run.path("ilsr_lsr_base.lsr1"), setup.arch, out.lsr_theta)
    artifacts.write_vector(run.path("ilsr_delta_theta.vec"), out.last.delta_theta)
    artifacts.write_vector(run.path("ilsr_prediction.vec"), out.predict(setup.eval_x))
    final = out.trace.stage_values("lsr")[-1]
    run.finish(final_lsr_rel_l2_error=repr(final))
    _say(f"final LSR-stage rel-L2 error {final:.6e}")
    return EXIT_OK


# -- experiments ----------------------------------------------------------------------


def _basis(setup, cfg, theta):
    c = cfg.lsr
    return build_subspace(setup.problem, theta, c.rank, c.oversample, cfg.seeds.sketch, source=c.source,
                          precondition=c.precondition)


def exp_compare_solvers(setup, cfg, theta, run):
    e = cfg.experiment
    if e.full_space:
        lp = lab.LinearizedProblem.full_space(setup.problem, theta)
    else:
        lp = lab.LinearizedProblem.reduced(setup.problem, theta, _basis(setup, cfg, theta))
    budgets = {"adam": e.adam_steps, "lbfgs": e.lbfgs_steps, "cgls": e.cgls_iters, "lsqr": e.lsqr_iters}
    rows = lab.compare_solvers(lp, budgets, seed=cfg.seeds.sketch, adam_cfg=AdamConfig(lr=e.adam_lr))
    artifacts.write_csv(run.path("compare-solvers.csv"), lab.SolverRow.COLUMNS, [r.as_row() for r in rows])
    artifacts.write_csv(run.path("compare-solvers_trace.csv"), ("solver", "index", "loss"),
                        lab.solver_trace_rows(rows))
    for r in rows:
        _say(f"{r.solver:7s} iterations {r.iterations:7d}  final loss {r.final_loss:.6e}"
             + (f"  FAILED: {r.message}" if r.failed else ""))


def exp_direction_scan(setup, cfg, theta, run):
    res, _ = lsr(setup.problem, theta, cfg.lsr.rank, cfg.lsr.oversample, cfg.seeds.sketch, source=cfg.lsr.source,
                 precondition=cfg.lsr.precondition)
    rows = lab.direction_scan(setup.problem, theta, res.delta_theta)
    artifacts.write_csv(run.path("direction-scan.csv"), lab.ScanRow.COLUMNS, [r.as_row() for r in rows])
    one = next(r for r in rows if r.alpha == 1.0)
    _say(f"alpha 1: nonlinear {one.nonlinear_loss:.6e}  linearized {one.linearized_loss:.6e}")


def exp_stationarity(setup, cfg, theta, run):
    rep = lab.stationarity_probe(setup.problem, theta, cfg.lsr.rank, cfg.lsr.oversample, cfg.seeds.sketch)
    cols = [f.name for f in dataclasses.fields(rep)]
    artifacts.write_csv(run.path("stationarity.csv"), cols, [[getattr(rep, c) for c in cols]])
    _say(f"||G^T f|| {rep.grad_norm:.6e}  correction effect {rep.correction_effect:.6e}")


def exp_scalar_demo(setup, cfg, theta, run):
    demo = lab.scalar_demo()
    artifacts.write_csv(run.path("scalar-demo.csv"), lab.ScalarRow.COLUMNS, [r.as_row() for r in demo.rows])
    for r in demo.rows:
        _say(f"theta0 {r.theta0:g}: q {r.q:g}, q' {r.dq:g}, step {r.delta_theta:g}, "
             f"linearized prediction {r.linearized_prediction:g}")
    _say(demo.summary())
    return {"min_q": repr(demo.min_q), "feasible": str(demo.feasible).lower()}


def exp_rank_sweep(setup, cfg, theta, run):
    c = cfg.lsr

    def test_error(dtheta):
        return setup.score(theta, dtheta)

    rows, selected = rank_sweep(setup.problem, theta, c.ranks, c.oversample, cfg.seeds.sketch, test_error,
                                c.precondition, c.source)
    cols = RANK_COLUMNS + ("peak_memory_estimate", "failed")
    artifacts.write_csv(run.path("rank-sweep.csv"), cols,
                        [r.as_row() + (r.peak_memory_estimate, r.failed) for r in rows])
    for r in rows:
        _say(f"rank {r.rank:5d}  loss_after {r.loss_after:.6e}  {setup.metric_name} {r.test_error_after:.6e}  "
             f"kappa {r.kappa:.3e}" + ("  FAILED" if r.failed else ""))
    _say(f"selected rank {selected}")


def exp_modes(setup, cfg, theta, run):
    basis = _basis(setup, cfg, theta)
    idx = [i for i in cfg.experiment.mode_indices if i < basis.rank]
    modes = lab.subspace_modes(setup.arch, theta, basis, setup.eval_x, idx)
    d = setup.eval_x.shape[1]
    cols = [f"x{j}" for j in range(d)] + [f"mode_{i}" for i in idx]
    data = np.column_stack([setup.eval_x] + [m[:, 0] for m in modes])
    artifacts.write_csv(run.path("modes.csv"), cols, data.tolist())
    _say(f"wrote {len(idx)} modes on {len(setup.eval_x)} points")


EXPERIMENT_FUNCS = {
    "compare-solvers": exp_compare_solvers,
    "direction-scan": exp_direction_scan,
    "stationarity": exp_stationarity,
    "scalar-demo": exp_scalar_demo,
    "rank-sweep": exp_rank_sweep,
    "modes": exp_modes,
}


def cmd_experiment(cfg, args):
    name = args.name
    if name not in EXPERIMENT_FUNCS:
        raise ConfigError(f"unknown experiment {name!r}; valid: {', '.join(EXPERIMENTS)}")
    run = Run(cfg, args.out, name)
    if name == "scalar-demo":
        extra = exp_scalar_demo(None, cfg, None, run)
    else:
        setup = problems.build_setup(cfg)
        extra = EXPERIMENT_FUNCS[name](setup, cfg, _initial_theta(setup, cfg, args.checkpoint), run)
    run.finish(**(extra or {}))
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage mistakes count as configuration errors, not argparse's default status 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    ap = _Parser(prog="lsrkit", description="Linearized subspace refinement toolkit")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("name", nargs="?", help="experiment name (experiment command only)")
    ap.add_argument("--config", help="run configuration file")
    ap.add_argument("--checkpoint", help="network checkpoint; random initialization when omitted")
    ap.add_argument("--rank", type=int, help="override lsr.rank")
    ap.add_argument("--batch", action="store_true", help="streaming batch LSR over lsr.batch_size samples")
    ap.add_argument("--precondition", action="store_true", help="use the singular-value-whitened basis")
    ap.add_argument("--out", help="output directory (default: output.dir)")
    ap.add_argument("--seed", type=int, help="override the data, init and sketch seeds")
    return ap


def resolve_config(args):
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    if args.rank is not None:
        cfg.lsr.rank = args.rank
    if args.precondition:
        cfg.lsr.precondition = True
    if args.seed is not None:
        cfg.seeds = SeedSection(args.seed, args.seed, args.seed)
    if args.out is None:
        args.out = cfg.output.dir
    cfg.output.dir = args.out
    return cfg.validate()


def limit_threads():
    """Apply the LSRKIT_THREADS cap; returns the limiter to restore, or None."""
    n = os.environ.get("LSRKIT_THREADS")
    if not n:
        return None
    try:
        n = int(n)
    except ValueError:
        raise ConfigError(f"LSRKIT_THREADS must be an integer, got {n!r}") from None
    if n < 1:
        raise ConfigError("LSRKIT_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "experiment" and not args.name:
            raise ConfigError(f"experiment needs a name; valid: {', '.join(EXPERIMENTS)}")
        if args.command != "experiment" and args.name:
            raise ConfigError(f"unexpected argument {args.name!r}")
        if args.command != "experiment" or args.name != "scalar-demo":
            if not args.config:
                raise ConfigError(f"{args.command} needs --config")
        limiter = limit_threads()
        cfg = resolve_config(args)
        cmd = {"train": cmd_train, "lsr": cmd_lsr, "ilsr": cmd_ilsr, "experiment": cmd_experiment}[args.command]
        try:
            return cmd(cfg, args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except ConfigError as exc:
        print(f"lsrkit: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileFormatError, OSError) as exc:
        print(f"lsrkit: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (LsrError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"lsrkit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
