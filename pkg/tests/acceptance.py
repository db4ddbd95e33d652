"""Acceptance criteria, runnable from pytest or as a script.

Every criterion writes its measured quantities as CSV under its own
directory, so a second run can be compared cell by cell. As a script::

    LSRKIT_THREADS=1 python tests/acceptance.py --out /tmp/acc
"""

import argparse
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from oracles import central_diff, input_derivs_fd, rel  # noqa: E402

from lsrkit import artifacts, cli, lsr, net, problems, residual  # noqa: E402

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), os.pardir, "configs")
FUNC2D = os.path.join(CONFIG_DIR, "func2d_desk.cfg")
POISSON = os.path.join(CONFIG_DIR, "poisson_desk.cfg")
CLASSIFY = os.path.join(CONFIG_DIR, "classify_desk.cfg")

RESULTS = []


@dataclass
class Outcome:
    number: int
    ok: bool
    detail: str
    seconds: float = 0.0

    def line(self):
        return f"criterion {self.number:2d}: {'PASS' if self.ok else 'FAIL'} ({self.seconds:.1f} s) {self.detail}"


class Context:
    """Output root plus artifacts shared between criteria (the trained func2d state)."""

    def __init__(self, root):
        self.root = os.path.abspath(root)
        os.makedirs(self.root, exist_ok=True)

    def dir(self, name):
        d = os.path.join(self.root, name)
        os.makedirs(d, exist_ok=True)
        return d

    def run_cli(self, *argv):
        code = cli.main([str(a) for a in argv])
        if code != 0:
            raise RuntimeError(f"lsrkit {' '.join(map(str, argv))} exited with {code}")

    def func2d_checkpoint(self):
        d = self.dir("crit03")
        path = os.path.join(d, "model.lsr1")
        if not os.path.exists(path):
            self.run_cli("train", "--config", FUNC2D, "--out", d)
        return path

    def func2d_lsr_result(self):
        d = self.dir("crit03/trained")
        path = os.path.join(d, "lsr_result.csv")
        if not os.path.exists(path):
            self.run_cli("lsr", "--config", FUNC2D, "--checkpoint", self.func2d_checkpoint(), "--out", d)
        return read_table(path)[0]


def read_table(path):
    header, rows = artifacts.read_csv(path)
    return [dict(zip(header, r)) for r in rows]


# -- 1: derivative suite ----------------------------------------------------------------

KINDS_SMOOTH = ("supervised", "classification", "poisson", "burgers", "tsonn_poisson", "tsonn_burgers")
KINDS_RELU = ("supervised", "classification")


def _draw_problem(rng, activation, kind):
    hidden = tuple(int(w) for w in rng.integers(4, 17, size=rng.integers(1, 4)))
    seed = int(rng.integers(0, 2**31))
    if kind == "supervised":
        arch = net.MlpArchitecture(2, int(rng.integers(1, 4)), hidden, activation)
        x = rng.uniform(-1, 1, (int(rng.integers(4, 12)), 2))
        p = residual.supervised_residual(arch, x, rng.standard_normal((len(x), arch.output_dim)))
    elif kind == "classification":
        k = int(rng.integers(2, 5))
        arch = net.MlpArchitecture(2, k, hidden, activation)
        x = rng.uniform(-1, 1, (int(rng.integers(4, 12)), 2))
        p = residual.classification_residual(arch, x, rng.integers(0, k, len(x)), k)
    else:
        arch = net.MlpArchitecture(2, 1, hidden, activation)
        if "poisson" in kind:
            coll = residual.sample_collocation(residual.POISSON_DOMAIN, 6, 4, seed=seed)
            p = residual.poisson_residual(arch, coll)
        else:
            coll = residual.sample_collocation(residual.BURGERS_DOMAIN, 6, 3, 3, seed=seed)
            p = residual.burgers_residual(arch, coll)
    theta = 0.5 * rng.standard_normal(arch.param_count)
    if kind.startswith("tsonn"):
        q0 = p.output_at(theta)[: p.n_interior] + 0.1 * rng.standard_normal(p.n_interior)
        p = residual.tsonn_wrap(p, residual.TsonnConfig(q0, 0.3))
    return arch, p, theta


def _adjoint_gap(a, b):
    den = max(abs(a), abs(b))
    return 0.0 if den == 0.0 else abs(a - b) / den


def crit1(ctx):
    # steps balance truncation against roundoff; tanh_sin has large high derivatives, so the
    # error of plain central differences at h = 1e-5 / 1e-4 already reaches ~4e-5 (and scales as h^2)
    rows = []
    h, h_input = 1e-6, 2.5e-5
    for i in range(100):
        rng = np.random.default_rng(1000 + i)
        activation = net.ACTIVATIONS[i % len(net.ACTIVATIONS)]
        kinds = KINDS_RELU if activation == "relu" else KINDS_SMOOTH
        kind = kinds[(i // len(net.ACTIVATIONS)) % len(kinds)]
        arch, p, th = _draw_problem(rng, activation, kind)
        x = p.x if hasattr(p, "x") else p.coll.interior
        v = rng.standard_normal(arch.param_count)
        u_out = rng.standard_normal((len(x), arch.output_dim))
        u_res = rng.standard_normal(p.residual_dim)
        jv = net.jvp(arch, th, x, v)
        adj_net = _adjoint_gap(float(np.sum(u_out * jv)), float(net.vjp(arch, th, x, u_out) @ v))
        adj_res = _adjoint_gap(float(u_res @ p.aj_action(th, v)), float(p.gt_action(th, u_res) @ v))
        jvp_fd = rel(jv, central_diff(lambda t: net.forward(arch, t, x), th, v, h))
        aj_fd = rel(p.aj_action(th, v), central_diff(p.residual_at, th, v, h))
        jet_fd = tan_fd = adj_jet = np.nan
        if activation != "relu":
            jet = net.input_jet(arch, th, x)
            grad, hess = input_derivs_fd(lambda pts: net.forward(arch, th, pts), x, h_input)
            jet_fd = max(rel(jet.grad, grad), rel(jet.hess_diag, hess), rel(jet.value, net.forward(arch, th, x)))
            t = net.jet_param_tangent(arch, th, x, v)
            tan_fd = max(rel(t[k], central_diff(lambda s: net.input_jet(arch, s, x)[k], th, v, h)) for k in range(3))
            cot = net.InputJet(*(rng.standard_normal(f.shape) for f in t))
            adj_jet = _adjoint_gap(sum(float(np.sum(a * b)) for a, b in zip(cot, t)),
                                   float(net.jet_vjp(arch, th, x, cot) @ v))
        rows.append((i, activation, kind, adj_net, adj_res, adj_jet, jvp_fd, jet_fd, tan_fd, aj_fd))
    cols = ("draw", "activation", "kind", "adjoint_net", "adjoint_residual", "adjoint_jet", "jvp_fd", "input_jet_fd",
            "jet_param_tangent_fd", "aj_action_fd")
    artifacts.write_csv(os.path.join(ctx.dir("crit01"), "derivatives.csv"), cols, rows)
    data = np.array([r[3:] for r in rows], dtype=float)
    adj = np.nanmax(data[:, :3])
    fd = np.nanmax(data[:, 3:])
    kinds_seen = {(r[1], r[2]) for r in rows}
    ok = adj <= 1e-10 and fd <= 1e-5 and len(kinds_seen) == 2 * len(KINDS_SMOOTH) + len(KINDS_RELU)
    return ok, f"max adjoint gap {adj:.2e} (<= 1e-10), max FD mismatch {fd:.2e} (<= 1e-5), {len(kinds_seen)} combos"


# -- 2: linear oracle ---------------------------------------------------------------------


def crit2(ctx):
    rng = np.random.default_rng(2)
    a = rng.standard_normal((40, 12))
    b = rng.standard_normal(40)
    p = residual.LinearResidual(a, b)
    res, _ = lsr.lsr(p, np.zeros(12), 12, 4, seed=0)
    q, r = np.linalg.qr(a)
    x_dense = np.linalg.solve(r, q.T @ b)
    dense_norm = float(np.linalg.norm(a @ x_dense - b))
    norm_gap = abs(float(np.linalg.norm(res.f_lsr)) - dense_norm) / dense_norm
    stat, _ = lsr.lsr(p, x_dense, 12, 4, seed=0)
    f_star = float(np.linalg.norm(p.residual_at(x_dense)))
    move = float(np.linalg.norm(a @ stat.delta_theta)) / f_star
    artifacts.write_csv(os.path.join(ctx.dir("crit02"), "linear_oracle.csv"),
                        ("lsr_residual_norm", "dense_residual_norm", "relative_gap", "stationary_correction"),
                        [(float(np.linalg.norm(res.f_lsr)), dense_norm, norm_gap, move)])
    ok = norm_gap <= 1e-8 and move <= 1e-8
    return ok, f"residual-norm gap {norm_gap:.2e} (<= 1e-8), stationary correction {move:.2e} x ||f|| (<= 1e-8)"


# -- 3: Example 1 refinement -----------------------------------------------------------------


def crit3(ctx):
    t0 = time.perf_counter()
    ctx.func2d_checkpoint()
    trained = ctx.func2d_lsr_result()
    d = ctx.dir("crit03/init")
    ctx.run_cli("lsr", "--config", FUNC2D, "--rank", 120, "--out", d)
    init = read_table(os.path.join(d, "lsr_result.csv"))[0]
    f_trained = float(trained["test_error_before"]) / float(trained["test_error_after"])
    f_init = float(init["test_error_before"]) / float(init["test_error_after"])
    elapsed = time.perf_counter() - t0
    ok = f_trained >= 1e3 and f_init >= 1e2 and elapsed <= 900
    return ok, (f"trained: test MSE {float(trained['test_error_before']):.2e} -> "
                f"{float(trained['test_error_after']):.2e} (x{f_trained:.2e}, >= 1e3); random init rank 120: "
                f"{float(init['test_error_before']):.2e} -> {float(init['test_error_after']):.2e} "
                f"(x{f_init:.2e}, >= 1e2)")


# -- 4: conditioning gap ----------------------------------------------------------------------


def crit4(ctx):
    ckpt = ctx.func2d_checkpoint()
    out = {}
    for rank in (400, 20):
        d = ctx.dir(f"crit04/rank{rank}")
        ctx.run_cli("experiment", "compare-solvers", "--config", FUNC2D, "--checkpoint", ckpt, "--rank", rank,
                    "--out", d)
        out[rank] = {r["solver"]: r for r in read_table(os.path.join(d, "compare-solvers.csv"))}
    ratios = {}
    for rank, rows in out.items():
        direct = float(rows["direct"]["final_loss"])
        ratios[rank] = {s: float(rows[s]["final_loss"]) / direct for s in ("adam", "lbfgs", "cgls", "lsqr")}
    gap = all(v >= 10.0 for v in ratios[400].values())
    match = all(v <= 10.0 for v in ratios[20].values())
    fmt = lambda r: ", ".join(f"{k} {v:.2g}" for k, v in r.items())  # noqa: E731
    return gap and match, f"rank 400 loss/direct: {fmt(ratios[400])} (each >= 10); rank 20: {fmt(ratios[20])} (<= 10)"


# -- 5: batch equivalence ----------------------------------------------------------------------


def crit5(ctx):
    cfg = cli.load_config(FUNC2D)
    setup = problems.build_setup(cfg)
    _, theta = net.load_checkpoint(ctx.func2d_checkpoint())
    t0 = time.perf_counter()
    basis = lsr.build_subspace(setup.problem, theta, cfg.lsr.rank, cfg.lsr.oversample, cfg.seeds.sketch)
    results = {bs: lsr.batch_lsr(setup.problem, theta, basis=basis, batch_size=bs) for bs in (64, 256, None)}
    elapsed = time.perf_counter() - t0
    keys = list(results)
    worst = max(rel(results[a].y, results[b].y) for i, a in enumerate(keys) for b in keys[:i])
    artifacts.write_csv(os.path.join(ctx.dir("crit05"), "batch.csv"), ("batch_size", "loss_after", "y_norm"),
                        [(bs or setup.problem.n_samples, r.loss_after, r.y_norm) for bs, r in results.items()])
    artifacts.write_csv(os.path.join(ctx.dir("crit05"), "y.csv"), ("b64", "b256", "full"),
                        np.column_stack([results[k].y for k in keys]).tolist())
    ok = worst <= 1e-8 and elapsed <= 120
    return ok, f"max pairwise relative difference of y* over batch sizes 64/256/full {worst:.2e} (<= 1e-8)"


# -- 6: rank-sweep conditioning -----------------------------------------------------------------


def crit6(ctx):
    t0 = time.perf_counter()
    d = ctx.dir("crit06")
    ctx.run_cli("train", "--config", POISSON, "--out", d)
    ctx.run_cli("experiment", "rank-sweep", "--config", POISSON, "--checkpoint", os.path.join(d, "model.lsr1"),
                "--out", d)
    rows = read_table(os.path.join(d, "rank-sweep.csv"))
    elapsed = time.perf_counter() - t0
    by_rank = {int(r["rank"]): r for r in rows}
    k50, k400 = float(by_rank[50]["kappa"]), float(by_rank[400]["kappa"])
    y50, y400 = float(by_rank[50]["y_norm"]), float(by_rank[400]["y_norm"])
    prefix = []
    for r in rows:
        if r["failed"] == "1":
            break
        prefix.append(float(r["loss_after"]))
    monotone = all(b <= a for a, b in zip(prefix, prefix[1:]))
    ok = k400 >= 10 * k50 and y400 >= y50 and monotone and elapsed <= 600
    return ok, (f"kappa {k50:.2e} -> {k400:.2e} (x{k400 / k50:.2e}, >= 10); ||y|| {y50:.2e} -> {y400:.2e}; "
                f"loss_after {'non-increasing' if monotone else 'NOT monotone'} over {len(prefix)} ranks")


# -- 7: I-LSR Poisson ---------------------------------------------------------------------------


def crit7(ctx):
    t0 = time.perf_counter()
    d = ctx.dir("crit07")
    ctx.run_cli("ilsr", "--config", POISSON, "--out", d)
    rows = [r for r in read_table(os.path.join(d, "ilsr_trace.csv")) if r["stage"] == "lsr"]
    elapsed = time.perf_counter() - t0
    errs = [float(r["rel_l2_error"]) for r in rows]
    ok = len(errs) == 5 and errs[-1] <= 1e-3 and errs[-1] < errs[0] and elapsed <= 1800
    return ok, f"LSR-stage rel-L2 error by iteration {', '.join(f'{e:.2e}' for e in errs)} (final <= 1e-3)"


# -- 8: direction scan -------------------------------------------------------------------------


def crit8(ctx):
    ckpt = ctx.func2d_checkpoint()
    loss_after = float(ctx.func2d_lsr_result()["loss_after"])
    t0 = time.perf_counter()
    d = ctx.dir("crit08")
    ctx.run_cli("experiment", "direction-scan", "--config", FUNC2D, "--checkpoint", ckpt, "--out", d)
    elapsed = time.perf_counter() - t0
    rows = {float(r["alpha"]): r for r in read_table(os.path.join(d, "direction-scan.csv"))}
    nl0, lin0 = float(rows[0.0]["nonlinear_loss"]), float(rows[0.0]["linearized_loss"])
    nl1, lin1 = float(rows[1.0]["nonlinear_loss"]), float(rows[1.0]["linearized_loss"])
    gap0 = abs(nl0 - lin0) / nl0
    gap1 = abs(lin1 - loss_after) / loss_after
    ok = gap0 <= 1e-14 and gap1 <= 1e-10 and nl1 >= 10 * lin1 and elapsed <= 120
    return ok, (f"alpha 0 gap {gap0:.1e} (<= 1e-14); alpha 1 linearized vs LSR loss gap {gap1:.1e} (<= 1e-10); "
                f"nonlinear/linearized at alpha 1 = {nl1 / lin1:.2e} (>= 10)")


# -- 9: scalar demo -----------------------------------------------------------------------------


def crit9(ctx):
    d = ctx.dir("crit09")
    ctx.run_cli("experiment", "scalar-demo", "--out", d)
    rows = {float(r["theta0"]): r for r in read_table(os.path.join(d, "scalar-demo.csv"))}
    manifest = open(os.path.join(d, "scalar-demo.manifest.txt")).read()
    r0, r1 = rows[0.0], rows[1.0]
    ok = (float(r0["delta_theta"]) == 1.0 and float(r0["linearized_prediction"]) == 1.0
          and float(r1["dq"]) == 0.0 and float(r1["linearized_prediction"]) == float(r1["q"])
          and "feasible = false" in manifest)
    return ok, (f"theta0=0: step {r0['delta_theta']}, prediction {r0['linearized_prediction']}; theta0=1: q' "
                f"{r1['dq']}, prediction stays {r1['linearized_prediction']}; target 1 reported infeasible")


# -- 10: classification ---------------------------------------------------------------------------


def crit10(ctx):
    t0 = time.perf_counter()
    d = ctx.dir("crit10")
    ctx.run_cli("experiment", "rank-sweep", "--config", CLASSIFY, "--out", d)
    elapsed = time.perf_counter() - t0
    rows = read_table(os.path.join(d, "rank-sweep.csv"))
    sweep = [lsr.RankRow(int(r["rank"]), loss_after=float(r["loss_after"]), failed=r["failed"] == "1") for r in rows]
    best = lsr.select_rank(sweep)
    acc = {int(r["rank"]): float(r["test_error_after"]) for r in rows}
    upto = [acc[r.rank] for r in sweep if best is not None and r.rank <= best]
    ok = best is not None and all(b >= a for a, b in zip(upto, upto[1:])) and acc[best] >= 0.9 and elapsed <= 300
    return ok, (f"accuracy by rank {', '.join(f'{k}: {v:.3f}' for k, v in acc.items())}; best rank {best} "
                f"(>= 0.9, non-decreasing up to it)")


CRITERIA = {1: crit1, 2: crit2, 3: crit3, 4: crit4, 5: crit5, 6: crit6, 7: crit7, 8: crit8, 9: crit9, 10: crit10}


def run_one(number, ctx):
    t0 = time.perf_counter()
    try:
        ok, detail = CRITERIA[number](ctx)
    except Exception as exc:  # a crash is a failed criterion, reported like any other
        ok, detail = False, f"raised {type(exc).__name__}: {exc}"
    out = Outcome(number, bool(ok), detail, time.perf_counter() - t0)
    RESULTS.append(out)
    print(out.line(), flush=True)
    return out


def compare_runs(dir_a, dir_b, skip=("seconds",)):
    """Cell-by-cell comparison of every CSV under two run roots; returns mismatch descriptions."""
    def csvs(root):
        found = set()
        for base, _, files in os.walk(root):
            found.update(os.path.relpath(os.path.join(base, f), root) for f in files if f.endswith(".csv"))
        return found

    a, b = csvs(dir_a), csvs(dir_b)
    problems_found = [f"only in first run: {p}" for p in sorted(a - b)] + [f"only in rerun: {p}" for p in sorted(b - a)]
    n_cells = 0
    for rel_path in sorted(a & b):
        ha, ra = artifacts.read_csv(os.path.join(dir_a, rel_path))
        hb, rb = artifacts.read_csv(os.path.join(dir_b, rel_path))
        if ha != hb or len(ra) != len(rb):
            problems_found.append(f"{rel_path}: header or row count differs")
            continue
        keep = [i for i, h in enumerate(ha) if h not in skip]
        for k, (x, y) in enumerate(zip(ra, rb)):
            for i in keep:
                n_cells += 1
                if x[i] != y[i]:
                    problems_found.append(f"{rel_path} row {k} {ha[i]}: {x[i]} vs {y[i]}")
    return problems_found, len(a & b), n_cells


def main(argv=None):
    ap = argparse.ArgumentParser(description="run the acceptance criteria and write their CSVs")
    ap.add_argument("--out", required=True)
    ap.add_argument("--only", type=int, nargs="*", help="criterion numbers (default: 1-10)")
    args = ap.parse_args(argv)
    limiter = cli.limit_threads()
    ctx = Context(args.out)
    try:
        outs = [run_one(n, ctx) for n in (args.only or sorted(CRITERIA))]
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    return 0 if all(o.ok for o in outs) else 1


if __name__ == "__main__":
    sys.exit(main())
