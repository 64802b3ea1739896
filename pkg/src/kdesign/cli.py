"""Command-line workflows.

Exit codes: 0 on success, 1 for usage errors and invalid inputs, 2 for
numerical failures.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from kdesign import candidates as cand
from kdesign.design import StepPolicy, center_index, herding, sbq_greedy
from kdesign.io import (
    ManifestError,
    RunManifest,
    format_kernel,
    hex_duplicates,
    parse_kernel,
    read_csv,
    read_points,
    write_csv,
    write_json,
    write_measure,
    write_points,
)
from kdesign.kernels import Kernel
from kdesign.measures import ClosedFormUniform, DefinitenessError, PotentialProvider, mc_potential_provider
from kdesign.metrics import (
    BoundInputs,
    Lemma,
    bound_value,
    covering_radius,
    default_eval_set,
    lambda_max,
    packing_radius,
)
from kdesign.quadrature import (
    SingularGramError,
    assemble,
    bordered_weights,
    factorize,
    optimal_weights_sum_to_one,
    optimal_weights_unconstrained,
    variance_reduced,
)

log = logging.getLogger("kdesign")

MC_SAMPLE_SIZE = 2**16


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def uniform_provider(kernel: Kernel, dim: int, seed: int) -> PotentialProvider:
    """Closed-form potentials of the uniform measure when available, Monte Carlo otherwise."""
    if kernel.dim == dim or (kernel.dim is None and dim == 1):
        try:
            return ClosedFormUniform(kernel)
        except NotImplementedError:
            pass
    log.info("no closed form for %s; using %d Monte-Carlo points", format_kernel(kernel), MC_SAMPLE_SIZE)
    return mc_potential_provider(kernel, f"uniform:d={dim}", MC_SAMPLE_SIZE, seed)


def load_candidates(spec: dict, dim: int) -> np.ndarray:
    if "sobol" in spec:
        return cand.sobol(dim, int(spec["sobol"]), int(spec.get("skip", 0))).points
    if "grid" in spec:
        return cand.grid(dim, int(spec["grid"])).points
    pts = cand.from_file(spec["file"]).points
    if pts.shape[1] != dim:
        raise ManifestError(f"candidate file has dimension {pts.shape[1]}, manifest says {dim}")
    return pts


# ---------------------------------------------------------------------------
# design
# ---------------------------------------------------------------------------


def run(manifest: RunManifest, out_dir: str | Path, threads: int = 1) -> dict:
    """Execute a manifest and write trace, design, metrics and summary files."""
    out_dir = Path(out_dir)
    t0 = time.perf_counter()
    kernel = parse_kernel(manifest.kernel)
    X_cand = load_candidates(manifest.candidates, manifest.dim)
    provider = uniform_provider(kernel, manifest.dim, manifest.seed)
    if manifest.algorithm == "sbq":
        design_idx, trace = _run_sbq(kernel, provider, X_cand, manifest.n_max)
        mmd_sq = trace[-1][3]
    else:
        result = herding(
            kernel,
            provider,
            X_cand,
            manifest.n_max,
            policy=StepPolicy(manifest.policy),
            threads=threads,
            algorithm=manifest.algorithm,
        )
        design_idx, trace = result.design_indices, result.trace
        mmd_sq = result.state.mmd_sq()
    design = X_cand[design_idx]
    cr = covering_radius(design, X_cand)
    pr = packing_radius(design) if len(design) > 1 else math.inf
    runtime = time.perf_counter() - t0
    outs = {k: out_dir / v for k, v in manifest.outputs.items()}
    write_csv(outs["trace"], ["n", "selected_index", "alpha", "mmd_sq", "cr", "pr"], trace)
    write_points(outs["design"], design)
    write_csv(outs["metrics"], ["n", "cr", "pr", "evaluation_set_size"], [[len(design), cr, pr, len(X_cand)]])
    summary = hex_duplicates({"mmd_sq": float(mmd_sq), "cr": float(cr), "pr": float(pr)})
    summary.update(
        {
            "n_points": len(design),
            "runtime_seconds": runtime,
            "kernel": manifest.kernel,
            "algorithm": manifest.algorithm,
            "policy": manifest.policy,
        }
    )
    write_json(outs["summary"], summary)
    return summary


def _run_sbq(kernel, provider, X_cand, n_max):
    idx = [center_index(X_cand)]
    g = assemble(kernel, X_cand[idx], provider)
    trace = [(1, idx[0], math.nan, variance_reduced(g), covering_radius(X_cand[idx], X_cand), math.inf)]
    while len(idx) < n_max:
        mask = np.ones(len(X_cand), dtype=bool)
        mask[idx] = False
        pool = np.flatnonzero(mask)
        j, s2 = sbq_greedy(g, kernel, provider, X_cand[pool])
        idx.append(int(pool[j]))
        g = assemble(kernel, X_cand[idx], provider)
        X = X_cand[idx]
        trace.append((len(idx), idx[-1], math.nan, s2, covering_radius(X, X_cand), packing_radius(X)))
    return idx, trace


def cmd_design(args) -> int:
    manifest = RunManifest.load(args.manifest)
    if args.seed is not None:
        manifest = RunManifest(**{**manifest.__dict__, "seed": args.seed})
    summary = run(manifest, args.out_dir, args.threads)
    print(f"n={summary['n_points']} mmd_sq={summary['mmd_sq']:.6g} cr={summary['cr']:.6g} pr={summary['pr']:.6g}")
    return 0


# ---------------------------------------------------------------------------
# weights, metrics, compare
# ---------------------------------------------------------------------------


def cmd_weights(args) -> int:
    kernel = parse_kernel(args.kernel)
    X = read_points(args.design)
    provider = uniform_provider(kernel, X.shape[1], args.seed if args.seed is not None else 0)
    g = assemble(kernel, X, provider)
    solver = {
        "sum-to-one": optimal_weights_sum_to_one,
        "unconstrained": optimal_weights_unconstrained,
        "bordered": bordered_weights,
    }[args.mode]
    sol = solver(g)
    data = sol.to_json()
    data["kernel"] = format_kernel(kernel)
    data.update({k: v for k, v in hex_duplicates({"variance": float(sol.variance)}).items() if k.endswith("_hex")})
    out = Path(args.out_dir) / "weights.json"
    write_json(out, data)
    print(f"variance={sol.variance:.6g} -> {out}")
    return 0


def _eval_set(args, d):
    if args.eval is not None:
        return read_points(args.eval)
    return default_eval_set(d)


def cmd_metrics(args) -> int:
    X = read_points(args.design)
    E = _eval_set(args, X.shape[1])
    cr = covering_radius(X, E)
    pr = packing_radius(X) if len(X) > 1 else math.inf
    out = Path(args.out_dir) / "metrics.csv"
    write_csv(out, ["n", "cr", "pr", "evaluation_set_size"], [[len(X), cr, pr, len(E)]])
    print(f"cr={cr:.6g} pr={pr:.6g} -> {out}")
    return 0


def cmd_compare(args) -> int:
    A = read_points(args.a)
    B = read_points(args.b)
    if A.shape[1] != B.shape[1]:
        raise UsageError("designs have different dimensions")
    E = _eval_set(args, A.shape[1])
    rows = []
    for n in range(2, min(len(A), len(B)) + 1):
        cr_a, cr_b = covering_radius(A[:n], E), covering_radius(B[:n], E)
        pr_a, pr_b = packing_radius(A[:n]), packing_radius(B[:n])
        rows.append([n, cr_a, cr_b, cr_a / cr_b, pr_a, pr_b, pr_b / pr_a if pr_a > 0 else math.inf])
    out = Path(args.out_dir) / "compare.csv"
    write_csv(out, ["n", "cr_a", "cr_b", "cr_efficiency", "pr_a", "pr_b", "pr_efficiency"], rows)
    print(f"{len(rows)} rows -> {out}")
    return 0


# ---------------------------------------------------------------------------
# bounds-check
# ---------------------------------------------------------------------------

_LEMMA_OF_POLICY = {
    "harmonic": Lemma.HARMONIC,
    "two-over-n-plus-3": Lemma.TWO_OVER_N_PLUS_3,
    "optimal": Lemma.OPTIMAL_STEP,
}


def cmd_bounds_check(args) -> int:
    """Replay a trace: ``mmd_sq - s^2`` equals ``||omega_n - omega_hat||^2`` in the reduced Gram norm."""
    manifest = RunManifest.load(args.manifest)
    if manifest.algorithm == "vertex-exchange":
        lemma = Lemma.VERTEX_EXCHANGE
    elif manifest.algorithm == "herding" and manifest.policy in _LEMMA_OF_POLICY:
        lemma = _LEMMA_OF_POLICY[manifest.policy]
    else:
        raise UsageError(f"no bound available for {manifest.algorithm}/{manifest.policy}")
    kernel = parse_kernel(manifest.kernel)
    X_cand = load_candidates(manifest.candidates, manifest.dim)
    provider = uniform_provider(kernel, manifest.dim, manifest.seed)
    g = assemble(kernel, X_cand, provider)
    Kt = g.Kt
    s2 = 1.0 / float(np.sum(factorize(Kt).solve(np.ones(len(X_cand)))))
    inputs = BoundInputs(lambda_max(Kt), len(X_cand))
    header, body = read_csv(args.trace)
    if header is None or "mmd_sq" not in header:
        raise UsageError("trace CSV needs n and mmd_sq columns")
    n_col, m_col = header.index("n"), header.index("mmd_sq")
    rows, violations = [], 0
    for row in body:
        n = int(row[n_col])
        gap = float(row[m_col]) - s2
        bound = bound_value(lemma, inputs, n)
        ok = gap <= bound
        violations += not ok
        rows.append([n, gap, bound, int(ok)])
    out = Path(args.out_dir) / "bounds.csv"
    write_csv(out, ["n", "gap", "bound", "pass"], rows)
    print(f"{lemma.value}: {len(rows) - violations}/{len(rows)} iterations within the bound -> {out}")
    return 0 if violations == 0 else 2


# ---------------------------------------------------------------------------
# kl-design
# ---------------------------------------------------------------------------


def cmd_kl_design(args) -> int:
    from kdesign.kl import c_optimal_measure, extract_exact_design, nystrom_basis

    kernel = parse_kernel(args.kernel)
    d = kernel.dim or 1
    basis = nystrom_basis(kernel, args.M, grid_points=args.quadrature_grid)
    X_cand = cand.grid(d, args.grid).points
    res = c_optimal_measure(basis, X_cand, args.m, max_iter=args.max_iter)
    out_dir = Path(args.out_dir)
    xi = res.measure
    write_measure(out_dir / "measure.csv", xi)
    write_json(out_dir / "basis.json", {**basis.header(), "m": args.m})
    write_csv(
        out_dir / "basis_vectors.csv",
        [f"phi{k + 1}" for k in range(basis.eigenvalues.size)],
        basis.vectors.tolist(),
    )
    write_csv(out_dir / "criterion.csv", ["iteration", "criterion"], list(enumerate(res.criterion)))
    summary = {
        "support_size": int(xi.n),
        "iterations": res.iterations,
        "converged": res.converged,
        "min_directional_derivative": res.min_derivative,
        "criterion": res.criterion[-1],
    }
    if args.n is not None:
        idx = extract_exact_design(xi, args.n)
        write_points(out_dir / "design.csv", xi.support[idx])
        summary["design_size"] = int(len(idx))
    write_json(out_dir / "summary.json", summary)
    print(f"support={xi.n} iterations={res.iterations} converged={res.converged} criterion={res.criterion[-1]:.6g}")
    return 0 if res.converged else 2


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _add_global_flags(p: argparse.ArgumentParser, defaults: dict | None) -> None:
    def default(name):
        return argparse.SUPPRESS if defaults is None else defaults[name]

    p.add_argument("--seed", type=int, default=default("seed"), help="seed for Monte-Carlo potentials")
    p.add_argument("--threads", type=int, default=default("threads"), help="threads for candidate scans")
    p.add_argument("--out-dir", default=default("out_dir"), help="directory for output files")
    p.add_argument("-v", "--verbose", action="store_true", default=default("verbose"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kdesign", description="Kernel-based space-filling design and quadrature.")
    _add_global_flags(parser, {"seed": None, "threads": 1, "out_dir": ".", "verbose": False})
    # repeated on every subcommand so the flags may follow it; suppressed
    # defaults keep values given before the subcommand
    common = _Parser(add_help=False)
    _add_global_flags(common, None)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("design", parents=[common], help="run a design manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("weights", parents=[common], help="quadrature weights for a design")
    p.add_argument("design")
    p.add_argument("--kernel", required=True)
    p.add_argument("--mode", choices=("sum-to-one", "unconstrained", "bordered"), default="sum-to-one")
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("metrics", parents=[common], help="covering and packing radii of a design")
    p.add_argument("design")
    p.add_argument("--eval", help="CSV of evaluation points for the covering radius")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("compare", parents=[common], help="prefix efficiencies of two designs")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--eval", help="CSV of evaluation points for the covering radius")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bounds-check", parents=[common], help="check a herding trace against convergence bounds")
    p.add_argument("manifest")
    p.add_argument("trace")
    p.set_defaults(func=cmd_bounds_check)

    p = sub.add_parser("kl-design", parents=[common], help="Bayesian c-optimal design on a grid")
    p.add_argument("--kernel", required=True)
    p.add_argument("--grid", type=int, default=32, help="candidate grid points per axis")
    p.add_argument("--M", type=int, required=True, help="number of regressors (intercept included)")
    p.add_argument("--m", type=float, required=True, help="projected number of observations")
    p.add_argument("--n", type=int, help="also extract an exact design of this size")
    p.add_argument("--quadrature-grid", type=int, default=100)
    p.add_argument("--max-iter", type=int, default=5000)
    p.set_defaults(func=cmd_kl_design)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (np.linalg.LinAlgError, SingularGramError, DefinitenessError, FloatingPointError) as exc:
        print(f"kdesign: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ManifestError, ValueError, OSError) as exc:
        print(f"kdesign: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
