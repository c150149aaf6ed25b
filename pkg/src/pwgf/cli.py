"""Command-line scenario runner.

Subcommands: ``run`` (execute a scenario and write artifacts), ``oracle``
(expose the ground-truth generators), ``plotdata`` (post-process a run
directory into plot-ready CSVs) and ``check`` (quick invariant suite).

Exit codes: 0 success, 2 configuration error, 3 numerical failure
(Jacobian sign flip or solver divergence), 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import (PRESETS, RunConfig, apply_overrides, build_energy,
                     build_flow_options, build_map, build_reference,
                     config_from_dict, config_to_dict, preset_dict,
                     serialize_config)
from .errors import ConfigurationError, FlowAbort, NumericalError, PwgfError
from .flow import (FlowResult, run_flow, write_metrics_csv, write_snapshot_csv)
from .maps import save_map
from .oracles import (ZkbProfile, empirical_w2, ou_moments, particle_simulate,
                      zkb_sample)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _versions() -> dict:
    import scipy
    return {"pwgf": __version__, "numpy": np.__version__,
            "scipy": scipy.__version__, "python": platform.python_version()}


def _seed_table(cfg: RunConfig) -> dict:
    return {
        "global": cfg.seed,
        "map_init": cfg.map.seed if cfg.map.seed is not None else cfg.seed + 1,
        "reference": cfg.reference.seed if cfg.reference.seed is not None else cfg.seed + 2,
        "batch_base": cfg.seed,          # step k draws with batch_base ^ k
        "energy_base": "batch_base ^ step + 0x9E3779B9 when n_energy differs",
        "snapshot_base": cfg.seed + 0x5A5A5A5A,  # + snapshot index
    }


def _time_tag(t: float) -> str:
    return ("%g" % t).replace("-", "m").replace(".", "p")


def run_scenario(cfg: RunConfig, out_dir=None) -> dict:
    """Execute one run and write metrics, snapshots, checkpoint and manifest.

    On numerical failure, partial artifacts plus a failure manifest are
    still written before the error propagates.
    """
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": config_to_dict(cfg),
        "seeds": _seed_table(cfg),
        "versions": _versions(),
        "status": "running",
    }
    pmap = build_map(cfg)
    reference = build_reference(cfg)
    energy = build_energy(cfg)
    opts = build_flow_options(cfg)

    def _write_manifest():
        with open(out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=2)
            fh.write("\n")

    try:
        result = run_flow(pmap, energy, reference, opts)
    except FlowAbort as exc:
        write_metrics_csv(exc.metrics, out / "metrics.csv")
        manifest["status"] = "failed"
        manifest["failure"] = {
            "reason": exc.reason,
            "message": str(exc),
            "step": exc.state.step if exc.state is not None else None,
        }
        _write_manifest()
        raise

    write_metrics_csv(result.metrics, out / "metrics.csv")
    paths = {"metrics": str(out / "metrics.csv")}
    for when, samples in result.snapshots:
        p = out / f"snapshot_t{_time_tag(when)}.csv"
        write_snapshot_csv(samples, p)
        paths[f"snapshot_{when}"] = str(p)
    save_map(result.final_map, out / "map_final.ckpt")
    paths["checkpoint"] = str(out / "map_final.ckpt")
    manifest["status"] = "completed"
    manifest["snapshots"] = [{"t": t, "file": f"snapshot_t{_time_tag(t)}.csv"}
                             for t, _ in result.snapshots]
    manifest["skipped_snapshots"] = result.skipped_snapshots
    _write_manifest()
    paths["manifest"] = str(out / "manifest.json")
    return paths


# ---------------------------------------------------------------------------
# plotdata
# ---------------------------------------------------------------------------

def emit_plotdata(run_dir) -> list:
    """Derive plot-ready CSVs from a completed run directory.

    Produces the energy/KL curves, (x0, x1) scatter projections per snapshot
    and, for porous-medium runs, the empirical versus analytic support radius.
    """
    run = Path(run_dir)
    missing = [str(run / f) for f in ("manifest.json", "metrics.csv")
               if not (run / f).exists()]
    if missing:
        raise ConfigurationError("run directory is missing: " + ", ".join(missing))
    with open(run / "manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    raw = np.genfromtxt(run / "metrics.csv", delimiter=",", names=True)
    raw = np.atleast_1d(raw)
    written = []

    def _write(name, header, rows):
        p = run / name
        with open(p, "w", encoding="utf-8") as fh:
            fh.write(header + "\n")
            for row in rows:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
        written.append(str(p))

    _write("energy_curve.csv", "t,energy",
           [(r["t"], r["energy"]) for r in raw])
    if not all(math.isnan(float(r["kl"])) for r in raw):
        _write("kl_curve.csv", "t,kl", [(r["t"], r["kl"]) for r in raw])

    snap_entries = manifest.get("snapshots", [])
    snap_missing = [e["file"] for e in snap_entries if not (run / e["file"]).exists()]
    if snap_missing:
        raise ConfigurationError("run directory is missing: " + ", ".join(snap_missing))
    for entry in snap_entries:
        pts = np.genfromtxt(run / entry["file"], delimiter=",", skip_header=1)
        pts = np.atleast_2d(pts)
        proj = pts[:, : min(2, pts.shape[1])]
        cols = ",".join(f"x{i}" for i in range(proj.shape[1]))
        _write(f"scatter_t{_time_tag(entry['t'])}.csv", cols, proj)

    ref = manifest["config"]["reference"]
    if ref.get("kind") == "zkb" and snap_entries:
        profile = ZkbProfile(manifest["config"]["dim"], ref["m"])
        t0 = ref["t0"]
        rows = []
        for entry in snap_entries:
            pts = np.atleast_2d(np.genfromtxt(run / entry["file"],
                                              delimiter=",", skip_header=1))
            radii = np.linalg.norm(pts, axis=1)
            t_phys = t0 + entry["t"]
            rows.append((t_phys, float(np.percentile(radii, 99.0)),
                         profile.support_radius(t_phys)))
        _write("support.csv", "t,empirical_p99_radius,analytic_radius", rows)
    return written


# ---------------------------------------------------------------------------
# check: quick invariant suite
# ---------------------------------------------------------------------------

def run_checks() -> int:
    """A fast self-test of the core contracts; prints one line per check."""
    from .flow import MetricOperator, dense_metric
    from .maps import AffineMap, PlanarFlowStack, ResidualMLP
    from .numerics import (Component, LinearOperator, SamplerSpec,
                           dense_pinv_solve, minres_min_norm)

    failures = 0

    def report(name, ok, detail=""):
        nonlocal failures
        print(f"[check] {name}: {'ok' if ok else 'FAIL'}"
              + (f" ({detail})" if detail else ""))
        if not ok:
            failures += 1

    rng = np.random.default_rng(7)

    spec = SamplerSpec("gaussian", 2, (Component(1.0, "gaussian", (0.0, 0.0),
                                                 (1.0, 1.0)),), seed=3)
    a = spec.build().sample(64, np.random.default_rng(3))
    b = spec.build().sample(64, np.random.default_rng(3))
    report("sampler determinism", bool(np.array_equal(a, b)))

    pmap = PlanarFlowStack(2, 4, rng.standard_normal(20) * 0.5)
    cache = pmap.prepare(rng.standard_normal((64, 2)))
    op = MetricOperator(pmap, cache)
    u, v = rng.standard_normal((2, pmap.n_params))
    sym = abs(u @ op.apply(v) - v @ op.apply(u))
    scale = abs(u @ op.apply(v)) + 1e-30
    report("metric symmetry", sym / scale < 1e-12, f"rel {sym / scale:.2e}")
    report("metric PSD", op.quadratic_form(v) >= 0.0)
    G = dense_metric(pmap, cache)
    diff = np.linalg.norm(op.apply(v) - G @ v) / np.linalg.norm(G @ v)
    report("metric dense cross-check", diff < 1e-12, f"rel {diff:.2e}")

    for m_, name in ((AffineMap.identity(2), "affine"),
                     (pmap, "planar"),
                     (ResidualMLP.identity(2, [6], seed=1), "mlp")):
        z = rng.standard_normal((16, 2))
        c = m_.prepare(z)
        vv = rng.standard_normal(m_.n_params)
        y = rng.standard_normal((16, 2))
        lhs = float(np.sum(y * m_.param_jvp_batch(c, vv)))
        rhs = float(m_.param_vjp_batch(c, y) @ vv)
        rel = abs(lhs - rhs) / (abs(lhs) + 1e-30)
        report(f"adjoint identity ({name})", rel < 1e-12, f"rel {rel:.2e}")

    Q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    lam = np.array([3.0, 2.5, 1.8, 1.0, 0.6, 0.0, 0.0, 0.0])
    A = Q @ np.diag(lam) @ Q.T
    xs = Q[:, :5] @ rng.standard_normal(5)
    rhs_vec = A @ xs
    res = minres_min_norm(LinearOperator(8, lambda t: A @ t), rhs_vec, tol=1e-12)
    ref_x = dense_pinv_solve(A, rhs_vec)
    report("minres min-norm vs dense pinv",
           np.linalg.norm(res.x - ref_x) < 1e-6,
           f"diff {np.linalg.norm(res.x - ref_x):.2e}")

    prof = ZkbProfile(2, 2.4)
    mass = prof.mass_by_quadrature(0.1)
    report("zkb closed-form mass", abs(mass - 1.0) < 1e-8, f"mass {mass:.12f}")

    pts = rng.standard_normal((128, 2))
    w = empirical_w2(pts, pts + np.array([0.75, 0.0]))
    report("w2 translation", abs(w - 0.75) < 1e-12, f"w2 {w:.6f}")

    print(f"[check] {'all passed' if failures == 0 else f'{failures} failure(s)'}")
    return EXIT_OK if failures == 0 else 1


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pwgf",
                                description="Wasserstein gradient flow solver "
                                            "on push-forward map parameters")
    sub = p.add_subparsers(dest="command", required=True)

    runp = sub.add_parser("run", help="execute a scenario")
    runp.add_argument("--config", help="path to a JSON config")
    runp.add_argument("--preset", help="named preset", choices=sorted(PRESETS))
    runp.add_argument("--set", dest="overrides", action="append", default=[],
                      metavar="KEY=VALUE", help="dotted-path config override")
    runp.add_argument("--out", help="output directory (overrides config)")
    runp.add_argument("--seed", type=int, help="global seed (overrides config)")
    runp.add_argument("--threads", type=int, default=None,
                      help="BLAS thread cap (default: PWGF_THREADS or library default)")

    orc = sub.add_parser("oracle", help="ground-truth generators")
    osub = orc.add_subparsers(dest="oracle_command", required=True)

    zd = osub.add_parser("zkb-density")
    zd.add_argument("--d", type=int, required=True)
    zd.add_argument("--m", type=float, required=True)
    zd.add_argument("--t", type=float, required=True)
    zd.add_argument("--point", required=True, help="comma-separated coordinates")

    zs = osub.add_parser("zkb-sample")
    zs.add_argument("--d", type=int, required=True)
    zs.add_argument("--m", type=float, required=True)
    zs.add_argument("--t", type=float, required=True)
    zs.add_argument("--n", type=int, required=True)
    zs.add_argument("--seed", type=int, default=0)
    zs.add_argument("--out", required=True)

    om = osub.add_parser("ou-moments")
    om.add_argument("--mean", required=True, help="comma-separated initial mean")
    om.add_argument("--sigma0-sq", type=float, required=True)
    om.add_argument("--diffusion", type=float, default=1.0)
    om.add_argument("--t", type=float, required=True)

    pt = osub.add_parser("particles")
    pt.add_argument("--initial", required=True, help="CSV of starting positions")
    pt.add_argument("--a", type=float, default=4.0)
    pt.add_argument("--b", type=float, default=2.0)
    pt.add_argument("--h", type=float, required=True)
    pt.add_argument("--steps", type=int, required=True)
    pt.add_argument("--out", required=True)

    w2 = osub.add_parser("w2")
    w2.add_argument("file_a")
    w2.add_argument("file_b")

    pd = sub.add_parser("plotdata", help="derive plot CSVs from a run directory")
    pd.add_argument("run_dir")

    sub.add_parser("check", help="run the quick invariant suite")
    return p


def _configure_threads(threads) -> None:
    if threads is None:
        env = os.environ.get("PWGF_THREADS")
        threads = int(env) if env else None
    if threads is None:
        return
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(limits=threads)
    except ImportError:
        print("pwgf: threadpoolctl unavailable, --threads not enforced",
              file=sys.stderr)


def _load_csv_points(path) -> np.ndarray:
    pts = np.genfromtxt(path, delimiter=",", skip_header=1)
    return np.atleast_2d(pts)


def _cmd_run(args) -> int:
    if bool(args.config) == bool(args.preset):
        print("pwgf run: exactly one of --config or --preset is required",
              file=sys.stderr)
        return EXIT_CONFIG
    _configure_threads(args.threads)
    if args.preset:
        data = preset_dict(args.preset)
    else:
        with open(args.config, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    data = apply_overrides(data, args.overrides)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["output_dir"] = args.out
    cfg = config_from_dict(data)
    paths = run_scenario(cfg)
    print(f"pwgf run: completed, metrics at {paths['metrics']}")
    return EXIT_OK


def _cmd_oracle(args) -> int:
    if args.oracle_command == "zkb-density":
        prof = ZkbProfile(args.d, args.m)
        x = np.array([float(v) for v in args.point.split(",")])
        print(f"{prof.density(x, args.t)[0]:.17g}")
    elif args.oracle_command == "zkb-sample":
        prof = ZkbProfile(args.d, args.m)
        pts = zkb_sample(prof, args.t, args.n, seed=args.seed)
        write_snapshot_csv(pts, args.out)
        print(f"wrote {args.n} samples to {args.out}")
    elif args.oracle_command == "ou-moments":
        m0 = np.array([float(v) for v in args.mean.split(",")])
        mean, var = ou_moments(m0, args.sigma0_sq, args.diffusion, args.t)
        print("mean:", ",".join(f"{v:.17g}" for v in mean))
        print(f"variance: {var:.17g}")
    elif args.oracle_command == "particles":
        x0 = _load_csv_points(args.initial)
        final = particle_simulate(x0, args.a, args.b, args.h, args.steps)
        write_snapshot_csv(final, args.out)
        print(f"wrote {final.shape[0]} particles to {args.out}")
    elif args.oracle_command == "w2":
        a = _load_csv_points(args.file_a)
        b = _load_csv_points(args.file_b)
        print(f"{empirical_w2(a, b):.17g}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "oracle":
            return _cmd_oracle(args)
        if args.command == "plotdata":
            for path in emit_plotdata(args.run_dir):
                print(f"wrote {path}")
            return EXIT_OK
        if args.command == "check":
            return run_checks()
    except ConfigurationError as exc:
        print(f"pwgf: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FlowAbort, NumericalError) as exc:
        print(f"pwgf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"pwgf: i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
