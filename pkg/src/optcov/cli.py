"""Command-line interface: ``optcov {degrade,solve,eval,verify,bench}``.

Exit status: 0 success, 1 invalid input, 2 solver failure, 3 failed verification.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import os
import sys
import time

import numpy as np

from . import io as fio
from .covariance import (
    ConvertedReverse,
    Delta,
    DiagSpatial,
    DiagTransform,
    ExactPosterior,
    IsoAnalytic,
    IsoDiffPIR,
    IsoPigdm,
    IsotropicCovariance,
    TmpdDiag,
    VarianceTable,
    draw_signals,
    estimate_analytic_variance,
    fit_transform_variance,
)
from .denoisers import GmmDenoiser
from .errors import CapabilityError, OptcovError, SingularityError, SolverError, ValidationError
from .guidance import GuidanceConfig, compute_v, dense_v
from .metrics import metric_report, report_csv, report_table
from .operators import CircularConvOp, IdentityOp, MaskOp, MeasurementModel, SuperResOp
from .sampler import SamplerConfig, sigma_grid, solve_inverse_problem
from .transforms import HaarBasis
from .verify import format_check, run_suites

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_VERIFY = 0, 1, 2, 3
TASKS = ("inpaint", "deblur", "sr", "identity")
COVS = ("dps", "pigdm", "diffpir", "analytic", "convert", "tmpd", "dwt", "exact")


# ---------------------------------------------------------------- helpers


def load_signal(path):
    """Images (``.pgm``/``.ppm``) or PCT1 tensors."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".pgm", ".ppm", ".pnm"):
        return fio.read_image(path)
    return fio.read_tensor(path)


def parse_shape(text):
    try:
        shape = tuple(int(v) for v in str(text).replace("x", ",").split(",") if v.strip())
    except ValueError:
        raise ValidationError(f"invalid shape {text!r}") from None
    if not shape or any(n <= 0 for n in shape):
        raise ValidationError(f"invalid shape {text!r}")
    return shape


def build_operator(task, shape, kernel=None, mask=None, sr_factor=None):
    if task not in TASKS:
        raise ValidationError(f"unknown task {task!r}; expected one of {TASKS}")
    if task == "identity":
        return IdentityOp(shape)
    if task == "inpaint":
        if mask is None:
            raise ValidationError("inpainting needs --mask")
        m = fio.read_mask(mask)
        if len(shape) == 3:
            m = np.repeat(m[..., None], shape[2], axis=2)
        if m.shape != tuple(shape):
            raise ValidationError(f"mask shape {m.shape} does not match signal {shape}")
        return MaskOp(m)
    if kernel is None:
        raise ValidationError(f"{task} needs --kernel")
    k = fio.read_kernel(kernel)
    if len(shape) == 1:
        k = k.reshape(-1)
    if task == "deblur":
        return CircularConvOp(k, shape)
    if sr_factor is None:
        raise ValidationError("super-resolution needs --sr-factor")
    return SuperResOp(k, shape, int(sr_factor))


def _visualize(op, y):
    if isinstance(op, (MaskOp, SuperResOp)):
        return op.pseudo_inverse(y)
    return y


def _write_csv(path, header, rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    fio.atomic_write(path, buf.getvalue(), "w")


# ---------------------------------------------------------------- degrade


def cmd_degrade(args):
    x = load_signal(args.input)
    op = build_operator(args.task, x.shape, args.kernel, args.mask, args.sr_factor)
    if args.sigma < 0:
        raise ValidationError("--sigma must be non-negative")
    rng = np.random.default_rng(args.seed)
    meas, noise = MeasurementModel.simulate(op, x, args.sigma, rng)
    os.makedirs(args.out, exist_ok=True)
    out = lambda name: os.path.join(args.out, name)  # noqa: E731
    fio.write_tensor(out("y.pct"), meas.y)
    fio.write_tensor(out("noise.pct"), noise)
    viz = _visualize(op, meas.y)
    fio.write_tensor(out("viz.pct"), viz)
    if viz.ndim >= 2 and (viz.ndim == 2 or viz.shape[-1] == 3):
        fio.write_image(out("viz.pgm" if viz.ndim == 2 else "viz.ppm"), viz)
    cfg = {
        "task": args.task,
        "shape": ",".join(map(str, x.shape)),
        "measurement": os.path.abspath(out("y.pct")),
        "sigma": repr(float(args.sigma)),
        "seed": str(args.seed),
    }
    for key in ("kernel", "mask", "sr_factor"):
        value = getattr(args, key)
        if value is not None:
            cfg[key] = os.path.abspath(value) if key != "sr_factor" else str(value)
    fio.write_config(out("degrade.cfg"), cfg)
    print(f"wrote measurement {meas.y.shape} to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- solve

SOLVE_DEFAULTS = {
    "guidance": "type2",
    "cov": "pigdm",
    "lambda": "1.0",
    "sampler": "heun",
    "steps": "50",
    "sigma_min": "0.002",
    "sigma_max": "80.0",
    "rho": "7.0",
    "churn": "80.0",
    "s_tmin": "0.05",
    "s_tmax": "50.0",
    "s_noise": "1.003",
    "seed": "0",
    "cg_tol": "1e-4",
    "cg_max_iter": "1000",
    "dwt_levels": "1",
    "fit_samples": "2000",
    "adaptive_weight": "false",
}

SOLVE_KEYS = tuple(SOLVE_DEFAULTS) + (
    "task", "shape", "measurement", "sigma", "kernel", "mask", "sr_factor", "prior",
    "var_table", "dps_zeta", "switch_sigma", "schedule", "batch",
)


def _truthy(v):
    return str(v).lower() in ("1", "true", "yes", "on")


def resolve_run_config(args):
    """Merge defaults, an optional config file and explicit flags (highest priority)."""
    cfg = dict(SOLVE_DEFAULTS)
    if args.config:
        cfg.update(fio.read_config(args.config))
    for key in SOLVE_KEYS:
        value = getattr(args, key, None)
        if value is not None and value is not False:
            cfg[key] = str(value)
    unknown = set(cfg) - set(SOLVE_KEYS)
    if unknown:
        raise ValidationError(f"unknown configuration keys {sorted(unknown)}")
    for key in ("task", "measurement", "sigma", "prior"):
        if key not in cfg:
            raise ValidationError(f"missing required setting {key!r}")
    return cfg


def build_covariance(cfg, prior, shape, s_cfg):
    name = cfg["cov"]
    if name not in COVS:
        raise ValidationError(f"unknown covariance {name!r}; expected one of {COVS}")
    if name == "dps":
        return Delta()
    if name == "pigdm":
        return IsoPigdm()
    if name == "diffpir":
        return IsoDiffPIR(float(cfg["lambda"]))
    if name == "exact":
        return ExactPosterior()
    if name == "tmpd":
        return TmpdDiag()
    if name == "analytic":
        if "var_table" in cfg:
            return IsoAnalytic(VarianceTable.from_csv(cfg["var_table"]))
        rng = np.random.default_rng(int(cfg["seed"]))
        n = int(cfg["fit_samples"])
        samples = draw_signals(prior, n, shape, rng)
        return IsoAnalytic(estimate_analytic_variance(GmmDenoiser(prior, shape), samples, seed=int(cfg["seed"])))
    if name == "convert":
        if "schedule" not in cfg:
            raise ValidationError("the convert covariance needs --schedule")
        return ConvertedReverse(fio.read_schedule(cfg["schedule"]))
    basis = HaarBasis(shape, int(cfg["dwt_levels"]))
    grid = sigma_grid(s_cfg)[:-1]
    table = fit_transform_variance(prior, basis, grid, int(cfg["fit_samples"]), seed=int(cfg["seed"]), shape=shape)
    return DiagTransform(basis, table=table)


def cmd_solve(args):
    cfg = resolve_run_config(args)
    y = fio.read_tensor(cfg["measurement"])
    shape = parse_shape(cfg["shape"]) if "shape" in cfg else y.shape
    op = build_operator(cfg["task"], shape, cfg.get("kernel"), cfg.get("mask"), cfg.get("sr_factor"))
    meas = MeasurementModel(op, float(cfg["sigma"]), y)
    prior = fio.read_gmm(cfg["prior"])
    denoiser = GmmDenoiser(prior, shape)
    schedule = fio.read_schedule(cfg["schedule"]) if "schedule" in cfg else None
    s_cfg = SamplerConfig(
        kind={"heun": "heun", "heun-stoch": "heun-stoch", "ancestral": "ancestral"}.get(cfg["sampler"], cfg["sampler"]),
        steps=int(cfg["steps"]), sigma_min=float(cfg["sigma_min"]), sigma_max=float(cfg["sigma_max"]),
        rho=float(cfg["rho"]), s_churn=float(cfg["churn"]), s_tmin=float(cfg["s_tmin"]),
        s_tmax=float(cfg["s_tmax"]), s_noise=float(cfg["s_noise"]), seed=int(cfg["seed"]), schedule=schedule,
    )
    g_cfg = GuidanceConfig(
        mode=cfg["guidance"],
        covariance=build_covariance(cfg, prior, shape, s_cfg),
        dps_zeta=float(cfg["dps_zeta"]) if "dps_zeta" in cfg else None,
        adaptive_weight=_truthy(cfg["adaptive_weight"]),
        switch_sigma=float(cfg["switch_sigma"]) if "switch_sigma" in cfg else None,
        cg_tol=float(cfg["cg_tol"]),
        cg_max_iter=int(cfg["cg_max_iter"]),
    )
    batch = int(cfg["batch"]) if "batch" in cfg else None
    traj = solve_inverse_problem(meas, denoiser, g_cfg, s_cfg, batch=batch)
    os.makedirs(args.out, exist_ok=True)
    fio.write_tensor(os.path.join(args.out, "recon.pct"), traj.final)
    rows = [[i, repr(r.t), repr(r.sigma), repr(r.residual), repr(r.state_residual), r.cg_iterations, r.covariance]
            for i, r in enumerate(traj.steps)]
    final = meas.residual(traj.final)
    final_norm = float(np.mean(np.sqrt(np.sum(final**2, axis=tuple(range(final.ndim - len(op.out_shape), final.ndim))))))
    rows.append([len(rows), "0.0", "0.0", repr(final_norm), repr(final_norm), 0, "final"])
    header = ["eval", "t", "sigma", "residual", "state_residual", "cg_iterations", "covariance"]
    _write_csv(os.path.join(args.out, "steps.csv"), header, rows)
    fio.write_config(os.path.join(args.out, "run.cfg"), dict(sorted(cfg.items())))
    print(f"final residual norm {final_norm:.6g}; wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def cmd_eval(args):
    if len(args.recon) != len(args.ref):
        raise ValidationError("give the same number of --recon and --ref files")
    images = [load_signal(p) for p in args.recon]
    refs = [load_signal(p) for p in args.ref]
    names = [os.path.basename(p) for p in args.recon]
    report = metric_report(images, refs, args.peak, names)
    print(report_table(report))
    if args.csv:
        fio.atomic_write(args.csv, report_csv(report), "w")
    return EXIT_OK


# ---------------------------------------------------------------- verify


def cmd_verify(args):
    checks = run_suites(args.suites, seed=args.seed, emit=lambda c: print(format_check(c), flush=True))
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_OK if not failed else EXIT_VERIFY


# ---------------------------------------------------------------- bench


def cmd_bench(args):
    rng = np.random.default_rng(args.seed)
    rows = []
    for n in args.sizes:
        shape = (n, n)
        k = rng.uniform(size=(5, 5))
        if args.task == "deblur":
            op = CircularConvOp(k / k.sum(), shape)
        elif args.task == "sr":
            op = SuperResOp(k / k.sum(), shape, 2)
        else:
            op = MaskOp(rng.uniform(size=shape) < 0.5)
        D = rng.uniform(-1, 1, shape)
        meas = MeasurementModel(op, args.sigma, rng.standard_normal(op.out_shape))
        cov = IsotropicCovariance(args.r2, shape)
        results = {}
        for method in ("closed", "cg", "dense"):
            start = time.perf_counter()
            try:
                v = dense_v(meas, D, cov) if method == "dense" else compute_v(meas, D, cov, method=method)[0]
            except CapabilityError as exc:
                rows.append([n * n, method, "", "", f"refused: {exc}"])
                continue
            results[method] = v
            elapsed = time.perf_counter() - start
            ref = results.get("closed")
            rel = np.linalg.norm(v - ref) / max(np.linalg.norm(ref), 1e-300) if ref is not None else 0.0
            rows.append([n * n, method, f"{elapsed:.6f}", f"{rel:.3e}", "ok" if rel <= 1e-3 else "MISMATCH"])
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["d", "method", "seconds", "rel_err_vs_closed", "status"])
    w.writerows(rows)
    text = buf.getvalue()
    if args.csv:
        fio.atomic_write(args.csv, text, "w")
    sys.stdout.write(text)
    return EXIT_OK if all(r[4] != "MISMATCH" for r in rows) else EXIT_VERIFY


# ---------------------------------------------------------------- parser


def _sizes(text):
    return [int(v) for v in text.split(",")]


def build_parser():
    p = argparse.ArgumentParser(prog="optcov", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("degrade", help="simulate y = A x + n")
    d.add_argument("--input", required=True, help="PGM/PPM image or PCT1 tensor")
    d.add_argument("--task", required=True, choices=TASKS)
    d.add_argument("--kernel")
    d.add_argument("--mask")
    d.add_argument("--sr-factor", dest="sr_factor", type=int)
    d.add_argument("--sigma", type=float, default=0.0)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_degrade)

    s = sub.add_parser("solve", help="guided diffusion reconstruction")
    s.add_argument("--config", help="key=value file (degrade.cfg works); flags override it")
    s.add_argument("--out", required=True)
    s.add_argument("--task", choices=TASKS)
    s.add_argument("--measurement")
    s.add_argument("--shape")
    s.add_argument("--sigma", type=float)
    s.add_argument("--kernel")
    s.add_argument("--mask")
    s.add_argument("--sr-factor", dest="sr_factor", type=int)
    s.add_argument("--prior")
    s.add_argument("--guidance", choices=("type1", "type2", "ddnm"))
    s.add_argument("--cov", choices=COVS)
    s.add_argument("--lambda", dest="lambda", type=float)
    s.add_argument("--var-table", dest="var_table")
    s.add_argument("--dwt-levels", dest="dwt_levels", type=int)
    s.add_argument("--fit-samples", dest="fit_samples", type=int)
    s.add_argument("--dps-zeta", dest="dps_zeta", type=float)
    s.add_argument("--adaptive-weight", dest="adaptive_weight", action="store_true", default=None)
    s.add_argument("--switch-sigma", dest="switch_sigma", type=float)
    s.add_argument("--cg-tol", dest="cg_tol", type=float)
    s.add_argument("--cg-max-iter", dest="cg_max_iter", type=int)
    s.add_argument("--sampler", choices=("heun", "heun-stoch", "ancestral"))
    s.add_argument("--steps", type=int)
    s.add_argument("--sigma-min", dest="sigma_min", type=float)
    s.add_argument("--sigma-max", dest="sigma_max", type=float)
    s.add_argument("--rho", type=float)
    s.add_argument("--churn", type=float)
    s.add_argument("--s-tmin", dest="s_tmin", type=float)
    s.add_argument("--s-tmax", dest="s_tmax", type=float)
    s.add_argument("--s-noise", dest="s_noise", type=float)
    s.add_argument("--schedule", help="beta file or 'linear T bmin bmax'")
    s.add_argument("--batch", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_solve)

    e = sub.add_parser("eval", help="PSNR/SSIM/MAD report")
    e.add_argument("--recon", nargs="+", required=True)
    e.add_argument("--ref", nargs="+", required=True)
    e.add_argument("--peak", type=float, default=2.0)
    e.add_argument("--csv")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run verification suites")
    v.add_argument("suites", nargs="+", help="suite names or 'all'")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="time closed-form, CG and dense evaluations of v")
    b.add_argument("--task", choices=("inpaint", "deblur", "sr"), default="deblur")
    b.add_argument("--sizes", type=_sizes, default=[16, 32])
    b.add_argument("--sigma", type=float, default=0.1)
    b.add_argument("--r2", type=float, default=0.5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--csv")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SolverError, SingularityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValidationError, CapabilityError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OptcovError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
