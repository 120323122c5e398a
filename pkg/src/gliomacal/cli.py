"""Command-line entry point: ``gliomacal <subcommand> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O failure,
4 numerical failure. Failures print one JSON object on stderr. Every output
directory receives a ``run_manifest.json`` describing how it was produced.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import platform
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .anatomy import Anatomy, load_anatomy, save_anatomy
from .growth import GrowthParams, SeedError, SolverConfig, simulate
from .imaging import load_observations
from .priors import PriorSpec, default_prior
from .tmcmc import TmcmcConfig, TmcmcError, default_workers
from .volume_io import Volume, VolumeFormatError, load_any, write_volume

log = logging.getLogger("gliomacal")

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 2, 3, 4
MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("usage", message)
        sys.exit(EXIT_USAGE)


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def _read_json(path) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_manifest(directory, subcommand: str, config: dict, seeds: dict, inputs: dict, outputs: list, wall: float):
    import numba
    import scipy

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "config_hash": _config_hash(config),
        "seeds": seeds,
        "versions": {
            "gliomacal": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
        },
        "wall_time_s": wall,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": [str(p) for p in outputs],
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))


def _solver(cfg: dict) -> SolverConfig:
    return SolverConfig(**cfg.get("solver", {}))


def _load_anatomy(args, path) -> Anatomy:
    return load_anatomy(path, threshold=args.domain_threshold, csf_cut=args.csf_cut)


def _anatomy(args) -> Anatomy:
    if getattr(args, "anatomy", None):
        return _load_anatomy(args, args.anatomy)
    from .synthetic import phantom_anatomy

    return phantom_anatomy(tuple(args.dims), args.spacing, threshold=args.domain_threshold)


# -- subcommands -------------------------------------------------------------


def cmd_simulate(args) -> dict:
    from .synthetic import SyntheticSpec

    ref = SyntheticSpec()
    params = {"D_w": ref.D_w, "rho": ref.rho, "T": ref.T, **_read_json(args.params)}
    cfg = _read_json(args.config)
    anatomy = _anatomy(args)
    if "ic_mm" not in params:
        from .synthetic import default_seed_mm

        params["ic_mm"] = default_seed_mm(anatomy.meta)
    gp = GrowthParams(params["D_w"], params["rho"], params["T"], tuple(params["ic_mm"]))
    vol = simulate(anatomy, gp, _solver(cfg))
    out = Path(args.out)
    write_volume(out, vol)
    return {"dir": out.parent, "config": {"params": asdict(gp), **cfg}, "outputs": [out]}


def cmd_synth(args) -> dict:
    from .synthetic import SyntheticSpec, generate, phantom_tissues, save_case

    spec = SyntheticSpec.from_json(_read_json(args.spec))
    out = Path(args.out)
    if args.anatomy:
        anatomy_manifest = Path(args.anatomy)
    else:
        from .anatomy import build_anatomy

        wm, gm, csf = phantom_tissues(spec.dims, spec.spacing_mm)
        anatomy_manifest = save_anatomy(out / "anatomy", build_anatomy(wm, gm, csf), csf.data)
    anatomy = _load_anatomy(args, anatomy_manifest)
    case = generate(spec, anatomy)
    manifest = save_case(out, case, spec)
    return {
        "dir": out,
        "config": spec.to_json(),
        "seeds": {"noise_seed": spec.noise_seed},
        "inputs": {"anatomy": anatomy_manifest},
        "outputs": [manifest, out / "gt_u.vol", out / "gt_theta.json"],
    }


def cmd_calibrate(args) -> dict:
    from .inference import calibrate

    cfg = _read_json(args.config)
    tm = dict(cfg.get("tmcmc", {}))
    if args.seed is not None:
        tm["rng_seed"] = args.seed
    if args.samples is not None:
        tm["n_samples"] = args.samples
    tm.setdefault("workers", default_workers())
    config = TmcmcConfig(**tm)
    anatomy = _load_anatomy(args, args.anatomy)
    obs = load_observations(args.observations, anatomy.in_domain)
    prior = PriorSpec.load(args.prior) if args.prior else default_prior(obs.seg_flair, obs.meta)
    use_fet = not args.no_fet and cfg.get("use_fet", True)
    ens, result = calibrate(anatomy, obs, prior, config, _solver(cfg), use_fet)
    out = Path(args.out)
    ens.save(out)
    prior.save(out / "prior.json")
    record = {"tmcmc": asdict(config), "solver": asdict(_solver(cfg)), "use_fet": use_fet}
    record["tmcmc"].pop("workers")  # pool width does not change the result
    return {
        "dir": out,
        "config": record,
        "seeds": {"rng_seed": config.rng_seed},
        "inputs": {"anatomy": args.anatomy, "observations": args.observations, "prior": args.prior},
        "outputs": [out / "samples.csv", out / "generations.json", out / "prior.json"],
        "summary": {"log_evidence": result.log_evidence, "generations": len(result.trace)},
    }


def cmd_propagate(args) -> dict:
    from .posterior import PosteriorEnsemble, propagate

    cfg = _read_json(args.config)
    ens = PosteriorEnsemble.load(args.ensemble)
    anatomy = _load_anatomy(args, args.anatomy)
    n_prop = min(args.n_prop, len(ens))
    maps = propagate(ens, anatomy, _solver(cfg), n_prop)
    out = Path(args.out)
    maps.save(out)
    return {
        "dir": out,
        "config": {"n_prop": n_prop, "solver": asdict(_solver(cfg))},
        "inputs": {"ensemble": args.ensemble, "anatomy": args.anatomy},
        "outputs": [out / n for n in ("map_u.vol", "mean_u.vol", "std_u.vol", "stats.json")],
        "summary": {"n_prop": maps.n_prop, "skipped": maps.skipped, "mean_stability": maps.mean_stability},
    }


def cmd_plan(args) -> dict:
    from .rtplan import ctv_from_map, ctv_rtog, escalation

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    summary = {}
    if args.mode == "map":
        plan = ctv_from_map(load_any(Path(args.maps) / "map_u.vol"), args.threshold, args.largest_cc)
        path = out / f"ctv_map_{args.threshold:g}.vol"
        write_volume(path, plan.mask)
        outputs.append(path)
        summary[path.name] = plan.volume_cc
    elif args.mode == "rtog":
        if not args.seg:
            raise UsageError("--mode rtog needs --seg")
        brain = None
        if args.anatomy and not args.no_clip:
            brain = _load_anatomy(args, args.anatomy).brain
        plan = ctv_rtog(load_any(args.seg), args.margin, brain)
        path = out / f"ctv_rtog_{args.margin:g}mm.vol"
        write_volume(path, plan.mask)
        outputs.append(path)
        summary[path.name] = plan.volume_cc
    else:
        levels = args.levels or [0.001, 0.25, 0.5, 0.75]
        esc = escalation(load_any(Path(args.maps) / "map_u.vol"), levels)
        for (t, mask), cc in zip(esc.levels, esc.volumes_cc()):
            path = out / f"escalation_{t:g}.vol"
            write_volume(path, mask)
            outputs.append(path)
            summary[path.name] = cc
    (out / "plans.json").write_text(json.dumps({"volume_cc": summary}, indent=1))
    config = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
    return {"dir": out, "config": config, "inputs": {"maps": args.maps, "seg": args.seg}, "outputs": outputs}


def cmd_evaluate(args) -> dict:
    from .rtplan import CtvPlan, PlanKind, compare_plans

    recurrence = load_any(args.recurrence)
    if args.recurrence_threshold is not None:
        recurrence = Volume(recurrence.meta, np.asarray(recurrence.data) >= args.recurrence_threshold)
    plans = []
    for p in args.plan:
        vol = load_any(p)
        kind = PlanKind.RTOG_MARGIN if "rtog" in Path(p).name else PlanKind.MAP_THRESHOLD
        plans.append(CtvPlan(vol, kind, float("nan"), name=Path(p).stem))
    out = Path(args.out) if args.out else Path(args.plan[0]).parent
    rows = compare_plans(plans, recurrence, out)
    print(json.dumps(rows, indent=1))
    return {
        "dir": out,
        "config": {"plans": args.plan, "recurrence_threshold": args.recurrence_threshold},
        "inputs": {"recurrence": args.recurrence},
        "outputs": [out / "metrics.json", out / "metrics.csv"],
    }


def selftest() -> list[tuple[str, bool, str]]:
    """Analytic-oracle checks; returns ``(name, passed, detail)`` rows."""
    from scipy.integrate import solve_ivp
    from scipy.stats import norm

    from .anatomy import build_anatomy, diffusivity
    from .growth import evolve, stable_dt
    from .synthetic import phantom_tissues
    from .tmcmc import Target, run
    from .volume_io import GridMeta, Volume

    rows = []

    # logistic ODE: one isolated voxel, no diffusion
    meta = GridMeta((3, 3, 3), (1.0, 1.0, 1.0))
    wm = np.zeros(meta.dims)
    wm[1, 1, 1] = 1.0
    anat = build_anatomy(Volume(meta, wm), Volume(meta, np.zeros(meta.dims)), Volume(meta, np.zeros(meta.dims)))
    u0 = np.where(anat.in_domain, 0.1, 0.0)
    D = np.zeros(meta.dims)
    u, _ = evolve(u0, anat, D, 0.1, np.full(30, 1.0))
    ref = solve_ivp(lambda t, y: 0.1 * y * (1 - y), (0, 30), [0.1], rtol=1e-12, atol=1e-14).y[0, -1]
    err = abs(u[1, 1, 1] - ref) / ref
    rows.append(("logistic_ode", err < 1e-4, f"rel_err={err:.2e}"))

    # conservation with rho = 0 around ventricles
    anat = build_anatomy(*phantom_tissues((24, 24, 24), 1.0))
    D = diffusivity(anat, 0.5)
    rng = np.random.default_rng(0)
    u0 = np.where(anat.in_domain, rng.uniform(size=anat.meta.dims), 0.0)
    dt = 0.9 * stable_dt(D, anat.meta.spacing_mm)
    u, _ = evolve(u0, anat, D, 0.0, np.full(1000, dt), np.zeros(1000))
    rel = abs(u.sum() - u0.sum()) / u0.sum()
    rows.append(("conservation", rel < 1e-6, f"rel_drift={rel:.2e}"))

    # Gaussian TMCMC in 2D against a wide uniform prior
    lo, hi = -10.0, 10.0
    target = Target(
        lambda z: 0.0 if np.all((z >= lo) & (z <= hi)) else -math.inf,
        lambda z: float(-0.5 * z @ z - z.size * 0.5 * math.log(2 * math.pi)),
        lambda r, n: r.uniform(lo, hi, size=(n, 2)),
    )
    res = run(target, TmcmcConfig(n_samples=1000, chain_steps=3, beta2=0.3, rng_seed=1))
    mu = np.abs(res.samples.mean(axis=0)).max()
    logz_ref = 2 * math.log((norm.cdf(hi) - norm.cdf(lo)) / (hi - lo))
    dz = abs(res.log_evidence - logz_ref)
    rows.append(("tmcmc_gaussian", mu < 0.15 and dz < 0.3, f"max|mean|={mu:.3f} dlogZ={dz:.3f}"))
    return rows


def cmd_selftest(args) -> dict:
    rows = selftest()
    for name, ok, detail in rows:
        print(f"{'PASS' if ok else 'FAIL'} {name} {detail}")
    if not all(ok for _, ok, _ in rows):
        raise ArithmeticError("selftest failed: " + ", ".join(n for n, ok, _ in rows if not ok))
    return {}


# -- wiring ------------------------------------------------------------------


def _add_grid(p):
    p.add_argument("--anatomy", help="anatomy manifest (wm/gm/csf); default: built-in phantom")
    p.add_argument("--dims", type=int, nargs=3, default=[64, 64, 64], metavar=("NX", "NY", "NZ"))
    p.add_argument("--spacing", type=float, default=1.0, help="phantom voxel size in mm")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gliomacal", description="Glioma growth calibration and RT planning.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--domain-threshold", type=float, default=0.1, help="min white+grey fraction inside the domain")
    parser.add_argument("--csf-cut", type=float, default=0.5, help="CSF fraction at which a voxel leaves the domain")
    sub = parser.add_subparsers(dest="command", metavar="{simulate,synth,calibrate,propagate,plan,evaluate,selftest}")
    sub.required = True

    p = sub.add_parser("simulate", help="forward-solve one growth scenario")
    _add_grid(p)
    p.add_argument("--params", help="GrowthParams JSON (D_w, rho, T, ic_mm); missing fields take the reference synthetic values")
    p.add_argument("--config", help="JSON with an optional 'solver' block")
    p.add_argument("--out", required=True, help="output .vol path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("synth", help="generate a synthetic case with ground truth")
    p.add_argument("--spec", help="SyntheticSpec JSON")
    p.add_argument("--anatomy", help="anatomy manifest; default: phantom on the --spec grid")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate", help="TMCMC posterior sampling")
    p.add_argument("--anatomy", required=True)
    p.add_argument("--observations", required=True)
    p.add_argument("--prior", help="PriorSpec JSON overriding the default ranges")
    p.add_argument("--config", help="JSON with 'tmcmc', 'solver' and 'use_fet' blocks")
    p.add_argument("--seed", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--no-fet", action="store_true", help="MRI-only likelihood")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("propagate", help="MAP/mean/std density maps from an ensemble")
    p.add_argument("--ensemble", required=True)
    p.add_argument("--anatomy", required=True)
    p.add_argument("--n-prop", type=int, default=500)
    p.add_argument("--config", help="JSON with an optional 'solver' block")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("plan", help="build CTV or escalation masks")
    p.add_argument("--maps", help="directory holding map_u.vol")
    p.add_argument("--mode", choices=("map", "rtog", "escalation"), required=True)
    p.add_argument("--threshold", type=float, default=0.001)
    p.add_argument("--largest-cc", action="store_true")
    p.add_argument("--seg", help="visible-tumor segmentation for --mode rtog")
    p.add_argument("--margin", type=float, default=20.0)
    p.add_argument("--anatomy", help="anatomy manifest providing the brain mask for rtog clipping")
    p.add_argument("--no-clip", action="store_true", help="do not clip rtog CTVs to the brain")
    p.add_argument("--levels", type=float, nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("evaluate", help="volume and efficiency of plans against a recurrence")
    p.add_argument("--plan", required=True, nargs="+")
    p.add_argument("--recurrence", required=True, help="recurrence mask, or a density map with --recurrence-threshold")
    p.add_argument("--recurrence-threshold", type=float, help="use recurrence >= this value as the mask")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("selftest", help="run the analytic-oracle checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "plan" and args.mode in ("map", "escalation") and not args.maps:
        parser.error(f"--mode {args.mode} needs --maps")
    t0 = time.perf_counter()
    try:
        info = args.func(args)
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return EXIT_USAGE
    except (OSError, VolumeFormatError, json.JSONDecodeError) as exc:
        _emit_error("io", f"{type(exc).__name__}: {exc}")
        return EXIT_IO
    except (TmcmcError, SeedError, ArithmeticError, RuntimeError) as exc:
        _emit_error("numerical", f"{type(exc).__name__}: {exc}")
        return EXIT_NUMERIC
    except (ValueError, TypeError, KeyError) as exc:
        _emit_error("config", f"{type(exc).__name__}: {exc}")
        return EXIT_USAGE
    if info.get("dir") is not None:
        write_manifest(
            info["dir"],
            args.command,
            info.get("config", {}),
            info.get("seeds", {}),
            info.get("inputs", {}),
            info.get("outputs", []),
            time.perf_counter() - t0,
        )
    if info.get("summary"):
        print(json.dumps(info["summary"], default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
