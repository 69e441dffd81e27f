"""Command-line entry point.

Exit codes: 0 on success, 2 for configuration errors, 3 for runtime errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import shlex
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as srmr_io
from .denoise import DenoiserHandle
from .em_solver import EmSolverConfig, projected_em
from .estimate import Estimate
from .harness import (ConfigError, ExperimentConfig, load_image, median_error, run_sweep,
                      sweep_configs)
from .metrics import shift_aligned_error
from .model import (ModelParams, ShiftDistribution, load_observations, sample_observations,
                    save_observations)
from .moments import MomentPair, empirical_moments
from .mom_solver import MomSolverConfig, projected_mom
from .phantoms import NAMES as PHANTOMS

EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("srmra")


def _denoiser(args) -> DenoiserHandle:
    if args.denoiser_config:
        return DenoiserHandle.from_dict(json.loads(Path(args.denoiser_config).read_text()))
    if args.denoiser == "external":
        if not args.denoiser_cmd:
            raise ConfigError("--denoiser external needs --denoiser-cmd")
        return DenoiserHandle("external", command=tuple(shlex.split(args.denoiser_cmd)),
                              sigma_scale=args.denoiser_scale)
    return DenoiserHandle(args.denoiser)


def _add_denoiser_args(p):
    p.add_argument("--denoiser", default="dct_threshold",
                   choices=["identity", "gaussian_blur", "dct_threshold", "external"])
    p.add_argument("--denoiser-cmd", help="command line of an external denoiser")
    p.add_argument("--denoiser-scale", type=float, default=1.0,
                   help="multiplier applied to sigma before it is sent to an external denoiser")
    p.add_argument("--denoiser-config", help="JSON file describing the denoiser")


def _add_solver_args(p):
    p.add_argument("--F", type=int, default=5, help="solver steps between projections")
    p.add_argument("--max-outer", type=int, default=100)
    p.add_argument("--seed", type=int, default=0, help="seed of the random starting point")
    p.add_argument("--truth", help="ground-truth image, used only to log the error")
    p.add_argument("--out", required=True, help="output directory for the estimate")
    _add_denoiser_args(p)


def _truth(args, L):
    return None if not args.truth else load_image(args.truth, L)


def cmd_phantom(args) -> int:
    x = load_image(args.name, args.L, args.K)
    out = Path(args.out)
    if out.suffix.lower() == ".pgm":
        srmr_io.save_pgm(out, x)
    else:
        srmr_io.save_srmr1(out, x)
    return 0


def cmd_simulate(args) -> int:
    params = ModelParams(args.L_high, args.K, args.sigma, args.N)
    x = load_image(args.image, args.L_high, args.K)
    rho_seed = args.seed if args.rho_seed is None else args.rho_seed
    rho = ShiftDistribution.random(args.L_high, np.random.default_rng((rho_seed, 1)))
    obs = sample_observations(x, rho, params, args.seed)
    out = Path(args.out)
    save_observations(obs, out)
    srmr_io.save_srmr1(out / "x_true.srmr", x)
    srmr_io.save_srmr1(out / "rho_true.srmr", rho.joint)
    if args.moments:
        empirical_moments(obs).save(out / "moments")
    return 0


def cmd_recover_mom(args) -> int:
    if bool(args.obs) == bool(args.moments):
        raise ConfigError("give exactly one of --obs or --moments")
    if args.obs:
        obs = load_observations(args.obs)
        target = empirical_moments(obs)
        sigma, L = obs.params.sigma, obs.params.L_high
    else:
        target = MomentPair.load(args.moments)
        if args.L_high is None:
            raise ConfigError("--moments needs --L-high")
        L = args.L_high
        sigma = args.sigma if args.sigma is not None else target.sigma_used
    if args.sigma is not None:
        sigma = args.sigma
    cfg = MomSolverConfig(F=args.F, max_outer=args.max_outer, seed=args.seed, n_starts=args.n_starts)
    est = projected_mom(target, sigma, _denoiser(args), cfg, L, x_true=_truth(args, L))
    est.save(args.out)
    _print_final(est)
    return 0


def cmd_recover_em(args) -> int:
    obs = load_observations(args.obs)
    sigma = args.sigma if args.sigma is not None else obs.params.sigma
    cfg = EmSolverConfig(F=args.F, max_outer=args.max_outer, seed=args.seed)
    L = obs.params.L_high
    est = projected_em(obs, sigma, _denoiser(args), cfg, x_true=_truth(args, L))
    est.save(args.out)
    _print_final(est)
    return 0


def _print_final(est: Estimate) -> None:
    last = est.trace[-1] if est.trace else {}
    print(json.dumps({k: v for k, v in last.items() if k != "seconds"}))


def cmd_evaluate(args) -> int:
    path = Path(args.estimate)
    x_hat = srmr_io.load_srmr1(path / "x_hat.srmr" if path.is_dir() else path)
    x = load_image(args.truth, x_hat.shape[0])
    rep = shift_aligned_error(x_hat, x, args.sigma)
    print(json.dumps({"error": rep.error, "best_shift": list(rep.best_shift), "snr": rep.snr}))
    return 0


def _floats(s):
    return [parse_fraction(v) for v in s.split(",")] if s else None


def parse_fraction(v: str) -> float:
    """``"1/8"`` or ``"0.125"``."""
    if "/" in v:
        a, b = v.split("/")
        return float(a) / float(b)
    return float(v)


def _ints(s):
    return [int(v) for v in s.split(",")] if s else None


def cmd_benchmark(args) -> int:
    if args.config:
        base = ExperimentConfig.load(args.config)
    else:
        if args.image is None:
            raise ConfigError("give --config or --image")
        params = ModelParams(args.L_high, args.K, 0.125, 10_000)
        base = ExperimentConfig(args.image, params, denoiser=_denoiser(args))
    over = {}
    for key in ("solver", "repeat", "seed_base"):
        if getattr(args, key) is not None:
            over[key] = getattr(args, key)
    if args.out is not None:
        over["output_dir"] = args.out
    if args.deterministic:
        over["deterministic"] = True
    if args.perfect_moments:
        over["perfect_moments"] = True
    if args.max_outer is not None:
        over["mom"] = replace(base.mom, max_outer=args.max_outer)
        over["em"] = replace(base.em, max_outer=args.max_outer)
    base = replace(base, **over).validate()
    configs = sweep_configs(base, N=_ints(args.N), sigma=_floats(args.sigma),
                            K=_ints(args.sweep_K), F=_ints(args.F))
    records = run_sweep(configs)
    for solver in ("mom", "em"):
        rs = [r for r in records if r.solver == solver]
        if rs:
            print(f"{solver}: {len(rs)} runs, median error {median_error(rs):.4g}")
    failed = [r for r in records if r.failure]
    return EXIT_RUNTIME if failed and len(failed) == len(records) else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="srmra", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a builtin phantom")
    p.add_argument("name", choices=PHANTOMS)
    p.add_argument("--L", type=int, default=32)
    p.add_argument("--K", type=int, default=2)
    p.add_argument("--out", required=True, help=".pgm for 8-bit, anything else for exact format")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("simulate", help="simulate an observation set")
    p.add_argument("--image", required=True, help="phantom name or image file")
    p.add_argument("--L-high", dest="L_high", type=int, default=32)
    p.add_argument("--K", type=int, default=2)
    p.add_argument("--sigma", type=parse_fraction, default=0.125)
    p.add_argument("--N", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rho-seed", type=int)
    p.add_argument("--moments", action="store_true", help="also store empirical moments")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("recover-mom", help="projected method of moments")
    p.add_argument("--obs", help="observation directory")
    p.add_argument("--moments", help="moment directory")
    p.add_argument("--L-high", dest="L_high", type=int)
    p.add_argument("--sigma", type=parse_fraction)
    p.add_argument("--n-starts", type=int, default=1)
    _add_solver_args(p)
    p.set_defaults(func=cmd_recover_mom)

    p = sub.add_parser("recover-em", help="projected expectation-maximization")
    p.add_argument("--obs", required=True)
    p.add_argument("--sigma", type=parse_fraction)
    _add_solver_args(p)
    p.set_defaults(func=cmd_recover_em)

    p = sub.add_parser("evaluate", help="shift-aligned error of an estimate")
    p.add_argument("--estimate", required=True, help="estimate directory or image file")
    p.add_argument("--truth", required=True)
    p.add_argument("--sigma", type=parse_fraction)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="repeated trials and sweeps, CSV output")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--image")
    p.add_argument("--L-high", dest="L_high", type=int, default=32)
    p.add_argument("--K", type=int, default=2)
    p.add_argument("--solver", choices=["mom", "em", "both"])
    p.add_argument("--repeat", type=int)
    p.add_argument("--seed-base", dest="seed_base", type=int)
    p.add_argument("--max-outer", type=int)
    p.add_argument("--N", help="comma-separated sweep over N")
    p.add_argument("--sigma", help="comma-separated sweep over sigma (fractions allowed)")
    p.add_argument("--sweep-K", dest="sweep_K", help="comma-separated sweep over K")
    p.add_argument("--F", help="comma-separated sweep over F")
    p.add_argument("--perfect-moments", action="store_true")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded, byte-identical CSV")
    p.add_argument("--out")
    _add_denoiser_args(p)
    p.set_defaults(func=cmd_benchmark)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"srmra: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"srmra: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
