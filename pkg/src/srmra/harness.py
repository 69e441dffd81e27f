"""Experiment runner: synthesize data, run the recoveries, write CSV and provenance.

Every trial draws its own shift distribution, observations and starting
point from seeds derived from ``seed_base + trial``, so trials are
independent of one another and of the order in which they run.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import os
import time
from contextlib import nullcontext
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import io as srmr_io
from .denoise import DenoiserHandle
from .em_solver import EmSolverConfig, projected_em
from .estimate import random_initialization
from .metrics import ErrorReport, noise_regime, shift_aligned_error
from .model import ModelParams, ShiftDistribution, normalize_image, sample_observations
from .moments import analytic_moments, empirical_moments
from .mom_solver import MomSolverConfig, projected_mom
from .phantoms import NAMES as PHANTOMS
from .phantoms import builtin_phantom

log = logging.getLogger(__name__)

CSV_HEADER = ("trial", "solver", "L_high", "L_low", "N", "sigma", "F", "error", "seconds")
SOLVERS = ("mom", "em", "both")

# independent streams carved out of one trial seed
_STREAM_RHO = 1
_STREAM_INIT = 2


class ConfigError(ValueError):
    """Invalid experiment configuration; raised before any work starts."""


@dataclass(frozen=True)
class ExperimentConfig:
    image: str
    params: ModelParams
    solver: str = "both"
    mom: MomSolverConfig = field(default_factory=MomSolverConfig)
    em: EmSolverConfig = field(default_factory=EmSolverConfig)
    denoiser: DenoiserHandle = field(default_factory=DenoiserHandle)
    repeat: int = 1
    seed_base: int = 0
    output_dir: str | None = None
    perfect_moments: bool = False
    deterministic: bool = False
    save_estimates: bool = False

    def validate(self) -> "ExperimentConfig":
        if self.solver not in SOLVERS:
            raise ConfigError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if self.repeat < 1:
            raise ConfigError("repeat must be >= 1")
        if self.seed_base < 0:
            raise ConfigError("seed_base must be nonnegative")
        if self.image not in PHANTOMS and not Path(self.image).is_file():
            raise ConfigError(f"image {self.image!r} is neither a builtin phantom {PHANTOMS} nor a file")
        p = self.params
        if self.image in PHANTOMS and p.L_high < 8:
            raise ConfigError("builtin phantoms need L_high >= 8")
        needs_obs = self.solver != "mom" or not self.perfect_moments
        if needs_obs and p.N < 1:
            raise ConfigError("N must be >= 1 when observations are simulated")
        if self.solver != "mom" and p.sigma <= 0:
            raise ConfigError("EM needs sigma > 0")
        return self

    def to_dict(self) -> dict:
        return {
            "image": self.image,
            "params": self.params.to_dict(),
            "solver": self.solver,
            "mom": self.mom.to_dict(),
            "em": self.em.to_dict(),
            "denoiser": self.denoiser.to_dict(),
            "repeat": self.repeat,
            "seed_base": self.seed_base,
            "output_dir": self.output_dir,
            "perfect_moments": self.perfect_moments,
            "deterministic": self.deterministic,
            "save_estimates": self.save_estimates,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        try:
            d["params"] = ModelParams(**d["params"])
            if "mom" in d:
                d["mom"] = MomSolverConfig.from_dict(d["mom"])
            if "em" in d:
                d["em"] = EmSolverConfig.from_dict(d["em"])
            if "denoiser" in d:
                d["denoiser"] = DenoiserHandle.from_dict(d["denoiser"])
            return cls(**d).validate()
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad experiment config: {exc}") from exc

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    config_hash: str
    trial: int
    solver: str
    params: ModelParams
    F: int
    report: ErrorReport | None
    seconds: float
    trace: list[dict] = field(default_factory=list)
    failure: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def error(self) -> float:
        return self.report.error if self.report is not None else float("nan")

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "trial": self.trial,
            "solver": self.solver,
            "params": self.params.to_dict(),
            "F": self.F,
            "error": None if self.report is None else self.report.error,
            "best_shift": None if self.report is None else list(self.report.best_shift),
            "snr": None if self.report is None else self.report.snr,
            "noise_regime": noise_regime(self.params.sigma),
            "seconds": self.seconds,
            "failure": self.failure,
            "extra": self.extra,
            "trace": self.trace,
        }


def load_image(source: str, L_high: int, K: int = 2) -> np.ndarray:
    """Builtin phantom by name, or a PGM / exact-format file normalized to [0, 1]."""
    if source in PHANTOMS:
        return builtin_phantom(source, L_high, K)
    path = Path(source)
    img = srmr_io.load_pgm(path) if path.suffix.lower() == ".pgm" else srmr_io.load_srmr1(path)
    if img.shape != (L_high, L_high):
        raise ConfigError(f"image {source} is {img.shape}, expected {(L_high, L_high)}")
    img, constant = normalize_image(img)
    if constant:
        log.warning("image %s is constant; left unnormalized", source)
    return img


def trial_inputs(x: np.ndarray, cfg: ExperimentConfig, trial: int):
    """Ground-truth shift distribution, observations and starting point of one trial."""
    seed = cfg.seed_base + trial
    L = cfg.params.L_high
    rho = ShiftDistribution.random(L, np.random.default_rng((seed, _STREAM_RHO)))
    needs_obs = cfg.solver != "mom" or not cfg.perfect_moments
    obs = sample_observations(x, rho, cfg.params, seed) if needs_obs else None
    init = random_initialization(L, (seed, _STREAM_INIT))
    return rho, obs, init


def _solvers(cfg: ExperimentConfig) -> tuple[str, ...]:
    return ("mom", "em") if cfg.solver == "both" else (cfg.solver,)


def run_trial(x: np.ndarray, cfg: ExperimentConfig, trial: int) -> list[RunRecord]:
    rho, obs, init = trial_inputs(x, cfg, trial)
    p = cfg.params
    out = []
    for solver in _solvers(cfg):
        F = cfg.mom.F if solver == "mom" else cfg.em.F
        extra: dict = {}
        t0 = time.perf_counter()
        try:
            if solver == "mom":
                # moment computation is excluded from the solver time
                if cfg.perfect_moments:
                    target = analytic_moments(x, rho, p.sigma, p.K)
                else:
                    target = empirical_moments(obs)
                extra["moment_seconds"] = time.perf_counter() - t0
                t0 = time.perf_counter()
                est = projected_mom(target, p.sigma, cfg.denoiser, cfg.mom, p.L_high,
                                    init=init, x_true=x)
            else:
                est = projected_em(obs, p.sigma, cfg.denoiser, cfg.em, init=init, x_true=x)
            seconds = time.perf_counter() - t0
        except Exception as exc:  # one failed trial must not sink the sweep
            log.error("trial %d (%s) failed: %s", trial, solver, exc)
            out.append(RunRecord(cfg.config_hash, trial, solver, p, F, None,
                                 time.perf_counter() - t0, failure=f"{type(exc).__name__}: {exc}"))
            continue
        report = shift_aligned_error(est.x_hat, x, p.sigma if p.sigma > 0 else None)
        rec = RunRecord(cfg.config_hash, trial, solver, p, F, report, seconds, est.trace, extra=extra)
        if cfg.save_estimates and cfg.output_dir:
            est.save(Path(cfg.output_dir) / f"trial_{trial:04d}_{solver}")
        out.append(rec)
    return out


def run_experiment(cfg: ExperimentConfig, trials=None) -> list[RunRecord]:
    """Run ``cfg.repeat`` trials (or the given subset, in the given order).

    Records come back ordered by trial index, then solver. With an output
    directory the config, the records and the CSV are written there.
    """
    cfg.validate()
    x = load_image(cfg.image, cfg.params.L_high, cfg.params.K)
    order = range(cfg.repeat) if trials is None else list(trials)
    limit = threadpool_limits(limits=1) if cfg.deterministic else nullcontext()
    records: list[RunRecord] = []
    with limit:
        for trial in order:
            records.extend(run_trial(x, cfg, trial))
    records.sort(key=lambda r: (r.trial, SOLVERS.index(r.solver)))
    if cfg.output_dir:
        write_outputs(cfg, records)
    return records


def write_outputs(cfg: ExperimentConfig, records: list[RunRecord]) -> Path:
    d = Path(cfg.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    emit_csv(records, d / "results.csv", deterministic=cfg.deterministic)
    (d / "records.json").write_text(json.dumps([r.to_dict() for r in records], indent=1))
    return d


def emit_csv(records, path: str | os.PathLike | None = None, deterministic: bool = False) -> str:
    """Write one row per record under the fixed header; returns the CSV text.

    Wall-clock time is the only nondeterministic column. In deterministic
    mode it is written as 0 so that repeated runs give identical bytes; the
    measured times stay in ``records.json``.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        p = r.params
        w.writerow([
            r.trial, r.solver, p.L_high, p.L_low, p.N, repr(float(p.sigma)), r.F,
            repr(r.error), "0" if deterministic else f"{r.seconds:.6f}",
        ])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def read_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def sweep_configs(base: ExperimentConfig, N=None, sigma=None, K=None, F=None) -> list[ExperimentConfig]:
    """Cartesian product over the given values; ``None`` keeps the base value.

    Each point writes to its own subdirectory of the base output directory.
    """
    p = base.params
    grid = itertools.product(N or [p.N], sigma or [p.sigma], K or [p.K], F or [None])
    out = []
    for n, s, k, f in grid:
        cfg = replace(base, params=ModelParams(p.L_high, k, s, n))
        if f is not None:
            cfg = replace(cfg, mom=replace(cfg.mom, F=f), em=replace(cfg.em, F=f))
        if base.output_dir:
            tag = f"N{n}_sigma{s:g}_K{k}_F{cfg.mom.F if cfg.solver != 'em' else cfg.em.F}"
            cfg = replace(cfg, output_dir=str(Path(base.output_dir) / tag))
        out.append(cfg.validate())
    return out


def run_sweep(configs: list[ExperimentConfig]) -> list[RunRecord]:
    records = []
    for cfg in configs:
        records.extend(run_experiment(cfg))
    return records


def median_error(records, solver: str | None = None) -> float:
    errs = [r.error for r in records if solver is None or r.solver == solver]
    return float(np.median(errs)) if errs else float("nan")
