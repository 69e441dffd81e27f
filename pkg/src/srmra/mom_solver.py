"""Projected method of moments.

Blocks of ``F`` limited-memory BFGS steps on the moment-matching objective
alternate with a denoiser applied to the image iterate. The shift marginals
live on the probability simplex: gradients in the marginals are restricted
to the sum-zero tangent space and every accepted step ends with a Euclidean
projection onto the simplex.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import line_search

from .denoise import DenoiserError, DenoiserHandle, DenoiseSchedule, schedule_next
from .estimate import Estimate, random_initialization
from .metrics import shift_aligned_error
from .model import ShiftDistribution, project_to_simplex
from .moments import MomentPair, ObjectiveWeights, ls_value_and_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LineSearchParams:
    c1: float = 1e-4
    c2: float = 0.9
    max_trials: int = 20


@dataclass(frozen=True)
class MomSolverConfig:
    F: int = 5
    max_outer: int = 100
    line_search: LineSearchParams = field(default_factory=LineSearchParams)
    memory: int = 10
    stop_tol: float = 1e-8
    grad_tol: float = 1e-12
    rho_scale: float | None = None
    seed: int = 0
    clip: tuple[float, float] = (-0.5, 1.5)
    n_starts: int = 1
    schedule_start: int = 0

    def __post_init__(self):
        if self.F < 1 or self.max_outer < 1 or self.memory < 1 or self.n_starts < 1:
            raise ValueError("F, max_outer, memory and n_starts must be >= 1")
        ls = self.line_search
        if not (0 < ls.c1 < ls.c2 < 1) or ls.max_trials < 1:
            raise ValueError("line search needs 0 < c1 < c2 < 1 and max_trials >= 1")
        if self.stop_tol < 0 or self.grad_tol <= 0:
            raise ValueError("stop_tol must be nonnegative and grad_tol positive")
        if self.schedule_start < 0:
            raise ValueError("schedule_start must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clip"] = list(self.clip)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MomSolverConfig":
        d = dict(d)
        if "line_search" in d and isinstance(d["line_search"], dict):
            d["line_search"] = LineSearchParams(**d["line_search"])
        if "clip" in d:
            d["clip"] = tuple(d["clip"])
        return cls(**d)


class LBFGSMemory:
    """Curvature pairs of the limited-memory BFGS inverse-Hessian model."""

    def __init__(self, size: int):
        self.pairs: deque[tuple[np.ndarray, np.ndarray, float]] = deque(maxlen=size)

    def reset(self) -> None:
        self.pairs.clear()

    def __len__(self) -> int:
        return len(self.pairs)

    def update(self, s: np.ndarray, y: np.ndarray) -> bool:
        sy = float(s @ y)
        if sy <= 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)) or sy <= 0:
            return False
        self.pairs.append((s, y, 1.0 / sy))
        return True

    def direction(self, g: np.ndarray) -> np.ndarray:
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if self.pairs:
            s, y, _ = self.pairs[-1]
            q *= (s @ y) / (y @ y)
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        return -q


class _Problem:
    """Objective on the packed vector ``[vec(x), rho1 / c, rho2 / c]`` with a one-point cache.

    The marginals are stored divided by ``c = rho_scale`` (default ``1/L``) so
    that their entries and gradients are on the same footing as pixel values.
    """

    def __init__(self, L: int, target: MomentPair, sigma: float, weights: ObjectiveWeights,
                 rho_scale: float | None = None):
        self.L = L
        self.target = target
        self.sigma = sigma
        self.weights = weights
        self.c = rho_scale if rho_scale is not None else 1.0 / L
        self.n_evals = 0
        self._key = None
        self._val = None

    def pack(self, x: np.ndarray, rho) -> np.ndarray:
        return np.concatenate([x.ravel(), rho.rho1 / self.c, rho.rho2 / self.c])

    def unpack(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = self.L * self.L
        c = self.c
        return z[:n].reshape(self.L, self.L), c * z[n : n + self.L], c * z[n + self.L :]

    def project(self, z: np.ndarray) -> np.ndarray:
        x, r1, r2 = self.unpack(z)
        return np.concatenate(
            [x.ravel(), project_to_simplex(r1) / self.c, project_to_simplex(r2) / self.c]
        )

    def evaluate(self, z: np.ndarray) -> tuple[float, np.ndarray]:
        key = z.tobytes()
        if key != self._key:
            x, r1, r2 = self.unpack(z)
            # trial points may leave the simplex; objective is a polynomial there too
            f, gx, g1, g2 = ls_value_and_grad(x, _Unchecked(r1, r2), self.target, self.sigma,
                                              self.weights)
            c = self.c
            g = np.concatenate([gx.ravel(), c * (g1 - g1.mean()), c * (g2 - g2.mean())])
            if not np.all(np.isfinite(g)) or not np.isfinite(f):
                raise FloatingPointError("non-finite objective or gradient")
            self.n_evals += 1
            self._key, self._val = key, (f, g)
        return self._val

    def f(self, z):
        return self.evaluate(z)[0]

    def g(self, z):
        return self.evaluate(z)[1]


class _Unchecked:
    """Marginal pair without the simplex checks, for line-search trial points."""

    def __init__(self, rho1, rho2):
        self.rho1 = rho1
        self.rho2 = rho2


@dataclass
class QNResult:
    x: np.ndarray
    rho: ShiftDistribution
    objective: float
    steps: int
    line_search_failed: bool = False
    objective_history: list[float] = field(default_factory=list)


def quasi_newton_run(init, target: MomentPair, sigma: float, weights: ObjectiveWeights | None,
                     steps: int, cfg: MomSolverConfig, memory: LBFGSMemory | None = None,
                     _problem: _Problem | None = None) -> QNResult:
    """Run up to ``steps`` L-BFGS iterations from ``init = (x, rho)``.

    ``memory`` carries curvature pairs between calls; pass the same object to
    continue a run. A failed line search ends the run early with
    ``line_search_failed`` set rather than raising.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x0, rho0 = init
    L = x0.shape[0]
    weights = weights or ObjectiveWeights.default(L, sigma)
    prob = _problem or _Problem(L, target, sigma, weights, cfg.rho_scale)
    memory = memory if memory is not None else LBFGSMemory(cfg.memory)
    ls = cfg.line_search

    z = prob.pack(np.asarray(x0, dtype=np.float64), rho0)
    f, g = prob.evaluate(z)
    history = [f]
    failed = False
    taken = 0
    for _ in range(steps):
        if np.max(np.abs(g)) <= cfg.grad_tol:
            break
        z_new = _step(prob, memory, z, f, g, ls)
        if z_new is None and len(memory):
            # stale curvature; retry once along the steepest-descent direction
            memory.reset()
            z_new = _step(prob, memory, z, f, g, ls)
        if z_new is None:
            failed = True
            break
        f_new, g_new = prob.evaluate(z_new)
        memory.update(z_new - z, g_new - g)
        z, f, g = z_new, f_new, g_new
        history.append(f)
        taken += 1

    x, r1, r2 = prob.unpack(z)
    return QNResult(x.copy(), ShiftDistribution.from_marginals(r1, r2), f, taken, failed, history)


def _step(prob: _Problem, memory: LBFGSMemory, z, f, g, ls: LineSearchParams):
    d = memory.direction(g)
    slope = float(g @ d)
    if not slope < 0:
        memory.reset()
        d = -g
        slope = -float(g @ g)
    # with no curvature information, size the first trial step like scipy's BFGS
    old_old = f + float(np.linalg.norm(g)) / 2 if not len(memory) else None
    alpha = line_search(prob.f, prob.g, z, d, gfk=g, old_fval=f, old_old_fval=old_old,
                        c1=ls.c1, c2=ls.c2, maxiter=ls.max_trials)[0]
    if alpha is None or not np.isfinite(alpha) or alpha <= 0:
        return None
    # projecting the marginals can undo the decrease; backtrack along the projected arc
    for _ in range(ls.max_trials):
        z_new = prob.project(z + alpha * d)
        if prob.f(z_new) <= f:
            return z_new
        alpha *= 0.5
    return None


def projected_mom(target: MomentPair, sigma: float, denoiser: DenoiserHandle,
                  cfg: MomSolverConfig, L_high: int, weights: ObjectiveWeights | None = None,
                  init=None, x_true=None) -> Estimate:
    """Projected method of moments from a random (or given) initialization.

    ``trace[k]`` describes the QN iterate after outer iteration ``k``; when a
    projection followed it, the record also holds ``sigma_denoise`` and
    ``objective_projected``. The run ends on the QN iterate, without a
    trailing projection. ``stop_tol=0`` disables the decrease test.
    ``x_true``, when given, is used only to log the error in the trace.
    With ``cfg.n_starts > 1`` independent starts are run and the one with the
    lowest final objective is returned.
    """
    if cfg.n_starts > 1 and init is None:
        runs = [
            _projected_mom_single(target, sigma, denoiser, cfg, L_high, weights,
                                  random_initialization(L_high, cfg.seed + k), x_true)
            for k in range(cfg.n_starts)
        ]
        return min(runs, key=lambda e: e.trace[-1]["objective"])
    if init is None:
        init = random_initialization(L_high, cfg.seed)
    return _projected_mom_single(target, sigma, denoiser, cfg, L_high, weights, init, x_true)


def _projected_mom_single(target, sigma, denoiser, cfg, L_high, weights, init, x_true):
    t0 = time.perf_counter()
    weights = weights or ObjectiveWeights.default(L_high, sigma)
    prob = _Problem(L_high, target, sigma, weights, cfg.rho_scale)
    memory = LBFGSMemory(cfg.memory)
    project = denoiser.kind != "identity"
    x, rho = np.array(init[0], dtype=np.float64), init[1]
    f = prob.f(prob.pack(x, rho))
    schedule = DenoiseSchedule(t=cfg.schedule_start)
    trace = [_record(0, f, None, x, x_true, t0)]
    failures = 0
    for outer in range(1, cfg.max_outer + 1):
        res = quasi_newton_run((x, rho), target, sigma, weights, cfg.F, cfg, memory, prob)
        failures += res.line_search_failed
        decrease = (f - res.objective) / max(abs(f), np.finfo(float).tiny)
        x, rho, f = res.x, res.rho, res.objective
        rec = _record(outer, f, None, x, x_true, t0, qn_objective=res.objective,
                      line_search_failed=res.line_search_failed)
        trace.append(rec)
        # the stop test and the budget end both return the QN iterate, not a projected one
        if decrease < cfg.stop_tol:
            log.debug("stopping after %d outer iterations (relative decrease %.3g)",
                      outer, decrease)
            break
        if outer == cfg.max_outer or not project:
            continue
        sigma_d = schedule.sigma_current
        try:
            x = denoiser(np.clip(x, *cfg.clip), sigma_d)
        except Exception as exc:
            raise DenoiserError(
                f"denoiser {denoiser.label!r} failed at outer iteration {outer}: {exc}"
            ) from exc
        schedule = schedule_next(schedule)
        memory.reset()
        f = prob.f(prob.pack(x, rho))
        rec["sigma_denoise"] = sigma_d
        rec["objective_projected"] = f
    meta = {
        "solver": "mom",
        "config": cfg.to_dict(),
        "denoiser": denoiser.to_dict(),
        "clip": list(cfg.clip) if project else None,
        "lambda": weights.lam,
        "objective_evaluations": prob.n_evals,
        "line_search_failures": failures,
        "projections": schedule.t - cfg.schedule_start,
    }
    return Estimate(x, rho, trace, meta)


def _record(it, f, sigma_d, x, x_true, t0, **extra):
    rec = {"iter": it, "objective": float(f), "sigma_denoise": sigma_d}
    if x_true is not None:
        rec["error"] = shift_aligned_error(x, x_true).error
    rec.update(extra)
    rec["seconds"] = time.perf_counter() - t0
    return rec
