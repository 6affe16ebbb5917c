"""Choosing smoothing parameters and comparing candidate models."""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .fit import FitError, FitOptions, FitResult, ModelSpec, Objective, fit
from .inference import Dataset, forward_loglik
from .penalty import PenaltyConfig

logger = logging.getLogger(__name__)


class DfConditioningWarning(UserWarning):
    pass


def powers_of_ten(lo: int = 0, hi: int = 6) -> tuple[float, ...]:
    return tuple(10.0**k for k in range(lo, hi + 1))


@dataclass(frozen=True)
class CvPlan:
    """Blockwise K-fold cross-validation with a neighbourhood walk.

    ``grid[i]`` lists the candidate smoothing values of state ``i`` in
    increasing order; the walk moves one grid step at a time in one
    coordinate. ``start`` holds grid indices (default: the middle of each
    grid).
    """

    grid: tuple[tuple[float, ...], ...]
    n_folds: int = 10
    start: tuple[int, ...] | None = None
    max_moves: int = 20
    scoring: str = "isolated"

    def __post_init__(self):
        grid = tuple(tuple(float(v) for v in g) for g in self.grid)
        object.__setattr__(self, "grid", grid)
        if any(len(g) == 0 for g in grid):
            raise ValueError("every state needs at least one candidate value")
        if any(v < 0 for g in grid for v in g):
            raise ValueError("grid values must be >= 0")
        if self.n_folds < 2:
            raise ValueError("need at least two folds")
        if self.start is not None:
            if len(self.start) != len(grid) or any(not 0 <= s < len(g) for s, g in zip(self.start, grid)):
                raise ValueError("start must hold one valid grid index per state")
        if self.scoring not in ("isolated", "conditional"):
            raise ValueError("scoring must be 'isolated' or 'conditional'")

    def start_index(self) -> tuple[int, ...]:
        if self.start is not None:
            return tuple(self.start)
        return tuple(len(g) // 2 for g in self.grid)

    def lam(self, index) -> tuple[float, ...]:
        return tuple(g[k] for g, k in zip(self.grid, index))


def fold_blocks(T: int, n_folds: int) -> list[np.ndarray]:
    """Contiguous index blocks partitioning ``0..T-1``."""
    if n_folds > T:
        raise ValueError(f"cannot cut {T} time points into {n_folds} folds")
    return np.array_split(np.arange(T), n_folds)


@dataclass(frozen=True, eq=False)
class Candidate:
    lam: tuple[float, ...]
    index: tuple[int, ...]
    score: float
    valid: bool
    fold_scores: tuple[float, ...] = ()


@dataclass(frozen=True, eq=False)
class AicRow:
    name: str
    df: float
    loglik: float
    aic: float
    delta_aic: float
    best: bool


@dataclass(eq=False)
class SelectionReport:
    candidates: list[Candidate] = field(default_factory=list)
    trajectory: list[tuple[int, tuple[float, ...], float, bool]] = field(default_factory=list)
    chosen: tuple[float, ...] | None = None
    aic_table: list[AicRow] = field(default_factory=list)


def _validation_score(model, data, block, convention, scoring):
    t = np.arange(data.T)
    if scoring == "isolated":
        keep = (t >= block[0]) & (t <= block[-1])
        return forward_loglik(model, data.masked(keep), convention).value
    # log p(block | everything before it)
    upto = forward_loglik(model, data.masked(t <= block[-1]), convention).value
    before = forward_loglik(model, data.masked(t < block[0]), convention).value
    return upto - before


def cross_validate(data: Dataset, spec: ModelSpec, plan: CvPlan, order: int = 4, options: FitOptions | None = None) -> SelectionReport:
    """Select per-state smoothing parameters by blockwise cross-validation.

    For every candidate the model is fitted once per fold with that fold's
    block set to missing (so the time axis is intact). The fold score is the
    log-likelihood of the held-out block alone under the fitted model (or,
    with ``scoring="conditional"``, conditional on the observations that
    precede it); the
    candidate score is the mean over folds. The walk starts at
    ``plan.start_index()``, evaluates all one-step neighbours, moves to the
    best one and stops at a local maximum or after ``plan.max_moves`` moves.
    Fits at the starting point use ``options``; later fits start from the
    current centre's estimate and inverse-Hessian approximation for the
    same fold.
    """
    options = options or FitOptions()
    if len(plan.grid) != spec.n_states:
        raise ValueError(f"grid has {len(plan.grid)} states, spec has {spec.n_states}")
    blocks = fold_blocks(data.T, plan.n_folds)
    trains = []
    for b in blocks:
        keep = np.ones(data.T, dtype=bool)
        keep[b] = False
        trains.append(data.masked(keep))

    evaluated: dict[tuple[int, ...], Candidate] = {}
    thetas: dict[tuple[int, ...], list] = {}
    report = SelectionReport()

    def evaluate(index, warm):
        if index in evaluated:
            return evaluated[index]
        lam = plan.lam(index)
        penalty = PenaltyConfig(lam, order)

        def one_fold(k):
            if warm is None:
                opts = replace(options, threads=1, reorder=False)
            else:
                th, hi = warm[k]
                opts = replace(options, theta0=tuple(th), hess_inv0=hi, n_starts=1, threads=1, reorder=False)
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    res = fit(trains[k], spec, penalty, opts)
                s = _validation_score(res.model, data, blocks[k], spec.convention, plan.scoring)
            except (FitError, ValueError) as exc:
                logger.warning("candidate %s failed in fold %d: %s", lam, k, exc)
                return None
            return (s, (res.theta, res.hess_inv)) if math.isfinite(s) else None

        if options.threads > 1:
            with ThreadPoolExecutor(options.threads) as pool:
                out = list(pool.map(one_fold, range(len(blocks))))
        else:
            out = [one_fold(k) for k in range(len(blocks))]
        ok = all(o is not None for o in out)
        scores = tuple(o[0] for o in out) if ok else ()
        cand = Candidate(lam, index, float(np.mean(scores)) if ok else -math.inf, ok, scores)
        evaluated[index] = cand
        report.candidates.append(cand)
        if ok:
            thetas[index] = [o[1] for o in out]
        logger.info("cv lambda=%s score=%s", lam, cand.score)
        return cand

    center = plan.start_index()
    cur = evaluate(center, None)
    report.trajectory.append((0, cur.lam, cur.score, cur.valid))
    for move in range(1, plan.max_moves + 1):
        warm = thetas.get(center)
        best = cur
        for i in range(len(center)):
            for step in (-1, 1):
                k = center[i] + step
                if not 0 <= k < len(plan.grid[i]):
                    continue
                nb = center[:i] + (k,) + center[i + 1 :]
                cand = evaluate(nb, warm)
                if cand.valid and cand.score > best.score:
                    best = cand
        if best is cur:
            break
        center, cur = best.index, best
        report.trajectory.append((move, cur.lam, cur.score, cur.valid))
    valid = [c for c in report.candidates if c.valid]
    if not valid:
        raise FitError("no cross-validation candidate could be fitted")
    report.chosen = max(valid, key=lambda c: c.score).lam
    return report


@dataclass(frozen=True)
class DfReport:
    df: float
    condition_number: float
    used_pinv: bool


def observed_information(result: FitResult, data: Dataset) -> np.ndarray:
    """Negative Hessian of the unpenalised log-likelihood at ``result.theta``.

    Central differences of the exact gradient, symmetrised.
    """
    obj = Objective(data, result.spec, result.penalty_config)
    theta = np.asarray(result.theta, dtype=float)
    p = len(theta)
    h0 = np.finfo(float).eps ** (1.0 / 3.0)
    H = np.empty((p, p))
    for k in range(p):
        h = h0 * max(1.0, abs(theta[k]))
        tp, tm = theta.copy(), theta.copy()
        tp[k] += h
        tm[k] -= h
        gp = obj.loglik_and_grad(tp)[1]
        gm = obj.loglik_and_grad(tm)[1]
        H[:, k] = -(gp - gm) / (2 * h)
    return 0.5 * (H + H.T)


def effective_df(result: FitResult, data: Dataset, details: bool = False):
    """Effective degrees of freedom ``trace((H + S)^{-1} H)``.

    ``H`` is the observed information of the unpenalised model and ``S`` the
    Hessian of the penalty, both on the working scale at the penalised
    estimate. Without penalisation this equals the parameter count.
    """
    obj = Objective(data, result.spec, result.penalty_config)
    p = result.n_params
    S = obj.penalty_hessian(result.theta)
    if not np.any(S):
        rep = DfReport(float(p), 1.0, False)
        return rep if details else rep.df
    H = observed_information(result, data)
    HP = H + S
    cond = float(np.linalg.cond(HP))
    used_pinv = not math.isfinite(cond) or cond > 1e12
    if used_pinv:
        warnings.warn(f"penalised information is ill-conditioned (cond={cond:.3g}); using a pseudo-inverse", DfConditioningWarning, stacklevel=2)
        M = np.linalg.pinv(HP) @ H
    else:
        M = np.linalg.solve(HP, H)
    rep = DfReport(float(np.trace(M)), cond, used_pinv)
    return rep if details else rep.df


def aic(loglik: float, df: float) -> float:
    return -2.0 * loglik + 2.0 * df


def candidate_table(fits) -> list[AicRow]:
    """AIC table sorted by AIC (ties by name), with Delta AIC to the best.

    ``fits`` holds ``(name, loglik, df)`` triples.
    """
    rows = [(str(name), float(df), float(ll), aic(float(ll), float(df))) for name, ll, df in fits]
    if not rows:
        return []
    rows.sort(key=lambda r: (r[3], r[0]))
    best = rows[0][3]
    return [AicRow(n, df, ll, a, a - best, k == 0) for k, (n, df, ll, a) in enumerate(rows)]
