"""Penalised maximum likelihood estimation.

All constraints are removed by working-scale transforms, so the objective is
maximised with an unconstrained quasi-Newton method (scipy's BFGS). The
gradient is exact, obtained from one forward-backward pass and the chain rule
through the expansion; a central finite-difference gradient is available for
checking and as a fallback.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logit

from .dwell import (
    DwellTimeSpec,
    dwell_from_working,
    dwell_to_working,
    geometric_dwell,
    hazard_pi_jacobian,
    hazards,
    negative_binomial_dwell,
    working_jacobian,
)
from .emission import family_class, wrap_angle
from .expand import HsmmModel, expand
from .inference import Dataset, loglik_gradient
from .penalty import PenaltyConfig, penalty_value

logger = logging.getLogger(__name__)

DWELL_FAMILIES = ("free", "nbinom", "geometric")
FIT_INIT_POLICIES = ("stationary", "uniform", "fresh", "estimated")


class FitError(RuntimeError):
    """No start produced a finite optimum."""


@dataclass(frozen=True)
class ModelSpec:
    """Skeleton of the model to be estimated.

    Parameters
    ----------
    start_lengths : sequence of int
        Length ``R_i`` of each state's unstructured start; defines ``N``.
    families : sequence of str
        Emission family of each data channel (``zigamma``, ``vonmises``,
        ``normal``, ``poisson``).
    dwell_family : str
        ``free`` (unstructured start, the penalised model), ``nbinom``
        (shifted negative binomial) or ``geometric`` (an ordinary HMM).
    init : str
        Initial-distribution policy: ``stationary``, ``uniform``, ``fresh``,
        or ``estimated`` (fresh entry with free weights over states).
    """

    start_lengths: tuple[int, ...]
    families: tuple[str, ...]
    dwell_family: str = "free"
    init: str = "stationary"
    convention: str = "printed"

    def __post_init__(self):
        object.__setattr__(self, "start_lengths", tuple(int(r) for r in self.start_lengths))
        object.__setattr__(self, "families", tuple(self.families))
        if len(self.start_lengths) < 2:
            raise ValueError("need at least two states")
        if any(r < 2 for r in self.start_lengths):
            raise ValueError("every unstructured start needs length >= 2")
        for f in self.families:
            family_class(f)
        if self.dwell_family not in DWELL_FAMILIES:
            raise ValueError(f"dwell_family must be one of {DWELL_FAMILIES}")
        if self.init not in FIT_INIT_POLICIES:
            raise ValueError(f"init must be one of {FIT_INIT_POLICIES}")

    @property
    def n_states(self) -> int:
        return len(self.start_lengths)


class ParameterLayout:
    """Slices of the flat working vector.

    Order: dwell blocks per state, Omega logit blocks per row, emission
    blocks per state and channel, entry weights (if estimated).
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        N = spec.n_states
        pos = 0
        self.dwell = []
        for R in spec.start_lengths:
            n = {"free": R, "nbinom": 2, "geometric": 1}[spec.dwell_family]
            self.dwell.append(slice(pos, pos + n))
            pos += n
        self.omega = []
        for _ in range(N):
            self.omega.append(slice(pos, pos + N - 2))
            pos += N - 2
        self.emission = []
        for _ in range(N):
            row = []
            for f in spec.families:
                n = family_class(f).n_params
                row.append(slice(pos, pos + n))
                pos += n
            self.emission.append(row)
        self.entry = None
        if spec.init == "estimated":
            self.entry = slice(pos, pos + N - 1)
            pos += N - 1
        self.size = pos

    def labels(self) -> list[str]:
        out = [""] * self.size
        for i, s in enumerate(self.dwell):
            for k in range(s.start, s.stop):
                out[k] = f"dwell[{i}][{k - s.start}]"
        for i, s in enumerate(self.omega):
            for k in range(s.start, s.stop):
                out[k] = f"omega[{i}][{k - s.start}]"
        for i, row in enumerate(self.emission):
            for c, s in enumerate(row):
                for k in range(s.start, s.stop):
                    out[k] = f"emission[{i}][{c}][{k - s.start}]"
        if self.entry is not None:
            for k in range(self.entry.start, self.entry.stop):
                out[k] = f"entry[{k - self.entry.start}]"
        return out

    # ---- dwell maps -------------------------------------------------
    def dwell_spec(self, i: int, w) -> DwellTimeSpec:
        R = self.spec.start_lengths[i]
        fam = self.spec.dwell_family
        if fam == "free":
            return dwell_from_working(w)
        if fam == "geometric":
            return geometric_dwell(float(np.clip(expit(w[0]), 1e-9, 1 - 1e-9)), R)
        return negative_binomial_dwell(math.exp(w[0]), 1.0 + math.exp(w[1]), R)

    def dwell_jacobian(self, i: int, w, spec: DwellTimeSpec) -> np.ndarray:
        """``d pi / d w`` for state ``i``, shape (R, n_w)."""
        if self.spec.dwell_family == "free":
            return working_jacobian(spec)
        w = np.asarray(w, dtype=float)
        jac = np.empty((spec.start_length, len(w)))
        for k in range(len(w)):
            h = 1e-6 * max(1.0, abs(w[k]))
            wp, wm = w.copy(), w.copy()
            wp[k] += h
            wm[k] -= h
            jac[:, k] = (self.dwell_spec(i, wp).pi - self.dwell_spec(i, wm).pi) / (2 * h)
        return jac

    # ---- whole-vector maps -------------------------------------------
    def unpack(self, theta) -> HsmmModel:
        theta = np.asarray(theta, dtype=float)
        N = self.spec.n_states
        dwell = [self.dwell_spec(i, theta[s]) for i, s in enumerate(self.dwell)]
        omega = np.zeros((N, N))
        for i, s in enumerate(self.omega):
            omega[i, _others(i, N)] = _softmax0(theta[s])
        emissions = []
        for row in self.emission:
            emissions.append(
                tuple(family_class(f).from_working(theta[s]) for f, s in zip(self.spec.families, row))
            )
        init, weights = self.spec.init, None
        if self.entry is not None:
            init, weights = "fresh", _softmax0(theta[self.entry])
        return HsmmModel(dwell, omega, emissions, init=init, init_weights=weights)

    def pack(self, model: HsmmModel, dwell_working=None) -> np.ndarray:
        """Working vector of ``model``; non-free dwell blocks must be supplied."""
        theta = np.zeros(self.size)
        N = self.spec.n_states
        for i, s in enumerate(self.dwell):
            if dwell_working is not None:
                theta[s] = dwell_working[i]
            elif self.spec.dwell_family == "free":
                theta[s] = dwell_to_working(model.dwell[i])
            elif self.spec.dwell_family == "geometric":
                theta[s] = logit(1.0 - model.dwell[i].pi[0])
            else:
                raise ValueError("negative binomial dwell blocks cannot be recovered from a model")
        for i, s in enumerate(self.omega):
            row = model.omega[i, _others(i, N)]
            theta[s] = np.log(row[1:]) - math.log(row[0])
        for i, row in enumerate(self.emission):
            for c, s in enumerate(row):
                theta[s] = model.emissions[i][c].working()
        if self.entry is not None:
            w = model.init_weights if model.init_weights is not None else np.full(N, 1.0 / N)
            theta[self.entry] = np.log(w[1:]) - math.log(w[0])
        return theta

    def permute(self, theta, order) -> np.ndarray:
        """Working vector of the relabelled model (new state k = old order[k])."""
        theta = np.asarray(theta, dtype=float)
        model = self.unpack(theta).permute(order)
        blocks = [theta[self.dwell[i]] for i in order]
        return self.pack(model, dwell_working=blocks)


def _others(i, N):
    return [j for j in range(N) if j != i]


def _softmax0(z):
    z = np.append(0.0, np.asarray(z, dtype=float))
    z = np.exp(z - z.max())
    return z / z.sum()


class Objective:
    """Negative penalised log-likelihood on the working scale."""

    def __init__(self, data: Dataset, spec: ModelSpec, penalty: PenaltyConfig | None = None):
        self.data = data
        self.spec = spec
        self.layout = ParameterLayout(spec)
        if len(spec.families) != len(data.channels):
            raise ValueError(f"spec has {len(spec.families)} channels, data has {len(data.channels)}")
        if penalty is None:
            penalty = PenaltyConfig((0.0,) * spec.n_states, 1)
        if len(penalty.lam) != spec.n_states:
            raise ValueError(f"need {spec.n_states} smoothing parameters, got {len(penalty.lam)}")
        if spec.dwell_family != "free" and any(penalty.lam):
            raise ValueError("penalties apply only to the free (unstructured) dwell family")
        self.penalty = penalty
        self.n_evals = 0
        self._obs = [~np.isnan(data.values[:, c]) for c in range(len(data.channels))]

    # -- pieces -------------------------------------------------------------
    def model(self, theta) -> HsmmModel:
        return self.layout.unpack(theta)

    def penalty_term(self, model) -> float:
        if self.spec.dwell_family != "free" or not any(self.penalty.lam):
            return 0.0
        return penalty_value(model, self.penalty)

    def loglik(self, theta) -> float:
        return self.loglik_and_grad(theta, want_grad=False)[0]

    def loglik_and_grad(self, theta, want_grad: bool = True):
        """Unpenalised log-likelihood and its working-scale gradient."""
        self.n_evals += 1
        try:
            model = self.layout.unpack(theta)
        except (ValueError, OverflowError, FloatingPointError):
            return -math.inf, None
        hmm = expand(model)
        g = loglik_gradient(hmm, self.data, self.spec.convention)
        if not want_grad or not math.isfinite(g.value):
            return g.value, None
        return g.value, self._chain(theta, model, hmm, g)

    def value_and_grad(self, theta):
        """Negative penalised log-likelihood and gradient (for minimisation)."""
        ll, grad = self.loglik_and_grad(theta)
        if not math.isfinite(ll):
            return math.inf, np.zeros(len(theta))
        model = self.layout.unpack(theta)
        pen = self.penalty_term(model)
        pgrad = self.penalty_grad(theta, model)
        return -(ll - pen), -(grad - pgrad)

    def value(self, theta) -> float:
        ll = self.loglik(theta)
        if not math.isfinite(ll):
            return math.inf
        return -(ll - self.penalty_term(self.layout.unpack(theta)))

    def penalty_grad(self, theta, model=None) -> np.ndarray:
        out = np.zeros(self.layout.size)
        if self.spec.dwell_family != "free" or not any(self.penalty.lam):
            return out
        model = model or self.layout.unpack(theta)
        for i, s in enumerate(self.layout.dwell):
            lam = self.penalty.lam[i]
            if lam == 0 or self.penalty.order >= model.dwell[i].start_length:
                continue
            pi = model.dwell[i].pi
            gpi = 2.0 * lam * self.penalty.gram(len(pi)) @ pi
            out[s] = working_jacobian(model.dwell[i]) @ gpi
        return out

    def penalty_hessian(self, theta) -> np.ndarray:
        """Exact working-scale Hessian of the penalty term."""
        from .dwell import working_second_derivatives

        p = self.layout.size
        H = np.zeros((p, p))
        if self.spec.dwell_family != "free" or not any(self.penalty.lam):
            return H
        model = self.layout.unpack(theta)
        for i, s in enumerate(self.layout.dwell):
            lam = self.penalty.lam[i]
            if lam == 0 or self.penalty.order >= model.dwell[i].start_length:
                continue
            d = model.dwell[i]
            K2 = 2.0 * lam * self.penalty.gram(d.start_length)
            J = working_jacobian(d)
            gpi = K2 @ d.pi
            H[s, s] = J.T @ K2 @ J + np.einsum("r,rst->st", gpi, working_second_derivatives(d))
        return H

    # -- chain rule ---------------------------------------------------------
    def _chain(self, theta, model, hmm, g) -> np.ndarray:
        lay = self.layout
        N = model.n_states
        out = np.zeros(lay.size)
        G = g.d_tpm
        if model.init == "stationary":
            A = np.eye(hmm.n_expanded) - hmm.tpm + 1.0
            v = np.linalg.solve(A, g.d_delta)
            G = G + np.outer(hmm.delta, v)
        offsets = np.concatenate([[0], np.cumsum(model.start_lengths)]).astype(int)
        first = offsets[:-1]
        for i, d in enumerate(model.dwell):
            o, R = offsets[i], d.start_length
            rows = np.arange(o, o + R)
            succ = np.minimum(rows + 1, o + R - 1)
            others = _others(i, N)
            to_first = G[o : o + R][:, first[others]]  # (R, N-1)
            w = model.omega[i, others]
            gc = -G[rows, succ] + to_first @ w
            gpi = hazard_pi_jacobian(d).T @ gc
            out[lay.dwell[i]] = lay.dwell_jacobian(i, theta[lay.dwell[i]], d).T @ gpi
            if N > 2:
                c = hazards(d)
                gw = c @ to_first  # d loglik / d omega_ij over j in others
                jac = np.diag(w) - np.outer(w, w)
                out[lay.omega[i]] = (jac @ gw)[1:]
        post = g.state_post
        for c, fam in enumerate(self.spec.families):
            obs = self._obs[c]
            if not obs.any():
                continue
            y = self.data.values[obs, c]
            for i in range(N):
                dl = model.emissions[i][c].dlogpdf(y)
                out[lay.emission[i][c]] = post[obs, i] @ dl
        if lay.entry is not None:
            gw = g.d_delta[first]
            w = model.init_weights
            out[lay.entry] = ((np.diag(w) - np.outer(w, w)) @ gw)[1:]
        return out

    def fd_grad(self, theta, func=None) -> np.ndarray:
        """Central finite differences with step ``eps^(1/3) max(1, |theta_k|)``."""
        func = func or self.value
        theta = np.asarray(theta, dtype=float)
        h0 = np.finfo(float).eps ** (1.0 / 3.0)
        out = np.empty_like(theta)
        for k in range(len(theta)):
            h = h0 * max(1.0, abs(theta[k]))
            tp, tm = theta.copy(), theta.copy()
            tp[k] += h
            tm[k] -= h
            out[k] = (func(tp) - func(tm)) / (2 * h)
        return out


@dataclass(frozen=True)
class FitOptions:
    n_starts: int = 10
    jitter: float = 0.2
    seed: int = 0
    gtol: float = 1e-4
    ftol: float = 1e-8
    maxiter: int = 2000
    gradient: str = "analytic"
    threads: int = 1
    theta0: tuple | None = None
    reorder: bool = True
    hess_inv0: np.ndarray | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True, eq=False)
class StartSummary:
    start: int
    penalised_loglik: float
    converged: bool
    n_iter: int
    message: str


@dataclass(frozen=True, eq=False)
class FitResult:
    theta: np.ndarray
    layout: ParameterLayout
    model: HsmmModel
    loglik: float
    penalised_loglik: float
    penalty: float
    n_params: int
    converged: bool
    n_evals: int
    grad_norm: float
    starts: list = field(default_factory=list)
    spec: ModelSpec | None = None
    penalty_config: PenaltyConfig | None = None
    options: FitOptions | None = None
    hess_inv: np.ndarray | None = field(default=None, repr=False)


def _circ_stats(a):
    a = a[~np.isnan(a)]
    if a.size == 0:
        return 0.0, 1.0
    C, S = np.cos(a).mean(), np.sin(a).mean()
    rbar = min(math.hypot(C, S), 0.95)
    # standard approximation to the inverse of I1/I0
    if rbar < 0.53:
        kappa = 2 * rbar + rbar**3 + 5 * rbar**5 / 6
    elif rbar < 0.85:
        kappa = -0.4 + 1.39 * rbar + 0.43 / (1 - rbar)
    else:
        kappa = 1 / (rbar**3 - 4 * rbar**2 + 3 * rbar)
    return math.atan2(S, C), max(kappa, 0.05)


def initialize(data: Dataset, spec: ModelSpec, seed: int | None = None, jitter: float = 0.0) -> np.ndarray:
    """Starting working vector from per-state quantile splits of the data.

    Time points are grouped by quantiles of the first linear channel (the
    first channel that is not von Mises); every channel's initial
    parameters for state ``i`` come from group ``i``. Dwell starts are
    geometric with mean ``min(T / (10 N), R_i)``; Omega is uniform. With a
    seed and positive ``jitter`` Gaussian noise is added on the working scale.
    """
    lay = ParameterLayout(spec)
    N = spec.n_states
    T = data.T
    vals = data.values
    lin = [c for c, f in enumerate(spec.families) if f != "vonmises"]
    if lin:
        key = vals[:, lin[0]]
        obs = ~np.isnan(key)
        if obs.sum() >= N:
            qs = np.quantile(key[obs], np.linspace(0, 1, N + 1)[1:-1])
            group = np.full(T, -1)
            group[obs] = np.searchsorted(qs, key[obs], side="right")
        else:
            group = np.minimum(np.arange(T) * N // T, N - 1)
    else:
        group = np.minimum(np.arange(T) * N // T, N - 1)

    theta = np.zeros(lay.size)
    for c, fam in enumerate(spec.families):
        col = vals[:, c]
        allobs = col[~np.isnan(col)]
        for i in range(N):
            g = col[(group == i) & ~np.isnan(col)]
            if g.size < 2:
                g = allobs
            s = lay.emission[i][c]
            if fam == "zigamma":
                pos = g[g > 0] if np.any(g > 0) else (allobs[allobs > 0] if np.any(allobs > 0) else np.array([1.0]))
                mean = float(pos.mean())
                sd = float(pos.std()) if pos.size > 1 and pos.std() > 0 else mean
                z = float(np.clip(np.mean(g == 0) if g.size else 0.01, 0.01, 0.5))
                theta[s] = [logit(z), math.log(mean), math.log(sd)]
            elif fam == "normal":
                sd = float(g.std()) if g.size > 1 and g.std() > 0 else 1.0
                theta[s] = [float(g.mean()) if g.size else 0.0, math.log(sd)]
            elif fam == "poisson":
                theta[s] = [math.log(max(float(g.mean()) if g.size else 1.0, 0.1))]
            else:
                loc, kappa = _circ_stats(g)
                theta[s] = [loc, math.log(kappa)]

    for i, R in enumerate(spec.start_lengths):
        mean_dwell = float(np.clip(T / (10.0 * N), 1.5, R))
        gamma = 1.0 - 1.0 / mean_dwell
        s = lay.dwell[i]
        if spec.dwell_family == "free":
            theta[s] = dwell_to_working(geometric_dwell(gamma, R))
        elif spec.dwell_family == "geometric":
            theta[s] = [logit(gamma)]
        else:
            theta[s] = [0.0, math.log(mean_dwell - 1.0 + 1e-3)]

    if seed is not None and jitter > 0:
        rng = np.random.default_rng(seed)
        theta = theta + rng.normal(0.0, jitter, lay.size)
    return theta


def _canonical_order(model: HsmmModel) -> list[int]:
    keys = [model.emissions[i][0].order_key() for i in range(model.n_states)]
    return sorted(range(model.n_states), key=lambda i: (keys[i], i))


def _run_start(obj: Objective, theta0, options: FitOptions, k: int):
    hist = []

    def cb(intermediate_result):
        hist.append(float(intermediate_result.fun))

    if options.gradient == "analytic":
        fun, jac = obj.value_and_grad, True
    elif options.gradient == "fd":
        fun, jac = obj.value, obj.fd_grad
    else:
        raise ValueError("gradient must be 'analytic' or 'fd'")
    opts = {"gtol": options.gtol, "maxiter": options.maxiter, "norm": np.inf}
    if k == 0 and options.hess_inv0 is not None:
        # a curvature estimate from a nearby fit saves most of the BFGS warm-up
        H0 = 0.5 * (options.hess_inv0 + options.hess_inv0.T)
        if H0.shape == (len(theta0), len(theta0)) and np.linalg.eigvalsh(H0)[0] > 0:
            opts["hess_inv0"] = H0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = minimize(fun, np.asarray(theta0, dtype=float), jac=jac, method="BFGS", callback=cb, options=opts)
    grad = res.jac if res.jac is not None else np.full(len(res.x), np.nan)
    gnorm = float(np.max(np.abs(grad))) if len(grad) else 0.0
    rel = abs(hist[-1] - hist[-2]) / max(1.0, abs(hist[-1])) if len(hist) >= 2 else math.inf
    converged = bool(math.isfinite(res.fun) and (gnorm <= options.gtol or (rel <= options.ftol and res.status == 2)))
    return res, gnorm, converged, StartSummary(k, -float(res.fun), converged, int(res.nit), str(res.message))


def fit(data: Dataset, spec: ModelSpec, penalty: PenaltyConfig | None = None, options: FitOptions | None = None) -> FitResult:
    """Maximise the penalised log-likelihood from several starts.

    The first start is the deterministic initial value (or ``options.theta0``
    when given); the others add Gaussian jitter on the working scale. The
    best start is returned with states ordered by the first channel.
    """
    options = options or FitOptions()
    obj = Objective(data, spec, penalty)
    lay = obj.layout
    n_obs = int(np.sum(~np.all(np.isnan(data.values), axis=1)))
    if n_obs <= lay.size:
        warnings.warn(f"only {n_obs} observed time points for {lay.size} parameters", stacklevel=2)

    base = np.asarray(options.theta0, dtype=float) if options.theta0 is not None else initialize(data, spec)
    starts = [base]
    for k in range(1, options.n_starts):
        rng = np.random.default_rng([options.seed, k])
        starts.append(base + rng.normal(0.0, options.jitter, lay.size))

    if options.threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(options.threads) as pool:
            runs = list(pool.map(lambda a: _run_start(Objective(data, spec, obj.penalty), a[1], options, a[0]), enumerate(starts)))
    else:
        runs = [_run_start(obj, th, options, k) for k, th in enumerate(starts)]

    finite = [r for r in runs if math.isfinite(r[0].fun)]
    if not finite:
        raise FitError("every start diverged or had zero likelihood")
    best = min(finite, key=lambda r: (r[0].fun, r[3].start))
    res, gnorm, converged, _ = best
    theta = res.x
    hess_inv = getattr(res, "hess_inv", None)
    if options.reorder:
        order = _canonical_order(lay.unpack(theta))
        if order != sorted(order):
            theta = lay.permute(theta, order)
            hess_inv = None
    model = lay.unpack(theta)
    ll = obj.loglik(theta)
    pen = obj.penalty_term(model)
    n_evals = obj.n_evals if options.threads <= 1 else sum(int(r[0].nfev) for r in runs)
    return FitResult(
        theta=theta,
        layout=lay,
        model=model,
        loglik=ll,
        penalised_loglik=ll - pen,
        penalty=pen,
        n_params=lay.size,
        converged=converged,
        n_evals=n_evals,
        grad_norm=gnorm,
        starts=[r[3] for r in runs],
        spec=spec,
        penalty_config=obj.penalty,
        options=options,
        hess_inv=hess_inv,
    )


def refit(data: Dataset, result: FitResult, **overrides) -> FitResult:
    """Fit again starting from ``result.theta`` with a single start."""
    options = replace(result.options or FitOptions(), theta0=tuple(result.theta), n_starts=1, **overrides)
    return fit(data, result.spec, result.penalty_config, options)
