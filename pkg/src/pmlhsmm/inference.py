"""Likelihood evaluation, decoding and residuals on the expanded HMM.

Two conventions for the initial step are supported: ``"printed"`` evaluates
``delta Gamma P(y_1) Gamma P(y_2) ...`` (the state distribution at t=1 is
``delta Gamma``) and ``"standard"`` evaluates ``delta P(y_1) Gamma P(y_2) ...``.
They coincide whenever ``delta`` is stationary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from . import kernels
from .emission import log_density_matrix
from .expand import ExpandedHmm, HsmmModel, expand
from .penalty import PenaltyConfig, penalty_value

CONVENTIONS = ("printed", "standard")


@dataclass(frozen=True, eq=False)
class Dataset:
    """A (T, C) array of observations with NaN marking missing values."""

    channels: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "channels", tuple(self.channels))
        if values.shape[0] < 1:
            raise ValueError("a dataset needs at least one time step")
        if values.shape[1] != len(self.channels):
            raise ValueError(f"{len(self.channels)} channels declared but values have {values.shape[1]} columns")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    def __len__(self):
        return self.T

    def masked(self, keep: np.ndarray) -> "Dataset":
        """Copy with every row outside ``keep`` (boolean, length T) set missing."""
        values = self.values.copy()
        values[~np.asarray(keep, dtype=bool)] = np.nan
        return Dataset(self.channels, values)


@dataclass(frozen=True, eq=False)
class LogLik:
    value: float
    log_scales: np.ndarray


def _check_convention(convention):
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {CONVENTIONS}, got {convention!r}")


def initial_vector(hmm: ExpandedHmm, convention: str = "printed") -> np.ndarray:
    """Distribution of the sub-state at t=1."""
    _check_convention(convention)
    return hmm.delta @ hmm.tpm if convention == "printed" else hmm.delta


def _as_hmm(model_or_hmm) -> ExpandedHmm:
    return expand(model_or_hmm) if isinstance(model_or_hmm, HsmmModel) else model_or_hmm


def state_log_densities(hmm: ExpandedHmm, data: Dataset) -> np.ndarray:
    """``log f_i(y_t)``, shape (T, N)."""
    if len(hmm.emissions[0]) != len(data.channels):
        raise ValueError(f"model has {len(hmm.emissions[0])} channels, data has {len(data.channels)}")
    return log_density_matrix(hmm.emissions, data.values)


def _scaled_densities(logdens):
    # one rescaling per time step keeps exp() in range; the shift is added back to the log-likelihood
    shift = logdens.max(axis=1)
    shift[~np.isfinite(shift)] = 0.0
    return np.ascontiguousarray(np.exp(logdens - shift[:, None])), shift


def forward_pass(hmm: ExpandedHmm, data: Dataset, convention: str = "printed", logdens=None):
    """Scaled forward pass; returns ``(alpha_hat, log_scales, dens, shift)``."""
    if logdens is None:
        logdens = state_log_densities(hmm, data)
    dens, shift = _scaled_densities(logdens)
    indptr, indices, values = hmm.csr
    init = np.ascontiguousarray(initial_vector(hmm, convention))
    alpha, logc = kernels.forward(indptr, indices, values, init, dens, hmm.agg_index)
    return alpha, logc + shift, dens, shift


def forward_loglik(hmm, data: Dataset, convention: str = "printed") -> LogLik:
    """Log-likelihood by the scaled forward recursion, ``-inf`` if some step has zero density."""
    hmm = _as_hmm(hmm)
    _, log_scales, _, _ = forward_pass(hmm, data, convention)
    value = float(np.sum(log_scales)) if np.all(np.isfinite(log_scales)) else -math.inf
    return LogLik(value, log_scales)


def penalised_loglik(model: HsmmModel, config: PenaltyConfig, data: Dataset, convention: str = "printed") -> float:
    ll = forward_loglik(expand(model), data, convention).value
    return ll - penalty_value(model, config)


@dataclass(frozen=True, eq=False)
class LoglikGradient:
    """Log-likelihood and its sensitivities on the expanded-HMM scale.

    ``d_tpm`` is dense but only meaningful on the structural non-zeros;
    ``d_delta`` is w.r.t. ``delta`` itself (any convention already folded
    in); ``state_post`` holds the smoothed HSMM-state probabilities, which
    are the derivatives w.r.t. ``log f_i(y_t)``.
    """

    value: float
    d_tpm: np.ndarray
    d_delta: np.ndarray
    state_post: np.ndarray


def loglik_gradient(hmm: ExpandedHmm, data: Dataset, convention: str = "printed", logdens=None) -> LoglikGradient:
    """Forward-backward pass returning the likelihood and its gradients."""
    if logdens is None:
        logdens = state_log_densities(hmm, data)
    alpha, logc, dens, shift = forward_pass(hmm, data, convention, logdens)
    if not np.all(np.isfinite(logc)):
        K = hmm.n_expanded
        return LoglikGradient(-math.inf, np.zeros((K, K)), np.zeros(K), np.full((data.T, hmm.n_states), np.nan))
    indptr, indices, values = hmm.csr
    state_post, grad_nz, ginit = kernels.backward_grad(indptr, indices, values, dens, hmm.agg_index, alpha, logc - shift)
    K = hmm.n_expanded
    rows = np.repeat(np.arange(K), np.diff(indptr))
    d_tpm = np.zeros((K, K))
    d_tpm[rows, indices] = grad_nz
    if convention == "printed":
        d_tpm += np.outer(hmm.delta, ginit)
        d_delta = hmm.tpm @ ginit
    else:
        d_delta = ginit
    return LoglikGradient(float(np.sum(logc)), d_tpm, d_delta, state_post)


def state_probs(hmm, data: Dataset, convention: str = "printed") -> np.ndarray:
    """Smoothed probabilities of the HSMM states, shape (T, N)."""
    hmm = _as_hmm(hmm)
    g = loglik_gradient(hmm, data, convention)
    if not math.isfinite(g.value):
        raise ValueError("data has zero likelihood under the model")
    return g.state_post / g.state_post.sum(axis=1, keepdims=True)


def viterbi(hmm, data: Dataset, convention: str = "printed", return_substates: bool = False):
    """Most probable state sequence, mapped from sub-states to HSMM states."""
    hmm = _as_hmm(hmm)
    logdens = state_log_densities(hmm, data)
    indptr, indices, values = hmm.csr
    with np.errstate(divide="ignore"):
        logdata = np.log(values)
        loginit = np.log(initial_vector(hmm, convention))
    path, _ = kernels.viterbi(
        indptr, indices, np.ascontiguousarray(logdata), np.ascontiguousarray(loginit),
        np.ascontiguousarray(logdens), hmm.agg_index,
    )
    states = hmm.aggregate_of[path]
    return (states, path) if return_substates else states


def path_log_probability(hmm: ExpandedHmm, data: Dataset, path, convention: str = "printed") -> float:
    """Joint log-probability of a sub-state path and the observations."""
    logdens = state_log_densities(hmm, data)
    path = np.asarray(path)
    with np.errstate(divide="ignore"):
        lp = math.log(initial_vector(hmm, convention)[path[0]]) if initial_vector(hmm, convention)[path[0]] > 0 else -math.inf
        steps = np.log(hmm.tpm[path[:-1], path[1:]])
    return lp + float(np.sum(steps)) + float(np.sum(logdens[np.arange(len(path)), hmm.aggregate_of[path]]))


def pseudo_residuals(hmm, data: Dataset, channel, convention: str = "printed", seed: int | None = 0) -> np.ndarray:
    """Ordinary (one-step-ahead) normal pseudo-residuals of one channel.

    ``u_t = Pr(Y_t <= y_t | y_1..y_{t-1})``, mapped through the standard
    normal quantile. Where the observation sits on a point mass the PIT is
    randomised uniformly across the CDF jump using ``seed``. Missing values
    yield NaN.
    """
    hmm = _as_hmm(hmm)
    c = data.channels.index(channel) if isinstance(channel, str) else int(channel)
    alpha, logc, _, _ = forward_pass(hmm, data, convention)
    if not np.all(np.isfinite(logc)):
        raise ValueError("data has zero likelihood under the model")
    pred = np.empty_like(alpha)
    pred[0] = initial_vector(hmm, convention)
    pred[1:] = alpha[:-1] @ hmm.tpm
    state_pred = pred @ hmm.onehot
    y = data.values[:, c]
    obs = ~np.isnan(y)
    lo = np.zeros(data.T)
    hi = np.zeros(data.T)
    for i in range(hmm.n_states):
        l_i, h_i = hmm.emissions[i][c].cdf_bounds(np.where(obs, y, 0.0))
        lo += state_pred[:, i] * l_i
        hi += state_pred[:, i] * h_i
    rng = np.random.default_rng(seed)
    v = rng.random(data.T)
    u = np.where(hi > lo, lo + v * (hi - lo), hi)
    u = np.clip(u, 1e-15, 1.0 - 1e-15)
    res = ndtri(u)
    res[~obs] = np.nan
    return res
