"""Score functions separating known-class samples from new-class samples.

All scores are pure deterministic functions of their arguments. Higher means
"looks like a known class". Three variants:

* Mahalanobis: max over classes of the negative squared Mahalanobis distance
  from the logit vector to that class's fitted Gaussian (shared pooled
  covariance). Always <= 0.
* ODIN: max temperature-scaled softmax probability of a sign-gradient
  perturbed input. In (0, 1].
* Max-softmax: the plain maximum softmax probability (= ODIN with T=1, eps=0).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConditioningError, ConfigError, DataError, ShapeError
from .net import NetworkSpec, backward, forward, softmax


@dataclass(frozen=True)
class MahalanobisParams:
    """Per-class means and a pooled covariance fitted on logit vectors.

    The precision matrix is computed lazily; a singular regularized
    covariance surfaces as a ConditioningError at first scoring.
    """

    class_ids: tuple[int, ...]
    means: np.ndarray  # (n_classes, dim)
    pooled_cov: np.ndarray  # (dim, dim)
    ridge: float

    @cached_property
    def precision(self) -> np.ndarray:
        cov = self.pooled_cov + self.ridge * np.eye(self.pooled_cov.shape[0])
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ConditioningError(
                "regularized pooled covariance is not positive definite"
            ) from None
        inv = np.linalg.inv(cov)
        return (inv + inv.T) / 2.0


@dataclass(frozen=True)
class OdinParams:
    temperature: float
    epsilon: float

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")


@dataclass(frozen=True)
class MaxSoftmaxParams:
    pass


ScoreParams = MahalanobisParams | OdinParams | MaxSoftmaxParams


def fit_mahalanobis(grouped, ridge: float = 1e-6) -> MahalanobisParams:
    """Fit per-class means and the pooled covariance.

    ``grouped`` maps class id -> iterable of equal-length vectors. The pooled
    covariance sums squared deviations from each sample's own class mean and
    divides by the total sample count.
    """
    if not grouped:
        raise DataError("fit_mahalanobis needs at least one class")
    class_ids = tuple(sorted(grouped))
    arrays = []
    for c in class_ids:
        V = np.asarray(grouped[c], dtype=np.float64)
        if V.ndim != 2 or V.shape[0] == 0:
            raise DataError(f"class {c} has no samples")
        arrays.append(V)
    dim = arrays[0].shape[1]
    if any(V.shape[1] != dim for V in arrays):
        raise ShapeError("all score-space vectors must have the same length")
    means = np.stack([V.mean(axis=0) for V in arrays])
    total = sum(V.shape[0] for V in arrays)
    scatter = np.zeros((dim, dim))
    for V, mu in zip(arrays, means):
        dev = V - mu
        scatter += dev.T @ dev
    return MahalanobisParams(class_ids, means, scatter / total, float(ridge))


def mahalanobis_scores(V, params: MahalanobisParams) -> np.ndarray:
    """Score = max_j -(v - mu_j)^T P (v - mu_j); always <= 0."""
    V = np.asarray(V, dtype=np.float64)
    squeezed = V.ndim == 1
    if squeezed:
        V = V[None, :]
    if V.shape[1] != params.means.shape[1]:
        raise ShapeError(
            f"vector width {V.shape[1]} does not match means width "
            f"{params.means.shape[1]}"
        )
    P = params.precision
    dists = np.empty((V.shape[0], params.means.shape[0]))
    for j, mu in enumerate(params.means):
        dev = V - mu
        dists[:, j] = np.einsum("ni,ij,nj->n", dev, P, dev)
    s = -dists.min(axis=1)
    return s[0] if squeezed else s


def mahalanobis_score(v, params: MahalanobisParams) -> float:
    return float(mahalanobis_scores(v, params))


def mahalanobis_score_dlogits(
    V, params: MahalanobisParams
) -> tuple[np.ndarray, np.ndarray]:
    """Scores plus their gradient with respect to the logit vectors.

    The max over classes uses the argmax class per row (lowest index on ties).
    """
    V = np.asarray(V, dtype=np.float64)
    P = params.precision
    dists = np.empty((V.shape[0], params.means.shape[0]))
    for j, mu in enumerate(params.means):
        dev = V - mu
        dists[:, j] = np.einsum("ni,ij,nj->n", dev, P, dev)
    best = dists.argmin(axis=1)
    s = -dists[np.arange(V.shape[0]), best]
    dev_best = V - params.means[best]
    ds_dV = -2.0 * dev_best @ P
    return s, ds_dV


def temperature_scale(logits, temperature: float) -> np.ndarray:
    """softmax(logits / T), numerically stabilized."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    Z = np.asarray(logits, dtype=np.float64)
    return softmax(Z / temperature)


def apply_odin_perturbation(x, grad_log_q, epsilon: float) -> np.ndarray:
    """x - eps * sign(-grad); pure arithmetic half of the ODIN perturbation."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(grad_log_q, dtype=np.float64)
    if x.shape != g.shape:
        raise ShapeError("gradient shape does not match the input")
    return x - epsilon * np.sign(-g)


def _perturbation_gradients(X, theta, spec: NetworkSpec, temperature: float):
    """Gradient of log q~_yhat(x) with respect to x, with yhat = argmax logit."""
    logits, trace = forward(theta, spec, X)
    if logits.ndim == 1:
        logits = logits[None, :]
    yhat = logits.argmax(axis=1)
    p = softmax(logits / temperature)
    upstream = -p / temperature
    upstream[np.arange(len(yhat)), yhat] += 1.0 / temperature
    _, grad_x = backward(trace, upstream)
    return grad_x


def perturb_input(x, theta, spec: NetworkSpec, params: OdinParams) -> np.ndarray:
    """The ODIN input preprocessing step. Works on one sample or a batch."""
    X = np.asarray(x, dtype=np.float64)
    if params.epsilon == 0.0:
        return X.copy()
    grad = _perturbation_gradients(X, theta, spec, params.temperature)
    return apply_odin_perturbation(X, grad, params.epsilon)


def odin_scores(X, theta, spec: NetworkSpec, params: OdinParams) -> np.ndarray:
    """Max temperature-scaled softmax probability of the perturbed input."""
    X_tilde = perturb_input(X, theta, spec, params)
    logits, _ = forward(theta, spec, X_tilde)
    p = temperature_scale(logits, params.temperature)
    squeezed = p.ndim == 1
    if squeezed:
        p = p[None, :]
    s = p.max(axis=1)
    return s[0] if squeezed else s


def odin_score(x, theta, spec: NetworkSpec, params: OdinParams) -> float:
    return float(odin_scores(x, theta, spec, params))


def max_softmax_scores(X, theta, spec: NetworkSpec) -> np.ndarray:
    logits, _ = forward(theta, spec, X)
    p = softmax(logits)
    squeezed = p.ndim == 1
    if squeezed:
        p = p[None, :]
    s = p.max(axis=1)
    return s[0] if squeezed else s


def score_samples(X, theta, spec: NetworkSpec, params: ScoreParams) -> np.ndarray:
    """Dispatch on the score variant; returns one score per row of X."""
    if isinstance(params, MahalanobisParams):
        logits, _ = forward(theta, spec, X)
        return mahalanobis_scores(logits, params)
    if isinstance(params, OdinParams):
        return odin_scores(X, theta, spec, params)
    if isinstance(params, MaxSoftmaxParams):
        return max_softmax_scores(X, theta, spec)
    raise ConfigError(f"unknown score parameters {type(params).__name__}")


def scores_with_dlogits(X, theta, spec: NetworkSpec, params: ScoreParams):
    """Scores plus the pieces needed to backpropagate them into theta.

    Returns ``(scores, trace, ds_dlogits)`` where ``trace`` is the forward
    trace over the inputs actually scored. For ODIN with epsilon > 0 those
    inputs are the perturbed ones; the perturbation itself is treated as a
    constant with respect to theta, so gradients flow only through the final
    temperature-scaled forward pass.
    """
    if isinstance(params, MahalanobisParams):
        logits, trace = forward(theta, spec, X)
        s, ds = mahalanobis_score_dlogits(np.atleast_2d(logits), params)
        return s, trace, ds
    if isinstance(params, MaxSoftmaxParams):
        params = OdinParams(1.0, 0.0)
    if isinstance(params, OdinParams):
        X_scored = perturb_input(X, theta, spec, params)
        logits, trace = forward(theta, spec, X_scored)
        Z = np.atleast_2d(logits)
        p = softmax(Z / params.temperature)
        best = Z.argmax(axis=1)
        rows = np.arange(Z.shape[0])
        p_best = p[rows, best]
        ds = -(p_best[:, None] * p) / params.temperature
        ds[rows, best] += p_best / params.temperature
        return p_best, trace, ds
    raise ConfigError(f"unknown score parameters {type(params).__name__}")


def rank_auroc(scores_in, scores_out) -> float:
    """Probability that a random in-distribution score exceeds a random
    out-of-distribution score, ties counted half (midrank AUROC)."""
    s_in = np.asarray(scores_in, dtype=np.float64)
    s_out = np.asarray(scores_out, dtype=np.float64)
    if s_in.size == 0 or s_out.size == 0:
        raise DataError("AUROC needs scores on both sides")
    pooled = np.concatenate([s_in, s_out])
    sorted_vals = np.sort(pooled)
    lo = np.searchsorted(sorted_vals, s_in, side="left")
    hi = np.searchsorted(sorted_vals, s_in, side="right")
    ranks = (lo + hi + 1) / 2.0
    n_in, n_out = s_in.size, s_out.size
    return float((ranks.sum() - n_in * (n_in + 1) / 2.0) / (n_in * n_out))


def _lower_quantile(scores: np.ndarray, eta: float) -> float:
    """Smallest observed value v with #{s <= v}/N >= eta/100 (same convention
    as the detector's threshold calibration)."""
    s = np.sort(scores)
    n = s.size
    for i in range(n):
        if 100.0 * (i + 1) >= eta * n:
            return float(s[i])
    return float(s[-1])


def fit_odin_grid(
    theta,
    spec: NetworkSpec,
    X_in,
    X_out,
    temperatures=(1.0, 10.0, 100.0, 1000.0),
    epsilons=(0.0, 0.0005, 0.001, 0.002, 0.005),
    eta: float = 80.0,
) -> OdinParams:
    """Pick (T, eps) maximizing separation at the detector's operating point.

    Separation is the true-negative rate of the flag when the threshold is
    calibrated to catch eta percent of the auxiliary OOD scores, i.e. the
    fraction of in-distribution samples left unflagged. Strict improvement is
    required while scanning temperatures from the largest down and epsilons
    from the smallest up, so ties resolve to the larger temperature (the
    canonical ODIN choice, and the one with the gentlest hinge gradients) and
    the smaller perturbation.
    """
    best = None
    best_tnr = -np.inf
    for T in sorted(temperatures, reverse=True):
        for eps in sorted(epsilons):
            cand = OdinParams(float(T), float(eps))
            tau = _lower_quantile(odin_scores(X_out, theta, spec, cand), eta)
            tnr = float(np.mean(odin_scores(X_in, theta, spec, cand) > tau))
            if tnr > best_tnr:
                best_tnr = tnr
                best = cand
    return best
