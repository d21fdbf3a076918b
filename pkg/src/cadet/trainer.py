"""Joint continual-training loss, Fisher diagonal, and threshold calibration.

The training objective per mini-batch is

    total = sum CE(q(x|theta), y)                       over in-batch samples
          + lambda_prior * sum_k F_k (theta_k - theta_prev_k)^2
          + lambda_ood * sum max{0, tau - s(x_in)}      over in-batch samples
          + lambda_ood * sum max{0, s(x_out) - tau}     over the paired OOD batch

where s is whichever score variant the detector uses and tau is the threshold
frozen from the previous batch. Gradients are exact for this expression (with
the ODIN perturbed input treated as a constant).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .net import (
    PROB_FLOOR,
    NetworkSpec,
    backward,
    backward_deltas,
    forward,
    optimizer_step,
    softmax,
)
from .scores import ScoreParams, scores_with_dlogits


@dataclass(frozen=True)
class ContinualLossTerms:
    l_class: float
    l_prior: float
    l_hinge_in: float
    l_hinge_out: float
    total: float


@dataclass(frozen=True)
class Threshold:
    """A calibrated score cut-off together with the rate it was tuned for."""

    tau: float
    eta: float


def fisher_diagonal(theta, spec: NetworkSpec, X, y) -> np.ndarray:
    """Empirical Fisher diagonal: |D| * mean of squared per-sample CE gradients.

    Computed per layer as (delta_i^2)^T @ (a_i^2), which equals the sum over
    samples of the squared per-sample weight gradients without materializing
    them.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("fisher_diagonal needs a non-empty labeled dataset")
    if y.shape != (X.shape[0],):
        raise ShapeError("labels must align with the samples")
    logits, trace = forward(theta, spec, X)
    P = softmax(np.atleast_2d(logits))
    rows = np.arange(X.shape[0])
    G = P.copy()
    G[rows, y] -= 1.0
    G[P[rows, y] <= PROB_FLOOR] = 0.0  # flat region of the clamped CE
    deltas = backward_deltas(trace, G)
    F = np.empty(spec.param_count, dtype=np.float64)
    for i, (w_slice, b_slice, _) in enumerate(spec.layer_param_slices()):
        d2 = deltas[i] ** 2
        F[w_slice] = (d2.T @ trace.activations[i] ** 2).ravel()
        F[b_slice] = d2.sum(axis=0)
    return F


def prior_penalty(theta, theta_prev, fisher) -> float:
    """Fisher-weighted squared distance to the previous parameter snapshot."""
    theta = np.asarray(theta, dtype=np.float64)
    theta_prev = np.asarray(theta_prev, dtype=np.float64)
    fisher = np.asarray(fisher, dtype=np.float64)
    if theta.shape != theta_prev.shape or theta.shape != fisher.shape:
        raise ShapeError("theta, theta_prev and the Fisher diagonal must align")
    delta = theta - theta_prev
    return float(np.sum(fisher * delta * delta))


def hinge_terms(s_in, s_out, tau: float) -> tuple[float, float]:
    """(sum max{0, tau - s} over s_in, sum max{0, s - tau} over s_out)."""
    s_in = np.asarray(s_in, dtype=np.float64)
    s_out = np.asarray(s_out, dtype=np.float64)
    l_in = float(np.maximum(0.0, tau - s_in).sum()) if s_in.size else 0.0
    l_out = float(np.maximum(0.0, s_out - tau).sum()) if s_out.size else 0.0
    return l_in, l_out


def _cross_entropy_sum_and_upstream(logits, y):
    """Summed clamped CE over a batch plus dCE/dlogits rows."""
    P = softmax(np.atleast_2d(logits))
    rows = np.arange(P.shape[0])
    p_true = P[rows, y]
    loss = float(-np.log(np.maximum(p_true, PROB_FLOOR)).sum())
    G = P.copy()
    G[rows, y] -= 1.0
    G[p_true <= PROB_FLOOR] = 0.0
    return loss, G


def total_loss_and_grad(
    theta,
    spec: NetworkSpec,
    score_params: ScoreParams | None,
    tau_prev: float,
    X_in,
    y_in,
    X_out,
    *,
    lam_ood: float,
    lam_prior: float,
    theta_prev,
    fisher,
) -> tuple[ContinualLossTerms, np.ndarray]:
    """Evaluate the joint loss and its exact gradient with respect to theta."""
    X_in = np.asarray(X_in, dtype=np.float64)
    y_in = np.asarray(y_in, dtype=np.int64)
    if X_in.ndim != 2 or X_in.shape[0] == 0:
        raise DataError("the in-distribution mini-batch must be non-empty")

    logits, trace = forward(theta, spec, X_in)
    l_class, upstream = _cross_entropy_sum_and_upstream(logits, y_in)
    grad, _ = backward(trace, upstream)

    l_prior = prior_penalty(theta, theta_prev, fisher)
    grad += lam_prior * 2.0 * np.asarray(fisher) * (
        np.asarray(theta, dtype=np.float64) - np.asarray(theta_prev, dtype=np.float64)
    )

    l_in = l_out = 0.0
    if lam_ood != 0.0:
        if score_params is None:
            raise ConfigError("lambda_ood > 0 requires score parameters")
        s_in, trace_in, ds_in = scores_with_dlogits(X_in, theta, spec, score_params)
        l_in = float(np.maximum(0.0, tau_prev - s_in).sum())
        active_in = (s_in < tau_prev).astype(np.float64)
        if active_in.any():
            g_in, _ = backward(trace_in, -lam_ood * active_in[:, None] * ds_in)
            grad += g_in

        X_out = np.asarray(X_out, dtype=np.float64) if X_out is not None else None
        if X_out is not None and X_out.shape[0] > 0:
            s_out, trace_out, ds_out = scores_with_dlogits(
                X_out, theta, spec, score_params
            )
            l_out = float(np.maximum(0.0, s_out - tau_prev).sum())
            active_out = (s_out > tau_prev).astype(np.float64)
            if active_out.any():
                g_out, _ = backward(trace_out, lam_ood * active_out[:, None] * ds_out)
                grad += g_out

    total = l_class + lam_prior * l_prior + lam_ood * (l_in + l_out)
    terms = ContinualLossTerms(l_class, l_prior, l_in, l_out, total)
    return terms, grad


def continual_train_epoch(
    theta,
    spec: NetworkSpec,
    score_params: ScoreParams | None,
    tau_prev: float,
    X,
    y,
    X_aux,
    *,
    lam_ood: float,
    lam_prior: float,
    theta_prev,
    fisher,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """One epoch of mini-batch SGD on the joint loss.

    Sample order is reshuffled from ``rng``; each in-distribution mini-batch
    is paired with an equal-size draw from the auxiliary OOD pool (with
    replacement when the pool is smaller than the batch).

    The cross-entropy and hinge sums partition naturally across mini-batches;
    the prior penalty is a dataset-level term, so each step carries its
    mini-batch fraction of it. Over one epoch the penalty is applied with
    exactly the weight the full objective gives it.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    X_aux = np.asarray(X_aux, dtype=np.float64) if X_aux is not None else None
    n_aux = 0 if X_aux is None else X_aux.shape[0]
    if lam_ood != 0.0 and n_aux == 0:
        raise ConfigError(
            "the auxiliary OOD set is empty; the hinge terms are undefined"
        )
    n = X.shape[0]
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        X_out = None
        if lam_ood != 0.0:
            pick = rng.choice(n_aux, size=idx.size, replace=n_aux < idx.size)
            X_out = X_aux[pick]
        _, grad = total_loss_and_grad(
            theta,
            spec,
            score_params,
            tau_prev,
            X[idx],
            y[idx],
            X_out,
            lam_ood=lam_ood,
            lam_prior=lam_prior * (idx.size / n),
            theta_prev=theta_prev,
            fisher=fisher,
        )
        theta = optimizer_step(theta, grad, lr)
    return theta


def update_threshold(scores_ood, eta: float) -> Threshold:
    """Smallest observed score tau with #{s <= tau} / N >= eta / 100.

    This is the empirical lower eta-quantile of the auxiliary OOD scores, so
    flagging s <= tau catches at least eta percent of them by construction.
    """
    s = np.asarray(scores_ood, dtype=np.float64)
    if s.size == 0:
        raise DataError("threshold calibration needs at least one OOD score")
    if not (0.0 < eta <= 100.0):
        raise ConfigError(f"eta must be in (0, 100], got {eta}")
    s = np.sort(s)
    n = s.size
    for i in range(n):
        if 100.0 * (i + 1) >= eta * n:
            return Threshold(float(s[i]), float(eta))
    return Threshold(float(s[-1]), float(eta))
