"""Batch loop, sample inspection against a labeling oracle, and model update.

The driver is :func:`run_batches`: train a baseline on the fully labeled
batch 0, then for every later batch send detector-flagged samples to the
inspection oracle, fold the newly labeled data (plus the replay buffer) into
continual training, refresh the detector parameters and threshold, and retain
a capped per-class sample for replay.

All randomness derives from the run seed through numpy SeedSequence streams
keyed by integer tags, so identical configurations replay bit-identically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, OracleError
from .net import (
    NetworkSpec,
    backward,
    embed_flat,
    expand_output_head,
    forward,
    softmax,
)
from .reporting import MetricsLog, confusion_matrix
from .scores import (
    MaxSoftmaxParams,
    ScoreParams,
    fit_mahalanobis,
    fit_odin_grid,
    score_samples,
)
from .trainer import Threshold, continual_train_epoch, fisher_diagonal, update_threshold


@dataclass(frozen=True)
class Sample:
    """One feature vector with optional label and batch provenance."""

    features: np.ndarray
    label: int | None
    batch_id: int
    sample_id: int


def features_matrix(samples) -> np.ndarray:
    return np.stack([s.features for s in samples])


def labels_vector(samples) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=np.int64)


@dataclass
class ModelState:
    """Classifier parameters plus everything the detector needs."""

    theta: np.ndarray
    spec: NetworkSpec
    theta_prev: np.ndarray
    fisher: np.ndarray
    score_params: ScoreParams | None
    threshold: Threshold | None
    classes: tuple[int, ...]

    @property
    def class_index_map(self) -> dict[int, int]:
        return {c: i for i, c in enumerate(self.classes)}


class InspectionOracle:
    """Ground-truth labeling service; each distinct lookup costs one unit.

    ``ground_truth`` reads the hidden map without touching the cost counter;
    it exists only so the simulation can measure misdetections and must never
    feed training.
    """

    def __init__(self, truth: dict[int, int]):
        self._truth = dict(truth)
        self._seen: set[int] = set()

    def label(self, sample_id: int) -> int:
        if sample_id not in self._truth:
            raise OracleError(f"no label recorded for sample {sample_id}")
        self._seen.add(sample_id)
        return self._truth[sample_id]

    def ground_truth(self, sample_id: int) -> int:
        if sample_id not in self._truth:
            raise OracleError(f"no label recorded for sample {sample_id}")
        return self._truth[sample_id]

    @property
    def cost(self) -> int:
        return len(self._seen)


@dataclass
class MemoryBuffer:
    """Capped per-class replay storage."""

    per_class: dict[int, list[Sample]]
    cap: int

    def samples(self) -> list[Sample]:
        out: list[Sample] = []
        for c in sorted(self.per_class):
            out.extend(self.per_class[c])
        return out


@dataclass(frozen=True)
class InspectionStats:
    flagged: int
    flagged_new: int
    flagged_old: int
    missed_new: int
    cost: int


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(key))))


def _sub_seed(root: int, *tags: int) -> int:
    ss = np.random.SeedSequence([int(root), *[int(t) for t in tags]])
    return int(ss.generate_state(1, np.uint64)[0])


def classify_batch(state: ModelState, X) -> np.ndarray:
    logits, _ = forward(state.theta, state.spec, X)
    idx = np.atleast_2d(logits).argmax(axis=1)
    return np.asarray(state.classes, dtype=np.int64)[idx]


def classify(state: ModelState, x) -> int:
    """Argmax class, mapped back to class ids; ties break to the lowest index."""
    return int(classify_batch(state, np.atleast_2d(np.asarray(x)))[0])


def detect_flags(state: ModelState, X) -> np.ndarray:
    scores = score_samples(X, state.theta, state.spec, state.score_params)
    return np.atleast_1d(scores) <= state.threshold.tau


def detect_new(state: ModelState, x) -> int:
    """1 means "send to inspection": score at or below the threshold."""
    return int(detect_flags(state, np.atleast_2d(np.asarray(x)))[0])


def sample_inspection(
    state: ModelState, batch_samples, oracle: InspectionOracle, buffer: MemoryBuffer
) -> tuple[list[Sample], tuple[int, ...], InspectionStats]:
    """Label every detector-flagged sample and merge with the replay buffer.

    Returns the training set for this batch, the class set grown by newly
    seen labels, and the inspection statistics. Unflagged samples are never
    sent to the oracle; misdetections are counted through the simulation-only
    ground-truth channel.
    """
    if not batch_samples:
        raise DataError("sample_inspection needs a non-empty batch")
    known = set(state.classes)
    flags = detect_flags(state, features_matrix(batch_samples))
    cost_before = oracle.cost
    labeled: list[Sample] = []
    new_classes: list[int] = []
    flagged_new = flagged_old = missed_new = 0
    for sample, flag in zip(batch_samples, flags):
        if flag:
            label = oracle.label(sample.sample_id)
            labeled.append(Sample(sample.features, label, sample.batch_id, sample.sample_id))
            if label in known:
                flagged_old += 1
            else:
                flagged_new += 1
                if label not in new_classes:
                    new_classes.append(label)
        elif oracle.ground_truth(sample.sample_id) not in known:
            missed_new += 1
    stats = InspectionStats(
        flagged=int(flags.sum()),
        flagged_new=flagged_new,
        flagged_old=flagged_old,
        missed_new=missed_new,
        cost=oracle.cost - cost_before,
    )
    classes = state.classes + tuple(sorted(new_classes))
    return labeled + buffer.samples(), classes, stats


def retain_old(d_t, m: int, seed: int) -> MemoryBuffer:
    """Keep a uniform seeded sample of at most m items per class."""
    if m < 0:
        raise ConfigError("the replay cap must be >= 0")
    per_class: dict[int, list[Sample]] = {}
    if m > 0:
        grouped: dict[int, list[Sample]] = {}
        for s in d_t:
            grouped.setdefault(s.label, []).append(s)
        for c in sorted(grouped):
            group = grouped[c]
            if len(group) <= m:
                per_class[c] = list(group)
            else:
                rng = _rng(int(seed), int(c))
                idx = np.sort(rng.choice(len(group), size=m, replace=False))
                per_class[c] = [group[i] for i in idx]
    return MemoryBuffer(per_class, m)


def select_aux_ood(dataset, held_out) -> tuple[list[Sample], list[Sample]]:
    """Partition out the held-out class(es) as the auxiliary OOD set.

    Accepts a single class id or a list. OOD samples keep their identity but
    lose their labels, since they only ever feed the score side.
    """
    held = {int(held_out)} if isinstance(held_out, (int, np.integer)) else {
        int(c) for c in held_out
    }
    present = {s.label for s in dataset}
    missing = held - present
    if missing:
        raise ConfigError(f"held-out class(es) {sorted(missing)} not in the dataset")
    in_data = [s for s in dataset if s.label not in held]
    aux = [
        Sample(s.features, None, s.batch_id, s.sample_id)
        for s in dataset
        if s.label in held
    ]
    return in_data, aux


def generate_adversarial_ood(
    X, y_idx, theta, spec: NetworkSpec, *, epsilon: float, steps: int,
    step_size: float, seed: int | None = None,
) -> np.ndarray:
    """Projected gradient ascent on the cross-entropy loss, per input row.

    Each iterate moves by step_size * sign(grad_x CE) and is projected back
    into the infinity-norm epsilon-ball of the original input. steps=1 with
    step_size=epsilon is exactly the fast gradient sign method. The attack is
    deterministic; ``seed`` is reserved for randomized restarts.
    """
    if epsilon < 0:
        raise ConfigError("epsilon must be >= 0")
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    X0 = np.asarray(X, dtype=np.float64)
    y_idx = np.asarray(y_idx, dtype=np.int64)
    adv = X0.copy()
    rows = np.arange(X0.shape[0])
    for _ in range(steps):
        logits, trace = forward(theta, spec, adv)
        G = softmax(np.atleast_2d(logits))
        G[rows, y_idx] -= 1.0
        _, grad_x = backward(trace, G)
        adv = adv + step_size * np.sign(grad_x)
        adv = np.clip(adv, X0 - epsilon, X0 + epsilon)
    return adv


def merge_undersampled(
    d_t, aux_X: np.ndarray, n_min: int, new_classes
) -> tuple[list[Sample], np.ndarray, tuple[int, ...]]:
    """Move new classes with fewer than n_min labeled samples into the OOD set.

    Demoted classes drop out of this batch's training class set; their samples
    join the auxiliary OOD pool so the detector keeps hunting for them.
    """
    if n_min < 0:
        raise ConfigError("n_min must be >= 0")
    counts: dict[int, int] = {}
    for s in d_t:
        counts[s.label] = counts.get(s.label, 0) + 1
    demoted = {c for c in new_classes if counts.get(c, 0) < n_min}
    kept = tuple(c for c in new_classes if c not in demoted)
    if not demoted:
        return list(d_t), aux_X, kept
    kept_samples = [s for s in d_t if s.label not in demoted]
    moved = [s.features for s in d_t if s.label in demoted]
    aux_out = np.vstack([aux_X, np.stack(moved)]) if moved else aux_X
    return kept_samples, aux_out, kept


def _group_label(group) -> str:
    return "-".join(str(c) for c in group)


def _group_accuracies(state: ModelState, groups, test_X, test_y) -> dict[str, float]:
    known = set(state.classes)
    preds = classify_batch(state, test_X)
    accs: dict[str, float] = {}
    for group in groups:
        if not set(group) <= known:
            continue
        mask = np.isin(test_y, group)
        if mask.any():
            accs[_group_label(group)] = float((preds[mask] == test_y[mask]).mean())
    return accs


def _fit_score_params(cfg, theta, spec, X_t, y_idx, classes, aux_X) -> ScoreParams:
    kind = cfg.score.kind
    if kind == "mahalanobis":
        logits, _ = forward(theta, spec, X_t)
        grouped = {}
        for c in classes:
            rows = np.atleast_2d(logits)[y_idx == classes.index(c)]
            if rows.shape[0]:
                grouped[c] = rows
        return fit_mahalanobis(grouped, cfg.score.ridge)
    if kind == "odin":
        return fit_odin_grid(
            theta, spec, X_t, aux_X,
            temperatures=cfg.score.temperature_grid,
            epsilons=cfg.score.epsilon_grid,
            eta=cfg.continual.eta,
        )
    if kind == "max_softmax":
        return MaxSoftmaxParams()
    raise ConfigError(f"unknown score kind {kind!r}")


def run_batches(
    cfg, stream, oracle: InspectionOracle, test_samples, aux_samples=None,
    progress=None,
) -> tuple[ModelState, MetricsLog]:
    """Execute the full continual anomaly-detection loop over a batch stream.

    ``stream[0]`` must be fully labeled (it trains the baseline). For the
    leave-out OOD source ``aux_samples`` supplies the auxiliary pool; the
    adversarial source generates its pool per batch with projected gradient
    ascent. ``test_samples`` drive the per-epoch accuracy records and the
    final confusion matrix; they never influence training.
    """
    if not stream:
        raise ConfigError("the batch stream is empty")
    batch0 = stream[0]
    if any(s.label is None for s in batch0):
        raise ConfigError("batch 0 must be fully labeled")

    root = int(cfg.train.seed)
    classes = tuple(sorted({s.label for s in batch0}))
    feat_dim = batch0[0].features.size
    spec = NetworkSpec(
        (feat_dim, *cfg.model.hidden_widths, len(classes)),
        cfg.model.activation,
        init_seed=_sub_seed(root, 1),
    )
    theta = spec.init_params()
    theta_prev = theta.copy()
    fisher = np.zeros(spec.param_count)
    score_params: ScoreParams | None = None
    threshold: Threshold | None = None
    buffer = MemoryBuffer({}, cfg.continual.replay_cap)

    adversarial = cfg.ood_source.kind == "adversarial"
    if not adversarial:
        if not aux_samples:
            raise ConfigError("the leave-out OOD source needs auxiliary samples")
        leaveout_X = features_matrix(aux_samples)

    log = MetricsLog(config_fingerprint=cfg.fingerprint())
    groups = [tuple(b) for b in cfg.schedule.batches]
    test_X = features_matrix(test_samples)
    test_y = labels_vector(test_samples)

    d_t = list(batch0)
    for t in range(len(stream)):
        stats = None
        if t == 0:
            batch_aux = None if adversarial else leaveout_X
        else:
            state = ModelState(
                theta, spec, theta_prev, fisher, score_params, threshold, classes
            )
            d_t, union_classes, stats = sample_inspection(
                state, stream[t], oracle, buffer
            )
            new_classes = [c for c in union_classes if c not in classes]
            base_aux = (
                np.empty((0, feat_dim)) if adversarial else leaveout_X
            )
            d_t, base_aux, kept_new = merge_undersampled(
                d_t, base_aux, cfg.continual.n_min, new_classes
            )

            grown = classes + tuple(sorted(kept_new))
            if len(grown) > len(classes):
                theta, new_spec = expand_output_head(
                    theta, spec, len(grown), _sub_seed(root, 2, t)
                )
                theta_prev = embed_flat(theta_prev, spec, new_spec, 0.0)
                fisher = embed_flat(fisher, spec, new_spec, 0.0)
                spec = new_spec
                classes = grown

            if adversarial:
                # Attack the pre-training model for this batch (carried-over
                # weights plus the freshly initialized head rows), so every
                # label in D_t has a head index.
                idx = {c: i for i, c in enumerate(classes)}
                adv = generate_adversarial_ood(
                    features_matrix(d_t),
                    np.array([idx[s.label] for s in d_t]),
                    theta,
                    spec,
                    epsilon=cfg.ood_source.epsilon,
                    steps=cfg.ood_source.steps,
                    step_size=cfg.ood_source.step_size,
                )
                base_aux = np.vstack([adv, base_aux]) if base_aux.size else adv
            batch_aux = base_aux

        idx_map = {c: i for i, c in enumerate(classes)}
        X_t = features_matrix(d_t)
        y_t = np.array([idx_map[s.label] for s in d_t], dtype=np.int64)

        lam_ood = cfg.continual.lambda_ood if t > 0 else 0.0
        lam_prior = cfg.continual.lambda_prior if t > 0 else 0.0
        tau_prev = threshold.tau if threshold is not None else 0.0
        train_params = score_params
        train_tau = tau_prev

        for epoch in range(cfg.train.epochs):
            if t > 0 and cfg.score.kind == "mahalanobis" and lam_ood != 0.0:
                # Joint argmin over (theta, phi): the Mahalanobis statistics
                # are theta-dependent, so block-coordinate descent refits them
                # as the logits move. The hinge threshold is calibrated once
                # per batch against the first refit; recalibrating it every
                # epoch would leave a fixed quantile violating forever. The
                # published detector threshold is still set after training.
                train_params = _fit_score_params(
                    cfg, theta, spec, X_t, y_t, classes, batch_aux
                )
                if epoch == 0:
                    pre_scores = score_samples(batch_aux, theta, spec, train_params)
                    train_tau = update_threshold(pre_scores, cfg.continual.eta).tau
            theta = continual_train_epoch(
                theta, spec, train_params, train_tau, X_t, y_t,
                batch_aux if t > 0 else None,
                lam_ood=lam_ood, lam_prior=lam_prior,
                theta_prev=theta_prev, fisher=fisher,
                lr=cfg.train.lr, batch_size=cfg.train.batch_size,
                rng=_rng(root, 3, t, epoch),
            )
            eval_state = ModelState(
                theta, spec, theta_prev, fisher, score_params, threshold, classes
            )
            for label, acc in _group_accuracies(
                eval_state, groups, test_X, test_y
            ).items():
                log.record_epoch(t, epoch + 1, label, acc)
            if progress is not None:
                progress(t, epoch + 1, cfg.train.epochs)

        if adversarial and t == 0:
            # The baseline has no trained model to attack until now.
            adv = generate_adversarial_ood(
                X_t, y_t, theta, spec,
                epsilon=cfg.ood_source.epsilon,
                steps=cfg.ood_source.steps,
                step_size=cfg.ood_source.step_size,
            )
            batch_aux = adv

        score_params = _fit_score_params(cfg, theta, spec, X_t, y_t, classes, batch_aux)
        aux_scores = score_samples(batch_aux, theta, spec, score_params)
        threshold = update_threshold(aux_scores, cfg.continual.eta)
        fisher = fisher_diagonal(theta, spec, X_t, y_t)
        theta_prev = theta.copy()
        buffer = retain_old(d_t, cfg.continual.replay_cap, _sub_seed(root, 4, t))

        if stats is not None:
            log.record_detection(
                t,
                flagged_new=stats.flagged_new,
                total_new=stats.flagged_new + stats.missed_new,
                flagged_old=stats.flagged_old,
                cost=stats.cost,
            )

    state = ModelState(theta, spec, theta_prev, fisher, score_params, threshold, classes)
    final_mask = np.isin(test_y, classes)
    if final_mask.any():
        preds = classify_batch(state, test_X[final_mask])
        log.set_confusion(
            confusion_matrix(preds, test_y[final_mask], classes), classes
        )
    log.inspection_cost = oracle.cost
    return state, log
