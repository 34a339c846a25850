"""Error detectors over conductance features, ROC machinery, and the
unified conductance+LCR classifier.

Detectors are binary: class 1 means the underlying prediction looks wrong.
All kinds share a contract: per-feature z-scoring frozen at training time,
and scores in [0, 1] where higher means more likely wrong. Thresholding
flags a prediction as wrong when score >= threshold.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container

DETECTOR_MAGIC = b"MFDT"
DETECTOR_KINDS = ("mlp_2x200", "mlp_2x10", "lda", "qda")
QDA_COV_RIDGE = 1e-6


@dataclass
class DetectorModel:
    kind: str
    feature_mean: np.ndarray
    feature_std: np.ndarray
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# ROC / AUROC
# ---------------------------------------------------------------------------

@dataclass
class RocCurve:
    """Recall pairs swept over strictly decreasing thresholds.

    Point i is the operating point "flag wrong when score >= thresholds[i]".
    The first threshold is +inf (nothing flagged), the last is the minimum
    score (everything flagged), so the curve spans (0,0) to (1,1) in
    (1 - recall_correct, recall_wrong) space. auroc is the trapezoidal area
    under that curve.
    """

    thresholds: np.ndarray
    recall_correct: np.ndarray
    recall_wrong: np.ndarray
    auroc: float

    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds, self.recall_correct, self.recall_wrong))


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be "
                         f"matching vectors")
    if labels.all() or not labels.any():
        raise ValueError("both classes must be present")
    return scores, labels


def roc_curve(scores, labels) -> RocCurve:
    """One point per distinct score threshold, highest first."""
    scores, labels = _check_binary(scores, labels)
    n_wrong = int(labels.sum())
    n_correct = len(labels) - n_wrong
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    y_sorted = labels[order]
    distinct = np.flatnonzero(np.diff(s_sorted)) if len(s_sorted) > 1 else np.array([], dtype=int)
    group_ends = np.concatenate([distinct, [len(s_sorted) - 1]])
    cum_wrong = np.cumsum(y_sorted)
    cum_correct = np.cumsum(~y_sorted)
    thresholds = np.concatenate([[np.inf], s_sorted[group_ends]])
    recall_wrong = np.concatenate([[0.0], cum_wrong[group_ends] / n_wrong])
    recall_correct = np.concatenate([[1.0], 1.0 - cum_correct[group_ends] / n_correct])
    fpr = 1.0 - recall_correct
    auroc = float(np.trapezoid(recall_wrong, fpr))
    return RocCurve(thresholds, recall_correct, recall_wrong, auroc)


def auroc_pair_oracle(scores, labels) -> float:
    """Pairwise-comparison AUROC: the fraction of (wrong, correct) pairs the
    scores rank correctly, ties counting one half."""
    scores, labels = _check_binary(scores, labels)
    wrong = scores[labels][:, None]
    correct = scores[~labels][None, :]
    greater = (wrong > correct).sum()
    equal = (wrong == correct).sum()
    return float((greater + 0.5 * equal) / (wrong.size * correct.size))


@dataclass(frozen=True)
class ThresholdDecision:
    threshold: float
    policy: str
    recall_correct: float
    recall_wrong: float
    target_met: bool = True


def select_threshold(roc: RocCurve, policy: str = "equal_recall",
                     target_recall: float = 0.98) -> ThresholdDecision:
    """Pick an operating point from a validation ROC curve.

    equal_recall minimizes |recall_correct - recall_wrong|. favor_correct
    keeps recall_correct >= target_recall and maximizes recall_wrong under
    that constraint (nearest achievable, flagged, when the target is
    unattainable); favor_wrong is symmetric.
    """
    rc, rw, th = roc.recall_correct, roc.recall_wrong, roc.thresholds
    if len(th) == 0:
        raise ValueError("empty ROC curve")
    if policy == "equal_recall":
        i = int(np.argmin(np.abs(rc - rw)))
        return ThresholdDecision(float(th[i]), policy, float(rc[i]), float(rw[i]))
    if policy == "favor_correct":
        ok = np.flatnonzero(rc >= target_recall)
        if len(ok):
            i = ok[int(np.argmax(rw[ok]))]
            return ThresholdDecision(float(th[i]), policy, float(rc[i]), float(rw[i]))
        i = int(np.argmin(np.abs(rc - target_recall)))
        return ThresholdDecision(float(th[i]), policy, float(rc[i]), float(rw[i]),
                                 target_met=False)
    if policy == "favor_wrong":
        ok = np.flatnonzero(rw >= target_recall)
        if len(ok):
            i = ok[int(np.argmax(rc[ok]))]
            return ThresholdDecision(float(th[i]), policy, float(rc[i]), float(rw[i]))
        i = int(np.argmin(np.abs(rw - target_recall)))
        return ThresholdDecision(float(th[i]), policy, float(rc[i]), float(rw[i]),
                                 target_met=False)
    raise ValueError(f"unknown threshold policy {policy!r}")


@dataclass(frozen=True)
class ConfusionReport:
    wrong_caught: int
    wrong_missed: int
    false_alarms: int
    correct_passed: int
    recall_wrong: float
    recall_correct: float
    threshold: float

    @property
    def total(self) -> int:
        return self.wrong_caught + self.wrong_missed + self.false_alarms + self.correct_passed


def confusion_report(scores, labels, threshold: float) -> ConfusionReport:
    """Counts of intercepted/missed wrong predictions and alarmed/passed
    correct ones at a fixed threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    flagged = scores >= threshold
    wrong_caught = int((labels & flagged).sum())
    wrong_missed = int((labels & ~flagged).sum())
    false_alarms = int((~labels & flagged).sum())
    correct_passed = int((~labels & ~flagged).sum())
    n_wrong = wrong_caught + wrong_missed
    n_correct = false_alarms + correct_passed
    return ConfusionReport(
        wrong_caught, wrong_missed, false_alarms, correct_passed,
        recall_wrong=wrong_caught / n_wrong if n_wrong else float("nan"),
        recall_correct=correct_passed / n_correct if n_correct else float("nan"),
        threshold=float(threshold),
    )


# ---------------------------------------------------------------------------
# feature scaling
# ---------------------------------------------------------------------------

def _fit_scaling(x: np.ndarray):
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return mean, std


def _validate_features(det: DetectorModel, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.ndim != 2 or x.shape[1] != det.feature_mean.shape[0]:
        raise ValueError(
            f"feature dimension {x.shape[-1]} does not match the detector's "
            f"{det.feature_mean.shape[0]}"
        )
    return (x - det.feature_mean) / det.feature_std, single


# ---------------------------------------------------------------------------
# MLP detector
# ---------------------------------------------------------------------------

def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _mlp_scores(params: dict[str, np.ndarray], z: np.ndarray) -> np.ndarray:
    h1 = np.maximum(z @ params["w1"] + params["b1"], 0.0)
    h2 = np.maximum(h1 @ params["w2"] + params["b2"], 0.0)
    return _sigmoid(h2 @ params["w3"] + params["b3"])[:, 0]


def _init_mlp(rng, dim: int, hidden: int) -> dict[str, np.ndarray]:
    def u(fan_in, shape):
        return rng.uniform(-1.0 / math.sqrt(fan_in), 1.0 / math.sqrt(fan_in), shape)

    return {
        "w1": u(dim, (dim, hidden)), "b1": np.zeros(hidden),
        "w2": u(hidden, (hidden, hidden)), "b2": np.zeros(hidden),
        "w3": u(hidden, (hidden, 1)), "b3": np.zeros(1),
    }


def _stratified_holdout(labels: np.ndarray, fraction: float, rng):
    """Indices (train, holdout) with both classes represented in the holdout
    whenever a class has at least two members."""
    holdout = []
    for cls in (False, True):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(len(members))]
        take = min(max(1, round(fraction * len(members))), len(members) - 1)
        holdout.extend(members[:take])
    holdout = np.sort(np.array(holdout))
    mask = np.ones(len(labels), dtype=bool)
    mask[holdout] = False
    return np.flatnonzero(mask), holdout


def _train_mlp(features, labels, seed, hidden, epochs, learning_rate, momentum,
               batch_size, patience):
    """Class-weighted logistic MLP trained by SGD, early-stopped on the
    AUROC of an internal stratified holdout."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("features must be [n, d] aligned with labels")
    counts = np.array([(~y).sum(), y.sum()])
    if counts.min() < 2:
        raise ValueError(
            f"need at least 2 samples of each class, got {counts[0]} correct "
            f"and {counts[1]} wrong"
        )
    mean, std = _fit_scaling(x)
    z = (x - mean) / std
    rng = np.random.Generator(np.random.PCG64(seed))
    tr, ho = _stratified_holdout(y, 0.15, rng)
    weights = {False: len(y) / (2.0 * counts[0]), True: len(y) / (2.0 * counts[1])}
    w_sample = np.where(y, weights[True], weights[False])
    params = _init_mlp(rng, x.shape[1], hidden)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    best = {k: v.copy() for k, v in params.items()}
    best_auroc = -1.0
    best_epoch = 0
    epochs_run = 0
    for epoch in range(epochs):
        order = rng.permutation(len(tr))
        for lo in range(0, len(tr), batch_size):
            idx = tr[order[lo : lo + batch_size]]
            xb, yb, wb = z[idx], y[idx], w_sample[idx]
            h1_pre = xb @ params["w1"] + params["b1"]
            h1 = np.maximum(h1_pre, 0.0)
            h2_pre = h1 @ params["w2"] + params["b2"]
            h2 = np.maximum(h2_pre, 0.0)
            p = _sigmoid(h2 @ params["w3"] + params["b3"])[:, 0]
            dlogit = (wb * (p - yb) / len(yb))[:, None]
            grads = {
                "w3": h2.T @ dlogit, "b3": dlogit.sum(axis=0),
            }
            dh2 = (dlogit @ params["w3"].T) * (h2_pre > 0)
            grads["w2"] = h1.T @ dh2
            grads["b2"] = dh2.sum(axis=0)
            dh1 = (dh2 @ params["w2"].T) * (h1_pre > 0)
            grads["w1"] = xb.T @ dh1
            grads["b1"] = dh1.sum(axis=0)
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            clip = min(1.0, 5.0 / norm) if norm > 0 else 1.0
            for k in params:
                velocity[k] = momentum * velocity[k] - learning_rate * clip * grads[k]
                params[k] = params[k] + velocity[k]
        epochs_run = epoch + 1
        val_auroc = roc_curve(_mlp_scores(params, z[ho]), y[ho]).auroc
        if val_auroc > best_auroc:
            best_auroc = val_auroc
            best = {k: v.copy() for k, v in params.items()}
            best_epoch = epoch
        elif epoch - best_epoch >= patience:
            break
    meta = {"holdout_auroc": best_auroc, "epochs_run": epochs_run,
            "best_epoch": best_epoch, "seed": seed}
    return mean, std, best, meta


def train_error_detector(cond_matrix, labels, seed: int = 0, *, hidden: int = 200,
                         epochs: int = 200, learning_rate: float = 0.05,
                         momentum: float = 0.9, batch_size: int = 64,
                         patience: int = 10) -> DetectorModel:
    """Train the conductance error detector (two hidden layers, 200 units)."""
    mean, std, params, meta = _train_mlp(
        cond_matrix, labels, seed, hidden, epochs, learning_rate, momentum,
        batch_size, patience,
    )
    kind = "mlp_2x200" if hidden == 200 else f"mlp_2x{hidden}"
    return DetectorModel(kind, mean, std, params, meta)


# ---------------------------------------------------------------------------
# LDA / QDA
# ---------------------------------------------------------------------------

def _fit_gaussians(z, y, pooled: bool):
    mu0 = z[~y].mean(axis=0)
    mu1 = z[y].mean(axis=0)
    d = z.shape[1]
    if pooled:
        centered = z - np.where(y[:, None], mu1, mu0)
        cov = centered.T @ centered / len(z) + QDA_COV_RIDGE * np.eye(d)
        covs = (cov, cov)
    else:
        c0 = z[~y] - mu0
        c1 = z[y] - mu1
        covs = (
            c0.T @ c0 / len(c0) + QDA_COV_RIDGE * np.eye(d),
            c1.T @ c1 / len(c1) + QDA_COV_RIDGE * np.eye(d),
        )
    priors = np.array([(~y).mean(), y.mean()])
    return (mu0, mu1), covs, priors


def _gaussian_log_posterior(z, means, covs, priors):
    logps = []
    for cls in (0, 1):
        diff = z - means[cls]
        cov = covs[cls]
        sign, logdet = np.linalg.slogdet(cov)
        sol = np.linalg.solve(cov, diff.T).T
        maha = (diff * sol).sum(axis=1)
        logps.append(math.log(priors[cls]) - 0.5 * (logdet + maha))
    return np.stack(logps, axis=1)


def _fit_discriminant(features, labels, kind: str) -> DetectorModel:
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if min((~y).sum(), y.sum()) < 2:
        raise ValueError("need at least 2 samples of each class")
    mean, std = _fit_scaling(x)
    z = (x - mean) / std
    means, covs, priors = _fit_gaussians(z, y, pooled=(kind == "lda"))
    params = {
        "mu0": means[0], "mu1": means[1],
        "cov0": covs[0], "cov1": covs[1],
        "priors": priors,
    }
    return DetectorModel(kind, mean, std, params, {})


def score(det: DetectorModel, features) -> float | np.ndarray:
    """Probability-like score in [0,1]; higher means more likely wrong."""
    z, single = _validate_features(det, features)
    if det.kind.startswith("mlp"):
        s = _mlp_scores(det.params, z)
    elif det.kind in ("lda", "qda"):
        logp = _gaussian_log_posterior(
            z,
            (det.params["mu0"], det.params["mu1"]),
            (det.params["cov0"], det.params["cov1"]),
            det.params["priors"],
        )
        shifted = logp - logp.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        s = e[:, 1] / e.sum(axis=1)
    else:
        raise ValueError(f"unknown detector kind {det.kind!r}")
    return float(s[0]) if single else s


def train_unified(cond_scores, lcr_values, labels, kind: str = "mlp_2x10",
                  seed: int = 0, **mlp_kwargs) -> DetectorModel:
    """Second-stage classifier over (conductance detector score, LCR) pairs."""
    cond_scores = np.asarray(cond_scores, dtype=np.float64)
    lcr_values = np.asarray(lcr_values, dtype=np.float64)
    if cond_scores.shape != lcr_values.shape or cond_scores.ndim != 1:
        raise ValueError("cond_scores and lcr_values must be matching vectors")
    features = np.column_stack([cond_scores, lcr_values])
    if kind == "mlp_2x10":
        mlp_kwargs.setdefault("hidden", 10)
        mlp_kwargs.setdefault("epochs", 200)
        mlp_kwargs.setdefault("learning_rate", 0.05)
        mlp_kwargs.setdefault("momentum", 0.9)
        mlp_kwargs.setdefault("batch_size", 64)
        mlp_kwargs.setdefault("patience", 10)
        mean, std, params, meta = _train_mlp(features, labels, seed, **mlp_kwargs)
        return DetectorModel(kind, mean, std, params, meta)
    if kind in ("lda", "qda"):
        return _fit_discriminant(features, labels, kind)
    raise ValueError(f"unified classifier kind must be one of mlp_2x10/lda/qda, got {kind!r}")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_detector(det: DetectorModel, path) -> None:
    header = {"kind": det.kind, "meta": det.meta, "params": sorted(det.params)}
    arrays = {"feature_mean": det.feature_mean, "feature_std": det.feature_std}
    for name, arr in det.params.items():
        arrays[f"param.{name}"] = arr
    write_container(path, DETECTOR_MAGIC, header, arrays)


def load_detector(path) -> DetectorModel:
    header, arrays = read_container(path, DETECTOR_MAGIC)
    params = {name: arrays[f"param.{name}"] for name in header["params"]}
    return DetectorModel(header["kind"], arrays["feature_mean"],
                         arrays["feature_std"], params, header["meta"])


def write_roc_csv(path, roc: RocCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "recall_correct", "recall_wrong"])
        for t, rc, rw in roc.points():
            w.writerow([repr(float(t)), repr(float(rc)), repr(float(rw))])


def read_roc_csv(path) -> RocCurve:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["threshold", "recall_correct", "recall_wrong"]:
        raise ValueError(f"{path}: not a ROC table")
    vals = np.array([[float(c) for c in row] for row in rows[1:]])
    fpr = 1.0 - vals[:, 1]
    return RocCurve(vals[:, 0], vals[:, 1], vals[:, 2],
                    float(np.trapezoid(vals[:, 2], fpr)))
