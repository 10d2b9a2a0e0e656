"""Scores and instance-level estimates for target models from anchor evaluations."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .anchors import AnchorSelector, AnchorSet
from .corr import DEFAULT_EPS, logit
from .tensor_io import ConfidenceMatrix, format_float

PROB_FLOOR = 1e-6


class DegenerateAnchorWarning(UserWarning):
    """An anchor column has no variance across source models."""


def _check_probs(p, name="confidences"):
    p = np.asarray(p, dtype=np.float64)
    if p.size and (not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0):
        raise ValueError(f"{name} must lie in [0, 1]")
    return p


def apw_score(anchors: AnchorSet, target_anchor_confidences):
    """Cluster-size-weighted mean of a target model's anchor confidences.

    ``target_anchor_confidences`` has length ``k`` (one model) or shape
    ``(n_models, k)``; the result is a float or an array accordingly.
    """
    p = _check_probs(target_anchor_confidences)
    if p.shape[-1] != anchors.k:
        raise ValueError(f"expected {anchors.k} anchor confidences, got {p.shape[-1]}")
    w = anchors.weights.astype(np.float64)
    score = p @ w / w.sum()
    return float(score) if p.ndim == 1 else score


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True)
class PredictorModel:
    """Per-(anchor, test point) linear trends fitted on source models.

    ``slopes`` and ``biases`` have shape ``(k, len(test_indices))``;
    ``nearest`` maps every example to the position of its anchor.
    """

    anchors: AnchorSet
    slopes: np.ndarray
    biases: np.ndarray
    test_indices: np.ndarray
    nearest: np.ndarray
    space: str = "probability"
    eps: float = DEFAULT_EPS
    degenerate_anchors: tuple = field(default=())

    @property
    def n_examples(self) -> int:
        return self.nearest.size

    def save(self, path) -> None:
        """Write ``<path>.json`` (anchors and metadata) and ``<path>.npz`` (tables)."""
        path = Path(path)
        meta = {
            "anchors": self.anchors.to_dict(),
            "example_ids": list(self.anchors.example_ids),
            "space": self.space,
            "eps": self.eps,
            "degenerate_anchors": list(self.degenerate_anchors),
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")
        with open(path.with_suffix(".npz"), "wb") as fh:
            np.savez(
                fh, slopes=self.slopes, biases=self.biases,
                test_indices=self.test_indices, nearest=self.nearest,
            )

    @classmethod
    def load(cls, path) -> "PredictorModel":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        ids = meta["example_ids"] or [str(i) for i in range(len(meta["anchors"]["assignment"]))]
        anchors = AnchorSet.from_dict(meta["anchors"], ids)
        with np.load(path.with_suffix(".npz")) as z:
            return cls(
                anchors, z["slopes"], z["biases"], z["test_indices"], z["nearest"],
                meta["space"], meta["eps"], tuple(meta["degenerate_anchors"]),
            )


def fit_predictor(source_conf, anchors: AnchorSet, space="probability", eps=DEFAULT_EPS):
    """Fit an ordinary least-squares trend from every anchor to every test point.

    Parameters
    ----------
    source_conf : ConfidenceMatrix or array of shape (n_models, n_examples)
        Source-model confidences (correct class, or one class slice).
    anchors : AnchorSet
    space : {"probability", "logit"}
        Scale on which the trends are fitted.

    Anchors whose column is constant across source models get slope 0 and
    the test column mean as bias, with a :class:`DegenerateAnchorWarning`.
    """
    values = source_conf.values if isinstance(source_conf, ConfidenceMatrix) else source_conf
    values = _check_probs(values, "source confidences")
    if values.ndim != 2 or values.shape[0] < 2:
        raise ValueError("need an (n_models, n_examples) matrix with at least 2 models")
    if values.shape[1] != anchors.n_examples:
        raise ValueError(
            f"source matrix has {values.shape[1]} examples, anchors cover {anchors.n_examples}"
        )
    if space == "logit":
        values = logit(values, eps)
    elif space != "probability":
        raise ValueError(f"unknown regression space {space!r}")

    medoids = np.array(anchors.medoids)
    is_anchor = np.zeros(values.shape[1], dtype=bool)
    is_anchor[medoids] = True
    test = np.flatnonzero(~is_anchor)

    x = values[:, medoids]
    t = values[:, test]
    xc = x - x.mean(axis=0)
    tc = t - t.mean(axis=0)
    sxx = np.einsum("ij,ij->j", xc, xc)
    constant = np.ptp(x, axis=0) == 0.0
    sxx_safe = np.where(constant, 1.0, sxx)
    slopes = (xc.T @ tc) / sxx_safe[:, None]
    slopes[constant] = 0.0
    biases = t.mean(axis=0)[None, :] - slopes * x.mean(axis=0)[:, None]
    degenerate = tuple(int(m) for m in medoids[constant])
    if degenerate:
        warnings.warn(
            f"anchors {list(degenerate)} are constant across source models; "
            "their trends fall back to the test-point mean",
            DegenerateAnchorWarning,
            stacklevel=2,
        )
    return PredictorModel(
        anchors, slopes, biases, test, np.asarray(anchors.assignment),
        space, eps, degenerate,
    )


@dataclass(frozen=True)
class EstimateVector:
    """Estimated confidences for all examples; anchors hold measured values."""

    values: np.ndarray
    anchor_mask: np.ndarray
    example_ids: tuple = ()

    def to_csv(self, path) -> None:
        ids = self.example_ids or tuple(str(i) for i in range(self.values.size))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["example_id", "estimate", "is_anchor"])
            for eid, v, a in zip(ids, self.values, self.anchor_mask):
                w.writerow([eid, format_float(v), int(a)])


def predict_matrix(pm: PredictorModel, anchor_conf, clip=True) -> np.ndarray:
    """Estimates for many target models at once.

    ``anchor_conf`` has shape ``(n_models, k)`` in anchor list order; the
    result has shape ``(n_models, n_examples)``.
    """
    p = _check_probs(np.atleast_2d(anchor_conf), "anchor confidences")
    k = pm.anchors.k
    if p.shape[1] != k:
        raise ValueError(f"expected {k} anchor confidences, got {p.shape[1]}")
    out = np.empty((p.shape[0], pm.n_examples))
    medoids = np.array(pm.anchors.medoids)
    out[:, medoids] = p
    owner = pm.nearest[pm.test_indices]
    cols = np.arange(pm.test_indices.size)
    slope = pm.slopes[owner, cols]
    bias = pm.biases[owner, cols]
    x = logit(p, pm.eps) if pm.space == "logit" else p
    est = x[:, owner] * slope + bias
    if pm.space == "logit":
        est = _sigmoid(est)
    if clip:
        est = np.clip(est, 0.0, 1.0)
    out[:, pm.test_indices] = est
    return out


def predict_all(pm: PredictorModel, target_anchor_confidences, clip=True) -> EstimateVector:
    """Estimate one target model's confidence on every example.

    Each test point uses only the trend from its own anchor. With
    ``clip=False`` the raw linear estimates are returned.
    """
    p = _check_probs(target_anchor_confidences, "anchor confidences")
    if p.ndim != 1:
        raise ValueError("expected a 1-D vector of anchor confidences")
    values = predict_matrix(pm, p[None, :], clip=clip)[0]
    mask = np.zeros(pm.n_examples, dtype=bool)
    mask[list(pm.anchors.medoids)] = True
    return EstimateVector(values, mask, pm.anchors.example_ids)


def _same_anchors(models) -> None:
    ref = models[0].anchors
    for pm in models[1:]:
        a = pm.anchors
        if a.medoids != ref.medoids or not np.array_equal(a.assignment, ref.assignment):
            raise ValueError("per-class predictors must share one anchor set")


def renormalize(raw: np.ndarray) -> tuple:
    """Clamp per-class estimates to [1e-6, 1], rescale to sum 1, take argmax."""
    clamped = np.clip(raw, PROB_FLOOR, 1.0)
    probs = clamped / clamped.sum(axis=-1, keepdims=True)
    return probs, np.argmax(probs, axis=-1)


def predict_classes_matrix(per_class_models, anchor_tensor) -> tuple:
    """Per-class estimates for many models.

    ``anchor_tensor`` has shape ``(n_models, k, n_classes)``. Returns
    renormalized probabilities ``(n_models, n_examples, n_classes)`` and
    argmax labels ``(n_models, n_examples)``.
    """
    models = list(per_class_models)
    _same_anchors(models)
    p = _check_probs(anchor_tensor, "anchor probabilities")
    if p.ndim != 3 or p.shape[2] != len(models):
        raise ValueError(
            f"anchor tensor must have shape (n_models, k, {len(models)}), got {p.shape}"
        )
    raw = np.stack([predict_matrix(pm, p[:, :, c]) for c, pm in enumerate(models)], axis=-1)
    return renormalize(raw)


def predict_classes(per_class_models, target_anchor_tensor) -> tuple:
    """Estimate one target model's class distribution on every example.

    ``target_anchor_tensor`` has shape ``(k, n_classes)``. Returns a
    ``(n_examples, n_classes)`` array and the argmax label per example
    (ties to the lowest class).
    """
    p = np.asarray(target_anchor_tensor, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("expected a (k, n_classes) array")
    probs, labels = predict_classes_matrix(per_class_models, p[None])
    return probs[0], labels[0]


def agreement(estimated_labels, true_labels) -> float:
    """Fraction of positions where two label vectors agree."""
    a = np.asarray(estimated_labels)
    b = np.asarray(true_labels)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(a == b))


def mae(estimates, truth) -> float:
    """Mean absolute difference between two vectors."""
    a = np.asarray(estimates, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


class AnchorPointWeighted(RegressorMixin, BaseEstimator):
    """Score models by the cluster-weighted mean of their anchor confidences.

    ``fit`` takes source-model correct-class confidences; ``predict`` takes
    target confidences either on the anchors only (``k`` columns) or on all
    examples (anchor columns are picked out).
    """

    def __init__(self, n_anchors=30, eps=DEFAULT_EPS, random_state=0):
        self.n_anchors = n_anchors
        self.eps = eps
        self.random_state = random_state

    def fit(self, X, y=None):
        self.selector_ = AnchorSelector(self.n_anchors, self.eps, self.random_state).fit(X)
        self.anchors_ = self.selector_.anchors_
        self.n_features_in_ = self.selector_.n_features_in_
        return self

    def _anchor_columns(self, X):
        X = check_array(X)
        if X.shape[1] == self.anchors_.k:
            return X
        if X.shape[1] == self.n_features_in_:
            return X[:, list(self.anchors_.medoids)]
        raise ValueError(
            f"X must have {self.anchors_.k} anchor columns or {self.n_features_in_} columns"
        )

    def predict(self, X):
        check_is_fitted(self, "anchors_")
        return apw_score(self.anchors_, self._anchor_columns(X))


class AnchorPointPredictor(BaseEstimator):
    """Estimate instance-level predictions of new models from anchor evaluations.

    ``fit(X)`` with a 2-D ``(n_models, n_examples)`` confidence matrix fits
    one trend table. ``fit(X, y)`` with a 3-D probability tensor and gold
    labels ``y`` selects anchors on correct-class confidences and fits one
    table per class, enabling :meth:`predict_proba` and
    :meth:`predict_labels`.
    """

    def __init__(self, n_anchors=30, eps=DEFAULT_EPS, random_state=0, space="probability"):
        self.n_anchors = n_anchors
        self.eps = eps
        self.random_state = random_state
        self.space = space

    def fit(self, X, y=None):
        X = check_array(X, allow_nd=True, ensure_min_samples=2)
        if X.ndim == 2:
            conf = X
            self.n_classes_ = None
        elif X.ndim == 3:
            if y is None:
                raise ValueError("gold labels y are required with a 3-D probability tensor")
            y = np.asarray(y, dtype=np.int64)
            if y.shape != (X.shape[1],):
                raise ValueError("y must hold one gold label per example")
            conf = X[:, np.arange(X.shape[1]), y]
            self.n_classes_ = X.shape[2]
        else:
            raise ValueError("X must be 2-D or 3-D")
        self.selector_ = AnchorSelector(self.n_anchors, self.eps, self.random_state).fit(conf)
        self.anchors_ = self.selector_.anchors_
        self.model_ = fit_predictor(conf, self.anchors_, self.space, self.eps)
        if X.ndim == 3:
            self.class_models_ = [
                fit_predictor(X[:, :, c], self.anchors_, self.space, self.eps)
                for c in range(X.shape[2])
            ]
        self.n_features_in_ = conf.shape[1]
        return self

    def predict(self, X_anchor):
        """Estimated confidences ``(n_models, n_examples)`` from anchor values."""
        check_is_fitted(self, "model_")
        return predict_matrix(self.model_, check_array(X_anchor))

    def predict_proba(self, X_anchor):
        """Class distributions ``(n_models, n_examples, n_classes)``."""
        check_is_fitted(self, "class_models_")
        return predict_classes_matrix(self.class_models_, check_array(X_anchor, allow_nd=True))[0]

    def predict_labels(self, X_anchor):
        check_is_fitted(self, "class_models_")
        return predict_classes_matrix(self.class_models_, check_array(X_anchor, allow_nd=True))[1]
