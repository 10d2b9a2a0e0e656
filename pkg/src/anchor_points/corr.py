"""Cross-model correlation between examples and low-rank structure checks."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor_io import ConfidenceMatrix, read_matrix_csv, write_matrix_csv

DEFAULT_EPS = 1e-6


def logit(p, eps: float = DEFAULT_EPS):
    """Log-odds of ``p`` after clamping it to ``[eps, 1 - eps]``.

    Accepts scalars or arrays; scalars come back as ``float``.
    """
    if not 0.0 < eps < 0.5:
        raise ValueError(f"eps must lie in (0, 0.5), got {eps}")
    q = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    out = np.log(q) - np.log1p(-q)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CorrelationModel:
    """Example-by-example correlation matrix and the distance ``1 - corr``.

    ``example_ids`` is carried along for serialization and may be empty when
    the model was built from a bare matrix.
    """

    corr: np.ndarray
    dist: np.ndarray
    epsilon: float
    n_models: int
    example_ids: tuple = ()

    def __post_init__(self):
        for name in ("corr", "dist"):
            a = np.array(getattr(self, name), dtype=np.float64, copy=True)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        object.__setattr__(self, "example_ids", tuple(str(e) for e in self.example_ids))
        if self.corr.ndim != 2 or self.corr.shape[0] != self.corr.shape[1]:
            raise ValueError(f"corr must be square, got shape {self.corr.shape}")
        if self.dist.shape != self.corr.shape:
            raise ValueError("corr and dist shapes differ")
        if self.example_ids and len(self.example_ids) != self.corr.shape[0]:
            raise ValueError("example_ids length does not match matrix size")

    @property
    def n_examples(self) -> int:
        return self.corr.shape[0]

    @classmethod
    def from_distance(cls, dist, example_ids=(), epsilon=DEFAULT_EPS, n_models=0):
        """Wrap a symmetric distance matrix with zero diagonal (values in [0, 2])."""
        dist = np.array(dist, dtype=np.float64)
        if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
            raise ValueError(f"distance matrix must be square, got {dist.shape}")
        if not np.array_equal(dist, dist.T):
            raise ValueError("distance matrix must be symmetric")
        if np.any(np.diag(dist) != 0.0):
            raise ValueError("distance matrix must have a zero diagonal")
        if dist.min() < 0.0 or dist.max() > 2.0:
            raise ValueError("distances must lie in [0, 2]")
        return cls(1.0 - dist, dist, epsilon, n_models, example_ids)

    def save(self, path) -> None:
        """Write the distance-inducing correlation matrix as CSV plus a JSON sidecar."""
        path = Path(path)
        write_matrix_csv(path, self.corr)
        sidecar = {
            "epsilon": self.epsilon,
            "n_models": self.n_models,
            "example_ids": list(self.example_ids),
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "CorrelationModel":
        path = Path(path)
        corr = read_matrix_csv(path)
        side = json.loads(path.with_suffix(".json").read_text())
        return cls(
            corr, 1.0 - corr, float(side["epsilon"]), int(side["n_models"]),
            side.get("example_ids", ()),
        )


def pearson_columns(x: np.ndarray) -> np.ndarray:
    """Pearson correlation between the columns of ``x`` (rows are observations).

    Uses two passes (mean, then centred cross-products). Columns with zero
    variance correlate 0 with every other column and 1 with themselves. Only
    the upper triangle is computed; the lower one is its mirror image.
    """
    x = np.asarray(x, dtype=np.float64)
    centred = x - x.mean(axis=0)
    ss = np.einsum("ij,ij->j", centred, centred)
    norm = np.sqrt(ss)
    live = (np.ptp(x, axis=0) > 0.0) & (ss > 0.0)
    scaled = np.zeros_like(centred)
    scaled[:, live] = centred[:, live] / norm[live]
    c = scaled.T @ scaled
    c = np.clip(c, -1.0, 1.0)
    upper = np.triu(c, 1)
    out = upper + upper.T
    np.fill_diagonal(out, 1.0)
    return out


def correlation_matrix(conf, eps: float = DEFAULT_EPS) -> CorrelationModel:
    """Correlate examples across models on logit-transformed confidences.

    Parameters
    ----------
    conf : ConfidenceMatrix or array of shape (n_models, n_examples)
        Correct-class confidences of the source models.
    eps : float
        Clipping constant for the logit transform.
    """
    if isinstance(conf, ConfidenceMatrix):
        values, ids = conf.values, conf.example_ids
    else:
        values, ids = np.asarray(conf, dtype=np.float64), ()
    if values.ndim != 2 or values.shape[0] < 2:
        raise ValueError("need a 2-D matrix with at least 2 models")
    corr = pearson_columns(logit(values, eps))
    return CorrelationModel(corr, 1.0 - corr, eps, values.shape[0], ids)


@dataclass(frozen=True)
class RankReport:
    rank: int
    mae: float
    threshold: float


def approximate_rank(matrix, mae_threshold: float) -> RankReport:
    """Smallest truncated-SVD rank whose reconstruction MAE is within threshold.

    The error is the mean absolute difference over all entries of the
    matrix as given (probability scale for confidence matrices).
    """
    if not mae_threshold > 0:
        raise ValueError("mae_threshold must be positive")
    a = np.asarray(matrix, dtype=np.float64)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    recon = np.zeros_like(a)
    mae = float(np.mean(np.abs(a)))
    for r in range(1, s.size + 1):
        recon += s[r - 1] * np.outer(u[:, r - 1], vt[r - 1])
        mae = float(np.mean(np.abs(a - recon)))
        if mae <= mae_threshold:
            return RankReport(r, mae, mae_threshold)
    # full rank reconstruction only misses by rounding error
    return RankReport(s.size, mae, mae_threshold)


def rank_table(confidences: dict, thresholds) -> dict:
    """Approximate rank of several confidence matrices at matching thresholds.

    ``confidences`` maps a task name to an ``N x D`` array; ``thresholds``
    is either a single float or a dict keyed like ``confidences``.
    """
    out = {}
    for name, mat in confidences.items():
        thr = thresholds[name] if isinstance(thresholds, dict) else thresholds
        out[name] = approximate_rank(mat, thr)
    return out

