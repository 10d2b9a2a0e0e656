"""Anchor point selection by K-medoids over the correlation distance.

The objective is the facility-location cost: the summed distance from every
example to its closest selected anchor, where distance is ``1 - corr``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .corr import DEFAULT_EPS, CorrelationModel, correlation_matrix

BRUTE_FORCE_LIMIT = 10**6
RESTART_WORK = 200_000


def _rel_tol(scale):
    return 1e-12 * (1.0 + abs(scale))


def _as_dist(cm) -> np.ndarray:
    if isinstance(cm, CorrelationModel):
        return cm.dist
    dist = np.asarray(cm, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise ValueError(f"distance matrix must be square, got shape {dist.shape}")
    return dist


def _check_medoids(medoids, d: int) -> np.ndarray:
    m = np.asarray(medoids, dtype=np.int64).ravel()
    if m.size == 0:
        raise ValueError("need at least one medoid")
    if m.min() < 0 or m.max() >= d:
        raise IndexError(f"medoid index out of range [0, {d})")
    if np.unique(m).size != m.size:
        raise ValueError("duplicate medoid index")
    return m


@dataclass(frozen=True)
class AnchorSet:
    """Selected anchors with their clusters.

    Attributes
    ----------
    medoids : tuple of int
        Example indices of the anchors, in selection order.
    assignment : ndarray of shape (n_examples,)
        Position (into ``medoids``) of each example's nearest anchor.
    weights : ndarray of shape (n_anchors,)
        Cluster sizes; they sum to the number of examples.
    objective : float
        Facility-location cost of the solution.
    seed : int
        Seed used for tie-breaking.
    """

    medoids: tuple
    assignment: np.ndarray
    weights: np.ndarray
    objective: float
    seed: int
    example_ids: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "medoids", tuple(int(m) for m in self.medoids))
        for name in ("assignment", "weights"):
            a = np.array(getattr(self, name), dtype=np.int64, copy=True)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        object.__setattr__(self, "example_ids", tuple(str(e) for e in self.example_ids))

    @property
    def k(self) -> int:
        return len(self.medoids)

    @property
    def n_examples(self) -> int:
        return self.assignment.size

    def to_dict(self) -> dict:
        ids = self.example_ids or tuple(str(i) for i in range(self.n_examples))
        return {
            "medoids": [ids[m] for m in self.medoids],
            "weights": [int(w) for w in self.weights],
            "assignment": {ids[j]: ids[self.medoids[a]] for j, a in enumerate(self.assignment)},
            "objective": self.objective,
            "seed": self.seed,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_dict(cls, data: dict, example_ids=None) -> "AnchorSet":
        """Rebuild from :meth:`to_dict` output.

        ``example_ids`` fixes the example order; by default the order of the
        ``assignment`` mapping is used.
        """
        if example_ids is None:
            example_ids = list(data["assignment"])
        example_ids = tuple(str(e) for e in example_ids)
        pos = {e: i for i, e in enumerate(example_ids)}
        try:
            medoids = [pos[str(m)] for m in data["medoids"]]
        except KeyError as exc:
            raise KeyError(f"anchor example id {exc.args[0]!r} not in example list") from None
        slot = {m: i for i, m in enumerate(medoids)}
        assign_map = data["assignment"]
        if set(assign_map) != set(example_ids):
            raise KeyError("anchor assignment does not cover the example list")
        assignment = [slot[pos[str(assign_map[e])]] for e in example_ids]
        return cls(
            medoids, assignment, data["weights"], float(data["objective"]),
            int(data["seed"]), example_ids,
        )

    @classmethod
    def load(cls, path, example_ids=None) -> "AnchorSet":
        return cls.from_dict(json.loads(Path(path).read_text()), example_ids)


def nearest_anchor(dist: np.ndarray, medoids) -> np.ndarray:
    """Position of the closest medoid for every example.

    Ties go to the earliest medoid in list order; each medoid always maps
    to itself.
    """
    m = np.asarray(medoids, dtype=np.int64)
    assign = np.argmin(dist[m], axis=0)
    assign[m] = np.arange(m.size)
    return assign


def objective_value(cm, medoids) -> float:
    """Summed distance from each non-anchor example to its nearest anchor."""
    dist = _as_dist(cm)
    m = _check_medoids(medoids, dist.shape[0])
    nearest = dist[m].min(axis=0)
    nearest[m] = 0.0
    return math.fsum(nearest)


def _anchor_set(dist, medoids, seed, example_ids=()) -> AnchorSet:
    # sorted, so assignment ties go to the lowest example index
    medoids = sorted(int(v) for v in medoids)
    assign = nearest_anchor(dist, medoids)
    weights = np.bincount(assign, minlength=len(medoids))
    return AnchorSet(
        medoids, assign, weights, objective_value(dist, medoids), seed, example_ids
    )


def _build(dist: np.ndarray, k: int, rng: np.random.Generator) -> list:
    """Greedy BUILD: add the example that lowers the cost most, k times.

    Each step depends only on the earlier picks, so the first ``j`` entries
    of ``_build(dist, k, rng)`` equal ``_build(dist, j, rng)``.
    """
    d = dist.shape[0]
    chosen = []
    free = np.ones(d, dtype=bool)
    nearest = np.full(d, np.inf)
    for _ in range(k):
        cand = np.flatnonzero(free)
        cost = np.minimum(dist[cand], nearest).sum(axis=1)
        best = cost.min()
        ties = cand[cost <= best + _rel_tol(best)]
        pick = int(ties[0] if ties.size == 1 else rng.choice(ties))
        chosen.append(pick)
        free[pick] = False
        nearest = np.minimum(nearest, dist[pick])
    return chosen


class _SwapState:
    """Nearest / second-nearest medoid distances for fast swap evaluation."""

    def __init__(self, dist, medoids):
        self.dist = dist
        self.medoids = list(medoids)
        self.refresh()

    def refresh(self):
        d = self.dist.shape[0]
        m = np.asarray(self.medoids)
        near = self.dist[m]
        self.first = np.argmin(near, axis=0)
        self.d1 = near[self.first, np.arange(d)]
        self.d2 = np.partition(near, 1, axis=0)[1] if m.size > 1 else np.full(d, np.inf)
        self.perm = np.argsort(self.first, kind="stable")
        counts = np.bincount(self.first, minlength=m.size)
        self.nonempty = counts > 0
        self.starts = (np.cumsum(counts) - counts)[self.nonempty]
        self.is_medoid = np.zeros(d, dtype=bool)
        self.is_medoid[m] = True
        self.order = np.argsort(m, kind="stable")
        self.cost = math.fsum(np.where(self.is_medoid, 0.0, self.d1))

    def deltas(self, rows):
        """Cost change for swapping each candidate in ``rows`` with each medoid.

        Shape is (n_medoids, len(rows)); medoids follow example-index order.
        """
        k = len(self.medoids)
        block = self.dist[rows][:, self.perm]
        d1p = self.d1[self.perm]
        m1 = np.minimum(block, d1p)
        shared = m1.sum(axis=1) - d1p.sum()
        m2 = np.minimum(block, self.d2[self.perm], out=block)
        m2 -= m1
        loss = np.zeros((len(rows), k))
        loss[:, self.nonempty] = np.add.reduceat(m2, self.starts, axis=1)
        delta = shared[:, None] + loss
        return delta.T[self.order]

    def apply(self, row, incoming):
        self.medoids[int(self.order[row])] = int(incoming)
        self.refresh()


def _local_search(dist, medoids, strategy, block_size, cap):
    """Swap until no single (medoid, non-medoid) exchange lowers the cost."""
    state = _SwapState(dist, medoids)
    d = dist.shape[0]
    swaps = 0
    if strategy == "best":
        while swaps < cap:
            cand = np.flatnonzero(~state.is_medoid)
            delta = state.deltas(cand)
            flat = int(np.argmin(delta))
            if not delta.flat[flat] < -_rel_tol(state.cost):
                break
            row, col = divmod(flat, delta.shape[1])
            state.apply(row, cand[col])
            swaps += 1
        return state.medoids, state.cost
    if strategy != "eager":
        raise ValueError(f"unknown swap strategy {strategy!r}")
    blocks = [np.arange(s, min(s + block_size, d)) for s in range(0, d, block_size)]
    idle = 0
    b = 0
    while swaps < cap and idle < len(blocks):
        rows = blocks[b]
        rows = rows[~state.is_medoid[rows]]
        improved = False
        if rows.size:
            delta = state.deltas(rows)
            flat = int(np.argmin(delta))
            if delta.flat[flat] < -_rel_tol(state.cost):
                row, col = divmod(flat, delta.shape[1])
                state.apply(row, rows[col])
                swaps += 1
                improved = True
        if improved:
            idle = 0
        else:
            idle += 1
            b = (b + 1) % len(blocks)
    return state.medoids, state.cost


def _auto_restarts(d: int) -> int:
    return int(min(20, RESTART_WORK // (d * d)))


def pam(
    dist,
    k: int,
    seed: int = 0,
    *,
    n_init="auto",
    strategy: str = "eager",
    block_size: int = 128,
    max_swaps: int | None = None,
    build=None,
) -> list:
    """K-medoids: greedy BUILD, swap local search, then perturbation restarts.

    Parameters
    ----------
    dist : array of shape (d, d)
        Symmetric dissimilarities with zero diagonal.
    k : int
        Number of medoids.
    seed : int
        Drives BUILD tie-breaking and the restart perturbations.
    n_init : int or "auto"
        Number of restarts. Each one replaces ``ceil(k / 2)`` medoids of the
        incumbent with random examples and reruns the local search; the
        incumbent changes only on a strict improvement. ``"auto"`` scales the
        count down with ``d`` (20 up to ``d = 100``, none past ``d = 447``).
    strategy : {"eager", "best"}
        ``"best"`` applies the globally best swap per pass (classic PAM).
        ``"eager"`` scans candidates in blocks of ``block_size`` and applies
        the best swap of each improving block. Both stop only when no single
        swap lowers the cost.
    max_swaps : int, optional
        Swap cap per local search; defaults to ``100 * k``.
    build : sequence of int, optional
        Precomputed BUILD order of length ``>= k``; its first ``k`` entries
        are used. Saves recomputation when solving for several ``k``.

    Returns
    -------
    list of int
        Medoid indices.
    """
    dist = _as_dist(dist)
    d = dist.shape[0]
    if not 1 <= k <= d:
        raise ValueError(f"k must lie in [1, {d}], got {k}")
    if build is None:
        medoids = _build(dist, k, np.random.default_rng(seed))
    else:
        medoids = [int(v) for v in build[:k]]
        if len(medoids) != k:
            raise ValueError("precomputed BUILD order is shorter than k")
    if k == d:
        return medoids
    cap = 100 * k if max_swaps is None else max_swaps
    best, best_cost = _local_search(dist, medoids, strategy, block_size, cap)
    restarts = _auto_restarts(d) if n_init == "auto" else int(n_init)
    rng = np.random.default_rng([seed, 1])
    n_out = (k + 1) // 2
    for _ in range(restarts):
        trial = list(best)
        pool = np.flatnonzero(~np.isin(np.arange(d), trial))
        out_pos = rng.choice(k, min(n_out, pool.size), replace=False)
        incoming = rng.choice(pool, out_pos.size, replace=False)
        for p, v in zip(out_pos, incoming):
            trial[int(p)] = int(v)
        cand, cost = _local_search(dist, trial, strategy, block_size, cap)
        if cost < best_cost - _rel_tol(best_cost):
            best, best_cost = cand, cost
    return best


def select_anchors(cm, k: int, seed: int = 0, **pam_options) -> AnchorSet:
    """Choose ``k`` anchors minimizing the facility-location cost.

    Parameters
    ----------
    cm : CorrelationModel or array of shape (n_examples, n_examples)
        Correlation model (its ``dist`` is used) or a bare distance matrix.
    k : int
        Number of anchors, ``1 <= k <= n_examples``.
    seed : int
        Seed for BUILD tie-breaking and restarts.
    **pam_options
        Forwarded to :func:`pam` (``n_init``, ``strategy``, ``build``, ...).
    """
    dist = _as_dist(cm)
    if not 1 <= k <= dist.shape[0]:
        raise ValueError(f"k must lie in [1, {dist.shape[0]}], got {k}")
    ids = cm.example_ids if isinstance(cm, CorrelationModel) else ()
    return _anchor_set(dist, pam(dist, k, seed, **pam_options), seed, ids)


def brute_force_anchors(cm, k: int) -> AnchorSet:
    """Globally optimal anchors by enumerating every ``k``-subset.

    Ties go to the lexicographically smallest index list. Raises
    ``ValueError`` when there are more than a million subsets.
    """
    dist = _as_dist(cm)
    d = dist.shape[0]
    if not 1 <= k <= d:
        raise ValueError(f"k must lie in [1, {d}], got {k}")
    if math.comb(d, k) > BRUTE_FORCE_LIMIT:
        raise ValueError(f"C({d}, {k}) subsets exceed the enumeration limit")
    combos = np.array(list(itertools.combinations(range(d), k)), dtype=np.int64)
    costs = np.empty(len(combos))
    for start in range(0, len(combos), 4096):
        block = combos[start:start + 4096]
        costs[start:start + len(block)] = dist[block].min(axis=1).sum(axis=1)
    best = costs.min()
    pick = combos[int(np.flatnonzero(costs <= best + _rel_tol(best))[0])]
    ids = cm.example_ids if isinstance(cm, CorrelationModel) else ()
    return _anchor_set(dist, pick, 0, ids)


class AnchorSelector(TransformerMixin, BaseEstimator):
    """Pick anchor examples from source-model confidences.

    Parameters
    ----------
    n_anchors : int
        Number of anchor examples.
    eps : float
        Clipping constant for the logit transform.
    random_state : int
        Seed for BUILD tie-breaking.

    Attributes
    ----------
    correlation_ : CorrelationModel
    anchors_ : AnchorSet
    medoid_indices_ : ndarray of shape (n_anchors,)
    labels_ : ndarray of shape (n_examples,)
        Cluster position of each example.
    cluster_weights_ : ndarray of shape (n_anchors,)
    """

    def __init__(self, n_anchors=30, eps=DEFAULT_EPS, random_state=0):
        self.n_anchors = n_anchors
        self.eps = eps
        self.random_state = random_state

    def fit(self, X, y=None):
        """Fit on an ``(n_models, n_examples)`` confidence matrix."""
        X = check_array(X, ensure_min_samples=2, ensure_min_features=1)
        self.correlation_ = correlation_matrix(X, self.eps)
        self.anchors_ = select_anchors(self.correlation_, self.n_anchors, self.random_state)
        self.medoid_indices_ = np.array(self.anchors_.medoids)
        self.labels_ = np.asarray(self.anchors_.assignment)
        self.cluster_weights_ = np.asarray(self.anchors_.weights)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        """Keep only the anchor columns of a confidence matrix."""
        check_is_fitted(self, "anchors_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} examples, selector was fit on {self.n_features_in_}"
            )
        return X[:, self.medoid_indices_]
