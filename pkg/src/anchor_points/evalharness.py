"""Ranking, agreement and trend-transfer experiments over prediction tensors.

Every randomized step draws from ``numpy.random.SeedSequence`` entropy built
from the experiment seed, the run index and (where relevant) the evaluation
size, so results do not depend on execution order or worker count.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .anchors import _anchor_set, _build, pam
from .corr import DEFAULT_EPS, correlation_matrix, logit, pearson_columns
from .estimator import apw_score, fit_predictor, predict_classes_matrix, predict_matrix
from .tensor_io import ConfidenceMatrix, PredictionTensor

METHODS = (
    "anchor_weighted",
    "anchor_predictor",
    "random_exact",
    "random_mean",
    "embedding_exact",
    "embedding_weighted",
)
EMBEDDING_METHODS = ("embedding_exact", "embedding_weighted")


class UndefinedTauError(ValueError):
    """Kendall's tau is undefined when both inputs are constant."""


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# -- metrics ----------------------------------------------------------------


def kendall_tau(a, b) -> float:
    """Tie-corrected Kendall rank correlation (tau-b).

    Returns 0.0 when exactly one input is constant (it carries no ranking);
    raises :class:`UndefinedTauError` when both are.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be 1-D and of equal length")
    if a.size < 2:
        raise ValueError("need at least 2 observations")
    iu = np.triu_indices(a.size, 1)
    da = np.sign(a[:, None] - a[None, :])[iu]
    db = np.sign(b[:, None] - b[None, :])[iu]
    untied_a = np.count_nonzero(da)
    untied_b = np.count_nonzero(db)
    if untied_a == 0 and untied_b == 0:
        raise UndefinedTauError("both rankings are constant")
    if untied_a == 0 or untied_b == 0:
        return 0.0
    s = float(np.sum(da * db))
    return s / math.sqrt(float(untied_a) * float(untied_b))


def aucc(taus, sizes=None) -> float:
    """Area under the tau-versus-size curve, normalized to the mean over sizes.

    ``taus`` maps evaluation size to tau. ``sizes`` is either an int ``B``
    (meaning sizes ``1..B``) or an explicit iterable; by default ``1..max``.
    """
    taus = {int(k): float(v) for k, v in dict(taus).items()}
    if sizes is None:
        sizes = range(1, max(taus) + 1)
    elif isinstance(sizes, (int, np.integer)):
        sizes = range(1, int(sizes) + 1)
    sizes = list(sizes)
    missing = [s for s in sizes if s not in taus]
    if missing:
        raise KeyError(f"tau missing for sizes {missing}")
    return float(np.mean([taus[s] for s in sizes]))


def accuracies(tensor: PredictionTensor) -> np.ndarray:
    """Accuracy of every model (argmax with ties to the lowest class)."""
    return np.mean(tensor.predicted_labels() == tensor.labels[None, :], axis=1)


def true_performance(tensor: PredictionTensor, model_id) -> float:
    """Full-dataset accuracy of one model."""
    return float(accuracies(tensor)[tensor.model_index(model_id)])


def split_models(tensor, n_source: int, seed: int) -> tuple:
    """Random disjoint source/target split; both lists keep manifest order."""
    ids = tensor.model_ids if isinstance(tensor, PredictionTensor) else tuple(tensor)
    n = len(ids)
    if not 2 <= n_source < n:
        raise ValueError(f"n_source must lie in [2, {n - 1}], got {n_source}")
    perm = np.random.default_rng(seed).permutation(n)
    src = np.sort(perm[:n_source])
    tgt = np.sort(perm[n_source:])
    return [ids[i] for i in src], [ids[i] for i in tgt]


# -- target access ----------------------------------------------------------


class TargetReader:
    """Gatekeeper for target-model predictions that counts what each scorer reads.

    ``reads[(method, size)]`` is the number of distinct examples whose
    target predictions ``method`` has read at evaluation size ``size``,
    per target model.
    """

    def __init__(self, probs: np.ndarray):
        self._probs = probs
        self._seen = defaultdict(set)

    @property
    def n_models(self) -> int:
        return self._probs.shape[0]

    def read(self, method: str, size: int, examples) -> np.ndarray:
        """Probabilities ``(n_targets, len(examples), n_classes)``."""
        idx = np.asarray(examples, dtype=np.int64)
        self._seen[(method, int(size))].update(int(i) for i in idx)
        return self._probs[:, idx, :]

    @property
    def reads(self) -> dict:
        return {key: np.full(self.n_models, len(v)) for key, v in self._seen.items()}

    def violations(self) -> list:
        """``(method, size, reads)`` entries where more than ``size`` examples were read."""
        return [(m, s, len(v)) for (m, s), v in sorted(self._seen.items()) if len(v) > s]


def _gold(probs, labels):
    return probs[:, np.arange(labels.size), labels]


def _euclidean(emb: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", emb, emb)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * emb @ emb.T, 0.0)
    dist = np.sqrt(d2)
    upper = np.triu(dist, 1)
    return upper + upper.T


def baseline_scores(reader: TargetReader, labels, method: str, k: int, seed: int,
                    embeddings=None, embedding_dist=None) -> np.ndarray:
    """Scores of every target model for a baseline selector at size ``k``.

    ``random_exact`` / ``random_mean``: accuracy / mean gold-class confidence
    on ``k`` uniformly drawn examples. ``embedding_exact`` /
    ``embedding_weighted``: accuracy / cluster-weighted mean confidence on
    the K-medoids of the Euclidean embedding distances. All targets share the
    same subset.
    """
    labels = np.asarray(labels)
    d = labels.size
    if not 1 <= k <= d:
        raise ValueError(f"k must lie in [1, {d}], got {k}")
    if method in ("random_exact", "random_mean"):
        subset = np.sort(np.random.default_rng(seed).choice(d, k, replace=False))
        probs = reader.read(method, k, subset)
        if method == "random_exact":
            return np.mean(np.argmax(probs, axis=2) == labels[subset], axis=1)
        return _gold(probs, labels[subset]).mean(axis=1)
    if method in EMBEDDING_METHODS:
        if embedding_dist is None:
            if embeddings is None:
                raise ValueError(f"{method} requires an embedding matrix")
            embedding_dist = _euclidean(np.asarray(embeddings, dtype=np.float64))
        anchors = _anchor_set(embedding_dist, pam(embedding_dist, k, seed), seed)
        med = np.array(anchors.medoids)
        probs = reader.read(method, k, med)
        if method == "embedding_exact":
            return np.mean(np.argmax(probs, axis=2) == labels[med], axis=1)
        return apw_score(anchors, _gold(probs, labels[med]))
    raise ValueError(f"unknown baseline method {method!r}")


# -- ranking experiment -----------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    methods: tuple = ("anchor_weighted", "anchor_predictor", "random_exact", "random_mean")
    n_source: int = 10
    budget_max: int = 30
    n_runs: int = 100
    seed: int = 0
    eval_sizes: tuple | None = None
    eps: float = DEFAULT_EPS
    predictor_space: str = "probability"

    def __post_init__(self):
        methods = (self.methods,) if isinstance(self.methods, str) else tuple(self.methods)
        object.__setattr__(self, "methods", methods)
        for m in methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
        if self.n_source < 2:
            raise ValueError("n_source must be at least 2")
        if self.budget_max < 1:
            raise ValueError("budget_max must be at least 1")
        if self.n_runs < 1:
            raise ValueError("n_runs must be at least 1")
        sizes = self.eval_sizes
        sizes = tuple(range(1, self.budget_max + 1)) if sizes is None else tuple(int(s) for s in sizes)
        if not sizes or min(sizes) < 1:
            raise ValueError("eval_sizes must be positive integers")
        object.__setattr__(self, "eval_sizes", tuple(sorted(set(sizes))))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        if "method" in data:
            data["methods"] = data.pop("method")
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class EvalReport:
    config: ExperimentConfig
    tau: dict                      # method -> (n_runs, n_sizes) array
    splits: list                   # per run: (source ids, target ids)
    reads: dict                    # method -> (n_runs, n_sizes) max distinct reads per model
    aucc_runs: dict = field(default_factory=dict)

    @property
    def sizes(self) -> tuple:
        return self.config.eval_sizes

    def mean_tau(self, method) -> np.ndarray:
        return self.tau[method].mean(axis=0)

    def se_tau(self, method) -> np.ndarray:
        t = self.tau[method]
        if t.shape[0] < 2:
            return np.zeros(t.shape[1])
        return t.std(axis=0, ddof=1) / math.sqrt(t.shape[0])

    def aucc(self, method):
        """AUCC of the run-averaged curve (``None`` unless sizes are ``1..B``)."""
        if method not in self.aucc_runs:
            return None
        return aucc(dict(zip(self.sizes, self.mean_tau(method))), self.sizes[-1])

    def aucc_se(self, method):
        if method not in self.aucc_runs:
            return None
        a = self.aucc_runs[method]
        return float(a.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else 0.0

    def audit_ok(self) -> bool:
        sizes = np.array(self.sizes)
        return all(np.all(r <= sizes[None, :]) for r in self.reads.values())

    def summary(self) -> dict:
        out = {
            "config": asdict(self.config),
            "sizes": list(self.sizes),
            "methods": {},
            "read_audit_ok": self.audit_ok(),
        }
        for m in self.config.methods:
            out["methods"][m] = {
                "mean_tau": [round(float(v), 12) for v in self.mean_tau(m)],
                "se_tau": [round(float(v), 12) for v in self.se_tau(m)],
                "aucc": None if self.aucc(m) is None else round(self.aucc(m), 12),
                "aucc_se": None if self.aucc_se(m) is None else round(self.aucc_se(m), 12),
                "max_reads": [int(v) for v in self.reads[m].max(axis=0)],
            }
        out["splits"] = [{"source": list(s), "target": list(t)} for s, t in self.splits]
        return out

    def write(self, out_dir) -> None:
        """Write ``tau_long.csv`` (method, size, run, tau) and ``summary.json``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "tau_long.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "size", "run", "tau"])
            for m in self.config.methods:
                t = self.tau[m]
                for si, size in enumerate(self.sizes):
                    for r in range(t.shape[0]):
                        w.writerow([m, size, r, repr(float(t[r, si]))])
        (out_dir / "summary.json").write_text(json.dumps(self.summary(), indent=2) + "\n")


def _safe_tau(scores, truth) -> float:
    try:
        return kendall_tau(scores, truth)
    except UndefinedTauError:
        return 0.0


def _run_once(tensor, config, run, emb_dist):
    seed = config.seed
    src_ids, tgt_ids = split_models(tensor, config.n_source, _seed(seed, run, 0))
    src_idx = [tensor.model_index(m) for m in src_ids]
    tgt_idx = [tensor.model_index(m) for m in tgt_ids]
    labels = tensor.labels
    source = tensor.probs[src_idx]
    reader = TargetReader(tensor.probs[tgt_idx])
    truth = accuracies(tensor)[tgt_idx]
    sizes = config.eval_sizes
    d = tensor.n_examples
    if max(sizes) > d:
        raise ValueError(f"evaluation size {max(sizes)} exceeds {d} examples")
    if np.ptp(truth) == 0:
        raise UndefinedTauError("all target models have identical accuracy")

    methods = config.methods
    tau = {m: np.zeros(len(sizes)) for m in methods}
    anchor_methods = {"anchor_weighted", "anchor_predictor"} & set(methods)
    if anchor_methods:
        src_conf = _gold(source, labels)
        cm = correlation_matrix(src_conf, config.eps)
        pam_seed = _seed(seed, run, 1)
        build = _build(cm.dist, max(sizes), np.random.default_rng(pam_seed))

    for si, k in enumerate(sizes):
        if anchor_methods:
            anchors = _anchor_set(cm.dist, pam(cm.dist, k, pam_seed, build=build), pam_seed)
            med = np.array(anchors.medoids)
            if "anchor_weighted" in methods:
                probs = reader.read("anchor_weighted", k, med)
                scores = apw_score(anchors, _gold(probs, labels[med]))
                tau["anchor_weighted"][si] = _safe_tau(scores, truth)
            if "anchor_predictor" in methods:
                probs = reader.read("anchor_predictor", k, med)
                models = [
                    fit_predictor(source[:, :, c], anchors, config.predictor_space, config.eps)
                    for c in range(tensor.class_count)
                ]
                _, est_labels = predict_classes_matrix(models, probs)
                scores = np.mean(est_labels == labels[None, :], axis=1)
                tau["anchor_predictor"][si] = _safe_tau(scores, truth)
        for m in methods:
            if m in anchor_methods:
                continue
            base_seed = _seed(seed, k) if m in EMBEDDING_METHODS else _seed(seed, run, 2, k)
            scores = baseline_scores(reader, labels, m, k, base_seed, embedding_dist=emb_dist)
            tau[m][si] = _safe_tau(scores, truth)

    reads = reader.reads
    read_counts = {
        m: np.array([reads.get((m, k), np.zeros(1)).max() for k in sizes]) for m in methods
    }
    return tau, (src_ids, tgt_ids), read_counts


def run_ranking_experiment(tensor: PredictionTensor, config: ExperimentConfig,
                           embeddings=None, threads: int = 1) -> EvalReport:
    """Rank held-out target models with each method at every evaluation size.

    Each run re-splits models, re-selects anchors from the run's source
    models only and draws fresh random subsets; target predictions are read
    only through a :class:`TargetReader`.
    """
    if set(config.methods) & set(EMBEDDING_METHODS) and embeddings is None:
        raise ValueError("embedding methods require an embedding matrix")
    emb_dist = None
    if embeddings is not None:
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != tensor.n_examples:
            raise ValueError("embeddings must have one row per example")
        emb_dist = _euclidean(emb)
    if config.n_source >= tensor.n_models - 1:
        raise ValueError("need at least 2 target models for a ranking")

    def job(run):
        return _run_once(tensor, config, run, emb_dist)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, range(config.n_runs)))
    else:
        results = [job(r) for r in range(config.n_runs)]

    tau = {m: np.array([r[0][m] for r in results]) for m in config.methods}
    reads = {m: np.array([r[2][m] for r in results]) for m in config.methods}
    report = EvalReport(config, tau, [r[1] for r in results], reads)
    sizes = config.eval_sizes
    if sizes == tuple(range(1, sizes[-1] + 1)):
        report.aucc_runs = {m: tau[m].mean(axis=1) for m in config.methods}
    return report


# -- agreement experiment ---------------------------------------------------


@dataclass
class AgreementReport:
    anchor_counts: tuple
    agreement: np.ndarray          # (n_runs, n_counts), mean over targets
    mae: np.ndarray                # (n_runs, n_counts), gold-class confidence MAE
    per_model_agreement: list      # per run: (n_targets, n_counts)

    def mean_agreement(self) -> np.ndarray:
        return self.agreement.mean(axis=0)

    def std_agreement(self) -> np.ndarray:
        per_model = np.concatenate(self.per_model_agreement, axis=0)
        return per_model.std(axis=0, ddof=1) if per_model.shape[0] > 1 else np.zeros(len(self.anchor_counts))

    def summary(self) -> dict:
        return {
            "anchor_counts": list(self.anchor_counts),
            "mean_agreement": [float(v) for v in self.mean_agreement()],
            "std_agreement": [float(v) for v in self.std_agreement()],
            "mean_mae": [float(v) for v in self.mae.mean(axis=0)],
        }


def run_agreement_experiment(tensor: PredictionTensor, n_source: int = 60,
                             anchor_counts=(1, 5, 10, 30, 50), n_runs: int = 10,
                             seed: int = 0, space: str = "probability",
                             eps: float = DEFAULT_EPS) -> AgreementReport:
    """Agreement between estimated and actual target predictions per anchor count."""
    counts = tuple(int(c) for c in anchor_counts)
    agree = np.zeros((n_runs, len(counts)))
    err = np.zeros((n_runs, len(counts)))
    per_model = []
    labels = tensor.labels
    for run in range(n_runs):
        src_ids, tgt_ids = split_models(tensor, n_source, _seed(seed, run, 0))
        src = tensor.probs[[tensor.model_index(m) for m in src_ids]]
        tgt = tensor.probs[[tensor.model_index(m) for m in tgt_ids]]
        reader = TargetReader(tgt)
        actual = np.argmax(tgt, axis=2)
        tgt_gold = _gold(tgt, labels)
        cm = correlation_matrix(_gold(src, labels), eps)
        pam_seed = _seed(seed, run, 1)
        build = _build(cm.dist, max(counts), np.random.default_rng(pam_seed))
        run_models = np.zeros((tgt.shape[0], len(counts)))
        for ci, k in enumerate(counts):
            anchors = _anchor_set(cm.dist, pam(cm.dist, k, pam_seed, build=build), pam_seed)
            med = np.array(anchors.medoids)
            probs = reader.read("anchor_predictor", k, med)
            models = [fit_predictor(src[:, :, c], anchors, space, eps)
                      for c in range(tensor.class_count)]
            _, est_labels = predict_classes_matrix(models, probs)
            run_models[:, ci] = np.mean(est_labels == actual, axis=1)
            gold_model = fit_predictor(_gold(src, labels), anchors, space, eps)
            est = predict_matrix(gold_model, _gold(probs, labels[med]))
            err[run, ci] = np.mean(np.abs(est - tgt_gold))
        agree[run] = run_models.mean(axis=0)
        per_model.append(run_models)
    return AgreementReport(counts, agree, err, per_model)


# -- trend transfer ---------------------------------------------------------


def _values(conf):
    return conf.values if isinstance(conf, ConfidenceMatrix) else np.asarray(conf, dtype=np.float64)


def _check_pair(source_conf, target_conf):
    if isinstance(source_conf, ConfidenceMatrix) and isinstance(target_conf, ConfidenceMatrix):
        if source_conf.example_ids != target_conf.example_ids:
            raise ValueError("source and target matrices must share example ids")
    s, t = _values(source_conf), _values(target_conf)
    if s.shape[1] != t.shape[1]:
        raise ValueError("source and target matrices must cover the same examples")
    return s, t


def _pair_fits(s, pairs):
    x = s[:, pairs[:, 0]]
    y = s[:, pairs[:, 1]]
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    sxx = np.einsum("ij,ij->j", xc, xc)
    sxy = np.einsum("ij,ij->j", xc, yc)
    syy = np.einsum("ij,ij->j", yc, yc)
    slope = np.divide(sxy, sxx, out=np.zeros_like(sxy), where=sxx > 0)
    bias = y.mean(axis=0) - slope * x.mean(axis=0)
    denom = sxx * syy
    r2 = np.divide(sxy * sxy, denom, out=np.zeros_like(sxy), where=denom > 0)
    return slope, bias, r2


def _target_mae(t, pairs, slope, bias):
    pred = t[:, pairs[:, 0]] * slope + bias
    return np.mean(np.abs(pred - t[:, pairs[:, 1]]), axis=0)


def _sample_pairs(mask_upper, n_pairs, seed):
    i, j = np.nonzero(np.triu(mask_upper, 1))
    pairs = np.column_stack([i, j])
    if len(pairs) > n_pairs:
        pick = np.random.default_rng(seed).choice(len(pairs), n_pairs, replace=False)
        pairs = pairs[np.sort(pick)]
    return pairs


def transfer_mae(source_conf, target_conf, corr_threshold: float = 0.8,
                 n_pairs: int = 1000, seed: int = 0, eps: float = DEFAULT_EPS) -> float:
    """Mean target-side error of trend lines fitted on strongly correlated source pairs.

    Pairs ``(i, j)`` qualify when their source-side logit correlation
    exceeds ``corr_threshold``; up to ``n_pairs`` are sampled. Each pair's
    least-squares line (``j`` on ``i``, probability scale) is fitted on the
    source models and scored by mean absolute error on the target models.
    """
    s, t = _check_pair(source_conf, target_conf)
    corr = pearson_columns(logit(s, eps))
    pairs = _sample_pairs(corr > corr_threshold, n_pairs, seed)
    if len(pairs) == 0:
        raise ValueError(f"no example pairs with source correlation above {corr_threshold}")
    slope, bias, _ = _pair_fits(s, pairs)
    return float(np.mean(_target_mae(t, pairs, slope, bias)))


def transfer_table(families: dict, corr_threshold: float = 0.8, n_pairs: int = 1000,
                   seed: int = 0, eps: float = DEFAULT_EPS) -> dict:
    """Transfer MAE for every (source family, target family) combination.

    ``families`` maps a name to a confidence matrix. On the diagonal the
    family is split into random halves that act as source and target.
    """
    out = {}
    for a, sa in families.items():
        for b, tb in families.items():
            if a == b:
                vals = _values(sa)
                perm = np.random.default_rng(_seed(seed, 7)).permutation(vals.shape[0])
                half = vals.shape[0] // 2
                out[(a, b)] = transfer_mae(vals[perm[:half]], vals[perm[half:]],
                                           corr_threshold, n_pairs, seed, eps)
            else:
                out[(a, b)] = transfer_mae(sa, tb, corr_threshold, n_pairs, seed, eps)
    return out


def _describe(values: np.ndarray) -> dict:
    if values.size == 0:
        return {"count": 0, "mean": None, "median": None, "deciles": None}
    return {
        "count": int(values.size),
        "mean": float(values.mean()),
        "median": float(np.median(values)),
        "deciles": [float(v) for v in np.quantile(values, np.linspace(0.1, 0.9, 9))],
    }


def trend_generalization(source_conf, target_conf, r2_threshold: float = 0.64,
                         n_pairs: int = 2000, seed: int = 0) -> dict:
    """Target-side error of well-fitting source trends, split by slope sign.

    Samples up to ``n_pairs`` example pairs whose source-side fit has
    ``R^2 > r2_threshold`` and summarizes the target MAE of positive- and
    negative-slope trends separately. An empty bucket has ``count == 0``.
    """
    s, t = _check_pair(source_conf, target_conf)
    corr = pearson_columns(s)
    pairs = _sample_pairs(corr * corr > r2_threshold, n_pairs, seed)
    if len(pairs):
        slope, bias, r2 = _pair_fits(s, pairs)
        keep = r2 > r2_threshold
        pairs, slope, bias = pairs[keep], slope[keep], bias[keep]
        err = _target_mae(t, pairs, slope, bias)
    else:
        slope = err = np.zeros(0)
    return {"positive": _describe(err[slope > 0]), "negative": _describe(err[slope < 0])}
