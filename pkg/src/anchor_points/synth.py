"""Synthetic model populations with a known low-rank latent structure.

Correct-class logits follow ``skill_n . loading_x + intercept_x + noise``,
so the noiseless logit matrix has rank ``latent_rank`` (the intercept is one
of the dimensions). Examples flagged as negative trends use negated
loadings. Wrong classes share the remaining probability mass equally.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor_io import PredictionTensor, save_prediction_tensor


@dataclass(frozen=True)
class SynthSpec:
    n_models: int = 87
    n_examples: int = 872
    class_count: int = 2
    latent_rank: int = 3
    noise_sigma: float = 0.5
    trend_mix: float = 0.0
    family_offsets: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if self.latent_rank < 1:
            raise ValueError("latent_rank must be at least 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0.0 <= self.trend_mix <= 1.0:
            raise ValueError("trend_mix must lie in [0, 1]")
        if self.n_models < 2 or self.n_examples < 2 or self.class_count < 2:
            raise ValueError("need at least 2 models, 2 examples and 2 classes")
        if self.family_offsets is not None:
            offs = tuple(tuple(float(v) for v in row) for row in self.family_offsets)
            if any(len(row) != self.n_examples for row in offs):
                raise ValueError("each family offset needs one value per example")
            object.__setattr__(self, "family_offsets", offs)

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class SynthTruth:
    """Latent record sufficient to recompute every noiseless confidence."""

    skills: np.ndarray
    loadings: np.ndarray
    intercepts: np.ndarray
    trend_signs: np.ndarray
    families: np.ndarray
    labels: np.ndarray
    class_count: int
    noise_sigma: float
    family_offsets: np.ndarray | None = field(default=None)

    def expected_logits(self, skills=None, families=None, trend_signs=None) -> np.ndarray:
        skills = self.skills if skills is None else np.asarray(skills)
        families = self.families if families is None else np.asarray(families)
        signs = self.trend_signs if trend_signs is None else np.asarray(trend_signs)
        z = skills @ (self.loadings * signs[:, None]).T + self.intercepts
        if self.family_offsets is not None:
            z = z + self.family_offsets[families]
        return z

    def expected_confidences(self, **kw) -> np.ndarray:
        return _sigmoid(self.expected_logits(**kw))

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _to_tensor(conf, labels, class_count, model_ids, example_ids) -> PredictionTensor:
    n, d = conf.shape
    probs = np.empty((n, d, class_count))
    probs[:] = ((1.0 - conf) / (class_count - 1))[:, :, None]
    probs[:, np.arange(d), labels] = conf
    return PredictionTensor(model_ids, example_ids, class_count, probs, labels)


def _draw_models(truth: SynthTruth, rng_per_model, trend_signs):
    """Skills, families and noisy correct-class confidences for new models."""
    dims = truth.loadings.shape[1]
    n_fam = 1 if truth.family_offsets is None else truth.family_offsets.shape[0]
    skills, noise = [], []
    d = truth.intercepts.size
    for rng in rng_per_model:
        skills.append(rng.normal(size=dims))
        noise.append(rng.normal(scale=truth.noise_sigma, size=d) if truth.noise_sigma > 0 else np.zeros(d))
    skills = np.array(skills).reshape(len(rng_per_model), dims)
    families = np.arange(len(rng_per_model)) % n_fam
    z = truth.expected_logits(skills, families, trend_signs) + np.array(noise).reshape(-1, d)
    return skills, families, _sigmoid(z)


def generate_population(spec: SynthSpec) -> tuple:
    """Draw a population; returns ``(PredictionTensor, SynthTruth)``.

    The first latent dimension is a shared skill axis with positive
    loadings, so higher skill raises confidence on positively trending
    examples. Deterministic in ``spec.seed``; each model draws from its own
    child seed.
    """
    root = np.random.SeedSequence(spec.seed)
    ex_seq, *model_seqs = root.spawn(1 + spec.n_models)
    rng = np.random.default_rng(ex_seq)
    d = spec.n_examples
    dims = spec.latent_rank - 1
    loadings = np.empty((d, dims))
    if dims:
        loadings[:, 0] = rng.uniform(0.5, 1.5, size=d)
        loadings[:, 1:] = rng.normal(scale=0.5, size=(d, dims - 1))
    intercepts = rng.normal(0.5, 1.0, size=d)
    n_neg = int(round(spec.trend_mix * d))
    signs = np.ones(d)
    signs[rng.permutation(d)[:n_neg]] = -1.0
    labels = rng.integers(0, spec.class_count, size=d)
    offsets = None if spec.family_offsets is None else np.array(spec.family_offsets)
    truth = SynthTruth(
        skills=np.empty((0, dims)), loadings=loadings, intercepts=intercepts,
        trend_signs=signs, families=np.empty(0, dtype=np.int64), labels=labels,
        class_count=spec.class_count, noise_sigma=float(spec.noise_sigma),
        family_offsets=offsets,
    )
    skills, families, conf = _draw_models(
        truth, [np.random.default_rng(s) for s in model_seqs], signs
    )
    truth = SynthTruth(
        skills, loadings, intercepts, signs, families, labels,
        spec.class_count, float(spec.noise_sigma), offsets,
    )
    tensor = _to_tensor(
        conf, labels, spec.class_count,
        [f"m{i:03d}" for i in range(spec.n_models)],
        [f"x{i:04d}" for i in range(d)],
    )
    return tensor, truth


def draw_models(truth: SynthTruth, n_models: int, seed: int, trend_signs=None,
                prefix: str = "t") -> tuple:
    """Draw further models over the same examples.

    ``trend_signs`` overrides the per-example trend directions, e.g.
    ``np.ones(d)`` for a population in which no negative trends exist.
    Returns ``(PredictionTensor, skills)``.
    """
    signs = truth.trend_signs if trend_signs is None else np.asarray(trend_signs, dtype=float)
    seqs = np.random.SeedSequence(seed).spawn(n_models)
    skills, _, conf = _draw_models(truth, [np.random.default_rng(s) for s in seqs], signs)
    tensor = _to_tensor(
        conf, truth.labels, truth.class_count,
        [f"{prefix}{i:03d}" for i in range(n_models)],
        [f"x{i:04d}" for i in range(truth.intercepts.size)],
    )
    return tensor, skills


def write_population(spec: SynthSpec, out_dir) -> Path:
    """Generate a population and write its tensor bundle plus ``truth.json``."""
    tensor, truth = generate_population(spec)
    out_dir = Path(out_dir)
    manifest = save_prediction_tensor(tensor, out_dir, stem="tensor")
    record = {"spec": asdict(spec), "truth": truth.to_dict()}
    (out_dir / "truth.json").write_text(json.dumps(record, indent=1) + "\n")
    return manifest
