"""Prediction tensors: data model, CSV/JSON bundles, validation and views.

A bundle on disk is a JSON manifest plus one dense CSV matrix per class
(rows are models, columns are examples) and a labels file with one integer
per line.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SUM_TOL = 1e-6
RENORM_TOL = 1e-3


class TensorFormatError(ValueError):
    """A bundle on disk cannot be parsed (bad JSON, shapes, non-numeric cells)."""


class TensorValueError(ValueError):
    """A bundle parses but its values break the tensor invariants."""


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PredictionTensor:
    """Class probabilities of ``N`` models on ``D`` examples over ``Y`` classes.

    ``probs`` has shape ``(N, D, Y)`` and ``labels`` holds the gold class of
    every example. Arrays are stored read-only.
    """

    model_ids: tuple
    example_ids: tuple
    class_count: int
    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "model_ids", tuple(str(m) for m in self.model_ids))
        object.__setattr__(self, "example_ids", tuple(str(e) for e in self.example_ids))
        object.__setattr__(self, "class_count", int(self.class_count))
        object.__setattr__(self, "probs", _frozen(self.probs, np.float64))
        object.__setattr__(self, "labels", _frozen(self.labels, np.int64))
        if self.probs.ndim != 3:
            raise ValueError(f"probs must be 3-D, got shape {self.probs.shape}")
        n, d, y = self.probs.shape
        if (n, d, y) != (len(self.model_ids), len(self.example_ids), self.class_count):
            raise ValueError(
                f"probs shape {self.probs.shape} does not match "
                f"({len(self.model_ids)}, {len(self.example_ids)}, {self.class_count})"
            )
        if self.labels.shape != (d,):
            raise ValueError(f"labels must have shape ({d},), got {self.labels.shape}")

    @property
    def n_models(self) -> int:
        return len(self.model_ids)

    @property
    def n_examples(self) -> int:
        return len(self.example_ids)

    def model_index(self, model_id) -> int:
        try:
            return self.model_ids.index(str(model_id))
        except ValueError:
            raise KeyError(f"unknown model id {model_id!r}") from None

    def subset_models(self, indices) -> "PredictionTensor":
        """Tensor restricted to the given model rows, in the given order."""
        idx = np.asarray(indices, dtype=np.int64)
        return PredictionTensor(
            model_ids=[self.model_ids[i] for i in idx],
            example_ids=self.example_ids,
            class_count=self.class_count,
            probs=self.probs[idx],
            labels=self.labels,
        )

    def predicted_labels(self) -> np.ndarray:
        """Argmax class per (model, example); ties go to the lowest class."""
        return np.argmax(self.probs, axis=2)


@dataclass(frozen=True)
class ConfidenceMatrix:
    """``N x D`` matrix of per-example probabilities for one class choice."""

    values: np.ndarray
    model_ids: tuple
    example_ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, np.float64))
        object.__setattr__(self, "model_ids", tuple(str(m) for m in self.model_ids))
        object.__setattr__(self, "example_ids", tuple(str(e) for e in self.example_ids))
        if self.values.shape != (len(self.model_ids), len(self.example_ids)):
            raise ValueError(
                f"values shape {self.values.shape} does not match id lists "
                f"({len(self.model_ids)}, {len(self.example_ids)})"
            )
        if self.values.size and (
            not np.all(np.isfinite(self.values))
            or self.values.min() < 0.0
            or self.values.max() > 1.0
        ):
            raise ValueError("confidence values must lie in [0, 1]")

    def subset_models(self, indices) -> "ConfidenceMatrix":
        idx = np.asarray(indices, dtype=np.int64)
        return ConfidenceMatrix(
            self.values[idx], [self.model_ids[i] for i in idx], self.example_ids
        )


@dataclass
class ValidationReport:
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "errors": [{"location": loc, "message": msg} for loc, msg in self.errors],
            "warnings": [{"location": loc, "message": msg} for loc, msg in self.warnings],
        }


def validate(tensor: PredictionTensor) -> ValidationReport:
    """Check every tensor invariant and report violations without raising.

    Rows whose probabilities sum to within ``1e-3`` (but not ``1e-6``) of one
    are reported as warnings; larger deviations are errors.
    """
    report = ValidationReport()
    n, d, y = tensor.probs.shape
    if n < 2:
        report.errors.append(("models", f"need at least 2 models, got {n}"))
    if d < 2:
        report.errors.append(("examples", f"need at least 2 examples, got {d}"))
    if y < 2:
        report.errors.append(("classes", f"need at least 2 classes, got {y}"))
    for kind, ids in (("model_ids", tensor.model_ids), ("example_ids", tensor.example_ids)):
        seen = set()
        for i in ids:
            if i in seen:
                report.errors.append((kind, f"duplicate id {i!r}"))
            seen.add(i)

    probs = tensor.probs
    bad = ~np.isfinite(probs) | (probs < -SUM_TOL) | (probs > 1.0 + SUM_TOL)
    for m, e, c in zip(*np.nonzero(bad)):
        report.errors.append(
            (
                f"model={tensor.model_ids[m]} example={tensor.example_ids[e]} class={c}",
                f"probability {probs[m, e, c]!r} outside [0, 1]",
            )
        )
    with np.errstate(invalid="ignore"):
        dev = np.abs(probs.sum(axis=2) - 1.0)
    for m, e in zip(*np.nonzero(~(dev <= RENORM_TOL))):
        report.errors.append(
            (
                f"model={tensor.model_ids[m]} example={tensor.example_ids[e]}",
                f"class probabilities sum to {probs[m, e].sum():.9g}",
            )
        )
    for m, e in zip(*np.nonzero((dev > SUM_TOL) & (dev <= RENORM_TOL))):
        report.warnings.append(
            (
                f"model={tensor.model_ids[m]} example={tensor.example_ids[e]}",
                f"class probabilities sum to {probs[m, e].sum():.9g}; renormalized on load",
            )
        )
    for e in np.nonzero((tensor.labels < 0) | (tensor.labels >= y))[0]:
        report.errors.append(
            (f"example={tensor.example_ids[e]}", f"label {tensor.labels[e]} outside [0, {y})")
        )
    return report


def correct_class_matrix(tensor: PredictionTensor) -> ConfidenceMatrix:
    """Probability each model assigns to the gold class of each example."""
    d = tensor.n_examples
    values = tensor.probs[:, np.arange(d), tensor.labels]
    return ConfidenceMatrix(values, tensor.model_ids, tensor.example_ids)


def class_slice(tensor: PredictionTensor, class_index: int) -> ConfidenceMatrix:
    """Probability each model assigns to class ``class_index`` on every example."""
    if not 0 <= class_index < tensor.class_count:
        raise IndexError(
            f"class index {class_index} out of range for {tensor.class_count} classes"
        )
    return ConfidenceMatrix(
        tensor.probs[:, :, class_index], tensor.model_ids, tensor.example_ids
    )


# -- file formats -----------------------------------------------------------


def _read_matrix_csv(path: Path, what: str) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(f"{what}: missing file {path}")
    rows = []
    with open(path, newline="") as fh:
        for r, row in enumerate(csv.reader(fh)):
            if not row or all(not cell.strip() for cell in row):
                continue
            parsed = []
            for c, cell in enumerate(row):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise TensorFormatError(
                        f"{what}: non-numeric cell {cell!r} at row {r}, column {c}"
                    ) from None
            rows.append(parsed)
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise TensorFormatError(f"{what}: ragged rows with widths {sorted(widths)}")
    return np.array(rows, dtype=np.float64).reshape(len(rows), widths.pop() if widths else 0)


def _read_labels(path: Path) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(f"labels: missing file {path}")
    labels = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            try:
                labels.append(int(s))
            except ValueError:
                raise TensorFormatError(
                    f"labels: non-integer value {s!r} on line {lineno}"
                ) from None
    return np.array(labels, dtype=np.int64)


def load_prediction_tensor(manifest_path, strict: bool = True) -> PredictionTensor:
    """Load a tensor bundle described by a JSON manifest.

    Paths inside the manifest are resolved relative to the manifest's own
    directory. Rows summing to within ``1e-3`` of one are renormalized.
    With ``strict=False`` values are returned exactly as read (no range,
    label or sum checks, no renormalization) so that :func:`validate` can
    report on them.

    Raises
    ------
    FileNotFoundError
        If the manifest or a referenced file is missing.
    TensorFormatError
        On unreadable JSON, dimension mismatches or non-numeric cells.
    TensorValueError
        On out-of-range probabilities, bad row sums or labels outside
        ``[0, Y)``.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"missing manifest {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise TensorFormatError(f"manifest is not valid JSON: {exc}") from None
    for key in ("model_ids", "example_ids", "class_count", "labels_file", "class_files"):
        if key not in manifest:
            raise TensorFormatError(f"manifest missing key {key!r}")
    base = manifest_path.parent
    model_ids = [str(m) for m in manifest["model_ids"]]
    example_ids = [str(e) for e in manifest["example_ids"]]
    y = int(manifest["class_count"])
    n, d = len(model_ids), len(example_ids)
    if len(manifest["class_files"]) != y:
        raise TensorFormatError(
            f"manifest lists {len(manifest['class_files'])} class files for class_count={y}"
        )

    probs = np.empty((n, d, y))
    for c, rel in enumerate(manifest["class_files"]):
        mat = _read_matrix_csv(base / rel, f"class {c}")
        if mat.shape != (n, d):
            raise TensorFormatError(
                f"dimension mismatch: class {c} file has shape {mat.shape}, expected ({n}, {d})"
            )
        probs[:, :, c] = mat
    labels = _read_labels(base / manifest["labels_file"])
    if labels.shape != (d,):
        raise TensorFormatError(
            f"dimension mismatch: labels file has {labels.size} entries, expected {d}"
        )
    if not strict:
        return PredictionTensor(model_ids, example_ids, y, probs, labels)

    out_of_range = ~np.isfinite(probs) | (probs < -SUM_TOL) | (probs > 1.0 + SUM_TOL)
    if out_of_range.any():
        m, e, c = (int(v) for v in np.argwhere(out_of_range)[0])
        raise TensorValueError(
            f"probability {probs[m, e, c]!r} out of range at "
            f"(model={model_ids[m]}, example={example_ids[e]}, class={c})"
        )
    bad_label = (labels < 0) | (labels >= y)
    if bad_label.any():
        e = int(np.argmax(bad_label))
        raise TensorValueError(
            f"label {labels[e]} outside [0, {y}) at example={example_ids[e]}"
        )
    probs = np.clip(probs, 0.0, 1.0)
    sums = probs.sum(axis=2)
    dev = np.abs(sums - 1.0)
    if (dev > RENORM_TOL).any():
        m, e = (int(v) for v in np.argwhere(dev > RENORM_TOL)[0])
        raise TensorValueError(
            f"class probabilities sum to {sums[m, e]:.9g} at "
            f"(model={model_ids[m]}, example={example_ids[e]})"
        )
    renorm = dev > SUM_TOL
    if renorm.any():
        probs[renorm] /= sums[renorm][:, None]
    return PredictionTensor(model_ids, example_ids, y, probs, labels)


def save_prediction_tensor(tensor: PredictionTensor, out_dir, stem: str = "tensor") -> Path:
    """Write a tensor as a manifest bundle in ``out_dir``; returns the manifest path.

    Values are written with 17 significant digits, so loading reproduces
    ``probs`` bitwise.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    class_files = []
    for c in range(tensor.class_count):
        name = f"{stem}_class{c}.csv"
        write_matrix_csv(out_dir / name, tensor.probs[:, :, c])
        class_files.append(name)
    labels_name = f"{stem}_labels.txt"
    with open(out_dir / labels_name, "w") as fh:
        fh.writelines(f"{int(v)}\n" for v in tensor.labels)
    manifest = {
        "model_ids": list(tensor.model_ids),
        "example_ids": list(tensor.example_ids),
        "class_count": tensor.class_count,
        "labels_file": labels_name,
        "class_files": class_files,
    }
    path = out_dir / f"{stem}.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def format_float(x: float) -> str:
    return repr(float(x))


def write_matrix_csv(path, matrix) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in matrix:
            writer.writerow([format_float(v) for v in row])


def read_matrix_csv(path) -> np.ndarray:
    return _read_matrix_csv(Path(path), os.fspath(path))


def read_embeddings(path, n_examples: int) -> np.ndarray:
    """Embedding matrix CSV: one row per example in manifest order, no header."""
    emb = read_matrix_csv(path)
    if emb.shape[0] != n_examples:
        raise TensorFormatError(
            f"embeddings have {emb.shape[0]} rows, expected {n_examples}"
        )
    if not np.all(np.isfinite(emb)):
        raise TensorFormatError("embeddings contain non-finite values")
    return emb


def read_wide_csv(path) -> tuple:
    """Read ``model_id,<col ids...>`` CSVs; returns (row ids, column ids, values)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing file {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TensorFormatError(f"{path}: empty file") from None
        cols = [h.strip() for h in header[1:]]
        row_ids, values = [], []
        for r, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise TensorFormatError(f"{path}: line {r} has {len(row)} fields")
            row_ids.append(row[0].strip())
            try:
                values.append([float(v) for v in row[1:]])
            except ValueError:
                raise TensorFormatError(f"{path}: non-numeric cell on line {r}") from None
    arr = np.array(values, dtype=np.float64).reshape(len(row_ids), len(cols))
    if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1):
        raise TensorValueError(f"{path}: values must lie in [0, 1]")
    return row_ids, cols, arr


def write_wide_csv(path, row_ids, col_ids, values) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["model_id", *col_ids])
        for rid, row in zip(row_ids, np.asarray(values, dtype=np.float64)):
            writer.writerow([rid, *(format_float(v) for v in row)])
