"""Anchor point maps: classical MDS layout of the correlation distance and SVG output."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .anchors import AnchorSet
from .corr import CorrelationModel

LOW_COLOR = (0xC0, 0x39, 0x2B)
MID_COLOR = (0xFF, 0xFF, 0xFF)
HIGH_COLOR = (0x29, 0x80, 0xB9)


class MDSDimensionWarning(UserWarning):
    """Fewer positive eigenvalues than requested output dimensions."""


@dataclass(frozen=True)
class MapCoordinates:
    coords: np.ndarray
    stress: float
    dims_retained: int
    eigenvalues: np.ndarray
    example_ids: tuple = ()

    def to_csv(self, path) -> None:
        ids = self.example_ids or tuple(str(i) for i in range(len(self.coords)))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["example_id"] + [("x", "y", "z")[i] if i < 3 else f"c{i}"
                                         for i in range(self.coords.shape[1])])
            for eid, row in zip(ids, self.coords):
                w.writerow([eid, *(repr(float(v)) for v in row)])


def _orient(coords: np.ndarray) -> np.ndarray:
    """Flip columns so each one's first clearly nonzero entry is positive."""
    out = coords.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        scale = np.abs(col).max()
        nz = np.flatnonzero(np.abs(col) > 1e-9 * max(scale, 1.0))
        if nz.size and col[nz[0]] < 0:
            out[:, j] = -col
    return out


def _torgerson(dist: np.ndarray, dims: int):
    n = dist.shape[0]
    sq = dist**2
    row = sq.mean(axis=1)
    b = -0.5 * (sq - row[:, None] - row[None, :] + sq.mean())
    b = 0.5 * (b + b.T)
    evals, evecs = np.linalg.eigh(b)
    order = np.argsort(-evals, kind="stable")
    evals, evecs = evals[order], evecs[:, order]
    tol = 1e-10 * max(abs(evals).max(), 1e-300) if n else 0.0
    positive = int(np.count_nonzero(evals > tol))
    keep = min(dims, positive)
    coords = np.zeros((n, dims))
    coords[:, :keep] = evecs[:, :keep] * np.sqrt(evals[:keep])
    return coords, evals, keep


def _stress(dist: np.ndarray, coords: np.ndarray) -> float:
    iu = np.triu_indices(dist.shape[0], 1)
    diff = coords[:, None, :] - coords[None, :, :]
    emb = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))[iu]
    ref = dist[iu]
    denom = float(np.sum(ref * ref))
    if denom == 0.0:
        return 0.0
    return float(np.sqrt(np.sum((emb - ref) ** 2) / denom))


def mds_coordinates(cm, out_dims: int = 2, intermediate_dims: int = 0) -> MapCoordinates:
    """Classical (Torgerson) MDS of a distance matrix.

    With ``intermediate_dims > 0`` the points are first embedded in that many
    dimensions and then reduced to ``out_dims`` by principal components.
    Columns come out centred, ordered by decreasing variance, and oriented
    so the first clearly nonzero entry of each column is positive. Missing
    positive eigenvalues are padded with zero columns (with a warning).
    """
    if isinstance(cm, CorrelationModel):
        dist, ids = np.asarray(cm.dist), cm.example_ids
    else:
        dist, ids = np.asarray(cm, dtype=np.float64), ()
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise ValueError(f"distance matrix must be square, got {dist.shape}")
    if out_dims < 1:
        raise ValueError("out_dims must be at least 1")
    if intermediate_dims < 0:
        raise ValueError("intermediate_dims must be non-negative")

    first = intermediate_dims if intermediate_dims > 0 else out_dims
    coords, evals, keep = _torgerson(dist, max(first, out_dims))
    if intermediate_dims > 0:
        high = coords[:, :intermediate_dims]
        high = high - high.mean(axis=0)
        _, _, vt = np.linalg.svd(high, full_matrices=False)
        proj = high @ vt[:out_dims].T
        coords = np.zeros((dist.shape[0], out_dims))
        coords[:, : proj.shape[1]] = proj
        keep = min(keep, intermediate_dims)
    coords = coords[:, :out_dims]
    if keep < out_dims:
        warnings.warn(
            f"only {keep} positive eigenvalues; padding to {out_dims} dimensions with zeros",
            MDSDimensionWarning,
            stacklevel=2,
        )
    coords = coords - coords.mean(axis=0)
    coords = _orient(coords)
    return MapCoordinates(coords, _stress(dist, coords), keep, evals, ids)


class ClassicalMDS(BaseEstimator):
    """Estimator wrapper around :func:`mds_coordinates` for precomputed distances."""

    def __init__(self, n_components=2, intermediate_dims=0):
        self.n_components = n_components
        self.intermediate_dims = intermediate_dims

    def fit(self, X, y=None):
        X = check_array(X)
        result = mds_coordinates(X, self.n_components, self.intermediate_dims)
        self.embedding_ = result.coords
        self.stress_ = result.stress
        self.eigenvalues_ = result.eigenvalues
        return self

    def fit_transform(self, X, y=None):
        return self.fit(X).embedding_

    def transform(self, X=None):
        check_is_fitted(self, "embedding_")
        return self.embedding_


# -- SVG rendering ----------------------------------------------------------


def diverging_color(value: float) -> str:
    """Red (0) to white (0.5) to blue (1) as a hex colour string."""
    v = float(value)
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"colour value {v} outside [0, 1]")
    if v <= 0.5:
        lo, hi, t = LOW_COLOR, MID_COLOR, v / 0.5
    else:
        lo, hi, t = MID_COLOR, HIGH_COLOR, (v - 0.5) / 0.5
    rgb = (int(round(a + (b - a) * t)) for a, b in zip(lo, hi))
    return "#" + "".join(f"{c:02x}" for c in rgb)


def _fmt(x: float) -> str:
    s = f"{x:.2f}"
    return "0.00" if s == "-0.00" else s


def render_map(coords, colors, anchors: AnchorSet | None = None, out_path=None,
               title: str = "", width: int = 640, height: int = 600) -> str:
    """Render a coloured scatter map as SVG; returns the text and writes ``out_path``.

    Circles mark ordinary examples, triangles mark anchors. Output is a pure
    function of the inputs.
    """
    xy = coords.coords if isinstance(coords, MapCoordinates) else np.asarray(coords, dtype=np.float64)
    if xy.ndim != 2 or xy.shape[1] < 1:
        raise ValueError("coordinates must be an (n, 2) array")
    if xy.shape[1] == 1:
        xy = np.column_stack([xy[:, 0], np.zeros(len(xy))])
    xy = xy[:, :2]
    colors = np.asarray(colors, dtype=np.float64)
    if colors.shape != (len(xy),):
        raise ValueError(f"need {len(xy)} colour values, got {colors.shape}")
    fills = [diverging_color(c) for c in colors]
    is_anchor = np.zeros(len(xy), dtype=bool)
    if anchors is not None:
        if anchors.n_examples != len(xy):
            raise ValueError("anchor set does not match the number of points")
        is_anchor[list(anchors.medoids)] = True

    margin, legend_h, title_h = 40, 60, 30
    plot_w = width - 2 * margin
    plot_h = height - 2 * margin - legend_h - title_h
    lo = xy.min(axis=0)
    span = xy.max(axis=0) - lo
    scale = min(plot_w / span[0] if span[0] > 0 else np.inf,
                plot_h / span[1] if span[1] > 0 else np.inf)
    if not np.isfinite(scale):
        scale = 1.0
    off_x = margin + (plot_w - span[0] * scale) / 2
    off_y = margin + title_h + (plot_h - span[1] * scale) / 2
    px = off_x + (xy[:, 0] - lo[0]) * scale
    py = off_y + (lo[1] + span[1] - xy[:, 1]) * scale

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        "<defs>",
        '<linearGradient id="scale" x1="0" y1="0" x2="1" y2="0">',
        f'<stop offset="0" stop-color="{diverging_color(0.0)}"/>',
        f'<stop offset="0.5" stop-color="{diverging_color(0.5)}"/>',
        f'<stop offset="1" stop-color="{diverging_color(1.0)}"/>',
        "</linearGradient>",
        "</defs>",
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        f'<text x="{width / 2:.2f}" y="{margin:.2f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="16">{escape(title)}</text>',
        '<g id="points" stroke="#555555" stroke-width="0.5">',
    ]
    r = 4.0
    for i in np.flatnonzero(~is_anchor):
        out.append(f'<circle cx="{_fmt(px[i])}" cy="{_fmt(py[i])}" r="{r:.1f}" fill="{fills[i]}"/>')
    out.append("</g>")
    out.append('<g id="anchors" stroke="#1e7d32" stroke-width="1.5">')
    t = 7.0
    for i in np.flatnonzero(is_anchor):
        pts = [(px[i], py[i] - t), (px[i] - t * 0.866, py[i] + t * 0.5), (px[i] + t * 0.866, py[i] + t * 0.5)]
        coords_txt = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in pts)
        out.append(f'<polygon points="{coords_txt}" fill="{fills[i]}"/>')
    out.append("</g>")
    bar_y = height - margin - legend_h + 20
    bar_w = plot_w / 2
    bar_x = (width - bar_w) / 2
    out += [
        '<g id="legend" font-family="sans-serif" font-size="11">',
        f'<rect x="{_fmt(bar_x)}" y="{_fmt(bar_y)}" width="{_fmt(bar_w)}" height="12" '
        'fill="url(#scale)" stroke="#555555" stroke-width="0.5"/>',
    ]
    for frac, label in ((0.0, "0"), (0.5, "0.5"), (1.0, "1")):
        out.append(
            f'<text x="{_fmt(bar_x + frac * bar_w)}" y="{_fmt(bar_y + 26)}" '
            f'text-anchor="middle">{label}</text>'
        )
    out.append(
        f'<text x="{_fmt(bar_x + bar_w / 2)}" y="{_fmt(bar_y - 6)}" text-anchor="middle">'
        "confidence in the gold class</text>"
    )
    out += ["</g>", "</svg>", ""]
    text = "\n".join(out)
    if out_path is not None:
        with open(Path(out_path), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    return text
