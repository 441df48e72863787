"""Prediction error measures and distribution comparisons.

Per run and channel the toolkit reports a time-normalized L2 error and the
worst pointwise error; across a validation ensemble those collapse to
quartile summaries.  Distribution fidelity is measured as the L1 distance
between normalized histograms on a shared binning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

QUANTILE_LEVELS = (0.25, 0.5, 0.75)


def l2_error(truth: np.ndarray, prediction: np.ndarray) -> float:
    """Root of the time-mean squared error, sqrt(mean((y - yhat)^2))."""
    y = np.asarray(truth, dtype=float)
    yh = np.asarray(prediction, dtype=float)
    if y.shape != yh.shape or y.ndim != 1 or y.size == 0:
        raise ValueError("truth and prediction must be equal-length non-empty 1-d series")
    return float(np.sqrt(np.mean((y - yh) ** 2)))


def linf_error(truth: np.ndarray, prediction: np.ndarray) -> float:
    """Largest pointwise absolute error, max |y - yhat|."""
    y = np.asarray(truth, dtype=float)
    yh = np.asarray(prediction, dtype=float)
    if y.shape != yh.shape or y.ndim != 1 or y.size == 0:
        raise ValueError("truth and prediction must be equal-length non-empty 1-d series")
    return float(np.max(np.abs(y - yh)))


@dataclass(frozen=True)
class RunError:
    """Per-channel errors of one validation run."""

    run_index: int
    l2: np.ndarray
    linf: np.ndarray

    def __post_init__(self) -> None:
        l2 = np.asarray(self.l2, dtype=float)
        li = np.asarray(self.linf, dtype=float)
        if l2.shape != li.shape or l2.ndim != 1:
            raise ValueError("l2 and linf must be 1-d arrays of equal length")
        object.__setattr__(self, "l2", l2)
        object.__setattr__(self, "linf", li)


def run_errors(truth: np.ndarray, prediction: np.ndarray, run_index: int = 0) -> RunError:
    """Both error measures for every channel of one (T, C) run."""
    y = np.asarray(truth, dtype=float)
    yh = np.asarray(prediction, dtype=float)
    if y.shape != yh.shape or y.ndim != 2:
        raise ValueError("truth and prediction must be matching (T, C) arrays")
    l2 = np.sqrt(np.mean((y - yh) ** 2, axis=0))
    li = np.max(np.abs(y - yh), axis=0)
    return RunError(run_index=run_index, l2=l2, linf=li)


def error_quantiles(values) -> dict:
    """Quartiles {q25, median, q75} with linear interpolation."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("cannot take quantiles of an empty set")
    q25, q50, q75 = np.quantile(arr, QUANTILE_LEVELS, method="linear")
    return {"q25": float(q25), "median": float(q50), "q75": float(q75)}


@dataclass(frozen=True)
class PdfEstimate:
    """A normalized histogram: shared bin edges plus per-bin density."""

    edges: np.ndarray
    density: np.ndarray

    def __post_init__(self) -> None:
        edges = np.asarray(self.edges, dtype=float)
        dens = np.asarray(self.density, dtype=float)
        if edges.ndim != 1 or edges.shape[0] < 2:
            raise ValueError("edges must be a 1-d array of at least two values")
        if dens.shape != (edges.shape[0] - 1,):
            raise ValueError("density must have one value per bin")
        if np.any(np.diff(edges) <= 0.0):
            raise ValueError("edges must be strictly increasing")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "density", dens)

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])


def freedman_diaconis_edges(
    samples: np.ndarray, max_bins: int | None = None, min_bins: int = 4
) -> np.ndarray:
    """Equal-width bin edges from the Freedman-Diaconis rule.

    Width is 2 IQR / n^(1/3) computed on ``samples``; the bin count is
    clamped into [min_bins, max_bins].  The cap matters for long correlated
    series, where the nominal rule produces more bins than the effective
    sample count supports.
    """
    arr = np.asarray(samples, dtype=float).ravel()
    if arr.size < 2:
        raise ValueError("need at least two samples to bin")
    lo, hi = float(arr.min()), float(arr.max())
    if hi <= lo:
        raise ValueError("samples have zero range")
    q75, q25 = np.percentile(arr, [75.0, 25.0])
    iqr = q75 - q25
    width = 2.0 * iqr / arr.size ** (1.0 / 3.0)
    if width <= 0.0:
        n_bins = min_bins
    else:
        n_bins = int(np.ceil((hi - lo) / width))
    n_bins = max(min_bins, n_bins)
    if max_bins is not None:
        n_bins = min(n_bins, max_bins)
    return np.linspace(lo, hi, n_bins + 1)


def pdf_estimate(samples: np.ndarray, edges: np.ndarray) -> PdfEstimate:
    """Normalized histogram of ``samples`` on the given edges.

    Values outside the edge range are clipped into the first or last bin so
    two estimates on shared edges integrate to the same total mass.
    """
    arr = np.asarray(samples, dtype=float).ravel()
    if arr.size < 2:
        raise ValueError("need at least two samples")
    edges = np.asarray(edges, dtype=float)
    clipped = np.clip(arr, edges[0], edges[-1])
    density, _ = np.histogram(clipped, bins=edges, density=True)
    return PdfEstimate(edges=edges, density=density)


def pdf_l1_distance(p: PdfEstimate, q: PdfEstimate) -> float:
    """Integrated absolute density difference; 0 for identical, at most 2."""
    if p.edges.shape != q.edges.shape or not np.allclose(p.edges, q.edges, rtol=0.0, atol=1e-12):
        raise ValueError("estimates must share identical bin edges")
    return float(np.sum(np.abs(p.density - q.density) * p.widths))


def tail_l1_distance(p: PdfEstimate, q: PdfEstimate, lower: float, upper: float) -> float:
    """L1 distance restricted to bins centered outside [lower, upper]."""
    if p.edges.shape != q.edges.shape or not np.allclose(p.edges, q.edges, rtol=0.0, atol=1e-12):
        raise ValueError("estimates must share identical bin edges")
    centers = p.centers
    mask = (centers < lower) | (centers > upper)
    return float(np.sum(np.abs(p.density[mask] - q.density[mask]) * p.widths[mask]))
