"""Localization error distributions and the environment-similarity estimate."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel_sim import Environment, grid_positions, sample_positions, synthesize_channels
from .da_pipeline import LabeledDataset, TrainedModel, predict
from .fingerprint import adcm

DEFAULT_PERCENTILES = (10, 20, 30, 40, 50, 60, 70, 80, 90, 95, 100)
HEADLINE_PERCENTILE = 80


@dataclass
class ErrorReport:
    errors: np.ndarray  # meters, sorted ascending
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        e = np.sort(np.asarray(self.errors, dtype=float).ravel())
        if e.size == 0:
            raise ValueError("error report needs at least one sample")
        if not np.all(np.isfinite(e)) or e[0] < 0:
            raise ValueError("errors must be finite and non-negative")
        self.errors = e

    def __len__(self):
        return self.errors.size

    def percentile(self, q: float) -> float:
        """Linear interpolation between closest ranks."""
        if not 0 <= q <= 100:
            raise ValueError(f"percentile must be in [0, 100], got {q}")
        return float(np.percentile(self.errors, q, method="linear"))

    def percentile_table(self, qs=DEFAULT_PERCENTILES) -> dict[float, float]:
        return {q: self.percentile(q) for q in qs}

    def cdf(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.errors.size
        return self.errors.copy(), np.arange(1, n + 1) / n


def error_report(predicted, truth, provenance: dict | None = None) -> ErrorReport:
    predicted, truth = np.asarray(predicted, float), np.asarray(truth, float)
    if predicted.shape != truth.shape or predicted.shape[-1] != 2:
        raise ValueError(f"shape mismatch: {predicted.shape} vs {truth.shape}")
    return ErrorReport(np.linalg.norm(predicted - truth, axis=-1), dict(provenance or {}))


def localization_errors(model: TrainedModel, test, provenance: dict | None = None) -> ErrorReport:
    if not isinstance(test, LabeledDataset):
        raise TypeError("evaluation needs a test set with locations")
    prov = {"method": model.method, "seed": model.config.seed, **test.provenance}
    prov.update(provenance or {})
    return error_report(predict(model, test.fingerprints), test.locations, prov)


@dataclass
class SimilarityEstimate:
    value: float  # meters
    n_samples: int
    estimator: str
    env_pair: tuple[str, str]
    seed: int
    mode: str = "random"
    gaps: np.ndarray | None = field(default=None, repr=False)

    def running_max(self) -> np.ndarray:
        if self.gaps is None:
            raise ValueError("per-sample gaps were not kept")
        return np.maximum.accumulate(self.gaps)


def prediction_gaps(model: TrainedModel, env_a: Environment, env_b: Environment,
                    positions, chunk: int = 500) -> np.ndarray:
    """Per-position ||g(H_a(P)) - g(H_b(P))|| in meters."""
    if env_a.array != env_b.array:
        raise ValueError("environments use different array configurations")
    positions = np.asarray(positions, float)
    gaps = np.empty(len(positions))
    for s in range(0, len(positions), chunk):
        p = positions[s : s + chunk]
        pa = predict(model, adcm(synthesize_channels(env_a, p)))
        pb = predict(model, adcm(synthesize_channels(env_b, p)))
        gaps[s : s + chunk] = np.linalg.norm(pa - pb, axis=1)
    return gaps


def similarity(model: TrainedModel, env_a: Environment, env_b: Environment, n_samples: int = 5000,
               seed: int = 0, *, grid: bool = False, estimator: str | None = None) -> SimilarityEstimate:
    """Sample-maximum approximation of sup_P ||g(H_a(P)) - g(H_b(P))||.

    Random mode draws ``n_samples`` seeded uniform positions, so a longer run
    extends a shorter one.  Grid mode sweeps a square lattice with about
    ``n_samples`` points.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if env_a.area != env_b.area:
        raise ValueError("environments cover different areas")
    if grid:
        side = max(1, int(round(np.sqrt(n_samples))))
        positions = grid_positions(env_a.area, side)
    else:
        positions = sample_positions(env_a.area, n_samples, seed)
    gaps = prediction_gaps(model, env_a, env_b, positions)
    return SimilarityEstimate(float(gaps.max()), len(gaps), estimator or model.method,
                              (env_a.time_label, env_b.time_label), seed,
                              "grid" if grid else "random", gaps)


# ---------------------------------------------------------------------------
# CSV export


def export_report(report, path) -> None:
    """ErrorReport -> CDF rows (error, cumulative_fraction); SimilarityEstimate -> one row."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if isinstance(report, ErrorReport):
            w.writerow(["error_m", "cumulative_fraction"])
            for e, f in zip(*report.cdf()):
                w.writerow([repr(float(e)), repr(float(f))])
        elif isinstance(report, SimilarityEstimate):
            w.writerow(["sigma_m", "n_samples", "estimator", "env_a", "env_b", "seed", "mode"])
            w.writerow([repr(report.value), report.n_samples, report.estimator, *report.env_pair,
                        report.seed, report.mode])
        else:
            raise TypeError(f"cannot export {type(report).__name__}")


def export_percentiles(report: ErrorReport, path, qs=DEFAULT_PERCENTILES) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["percentile", "error_m"])
        for q, v in report.percentile_table(qs).items():
            w.writerow([q, repr(v)])


def load_report(path) -> ErrorReport:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["error_m", "cumulative_fraction"]:
        raise ValueError(f"{path} is not an error-report CSV")
    return ErrorReport(np.array([float(r[0]) for r in rows[1:]]), {"source": str(path)})


def load_similarity(path) -> SimilarityEstimate:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) != 2 or rows[0][0] != "sigma_m":
        raise ValueError(f"{path} is not a similarity CSV")
    v, n, est, a, b, seed, mode = rows[1]
    return SimilarityEstimate(float(v), int(n), est, (a, b), int(seed), mode)
