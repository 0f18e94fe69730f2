"""Ensemble aggregation, calibration and point metrics, and the rollout evaluation protocol."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .autodiff import no_grad
from .data.dataset import TrajectorySet, make_bundled_windows, stack_windows
from .errors import ConfigError, ContractError, DegenerateTargetError
from .model import SurrogateModel

SIGMA_MIN = 1e-4
DEFAULT_BINS = 100
INTERVAL_Z = 1.96
MAX_INTERVAL_RECORDS = 2000
CURVE_KINDS = ("quantile", "interval")


@dataclass
class PredictiveSet:
    """Flattened predictive means, standard deviations and observations.

    Consecutive runs of ``sample_size`` elements form one sample for the
    per-sample relative L2; by default the whole set is one sample.
    """

    mu: np.ndarray
    sigma: np.ndarray
    y: np.ndarray
    sample_size: int | None = None
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).ravel()
        self.sigma = np.asarray(self.sigma, dtype=float).ravel()
        self.y = np.asarray(self.y, dtype=float).ravel()
        n = self.mu.size
        if n < 1 or self.sigma.size != n or self.y.size != n:
            raise ConfigError(f"mu, sigma and y must share a positive length, got {n}, {self.sigma.size}, {self.y.size}")
        if not (np.isfinite(self.mu).all() and np.isfinite(self.sigma).all() and np.isfinite(self.y).all()):
            raise ConfigError("predictive set contains non-finite values")
        if (self.sigma <= 0).any():
            raise ConfigError("predicted standard deviations must be strictly positive")
        if self.sample_size is None:
            self.sample_size = n
        if n % self.sample_size:
            raise ConfigError(f"length {n} is not a multiple of sample size {self.sample_size}")

    def __len__(self) -> int:
        return self.mu.size


def ensemble_aggregate(members: Sequence[tuple], sigma_min: float = SIGMA_MIN) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian-mixture moments of K members ``(mu_i, sigma_i)``; ``sigma_i=None`` means zero."""
    if len(members) == 0:
        raise ConfigError("ensemble_aggregate needs at least one member")
    mus = np.stack([np.asarray(m[0], dtype=float) for m in members])
    sigmas = np.stack([np.zeros_like(mus[0]) if m[1] is None else np.asarray(m[1], dtype=float)
                       for m in members])
    mu = mus.mean(axis=0)
    # mean_i sigma_i^2 + mean_i (mu_i - mu)^2, the cancellation-free form of the mixture variance
    var = (sigmas**2).mean(axis=0) + ((mus - mu) ** 2).mean(axis=0)
    return mu, np.maximum(np.sqrt(var), sigma_min)


# -- calibration ---------------------------------------------------------------


def expected_proportions(bins: int = DEFAULT_BINS) -> np.ndarray:
    if bins < 2:
        raise ConfigError(f"calibration needs at least 2 bins, got {bins}")
    return np.linspace(0.0, 1.0, bins)


def _scores(mu, sigma, y, kind: str) -> np.ndarray:
    if kind not in CURVE_KINDS:
        raise ConfigError(f"unknown calibration kind {kind!r}")
    u = ndtr((y - mu) / sigma)
    return u if kind == "quantile" else np.abs(2.0 * u - 1.0)


def _counts(scores: np.ndarray, p: np.ndarray) -> np.ndarray:
    return np.searchsorted(np.sort(scores), p, side="right").astype(np.int64)


def calibration_curve(ps: PredictiveSet, bins: int = DEFAULT_BINS, kind: str = "quantile") -> tuple[np.ndarray, np.ndarray]:
    """Expected versus observed proportions.

    ``quantile``: ``o_j`` is the fraction with ``Phi((y - mu) / sigma) <= p_j``.
    ``interval``: ``o_j`` is the fraction inside the centered ``p_j`` interval.
    """
    p = expected_proportions(bins)
    if (ps.sigma <= 0).any():
        raise ConfigError("calibration requires strictly positive sigma")
    return p, _counts(_scores(ps.mu, ps.sigma, ps.y, kind), p) / len(ps)


def calibration_metrics(p: np.ndarray, o: np.ndarray) -> tuple[float, float, float]:
    """``(MA, MACE, RMSCE)``: trapezoidal area, mean and RMS of ``|o - p|``."""
    p, o = np.asarray(p, dtype=float), np.asarray(o, dtype=float)
    gap = np.abs(o - p)
    return float(np.trapezoid(gap, p)), float(gap.mean()), float(np.sqrt((gap**2).mean()))


def point_metrics(ps: PredictiveSet) -> tuple[float, float]:
    """``(relative L2, MAE)``; relative L2 is averaged over samples."""
    err = (ps.mu - ps.y).reshape(-1, ps.sample_size)
    ref = np.linalg.norm(ps.y.reshape(-1, ps.sample_size), axis=1)
    if (ref == 0).any():
        raise DegenerateTargetError("relative L2 undefined: a target sample has zero norm")
    return float((np.linalg.norm(err, axis=1) / ref).mean()), float(np.abs(ps.mu - ps.y).mean())


def _sorted_norms(rows: np.ndarray) -> np.ndarray:
    """Row-wise L2 norms summed in sorted order, so they do not depend on element order."""
    scale = np.abs(rows).max(axis=1, keepdims=True)
    safe = np.where(scale > 0, scale, 1.0)
    return np.sqrt(np.sort((rows / safe) ** 2, axis=1).sum(axis=1)) * scale[:, 0]


class CalibrationAccumulator:
    """Streaming pooled metrics with integer bin counts, so merging is exactly associative."""

    def __init__(self, bins: int = DEFAULT_BINS, kind: str = "quantile"):
        self.p = expected_proportions(bins)
        self.kind = kind
        self.counts = np.zeros(bins, dtype=np.int64)
        self.n = 0
        self.abs_err: list[np.ndarray] = []
        self.rel_l2: list[np.ndarray] = []

    def add(self, ps: PredictiveSet) -> "CalibrationAccumulator":
        self.counts += _counts(_scores(ps.mu, ps.sigma, ps.y, self.kind), self.p)
        self.n += len(ps)
        err = (ps.mu - ps.y).reshape(-1, ps.sample_size)
        ref = _sorted_norms(ps.y.reshape(-1, ps.sample_size))
        if (ref == 0).any():
            raise DegenerateTargetError("relative L2 undefined: a target sample has zero norm")
        self.rel_l2.append(_sorted_norms(err) / ref)
        self.abs_err.append(np.abs(err).ravel())
        return self

    def merge(self, other: "CalibrationAccumulator") -> "CalibrationAccumulator":
        if other.kind != self.kind or other.p.size != self.p.size:
            raise ConfigError("cannot merge accumulators with different binning")
        out = CalibrationAccumulator(self.p.size, self.kind)
        out.counts = self.counts + other.counts
        out.n = self.n + other.n
        out.abs_err = self.abs_err + other.abs_err
        out.rel_l2 = self.rel_l2 + other.rel_l2
        return out

    def metrics(self) -> dict:
        if self.n == 0:
            raise ConfigError("no predictions accumulated")
        o = self.counts / self.n
        ma, mace, rmsce = calibration_metrics(self.p, o)
        # exactly rounded sums keep the pooled values independent of accumulation order
        rel = np.concatenate(self.rel_l2)
        l2 = math.fsum(rel) / rel.size
        mae = math.fsum(np.concatenate(self.abs_err)) / self.n
        return {"MA": ma, "MACE": mace, "RMSCE": rmsce, "L2": l2, "MAE": mae,
                "n": self.n, "p": self.p, "o": o}


# -- report --------------------------------------------------------------------


def ordered_intervals(ps: PredictiveSet, max_records: int = MAX_INTERVAL_RECORDS) -> dict[str, np.ndarray]:
    """Centered 95% intervals sorted by half-width, evenly thinned to ``max_records``."""
    half = INTERVAL_Z * ps.sigma
    order = np.lexsort((ps.y, ps.mu, half))
    if order.size > max_records:
        order = order[np.linspace(0, order.size - 1, max_records).round().astype(int)]
    return {"half_width": half[order], "center": ps.mu[order], "truth": ps.y[order]}


@dataclass
class CalibrationReport:
    p: np.ndarray
    o: np.ndarray
    MA: float
    MACE: float
    RMSCE: float
    L2: float
    MAE: float
    n: int
    intervals: dict[str, np.ndarray] = field(default_factory=dict)
    per_step: list[dict] = field(default_factory=list)
    tags: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"MA": self.MA, "MACE": self.MACE, "RMSCE": self.RMSCE, "L2": self.L2, "MAE": self.MAE,
                "n": self.n, "tags": self.tags}

    def to_dict(self) -> dict:
        return {**self.summary(), "calibration_curve": {"p": self.p.tolist(), "o": self.o.tolist()},
                "per_step": self.per_step}

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        _write_csv(out / "calibration_curve.csv", ["expected", "observed"], zip(self.p, self.o))
        cols = ["half_width", "center", "truth"]
        _write_csv(out / "ordered_intervals.csv", cols, zip(*(self.intervals.get(c, []) for c in cols)))
        step_cols = ["step", "MA", "MACE", "RMSCE", "L2", "MAE", "n"]
        _write_csv(out / "per_step_metrics.csv", step_cols, ([r[c] for c in step_cols] for r in self.per_step))
        return out

    @classmethod
    def load(cls, out_dir) -> "CalibrationReport":
        out = Path(out_dir)
        d = json.loads((out / "report.json").read_text())
        iv = np.loadtxt(out / "ordered_intervals.csv", delimiter=",", skiprows=1, ndmin=2)
        intervals = {c: iv[:, i] for i, c in enumerate(["half_width", "center", "truth"])} if iv.size else {}
        curve = d["calibration_curve"]
        return cls(np.array(curve["p"]), np.array(curve["o"]), d["MA"], d["MACE"], d["RMSCE"], d["L2"],
                   d["MAE"], d["n"], intervals, d["per_step"], d.get("tags", {}))


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if not isinstance(v, (int, np.integer)) else int(v) for v in row])


def build_report(steps: Sequence[PredictiveSet], bins: int = DEFAULT_BINS, kind: str = "quantile",
                 tags: dict | None = None) -> CalibrationReport:
    """Pool every step's predictions into one report and keep per-step metric series."""
    if not steps:
        raise ConfigError("no predictions to report")
    pooled = CalibrationAccumulator(bins, kind)
    per_step = []
    for m, ps in enumerate(steps, start=1):
        acc = CalibrationAccumulator(bins, kind).add(ps)
        met = acc.metrics()
        per_step.append({"step": m, **{k: met[k] for k in ("MA", "MACE", "RMSCE", "L2", "MAE", "n")}})
        pooled = pooled.merge(acc)
    met = pooled.metrics()
    everything = PredictiveSet(np.concatenate([s.mu for s in steps]), np.concatenate([s.sigma for s in steps]),
                               np.concatenate([s.y for s in steps]))
    return CalibrationReport(met["p"], met["o"], met["MA"], met["MACE"], met["RMSCE"], met["L2"], met["MAE"],
                             met["n"], ordered_intervals(everything), per_step, dict(tags or {}))


# -- rollout protocol ----------------------------------------------------------


def _check_compatible(models: Sequence[SurrogateModel]) -> None:
    if not models:
        raise ConfigError("evaluation needs at least one model")
    ref = models[0].config
    for m in models[1:]:
        c = m.config
        if (c.n, c.history, c.bundle, c.p_dim) != (ref.n, ref.history, ref.bundle, ref.p_dim):
            raise ContractError("ensemble members disagree on grid, history, bundle or static width")


def ensemble_rollout(models: Sequence[SurrogateModel], inputs: np.ndarray, steps: int,
                     mode: str = "autoregressive", truth: np.ndarray | None = None,
                     sigma_min: float = SIGMA_MIN, p=None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Aggregated ``(mu*, sigma*)`` per rollout step, each ``[B, S, N, N]``."""
    _check_compatible(models)
    per_model = []
    with no_grad():
        for m in models:
            out = m.rollout(inputs, steps, p=p, mode=mode, truth=truth)
            per_model.append([(mu.data, None if s is None else s.data) for mu, s in out])
    return [ensemble_aggregate([pm[k] for pm in per_model], sigma_min) for k in range(steps)]


def evaluate_rollout(models: Sequence[SurrogateModel], test: TrajectorySet, mode: str = "autoregressive",
                     horizon: int = 10, bins: int = DEFAULT_BINS, kind: str = "quantile",
                     batch_size: int = 32, sigma_min: float = SIGMA_MIN) -> CalibrationReport:
    """Roll every test window forward ``horizon`` steps and pool calibration and point metrics.

    A sample for the relative L2 is one predicted ``[S, N, N]`` block of one window.
    """
    _check_compatible(models)
    if mode not in ("autoregressive", "teacher_forcing"):
        raise ConfigError(f"unknown rollout mode {mode!r}")
    cfg = models[0].config
    if test.n != cfg.n:
        raise ContractError(f"test grid {test.n} does not match model grid {cfg.n}")
    windows = make_bundled_windows(test, cfg.history, horizon, cfg.bundle)
    inputs, targets = stack_windows(windows)
    s = cfg.bundle
    block = s * cfg.n * cfg.n
    chunks: list[list[PredictiveSet]] = [[] for _ in range(horizon)]
    for start in range(0, len(windows), batch_size):
        x = inputs[start : start + batch_size]
        y = targets[start : start + batch_size]
        preds = ensemble_rollout(models, x, horizon, mode, truth=y, sigma_min=sigma_min)
        for k, (mu, sig) in enumerate(preds):
            chunks[k].append(PredictiveSet(mu, sig, y[:, k * s : (k + 1) * s], sample_size=block))
    steps = [_concat_sets(c) for c in chunks]
    tags = {"variant": cfg.variant, "mode": mode, "horizon": horizon, "members": len(models),
            "windows": len(windows), "kind": kind}
    return build_report(steps, bins, kind, tags)


def _concat_sets(sets: Sequence[PredictiveSet]) -> PredictiveSet:
    return PredictiveSet(np.concatenate([s.mu for s in sets]), np.concatenate([s.sigma for s in sets]),
                         np.concatenate([s.y for s in sets]), sample_size=sets[0].sample_size)
