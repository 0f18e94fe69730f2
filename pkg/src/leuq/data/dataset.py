"""Trajectory datasets: generation, on-disk format, and bundled window extraction."""

from __future__ import annotations

import json
import os
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ChecksumError, ConfigError, FormatError, LeuqError, VersionError
from ..seeding import rng_for
from .navier_stokes import NavierStokes2D, SolverConfig, gaussian_random_field

MAGIC = b"LEUQDS1\0"
FORMAT_VERSION = 1
CHUNK = 16


@dataclass
class TrajectorySet:
    """Vorticity trajectories ``states[n_traj, T_snap, N, N]`` plus solver metadata."""

    states: np.ndarray
    config: SolverConfig
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 4 or self.states.shape[0] < 1:
            raise ConfigError(f"states must be [n_traj>=1, T, N, N], got {self.states.shape}")
        if not np.isfinite(self.states).all():
            raise ConfigError("trajectory set contains non-finite values")

    @property
    def n_traj(self) -> int:
        return self.states.shape[0]

    @property
    def n_snapshots(self) -> int:
        return self.states.shape[1]

    @property
    def n(self) -> int:
        return self.states.shape[-1]


@dataclass(frozen=True)
class BundledWindow:
    """A contiguous slice of one trajectory: ``history`` input frames, ``horizon * S`` targets."""

    inputs: np.ndarray
    targets: np.ndarray
    bundle: int
    trajectory: int
    start: int

    @property
    def horizon(self) -> int:
        return self.targets.shape[0] // self.bundle

    @property
    def frames(self) -> np.ndarray:
        return np.concatenate([self.inputs, self.targets], axis=0)


class SolverFailure(LeuqError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"trajectory {index}: {cause}")
        self.index = index
        self.cause = cause


def _initial_conditions(cfg: SolverConfig, indices: range) -> np.ndarray:
    return np.stack([
        gaussian_random_field(cfg.n, rng_for(cfg.seed, f"initial-condition/{i}"),
                              alpha=cfg.ic_alpha, tau=cfg.ic_tau, rms=cfg.ic_rms)
        for i in indices
    ])


def _solve_chunk(cfg: SolverConfig, start: int, stop: int) -> np.ndarray:
    w0 = _initial_conditions(cfg, range(start, stop))
    solver = NavierStokes2D(cfg)
    try:
        return solver.run(w0)
    except LeuqError:
        # re-run individually to attribute the failure to a trajectory
        for i in range(start, stop):
            try:
                solver.run(w0[i - start])
            except LeuqError as exc:
                raise SolverFailure(i, exc) from exc
        raise


def generate_dataset(cfg: SolverConfig, n_train: int, n_test: int,
                     workers: int | None = None) -> tuple[TrajectorySet, TrajectorySet]:
    """Sample Gaussian-random-field initial vorticities and evolve them.

    Trajectory ``i`` draws its initial condition from a stream derived from
    ``(cfg.seed, i)``; the first ``n_train`` indices form the training split.
    Output is bit-identical for any worker count.
    """
    if n_train < 1 or n_test < 1:
        raise ConfigError(f"n_train and n_test must be >= 1, got {n_train}, {n_test}")
    cfg.validate()
    total = n_train + n_test
    bounds = [(s, min(s + CHUNK, total)) for s in range(0, total, CHUNK)]
    if workers is None:
        workers = int(os.environ.get("LEUQ_THREADS", "1"))
    if workers > 1 and len(bounds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_solve_chunk, [cfg] * len(bounds), *zip(*bounds)))
    else:
        parts = [_solve_chunk(cfg, s, e) for s, e in bounds]
    states = np.concatenate(parts, axis=0)
    return (TrajectorySet(states[:n_train], cfg, "train"),
            TrajectorySet(states[n_train:], cfg, "test"))


# -- persistence --------------------------------------------------------------


def save_dataset(ts: TrajectorySet, path) -> None:
    payload = np.ascontiguousarray(ts.states, dtype="<f8").tobytes()
    header = {
        "format_version": FORMAT_VERSION,
        "config": ts.config.to_dict(),
        "shape": list(ts.states.shape),
        "split": ts.split,
        "dtype": "<f8",
        "crc32": zlib.crc32(payload),
        "meta": ts.meta,
    }
    head = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(MAGIC + struct.pack("<Q", len(head)) + head + payload)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(16)
        if raw[:8] != MAGIC:
            raise FormatError(f"{path}: not a trajectory dataset (bad magic)")
        if len(raw) < 16:
            raise FormatError(f"{path}: truncated header")
        (n,) = struct.unpack("<Q", raw[8:16])
        head = fh.read(n)
    if len(head) < n:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(head.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported dataset format version {header.get('format_version')!r}")
    header["_offset"] = 16 + n
    return header


def load_dataset(path) -> TrajectorySet:
    header = read_header(path)
    raw = Path(path).read_bytes()[header["_offset"]:]
    shape = tuple(header["shape"])
    expected = 8 * int(np.prod(shape))
    if len(raw) != expected:
        raise FormatError(f"{path}: truncated payload ({len(raw)} of {expected} bytes)")
    if zlib.crc32(raw) != header["crc32"]:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    states = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return TrajectorySet(states, SolverConfig.from_dict(header["config"]), header["split"], header.get("meta", {}))


# -- windows ------------------------------------------------------------------


def window_count(n_snapshots: int, history: int, horizon: int, bundle: int) -> int:
    return n_snapshots - history - horizon * bundle + 1


def make_bundled_windows(ts: TrajectorySet, history: int, horizon: int, bundle: int = 1) -> list[BundledWindow]:
    """All maximal sliding windows of each trajectory, never crossing trajectories."""
    if history < 1 or horizon < 1 or bundle < 1:
        raise ConfigError("history, horizon and bundle width must all be >= 1")
    t = ts.n_snapshots
    if history + horizon * bundle > t:
        raise ConfigError(
            f"infeasible windows: history + horizon*S = {history} + {horizon}*{bundle} > T_snap = {t}"
        )
    out = []
    for k in range(ts.n_traj):
        traj = ts.states[k]
        for s in range(window_count(t, history, horizon, bundle)):
            mid = s + history
            out.append(BundledWindow(traj[s:mid], traj[mid:mid + horizon * bundle], bundle, k, s))
    return out


def stack_windows(windows: list[BundledWindow]) -> tuple[np.ndarray, np.ndarray]:
    """Batch windows into ``inputs[B, history, N, N]`` and ``targets[B, horizon*S, N, N]``."""
    return np.stack([w.inputs for w in windows]), np.stack([w.targets for w in windows])
