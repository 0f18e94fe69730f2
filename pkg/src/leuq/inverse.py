"""Inverse optimization of the initial state by backpropagation through a frozen surrogate.

The latent route optimizes ``(z0, z0_sigma)`` and decodes the result, so the
recovered state always lies in the decoder's range. The input route optimizes
the pixel history block directly and serves as the high-dimensional baseline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Adam, Tensor, backward, concat, no_grad
from .errors import ConfigError, InversionError, NumericError
from .evaluation import SIGMA_MIN, CalibrationReport, PredictiveSet, build_report, ensemble_aggregate
from .model import LatentState, SurrogateModel

TARGETS = ("initial_state", "static_param", "both")
ROUTES = ("latent", "input")


@dataclass
class InverseProblem:
    """Observed bundled states ``U^m`` for ``m = k_s .. k_e``.

    ``observations`` has shape ``[k_e - k_s + 1, S, N, N]``; row ``i`` is ``U^(k_s + i)``.
    ``initial_guess`` is a ``[history, N, N]`` block; by default the first observed
    frame is tiled across the history window.
    """

    observations: np.ndarray
    k_s: int = 1
    k_e: int = 10
    target: str = "initial_state"
    iterations: int = 500
    lr: float = 1e-2
    initial_guess: np.ndarray | None = None
    p_init: np.ndarray | None = None

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=float)
        if self.k_s < 1 or self.k_e < self.k_s:
            raise ConfigError(f"need 1 <= k_s <= k_e, got k_s={self.k_s}, k_e={self.k_e}")
        if self.observations.ndim != 4 or self.observations.shape[0] != self.k_e - self.k_s + 1:
            raise ConfigError(
                f"observations must be [k_e - k_s + 1, S, N, N] = [{self.k_e - self.k_s + 1}, ...], "
                f"got {self.observations.shape}"
            )
        if self.target not in TARGETS:
            raise ConfigError(f"unknown inversion target {self.target!r}")
        if self.iterations < 1 or self.lr <= 0:
            raise ConfigError("iteration budget must be >= 1 and lr positive")

    def check_model(self, model: SurrogateModel) -> None:
        cfg = model.config
        if self.observations.shape[1:] != (cfg.bundle, cfg.n, cfg.n):
            raise ConfigError(
                f"observation blocks {self.observations.shape[1:]} do not match model ({cfg.bundle}, {cfg.n}, {cfg.n})"
            )
        if self.target != "initial_state" and cfg.p_dim == 0:
            raise ConfigError(f"target {self.target!r} needs a model with a static parameter")
        if cfg.p_dim and self.p_init is None:
            raise ConfigError("model has a static parameter; provide p_init")

    def guess(self, history: int) -> np.ndarray:
        if self.initial_guess is not None:
            return np.asarray(self.initial_guess, dtype=float)
        return np.repeat(self.observations[0, :1], history, axis=0)

    def to_dict(self) -> dict:
        return {"k_s": self.k_s, "k_e": self.k_e, "target": self.target, "iterations": self.iterations,
                "lr": self.lr, "observation_shape": list(self.observations.shape),
                "custom_initial_guess": self.initial_guess is not None}


def problem_from_trajectory(traj: np.ndarray, t0: int, bundle: int = 1, k_s: int = 1, k_e: int = 10,
                            **kw) -> tuple[InverseProblem, np.ndarray]:
    """Observations ``U^m = traj[t0 + (m-1)*S + 1 .. t0 + m*S]`` and the true state ``traj[t0-S+1 .. t0]``."""
    traj = np.asarray(traj, dtype=float)
    last = t0 + k_e * bundle
    if t0 - bundle + 1 < 0 or last >= traj.shape[0]:
        raise ConfigError(f"trajectory of length {traj.shape[0]} cannot hold state at {t0} and {k_e} future blocks")
    obs = np.stack([traj[t0 + (m - 1) * bundle + 1 : t0 + m * bundle + 1] for m in range(k_s, k_e + 1)])
    return InverseProblem(obs, k_s, k_e, **kw), traj[t0 - bundle + 1 : t0 + 1]


@dataclass
class MemberSolution:
    u0: np.ndarray
    z0: np.ndarray | None
    z0_sigma: np.ndarray | None
    p: np.ndarray | None
    sigma0: np.ndarray | None
    trace: list[float]
    best_objective: float
    best_iteration: int
    route: str
    u_block_size: int = 0

    @property
    def initial_objective(self) -> float:
        return self.trace[0]

    @property
    def n_variables(self) -> int:
        if self.route == "latent":
            return sum(v.size for v in (self.z0, self.z0_sigma) if v is not None)
        return self.u_block_size


@dataclass
class InverseSolution:
    mean: np.ndarray
    sigma: np.ndarray
    members: list[MemberSolution]
    failures: list[tuple[int, str]] = field(default_factory=list)
    report: CalibrationReport | None = None
    relative_l2: float | None = None


# -- objectives ----------------------------------------------------------------


def latent_objective(model: SurrogateModel, z0: Tensor, prob: InverseProblem, z_p: Tensor | None = None) -> Tensor:
    """``sum_m ||h_mu(g^(m)(z0, z_p)) - U^m||^2`` over ``m = k_s .. k_e``; depends on z only."""
    zs, z = [], z0
    for m in range(1, prob.k_e + 1):
        z = model.evolve_mean(z, z_p)
        if m >= prob.k_s:
            zs.append(z)
    pred = model.decode_state(LatentState(concat(zs, axis=0)))
    return (pred - prob.observations).square().sum()


def input_objective(model: SurrogateModel, block: Tensor, prob: InverseProblem, p=None) -> Tensor:
    out = model.rollout(block, prob.k_e, p=p)
    pred = concat([mu for mu, _ in out[prob.k_s - 1 :]], axis=0)
    return (pred - prob.observations).square().sum()


# -- optimization --------------------------------------------------------------


def _optimize(variables: list[Tensor], objective, prob: InverseProblem, member: int | None):
    opt = Adam(variables, lr=prob.lr)
    trace: list[float] = []
    best = (np.inf, -1, [v.data.copy() for v in variables])
    for it in range(prob.iterations + 1):
        try:
            loss = objective()
        except NumericError as exc:
            raise InversionError(f"inversion objective non-finite at iteration {it}: {exc}", it, member) from exc
        value = float(loss.data)
        if not np.isfinite(value):
            raise InversionError(f"inversion objective non-finite at iteration {it}", it, member)
        trace.append(value)
        if value < best[0]:
            best = (value, it, [v.data.copy() for v in variables])
        if it == prob.iterations:
            break
        opt.zero_grad()
        try:
            backward(loss, variables)
            opt.step()
        except NumericError as exc:
            raise InversionError(f"non-finite update at iteration {it}: {exc}", it, member) from exc
    for v, arr in zip(variables, best[2]):
        v.data = arr
    return trace, best[0], best[1]


class _Frozen:
    def __init__(self, model: SurrogateModel):
        self.model = model

    def __enter__(self):
        self.flags = [t.requires_grad for t in self.model.parameters()]
        self.model.requires_grad_(False)
        return self.model

    def __exit__(self, *exc):
        for t, f in zip(self.model.parameters(), self.flags):
            t.requires_grad = f
            t.grad = None


def _static_variable(model: SurrogateModel, prob: InverseProblem) -> tuple[Tensor | None, bool]:
    if model.config.p_dim == 0:
        return None, False
    trainable = prob.target in ("static_param", "both")
    return Tensor(np.asarray(prob.p_init, dtype=float).reshape(1, -1), requires_grad=trainable), trainable


def invert_initial_state(model: SurrogateModel, prob: InverseProblem, member: int | None = None,
                         z_init: np.ndarray | None = None) -> MemberSolution:
    """Adam on ``(z0, z0_sigma)``; returns the best iterate and its decoded state ``h_mu(z0)``.

    ``z_init`` overrides the encoded initial guess with a ``[d_z]`` latent vector.
    """
    prob.check_model(model)
    cfg = model.config
    if not cfg.latent:
        raise ConfigError("the latent route needs a latent-evolution model; use the input route")
    with _Frozen(model):
        with no_grad():
            start = model.encode(prob.guess(cfg.history)[None])
        z = Tensor(start.z.data if z_init is None else np.asarray(z_init, dtype=float).reshape(1, -1),
                   requires_grad=prob.target != "static_param")
        zs = Tensor(start.z_sigma.data, requires_grad=prob.target != "static_param") if cfg.with_sigma else None
        p, p_trainable = _static_variable(model, prob)
        variables = [v for v in (z, zs) if v is not None and v.requires_grad] + ([p] if p_trainable else [])

        def objective():
            z_p = model.encode_static(p) if p is not None else None
            return latent_objective(model, z, prob, z_p)

        trace, best, best_it = _optimize(variables, objective, prob, member)
        with no_grad():
            state = LatentState(z, zs)
            u0 = model.decode_state(state).data[0]
            sigma0 = model.decode_uncertainty(state).data[0] if cfg.with_sigma else None
    return MemberSolution(u0, z.data[0].copy(), None if zs is None else zs.data[0].copy(),
                          None if p is None else p.data[0].copy(), sigma0, trace, best, best_it, "latent")


def invert_input_space(model: SurrogateModel, prob: InverseProblem, member: int | None = None) -> MemberSolution:
    """Adam directly on the ``[history, N, N]`` pixel block fed to the surrogate."""
    prob.check_model(model)
    cfg = model.config
    with _Frozen(model):
        block = Tensor(prob.guess(cfg.history)[None], requires_grad=prob.target != "static_param")
        p, p_trainable = _static_variable(model, prob)
        variables = ([block] if block.requires_grad else []) + ([p] if p_trainable else [])
        trace, best, best_it = _optimize(variables, lambda: input_objective(model, block, prob, p), prob, member)
    u0 = block.data[0, -cfg.bundle :].copy()
    return MemberSolution(u0, None, None, None if p is None else p.data[0].copy(), None, trace, best, best_it,
                          "input", u_block_size=block.size)


def inverse_uq(members: Sequence[SurrogateModel], prob: InverseProblem, route: str = "latent",
               truth: np.ndarray | None = None, use_member_sigma: bool = False,
               sigma_min: float = SIGMA_MIN) -> InverseSolution:
    """Invert with every ensemble member and aggregate the recovered states.

    By default the spread is the members' disagreement alone; with
    ``use_member_sigma`` each member's decoded ``h_sigma(z0_sigma)`` joins the mixture.
    """
    if route not in ROUTES:
        raise ConfigError(f"unknown inversion route {route!r}")
    if not members:
        raise ConfigError("inverse_uq needs at least one model")
    solve = invert_initial_state if route == "latent" else invert_input_space
    sols, failures = [], []
    for k, m in enumerate(members):
        try:
            sols.append(solve(m, prob, member=k))
        except InversionError as exc:
            failures.append((k, str(exc)))
    if not sols:
        raise InversionError(f"all {len(members)} members failed: {failures[0][1]}", -1)
    pairs = [(s.u0, s.sigma0 if use_member_sigma else None) for s in sols]
    mean, sigma = ensemble_aggregate(pairs, sigma_min)
    out = InverseSolution(mean, sigma, sols, failures)
    if truth is not None:
        truth = np.asarray(truth, dtype=float)
        ps = PredictiveSet(mean, sigma, truth)
        out.report = build_report([ps], tags={"route": route, "members": len(sols)})
        out.relative_l2 = out.report.L2
    return out


def save_inversion(out_dir, sol: InverseSolution, prob: InverseProblem, extra: dict | None = None,
                   solver_config=None) -> Path:
    """Write ``problem.json``, one recovered-field dataset file per member, and the aggregate report."""
    from .data.dataset import TrajectorySet, save_dataset
    from .data.navier_stokes import SolverConfig

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {**prob.to_dict(), **(extra or {}), "failures": sol.failures,
               "members": [{"best_objective": s.best_objective, "initial_objective": s.initial_objective,
                            "best_iteration": s.best_iteration} for s in sol.members],
               "relative_l2": sol.relative_l2}
    (out / "problem.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    cfg = solver_config or SolverConfig(n=sol.mean.shape[-1])
    for k, s in enumerate(sol.members):
        save_dataset(TrajectorySet(s.u0[None], cfg, "recovered", {"member": k}), out / f"member_{k}_recovered.lds")
    save_dataset(TrajectorySet(sol.mean[None], cfg, "recovered", {"aggregate": "mean"}), out / "recovered_mean.lds")
    save_dataset(TrajectorySet(sol.sigma[None], cfg, "recovered", {"aggregate": "sigma"}), out / "recovered_sigma.lds")
    if sol.report is not None:
        sol.report.save(out / "report")
    return out
