"""Three-term objective (multi-step, reconstruction, latent consistency) and training loops."""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Adam, Tensor, backward, concat, cosine_lr, no_grad
from .data.dataset import BundledWindow, stack_windows
from .errors import ConfigError, NumericError, TrainingDiverged
from .model import LatentState, ModelConfig, SurrogateModel
from .seeding import rng_for

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
TERMS = ("multi", "recon", "consistency")


@dataclass(frozen=True)
class LossWeights:
    """Per-step weights alpha_m and term toggles.

    With ``alphas`` unset, step weights are ``(1, tail, tail, ...)``.
    """

    alphas: tuple[float, ...] | None = None
    tail: float = 0.1
    multi: bool = True
    recon: bool = True
    consistency: bool = True

    def step_weights(self, steps: int) -> np.ndarray:
        if self.alphas is None:
            a = np.full(steps, self.tail)
            a[0] = 1.0
        else:
            if len(self.alphas) < steps:
                raise ConfigError(f"{len(self.alphas)} step weights given for a {steps}-step rollout")
            a = np.asarray(self.alphas[:steps], dtype=float)
        if a[0] <= 0 or (a < 0).any():
            raise ConfigError(f"step weights need alpha_1 > 0 and all alpha_m >= 0, got {a.tolist()}")
        return a


@dataclass(frozen=True)
class TrainRunConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    lr_min: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    ensemble: int = 1
    normalize: bool = True
    divergence_threshold: float = 1e6
    grad_clip: float | None = None
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> "TrainRunConfig":
        if self.epochs < 1 or self.ensemble < 1 or self.batch_size < 1:
            raise ConfigError("epochs, ensemble size and batch size must all be >= 1")
        if not (0 < self.lr_min <= self.lr):
            raise ConfigError(f"need 0 < lr_min <= lr, got {self.lr_min}, {self.lr}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"]["alphas"] = None if self.weights.alphas is None else list(self.weights.alphas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRunConfig":
        kw = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        w = kw.get("weights")
        if isinstance(w, dict):
            alphas = w.get("alphas")
            kw["weights"] = LossWeights(**{**w, "alphas": None if alphas is None else tuple(alphas)})
        return cls(**kw)


@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict[str, float]


@dataclass
class TrainResult:
    model: SurrogateModel
    history: list[dict]


# -- objective -----------------------------------------------------------------


def gaussian_nll(mu: Tensor, sigma: Tensor, y) -> Tensor:
    """Per-element ``0.5 log(2 pi sigma^2) + (y - mu)^2 / (2 sigma^2)``."""
    return sigma.log() + HALF_LOG_2PI + ((mu - y) / sigma).square() * 0.5


def point_loss(mu: Tensor, y, flavor: str) -> Tensor:
    diff = mu - y
    return diff.abs() if flavor == "l1" else diff.square()


def latent_consistency(z_pred: Tensor, z_tgt: np.ndarray, batch: int) -> Tensor:
    """Sum over rows of ``|z_pred - z_tgt|^2 / |z_tgt|^2``, divided by ``batch``; targets carry no gradient."""
    num = (z_pred - z_tgt).square().sum(axis=1)
    den = np.maximum((z_tgt**2).sum(axis=1), 1e-300)
    return (num / den).sum() * (1.0 / batch)


def _as_batch(batch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, BundledWindow):
        return batch.inputs[None], batch.targets[None]
    if isinstance(batch, (list, tuple)) and batch and isinstance(batch[0], BundledWindow):
        return stack_windows(list(batch))
    inputs, targets = batch
    return np.asarray(inputs, dtype=float), np.asarray(targets, dtype=float)


def _checked(name: str, fn):
    try:
        return fn()
    except NumericError as exc:
        raise NumericError(f"loss term '{name}': {exc}") from exc


def _step_means(elem: Tensor, steps: int) -> Tensor:
    """Mean of a ``[steps*B, ...]`` element loss over everything but the step axis."""
    return elem.reshape(steps, -1).mean(axis=1)


def _predict(model: SurrogateModel, inputs: np.ndarray, steps: int):
    """Training-time rollout: evolved latent states plus stacked predictions ``[steps*B, S, N, N]``."""
    cfg = model.config
    s = cfg.bundle
    state0 = model.encode(inputs)
    if cfg.latent:
        states = model.latent_rollout(state0, steps)
        z = concat([st.z for st in states], axis=0)
        zs = concat([st.z_sigma for st in states], axis=0) if cfg.with_sigma else None
        joint = LatentState(z, zs)
        mu = model.decode_state(joint)
        sigma = model.decode_uncertainty(joint) if cfg.with_sigma else None
        return state0, states, mu, sigma
    states, mus, sigmas = [], [], []
    hist, state = Tensor(inputs), state0
    for m in range(steps):
        if m:
            state = model.encode(hist)
        nxt = model.evolve_latent(state)
        states.append(nxt)
        mus.append(model.decode_state(nxt))
        if cfg.with_sigma:
            sigmas.append(model.decode_uncertainty(nxt))
        hist = concat([hist, mus[-1]], axis=1)[:, -cfg.history:]
    return state0, states, concat(mus, axis=0), concat(sigmas, axis=0) if sigmas else None


def compute_loss(model: SurrogateModel, batch, weights: LossWeights | None = None,
                 target_model: SurrogateModel | None = None) -> LossBreakdown:
    """Total objective and its per-term values for a window or a batch of windows.

    ``batch`` is a :class:`BundledWindow`, a list of them, or an
    ``(inputs[B, history, N, N], targets[B, steps*S, N, N])`` pair. Losses are
    evaluated in units of ``model.config.data_scale``. Consistency targets are
    encoded without gradient by ``target_model`` (default: ``model`` itself).
    """
    weights = weights or LossWeights()
    cfg = model.config
    inputs, targets = _as_batch(batch)
    b, s = inputs.shape[0], cfg.bundle
    if targets.shape[1] % s:
        raise ConfigError(f"target depth {targets.shape[1]} is not a multiple of bundle width {s}")
    steps = targets.shape[1] // s
    if steps < 1 or steps > cfg.horizon:
        raise ConfigError(f"window horizon {steps} must lie in [1, {cfg.horizon}]")
    alphas = weights.step_weights(steps)
    inv = 1.0 / cfg.data_scale

    state0, states, mu, sigma = _predict(model, inputs, steps)
    # targets as [steps*B, S, N, N] ordered step-major to match the stacked predictions
    y = targets.reshape(b, steps, s, *targets.shape[2:]).swapaxes(0, 1).reshape(steps * b, s, *targets.shape[2:])
    y_n = y * inv
    mu_n = mu * inv
    sigma_n = sigma * inv if sigma is not None else None

    parts: dict[str, Tensor] = {}
    if weights.multi:
        def multi():
            if cfg.loss == "nll":
                elem = gaussian_nll(mu_n, sigma_n, y_n)
            else:
                elem = point_loss(mu_n, y_n, cfg.loss)
                if sigma_n is not None:
                    # sigma is trained on frozen means so the point loss never reaches the sigma head
                    elem = elem + gaussian_nll(mu_n.detach(), sigma_n, y_n)
            return (_step_means(elem, steps) * alphas).sum()
        parts["multi"] = _checked("multi", multi)
    if weights.recon:
        def recon():
            rec = model.decode_state(state0) * inv
            y0 = inputs[:, -s:] * inv
            if cfg.loss == "nll":
                return gaussian_nll(rec, model.decode_uncertainty(state0) * inv, y0).mean()
            return point_loss(rec, y0, cfg.loss).mean()
        parts["recon"] = _checked("recon", recon)
    if weights.consistency:
        def consistency():
            full = np.concatenate([inputs, targets], axis=1)
            blocks = np.concatenate([full[:, m * s : m * s + cfg.history] for m in range(1, steps + 1)])
            with no_grad():
                z_tgt = (target_model or model).encode(blocks).z.data
            return latent_consistency(concat([st.z for st in states], axis=0), z_tgt, b)
        parts["consistency"] = _checked("consistency", consistency)
    if not parts:
        raise ConfigError("all loss terms are disabled")
    total = None
    for t in parts.values():
        total = t if total is None else total + t
    return LossBreakdown(total, {k: float(v.data) for k, v in parts.items()})


# -- training loops ------------------------------------------------------------


def _window_arrays(data, bundle: int, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    inputs, targets = _as_batch(data)
    if inputs.shape[0] < 1:
        raise ConfigError("training needs at least one window")
    need = horizon * bundle
    if targets.shape[1] < need:
        raise ConfigError(f"windows carry {targets.shape[1]} target frames, training horizon needs {need}")
    return inputs, targets[:, :need]


def fit_data_scale(inputs: np.ndarray, targets: np.ndarray) -> float:
    scale = float(np.sqrt(np.mean(np.concatenate([inputs.ravel(), targets.ravel()]) ** 2)))
    return scale if scale > 0 else 1.0


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    norm = math.sqrt(sum(float((p.grad**2).sum()) for p in params if p.grad is not None))
    if norm > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / norm)
    return norm


def train_model(data, cfg: TrainRunConfig, mcfg: ModelConfig, member: int | None = None,
                verbose: bool = False) -> TrainResult:
    """Adam over seeded minibatch permutations; returns the model and per-epoch term means.

    The model initialization and the shuffling are both derived from ``cfg.seed``.
    """
    cfg.validate()
    inputs, targets = _window_arrays(data, mcfg.bundle, mcfg.horizon)
    if cfg.normalize:
        mcfg = replace(mcfg, data_scale=fit_data_scale(inputs, targets))
    model = SurrogateModel(replace(mcfg, seed=cfg.seed))
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    rng = rng_for(cfg.seed, "shuffle")
    n = inputs.shape[0]
    n_batches = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = dict.fromkeys(("total",) + TERMS, 0.0)
        lr = cfg.lr
        for i in range(n_batches):
            idx = np.sort(order[i * cfg.batch_size : (i + 1) * cfg.batch_size])
            try:
                out = compute_loss(model, (inputs[idx], targets[idx]), cfg.weights)
                value = float(out.total.data)
                if not math.isfinite(value) or value > cfg.divergence_threshold:
                    raise NumericError(f"loss {value:.4g} exceeds the divergence threshold")
                opt.zero_grad()
                backward(out.total, params)
                if cfg.grad_clip is not None:
                    clip_grad_norm(params, cfg.grad_clip)
                lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_min)
                opt.step(lr)
            except NumericError as exc:
                raise TrainingDiverged(f"training diverged at epoch {epoch}: {exc}", epoch, member) from exc
            step += 1
            w = len(idx) / n
            sums["total"] += w * value
            for k, v in out.terms.items():
                sums[k] += w * v
        record = {"epoch": epoch, "lr": lr, **sums}
        history.append(record)
        if verbose:
            print(f"member {member} epoch {epoch}: " + " ".join(f"{k}={v:.5g}" for k, v in sums.items()))
    return TrainResult(model, history)


def _train_member(args):
    data, cfg, mcfg, k = args
    return train_model(data, replace(cfg, seed=cfg.seed + k, ensemble=1), mcfg, member=k)


def train_ensemble(data, cfg: TrainRunConfig, mcfg: ModelConfig, workers: int | None = None) -> list[TrainResult]:
    """K independent trainings with seeds ``seed + k``; any member failure rejects the ensemble."""
    cfg.validate()
    data = _as_batch(data)
    jobs = [(data, cfg, mcfg, k) for k in range(cfg.ensemble)]
    if workers is None:
        workers = int(os.environ.get("LEUQ_THREADS", "1"))
    if workers > 1 and cfg.ensemble > 1:
        with ProcessPoolExecutor(max_workers=min(workers, cfg.ensemble)) as pool:
            return list(pool.map(_train_member, jobs))
    return [_train_member(j) for j in jobs]


# -- run directory -------------------------------------------------------------


def save_run(out_dir, results: Sequence[TrainResult], cfg: TrainRunConfig, extra: dict | None = None) -> Path:
    """Write ``config.json``, ``metrics.csv`` and one ``member_k.ckpt`` per ensemble member."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = {"train": cfg.to_dict(), "model": results[0].model.config.to_dict(), **(extra or {})}
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True))
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["member", "epoch", "lr", "total", *TERMS])
        for k, res in enumerate(results):
            for rec in res.history:
                writer.writerow([k, rec["epoch"], repr(rec["lr"]), repr(rec["total"]),
                                 *(repr(rec[t]) for t in TERMS)])
    for k, res in enumerate(results):
        res.model.save(out / f"member_{k}.ckpt")
    return out


def load_ensemble(run_dir) -> list[SurrogateModel]:
    paths = sorted(Path(run_dir).glob("member_*.ckpt"), key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        raise FileNotFoundError(f"no member checkpoints in {run_dir}")
    return [SurrogateModel.load(p) for p in paths]
