"""Squared-error loss and the two-stage training procedure.

Stage 1 fits the gain network on a pseudo-stationary subset with the
modulation sites left out (identical to unit gains and zero shifts).
Stage 2 freezes the gain network and fits only the hypernetwork on the full
multi-context dataset.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import numerics as nx
from .hypercm import HyperParams, cm_schedule
from .kgain import GainNetParams, run_filter
from .numerics import Adam, Tape, value_of
from .ssm import Dataset, SSModel

log = logging.getLogger(__name__)

__all__ = [
    "Stage",
    "TrainConfig",
    "TrainReport",
    "loss",
    "loss_node",
    "stage_gradients",
    "split_dataset",
    "pseudo_stationary",
    "train_stage1",
    "train_stage2",
    "to_db",
]


class Stage(IntEnum):
    THETA = 1
    PSI = 2


@dataclass
class TrainConfig:
    stage: Stage = Stage.THETA
    epochs: int = 300
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.0
    patience: int = 20
    seed: int = 0
    val_fraction: float = 0.2
    clip_norm: float | None = 1.0

    def __post_init__(self):
        self.stage = Stage(self.stage)
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs must be >= 0, batch_size and patience >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass
class TrainReport:
    stage: Stage
    epochs: list[int] = field(default_factory=list)
    train_db: list[float] = field(default_factory=list)
    val_db: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_db: float = np.inf
    wall_clock: float = 0.0
    aborted: bool = False

    @property
    def final_val_db(self) -> float:
        return self.val_db[-1] if self.val_db else np.inf

    def summary(self) -> str:
        status = "aborted (non-finite loss)" if self.aborted else "ok"
        return (f"stage {int(self.stage)}: {len(self.epochs) - 1} epochs, best val "
                f"{self.best_val_db:.3f} dB at epoch {self.best_epoch}, "
                f"{self.wall_clock:.1f} s, {status}")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss_db", "val_loss_db"])
            for row in zip(self.epochs, self.train_db, self.val_db):
                w.writerow([row[0], f"{row[1]:.6f}", f"{row[2]:.6f}"])


def to_db(x):
    return 10.0 * np.log10(x)


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------


def loss_node(model: SSModel, batch: Dataset, theta, psi=None, sites=None, h=None, sow=None):
    """Mean over trajectories and steps of ``||x_t - x_hat_t||^2``.

    ``theta``/``psi`` may be stores or dicts of tape leaves.  With
    ``psi=None`` the modulation sites are skipped.  ``sow`` overrides the
    dataset's own contexts.
    """
    if isinstance(theta, GainNetParams):
        sites, h = theta.sites, theta.h
    cm = None
    if psi is not None:
        cm = cm_schedule(batch.sow if sow is None else sow, psi, sites)
    out = run_filter(model, batch.y, theta, batch.x0, cm, h=h)
    est = nx.concat(out.x, axis=-1)                       # (B, T*m)
    truth = batch.x.reshape(len(batch), -1)
    return nx.mul(nx.mean_all(nx.square(nx.sub(est, truth))), float(model.m))


def loss(model: SSModel, batch: Dataset, theta: GainNetParams, psi: HyperParams | None = None,
         sow=None) -> float:
    """Plain-float loss; no gradient bookkeeping."""
    return float(value_of(loss_node(model, batch, theta, psi, sow=sow)))


def l2_penalty(store) -> float:
    return float(sum(np.sum(v * v) for _, v in store.items()))


def stage_gradients(stage: Stage, model: SSModel, batch: Dataset, theta: GainNetParams,
                    psi: HyperParams | None = None):
    """Loss and gradients for every block of theta and psi.

    The frozen side is fed to the forward pass as plain arrays, so its
    gradients come back as zeros.
    """
    stage = Stage(stage)
    tape = Tape()
    th_leaves = theta.attach(tape)
    ps_leaves = psi.attach(tape) if psi is not None else {}
    if stage is Stage.THETA:
        L = loss_node(model, batch, th_leaves, None, theta.sites, theta.h)
    else:
        L = loss_node(model, batch, theta.blocks, ps_leaves, theta.sites, theta.h)
    names = list(th_leaves) + list(ps_leaves)
    leaves = list(th_leaves.values()) + list(ps_leaves.values())
    gs = nx.grad(L, leaves)
    return float(value_of(L)), dict(zip(names, gs))


# --------------------------------------------------------------------------
# data handling
# --------------------------------------------------------------------------


def split_dataset(ds: Dataset, val_fraction: float, rng: np.random.Generator):
    """Stratified split: every (q2, r2) group contributes to validation."""
    train_idx, val_idx = [], []
    for idx in ds.groups().values():
        idx = rng.permutation(idx)
        n_val = int(round(val_fraction * len(idx)))
        if val_fraction > 0 and len(idx) > 1:
            n_val = max(n_val, 1)
        val_idx.extend(idx[:n_val])
        train_idx.extend(idx[n_val:])
    train = ds.subset(np.sort(train_idx))
    val = ds.subset(np.sort(val_idx)) if val_idx else None
    return train, val


def pseudo_stationary(ds: Dataset, pair=(1.0, 1.0)) -> Dataset:
    """The subset generated with the nominal noise setting."""
    groups = ds.groups()
    key = (float(pair[0]), float(pair[1]))
    if key not in groups:
        raise KeyError(f"dataset has no trajectories with (q2, r2) = {key}")
    return ds.subset(groups[key], split="pseudo-stationary")


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------


def _clip(grads: dict, max_norm: float | None):
    if max_norm is None:
        return grads
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        return {k: g * scale for k, g in grads.items()}
    return grads


def _fit(target, loss_fn, grad_fn, train: Dataset, val: Dataset | None,
         cfg: TrainConfig) -> TrainReport:
    """Minibatch Adam with early stopping; ``target`` ends at its best-validation state."""
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(lr=cfg.lr)
    report = TrainReport(cfg.stage)
    start = time.perf_counter()
    score = (lambda: loss_fn(val)) if val is not None else (lambda: loss_fn(train))
    best_val = score()
    best = target.copy()
    report.epochs.append(0)
    report.train_db.append(float(to_db(loss_fn(train))))
    report.val_db.append(float(to_db(best_val)))
    report.best_val_db = report.val_db[0]
    wait = 0
    N = len(train)
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(N)
        total, finite = 0.0, True
        for lo in range(0, N, cfg.batch_size):
            batch = train.subset(perm[lo:lo + cfg.batch_size])
            value, grads = grad_fn(batch)
            if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                finite = False
                break
            if cfg.weight_decay:
                grads = {k: g + 2.0 * cfg.weight_decay * target[k] for k, g in grads.items()}
            opt.step(target.blocks, _clip(grads, cfg.clip_norm))
            total += value * len(batch)
        if not finite:
            log.warning("stage %d: non-finite loss at epoch %d, keeping best checkpoint",
                        int(cfg.stage), epoch)
            report.aborted = True
            break
        val_loss = score()
        if not np.isfinite(val_loss):
            report.aborted = True
            break
        report.epochs.append(epoch)
        report.train_db.append(float(to_db(total / N)))
        report.val_db.append(float(to_db(val_loss)))
        if val_loss < best_val:
            best_val, best, wait = val_loss, target.copy(), 0
            report.best_epoch, report.best_val_db = epoch, report.val_db[-1]
        else:
            wait += 1
        log.info("stage %d epoch %d train %.3f dB val %.3f dB", int(cfg.stage), epoch,
                 report.train_db[-1], report.val_db[-1])
        if wait >= cfg.patience:
            break
    target.blocks = best.blocks
    report.wall_clock = time.perf_counter() - start
    return report


def train_stage1(model: SSModel, data: Dataset, cfg: TrainConfig | None = None,
                 theta: GainNetParams | None = None) -> tuple[GainNetParams, TrainReport]:
    """Fit the gain network on pseudo-stationary data, modulation disabled."""
    cfg = cfg or TrainConfig(stage=Stage.THETA)
    rng = np.random.default_rng(cfg.seed)
    theta = GainNetParams.init(model.m, model.n, rng=rng) if theta is None else theta.copy()
    train, val = split_dataset(data, cfg.val_fraction, rng)

    def grad_fn(batch):
        value, grads = stage_gradients(Stage.THETA, model, batch, theta)
        return value, grads

    report = _fit(theta, lambda ds: loss(model, ds, theta), grad_fn, train, val, cfg)
    return theta, report


def train_stage2(model: SSModel, data: Dataset, theta: GainNetParams,
                 cfg: TrainConfig | None = None, psi: HyperParams | None = None,
                 width: int = 5) -> tuple[HyperParams, TrainReport]:
    """Fit the hypernetwork with ``theta`` frozen."""
    cfg = cfg or TrainConfig(stage=Stage.PSI)
    rng = np.random.default_rng(cfg.seed)
    psi = HyperParams.init(theta.sites, width, rng=rng) if psi is None else psi.copy()
    train, val = split_dataset(data, cfg.val_fraction, rng)

    def grad_fn(batch):
        value, grads = stage_gradients(Stage.PSI, model, batch, theta, psi)
        return value, {k: g for k, g in grads.items() if k in psi}

    report = _fit(psi, lambda ds: loss(model, ds, theta, psi), grad_fn, train, val, cfg)
    return psi, report


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def per_trajectory_mse(x_hat, x, window: tuple[int, int] | None = None) -> np.ndarray:
    """Mean over steps of ``||x_t - x_hat_t||^2`` for each trajectory."""
    lo, hi = (0, x.shape[1]) if window is None else window
    err = np.sum((x_hat[:, lo:hi] - x[:, lo:hi]) ** 2, axis=-1)
    return err.mean(axis=1)


def kf_estimates(model: SSModel, ds: Dataset, x0=None, P0=None) -> np.ndarray:
    """Kalman filter with the true Q_t, R_t; trajectories sharing a schedule are filtered together.

    The generator's initial state is known exactly, so ``P0`` defaults to
    zero; that makes this filter the MMSE reference under Gaussian noise.
    """
    from .kf import kf_run

    P0 = np.zeros((model.m, model.m)) if P0 is None else P0
    out = np.empty_like(ds.x)
    sched = np.concatenate([ds.q2, ds.r2], axis=1)
    _, inverse = np.unique(sched, axis=0, return_inverse=True)
    for k in np.unique(inverse):
        idx = np.flatnonzero(inverse == k)
        q2, r2 = ds.q2[idx[0]], ds.r2[idx[0]]
        Qs = q2[:, None, None] * model.Q0
        Rs = r2[:, None, None] * model.R0
        res = kf_run(model, Qs, Rs, ds.y[idx], ds.x0[idx[0]] if x0 is None else x0, P0)
        out[idx] = res.x
    return out


def sow_sequence(model: SSModel, ds: Dataset, source: str, theta=None, psi=None,
                 alpha: float = 0.95, grid=None, window: int = 20, stride: int = 10):
    """Context sequence (N, T) handed to the learned filter."""
    from .estimator import corr_sow_sequence, grid_sow_sequence

    if source == "oracle":
        return ds.sow
    if source == "corr":
        return corr_sow_sequence(model, ds.y, alpha, ds.x0[0])[0]
    if source == "grid":
        return grid_sow_sequence(model, ds.y, theta, psi, grid, window, stride)
    raise ValueError(f"unknown sow source {source!r}")


def aknet_estimates(model: SSModel, ds: Dataset, theta: GainNetParams, psi: HyperParams | None,
                    sow=None, batch: int = 512) -> np.ndarray:
    from .kgain import run_filter

    sow = ds.sow if sow is None else sow
    out = np.empty_like(ds.x)
    for lo in range(0, len(ds), batch):
        sl = slice(lo, lo + batch)
        cm = cm_schedule(sow[sl], psi, theta.sites) if psi is not None else None
        out[sl] = run_filter(model, ds.y[sl], theta, ds.x0[sl], cm).stacked()[0]
    return out


def evaluate(model: SSModel, ds: Dataset, theta: GainNetParams | None = None,
             psi: HyperParams | None = None, sow_source: str = "oracle",
             window: tuple[int, int] | None = None, **sow_kw) -> list[dict]:
    """Per-(q2, r2) MSE table in dB.

    With ``theta=None`` the Kalman filter with true covariances is scored.
    Each row carries the raw per-trajectory MSEs under ``"errors"``.
    """
    if theta is None:
        x_hat = kf_estimates(model, ds)
    else:
        sow = sow_sequence(model, ds, sow_source, theta, psi, **sow_kw)
        x_hat = aknet_estimates(model, ds, theta, psi, sow)
    errs = per_trajectory_mse(x_hat, ds.x, window)
    rows = []
    for (q2, r2), idx in ds.groups().items():
        e = errs[idx]
        rows.append({
            "q2": q2,
            "r2": r2,
            "sow": float(ds.sow[idx[0], -1]),
            "mse_db": float(to_db(e.mean())),
            "std_db": float(np.std(to_db(e))),
            "n": len(idx),
            "errors": e,
        })
    return rows
