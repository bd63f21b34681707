"""Experiment orchestration: data generation, training, evaluation grids and result tables.

Three experiments are provided:

``gaussian-grid``     train on four context pairs, test on jointly scaled
                      pairs and on a log grid of ratios (Gaussian noise)
``exponential-grid``  the same with zero-mean exponential noise
``sow-jump``          noise scales jump mid-trajectory; adaptive KF and the
                      learned filter share one correlation-based estimator
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .datasets import save_dataset
from .estimator import ESTIMATORS, corr_sow_sequence, grid_sow_sequence
from .hypercm import HyperParams
from .kgain import GainNetParams
from .params import load_checkpoint, save_checkpoint
from .ssm import Dataset, NoiseFamily, NoiseSchedule, SSModel, default_model, generate_batch
from .training import (
    Stage,
    TrainConfig,
    aknet_estimates,
    evaluate,
    kf_estimates,
    per_trajectory_mse,
    pseudo_stationary,
    to_db,
    train_stage1,
    train_stage2,
)

log = logging.getLogger(__name__)

__all__ = [
    "EXPERIMENTS",
    "ExperimentConfig",
    "ResultRow",
    "ResultTable",
    "build_model",
    "pair_for_sow",
    "training_data",
    "evaluation_points",
    "obtain_trained",
    "train_aknet",
    "run_gaussian_grid",
    "run_exponential_grid",
    "run_sow_jump",
    "evaluate_saved",
    "run_experiment",
]

EXPERIMENTS = ("gaussian-grid", "exponential-grid", "sow-jump")
_FAMILY = {
    "gaussian-grid": NoiseFamily.GAUSSIAN,
    "exponential-grid": NoiseFamily.EXPONENTIAL,
    "sow-jump": NoiseFamily.GAUSSIAN,
}

# seed-stream purposes
_TRAIN_DATA, _TEST_DATA, _STAGE1, _STAGE2, _INIT = 1, 2, 3, 4, 5


@dataclass
class ExperimentConfig:
    experiment: str = "gaussian-grid"
    seed: int = 7
    m: int = 2
    model_seed: int = 0
    T: int = 100
    n_per_pair: int = 100
    train_sows: list = field(default_factory=lambda: [0.01, 0.1, 1.0, 10.0])
    n_test_sows: int = 9
    scales: list = field(default_factory=lambda: [0.01, 0.1, 10.0])
    n_test: int = 200
    epochs1: int = 300
    epochs2: int = 300
    lr1: float = 1e-3
    lr2: float = 1e-3
    batch_size: int = 16
    patience: int = 20
    clip_norm: float = 1.0
    hidden: int | None = None
    hyper_width: int = 5
    sow_source: str = "oracle"
    alpha: float = 0.95
    estimator: str = "recursive"
    lags: int = 2
    grid: list | None = None
    grid_window: int = 20
    grid_stride: int = 10
    jump_T: int = 200
    jump_at: int | None = None
    jump_every: int | None = None
    jump_before: list = field(default_factory=lambda: [1.0, 1.0])
    jump_q2: float = 0.1
    jump_r2: list = field(default_factory=lambda: [0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 10.0])
    checkpoint: str | None = None
    allow_training: bool = True
    plots: bool = True
    out: str = "runs/default"

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if not self.train_sows:
            raise ValueError("need at least one training context")
        if self.n_test_sows < 1 or self.n_test < 1 or not self.jump_r2:
            raise ValueError("test grid must be non-empty")
        if self.sow_source not in ("oracle", "corr", "grid"):
            raise ValueError(f"unknown sow_source {self.sow_source!r}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}; choose from {ESTIMATORS}")
        if not 0.0 < self.alpha < 1.0 or self.lags < 1:
            raise ValueError("alpha must lie in (0, 1) and lags must be at least 1")
        if any(s <= 0 for s in self.train_sows) or any(c <= 0 for c in self.scales):
            raise ValueError("contexts and scale factors must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path, **overrides) -> "ExperimentConfig":
        data = json.loads(Path(path).read_text()) if path else {}
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def family(self) -> NoiseFamily:
        return _FAMILY[self.experiment]

    def rng(self, *keys: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, *keys]))

    def child_seed(self, *keys: int) -> int:
        return int(np.random.SeedSequence([self.seed, *keys]).generate_state(1)[0])

    def train_config(self, stage: Stage) -> TrainConfig:
        if Stage(stage) is Stage.THETA:
            return TrainConfig(Stage.THETA, self.epochs1, self.batch_size, self.lr1,
                               patience=self.patience, seed=self.child_seed(_STAGE1),
                               clip_norm=self.clip_norm)
        return TrainConfig(Stage.PSI, self.epochs2, self.batch_size, self.lr2,
                           patience=self.patience, seed=self.child_seed(_STAGE2),
                           clip_norm=self.clip_norm)


# --------------------------------------------------------------------------
# result table
# --------------------------------------------------------------------------


@dataclass
class ResultRow:
    experiment: str
    panel: str
    filter: str
    q2: float
    r2: float
    sow: float
    sow_source: str
    mse_db: float
    std_db: float
    n_trajectories: int

    @property
    def key(self) -> str:
        return f"{self.panel}|{self.filter}|{self.sow_source}|{self.q2!r}|{self.r2!r}"


class ResultTable:
    """Rows of per-setting MSE plus the raw per-trajectory errors behind them."""

    columns = [f.name for f in fields(ResultRow)]

    def __init__(self):
        self.rows: list[ResultRow] = []
        self.errors: dict[str, np.ndarray] = {}

    def __len__(self):
        return len(self.rows)

    def add(self, experiment, panel, filter, q2, r2, sow, sow_source, errors) -> ResultRow:
        errors = np.asarray(errors, dtype=np.float64)
        row = ResultRow(experiment, panel, filter, float(q2), float(r2), float(sow), sow_source,
                        float(to_db(errors.mean())), float(np.std(to_db(errors))), errors.size)
        self.rows.append(row)
        self.errors[row.key] = errors
        return row

    def select(self, **match) -> list[ResultRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]

    def get(self, **match) -> ResultRow:
        hits = self.select(**match)
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {match}")
        return hits[0]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([repr(v) if isinstance(v, float) else v
                            for v in (getattr(r, c) for c in self.columns)])

    def write_errors(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["panel", "filter", "sow_source", "q2", "r2", "traj", "mse"])
            for r in self.rows:
                for i, e in enumerate(self.errors[r.key]):
                    w.writerow([r.panel, r.filter, r.sow_source, repr(r.q2), repr(r.r2), i,
                                repr(float(e))])

    @classmethod
    def read_csv(cls, path, errors_path=None) -> "ResultTable":
        table = cls()
        types = {f.name: f.type for f in fields(ResultRow)}
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                vals = {}
                for k, v in rec.items():
                    t = types[k]
                    vals[k] = float(v) if t == "float" else int(v) if t == "int" else v
                table.rows.append(ResultRow(**vals))
        if errors_path is not None:
            acc: dict[str, list[float]] = {}
            with open(errors_path, newline="") as fh:
                for rec in csv.DictReader(fh):
                    key = (f"{rec['panel']}|{rec['filter']}|{rec['sow_source']}|"
                           f"{float(rec['q2'])!r}|{float(rec['r2'])!r}")
                    acc.setdefault(key, []).append(float(rec["mse"]))
            table.errors = {k: np.array(v) for k, v in acc.items()}
        return table

    def report(self) -> str:
        lines = [f"{'panel':8s} {'filter':12s} {'source':7s} {'q2':>9s} {'r2':>9s} "
                 f"{'sow':>9s} {'MSE dB':>8s} {'std dB':>7s} {'n':>4s}"]
        for r in self.rows:
            lines.append(f"{r.panel:8s} {r.filter:12s} {r.sow_source:7s} {r.q2:9.4g} {r.r2:9.4g} "
                         f"{r.sow:9.4g} {r.mse_db:8.3f} {r.std_db:7.3f} {r.n_trajectories:4d}")
        return "\n".join(lines)


# --------------------------------------------------------------------------
# setup
# --------------------------------------------------------------------------


def build_model(cfg: ExperimentConfig) -> SSModel:
    return default_model(cfg.m, family=cfg.family, seed=cfg.model_seed)


def pair_for_sow(s: float) -> tuple[float, float]:
    """(q2, r2) with ratio ``s`` and product 1; ``s = 1`` maps to exactly (1, 1)."""
    if s == 1.0:
        return 1.0, 1.0
    root = float(np.sqrt(s))
    return root, 1.0 / root


def _constant_batch(model, q2, r2, N, T, rng, family) -> Dataset:
    return generate_batch(model, np.full((N, T), q2), np.full((N, T), r2), rng, family)


def training_data(cfg: ExperimentConfig, model: SSModel) -> Dataset:
    """Full training set: ``n_per_pair`` trajectories for each training context."""
    parts = []
    for i, s in enumerate(cfg.train_sows):
        q2, r2 = pair_for_sow(s)
        parts.append(_constant_batch(model, q2, r2, cfg.n_per_pair, cfg.T,
                                     cfg.rng(_TRAIN_DATA, i), cfg.family))
    return Dataset.concatenate(parts)


def evaluation_points(cfg: ExperimentConfig) -> list[tuple[str, float, float]]:
    """(panel, q2, r2) for trained pairs, jointly scaled pairs and the ratio grid."""
    pts = []
    for s in cfg.train_sows:
        pts.append(("trained", *pair_for_sow(s)))
    for s in cfg.train_sows:
        q2, r2 = pair_for_sow(s)
        for c in cfg.scales:
            pts.append(("scaled", c * q2, c * r2))
    lo, hi = np.log10(min(cfg.train_sows)), np.log10(max(cfg.train_sows))
    for s in np.logspace(lo, hi, cfg.n_test_sows):
        pts.append(("ratio", *pair_for_sow(float(s))))
    return pts


def evaluation_dataset(cfg: ExperimentConfig, model: SSModel) -> Dataset:
    parts = [_constant_batch(model, q2, r2, cfg.n_test, cfg.T, cfg.rng(_TEST_DATA, i), cfg.family)
             for i, (_, q2, r2) in enumerate(evaluation_points(cfg))]
    return Dataset.concatenate(parts)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def train_aknet(cfg: ExperimentConfig, model: SSModel, data: Dataset, out: Path | None = None):
    """Both training stages; returns theta, psi and the two reports."""
    theta = GainNetParams.init(model.m, model.n, cfg.hidden, rng=cfg.rng(_INIT, 1))
    theta, rep1 = train_stage1(model, pseudo_stationary(data), cfg.train_config(Stage.THETA),
                               theta)
    log.info("%s", rep1.summary())
    psi = HyperParams.init(theta.sites, cfg.hyper_width, rng=cfg.rng(_INIT, 2))
    psi, rep2 = train_stage2(model, data, theta, cfg.train_config(Stage.PSI), psi)
    log.info("%s", rep2.summary())
    if out is not None:
        ck = Path(out) / "checkpoints"
        ck.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ck / "theta.bin", {"theta": theta})
        save_checkpoint(ck / "aknet.bin", {"theta": theta, "psi": psi})
        rep1.write_csv(Path(out) / "stage1_report.csv")
        rep2.write_csv(Path(out) / "stage2_report.csv")
    return theta, psi, (rep1, rep2)


def obtain_trained(cfg: ExperimentConfig, model: SSModel, out: Path):
    """Load ``cfg.checkpoint`` (or ``out/checkpoints/aknet.bin``), training if allowed."""
    path = Path(cfg.checkpoint) if cfg.checkpoint else Path(out) / "checkpoints" / "aknet.bin"
    if path.exists():
        stores = load_checkpoint(path)
        return stores["theta"], stores["psi"], None
    if not cfg.allow_training:
        raise FileNotFoundError(
            f"no trained checkpoint at {path}; run `aknet train --stage 1` and "
            f"`aknet train --stage 2` first, point --config at a checkpoint, or allow training"
        )
    data = training_data(cfg, model)
    return train_aknet(cfg, model, data, out)


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------


def _sow_for(cfg, model, ds, theta, psi, source):
    if source == "oracle":
        return ds.sow
    if source == "corr":
        return corr_sow_sequence(model, ds.y, cfg.alpha, ds.x0[0], np.zeros((model.m, model.m)),
                                 cfg.estimator, cfg.lags)[0]
    return grid_sow_sequence(model, ds.y, theta, psi, cfg.grid, cfg.grid_window, cfg.grid_stride)


def evaluate_points(cfg: ExperimentConfig, model: SSModel, ds: Dataset, theta, psi,
                    panels: dict | None = None, table: ResultTable | None = None) -> ResultTable:
    """KF and AKNet rows for every (q2, r2) group of ``ds``."""
    table = ResultTable() if table is None else table
    kf_rows = evaluate(model, ds)
    sow = _sow_for(cfg, model, ds, theta, psi, cfg.sow_source)
    ak_x = aknet_estimates(model, ds, theta, psi, sow)
    ak_err = per_trajectory_mse(ak_x, ds.x)
    groups = ds.groups()
    for kr in kf_rows:
        key = (kr["q2"], kr["r2"])
        panel = (panels or {}).get(key, "test")
        table.add(cfg.experiment, panel, "KF", kr["q2"], kr["r2"], kr["sow"], "oracle",
                  kr["errors"])
        table.add(cfg.experiment, panel, "AKNet", kr["q2"], kr["r2"], kr["sow"], cfg.sow_source,
                  ak_err[groups[key]])
    return table


def _run_grid(cfg: ExperimentConfig, out=None) -> ResultTable:
    out = Path(cfg.out if out is None else out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    model = build_model(cfg)
    theta, psi, reports = obtain_trained(cfg, model, out)
    table = ResultTable()
    for i, (panel, q2, r2) in enumerate(evaluation_points(cfg)):
        ds = _constant_batch(model, q2, r2, cfg.n_test, cfg.T, cfg.rng(_TEST_DATA, i), cfg.family)
        evaluate_points(cfg, model, ds, theta, psi, {(q2, r2): panel}, table)
    _write_outputs(cfg, out, table, reports, time.perf_counter() - start)
    return table


def run_gaussian_grid(cfg: ExperimentConfig, out=None) -> ResultTable:
    if cfg.family is not NoiseFamily.GAUSSIAN:
        raise ValueError("run_gaussian_grid needs a gaussian experiment config")
    return _run_grid(cfg, out)


def run_exponential_grid(cfg: ExperimentConfig, out=None) -> ResultTable:
    if cfg.family is not NoiseFamily.EXPONENTIAL:
        raise ValueError("run_exponential_grid needs an exponential experiment config")
    return _run_grid(cfg, out)


def jump_dataset(cfg: ExperimentConfig, model: SSModel, r2_after: float, index: int) -> Dataset:
    at = cfg.jump_T // 2 if cfg.jump_at is None else cfg.jump_at
    sched = NoiseSchedule.jump(tuple(cfg.jump_before), (cfg.jump_q2, r2_after), cfg.jump_T, at,
                               NoiseFamily.GAUSSIAN, cfg.jump_every)
    q2 = np.broadcast_to(sched.q2, (cfg.n_test, cfg.jump_T))
    r2 = np.broadcast_to(sched.r2, (cfg.n_test, cfg.jump_T))
    ds = generate_batch(model, q2, r2, cfg.rng(_TEST_DATA, 1000 + index))
    ds.pair = np.tile([cfg.jump_q2, r2_after], (len(ds), 1))
    return ds


def _jump_rows(cfg: ExperimentConfig, model: SSModel, ds: Dataset, r2: float, theta, psi,
               table: ResultTable) -> None:
    at = cfg.jump_T // 2 if cfg.jump_at is None else cfg.jump_at
    window = (at, cfg.jump_T)
    sow_after = float(ds.sow[0, -1]) if cfg.jump_every is None else float(ds.sow[0, at])

    def add(name, src, x):
        table.add(cfg.experiment, "jump", name, cfg.jump_q2, r2, sow_after, src,
                  per_trajectory_mse(x, ds.x, window))

    add("KF", "oracle", kf_estimates(model, ds))
    sow_corr, akf, _ = corr_sow_sequence(model, ds.y, cfg.alpha, ds.x0[0],
                                         np.zeros((model.m, model.m)), cfg.estimator, cfg.lags)
    add("adaptive-KF", "corr", akf.x)
    add("AKNet", "corr", aknet_estimates(model, ds, theta, psi, sow_corr))
    add("AKNet", "oracle", aknet_estimates(model, ds, theta, psi, ds.sow))
    if cfg.sow_source == "grid":
        sow_grid = grid_sow_sequence(model, ds.y, theta, psi, cfg.grid, cfg.grid_window,
                                     cfg.grid_stride)
        add("AKNet", "grid", aknet_estimates(model, ds, theta, psi, sow_grid))


def run_sow_jump(cfg: ExperimentConfig, out=None) -> ResultTable:
    """Jump protocol; MSE is measured over the steps from the jump onwards."""
    out = Path(cfg.out if out is None else out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    model = build_model(cfg)
    theta, psi, reports = obtain_trained(cfg, model, out)
    table = ResultTable()
    for j, r2 in enumerate(cfg.jump_r2):
        _jump_rows(cfg, model, jump_dataset(cfg, model, r2, j), r2, theta, psi, table)
    _write_outputs(cfg, out, table, reports, time.perf_counter() - start)
    return table


def evaluate_saved(cfg: ExperimentConfig, model: SSModel, ds: Dataset, theta, psi) -> ResultTable:
    """Score a test set written by :func:`generate_data`, block by block.

    Blocks of ``n_test`` trajectories follow the generation order, so the
    table matches the one the matching ``run_*`` function produces.
    """
    if cfg.experiment == "sow-jump":
        labels = [("jump", cfg.jump_q2, r2) for r2 in cfg.jump_r2]
    else:
        labels = evaluation_points(cfg)
    if len(ds) != len(labels) * cfg.n_test:
        raise ValueError(f"test set holds {len(ds)} trajectories, expected "
                         f"{len(labels)} blocks of {cfg.n_test}; regenerate it with this config")
    table = ResultTable()
    for i, (panel, q2, r2) in enumerate(labels):
        block = ds.subset(np.arange(i * cfg.n_test, (i + 1) * cfg.n_test))
        if panel == "jump":
            _jump_rows(cfg, model, block, r2, theta, psi, table)
        else:
            evaluate_points(cfg, model, block, theta, psi, {(q2, r2): panel}, table)
    return table


def run_experiment(cfg: ExperimentConfig, out=None) -> ResultTable:
    runner = {
        "gaussian-grid": run_gaussian_grid,
        "exponential-grid": run_exponential_grid,
        "sow-jump": run_sow_jump,
    }[cfg.experiment]
    return runner(cfg, out)


def _write_outputs(cfg, out: Path, table: ResultTable, reports, elapsed: float) -> None:
    table.write_csv(out / "results.csv")
    table.write_errors(out / "errors.csv")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    lines = [f"experiment {cfg.experiment}, seed {cfg.seed}", ""]
    if reports:
        lines += [r.summary() for r in reports] + [""]
    lines += [table.report(), "", f"elapsed {elapsed:.1f} s"]
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    if cfg.plots:
        from .plots import plot_results

        plot_results(out / "results.csv", out)


def generate_data(cfg: ExperimentConfig, out) -> dict[str, Path]:
    """Training, pseudo-stationary and test datasets written under ``out/data``."""
    from .datasets import export_csv

    data_dir = Path(out) / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg)
    full = training_data(cfg, model)
    paths = {
        "train": data_dir / "train.akd",
        "stationary": data_dir / "train_stationary.akd",
        "test": data_dir / "test.akd",
    }
    save_dataset(paths["train"], full)
    save_dataset(paths["stationary"], pseudo_stationary(full))
    if cfg.experiment == "sow-jump":
        test = Dataset.concatenate([jump_dataset(cfg, model, r2, j)
                                    for j, r2 in enumerate(cfg.jump_r2)])
    else:
        test = evaluation_dataset(cfg, model)
    save_dataset(paths["test"], test)
    export_csv(data_dir / "test.csv", test)
    return paths
