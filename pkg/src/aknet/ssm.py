"""Linear state-space models, noise generation and the noise-ratio context."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

import numpy as np

from .numerics import ContractError

__all__ = [
    "NoiseFamily",
    "SSModel",
    "NoiseSchedule",
    "Trajectory",
    "Dataset",
    "sow",
    "sow_from_scales",
    "sample_noise",
    "generate",
    "generate_batch",
    "rotation_decay",
    "random_spd",
    "default_model",
]


class NoiseFamily(str, Enum):
    GAUSSIAN = "gaussian"
    EXPONENTIAL = "exponential"


def _is_spd(A: np.ndarray) -> bool:
    if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
        return False
    try:
        np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return False
    return True


@dataclass
class SSModel:
    """``x_t = F x_{t-1} + e_t``, ``y_t = H x_t + v_t`` with base covariances Q0, R0."""

    F: np.ndarray
    H: np.ndarray
    Q0: np.ndarray
    R0: np.ndarray

    def __post_init__(self):
        self.F = np.atleast_2d(np.asarray(self.F, dtype=np.float64))
        self.H = np.atleast_2d(np.asarray(self.H, dtype=np.float64))
        self.Q0 = np.atleast_2d(np.asarray(self.Q0, dtype=np.float64))
        self.R0 = np.atleast_2d(np.asarray(self.R0, dtype=np.float64))
        m, n = self.m, self.n
        if self.F.shape != (m, m) or self.H.shape != (n, m):
            raise ContractError(f"bad F/H shapes {self.F.shape}, {self.H.shape}")
        if self.Q0.shape != (m, m) or self.R0.shape != (n, n):
            raise ContractError(f"bad Q0/R0 shapes {self.Q0.shape}, {self.R0.shape}")
        for name in ("F", "H", "Q0", "R0"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ContractError(f"{name} has non-finite entries")
        if not _is_spd(self.Q0) or not _is_spd(self.R0):
            raise ContractError("Q0 and R0 must be symmetric positive definite")

    @property
    def m(self) -> int:
        return self.F.shape[0]

    @property
    def n(self) -> int:
        return self.H.shape[0]


def sow(Qt: np.ndarray, Rt: np.ndarray, m: int | None = None, n: int | None = None) -> float:
    """Noise-ratio context ``n Tr(Q) / (m Tr(R))``."""
    Qt, Rt = np.atleast_2d(Qt), np.atleast_2d(Rt)
    m = Qt.shape[0] if m is None else m
    n = Rt.shape[0] if n is None else n
    tr_r = float(np.trace(Rt))
    if tr_r == 0.0:
        raise ZeroDivisionError("observation noise covariance has zero trace")
    return n * float(np.trace(Qt)) / (m * tr_r)


def sow_from_scales(model: SSModel, q2, r2):
    """Context for ``Q = q2 Q0``, ``R = r2 R0``; vectorised over q2, r2."""
    base = model.n * np.trace(model.Q0) / (model.m * np.trace(model.R0))
    return base * np.asarray(q2, dtype=np.float64) / np.asarray(r2, dtype=np.float64)


def sample_noise(cov, family, rng: np.random.Generator, size=None) -> np.ndarray:
    """Zero-mean noise with covariance ``cov``.

    Gaussian draws are coloured with the Cholesky factor.  Exponential draws
    need a diagonal ``cov`` and use ``lam * (E - 1)`` with ``E ~ Exp(1)`` and
    ``lam**2`` the diagonal variance.  ``size`` prepends batch dimensions.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    family = NoiseFamily(family)
    d = cov.shape[0]
    shape = (d,) if size is None else tuple(np.atleast_1d(size)) + (d,)
    if family is NoiseFamily.GAUSSIAN:
        L = np.linalg.cholesky(cov)
        return rng.standard_normal(shape) @ L.T
    if np.any(cov - np.diag(np.diag(cov))):
        raise ContractError("exponential noise is only supported for diagonal covariance")
    lam = np.sqrt(np.diag(cov))
    return lam * (rng.standard_exponential(shape) - 1.0)


@dataclass
class NoiseSchedule:
    """Per-step scales: ``Q_t = q2[t] Q0`` and ``R_t = r2[t] R0``."""

    q2: np.ndarray
    r2: np.ndarray
    family: NoiseFamily = NoiseFamily.GAUSSIAN

    def __post_init__(self):
        self.q2 = np.atleast_1d(np.asarray(self.q2, dtype=np.float64))
        self.r2 = np.atleast_1d(np.asarray(self.r2, dtype=np.float64))
        self.family = NoiseFamily(self.family)
        if self.q2.shape != self.r2.shape:
            raise ContractError("q2 and r2 schedules differ in length")
        if np.any(self.q2 <= 0) or np.any(self.r2 <= 0):
            raise ContractError("noise scales must be positive")

    def __len__(self):
        return len(self.q2)

    @classmethod
    def constant(cls, q2: float, r2: float, T: int, family=NoiseFamily.GAUSSIAN):
        return cls(np.full(T, q2), np.full(T, r2), family)

    @classmethod
    def jump(cls, before: tuple[float, float], after: tuple[float, float], T: int,
             at: int, family=NoiseFamily.GAUSSIAN, every: int | None = None):
        """Scales switch from ``before`` to ``after`` at step ``at``.

        With ``every`` set, the schedule keeps alternating between the two
        pairs every ``every`` steps after the first switch.
        """
        q2 = np.full(T, before[0])
        r2 = np.full(T, before[1])
        idx = np.arange(T)
        on = idx >= at
        if every:
            on &= ((idx - at) // every) % 2 == 0
        q2[on] = after[0]
        r2[on] = after[1]
        return cls(q2, r2, family)


@dataclass
class Trajectory:
    x: np.ndarray       # (T, m)
    y: np.ndarray       # (T, n)
    sow: np.ndarray     # (T,)
    x0: np.ndarray      # (m,)
    q2: np.ndarray      # (T,)
    r2: np.ndarray      # (T,)

    def __post_init__(self):
        T = self.x.shape[0]
        if self.y.shape[0] != T or self.sow.shape != (T,):
            raise ContractError("trajectory arrays disagree in length")
        if np.any(self.sow <= 0):
            raise ContractError("sow must be positive")

    def __len__(self):
        return self.x.shape[0]


@dataclass
class Dataset:
    """Batch-first stack of equal-length trajectories.

    ``pair`` holds each trajectory's nominal ``(q2, r2)`` label, used to
    group results; for jump schedules it is the post-jump pair.
    """

    x: np.ndarray       # (N, T, m)
    y: np.ndarray       # (N, T, n)
    sow: np.ndarray     # (N, T)
    x0: np.ndarray      # (N, m)
    q2: np.ndarray      # (N, T)
    r2: np.ndarray      # (N, T)
    family: NoiseFamily = NoiseFamily.GAUSSIAN
    split: str = "full"
    pair: np.ndarray = field(default=None)

    def __post_init__(self):
        self.family = NoiseFamily(self.family)
        if self.x.ndim != 3 or self.x.shape[0] == 0:
            raise ContractError("dataset must hold at least one trajectory")
        N, T, _ = self.x.shape
        if self.y.shape[:2] != (N, T) or self.sow.shape != (N, T):
            raise ContractError("dataset arrays disagree in shape")
        if self.split not in ("full", "pseudo-stationary"):
            raise ContractError(f"unknown split tag {self.split!r}")
        if self.pair is None:
            self.pair = np.stack([self.q2[:, -1], self.r2[:, -1]], axis=1)

    @property
    def m(self) -> int:
        return self.x.shape[2]

    @property
    def n(self) -> int:
        return self.y.shape[2]

    @property
    def T(self) -> int:
        return self.x.shape[1]

    def __len__(self):
        return self.x.shape[0]

    def __getitem__(self, i: int) -> Trajectory:
        return Trajectory(self.x[i], self.y[i], self.sow[i], self.x0[i], self.q2[i], self.r2[i])

    def __iter__(self) -> Iterator[Trajectory]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.x[idx], self.y[idx], self.sow[idx], self.x0[idx], self.q2[idx], self.r2[idx],
            self.family, split or self.split, self.pair[idx],
        )

    def groups(self) -> dict[tuple[float, float], np.ndarray]:
        """Indices of trajectories sharing a nominal ``(q2, r2)`` pair, in first-seen order."""
        out: dict[tuple[float, float], list[int]] = {}
        for i, (q, r) in enumerate(self.pair):
            out.setdefault((float(q), float(r)), []).append(i)
        return {k: np.array(v) for k, v in out.items()}

    @classmethod
    def concatenate(cls, parts: list["Dataset"], split: str = "full") -> "Dataset":
        fams = {p.family for p in parts}
        if len(fams) != 1:
            raise ContractError("cannot mix noise families in one dataset")
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
        return cls(cat("x"), cat("y"), cat("sow"), cat("x0"), cat("q2"), cat("r2"),
                   parts[0].family, split, cat("pair"))


def generate_batch(model: SSModel, q2, r2, rng: np.random.Generator,
                   family=NoiseFamily.GAUSSIAN, x0=None, split: str = "full") -> Dataset:
    """Simulate N trajectories at once from (N, T) scale arrays."""
    q2 = np.atleast_2d(np.asarray(q2, dtype=np.float64))
    r2 = np.atleast_2d(np.asarray(r2, dtype=np.float64))
    if q2.shape != r2.shape:
        raise ContractError("q2 and r2 arrays differ in shape")
    if np.any(q2 <= 0) or np.any(r2 <= 0):
        raise ContractError("noise scales must be positive")
    N, T = q2.shape
    m, n = model.m, model.n
    x0 = np.zeros((N, m)) if x0 is None else np.broadcast_to(np.asarray(x0, float), (N, m)).copy()
    e = sample_noise(model.Q0, family, rng, size=(N, T)) * np.sqrt(q2)[..., None]
    v = sample_noise(model.R0, family, rng, size=(N, T)) * np.sqrt(r2)[..., None]
    x = np.empty((N, T, m))
    prev = x0
    for t in range(T):
        prev = prev @ model.F.T + e[:, t]
        x[:, t] = prev
    y = x @ model.H.T + v
    return Dataset(x, y, sow_from_scales(model, q2, r2), x0, q2, r2, family, split)


def generate(model: SSModel, schedule: NoiseSchedule, T: int | None = None, x0=None,
             rng: np.random.Generator | None = None) -> Trajectory:
    """One trajectory of length ``T`` following ``schedule``."""
    T = len(schedule) if T is None else T
    if len(schedule) < T:
        raise ContractError(f"schedule has {len(schedule)} steps, need {T}")
    rng = np.random.default_rng() if rng is None else rng
    ds = generate_batch(model, schedule.q2[None, :T], schedule.r2[None, :T], rng,
                        schedule.family, x0)
    return ds[0]


# --------------------------------------------------------------------------
# model construction
# --------------------------------------------------------------------------


def rotation_decay(m: int, radius: float = 0.95, angle: float = np.pi / 18) -> np.ndarray:
    """Block-diagonal rotations scaled to spectral radius ``radius``."""
    F = np.zeros((m, m))
    c, s = np.cos(angle), np.sin(angle)
    for k in range(0, m - 1, 2):
        F[k:k + 2, k:k + 2] = [[c, -s], [s, c]]
    if m % 2:
        F[m - 1, m - 1] = 1.0
    return radius * F


def random_spd(d: int, rng: np.random.Generator, floor: float = 0.1) -> np.ndarray:
    """``A A^T + floor I`` rescaled to trace ``d``."""
    A = rng.standard_normal((d, d))
    S = A @ A.T + floor * np.eye(d)
    S = 0.5 * (S + S.T)
    return S * (d / np.trace(S))


def default_model(m: int = 2, n: int | None = None, family=NoiseFamily.GAUSSIAN,
                  seed: int = 0) -> SSModel:
    """Stable rotation-decay dynamics observed through ``H = I``.

    Gaussian models get random SPD base covariances; exponential ones get
    identities (the exponential sampler needs diagonal covariance).
    """
    n = m if n is None else n
    H = np.eye(n, m)
    if NoiseFamily(family) is NoiseFamily.GAUSSIAN:
        rng = np.random.default_rng(seed)
        Q0, R0 = random_spd(m, rng), random_spd(n, rng)
    else:
        Q0, R0 = np.eye(m), np.eye(n)
    return SSModel(rotation_decay(m), H, Q0, R0)
