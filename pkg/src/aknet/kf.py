"""Classical and adaptive Kalman filters.

All routines are batched over trajectories: means have shape ``(B, m)`` and
covariances ``(B, m, m)``.  A covariance with leading dimension 1 is shared
by the whole batch, which is how :func:`kf_run` filters many trajectories
with a common noise schedule in one pass (the covariance recursion does not
depend on the data).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import ContractError
from .ssm import SSModel

__all__ = [
    "SingularInnovationError",
    "KFState",
    "KFResult",
    "kf_predict",
    "kf_update",
    "kf_run",
    "adaptive_kf_run",
    "steady_state_gain",
    "OracleEstimator",
]

COND_LIMIT = 1e12


class SingularInnovationError(np.linalg.LinAlgError):
    """Innovation covariance is singular or too badly conditioned to invert."""


@dataclass
class KFState:
    x: np.ndarray   # (B, m)
    P: np.ndarray   # (B, m, m) or (1, m, m)

    @classmethod
    def initial(cls, x0, P0, batch: int | None = None) -> "KFState":
        x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
        if batch is not None:
            x0 = np.broadcast_to(x0, (batch, x0.shape[-1])).copy()
        P0 = np.asarray(P0, dtype=np.float64)
        if P0.ndim == 2:
            P0 = P0[None]
        return cls(x0, P0)


def _sym(P):
    return 0.5 * (P + np.swapaxes(P, -1, -2))


def kf_predict(state: KFState, model: SSModel, Qt):
    """Prior mean, predicted observation and prior covariance."""
    F, H = model.F, model.H
    x_prior = state.x @ F.T
    y_pred = x_prior @ H.T
    P_prior = F @ state.P @ F.T + Qt
    return x_prior, y_pred, P_prior


def _gain(P_prior, H, Rt):
    S = _sym(H @ P_prior @ H.T + Rt)
    eig = np.linalg.eigvalsh(S)
    lo, hi = eig[..., 0], eig[..., -1]
    if np.any(lo <= 0) or np.any(hi / lo > COND_LIMIT):
        cond = np.max(np.where(lo > 0, hi / np.where(lo > 0, lo, 1.0), np.inf))
        raise SingularInnovationError(
            f"innovation covariance is singular or ill-conditioned "
            f"(condition estimate {cond:.3g}, limit {COND_LIMIT:.0e})"
        )
    L = np.linalg.cholesky(S)
    # K = P H^T S^{-1}  <=>  S K^T = H P  (S, P symmetric)
    PHt = P_prior @ H.T
    Z = np.linalg.solve(L, np.swapaxes(PHt, -1, -2))
    Kt = np.linalg.solve(np.swapaxes(L, -1, -2), Z)
    return np.swapaxes(Kt, -1, -2)


def kf_update(x_prior, y_pred, P_prior, y, model: SSModel, Rt):
    """Posterior state and gain; covariance via the Joseph form.

    Returns ``(KFState, K, innovation)``.
    """
    H = model.H
    K = _gain(P_prior, H, Rt)
    d = y - y_pred
    x = x_prior + np.einsum("...ij,...j->...i", K, d)
    A = np.eye(model.m) - K @ H
    P = _sym(A @ P_prior @ np.swapaxes(A, -1, -2) + K @ Rt @ np.swapaxes(K, -1, -2))
    return KFState(x, P), K, d


@dataclass
class KFResult:
    x: np.ndarray        # (B, T, m) posterior means
    K: np.ndarray        # (B|1, T, m, n) gains
    P: np.ndarray        # (B|1, T, m, m) posterior covariances
    diagnostics: dict = field(default_factory=dict)

    def squeeze(self) -> "KFResult":
        return KFResult(self.x[0], self.K[0], self.P[0], self.diagnostics)


def _as_seq(M, T, d):
    M = np.asarray(M, dtype=np.float64)
    if M.ndim == 2:
        M = np.broadcast_to(M, (T, d, d))
    if M.shape[-3] != T:
        raise ContractError(f"covariance sequence has length {M.shape[-3]}, need {T}")
    return M


def kf_run(model: SSModel, Qs, Rs, ys, x0=None, P0=None) -> KFResult:
    """Filter ``ys`` of shape (T, n) or (B, T, n).

    ``Qs``/``Rs`` are (T, m, m)/(T, n, n) sequences shared by the batch, or
    (B, T, ., .) per trajectory; a single matrix is held constant.
    """
    ys = np.asarray(ys, dtype=np.float64)
    single = ys.ndim == 2
    if single:
        ys = ys[None]
    B, T, n = ys.shape
    m = model.m
    Qs, Rs = _as_seq(Qs, T, m), _as_seq(Rs, T, n)
    x0 = np.zeros(m) if x0 is None else x0
    P0 = np.eye(m) if P0 is None else P0
    state = KFState.initial(x0, P0, batch=B)
    xs = np.empty((B, T, m))
    Ks, Ps = [], []
    for t in range(T):
        Qt = Qs[..., t, :, :]
        Rt = Rs[..., t, :, :]
        x_prior, y_pred, P_prior = kf_predict(state, model, Qt)
        state, K, _ = kf_update(x_prior, y_pred, P_prior, ys[:, t], model, Rt)
        xs[:, t] = state.x
        Ks.append(np.broadcast_to(K, (K.shape[0] if K.ndim == 3 else 1, m, n)))
        Ps.append(np.broadcast_to(state.P, (state.P.shape[0], m, m)))
    res = KFResult(xs, np.stack(Ks, axis=1), np.stack(Ps, axis=1))
    return res.squeeze() if single else res


def steady_state_gain(model: SSModel, Q, R, iters: int = 10_000, P0=None):
    """Gain and prior covariance after iterating the Riccati recursion."""
    P = np.eye(model.m) if P0 is None else np.asarray(P0, dtype=np.float64)
    F, H = model.F, model.H
    for _ in range(iters):
        P_prior = F @ P @ F.T + Q
        K = _gain(P_prior, H, R)
        A = np.eye(model.m) - K @ H
        P = _sym(A @ P_prior @ A.T + K @ R @ K.T)
    P_prior = F @ P @ F.T + Q
    return _gain(P_prior, H, R), P_prior


class OracleEstimator:
    """Hands the true noise covariances to :func:`adaptive_kf_run`."""

    def __init__(self, Qs, Rs):
        self.Qs = np.asarray(Qs, dtype=np.float64)
        self.Rs = np.asarray(Rs, dtype=np.float64)
        self.t = 0

    def estimate(self):
        return self.Qs[..., self.t, :, :], self.Rs[..., self.t, :, :]

    def observe(self, d, eps, K, H, P):
        self.t += 1


def adaptive_kf_run(model: SSModel, ys, estimator, x0=None, P0=None) -> KFResult:
    """Kalman filter whose Q_t, R_t come from an online estimator.

    The estimator exposes ``estimate() -> (Q, R)`` for the upcoming step and
    ``observe(d, eps, K, H, P)`` with the step's innovation, post-fit
    residual, gain and posterior covariance.  If either call fails or yields
    non-finite matrices, the previous step's estimates are reused and the
    step is listed in ``diagnostics["fallback_steps"]``.  Estimated contexts
    are returned in ``diagnostics["sow"]`` with shape (B, T).
    """
    ys = np.asarray(ys, dtype=np.float64)
    single = ys.ndim == 2
    if single:
        ys = ys[None]
    B, T, n = ys.shape
    m = model.m
    state = KFState.initial(np.zeros(m) if x0 is None else x0,
                            np.eye(m) if P0 is None else P0, batch=B)
    xs = np.empty((B, T, m))
    Ks, Ps = [], []
    sows = np.empty((B, T))
    fallback = []
    last = None
    for t in range(T):
        try:
            Qt, Rt = estimator.estimate()
            if not (np.all(np.isfinite(Qt)) and np.all(np.isfinite(Rt))):
                raise FloatingPointError("non-finite noise estimate")
            last = (Qt, Rt)
        except Exception:
            if last is None:
                raise
            fallback.append(t)
            Qt, Rt = last
        x_prior, y_pred, P_prior = kf_predict(state, model, Qt)
        state, K, d = kf_update(x_prior, y_pred, P_prior, ys[:, t], model, Rt)
        eps = ys[:, t] - state.x @ model.H.T
        try:
            estimator.observe(d, eps, K, model.H, state.P)
        except Exception:
            if t not in fallback:
                fallback.append(t)
        xs[:, t] = state.x
        Ks.append(np.broadcast_to(K, (K.shape[0], m, n)))
        Ps.append(np.broadcast_to(state.P, (state.P.shape[0], m, m)))
        Qb = np.broadcast_to(Qt, (B, m, m))
        Rb = np.broadcast_to(Rt, (B, n, n))
        sows[:, t] = n * np.trace(Qb, axis1=-2, axis2=-1) / (m * np.trace(Rb, axis1=-2, axis2=-1))
    res = KFResult(xs, np.stack(Ks, axis=1), np.stack(Ps, axis=1),
                   {"fallback_steps": fallback, "sow": sows})
    return res.squeeze() if single else res
