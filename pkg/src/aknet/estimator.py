"""Online noise-ratio estimators.

``CorrelationEstimator`` is a one-step covariance-matching estimator with
exponential forgetting, built from a filter's innovation ``d_t``, post-fit
residual ``eps_t``, gain and posterior covariance::

    R_hat <- a R_hat + (1 - a) (eps eps^T + H P H^T)
    Q_hat <- a Q_hat + (1 - a) K d d^T K^T

``LaggedCorrEstimator`` instead matches the lag-0 and lag-1 (and further)
innovation autocovariances of a fixed nominal-gain reference filter.  Those
moments are linear in the two noise scales, so the pair is identifiable
from second-order statistics, which the one-step recursion above is not.

``grid_search_sow`` picks the context on a grid that minimises the one-step
observation prediction error of the learned filter over a window.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .kf import KFResult, adaptive_kf_run
from .numerics import ContractError
from .ssm import SSModel

__all__ = [
    "CorrEstimatorState",
    "corr_update",
    "CorrelationEstimator",
    "LaggedCorrEstimator",
    "corr_sow_sequence",
    "grid_search_sow",
    "grid_sow_sequence",
    "write_diagnostics",
]

CLAMP = 1e-12


def _psd_project(M):
    """Symmetrise and clamp eigenvalues at ``CLAMP``; returns (matrix, was_clamped)."""
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    w, V = np.linalg.eigh(M)
    bad = np.any(w < CLAMP, axis=-1)
    if not np.any(bad):
        return M, bad
    w = np.maximum(w, CLAMP)
    fixed = (V * w[..., None, :]) @ np.swapaxes(V, -1, -2)
    return np.where(bad[..., None, None], fixed, M), bad


@dataclass
class CorrEstimatorState:
    """Running estimates for a batch of filters: Q_hat (B, m, m), R_hat (B, n, n)."""

    Q0: np.ndarray
    R0: np.ndarray
    Q_hat: np.ndarray
    R_hat: np.ndarray
    alpha: float = 0.95
    clamped: np.ndarray = field(default=None)

    @classmethod
    def initial(cls, Q0, R0, batch: int = 1, alpha: float = 0.95, q2: float = 1.0,
                r2: float = 1.0) -> "CorrEstimatorState":
        if not 0.0 < alpha < 1.0:
            raise ContractError("forgetting factor must lie in (0, 1)")
        Q0 = np.asarray(Q0, dtype=np.float64)
        R0 = np.asarray(R0, dtype=np.float64)
        Q = np.broadcast_to(q2 * Q0, (batch,) + Q0.shape).copy()
        R = np.broadcast_to(r2 * R0, (batch,) + R0.shape).copy()
        return cls(Q0, R0, Q, R, alpha, np.zeros(batch, dtype=bool))

    @property
    def q_scale(self) -> np.ndarray:
        return np.maximum(np.trace(self.Q_hat, axis1=-2, axis2=-1) / np.trace(self.Q0), CLAMP)

    @property
    def r_scale(self) -> np.ndarray:
        return np.maximum(np.trace(self.R_hat, axis1=-2, axis2=-1) / np.trace(self.R0), CLAMP)

    @property
    def sow(self) -> np.ndarray:
        m, n = self.Q0.shape[0], self.R0.shape[0]
        base = n * np.trace(self.Q0) / (m * np.trace(self.R0))
        return base * self.q_scale / self.r_scale


def corr_update(state: CorrEstimatorState, d, eps, K, H, P) -> CorrEstimatorState:
    """One forgetting-factor update from a completed filter step (batched)."""
    a = state.alpha
    d = np.atleast_2d(d)
    eps = np.atleast_2d(eps)
    Kd = np.einsum("...ij,...j->...i", K, d)
    HPHt = H @ P @ H.T
    R = a * state.R_hat + (1.0 - a) * (eps[:, :, None] * eps[:, None, :] + HPHt)
    Q = a * state.Q_hat + (1.0 - a) * (Kd[:, :, None] * Kd[:, None, :])
    R, bad_r = _psd_project(R)
    Q, bad_q = _psd_project(Q)
    return CorrEstimatorState(state.Q0, state.R0, Q, R, a, bad_r | bad_q)


class CorrelationEstimator:
    """Estimator handle for :func:`~aknet.kf.adaptive_kf_run`.

    ``structured=True`` hands back ``q_hat^2 Q0`` and ``r_hat^2 R0`` instead
    of the raw matrix estimates.
    """

    def __init__(self, Q0, R0, batch: int = 1, alpha: float = 0.95, structured: bool = False,
                 q2: float = 1.0, r2: float = 1.0):
        self.state = CorrEstimatorState.initial(Q0, R0, batch, alpha, q2, r2)
        self.structured = structured
        self.history_sow: list[np.ndarray] = []
        self.history_clamped: list[np.ndarray] = []

    def estimate(self):
        s = self.state
        if self.structured:
            return (s.q_scale[:, None, None] * s.Q0, s.r_scale[:, None, None] * s.R0)
        return s.Q_hat, s.R_hat

    def observe(self, d, eps, K, H, P):
        self.state = corr_update(self.state, d, eps, K, H, P)
        self.history_sow.append(self.state.sow.copy())
        self.history_clamped.append(self.state.clamped.copy())

    @property
    def sow(self) -> np.ndarray:
        return self.state.sow


def _dlyap(A, W, tol: float = 1e-14, max_doublings: int = 60):
    """Solve ``M = A M A^T + W`` by squaring (A must be stable)."""
    if np.max(np.abs(np.linalg.eigvals(A))) >= 1.0:
        raise ContractError("reference filter is not stable")
    M, Ak = W.copy(), A.copy()
    for _ in range(max_doublings):
        step = Ak @ M @ Ak.T
        M = M + step
        if np.max(np.abs(step)) <= tol * max(np.max(np.abs(M)), 1.0):
            return M
        Ak = Ak @ Ak
    raise ContractError("Lyapunov iteration did not converge")


class LaggedCorrEstimator:
    """Innovation-autocovariance matching for ``Q = q2 Q0``, ``R = r2 R0``.

    A fixed-gain filter (the steady-state gain at ``q2 = r2 = 1``) runs on
    the raw observations.  With ``A = F (I - K H)`` its innovation
    autocovariances are::

        C_0 = H M H^T + R
        C_l = H A^(l-1) (A M H^T - F K R),   l >= 1
        M   = A M A^T + F K R K^T F^T + Q

    all linear in (q2, r2).  Exponentially weighted sample moments are
    solved for the pair by least squares each step.  The estimate does not
    feed back into the reference filter, so it cannot lock onto a wrong
    ratio the way the recursive form can.
    """

    def __init__(self, model: SSModel, batch: int = 1, alpha: float = 0.97, lags: int = 2,
                 x0=None, floor: float = 1e-3):
        from .kf import steady_state_gain

        if not 0.0 < alpha < 1.0:
            raise ContractError("forgetting factor must lie in (0, 1)")
        if lags < 1:
            raise ContractError("need at least one lag to separate Q from R")
        F, H, Q0, R0 = model.F, model.H, model.Q0, model.R0
        K, _ = steady_state_gain(model, Q0, R0)
        A = F @ (np.eye(model.m) - K @ H)
        cols, nominal = [], 0.0
        for M, Rc in ((_dlyap(A, Q0), np.zeros_like(R0)), (_dlyap(A, F @ K @ R0 @ K.T @ F.T), R0)):
            moments = [H @ M @ H.T + Rc]
            G = A @ M @ H.T - F @ K @ Rc
            for _ in range(lags):
                moments.append(H @ G)
                G = A @ G
            block = np.stack(moments)
            nominal = nominal + block
            cols.append(block.ravel())
        self.design = np.stack(cols, axis=1)
        self.solve = np.linalg.pinv(self.design)
        self.model, self.K, self.alpha, self.lags, self.floor = model, K, alpha, lags, floor
        self.C = np.broadcast_to(nominal, (batch,) + nominal.shape).copy()
        self.x = np.zeros((batch, model.m)) if x0 is None else \
            np.broadcast_to(np.asarray(x0, dtype=np.float64), (batch, model.m)).copy()
        self.past = np.zeros((lags, batch, model.n))          # most recent first
        self.q2 = np.ones(batch)
        self.r2 = np.ones(batch)

    def update(self, y) -> None:
        """Absorb one observation row per batch element."""
        F, H, a = self.model.F, self.model.H, self.alpha
        x_prior = self.x @ F.T
        d = np.asarray(y, dtype=np.float64) - x_prior @ H.T
        self.x = x_prior + d @ self.K.T
        lagged = np.concatenate([d[None], self.past])
        self.C = a * self.C + (1 - a) * np.einsum("bi,lbj->blij", d, lagged)
        self.past = lagged[:-1]
        theta = self.C.reshape(self.C.shape[0], -1) @ self.solve.T
        self.q2 = np.maximum(theta[:, 0], self.floor)
        self.r2 = np.maximum(theta[:, 1], self.floor)

    def estimate(self):
        return (self.q2[:, None, None] * self.model.Q0, self.r2[:, None, None] * self.model.R0)

    @property
    def sow(self) -> np.ndarray:
        m, n = self.model.m, self.model.n
        base = n * np.trace(self.model.Q0) / (m * np.trace(self.model.R0))
        return base * self.q2 / self.r2


class _Replay:
    """Feeds precomputed (Q, R) sequences to :func:`adaptive_kf_run`."""

    def __init__(self, Qs, Rs):
        self.Qs, self.Rs, self.t = Qs, Rs, 0

    def estimate(self):
        return self.Qs[self.t], self.Rs[self.t]

    def observe(self, d, eps, K, H, P):
        self.t += 1


ESTIMATORS = ("recursive", "lagged")


def corr_sow_sequence(model: SSModel, ys, alpha: float = 0.95, x0=None, P0=None,
                      method: str = "recursive", lags: int = 2):
    """Run the correlation-based adaptive KF and return the context it used at each step.

    Entry ``[:, t]`` is computed from data up to ``t - 1``, so it can drive
    another filter at step ``t`` without circularity.  ``method`` picks the
    recursive estimator or :class:`LaggedCorrEstimator`.
    """
    ys = np.asarray(ys, dtype=np.float64)
    if ys.ndim == 2:
        ys = ys[None]
    if method == "recursive":
        est = CorrelationEstimator(model.Q0, model.R0, batch=ys.shape[0], alpha=alpha)
        res = adaptive_kf_run(model, ys, est, x0, P0)
        return res.diagnostics["sow"], res, est
    if method != "lagged":
        raise ContractError(f"unknown estimator {method!r}; choose from {ESTIMATORS}")
    est = LaggedCorrEstimator(model, ys.shape[0], alpha, lags, x0)
    Qs, Rs = [], []
    for t in range(ys.shape[1]):
        Q, R = est.estimate()
        Qs.append(Q)
        Rs.append(R)
        est.update(ys[:, t])
    res = adaptive_kf_run(model, ys, _Replay(Qs, Rs), x0, P0)
    return res.diagnostics["sow"], res, est


def _grid_scores(model: SSModel, ys, theta, psi, grid, x0=None):
    """Summed one-step prediction error, shape (B, G), for every window and grid value."""
    from .hypercm import cm_weights
    from .kgain import run_filter

    B, W, n = ys.shape
    G = grid.size
    tiled = np.repeat(ys, G, axis=0)                          # (B*G, W, n)
    if x0 is not None:
        x0 = np.repeat(np.broadcast_to(x0, (B, model.m)), G, axis=0)
    cm = cm_weights(np.tile(grid, B), psi, theta.sites)
    _, preds = run_filter(model, tiled, theta, x0, cm).stacked()
    return np.sum((tiled - preds) ** 2, axis=(1, 2)).reshape(B, G)


def _check_grid(grid):
    grid = np.sort(np.asarray(grid, dtype=np.float64).ravel())
    if grid.size == 0:
        raise ContractError("empty grid")
    return grid


def grid_search_sow(model: SSModel, y_window, theta, psi, grid, x0=None) -> float:
    """Grid context with the smallest summed one-step prediction error.

    Ties go to the smallest grid value.
    """
    y = np.asarray(y_window, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] < 2:
        raise ContractError("window must be a (T, n) array with T >= 2")
    grid = _check_grid(grid)
    scores = _grid_scores(model, y[None], theta, psi, grid, x0)[0]
    best = np.flatnonzero(scores == scores.min())[0]
    return float(grid[best])


def grid_sow_sequence(model: SSModel, ys, theta, psi, grid=None, window: int = 20,
                      stride: int = 10, initial: float = 1.0) -> np.ndarray:
    """Piecewise-constant contexts (B, T) from sliding-window grid search.

    Every ``stride`` steps the last ``window`` observations are scored; the
    winner is used until the next search.  Each window filter starts from
    the least-squares state fit to its first observation.  Steps before the
    first full window use ``initial``.
    """
    ys = np.asarray(ys, dtype=np.float64)
    if ys.ndim == 2:
        ys = ys[None]
    grid = _check_grid(np.logspace(-2.5, 1.5, 17) if grid is None else grid)
    if window < 2:
        raise ContractError("window must be at least 2")
    B, T, _ = ys.shape
    out = np.full((B, T), float(initial))
    Hpinv = np.linalg.pinv(model.H)
    for end in range(window, T, stride):
        win = ys[:, end - window:end]
        scores = _grid_scores(model, win, theta, psi, grid, win[:, 0] @ Hpinv.T)
        best = np.argmin(scores, axis=1)           # first minimum = smallest sow on ties
        out[:, end:end + stride] = grid[best][:, None]
    return out


def write_diagnostics(path, sow_true, sow_est, clamped) -> None:
    """CSV of (t, sow_true, sow_estimated, clamped) for one trajectory."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "sow_true", "sow_estimated", "clamped"])
        for t, (a, b, c) in enumerate(zip(sow_true, sow_est, clamped)):
            w.writerow([t, f"{a:.10g}", f"{b:.10g}", int(bool(c))])
