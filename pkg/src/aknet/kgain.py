"""Learned Kalman gain: FC -> GRU -> FC on innovation features.

The predict/update flow of the Kalman filter is kept; only the gain comes
from the network.  Every pre-activation (input FC, the three GRU gates and
the output FC) is a modulation site and can be rescaled and shifted by
:class:`~aknet.hypercm.CMWeights`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .hypercm import CMWeights, cm_apply
from .numerics import ContractError, value_of
from .params import ParamStore, register_kind
from .ssm import SSModel

__all__ = [
    "GainNetParams",
    "FilterNetState",
    "features",
    "kgain_forward",
    "aknet_step",
    "run_filter",
    "FilterOutput",
]

FEATURE_EPS = 1e-8


@register_kind
class GainNetParams(ParamStore):
    kind = "gain"

    @classmethod
    def init(cls, m: int, n: int, hidden: int | None = None, width: int | None = None,
             rng: np.random.Generator | None = None, out_scale: float = 0.1) -> "GainNetParams":
        """Uniform fan-in initialisation.

        ``hidden`` defaults to ``10 (m + n)``, which gives about 10k
        parameters for a 2x2 system.  ``out_scale`` shrinks the output layer
        so the initial gains are small.
        """
        rng = np.random.default_rng(0) if rng is None else rng
        h = 10 * (m + n) if hidden is None else hidden
        d = h if width is None else width
        f = m + n

        def unif(fan_in, shape, scale=1.0):
            k = scale / np.sqrt(fan_in)
            return rng.uniform(-k, k, size=shape)

        blocks = {
            "fc_in.W": unif(f, (f, d)),
            "fc_in.b": unif(f, (d,)),
        }
        for gate in ("z", "r", "n"):
            blocks[f"gru.W{gate}"] = unif(h, (d, h))
            blocks[f"gru.U{gate}"] = unif(h, (h, h))
            blocks[f"gru.b{gate}"] = unif(h, (h,))
        blocks["fc_out.W"] = unif(h, (h, m * n), out_scale)
        blocks["fc_out.b"] = np.zeros(m * n)
        return cls(blocks, {"m": m, "n": n, "h": h, "d": d})

    @property
    def m(self) -> int:
        return self.hyper["m"]

    @property
    def n(self) -> int:
        return self.hyper["n"]

    @property
    def h(self) -> int:
        return self.hyper["h"]

    @property
    def sites(self) -> list[tuple[str, int]]:
        h, d = self.hyper["h"], self.hyper["d"]
        return [("fc_in", d), ("gru_z", h), ("gru_r", h), ("gru_n", h),
                ("fc_out", self.m * self.n)]


@dataclass
class FilterNetState:
    x_post: object          # (B, m) latest posterior
    x_prior: object         # (B, m) prior that produced it; None before the first update
    hidden: object          # (B, h)

    @classmethod
    def initial(cls, x0, batch: int, h: int) -> "FilterNetState":
        x0 = np.broadcast_to(np.asarray(x0, dtype=np.float64), (batch, np.shape(x0)[-1])).copy()
        return cls(x0, None, np.zeros((batch, h)))


def features(y, y_pred, x_post_prev, x_prior_prev):
    """Unit-normalised innovation and previous update difference, concatenated.

    With ``x_prior_prev=None`` (first step) the update-difference block is zero.
    """
    dy = nx.normalize_rows(nx.sub(y, y_pred), FEATURE_EPS)
    if x_prior_prev is None:
        dx = np.zeros_like(value_of(x_post_prev))
    else:
        dx = nx.normalize_rows(nx.sub(x_post_prev, x_prior_prev), FEATURE_EPS)
    return nx.concat([dy, dx], axis=-1)


def _site(z, cm, name, act):
    if cm is None:
        return nx.activate(act, z)
    g, s = cm.site(name)
    return cm_apply(z, g, s, act)


def kgain_forward(feat, params, hidden, cm: CMWeights | None = None, m=None, n=None):
    """Gain matrices (B, m, n) and the next GRU hidden state.

    ``params`` is a :class:`GainNetParams` or its dict of tape leaves (then
    ``m`` and ``n`` must be passed).
    """
    if isinstance(params, ParamStore):
        m, n = params.m, params.n
        p = params.blocks
    else:
        p = params
    fv = value_of(feat)
    if fv.shape[-1] != value_of(p["fc_in.W"]).shape[0]:
        raise ContractError(
            f"feature dimension {fv.shape[-1]} does not match fc_in {value_of(p['fc_in.W']).shape}"
        )
    a = _site(nx.affine(feat, p["fc_in.W"], p["fc_in.b"]), cm, "fc_in", "relu")
    z = _site(nx.add(nx.affine(a, p["gru.Wz"], p["gru.bz"]), nx.matmul(hidden, p["gru.Uz"])),
              cm, "gru_z", "sigmoid")
    r = _site(nx.add(nx.affine(a, p["gru.Wr"], p["gru.br"]), nx.matmul(hidden, p["gru.Ur"])),
              cm, "gru_r", "sigmoid")
    c = _site(nx.add(nx.affine(a, p["gru.Wn"], p["gru.bn"]),
                     nx.matmul(nx.mul(r, hidden), p["gru.Un"])),
              cm, "gru_n", "tanh")
    new_hidden = nx.add(c, nx.mul(z, nx.sub(hidden, c)))
    out = _site(nx.affine(new_hidden, p["fc_out.W"], p["fc_out.b"]), cm, "fc_out", "identity")
    B = fv.shape[0]
    return nx.reshape(out, (B, m, n)), new_hidden


def aknet_step(model: SSModel, y, params, state: FilterNetState, cm: CMWeights | None = None):
    """One predict/update step with a learned gain.

    Returns ``(x_post, y_pred, new_state)``.
    """
    x_prior = nx.matmul(state.x_post, model.F.T)
    y_pred = nx.matmul(x_prior, model.H.T)
    feat = features(y, y_pred, state.x_post, state.x_prior)
    K, hidden = kgain_forward(feat, params, state.hidden, cm, model.m, model.n)
    x_post = nx.add(x_prior, nx.batched_matvec(K, nx.sub(y, y_pred)))
    return x_post, y_pred, FilterNetState(x_post, x_prior, hidden)


@dataclass
class FilterOutput:
    x: list            # T entries of (B, m)
    y_pred: list       # T entries of (B, n)

    def stacked(self):
        """(B, T, m) estimates and (B, T, n) predictions as ndarrays."""
        xs = np.stack([value_of(v) for v in self.x], axis=1)
        ys = np.stack([value_of(v) for v in self.y_pred], axis=1)
        return xs, ys


def run_filter(model: SSModel, ys, params, x0=None, cm=None, h: int | None = None) -> FilterOutput:
    """Filter a (B, T, n) batch.

    ``cm`` is None (plain network), one :class:`CMWeights` for all steps, or
    a per-step list.  When ``params`` is a dict of tape leaves, pass ``h``.
    """
    ys = np.asarray(ys, dtype=np.float64)
    if ys.ndim == 2:
        ys = ys[None]
    B, T, _ = ys.shape
    if isinstance(params, GainNetParams):
        h = params.h
    x0 = np.zeros(model.m) if x0 is None else x0
    state = FilterNetState.initial(x0, B, h)
    xs, preds = [], []
    per_step = isinstance(cm, (list, tuple))
    for t in range(T):
        cm_t = cm[t] if per_step else cm
        x_post, y_pred, state = aknet_step(model, ys[:, t], params, state, cm_t)
        xs.append(x_post)
        preds.append(y_pred)
    return FilterOutput(xs, preds)
