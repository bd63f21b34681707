"""Context hypernetwork producing conditional-modulation (CM) weights.

A modulated layer computes ``act((W x + b) * g + s)``.  The hypernetwork
maps ``(log10 sow, switch)`` through a small tanh MLP to one raw value per
modulated neuron; ``switch=1`` yields gains ``g = 1 + tanh(raw)`` and
``switch=0`` yields shifts ``s = raw``.  The output head starts at zero, so
an untrained hypernetwork returns exactly ``g = 1, s = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ContractError, _record, value_of
from .params import ParamStore, register_kind

__all__ = [
    "HyperParams",
    "CMWeights",
    "cm_apply",
    "encode_sow",
    "hyper_forward",
    "cm_weights",
    "cm_schedule",
]


def _act_grad(name, out):
    if name == "sigmoid":
        return out * (1.0 - out)
    if name == "tanh":
        return 1.0 - out * out
    if name == "relu":
        return (out > 0).astype(np.float64)
    if name == "identity":
        return None
    raise ContractError(f"unknown activation {name!r}")


def cm_apply(z, g, s, activation: str = "identity"):
    """``activation(z * g + s)`` as a single tape node."""
    zv, gv, sv = value_of(z), value_of(g), value_of(s)
    if np.shape(gv)[-1] != np.shape(zv)[-1] or np.shape(sv)[-1] != np.shape(zv)[-1]:
        raise ContractError(
            f"CM length mismatch: z{np.shape(zv)} g{np.shape(gv)} s{np.shape(sv)}"
        )
    pre = zv * gv + sv
    if activation == "sigmoid":
        out = 0.5 * (1.0 + np.tanh(0.5 * pre))
    elif activation == "tanh":
        out = np.tanh(pre)
    elif activation == "relu":
        out = np.where(pre > 0, pre, 0.0)
    elif activation == "identity":
        out = pre
    else:
        raise ContractError(f"unknown activation {activation!r}")
    dact = _act_grad(activation, out)
    gz, gs = np.shape(zv), np.shape(sv)
    gg = np.shape(gv)

    def local(gr):
        return gr if dact is None else gr * dact

    return _record(
        out,
        (z, g, s),
        (
            lambda gr: nx._unbroadcast(local(gr) * gv, gz),
            lambda gr: nx._unbroadcast(local(gr) * zv, gg),
            lambda gr: nx._unbroadcast(local(gr), gs),
        ),
    )


@register_kind
class HyperParams(ParamStore):
    """Hypernetwork weights: embed (2 -> width), hidden (width -> width), head (width -> out)."""

    kind = "hyper"

    @classmethod
    def init(cls, sites: list[tuple[str, int]], width: int = 5,
             rng: np.random.Generator | None = None) -> "HyperParams":
        rng = np.random.default_rng(0) if rng is None else rng
        total = sum(w for _, w in sites)

        def unif(fan_in, shape):
            k = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-k, k, size=shape)

        blocks = {
            "hyper.embed.W": unif(2, (2, width)),
            "hyper.embed.b": unif(2, (width,)),
            "hyper.hidden.W": unif(width, (width, width)),
            "hyper.hidden.b": unif(width, (width,)),
            # zero head: g = 1 + tanh(0) = 1 and s = 0 before training
            "hyper.head.W": np.zeros((width, total)),
            "hyper.head.b": np.zeros(total),
        }
        hyper = {"width": width, "n_sites": len(sites)}
        for i, (name, w) in enumerate(sites):
            hyper[f"site{i}.{name}"] = w
        return cls(blocks, hyper)

    @property
    def sites(self) -> list[tuple[str, int]]:
        out = []
        for i in range(self.hyper["n_sites"]):
            (key,) = [k for k in self.hyper if k.startswith(f"site{i}.")]
            out.append((key.split(".", 1)[1], self.hyper[key]))
        return out

    @property
    def out_dim(self) -> int:
        return self["hyper.head.b"].size


@dataclass
class CMWeights:
    """Per-site gain and shift arrays, each (B, width) or (width,)."""

    gains: dict
    shifts: dict

    @classmethod
    def identity(cls, sites: list[tuple[str, int]]) -> "CMWeights":
        return cls({k: np.ones(w) for k, w in sites}, {k: np.zeros(w) for k, w in sites})

    def site(self, name: str):
        return self.gains[name], self.shifts[name]


def encode_sow(sow):
    sow = np.asarray(sow, dtype=np.float64)
    if np.any(~(sow > 0)):
        raise ContractError("sow must be strictly positive")
    return np.log10(sow)


def hyper_forward(sow, switch, params):
    """Raw modulation vector(s) for a batch of contexts.

    ``params`` is a :class:`HyperParams` or the dict of tape leaves from
    ``HyperParams.attach``.  Returns gains for ``switch=1`` and shifts for
    ``switch=0``, shape (B, out_dim).
    """
    if switch not in (0, 1):
        raise ContractError("switch must be 0 or 1")
    p = params.blocks if isinstance(params, ParamStore) else params
    enc = np.atleast_1d(encode_sow(sow)).reshape(-1)
    u = np.stack([enc, np.full_like(enc, float(switch))], axis=1)
    a = nx.tanh(nx.affine(u, p["hyper.embed.W"], p["hyper.embed.b"]))
    a = nx.tanh(nx.affine(a, p["hyper.hidden.W"], p["hyper.hidden.b"]))
    raw = nx.affine(a, p["hyper.head.W"], p["hyper.head.b"])
    if switch == 1:
        return nx.add(nx.tanh(raw), 1.0)
    return raw


def cm_weights(sow, params, sites: list[tuple[str, int]]) -> CMWeights:
    """Split hypernetwork outputs for a batch of contexts into per-site CM weights."""
    g = hyper_forward(sow, 1, params)
    s = hyper_forward(sow, 0, params)
    total = sum(w for _, w in sites)
    if value_of(g).shape[-1] != total:
        raise ContractError(f"hypernetwork emits {value_of(g).shape[-1]} values, sites need {total}")
    gains, shifts, lo = {}, {}, 0
    for name, w in sites:
        gains[name] = nx.take_cols(g, lo, lo + w)
        shifts[name] = nx.take_cols(s, lo, lo + w)
        lo += w
    return CMWeights(gains, shifts)


def cm_schedule(sow, params, sites):
    """CM weights for a (B, T) context array.

    Returns one :class:`CMWeights` when every trajectory's context is constant
    over time, otherwise a list with one entry per step.
    """
    sow = np.asarray(sow, dtype=np.float64)
    if sow.ndim == 1:
        return cm_weights(sow, params, sites)
    if np.all(sow == sow[:, :1]):
        return cm_weights(sow[:, 0], params, sites)
    return [cm_weights(sow[:, t], params, sites) for t in range(sow.shape[1])]
