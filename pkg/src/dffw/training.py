"""Sequential contrastive divergence for the four-way machines.

Every sample runs two short Markov chains: the first reconstructs the
present layer with label and history clamped, the second reconstructs the
label layer with present and history clamped. Parameters are updated after
every chain step.

Positive-phase statistics are taken at the clamped sample. By default the
hidden units there are inferred from the sample itself (recomputed at each
step because the parameters change inside the loop);
``positive_hidden="chain"`` instead reuses the chain's current hidden
probabilities, which at the first step were inferred with the reconstructed
layer still at zero.

``statistics``, ``apply_update`` and the two ``chain_*`` functions are plain
numpy transcriptions used for testing and inspection; ``train`` drives the
compiled kernels in ``_kernels`` which implement the same steps.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .model import (
    PARAM_GROUPS, WEIGHT_GROUPS, LayerState, ModelParams,
    factor_projection, hidden_probs, label_probs, sample_bernoulli, visible_mean,
)

log = logging.getLogger(__name__)


POSITIVE_HIDDEN = ("data", "chain")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1e-4
    rho: float = 0.5
    gamma: float = 0.0002
    cd_steps: int = 3
    epochs: int = 100
    seed: int = 0
    positive_hidden: str = "data"

    def __post_init__(self):
        if self.positive_hidden not in POSITIVE_HIDDEN:
            raise ValueError(f"positive_hidden must be one of {POSITIVE_HIDDEN}, got {self.positive_hidden!r}")
        for name in ("alpha", "rho", "gamma"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")
        if self.cd_steps < 1:
            raise ValueError(f"cd_steps must be >= 1, got {self.cd_steps}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


class NonFiniteParameterError(FloatingPointError):
    def __init__(self, group: str, epoch: int, sample: int | None = None):
        where = f"epoch {epoch}" + ("" if sample is None else f", sample {sample}")
        super().__init__(f"non-finite values in parameter group {group} at {where}")
        self.group = group
        self.epoch = epoch
        self.sample = sample


# A gradient or velocity set is a dict mapping group name -> array, with the
# same keys and shapes as ``ModelParams.groups()``.
GradientSet = dict


def zeros_like_params(params: ModelParams) -> GradientSet:
    return {name: np.zeros_like(arr) for name, arr in params.groups()}


def statistics(params: ModelParams, state: LayerState) -> GradientSet:
    """Sufficient statistics of one fully specified state.

    For a weight of bank ``k`` and layer ``x``, the statistic at
    ``[unit, f]`` is the unit's activity times the product of the other three
    layers' factor sums. Visible and history activities are sigma-scaled, so
    each statistic is exactly ``-dE/dtheta``. Bias statistics are ``h``,
    ``l`` and ``(v - a) / sigma^2``; with unit sigma their positive minus
    negative difference reduces to the raw-activity difference.
    """
    scaled = {
        "v": np.asarray(state.v, dtype=float) / params.sigma,
        "h": np.asarray(state.h, dtype=float),
        "hist": np.asarray(state.hist, dtype=float) / params.sigma_hist,
        "l": np.asarray(state.l, dtype=float),
    }
    out = {}
    for bank_name in ("bank1", "bank2"):
        bank = getattr(params, bank_name)
        if bank is None:
            continue
        for layer in ("v", "h", "hist", "l"):
            others = factor_projection(bank, state, params.sigma, params.sigma_hist, skip=layer)
            out[f"{bank_name}.w_{layer}"] = np.outer(scaled[layer], others)
    out["a"] = (scaled["v"] - params.a / params.sigma) / params.sigma
    out["b"] = scaled["h"].copy()
    out["c"] = scaled["l"].copy()
    return {name: out[name] for name in PARAM_GROUPS if name in out}


def apply_update(params: ModelParams, velocity: GradientSet, pos: GradientSet, neg: GradientSet,
                 cfg: TrainConfig):
    """In-place momentum update ``vel = rho*vel + alpha*(pos - neg - gamma*W)``.

    Weight decay applies to factor weights only. Returns ``(params, velocity)``.
    """
    for name, theta in params.groups():
        delta = pos[name] - neg[name]
        if name in WEIGHT_GROUPS:
            delta = delta - cfg.gamma * theta
        velocity[name] *= cfg.rho
        velocity[name] += cfg.alpha * delta
        theta += velocity[name]
    return params, velocity


@dataclass
class ChainResult:
    pos: list = field(default_factory=list)
    neg: list = field(default_factory=list)
    state: LayerState | None = None


def _positive_hidden(params, chain_h, present, hist, label, cfg):
    if cfg.positive_hidden == "chain":
        return chain_h
    return hidden_probs(params, LayerState(v=present, l=label, hist=hist))


def chain_reconstruct_present(params: ModelParams, velocity: GradientSet, present, hist, label,
                              cfg: TrainConfig, rng: np.random.Generator) -> ChainResult:
    """First chain of one sample: present layer starts at zero and is
    reconstructed; parameters and velocity are updated in place every step."""
    present, hist, label = (np.asarray(x, dtype=float) for x in (present, hist, label))
    v = np.zeros_like(present)
    ph = hidden_probs(params, LayerState(v=v, l=label, hist=hist))
    hs = sample_bernoulli(ph, rng)
    result = ChainResult()
    for _ in range(cfg.cd_steps):
        h_pos = _positive_hidden(params, ph, present, hist, label, cfg)
        pos = statistics(params, LayerState(v=present, h=h_pos, l=label, hist=hist))
        v = visible_mean(params, LayerState(h=hs, l=label, hist=hist))
        ph = hidden_probs(params, LayerState(v=v, l=label, hist=hist))
        hs = sample_bernoulli(ph, rng)
        neg = statistics(params, LayerState(v=v, h=ph, l=label, hist=hist))
        apply_update(params, velocity, pos, neg, cfg)
        result.pos.append(pos)
        result.neg.append(neg)
    result.state = LayerState(v=v, h=ph, l=label, hist=hist)
    return result


def chain_reconstruct_label(params: ModelParams, velocity: GradientSet, present, hist, label,
                            cfg: TrainConfig, rng: np.random.Generator) -> ChainResult:
    """Second chain of one sample: label layer starts at zero and is
    reconstructed with present and history clamped."""
    present, hist, label = (np.asarray(x, dtype=float) for x in (present, hist, label))
    l0 = np.zeros_like(label)
    ph = hidden_probs(params, LayerState(v=present, l=l0, hist=hist))
    hs = sample_bernoulli(ph, rng)
    pl = l0
    result = ChainResult()
    for _ in range(cfg.cd_steps):
        h_pos = _positive_hidden(params, ph, present, hist, label, cfg)
        pos = statistics(params, LayerState(v=present, h=h_pos, l=label, hist=hist))
        pl = label_probs(params, LayerState(v=present, h=hs, hist=hist))
        ls = sample_bernoulli(pl, rng)
        ph = hidden_probs(params, LayerState(v=present, l=ls, hist=hist))
        hs = sample_bernoulli(ph, rng)
        neg = statistics(params, LayerState(v=present, h=ph, l=pl, hist=hist))
        apply_update(params, velocity, pos, neg, cfg)
        result.pos.append(pos)
        result.neg.append(neg)
    result.state = LayerState(v=present, h=ph, l=pl, hist=hist)
    return result


# -- flat packing for the compiled kernels ---------------------------------

def layout(params: ModelParams) -> np.ndarray:
    """Group boundaries of the flat parameter vector (12 entries)."""
    sizes = [int(np.prod(params.dims.group_shape(name))) for name in PARAM_GROUPS]
    return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)


def kernel_dims(params: ModelParams) -> np.ndarray:
    d = params.dims
    return np.array([d.n_v, d.n_h, d.n_vlt, d.n_l, d.n_f1, d.n_f2], dtype=np.int64)


def pack(params: ModelParams, groups: GradientSet | None = None) -> np.ndarray:
    source = dict(params.groups()) if groups is None else groups
    parts = [np.ravel(source[name]) for name in PARAM_GROUPS if name in source]
    return np.concatenate(parts).astype(float)


def unpack(flat: np.ndarray, params: ModelParams) -> GradientSet:
    off = layout(params)
    out = {}
    for g, name in enumerate(PARAM_GROUPS):
        if off[g + 1] > off[g]:
            out[name] = flat[off[g]:off[g + 1]].reshape(params.dims.group_shape(name)).copy()
    return out


def load_flat(params: ModelParams, flat: np.ndarray) -> None:
    for name, arr in unpack(flat, params).items():
        params.group(name)[...] = arr


def kernel_statistics(params: ModelParams, state: LayerState) -> GradientSet:
    """``statistics`` evaluated through the compiled kernel."""
    grad = np.zeros(layout(params)[-1])
    _kernels.accumulate_stats(pack(params), layout(params), kernel_dims(params), params.sigma,
                              np.asarray(state.v, float), np.asarray(state.h, float),
                              np.asarray(state.hist, float) / params.sigma_hist,
                              np.asarray(state.l, float), 1.0, grad)
    return unpack(grad, params)


def uniforms_per_sample(params: ModelParams, cd_steps: int) -> int:
    d = params.dims
    return 2 * (cd_steps + 1) * d.n_h + cd_steps * d.n_l


@dataclass
class EpochLog:
    epoch: int
    mean_recon_v: float
    mean_recon_l: float
    mean_energy: float


def train(params: ModelParams, samples, cfg: TrainConfig, callbacks=(), velocity=None):
    """Train ``params`` in place with sequential CD.

    ``samples`` needs ``present``, ``hist`` and ``label`` arrays with one row
    per sample. Each epoch visits the samples in an order shuffled by the run
    seed. ``callbacks`` are called as ``cb(epoch_log, params)`` after every
    epoch. Returns ``(params, [EpochLog, ...])``.
    """
    present = np.ascontiguousarray(samples.present, dtype=float)
    hist = np.ascontiguousarray(samples.hist, dtype=float)
    labels = np.ascontiguousarray(samples.label, dtype=float)
    d = params.dims
    if present.shape[1:] != (d.n_v,) or hist.shape[1:] != (d.n_vlt,) or labels.shape[1:] != (d.n_l,):
        raise ValueError(
            f"sample shapes present{present.shape} hist{hist.shape} label{labels.shape} "
            f"do not match dims ({d.n_v}, {d.n_vlt}, {d.n_l})"
        )
    rng = np.random.default_rng(cfg.seed)
    off, kd = layout(params), kernel_dims(params)
    theta = pack(params)
    vel = np.zeros_like(theta) if velocity is None else pack(params, velocity)
    n = present.shape[0]
    n_u = uniforms_per_sample(params, cfg.cd_steps)
    err_v, err_l, energies = np.empty(n), np.empty(n), np.empty(n)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n).astype(np.int64)
        u = rng.random((n, n_u))
        bad = _kernels.train_epoch(theta, vel, off, kd, params.sigma, params.sigma_hist,
                                   present, hist, labels, order, u, cfg.cd_steps,
                                   cfg.alpha, cfg.rho, cfg.gamma, cfg.positive_hidden == "data",
                                   err_v, err_l, energies)
        if bad >= 0 or not np.all(np.isfinite(theta)):
            for g, name in enumerate(PARAM_GROUPS):
                if not np.all(np.isfinite(theta[off[g]:off[g + 1]])):
                    raise NonFiniteParameterError(name, epoch, int(order[bad]) if bad >= 0 else None)
        entry = EpochLog(epoch, float(err_v.mean()), float(err_l.mean()), float(energies.mean()))
        history.append(entry)
        log.debug("epoch %d: recon_v=%.5g recon_l=%.5g energy=%.5g", epoch,
                  entry.mean_recon_v, entry.mean_recon_l, entry.mean_energy)
        if callbacks:
            load_flat(params, theta)
            for cb in callbacks:
                cb(entry, params)
    load_flat(params, theta)
    if velocity is not None:
        velocity.update(unpack(vel, params))
    return params, history


def train_ffw(params: ModelParams, samples, cfg: TrainConfig, callbacks=(), velocity=None):
    """Same as ``train`` for the single-tensor baseline."""
    if params.bank2 is not None:
        raise ValueError("train_ffw expects parameters without a second factor bank")
    return train(params, samples, cfg, callbacks, velocity)


def write_epoch_log(history, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "mean_recon_v", "mean_recon_l", "mean_energy"])
        for e in history:
            writer.writerow([e.epoch, repr(e.mean_recon_v), repr(e.mean_recon_l), repr(e.mean_energy)])
