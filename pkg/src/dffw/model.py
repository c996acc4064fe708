"""Parameters, energy and conditional distributions of the four-way machines.

Two model kinds share this module:

* ``"ffw"``  - a single factored four-way tensor (only ``bank1`` exists).
* ``"dffw"`` - two factor banks. ``bank1`` drives the present (visible)
  layer, ``bank2`` drives the label layer, and both feed the hidden layer.

All functions accept batched states: every layer array may carry any number
of leading batch dimensions, as long as they broadcast.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

LAYERS = ("v", "h", "hist", "l")

#: Trainable parameter groups, in the fixed order used for packing,
#: checkpoints and gradient sets.
WEIGHT_GROUPS = (
    "bank1.w_v", "bank1.w_h", "bank1.w_hist", "bank1.w_l",
    "bank2.w_v", "bank2.w_h", "bank2.w_hist", "bank2.w_l",
)
BIAS_GROUPS = ("a", "b", "c")
PARAM_GROUPS = WEIGHT_GROUPS + BIAS_GROUPS


@dataclass(frozen=True)
class LayerDims:
    n_v: int
    n_h: int
    n_vlt: int
    n_l: int
    n_f1: int
    n_f2: int = 0

    def __post_init__(self):
        for name in ("n_v", "n_h", "n_vlt", "n_l", "n_f1"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_f2 < 0:
            raise ValueError(f"n_f2 must be >= 0, got {self.n_f2}")

    @property
    def kind(self) -> str:
        return "dffw" if self.n_f2 > 0 else "ffw"

    def group_shape(self, group: str) -> tuple[int, ...]:
        if group in BIAS_GROUPS:
            return ({"a": self.n_v, "b": self.n_h, "c": self.n_l}[group],)
        bank, layer = group.split(".")
        n_f = self.n_f1 if bank == "bank1" else self.n_f2
        rows = {"w_v": self.n_v, "w_h": self.n_h, "w_hist": self.n_vlt, "w_l": self.n_l}[layer]
        return (rows, n_f)


@dataclass
class FactorBank:
    """Four layer-to-factor weight matrices sharing one factor dimension."""

    w_v: np.ndarray
    w_h: np.ndarray
    w_hist: np.ndarray
    w_l: np.ndarray

    def __post_init__(self):
        n_f = {w.shape[1] for w in (self.w_v, self.w_h, self.w_hist, self.w_l)}
        if len(n_f) != 1:
            raise ValueError(f"factor dimension mismatch across bank matrices: {sorted(n_f)}")

    @property
    def n_f(self) -> int:
        return self.w_v.shape[1]

    def matrix(self, layer: str) -> np.ndarray:
        return getattr(self, "w_" + layer)

    def copy(self) -> "FactorBank":
        return FactorBank(self.w_v.copy(), self.w_h.copy(), self.w_hist.copy(), self.w_l.copy())

    @classmethod
    def zeros(cls, n_v, n_h, n_vlt, n_l, n_f) -> "FactorBank":
        return cls(np.zeros((n_v, n_f)), np.zeros((n_h, n_f)),
                   np.zeros((n_vlt, n_f)), np.zeros((n_l, n_f)))


@dataclass
class ModelParams:
    dims: LayerDims
    bank1: FactorBank
    bank2: FactorBank | None
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    sigma: np.ndarray
    sigma_hist: np.ndarray

    def __post_init__(self):
        if (self.bank2 is None) != (self.dims.n_f2 == 0):
            raise ValueError("bank2 must be present exactly when dims.n_f2 > 0")
        for group in PARAM_GROUPS:
            if group.startswith("bank2") and self.bank2 is None:
                continue
            arr = self.group(group)
            if arr.shape != self.dims.group_shape(group):
                raise ValueError(f"{group} has shape {arr.shape}, expected {self.dims.group_shape(group)}")
        if self.sigma.shape != (self.dims.n_v,) or self.sigma_hist.shape != (self.dims.n_vlt,):
            raise ValueError("sigma / sigma_hist shapes do not match dims")
        if np.any(self.sigma <= 0) or np.any(self.sigma_hist <= 0):
            raise ValueError("sigma and sigma_hist must be strictly positive")

    @property
    def kind(self) -> str:
        return self.dims.kind

    def group(self, name: str) -> np.ndarray:
        if "." in name:
            bank, layer = name.split(".")
            return getattr(getattr(self, bank), layer)
        return getattr(self, name)

    def groups(self):
        """Yield ``(name, array)`` for every trainable group that exists."""
        for name in PARAM_GROUPS:
            if name.startswith("bank2") and self.bank2 is None:
                continue
            yield name, self.group(name)

    def copy(self) -> "ModelParams":
        return replace(
            self,
            bank1=self.bank1.copy(),
            bank2=None if self.bank2 is None else self.bank2.copy(),
            a=self.a.copy(), b=self.b.copy(), c=self.c.copy(),
            sigma=self.sigma.copy(), sigma_hist=self.sigma_hist.copy(),
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(arr)) for _, arr in self.groups())

    def as_ffw(self) -> "ModelParams":
        """Drop the second bank, keeping bank 1 as the single tensor."""
        p = self.copy()
        return replace(p, dims=replace(self.dims, n_f2=0), bank2=None)


@dataclass
class LayerState:
    """Activities of the four layers; a layer about to be inferred may be None."""

    v: np.ndarray | None = None
    h: np.ndarray | None = None
    l: np.ndarray | None = None
    hist: np.ndarray | None = None


def init_params(dims: LayerDims, seed: int, std: float = 0.3) -> ModelParams:
    """Draw every factor weight from N(0, std**2); biases zero, sigmas one."""
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    rng = np.random.default_rng(seed)

    def bank(n_f):
        return FactorBank(
            rng.normal(0.0, std, (dims.n_v, n_f)),
            rng.normal(0.0, std, (dims.n_h, n_f)),
            rng.normal(0.0, std, (dims.n_vlt, n_f)),
            rng.normal(0.0, std, (dims.n_l, n_f)),
        )

    bank1 = bank(dims.n_f1)
    bank2 = bank(dims.n_f2) if dims.n_f2 > 0 else None
    return ModelParams(
        dims=dims, bank1=bank1, bank2=bank2,
        a=np.zeros(dims.n_v), b=np.zeros(dims.n_h), c=np.zeros(dims.n_l),
        sigma=np.ones(dims.n_v), sigma_hist=np.ones(dims.n_vlt),
    )


def sigmoid(x):
    # tanh form stays finite for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def layer_sums(bank: FactorBank, state: LayerState, sigma, sigma_hist, layers=LAYERS) -> dict:
    """Per-factor weighted sums ``activity @ W`` for each requested layer.

    Visible and history activities are scaled by ``1/sigma`` first.
    """
    scale = {"v": sigma, "hist": sigma_hist}
    out = {}
    for layer in layers:
        act = np.asarray(getattr(state, layer), dtype=float)
        if layer in scale:
            act = act / scale[layer]
        out[layer] = act @ bank.matrix(layer)
    return out


def factor_projection(bank: FactorBank, state: LayerState, sigma, sigma_hist, skip: str | None = None):
    """Product over all layers except ``skip`` of the per-factor layer sums.

    Visible and history activities are divided by their standard deviations
    before weighting. With ``skip=None`` the full four-term product is
    returned, so ``factor_projection(...).sum(-1)`` is the (negated) bank
    contribution to the energy.
    """
    if skip is not None and skip not in LAYERS:
        raise ValueError(f"unknown layer tag {skip!r}")
    layers = [layer for layer in LAYERS if layer != skip]
    sums = layer_sums(bank, state, sigma, sigma_hist, layers)
    out = sums[layers[0]]
    for layer in layers[1:]:
        out = out * sums[layer]
    return out


def _check_state(params: ModelParams, state: LayerState, skip=()):
    d = params.dims
    expected = {"v": d.n_v, "h": d.n_h, "l": d.n_l, "hist": d.n_vlt}
    for layer, n in expected.items():
        if layer in skip:
            continue
        got = np.shape(getattr(state, layer))
        if not got or got[-1] != n:
            raise ValueError(f"state.{layer} has trailing dimension {got[-1:] or '()'}, expected {n}")


def energy(params: ModelParams, state: LayerState):
    """Energy of a (possibly batched) joint configuration.

    Quadratic visible term ``sum (v - a)^2 / (2 sigma^2)``; bias and factor
    terms enter negated.
    """
    _check_state(params, state)
    v = np.asarray(state.v, dtype=float)
    e = 0.5 * np.sum(((v - params.a) / params.sigma) ** 2, axis=-1)
    e = e - np.asarray(state.h, dtype=float) @ params.b - np.asarray(state.l, dtype=float) @ params.c
    for bank in (params.bank1, params.bank2):
        if bank is not None:
            e = e - factor_projection(bank, state, params.sigma, params.sigma_hist).sum(-1)
    return e


def hidden_input(params: ModelParams, state: LayerState):
    """Total factor input to each hidden unit (both banks when present)."""
    _check_state(params, state, skip=("h",))
    s = 0.0
    for bank in (params.bank1, params.bank2):
        if bank is not None:
            s = s + factor_projection(bank, state, params.sigma, params.sigma_hist, skip="h") @ bank.w_h.T
    return s


def visible_input(params: ModelParams, state: LayerState):
    """Factor input to the present layer; only bank 1 generates visibles."""
    _check_state(params, state, skip=("v",))
    bank = params.bank1
    return factor_projection(bank, state, params.sigma, params.sigma_hist, skip="v") @ bank.w_v.T


def label_input(params: ModelParams, state: LayerState):
    """Factor input to the label layer.

    The dffw machine classifies through bank 2 only; the ffw baseline uses
    its single tensor.
    """
    _check_state(params, state, skip=("l",))
    bank = params.bank2 if params.bank2 is not None else params.bank1
    return factor_projection(bank, state, params.sigma, params.sigma_hist, skip="l") @ bank.w_l.T


def hidden_probs(params: ModelParams, state: LayerState):
    return sigmoid(params.b + hidden_input(params, state))


def label_probs(params: ModelParams, state: LayerState):
    return sigmoid(params.c + label_input(params, state))


def visible_mean(params: ModelParams, state: LayerState):
    """Mean of the Gaussian present-layer conditional, ``a + sigma * s_v``."""
    return params.a + params.sigma * visible_input(params, state)


def sample_bernoulli(probs, rng: np.random.Generator):
    probs = np.asarray(probs, dtype=float)
    return (rng.random(probs.shape) < probs).astype(float)


def sample_hidden(params: ModelParams, state: LayerState, rng: np.random.Generator):
    return sample_bernoulli(hidden_probs(params, state), rng)


def sample_label(params: ModelParams, state: LayerState, rng: np.random.Generator):
    return sample_bernoulli(label_probs(params, state), rng)


def sample_visible(params: ModelParams, state: LayerState, rng: np.random.Generator):
    mean = visible_mean(params, state)
    return mean + params.sigma * rng.standard_normal(np.shape(mean))
