"""Test-time procedures: present-step completion, classification,
autonomous multi-step rollout and dataset energy.

All functions take batched inputs (leading dimension = batch) as well as
single vectors. Intermediate Gibbs steps sample the hidden (and label)
units; the final step reads out mean-field values.
"""
from __future__ import annotations

import numpy as np

from .data import VisiblePartition
from .model import (
    LayerState, ModelParams, energy, hidden_probs, label_probs, sample_bernoulli, visible_mean,
)

DEFAULT_GIBBS_STEPS = 3


class NonFiniteRolloutError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite present estimate at rollout step {step}")
        self.step = step


def _check_steps(gibbs_steps):
    if gibbs_steps < 1:
        raise ValueError(f"gibbs_steps must be >= 1, got {gibbs_steps}")


def classify(params: ModelParams, present, hist, gibbs_steps: int = DEFAULT_GIBBS_STEPS,
             rng: np.random.Generator | None = None, known_idx=None):
    """Infer the label layer from a (partial) present vector and history.

    Entries of ``present`` outside ``known_idx`` are treated as unknown and
    set to zero. Returns ``(class_index, label_probabilities)``; ties go to
    the lowest class index.
    """
    _check_steps(gibbs_steps)
    rng = np.random.default_rng() if rng is None else rng
    v = np.array(present, dtype=float)
    if known_idx is not None:
        unknown = np.setdiff1d(np.arange(params.dims.n_v), np.asarray(known_idx, dtype=int))
        v[..., unknown] = 0.0
    hist = np.asarray(hist, dtype=float)
    batch = np.broadcast_shapes(v.shape[:-1], hist.shape[:-1])
    l = np.zeros(batch + (params.dims.n_l,))
    pl = l
    for step in range(gibbs_steps):
        last = step == gibbs_steps - 1
        ph = hidden_probs(params, LayerState(v=v, l=l, hist=hist))
        h = ph if last else sample_bernoulli(ph, rng)
        pl = label_probs(params, LayerState(v=v, h=h, hist=hist))
        l = pl if last else sample_bernoulli(pl, rng)
    return np.argmax(pl, axis=-1), pl


def one_hot(index, n: int) -> np.ndarray:
    return np.eye(n)[np.asarray(index)]


def estimate_present(params: ModelParams, obs2d, hist, label, partition: VisiblePartition,
                     gibbs_steps: int = DEFAULT_GIBBS_STEPS, rng: np.random.Generator | None = None):
    """Complete the present layer with the observed units clamped.

    Unknown units start at zero. If ``label`` is None it is first inferred
    with :func:`classify` and used as a one-hot vector.
    """
    _check_steps(gibbs_steps)
    partition.check(params.dims.n_v)
    rng = np.random.default_rng() if rng is None else rng
    known = np.asarray(partition.known_idx, dtype=int)
    unknown = np.asarray(partition.unknown_idx, dtype=int)
    hist = np.asarray(hist, dtype=float)
    obs2d = np.asarray(obs2d, dtype=float)
    batch = np.broadcast_shapes(obs2d.shape[:-1], hist.shape[:-1])
    v = np.zeros(batch + (params.dims.n_v,))
    if known.size:
        v[..., known] = obs2d
    if label is None:
        cls, _ = classify(params, v, hist, gibbs_steps, rng)
        label = one_hot(cls, params.dims.n_l)
    label = np.asarray(label, dtype=float)
    for step in range(gibbs_steps):
        ph = hidden_probs(params, LayerState(v=v, l=label, hist=hist))
        h = ph if step == gibbs_steps - 1 else sample_bernoulli(ph, rng)
        mean = visible_mean(params, LayerState(h=h, l=label, hist=hist))
        v[..., unknown] = mean[..., unknown]
    return v


def predict_multistep(params: ModelParams, seed_history, label, steps: int, partition: VisiblePartition,
                      rng: np.random.Generator | None = None, gibbs_steps: int = DEFAULT_GIBBS_STEPS,
                      feedback=None, frame_dims: int | None = None):
    """Autonomous rollout: every present unit is free at each step, and the
    observed (2D) part of each estimate is pushed into the history window.

    ``feedback`` maps an estimated present vector to the history frame that
    is appended (default: the ``partition.known_idx`` entries unchanged).
    Returns an array of shape ``batch + (steps, n_v)``.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    rng = np.random.default_rng() if rng is None else rng
    n_v = params.dims.n_v
    known = np.asarray(partition.known_idx, dtype=int)
    frame_dims = known.size if frame_dims is None else frame_dims
    if feedback is None:
        def feedback(v):
            return v[..., known]
    free = VisiblePartition((), tuple(range(n_v)))
    hist = np.array(seed_history, dtype=float)
    if label is None:
        cls, _ = classify(params, np.zeros(hist.shape[:-1] + (n_v,)), hist, gibbs_steps, rng)
        label = one_hot(cls, params.dims.n_l)
    outputs = []
    empty = np.zeros(hist.shape[:-1] + (0,))
    for k in range(steps):
        v = estimate_present(params, empty, hist, label, free, gibbs_steps, rng)
        if not np.all(np.isfinite(v)):
            raise NonFiniteRolloutError(k)
        outputs.append(v)
        hist = np.concatenate([hist[..., frame_dims:], feedback(v)], axis=-1)
    return np.stack(outputs, axis=-2)


def mean_field_state(params: ModelParams, present, hist, sweeps: int = DEFAULT_GIBBS_STEPS) -> LayerState:
    """Hidden and label layers at their mean-field values given present and
    history (label starts at zero)."""
    v = np.asarray(present, dtype=float)
    hist = np.asarray(hist, dtype=float)
    l = np.zeros(v.shape[:-1] + (params.dims.n_l,))
    for _ in range(sweeps):
        h = hidden_probs(params, LayerState(v=v, l=l, hist=hist))
        l = label_probs(params, LayerState(v=v, h=h, hist=hist))
    h = hidden_probs(params, LayerState(v=v, l=l, hist=hist))
    return LayerState(v=v, h=h, l=l, hist=hist)


def dataset_energy(params: ModelParams, samples, sweeps: int = DEFAULT_GIBBS_STEPS):
    """Mean and standard deviation of the energy over a (normalized) dataset."""
    e = energy(params, mean_field_state(params, samples.present, samples.hist, sweeps))
    return float(np.mean(e)), float(np.std(e))
