import math
from types import SimpleNamespace

import numpy as np
import pytest

from dffw.data import Samples
from dffw.model import PARAM_GROUPS, WEIGHT_GROUPS, LayerDims, LayerState, energy, init_params
from dffw.training import (
    NonFiniteParameterError, TrainConfig, apply_update, chain_reconstruct_label,
    chain_reconstruct_present, kernel_statistics, statistics, train, train_ffw,
    uniforms_per_sample, write_epoch_log, zeros_like_params,
)

import oracles


class FixedUniforms:
    """Stands in for a Generator, handing out a fixed stream of uniforms."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=float)
        self.pos = 0

    def random(self, size=None):
        n = int(np.prod(size)) if size is not None else 1
        out = self.values[self.pos:self.pos + n]
        self.pos += n
        return out.reshape(size) if size is not None else float(out[0])


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def _samples(rng, n, dims, n_classes=None):
    labels = rng.integers(0, dims.n_l, n)
    return Samples(rng.normal(size=(n, dims.n_v)), rng.normal(size=(n, dims.n_vlt)),
                   np.eye(dims.n_l)[labels], np.zeros(n, int), np.arange(n))


# -- config ------------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(alpha=0.0), dict(rho=1.0), dict(gamma=-0.1),
                                dict(cd_steps=0), dict(epochs=-1), dict(positive_hidden="x")])
def test_train_config_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_train_config_defaults_follow_balls_setup():
    cfg = TrainConfig()
    assert (cfg.alpha, cfg.rho, cfg.gamma, cfg.cd_steps, cfg.epochs) == (1e-4, 0.5, 0.0002, 3, 100)


# -- statistics ----------------------------------------------------------------

def _fd_weight(params, state, arr, idx, step=1e-5):
    old = arr[idx]
    arr[idx] = old + step
    up = energy(params, state)
    arr[idx] = old - step
    down = energy(params, state)
    arr[idx] = old
    return (up - down) / (2 * step)


def check_statistics_against_fd(seed):
    rng = np.random.default_rng(seed)
    dims = oracles.random_dims(rng, max_units=3, both_banks=True)
    p = oracles.random_params(rng, dims)
    v, h, hist, l = oracles.random_state(rng, dims)
    state = LayerState(v=v, h=h, hist=hist, l=l)
    stats = statistics(p, state)
    assert set(stats) == set(PARAM_GROUPS)
    worst = 0.0
    for name in PARAM_GROUPS:
        arr = p.group(name)
        for idx in np.ndindex(arr.shape):
            worst = max(worst, abs(stats[name][idx] + _fd_weight(p, state, arr, idx)))
    return worst


def test_statistics_match_finite_differences_on_100_models():
    worst = max(check_statistics_against_fd(seed) for seed in range(100))
    assert worst < 1e-6


def test_statistics_zero_layer_zeroes_other_layers():
    rng = np.random.default_rng(0)
    p = oracles.random_params(rng, LayerDims(3, 2, 3, 2, 2, 2))
    v, h, hist, l = oracles.random_state(rng, p.dims)
    stats = statistics(p, LayerState(v=v, h=h, hist=hist, l=np.zeros(2)))
    for bank in ("bank1", "bank2"):
        for layer in ("v", "h", "hist", "l"):
            assert np.all(stats[f"{bank}.w_{layer}"] == 0)


def test_statistics_toy_all_ones():
    one = np.ones(1)
    stats = statistics(oracles.toy_params(), LayerState(v=one, h=one, hist=one, l=one))
    for name in PARAM_GROUPS:
        assert stats[name].tolist() in ([[1.0]], [1.0]), name


def test_kernel_statistics_agree_with_numpy():
    rng = np.random.default_rng(1)
    for both in (True, False):
        p = oracles.random_params(rng, LayerDims(3, 4, 5, 2, 3, 2 if both else 0))
        v, h, hist, l = oracles.random_state(rng, p.dims)
        state = LayerState(v=v, h=h, hist=hist, l=l)
        want, got = statistics(p, state), kernel_statistics(p, state)
        assert set(want) == set(got)
        for name in want:
            np.testing.assert_allclose(got[name], want[name], rtol=1e-12, atol=1e-14)


# -- update rule ---------------------------------------------------------------

def _scalar_cfg(alpha, rho, gamma):
    # TrainConfig rejects gamma == 0; apply_update only reads the attributes
    return SimpleNamespace(alpha=alpha, rho=rho, gamma=gamma)


def test_apply_update_no_change_when_phases_agree():
    p = init_params(LayerDims(2, 2, 2, 2, 2, 2), seed=0)
    before = p.copy()
    vel = zeros_like_params(p)
    g = {name: np.ones_like(a) for name, a in p.groups()}
    apply_update(p, vel, g, g, _scalar_cfg(0.1, 0.5, 0.0))
    for (_, a), (_, b) in zip(p.groups(), before.groups()):
        assert np.array_equal(a, b)


def test_apply_update_single_entry_step():
    p = init_params(LayerDims(2, 2, 2, 2, 2), seed=0)
    old = p.bank1.w_v[1, 0]
    vel = zeros_like_params(p)
    pos, neg = zeros_like_params(p), zeros_like_params(p)
    pos["bank1.w_v"][1, 0] = 1.0
    apply_update(p, vel, pos, neg, _scalar_cfg(0.1, 0.0, 0.0))
    assert p.bank1.w_v[1, 0] == pytest.approx(old + 0.1, abs=1e-15)


def test_apply_update_second_step_with_momentum():
    p = init_params(LayerDims(1, 1, 1, 1, 1), seed=0)
    vel = zeros_like_params(p)
    pos, neg = zeros_like_params(p), zeros_like_params(p)
    pos["b"][0] = 2.0
    cfg = _scalar_cfg(0.1, 0.5, 0.0)
    apply_update(p, vel, pos, neg, cfg)
    first = p.b[0]
    apply_update(p, vel, pos, neg, cfg)
    assert p.b[0] - first == pytest.approx(0.1 * 2.0 * 1.5, abs=1e-15)


def test_apply_update_three_step_recursion_with_decay():
    rng = np.random.default_rng(2)
    p = init_params(LayerDims(1, 1, 1, 1, 1), seed=1)
    cfg = TrainConfig(alpha=0.3, rho=0.7, gamma=0.2)
    vel = zeros_like_params(p)
    theta = {name: float(a.ravel()[0]) for name, a in p.groups()}
    v = dict.fromkeys(theta, 0.0)
    for _ in range(3):
        pos = {name: rng.normal(size=a.shape) for name, a in p.groups()}
        neg = {name: rng.normal(size=a.shape) for name, a in p.groups()}
        apply_update(p, vel, pos, neg, cfg)
        for name in theta:
            decay = cfg.gamma * theta[name] if name in WEIGHT_GROUPS else 0.0
            v[name] = cfg.rho * v[name] + cfg.alpha * (pos[name].ravel()[0] - neg[name].ravel()[0] - decay)
            theta[name] += v[name]
    for name, a in p.groups():
        assert a.ravel()[0] == pytest.approx(theta[name], abs=1e-12), name


def test_biases_are_not_decayed():
    p = init_params(LayerDims(2, 2, 2, 2, 2), seed=0)
    p.a[...] = 5.0
    vel = zeros_like_params(p)
    g = zeros_like_params(p)
    w_before = p.bank1.w_h.copy()
    apply_update(p, vel, g, g, TrainConfig(alpha=0.5, gamma=0.5))
    assert np.all(p.a == 5.0)
    np.testing.assert_allclose(p.bank1.w_h, w_before * (1 - 0.25))


# -- chains ----------------------------------------------------------------------

def _toy_cfg():
    return TrainConfig(alpha=0.1, rho=0.5, gamma=0.5, cd_steps=1)


def test_present_chain_hand_trace():
    # hidden sample draws 0.7 >= 0.5, so h=0 and the reconstructed v is a=0
    p = oracles.toy_params()
    vel = zeros_like_params(p)
    one = np.ones(1)
    res = chain_reconstruct_present(p, vel, one, one, one, _toy_cfg(), FixedUniforms([0.7, 0.9]))
    s2 = _sig(2.0)
    alpha, gamma = 0.1, 0.5
    assert res.state.v.tolist() == [0.0]
    assert res.state.h[0] == pytest.approx(0.5)
    # every weight statistic is the full product v*h*hist*l; negative phase is zero
    assert res.pos[0]["bank2.w_h"][0, 0] == pytest.approx(s2)
    assert res.neg[0]["bank1.w_v"][0, 0] == 0.0
    expected = {"w_v": s2, "w_h": s2, "w_hist": s2, "w_l": s2}
    for bank in ("bank1", "bank2"):
        for layer, pos in expected.items():
            assert p.group(f"{bank}.{layer}")[0, 0] == pytest.approx(1 + alpha * (pos - gamma), abs=1e-15)
    assert p.a[0] == pytest.approx(alpha * 1.0)
    assert p.b[0] == pytest.approx(alpha * (s2 - 0.5))
    assert p.c[0] == pytest.approx(0.0)


def test_label_chain_hand_trace():
    # draws: h=1 (0.3 < 0.5), l=0 (0.9 > sigmoid(1)), then h again
    p = oracles.toy_params()
    vel = zeros_like_params(p)
    one = np.ones(1)
    res = chain_reconstruct_label(p, vel, one, one, one, _toy_cfg(), FixedUniforms([0.3, 0.9, 0.1]))
    s1, s2 = _sig(1.0), _sig(2.0)
    alpha, gamma = 0.1, 0.5
    assert res.state.l[0] == pytest.approx(s1)
    assert res.state.h[0] == pytest.approx(0.5)
    neg = res.neg[0]
    assert neg["bank1.w_h"][0, 0] == pytest.approx(0.5 * s1)
    expected = dict.fromkeys(("w_v", "w_h", "w_hist", "w_l"), s2 - 0.5 * s1)
    for bank in ("bank1", "bank2"):
        for layer, delta in expected.items():
            assert p.group(f"{bank}.{layer}")[0, 0] == pytest.approx(1 + alpha * (delta - gamma), abs=1e-15)
    assert p.a[0] == pytest.approx(0.0)
    assert p.b[0] == pytest.approx(alpha * (s2 - 0.5))
    assert p.c[0] == pytest.approx(alpha * (1 - s1))


def test_present_chain_zero_weights_reconstructs_bias():
    p = init_params(LayerDims(3, 2, 4, 2, 2, 2), seed=0)
    for name in WEIGHT_GROUPS:
        p.group(name)[...] = 0
    p.a[...] = [0.5, -1.0, 2.0]
    cfg = TrainConfig(alpha=1e-6, cd_steps=1)
    res = chain_reconstruct_present(p, zeros_like_params(p), np.ones(3), np.ones(4), np.array([1.0, 0]),
                                    cfg, np.random.default_rng(0))
    np.testing.assert_allclose(res.state.v, [0.5, -1.0, 2.0])


def test_label_chain_zero_weights_gives_sigmoid_of_bias():
    p = init_params(LayerDims(3, 2, 4, 3, 2, 2), seed=0)
    for name in WEIGHT_GROUPS:
        p.group(name)[...] = 0
    p.c[...] = [0.3, -2.0, 1.0]
    c0 = p.c.copy()
    res = chain_reconstruct_label(p, zeros_like_params(p), np.ones(3), np.ones(4), np.array([1.0, 0, 0]),
                                  TrainConfig(cd_steps=2), np.random.default_rng(0))
    assert res.state.l.shape == (3,)
    # c moves inside the loop, so the last reconstruction used the updated bias
    assert np.all(np.abs(res.state.l - 1 / (1 + np.exp(-c0))) < 1e-3)


@pytest.mark.parametrize("chain", [chain_reconstruct_present, chain_reconstruct_label])
def test_chains_are_deterministic(chain):
    rng = np.random.default_rng(3)
    p = oracles.random_params(rng, LayerDims(3, 4, 4, 2, 3, 3))
    present, hist = rng.normal(size=3), rng.normal(size=4)
    runs = []
    for _ in range(2):
        q = p.copy()
        res = chain(q, zeros_like_params(q), present, hist, np.array([0.0, 1.0]),
                    TrainConfig(alpha=0.01, cd_steps=3), np.random.default_rng(9))
        runs.append((q, res))
    (q1, r1), (q2, r2) = runs
    for (_, a), (_, b) in zip(q1.groups(), q2.groups()):
        assert np.array_equal(a, b)
    assert np.array_equal(r1.state.v, r2.state.v) and np.array_equal(r1.state.l, r2.state.l)


def test_positive_hidden_chain_mode_uses_chain_state():
    # with the reconstructed layer at zero every factor product vanishes,
    # so the chain's first hidden probabilities are sigmoid(b)
    p = oracles.toy_params()
    one = np.ones(1)
    cfg = TrainConfig(alpha=0.1, rho=0.5, gamma=0.5, cd_steps=1, positive_hidden="chain")
    res = chain_reconstruct_present(p, zeros_like_params(p), one, one, one, cfg, FixedUniforms([0.7, 0.9]))
    assert res.pos[0]["b"][0] == pytest.approx(0.5)


# -- train ---------------------------------------------------------------------------

def _numpy_train(p, samples, cfg):
    """Reference epoch loop over the numpy chains with the trainer's rng layout."""
    vel = zeros_like_params(p)
    rng = np.random.default_rng(cfg.seed)
    n, n_u = len(samples), uniforms_per_sample(p, cfg.cd_steps)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        u = rng.random((n, n_u))
        for t, i in enumerate(order):
            stream = FixedUniforms(u[t])
            chain_reconstruct_present(p, vel, samples.present[i], samples.hist[i], samples.label[i], cfg, stream)
            chain_reconstruct_label(p, vel, samples.present[i], samples.hist[i], samples.label[i], cfg, stream)
    return p


@pytest.mark.parametrize("mode", ["data", "chain"])
@pytest.mark.parametrize("n_f2", [3, 0])
def test_compiled_trainer_matches_numpy_chains(mode, n_f2):
    dims = LayerDims(3, 4, 6, 2, 3, n_f2)
    p = init_params(dims, seed=1, std=0.3)
    samples = _samples(np.random.default_rng(5), 7, dims)
    cfg = TrainConfig(alpha=0.01, cd_steps=2, epochs=2, seed=3, positive_hidden=mode)
    fast = train(p.copy(), samples, cfg)[0]
    ref = _numpy_train(p.copy(), samples, cfg)
    for (name, a), (_, b) in zip(fast.groups(), ref.groups()):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12, err_msg=name)


def test_train_zero_epochs_returns_unchanged():
    p = init_params(LayerDims(3, 4, 6, 2, 3, 3), seed=1)
    before = p.copy()
    out, history = train(p, _samples(np.random.default_rng(0), 5, p.dims), TrainConfig(epochs=0))
    assert history == []
    for (_, a), (_, b) in zip(out.groups(), before.groups()):
        assert np.array_equal(a, b)


def test_train_is_deterministic_and_seed_sensitive():
    dims = LayerDims(3, 4, 6, 2, 5, 5)
    samples = _samples(np.random.default_rng(0), 30, dims)
    runs = [train(init_params(dims, 2), samples, TrainConfig(alpha=0.01, epochs=3, seed=s))
            for s in (7, 7, 8)]
    for (_, a), (_, b) in zip(runs[0][0].groups(), runs[1][0].groups()):
        assert np.array_equal(a, b)
    assert runs[0][1] == runs[1][1]
    assert not np.array_equal(runs[0][0].bank1.w_v, runs[2][0].bank1.w_v)


def test_train_rejects_mismatched_samples():
    p = init_params(LayerDims(3, 4, 6, 2, 3), seed=1)
    with pytest.raises(ValueError):
        train(p, _samples(np.random.default_rng(0), 5, LayerDims(2, 4, 6, 2, 3)), TrainConfig(epochs=1))


def test_train_ffw_rejects_second_bank():
    p = init_params(LayerDims(3, 4, 6, 2, 3, 3), seed=1)
    with pytest.raises(ValueError):
        train_ffw(p, _samples(np.random.default_rng(0), 5, p.dims), TrainConfig(epochs=1))


def test_non_finite_parameters_abort_with_group_and_epoch():
    dims = LayerDims(3, 4, 6, 2, 5, 5)
    p = init_params(dims, seed=0, std=5.0)
    samples = _samples(np.random.default_rng(0), 50, dims)
    samples.present *= 1e3
    samples.hist *= 1e3
    with pytest.raises(NonFiniteParameterError) as info:
        train(p, samples, TrainConfig(alpha=0.9, rho=0.9, epochs=50))
    assert info.value.group in PARAM_GROUPS
    assert info.value.epoch >= 1
    assert info.value.group in str(info.value) and f"epoch {info.value.epoch}" in str(info.value)


def _linear_set(n=200, seed=0):
    # present depends linearly on the last history frame and on the class
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    hist = rng.normal(size=(n, 4))
    present = np.column_stack([hist[:, 2] + 0.5 * labels, hist[:, 3] - 0.5 * labels])
    present = (present - present.mean(0)) / present.std(0)
    return Samples(present, hist, np.eye(2)[labels], np.zeros(n, int), np.arange(n))


@pytest.mark.parametrize("n_f2", [10, 0])
def test_present_reconstruction_error_decreases(n_f2):
    samples = _linear_set()
    p = init_params(LayerDims(2, 10, 4, 2, 10, n_f2), seed=0)
    _, history = train(p, samples, TrainConfig(alpha=1e-4, epochs=20, seed=0))
    assert len(history) == 20
    assert history[-1].mean_recon_v < history[0].mean_recon_v


def test_zero_second_bank_stays_zero():
    samples = _linear_set(60)
    p = init_params(LayerDims(2, 6, 4, 2, 6, 6), seed=0)
    for layer in ("v", "h", "hist", "l"):
        p.bank2.matrix(layer)[...] = 0
    train(p, samples, TrainConfig(alpha=1e-3, epochs=3))
    for layer in ("v", "h", "hist", "l"):
        assert np.all(p.bank2.matrix(layer) == 0)


def test_present_chain_containment_with_zero_second_bank():
    # the present chain never reads bank 2 labels, so it matches the baseline
    rng = np.random.default_rng(4)
    d = init_params(LayerDims(3, 4, 6, 2, 5, 5), seed=3)
    for layer in ("v", "h", "hist", "l"):
        d.bank2.matrix(layer)[...] = 0
    f = d.as_ffw()
    present, hist = rng.normal(size=3), rng.normal(size=6)
    u = rng.random(64)
    cfg = TrainConfig(alpha=0.01, cd_steps=3)
    rd = chain_reconstruct_present(d, zeros_like_params(d), present, hist, np.array([1.0, 0]), cfg, FixedUniforms(u))
    rf = chain_reconstruct_present(f, zeros_like_params(f), present, hist, np.array([1.0, 0]), cfg, FixedUniforms(u))
    assert np.array_equal(rd.state.v, rf.state.v)
    for layer in ("v", "h", "hist", "l"):
        assert np.array_equal(d.bank1.matrix(layer), f.bank1.matrix(layer))


def test_callbacks_and_epoch_log(tmp_path):
    samples = _linear_set(40)
    p = init_params(LayerDims(2, 4, 4, 2, 4, 4), seed=0)
    seen = []
    _, history = train(p, samples, TrainConfig(alpha=1e-3, epochs=2),
                       callbacks=[lambda entry, params: seen.append((entry.epoch, params.is_finite()))])
    assert seen == [(1, True), (2, True)]
    path = tmp_path / "log.csv"
    write_epoch_log(history, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,mean_recon_v,mean_recon_l,mean_energy"
    assert len(lines) == 3 and lines[1].startswith("1,")
