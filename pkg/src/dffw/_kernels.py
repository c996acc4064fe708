"""Compiled single-sample kernels for sequential contrastive divergence.

Parameters live in one flat float64 vector laid out group by group in
``model.PARAM_GROUPS`` order (weights first, then biases a, b, c). ``off``
holds the 12 group boundaries and ``dims`` is
``(n_v, n_h, n_vlt, n_l, n_f1, n_f2)``; ``n_f2 == 0`` selects the
single-tensor baseline, whose label layer is driven by bank 1.

Random numbers are pre-drawn uniforms consumed in this order per sample:
chain 1 hidden init, then one hidden draw per step; chain 2 hidden init,
then per step one label draw followed by one hidden draw.

Layer indices: 0 present, 1 hidden, 2 history, 3 label.
"""
import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _mat(theta, off, g, rows):
    block = theta[off[g]:off[g + 1]]
    return block.reshape((rows, block.size // rows))


@njit(cache=True, nogil=True)
def _row_times(x, w, out):
    # out[f] = sum_r x[r] * w[r, f]
    out[:] = 0.0
    for r in range(w.shape[0]):
        xr = x[r]
        if xr != 0.0:
            for f in range(w.shape[1]):
                out[f] += xr * w[r, f]


@njit(cache=True, nogil=True)
def _times_col(w, p, out):
    # out[r] = sum_f w[r, f] * p[f]
    for r in range(w.shape[0]):
        s = 0.0
        for f in range(w.shape[1]):
            s += w[r, f] * p[f]
        out[r] = s


@njit(cache=True, nogil=True)
def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@njit(cache=True, nogil=True)
def _layer_sum(theta, off, dims, bank, layer, x, out):
    _row_times(x, _mat(theta, off, 4 * bank + layer, dims[layer]), out[:dims[4 + bank]])


@njit(cache=True, nogil=True)
def _label_bank(dims):
    return 1 if dims[5] > 0 else 0


@njit(cache=True, nogil=True)
def _hidden_from_sums(theta, off, dims, sums, out, tmp):
    """``out = sigmoid(b + sum_banks W_h @ (s_v * s_hist * s_l))``."""
    n_h = dims[1]
    b = theta[off[9]:off[10]]
    out[:n_h] = b
    for bank in range(2):
        n_f = dims[4 + bank]
        if n_f == 0:
            continue
        p = sums[bank, 0, :n_f] * sums[bank, 2, :n_f] * sums[bank, 3, :n_f]
        _times_col(_mat(theta, off, 4 * bank + 1, n_h), p, tmp)
        for j in range(n_h):
            out[j] += tmp[j]
    for j in range(n_h):
        out[j] = _sigmoid(out[j])


@njit(cache=True, nogil=True)
def _update_block(theta, vel, base, rows, n_f, xp, xn, pp, pn, alpha, rho, gamma):
    # slice first: offset-free indices let the inner loop vectorize
    t = theta[base:base + rows * n_f]
    ve = vel[base:base + rows * n_f]
    for r in range(rows):
        a_p = xp[r]
        a_n = xn[r]
        for f in range(n_f):
            idx = r * n_f + f
            d = a_p * pp[f] - a_n * pn[f] - gamma * t[idx]
            ve[idx] = rho * ve[idx] + alpha * d
            t[idx] += ve[idx]


@njit(cache=True, nogil=True)
def _fused_update(theta, vel, off, dims, sigma, acts_p, sums_p, acts_n, sums_n, alpha, rho, gamma):
    """Apply one momentum step using positive minus negative statistics.

    ``acts_*`` is a tuple of the four (sigma-scaled) layer activities and
    ``sums_*`` the matching per-factor layer sums, shape (2, 4, n_f_max).
    Returns False if a bias became non-finite; a non-finite weight reaches
    the biases (and the sample energy) within one step.
    """
    total = 0.0
    for bank in range(2):
        n_f = dims[4 + bank]
        if n_f == 0:
            continue
        for layer in range(4):
            pp = np.ones(n_f)
            pn = np.ones(n_f)
            for other in range(4):
                if other != layer:
                    pp *= sums_p[bank, other, :n_f]
                    pn *= sums_n[bank, other, :n_f]
            _update_block(theta, vel, off[4 * bank + layer], dims[layer], n_f,
                          acts_p[layer], acts_n[layer], pp, pn, alpha, rho, gamma)
    # biases: visible statistic (v - a) / sigma^2, so the difference is (v+ - v-) / sigma^2
    vs_p = acts_p[0]
    vs_n = acts_n[0]
    for i in range(dims[0]):
        idx = off[8] + i
        d = (vs_p[i] - vs_n[i]) / sigma[i]
        vel[idx] = rho * vel[idx] + alpha * d
        theta[idx] += vel[idx]
        total += theta[idx]
    for layer, g in ((1, 9), (3, 10)):
        xp = acts_p[layer]
        xn = acts_n[layer]
        for r in range(dims[layer]):
            idx = off[g] + r
            vel[idx] = rho * vel[idx] + alpha * (xp[r] - xn[r])
            theta[idx] += vel[idx]
            total += theta[idx]
    return np.isfinite(total)


@njit(cache=True, nogil=True)
def accumulate_stats(theta, off, dims, sigma, v, h, ks, l, sign, grad):
    """Add ``sign`` times the sufficient statistics of one state to ``grad``."""
    vs = v / sigma
    acts = (vs, h, ks, l)
    for bank in range(2):
        n_f = dims[4 + bank]
        if n_f == 0:
            continue
        sums = np.empty((4, n_f))
        for layer in range(4):
            _row_times(acts[layer], _mat(theta, off, 4 * bank + layer, dims[layer]), sums[layer])
        for layer in range(4):
            p = np.ones(n_f)
            for other in range(4):
                if other != layer:
                    p *= sums[other]
            x = acts[layer]
            base = off[4 * bank + layer]
            for r in range(dims[layer]):
                xr = sign * x[r]
                row = base + r * n_f
                for f in range(n_f):
                    grad[row + f] += xr * p[f]
    a = theta[off[8]:off[9]]
    for i in range(dims[0]):
        grad[off[8] + i] += sign * (v[i] - a[i]) / (sigma[i] * sigma[i])
    for j in range(dims[1]):
        grad[off[9] + j] += sign * h[j]
    for o in range(dims[3]):
        grad[off[10] + o] += sign * l[o]


@njit(cache=True, nogil=True)
def energy_at(theta, off, dims, sigma, v, h, ks, l):
    vs = v / sigma
    acts = (vs, h, ks, l)
    a = theta[off[8]:off[9]]
    b = theta[off[9]:off[10]]
    c = theta[off[10]:off[11]]
    e = 0.0
    for i in range(dims[0]):
        d = (v[i] - a[i]) / sigma[i]
        e += 0.5 * d * d
    for j in range(dims[1]):
        e -= b[j] * h[j]
    for o in range(dims[3]):
        e -= c[o] * l[o]
    for bank in range(2):
        n_f = dims[4 + bank]
        if n_f == 0:
            continue
        p = np.ones(n_f)
        s = np.empty(n_f)
        for layer in range(4):
            _row_times(acts[layer], _mat(theta, off, 4 * bank + layer, dims[layer]), s)
            p *= s
        e -= p.sum()
    return e


@njit(cache=True, nogil=True)
def train_sample(theta, vel, off, dims, sigma, sigma_hist, present, hist, label, u,
                 n_steps, alpha, rho, gamma, pos_from_data):
    """Run both Markov chains of one sample with in-loop updates.

    With ``pos_from_data`` the positive-phase hidden probabilities are
    inferred from the clamped sample under the current parameters at every
    step; otherwise the chain's current hidden probabilities are used.

    Returns ``(sq_err_v, sq_err_l, energy, finite)``: mean squared
    reconstruction errors of the final chain states, and the energy at the
    data point (hidden units at their mean-field values) after both chains.
    """
    n_v, n_h, n_l = dims[0], dims[1], dims[3]
    n_fmax = max(dims[4], dims[5])
    lb = _label_bank(dims)
    ks = hist / sigma_hist
    vs_data = present / sigma
    sums_p = np.zeros((2, 4, n_fmax))
    sums_n = np.zeros((2, 4, n_fmax))
    tmp_f = np.empty(n_fmax)
    tmp_h = np.empty(n_h)
    ph = np.empty(n_h)
    ph_pos = np.empty(n_h)
    hs = np.empty(n_h)
    pl = np.zeros(n_l)
    ls = np.empty(n_l)
    v = np.zeros(n_v)
    vs = np.zeros(n_v)
    zeros_l = np.zeros(n_l)
    pos = 0
    finite = True
    banks = 2 if dims[5] > 0 else 1

    # chain 1: reconstruct the present layer, label and history clamped
    for bank in range(banks):
        _layer_sum(theta, off, dims, bank, 0, vs, sums_n[bank, 0])
        _layer_sum(theta, off, dims, bank, 2, ks, sums_n[bank, 2])
        _layer_sum(theta, off, dims, bank, 3, label, sums_n[bank, 3])
    _hidden_from_sums(theta, off, dims, sums_n, ph, tmp_h)
    for j in range(n_h):
        hs[j] = 1.0 if u[pos + j] < ph[j] else 0.0
    pos += n_h
    for _ in range(n_steps):
        for bank in range(banks):
            _layer_sum(theta, off, dims, bank, 2, ks, sums_p[bank, 2])
            _layer_sum(theta, off, dims, bank, 3, label, sums_p[bank, 3])
            _layer_sum(theta, off, dims, bank, 0, vs_data, sums_p[bank, 0])
        if pos_from_data:
            _hidden_from_sums(theta, off, dims, sums_p, ph_pos, tmp_h)
        else:
            ph_pos[:] = ph
        for bank in range(banks):
            _layer_sum(theta, off, dims, bank, 1, ph_pos, sums_p[bank, 1])
            sums_n[bank, 2] = sums_p[bank, 2]
            sums_n[bank, 3] = sums_p[bank, 3]
        # present layer from the sampled hidden units (bank 1 only)
        n_f = dims[4]
        _layer_sum(theta, off, dims, 0, 1, hs, tmp_f)
        p = tmp_f[:n_f] * sums_p[0, 2, :n_f] * sums_p[0, 3, :n_f]
        _times_col(_mat(theta, off, 0, n_v), p, v)
        a = theta[off[8]:off[9]]
        for i in range(n_v):
            v[i] = a[i] + sigma[i] * v[i]
            vs[i] = v[i] / sigma[i]
        for bank in range(banks):
            _layer_sum(theta, off, dims, bank, 0, vs, sums_n[bank, 0])
        _hidden_from_sums(theta, off, dims, sums_n, ph, tmp_h)
        for j in range(n_h):
            hs[j] = 1.0 if u[pos + j] < ph[j] else 0.0
        pos += n_h
        for bank in range(banks):
            _layer_sum(theta, off, dims, bank, 1, ph, sums_n[bank, 1])
        ok = _fused_update(theta, vel, off, dims, sigma, (vs_data, ph_pos, ks, label), sums_p,
                           (vs, ph, ks, label), sums_n, alpha, rho, gamma)
        finite = finite and ok
    err_v = 0.0
    for i in range(n_v):
        err_v += (v[i] - present[i]) ** 2
    err_v /= n_v

    # chain 2: reconstruct the label layer, present and history clamped
    for bank in range(banks):
        _layer_sum(theta, off, dims, bank, 0, vs_data, sums_n[bank, 0])
        _layer_sum(theta, off, dims, bank, 2, ks, sums_n[bank, 2])
        _layer_sum(theta, off, dims, bank, 3, zeros_l, sums_n[bank, 3])
    _hidden_from_sums(theta, off, dims, sums_n, ph, tmp_h)
    for j in range(n_h):
        hs[j] = 1.0 if u[pos + j] < ph[j] else 0.0
    pos += n_h
    for _ in range(n_steps):
        for bank in range(banks):
            _layer_sum(theta, off, dims, bank, 0, vs_data, sums_p[bank, 0])
            _layer_sum(theta, off, dims, bank, 2, ks, sums_p[bank, 2])
            _layer_sum(theta, off, dims, bank, 3, label, sums_p[bank, 3])
        if pos_from_data:
            _hidden_from_sums(theta, off, dims, sums_p, ph_pos, tmp_h)
        else:
            ph_pos[:] = ph
        for bank in range(banks):
            _layer_sum(theta, off, dims, bank, 1, ph_pos, sums_p[bank, 1])
            sums_n[bank, 0] = sums_p[bank, 0]
            sums_n[bank, 2] = sums_p[bank, 2]
        # label layer from the sampled hidden units
        n_f = dims[4 + lb]
        _layer_sum(theta, off, dims, lb, 1, hs, tmp_f)
        p = sums_p[lb, 0, :n_f] * tmp_f[:n_f] * sums_p[lb, 2, :n_f]
        _times_col(_mat(theta, off, 4 * lb + 3, n_l), p, pl)
        c = theta[off[10]:off[11]]
        for o in range(n_l):
            pl[o] = _sigmoid(c[o] + pl[o])
            ls[o] = 1.0 if u[pos + o] < pl[o] else 0.0
        pos += n_l
        for bank in range(banks):
            _layer_sum(theta, off, dims, bank, 3, ls, sums_n[bank, 3])
        _hidden_from_sums(theta, off, dims, sums_n, ph, tmp_h)
        for j in range(n_h):
            hs[j] = 1.0 if u[pos + j] < ph[j] else 0.0
        pos += n_h
        for bank in range(banks):
            _layer_sum(theta, off, dims, bank, 1, ph, sums_n[bank, 1])
            _layer_sum(theta, off, dims, bank, 3, pl, sums_n[bank, 3])
        ok = _fused_update(theta, vel, off, dims, sigma, (vs_data, ph_pos, ks, label), sums_p,
                           (vs_data, ph, ks, pl), sums_n, alpha, rho, gamma)
        finite = finite and ok
    err_l = 0.0
    for o in range(n_l):
        err_l += (pl[o] - label[o]) ** 2
    err_l /= n_l

    for bank in range(banks):
        _layer_sum(theta, off, dims, bank, 0, vs_data, sums_n[bank, 0])
        _layer_sum(theta, off, dims, bank, 2, ks, sums_n[bank, 2])
        _layer_sum(theta, off, dims, bank, 3, label, sums_n[bank, 3])
    _hidden_from_sums(theta, off, dims, sums_n, ph, tmp_h)
    e = energy_at(theta, off, dims, sigma, present, ph, ks, label)
    return err_v, err_l, e, finite and np.isfinite(e)


@njit(cache=True, nogil=True)
def train_epoch(theta, vel, off, dims, sigma, sigma_hist, present, hist, labels, order, u,
                n_steps, alpha, rho, gamma, pos_from_data, err_v, err_l, energies):
    """Visit samples in ``order``; returns the position of the first sample
    whose update produced a non-finite parameter, or -1."""
    for t in range(order.size):
        s = order[t]
        ev, el, e, ok = train_sample(theta, vel, off, dims, sigma, sigma_hist,
                                     present[s], hist[s], labels[s], u[t],
                                     n_steps, alpha, rho, gamma, pos_from_data)
        err_v[t] = ev
        err_l[t] = el
        energies[t] = e
        if not ok:
            return t
    return -1
