"""Fused EVE objective and its hand-derived gradient.

Two implementations of the same contract live here: a vectorised numpy one
and an explicit-loop one compiled with numba. ``loss_and_grad`` dispatches on
the backend chosen in :mod:`eveneuron._accel`; both are checked against the
tape gradient and finite differences in the test-suite.

Contract (R rows, N neurons, k latents, d inputs, S Monte Carlo draws):

    h (R, d), eps (S, R, N, k), y (R,)
    rows are grouped into consecutive sequences of length ``seq_len``;
    seq_len < 2 disables the AR term.

    settings = (beta, tau_free, use_kl_eff, lambda_band, ell, u, band_per_neuron,
                alpha_ar, phi, logvar_floor, stochastic, sample_readout)

Returns ``(parts, grads)`` where ``parts = [task, kl, band, ar]`` are the
*unweighted* components and ``grads`` the gradient of the weighted total
``task + beta*kl + lambda_band*band + alpha_ar*ar`` for
(A_mu, b_mu, A_logvar, b_logvar, w, b0).
"""
from __future__ import annotations

import numpy as np

from ._accel import HAVE_NUMBA, njit

N_SETTINGS = 12


def make_settings(beta=0.0, tau_free=0.0, use_kl_eff=False, lambda_band=0.0, ell=0.5, u=2.0,
                  band_per_neuron=True, alpha_ar=0.0, phi=1.0, logvar_floor=-np.inf,
                  stochastic=True, sample_readout=False) -> np.ndarray:
    return np.array([beta, tau_free, float(use_kl_eff), lambda_band, ell, u,
                     float(band_per_neuron), alpha_ar, phi, logvar_floor,
                     float(stochastic), float(sample_readout)], dtype=np.float64)


def _band_value_and_slope(E, ell, u):
    lo = np.maximum(ell - E, 0.0)
    hi = np.maximum(E - u, 0.0)
    return lo * lo + hi * hi, 2.0 * hi - 2.0 * lo


def loss_and_grad_numpy(A_mu, b_mu, A_lv, b_lv, w, b0, h, eps, y, seq_len, settings):
    (beta, tau, use_eff, lam, ell, u, per_neuron, alpha, phi, lv_floor,
     stochastic, sample_readout) = settings
    R, _ = h.shape
    N, k, _ = A_mu.shape
    S = eps.shape[0]
    rs = 1.0 / np.sqrt(N)

    mu = np.einsum("nkd,rd->rnk", A_mu, h) + b_mu
    raw = np.einsum("nkd,rd->rnk", A_lv, h) + b_lv
    lv = np.maximum(raw, lv_floor)
    var = np.exp(lv)
    sig = np.exp(0.5 * lv)

    # readout
    if stochastic and sample_readout:
        m = mu[None] + sig[None] * eps  # S R N k
    else:
        m = mu[None]
    m_avg = m.mean(axis=0).reshape(R, N * k)
    y_hat = m_avg @ w * rs + b0
    resid = y_hat - y
    task = float(np.mean(resid * resid))
    dy = 2.0 * resid / R
    g_w = m_avg.T @ dy * rs
    g_b0 = dy.sum()
    dm = (dy[:, None] * w[None, :] * rs).reshape(R, N, k)
    g_mu = dm.copy()
    g_lv = np.zeros_like(lv)
    if stochastic and sample_readout:
        g_lv += dm * (eps.mean(axis=0)) * sig * 0.5

    # KL
    kl_rows = 0.5 * np.sum(mu * mu + var - lv - 1.0, axis=2)
    kl_neuron = kl_rows.mean(axis=0)
    if use_eff:
        active = kl_neuron > tau
        kl = float(np.mean(np.where(active, kl_neuron - tau, 0.0)))
        c = beta / N * active.astype(np.float64)
    else:
        kl = float(kl_neuron.mean())
        c = np.full(N, beta / N)
    g_mu += c[None, :, None] * mu / R
    g_lv += c[None, :, None] * 0.5 * (var - 1.0) / R

    # band
    E_neuron = np.sum(mu * mu, axis=(0, 2)) / (R * k)
    if per_neuron:
        pen, slope = _band_value_and_slope(E_neuron, ell, u)
        band = float(pen.mean())
        g_mu += (lam / N) * slope[None, :, None] * 2.0 * mu / (R * k)
    else:
        pen, slope = _band_value_and_slope(E_neuron.mean(), ell, u)
        band = float(pen)
        g_mu += lam * slope * 2.0 * mu / (R * N * k)

    # AR on consecutive rows
    ar = 0.0
    T = int(seq_len)
    if T >= 2:
        B = R // T
        mus = mu.reshape(B, T, N, k)
        diff = mus[:, 1:] - phi * mus[:, :-1]
        ar = float(np.sum(diff * diff) / (B * (T - 1)))
        a = 2.0 * alpha / (B * (T - 1))
        gs = np.zeros_like(mus)
        gs[:, 1:] += a * diff
        gs[:, :-1] -= a * phi * diff
        g_mu += gs.reshape(R, N, k)

    g_raw = g_lv * (raw > lv_floor)
    g_A_mu = np.einsum("rnk,rd->nkd", g_mu, h)
    g_b_mu = g_mu.sum(axis=0)
    g_A_lv = np.einsum("rnk,rd->nkd", g_raw, h)
    g_b_lv = g_raw.sum(axis=0)
    parts = np.array([task, kl, band, ar])
    return parts, (g_A_mu, g_b_mu, g_A_lv, g_b_lv, g_w, g_b0)


@njit
def _band_scalar(E, ell, u):
    lo = ell - E if ell > E else 0.0
    hi = E - u if E > u else 0.0
    return lo * lo + hi * hi, 2.0 * hi - 2.0 * lo


@njit
def loss_and_grad_loops(A_mu, b_mu, A_lv, b_lv, w, b0, h, eps, y, seq_len, settings):
    beta = settings[0]
    tau = settings[1]
    use_eff = settings[2] != 0.0
    lam = settings[3]
    ell = settings[4]
    u = settings[5]
    per_neuron = settings[6] != 0.0
    alpha = settings[7]
    phi = settings[8]
    lv_floor = settings[9]
    sample_readout = settings[10] != 0.0 and settings[11] != 0.0

    R, d = h.shape
    N, k, _ = A_mu.shape
    S = eps.shape[0]
    rs = 1.0 / np.sqrt(N)

    mu = np.empty((R, N, k))
    raw = np.empty((R, N, k))
    lv = np.empty((R, N, k))
    sig = np.empty((R, N, k))
    for r in range(R):
        for i in range(N):
            for j in range(k):
                am = b_mu[i, j]
                al = b_lv[i, j]
                for q in range(d):
                    am += A_mu[i, j, q] * h[r, q]
                    al += A_lv[i, j, q] * h[r, q]
                mu[r, i, j] = am
                raw[r, i, j] = al
                lv[r, i, j] = al if al > lv_floor else lv_floor
                sig[r, i, j] = np.exp(0.5 * lv[r, i, j])

    # readout + task
    m_avg = np.empty((R, N, k))
    eps_avg = np.zeros((R, N, k))
    for r in range(R):
        for i in range(N):
            for j in range(k):
                if sample_readout:
                    e = 0.0
                    for s in range(S):
                        e += eps[s, r, i, j]
                    e /= S
                    eps_avg[r, i, j] = e
                    m_avg[r, i, j] = mu[r, i, j] + sig[r, i, j] * e
                else:
                    m_avg[r, i, j] = mu[r, i, j]
    task = 0.0
    dy = np.empty(R)
    for r in range(R):
        acc = 0.0
        for i in range(N):
            for j in range(k):
                acc += w[i * k + j] * m_avg[r, i, j]
        res = acc * rs + b0 - y[r]
        task += res * res
        dy[r] = 2.0 * res / R
    task /= R

    g_w = np.zeros(N * k)
    g_b0 = 0.0
    g_mu = np.zeros((R, N, k))
    g_lv = np.zeros((R, N, k))
    for r in range(R):
        g_b0 += dy[r]
        for i in range(N):
            for j in range(k):
                g_w[i * k + j] += dy[r] * m_avg[r, i, j] * rs
                dm = dy[r] * w[i * k + j] * rs
                g_mu[r, i, j] += dm
                if sample_readout:
                    g_lv[r, i, j] += dm * eps_avg[r, i, j] * sig[r, i, j] * 0.5

    # KL and energy per neuron
    kl_neuron = np.zeros(N)
    E_neuron = np.zeros(N)
    for r in range(R):
        for i in range(N):
            for j in range(k):
                m2 = mu[r, i, j] * mu[r, i, j]
                v = sig[r, i, j] * sig[r, i, j]
                kl_neuron[i] += 0.5 * (m2 + v - lv[r, i, j] - 1.0)
                E_neuron[i] += m2
    kl = 0.0
    c = np.empty(N)
    for i in range(N):
        kl_neuron[i] /= R
        E_neuron[i] /= R * k
        if use_eff:
            if kl_neuron[i] > tau:
                kl += kl_neuron[i] - tau
                c[i] = beta / N
            else:
                c[i] = 0.0
        else:
            kl += kl_neuron[i]
            c[i] = beta / N
    kl /= N

    band = 0.0
    coef = np.empty(N)
    if per_neuron:
        for i in range(N):
            pen, slope = _band_scalar(E_neuron[i], ell, u)
            band += pen
            coef[i] = lam / N * slope * 2.0 / (R * k)
        band /= N
    else:
        Eall = 0.0
        for i in range(N):
            Eall += E_neuron[i]
        pen, slope = _band_scalar(Eall / N, ell, u)
        band = pen
        for i in range(N):
            coef[i] = lam * slope * 2.0 / (R * N * k)

    for r in range(R):
        for i in range(N):
            for j in range(k):
                g_mu[r, i, j] += c[i] * mu[r, i, j] / R + coef[i] * mu[r, i, j]
                g_lv[r, i, j] += c[i] * 0.5 * (sig[r, i, j] * sig[r, i, j] - 1.0) / R

    ar = 0.0
    T = seq_len
    if T >= 2:
        B = R // T
        a = 2.0 * alpha / (B * (T - 1))
        for b in range(B):
            for t in range(1, T):
                r1 = b * T + t
                r0 = r1 - 1
                for i in range(N):
                    for j in range(k):
                        df = mu[r1, i, j] - phi * mu[r0, i, j]
                        ar += df * df
                        g_mu[r1, i, j] += a * df
                        g_mu[r0, i, j] -= a * phi * df
        ar /= B * (T - 1)

    g_A_mu = np.zeros((N, k, d))
    g_b_mu = np.zeros((N, k))
    g_A_lv = np.zeros((N, k, d))
    g_b_lv = np.zeros((N, k))
    for r in range(R):
        for i in range(N):
            for j in range(k):
                gm = g_mu[r, i, j]
                gl = g_lv[r, i, j] if raw[r, i, j] > lv_floor else 0.0
                g_b_mu[i, j] += gm
                g_b_lv[i, j] += gl
                for q in range(d):
                    g_A_mu[i, j, q] += gm * h[r, q]
                    g_A_lv[i, j, q] += gl * h[r, q]
    parts = np.array([task, kl, band, ar])
    return parts, (g_A_mu, g_b_mu, g_A_lv, g_b_lv, g_w, g_b0)


def loss_and_grad(A_mu, b_mu, A_lv, b_lv, w, b0, h, eps, y, seq_len, settings):
    """Dispatch to the compiled loops when numba is active, else numpy."""
    fn = loss_and_grad_loops if HAVE_NUMBA else loss_and_grad_numpy
    parts, grads = fn(A_mu, b_mu, A_lv, b_lv, w, float(b0), h, eps, y, int(seq_len), settings)
    return parts, grads[:5] + (np.array(float(grads[5])),)
