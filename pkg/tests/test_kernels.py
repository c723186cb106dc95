import numpy as np
import pytest

from eveneuron import kernels
from eveneuron.gradcheck import check_instance, random_instance
from eveneuron.kernels import loss_and_grad, loss_and_grad_loops, loss_and_grad_numpy, make_settings
from eveneuron.numkernel import Rng, fd_gradient, max_relative_error

NAMES = ("A_mu", "b_mu", "A_logvar", "b_logvar", "w", "b0")


def problem(seed, N=3, k=2, d=4, R=6, S=1):
    r = Rng(seed)
    P = {"A_mu": r.normal((N, k, d)), "b_mu": 0.5 * r.normal((N, k)),
         "A_logvar": 0.3 * r.normal((N, k, d)), "b_logvar": 0.3 * r.normal((N, k)),
         "w": r.normal(N * k), "b0": np.array(0.2)}
    return P, r.normal((R, d)), r.normal((S, R, N, k)), r.normal(R)


def weighted(parts, s):
    return parts[0] + s[0] * parts[1] + s[3] * parts[2] + s[7] * parts[3]


def settings_grid():
    yield make_settings(beta=0.3, lambda_band=1.5, ell=0.8, u=1.5, alpha_ar=0.4, phi=0.7,
                        logvar_floor=-9.0, sample_readout=True)
    yield make_settings(beta=0.3, tau_free=0.05, use_kl_eff=True, lambda_band=0.5, ell=2.0, u=3.0,
                        band_per_neuron=False, alpha_ar=0.0, logvar_floor=-9.0)
    yield make_settings(beta=1.0, lambda_band=1.0, ell=0.1, u=0.2, alpha_ar=1.0, phi=0.2,
                        stochastic=False)


@pytest.mark.parametrize("idx", range(3))
@pytest.mark.parametrize("S", [1, 3])
def test_backends_agree(idx, S):
    s = list(settings_grid())[idx]
    P, h, eps, y = problem(idx + 10 * S, S=S)
    args = [P[n] for n in NAMES[:5]] + [float(P["b0"]), h, eps, y, 3, s]
    pa, ga = loss_and_grad_numpy(*args)
    pb, gb = loss_and_grad_loops(*args)
    np.testing.assert_allclose(pa, pb, rtol=1e-12, atol=1e-14)
    for a, b in zip(ga, gb):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-13)


@pytest.mark.parametrize("idx", range(3))
@pytest.mark.parametrize("impl", [loss_and_grad_numpy, loss_and_grad_loops])
def test_gradient_matches_fd(idx, impl):
    s = list(settings_grid())[idx]
    P, h, eps, y = problem(100 + idx, S=2)

    def f(p):
        parts, _ = impl(*[p[n] for n in NAMES[:5]], float(p["b0"]), h, eps, y, 2, s)
        return weighted(parts, s)

    _, g = impl(*[P[n] for n in NAMES[:5]], float(P["b0"]), h, eps, y, 2, s)
    ref = fd_gradient(f, P, 1e-5)
    got = dict(zip(NAMES, g[:5] + (np.array(g[5]),)))
    assert max_relative_error(got, ref) < 1e-5


def test_free_bits_hinge_inactive_below_tau():
    P, h, eps, y = problem(3)
    s_on = make_settings(beta=1.0, tau_free=1e6, use_kl_eff=True)
    s_off = make_settings(beta=0.0)
    args = [P[n] for n in NAMES[:5]] + [0.2, h, eps, y, 1]
    _, g_on = loss_and_grad(*args, s_on)
    _, g_off = loss_and_grad(*args, s_off)
    for a, b in zip(g_on, g_off):
        np.testing.assert_allclose(a, b, atol=1e-14)


def test_no_ar_for_single_step_rows():
    P, h, eps, y = problem(4)
    s = make_settings(alpha_ar=5.0, phi=0.5)
    parts, _ = loss_and_grad(*[P[n] for n in NAMES[:5]], 0.2, h, eps, y, 1, s)
    assert parts[3] == 0.0


def test_dispatcher_returns_array_bias_grad():
    P, h, eps, y = problem(5)
    _, g = loss_and_grad(*[P[n] for n in NAMES[:5]], 0.2, h, eps, y, 2, make_settings())
    assert isinstance(g[5], np.ndarray) and g[5].shape == ()


@pytest.mark.parametrize("trial", range(4))
def test_three_routes_agree_on_random_instances(trial):
    res = check_instance(random_instance(Rng(77).derive("t", trial)))
    assert res.worst() < 1e-4, (res.kernel_error, res.tape_error)


def test_backend_flag_is_known():
    from eveneuron import _accel
    assert _accel.BACKEND in ("numpy", "numba")
