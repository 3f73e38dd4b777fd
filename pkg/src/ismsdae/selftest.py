"""Fast numerical self-checks runnable from the command line."""

import time

import mpmath
import numpy as np

from .dataset import deinterleave, interleave
from .impairments import add_awgn, measure_power
from .nn import (
    DenseLayer,
    DenseNetwork,
    dae_objective,
    flat_grads,
    forward,
    kl_sparsity,
    softmax_cross_entropy,
)


def fd_max_rel_error(objective, params, analytic, step=1e-5):
    """Max relative error between analytic gradients and central differences."""
    worst = 0.0
    for p, g in zip(params, analytic):
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            up = objective()
            p[idx] = orig - step
            down = objective()
            p[idx] = orig
            fd = (up - down) / (2 * step)
            denom = max(abs(fd), abs(g[idx]), 1e-8)
            worst = max(worst, abs(fd - g[idx]) / denom)
    return worst


def random_dae(rng, dims=(8, 4, 8)):
    net = DenseNetwork([DenseLayer.init(dims[0], dims[1], "sigmoid", rng),
                        DenseLayer.init(dims[1], dims[2], "linear", rng)])
    for layer in net.layers:
        layer.bias[:] = rng.normal(0, 0.3, layer.bias.shape)
    return net


def check_dae_gradient(seed=0, rho=0.1, lam=1.0, batch=16):
    rng = np.random.default_rng(seed)
    net = random_dae(rng)
    clean = rng.normal(size=(batch, 8))
    noisy = clean + rng.normal(0, 0.1, clean.shape)
    _, grads, _ = dae_objective(net, noisy, clean, rho, lam)
    err = fd_max_rel_error(lambda: dae_objective(net, noisy, clean, rho, lam)[0],
                           net.params(), flat_grads(grads))
    return err < 1e-4, f"max relative error {err:.2e}"


def check_softmax_gradient(seed=0):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=4)
    _, g = softmax_cross_entropy(z, 2)
    err = fd_max_rel_error(lambda: softmax_cross_entropy(z, 2)[0], [z], [g])
    return err < 1e-6, f"max relative error {err:.2e}"


def kl_reference(rho, rho_hat, digits=40):
    """The Bernoulli KL sum evaluated in arbitrary precision."""
    with mpmath.workdps(digits):
        r = mpmath.mpf(rho)
        return sum(r * mpmath.log(r / mpmath.mpf(q))
                   + (1 - r) * mpmath.log((1 - r) / (1 - mpmath.mpf(q))) for q in rho_hat)


def check_kl_oracle(kl_impl=kl_sparsity, n=100, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        rho = float(rng.uniform(0.01, 0.99))
        rho_hat = rng.uniform(0.01, 0.99, size=int(rng.integers(1, 8)))
        ref = kl_reference(rho, rho_hat)
        got = kl_impl(rho, rho_hat)
        rel = abs(mpmath.mpf(got) - ref) / max(abs(ref), mpmath.mpf(1e-300))
        worst = max(worst, float(rel))
    return worst < 1e-10, f"worst relative deviation {worst:.2e}"


def check_snr_calibration(seed=0, n=100_000):
    rng = np.random.default_rng(seed)
    x = np.exp(1j * rng.uniform(0, 2 * np.pi, n))
    worst = 0.0
    for snr in (0, 10, 20, 30, 40, 50):
        y = add_awgn(x, snr, rng)
        realized = 10 * np.log10(measure_power(x) / measure_power(y - x))
        worst = max(worst, abs(realized - snr))
    return worst <= 0.2, f"worst SNR error {worst:.3f} dB"


def check_interleave(seed=0):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=128) + 1j * rng.normal(size=128)
    ok = np.array_equal(deinterleave(interleave(c)), c)
    return ok, "exact round trip" if ok else "round trip mismatch"


def check_softmax_sum(seed=0):
    rng = np.random.default_rng(seed)
    net = DenseNetwork([DenseLayer.init(6, 4, "softmax", rng)])
    s = forward(net, rng.normal(size=(32, 6)) * 50).output
    err = float(np.max(np.abs(s.sum(axis=1) - 1)))
    return err < 1e-9 and bool(np.all(s > 0)), f"max |sum - 1| {err:.1e}"


def run_selftest(kl_impl=kl_sparsity, echo=print):
    checks = [
        ("dae-gradient", check_dae_gradient),
        ("softmax-xent-gradient", check_softmax_gradient),
        ("kl-oracle", lambda: check_kl_oracle(kl_impl)),
        ("snr-calibration", check_snr_calibration),
        ("interleave-roundtrip", check_interleave),
        ("softmax-normalization", check_softmax_sum),
    ]
    results = []
    for name, fn in checks:
        t0 = time.perf_counter()
        ok, detail = fn()
        results.append((name, bool(ok), detail))
        echo(f"{'PASS' if ok else 'FAIL'}  {name:<24} {detail}  ({time.perf_counter() - t0:.2f}s)")
    return results
