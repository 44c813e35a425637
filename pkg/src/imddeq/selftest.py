"""Quick property suites run by ``python -m imddeq selftest``.

Each suite returns ``(passed, detail)``. A deliberately broken input-gradient
variant can be swapped in to prove the gradient suite catches it.
"""

from __future__ import annotations

import time

import numpy as np

from .cnn import ConvLayerSpec, _stuff, conv1d_forward, conv1d_input_grad, conv1d_kernel_grad, correlate
from .losses import poly_push, unsup_loss_pam2, unsup_loss_pam4
from .pipeline import PipelineConfig, simulate_buffers

FAULTS = ("no-flip",)


def _no_flip_input_grad(grad_out, spec, k, input_length=None):
    """Input gradient with the kernel flip omitted (mutation fixture)."""
    n_out = grad_out.shape[1]
    if input_length is None:
        input_length = n_out * spec.stride
    gs = _stuff(grad_out, spec.stride)
    span = spec.dilation * (spec.kernel_size - 1)
    right = input_length + 2 * spec.padding - gs.shape[1]
    kt = k.transpose(1, 0, 2)
    full = correlate(gs, kt, span, right, 1, spec.dilation)
    return full[:, spec.padding: spec.padding + input_length]


def naive_conv(i, k, padding, stride, dilation):
    c_out, c_in, ksz = k.shape
    xp = np.pad(i, ((0, 0), (padding, padding)))
    n_out = (xp.shape[1] - dilation * (ksz - 1) - 1) // stride + 1
    o = np.zeros((c_out, n_out))
    for c in range(c_out):
        for n in range(n_out):
            acc = 0.0
            for d in range(c_in):
                for j in range(ksz):
                    acc += k[c, d, j] * xp[d, n * stride + j * dilation]
            o[c, n] = acc
    return o


def random_layer(rng, max_c=3, max_n=32, kernels=(1, 3, 5, 21)):
    ksz = int(rng.choice(kernels))
    stride = int(rng.choice((1, 2)))
    spec = ConvLayerSpec(int(rng.integers(1, max_c + 1)), int(rng.integers(1, max_c + 1)), ksz,
                         stride=stride, relu=False)
    n = int(rng.integers(1, max_n // 2 + 1)) * 2
    return spec, n


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def gradient_suite(trials=40, seed=0, input_grad=conv1d_input_grad, tol=1e-5):
    rng = np.random.default_rng(seed)
    worst = 0.0
    h = 1e-6
    for _ in range(trials):
        spec, n = random_layer(rng)
        i = rng.standard_normal((spec.in_channels, n))
        k = rng.standard_normal(spec.weight_shape)
        r = rng.standard_normal((spec.out_channels, spec.output_length(n)))

        def f(ii, kk):
            return float(np.sum(r * conv1d_forward(ii, spec, kk)))

        gi = input_grad(r, spec, k, n)
        gk = conv1d_kernel_grad(i, r, spec)
        fi = np.zeros_like(i)
        for idx in np.ndindex(i.shape):
            e = np.zeros_like(i)
            e[idx] = h
            fi[idx] = (f(i + e, k) - f(i - e, k)) / (2 * h)
        fk = np.zeros_like(k)
        for idx in np.ndindex(k.shape):
            e = np.zeros_like(k)
            e[idx] = h
            fk[idx] = (f(i, k + e) - f(i, k - e)) / (2 * h)
        worst = max(worst, _rel(gi, fi), _rel(gk, fk))
    return worst < tol, f"max rel. error {worst:.2e} over {trials} layers"


def conv_oracle_suite(trials=200, seed=1, tol=1e-12):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        spec, n = random_layer(rng)
        i = rng.standard_normal((spec.in_channels, n))
        k = rng.standard_normal(spec.weight_shape)
        got = conv1d_forward(i, spec, k)
        ref = naive_conv(i, k, spec.padding, spec.stride, spec.dilation)
        worst = max(worst, float(np.abs(got - ref).max()))
    return worst < tol, f"max abs. deviation {worst:.1e} over {trials} layers"


def loss_suite(seed=2, tol=1e-6):
    rng = np.random.default_rng(seed)
    pts2, pts4 = np.array([-1.0, 1.0]), np.array([-1.5, -0.5, 0.5, 1.5])
    ok = float(poly_push(pts4, pts4).sum()) == 0.0 and float(poly_push(pts2, pts2).sum()) == 0.0
    ok &= bool(np.all(poly_push(rng.uniform(-2, 2, 50) + 1e-3, pts4) > 0))
    worst = 0.0
    for fn, pts in ((unsup_loss_pam2, pts2), (unsup_loss_pam4, pts4)):
        for _ in range(20):
            z = rng.uniform(-2, 2, 9)
            _, g = fn(z, pts, 4.0, True)
            h = 1e-6
            fd = np.zeros_like(z)
            for j in range(len(z)):
                e = np.zeros_like(z)
                e[j] = h
                fd[j] = (fn(z + e, pts, 4.0, True)[0] - fn(z - e, pts, 4.0, True)[0]) / (2 * h)
            worst = max(worst, _rel(g, fd))
    return ok and worst < tol, f"zero set ok={ok}, max rel. FD error {worst:.1e}"


def buffer_suite():
    cfg = PipelineConfig.for_layers()
    occ = [simulate_buffers(cfg, n).max_occupancy for n in (256, 2048, 16384)]
    naive = [simulate_buffers(cfg, n, naive=True).total_max for n in (256, 512)]
    ratio = naive[1] / naive[0]
    ok = occ[0] == occ[1] == occ[2] and 1.9 <= ratio <= 2.1
    return ok, f"max occupancy {occ[0]} for N=256/2048/16384, naive growth x{ratio:.2f}"


def run(fault: str | None = None) -> list[tuple[str, bool, str, float]]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}")
    input_grad = _no_flip_input_grad if fault == "no-flip" else conv1d_input_grad
    suites = [
        ("gradients", lambda: gradient_suite(input_grad=input_grad)),
        ("losses", loss_suite),
        ("conv-oracle", conv_oracle_suite),
        ("buffer-invariance", buffer_suite),
    ]
    results = []
    for name, fn in suites:
        t0 = time.perf_counter()
        ok, detail = fn()
        results.append((name, bool(ok), detail, time.perf_counter() - t0))
    return results
