"""Compare the numba kernels with their numpy fallbacks.

Kernel timings run in-process through the explicitly named ``*_numba`` and
``*_numpy`` variants (after one warm-up call so JIT compilation is excluded).
``--pipeline`` additionally times a reduced macroscopicity run in two
subprocesses, one with ``TALBOTLAU_DISABLE_NUMBA=1``.

    python benchmarks/bench_kernels.py [--repeat 5] [--pipeline]
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from talbotlau import _kernels as K


def _best(fn, repeat):
    fn()  # warm-up / compile
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def _cases(rng):
    ws1 = rng.normal(size=1000) + 1j * rng.normal(size=1000)
    rates = rng.uniform(0, 1e16, size=(4, 1000))
    inv_tau = 10.0 ** -np.linspace(0, 25, 2001)
    yield "damped_first_order (1000 nodes x 4 x 2001 tau)", \
        lambda f: f(ws1, rates, inv_tau), K.damped_first_order_numpy, K.damped_first_order_numba

    theta = 2 * np.pi * np.arange(60) * 15 / 133
    dwell = np.full(60, 4.0)
    counts = rng.poisson(dwell * (120 * (1 + 0.1 * np.cos(theta - 1.3)) + 30)).astype(float)
    v = np.linspace(0, 1, 401)
    yield "profile_grid (60 points x 401 V)", \
        lambda f: f(theta, dwell, counts, 30.0, v), K.profile_grid_numpy, K.profile_grid_numba

    z = np.linspace(0, 8, 4001)
    gw = np.full(z.size, z[1]) * np.exp(-0.5 * z * z)
    a = rng.uniform(0.1, 50, size=8)
    j1sq = K.j1_numpy(np.multiply.outer(a, z)) ** 2
    idx = rng.integers(0, 8, size=2000)
    b = rng.uniform(0, 200, size=2000)
    yield "mmm_integrals (2000 x 4001 nodes)", \
        lambda f: f(j1sq, idx, b, z, gw), K.mmm_integrals_numpy, K.mmm_integrals_numba


PIPELINE = """
import time
from talbotlau.config import RunConfig
from talbotlau.macroscopicity import macroscopicity
from talbotlau import _kernels
cfg = RunConfig.default().with_overrides(["ensemble.velocity_nodes=12", "ensemble.mass_nodes=12",
                                          "macro.sigma_q_points=7"])
model = cfg.macro_model()
from talbotlau.synth import synth_dataset
ctx = model.context(cfg.setup().powers, cfg.ensemble().mass_center)
scans = synth_dataset(ctx, 1200, cfg.protocol(), cfg.noise(), seed=1, contrast_scale=cfg.contrast_scale)
t0 = time.perf_counter()
res = macroscopicity(scans, model, cfg.sigma_q_grid(), cfg.log_tau_grid(), cfg.quantile, convergence=False)
print(_kernels.BACKEND, f"{time.perf_counter() - t0:.2f}", f"{res.mu:.6f}")
"""


def run_pipeline():
    rows = []
    for disable in ("0", "1"):
        env = dict(os.environ, TALBOTLAU_DISABLE_NUMBA=disable)
        out = subprocess.run([sys.executable, "-c", PIPELINE], env=env, capture_output=True, text=True, check=True)
        rows.append(out.stdout.split())
    print("\nreduced macroscopicity run (includes numba compilation in the numba row)")
    for backend, secs, mu in rows:
        print(f"  {backend:6s} {float(secs):8.2f} s   mu = {mu}")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--pipeline", action="store_true", help="also time a reduced end-to-end run")
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba unavailable or disabled; only numpy timings are meaningful")
    rng = np.random.default_rng(0)
    print(f"{'kernel':50s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}  max rel diff")
    for name, call, f_np, f_nb in _cases(rng):
        t_np = _best(lambda: call(f_np), args.repeat)
        t_nb = _best(lambda: call(f_nb), args.repeat)
        a, b = call(f_np), call(f_nb)
        a = a[0] if isinstance(a, tuple) else a
        b = b[0] if isinstance(b, tuple) else b
        diff = np.max(np.abs(a - b) / np.maximum(np.abs(a), 1e-300))
        print(f"{name:50s} {t_np * 1e3:8.1f}ms {t_nb * 1e3:8.1f}ms {t_np / t_nb:7.1f}x  {diff:.1e}")
    if args.pipeline:
        run_pipeline()


if __name__ == "__main__":
    main()
