"""Hot numeric loops, compiled with numba when available.

Set ``TALBOTLAU_DISABLE_NUMBA=1`` to force the pure-numpy implementations.
Both variants are importable under explicit names (``*_numba`` /
``*_numpy``) so they can be compared; the unsuffixed names dispatch.
"""
import math
import os

import numpy as np
from scipy.special import sici

_DISABLED = os.environ.get("TALBOTLAU_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("numba disabled by TALBOTLAU_DISABLE_NUMBA")
    import ctypes
    from numba import njit
    from numba.extending import get_cython_function_address

    # scipy's sine/cosine integral, callable from compiled code
    _sici = ctypes.CFUNCTYPE(None, ctypes.c_double, ctypes.POINTER(ctypes.c_double),
                             ctypes.POINTER(ctypes.c_double))(
        get_cython_function_address("scipy.special.cython_special", "__pyx_fuse_1sici"))
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f

BACKEND = "numba" if HAVE_NUMBA else "numpy"

_MAX_ITER = 60
_TOL = 1e-11


# ---------------------------------------------------------------------------
# ensemble first-order coefficient under MMM damping


def damped_first_order_numpy(ws1, rates, inv_tau, chunk=256):
    """``|sum_k ws1[k] exp(-rates[s, k] * inv_tau[j])|`` -> shape ``(n_sigma, n_tau)``."""
    ws1 = np.asarray(ws1, dtype=complex)
    rates = np.atleast_2d(np.asarray(rates, dtype=float))
    inv_tau = np.asarray(inv_tau, dtype=float)
    out = np.empty((rates.shape[0], inv_tau.size))
    for s in range(rates.shape[0]):
        for j0 in range(0, inv_tau.size, chunk):
            it = inv_tau[j0:j0 + chunk]
            damp = np.exp(-np.multiply.outer(it, rates[s]))
            out[s, j0:j0 + chunk] = np.abs(damp @ ws1)
    return out


@njit(cache=True)
def _damped_first_order_jit(ws1_re, ws1_im, rates, inv_tau):
    n_sigma, n_nodes = rates.shape
    n_tau = inv_tau.shape[0]
    out = np.empty((n_sigma, n_tau))
    for s in range(n_sigma):
        for j in range(n_tau):
            it = inv_tau[j]
            acc_re = 0.0
            acc_im = 0.0
            for k in range(n_nodes):
                x = rates[s, k] * it
                if x < 745.0:
                    f = math.exp(-x)
                    acc_re += ws1_re[k] * f
                    acc_im += ws1_im[k] * f
            out[s, j] = math.hypot(acc_re, acc_im)
    return out


def damped_first_order_numba(ws1, rates, inv_tau):
    ws1 = np.asarray(ws1, dtype=complex)
    rates = np.ascontiguousarray(np.atleast_2d(np.asarray(rates, dtype=float)))
    inv_tau = np.ascontiguousarray(np.asarray(inv_tau, dtype=float))
    return _damped_first_order_jit(np.ascontiguousarray(ws1.real), np.ascontiguousarray(ws1.imag),
                                   rates, inv_tau)


# ---------------------------------------------------------------------------
# MMM z-integral: sum_z gw[z] j1sq[mass_index[k], z] f(b[k] z)
#
# f(x) = 1 - Si(x)/x = sum_{k>=1} (-1)^(k+1) x^(2k) / ((2k+1) (2k+1)!)

_F_SERIES = np.array([(-1) ** (k + 1) / ((2 * k + 1) * math.factorial(2 * k + 1)) for k in range(1, 9)])


def f_numpy(x):
    """``1 - Si(x)/x`` with a power series below 0.5."""
    x = np.abs(np.asarray(x, dtype=float))
    out = np.empty_like(x)
    small = x < 0.5
    x2 = x[small] ** 2
    acc = np.zeros_like(x2)
    for c in _F_SERIES[::-1]:
        acc = (acc + c) * x2
    out[small] = acc
    xl = x[~small]
    out[~small] = 1.0 - sici(xl)[0] / xl
    return out


def j1_numpy(x):
    """Spherical Bessel ``j1`` with a power series below 0.5."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < 0.5
    xs = x[small]
    q = -0.5 * xs * xs
    term = np.full(xs.shape, 1.0 / 3.0)
    total = term.copy()
    for k in range(1, 10):
        term = term * q / (k * (2 * k + 3))
        total += term
    out[small] = xs * total
    xl = x[~small]
    out[~small] = np.sin(xl) / xl**2 - np.cos(xl) / xl
    return out


def mmm_integrals_numpy(j1sq, mass_index, b, z, gw, chunk=64):
    out = np.empty(b.size)
    for i0 in range(0, b.size, chunk):
        sl = slice(i0, i0 + chunk)
        fz = f_numpy(np.multiply.outer(b[sl], z))
        out[sl] = np.einsum("kz,kz->k", j1sq[mass_index[sl]], fz * gw)
    return out


if HAVE_NUMBA:
    @njit  # not cacheable: holds a ctypes function pointer
    def _mmm_integrals_jit(j1sq, mass_index, b, z, gw, coef):
        si = np.empty(1)
        ci = np.empty(1)
        out = np.empty(b.shape[0])
        for k in range(b.shape[0]):
            row = j1sq[mass_index[k]]
            acc = 0.0
            for i in range(z.shape[0]):
                x = b[k] * z[i]
                if x < 0.5:
                    x2 = x * x
                    f = 0.0
                    for c in coef[::-1]:
                        f = (f + c) * x2
                else:
                    _sici(x, si.ctypes, ci.ctypes)
                    f = 1.0 - si[0] / x
                acc += gw[i] * row[i] * f
            out[k] = acc
        return out

    def mmm_integrals_numba(j1sq, mass_index, b, z, gw):
        return _mmm_integrals_jit(np.ascontiguousarray(j1sq, dtype=float),
                                  np.ascontiguousarray(mass_index, dtype=np.int64),
                                  np.ascontiguousarray(np.abs(b), dtype=float),
                                  np.ascontiguousarray(z, dtype=float),
                                  np.ascontiguousarray(gw, dtype=float), _F_SERIES)
else:
    mmm_integrals_numba = mmm_integrals_numpy


# ---------------------------------------------------------------------------
# Poisson sinusoid profile likelihood
#
# lambda_i = T_i * (r * (1 + V cos(theta_i - phi)) + dark), maximised over
# (r, phi) for each V on a grid.  Returns sum(c log lambda - lambda); the
# log(c!) constant is added by the caller.


def _initial_guess(theta, dwell, counts, dark):
    y = counts / dwell
    design = np.column_stack([np.ones_like(theta), np.cos(theta), np.sin(theta)])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    r0 = max(coef[0] - dark, 1e-3 * max(coef[0], 1e-12), 1e-12)
    phi = math.atan2(coef[2], coef[1])
    return r0, phi


@njit(cache=True)
def _loglike_point(theta, dwell, counts, dark, V, r, phi):
    total = 0.0
    for i in range(theta.shape[0]):
        lam = dwell[i] * (r * (1.0 + V * math.cos(theta[i] - phi)) + dark)
        if lam <= 0.0:
            if counts[i] > 0:
                return -np.inf
            continue
        total += counts[i] * math.log(lam) - lam
    return total


@njit(cache=True)
def _profile_one(theta, dwell, counts, dark, V, r, phi):
    ll = _loglike_point(theta, dwell, counts, dark, V, r, phi)
    for _ in range(_MAX_ITER):
        g_r = 0.0
        g_p = 0.0
        h_rr = 0.0
        h_rp = 0.0
        h_pp = 0.0
        for i in range(theta.shape[0]):
            cs = math.cos(theta[i] - phi)
            sn = math.sin(theta[i] - phi)
            g = 1.0 + V * cs
            gp = V * sn
            gpp = -V * cs
            lam = dwell[i] * (r * g + dark)
            if lam <= 0.0:
                lam = 1e-300
            w = counts[i] / lam
            dr = dwell[i] * g
            dp = dwell[i] * r * gp
            g_r += (w - 1.0) * dr
            g_p += (w - 1.0) * dp
            h_rr -= w / lam * dr * dr
            h_rp += -w / lam * dr * dp + (w - 1.0) * dwell[i] * gp
            h_pp += -w / lam * dp * dp + (w - 1.0) * dwell[i] * r * gpp
        det = h_rr * h_pp - h_rp * h_rp
        if V * r > 1e-14 and h_rr < 0.0 and det > 0.0:
            step_r = -(h_pp * g_r - h_rp * g_p) / det
            step_p = -(-h_rp * g_r + h_rr * g_p) / det
        else:
            step_r = -g_r / h_rr if h_rr < 0.0 else 0.0
            step_p = 0.0
            if V * r > 1e-14 and h_pp < 0.0:
                step_p = -g_p / h_pp
        t = 1.0
        improved = False
        for _ls in range(60):
            r_new = r + t * step_r
            p_new = phi + t * step_p
            if r_new > 0.0:
                ll_new = _loglike_point(theta, dwell, counts, dark, V, r_new, p_new)
                if ll_new >= ll - 1e-12 * abs(ll):
                    improved = True
                    break
            t *= 0.5
        if not improved:
            break
        converged = abs(t * step_r) <= _TOL * (abs(r) + 1e-300) and abs(t * step_p) <= 1e-10
        r = r_new
        phi = p_new
        ll = ll_new
        if converged:
            break
    return ll, r, phi


@njit(cache=True)
def _profile_grid_jit(theta, dwell, counts, dark, v_grid, r_init, phi_init):
    n = v_grid.shape[0]
    ll = np.empty(n)
    r_hat = np.empty(n)
    phi_hat = np.empty(n)
    r = r_init
    phi = phi_init
    for j in range(n):
        a, r, phi = _profile_one(theta, dwell, counts, dark, v_grid[j], r, phi)
        ll[j] = a
        r_hat[j] = r
        phi_hat[j] = phi
    return ll, r_hat, phi_hat


def profile_grid_numba(theta, dwell, counts, dark, v_grid):
    theta = np.ascontiguousarray(theta, dtype=float)
    dwell = np.ascontiguousarray(dwell, dtype=float)
    counts = np.ascontiguousarray(counts, dtype=float)
    v_grid = np.ascontiguousarray(v_grid, dtype=float)
    r0, phi = _initial_guess(theta, dwell, counts, dark)
    return _profile_grid_jit(theta, dwell, counts, float(dark), v_grid, r0, phi)


def _loglike_vec(theta, dwell, counts, dark, V, r, phi):
    lam = dwell * (r[:, None] * (1.0 + V[:, None] * np.cos(theta - phi[:, None])) + dark)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(lam > 0, counts * np.log(np.where(lam > 0, lam, 1.0)) - lam,
                         np.where(counts > 0, -np.inf, 0.0))
    return terms.sum(axis=1)


def profile_grid_numpy(theta, dwell, counts, dark, v_grid):
    """Same contract as the compiled version, vectorised across the V grid."""
    theta = np.asarray(theta, dtype=float)
    dwell = np.asarray(dwell, dtype=float)
    counts = np.asarray(counts, dtype=float)
    V = np.asarray(v_grid, dtype=float)
    r0, phi0 = _initial_guess(theta, dwell, counts, dark)
    r = np.full(V.shape, r0)
    phi = np.full(V.shape, phi0)
    ll = _loglike_vec(theta, dwell, counts, dark, V, r, phi)
    active = np.ones(V.shape, dtype=bool)
    for _ in range(_MAX_ITER):
        if not active.any():
            break
        cs = np.cos(theta - phi[:, None])
        sn = np.sin(theta - phi[:, None])
        g = 1.0 + V[:, None] * cs
        gp = V[:, None] * sn
        gpp = -V[:, None] * cs
        lam = dwell * (r[:, None] * g + dark)
        lam = np.where(lam > 0, lam, 1e-300)
        w = counts / lam
        dr = dwell * g
        dp = dwell * r[:, None] * gp
        g_r = ((w - 1) * dr).sum(1)
        g_p = ((w - 1) * dp).sum(1)
        h_rr = -(w / lam * dr * dr).sum(1)
        h_rp = (-w / lam * dr * dp + (w - 1) * dwell * gp).sum(1)
        h_pp = (-w / lam * dp * dp + (w - 1) * dwell * r[:, None] * gpp).sum(1)
        det = h_rr * h_pp - h_rp**2
        full = (V * r > 1e-14) & (h_rr < 0) & (det > 0)
        safe_det = np.where(full, det, 1.0)
        step_r = np.where(full, -(h_pp * g_r - h_rp * g_p) / safe_det,
                          np.where(h_rr < 0, -g_r / np.where(h_rr < 0, h_rr, -1.0), 0.0))
        diag_p = np.where((V * r > 1e-14) & (h_pp < 0), -g_p / np.where(h_pp < 0, h_pp, -1.0), 0.0)
        step_p = np.where(full, -(-h_rp * g_r + h_rr * g_p) / safe_det, diag_p)
        t = np.ones(V.shape)
        accepted = np.zeros(V.shape, dtype=bool)
        r_new = r.copy()
        p_new = phi.copy()
        ll_new = ll.copy()
        for _ls in range(60):
            pending = active & ~accepted
            if not pending.any():
                break
            rr = np.where(pending, r + t * step_r, r)
            pp = np.where(pending, phi + t * step_p, phi)
            ok_r = rr > 0
            cand = _loglike_vec(theta, dwell, counts, dark, V, np.where(ok_r, rr, r), pp)
            good = pending & ok_r & (cand >= ll - 1e-12 * np.abs(ll))
            r_new = np.where(good, rr, r_new)
            p_new = np.where(good, pp, p_new)
            ll_new = np.where(good, cand, ll_new)
            accepted |= good
            t = np.where(pending & ~good, 0.5 * t, t)
        moved = accepted & active
        converged = (np.abs(t * step_r) <= _TOL * np.abs(r)) & (np.abs(t * step_p) <= 1e-10)
        r = np.where(moved, r_new, r)
        phi = np.where(moved, p_new, phi)
        ll = np.where(moved, ll_new, ll)
        active = moved & ~converged
    return ll, r, phi


if HAVE_NUMBA:
    damped_first_order = damped_first_order_numba
    profile_grid = profile_grid_numba
    mmm_integrals = mmm_integrals_numba
else:
    damped_first_order = damped_first_order_numpy
    profile_grid = profile_grid_numpy
    mmm_integrals = mmm_integrals_numpy
