"""Independent reference computations the package is checked against."""

import math

import numpy as np


def naive_mlp(widths, flat, x, activation="silu"):
    """Loop-by-loop MLP evaluation reading the flat parameter layout directly."""
    act = {"tanh": math.tanh, "silu": lambda v: v / (1.0 + math.exp(-v))}[activation]
    h = [float(v) for v in x]
    i = 0
    for li, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        W = [[flat[i + r * b + c] for c in range(b)] for r in range(a)]
        i += a * b
        bias = flat[i : i + b]
        i += b
        out = [sum(h[r] * W[r][c] for r in range(a)) + bias[c] for c in range(b)]
        last = li == len(widths) - 2
        h = out if last else [act(v) for v in out]
    return np.array(h)


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of the scalar function ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def sin_cos_table(t, dim, max_period):
    out = []
    for i in range(dim // 2):
        f = max_period ** (i / (dim // 2))
        out += [math.sin(t * f), math.cos(t * f)]
    return np.array(out)


def linear_betas(L, lo, hi):
    return [lo + (hi - lo) * i / (L - 1) for i in range(L)]


def alpha_bar_product(betas, l):
    p = 1.0
    for b in betas[:l]:
        p *= 1.0 - b
    return p
