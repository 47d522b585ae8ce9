"""Monte Carlo measurement of the energy-guidance gap on an analytic Gaussian family.

At diffusion step ``l`` the clean sample given the noisy one is modelled as
``z0 = m + s * eps`` with ``s = sqrt(1 - alpha_bar)`` and ``eps ~ N(0, I)``.
Two guidance vectors are compared:

* exponential weighting (the Bayes-correct one):
  ``-(1/s) * E[exp(-E(z0)) eps] / E[exp(-E(z0))]``
* linear weighting (what a learned energy gradient approximates):
  ``-(1/s) * E[E(z0) eps]``

The gap is the Euclidean norm of their difference. For a linear energy in
whitened coordinates, ``E(z0) = <w, (z0 - m) / s>``, the exact gap is
``2 ||w|| / s``; for a plain linear energy ``<w, z0>`` it is ``2 ||w||``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import RngStream
from .diffusion import NoiseSchedule


class MonteCarloPrecisionError(RuntimeError):
    pass


@dataclass
class GapRow:
    d: int
    step: int
    alpha_bar: float
    delta_ebm: float
    stderr: float
    exact: float


def exact_gap(w: np.ndarray, alpha_bar: float, energy: str = "whitened") -> float:
    s = np.sqrt(1.0 - alpha_bar)
    if energy == "whitened":
        return float(2.0 * np.linalg.norm(w) / s)
    if energy == "plain":
        return float(2.0 * np.linalg.norm(w))
    raise ValueError(f"unknown energy family {energy!r}")


def _gap_estimate(w, m, s, base, energy):
    """Gap vector from antithetic pairs ``eps = +-base``, summed pairwise so a constant energy gives exactly 0."""
    if energy == "whitened":
        e_pos, e_neg = base @ w, -(base @ w)
    else:
        e_pos, e_neg = (m + s * base) @ w, (m - s * base) @ w
    top = max(-e_pos.min(), -e_neg.min())
    p_pos, p_neg = np.exp(-e_pos - top), np.exp(-e_neg - top)
    true = -((p_pos - p_neg) @ base) / (p_pos.sum() + p_neg.sum()) / s
    approx = -((e_pos - e_neg) @ base) / (2 * len(base)) / s
    return true - approx


def guidance_gap(w, alpha_bar: float, rng: RngStream, n_samples: int = 100_000, energy: str = "whitened",
                 n_batches: int = 20) -> tuple[float, float]:
    """Monte Carlo gap and its standard error (batch means over antithetic pairs)."""
    w = np.asarray(w, dtype=np.float64)
    d = w.shape[0]
    s = np.sqrt(1.0 - alpha_bar)
    z_l = rng.normal(size=d)
    m = np.sqrt(alpha_bar) * z_l
    base = rng.normal(size=(n_samples // 2, d))  # antithetic pairs: the sample mean of eps is exactly 0
    diff = _gap_estimate(w, m, s, base, energy)
    est = float(np.linalg.norm(diff))
    if n_batches < 2:
        return est, 0.0
    per = [
        np.linalg.norm(_gap_estimate(w, m, s, b, energy))
        for b in np.array_split(base, n_batches)
    ]
    stderr = float(np.std(per, ddof=1) / np.sqrt(n_batches))
    return est, stderr


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def guidance_gap_experiment(dims, steps, sched: NoiseSchedule, rng: RngStream, weight_scale: float = 0.05,
                            n_samples: int = 100_000, energy: str = "whitened",
                            max_rel_ci: float = 0.10) -> tuple[list[GapRow], float]:
    """Gap table over ``dims x steps`` and the fitted log-log slope against ``d``.

    The slope is fitted per step and averaged. Each per-dimension weight has
    magnitude ``weight_scale`` with a random sign.
    """
    rows = []
    for i, d in enumerate(dims):
        r = rng.child(i)
        w = weight_scale * np.where(r.uniform(size=d) < 0.5, -1.0, 1.0)
        for j, l in enumerate(steps):
            sched.check_step(l)
            a = float(sched.abar(l))
            est, se = guidance_gap(w, a, r.child(j), n_samples, energy)
            if est > 0 and 1.96 * se > max_rel_ci * est:
                raise MonteCarloPrecisionError(f"CI too wide at d={d}, l={l}: {est:.4g} +- {1.96 * se:.3g}")
            rows.append(GapRow(int(d), int(l), a, est, se, exact_gap(w, a, energy)))
    slopes = []
    for l in steps:
        sub = [row for row in rows if row.step == l]
        if all(row.delta_ebm > 0 for row in sub) and len(sub) > 1:
            slopes.append(loglog_slope([row.d for row in sub], [row.delta_ebm for row in sub]))
    slope = float(np.mean(slopes)) if slopes else float("nan")
    return rows, slope


def write_gap_csv(rows: list[GapRow], path) -> None:
    with open(Path(path), "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["d", "l", "alpha_bar", "delta_ebm", "stderr"])
        for r in rows:
            wr.writerow([r.d, r.step, f"{r.alpha_bar:.17g}", f"{r.delta_ebm:.17g}", f"{r.stderr:.17g}"])


def read_gap_csv(path) -> list[GapRow]:
    rows = []
    with open(Path(path), newline="") as f:
        rd = csv.DictReader(f)
        if rd.fieldnames is None:
            raise ValueError(f"{path}: empty CSV")
        for k, rec in enumerate(rd, start=2):
            try:
                rows.append(GapRow(int(rec["d"]), int(rec["l"]), float(rec["alpha_bar"]), float(rec["delta_ebm"]),
                                   float(rec["stderr"]), float("nan")))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: malformed row {k}: {exc}") from exc
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return rows
