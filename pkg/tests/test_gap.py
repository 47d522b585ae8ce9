import numpy as np
import pytest

from hdflow import gap
from hdflow.core import RngStream
from hdflow.diffusion import make_schedule

SCHED = make_schedule()


def _brute_force_gap(w, alpha_bar, rng, n):
    """Self-normalised importance weights and the linearised guidance, written out loop-free but plainly."""
    s = np.sqrt(1 - alpha_bar)
    eps = rng.normal(size=(n, len(w)))
    e = eps @ w
    p = np.exp(-e)
    bayes = -(p[:, None] * eps).sum(0) / p.sum() / s
    linear = -(e[:, None] * eps).mean(0) / s
    return np.linalg.norm(bayes - linear)


def test_exact_gap_families():
    w = np.array([0.3, 0.4])
    assert gap.exact_gap(w, 0.75) == pytest.approx(2 * 0.5 / 0.5)
    assert gap.exact_gap(w, 0.75, "plain") == pytest.approx(1.0)
    with pytest.raises(ValueError):
        gap.exact_gap(w, 0.5, "cubic")


@pytest.mark.parametrize("energy", ["whitened", "plain"])
def test_constant_energy_has_no_gap(energy):
    est, se = gap.guidance_gap(np.zeros(8), 0.5, RngStream(0), 10_000, energy)
    assert est == 0.0 and se == 0.0


def test_estimate_matches_closed_form_and_brute_force():
    w = 0.05 * np.where(RngStream(1).uniform(size=16) < 0.5, -1.0, 1.0)
    a = float(SCHED.abar(300))
    est, se = gap.guidance_gap(w, a, RngStream(2), 100_000)
    exact = gap.exact_gap(w, a)
    assert abs(est - exact) < 4 * se + 0.02 * exact
    assert abs(_brute_force_gap(w, a, RngStream(3), 200_000) - exact) < 0.05 * exact


def test_loglog_slope_exact_power_law():
    d = np.array([4, 16, 64, 256])
    assert gap.loglog_slope(d, 3.0 * d**0.5) == pytest.approx(0.5, abs=1e-12)


def test_experiment_slope_and_step_dependence():
    steps = [100, 250, 400, 550, 700]
    rows, slope = gap.guidance_gap_experiment([4, 16, 64, 256], steps, SCHED, RngStream(4), n_samples=20_000)
    assert 0.4 <= slope <= 0.6
    for d in (4, 256):
        sub = [r for r in rows if r.d == d]
        scaled = [r.delta_ebm * np.sqrt(1 - r.alpha_bar) for r in sub]
        assert max(scaled) / min(scaled) < 1.15


def test_precision_guard():
    with pytest.raises(gap.MonteCarloPrecisionError):
        gap.guidance_gap_experiment([4], [500], SCHED, RngStream(5), weight_scale=2.0, n_samples=200)


def test_csv_round_trip_and_errors(tmp_path):
    rows, _ = gap.guidance_gap_experiment([4, 16], [200], SCHED, RngStream(6), n_samples=2_000, max_rel_ci=1.0)
    path = tmp_path / "gap.csv"
    gap.write_gap_csv(rows, path)
    back = gap.read_gap_csv(path)
    assert [(r.d, r.step, r.delta_ebm) for r in back] == [(r.d, r.step, r.delta_ebm) for r in rows]
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(ValueError):
        gap.read_gap_csv(tmp_path / "empty.csv")
    (tmp_path / "bad.csv").write_text("d,l,alpha_bar,delta_ebm,stderr\n4,200,0.5,x,0.1\n")
    with pytest.raises(ValueError, match="row 2"):
        gap.read_gap_csv(tmp_path / "bad.csv")
