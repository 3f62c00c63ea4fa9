import math

import numpy as np
import pytest

try:
    import _sprune as sp
except ImportError:  # installed wheel layout
    import sprune as sp


def test_pi_star_matches_interior_formula():
    gamma = 0.01
    prior = sp.flattening_prior(gamma)
    theta = 0.4
    expected = gamma * theta / (1.0 + theta * (gamma - 1.0))
    assert sp.pi_star(prior, theta) == pytest.approx(expected, abs=1e-12)
    assert sp.pi_star(prior, 0.0) == pytest.approx(1e-4, abs=1e-15)


def test_pi_star_closed_form_agrees_with_numeric():
    for prior in (sp.flattening_prior(0.1), sp.beta_prior(0.9, 10.0)):
        for theta in (0.05, 0.3, 0.7, 0.95):
            assert sp.pi_star(prior, theta) == pytest.approx(
                sp.pi_star_numeric(prior, theta), abs=1e-7
            )


def test_reg_term_is_flat_between_thresholds():
    gamma = 0.01
    prior = sp.flattening_prior(gamma)
    t1, t2 = sp.gate_thresholds(prior)
    mid = np.linspace(t1 * 1.01, min(t2, 1.0 - 1e-4) * 0.99, 50)
    for theta in mid:
        assert sp.reg_term(prior, float(theta)) == pytest.approx(
            -math.log(gamma), abs=1e-9
        )


def test_prior_pdf_integrates_to_one():
    prior = sp.flattening_prior(0.02)
    grid = np.linspace(0.0, 1.0, 20001)
    vals = np.array([sp.prior_pdf(prior, float(p)) for p in grid])
    assert np.trapezoid(vals, grid) == pytest.approx(1.0, abs=1e-6)


def test_synth_blobs_shapes_and_determinism():
    x1, y1 = sp.synth_blobs(3, 5, 10, seed=42)
    x2, y2 = sp.synth_blobs(3, 5, 10, seed=42)
    assert x1.shape == (5, 30)
    assert y1.shape == (3, 30)
    assert np.array_equal(x1, x2)
    assert np.array_equal(y1, y2)
    assert np.array_equal(y1.sum(axis=0), np.ones(30))


def test_training_learns_and_prunes():
    ax, ay = sp.synth_blobs(3, 8, 250, seed=5)
    x, y = ax[:, :600], ay[:, :600]
    tx, ty = ax[:, 600:], ay[:, 600:]
    cfg = sp.TrainConfig()
    cfg.lam = 0.5
    cfg.lr = 2e-3
    cfg.prior = sp.flattening_prior(math.exp(-3.0))
    cfg.drop_after = 100
    cfg.seed = 3
    t = sp.Trainer(8, [24], 3, cfg)
    first = t.run_epoch(x, y, tx, ty, 1)
    last = first
    for e in range(2, 13):
        last = t.run_epoch(x, y, tx, ty, e)
    assert last["accuracy"] > 0.9
    assert last["alive_units"] < 24

    t.finalize()
    loss0, acc0 = t.evaluate(tx, ty)
    out1 = t.forward(tx)
    out2 = t.forward(tx)
    assert np.array_equal(out1, out2)
    t.fine_tune(x, y)
    loss1, acc1 = t.evaluate(tx, ty)
    assert acc1 >= acc0 - 0.05
    assert t.prune_percent() > 0.0
    assert sum(t.hidden_sizes()) == last["alive_units"]


def test_stability_and_lyapunov():
    assert sp.stability_check(1.0, 2.0, 1.0, 0.05)
    assert not sp.stability_check(1.0, 2.0, 1.0, 0.0)
    v = sp.lyapunov_v(np.ones(3), np.zeros(2), 0.05, 0.05)
    assert v == pytest.approx(1.5)
