import pytest

from typeaware.gradcheck import check_gradients, random_problem, relative_error, run_suite
from typeaware.model import PROJECTION_KINDS, SCORE_MODES


def test_relative_error_floor():
    assert relative_error(0.0, 1e-9) == pytest.approx(1e-3)
    assert relative_error(2.0, 1.0) == 0.5


def test_configs_cover_every_flag():
    seen = set()
    for index in range(24):
        h, _, _ = random_problem(index, 0)
        seen |= {("proj", h.projection), ("score", h.score_mode), ("vse", h.use_vse),
                 ("sim", h.use_sim), ("k", h.sharing_ratio)}
    want = {("proj", k) for k in PROJECTION_KINDS} | {("score", m) for m in SCORE_MODES}
    want |= {("vse", b) for b in (True, False)} | {("sim", b) for b in (True, False)} | {("k", 1), ("k", 2)}
    assert want <= seen


def test_suite_is_deterministic():
    a, b = run_suite(3, n_configs=4), run_suite(3, n_configs=4)
    assert (a.max_rel_error, a.checked, a.skipped_at_kinks) == (b.max_rel_error, b.checked, b.skipped_at_kinks)


def test_worst_config_of_seed_3_is_truncation_not_a_bug():
    # this config has a steep cosine term; the finite-difference error
    # shrinks like h**2, which an analytic mistake would not do
    hyper, params, batch = random_problem(23, 3)
    coarse, *_ = check_gradients(params, batch, hyper, h=1e-5)
    fine, *_ = check_gradients(params, batch, hyper, h=1e-6)
    assert fine < coarse / 20
    assert fine < 1e-5


def test_detects_a_wrong_gradient(monkeypatch):
    import typeaware.gradcheck as gc

    real = gc.loss_gradients

    def broken(params, batch, hyper):
        br, grads = real(params, batch, hyper)
        grads["theta.0.W"] = grads["theta.0.W"] * 1.01
        return br, grads

    monkeypatch.setattr(gc, "loss_gradients", broken)
    hyper, params, batch = random_problem(0, 0)
    err, *_ = check_gradients(params, batch, hyper)
    assert err > 1e-3
