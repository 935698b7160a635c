import numpy as np
import pytest

from conftest import make_free_problem, make_linear_problem
from trsoc import autodiff as ad
from trsoc import driver
from trsoc.driver import RunConfig, outer_step, run
from trsoc.trustregion import AnnealingState, DiscreteMeasure, beta_from_lambdas, discrete_tr_step


def small(**kw):
    base = dict(problem="lqr-easy", dim=1, loss="tr-lv", net="tiny", buffer_size=64, inner_steps=4, batch=16,
                steps=10, eval_samples=64, max_outer=4)
    base.update(kw)
    return RunConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError, match="epsilon"):
        RunConfig(epsilon=-1.0).validate()
    with pytest.raises(ValueError, match="loss"):
        RunConfig(loss="tr-foo").validate()
    with pytest.raises(ValueError, match="unknown"):
        RunConfig.from_dict({"nope": 1})
    cfg = small(seed=3)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


def test_prior_is_target_stops_after_one_iteration():
    rep = run(small(), problem=make_free_problem(1))
    assert rep.lambdas == [0.0] and rep.iterations == 1
    assert rep.termination == "converged" and rep.betas == [1.0]


def test_outer_step_follows_discrete_geometric_path(rng):
    # On a finite space the outer loop with exact inner solves is the discrete trust-region step.
    q0 = rng.dirichlet(np.ones(8))
    rho = rng.gamma(1.0, size=8)
    target = rho / rho.sum()
    m = DiscreteMeasure(q0, rho)
    state = AnnealingState(0.1, delta=1e-6)
    lams = []
    for _ in range(50):
        logw = np.log(target) - np.log(m.q)
        # importance sample exactly: weight each atom by its probability via repetition
        counts = np.round(m.q * 200_000).astype(int)
        step = outer_step(np.repeat(logw, counts), state)
        m_next, lam = discrete_tr_step(m, 0.1)
        assert step.lam == pytest.approx(lam, rel=2e-2, abs=1e-4)
        state, m = step.state, m_next
        lams.append(lam)
        if step.done:
            break
    assert step.done
    beta = beta_from_lambdas(lams)
    geo = q0 ** (1 - beta) * target**beta
    np.testing.assert_allclose(m.q, geo / geo.sum(), atol=1e-6)


def test_no_trust_region_sets_lambda_zero():
    rep = run(small(trust_region=False, max_outer=2))
    assert rep.lambdas == [0.0, 0.0]
    assert rep.termination == "completed max_outer iterations"


def test_betas_monotone_and_match_product():
    rep = run(small(max_outer=5, problem="lqr-hard"))
    assert np.all(np.diff(rep.betas) >= 0)
    for i in range(len(rep.betas)):
        assert rep.betas[i] == pytest.approx(beta_from_lambdas(rep.lambdas[: i + 1]), abs=1e-12)
    assert rep.target_evals > 0


def test_metrics_are_deterministic(tmp_path):
    cfg = small(loss="tr-socm", max_outer=3)
    run(cfg, tmp_path / "a")
    run(cfg, tmp_path / "b")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "last.ckpt").exists()


@pytest.mark.parametrize("loss", ["tr-lv", "tr-ce", "tr-moment", "tr-socm"])
def test_every_loss_runs(loss):
    rep = run(small(loss=loss, max_outer=2), problem=make_linear_problem(1, q=1.0))
    assert rep.iterations == 2 and np.isfinite(rep.final["dlogz"] if "dlogz" in rep.final else 0.0)
    assert (rep.log_z_param is not None) == (loss == "tr-moment")


def _nan_loss(*a, **k):
    return ad.Tensor(np.array(np.nan))


def test_divergence_twice_aborts(monkeypatch):
    monkeypatch.setattr(driver, "evaluate", _nan_loss)
    rep = run(small(max_outer=3), problem=make_linear_problem(1, q=1.0))
    assert rep.termination.startswith("diverged")
    fresh = driver.ControlNet(1, eta=1.0, T=1.0, seed=0, **driver.PRESETS["tiny"])
    np.testing.assert_array_equal(rep.net.get_flat(), fresh.get_flat())


def test_divergence_once_halves_learning_rate(monkeypatch):
    real = driver.evaluate
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        return _nan_loss() if calls["n"] == 1 else real(*a, **k)

    seen = []
    real_adam = driver.Adam

    def spy(params, lr, clip):
        seen.append(lr)
        return real_adam(params, lr=lr, clip=clip)

    monkeypatch.setattr(driver, "evaluate", flaky)
    monkeypatch.setattr(driver, "Adam", spy)
    rep = run(small(max_outer=2, lr=1e-3), problem=make_linear_problem(1, q=1.0))
    assert seen == [1e-3, 5e-4]
    assert not rep.termination.startswith("diverged")
