import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embedlab import survival as sv
from embedlab.exceptions import (
    DataError,
    DegenerateCovariate,
    DegenerateHorizon,
    DegenerateTest,
    NonConvergenceWarning,
)
from embedlab.metrics import auroc

import oracles


def _exp_data(seed, n=2000, beta=np.log(2), cens_hi=3.5):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 2, n).astype(float)
    T = rng.exponential(1.0 / np.exp(beta * x))
    C = rng.uniform(0, cens_hi, n)
    return x[:, None], np.minimum(T, C), T <= C


# -- Kaplan-Meier -----------------------------------------------------------


def test_km_worked_example():
    km = sv.kaplan_meier([1, 2, 3], [1, 1, 0])
    ref = oracles.km_by_hand([1, 2, 3], [1, 1, 0])
    for t in (1, 2, 3):
        assert km(t) == pytest.approx(float(ref[t]), abs=1e-15)
    assert [km(1), km(2), km(3)] == pytest.approx([2 / 3, 1 / 3, 1 / 3])
    assert km(0.5) == 1.0


def test_km_single_censored_is_one():
    km = sv.kaplan_meier([4.0], [0])
    assert km(0.1) == 1.0 and km(4.0) == 1.0 and km(100.0) == 1.0
    assert km.variance.tolist() == [0.0]


def test_km_uncensored_is_empirical_survivor():
    t = np.random.default_rng(0).exponential(size=40)
    km = sv.kaplan_meier(t, np.ones(40, bool))
    for s in t:
        assert km(s) == pytest.approx(np.mean(t > s), abs=1e-12)


def test_km_nonpositive_time_rejected():
    with pytest.raises(DataError):
        sv.kaplan_meier([0.0, 1.0], [1, 1])
    with pytest.raises(DataError):
        sv.kaplan_meier([-1.0], [1])


def test_km_greenwood_matches_formula():
    t = [1, 2, 2, 3, 4, 5]
    e = [1, 1, 0, 1, 0, 1]
    km = sv.kaplan_meier(t, e)
    # at t=3: S = (5/6)(4/5)(2/3); sum d/(n(n-d)) = 1/30 + 1/20 + 1/6
    idx = km.times.tolist().index(3)
    S = 5 / 6 * 4 / 5 * 2 / 3
    assert km.survival[idx] == pytest.approx(S)
    assert km.variance[idx] == pytest.approx(S**2 * (1 / 30 + 1 / 20 + 1 / 6))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 15), st.booleans()), min_size=1, max_size=30))
def test_km_properties_against_fractions(recs):
    t = [r[0] for r in recs]
    e = [r[1] for r in recs]
    km = sv.kaplan_meier(t, e)
    ref = oracles.km_by_hand(t, e)
    s = km.survival
    assert np.all((s >= 0) & (s <= 1))
    assert np.all(np.diff(s) <= 1e-15)
    for time, frac in ref.items():
        assert km(time) == pytest.approx(float(frac), abs=1e-12)
        # right-continuous: value just after a step equals value at it
        assert km(time + 1e-9) == km(time)


# -- log-rank ---------------------------------------------------------------


def test_logrank_identical_groups():
    t = np.random.default_rng(1).exponential(size=30)
    e = np.arange(30) % 3 != 0
    chi2, p = sv.log_rank(t, e, t, e)
    assert chi2 == 0.0 and p == 1.0


def test_logrank_symmetric():
    rng = np.random.default_rng(2)
    ta, tb = rng.exponential(size=25), rng.exponential(2, size=30)
    ea, eb = rng.random(25) < 0.8, rng.random(30) < 0.8
    assert sv.log_rank(ta, ea, tb, eb)[0] == pytest.approx(sv.log_rank(tb, eb, ta, ea)[0], rel=1e-12)


def test_logrank_disjoint_supports():
    ta = np.linspace(1, 2, 20)
    tb = np.linspace(3, 4, 20)
    chi2, p = sv.log_rank(ta, np.ones(20, bool), tb, np.ones(20, bool))
    assert p < 0.01
    # p is the 1-df chi-square tail
    from scipy.stats import chi2 as chi2_dist

    assert p == pytest.approx(chi2_dist.sf(chi2, 1), rel=1e-10)


def test_logrank_no_events():
    with pytest.raises(DegenerateTest):
        sv.log_rank([1, 2], [0, 0], [3], [0])


def test_logrank_matches_explicit_formula():
    ta, ea = [1, 3, 4, 6], [1, 1, 0, 1]
    tb, eb = [2, 3, 5], [1, 1, 1]
    # (O - E) and variance summed by hand over event times 1,2,3,5,6
    OmE, V = 0.0, 0.0
    allt = sorted(set(ta + tb))
    for t in allt:
        na = sum(u >= t for u in ta)
        nb = sum(u >= t for u in tb)
        da = sum(u == t and x for u, x in zip(ta, ea))
        db = sum(u == t and x for u, x in zip(tb, eb))
        n, d = na + nb, da + db
        if d == 0:
            continue
        OmE += da - d * na / n
        if n > 1:
            V += d * (na / n) * (1 - na / n) * (n - d) / (n - 1)
    chi2, _ = sv.log_rank(ta, ea, tb, eb)
    assert chi2 == pytest.approx(OmE**2 / V, rel=1e-12)


# -- Cox --------------------------------------------------------------------


def test_cox_recovers_log2():
    X, t, e = _exp_data(0)
    assert 0.75 <= e.mean() <= 0.85
    res = sv.cox_fit(X, t, e)
    assert res.converged
    assert 0.55 <= res.coef[0] <= 0.85
    assert res.hazard_ratios[0] == pytest.approx(np.exp(res.coef[0]))
    assert res.ci_lower[0] < res.hazard_ratios[0] < res.ci_upper[0]


def test_cox_constant_covariate():
    with pytest.raises(DegenerateCovariate):
        sv.cox_fit(np.ones((10, 1)), np.arange(1, 11), np.ones(10, bool))


def test_cox_loglik_history_nondecreasing():
    X, t, e = _exp_data(1, n=300)
    X = np.column_stack([X, np.random.default_rng(1).normal(size=300)])
    res = sv.cox_fit(X, t, e)
    h = np.array(res.log_likelihood_history)
    assert np.all(np.diff(h) >= 0)
    assert res.n_iter <= 50


def test_cox_loglik_matches_explicit_risk_sets():
    X, t, e = _exp_data(2, n=60)
    for beta in (-0.3, 0.0, 0.8):
        ll, _, _ = sv.cox_partial_likelihood(X, t, e, [beta])
        assert ll == pytest.approx(oracles.cox_loglik_breslow(X[:, 0], t, e, beta), rel=1e-10)


def test_efron_ties_against_explicit_formula():
    rng = np.random.default_rng(3)
    t = rng.integers(1, 6, 40).astype(float)
    e = rng.random(40) < 0.7
    x = rng.normal(size=40)
    for beta in (-0.5, 0.4):
        ll, _, _ = sv.cox_partial_likelihood(x[:, None], t, e, [beta], ties="efron")
        assert ll == pytest.approx(oracles.cox_loglik_efron(list(x), list(t), list(e), beta), rel=1e-10)
        llb, _, _ = sv.cox_partial_likelihood(x[:, None], t, e, [beta], ties="breslow")
        assert llb == pytest.approx(oracles.cox_loglik_breslow(x, t, e, beta), rel=1e-10)


def test_efron_equals_breslow_without_ties():
    X, t, e = _exp_data(4, n=200)
    a = sv.cox_fit(X, t, e, ties="breslow")
    b = sv.cox_fit(X, t, e, ties="efron")
    assert a.coef[0] == pytest.approx(b.coef[0], abs=1e-10)


def test_cox_score_and_hessian_finite_differences():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(50, 2))
    t = rng.integers(1, 8, 50).astype(float)
    e = rng.random(50) < 0.8
    for ties in ("breslow", "efron"):
        beta = np.array([0.3, -0.2])
        _, g, H = sv.cox_partial_likelihood(X, t, e, beta, ties=ties)
        num = oracles.central_gradient(lambda b: sv.cox_partial_likelihood(X, t, e, b, ties=ties)[0], beta)
        assert oracles.rel_err(g, num) < 1e-6
        numH = np.vstack([
            oracles.central_gradient(lambda b, k=k: sv.cox_partial_likelihood(X, t, e, b, ties=ties)[1][k], beta)
            for k in range(2)
        ])
        assert oracles.rel_err(H, numH) < 1e-5


def test_cox_separation_flags_nonconvergence():
    x = np.r_[np.zeros(10), np.ones(10)][:, None]
    t = np.r_[np.arange(11, 21), np.arange(1, 11)].astype(float)
    with pytest.warns(NonConvergenceWarning):
        res = sv.cox_fit(x, t, np.ones(20, bool))
    assert not res.converged


def test_coxph_estimator():
    X, t, e = _exp_data(6, n=500)
    est = sv.CoxPH().fit(X, t, e)
    np.testing.assert_allclose(est.predict(X), X @ est.coef_)
    assert est.score(X, t, e) == pytest.approx(est.result_.log_likelihood, rel=1e-9)


# -- time-dependent ROC -----------------------------------------------------


def test_tdroc_uncensored_reduces_to_auroc():
    rng = np.random.default_rng(7)
    t = rng.exponential(5, 400)
    risk = -t + rng.normal(scale=3, size=400)
    for h in (3.0, 5.0, 7.0):
        got = sv.time_dependent_auc(t, np.ones(400, bool), risk, h)
        assert abs(got - auroc(risk, t <= h)) <= 1e-9
        assert got == pytest.approx(oracles.pairwise_auroc(risk, t <= h), abs=1e-12)


def test_tdroc_unit_weights_reduce_to_auroc_of_cases_vs_controls():
    rng = np.random.default_rng(8)
    t = rng.exponential(5, 300)
    e = rng.random(300) < 0.7
    risk = rng.normal(size=300)
    h = 4.0
    keep = (e & (t <= h)) | (t > h)
    got = sv.time_dependent_auc(t, e, risk, h, ipcw=False)
    assert got == pytest.approx(auroc(risk[keep], (t <= h)[keep]), abs=1e-12)


def test_tdroc_random_risk_near_half():
    rng = np.random.default_rng(9)
    t = rng.exponential(5, 2000)
    c = rng.uniform(0, 15, 2000)
    got = sv.time_dependent_auc(np.minimum(t, c), t <= c, rng.random(2000), 5.0)
    assert abs(got - 0.5) <= 0.05


def test_tdroc_degenerate_horizon():
    t = np.array([1.0, 2.0, 3.0])
    with pytest.raises(DegenerateHorizon):
        sv.time_dependent_auc(t, np.ones(3, bool), t, 0.5)
    with pytest.raises(DegenerateHorizon):
        sv.time_dependent_auc(t, np.ones(3, bool), t, 10.0)


def test_median_split_and_records(tmp_path):
    risk = np.array([0.1, 0.5, 0.9, 0.3])
    mask, thr = sv.median_split(risk)
    assert thr == pytest.approx(0.4) and mask.tolist() == [False, True, True, False]
    p = tmp_path / "r.csv"
    p.write_text("id,time,event,risk,cov_a,group\nx,1.5,1,0.2,3.0,g1\ny,2.0,0,0.4,1.0,g2\n")
    rec = sv.load_records(p)
    assert rec.time.tolist() == [1.5, 2.0] and rec.event.tolist() == [True, False]
    assert rec.covariate_names == ("a",)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert len(rec.subset(np.array([True, False]))) == 1
