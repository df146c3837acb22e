import itertools
import math
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest

from conftest import make_cohort
from recurrent_iptw import autodiff as ad
from recurrent_iptw.cohort import Cohort, PatientRecord, SchemaError
from recurrent_iptw.iptw import (Propensities, StabilizedWeightSet, compute_stabilized_weights, emit_propensities,
                                 estimate_numerators, ip_loss, new_propensity_model, phase1_weights, step_features, train_phase1,
                                 truncate_weights, weight_diagnostics)
from recurrent_iptw.metrics import nearest_rank_quantile, rmse
from recurrent_iptw.msm import MsmDesign, empirical_ate, fit_weighted_logistic
from recurrent_iptw.simulator import SimConfig, simulate
from recurrent_iptw.training import TrainHyper, TrainingDiverged


def brute_force_numerator(cohort, m, prefix, action):
    """Count ratio straight from the sequences: #(prefix + action) / #(prefix)."""
    seqs = [tuple(int(v) for v in r.a) for r in cohort.records]
    den = sum(1 for s in seqs if s[:m - 1] == prefix)
    num = sum(1 for s in seqs if s[:m - 1] == prefix and s[m - 1] == action)
    return Fraction(num, den)


@pytest.mark.parametrize("k", [1, 2])
def test_numerator_table_equals_brute_force_counts(k):
    cohort = make_cohort(n=20, T=4, k=k, seed=k)
    table = estimate_numerators(cohort)
    seqs = [tuple(int(v) for v in r.a) for r in cohort.records]
    checked = 0
    for m in range(1, 5):
        for prefix in {s[:m - 1] for s in seqs}:
            probs = [table.probability(m, prefix, a) for a in range(k + 1)]
            assert abs(sum(probs) - 1.0) < 1e-12
            for a in range(k + 1):
                assert table.probability(m, prefix, a) == float(brute_force_numerator(cohort, m, prefix, a))
                checked += 1
    assert checked >= 4 * (k + 1)


def test_numerator_simple_cases():
    recs = [PatientRecord(i, np.zeros(1), np.zeros((2, 1)), np.array(a), 0.0)
            for i, a in enumerate([[1, 1], [1, 1], [0, 0], [0, 1]])]
    table = estimate_numerators(Cohort(recs, d=1, T=2))
    assert table.probability(1, (), 1) == 0.5
    same = Cohort([PatientRecord(i, np.zeros(1), np.zeros((2, 1)), np.array([0, 1]), 0.0) for i in range(5)], d=1, T=2)
    t2 = estimate_numerators(same)
    assert t2.probability(1, (), 0) == 1.0 and t2.probability(2, (0,), 1) == 1.0
    assert t2.log_probability(1, (), 0) == 0.0 and t2.log_probability(2, (0,), 1) == 0.0


def test_numerator_unseen_prefix_and_action_floor():
    cohort = make_cohort(n=10, T=2, seed=3)
    table = estimate_numerators(cohort)
    with pytest.raises(KeyError):
        table.probability(2, (7,), 0)
    # unseen action at a seen prefix gets a positive add-one floor
    recs = [PatientRecord(i, np.zeros(1), np.zeros((1, 1)), np.array([0]), 0.0) for i in range(4)]
    lp = estimate_numerators(Cohort(recs, d=1, T=1)).log_probability(1, (), 1)
    assert math.isfinite(lp) and lp < 0


def test_weight_from_eq_product_ratio():
    recs = [PatientRecord(0, np.zeros(1), np.zeros((2, 1)), np.array([0, 1]), 0.0),
            PatientRecord(1, np.zeros(1), np.zeros((2, 1)), np.array([1, 1]), 0.0)]
    cohort = Cohort(recs, d=1, T=2)
    table = estimate_numerators(cohort)  # Pr(a1=0)=0.5, Pr(a2=1|0)=1
    # record 0: numerators [0.5, 1.0]; choose denominators so that products are 0.5 and 0.4
    observed = np.array([[0.25 / 0.5 * 1.0, 0.8], [0.5, 0.5]])
    props = Propensities(cohort.ids, observed, 1 - observed, cohort.arrays().at_risk())
    ws = compute_stabilized_weights(table, props, cohort)
    assert ws.weights[0] == pytest.approx((0.5 * 1.0) / (0.5 * 0.8), rel=1e-14)
    assert ws.weights[1] == pytest.approx(0.5 / 0.5)


def test_numerator_probabilities_two_step_example():
    """numerator probs [0.5, 0.5], denominator probs [0.25, 0.8] -> 1.25."""
    seqs = [[0, 1, 1], [0, 0, 1], [1, 1, 1], [1, 1, 1]]
    recs = [PatientRecord(i, np.zeros(1), np.zeros((3, 1)), np.array(a), 0.0) for i, a in enumerate(seqs)]
    cohort = Cohort(recs, d=1, T=3)
    table = estimate_numerators(cohort)
    assert table.probability(1, (), 0) == 0.5 and table.probability(2, (0,), 1) == 0.5
    observed = np.full((4, 3), 0.5)
    observed[0, :2] = [0.25, 0.8]
    props = Propensities(cohort.ids, observed, observed, cohort.arrays().at_risk())
    ws = compute_stabilized_weights(table, props, cohort)
    assert ws.weights[0] == pytest.approx(1.25, rel=1e-14)


def test_equal_numerators_and_denominators_give_unit_weights():
    cohort = make_cohort(n=30, T=3, seed=5)
    table = estimate_numerators(cohort)
    arr = cohort.arrays()
    observed = np.ones((30, 3))
    for i, r in enumerate(cohort.records):
        a = tuple(int(v) for v in r.a)
        for m in range(3):
            observed[i, m] = table.probability(m + 1, a[:m], a[m])
    ws = compute_stabilized_weights(table, Propensities(cohort.ids, observed, observed, arr.at_risk()), cohort)
    np.testing.assert_allclose(ws.weights, 1.0, rtol=1e-14)


def test_weights_recompute_from_logs_and_stop_at_initiation():
    cohort = make_cohort(n=40, T=4, seed=6)
    ckpt = new_propensity_model(cohort, TrainHyper(hidden_size=3, seed=1))
    rng = np.random.default_rng(0)
    ckpt = ckpt.with_flat({k: rng.normal(size=v.shape) for k, v in ckpt.flat_params().items()})
    ws = compute_stabilized_weights(estimate_numerators(cohort), emit_propensities(cohort, ckpt), cohort)
    np.testing.assert_allclose(ws.recompute(), ws.weights, rtol=1e-10)
    assert np.all(ws.weights > 0)
    risk = cohort.arrays().at_risk()
    assert np.all(ws.log_den[~risk] == 0) and np.all(ws.log_num[~risk] == 0)


def test_zero_denominator_is_error_naming_record():
    cohort = make_cohort(n=5, T=2, seed=2)
    observed = np.full((5, 2), 0.5)
    observed[3, 0] = 0.0
    props = Propensities(cohort.ids, observed, observed, cohort.arrays().at_risk())
    with pytest.raises(ValueError, match="record 3"):
        compute_stabilized_weights(estimate_numerators(cohort), props, cohort)


def test_untrained_head_emits_half():
    cohort = make_cohort(n=8, T=3, seed=1)
    props = emit_propensities(cohort, new_propensity_model(cohort, TrainHyper(hidden_size=4)))
    np.testing.assert_array_equal(props.treat, 0.5)


def test_propensity_at_step_m_ignores_covariates_from_step_m_on():
    cohort = make_cohort(n=6, T=4, seed=9)
    ckpt = new_propensity_model(cohort, TrainHyper(hidden_size=3, seed=4))
    rng = np.random.default_rng(1)
    ckpt = ckpt.with_flat({k: rng.normal(size=v.shape) for k, v in ckpt.flat_params().items()})
    base = emit_propensities(cohort, ckpt).treat
    for m in range(4):
        recs = []
        for r in cohort.records:
            x = r.x.copy()
            x[m:] = rng.permutation(x[m:].ravel()).reshape(x[m:].shape) + rng.normal(size=x[m:].shape)
            recs.append(PatientRecord(r.id, r.b, x, r.a, r.y))
        shuffled = emit_propensities(Cohort(recs, cohort.d, cohort.T), ckpt).treat
        np.testing.assert_array_equal(shuffled[:, :m + 1], base[:, :m + 1])


def test_schema_mismatch_is_error():
    cohort = make_cohort(n=6, d=2)
    other = make_cohort(n=6, d=3)
    ckpt = new_propensity_model(cohort, TrainHyper(hidden_size=2))
    with pytest.raises(SchemaError):
        emit_propensities(other, ckpt)


def test_phase1_loss_matches_finite_differences():
    rng = np.random.default_rng(12)
    worst = 0.0
    for trial in range(100):
        k = int(rng.integers(1, 3))
        cohort = make_cohort(n=int(rng.integers(2, 5)), T=int(rng.integers(1, 4)), d=2, k=k, seed=trial)
        hyper = TrainHyper(hidden_size=int(rng.integers(1, 4)), l2=float(rng.choice([0.0, 0.3])), seed=trial)
        ckpt = new_propensity_model(cohort, hyper)
        params = {n: rng.normal(scale=0.5, size=v.shape) for n, v in ckpt.flat_params().items()}
        feats, arr = step_features(cohort), cohort.arrays()
        risk = arr.at_risk()
        worst = max(worst, ad.grad_check(lambda P: ip_loss(P, ckpt, feats, arr.b, arr.a, risk), params))
    assert worst < 1e-4


def test_single_record_memorized():
    x = np.array([[0.3, -0.2], [0.1, 0.4], [-0.5, 0.2]])
    rec = PatientRecord(0, np.array([0.5, -1.0]), x, np.array([0, 0, 1]), 0.0)
    cohort = Cohort([rec], d=2, T=3)
    ckpt = train_phase1(cohort, TrainHyper(steps=1500, lr=0.05, hidden_size=4, val_fraction=0.0, patience=1000))
    hist = ckpt.meta["history"]
    assert hist[0]["val_loss"] > 1.0 and min(h["val_loss"] for h in hist) < 1e-2


def test_non_finite_loss_reports_batch_and_norms():
    cohort = make_cohort(n=10, T=2, seed=3)
    with pytest.raises(TrainingDiverged) as info:
        train_phase1(cohort, TrainHyper(steps=5, lr=1e308, hidden_size=2, batch_size=4, eval_every=1))
    assert info.value.batch_ids and info.value.param_norms


def test_independent_treatment_gives_marginal_hazards():
    randomized, _, _ = simulate(SimConfig(n=10_000, d=3, seed=21))
    ckpt = train_phase1(randomized, TrainHyper(steps=1500, lr=1e-2, hidden_size=8, seed=21))
    props = emit_propensities(randomized, ckpt)
    arr = randomized.arrays()
    risk = arr.at_risk()
    for m in range(3):
        at_risk = risk[:, m]
        hazard = np.mean(arr.a[at_risk, m] != 0)
        assert np.mean(np.abs(props.treat[at_risk, m] - hazard)) < 0.02
        assert abs(props.treat[at_risk, m].mean() - hazard) < 0.02


def test_lambda_bias_propensity_increases_with_confounder():
    _, biased, truth = simulate(SimConfig(n=6000, d=3, lam=0.0, rho=1e9, seed=5))
    ckpt = train_phase1(biased, TrainHyper(steps=1500, lr=1e-2, hidden_size=8, seed=5))
    arr = biased.arrays()
    score = arr.b @ truth.beta_b
    # oracle: plain logistic regression of first-step treatment on the confounder score
    design = MsmDesign(np.column_stack([np.ones_like(score), score]), (arr.a[:, 0] != 0).astype(float),
                       np.ones_like(score), ["c", "s"], biased.ids, [0] * len(score))
    assert fit_weighted_logistic(design).get("s") > 0
    grid = np.linspace(-3, 3, 13)
    unit = truth.beta_b / (truth.beta_b @ truth.beta_b)
    probe = [PatientRecord(i, s * unit, np.zeros((3, 3)), np.zeros(3, dtype=np.int64), 0.0) for i, s in enumerate(grid)]
    p1 = emit_propensities(Cohort(probe, d=3, T=3), ckpt).treat[:, 0]
    assert np.all(np.diff(p1) > 0)


def test_truncation_examples():
    ws = StabilizedWeightSet(list(range(100)), np.arange(1.0, 101.0), np.zeros((100, 1)), np.zeros((100, 1)))
    same = truncate_weights(ws, 0.0, 1.0)
    np.testing.assert_array_equal(same.weights, ws.weights)
    t = truncate_weights(ws, 0.05, 0.95)
    lo, hi = np.sort(ws.weights)[4], np.sort(ws.weights)[94]
    np.testing.assert_array_equal(t.weights, np.clip(ws.weights, lo, hi))
    assert t.flag == "truncated(0.05,0.95)"
    np.testing.assert_array_equal(truncate_weights(t, 0.05, 0.95).weights, t.weights)  # idempotent
    flat = StabilizedWeightSet([0, 1, 2], np.full(3, 2.0), np.zeros((3, 1)), np.zeros((3, 1)))
    np.testing.assert_array_equal(truncate_weights(flat, 0.1, 0.9).weights, flat.weights)
    with pytest.raises(ValueError):
        truncate_weights(ws, 0.9, 0.1)


def test_truncation_preserves_interior_order():
    rng = np.random.default_rng(3)
    w = rng.lognormal(size=200)
    t = truncate_weights(StabilizedWeightSet(list(range(200)), w, np.zeros((200, 1)), np.zeros((200, 1))), 0.01, 0.99)
    lo, hi = nearest_rank_quantile(w, 0.01), nearest_rank_quantile(w, 0.99)
    inside = (w > lo) & (w < hi)
    np.testing.assert_array_equal(t.weights[inside], w[inside])
    assert np.all(np.diff(t.weights[np.argsort(w)]) >= 0)


def test_weight_diagnostics_examples():
    assert weight_diagnostics([1, 1, 1, 1]) == {"q01": 1.0, "mean": 1.0, "q99": 1.0, "min": 1.0, "max": 1.0}
    d = weight_diagnostics([0.02, 0.56, 7.59])
    assert d["min"] == 0.02 and d["max"] == 7.59
    u = np.random.default_rng(0).uniform(size=1000)
    assert weight_diagnostics(u)["mean"] == pytest.approx(0.5, abs=0.05)


def test_weight_csv_round_trip(tmp_path):
    ws = StabilizedWeightSet([3, 1, 2], np.array([0.1, 2.5, 1 / 3]), np.zeros((3, 1)), np.zeros((3, 1)), "raw")
    ws.to_csv(tmp_path / "w.csv")
    back = StabilizedWeightSet.from_csv(tmp_path / "w.csv")
    assert back.ids == [3, 1, 2] and back.flag == "raw"
    np.testing.assert_array_equal(back.weights, ws.weights)
    (tmp_path / "bad.csv").write_text("id,W_s,flag\n1,-1.0,raw\n")
    with pytest.raises(SchemaError):
        StabilizedWeightSet.from_csv(tmp_path / "bad.csv")


def _separable_cohort():
    b = np.r_[np.linspace(0.2, 2.0, 20), -np.linspace(0.2, 2.0, 20)][:, None]
    recs = [PatientRecord(i, b[i], np.zeros((1, 1)), np.array([int(b[i, 0] > 0)]), 0.0) for i in range(40)]
    return Cohort(recs, d=1, T=1)


def test_l2_shrinks_head_weights_on_separable_data():
    cohort = _separable_cohort()
    base = dict(steps=1500, lr=0.05, hidden_size=2, batch_size=40, val_fraction=0.0, patience=1000, seed=2)
    raw = train_phase1(cohort, TrainHyper(**base))
    smooth = train_phase1(cohort, TrainHyper(**base, l2=0.1))
    mx = [max(float(np.max(np.abs(ck.flat_params()[k]))) for k in ("ip.w_h", "ip.w_b")) for ck in (raw, smooth)]
    assert mx[1] < mx[0]


def test_zero_l2_reproduces_unsmoothed_training():
    cohort = make_cohort(n=30, seed=8)
    a = train_phase1(cohort, TrainHyper(steps=40, hidden_size=3, l2=0.0))
    b = train_phase1(cohort, TrainHyper(steps=40, hidden_size=3))
    for k, v in a.flat_params().items():
        np.testing.assert_array_equal(v, b.flat_params()[k])


@pytest.mark.slow
def test_randomized_cohort_weights_are_near_neutral():
    randomized, _, truth = simulate(SimConfig(n=10_000, seed=3))
    _, ws = phase1_weights(randomized, TrainHyper(seed=3))
    target = truth.ate_by_time
    weighted = rmse(list(empirical_ate(randomized, ws.weights).values()), target)
    plain = rmse(list(empirical_ate(randomized).values()), target)
    assert abs(ws.weights.mean() - 1) < 0.1 and abs(weighted - plain) < 0.1
