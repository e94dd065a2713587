use maskident::counterexamples::*;
use maskident::linalg::{self, Mat};
use maskident::models::{self, FixtureBundle, FixtureName, GhmmParams, HmmParams, Model, DEFAULT_CONDITION_FLOOR};

fn fixture_a() -> (HmmParams, HmmParams) {
    match models::fixture(FixtureName::PairwiseHmmCounterexample) {
        FixtureBundle::PairwiseHmmCounterexample { original, alternative } => (original, alternative),
        _ => unreachable!(),
    }
}

fn fixture_pair() -> CounterexamplePair {
    let (o, a) = fixture_a();
    CounterexamplePair { original: Model::Hmm(o), alternative: Model::Hmm(a), tasks: pairwise_tasks(), construction: "fixture".into(), theta: None }
}

#[test]
fn fixture_a_determinants() {
    let (o, a) = fixture_a();
    for p in [&o, &a] {
        assert!((linalg::gram_volume(&p.emission) - 0.0110).abs() <= 5e-4);
        assert!((p.transition.determinant() + 0.1611).abs() <= 5e-4);
    }
}

#[test]
fn fixture_a_validates() {
    let v = validate_counterexample(&fixture_pair(), 1e-8, 0).unwrap();
    assert!(v.passes, "{v:?}");
    assert_eq!(v.tasks.len(), 4);
    assert!(v.max_discrepancy <= 1e-8);
    assert!(v.parameter_distance >= 0.01);
    assert!(v.emission_distance >= 0.01);
}

#[test]
fn fixture_a_is_a_simplex_rotation() {
    let (o, a) = fixture_a();
    let fit = fit_simplex_angle(&o, &a);
    assert!(fit.emission_error <= 1e-6 && fit.transition_error <= 1e-6, "{fit:?}");
    assert!((fit.theta - 0.1).abs() <= 1e-6);
    let pair = simplex_rotation_pair(&o, fit.theta).unwrap();
    assert!(linalg::max_abs_diff(pair.alternative.observation_matrix(), &a.emission) <= 1e-6);
    assert!(linalg::max_abs_diff(pair.alternative.transition(), &a.transition) <= 1e-6);
}

#[test]
fn zero_angle_is_rejected_as_relabeling() {
    let base = models::random_simplex_base(5, 1).unwrap();
    let pair = simplex_rotation_pair(&base, 0.0).unwrap();
    let v = validate_counterexample(&pair, 1e-8, 0).unwrap();
    assert!(v.predictors_equal);
    assert!(!v.distinct && !v.passes);
}

#[test]
fn random_simplex_pairs_validate() {
    for seed in 0..10 {
        let base = models::random_simplex_base(4 + (seed as usize % 3), seed).unwrap();
        let pair = simplex_rotation_pair(&base, 0.05).unwrap();
        let v = validate_counterexample(&pair, 1e-8, seed).unwrap();
        assert!(v.passes, "seed {seed}: {v:?}");
        let Model::Hmm(alt) = &pair.alternative else { unreachable!() };
        let target = 3.0 / alt.d() as f64;
        assert!(linalg::row_sums(&alt.emission).iter().all(|s| (s - target).abs() <= 1e-10));
    }
}

#[test]
fn large_angle_reports_max_feasible() {
    let o = Mat::from_row_slice(3, 3, &[0.9, 0.05, 0.05, 0.05, 0.9, 0.05, 0.05, 0.05, 0.9]);
    let t = Mat::from_row_slice(3, 3, &[0.8, 0.1, 0.1, 0.1, 0.8, 0.1, 0.1, 0.1, 0.8]);
    let base = HmmParams::new(o, t).unwrap();
    match simplex_rotation_pair(&base, 1.0) {
        Err(CounterexampleError::AngleTooLarge { max_feasible, .. }) => {
            assert!(max_feasible > 0.0 && max_feasible < 1.0);
            assert!(simplex_rotation_pair(&base, max_feasible).is_ok());
            assert!(simplex_rotation_pair(&base, max_feasible + 1e-6).is_err());
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn power_pairs_for_t_two_to_ten() {
    for t in 2..=10 {
        let (pair, d) = power_rotation_pair(t, 0.5).unwrap();
        assert!(d.stochastic_residual <= 1e-10, "t={t}");
        assert!(d.min_entry >= -1e-12);
        assert!(d.power_residual <= 1e-10);
        assert!(d.transition_distance >= 1e-3);
        assert!(d.commutation_residual <= 1e-10);
        let (tr, alt) = (pair.original.transition(), pair.alternative.transition());
        for s in 1..t as usize {
            assert!(linalg::max_abs_diff(&linalg::mat_pow(tr, s), &linalg::mat_pow(alt, s)) >= 1e-4, "t={t} s={s}");
        }
    }
}

#[test]
fn power_pair_t1_is_trivial() {
    let (pair, d) = power_rotation_pair(1, 0.5).unwrap();
    assert!(d.transition_distance <= 1e-12);
    let v = validate_counterexample(&pair, 1e-10, 0).unwrap();
    assert!(v.predictors_equal && !v.distinct);
    assert!(v.tasks[4].skipped > 0);
}

#[test]
fn power_pairs_share_non_adjacent_predictors() {
    for t in [2, 3, 4] {
        let (pair, _) = power_rotation_pair(t, 0.5).unwrap();
        let v = validate_counterexample(&pair, 1e-10, 0).unwrap();
        assert!(v.passes, "t={t}: {v:?}");
    }
    let emission = models::random_hmm(4, 3, 2, false, DEFAULT_CONDITION_FLOOR).unwrap().emission;
    let (pair, _) = power_rotation_pair_with_emission(2, 0.5, &emission).unwrap();
    let v = validate_counterexample(&pair, 1e-10, 0).unwrap();
    assert!(v.passes, "{v:?}");
}

#[test]
fn structure_is_checked() {
    let mut base = models::random_simplex_base(4, 0).unwrap();
    base.transition = models::circulant_transition(0.5);
    assert!(matches!(simplex_rotation_pair(&base, 0.05), Err(CounterexampleError::Structure(_))));
}

#[test]
fn infeasible_power_parameters() {
    assert!(matches!(power_rotation_pair(2, 0.1), Err(CounterexampleError::Infeasible { .. })));
}

#[test]
fn identical_pair_fails_distinctness() {
    let (o, _) = fixture_a();
    let pair = CounterexamplePair { original: Model::Hmm(o.clone()), alternative: Model::Hmm(o), tasks: pairwise_tasks(), construction: "identity".into(), theta: None };
    let v = validate_counterexample(&pair, 1e-8, 0).unwrap();
    assert!(v.predictors_equal && !v.distinct && !v.passes);
}

#[test]
fn householder_certificates_on_random_instances() {
    for seed in 0..20 {
        let (d, k) = [(3, 2), (4, 3), (5, 3)][seed as usize % 3];
        let p = models::random_ghmm(d, k, seed, false, DEFAULT_CONDITION_FLOOR).unwrap();
        let c = householder_certificate(&p).unwrap();
        assert!(c.passes, "seed {seed}: {c:?}");
        assert!(c.involution_residual <= 1e-12);
        assert!((c.v_hat.norm() - 1.0).abs() <= 1e-12);
        assert!(posterior_invariance(&p, &c, 100, seed) <= 1e-10);
    }
}

#[test]
fn reflected_model_is_not_a_valid_pair() {
    let p = models::random_ghmm(4, 3, 0, false, DEFAULT_CONDITION_FLOOR).unwrap();
    let c = householder_certificate(&p).unwrap();
    let t_candidate = linalg::pinv(&c.reflected_means) * &p.means * &p.transition;
    let reflected = GhmmParams { means: c.reflected_means.clone(), transition: t_candidate };
    assert!(!Model::Ghmm(reflected).validate(1e-6).unwrap().is_empty());
}

#[test]
fn gaussian_pair_validation_uses_random_probes() {
    let p = models::random_ghmm(3, 2, 4, false, DEFAULT_CONDITION_FLOOR).unwrap();
    let pair = CounterexamplePair {
        original: Model::Ghmm(p.clone()),
        alternative: Model::Ghmm(p.relabel(&[1, 0])),
        tasks: vec!["x2|x1".parse().unwrap()],
        construction: "relabel".into(),
        theta: None,
    };
    let v = validate_counterexample(&pair, 1e-10, 0).unwrap();
    assert_eq!(v.tasks[0].probes, GAUSSIAN_PROBES);
    assert!(v.predictors_equal && !v.distinct);
    let _ = Mat::zeros(1, 1);
}
