mod common;

use common::brute_force;
use itertools::Itertools;
use maskident::linalg::{self, Mat, Vector};
use maskident::models::{self, sample_sequence, Model, Observation, DEFAULT_CONDITION_FLOOR};
use maskident::predictors::*;
use maskident::seeding;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const PAIRWISE: [&str; 6] = ["x2|x1", "x1|x2", "x3|x1", "x1|x3", "x3|x2", "x2|x3"];
const TWO_GIVEN_ONE: [&str; 6] = ["x2x3|x1", "x3x2|x1", "x1x3|x2", "x3x1|x2", "x1x2|x3", "x2x1|x3"];
const ONE_GIVEN_TWO: [&str; 4] = ["x3|x1x2", "x1|x2x3", "x2|x1x3", "x2|x3x1"];

fn task(s: &str) -> MaskedTask {
    s.parse().unwrap()
}

fn gaussian(rng: &mut impl Rng, d: usize, scale: f64) -> Vector {
    Vector::from_fn(d, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

#[test]
fn discrete_predictors_match_path_enumeration() {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let k = 2 + (seed as usize % 2);
        let d = k + (seed as usize / 2) % (5 - k);
        let m = Model::Hmm(models::random_hmm(d, k, seed, false, DEFAULT_CONDITION_FLOOR).unwrap());
        for name in PAIRWISE.iter().chain(&TWO_GIVEN_ONE).chain(&ONE_GIVEN_TWO) {
            let t = task(name);
            for inputs in (0..t.conditioned.len()).map(|_| 0..d).multi_cartesian_product() {
                let obs: Vec<Observation> = inputs.into_iter().map(Observation::Discrete).collect();
                let got = predict(&m, &t, &obs).unwrap().to_matrix();
                worst = worst.max(linalg::max_abs_diff(&got, &brute_force(&m, &t, &obs)));
            }
        }
    }
    assert!(worst <= 1e-12, "{worst:e}");
}

#[test]
fn gaussian_predictors_match_path_enumeration() {
    let mut rng = seeding::derived_rng(5, 0);
    for seed in 0..10u64 {
        let m = Model::Ghmm(models::random_ghmm(3, 3, seed, false, DEFAULT_CONDITION_FLOOR).unwrap());
        for name in PAIRWISE.iter().chain(&TWO_GIVEN_ONE) {
            let t = task(name);
            let obs = vec![Observation::Continuous(gaussian(&mut rng, 3, 1.5).as_slice().to_vec())];
            let got = predict(&m, &t, &obs).unwrap().to_matrix();
            assert!(linalg::max_abs_diff(&got, &brute_force(&m, &t, &obs)) <= 1e-12, "{name}");
        }
    }
}

#[test]
fn discrete_outputs_are_distributions() {
    let m = Model::Hmm(models::random_hmm(4, 3, 2, false, DEFAULT_CONDITION_FLOOR).unwrap());
    for name in PAIRWISE.iter().chain(&TWO_GIVEN_ONE) {
        for x in 0..4 {
            let p = predict(&m, &task(name), &[Observation::Discrete(x)]).unwrap();
            assert!((p.sum() - 1.0).abs() <= 1e-12);
            assert!(p.to_matrix().min() >= 0.0);
        }
    }
}

#[test]
fn marginals_are_consistent() {
    let m = Model::Hmm(models::random_hmm(4, 3, 8, false, DEFAULT_CONDITION_FLOOR).unwrap());
    for x in 0..4 {
        let obs = [Observation::Discrete(x)];
        let joint = predict(&m, &task("x2x3|x1"), &obs).unwrap().to_matrix();
        let p2 = predict(&m, &task("x2|x1"), &obs).unwrap().to_matrix();
        let p3 = predict(&m, &task("x3|x1"), &obs).unwrap().to_matrix();
        let rows = Mat::from_column_slice(4, 1, &linalg::row_sums(&joint));
        let cols = Mat::from_column_slice(4, 1, &linalg::column_sums(&joint));
        assert!(linalg::max_abs_diff(&rows, &p2) <= 1e-14);
        assert!(linalg::max_abs_diff(&cols, &p3) <= 1e-14);
    }
}

#[test]
fn predictions_are_shift_invariant() {
    let m = Model::Hmm(models::random_hmm(4, 3, 3, false, DEFAULT_CONDITION_FLOOR).unwrap());
    for (a, b) in [("x2x3|x1", "x4x5|x3"), ("x1x3|x2", "x3x5|x4"), ("x3|x1x2", "x6|x4x5"), ("x1|x2", "x4|x5")] {
        for x in 0..4 {
            let n = task(a).conditioned.len();
            let obs = vec![Observation::Discrete(x); n];
            let pa = predict(&m, &task(a), &obs).unwrap();
            let pb = predict(&m, &task(b), &obs).unwrap();
            assert!(pa.max_abs_diff(&pb) <= 1e-14, "{a} vs {b}");
        }
    }
}

#[test]
fn posterior_jacobian_matches_finite_differences() {
    let h = 1e-6;
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let d = 2 + seed as usize % 3;
        let k = 2 + seed as usize % (d - 1);
        let p = models::random_ghmm(d, k, seed, false, DEFAULT_CONDITION_FLOOR).unwrap();
        let mut rng = seeding::derived_rng(seed, 9);
        for _ in 0..100 {
            let x = gaussian(&mut rng, d, 1.5);
            let j = posterior_jacobian(&p, &x);
            for c in 0..d {
                let mut e = Vector::zeros(d);
                e[c] = h;
                let fd = (posterior_gaussian(&p, &(&x + &e)) - posterior_gaussian(&p, &(&x - &e))) / (2.0 * h);
                worst = worst.max((fd - j.column(c)).amax());
            }
        }
    }
    assert!(worst <= 1e-5, "{worst:e}");
}

#[test]
fn posterior_is_stable_far_from_the_means() {
    let p = models::random_ghmm(3, 3, 1, false, DEFAULT_CONDITION_FLOOR).unwrap();
    let x = Vector::from_vec(vec![1e4, -3e4, 2e4]);
    let phi = posterior_gaussian(&p, &x);
    assert!(phi.iter().all(|v| v.is_finite()));
    assert!((phi.sum() - 1.0).abs() <= 1e-12);
}

#[test]
fn conditional_density_integrates_to_one() {
    for seed in 0..5u64 {
        let p = models::random_ghmm(2, 2, seed, false, DEFAULT_CONDITION_FLOOR).unwrap();
        let x1 = Vector::from_vec(vec![0.3, -0.4]);
        let (lo, hi, n) = (-10.0, 10.0, 400);
        let step = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            for j in 0..=n {
                let wi = if i == 0 || i == n { 0.5 } else { 1.0 };
                let wj = if j == 0 || j == n { 0.5 } else { 1.0 };
                let x2 = Vector::from_vec(vec![lo + i as f64 * step, lo + j as f64 * step]);
                total += wi * wj * conditional_density_ghmm(&p, &x1, &x2);
            }
        }
        total *= step * step;
        assert!((total - 1.0).abs() <= 1e-8, "seed {seed}: {total}");
    }
}

#[test]
fn joint_matches_sampled_frequencies() {
    let p = models::random_hmm(3, 2, 6, false, DEFAULT_CONDITION_FLOOR).unwrap();
    let seq = sample_sequence(&Model::Hmm(p.clone()), 1_000_000, 1).unwrap();
    let obs: Vec<usize> = seq.iter().map(|s| s.obs.as_index().unwrap()).collect();
    for gap in [1u32, 2] {
        let exact = joint_pair_distribution(&p, 1, 1 + gap).unwrap();
        let mut counts = Mat::zeros(3, 3);
        for w in obs.windows(gap as usize + 1) {
            counts[(w[0], w[gap as usize])] += 1.0;
        }
        let emp = &counts / counts.sum();
        assert!(linalg::max_abs_diff(&exact, &emp) <= 0.005);
    }
}

#[test]
fn unsupported_tasks_name_an_alternative() {
    let g = Model::Ghmm(models::random_ghmm(3, 2, 0, false, DEFAULT_CONDITION_FLOOR).unwrap());
    match PredictorFn::new(g, task("x3|x1x2")) {
        Err(PredictError::UnsupportedTask { closest, .. }) => assert!(!closest.is_empty()),
        other => panic!("{other:?}"),
    }
    let m = Model::Hmm(models::random_hmm(3, 2, 0, false, DEFAULT_CONDITION_FLOOR).unwrap());
    assert!(matches!(PredictorFn::new(m, task("x1x2x3|x4")), Err(PredictError::UnsupportedTask { .. })));
}
