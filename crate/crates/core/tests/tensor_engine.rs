use maskident::linalg::{self, Mat};
use maskident::tensor_engine::{align_columns, jennrich, kruskal_condition, kruskal_rank, Tensor3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn unit_factor_error(truth: &Mat, got: &Mat) -> f64 {
    let t = linalg::normalize_column_norms(truth);
    let g = linalg::normalize_column_norms(got);
    align_columns(&t, &g, false, true).unwrap().residual
}

#[test]
fn jennrich_recovers_random_low_rank_tensors() {
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 2 + (seed % 3) as usize;
        let dims = [k + (seed % 3) as usize, k + ((seed / 3) % 3) as usize, k + ((seed / 9) % 3) as usize];
        let dims = dims.map(|n| n.min(6));
        let a = gaussian(&mut rng, dims[0], k);
        let b = gaussian(&mut rng, dims[1], k);
        let c = gaussian(&mut rng, dims[2], k);
        assert!(kruskal_condition(&a, &b, &c).unwrap().holds);
        let t = Tensor3::from_factors(&a, &b, &c).unwrap();
        let cpd = jennrich(&t, k, seed).unwrap();
        assert!(cpd.eigengap >= 1e-4, "seed {seed}: eigengap {}", cpd.eigengap);
        let err = unit_factor_error(&a, &cpd.a).max(unit_factor_error(&b, &cpd.b)).max(unit_factor_error(&c, &cpd.c));
        worst = worst.max(err);
        assert!(err <= 1e-8, "seed {seed}: factor error {err:e}");
        assert!(cpd.residual <= 1e-8 * t.norm(), "seed {seed}: residual {}", cpd.residual);
    }
    println!("worst factor error {worst:e}");
}

#[test]
fn jennrich_two_component_reconstruction() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let f = |rng: &mut ChaCha8Rng| linalg::normalize_column_norms(&gaussian(rng, 4, 2));
    let (a, b, c) = (f(&mut rng), f(&mut rng), f(&mut rng));
    let t = Tensor3::from_factors(&a, &b, &c).unwrap();
    let cpd = jennrich(&t, 2, 1).unwrap();
    assert!(t.distance(&cpd.reconstruct()) <= 1e-9);
}

#[test]
fn jennrich_is_seed_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = Tensor3::from_factors(&gaussian(&mut rng, 5, 3), &gaussian(&mut rng, 4, 3), &gaussian(&mut rng, 4, 3)).unwrap();
    let x = jennrich(&t, 3, 9).unwrap();
    let y = jennrich(&t, 3, 9).unwrap();
    assert_eq!(x, y);
}

#[test]
fn kruskal_rank_matches_matrix_rank_on_generic_matrices() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = 2 + (seed % 6) as usize;
        let r = 1 + (seed % 7) as usize;
        let m = gaussian(&mut rng, n, r);
        let kr = kruskal_rank(&m).unwrap();
        assert_eq!(kr, linalg::numerical_rank(&m, 1e-10).min(r), "seed {seed}");
        assert_eq!(kr, n.min(r));
    }
}

#[test]
fn kruskal_rank_with_duplicate_column_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut m = gaussian(&mut rng, 6, 4);
    let c0 = m.column(0).clone_owned();
    m.set_column(2, &c0);
    assert_eq!(kruskal_rank(&m).unwrap(), 1);
}

#[test]
fn alignment_tolerates_small_perturbation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let r = gaussian(&mut rng, 5, 4);
    let noise = gaussian(&mut rng, 5, 4) * 1e-7 / 5.0;
    let cand = linalg::permute_columns(&(&r + noise), &[2, 0, 3, 1]);
    let al = align_columns(&r, &cand, false, false).unwrap();
    assert_eq!(al.permutation, vec![1, 3, 0, 2]);
    assert!(al.residual <= 1e-6 * (20f64).sqrt());
}
