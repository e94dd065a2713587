//! Brute-force reference predictors by enumeration of hidden paths.
#![allow(dead_code)]

use itertools::Itertools;
use maskident::linalg::{Mat, Vector};
use maskident::models::{Model, Observation};
use maskident::predictors::MaskedTask;

/// Likelihood of `obs` under hidden state `h` (unnormalized for Gaussian models).
fn likelihood(model: &Model, h: usize, obs: &Observation) -> f64 {
    match (model, obs) {
        (Model::Hmm(p), Observation::Discrete(x)) => p.emission[(*x, h)],
        (Model::Ghmm(p), Observation::Continuous(v)) => {
            let x = Vector::from_column_slice(v);
            (-0.5 * (x - p.means.column(h)).norm_squared()).exp()
        }
        _ => panic!("observation kind does not match model"),
    }
}

/// E[target | conditioned] by summing over all k^T hidden paths, T = latest time in the task.
/// Returns a length-d vector for one predicted token and a d x d matrix (rows = first
/// predicted token) for two.
pub fn brute_force(model: &Model, task: &MaskedTask, inputs: &[Observation]) -> Mat {
    let k = model.k();
    let d = model.observation_matrix().nrows();
    let g = model.observation_matrix();
    let t = model.transition();
    let horizon = *task.times().iter().max().unwrap() as usize;
    let two = task.predicted.len() == 2;
    let mut acc = if two { Mat::zeros(d, d) } else { Mat::zeros(d, 1) };
    let mut total = 0.0;
    for path in (0..horizon).map(|_| 0..k).multi_cartesian_product() {
        let mut w = 1.0 / k as f64;
        for s in 1..horizon {
            w *= t[(path[s], path[s - 1])];
        }
        for (obs, &c) in inputs.iter().zip(&task.conditioned) {
            w *= likelihood(model, path[c as usize - 1], obs);
        }
        if w == 0.0 {
            continue;
        }
        total += w;
        let e0 = g.column(path[task.predicted[0] as usize - 1]);
        if two {
            let e1 = g.column(path[task.predicted[1] as usize - 1]);
            acc += e0 * e1.transpose() * w;
        } else {
            acc += e0 * w;
        }
    }
    acc / total
}
