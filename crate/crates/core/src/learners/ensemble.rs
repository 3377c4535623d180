//! Random forests and gradient-boosted trees.

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{grow_tree, BinnedMatrix, Criterion, Targets, Tree, TreeParams};
use super::LearnerError;
use crate::math::{mix64, sigmoid, softplus};

/// Uniform in [0, 1) from a hash.
fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Poisson(1) draw by inverse CDF.
fn poisson1(u: f64) -> f64 {
    let mut k = 0.0;
    let mut p = (-1.0f64).exp();
    let mut cdf = p;
    while u > cdf && k < 20.0 {
        k += 1.0;
        p /= k;
        cdf += p;
    }
    k
}

fn row_draw(seed: u64, index: u64, row_key: u64) -> f64 {
    unit(mix64(mix64(seed ^ mix64(index)) ^ row_key))
}

/// Bootstrap multiplicities keyed by row identity, so they do not depend on row order.
pub fn bootstrap_weights(seed: u64, tree: u64, row_keys: &[u64]) -> Vec<f64> {
    row_keys
        .iter()
        .map(|k| poisson1(row_draw(seed, tree, *k)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestParams {
    pub n_trees: usize,
    pub tree: TreeParams,
    pub bootstrap: bool,
    pub seed: u64,
}

pub fn fit_forest(
    data: &BinnedMatrix,
    y: &[f64],
    row_keys: &[u64],
    params: &ForestParams,
) -> Forest {
    let ones = vec![1.0; y.len()];
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let weight = if params.bootstrap {
                bootstrap_weights(params.seed, t as u64, row_keys)
            } else {
                ones.clone()
            };
            let targets = Targets {
                target: y,
                hess: None,
                weight: &weight,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(t as u64);
            grow_tree(data, &targets, Criterion::Gini, &params.tree, &mut rng)
        })
        .collect();
    Forest { trees }
}

impl Forest {
    pub fn predict_row(&self, row: ArrayView1<f64>) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict_row(row)).sum();
        sum / self.trees.len() as f64
    }

    pub fn add_contributions(&self, row: ArrayView1<f64>, out: &mut [f64]) {
        let scale = 1.0 / self.trees.len() as f64;
        for t in &self.trees {
            t.add_contributions(row, scale, out);
        }
    }

    /// Per-tree normalized impurity decrease, averaged over trees.
    pub fn importances(&self, p: usize) -> Vec<f64> {
        let mut total = vec![0.0; p];
        for t in &self.trees {
            let mut imp = vec![0.0; p];
            t.add_importances(&mut imp);
            let s: f64 = imp.iter().sum();
            if s > 0.0 {
                for (a, b) in total.iter_mut().zip(&imp) {
                    *a += b / s;
                }
            }
        }
        normalize(total)
    }
}

pub(crate) fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        for x in &mut v {
            *x /= s;
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Boosted {
    pub base_score: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
    /// Mean training log-loss after each round (entry 0 is the base model).
    pub train_loss: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoostParams {
    pub n_rounds: usize,
    pub learning_rate: f64,
    pub tree: TreeParams,
    /// Row fraction sampled per round.
    pub subsample: f64,
    pub seed: u64,
}

fn log_loss(y: &[f64], f: &[f64]) -> f64 {
    let s: f64 = y.iter().zip(f).map(|(y, f)| softplus(*f) - y * f).sum();
    s / y.len() as f64
}

pub fn fit_boosted(
    x: &Array2<f64>,
    data: &BinnedMatrix,
    y: &[f64],
    row_keys: &[u64],
    params: &BoostParams,
) -> Result<Boosted, LearnerError> {
    let n = y.len();
    let prevalence = (y.iter().sum::<f64>() / n as f64).clamp(1e-6, 1.0 - 1e-6);
    let base_score = (prevalence / (1.0 - prevalence)).ln();
    let mut f = vec![base_score; n];
    let mut train_loss = vec![log_loss(y, &f)];
    let mut trees = Vec::with_capacity(params.n_rounds);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    for round in 0..params.n_rounds {
        let p: Vec<f64> = f.iter().map(|v| sigmoid(*v)).collect();
        let residual: Vec<f64> = y.iter().zip(&p).map(|(y, p)| y - p).collect();
        let hess: Vec<f64> = p.iter().map(|p| p * (1.0 - p)).collect();
        let weight: Vec<f64> = if params.subsample < 1.0 {
            row_keys
                .iter()
                .map(|k| (row_draw(params.seed, round as u64, *k) < params.subsample) as u8 as f64)
                .collect()
        } else {
            vec![1.0; n]
        };
        let targets = Targets {
            target: &residual,
            hess: Some(&hess),
            weight: &weight,
        };
        let tree = grow_tree(data, &targets, Criterion::Newton, &params.tree, &mut rng);
        for (i, fi) in f.iter_mut().enumerate() {
            *fi += params.learning_rate * tree.predict_row(x.row(i));
        }
        let loss = log_loss(y, &f);
        if !loss.is_finite() || f.iter().any(|v| !v.is_finite()) {
            return Err(LearnerError::NonFiniteLoss { round });
        }
        train_loss.push(loss);
        trees.push(tree);
    }
    Ok(Boosted {
        base_score,
        learning_rate: params.learning_rate,
        trees,
        train_loss,
    })
}

impl Boosted {
    pub fn margin(&self, row: ArrayView1<f64>) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict_row(row)).sum();
        self.base_score + self.learning_rate * sum
    }

    pub fn predict_row(&self, row: ArrayView1<f64>) -> f64 {
        sigmoid(self.margin(row))
    }

    /// Contributions on the log-odds scale.
    pub fn add_contributions(&self, row: ArrayView1<f64>, out: &mut [f64]) {
        for t in &self.trees {
            t.add_contributions(row, self.learning_rate, out);
        }
    }

    pub fn importances(&self, p: usize) -> Vec<f64> {
        let mut imp = vec![0.0; p];
        for t in &self.trees {
            t.add_importances(&mut imp);
        }
        normalize(imp)
    }
}

pub(crate) fn predict_all(x: &Array2<f64>, f: impl Fn(ArrayView1<f64>) -> f64 + Sync) -> Vec<f64> {
    let rows: Vec<ArrayView1<f64>> = x.rows().into_iter().collect();
    rows.par_iter().map(|r| f(*r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poisson_mean_near_one() {
        let keys: Vec<u64> = (0..20000).map(|i| mix64(i)).collect();
        let w = bootstrap_weights(7, 3, &keys);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
        let zeros = w.iter().filter(|v| **v == 0.0).count() as f64 / w.len() as f64;
        assert!((zeros - (-1.0f64).exp()).abs() < 0.02);
    }

    #[test]
    fn bootstrap_keyed_by_row_not_position() {
        let keys = vec![11, 22, 33, 44];
        let rev: Vec<u64> = keys.iter().rev().copied().collect();
        let a = bootstrap_weights(5, 0, &keys);
        let mut b = bootstrap_weights(5, 0, &rev);
        b.reverse();
        assert_eq!(a, b);
    }
}
