//! L2-regularized logistic regression by batch gradient descent.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::math::{sigmoid, softplus};

/// Mean log-loss plus `(lambda / 2) * |w|^2`. `theta[0]` is the unpenalized intercept.
pub struct LogisticObjective<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: &'a [f64],
    pub lambda: f64,
}

impl LogisticObjective<'_> {
    fn margins(&self, theta: &[f64]) -> Array1<f64> {
        let w = ArrayView1::from(&theta[1..]);
        self.x.dot(&w) + theta[0]
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let z = self.margins(theta);
        let n = self.y.len() as f64;
        let loss: f64 = z
            .iter()
            .zip(self.y)
            .map(|(z, y)| softplus(*z) - y * z)
            .sum::<f64>()
            / n;
        let penalty: f64 = theta[1..].iter().map(|w| w * w).sum::<f64>() * self.lambda / 2.0;
        loss + penalty
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let z = self.margins(theta);
        let n = self.y.len() as f64;
        let r: Array1<f64> = z.iter().zip(self.y).map(|(z, y)| sigmoid(*z) - y).collect();
        // Row-wise accumulation; a strided transposed product is several times slower.
        let mut gw = Array1::<f64>::zeros(self.x.ncols());
        for (row, ri) in self.x.rows().into_iter().zip(&r) {
            gw.scaled_add(*ri, &row);
        }
        let mut g = Vec::with_capacity(theta.len());
        g.push(r.sum() / n);
        g.extend(
            gw.iter()
                .zip(&theta[1..])
                .map(|(g, w)| g / n + self.lambda * w),
        );
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticParams {
    pub l2_lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Logistic {
    /// Input columns used, in matrix order.
    pub columns: Vec<usize>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub intercept: f64,
    /// Coefficients on standardized inputs.
    pub weights: Vec<f64>,
    pub loss_trace: Vec<f64>,
    pub converged: bool,
}

/// Result of plain gradient descent on an objective.
pub struct Descent {
    pub theta: Vec<f64>,
    pub trace: Vec<f64>,
    pub converged: bool,
}

pub fn gradient_descent(obj: &LogisticObjective<'_>, params: &LogisticParams) -> Descent {
    let dim = obj.x.ncols() + 1;
    let mut theta = vec![0.0; dim];
    let mut loss = obj.value(&theta);
    let mut trace = vec![loss];
    let mut step: f64 = 1.0;
    for _ in 0..params.max_iter {
        let g = obj.gradient(&theta);
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax <= params.tol {
            return Descent {
                theta,
                trace,
                converged: true,
            };
        }
        let gsq: f64 = g.iter().map(|v| v * v).sum();
        let mut t = (step * 2.0).min(1e4);
        loop {
            let cand: Vec<f64> = theta.iter().zip(&g).map(|(a, b)| a - t * b).collect();
            let lc = obj.value(&cand);
            if lc <= loss - 0.5 * t * gsq {
                theta = cand;
                loss = lc;
                break;
            }
            t /= 2.0;
            if t < 1e-16 {
                // No further decrease representable.
                return Descent {
                    theta,
                    trace,
                    converged: false,
                };
            }
        }
        step = t;
        trace.push(loss);
    }
    let g = obj.gradient(&theta);
    let converged = g.iter().all(|v| v.abs() <= params.tol);
    Descent {
        theta,
        trace,
        converged,
    }
}

pub fn fit_logistic(
    x: &Array2<f64>,
    y: &[f64],
    columns: Vec<usize>,
    params: &LogisticParams,
) -> Logistic {
    let sub = x.select(Axis(1), &columns);
    let n = sub.nrows() as f64;
    let means: Vec<f64> = sub.columns().into_iter().map(|c| c.sum() / n).collect();
    let scales: Vec<f64> = sub
        .columns()
        .into_iter()
        .zip(&means)
        .map(|(c, m)| {
            let sd = (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let mut z = sub;
    for (j, mut c) in z.columns_mut().into_iter().enumerate() {
        c.mapv_inplace(|v| (v - means[j]) / scales[j]);
    }
    let obj = LogisticObjective {
        x: z.view(),
        y,
        lambda: params.l2_lambda,
    };
    let d = gradient_descent(&obj, params);
    Logistic {
        columns,
        means,
        scales,
        intercept: d.theta[0],
        weights: d.theta[1..].to_vec(),
        loss_trace: d.trace,
        converged: d.converged,
    }
}

impl Logistic {
    pub fn margin(&self, row: ArrayView1<f64>) -> f64 {
        let mut z = self.intercept;
        for (k, c) in self.columns.iter().enumerate() {
            z += self.weights[k] * (row[*c] - self.means[k]) / self.scales[k];
        }
        z
    }

    pub fn predict_row(&self, row: ArrayView1<f64>) -> f64 {
        sigmoid(self.margin(row))
    }

    pub fn add_contributions(&self, row: ArrayView1<f64>, out: &mut [f64]) {
        for (k, c) in self.columns.iter().enumerate() {
            out[*c] += self.weights[k] * (row[*c] - self.means[k]) / self.scales[k];
        }
    }

    /// Absolute standardized coefficients.
    pub fn importances(&self, p: usize) -> Vec<f64> {
        let mut imp = vec![0.0; p];
        for (k, c) in self.columns.iter().enumerate() {
            imp[*c] = self.weights[k].abs();
        }
        imp
    }
}
