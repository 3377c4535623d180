//! CART trees grown on binned features.
//!
//! Every feature is discretized once per training set. When a feature has at most
//! `max_bins` distinct values each value gets its own bin and splits are exact. Split
//! thresholds are midpoints between the largest value left of the cut and the
//! smallest value right of it, among values present in the node.

use ndarray::{Array2, ArrayView1};
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

/// Discretized training features, column-major.
#[derive(Debug, Clone)]
pub struct BinnedMatrix {
    bins: Vec<Vec<u16>>,
    bin_min: Vec<Vec<f64>>,
    bin_max: Vec<Vec<f64>>,
    n_rows: usize,
}

impl BinnedMatrix {
    pub fn new(x: &Array2<f64>, max_bins: usize) -> Self {
        let max_bins = max_bins.clamp(2, u16::MAX as usize);
        let n_rows = x.nrows();
        let mut bins = Vec::with_capacity(x.ncols());
        let mut bin_min = Vec::with_capacity(x.ncols());
        let mut bin_max = Vec::with_capacity(x.ncols());
        for col in x.columns() {
            let mut sorted: Vec<f64> = col.to_vec();
            sorted.sort_by(f64::total_cmp);
            let cuts = cut_points(&sorted, max_bins);
            let assign: Vec<u16> = col
                .iter()
                .map(|v| cuts.partition_point(|c| *c < *v) as u16)
                .collect();
            let nb = cuts.len() + 1;
            let mut lo = vec![f64::INFINITY; nb];
            let mut hi = vec![f64::NEG_INFINITY; nb];
            for (b, v) in assign.iter().zip(col.iter()) {
                let b = *b as usize;
                lo[b] = lo[b].min(*v);
                hi[b] = hi[b].max(*v);
            }
            bins.push(assign);
            bin_min.push(lo);
            bin_max.push(hi);
        }
        Self {
            bins,
            bin_min,
            bin_max,
            n_rows,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.bins.len()
    }

    fn n_bins(&self, f: usize) -> usize {
        self.bin_min[f].len()
    }
}

/// Upper edges separating bins; a value `v` lands in bin `#{c : c < v}`.
fn cut_points(sorted: &[f64], max_bins: usize) -> Vec<f64> {
    let mut distinct: Vec<(f64, usize)> = Vec::new();
    for v in sorted {
        match distinct.last_mut() {
            Some((last, n)) if *last == *v => *n += 1,
            _ => distinct.push((*v, 1)),
        }
    }
    if distinct.len() <= max_bins {
        return distinct.windows(2).map(|w| w[0].0).collect();
    }
    let n = sorted.len() as f64;
    let mut cuts = Vec::with_capacity(max_bins - 1);
    let mut cum = 0usize;
    let mut next_q = 1usize;
    for (v, count) in &distinct[..distinct.len() - 1] {
        cum += count;
        if cum as f64 >= next_q as f64 * n / max_bins as f64 {
            cuts.push(*v);
            while next_q < max_bins && cum as f64 >= next_q as f64 * n / max_bins as f64 {
                next_q += 1;
            }
            if cuts.len() == max_bins - 1 {
                break;
            }
        }
    }
    cuts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Binary classification; targets are 0/1 and leaves hold the positive fraction.
    Gini,
    /// Regression on residuals; leaves hold a Newton step `sum(t) / sum(h)`.
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    pub max_depth: Option<usize>,
    pub min_samples_split: f64,
    pub min_samples_leaf: f64,
    /// Features examined per node; `None` means all.
    pub max_features: Option<usize>,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            max_depth: None,
            min_samples_split: 2.0,
            min_samples_leaf: 1.0,
            max_features: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Node {
    /// `None` for leaves.
    pub feature: Option<usize>,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
    pub value: f64,
    pub weight: f64,
    /// Weighted impurity decrease of this node's split.
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    fn leaf_for(&self, row: ArrayView1<f64>) -> usize {
        let mut i = 0;
        while let Some(f) = self.nodes[i].feature {
            let n = &self.nodes[i];
            i = if row[f] <= n.threshold {
                n.left
            } else {
                n.right
            };
        }
        i
    }

    pub fn predict_row(&self, row: ArrayView1<f64>) -> f64 {
        self.nodes[self.leaf_for(row)].value
    }

    /// Adds per-feature changes in node value along the decision path.
    pub fn add_contributions(&self, row: ArrayView1<f64>, scale: f64, out: &mut [f64]) {
        let mut i = 0;
        while let Some(f) = self.nodes[i].feature {
            let n = &self.nodes[i];
            let next = if row[f] <= n.threshold {
                n.left
            } else {
                n.right
            };
            out[f] += scale * (self.nodes[next].value - n.value);
            i = next;
        }
    }

    pub fn add_importances(&self, out: &mut [f64]) {
        for n in &self.nodes {
            if let Some(f) = n.feature {
                out[f] += n.gain;
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> usize {
            match t.nodes[i].feature {
                None => 0,
                Some(_) => 1 + walk(t, t.nodes[i].left).max(walk(t, t.nodes[i].right)),
            }
        }
        walk(self, 0)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Stats {
    w: f64,
    t: f64,
    h: f64,
}

impl Stats {
    fn add(&mut self, w: f64, t: f64, h: f64) {
        self.w += w;
        self.t += w * t;
        self.h += w * h;
    }

    fn sub(self, o: Stats) -> Stats {
        Stats {
            w: self.w - o.w,
            t: self.t - o.t,
            h: self.h - o.h,
        }
    }

    /// Quantity whose increase across a split is the impurity decrease.
    fn score(&self, criterion: Criterion) -> f64 {
        if self.w <= 0.0 {
            return 0.0;
        }
        match criterion {
            // w * gini = 2 t (w - t) / w, negated.
            Criterion::Gini => -2.0 * self.t * (self.w - self.t) / self.w,
            Criterion::Newton => self.t * self.t / self.w,
        }
    }

    fn value(&self, criterion: Criterion) -> f64 {
        match criterion {
            Criterion::Gini => {
                if self.w > 0.0 {
                    self.t / self.w
                } else {
                    0.0
                }
            }
            Criterion::Newton => {
                if self.h > 1e-12 {
                    self.t / self.h
                } else {
                    0.0
                }
            }
        }
    }

    fn is_pure(&self, criterion: Criterion) -> bool {
        criterion == Criterion::Gini && (self.t <= 1e-12 || self.w - self.t <= 1e-12)
    }
}

struct Split {
    feature: usize,
    left_bin: usize,
    threshold: f64,
    gain: f64,
}

/// Training targets for one tree. `hess` is only read by [`Criterion::Newton`].
pub struct Targets<'a> {
    pub target: &'a [f64],
    pub hess: Option<&'a [f64]>,
    pub weight: &'a [f64],
}

pub fn grow_tree<R: Rng>(
    data: &BinnedMatrix,
    targets: &Targets<'_>,
    criterion: Criterion,
    params: &TreeParams,
    rng: &mut R,
) -> Tree {
    let mut rows: Vec<u32> = (0..data.n_rows() as u32)
        .filter(|r| targets.weight[*r as usize] > 0.0)
        .collect();
    let p = data.n_features();
    let m = params.max_features.unwrap_or(p).clamp(1, p.max(1));
    let mut nodes = Vec::new();
    let mut feature_pool: Vec<usize> = (0..p).collect();
    let mut hist = Vec::new();
    // (node index, row range, depth)
    let mut stack = vec![(0usize, 0usize, rows.len(), 0usize)];
    nodes.push(placeholder());
    while let Some((id, lo, hi, depth)) = stack.pop() {
        let slice = &mut rows[lo..hi];
        let mut total = Stats::default();
        for r in slice.iter() {
            let r = *r as usize;
            total.add(
                targets.weight[r],
                targets.target[r],
                targets.hess.map_or(0.0, |h| h[r]),
            );
        }
        let node = &mut nodes[id];
        node.value = total.value(criterion);
        node.weight = total.w;
        let can_split = params.max_depth.is_none_or(|d| depth < d)
            && total.w >= params.min_samples_split
            && total.w >= 2.0 * params.min_samples_leaf
            && !total.is_pure(criterion);
        if !can_split {
            continue;
        }
        let features: &[usize] = if m < p {
            // Partial Fisher-Yates; evaluate in ascending order so ties favour the smaller index.
            for i in 0..m {
                let j = rng.random_range(i..p);
                feature_pool.swap(i, j);
            }
            feature_pool[..m].sort_unstable();
            &feature_pool[..m]
        } else {
            &feature_pool
        };
        let best = best_split(
            data, targets, criterion, params, slice, total, features, &mut hist,
        );
        if m < p {
            feature_pool.sort_unstable();
        }
        let Some(split) = best else { continue };
        let col = &data.bins[split.feature];
        let mid = partition(slice, |r| col[r as usize] as usize <= split.left_bin);
        let left = nodes.len();
        nodes.push(placeholder());
        let right = nodes.len();
        nodes.push(placeholder());
        let node = &mut nodes[id];
        node.feature = Some(split.feature);
        node.threshold = split.threshold;
        node.left = left;
        node.right = right;
        node.gain = split.gain;
        stack.push((right, lo + mid, hi, depth + 1));
        stack.push((left, lo, lo + mid, depth + 1));
    }
    Tree { nodes }
}

fn placeholder() -> Node {
    Node {
        feature: None,
        threshold: 0.0,
        left: 0,
        right: 0,
        value: 0.0,
        weight: 0.0,
        gain: 0.0,
    }
}

/// Stable in-place partition; returns the number of rows satisfying `pred`.
fn partition(rows: &mut [u32], pred: impl Fn(u32) -> bool) -> usize {
    let (left, right): (Vec<u32>, Vec<u32>) = rows.iter().partition(|r| pred(**r));
    let n = left.len();
    rows[..n].copy_from_slice(&left);
    rows[n..].copy_from_slice(&right);
    n
}

#[allow(clippy::too_many_arguments)]
fn best_split(
    data: &BinnedMatrix,
    targets: &Targets<'_>,
    criterion: Criterion,
    params: &TreeParams,
    rows: &[u32],
    total: Stats,
    features: &[usize],
    hist: &mut Vec<Stats>,
) -> Option<Split> {
    let parent = total.score(criterion);
    let mut best: Option<Split> = None;
    for &f in features {
        let nb = data.n_bins(f);
        hist.clear();
        hist.resize(nb, Stats::default());
        let col = &data.bins[f];
        for r in rows {
            let r = *r as usize;
            hist[col[r] as usize].add(
                targets.weight[r],
                targets.target[r],
                targets.hess.map_or(0.0, |h| h[r]),
            );
        }
        let mut left = Stats::default();
        let mut last_nonempty: Option<usize> = None;
        for b in 0..nb {
            if hist[b].w <= 0.0 {
                continue;
            }
            if let Some(a) = last_nonempty {
                // Candidate cut between bins a and b.
                let right = total.sub(left);
                if left.w >= params.min_samples_leaf && right.w >= params.min_samples_leaf {
                    let gain = left.score(criterion) + right.score(criterion) - parent;
                    if gain > 1e-12 && best.as_ref().is_none_or(|s| gain > s.gain) {
                        let (x, y) = (data.bin_max[f][a], data.bin_min[f][b]);
                        let mut threshold = (x + y) / 2.0;
                        if threshold >= y || !threshold.is_finite() {
                            threshold = x;
                        }
                        best = Some(Split {
                            feature: f,
                            left_bin: a,
                            threshold,
                            gain,
                        });
                    }
                }
            }
            left.w += hist[b].w;
            left.t += hist[b].t;
            left.h += hist[b].h;
            last_nonempty = Some(b);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fit(x: &Array2<f64>, y: &[f64], params: TreeParams) -> Tree {
        let data = BinnedMatrix::new(x, 255);
        let w = vec![1.0; y.len()];
        let targets = Targets {
            target: y,
            hess: None,
            weight: &w,
        };
        grow_tree(
            &data,
            &targets,
            Criterion::Gini,
            &params,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
    }

    #[test]
    fn threshold_between_two_and_three() {
        let x = array![[1.0], [2.0], [3.0], [4.0]];
        let t = fit(&x, &[0.0, 0.0, 1.0, 1.0], TreeParams::default());
        assert_eq!(t.nodes[0].feature, Some(0));
        assert_eq!(t.nodes[0].threshold, 2.5);
        assert_eq!(t.predict_row(array![2.4].view()), 0.0);
        assert_eq!(t.predict_row(array![2.6].view()), 1.0);
        // 50/50 root: weighted gini 4 * 0.5 = 2, children pure.
        assert!((t.nodes[0].gain - 2.0).abs() < 1e-12);
    }

    #[test]
    fn brute_force_threshold_oracle() {
        let xs = [3.0, 1.0, 4.0, 1.5, 5.0, 9.0, 2.0, 6.0];
        let ys = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let gini = |v: &[f64]| {
            let n = v.len() as f64;
            let p = v.iter().sum::<f64>() / n;
            n * (1.0 - p * p - (1.0 - p) * (1.0 - p))
        };
        let mut sorted: Vec<f64> = xs.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut best = (f64::NEG_INFINITY, 0.0);
        for w in sorted.windows(2) {
            let th = (w[0] + w[1]) / 2.0;
            let l: Vec<f64> = xs
                .iter()
                .zip(&ys)
                .filter(|(x, _)| **x <= th)
                .map(|(_, y)| *y)
                .collect();
            let r: Vec<f64> = xs
                .iter()
                .zip(&ys)
                .filter(|(x, _)| **x > th)
                .map(|(_, y)| *y)
                .collect();
            let dec = gini(&ys) - gini(&l) - gini(&r);
            if dec > best.0 + 1e-12 {
                best = (dec, th);
            }
        }
        let x = Array2::from_shape_vec((8, 1), xs.to_vec()).unwrap();
        let params = TreeParams {
            max_depth: Some(1),
            ..Default::default()
        };
        let t = fit(&x, &ys, params);
        assert_eq!(t.nodes[0].threshold, best.1);
        assert!((t.nodes[0].gain - best.0).abs() < 1e-12);
    }

    #[test]
    fn pure_node_is_leaf() {
        let x = array![[1.0], [2.0], [3.0]];
        let t = fit(&x, &[1.0, 1.0, 1.0], TreeParams::default());
        assert_eq!(t.nodes.len(), 1);
        assert_eq!(t.nodes[0].value, 1.0);
    }

    #[test]
    fn respects_depth_and_leaf_size() {
        let x = Array2::from_shape_fn((40, 2), |(i, j)| ((i * 7 + j * 3) % 11) as f64);
        let y: Vec<f64> = (0..40).map(|i| ((i * 5) % 3 == 0) as u8 as f64).collect();
        let t = fit(
            &x,
            &y,
            TreeParams {
                max_depth: Some(3),
                min_samples_leaf: 4.0,
                ..Default::default()
            },
        );
        assert!(t.depth() <= 3);
        assert!(t
            .nodes
            .iter()
            .filter(|n| n.feature.is_none())
            .all(|n| n.weight >= 4.0));
    }

    #[test]
    fn ties_prefer_smaller_feature() {
        // Both columns separate the classes equally well.
        let x = array![[1.0, 10.0], [2.0, 20.0], [3.0, 30.0], [4.0, 40.0]];
        let t = fit(&x, &[0.0, 0.0, 1.0, 1.0], TreeParams::default());
        assert_eq!(t.nodes[0].feature, Some(0));
    }

    #[test]
    fn quantile_bins_cap_bin_count() {
        let x = Array2::from_shape_fn((1000, 1), |(i, _)| i as f64);
        let data = BinnedMatrix::new(&x, 16);
        assert!(data.n_bins(0) <= 16);
        assert!(data.n_bins(0) >= 8);
        let exact = BinnedMatrix::new(&x, 2000);
        assert_eq!(exact.n_bins(0), 1000);
    }
}
