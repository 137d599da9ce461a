//! Feature quantization and best-split search.

use super::FeatureMatrix;

pub(crate) const MISSING_BIN: u16 = u16::MAX;

/// Relative slack under which two gains count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

/// A split of a node's instances: `x ≤ threshold` goes left, missing values
/// follow `default_left`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
    pub default_left: bool,
}

/// Gradient and hessian sums of a set of instances.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct Stats {
    pub grad: f64,
    pub hess: f64,
    pub count: usize,
}

impl Stats {
    fn add(&mut self, g: f64, h: f64) {
        self.grad += g;
        self.hess += h;
        self.count += 1;
    }

    pub(crate) fn of(instances: &[usize], grads: &[f64], hess: &[f64]) -> Stats {
        let mut s = Stats::default();
        for &i in instances {
            s.add(grads[i], hess[i]);
        }
        s
    }
}

/// `½[G_L²/(H_L+λ) + G_R²/(H_R+λ) − G²/(H+λ)] − γ`.
pub fn split_gain(left: (f64, f64), right: (f64, f64), lambda: f64, gamma: f64) -> f64 {
    let score = |g: f64, h: f64| g * g / (h + lambda);
    let (g, h) = (left.0 + right.0, left.1 + right.1);
    0.5 * (score(left.0, left.1) + score(right.0, right.1) - score(g, h)) - gamma
}

/// Whether `gain` beats `best` beyond rounding noise.
pub(crate) fn improves(gain: f64, best: Option<f64>) -> bool {
    match best {
        None => gain > 0.0,
        Some(b) => gain > b + TIE_TOLERANCE * b.abs().max(1.0),
    }
}

/// Scans the thresholds of one feature. `bins` holds per-value statistics in
/// ascending value order, `bounds[b]` the largest value of bin `b`.
pub(crate) fn scan_feature(
    feature: usize,
    bins: &[Stats],
    bounds: &[f64],
    missing: Stats,
    total: Stats,
    (lambda, gamma): (f64, f64),
    best: &mut Option<SplitCandidate>,
) {
    let mut left = Stats::default();
    for b in 0..bins.len() {
        left.grad += bins[b].grad;
        left.hess += bins[b].hess;
        left.count += bins[b].count;
        if bins[b].count == 0 {
            continue;
        }
        for default_left in [true, false] {
            let (gl, hl, nl) = if default_left {
                (left.grad + missing.grad, left.hess + missing.hess, left.count + missing.count)
            } else {
                (left.grad, left.hess, left.count)
            };
            let nr = total.count - nl;
            if nl == 0 || nr == 0 {
                continue;
            }
            let gain = split_gain((gl, hl), (total.grad - gl, total.hess - hl), lambda, gamma);
            if improves(gain, best.map(|c| c.gain)) {
                *best = Some(SplitCandidate {
                    feature,
                    threshold: bounds[b],
                    gain,
                    default_left,
                });
            }
        }
    }
}

/// Per-feature ascending bin upper bounds and the binned matrix
/// (feature-major, `MISSING_BIN` for missing values).
#[derive(Debug, Clone)]
pub(crate) struct BinnedMatrix {
    pub n_rows: usize,
    pub bounds: Vec<Vec<f64>>,
    pub bins: Vec<u16>,
}

impl BinnedMatrix {
    /// Distinct values become bins when there are at most `n_bins` of them;
    /// otherwise bounds are taken at evenly spaced quantiles.
    pub fn new(features: &FeatureMatrix, n_bins: usize) -> Self {
        let (n_rows, n_cols) = (features.n_rows(), features.n_cols());
        let mut bounds = Vec::with_capacity(n_cols);
        let mut bins = vec![MISSING_BIN; n_rows * n_cols];
        let mut column = Vec::with_capacity(n_rows);
        for f in 0..n_cols {
            column.clear();
            column.extend((0..n_rows).map(|r| features.get(r, f)).filter(|v| !v.is_nan()));
            column.sort_by(f64::total_cmp);
            let mut distinct = column.clone();
            distinct.dedup();
            let edges = if distinct.len() <= n_bins {
                distinct
            } else {
                let mut e: Vec<f64> = (1..=n_bins)
                    .map(|q| column[(q * column.len()).div_ceil(n_bins) - 1])
                    .collect();
                e.dedup();
                e
            };
            for r in 0..n_rows {
                let v = features.get(r, f);
                if !v.is_nan() {
                    bins[f * n_rows + r] = edges.partition_point(|&e| e < v) as u16;
                }
            }
            bounds.push(edges);
        }
        Self { n_rows, bounds, bins }
    }

    pub fn bin(&self, row: usize, feature: usize) -> u16 {
        self.bins[feature * self.n_rows + row]
    }

    pub fn best_split(
        &self,
        instances: &[usize],
        grads: &[f64],
        hess: &[f64],
        lambda: f64,
        gamma: f64,
    ) -> Option<SplitCandidate> {
        let total = Stats::of(instances, grads, hess);
        let mut best = None;
        let mut hist = Vec::new();
        for (f, bounds) in self.bounds.iter().enumerate() {
            if bounds.is_empty() {
                continue;
            }
            hist.clear();
            hist.resize(bounds.len(), Stats::default());
            let mut missing = Stats::default();
            let column = &self.bins[f * self.n_rows..(f + 1) * self.n_rows];
            for &i in instances {
                match column[i] {
                    MISSING_BIN => missing.add(grads[i], hess[i]),
                    b => hist[b as usize].add(grads[i], hess[i]),
                }
            }
            scan_feature(f, &hist, bounds, missing, total, (lambda, gamma), &mut best);
        }
        best
    }
}

/// Sort-based exact greedy split search over raw feature values.
///
/// Every distinct value of every feature is a candidate threshold.
pub fn find_best_split(
    features: &FeatureMatrix,
    instances: &[usize],
    grads: &[f64],
    hess: &[f64],
    lambda: f64,
    gamma: f64,
) -> Option<SplitCandidate> {
    let total = Stats::of(instances, grads, hess);
    let mut best = None;
    let mut order: Vec<usize> = Vec::with_capacity(instances.len());
    let (mut groups, mut values) = (Vec::new(), Vec::new());
    for f in 0..features.n_cols() {
        let mut missing = Stats::default();
        order.clear();
        for &i in instances {
            if features.get(i, f).is_nan() {
                missing.add(grads[i], hess[i]);
            } else {
                order.push(i);
            }
        }
        // Stable, so equal values keep index order and sum like a histogram.
        order.sort_by(|&a, &b| features.get(a, f).partial_cmp(&features.get(b, f)).expect("missing values removed"));
        groups.clear();
        values.clear();
        for &i in &order {
            let v = features.get(i, f);
            if values.last() != Some(&v) {
                values.push(v);
                groups.push(Stats::default());
            }
            groups.last_mut().expect("group pushed").add(grads[i], hess[i]);
        }
        scan_feature(f, &groups, &values, missing, total, (lambda, gamma), &mut best);
    }
    best
}
