//! Gradient-boosted decision trees with a multi-class softmax objective,
//! trained on flattened windows.

mod split;

pub use split::{find_best_split, split_gain, SplitCandidate};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{argmax, softmax_in_place, Array};
use crate::preprocess::WindowSet;
use split::{BinnedMatrix, MISSING_BIN};

pub const GBT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GbtError {
    #[error("target class {target} out of range for {classes} classes")]
    InvalidTarget { target: usize, classes: usize },
    #[error("degenerate training data: {0}")]
    DegenerateData(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid boosting configuration: {0}")]
    InvalidConfig(String),
    #[error("ensemble document: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitSearch {
    /// Quantized features, one histogram per feature and node.
    #[default]
    Histogram,
    /// Every distinct raw value is a candidate threshold.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbtConfig {
    pub eta: f64,
    pub max_depth: usize,
    pub n_rounds: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub n_classes: usize,
    pub n_bins: usize,
    pub split_search: SplitSearch,
}

impl Default for GbtConfig {
    fn default() -> Self {
        Self {
            eta: 0.3,
            max_depth: 6,
            n_rounds: 50,
            lambda: 1.0,
            gamma: 0.0,
            n_classes: 2,
            n_bins: 256,
            split_search: SplitSearch::Histogram,
        }
    }
}

impl GbtConfig {
    /// `eta = 0` is accepted as the no-learning baseline.
    pub fn validate(&self) -> Result<(), GbtError> {
        let fail = |m: String| Err(GbtError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.eta) {
            return fail(format!("eta {} outside [0, 1]", self.eta));
        }
        if self.max_depth == 0 || self.n_rounds == 0 {
            return fail("max_depth and n_rounds must be at least 1".into());
        }
        if self.n_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if !(2..=usize::from(MISSING_BIN)).contains(&self.n_bins) {
            return fail(format!("n_bins {} outside [2, {}]", self.n_bins, MISSING_BIN));
        }
        if !(self.lambda >= 0.0 && self.gamma >= 0.0) {
            return fail("lambda and gamma must be non-negative".into());
        }
        Ok(())
    }
}

/// Dense row-major feature matrix; `NaN` marks a missing value.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Result<Self, GbtError> {
        if data.len() != n_rows * n_cols {
            return Err(GbtError::ShapeMismatch(format!(
                "{} values for {n_rows}x{n_cols}",
                data.len()
            )));
        }
        Ok(Self { n_rows, n_cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, GbtError> {
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(GbtError::ShapeMismatch("rows differ in length".into()));
        }
        Self::new(rows.len(), n_cols, rows.concat())
    }

    /// One flattened row per window.
    pub fn from_windows(windows: &WindowSet) -> Self {
        let (w, c, t) = windows.shape();
        Self {
            n_rows: w,
            n_cols: c * t,
            data: windows.data().to_vec(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n_cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.n_cols..(row + 1) * self.n_cols]
    }
}

/// Channel-major flattening of a `C×T` window: feature `c·T + t`.
pub fn flatten_window(window: &Array) -> Vec<f64> {
    window.data().to_vec()
}

/// Per-class `(g, h)` of the softmax cross-entropy: `g = p − onehot`, `h = p(1 − p)`.
pub fn softmax_grad_hess(logits: &[f64], target: usize) -> Result<Vec<(f64, f64)>, GbtError> {
    if target >= logits.len() {
        return Err(GbtError::InvalidTarget {
            target,
            classes: logits.len(),
        });
    }
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    Ok(p
        .iter()
        .enumerate()
        .map(|(k, &pk)| (pk - if k == target { 1.0 } else { 0.0 }, pk * (1.0 - pk)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    /// `x ≤ threshold` goes to `left`; missing values follow `default_left`.
    Split {
        feature: usize,
        threshold: f64,
        default_left: bool,
        left: usize,
        right: usize,
    },
    /// Leaf weight, already multiplied by the learning rate.
    Leaf { weight: f64 },
}

/// Nodes in preorder; the root is node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tree {
    pub round: usize,
    pub class: usize,
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict(&self, features: &[f64]) -> f64 {
        let mut idx = 0;
        loop {
            match self.nodes[idx] {
                TreeNode::Leaf { weight } => return weight,
                TreeNode::Split {
                    feature,
                    threshold,
                    default_left,
                    left,
                    right,
                } => {
                    let x = features[feature];
                    let go_left = if x.is_nan() { default_left } else { x <= threshold };
                    idx = if go_left { left } else { right };
                }
            }
        }
    }

    /// Edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], idx: usize) -> usize {
            match nodes[idx] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaf_weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            TreeNode::Leaf { weight } => Some(*weight),
            TreeNode::Split { .. } => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GbtEnsemble {
    pub format_version: u32,
    pub config: GbtConfig,
    pub feature_count: usize,
    /// `n_classes` trees per round, ordered by round then class.
    pub trees: Vec<Tree>,
    /// Multi-class log-loss on the training set after each round.
    pub train_log_loss: Vec<f64>,
}

/// Summed leaf weights per class and the arg-max class (ties to the lowest).
#[derive(Debug, Clone, PartialEq)]
pub struct GbtPrediction {
    pub class: usize,
    pub scores: Vec<f64>,
}

impl GbtEnsemble {
    pub fn predict(&self, features: &[f64]) -> Result<GbtPrediction, GbtError> {
        if features.len() != self.feature_count {
            return Err(GbtError::ShapeMismatch(format!(
                "{} features, ensemble expects {}",
                features.len(),
                self.feature_count
            )));
        }
        let mut scores = vec![0.0; self.config.n_classes];
        for tree in &self.trees {
            scores[tree.class] += tree.predict(features);
        }
        Ok(GbtPrediction {
            class: argmax(&scores),
            scores,
        })
    }

    pub fn n_rounds(&self) -> usize {
        self.trees.len() / self.config.n_classes
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("ensemble serializes")
    }

    pub fn from_text(text: &str) -> Result<Self, GbtError> {
        let e: GbtEnsemble = serde_json::from_str(text).map_err(|e| GbtError::Format(e.to_string()))?;
        if e.format_version != GBT_FORMAT_VERSION {
            return Err(GbtError::Format(format!("unsupported format version {}", e.format_version)));
        }
        e.config.validate()?;
        if e.trees.len() % e.config.n_classes != 0 {
            return Err(GbtError::Format("incomplete boosting round".into()));
        }
        for t in &e.trees {
            for n in &t.nodes {
                if let TreeNode::Split { feature, left, right, .. } = *n {
                    if feature >= e.feature_count || left >= t.nodes.len() || right >= t.nodes.len() {
                        return Err(GbtError::Format("node reference out of range".into()));
                    }
                }
            }
        }
        Ok(e)
    }
}

/// Mean of `−log softmax(scores)[label]` over the rows.
pub fn multiclass_log_loss(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(s, &y)| {
            let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + s.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            lse - s[y]
        })
        .sum();
    total / labels.len() as f64
}

enum Searcher<'a> {
    Binned(BinnedMatrix),
    Exact(&'a FeatureMatrix),
}

impl Searcher<'_> {
    fn best_split(&self, instances: &[usize], g: &[f64], h: &[f64], cfg: &GbtConfig) -> Option<SplitCandidate> {
        match self {
            Searcher::Binned(b) => b.best_split(instances, g, h, cfg.lambda, cfg.gamma),
            Searcher::Exact(f) => find_best_split(f, instances, g, h, cfg.lambda, cfg.gamma),
        }
    }

    fn goes_left(&self, features: &FeatureMatrix, row: usize, split: &SplitCandidate) -> bool {
        let missing = match self {
            Searcher::Binned(b) => b.bin(row, split.feature) == MISSING_BIN,
            Searcher::Exact(_) => features.get(row, split.feature).is_nan(),
        };
        if missing {
            split.default_left
        } else {
            features.get(row, split.feature) <= split.threshold
        }
    }
}

struct TreeBuilder<'a> {
    features: &'a FeatureMatrix,
    searcher: &'a Searcher<'a>,
    grads: &'a [f64],
    hess: &'a [f64],
    config: &'a GbtConfig,
    nodes: Vec<TreeNode>,
    /// Leaf weight reached by every training row.
    row_output: Vec<f64>,
}

impl TreeBuilder<'_> {
    fn grow(&mut self, instances: Vec<usize>, depth: usize) -> usize {
        let idx = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { weight: 0.0 });
        let split = if depth < self.config.max_depth && instances.len() >= 2 {
            self.searcher.best_split(&instances, self.grads, self.hess, self.config)
        } else {
            None
        };
        match split {
            Some(s) => {
                let (left, right): (Vec<usize>, Vec<usize>) = instances
                    .iter()
                    .partition(|&&i| self.searcher.goes_left(self.features, i, &s));
                let l = self.grow(left, depth + 1);
                let r = self.grow(right, depth + 1);
                self.nodes[idx] = TreeNode::Split {
                    feature: s.feature,
                    threshold: s.threshold,
                    default_left: s.default_left,
                    left: l,
                    right: r,
                };
            }
            None => {
                let (g, h) = instances
                    .iter()
                    .fold((0.0, 0.0), |(g, h), &i| (g + self.grads[i], h + self.hess[i]));
                let weight = self.config.eta * (-g / (h + self.config.lambda));
                for &i in &instances {
                    self.row_output[i] = weight;
                }
                self.nodes[idx] = TreeNode::Leaf { weight };
            }
        }
        idx
    }
}

/// Boosts `n_rounds` rounds of one tree per class from zero initial scores.
///
/// Each round takes gradients at the current scores for all classes, then
/// fits every class's tree before any score is updated.
pub fn train_gbt(features: &FeatureMatrix, labels: &[usize], config: &GbtConfig) -> Result<GbtEnsemble, GbtError> {
    config.validate()?;
    let (n, n_classes) = (features.n_rows(), config.n_classes);
    if labels.len() != n {
        return Err(GbtError::ShapeMismatch(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&target) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(GbtError::InvalidTarget {
            target,
            classes: n_classes,
        });
    }
    for class in 0..n_classes {
        if !labels.contains(&class) {
            return Err(GbtError::DegenerateData(format!("class {class} has no instances")));
        }
    }
    let searcher = match config.split_search {
        SplitSearch::Histogram => Searcher::Binned(BinnedMatrix::new(features, config.n_bins)),
        SplitSearch::Exact => Searcher::Exact(features),
    };
    let mut scores = vec![vec![0.0; n_classes]; n];
    let mut trees = Vec::with_capacity(config.n_rounds * n_classes);
    let mut history = Vec::with_capacity(config.n_rounds);
    let mut grads = vec![vec![0.0; n]; n_classes];
    let mut hess = vec![vec![0.0; n]; n_classes];
    for round in 0..config.n_rounds {
        for (i, (s, &y)) in scores.iter().zip(labels).enumerate() {
            for (k, (g, h)) in softmax_grad_hess(s, y)?.into_iter().enumerate() {
                grads[k][i] = g;
                hess[k][i] = h;
            }
        }
        let mut updates = Vec::with_capacity(n_classes);
        for class in 0..n_classes {
            let mut builder = TreeBuilder {
                features,
                searcher: &searcher,
                grads: &grads[class],
                hess: &hess[class],
                config,
                nodes: Vec::new(),
                row_output: vec![0.0; n],
            };
            builder.grow((0..n).collect(), 0);
            trees.push(Tree {
                round,
                class,
                nodes: builder.nodes,
            });
            updates.push(builder.row_output);
        }
        for (class, update) in updates.iter().enumerate() {
            for (s, u) in scores.iter_mut().zip(update) {
                s[class] += u;
            }
        }
        history.push(multiclass_log_loss(&scores, labels));
    }
    Ok(GbtEnsemble {
        format_version: GBT_FORMAT_VERSION,
        config: *config,
        feature_count: features.n_cols(),
        trees,
        train_log_loss: history,
    })
}

pub fn predict_gbt(ensemble: &GbtEnsemble, features: &[f64]) -> Result<GbtPrediction, GbtError> {
    ensemble.predict(features)
}
