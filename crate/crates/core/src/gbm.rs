//! Gradient-boosted regression trees with a logistic link.
//!
//! Each stage fits a tree to the residuals `label - p` with exact greedy
//! (weighted) variance-reduction splits over presorted columns, grown level
//! by level. Leaf values take one Newton step, `sum(g) / (sum(h) + lambda)`,
//! and the ensemble score is `sigmoid(base + learning_rate * sum(tree))`.
//!
//! The model file is JSON:
//!
//! | field            | meaning                                              |
//! |------------------|------------------------------------------------------|
//! | `format`         | always `"mastitis-gbm"`                              |
//! | `format_version` | `1`                                                  |
//! | `catalog_version`| feature catalog the model was trained against       |
//! | `n_features`     | expected vector length                              |
//! | `learning_rate`  | shrinkage applied to every tree output              |
//! | `base_score`     | prior log-odds                                       |
//! | `config`         | echo of the training configuration                  |
//! | `trees[].nodes`  | node arena, root first; a node is either `{"leaf": v}` or `{"split": {feature, threshold, left, right, default_left}}` with child indices into the same array |
//!
//! A split sends `x[feature] < threshold` left, NaN to the default side.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{FeatureVector, Label, LabeledInstance};
use crate::featcat::FeatureCatalog;

pub const MODEL_FORMAT: &str = "mastitis-gbm";
pub const MODEL_FORMAT_VERSION: u32 = 1;
/// L2 penalty on leaf values.
pub const LEAF_LAMBDA: f64 = 1.0;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

const MIN_SPLIT_GAIN: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GbmError {
    #[error("training data is empty")]
    EmptyInput,
    #[error("training data contains only {0:?} instances")]
    SingleClass(Label),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("threshold must be strictly between 0 and 1, got {0}")]
    InvalidThreshold(f64),
    #[error("model was trained for catalog `{model}` but the catalog is `{catalog}`")]
    CatalogVersion { model: String, catalog: String },
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub learning_rate: f64,
    pub subsample_fraction: f64,
    pub seed: u64,
    /// Sample weight of positive (Sick) instances; negatives weigh 1.
    pub positive_class_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_trees: 150,
            max_depth: 4,
            min_samples_leaf: 20,
            learning_rate: 0.1,
            subsample_fraction: 0.8,
            seed: 7,
            positive_class_weight: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GbmError> {
        let bad = |m: &str| Err(GbmError::InvalidConfig(m.to_string()));
        if self.max_depth == 0 {
            return bad("max_depth must be positive");
        }
        if self.min_samples_leaf == 0 {
            return bad("min_samples_leaf must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate must be in (0, 1]");
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return bad("subsample_fraction must be in (0, 1]");
        }
        if !(self.positive_class_weight.is_finite() && self.positive_class_weight > 0.0) {
            return bad("positive_class_weight must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        default_left: bool,
    },
    Leaf(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    /// Leaf value reached by `x`.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf(v) => return *v,
                TreeNode::Split { feature, threshold, left, right, default_left } => {
                    let v = x[*feature];
                    i = if v.is_nan() {
                        if *default_left { *left } else { *right }
                    } else if v < *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match &nodes[i] {
                TreeNode::Leaf(_) => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    fn check(&self, n_features: usize) -> Result<(), String> {
        if self.nodes.is_empty() {
            return Err("tree without nodes".into());
        }
        for (i, n) in self.nodes.iter().enumerate() {
            match n {
                TreeNode::Leaf(v) if !v.is_finite() => return Err(format!("node {i}: non-finite leaf")),
                TreeNode::Split { feature, threshold, left, right, .. } => {
                    if *feature >= n_features {
                        return Err(format!("node {i}: feature index {feature} out of range"));
                    }
                    if !threshold.is_finite() {
                        return Err(format!("node {i}: non-finite threshold"));
                    }
                    // children always come after their parent, so walks terminate
                    if *left <= i || *right <= i || *left >= self.nodes.len() || *right >= self.nodes.len() {
                        return Err(format!("node {i}: bad child index"));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Anything that maps a feature vector to P(Sick).
pub trait ScoreModel: Sync {
    fn n_features(&self) -> usize;
    /// `values.len()` must equal [`ScoreModel::n_features`].
    fn score(&self, values: &[f64]) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub format: String,
    pub format_version: u32,
    pub catalog_version: String,
    pub n_features: usize,
    pub learning_rate: f64,
    pub base_score: f64,
    pub config: TrainConfig,
    pub trees: Vec<Tree>,
}

pub fn sigmoid(z: f64) -> f64 {
    let p = 1.0 / (1.0 + (-z).exp());
    p.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

impl Ensemble {
    /// Model with no trees: every score is `sigmoid(base_score)`.
    pub fn prior_only(catalog_version: impl Into<String>, n_features: usize, base_score: f64) -> Self {
        Ensemble::from_trees(catalog_version, n_features, 1.0, base_score, Vec::new())
    }

    pub fn from_trees(
        catalog_version: impl Into<String>,
        n_features: usize,
        learning_rate: f64,
        base_score: f64,
        trees: Vec<Tree>,
    ) -> Self {
        Ensemble {
            format: MODEL_FORMAT.to_string(),
            format_version: MODEL_FORMAT_VERSION,
            catalog_version: catalog_version.into(),
            n_features,
            learning_rate,
            base_score,
            config: TrainConfig { n_trees: trees.len(), learning_rate, ..TrainConfig::default() },
            trees,
        }
    }

    pub fn raw_score(&self, values: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict(values)).sum();
        self.base_score + self.learning_rate * sum
    }

    pub fn predict_values(&self, values: &[f64]) -> Result<f64, GbmError> {
        if values.len() != self.n_features {
            return Err(GbmError::DimensionMismatch { expected: self.n_features, got: values.len() });
        }
        Ok(sigmoid(self.raw_score(values)))
    }

    pub fn predict_score(&self, x: &FeatureVector) -> Result<f64, GbmError> {
        self.predict_values(&x.values)
    }

    pub fn check_catalog(&self, catalog: &FeatureCatalog) -> Result<(), GbmError> {
        if self.catalog_version != catalog.version {
            return Err(GbmError::CatalogVersion {
                model: self.catalog_version.clone(),
                catalog: catalog.version.clone(),
            });
        }
        if self.n_features != catalog.len() {
            return Err(GbmError::DimensionMismatch { expected: catalog.len(), got: self.n_features });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    /// SHA-256 of the serialized model, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn from_json(text: &str) -> Result<Self, GbmError> {
        let model: Ensemble = serde_json::from_str(text).map_err(|e| GbmError::Corrupt(e.to_string()))?;
        if model.format != MODEL_FORMAT {
            return Err(GbmError::Corrupt(format!("unknown format `{}`", model.format)));
        }
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(GbmError::Corrupt(format!("unsupported format version {}", model.format_version)));
        }
        if !model.base_score.is_finite() || !(model.learning_rate > 0.0 && model.learning_rate <= 1.0) {
            return Err(GbmError::Corrupt("invalid base score or learning rate".into()));
        }
        for (i, t) in model.trees.iter().enumerate() {
            t.check(model.n_features).map_err(|m| GbmError::Corrupt(format!("tree {i}: {m}")))?;
        }
        Ok(model)
    }
}

impl ScoreModel for Ensemble {
    fn n_features(&self) -> usize {
        self.n_features
    }

    fn score(&self, values: &[f64]) -> f64 {
        sigmoid(self.raw_score(values))
    }
}

/// `Sick` iff the score reaches the threshold.
pub fn classify(model: &Ensemble, x: &FeatureVector, threshold: f64) -> Result<Label, GbmError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(GbmError::InvalidThreshold(threshold));
    }
    Ok(label_for_score(model.predict_score(x)?, threshold))
}

pub fn label_for_score(score: f64, threshold: f64) -> Label {
    if score >= threshold {
        Label::Sick
    } else {
        Label::Healthy
    }
}

pub fn save_model(model: &Ensemble, path: impl AsRef<Path>) -> Result<(), GbmError> {
    std::fs::write(path, model.to_json())?;
    Ok(())
}

/// Reads a model and checks it against `catalog`.
pub fn load_model(path: impl AsRef<Path>, catalog: &FeatureCatalog) -> Result<Ensemble, GbmError> {
    let model = read_model(path)?;
    model.check_catalog(catalog)?;
    Ok(model)
}

/// Reads a model without a catalog check.
pub fn read_model(path: impl AsRef<Path>) -> Result<Ensemble, GbmError> {
    Ensemble::from_json(&std::fs::read_to_string(path)?)
}

/// Loss trajectory recorded while training.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// Weighted mean logistic loss on the training set after each stage,
    /// starting with the prior-only model.
    pub stage_loss: Vec<f64>,
}

pub fn train(instances: &[LabeledInstance], config: &TrainConfig, catalog_version: &str) -> Result<Ensemble, GbmError> {
    train_with_report(instances, config, catalog_version).map(|(m, _)| m)
}

pub fn train_with_report(
    instances: &[LabeledInstance],
    config: &TrainConfig,
    catalog_version: &str,
) -> Result<(Ensemble, TrainReport), GbmError> {
    let rows: Vec<&[f64]> = instances.iter().map(|i| i.x.values.as_slice()).collect();
    let labels: Vec<bool> = instances.iter().map(|i| i.label.is_sick()).collect();
    train_matrix(&rows, &labels, config, catalog_version)
}

/// Trains on a row-major matrix with boolean labels (`true` = Sick).
pub fn train_matrix(
    rows: &[&[f64]],
    labels: &[bool],
    config: &TrainConfig,
    catalog_version: &str,
) -> Result<(Ensemble, TrainReport), GbmError> {
    config.validate()?;
    if rows.is_empty() {
        return Err(GbmError::EmptyInput);
    }
    assert_eq!(rows.len(), labels.len(), "one label per row");
    let n = rows.len();
    let n_features = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != n_features) {
        return Err(GbmError::DimensionMismatch { expected: n_features, got: bad.len() });
    }
    if labels.iter().all(|l| *l) {
        return Err(GbmError::SingleClass(Label::Sick));
    }
    if labels.iter().all(|l| !*l) {
        return Err(GbmError::SingleClass(Label::Healthy));
    }

    let weights: Vec<f64> = labels.iter().map(|&y| if y { config.positive_class_weight } else { 1.0 }).collect();
    let target: Vec<f64> = labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
    let w_pos: f64 = weights.iter().zip(&target).map(|(w, y)| w * y).sum();
    let w_neg: f64 = weights.iter().zip(&target).map(|(w, y)| w * (1.0 - y)).sum();
    let base_score = (w_pos / w_neg).ln();

    let columns: Vec<Vec<f64>> = (0..n_features).map(|f| rows.iter().map(|r| r[f]).collect()).collect();
    let sorted: Vec<Vec<u32>> = columns
        .iter()
        .map(|col| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
            idx
        })
        .collect();

    let mut raw = vec![base_score; n];
    let mut report = TrainReport { stage_loss: vec![weighted_log_loss(&raw, &target, &weights)] };
    let mut trees = Vec::with_capacity(config.n_trees);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sample_size = ((n as f64 * config.subsample_fraction).round() as usize).clamp(1, n);

    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    for _ in 0..config.n_trees {
        for i in 0..n {
            let p = sigmoid(raw[i]);
            grad[i] = weights[i] * (target[i] - p);
            hess[i] = weights[i] * p * (1.0 - p);
        }
        let mut in_sample = vec![sample_size == n; n];
        if sample_size < n {
            for i in rand::seq::index::sample(&mut rng, n, sample_size).into_iter() {
                in_sample[i] = true;
            }
        }
        let tree = grow_tree(&columns, &sorted, &grad, &hess, &weights, &in_sample, config);
        for (i, r) in raw.iter_mut().enumerate() {
            *r += config.learning_rate * tree.predict(rows[i]);
        }
        report.stage_loss.push(weighted_log_loss(&raw, &target, &weights));
        trees.push(tree);
    }

    let model = Ensemble {
        format: MODEL_FORMAT.to_string(),
        format_version: MODEL_FORMAT_VERSION,
        catalog_version: catalog_version.to_string(),
        n_features,
        learning_rate: config.learning_rate,
        base_score,
        config: config.clone(),
        trees,
    };
    Ok((model, report))
}

fn weighted_log_loss(raw: &[f64], target: &[f64], weights: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut wsum = 0.0;
    for ((z, y), w) in raw.iter().zip(target).zip(weights) {
        // log(1 + e^z) - y z, stable for large |z|
        let softplus = if *z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
        total += w * (softplus - y * z);
        wsum += w;
    }
    total / wsum
}

#[derive(Debug, Clone, Copy, Default)]
struct NodeStats {
    count: usize,
    weight: f64,
    grad: f64,
    hess: f64,
}

impl NodeStats {
    fn add(&mut self, w: f64, g: f64, h: f64) {
        self.count += 1;
        self.weight += w;
        self.grad += g;
        self.hess += h;
    }

    /// Weighted sum of squares explained by the node mean residual.
    fn score(&self) -> f64 {
        if self.weight > 0.0 {
            self.grad * self.grad / self.weight
        } else {
            0.0
        }
    }

    fn leaf_value(&self) -> f64 {
        self.grad / (self.hess + LEAF_LAMBDA)
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    left: NodeStats,
}

fn grow_tree(
    columns: &[Vec<f64>],
    sorted: &[Vec<u32>],
    grad: &[f64],
    hess: &[f64],
    weights: &[f64],
    in_sample: &[bool],
    config: &TrainConfig,
) -> Tree {
    const NONE: u32 = u32::MAX;
    let n = grad.len();
    let mut nodes: Vec<TreeNode> = vec![TreeNode::Leaf(0.0)];
    // frontier slot -> node index in `nodes`
    let mut frontier: Vec<usize> = vec![0];
    let mut slot_of: Vec<u32> = (0..n).map(|i| if in_sample[i] { 0 } else { NONE }).collect();
    let mut totals = vec![NodeStats::default()];
    for i in 0..n {
        if in_sample[i] {
            totals[0].add(weights[i], grad[i], hess[i]);
        }
    }

    for depth in 0..=config.max_depth {
        let mut best: Vec<Option<Candidate>> = vec![None; frontier.len()];
        if depth < config.max_depth {
            for (f, order) in sorted.iter().enumerate() {
                let col = &columns[f];
                let mut acc = vec![NodeStats::default(); frontier.len()];
                let mut last = vec![f64::NAN; frontier.len()];
                for &i in order {
                    let i = i as usize;
                    let slot = slot_of[i];
                    if slot == NONE {
                        continue;
                    }
                    let s = slot as usize;
                    let v = col[i];
                    let left = acc[s];
                    if left.count >= config.min_samples_leaf
                        && totals[s].count - left.count >= config.min_samples_leaf
                        && v > last[s]
                    {
                        let right = NodeStats {
                            count: totals[s].count - left.count,
                            weight: totals[s].weight - left.weight,
                            grad: totals[s].grad - left.grad,
                            hess: totals[s].hess - left.hess,
                        };
                        let gain = left.score() + right.score() - totals[s].score();
                        if gain > MIN_SPLIT_GAIN && best[s].is_none_or(|b| gain > b.gain) {
                            // rows route by `x < threshold`, so the midpoint must
                            // stay above `last` even for adjacent doubles
                            let mid = last[s] + (v - last[s]) / 2.0;
                            let threshold = if mid > last[s] { mid } else { v };
                            best[s] = Some(Candidate { gain, feature: f, threshold, left });
                        }
                    }
                    acc[s].add(weights[i], grad[i], hess[i]);
                    last[s] = v;
                }
            }
        }

        let mut next_frontier = Vec::new();
        let mut next_totals = Vec::new();
        // slot -> (left slot, right slot)
        let mut routes: Vec<Option<(u32, u32, usize, f64)>> = vec![None; frontier.len()];
        for (s, &node) in frontier.iter().enumerate() {
            match best[s] {
                Some(c) => {
                    let left_idx = nodes.len();
                    let right_idx = left_idx + 1;
                    let right = NodeStats {
                        count: totals[s].count - c.left.count,
                        weight: totals[s].weight - c.left.weight,
                        grad: totals[s].grad - c.left.grad,
                        hess: totals[s].hess - c.left.hess,
                    };
                    nodes.push(TreeNode::Leaf(c.left.leaf_value()));
                    nodes.push(TreeNode::Leaf(right.leaf_value()));
                    nodes[node] = TreeNode::Split {
                        feature: c.feature,
                        threshold: c.threshold,
                        left: left_idx,
                        right: right_idx,
                        default_left: c.left.weight >= right.weight,
                    };
                    let ls = next_frontier.len() as u32;
                    next_frontier.push(left_idx);
                    next_frontier.push(right_idx);
                    next_totals.push(c.left);
                    next_totals.push(right);
                    routes[s] = Some((ls, ls + 1, c.feature, c.threshold));
                }
                None => nodes[node] = TreeNode::Leaf(totals[s].leaf_value()),
            }
        }
        if next_frontier.is_empty() {
            break;
        }
        for i in 0..n {
            let slot = slot_of[i];
            if slot == NONE {
                continue;
            }
            slot_of[i] = match routes[slot as usize] {
                Some((l, r, f, t)) => {
                    if columns[f][i] < t {
                        l
                    } else {
                        r
                    }
                }
                None => NONE,
            };
        }
        frontier = next_frontier;
        totals = next_totals;
    }
    Tree { nodes }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Plain recursive evaluation straight from the definition, kept apart
    /// from `Tree::predict`.
    fn oracle_score(model: &Ensemble, x: &[f64]) -> f64 {
        fn walk(nodes: &[TreeNode], i: usize, x: &[f64]) -> f64 {
            match &nodes[i] {
                TreeNode::Leaf(v) => *v,
                TreeNode::Split { feature, threshold, left, right, .. } => {
                    if x[*feature] >= *threshold {
                        walk(nodes, *right, x)
                    } else {
                        walk(nodes, *left, x)
                    }
                }
            }
        }
        let mut z = model.base_score;
        let mut sum = 0.0;
        for t in &model.trees {
            sum += walk(&t.nodes, 0, x);
        }
        z += model.learning_rate * sum;
        (1.0 / (1.0 + (-z).exp())).clamp(f64::EPSILON, 1.0 - f64::EPSILON)
    }

    #[test]
    fn splits_between_adjacent_doubles_route_consistently() {
        // even mantissa, so the tie in the midpoint rounds down to `lo`
        let lo = 0.5f64;
        let hi = f64::from_bits(lo.to_bits() + 1);
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![if i < 20 { lo } else { hi }]).collect();
        let labels: Vec<bool> = (0..40).map(|i| i >= 20).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let cfg = TrainConfig { n_trees: 5, min_samples_leaf: 1, subsample_fraction: 1.0, ..TrainConfig::default() };
        let (model, _) = train_matrix(&refs, &labels, &cfg, "v").unwrap();
        assert!(model.score(&[hi]) > model.score(&[lo]));
    }

    fn toy_separable() -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        use rand::Rng;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        while rows.len() < 100 {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            let m = a + 0.5 * b;
            if m.abs() < 0.05 {
                continue;
            }
            rows.push(vec![a, b]);
            labels.push(m > 0.0);
        }
        (rows, labels)
    }

    #[test]
    fn separable_toy_is_learned() {
        let (rows, labels) = toy_separable();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let cfg = TrainConfig {
            n_trees: 200,
            max_depth: 3,
            min_samples_leaf: 1,
            learning_rate: 0.3,
            subsample_fraction: 1.0,
            positive_class_weight: 1.0,
            ..TrainConfig::default()
        };
        let (model, _) = train_matrix(&refs, &labels, &cfg, "toy").unwrap();
        let correct = rows
            .iter()
            .zip(&labels)
            .filter(|(r, y)| (model.score(r) >= 0.5) == **y)
            .count();
        assert!(correct as f64 / 100.0 >= 0.99, "accuracy {correct}/100");
    }

    #[test]
    fn single_class_and_empty_rejected() {
        let rows = [vec![1.0], vec![2.0]];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        assert!(matches!(
            train_matrix(&refs, &[false, false], &TrainConfig::default(), "v"),
            Err(GbmError::SingleClass(Label::Healthy))
        ));
        assert!(matches!(train_matrix(&[], &[], &TrainConfig::default(), "v"), Err(GbmError::EmptyInput)));
    }

    #[test]
    fn zero_trees_predicts_positive_rate() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let labels: Vec<bool> = (0..10).map(|i| i < 3).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let cfg = TrainConfig { n_trees: 0, positive_class_weight: 1.0, ..TrainConfig::default() };
        let (model, _) = train_matrix(&refs, &labels, &cfg, "v").unwrap();
        for r in &rows {
            assert!((model.score(r) - 0.3).abs() < 1e-12);
        }
    }

    fn scc_stump() -> Ensemble {
        let tree = Tree {
            nodes: vec![
                TreeNode::Split { feature: 0, threshold: 200.0, left: 1, right: 2, default_left: true },
                TreeNode::Leaf(-2.0),
                TreeNode::Leaf(2.0),
            ],
        };
        Ensemble::from_trees("v", 2, 1.0, 0.0, vec![tree])
    }

    #[test]
    fn stump_is_monotone_in_scc() {
        let m = scc_stump();
        assert!(m.score(&[300.0, 0.0]) > m.score(&[100.0, 0.0]));
        assert!(matches!(m.predict_values(&[1.0]), Err(GbmError::DimensionMismatch { expected: 2, got: 1 })));
        // missing value follows the default branch
        assert_eq!(m.score(&[f64::NAN, 0.0]), m.score(&[100.0, 0.0]));
    }

    #[test]
    fn classify_boundaries() {
        let m = Ensemble::prior_only("v", 1, 0.0);
        let x = FeatureVector::new("c", "2018-01-01".parse().unwrap(), vec![0.0]);
        assert_eq!(classify(&m, &x, 0.5).unwrap(), Label::Sick);
        let m = Ensemble::prior_only("v", 1, (0.49f64 / 0.51).ln());
        assert_eq!(classify(&m, &x, 0.5).unwrap(), Label::Healthy);
        assert!(matches!(classify(&m, &x, 0.0), Err(GbmError::InvalidThreshold(_))));
        assert!(matches!(classify(&m, &x, 1.0), Err(GbmError::InvalidThreshold(_))));
        let prior = Ensemble::prior_only("v", 3, (0.3f64 / 0.7).ln());
        assert!((prior.score(&[1.0, 2.0, 3.0]) - 0.3).abs() < 1e-12);
    }

    fn noisy_training_set(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let r: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..10.0)).collect();
            let z = 0.8 * r[0] - 0.5 * r[1] + (r[2] * 0.7).sin() * 2.0 - 2.0;
            let y = rng.random::<f64>() < 1.0 / (1.0 + (-z).exp());
            rows.push(r);
            labels.push(y);
        }
        (rows, labels)
    }

    #[test]
    fn predictions_match_tree_walking_oracle() {
        let (rows, labels) = noisy_training_set(600, 3);
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let (model, _) = train_matrix(&refs, &labels, &TrainConfig::default(), "v").unwrap();
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..500 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..12.0)).collect();
            assert_eq!(model.score(&x), oracle_score(&model, &x));
        }
        assert!(model.trees.iter().all(|t| t.depth() <= model.config.max_depth));
    }

    #[test]
    fn loss_non_increasing_and_deterministic() {
        let (rows, labels) = noisy_training_set(800, 4);
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let cfg = TrainConfig { subsample_fraction: 1.0, n_trees: 60, ..TrainConfig::default() };
        let (a, report) = train_matrix(&refs, &labels, &cfg, "v").unwrap();
        for w in report.stage_loss.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
        let (b, _) = train_matrix(&refs, &labels, &cfg, "v").unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let sub = TrainConfig { subsample_fraction: 0.7, ..cfg };
        let (c, _) = train_matrix(&refs, &labels, &sub, "v").unwrap();
        let (d, _) = train_matrix(&refs, &labels, &sub, "v").unwrap();
        assert_eq!(c.to_json(), d.to_json());
    }

    #[test]
    fn save_load_round_trip() {
        use rand::Rng;
        let (rows, labels) = noisy_training_set(400, 5);
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let (model, _) = train_matrix(&refs, &labels, &TrainConfig::default(), "v").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&model, &path).unwrap();
        let back = read_model(&path).unwrap();
        assert_eq!(back, model);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..11.0)).collect();
            assert_eq!(back.score(&x).to_bits(), model.score(&x).to_bits());
        }
    }

    #[test]
    fn version_and_corruption_errors() {
        let catalog = crate::featcat::default_catalog();
        let model = Ensemble::prior_only("other-version", catalog.len(), -2.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&model, &path).unwrap();
        assert!(matches!(load_model(&path, &catalog), Err(GbmError::CatalogVersion { .. })));

        let m = scc_stump();
        let text = m.to_json();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(read_model(&path), Err(GbmError::Corrupt(_))));
    }
}
