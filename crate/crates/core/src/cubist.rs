//! Boosted model trees with nearest-neighbor correction.
//!
//! Trees split on standard-deviation reduction and carry a least-squares
//! linear model at every node; predictions are blended with each ancestor's
//! model on the way back to the root. A committee of trees is grown on
//! successively adjusted targets and averaged, and the committee output is
//! corrected by the residuals of the nearest training rows.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, RawFeatureRow, SeriesInstance};
use crate::error::{Error, Result};
use crate::features::{teacher_forced, EncodedRow, FeatureSchema, Rollout};

const MODEL_FORMAT: &str = "demandcast-cubist";
const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CubistConfig {
    /// Trees in the committee (M).
    pub committees: usize,
    /// Neighbors used for the instance correction (k); 0 disables it.
    pub neighbors: usize,
    pub min_leaf: usize,
    /// Smoothing constant c.
    pub smoothing: f64,
    /// Nodes whose target SD is below this fraction of the root SD are leaves.
    pub sd_fraction: f64,
    pub ridge: f64,
    pub committee_targets: CommitteeTargets,
}

/// How each committee member's training targets follow from the previous member.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommitteeTargets {
    /// `y^(k) = 2·y − ŷ^(k-1)`: the original outcome corrected by the
    /// previous tree's error.
    #[default]
    Anchored,
    /// `y^(k) = 2·y^(k-1) − ŷ^(k-1)`: corrections accumulate across trees.
    /// Residuals compound, so long committees diverge unless every tree
    /// nearly interpolates its targets.
    Compounding,
}

impl Default for CubistConfig {
    fn default() -> Self {
        Self {
            committees: 50,
            neighbors: 9,
            min_leaf: 4,
            smoothing: 15.0,
            sd_fraction: 0.05,
            ridge: 1e-8,
            committee_targets: CommitteeTargets::Anchored,
        }
    }
}

impl CubistConfig {
    pub fn validate(&self) -> Result<()> {
        if self.committees == 0 {
            return Err(Error::Config("a committee needs at least one tree".into()));
        }
        if self.min_leaf == 0 {
            return Err(Error::Config("min_leaf must be positive".into()));
        }
        if !(self.smoothing >= 0.0) || !(self.sd_fraction >= 0.0) || !(self.ridge >= 0.0) {
            return Err(Error::Config("smoothing, sd_fraction and ridge must be non-negative".into()));
        }
        Ok(())
    }

    pub fn tree_params(&self) -> TreeParams {
        TreeParams {
            min_leaf: self.min_leaf,
            sd_fraction: self.sd_fraction,
            ridge: self.ridge,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TreeParams {
    pub min_leaf: usize,
    pub sd_fraction: f64,
    pub ridge: f64,
}

impl Default for TreeParams {
    fn default() -> Self {
        CubistConfig::default().tree_params()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub features: Vec<usize>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

impl LinearModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.features.iter().zip(&self.coefficients).map(|(&j, c)| c * x[j]).sum::<f64>()
    }

    /// Ridge-damped least squares on centered data; the intercept is not damped.
    pub fn fit(x: &[Vec<f64>], y: &[f64], idx: &[usize], features: &[usize], ridge: f64) -> Self {
        let n = idx.len() as f64;
        let y_mean = idx.iter().map(|&i| y[i]).sum::<f64>() / n;
        if features.is_empty() {
            return Self {
                features: Vec::new(),
                coefficients: Vec::new(),
                intercept: y_mean,
            };
        }
        let p = features.len();
        let x_mean: Vec<f64> = features.iter().map(|&j| idx.iter().map(|&i| x[i][j]).sum::<f64>() / n).collect();
        let a = DMatrix::from_fn(idx.len(), p, |r, c| x[idx[r]][features[c]] - x_mean[c]);
        let b = DVector::from_iterator(idx.len(), idx.iter().map(|&i| y[i] - y_mean));
        let mut gram = a.transpose() * &a;
        for d in 0..p {
            gram[(d, d)] += ridge;
        }
        let rhs = a.transpose() * b;
        let beta = match gram.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => gram
                .svd(true, true)
                .solve(&rhs, 1e-12)
                .unwrap_or_else(|_| DVector::zeros(p)),
        };
        let coefficients: Vec<f64> = beta.iter().map(|&b| if b.is_finite() { b } else { 0.0 }).collect();
        let intercept = y_mean - coefficients.iter().zip(&x_mean).map(|(c, m)| c * m).sum::<f64>();
        Self {
            features: features.to_vec(),
            coefficients,
            intercept,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    /// Rows with `x[feature] <= threshold`.
    pub left: usize,
    pub right: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub split: Option<Split>,
    pub model: LinearModel,
    pub n_samples: usize,
    pub residual_sd: f64,
    /// Range of the node's training targets; model output is bounded to it.
    pub target_min: f64,
    pub target_max: f64,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.split.is_none()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.model.predict(x).clamp(self.target_min, self.target_max)
    }
}

/// Model tree; node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelTree {
    pub nodes: Vec<TreeNode>,
}

fn population_sd(sum: f64, sum_sq: f64, n: f64) -> f64 {
    ((sum_sq - sum * sum / n) / n).max(0.0).sqrt()
}

fn sd_of(y: &[f64], idx: &[usize]) -> f64 {
    let (s, s2) = idx.iter().fold((0.0, 0.0), |(s, s2), &i| (s + y[i], s2 + y[i] * y[i]));
    population_sd(s, s2, idx.len() as f64)
}

/// Best split of `idx` on one feature: `(reduction, threshold)`.
fn best_split_on(x: &[Vec<f64>], y: &[f64], idx: &[usize], feature: usize, min_leaf: usize, sd: f64) -> Option<(f64, f64)> {
    let mut pairs: Vec<(f64, f64)> = idx.iter().map(|&i| (x[i][feature], y[i])).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pairs.len();
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let total_sq: f64 = pairs.iter().map(|p| p.1 * p.1).sum();
    let (mut s, mut s2) = (0.0, 0.0);
    let mut best: Option<(f64, f64)> = None;
    for i in 0..n - 1 {
        s += pairs[i].1;
        s2 += pairs[i].1 * pairs[i].1;
        let nl = i + 1;
        let nr = n - nl;
        if nl < min_leaf || nr < min_leaf || pairs[i].0 >= pairs[i + 1].0 {
            continue;
        }
        let sdl = population_sd(s, s2, nl as f64);
        let sdr = population_sd(total - s, total_sq - s2, nr as f64);
        let reduction = sd - (nl as f64 * sdl + nr as f64 * sdr) / n as f64;
        if best.is_none_or(|b| reduction > b.0) {
            best = Some((reduction, 0.5 * (pairs[i].0 + pairs[i + 1].0)));
        }
    }
    best
}

/// Most recent split features first, at most `max` of them.
fn model_features(path: &[usize], max: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for &f in path.iter().rev() {
        if out.len() == max {
            break;
        }
        if !out.contains(&f) {
            out.push(f);
        }
    }
    out
}

/// Upper bound on node-model predictors: keeps about three rows per coefficient.
fn max_predictors(n: usize) -> usize {
    n.saturating_sub(1) / 3
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    params: TreeParams,
    root_sd: f64,
    nodes: Vec<TreeNode>,
}

impl Grower<'_> {
    fn grow(&mut self, idx: Vec<usize>, path: &mut Vec<usize>) -> usize {
        let id = self.nodes.len();
        let sd = sd_of(self.y, &idx);
        self.nodes.push(TreeNode {
            split: None,
            model: LinearModel {
                features: Vec::new(),
                coefficients: Vec::new(),
                intercept: 0.0,
            },
            n_samples: idx.len(),
            residual_sd: 0.0,
            target_min: idx.iter().map(|&i| self.y[i]).fold(f64::INFINITY, f64::min),
            target_max: idx.iter().map(|&i| self.y[i]).fold(f64::NEG_INFINITY, f64::max),
        });
        let n_features = self.x[0].len();
        let mut split = None;
        if idx.len() >= 2 * self.params.min_leaf && sd > self.params.sd_fraction * self.root_sd && sd > 0.0 {
            let candidates: Vec<Option<(f64, f64)>> = (0..n_features)
                .into_par_iter()
                .map(|f| best_split_on(self.x, self.y, &idx, f, self.params.min_leaf, sd))
                .collect();
            let mut best: Option<(f64, usize, f64)> = None;
            for (f, c) in candidates.into_iter().enumerate() {
                if let Some((red, thr)) = c {
                    if red > 0.0 && best.is_none_or(|b| red > b.0) {
                        best = Some((red, f, thr));
                    }
                }
            }
            split = best.map(|(_, f, t)| (f, t));
        }

        let own: Vec<usize> = path.iter().copied().chain(split.map(|s| s.0)).collect();
        let features = model_features(&own, max_predictors(idx.len()));
        let model = LinearModel::fit(self.x, self.y, &idx, &features, self.params.ridge);
        let (lo, hi) = (self.nodes[id].target_min, self.nodes[id].target_max);
        let resid: Vec<f64> = idx.iter().map(|&i| self.y[i] - model.predict(&self.x[i]).clamp(lo, hi)).collect();
        let mean_r = resid.iter().sum::<f64>() / resid.len() as f64;
        let residual_sd = (resid.iter().map(|r| (r - mean_r).powi(2)).sum::<f64>() / resid.len() as f64).sqrt();
        self.nodes[id].model = model;
        self.nodes[id].residual_sd = residual_sd;

        if let Some((feature, threshold)) = split {
            let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
            path.push(feature);
            let left = self.grow(l, path);
            let right = self.grow(r, path);
            path.pop();
            self.nodes[id].split = Some(Split {
                feature,
                threshold,
                left,
                right,
            });
        }
        id
    }
}

/// Grows a model tree on rows `x` (equal widths) and targets `y`.
pub fn grow_tree(x: &[Vec<f64>], y: &[f64], params: TreeParams) -> Result<ModelTree> {
    if x.is_empty() {
        return Err(Error::EmptyInput("tree samples"));
    }
    if x.len() != y.len() || x.iter().any(|r| r.len() != x[0].len()) {
        return Err(Error::Shape("tree samples and targets are misaligned".into()));
    }
    let idx: Vec<usize> = (0..x.len()).collect();
    let mut grower = Grower {
        x,
        y,
        params,
        root_sd: sd_of(y, &idx),
        nodes: Vec::new(),
    };
    grower.grow(idx, &mut Vec::new());
    Ok(ModelTree { nodes: grower.nodes })
}

impl ModelTree {
    /// Node ids from the root to the leaf reached by `x`.
    pub fn path(&self, x: &[f64]) -> Vec<usize> {
        let mut out = vec![0];
        let mut id = 0;
        while let Some(s) = &self.nodes[id].split {
            id = if x[s.feature] <= s.threshold { s.left } else { s.right };
            out.push(id);
        }
        out
    }

    /// Prediction of the leaf model alone.
    pub fn raw_predict(&self, x: &[f64]) -> f64 {
        self.nodes[*self.path(x).last().unwrap()].predict(x)
    }

    /// Leaf prediction blended upward: `p' = (n·p + c·q) / (n + c)` where
    /// `n` is the child's sample count and `q` the parent model's output.
    pub fn smooth_predict(&self, x: &[f64], c: f64) -> f64 {
        let path = self.path(x);
        let mut p = self.nodes[*path.last().unwrap()].predict(x);
        for w in path.windows(2).rev() {
            let (parent, child) = (&self.nodes[w[0]], &self.nodes[w[1]]);
            let q = parent.predict(x);
            p = if c.is_infinite() {
                q
            } else {
                let n = child.n_samples as f64;
                (n * p + c * q) / (n + c)
            };
        }
        p
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Committee {
    pub trees: Vec<ModelTree>,
    pub smoothing: f64,
}

impl Committee {
    /// Mean of the members' smoothed predictions.
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.smooth_predict(x, self.smoothing)).sum::<f64>() / self.trees.len() as f64
    }
}

/// Grows `config.committees` trees. The first is fitted to `y`; each later
/// one to targets adjusted by the previous tree's smoothed prediction
/// `ŷ^(k-1)` (see [`CommitteeTargets`]). Also returns the target vector each
/// tree was grown on.
pub fn train_committees_traced(x: &[Vec<f64>], y: &[f64], config: &CubistConfig) -> Result<(Committee, Vec<Vec<f64>>)> {
    config.validate()?;
    let mut targets = y.to_vec();
    let mut trees = Vec::with_capacity(config.committees);
    let mut history = Vec::with_capacity(config.committees);
    for k in 0..config.committees {
        let tree = grow_tree(x, &targets, config.tree_params())?;
        history.push(targets.clone());
        if k + 1 < config.committees {
            let base = match config.committee_targets {
                CommitteeTargets::Anchored => y,
                CommitteeTargets::Compounding => &targets,
            };
            targets = base
                .iter()
                .zip(x)
                .map(|(&t, row)| 2.0 * t - tree.smooth_predict(row, config.smoothing))
                .collect();
        }
        trees.push(tree);
    }
    Ok((
        Committee {
            trees,
            smoothing: config.smoothing,
        },
        history,
    ))
}

pub fn train_committees(x: &[Vec<f64>], y: &[f64], config: &CubistConfig) -> Result<Committee> {
    Ok(train_committees_traced(x, y, config)?.0)
}

/// Training rows with their targets and committee predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborIndex {
    pub rows: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub predictions: Vec<f64>,
}

pub fn manhattan(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

impl NeighborIndex {
    /// The `k` nearest rows as `(row, distance)`, nearest first; ties go to
    /// the lower row index.
    pub fn nearest(&self, x: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 || k > self.rows.len() {
            return Err(Error::TooFewNeighbors {
                k,
                rows: self.rows.len(),
            });
        }
        let mut d: Vec<(usize, f64)> = self.rows.iter().map(|r| manhattan(r, x)).enumerate().collect();
        let cmp = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
        if k < d.len() {
            d.select_nth_unstable_by(k - 1, cmp);
            d.truncate(k);
        }
        d.sort_by(cmp);
        Ok(d)
    }
}

/// Normalized inverse-distance weights `1/(d+0.5)`.
pub fn neighbor_weights(distances: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = distances.iter().map(|d| 1.0 / (d + 0.5)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// `Σ_l w_l [t_l + (ŷ − t̂_l)]` over the `k` nearest training rows.
pub fn neighbor_adjust(y_hat: f64, x: &[f64], index: &NeighborIndex, k: usize) -> Result<f64> {
    let near = index.nearest(x, k)?;
    let w = neighbor_weights(&near.iter().map(|n| n.1).collect::<Vec<_>>());
    Ok(near
        .iter()
        .zip(&w)
        .map(|(&(l, _), w)| w * (index.targets[l] + (y_hat - index.predictions[l])))
        .sum())
}

/// Tree input for one encoded week: standardized numerics, binary flags and
/// one-hot product tier and event type. Product identity is left out.
pub fn design_row(row: &EncodedRow, schema: &FeatureSchema) -> Vec<f64> {
    let vocab = schema.vocab_sizes();
    let mut out = Vec::with_capacity(row.numeric.len() + row.binary.len() + vocab[1] + vocab[2]);
    out.extend_from_slice(&row.numeric);
    out.extend_from_slice(&row.binary);
    for j in [1, 2] {
        out.extend((0..vocab[j]).map(|v| f64::from(u8::from(v == row.categorical[j]))));
    }
    out
}

/// Design rows and demand targets for every week of every series.
pub fn design_matrix(dataset: &Dataset, schema: &FeatureSchema) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for s in dataset.series() {
        for ((_, enc), &d) in teacher_forced(s, schema)?.iter().zip(s.demand()) {
            x.push(design_row(enc, schema));
            y.push(d);
        }
    }
    Ok((x, y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubistModel {
    pub config: CubistConfig,
    pub schema_hash: String,
    pub committee: Committee,
    pub index: NeighborIndex,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    format: String,
    version: u32,
    model: CubistModel,
}

impl CubistModel {
    pub fn fit(dataset: &Dataset, schema: &FeatureSchema, config: &CubistConfig) -> Result<Self> {
        config.validate()?;
        let (x, y) = design_matrix(dataset, schema)?;
        if x.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if config.neighbors > x.len() {
            return Err(Error::TooFewNeighbors {
                k: config.neighbors,
                rows: x.len(),
            });
        }
        let committee = train_committees(&x, &y, config)?;
        let predictions = x.iter().map(|r| committee.predict(r)).collect();
        Ok(Self {
            config: config.clone(),
            schema_hash: schema.hash(),
            committee,
            index: NeighborIndex {
                rows: x,
                targets: y,
                predictions,
            },
        })
    }

    /// Committee prediction, neighbor-corrected when `neighbors > 0`.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let y_hat = self.committee.predict(x);
        if self.config.neighbors == 0 {
            return Ok(y_hat);
        }
        neighbor_adjust(y_hat, x, &self.index, self.config.neighbors)
    }

    /// One-step-ahead rollout: each week's clamped forecast becomes the
    /// realized demand for the following week's lag features.
    pub fn forecast(
        &self,
        series: &SeriesInstance,
        future_rows: &[RawFeatureRow],
        schema: &FeatureSchema,
        horizon: usize,
    ) -> Result<Vec<f64>> {
        if horizon == 0 {
            return Ok(Vec::new());
        }
        if future_rows.len() < horizon {
            return Err(Error::MissingFutureFeatures {
                needed: horizon,
                available: future_rows.len(),
            });
        }
        let found = schema.hash();
        if found != self.schema_hash {
            return Err(Error::SchemaMismatch {
                expected: self.schema_hash.clone(),
                found,
            });
        }
        let mut rollout = Rollout::new(schema, series, &future_rows[..horizon]);
        for &y in series.demand() {
            rollout.advance(y)?;
        }
        let mut out = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let (_, enc) = rollout.features()?;
            let y = self.predict(&design_row(&enc, schema))?.max(0.0);
            rollout.advance(y)?;
            out.push(y);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ModelDoc {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            model: self.clone(),
        })
        .expect("model serializes")
    }

    pub fn from_json(text: &str, schema: &FeatureSchema) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(text)?;
        if doc.format != MODEL_FORMAT || doc.version != MODEL_VERSION {
            return Err(Error::Version {
                expected: MODEL_VERSION,
                found: doc.version,
            });
        }
        let found = schema.hash();
        if found != doc.model.schema_hash {
            return Err(Error::SchemaMismatch {
                expected: doc.model.schema_hash,
                found,
            });
        }
        Ok(doc.model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?, schema)
    }
}
