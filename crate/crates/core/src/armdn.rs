//! The associative-recurrent mixture density network.
//!
//! Per week `t` of series `i`:
//!
//! ```text
//! ff_t          = act(W_fc · [numeric; embeddings; binary] + b_fc)     associative layer
//! h_t, s_t      = LSTM([y_{t-1}; ff_t], h_{t-1}, s_{t-1})               recurrent layer
//! p, sigma, mu  = softmax(Z_p h + b_p), clip(exp(Z_s h + b_s)), Z_m h + b_m
//! ```
//!
//! and the loss is the masked mean negative log-likelihood of the
//! (transformed) demand under the K-component Gaussian mixture.
//!
//! All parameters live in one flat `Vec<f64>`; [`Layout`] maps parameter
//! groups onto ranges of it. Gradients use the same layout.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{RawFeatureRow, SeriesInstance};
use crate::error::{Error, Result};
use crate::features::{teacher_forced, DemandScale, EncodedRow, FeatureSchema, Rollout};

pub const SIGMA_MIN: f64 = 1e-5;
pub const SIGMA_MAX: f64 = 1e10;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
const CHECKPOINT_FORMAT: &str = "demandcast-armdn";
const CHECKPOINT_VERSION: u32 = 1;
/// Sequences per gradient work unit; fixes the reduction order.
const GRAD_CHUNK: usize = 8;

/// Which parts of the full network are present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkVariant {
    /// Associative MLP + LSTM + mixture head.
    Armdn,
    /// No associative nonlinearity: a linear projection of the encoded
    /// features feeds the LSTM.
    RMdn,
    /// No LSTM: the associative output feeds the mixture head directly.
    AMdn,
    /// Full network with a single Gaussian.
    Ar,
}

impl NetworkVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Armdn => "armdn",
            Self::RMdn => "r-mdn",
            Self::AMdn => "a-mdn",
            Self::Ar => "ar",
        }
    }

    pub fn recurrent(self) -> bool {
        !matches!(self, Self::AMdn)
    }

    fn elu(self) -> bool {
        !matches!(self, Self::RMdn)
    }
}

impl std::str::FromStr for NetworkVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "armdn" | "ar-mdn" => Ok(Self::Armdn),
            "r-mdn" | "rmdn" => Ok(Self::RMdn),
            "a-mdn" | "amdn" => Ok(Self::AMdn),
            "ar" => Ok(Self::Ar),
            _ => Err(Error::UnknownVariant(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: NetworkVariant,
    /// Mixture components K.
    pub mixtures: usize,
    /// LSTM hidden size.
    pub hidden: usize,
    /// Width of the associative layer output.
    pub assoc_width: usize,
    /// Embedding width per categorical feature.
    pub embed_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: NetworkVariant::Armdn,
            mixtures: 10,
            hidden: 50,
            assoc_width: 50,
            embed_width: 30,
        }
    }
}

impl ModelConfig {
    /// Default widths for a variant; the `Ar` variant always has one component.
    pub fn for_variant(variant: NetworkVariant, mixtures: usize) -> Self {
        Self {
            variant,
            mixtures: if variant == NetworkVariant::Ar { 1 } else { mixtures },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mixtures == 0 || self.hidden == 0 || self.assoc_width == 0 || self.embed_width == 0 {
            return Err(Error::Config("mixtures and layer widths must be positive".into()));
        }
        if self.variant == NetworkVariant::Ar && self.mixtures != 1 {
            return Err(Error::Config("the AR variant has exactly one mixture component".into()));
        }
        Ok(())
    }
}

/// Input dimensions taken from a fitted schema.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub numeric: usize,
    pub binary: usize,
    pub vocab_sizes: Vec<usize>,
}

impl InputDims {
    pub fn from_schema(schema: &FeatureSchema) -> Self {
        Self {
            numeric: schema.n_numeric(),
            binary: schema.n_binary(),
            vocab_sizes: schema.vocab_sizes(),
        }
    }
}

/// Offsets of every parameter group inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub d_in: usize,
    pub assoc: usize,
    pub hidden: usize,
    pub head_in: usize,
    pub mixtures: usize,
    pub embed: usize,
    pub numeric: usize,
    pub binary: usize,
    pub embeddings: Vec<Range<usize>>,
    pub fc_w: Range<usize>,
    pub fc_b: Range<usize>,
    /// Rows `[i; f; g; o]` × columns `[y_prev; ff; h_prev]`.
    pub lstm_w: Range<usize>,
    pub lstm_b: Range<usize>,
    pub lstm_in: usize,
    /// Mixture logits, log-sigma and mean heads, in that order.
    pub head_w: [Range<usize>; 3],
    pub head_b: [Range<usize>; 3],
    pub total: usize,
}

impl Layout {
    pub fn new(config: &ModelConfig, dims: &InputDims) -> Self {
        let mut cursor = 0;
        let mut take = |n: usize| {
            let r = cursor..cursor + n;
            cursor += n;
            r
        };
        let e = config.embed_width;
        let a = config.assoc_width;
        let embeddings = dims.vocab_sizes.iter().map(|&v| take(v * e)).collect();
        let d_in = dims.numeric + dims.vocab_sizes.len() * e + dims.binary;
        let fc_w = take(a * d_in);
        let fc_b = take(a);
        let recurrent = config.variant.recurrent();
        let hidden = if recurrent { config.hidden } else { 0 };
        let lstm_in = if recurrent { 1 + a + hidden } else { 0 };
        let lstm_w = take(4 * hidden * lstm_in);
        let lstm_b = take(4 * hidden);
        let head_in = if recurrent { hidden } else { a };
        let k = config.mixtures;
        let head = [take(k * head_in), take(k), take(k * head_in), take(k), take(k * head_in), take(k)];
        Self {
            d_in,
            assoc: a,
            hidden,
            head_in,
            mixtures: k,
            embed: e,
            numeric: dims.numeric,
            binary: dims.binary,
            embeddings,
            fc_w,
            fc_b,
            lstm_w,
            lstm_b,
            lstm_in,
            head_w: [head[0].clone(), head[2].clone(), head[4].clone()],
            head_b: [head[1].clone(), head[3].clone(), head[5].clone()],
            total: cursor,
        }
    }

    /// Named parameter groups, for reporting.
    pub fn groups(&self) -> Vec<(String, Range<usize>)> {
        let mut g: Vec<(String, Range<usize>)> = self
            .embeddings
            .iter()
            .enumerate()
            .map(|(i, r)| (format!("embedding[{i}]"), r.clone()))
            .collect();
        g.push(("fc".into(), self.fc_w.start..self.fc_b.end));
        if !self.lstm_w.is_empty() {
            g.push(("lstm".into(), self.lstm_w.start..self.lstm_b.end));
        }
        for (i, name) in ["head_p", "head_sigma", "head_mu"].iter().enumerate() {
            g.push((name.to_string(), self.head_w[i].start..self.head_b[i].end));
        }
        g
    }
}

/// Mixture parameters for one week.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdnOutput {
    pub p: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl MdnOutput {
    pub fn mean(&self) -> f64 {
        self.p.iter().zip(&self.mu).map(|(p, m)| p * m).sum()
    }

    fn log_components(&self, y: f64) -> impl Iterator<Item = f64> + Clone + '_ {
        self.p.iter().zip(&self.mu).zip(&self.sigma).map(move |((&p, &mu), &sigma)| {
            let r = (y - mu) / sigma;
            p.ln() - sigma.ln() - HALF_LN_2PI - 0.5 * r * r
        })
    }

    /// `-log Σ_k p_k N(y; mu_k, sigma_k²)`, evaluated in log space.
    pub fn nll(&self, y: f64) -> f64 {
        -log_sum_exp(self.log_components(y))
    }

    /// Mixture CDF at `y`.
    pub fn cdf(&self, y: f64) -> f64 {
        self.p
            .iter()
            .zip(&self.mu)
            .zip(&self.sigma)
            .map(|((p, mu), sigma)| p * 0.5 * libm::erfc(-(y - mu) / (sigma * std::f64::consts::SQRT_2)))
            .sum()
    }

    /// Mixture median by bisection on the CDF.
    pub fn median(&self) -> f64 {
        let lo_init = self.mu.iter().zip(&self.sigma).map(|(m, s)| m - 10.0 * s).fold(f64::INFINITY, f64::min);
        let hi_init = self.mu.iter().zip(&self.sigma).map(|(m, s)| m + 10.0 * s).fold(f64::NEG_INFINITY, f64::max);
        let (mut lo, mut hi) = (lo_init, hi_init);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < 0.5 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Masked mean of per-cell mixture NLLs.
pub fn nll_loss(outputs: &[MdnOutput], targets: &[f64], mask: &[bool]) -> Result<f64> {
    if outputs.len() != targets.len() || targets.len() != mask.len() {
        return Err(Error::Shape(format!(
            "{} outputs, {} targets, {} mask bits",
            outputs.len(),
            targets.len(),
            mask.len()
        )));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for ((out, &y), &m) in outputs.iter().zip(targets).zip(mask) {
        if m {
            total += out.nll(y);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::AllMasked);
    }
    Ok(total / n as f64)
}

/// Softmax / clipped-exp / identity transform of the three head pre-activations.
///
/// Returns the mixture and, per component, whether sigma hit a clip bound.
pub fn mixture_from_logits(logits: &[f64], log_sigma: &[f64], mu: &[f64]) -> (MdnOutput, Vec<bool>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&q| (q - max).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    let mut clipped = Vec::with_capacity(log_sigma.len());
    let sigma = log_sigma
        .iter()
        .map(|&s| {
            let raw = s.exp();
            clipped.push(!(raw > SIGMA_MIN && raw < SIGMA_MAX));
            raw.clamp(SIGMA_MIN, SIGMA_MAX)
        })
        .collect();
    (
        MdnOutput {
            p,
            mu: mu.to_vec(),
            sigma,
        },
        clipped,
    )
}

/// Which statistic of the predicted mixture becomes the point forecast.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointStatistic {
    #[default]
    Mean,
    Median,
}

/// Point forecast in demand units: mixture statistic in transformed space,
/// mapped back through the demand scale and clamped at zero.
pub fn point_forecast(m: &MdnOutput, scale: &DemandScale, statistic: PointStatistic) -> f64 {
    let z = match statistic {
        PointStatistic::Mean => m.mean(),
        PointStatistic::Median => m.median(),
    };
    scale.inverse(z)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            hidden: vec![0.0; hidden],
            cell: vec![0.0; hidden],
        }
    }
}

/// One training sequence: encoded inputs, previous (transformed) demand,
/// targets and a loss mask. Padding cells carry `mask = false`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub rows: Vec<EncodedRow>,
    pub y_prev: Vec<f64>,
    pub targets: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Sequence {
    /// Teacher-forced sequence over every week of `series`.
    pub fn from_series(series: &SeriesInstance, schema: &FeatureSchema) -> Result<Self> {
        let scale = schema.demand_scale(series.vertical_id());
        let rows: Vec<EncodedRow> = teacher_forced(series, schema)?.into_iter().map(|(_, e)| e).collect();
        let targets: Vec<f64> = series.demand().iter().map(|&y| scale.forward(y)).collect();
        let mut y_prev = Vec::with_capacity(targets.len());
        y_prev.push(scale.forward(0.0));
        y_prev.extend_from_slice(&targets[..targets.len() - 1]);
        Ok(Self {
            rows,
            y_prev,
            mask: vec![true; targets.len()],
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn unmasked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Keeps the loss only on cells `range` (inputs are untouched).
    pub fn masked_to(mut self, range: Range<usize>) -> Self {
        for (i, m) in self.mask.iter_mut().enumerate() {
            *m = *m && range.contains(&i);
        }
        self
    }

    /// Appends zero-feature, masked cells up to `len`.
    pub fn padded(mut self, len: usize) -> Self {
        let template = self.rows.first().map(|r| EncodedRow {
            numeric: vec![0.0; r.numeric.len()],
            categorical: vec![0; r.categorical.len()],
            binary: vec![0.0; r.binary.len()],
        });
        while self.targets.len() < len {
            self.rows.push(template.clone().expect("non-empty sequence"));
            self.y_prev.push(0.0);
            self.targets.push(0.0);
            self.mask.push(false);
        }
        self
    }
}

/// Per-step inverted-dropout multipliers on the associative output.
pub type DropoutMasks = Vec<Vec<f64>>;

pub fn sample_dropout(len: usize, width: usize, p: f64, rng: &mut impl Rng) -> DropoutMasks {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| (0..width).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect())
        .collect()
}

struct StepCache {
    x_in: Vec<f64>,
    pre: Vec<f64>,
    z: Vec<f64>,
    /// Activated gates `[i; f; g; o]`.
    gates: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
    head_in: Vec<f64>,
    out: MdnOutput,
    clipped: Vec<bool>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// `out = W x + b` for row-major `W` (`out.len()` rows).
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o = b[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Accumulates `dW += d xᵀ`, `db += d` and (optionally) `dx += Wᵀ d`.
fn affine_backward(w: &[f64], x: &[f64], d: &[f64], dw: &mut [f64], db: &mut [f64], dx: Option<&mut [f64]>) {
    let cols = x.len();
    for (r, &dr) in d.iter().enumerate() {
        if dr == 0.0 {
            continue;
        }
        db[r] += dr;
        let row = &mut dw[r * cols..(r + 1) * cols];
        for (g, &xc) in row.iter_mut().zip(x) {
            *g += dr * xc;
        }
    }
    if let Some(dx) = dx {
        for (r, &dr) in d.iter().enumerate() {
            if dr == 0.0 {
                continue;
            }
            let row = &w[r * cols..(r + 1) * cols];
            for (g, &wc) in dx.iter_mut().zip(row) {
                *g += dr * wc;
            }
        }
    }
}

/// AR-MDN parameters plus the configuration and schema they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmdnModel {
    pub config: ModelConfig,
    pub dims: InputDims,
    pub schema_hash: String,
    pub params: Vec<f64>,
    layout: Layout,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    version: u32,
    schema_hash: String,
    config: ModelConfig,
    dims: InputDims,
    params: Vec<f64>,
}

impl ArmdnModel {
    /// Glorot-uniform weights, zero biases except a +1 forget-gate bias.
    pub fn init(config: ModelConfig, schema: &FeatureSchema, seed: u64) -> Result<Self> {
        config.validate()?;
        let dims = InputDims::from_schema(schema);
        let layout = Layout::new(&config, &dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.total];
        let mut fill = |range: &Range<usize>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut params[range.clone()] {
                *v = rng.random_range(-limit..limit);
            }
        };
        for (r, &vocab) in layout.embeddings.iter().zip(&dims.vocab_sizes) {
            fill(r, vocab, layout.embed, &mut rng);
        }
        fill(&layout.fc_w, layout.d_in, layout.assoc, &mut rng);
        if config.variant.recurrent() {
            fill(&layout.lstm_w, layout.lstm_in, 4 * layout.hidden, &mut rng);
        }
        for w in &layout.head_w {
            fill(w, layout.head_in, layout.mixtures, &mut rng);
        }
        let h = layout.hidden;
        let forget = layout.lstm_b.start + h..layout.lstm_b.start + 2 * h;
        params[forget].iter_mut().for_each(|b| *b = 1.0);
        Ok(Self {
            config,
            dims,
            schema_hash: schema.hash(),
            params,
            layout,
        })
    }

    pub fn from_parts(config: ModelConfig, dims: InputDims, schema_hash: String, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, &dims);
        if params.len() != layout.total {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Shape("non-finite parameter".into()));
        }
        Ok(Self {
            config,
            dims,
            schema_hash,
            params,
            layout,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    fn p(&self, r: &Range<usize>) -> &[f64] {
        &self.params[r.clone()]
    }

    fn check_row(&self, row: &EncodedRow) -> Result<()> {
        if row.numeric.len() != self.dims.numeric
            || row.binary.len() != self.dims.binary
            || row.categorical.len() != self.dims.vocab_sizes.len()
        {
            return Err(Error::Shape(format!(
                "encoded row has {}/{}/{} numeric/categorical/binary entries, model expects {}/{}/{}",
                row.numeric.len(),
                row.categorical.len(),
                row.binary.len(),
                self.dims.numeric,
                self.dims.vocab_sizes.len(),
                self.dims.binary
            )));
        }
        if let Some((j, &idx)) = row
            .categorical
            .iter()
            .enumerate()
            .find(|(j, &idx)| idx >= self.dims.vocab_sizes[*j])
        {
            return Err(Error::Shape(format!("category index {idx} out of range for feature {j}")));
        }
        Ok(())
    }

    fn assoc_input(&self, row: &EncodedRow) -> Vec<f64> {
        let l = &self.layout;
        let mut x = Vec::with_capacity(l.d_in);
        x.extend_from_slice(&row.numeric);
        for (table, &idx) in l.embeddings.iter().zip(&row.categorical) {
            let start = table.start + idx * l.embed;
            x.extend_from_slice(&self.params[start..start + l.embed]);
        }
        x.extend_from_slice(&row.binary);
        x
    }

    /// Returns the pre-activation and the activated associative output.
    fn assoc(&self, x_in: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let l = &self.layout;
        let mut pre = vec![0.0; l.assoc];
        affine(self.p(&l.fc_w), self.p(&l.fc_b), x_in, &mut pre);
        let ff = if self.config.variant.elu() {
            pre.iter().map(|&a| elu(a)).collect()
        } else {
            pre.clone()
        };
        (pre, ff)
    }

    /// Associative layer output `ff` for one encoded week (no dropout).
    pub fn associative_forward(&self, row: &EncodedRow) -> Result<Vec<f64>> {
        self.check_row(row)?;
        Ok(self.assoc(&self.assoc_input(row)).1)
    }

    /// Returns `(z, activated gates, c_prev, tanh(c), new state)`.
    fn lstm(&self, y_prev: f64, ff: &[f64], state: &LstmState) -> (Vec<f64>, Vec<f64>, LstmState, Vec<f64>) {
        let l = &self.layout;
        let h = l.hidden;
        let mut z = Vec::with_capacity(l.lstm_in);
        z.push(y_prev);
        z.extend_from_slice(ff);
        z.extend_from_slice(&state.hidden);
        let mut gates = vec![0.0; 4 * h];
        affine(self.p(&l.lstm_w), self.p(&l.lstm_b), &z, &mut gates);
        for (j, g) in gates.iter_mut().enumerate() {
            *g = if (2 * h..3 * h).contains(&j) { g.tanh() } else { sigmoid(*g) };
        }
        let mut cell = vec![0.0; h];
        let mut hidden = vec![0.0; h];
        let mut tanh_c = vec![0.0; h];
        for u in 0..h {
            let (i, f, g, o) = (gates[u], gates[h + u], gates[2 * h + u], gates[3 * h + u]);
            cell[u] = f * state.cell[u] + i * g;
            tanh_c[u] = cell[u].tanh();
            hidden[u] = o * tanh_c[u];
        }
        (z, gates, LstmState { hidden, cell }, tanh_c)
    }

    /// One recurrent step over input `[y_prev; ff]`.
    pub fn lstm_step(&self, y_prev: f64, ff: &[f64], state: &LstmState) -> Result<(Vec<f64>, LstmState)> {
        if !self.config.variant.recurrent() {
            return Err(Error::Shape(format!("variant {} has no recurrent layer", self.config.variant.name())));
        }
        if ff.len() != self.layout.assoc || state.hidden.len() != self.layout.hidden {
            return Err(Error::Shape("lstm input or state width mismatch".into()));
        }
        let (_, _, next, _) = self.lstm(y_prev, ff, state);
        Ok((next.hidden.clone(), next))
    }

    fn head(&self, h: &[f64]) -> (MdnOutput, Vec<bool>) {
        let l = &self.layout;
        let k = l.mixtures;
        let mut pre = [vec![0.0; k], vec![0.0; k], vec![0.0; k]];
        for (i, out) in pre.iter_mut().enumerate() {
            affine(self.p(&l.head_w[i]), self.p(&l.head_b[i]), h, out);
        }
        mixture_from_logits(&pre[0], &pre[1], &pre[2])
    }

    /// Mixture parameters from a head input (LSTM output, or `ff` for A-MDN).
    pub fn mdn_head(&self, h: &[f64]) -> Result<MdnOutput> {
        if h.len() != self.layout.head_in {
            return Err(Error::Shape(format!("head expects {} inputs, got {}", self.layout.head_in, h.len())));
        }
        Ok(self.head(h).0)
    }

    fn forward_cached(&self, seq: &Sequence, dropout: Option<&DropoutMasks>) -> Vec<StepCache> {
        let mut state = LstmState::zeros(self.layout.hidden);
        let mut caches = Vec::with_capacity(seq.len());
        for t in 0..seq.len() {
            let x_in = self.assoc_input(&seq.rows[t]);
            let (pre, mut ff) = self.assoc(&x_in);
            if let Some(masks) = dropout {
                ff.iter_mut().zip(&masks[t]).for_each(|(v, m)| *v *= m);
            }
            let (z, gates, c_prev, tanh_c, head_in) = if self.config.variant.recurrent() {
                let (z, gates, next, tanh_c) = self.lstm(seq.y_prev[t], &ff, &state);
                let c_prev = std::mem::replace(&mut state, next).cell;
                (z, gates, c_prev, tanh_c, state.hidden.clone())
            } else {
                (Vec::new(), Vec::new(), Vec::new(), Vec::new(), ff)
            };
            let (out, clipped) = self.head(&head_in);
            caches.push(StepCache {
                x_in,
                pre,
                z,
                gates,
                c_prev,
                tanh_c,
                head_in,
                out,
                clipped,
            });
        }
        caches
    }

    /// Mixture outputs for every cell of a (teacher-forced) sequence.
    pub fn forward(&self, seq: &Sequence) -> Result<Vec<MdnOutput>> {
        for row in &seq.rows {
            self.check_row(row)?;
        }
        Ok(self.forward_cached(seq, None).into_iter().map(|c| c.out).collect())
    }

    /// Sum of cell NLLs of one sequence; gradients of `weight ×` that sum are
    /// added into `grad`.
    fn sequence_backward(&self, seq: &Sequence, dropout: Option<&DropoutMasks>, weight: f64, grad: &mut [f64]) -> f64 {
        let l = &self.layout;
        let k = l.mixtures;
        let h = l.hidden;
        let caches = self.forward_cached(seq, dropout);
        let mut loss = 0.0;
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];

        for t in (0..seq.len()).rev() {
            let c = &caches[t];
            let mut d_head_in = vec![0.0; l.head_in];
            if seq.mask[t] {
                let y = seq.targets[t];
                let logs: Vec<f64> = c.out.log_components(y).collect();
                let lse = log_sum_exp(logs.iter().copied());
                loss -= lse;
                let mut dq = vec![0.0; k];
                let mut ds = vec![0.0; k];
                let mut dmu = vec![0.0; k];
                for j in 0..k {
                    let gamma = (logs[j] - lse).exp();
                    let sigma = c.out.sigma[j];
                    let r = (y - c.out.mu[j]) / sigma;
                    dq[j] = weight * (c.out.p[j] - gamma);
                    ds[j] = if c.clipped[j] { 0.0 } else { weight * gamma * (1.0 - r * r) };
                    dmu[j] = -weight * gamma * r / sigma;
                }
                for (i, d) in [dq, ds, dmu].iter().enumerate() {
                    let (w_start, b_range) = (l.head_w[i].start, l.head_b[i].clone());
                    let (dw, db) = split_pair(grad, l.head_w[i].clone(), b_range);
                    affine_backward(
                        &self.params[w_start..w_start + k * l.head_in],
                        &c.head_in,
                        d,
                        dw,
                        db,
                        Some(&mut d_head_in),
                    );
                }
            }

            let mut dff = if self.config.variant.recurrent() {
                // d loss / d h_t = head contribution + recurrence from t+1.
                let mut dpre = vec![0.0; 4 * h];
                let mut dc_prev = vec![0.0; h];
                for u in 0..h {
                    let (i, f, g, o) = (c.gates[u], c.gates[h + u], c.gates[2 * h + u], c.gates[3 * h + u]);
                    let dh = d_head_in[u] + dh_next[u];
                    let dc = dh * o * (1.0 - c.tanh_c[u] * c.tanh_c[u]) + dc_next[u];
                    dpre[u] = dc * g * i * (1.0 - i);
                    dpre[h + u] = dc * c.c_prev[u] * f * (1.0 - f);
                    dpre[2 * h + u] = dc * i * (1.0 - g * g);
                    dpre[3 * h + u] = dh * c.tanh_c[u] * o * (1.0 - o);
                    dc_prev[u] = dc * f;
                }
                let mut dz = vec![0.0; l.lstm_in];
                let (dw, db) = split_pair(grad, l.lstm_w.clone(), l.lstm_b.clone());
                affine_backward(self.p(&l.lstm_w), &c.z, &dpre, dw, db, Some(&mut dz));
                dh_next.copy_from_slice(&dz[1 + l.assoc..]);
                dc_next = dc_prev;
                dz[1..1 + l.assoc].to_vec()
            } else {
                d_head_in
            };

            if let Some(masks) = dropout {
                dff.iter_mut().zip(&masks[t]).for_each(|(d, m)| *d *= m);
            }
            if self.config.variant.elu() {
                for (d, &a) in dff.iter_mut().zip(&c.pre) {
                    if a <= 0.0 {
                        *d *= a.exp();
                    }
                }
            }
            let mut dx = vec![0.0; l.d_in];
            let (dw, db) = split_pair(grad, l.fc_w.clone(), l.fc_b.clone());
            affine_backward(self.p(&l.fc_w), &c.x_in, &dff, dw, db, Some(&mut dx));
            let mut offset = l.numeric;
            for (table, &idx) in l.embeddings.iter().zip(&seq.rows[t].categorical) {
                let start = table.start + idx * l.embed;
                for (g, d) in grad[start..start + l.embed].iter_mut().zip(&dx[offset..offset + l.embed]) {
                    *g += d;
                }
                offset += l.embed;
            }
        }
        loss
    }

    /// Masked mean NLL over a batch and its gradient.
    ///
    /// Work is split into fixed chunks of sequences that may run in parallel;
    /// chunk results are summed in order, so the result does not depend on
    /// the thread count.
    pub fn loss_and_gradient(&self, batch: &[Sequence], dropout: Option<&[DropoutMasks]>) -> Result<(f64, Vec<f64>)> {
        let n: usize = batch.iter().map(Sequence::unmasked).sum();
        if n == 0 {
            return Err(Error::AllMasked);
        }
        for seq in batch {
            if seq.rows.len() != seq.len() || seq.y_prev.len() != seq.len() || seq.mask.len() != seq.len() {
                return Err(Error::Shape("sequence fields have different lengths".into()));
            }
            for row in &seq.rows {
                self.check_row(row)?;
            }
        }
        if let Some(d) = dropout {
            if d.len() != batch.len() || d.iter().zip(batch).any(|(m, s)| m.len() != s.len()) {
                return Err(Error::Shape("dropout masks do not match the batch".into()));
            }
        }
        let weight = 1.0 / n as f64;
        let partials: Vec<(f64, Vec<f64>)> = batch
            .par_chunks(GRAD_CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut grad = vec![0.0; self.layout.total];
                let mut loss = 0.0;
                for (j, seq) in chunk.iter().enumerate() {
                    let masks = dropout.map(|d| &d[c * GRAD_CHUNK + j]);
                    loss += self.sequence_backward(seq, masks, weight, &mut grad);
                }
                (loss, grad)
            })
            .collect();
        let mut grad = vec![0.0; self.layout.total];
        let mut loss = 0.0;
        for (l, g) in partials {
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        Ok((loss * weight, grad))
    }

    /// Masked mean NLL of a batch (teacher forcing, no dropout).
    pub fn loss(&self, batch: &[Sequence]) -> Result<f64> {
        let mut outputs = Vec::new();
        let mut targets = Vec::new();
        let mut mask = Vec::new();
        for seq in batch {
            outputs.extend(self.forward(seq)?);
            targets.extend_from_slice(&seq.targets);
            mask.extend_from_slice(&seq.mask);
        }
        nll_loss(&outputs, &targets, &mask)
    }

    fn check_schema(&self, schema: &FeatureSchema) -> Result<()> {
        let found = schema.hash();
        if found != self.schema_hash {
            return Err(Error::SchemaMismatch {
                expected: self.schema_hash.clone(),
                found,
            });
        }
        Ok(())
    }

    /// Multi-week forecast after `series`' last observed week.
    ///
    /// The history is consumed with realized demand; each forecast week then
    /// feeds its point forecast back as the next week's previous demand and
    /// into the lag features.
    pub fn forecast(
        &self,
        series: &SeriesInstance,
        future_rows: &[RawFeatureRow],
        schema: &FeatureSchema,
        horizon: usize,
        statistic: PointStatistic,
    ) -> Result<Vec<StepForecast>> {
        if horizon == 0 {
            return Ok(Vec::new());
        }
        if future_rows.len() < horizon {
            return Err(Error::MissingFutureFeatures {
                needed: horizon,
                available: future_rows.len(),
            });
        }
        self.check_schema(schema)?;
        let scale = schema.demand_scale(series.vertical_id());
        let mut rollout = Rollout::new(schema, series, &future_rows[..horizon]);
        let mut state = LstmState::zeros(self.layout.hidden);
        let mut y_prev = scale.forward(0.0);
        for &y in series.demand() {
            let (_, row) = rollout.features()?;
            let ff = self.associative_forward(&row)?;
            if self.config.variant.recurrent() {
                state = self.lstm(y_prev, &ff, &state).2;
            }
            y_prev = scale.forward(y);
            rollout.advance(y)?;
        }
        let mut out = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let (_, row) = rollout.features()?;
            let ff = self.associative_forward(&row)?;
            let head_in = if self.config.variant.recurrent() {
                state = self.lstm(y_prev, &ff, &state).2;
                state.hidden.clone()
            } else {
                ff
            };
            let mixture = self.head(&head_in).0;
            let point = point_forecast(&mixture, &scale, statistic);
            y_prev = scale.forward(point);
            rollout.advance(point)?;
            out.push(StepForecast { mixture, point });
        }
        Ok(out)
    }

    /// Mixture outputs for every week of `series` with realized demand fed back.
    pub fn teacher_forced_outputs(&self, series: &SeriesInstance, schema: &FeatureSchema) -> Result<Vec<MdnOutput>> {
        self.check_schema(schema)?;
        self.forward(&Sequence::from_series(series, schema)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&CheckpointDoc {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            schema_hash: self.schema_hash.clone(),
            config: self.config,
            dims: self.dims.clone(),
            params: self.params.clone(),
        })
        .expect("checkpoint serializes")
    }

    /// Parses a checkpoint without checking it against a schema.
    pub fn from_json_unchecked(text: &str) -> Result<Self> {
        let doc: CheckpointDoc = serde_json::from_str(text)?;
        if doc.format != CHECKPOINT_FORMAT || doc.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: doc.version,
            });
        }
        Self::from_parts(doc.config, doc.dims, doc.schema_hash, doc.params)
    }

    pub fn from_json(text: &str, schema: &FeatureSchema) -> Result<Self> {
        let model = Self::from_json_unchecked(text)?;
        model.check_schema(schema)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?, schema)
    }
}

fn split_pair(grad: &mut [f64], w: Range<usize>, b: Range<usize>) -> (&mut [f64], &mut [f64]) {
    debug_assert_eq!(w.end, b.start);
    let (left, right) = grad[w.start..b.end].split_at_mut(w.len());
    (left, right)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepForecast {
    pub mixture: MdnOutput,
    /// Demand units.
    pub point: f64,
}
