#![allow(dead_code)]

use demandcast::armdn::{ArmdnModel, InputDims, Layout, ModelConfig, NetworkVariant, Sequence};
use demandcast::dataset::{generate_synthetic, Dataset, GeneratorConfig};
use demandcast::features::{fit_schema, EncodedRow, FeatureSchema};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_dataset(seed: u64) -> Dataset {
    generate_synthetic(&GeneratorConfig {
        n_skus: 6,
        n_verticals: 2,
        n_weeks: 24,
        event_weeks: [6, 15, 22].into_iter().collect(),
        seed,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

pub fn small_schema() -> (Dataset, FeatureSchema) {
    let ds = small_dataset(3);
    let schema = fit_schema(&ds).unwrap();
    (ds, schema)
}

pub fn small_config(variant: NetworkVariant, mixtures: usize) -> ModelConfig {
    ModelConfig {
        variant,
        mixtures,
        hidden: 8,
        assoc_width: 6,
        embed_width: 4,
    }
}

pub fn dims() -> InputDims {
    InputDims {
        numeric: 5,
        binary: 2,
        vocab_sizes: vec![4, 3],
    }
}

/// Model with every parameter drawn uniformly from ±`scale`.
pub fn random_model(config: ModelConfig, dims: InputDims, scale: f64, seed: u64) -> ArmdnModel {
    let total = Layout::new(&config, &dims).total;
    let mut r = rng(seed);
    let params = (0..total).map(|_| r.random_range(-scale..scale)).collect();
    ArmdnModel::from_parts(config, dims, "test".into(), params).unwrap()
}

pub fn random_row(dims: &InputDims, r: &mut ChaCha8Rng) -> EncodedRow {
    EncodedRow {
        numeric: (0..dims.numeric).map(|_| r.random_range(-2.0..2.0)).collect(),
        categorical: dims.vocab_sizes.iter().map(|&v| r.random_range(0..v)).collect(),
        binary: (0..dims.binary).map(|_| f64::from(u8::from(r.random_bool(0.5)))).collect(),
    }
}

pub fn random_sequence(dims: &InputDims, len: usize, r: &mut ChaCha8Rng) -> Sequence {
    Sequence {
        rows: (0..len).map(|_| random_row(dims, r)).collect(),
        y_prev: (0..len).map(|_| r.random_range(-1.5..1.5)).collect(),
        targets: (0..len).map(|_| r.random_range(-1.5..1.5)).collect(),
        mask: vec![true; len],
    }
}

/// Floor on the relative-error denominator, so near-zero gradients are
/// compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Central-difference gradient of the batch loss for the given parameter indices.
pub fn numeric_gradient(
    model: &ArmdnModel,
    batch: &[Sequence],
    dropout: Option<&[Vec<Vec<f64>>]>,
    indices: impl Iterator<Item = usize>,
    eps: f64,
) -> Vec<(usize, f64)> {
    let mut m = model.clone();
    indices
        .map(|i| {
            let orig = m.params[i];
            m.params[i] = orig + eps;
            let up = m.loss_and_gradient(batch, dropout).unwrap().0;
            m.params[i] = orig - eps;
            let down = m.loss_and_gradient(batch, dropout).unwrap().0;
            m.params[i] = orig;
            (i, (up - down) / (2.0 * eps))
        })
        .collect()
}

/// Largest relative error per named parameter group.
pub fn gradient_check(
    model: &ArmdnModel,
    batch: &[Sequence],
    dropout: Option<&[Vec<Vec<f64>>]>,
) -> Vec<(String, f64)> {
    let (_, grad) = model.loss_and_gradient(batch, dropout).unwrap();
    let numeric = numeric_gradient(model, batch, dropout, 0..model.params.len(), 1e-5);
    model
        .layout()
        .groups()
        .into_iter()
        .map(|(name, range)| {
            let worst = numeric
                .iter()
                .filter(|(i, _)| range.contains(i))
                .map(|&(i, n)| rel_err(grad[i], n))
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}
