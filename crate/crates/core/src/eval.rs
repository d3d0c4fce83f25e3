//! Metrics, test-window reports and the model-variant comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::armdn::{ArmdnModel, NetworkVariant, PointStatistic, Sequence};
use crate::cubist::{CubistConfig, CubistModel};
use crate::dataset::{split_windows, Dataset, Week, WindowSplit};
use crate::error::{Error, Result};
use crate::features::{fit_schema, FeatureSchema};
use crate::train::{train_global, TrainConfig};
use crate::util::json_hash;

pub const DEFAULT_HIT_CUTOFF: f64 = 30.0;
pub const REPORT_VERSION: u32 = 1;
pub const CSV_COLUMNS: [&str; 6] = ["sku_id", "vertical_id", "horizon_week", "actual", "forecast", "abs_err"];

/// `100 · Σ|Y − y| / ΣY`.
pub fn wmape(actuals: &[f64], forecasts: &[f64]) -> Result<f64> {
    if actuals.len() != forecasts.len() {
        return Err(Error::Shape(format!("{} actuals vs {} forecasts", actuals.len(), forecasts.len())));
    }
    if actuals.is_empty() {
        return Err(Error::EmptyInput("wmape actuals"));
    }
    let total: f64 = actuals.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroActuals);
    }
    let err: f64 = actuals.iter().zip(forecasts).map(|(a, f)| (a - f).abs()).sum();
    Ok(100.0 * err / total)
}

/// Fraction of SKUs whose error (percent) is below `cutoff_pct`.
pub fn hit_rate(per_sku_errors: &[f64], cutoff_pct: f64) -> Result<f64> {
    if per_sku_errors.is_empty() {
        return Err(Error::EmptyInput("hit-rate errors"));
    }
    let hits = per_sku_errors.iter().filter(|&&e| e < cutoff_pct).count();
    Ok(hits as f64 / per_sku_errors.len() as f64)
}

/// Per-SKU wMAPE over the given rows. A SKU with no actual demand scores 0
/// when its forecasts are also all zero and infinity otherwise.
pub fn per_sku_errors<'a>(rows: impl IntoIterator<Item = &'a ReportRow>) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for r in rows {
        let e = sums.entry(r.sku_id.clone()).or_default();
        e.0 += r.actual;
        e.1 += r.abs_err;
    }
    sums.into_iter()
        .map(|(k, (a, e))| {
            let v = if a > 0.0 {
                100.0 * e / a
            } else if e == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            (k, v)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    Armdn,
    RMdn,
    AMdn,
    Ar,
    Cubist,
    /// Last observed demand repeated; a floor baseline.
    Persistence,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Armdn,
        Variant::RMdn,
        Variant::AMdn,
        Variant::Ar,
        Variant::Cubist,
        Variant::Persistence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Armdn => "ARMDN",
            Self::RMdn => "R_MDN",
            Self::AMdn => "A_MDN",
            Self::Ar => "AR",
            Self::Cubist => "CUBIST",
            Self::Persistence => "PERSISTENCE",
        }
    }

    pub fn network(self) -> Option<NetworkVariant> {
        match self {
            Self::Armdn => Some(NetworkVariant::Armdn),
            Self::RMdn => Some(NetworkVariant::RMdn),
            Self::AMdn => Some(NetworkVariant::AMdn),
            Self::Ar => Some(NetworkVariant::Ar),
            Self::Cubist | Self::Persistence => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_uppercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|v| v.name() == norm || v.name().replace('_', "") == norm)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Something that produces point forecasts for test windows.
#[derive(Clone, Debug)]
pub enum Forecaster {
    /// A global network, with optional per-vertical replacements.
    Network {
        global: ArmdnModel,
        verticals: BTreeMap<String, ArmdnModel>,
        statistic: PointStatistic,
    },
    Cubist(CubistModel),
    Persistence,
}

impl Forecaster {
    pub fn network(model: ArmdnModel) -> Self {
        Self::Network {
            global: model,
            verticals: BTreeMap::new(),
            statistic: PointStatistic::Mean,
        }
    }

    /// Point forecasts for every test window of `split`, in window order.
    pub fn forecast_split(&self, split: &WindowSplit, schema: &FeatureSchema) -> Result<Vec<Vec<f64>>> {
        split
            .test
            .iter()
            .map(|w| {
                let history = split
                    .train
                    .get(&w.key)
                    .ok_or_else(|| Error::InvalidSeries(format!("no history for {}", w.key)))?;
                match self {
                    Self::Network {
                        global,
                        verticals,
                        statistic,
                    } => {
                        let model = verticals.get(&w.vertical_id).unwrap_or(global);
                        Ok(model
                            .forecast(history, &w.rows, schema, split.horizon, *statistic)?
                            .into_iter()
                            .map(|s| s.point)
                            .collect())
                    }
                    Self::Cubist(m) => m.forecast(history, &w.rows, schema, split.horizon),
                    Self::Persistence => Ok(vec![*history.demand().last().unwrap(); split.horizon]),
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub sku_id: String,
    pub region_id: String,
    pub vertical_id: String,
    /// 1-based position in the forecast window.
    pub horizon_week: usize,
    pub week: Week,
    pub actual: f64,
    pub forecast: f64,
    pub abs_err: f64,
}

/// Forecasts and errors for one test window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub version: u32,
    pub variant: String,
    pub config_hash: String,
    pub seed: u64,
    pub train_end: Week,
    pub horizon: usize,
    pub rows: Vec<ReportRow>,
    /// wMAPE for horizon weeks 1..=horizon; `None` when that week sold nothing.
    pub horizon_wmape: Vec<Option<f64>>,
    pub overall_wmape: Option<f64>,
    pub hit_rate: Option<f64>,
    pub vertical_wmape: BTreeMap<String, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportMeta {
    pub variant: String,
    pub config_hash: String,
    pub seed: u64,
}

fn wmape_of<'a>(rows: impl Iterator<Item = &'a ReportRow>) -> Option<f64> {
    let (a, f): (Vec<f64>, Vec<f64>) = rows.map(|r| (r.actual, r.forecast)).unzip();
    wmape(&a, &f).ok()
}

impl ForecastReport {
    pub fn from_rows(meta: &ReportMeta, train_end: Week, horizon: usize, rows: Vec<ReportRow>) -> Self {
        let horizon_wmape = (1..=horizon)
            .map(|h| wmape_of(rows.iter().filter(|r| r.horizon_week == h)))
            .collect();
        let verticals: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.vertical_id.as_str()).collect();
        let vertical_wmape = verticals
            .into_iter()
            .map(|v| (v.to_string(), wmape_of(rows.iter().filter(|r| r.vertical_id == v))))
            .collect();
        let errors: Vec<f64> = per_sku_errors(&rows).into_values().collect();
        Self {
            version: REPORT_VERSION,
            variant: meta.variant.clone(),
            config_hash: meta.config_hash.clone(),
            seed: meta.seed,
            train_end,
            horizon,
            overall_wmape: wmape_of(rows.iter()),
            hit_rate: hit_rate(&errors, DEFAULT_HIT_CUTOFF).ok(),
            horizon_wmape,
            vertical_wmape,
            rows,
        }
    }

    /// Report for forecasts produced over `split`'s test windows.
    pub fn build(meta: &ReportMeta, split: &WindowSplit, forecasts: &[Vec<f64>]) -> Result<Self> {
        if forecasts.len() != split.test.len() {
            return Err(Error::Shape(format!(
                "{} forecast windows for {} test windows",
                forecasts.len(),
                split.test.len()
            )));
        }
        let mut rows = Vec::with_capacity(split.test.len() * split.horizon);
        for (w, f) in split.test.iter().zip(forecasts) {
            if f.len() != split.horizon {
                return Err(Error::Shape(format!("{} forecasts for horizon {}", f.len(), split.horizon)));
            }
            for (h, (&actual, &forecast)) in w.actuals.iter().zip(f).enumerate() {
                rows.push(ReportRow {
                    sku_id: w.key.sku_id.clone(),
                    region_id: w.key.region_id.clone(),
                    vertical_id: w.vertical_id.clone(),
                    horizon_week: h + 1,
                    week: w.start_week + h as Week,
                    actual,
                    forecast,
                    abs_err: (actual - forecast).abs(),
                });
            }
        }
        Ok(Self::from_rows(meta, split.train_end, split.horizon, rows))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.version != REPORT_VERSION {
            return Err(Error::Version {
                expected: REPORT_VERSION,
                found: r.version,
            });
        }
        Ok(r)
    }

    /// Row-level CSV with [`CSV_COLUMNS`].
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_COLUMNS)?;
        for r in &self.rows {
            w.write_record([
                r.sku_id.clone(),
                r.vertical_id.clone(),
                r.horizon_week.to_string(),
                r.actual.to_string(),
                r.forecast.to_string(),
                r.abs_err.to_string(),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

pub fn emit_report(report: &ForecastReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => report.to_json(),
        ReportFormat::Csv => report.to_csv()?,
    };
    fs::write(path, text)?;
    Ok(())
}

pub fn load_report(path: impl AsRef<Path>) -> Result<ForecastReport> {
    ForecastReport::from_json(&fs::read_to_string(path)?)
}

/// Share of SKUs whose wMAPE over all windows' rows is below the cutoff.
pub fn hit_rate_across(reports: &[ForecastReport], cutoff_pct: f64) -> Result<f64> {
    let errors: Vec<f64> = per_sku_errors(reports.iter().flat_map(|r| &r.rows)).into_values().collect();
    hit_rate(&errors, cutoff_pct)
}

/// Teacher-forced mean NLL over the test weeks of every window of `split`,
/// with the full series (history plus window) as context.
pub fn heldout_nll(model: &ArmdnModel, dataset: &Dataset, split: &WindowSplit, schema: &FeatureSchema) -> Result<f64> {
    let mut batch = Vec::with_capacity(split.test.len());
    let last = split.train_end + split.horizon as Week;
    for w in &split.test {
        let s = dataset
            .get(&w.key)
            .and_then(|s| s.truncated(last))
            .ok_or_else(|| Error::InvalidSeries(format!("no series for {}", w.key)))?;
        let seq = Sequence::from_series(&s, schema)?;
        let n = seq.len();
        batch.push(seq.masked_to(n - split.horizon..n));
    }
    if batch.is_empty() {
        return Err(Error::EmptyInput("held-out windows"));
    }
    let mut total = 0.0;
    let mut cells = 0usize;
    for chunk in batch.chunks(64) {
        let c: usize = chunk.iter().map(Sequence::unmasked).sum();
        total += model.loss(chunk)? * c as f64;
        cells += c;
    }
    Ok(total / cells as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub train: TrainConfig,
    pub cubist: CubistConfig,
    /// Last training week of each test window.
    pub train_ends: Vec<Week>,
    pub horizon: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            cubist: CubistConfig::default(),
            train_ends: vec![68, 72, 74],
            horizon: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub train_end: Week,
    pub overall_wmape: Option<f64>,
    pub horizon_wmape: Vec<Option<f64>>,
    pub hit_rate: Option<f64>,
    /// Teacher-forced NLL on the test weeks (network variants only).
    pub heldout_nll: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
    pub reports: Vec<ForecastReport>,
}

impl AblationTable {
    pub fn get(&self, variant: Variant, train_end: Week) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && r.train_end == train_end)
    }
}

/// Trains and scores every variant on identical splits, schemas and seeds.
pub fn run_ablation(dataset: &Dataset, variants: &[Variant], config: &AblationConfig) -> Result<AblationTable> {
    if variants.is_empty() || config.train_ends.is_empty() {
        return Err(Error::EmptyInput("ablation variants and windows"));
    }
    let config_hash = json_hash(config);
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &train_end in &config.train_ends {
        let split = split_windows(dataset, train_end, config.horizon)?;
        let schema = fit_schema(&split.train)?;
        for &variant in variants {
            let (forecaster, nll) = match variant.network() {
                Some(net) => {
                    let tc = TrainConfig {
                        variant: net,
                        ..config.train.clone()
                    };
                    let model = train_global(&split.train, &schema, &tc)?.model;
                    let nll = heldout_nll(&model, dataset, &split, &schema)?;
                    (Forecaster::network(model), Some(nll))
                }
                None if variant == Variant::Cubist => {
                    (Forecaster::Cubist(CubistModel::fit(&split.train, &schema, &config.cubist)?), None)
                }
                None => (Forecaster::Persistence, None),
            };
            let forecasts = forecaster.forecast_split(&split, &schema)?;
            let meta = ReportMeta {
                variant: variant.name().into(),
                config_hash: config_hash.clone(),
                seed: config.train.seed,
            };
            let report = ForecastReport::build(&meta, &split, &forecasts)?;
            rows.push(AblationRow {
                variant,
                train_end,
                overall_wmape: report.overall_wmape,
                horizon_wmape: report.horizon_wmape.clone(),
                hit_rate: report.hit_rate,
                heldout_nll: nll,
            });
            reports.push(report);
        }
    }
    Ok(AblationTable {
        config_hash,
        rows,
        reports,
    })
}
