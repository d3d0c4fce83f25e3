//! Feature schema, derived Table-style features, encoding and lag tracking.
//!
//! A [`FeatureSchema`] is fitted on training weeks only. Numeric features are
//! (optionally log-compressed and then) standardized, categorical features
//! become vocabulary indices with slot 0 reserved for unseen values, and
//! binary flags pass through as 0/1.
//!
//! Lag features depend on demand history, so they are produced by a
//! [`LagState`] that is advanced once per week, either with realized demand
//! (training, warm-up) or with the model's own forecast (rollout).

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{week_of_month, Dataset, RawFeatureRow, SeriesInstance, Week};
use crate::error::{Error, Result};
use crate::util::json_hash;

pub const SCHEMA_VERSION: u32 = 1;

/// Vocabulary slot for categories never seen during fitting.
pub const OOV_INDEX: usize = 0;
const OOV_TOKEN: &str = "<oov>";

/// Cap, in weeks, for event distances when no event is known.
pub const EVENT_DISTANCE_CAP: f64 = 52.0;

/// Relative tolerance for treating two prices as different.
pub const PRICE_CHANGE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bucket {
    Product,
    Visibility,
    Price,
    Convenience,
    Time,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Numeric,
    Categorical,
    Binary,
}

/// Compression applied before standardization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    Log1p,
    SignedLog1p,
}

impl Transform {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::Log1p => x.max(0.0).ln_1p(),
            Transform::SignedLog1p => x.signum() * x.abs().ln_1p(),
        }
    }
}

const NUMERIC_FEATURES: [(&str, Bucket, Transform); 17] = [
    ("listed_price", Bucket::Price, Transform::Log1p),
    ("discounted_price", Bucket::Price, Transform::Log1p),
    ("effective_price", Bucket::Price, Transform::Log1p),
    ("out_of_stock_pct", Bucket::Product, Transform::Identity),
    ("week_of_month", Bucket::Time, Transform::Identity),
    ("lag_price_mean_1w", Bucket::Time, Transform::Log1p),
    ("lag_price_mean_4w", Bucket::Time, Transform::Log1p),
    ("lag_sale_mean_1w", Bucket::Time, Transform::Log1p),
    ("lag_sale_mean_4w", Bucket::Time, Transform::Log1p),
    ("weeks_since_price_change", Bucket::Time, Transform::Identity),
    ("weeks_since_last_event", Bucket::Time, Transform::Identity),
    ("weeks_to_next_event", Bucket::Time, Transform::Identity),
    ("weeks_since_first_sale", Bucket::Time, Transform::Identity),
    ("diff_from_historical_mean_price", Bucket::Price, Transform::SignedLog1p),
    ("historical_min_price", Bucket::Price, Transform::Log1p),
    ("historical_max_price", Bucket::Price, Transform::Log1p),
    ("avg_vertical_discount", Bucket::Price, Transform::Identity),
];

pub const N_NUMERIC: usize = NUMERIC_FEATURES.len();

const CATEGORICAL_FEATURES: [(&str, Bucket); 3] = [
    ("product_id", Bucket::Product),
    ("product_tier", Bucket::Product),
    ("event_type", Bucket::Visibility),
];

/// Index of `product_id` among the categorical features.
pub const PRODUCT_ID: usize = 0;

const BINARY_FEATURES: [(&str, Bucket); 5] = [
    ("deal_card", Bucket::Visibility),
    ("banner", Bucket::Visibility),
    ("no_cost_emi", Bucket::Convenience),
    ("exchange", Bucket::Convenience),
    ("exclusive", Bucket::Convenience),
];

pub const N_BINARY: usize = BINARY_FEATURES.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub name: String,
    pub bucket: Bucket,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vocabulary: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<Transform>,
    #[serde(default)]
    pub mean: f64,
    #[serde(default)]
    pub std: f64,
    /// Numeric feature had zero spread on the training weeks (std stored as 1).
    #[serde(default)]
    pub constant: bool,
}

/// Per-vertical standardization of `log1p(demand)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandScale {
    pub mean: f64,
    pub std: f64,
}

impl DemandScale {
    pub fn forward(&self, demand: f64) -> f64 {
        (demand.max(0.0).ln_1p() - self.mean) / self.std
    }

    /// Back to demand units, clamped at zero.
    pub fn inverse(&self, z: f64) -> f64 {
        (z * self.std + self.mean).exp_m1().max(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub version: u32,
    pub entries: Vec<FeatureEntry>,
    pub vertical_discounts: BTreeMap<String, f64>,
    pub demand_scales: BTreeMap<String, DemandScale>,
    pub global_demand_scale: DemandScale,
    pub global_discount: f64,
}

/// Streaming mean/variance.
#[derive(Clone, Copy, Debug, Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Mean and population standard deviation.
    fn finish(&self) -> (f64, f64) {
        if self.n == 0 {
            return (0.0, 0.0);
        }
        (self.mean, (self.m2 / self.n as f64).max(0.0).sqrt())
    }
}

fn degenerate(std: f64) -> bool {
    !(std > 1e-12)
}

pub fn fit_schema(train: &Dataset) -> Result<FeatureSchema> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut discount_acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut demand_acc: BTreeMap<String, Welford> = BTreeMap::new();
    let mut global_demand = Welford::default();
    let mut tiers = BTreeSet::new();
    let mut events = BTreeSet::new();
    let mut skus = BTreeSet::new();
    for s in train.series() {
        let acc = discount_acc.entry(s.vertical_id().to_string()).or_default();
        let demand = demand_acc.entry(s.vertical_id().to_string()).or_default();
        for (&y, row) in s.demand().iter().zip(s.features()) {
            acc.0 += row.discount();
            acc.1 += 1;
            demand.push(y.ln_1p());
            global_demand.push(y.ln_1p());
            tiers.insert(row.product_tier.clone());
            events.insert(row.event_type.clone());
        }
        skus.insert(s.sku_id().to_string());
    }
    let vertical_discounts: BTreeMap<String, f64> = discount_acc
        .into_iter()
        .map(|(v, (sum, n))| (v, sum / n as f64))
        .collect();
    let global_discount = crate::util::mean(&vertical_discounts.values().copied().collect::<Vec<_>>());
    let scale = |w: &Welford| {
        let (mean, std) = w.finish();
        DemandScale {
            mean,
            std: if degenerate(std) { 1.0 } else { std },
        }
    };
    let demand_scales = demand_acc.iter().map(|(v, w)| (v.clone(), scale(w))).collect();

    let mut numeric = [Welford::default(); N_NUMERIC];
    for s in train.series() {
        let discount = vertical_discounts[s.vertical_id()];
        let mut lag = LagState::new(s.start_week());
        for (i, (&y, row)) in s.demand().iter().zip(s.features()).enumerate() {
            let week = s.start_week() + i as Week;
            let derived = derive(s.features(), s.start_week(), week, &lag, discount)?;
            for (acc, (x, (_, _, transform))) in numeric
                .iter_mut()
                .zip(numeric_values(row, &derived).into_iter().zip(NUMERIC_FEATURES))
            {
                acc.push(transform.apply(x));
            }
            lag.advance(week, y, row.effective_price, row.is_event())?;
        }
    }

    let mut entries = Vec::with_capacity(N_NUMERIC + CATEGORICAL_FEATURES.len() + N_BINARY);
    for ((name, bucket, transform), acc) in NUMERIC_FEATURES.iter().zip(&numeric) {
        let (mean, std) = acc.finish();
        let constant = degenerate(std);
        entries.push(FeatureEntry {
            name: name.to_string(),
            bucket: *bucket,
            kind: FeatureKind::Numeric,
            vocabulary: Vec::new(),
            transform: Some(*transform),
            mean,
            std: if constant { 1.0 } else { std },
            constant,
        });
    }
    for ((name, bucket), values) in CATEGORICAL_FEATURES.iter().zip([skus, tiers, events]) {
        let vocabulary = std::iter::once(OOV_TOKEN.to_string()).chain(values).collect();
        entries.push(FeatureEntry {
            name: name.to_string(),
            bucket: *bucket,
            kind: FeatureKind::Categorical,
            vocabulary,
            transform: None,
            mean: 0.0,
            std: 0.0,
            constant: false,
        });
    }
    for (name, bucket) in BINARY_FEATURES {
        entries.push(FeatureEntry {
            name: name.to_string(),
            bucket,
            kind: FeatureKind::Binary,
            vocabulary: Vec::new(),
            transform: None,
            mean: 0.0,
            std: 0.0,
            constant: false,
        });
    }

    Ok(FeatureSchema {
        version: SCHEMA_VERSION,
        entries,
        vertical_discounts,
        demand_scales,
        global_demand_scale: scale(&global_demand),
        global_discount,
    })
}

impl FeatureSchema {
    pub fn numeric_entries(&self) -> &[FeatureEntry] {
        &self.entries[..N_NUMERIC]
    }

    pub fn categorical_entries(&self) -> &[FeatureEntry] {
        &self.entries[N_NUMERIC..N_NUMERIC + CATEGORICAL_FEATURES.len()]
    }

    pub fn binary_entries(&self) -> &[FeatureEntry] {
        &self.entries[N_NUMERIC + CATEGORICAL_FEATURES.len()..]
    }

    pub fn n_numeric(&self) -> usize {
        N_NUMERIC
    }

    pub fn n_binary(&self) -> usize {
        N_BINARY
    }

    /// Vocabulary sizes (including the OOV slot), in categorical order.
    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.categorical_entries().iter().map(|e| e.vocabulary.len()).collect()
    }

    pub fn category_index(&self, feature: usize, value: &str) -> usize {
        let vocab = &self.categorical_entries()[feature].vocabulary;
        vocab[1..]
            .binary_search_by(|v| v.as_str().cmp(value))
            .map_or(OOV_INDEX, |i| i + 1)
    }

    pub fn category_name(&self, feature: usize, index: usize) -> Option<&str> {
        self.categorical_entries()[feature]
            .vocabulary
            .get(index)
            .map(String::as_str)
    }

    pub fn demand_scale(&self, vertical_id: &str) -> DemandScale {
        self.demand_scales
            .get(vertical_id)
            .copied()
            .unwrap_or(self.global_demand_scale)
    }

    pub fn vertical_discount(&self, vertical_id: &str) -> f64 {
        self.vertical_discounts
            .get(vertical_id)
            .copied()
            .unwrap_or(self.global_discount)
    }

    pub fn hash(&self) -> String {
        json_hash(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Self = serde_json::from_str(text)?;
        if schema.version != SCHEMA_VERSION {
            return Err(Error::Version {
                expected: SCHEMA_VERSION,
                found: schema.version,
            });
        }
        Ok(schema)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// History-dependent features for one week.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedFeatures {
    pub week_of_month: f64,
    pub lag_price_mean_1w: f64,
    pub lag_price_mean_4w: f64,
    pub lag_sale_mean_1w: f64,
    pub lag_sale_mean_4w: f64,
    pub weeks_since_price_change: f64,
    pub weeks_since_last_event: f64,
    pub weeks_to_next_event: f64,
    pub weeks_since_first_sale: f64,
    pub diff_from_historical_mean_price: f64,
    pub historical_min_price: f64,
    pub historical_max_price: f64,
    pub avg_vertical_discount: f64,
}

/// Raw (untransformed) numeric inputs in schema order.
pub fn numeric_values(row: &RawFeatureRow, d: &DerivedFeatures) -> [f64; N_NUMERIC] {
    [
        row.listed_price,
        row.discounted_price,
        row.effective_price,
        row.out_of_stock_pct,
        d.week_of_month,
        d.lag_price_mean_1w,
        d.lag_price_mean_4w,
        d.lag_sale_mean_1w,
        d.lag_sale_mean_4w,
        d.weeks_since_price_change,
        d.weeks_since_last_event,
        d.weeks_to_next_event,
        d.weeks_since_first_sale,
        d.diff_from_historical_mean_price,
        d.historical_min_price,
        d.historical_max_price,
        d.avg_vertical_discount,
    ]
}

fn binary_values(row: &RawFeatureRow) -> [bool; N_BINARY] {
    [row.deal_card, row.banner, row.no_cost_emi, row.exchange, row.exclusive]
}

const LAG_WINDOW: usize = 4;

/// Demand and price history of one series up to (not including) `next_week`.
#[derive(Clone, Debug, PartialEq)]
pub struct LagState {
    next_week: Week,
    start_week: Week,
    last_price: Option<f64>,
    last_price_change_week: Week,
    first_sale_week: Option<Week>,
    last_event_week: Option<Week>,
    demand_history: VecDeque<f64>,
    price_history: VecDeque<f64>,
    price_sum: f64,
    price_count: usize,
    price_min: f64,
    price_max: f64,
}

impl LagState {
    pub fn new(start_week: Week) -> Self {
        Self {
            next_week: start_week,
            start_week,
            last_price: None,
            last_price_change_week: start_week,
            first_sale_week: None,
            last_event_week: None,
            demand_history: VecDeque::with_capacity(LAG_WINDOW),
            price_history: VecDeque::with_capacity(LAG_WINDOW),
            price_sum: 0.0,
            price_count: 0,
            price_min: f64::INFINITY,
            price_max: f64::NEG_INFINITY,
        }
    }

    /// The week whose features this state can derive next.
    pub fn next_week(&self) -> Week {
        self.next_week
    }

    pub fn last_price_change_week(&self) -> Week {
        self.last_price_change_week
    }

    /// Most recent demand values, oldest first.
    pub fn demand_history(&self) -> impl Iterator<Item = f64> + '_ {
        self.demand_history.iter().copied()
    }

    fn price_changed(&self, price: f64) -> bool {
        self.last_price.is_some_and(|prev| {
            (price - prev).abs() > PRICE_CHANGE_TOLERANCE * prev.abs().max(price.abs())
        })
    }

    /// Records week `week`'s demand (realized or forecast) and price.
    pub fn advance(&mut self, week: Week, demand: f64, price: f64, is_event: bool) -> Result<()> {
        if week != self.next_week {
            return Err(Error::LagOrder {
                expected: self.next_week,
                got: week,
            });
        }
        if self.price_changed(price) {
            self.last_price_change_week = week;
        }
        self.last_price = Some(price);
        if demand > 0.0 && self.first_sale_week.is_none() {
            self.first_sale_week = Some(week);
        }
        if is_event {
            self.last_event_week = Some(week);
        }
        if self.demand_history.len() == LAG_WINDOW {
            self.demand_history.pop_front();
            self.price_history.pop_front();
        }
        self.demand_history.push_back(demand);
        self.price_history.push_back(price);
        self.price_sum += price;
        self.price_count += 1;
        self.price_min = self.price_min.min(price);
        self.price_max = self.price_max.max(price);
        self.next_week += 1;
        Ok(())
    }
}

fn tail_mean(values: &VecDeque<f64>, n: usize) -> Option<f64> {
    let take = n.min(values.len());
    (take > 0).then(|| values.iter().rev().take(take).sum::<f64>() / take as f64)
}

/// Derived features for week `week` of a series whose rows start at
/// `start_week`. `rows` may extend past the demand history (known future
/// causal rows); it must cover `week`.
pub fn derive(
    rows: &[RawFeatureRow],
    start_week: Week,
    week: Week,
    lag: &LagState,
    avg_vertical_discount: f64,
) -> Result<DerivedFeatures> {
    if week < start_week || week >= start_week + rows.len() as Week {
        return Err(Error::WeekOutOfRange {
            week,
            start: start_week,
            len: rows.len(),
        });
    }
    if lag.next_week != week {
        return Err(Error::LagOrder {
            expected: lag.next_week,
            got: week,
        });
    }
    let idx = (week - start_week) as usize;
    let row = &rows[idx];
    let price = row.effective_price;

    let weeks_since_price_change = if lag.price_changed(price) {
        0.0
    } else {
        (week - lag.last_price_change_week) as f64
    };
    let weeks_since_last_event = if row.is_event() {
        0.0
    } else {
        lag.last_event_week
            .map_or(EVENT_DISTANCE_CAP, |w| ((week - w) as f64).min(EVENT_DISTANCE_CAP))
    };
    let weeks_to_next_event = rows[idx..]
        .iter()
        .position(RawFeatureRow::is_event)
        .map_or(EVENT_DISTANCE_CAP, |d| (d as f64).min(EVENT_DISTANCE_CAP));
    let (historical_mean, historical_min, historical_max) = if lag.price_count > 0 {
        (lag.price_sum / lag.price_count as f64, lag.price_min, lag.price_max)
    } else {
        (price, price, price)
    };

    Ok(DerivedFeatures {
        week_of_month: f64::from(week_of_month(week)),
        lag_price_mean_1w: tail_mean(&lag.price_history, 1).unwrap_or(price),
        lag_price_mean_4w: tail_mean(&lag.price_history, 4).unwrap_or(price),
        lag_sale_mean_1w: tail_mean(&lag.demand_history, 1).unwrap_or(0.0),
        lag_sale_mean_4w: tail_mean(&lag.demand_history, 4).unwrap_or(0.0),
        weeks_since_price_change,
        weeks_since_last_event,
        weeks_to_next_event,
        weeks_since_first_sale: lag.first_sale_week.map_or(0.0, |w| (week - w) as f64),
        diff_from_historical_mean_price: price - historical_mean,
        historical_min_price: historical_min,
        historical_max_price: historical_max,
        avg_vertical_discount,
    })
}

/// Model-ready inputs for one week.
///
/// `categorical[j]` is the vocabulary index of the j-th categorical feature
/// of the schema (product id, tier, event type).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedRow {
    pub numeric: Vec<f64>,
    pub categorical: Vec<usize>,
    pub binary: Vec<f64>,
}

pub fn encode(
    row: &RawFeatureRow,
    derived: &DerivedFeatures,
    sku_id: &str,
    schema: &FeatureSchema,
) -> EncodedRow {
    let numeric = numeric_values(row, derived)
        .into_iter()
        .zip(schema.numeric_entries())
        .map(|(x, e)| (e.transform.unwrap_or(Transform::Identity).apply(x) - e.mean) / e.std)
        .collect();
    let categorical = vec![
        schema.category_index(0, sku_id),
        schema.category_index(1, &row.product_tier),
        schema.category_index(2, &row.event_type),
    ];
    let binary = binary_values(row).into_iter().map(|b| f64::from(u8::from(b))).collect();
    EncodedRow {
        numeric,
        categorical,
        binary,
    }
}

/// Week-by-week feature producer for one series: first over its known
/// history, then over supplied future rows.
///
/// Stock-outs are assumed away for future weeks (`out_of_stock_pct` = 0).
#[derive(Clone, Debug)]
pub struct Rollout<'a> {
    schema: &'a FeatureSchema,
    sku_id: String,
    vertical_discount: f64,
    start_week: Week,
    rows: Vec<RawFeatureRow>,
    lag: LagState,
}

impl<'a> Rollout<'a> {
    pub fn new(schema: &'a FeatureSchema, series: &SeriesInstance, future_rows: &[RawFeatureRow]) -> Self {
        let mut rows = series.features().to_vec();
        rows.extend(future_rows.iter().cloned().map(|mut r| {
            r.out_of_stock_pct = 0.0;
            r
        }));
        Self {
            schema,
            sku_id: series.sku_id().to_string(),
            vertical_discount: schema.vertical_discount(series.vertical_id()),
            start_week: series.start_week(),
            rows,
            lag: LagState::new(series.start_week()),
        }
    }

    pub fn next_week(&self) -> Week {
        self.lag.next_week
    }

    pub fn lag_state(&self) -> &LagState {
        &self.lag
    }

    /// Features of the next unconsumed week.
    pub fn features(&self) -> Result<(DerivedFeatures, EncodedRow)> {
        let week = self.lag.next_week;
        let derived = derive(&self.rows, self.start_week, week, &self.lag, self.vertical_discount)?;
        let row = &self.rows[(week - self.start_week) as usize];
        let encoded = encode(row, &derived, &self.sku_id, self.schema);
        Ok((derived, encoded))
    }

    /// Consumes the next week with the given (realized or forecast) demand.
    pub fn advance(&mut self, demand: f64) -> Result<()> {
        let week = self.lag.next_week;
        let row = self
            .rows
            .get((week - self.start_week) as usize)
            .ok_or(Error::WeekOutOfRange {
                week,
                start: self.start_week,
                len: self.rows.len(),
            })?;
        self.lag.advance(week, demand, row.effective_price, row.is_event())
    }
}

/// Encoded rows for every week of `series`, with lags from realized demand.
pub fn teacher_forced(series: &SeriesInstance, schema: &FeatureSchema) -> Result<Vec<(DerivedFeatures, EncodedRow)>> {
    let mut rollout = Rollout::new(schema, series, &[]);
    // History rows keep their recorded stock-out level.
    let mut out = Vec::with_capacity(series.len());
    for &y in series.demand() {
        out.push(rollout.features()?);
        rollout.advance(y)?;
    }
    Ok(out)
}
