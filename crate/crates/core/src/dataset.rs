//! Weekly sales series, the synthetic e-retail generator, CSV ingestion and
//! train/test windowing.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Week index on a global weekly calendar. Week 1 is the first week of a month.
pub type Week = i64;

/// `event_type` value for ordinary trading weeks.
pub const NO_EVENT: &str = "none";

/// Relative tolerance used when comparing ingested prices.
const PRICE_TOLERANCE: f64 = 1e-9;

pub const CSV_HEADER: [&str; 16] = [
    "sku_id",
    "region_id",
    "vertical_id",
    "week",
    "demand",
    "listed_price",
    "discounted_price",
    "effective_price",
    "event_type",
    "deal_card",
    "banner",
    "no_cost_emi",
    "exchange",
    "exclusive",
    "oos_pct",
    "tier",
];

/// Causal features observed for one SKU in one week.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawFeatureRow {
    pub listed_price: f64,
    pub discounted_price: f64,
    pub effective_price: f64,
    pub event_type: String,
    pub deal_card: bool,
    pub banner: bool,
    pub no_cost_emi: bool,
    pub exchange: bool,
    pub exclusive: bool,
    pub out_of_stock_pct: f64,
    pub product_tier: String,
}

impl RawFeatureRow {
    pub fn is_event(&self) -> bool {
        self.event_type != NO_EVENT
    }

    /// Fractional discount off the listed price.
    pub fn discount(&self) -> f64 {
        if self.listed_price > 0.0 {
            1.0 - self.discounted_price / self.listed_price
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let prices = [self.listed_price, self.discounted_price, self.effective_price];
        if prices.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(format!("prices must be finite and non-negative: {prices:?}"));
        }
        let le = |a: f64, b: f64| a <= b + PRICE_TOLERANCE * b.abs().max(1.0);
        if !le(self.effective_price, self.discounted_price)
            || !le(self.discounted_price, self.listed_price)
        {
            return Err(format!(
                "expected effective <= discounted <= listed, got {} / {} / {}",
                self.effective_price, self.discounted_price, self.listed_price
            ));
        }
        if !(0.0..=1.0).contains(&self.out_of_stock_pct) {
            return Err(format!("oos_pct {} outside [0, 1]", self.out_of_stock_pct));
        }
        if self.event_type.is_empty() || self.product_tier.is_empty() {
            return Err("event_type and tier must be non-empty".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SeriesKey {
    pub sku_id: String,
    pub region_id: String,
}

impl std::fmt::Display for SeriesKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.sku_id, self.region_id)
    }
}

/// One (SKU, region) weekly demand series with aligned causal features.
///
/// Weeks run consecutively from `start_week`; `demand[i]` and `features[i]`
/// both belong to week `start_week + i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesInstance {
    key: SeriesKey,
    vertical_id: String,
    start_week: Week,
    demand: Vec<f64>,
    features: Vec<RawFeatureRow>,
}

impl SeriesInstance {
    pub fn new(
        sku_id: impl Into<String>,
        region_id: impl Into<String>,
        vertical_id: impl Into<String>,
        start_week: Week,
        demand: Vec<f64>,
        features: Vec<RawFeatureRow>,
    ) -> Result<Self> {
        let key = SeriesKey {
            sku_id: sku_id.into(),
            region_id: region_id.into(),
        };
        if demand.is_empty() {
            return Err(Error::InvalidSeries(format!("{key}: empty series")));
        }
        if demand.len() != features.len() {
            return Err(Error::InvalidSeries(format!(
                "{key}: {} demand values but {} feature rows",
                demand.len(),
                features.len()
            )));
        }
        for (i, (&y, row)) in demand.iter().zip(&features).enumerate() {
            let week = start_week + i as Week;
            if !(y >= 0.0) || !y.is_finite() {
                return Err(Error::NegativeDemand {
                    sku: key.sku_id.clone(),
                    region: key.region_id.clone(),
                    week,
                    demand: y,
                });
            }
            row.validate()
                .map_err(|m| Error::InvalidSeries(format!("{key} week {week}: {m}")))?;
        }
        Ok(Self {
            key,
            vertical_id: vertical_id.into(),
            start_week,
            demand,
            features,
        })
    }

    pub fn key(&self) -> &SeriesKey {
        &self.key
    }

    pub fn sku_id(&self) -> &str {
        &self.key.sku_id
    }

    pub fn region_id(&self) -> &str {
        &self.key.region_id
    }

    pub fn vertical_id(&self) -> &str {
        &self.vertical_id
    }

    pub fn start_week(&self) -> Week {
        self.start_week
    }

    /// Last week covered (inclusive).
    pub fn end_week(&self) -> Week {
        self.start_week + self.demand.len() as Week - 1
    }

    pub fn len(&self) -> usize {
        self.demand.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demand.is_empty()
    }

    pub fn demand(&self) -> &[f64] {
        &self.demand
    }

    pub fn features(&self) -> &[RawFeatureRow] {
        &self.features
    }

    pub fn index_of(&self, week: Week) -> Option<usize> {
        (week >= self.start_week && week <= self.end_week()).then(|| (week - self.start_week) as usize)
    }

    /// Weeks `start_week..=end`, or `None` if that range is empty.
    pub fn truncated(&self, end: Week) -> Option<SeriesInstance> {
        let n = (end - self.start_week + 1).clamp(0, self.len() as Week) as usize;
        (n > 0).then(|| SeriesInstance {
            key: self.key.clone(),
            vertical_id: self.vertical_id.clone(),
            start_week: self.start_week,
            demand: self.demand[..n].to_vec(),
            features: self.features[..n].to_vec(),
        })
    }
}

/// An immutable collection of series, ordered by (sku, region).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    series: Vec<SeriesInstance>,
}

impl Dataset {
    pub fn new(mut series: Vec<SeriesInstance>) -> Result<Self> {
        series.sort_by(|a, b| a.key.cmp(&b.key));
        for pair in series.windows(2) {
            if pair[0].key == pair[1].key {
                return Err(Error::InvalidSeries(format!("duplicate series {}", pair[0].key)));
            }
        }
        Ok(Self { series })
    }

    pub fn series(&self) -> &[SeriesInstance] {
        &self.series
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn get(&self, key: &SeriesKey) -> Option<&SeriesInstance> {
        self.series
            .binary_search_by(|s| s.key.cmp(key))
            .ok()
            .map(|i| &self.series[i])
    }

    pub fn verticals(&self) -> BTreeSet<String> {
        self.series.iter().map(|s| s.vertical_id.clone()).collect()
    }

    pub fn regions(&self) -> BTreeSet<String> {
        self.series.iter().map(|s| s.key.region_id.clone()).collect()
    }

    pub fn filter_vertical(&self, vertical_id: &str) -> Dataset {
        Dataset {
            series: self
                .series
                .iter()
                .filter(|s| s.vertical_id == vertical_id)
                .cloned()
                .collect(),
        }
    }

    /// Sums every SKU's regional series into one `national` series.
    ///
    /// Causal features are set nationally, so the first region covering a
    /// week supplies its feature row.
    pub fn national(&self) -> Result<Dataset> {
        let mut by_sku: BTreeMap<&str, Vec<&SeriesInstance>> = BTreeMap::new();
        for s in &self.series {
            by_sku.entry(s.sku_id()).or_default().push(s);
        }
        let mut out = Vec::with_capacity(by_sku.len());
        for (sku, parts) in by_sku {
            let start = parts.iter().map(|s| s.start_week).min().unwrap();
            let end = parts.iter().map(|s| s.end_week()).max().unwrap();
            let n = (end - start + 1) as usize;
            let mut demand = vec![0.0; n];
            let mut rows: Vec<Option<RawFeatureRow>> = vec![None; n];
            for part in &parts {
                let offset = (part.start_week - start) as usize;
                for (i, (&y, row)) in part.demand.iter().zip(&part.features).enumerate() {
                    demand[offset + i] += y;
                    rows[offset + i].get_or_insert_with(|| row.clone());
                }
            }
            let features = rows
                .into_iter()
                .enumerate()
                .map(|(i, r)| {
                    r.ok_or_else(|| {
                        Error::InvalidSeries(format!(
                            "sku {sku}: no region covers week {}",
                            start + i as Week
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(SeriesInstance::new(
                sku,
                "national",
                parts[0].vertical_id.clone(),
                start,
                demand,
                features,
            )?);
        }
        Dataset::new(out)
    }
}

// ---------------------------------------------------------------------------
// CSV I/O

#[derive(Debug, Serialize, Deserialize)]
struct CsvRecord {
    sku_id: String,
    region_id: String,
    vertical_id: String,
    week: Week,
    demand: f64,
    listed_price: f64,
    discounted_price: f64,
    effective_price: f64,
    event_type: String,
    #[serde(with = "flag")]
    deal_card: bool,
    #[serde(with = "flag")]
    banner: bool,
    #[serde(with = "flag")]
    no_cost_emi: bool,
    #[serde(with = "flag")]
    exchange: bool,
    #[serde(with = "flag")]
    exclusive: bool,
    oos_pct: f64,
    tier: String,
}

/// Binary columns are written as `0`/`1`.
mod flag {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match String::deserialize(d)?.trim() {
            "0" | "false" => Ok(false),
            "1" | "true" => Ok(true),
            other => Err(de::Error::custom(format!("expected 0 or 1, got {other:?}"))),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    read_csv(File::open(path)?, path)
}

pub fn read_csv<R: Read>(reader: R, path: &Path) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Parse {
            path: path.to_owned(),
            row: 1,
            message: format!("expected header {}", CSV_HEADER.join(",")),
        });
    }

    struct Pending {
        vertical: String,
        rows: Vec<(Week, f64, RawFeatureRow, usize)>,
    }
    let mut groups: BTreeMap<SeriesKey, Pending> = BTreeMap::new();
    for result in rdr.records() {
        let record = result?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let rec: CsvRecord = record.deserialize(Some(&header)).map_err(|e| Error::Parse {
            path: path.to_owned(),
            row: line,
            message: e.to_string(),
        })?;
        let key = SeriesKey {
            sku_id: rec.sku_id,
            region_id: rec.region_id,
        };
        if !(rec.demand >= 0.0) {
            return Err(Error::NegativeDemand {
                sku: key.sku_id,
                region: key.region_id,
                week: rec.week,
                demand: rec.demand,
            });
        }
        let row = RawFeatureRow {
            listed_price: rec.listed_price,
            discounted_price: rec.discounted_price,
            effective_price: rec.effective_price,
            event_type: rec.event_type,
            deal_card: rec.deal_card,
            banner: rec.banner,
            no_cost_emi: rec.no_cost_emi,
            exchange: rec.exchange,
            exclusive: rec.exclusive,
            out_of_stock_pct: rec.oos_pct,
            product_tier: rec.tier,
        };
        row.validate().map_err(|message| Error::Parse {
            path: path.to_owned(),
            row: line,
            message,
        })?;
        let group = groups.entry(key.clone()).or_insert_with(|| Pending {
            vertical: rec.vertical_id.clone(),
            rows: Vec::new(),
        });
        if group.vertical != rec.vertical_id {
            return Err(Error::Parse {
                path: path.to_owned(),
                row: line,
                message: format!(
                    "series {key} changes vertical from {} to {}",
                    group.vertical, rec.vertical_id
                ),
            });
        }
        group.rows.push((rec.week, rec.demand, row, line));
    }

    let mut series = Vec::with_capacity(groups.len());
    for (key, mut group) in groups {
        group.rows.sort_by_key(|r| r.0);
        for pair in group.rows.windows(2) {
            if pair[1].0 != pair[0].0 + 1 {
                return Err(Error::NonConsecutiveWeeks {
                    sku: key.sku_id.clone(),
                    region: key.region_id.clone(),
                    previous: pair[0].0,
                    week: pair[1].0,
                });
            }
        }
        let start = group.rows[0].0;
        let (demand, features) = group.rows.into_iter().map(|(_, y, row, _)| (y, row)).unzip();
        series.push(SeriesInstance::new(
            key.sku_id,
            key.region_id,
            group.vertical,
            start,
            demand,
            features,
        )?);
    }
    Dataset::new(series)
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut file = File::create(path)?;
    write_csv(dataset, &mut file)?;
    file.flush()?;
    Ok(())
}

pub fn write_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    wtr.write_record(CSV_HEADER)?;
    for s in &dataset.series {
        for (i, (&demand, row)) in s.demand.iter().zip(&s.features).enumerate() {
            wtr.serialize(CsvRecord {
                sku_id: s.key.sku_id.clone(),
                region_id: s.key.region_id.clone(),
                vertical_id: s.vertical_id.clone(),
                week: s.start_week + i as Week,
                demand,
                listed_price: row.listed_price,
                discounted_price: row.discounted_price,
                effective_price: row.effective_price,
                event_type: row.event_type.clone(),
                deal_card: row.deal_card,
                banner: row.banner,
                no_cost_emi: row.no_cost_emi,
                exchange: row.exchange,
                exclusive: row.exclusive,
                oos_pct: row.out_of_stock_pct,
                tier: row.product_tier.clone(),
            })?;
        }
    }
    wtr.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic generator

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemandModality {
    Unimodal,
    Bimodal,
}

impl std::str::FromStr for DemandModality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unimodal" => Ok(Self::Unimodal),
            "bimodal" => Ok(Self::Bimodal),
            other => Err(Error::Config(format!("unknown demand modality {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_skus: usize,
    pub n_verticals: usize,
    pub n_regions: usize,
    pub n_weeks: usize,
    pub event_weeks: BTreeSet<Week>,
    pub event_lift_range: (f64, f64),
    pub price_change_prob: f64,
    pub demand_modality: DemandModality,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_skus: 100,
            n_verticals: 4,
            n_regions: 1,
            n_weeks: 80,
            event_weeks: [12, 25, 38, 51, 60, 71, 74, 78].into_iter().collect(),
            event_lift_range: (2.0, 4.0),
            price_change_prob: 0.1,
            demand_modality: DemandModality::Unimodal,
            noise_scale: 0.25,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_verticals == 0 || self.n_regions == 0 || self.n_weeks == 0 {
            return fail("n_verticals, n_regions and n_weeks must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.price_change_prob) {
            return fail("price_change_prob must lie in [0, 1]");
        }
        let (lo, hi) = self.event_lift_range;
        if !(lo >= 1.0 && hi >= lo && hi.is_finite()) {
            return fail("event_lift_range must satisfy 1 <= lower <= upper");
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return fail("noise_scale must be finite and non-negative");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("generator config serializes")
    }
}

struct VerticalProfile {
    id: String,
    level: f64,
    elasticity: f64,
    reference_adapt: f64,
    week_of_month: [f64; 4],
    event_sensitivity: f64,
}

impl VerticalProfile {
    fn draw(index: usize, rng: &mut ChaCha8Rng) -> Self {
        let amplitude = rng.random_range(0.1..0.35);
        let peak = (index % 4) as f64;
        let mut week_of_month = [0.0; 4];
        for (j, m) in week_of_month.iter_mut().enumerate() {
            *m = 1.0 + amplitude * (std::f64::consts::FRAC_PI_2 * (j as f64 - peak)).cos();
        }
        Self {
            id: format!("V{index:02}"),
            level: rng.random_range(2.0..4.0),
            elasticity: rng.random_range(1.5..3.5),
            reference_adapt: rng.random_range(0.3..0.6),
            week_of_month,
            event_sensitivity: rng.random_range(0.7..1.3),
        }
    }
}

/// 1-based position of a week inside its (4-week) month.
pub fn week_of_month(week: Week) -> u8 {
    ((week - 1).rem_euclid(4) + 1) as u8
}

const TIERS: [(&str, f64); 3] = [("A", 0.8), ("B", 0.0), ("C", -0.8)];
const DISCOUNT_LEVELS: [f64; 8] = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.4];

fn round_to(x: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (x * s).round() / s
}

/// Draws a seeded synthetic catalogue of weekly e-retail sales.
///
/// Expected demand is a log-normal base level scaled by a week-of-month
/// profile, a reference-price response (price cuts spike demand, which then
/// decays as the reference price adapts), event-week lifts with pre/post dips,
/// merchandising flags, a ramp-up for mid-range launches and stock-outs.
/// Realized demand is a rounded multiplicative draw around that expectation;
/// in bimodal mode the multiplier comes from a two-component mixture.
pub fn generate_synthetic(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let verticals: Vec<VerticalProfile> = (0..config.n_verticals)
        .map(|v| VerticalProfile::draw(v, &mut rng))
        .collect();

    let mut series = Vec::with_capacity(config.n_skus * config.n_regions);
    for sku_index in 0..config.n_skus {
        // Independent stream per SKU so catalogue size does not reshuffle SKUs.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(sku_index as u64 + 1);
        let vertical = &verticals[sku_index % config.n_verticals];
        let (start, demand, rows) = simulate_sku(config, vertical, &mut rng);
        let sku_id = format!("S{sku_index:04}");

        if config.n_regions == 1 {
            series.push(SeriesInstance::new(&sku_id, "R00", &vertical.id, start, demand, rows)?);
            continue;
        }
        let mut shares: Vec<f64> = (0..config.n_regions).map(|_| rng.random_range(0.5..1.5)).collect();
        let total: f64 = shares.iter().sum();
        shares.iter_mut().for_each(|s| *s /= total);
        let mut regional = vec![Vec::with_capacity(demand.len()); config.n_regions];
        for &units in &demand {
            let mut remaining = units as u64;
            let mut remaining_share = 1.0;
            for (r, &share) in shares.iter().enumerate() {
                let take = if r + 1 == config.n_regions || remaining == 0 {
                    remaining
                } else {
                    let p = (share / remaining_share).clamp(0.0, 1.0);
                    Binomial::new(remaining, p).expect("valid binomial").sample(&mut rng)
                };
                regional[r].push(take as f64);
                remaining -= take;
                remaining_share -= share;
            }
        }
        for (r, region_demand) in regional.into_iter().enumerate() {
            series.push(SeriesInstance::new(
                &sku_id,
                format!("R{r:02}"),
                &vertical.id,
                start,
                region_demand,
                rows.clone(),
            )?);
        }
    }
    Dataset::new(series)
}

fn simulate_sku(
    config: &GeneratorConfig,
    vertical: &VerticalProfile,
    rng: &mut ChaCha8Rng,
) -> (Week, Vec<f64>, Vec<RawFeatureRow>) {
    let n_weeks = config.n_weeks as Week;
    let (tier, tier_offset) = TIERS[rng.random_range(0..TIERS.len())];
    let level = vertical.level + tier_offset + Normal::new(0.0, 0.3).unwrap().sample(rng);
    let listed_price = round_to(rng.random_range(200f64.ln()..20000f64.ln()).exp(), 0);
    let exclusive = rng.random_bool(0.2);
    let emi_eligible = listed_price > 5000.0;
    let start: Week = if n_weeks > 6 && rng.random_bool(0.2) {
        rng.random_range(2..=(n_weeks / 3).max(2))
    } else {
        1
    };

    let sigma = config.noise_scale;
    let noise = LogNormal::new(-0.5 * sigma * sigma, sigma).unwrap();
    let (lift_lo, lift_hi) = config.event_lift_range;
    let is_major = |w: Week| config.event_weeks.contains(&w);

    let mut base_discount = DISCOUNT_LEVELS[rng.random_range(0..3)];
    let mut reference_price: Option<f64> = None;
    let mut demand = Vec::new();
    let mut rows = Vec::new();
    for week in start..=n_weeks {
        if rng.random_bool(config.price_change_prob) {
            base_discount = DISCOUNT_LEVELS[rng.random_range(0..DISCOUNT_LEVELS.len())];
        }
        let major = is_major(week);
        let minor = !major && rng.random_bool(0.04);
        let discount = if major {
            base_discount.max(rng.random_range(0.3..0.5))
        } else if minor {
            (base_discount + 0.1).min(0.6)
        } else {
            base_discount
        };
        let discounted_price = round_to(listed_price * (1.0 - discount), 2);
        let exchange = rng.random_bool(0.15);
        let no_cost_emi = emi_eligible && rng.random_bool(0.5);
        let cashback = if exchange { 0.04 } else { 0.0 } + if no_cost_emi { 0.01 } else { 0.0 };
        let effective_price = round_to(discounted_price * (1.0 - cashback), 2).min(discounted_price);
        let deal_card = major || rng.random_bool(if minor { 0.5 } else { 0.08 });
        let banner = (major && rng.random_bool(0.7)) || rng.random_bool(0.03);
        let out_of_stock_pct = if rng.random_bool(0.08) {
            round_to(rng.random_range(0.0..0.4), 3)
        } else {
            0.0
        };

        let reference = *reference_price.get_or_insert(effective_price);
        let price_mult = (effective_price / reference).powf(-vertical.elasticity).clamp(0.2, 6.0);
        reference_price = Some(reference + vertical.reference_adapt * (effective_price - reference));

        let event_mult = if major {
            rng.random_range(lift_lo..=lift_hi).powf(vertical.event_sensitivity)
        } else if is_major(week - 1) || is_major(week + 1) {
            0.85
        } else if minor {
            1.3
        } else {
            1.0
        };
        let merch = (if deal_card { 1.15 } else { 1.0 })
            * (if banner { 1.2 } else { 1.0 })
            * (if no_cost_emi { 1.05 } else { 1.0 })
            * (if exchange { 1.05 } else { 1.0 });
        let ramp = if start > 1 {
            1.0 - 0.6 * (-((week - start) as f64) / 3.0).exp()
        } else {
            1.0
        };
        let seasonal = vertical.week_of_month[week_of_month(week) as usize - 1];
        let expected =
            level.exp() * price_mult * event_mult * merch * ramp * seasonal * (1.0 - out_of_stock_pct);
        let multiplier = match config.demand_modality {
            DemandModality::Unimodal => noise.sample(rng),
            DemandModality::Bimodal => {
                let mode = if rng.random_bool(0.5) { 0.45 } else { 1.55 };
                mode * noise.sample(rng)
            }
        };
        demand.push((expected * multiplier).round().max(0.0));
        rows.push(RawFeatureRow {
            listed_price,
            discounted_price,
            effective_price,
            event_type: if major {
                "major".into()
            } else if minor {
                "minor".into()
            } else {
                NO_EVENT.into()
            },
            deal_card,
            banner,
            no_cost_emi,
            exchange,
            exclusive,
            out_of_stock_pct,
            product_tier: tier.into(),
        });
    }
    (start, demand, rows)
}

// ---------------------------------------------------------------------------
// Windowing

/// The `horizon` weeks following the training cut-off for one series.
#[derive(Clone, Debug, PartialEq)]
pub struct TestWindow {
    pub key: SeriesKey,
    pub vertical_id: String,
    /// First forecast week (`train_end + 1`).
    pub start_week: Week,
    pub rows: Vec<RawFeatureRow>,
    pub actuals: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct WindowSplit {
    pub train_end: Week,
    pub horizon: usize,
    pub train: Dataset,
    pub test: Vec<TestWindow>,
    /// Series dropped from `test` (and from `train` when they start after the cut-off).
    pub excluded: Vec<SeriesKey>,
}

pub fn split_windows(dataset: &Dataset, train_end: Week, horizon: usize) -> Result<WindowSplit> {
    if horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let earliest = dataset.series.iter().map(|s| s.start_week).min().unwrap();
    if train_end < earliest {
        return Err(Error::TrainEndBeforeData { train_end, earliest });
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut excluded = Vec::new();
    for s in &dataset.series {
        let Some(head) = s.truncated(train_end) else {
            excluded.push(s.key.clone());
            continue;
        };
        train.push(head);
        let first = train_end + 1;
        let last = train_end + horizon as Week;
        match (s.index_of(first), s.index_of(last)) {
            (Some(a), Some(b)) => test.push(TestWindow {
                key: s.key.clone(),
                vertical_id: s.vertical_id.clone(),
                start_week: first,
                rows: s.features[a..=b].to_vec(),
                actuals: s.demand[a..=b].to_vec(),
            }),
            _ => excluded.push(s.key.clone()),
        }
    }
    Ok(WindowSplit {
        train_end,
        horizon,
        train: Dataset::new(train)?,
        test,
        excluded,
    })
}
