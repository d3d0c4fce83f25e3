//! Splitting national forecasts across fulfillment regions by recent sales shares.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Week};
use crate::error::{Error, Result};

/// Trailing weeks used for the shares.
pub const RATIO_WINDOW: usize = 8;
const IQR_FENCE: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionShare {
    pub region_id: String,
    pub ratio: f64,
    /// Weeks whose share was pulled back to an IQR fence.
    pub clipped_weeks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkuRatios {
    pub regions: Vec<RegionShare>,
    /// Weeks with positive national demand that fed the shares.
    pub weeks_used: usize,
    /// No demand in the window: shares are uniform.
    pub zero_history: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionRatios {
    pub as_of_week: Week,
    pub skus: BTreeMap<String, SkuRatios>,
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Pulls values outside `[Q1 − 1.5·IQR, Q3 + 1.5·IQR]` back to the fence.
/// Returns the clipped values and how many moved.
pub fn clip_iqr(values: &[f64]) -> (Vec<f64>, usize) {
    if values.len() < 2 {
        return (values.to_vec(), 0);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - IQR_FENCE * iqr, q3 + IQR_FENCE * iqr);
    let mut moved = 0;
    let out = values
        .iter()
        .map(|&v| {
            let c = v.clamp(lo, hi);
            if c != v {
                moved += 1;
            }
            c
        })
        .collect();
    (out, moved)
}

/// Per-SKU regional shares over the `RATIO_WINDOW` weeks ending at `as_of_week`.
///
/// Weekly shares are outlier-clipped per region, averaged and renormalized.
/// Weeks a region does not cover count as zero sales there.
pub fn compute_ratios(dataset: &Dataset, as_of_week: Week) -> Result<RegionRatios> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let first = as_of_week - RATIO_WINDOW as Week + 1;
    let mut by_sku: BTreeMap<&str, Vec<(&str, Vec<f64>)>> = BTreeMap::new();
    for s in dataset.series() {
        let window: Vec<f64> = (first..=as_of_week)
            .map(|w| s.index_of(w).map_or(0.0, |i| s.demand()[i]))
            .collect();
        by_sku.entry(s.sku_id()).or_default().push((s.region_id(), window));
    }
    let mut skus = BTreeMap::new();
    for (sku, regions) in by_sku {
        let totals: Vec<f64> = (0..RATIO_WINDOW).map(|t| regions.iter().map(|r| r.1[t]).sum()).collect();
        let live: Vec<usize> = (0..RATIO_WINDOW).filter(|&t| totals[t] > 0.0).collect();
        let entry = if live.is_empty() {
            let u = 1.0 / regions.len() as f64;
            SkuRatios {
                regions: regions
                    .iter()
                    .map(|r| RegionShare {
                        region_id: r.0.to_string(),
                        ratio: u,
                        clipped_weeks: 0,
                    })
                    .collect(),
                weeks_used: 0,
                zero_history: true,
            }
        } else {
            let mut shares = Vec::with_capacity(regions.len());
            for (region, demand) in &regions {
                let weekly: Vec<f64> = live.iter().map(|&t| demand[t] / totals[t]).collect();
                let (clipped, moved) = clip_iqr(&weekly);
                let mean = clipped.iter().sum::<f64>() / clipped.len() as f64;
                shares.push((region.to_string(), mean, moved));
            }
            let total: f64 = shares.iter().map(|s| s.1).sum();
            let n = shares.len() as f64;
            SkuRatios {
                regions: shares
                    .into_iter()
                    .map(|(region_id, m, clipped_weeks)| RegionShare {
                        region_id,
                        ratio: if total > 0.0 { m / total } else { 1.0 / n },
                        clipped_weeks,
                    })
                    .collect(),
                weeks_used: live.len(),
                zero_history: false,
            }
        };
        skus.insert(sku.to_string(), entry);
    }
    Ok(RegionRatios { as_of_week, skus })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// `national × ratio` per region.
    #[default]
    Real,
    /// Whole units, largest remainder first; sums to the rounded national value.
    Integer,
}

/// Allocates a national forecast across one SKU's regions.
pub fn disaggregate(national: f64, sku_id: &str, ratios: &RegionRatios, mode: SplitMode) -> Result<Vec<(String, f64)>> {
    let sku = ratios.skus.get(sku_id).ok_or_else(|| Error::MissingRatios(sku_id.to_string()))?;
    let r: Vec<f64> = sku.regions.iter().map(|s| s.ratio).collect();
    let values = match mode {
        SplitMode::Real => r.iter().map(|x| national * x).collect(),
        SplitMode::Integer => largest_remainder(national.max(0.0).round(), &r),
    };
    Ok(sku.regions.iter().map(|s| s.region_id.clone()).zip(values).collect())
}

/// Integer allocation of `total` units in proportion to `ratios`.
pub fn largest_remainder(total: f64, ratios: &[f64]) -> Vec<f64> {
    let quotas: Vec<f64> = ratios.iter().map(|r| total * r).collect();
    let mut alloc: Vec<f64> = quotas.iter().map(|q| q.floor()).collect();
    let left = (total - alloc.iter().sum::<f64>()).round() as i64;
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - alloc[b]).total_cmp(&(quotas[a] - alloc[a])).then(a.cmp(&b)));
    if left >= 0 {
        for &i in order.iter().cycle().take(left as usize) {
            alloc[i] += 1.0;
        }
    } else {
        // Only reachable through floating-point overshoot of the quotas.
        for &i in order.iter().rev().cycle().take((-left) as usize) {
            alloc[i] -= 1.0;
        }
    }
    alloc
}

/// CSV with columns `sku_id,region_id,ratio,weeks_used`.
pub fn write_ratios_csv<W: Write>(ratios: &RegionRatios, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["sku_id", "region_id", "ratio", "weeks_used"])?;
    for (sku, r) in &ratios.skus {
        for s in &r.regions {
            w.write_record([sku.as_str(), &s.region_id, &s.ratio.to_string(), &r.weeks_used.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_ratios_csv(ratios: &RegionRatios, path: impl AsRef<Path>) -> Result<()> {
    write_ratios_csv(ratios, File::create(path)?)
}
