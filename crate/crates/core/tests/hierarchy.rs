mod common;

use common::*;
use demandcast::dataset::{Dataset, RawFeatureRow, SeriesInstance};
use demandcast::hierarchy::*;
use demandcast::Error;
use proptest::prelude::*;

fn row() -> RawFeatureRow {
    small_dataset(1).series()[0].features()[0].clone()
}

fn regional(demand: &[Vec<f64>]) -> Dataset {
    let series = demand
        .iter()
        .enumerate()
        .map(|(r, d)| SeriesInstance::new("S1", format!("R{r}"), "V1", 1, d.clone(), vec![row(); d.len()]).unwrap())
        .collect();
    Dataset::new(series).unwrap()
}

fn ratios_of(ds: &Dataset, week: i64) -> Vec<f64> {
    compute_ratios(ds, week).unwrap().skus["S1"].regions.iter().map(|r| r.ratio).collect()
}

#[test]
fn outlier_week_is_clipped_to_the_fence() {
    let a = [50.0, 55.0, 60.0, 65.0, 60.0, 55.0, 50.0, 95.0];
    let b: Vec<f64> = a.iter().map(|v| 100.0 - v).collect();
    let ds = regional(&[a.to_vec(), b]);
    let r = compute_ratios(&ds, 8).unwrap();
    let sku = &r.skus["S1"];
    // Region 0: Q1 0.5375, Q3 0.6125, upper fence 0.725; mean after clipping 4.675/8.
    // Region 1: lower fence 0.275; mean 3.325/8.
    assert!((sku.regions[0].ratio - 0.584375).abs() < 1e-12);
    assert!((sku.regions[1].ratio - 0.415625).abs() < 1e-12);
    assert_eq!(sku.regions[0].clipped_weeks, 1);
    assert_eq!(sku.regions[1].clipped_weeks, 1);
    assert_eq!(sku.weeks_used, 8);
}

#[test]
fn constant_split_and_single_region() {
    let ds = regional(&[vec![60.0; 10], vec![40.0; 10]]);
    let r = ratios_of(&ds, 10);
    assert!((r[0] - 0.6).abs() < 1e-12 && (r[1] - 0.4).abs() < 1e-12);
    assert_eq!(ratios_of(&regional(&[vec![3.0, 9.0, 1.0]]), 3), vec![1.0]);
}

#[test]
fn young_products_use_the_weeks_they_have() {
    let ds = regional(&[vec![30.0, 30.0, 30.0], vec![10.0, 10.0, 10.0]]);
    let r = compute_ratios(&ds, 3).unwrap();
    assert_eq!(r.skus["S1"].weeks_used, 3);
    assert!((r.skus["S1"].regions[0].ratio - 0.75).abs() < 1e-12);
}

#[test]
fn zero_history_falls_back_to_uniform() {
    let ds = regional(&[vec![0.0; 9], vec![0.0; 9], vec![0.0; 9]]);
    let r = compute_ratios(&ds, 9).unwrap();
    assert!(r.skus["S1"].zero_history);
    assert!(r.skus["S1"].regions.iter().all(|s| (s.ratio - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn disaggregation_examples() {
    let ds = regional(&[vec![60.0; 8], vec![40.0; 8]]);
    let r = compute_ratios(&ds, 8).unwrap();
    let out = disaggregate(100.0, "S1", &r, SplitMode::Real).unwrap();
    assert!((out[0].1 - 60.0).abs() < 1e-9 && (out[1].1 - 40.0).abs() < 1e-9);
    assert_eq!(out[0].0, "R0");
    let single = compute_ratios(&regional(&[vec![5.0; 8]]), 8).unwrap();
    assert_eq!(disaggregate(17.3, "S1", &single, SplitMode::Real).unwrap()[0].1, 17.3);
    assert!(matches!(disaggregate(1.0, "S9", &r, SplitMode::Real), Err(Error::MissingRatios(_))));
}

#[test]
fn ratios_export_as_csv() {
    let ds = regional(&[vec![60.0; 8], vec![40.0; 8]]);
    let mut buf = Vec::new();
    write_ratios_csv(&compute_ratios(&ds, 8).unwrap(), &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "sku_id,region_id,ratio,weeks_used");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("S1,R0,"));
}

fn demand_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..5, 1usize..12).prop_flat_map(|(regions, weeks)| {
        prop::collection::vec(prop::collection::vec(0.0f64..500.0, weeks), regions)
    })
}

proptest! {
    #[test]
    fn ratios_form_a_distribution(demand in demand_matrix()) {
        let weeks = demand[0].len() as i64;
        let r = ratios_of(&regional(&demand), weeks);
        prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ratios_ignore_uniform_scaling(demand in demand_matrix(), scale in 0.01f64..1000.0) {
        let weeks = demand[0].len() as i64;
        let scaled: Vec<Vec<f64>> = demand.iter().map(|d| d.iter().map(|v| v * scale).collect()).collect();
        let a = ratios_of(&regional(&demand), weeks);
        let b = ratios_of(&regional(&scaled), weeks);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn disaggregation_is_coherent(demand in demand_matrix(), national in 0.0f64..1e5) {
        let weeks = demand[0].len() as i64;
        let r = compute_ratios(&regional(&demand), weeks).unwrap();
        let real: f64 = disaggregate(national, "S1", &r, SplitMode::Real).unwrap().iter().map(|p| p.1).sum();
        prop_assert!((real - national).abs() <= 1e-9 * national.max(1.0));
        let parts = disaggregate(national, "S1", &r, SplitMode::Integer).unwrap();
        prop_assert!(parts.iter().all(|p| p.1 >= 0.0 && p.1.fract() == 0.0));
        prop_assert_eq!(parts.iter().map(|p| p.1).sum::<f64>(), national.round());
    }

    #[test]
    fn integer_allocation_stays_within_one_unit(total in 0u32..100_000, raw in prop::collection::vec(0.0f64..1.0, 1..8)) {
        let z: f64 = raw.iter().sum();
        prop_assume!(z > 0.0);
        let ratios: Vec<f64> = raw.iter().map(|v| v / z).collect();
        let alloc = largest_remainder(total as f64, &ratios);
        prop_assert_eq!(alloc.iter().sum::<f64>(), total as f64);
        for (a, r) in alloc.iter().zip(&ratios) {
            prop_assert!((a - total as f64 * r).abs() < 1.0 + 1e-9);
        }
    }
}
