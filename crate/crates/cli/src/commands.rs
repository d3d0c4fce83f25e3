use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use demandcast::armdn::{ArmdnModel, NetworkVariant, PointStatistic};
use demandcast::cubist::CubistModel;
use demandcast::dataset::{generate_synthetic, load_csv, save_csv, split_windows, Dataset, Week};
use demandcast::eval::{
    emit_report, hit_rate_across, run_ablation, AblationConfig, Forecaster, ForecastReport, ReportFormat, ReportMeta,
    ReportRow, Variant, DEFAULT_HIT_CUTOFF,
};
use demandcast::features::{fit_schema, FeatureSchema};
use demandcast::hierarchy::{compute_ratios, disaggregate, SplitMode};
use demandcast::train::{finetune_vertical, train_global, TrainingData};
use demandcast::Error;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{parse_weeks, FileConfig};
use crate::manifest::{ArtifactSet, RunManifest};
use crate::{
    AblateArgs, Cli, Command, EvaluateArgs, ForecastArgs, GenerateArgs, ModelFlags, ModelInputs, ModelKind, Stage,
    Statistic, TrainArgs,
};

struct Ctx {
    out_dir: PathBuf,
    config_path: Option<PathBuf>,
    config: FileConfig,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    fn finish(&self, artifacts: ArtifactSet, manifest: &Path, command: &str, snapshot: serde_json::Value) -> anyhow::Result<()> {
        artifacts.finish(
            &self.path(manifest),
            command,
            self.config_path.as_deref(),
            snapshot,
            self.config.seed(),
        )?;
        Ok(())
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    // A second initialization only happens in tests; the first pool stands.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build_global();
    std::fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let mut config = FileConfig::load(cli.config.as_deref())?;
    config.resolve_seed(cli.seed);
    let mut ctx = Ctx {
        out_dir: cli.out_dir,
        config_path: cli.config,
        config,
    };
    match cli.command {
        Command::Generate(a) => generate(&mut ctx, a),
        Command::Train(a) => train(&mut ctx, a),
        Command::Forecast(a) => forecast(&mut ctx, a),
        Command::Evaluate(a) => evaluate(&mut ctx, a),
        Command::Ablate(a) => ablate(&mut ctx, a),
    }
}

fn manifest_for(output: &Path) -> PathBuf {
    output.with_extension("manifest.json")
}

fn snapshot_hash(snapshot: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(snapshot.to_string().as_bytes()))
}

fn generate(ctx: &mut Ctx, a: GenerateArgs) -> anyhow::Result<()> {
    let g = &mut ctx.config.generate;
    if let Some(v) = a.skus {
        g.n_skus = v;
    }
    if let Some(v) = a.verticals {
        g.n_verticals = v;
    }
    if let Some(v) = a.regions {
        g.n_regions = v;
    }
    if let Some(v) = a.weeks {
        g.n_weeks = v;
    }
    if let Some(v) = a.modality {
        g.demand_modality = v;
    }
    if let Some(v) = a.noise {
        g.noise_scale = v;
    }
    g.validate()?;
    let ds = generate_synthetic(g)?;
    let out = ctx.path(&a.output);
    save_csv(&ds, &out)?;
    let mut artifacts = ArtifactSet::new(&ctx.out_dir);
    artifacts.add(out);
    let snapshot = json!({ "generate": ctx.config.generate });
    ctx.finish(artifacts, &manifest_for(&a.output), "generate", snapshot)?;
    println!("wrote {} series to {}", ds.len(), a.output.display());
    Ok(())
}

fn apply_flags(config: &mut FileConfig, f: &ModelFlags) -> anyhow::Result<()> {
    let t = &mut config.train;
    if let Some(v) = f.epochs {
        t.epochs = v;
    }
    if let Some(v) = f.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = f.lr {
        t.lr0 = v;
    }
    if let Some(v) = &f.variant {
        t.variant = NetworkVariant::from_str(v)?;
    }
    if let Some(v) = f.mixtures {
        t.mixtures = v;
    }
    if let Some(v) = f.hidden {
        t.hidden = v;
    }
    if let Some(v) = f.validation_weeks {
        t.validation_weeks = v;
    }
    if let Some(v) = f.committees {
        config.cubist.committees = v;
    }
    if let Some(v) = f.neighbors {
        config.cubist.neighbors = v;
    }
    config.train.validate()?;
    config.cubist.validate()?;
    Ok(())
}

fn load_data(ctx: &Ctx, path: &Path, national: bool) -> anyhow::Result<Dataset> {
    let ds = load_csv(ctx.path(path))?;
    Ok(if national { ds.national()? } else { ds })
}

fn truncate(ds: &Dataset, end: Option<Week>) -> anyhow::Result<Dataset> {
    match end {
        None => Ok(ds.clone()),
        Some(end) => Ok(Dataset::new(ds.series().iter().filter_map(|s| s.truncated(end)).collect())?),
    }
}

fn train(ctx: &mut Ctx, a: TrainArgs) -> anyhow::Result<()> {
    apply_flags(&mut ctx.config, &a.flags)?;
    let data = truncate(&load_data(ctx, &a.data, a.national)?, a.train_end)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    let default_checkpoint = match (a.model, a.stage, &a.vertical) {
        (ModelKind::Cubist, _, _) => PathBuf::from("cubist.json"),
        (ModelKind::Armdn, Stage::Finetune, Some(v)) => PathBuf::from(format!("model-{v}.json")),
        _ => PathBuf::from("model.json"),
    };
    let checkpoint = a.checkpoint.clone().unwrap_or(default_checkpoint);
    let checkpoint_path = ctx.path(&checkpoint);
    let schema_path = ctx.path(&a.schema);
    let mut artifacts = ArtifactSet::new(&ctx.out_dir);

    let schema = if a.stage == Stage::Finetune {
        FeatureSchema::load(&schema_path).with_context(|| format!("loading schema {}", a.schema.display()))?
    } else {
        let schema = fit_schema(&data)?;
        schema.save(&schema_path)?;
        artifacts.add(schema_path.clone());
        schema
    };

    match (a.model, a.stage) {
        (ModelKind::Cubist, Stage::Finetune) => bail!(Error::Config("Cubist has no fine-tuning stage".into())),
        (ModelKind::Cubist, Stage::Global) => {
            let model = CubistModel::fit(&data, &schema, &ctx.config.cubist)?;
            model.save(&checkpoint_path)?;
            println!(
                "Cubist: {} trees, {} neighbors, {} training rows",
                model.committee.trees.len(),
                model.config.neighbors,
                model.index.rows.len()
            );
        }
        (ModelKind::Armdn, stage) => {
            let outcome = match stage {
                Stage::Global => train_global(&data, &schema, &ctx.config.train)?,
                Stage::Finetune => {
                    let vertical = a.vertical.as_deref().expect("clap requires --vertical");
                    let init = ArmdnModel::load(ctx.path(&a.init), &schema)?;
                    finetune_vertical(&init, &data, &schema, vertical, &ctx.config.train)?
                }
            };
            outcome.model.save(&checkpoint_path)?;
            let log_path = checkpoint_path.with_extension("log.jsonl");
            std::fs::write(&log_path, outcome.log_jsonl())?;
            artifacts.add(log_path);
            for e in &outcome.log {
                println!(
                    "epoch {:>3}  lr {:.2e}  train_nll {:.5}  val_nll {}",
                    e.epoch,
                    e.lr,
                    e.train_nll,
                    e.val_nll.map_or("-".into(), |v| format!("{v:.5}"))
                );
            }
        }
    }
    artifacts.add(checkpoint_path);
    let snapshot = json!({
        "data": a.data,
        "train_end": a.train_end,
        "model": format!("{:?}", a.model).to_lowercase(),
        "stage": format!("{:?}", a.stage).to_lowercase(),
        "vertical": a.vertical,
        "national": a.national,
        "train": ctx.config.train,
        "cubist": ctx.config.cubist,
    });
    ctx.finish(artifacts, &manifest_for(&checkpoint), "train", snapshot)
}

fn statistic(s: Statistic) -> PointStatistic {
    match s {
        Statistic::Mean => PointStatistic::Mean,
        Statistic::Median => PointStatistic::Median,
    }
}

/// Loads a network or Cubist checkpoint, telling them apart by their format tag.
fn load_forecaster(ctx: &Ctx, inputs: &ModelInputs, schema: &FeatureSchema) -> anyhow::Result<(Forecaster, Variant)> {
    let path = ctx.path(&inputs.checkpoint);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let doc: serde_json::Value = serde_json::from_str(&text).map_err(Error::from)?;
    match doc.get("format").and_then(|f| f.as_str()) {
        Some("demandcast-cubist") => {
            let model = CubistModel::from_json(&text, schema)?;
            verify_dataset(ctx, inputs, schema)?;
            Ok((Forecaster::Cubist(model), Variant::Cubist))
        }
        Some("demandcast-armdn") => {
            verify_dataset(ctx, inputs, schema)?;
            let global = ArmdnModel::from_json(&text, schema)?;
            let variant = Variant::from_str(global.config.variant.name())?;
            let mut verticals = BTreeMap::new();
            for spec in &inputs.vertical_models {
                let Some((v, p)) = spec.split_once('=') else {
                    bail!(Error::Config(format!("--vertical-model expects VERTICAL=PATH, got {spec:?}")));
                };
                verticals.insert(v.to_string(), ArmdnModel::load(ctx.path(Path::new(p)), schema)?);
            }
            let forecaster = Forecaster::Network {
                global,
                verticals,
                statistic: statistic(inputs.statistic),
            };
            Ok((forecaster, variant))
        }
        _ => bail!(Error::Config(format!("{} is not a demandcast checkpoint", path.display()))),
    }
}

/// Re-derives the schema from `data` with the settings recorded in the
/// checkpoint's training manifest, so a checkpoint is never scored against a
/// dataset it was not fitted to. Checkpoints without a manifest are trusted.
fn verify_dataset(ctx: &Ctx, inputs: &ModelInputs, schema: &FeatureSchema) -> anyhow::Result<()> {
    let path = manifest_for(&ctx.path(&inputs.checkpoint));
    if !path.exists() {
        return Ok(());
    }
    let manifest: RunManifest = serde_json::from_str(&std::fs::read_to_string(&path)?).map_err(Error::from)?;
    let national = manifest.config.get("national").and_then(|v| v.as_bool()).unwrap_or(false);
    if national != inputs.fc_split {
        bail!(Error::Config(format!(
            "{} was trained on {} series; {} --fc-split",
            inputs.checkpoint.display(),
            if national { "national" } else { "regional" },
            if national { "pass" } else { "drop" }
        )));
    }
    let train_end = manifest.config.get("train_end").and_then(|v| v.as_i64());
    let train = truncate(&load_data(ctx, &inputs.data, national)?, train_end)?;
    let found = fit_schema(&train)?.hash();
    if found != schema.hash() {
        bail!(Error::SchemaMismatch {
            expected: schema.hash(),
            found,
        });
    }
    Ok(())
}

/// Forecasts the window after `end`. With `fc_split` the model runs on
/// national series and each forecast is divided across regions by the
/// SKU's sales ratios as of `end`.
fn window_report(
    meta: &ReportMeta,
    data: &Dataset,
    forecaster: &Forecaster,
    schema: Option<&FeatureSchema>,
    end: Week,
    horizon: usize,
    fc_split: bool,
) -> anyhow::Result<ForecastReport> {
    let regional = split_windows(data, end, horizon)?;
    if !fc_split {
        let fitted;
        let schema = match schema {
            Some(s) => s,
            None => {
                fitted = fit_schema(&regional.train)?;
                &fitted
            }
        };
        let f = forecaster.forecast_split(&regional, schema)?;
        return Ok(ForecastReport::build(meta, &regional, &f)?);
    }
    let national = split_windows(&data.national()?, end, horizon)?;
    let fitted;
    let schema = match schema {
        Some(s) => s,
        None => {
            fitted = fit_schema(&national.train)?;
            &fitted
        }
    };
    let f = forecaster.forecast_split(&national, schema)?;
    let by_sku: BTreeMap<&str, &Vec<f64>> = national.test.iter().map(|w| w.key.sku_id.as_str()).zip(&f).collect();
    let ratios = compute_ratios(&split_windows(data, end, horizon)?.train, end)?;
    let mut rows = Vec::new();
    for w in &regional.test {
        let sku = w.key.sku_id.as_str();
        let Some(nat) = by_sku.get(sku) else {
            continue;
        };
        for (h, &actual) in w.actuals.iter().enumerate() {
            let parts = disaggregate(nat[h], sku, &ratios, SplitMode::Real)?;
            let forecast = parts
                .iter()
                .find(|p| p.0 == w.key.region_id)
                .map(|p| p.1)
                .ok_or_else(|| Error::MissingRatios(format!("{sku}/{}", w.key.region_id)))?;
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
    Ok(ForecastReport::from_rows(meta, end, horizon, rows))
}

fn forecast(ctx: &mut Ctx, a: ForecastArgs) -> anyhow::Result<()> {
    let horizon = a.horizon.unwrap_or(ctx.config.evaluate.horizon);
    let data = load_data(ctx, &a.inputs.data, false)?;
    let schema = FeatureSchema::load(ctx.path(&a.inputs.schema))?;
    let (forecaster, variant) = load_forecaster(ctx, &a.inputs, &schema)?;
    let snapshot = json!({
        "data": a.inputs.data,
        "checkpoint": a.inputs.checkpoint,
        "vertical_models": a.inputs.vertical_models,
        "train_end": a.train_end,
        "horizon": horizon,
        "fc_split": a.inputs.fc_split,
    });
    let meta = ReportMeta {
        variant: variant.name().into(),
        config_hash: snapshot_hash(&snapshot),
        seed: ctx.config.seed(),
    };
    let report = window_report(&meta, &data, &forecaster, Some(&schema), a.train_end, horizon, a.inputs.fc_split)?;
    let mut csv = String::from("sku_id,region_id,vertical_id,week,horizon_week,forecast\n");
    for r in &report.rows {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.sku_id, r.region_id, r.vertical_id, r.week, r.horizon_week, r.forecast
        )?;
    }
    let out = ctx.path(&a.output);
    std::fs::write(&out, csv)?;
    let mut artifacts = ArtifactSet::new(&ctx.out_dir);
    artifacts.add(out);
    ctx.finish(artifacts, &manifest_for(&a.output), "forecast", snapshot)?;
    println!("wrote {} forecasts to {}", report.rows.len(), a.output.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.2}"))
}

fn evaluate(ctx: &mut Ctx, a: EvaluateArgs) -> anyhow::Result<()> {
    if let Some(v) = a.validation_weeks {
        ctx.config.train.validation_weeks = v;
    }
    let data = load_data(ctx, &a.inputs.data, false)?;
    let mut artifacts = ArtifactSet::new(&ctx.out_dir);
    let summary_name = PathBuf::from(format!("{}-summary.json", a.prefix));

    if a.teacher_forced {
        let schema = FeatureSchema::load(ctx.path(&a.inputs.schema))?;
        let model = ArmdnModel::load(ctx.path(&a.inputs.checkpoint), &schema)?;
        let train = truncate(&data, a.train_end)?;
        let fit = TrainingData::new(&train, &schema, ctx.config.train.validation_weeks)?.fit;
        let (mut total, mut cells) = (0.0, 0usize);
        for s in &fit {
            total += model.loss(std::slice::from_ref(s))? * s.unmasked() as f64;
            cells += s.unmasked();
        }
        let nll = total / cells as f64;
        let out_name = PathBuf::from(format!("{}-teacher-forced.json", a.prefix));
        let out = ctx.path(&out_name);
        let doc = json!({
            "train_end": a.train_end,
            "validation_weeks": ctx.config.train.validation_weeks,
            "cells": cells,
            "nll": nll,
        });
        std::fs::write(&out, serde_json::to_string_pretty(&doc)? + "\n")?;
        artifacts.add(out);
        println!("teacher-forced NLL {nll:.6} over {cells} training cells");
        return ctx.finish(artifacts, &manifest_for(&out_name), "evaluate", doc);
    }

    let horizon = a.horizon.unwrap_or(ctx.config.evaluate.horizon);
    let train_ends = match &a.train_ends {
        Some(t) => parse_weeks(t)?,
        None => ctx.config.evaluate.train_ends.clone(),
    };
    let persistence = match &a.variant {
        Some(v) => match Variant::from_str(v)? {
            Variant::Persistence => true,
            other => bail!(Error::Config(format!(
                "--variant only selects the persistence baseline; {other} is read from the checkpoint"
            ))),
        },
        None => false,
    };
    let (forecaster, variant, schema) = if persistence {
        (Forecaster::Persistence, Variant::Persistence, None)
    } else {
        let schema = FeatureSchema::load(ctx.path(&a.inputs.schema))?;
        let (f, v) = load_forecaster(ctx, &a.inputs, &schema)?;
        (f, v, Some(schema))
    };
    let snapshot = json!({
        "data": a.inputs.data,
        "checkpoint": if persistence { None } else { Some(&a.inputs.checkpoint) },
        "vertical_models": a.inputs.vertical_models,
        "variant": variant.name(),
        "train_ends": train_ends,
        "horizon": horizon,
        "fc_split": a.inputs.fc_split,
    });
    let meta = ReportMeta {
        variant: variant.name().into(),
        config_hash: snapshot_hash(&snapshot),
        seed: ctx.config.seed(),
    };

    let mut reports = Vec::new();
    let mut summary_csv = String::from("train_end,week,wmape\n");
    println!("{variant}  (wMAPE by horizon week)");
    for &end in &train_ends {
        let report = window_report(&meta, &data, &forecaster, schema.as_ref(), end, horizon, a.inputs.fc_split)?;
        for ext in ["json", "csv"] {
            let name = PathBuf::from(format!("{}-{end}.{ext}", a.prefix));
            let format = if ext == "json" { ReportFormat::Json } else { ReportFormat::Csv };
            let path = ctx.path(&name);
            emit_report(&report, &path, format)?;
            artifacts.add(path);
        }
        for (h, w) in report.horizon_wmape.iter().enumerate() {
            writeln!(summary_csv, "{end},{},{}", h + 1, w.map_or(String::new(), |v| v.to_string()))?;
        }
        writeln!(
            summary_csv,
            "{end},overall,{}",
            report.overall_wmape.map_or(String::new(), |v| v.to_string())
        )?;
        let weeks: Vec<String> = report.horizon_wmape.iter().map(|w| fmt_opt(*w)).collect();
        println!(
            "  window {end}: {}  overall {}  hit-rate {}",
            weeks.join(" "),
            fmt_opt(report.overall_wmape),
            fmt_opt(report.hit_rate)
        );
        reports.push(report);
    }
    let hit_rate = hit_rate_across(&reports, DEFAULT_HIT_CUTOFF).ok();
    println!("  hit-rate across windows: {}", fmt_opt(hit_rate));
    let windows: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| {
            json!({
                "train_end": r.train_end,
                "horizon_wmape": r.horizon_wmape,
                "overall_wmape": r.overall_wmape,
                "hit_rate": r.hit_rate,
            })
        })
        .collect();
    let summary = json!({
        "variant": variant.name(),
        "config_hash": meta.config_hash,
        "windows": windows,
        "hit_rate": hit_rate,
    });
    let summary_path = ctx.path(&summary_name);
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")?;
    artifacts.add(summary_path);
    let csv_path = ctx.path(Path::new(&format!("{}-summary.csv", a.prefix)));
    std::fs::write(&csv_path, summary_csv)?;
    artifacts.add(csv_path);
    ctx.finish(artifacts, &manifest_for(Path::new(&a.prefix)), "evaluate", snapshot)
}

fn ablate(ctx: &mut Ctx, a: AblateArgs) -> anyhow::Result<()> {
    apply_flags(&mut ctx.config, &a.flags)?;
    let data = load_data(ctx, &a.data, false)?;
    let variants = match &a.variants {
        Some(list) => list.split(',').map(|v| Variant::from_str(v.trim())).collect::<Result<Vec<_>, _>>()?,
        None => Variant::ALL.to_vec(),
    };
    let config = AblationConfig {
        train: ctx.config.train.clone(),
        cubist: ctx.config.cubist.clone(),
        train_ends: match &a.train_ends {
            Some(t) => parse_weeks(t)?,
            None => ctx.config.evaluate.train_ends.clone(),
        },
        horizon: a.horizon.unwrap_or(ctx.config.evaluate.horizon),
    };
    let table = run_ablation(&data, &variants, &config)?;
    let out = ctx.path(&a.output);
    std::fs::write(&out, serde_json::to_string_pretty(&table)? + "\n")?;
    let mut csv = String::from("variant,train_end");
    for h in 1..=config.horizon {
        write!(csv, ",week{h}")?;
    }
    csv.push_str(",overall,hit_rate,heldout_nll\n");
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in &table.rows {
        write!(csv, "{},{}", r.variant, r.train_end)?;
        for w in &r.horizon_wmape {
            write!(csv, ",{}", cell(*w))?;
        }
        writeln!(csv, ",{},{},{}", cell(r.overall_wmape), cell(r.hit_rate), cell(r.heldout_nll))?;
        println!(
            "{:<12} window {}  overall {}  nll {}",
            r.variant.name(),
            r.train_end,
            fmt_opt(r.overall_wmape),
            r.heldout_nll.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    let csv_path = out.with_extension("csv");
    std::fs::write(&csv_path, csv)?;
    let mut artifacts = ArtifactSet::new(&ctx.out_dir);
    artifacts.add(out);
    artifacts.add(csv_path);
    let snapshot = serde_json::to_value(&config)?;
    ctx.finish(artifacts, &manifest_for(&a.output), "ablate", snapshot)
}
