mod common;

use common::*;
use demandcast::armdn::{ArmdnModel, NetworkVariant, PointStatistic, Sequence};
use demandcast::dataset::{generate_synthetic, split_windows, GeneratorConfig, SeriesInstance};
use demandcast::features::fit_schema;
use demandcast::train::*;
use demandcast::Error;
use proptest::prelude::*;
use rand::Rng;

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        lr0: 5e-3,
        epochs: 3,
        mixtures: 3,
        hidden: 8,
        assoc_width: 6,
        embed_width: 4,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn adam_matches_textbook_loop() {
    let mut r = rng(11);
    let n = 5;
    let mut params: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut reference = params.clone();
    let mut state = AdamState::new(n);
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    for t in 1..=100 {
        let grads: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let lr = r.random_range(1e-4..1e-2);
        adam_step(&mut params, &grads, &mut state, lr).unwrap();
        for i in 0..n {
            m[i] = b1 * m[i] + (1.0 - b1) * grads[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grads[i] * grads[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            reference[i] -= lr * mh / (vh.sqrt() + eps);
        }
        for i in 0..n {
            assert!((params[i] - reference[i]).abs() < 1e-12);
        }
    }
    assert_eq!(state.step, 100);
}

proptest! {
    #[test]
    fn staircase_is_exact(step in 0u64..10_000_000, every in 1usize..5000) {
        let c = TrainConfig { lr0: 0.02, decay_every: every, ..TrainConfig::default() };
        let k = (step / every as u64) as i32;
        prop_assert_eq!(lr_schedule(step, &c), 0.02 * 0.96f64.powi(k));
    }
}

#[test]
fn minibatch_padding_and_masks() {
    let mut r = rng(1);
    let equal: Vec<Sequence> = (0..3).map(|_| random_sequence(&dims(), 4, &mut r)).collect();
    let b = make_minibatch(&equal, 8, &mut r).unwrap();
    assert_eq!(b.len(), 3);
    assert!(b.iter().all(|s| s.mask.iter().all(|&m| m)));

    let pool = vec![random_sequence(&dims(), 3, &mut r), random_sequence(&dims(), 5, &mut r)];
    let b = make_minibatch(&pool, 2, &mut r).unwrap();
    assert!(b.iter().all(|s| s.len() == 5));
    let mut sums: Vec<usize> = b.iter().map(Sequence::unmasked).collect();
    sums.sort();
    assert_eq!(sums, vec![3, 5]);
    assert!(make_minibatch(&[], 2, &mut r).is_err());
}

#[test]
fn minibatches_sample_without_replacement() {
    let mut r = rng(2);
    let pool: Vec<Sequence> = (0..10)
        .map(|i| {
            let mut s = random_sequence(&dims(), 2, &mut r);
            s.targets[0] = i as f64;
            s
        })
        .collect();
    for _ in 0..20 {
        let b = make_minibatch(&pool, 6, &mut r).unwrap();
        let mut ids: Vec<i64> = b.iter().map(|s| s.targets[0] as i64).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 6);
    }
}

#[test]
fn padded_batch_loss_equals_per_series_average() {
    let m = random_model(small_config(NetworkVariant::Armdn, 3), dims(), 0.5, 3);
    let mut r = rng(4);
    let seqs: Vec<Sequence> = [2, 5, 3].iter().map(|&n| random_sequence(&dims(), n, &mut r)).collect();
    let padded = pad_batch(seqs.clone());
    let (batch_loss, _) = m.loss_and_gradient(&padded, None).unwrap();
    let mut total = 0.0;
    for s in &seqs {
        total += m.loss(std::slice::from_ref(s)).unwrap() * s.len() as f64;
    }
    assert!((batch_loss - total / 10.0).abs() < 1e-12);
}

#[test]
fn zero_epochs_return_the_initialization() {
    let (ds, schema) = small_schema();
    let config = TrainConfig {
        epochs: 0,
        ..quick_config(5)
    };
    let out = train_global(&ds, &schema, &config).unwrap();
    let init = ArmdnModel::init(config.model_config(), &schema, 5).unwrap();
    assert_eq!(out.model, init);
    assert!(out.log.is_empty());
}

#[test]
fn fixed_seed_training_is_reproducible() {
    let (ds, schema) = small_schema();
    let a = train_global(&ds, &schema, &quick_config(6)).unwrap();
    let b = train_global(&ds, &schema, &quick_config(6)).unwrap();
    assert_eq!(a.model.to_json(), b.model.to_json());
    assert_eq!(a.iteration_losses, b.iteration_losses);
    let strip = |o: &TrainOutcome| o.log.iter().map(|e| (e.train_nll, e.val_nll)).collect::<Vec<_>>();
    assert_eq!(strip(&a), strip(&b));
    let c = train_global(&ds, &schema, &quick_config(7)).unwrap();
    assert_ne!(a.model.params, c.model.params);
}

#[test]
fn epoch_log_has_one_line_per_epoch() {
    let (ds, schema) = small_schema();
    let out = train_global(&ds, &schema, &quick_config(8)).unwrap();
    let text = out.log_jsonl();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    for (i, line) in lines.iter().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["epoch"], i + 1);
        for key in ["lr", "train_nll", "val_nll", "wall_ms"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
    let best = out.best_epoch.unwrap();
    let best_val = out.log[best - 1].val_nll.unwrap();
    assert!(out.log.iter().all(|e| e.val_nll.unwrap() >= best_val));
}

#[test]
fn logged_train_nll_matches_teacher_forced_evaluation() {
    let (ds, schema) = small_schema();
    let config = TrainConfig {
        epochs: 1,
        ..quick_config(9)
    };
    let out = train_global(&ds, &schema, &config).unwrap();
    let data = TrainingData::new(&ds, &schema, config.validation_weeks).unwrap();
    let cells: usize = data.fit.iter().map(Sequence::unmasked).sum();
    let mut total = 0.0;
    for s in &data.fit {
        total += out.model.loss(std::slice::from_ref(s)).unwrap() * s.unmasked() as f64;
    }
    assert!((total / cells as f64 - out.log[0].train_nll).abs() < 1e-9);
}

#[test]
fn non_finite_parameters_abort_training() {
    let (ds, schema) = small_schema();
    let config = quick_config(10);
    let mut model = ArmdnModel::init(config.model_config(), &schema, 10).unwrap();
    let fc = model.layout().fc_b.start;
    model.params[fc] = f64::NAN;
    let data = TrainingData::new(&ds, &schema, 4).unwrap();
    assert!(matches!(
        fit(model, &data, &config, 1),
        Err(Error::Diverged { consecutive: 3, .. })
    ));
}

#[test]
fn constant_series_drives_the_loss_down() {
    let row = small_dataset(1).series()[0].features()[0].clone();
    let s = SeriesInstance::new("S1", "R1", "V1", 1, vec![12.0; 30], vec![row; 30]).unwrap();
    let ds = demandcast::dataset::Dataset::new(vec![s]).unwrap();
    let schema = fit_schema(&ds).unwrap();
    let config = TrainConfig {
        epochs: 50,
        batch_size: 1,
        lr0: 1e-2,
        validation_weeks: 0,
        ..quick_config(12)
    };
    let out = train_global(&ds, &schema, &config).unwrap();
    assert_eq!(out.iteration_losses.len(), 50);
    let blocks: Vec<f64> = out
        .iteration_losses
        .chunks(10)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    for w in blocks.windows(2) {
        assert!(w[1] < w[0], "{blocks:?}");
    }
}

#[test]
fn finetuning_with_zero_learning_rate_changes_nothing() {
    let (ds, schema) = small_schema();
    let global = train_global(&ds, &schema, &quick_config(13)).unwrap().model;
    let config = TrainConfig {
        lr0: 0.0,
        ..quick_config(13)
    };
    let tuned = finetune_vertical(&global, &ds, &schema, "V00", &config).unwrap();
    assert_eq!(tuned.model.params, global.params);
    assert!(matches!(
        finetune_vertical(&global, &ds, &schema, "V77", &config),
        Err(Error::UnknownVertical(_))
    ));
}

#[test]
fn finetuned_checkpoint_reloads_and_forecasts_identically() {
    let (ds, _) = small_schema();
    let split = split_windows(&ds, 20, 4).unwrap();
    let schema = fit_schema(&split.train).unwrap();
    let global = train_global(&split.train, &schema, &quick_config(14)).unwrap().model;
    let tuned = finetune_vertical(&global, &split.train, &schema, "V01", &quick_config(14))
        .unwrap()
        .model;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v01.json");
    tuned.save(&path).unwrap();
    let back = ArmdnModel::load(&path, &schema).unwrap();
    for w in split.test.iter().filter(|w| w.vertical_id == "V01") {
        let h = split.train.get(&w.key).unwrap();
        assert_eq!(
            back.forecast(h, &w.rows, &schema, 4, PointStatistic::Mean).unwrap(),
            tuned.forecast(h, &w.rows, &schema, 4, PointStatistic::Mean).unwrap()
        );
    }
}

#[test]
fn finetuning_improves_vertical_validation_nll_in_most_seeds() {
    let mut wins = 0;
    for seed in 0..10u64 {
        let ds = generate_synthetic(&GeneratorConfig {
            n_skus: 24,
            n_verticals: 2,
            n_weeks: 40,
            event_weeks: [10, 22, 35].into_iter().collect(),
            seed,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let schema = fit_schema(&ds).unwrap();
        let config = TrainConfig {
            epochs: 6,
            batch_size: 6,
            lr0: 5e-3,
            mixtures: 3,
            hidden: 12,
            assoc_width: 12,
            embed_width: 6,
            seed,
            ..TrainConfig::default()
        };
        let global = train_global(&ds, &schema, &config).unwrap().model;
        let vertical = ds.filter_vertical("V01");
        let val = TrainingData::new(&vertical, &schema, 4).unwrap().validation;
        let before = global.loss(&val).unwrap();
        let tuned = finetune_vertical(&global, &ds, &schema, "V01", &config).unwrap().model;
        let after = tuned.loss(&val).unwrap();
        if after <= before {
            wins += 1;
        }
    }
    assert!(wins >= 6, "fine-tuning helped in {wins}/10 seeds");
}
