#[path = "support/oracles.rs"]
mod oracles;

use std::collections::BTreeMap;

use lungfp::candidates::FoldAssignment;
use lungfp::patch::Patch;
use lungfp::tensornet::{ModelId, ModelSpec};
use lungfp::train::{balanced_batches, predict, train_model, BalancedSchedule, PatchStore, TrainConfig};
use oracles::check_schedule;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(stop: f64, batch: usize, seed: u64) -> TrainConfig {
    TrainConfig { batch_size: batch, stop_fraction: stop, seed, ..TrainConfig::default() }
}

#[test]
fn small_example_stream() {
    let pos = [100, 101, 102];
    let neg: Vec<usize> = (0..7).collect();
    assert_eq!(check_schedule(&pos, &neg, &cfg(1.0, 4, 5)), Ok(3));
    let chunks = balanced_batches(&pos, &neg, &cfg(1.0, 4, 5)).unwrap();
    let sizes: Vec<usize> = chunks.iter().map(|c| c.negatives.len()).collect();
    assert_eq!(sizes, vec![3, 3, 1]);
    assert_eq!(chunks, balanced_batches(&pos, &neg, &cfg(1.0, 4, 5)).unwrap());
    assert!(balanced_batches(&[], &neg, &cfg(1.0, 4, 5)).is_err());
    assert!(balanced_batches(&pos, &[], &cfg(1.0, 4, 5)).is_err());
}

#[test]
fn full_scale_stop_arithmetic() {
    let pos: Vec<usize> = (0..1557).collect();
    let neg: Vec<usize> = (1557..1557 + 753_418).collect();
    let s = BalancedSchedule::new(&pos, &neg, &cfg(0.40, 32, 3)).unwrap();
    assert_eq!(s.chunks_to_run, 194);
    assert_eq!((0.40f64 * 753_418.0 / 1557.0).ceil() as usize, 194);
    assert_eq!(check_schedule(&pos, &neg, &cfg(0.40, 32, 3)), Ok(194));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn scheduler_properties(n_pos in 1usize..40, n_neg in 1usize..400, stop in 0.01f64..=1.0, batch in 1usize..40, seed in any::<u64>()) {
        let pos: Vec<usize> = (0..n_pos).map(|i| 10_000 + i).collect();
        let neg: Vec<usize> = (0..n_neg).map(|i| 3 * i + 1).collect();
        let r = check_schedule(&pos, &neg, &cfg(stop, batch, seed));
        prop_assert!(r.is_ok(), "{:?}", r);
    }
}

/// Bright sphere on dark noise versus noise alone.
fn toy_patch(id: usize, label: u8, spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Patch {
    let s = spec.input;
    let c = [(s.d / 2) as f64, (s.h / 2) as f64, (s.w / 2) as f64];
    let jitter: [f64; 3] = [rng.gen_range(-1.5..1.5), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
    let r = rng.gen_range(3.0..5.0);
    let mut values = Vec::with_capacity(s.len());
    for z in 0..s.d {
        for y in 0..s.h {
            for x in 0..s.w {
                let d2 = (z as f64 - c[0] - jitter[0]).powi(2) + (y as f64 - c[1] - jitter[1]).powi(2) + (x as f64 - c[2] - jitter[2]).powi(2);
                let base = if label == 1 && d2 <= r * r { 0.7 } else { 0.05 };
                values.push((base + rng.gen_range(-0.05f64..0.05)).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Patch { candidate_id: id, label, size: s, values }
}

fn toy_store(spec: &ModelSpec) -> (PatchStore, FoldAssignment, Vec<Patch>) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut store = PatchStore::default();
    let mut folds = BTreeMap::new();
    let mut held = Vec::new();
    for id in 0..240 {
        let label = u8::from(id % 8 == 0);
        let scan = format!("toy{}", id % 5);
        let fold = usize::from(id % 5 == 4);
        folds.insert(scan.clone(), fold);
        let p = toy_patch(id, label, spec, &mut rng);
        if fold == 1 {
            held.push(p.clone());
        }
        store.insert(&scan, p);
    }
    (store, FoldAssignment { k: 2, folds }, held)
}

#[test]
fn model1_learns_separable_toys_within_five_chunks() {
    let (spec, init) = ModelSpec::build::<f32>(ModelId::M1, 8, 11).unwrap();
    let (store, folds, held) = toy_store(&spec);
    let train_pos = store.patches.values().filter(|p| p.label == 1 && p.candidate_id % 5 != 4).count();
    let train_neg = store.patches.len() - held.len() - train_pos;
    let config = cfg((5 * train_pos) as f64 / train_neg as f64, 8, 3);
    let out = train_model(&spec, init.clone(), &store, &folds, 1, &config).unwrap();
    assert_eq!(out.log.chunks.len(), 5);
    assert!(held.iter().all(|p| !out.log.trained_ids.contains(&p.candidate_id)));

    let preds = predict(&spec, &out.params, &held).unwrap();
    let (mut tp, mut np, mut tn, mut nn) = (0, 0, 0, 0);
    for (p, (_, prob)) in held.iter().zip(&preds) {
        if p.label == 1 {
            np += 1;
            tp += usize::from(*prob > 0.5);
        } else {
            nn += 1;
            tn += usize::from(*prob <= 0.5);
        }
    }
    let bacc = 0.5 * (tp as f64 / np as f64 + tn as f64 / nn as f64);
    assert!(bacc >= 0.95, "balanced accuracy {bacc}");

    let again = train_model(&spec, init, &store, &folds, 1, &config).unwrap();
    assert!(again.params.bitwise_eq(&out.params));
    assert_eq!(again.log.to_csv(), out.log.to_csv());
}

#[test]
fn training_errors() {
    let (spec, init) = ModelSpec::build::<f32>(ModelId::M1, 2, 1).unwrap();
    let (store, folds, _) = toy_store(&spec);
    assert!(train_model(&spec, init.clone(), &store, &folds, 2, &cfg(1.0, 4, 0)).is_err());
    let (other, _) = ModelSpec::build::<f32>(ModelId::M2, 2, 1).unwrap();
    assert!(train_model(&other, init.clone(), &store, &folds, 0, &cfg(1.0, 4, 0)).is_err());
    assert!(train_model(&spec, init, &store, &folds, 0, &cfg(0.0, 4, 0)).is_err());
}

#[test]
fn prediction_properties() {
    let (spec, params) = ModelSpec::build::<f32>(ModelId::M1, 4, 2).unwrap();
    let s = spec.input;
    let zero = Patch { candidate_id: 1, label: 0, size: s, values: vec![0.0; s.len()] };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = toy_patch(2, 1, &spec, &mut rng);
    let mut dup = a.clone();
    dup.candidate_id = 3;
    let preds = predict(&spec, &params, &[zero, a, dup]).unwrap();
    assert_eq!(preds.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!(preds[0].1 > 0.0 && preds[0].1 < 1.0);
    assert_eq!(preds[1].1.to_bits(), preds[2].1.to_bits());

    let net = lungfp::Network32::new(spec.clone(), params.clone()).unwrap();
    let t = lungfp::Tensor32::new(vec![1, s.d, s.h, s.w], vec![0.3; s.len()]).unwrap();
    let p = net.predict(&t).unwrap();
    assert!((p[0] + p[1] - 1.0).abs() <= 1e-6);

    let wrong = Patch { candidate_id: 9, label: 0, size: lungfp::patch::STOCK_SIZES[1], values: vec![0.0; lungfp::patch::STOCK_SIZES[1].len()] };
    assert!(predict(&spec, &params, &[wrong]).is_err());
}
