//! Class-balanced chunk scheduling and the training loop.
//!
//! Negatives are shuffled once and cut into chunks as large as the positive
//! set. Each chunk is mixed with every positive, shuffled, and fed to the
//! network in mini-batches. Training stops at the first chunk boundary where
//! the consumed negatives reach `stop_fraction` of all negatives; at most one
//! pass over the negatives is made.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::candidates::FoldAssignment;
use crate::error::{Error, Result};
use crate::patch::Patch;
use crate::tensornet::{
    backward_traced, forward_traced, layers, AdaDeltaConfig, AdaDeltaState, ModelSpec, Parameters,
    Tensor,
};

/// Samples whose gradients are accumulated sequentially before the
/// per-group sums are added in group order.
const GRAD_GROUP: usize = 4;

const SCHEDULE_STREAM: u64 = 0x5343_4845;
const DROPOUT_SALT: u64 = 0x4452_4f50_4f55_5421;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Fraction of the negatives to consume before stopping.
    pub stop_fraction: f64,
    pub seed: u64,
    pub optimizer: AdaDeltaConfig,
    /// Also stop once the chunk loss changes by less than 1e-4 over 5 chunks.
    pub plateau_stop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            stop_fraction: 0.40,
            seed: 0,
            optimizer: AdaDeltaConfig::default(),
            plateau_stop: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(self.stop_fraction > 0.0 && self.stop_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "stop fraction must be in (0, 1], got {}",
                self.stop_fraction
            )));
        }
        let o = self.optimizer;
        if !(o.rho > 0.0 && o.rho < 1.0 && o.eps > 0.0) {
            return Err(Error::invalid(format!("bad AdaDelta parameters rho={} eps={}", o.rho, o.eps)));
        }
        Ok(())
    }
}

/// One mini-batch: candidate ids with their labels.
pub type Batch = Vec<(usize, u8)>;

/// Negatives of one chunk and the batches built from them.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub index: usize,
    pub negatives: Vec<usize>,
    pub batches: Vec<Batch>,
}

#[derive(Debug, Clone)]
pub struct BalancedSchedule {
    pub positives: Vec<usize>,
    pub negative_chunks: Vec<Vec<usize>>,
    /// Number of chunks run before the stop fraction is reached.
    pub chunks_to_run: usize,
    batch_size: usize,
    seed: u64,
}

impl BalancedSchedule {
    pub fn new(positive_ids: &[usize], negative_ids: &[usize], config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if positive_ids.is_empty() || negative_ids.is_empty() {
            return Err(Error::invalid(format!(
                "balanced schedule needs positives and negatives, got {} and {}",
                positive_ids.len(),
                negative_ids.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SCHEDULE_STREAM);
        let mut negatives = negative_ids.to_vec();
        negatives.shuffle(&mut rng);
        let n = positive_ids.len();
        let negative_chunks: Vec<Vec<usize>> = negatives.chunks(n).map(<[usize]>::to_vec).collect();
        let target = config.stop_fraction * negatives.len() as f64;
        let mut consumed = 0usize;
        let mut chunks_to_run = 0;
        for c in &negative_chunks {
            consumed += c.len();
            chunks_to_run += 1;
            if consumed as f64 >= target {
                break;
            }
        }
        Ok(BalancedSchedule {
            positives: positive_ids.to_vec(),
            negative_chunks,
            chunks_to_run,
            batch_size: config.batch_size,
            seed: config.seed,
        })
    }

    /// Builds chunk `index`: positives plus that chunk's negatives, shuffled
    /// with an RNG stream of their own, cut into batches.
    pub fn chunk(&self, index: usize) -> Chunk {
        let negatives = self.negative_chunks[index].clone();
        let mut pool: Vec<(usize, u8)> = self
            .positives
            .iter()
            .map(|&id| (id, 1u8))
            .chain(negatives.iter().map(|&id| (id, 0u8)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(SCHEDULE_STREAM + 1 + index as u64);
        pool.shuffle(&mut rng);
        let batches = pool.chunks(self.batch_size).map(<[_]>::to_vec).collect();
        Chunk {
            index,
            negatives,
            batches,
        }
    }

    pub fn chunks(&self) -> impl Iterator<Item = Chunk> + '_ {
        (0..self.chunks_to_run).map(|i| self.chunk(i))
    }
}

/// The full ordered batch stream of a schedule.
pub fn balanced_batches(positive_ids: &[usize], negative_ids: &[usize], config: &TrainConfig) -> Result<Vec<Chunk>> {
    let schedule = BalancedSchedule::new(positive_ids, negative_ids, config)?;
    Ok(schedule.chunks().collect())
}

/// Patches by candidate id, with the scan each candidate belongs to.
#[derive(Debug, Clone, Default)]
pub struct PatchStore {
    pub patches: BTreeMap<usize, Patch>,
    pub scan_of: BTreeMap<usize, String>,
}

impl PatchStore {
    pub fn insert(&mut self, scan_id: &str, patch: Patch) {
        self.scan_of.insert(patch.candidate_id, scan_id.to_string());
        self.patches.insert(patch.candidate_id, patch);
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkLog {
    pub chunk: usize,
    pub mean_loss: f64,
    pub balanced_acc: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub chunks: Vec<ChunkLog>,
    /// Every candidate id that entered a training batch.
    pub trained_ids: BTreeSet<usize>,
    pub steps: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("chunk,mean_loss,balanced_acc\n");
        for c in &self.chunks {
            let _ = writeln!(out, "{},{:.6},{:.6}", c.chunk, c.mean_loss, c.balanced_acc);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Parameters<f32>,
    pub state: AdaDeltaState<f32>,
    pub log: TrainLog,
}

fn patch_tensor(spec: &ModelSpec, patch: &Patch) -> Result<Tensor<f32>> {
    if patch.size != spec.input {
        return Err(Error::Shape(format!(
            "candidate {} has a {} patch, {} expects {}",
            patch.candidate_id, patch.size, spec.model_id, spec.input
        )));
    }
    Tensor::new(vec![1, patch.size.d, patch.size.h, patch.size.w], patch.values.clone())
}

struct GroupResult {
    grads: Parameters<f32>,
    loss: f64,
    /// true positives, positives, true negatives, negatives
    counts: [usize; 4],
}

/// Trains `spec` from `init` on every candidate outside `held_out_fold`.
pub fn train_model(
    spec: &ModelSpec,
    init: Parameters<f32>,
    store: &PatchStore,
    folds: &FoldAssignment,
    held_out_fold: usize,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    init.check_against(spec)?;
    if held_out_fold >= folds.k {
        return Err(Error::invalid(format!(
            "held-out fold {held_out_fold} out of range for {} folds",
            folds.k
        )));
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (&id, patch) in &store.patches {
        let scan = store
            .scan_of
            .get(&id)
            .ok_or_else(|| Error::invalid(format!("candidate {id} has no scan")))?;
        let fold = folds
            .fold_of(scan)
            .ok_or_else(|| Error::invalid(format!("scan `{scan}` is missing from the fold assignment")))?;
        if fold == held_out_fold {
            continue;
        }
        if patch.size != spec.input {
            return Err(Error::Shape(format!(
                "candidate {id} has a {} patch, {} expects {}",
                patch.size, spec.model_id, spec.input
            )));
        }
        if patch.label == 1 {
            positives.push(id);
        } else {
            negatives.push(id);
        }
    }

    let schedule = BalancedSchedule::new(&positives, &negatives, config)?;
    let mut params = init;
    let mut state = AdaDeltaState::new(&params, config.optimizer);
    let mut log = TrainLog::default();
    let mut sample_index: u64 = 0;

    for chunk in schedule.chunks() {
        let mut loss_sum = 0.0;
        let mut counts = [0usize; 4];
        let mut seen = 0usize;
        for batch in &chunk.batches {
            let base = sample_index;
            sample_index += batch.len() as u64;
            let groups: Vec<GroupResult> = batch
                .par_chunks(GRAD_GROUP)
                .enumerate()
                .map(|(gi, items)| -> Result<GroupResult> {
                    let mut grads = params.zeros_like();
                    let mut loss = 0.0;
                    let mut counts = [0usize; 4];
                    for (j, &(id, label)) in items.iter().enumerate() {
                        let input = patch_tensor(spec, &store.patches[&id])?;
                        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ DROPOUT_SALT);
                        rng.set_stream(base + (gi * GRAD_GROUP + j) as u64);
                        let trace = forward_traced(spec, &params, &input, Some(&mut rng))?;
                        let target = layers::one_hot::<f32>(label as usize, 2);
                        let (p, l) = layers::softmax_xent(trace.logits(), &target)?;
                        loss += l as f64;
                        let predicted_pos = p[1] > p[0];
                        if label == 1 {
                            counts[1] += 1;
                            counts[0] += predicted_pos as usize;
                        } else {
                            counts[3] += 1;
                            counts[2] += !predicted_pos as usize;
                        }
                        let upstream: Vec<f32> = p.iter().zip(&target).map(|(a, b)| a - b).collect();
                        backward_traced(spec, &params, &trace, &upstream, &mut grads, false)?;
                    }
                    Ok(GroupResult { grads, loss, counts })
                })
                .collect::<Result<_>>()?;

            let mut total = params.zeros_like();
            for g in &groups {
                total.add_assign(&g.grads);
                loss_sum += g.loss;
                for (c, v) in counts.iter_mut().zip(g.counts) {
                    *c += v;
                }
            }
            total.scale(1.0 / batch.len() as f32);
            state.update(&mut params, &total)?;
            seen += batch.len();
            log.steps += 1;
            log.trained_ids.extend(batch.iter().map(|&(id, _)| id));
        }
        let rate = |hit: usize, n: usize| if n == 0 { 0.0 } else { hit as f64 / n as f64 };
        log.chunks.push(ChunkLog {
            chunk: chunk.index,
            mean_loss: loss_sum / seen as f64,
            balanced_acc: 0.5 * (rate(counts[0], counts[1]) + rate(counts[2], counts[3])),
        });
        if config.plateau_stop && plateaued(&log.chunks) {
            break;
        }
    }
    Ok(TrainOutcome { params, state, log })
}

fn plateaued(chunks: &[ChunkLog]) -> bool {
    const WINDOW: usize = 5;
    chunks.len() > WINDOW
        && (chunks[chunks.len() - 1].mean_loss - chunks[chunks.len() - 1 - WINDOW].mean_loss).abs() < 1e-4
}

/// Inference-mode probability of the nodule class for each patch, in input order.
pub fn predict(spec: &ModelSpec, params: &Parameters<f32>, patches: &[Patch]) -> Result<Vec<(usize, f64)>> {
    params.check_against(spec)?;
    patches
        .par_iter()
        .map(|p| {
            let input = patch_tensor(spec, p)?;
            let trace = forward_traced(spec, params, &input, None)?;
            Ok((p.candidate_id, trace.probabilities()[1] as f64))
        })
        .collect()
}
