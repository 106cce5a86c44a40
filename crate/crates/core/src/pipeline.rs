//! Configuration and the end-to-end cross-validation driver.
//!
//! Stages exchange data only through files under the work directory.
//! Resampled volumes, patch files, weights and per-fold predictions are
//! cached under `cache/`, named by a SHA-256 digest of everything that
//! determines their content, so an interrupted or repeated run reuses them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::candidates::{associate, merge_candidates, split_folds, FoldAssignment, MergedCandidate};
use crate::error::{Error, Result};
use crate::evalfroc::{
    curve_to_csv, fuse, predictions_to_csv, score_with_ci, FrocData, FrocScore, ScoredCandidate,
    FP_TARGETS,
};
use crate::patch::{extract_patches, read_patch_file, write_patch_file, Patch};
use crate::resample::resample_trilinear;
use crate::tensornet::{load_weights_for, save_weights, AdaDeltaConfig, ModelId, ModelSpec};
use crate::train::{predict, train_model, PatchStore, TrainConfig};
use crate::volio::{
    read_annotations_csv, read_candidates_csv, read_metaimage, read_metaimage_header, read_scan_list,
    write_candidates_csv, write_metaimage, AnnotationRecord, Spacing, Volume,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory holding `<scan>.mhd` volumes.
    pub volumes: PathBuf,
    pub candidates: PathBuf,
    pub annotations: PathBuf,
    /// Optional scan list; defaults to every scan named in the candidates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scans: Option<PathBuf>,
    pub work_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_spacing: [f64; 3],
    pub merge_radius_mm: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_spacing: [0.7, 0.7, 1.0],
            merge_radius_mm: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    pub list: Vec<String>,
    /// Filters per convolution layer; the stock models use 64.
    pub channels: usize,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        ModelsConfig {
            list: ModelId::ALL.iter().map(ToString::to_string).collect(),
            channels: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossvalConfig {
    pub k: usize,
    /// Master seed; fold split, initialization, scheduling, dropout and the
    /// bootstrap all derive their seeds from it.
    pub seed: u64,
    pub bootstrap: usize,
    pub level: f64,
}

impl Default for CrossvalConfig {
    fn default() -> Self {
        CrossvalConfig {
            k: 10,
            seed: 1,
            bootstrap: 1000,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub stop_fraction: f64,
    pub rho: f64,
    pub eps: f64,
    pub plateau_stop: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            batch_size: t.batch_size,
            stop_fraction: t.stop_fraction,
            rho: t.optimizer.rho,
            eps: t.optimizer.eps,
            plateau_stop: t.plateau_stop,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            stop_fraction: self.stop_fraction,
            seed,
            optimizer: AdaDeltaConfig {
                rho: self.rho,
                eps: self.eps,
            },
            plateau_stop: self.plateau_stop,
        }
    }
}

/// Default ensembles: F1 = {M1, M3, M5}, F2 = {M1, M2, M5}, F3 = {M1, M4, M5}, F4 = all five.
pub fn default_fusions() -> BTreeMap<String, Vec<String>> {
    let m = |ids: &[&str]| ids.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    BTreeMap::from([
        ("F1".to_string(), m(&["M1", "M3", "M5"])),
        ("F2".to_string(), m(&["M1", "M2", "M5"])),
        ("F3".to_string(), m(&["M1", "M4", "M5"])),
        ("F4".to_string(), m(&["M1", "M2", "M3", "M4", "M5"])),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub models: ModelsConfig,
    #[serde(default = "default_fusions")]
    pub fusions: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub crossval: CrossvalConfig,
    #[serde(default)]
    pub train: TrainSection,
}

impl PipelineConfig {
    /// Parses a TOML config; relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::invalid(format!("config: {}", e.message())))?;
        let p = &mut cfg.paths;
        for path in [&mut p.volumes, &mut p.candidates, &mut p.annotations, &mut p.work_dir]
            .into_iter()
            .chain(p.scans.as_mut())
        {
            if path.is_relative() {
                *path = base_dir.join(&*path);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        PipelineConfig::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_ids(&self) -> Result<Vec<ModelId>> {
        let ids: Vec<ModelId> = self.models.list.iter().map(|s| s.parse()).collect::<Result<_>>()?;
        if ids.is_empty() {
            return Err(Error::invalid("config lists no models"));
        }
        if ids.iter().collect::<BTreeSet<_>>().len() != ids.len() {
            return Err(Error::invalid("config lists a model twice"));
        }
        Ok(ids)
    }

    pub fn target_spacing(&self) -> Result<Spacing> {
        let [x, y, z] = self.preprocess.target_spacing;
        Spacing::new(x, y, z)
    }

    /// Checks value ranges, fusion membership and that the inputs exist.
    pub fn validate(&self) -> Result<()> {
        let ids = self.model_ids()?;
        self.target_spacing()?;
        if self.preprocess.merge_radius_mm.is_nan() || self.preprocess.merge_radius_mm < 0.0 {
            return Err(Error::invalid("merge radius must be >= 0"));
        }
        if self.models.channels == 0 {
            return Err(Error::invalid("models.channels must be >= 1"));
        }
        for (name, members) in &self.fusions {
            if members.is_empty() {
                return Err(Error::invalid(format!("fusion {name} has no members")));
            }
            for m in members {
                let id: ModelId = m.parse()?;
                if !ids.contains(&id) {
                    return Err(Error::invalid(format!("fusion {name} uses {m}, which is not in models.list")));
                }
            }
        }
        if self.crossval.k < 2 {
            return Err(Error::invalid("crossval.k must be >= 2"));
        }
        if !(self.crossval.level > 0.0 && self.crossval.level < 1.0) {
            return Err(Error::invalid("crossval.level must be in (0, 1)"));
        }
        self.train.to_train_config(0).validate()?;
        let p = &self.paths;
        let mut required = vec![(&p.volumes, "volumes"), (&p.candidates, "candidates"), (&p.annotations, "annotations")];
        if let Some(s) = &p.scans {
            required.push((s, "scans"));
        }
        for (path, what) in required {
            if !path.exists() {
                return Err(Error::io(
                    path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} path does not exist")),
                ));
            }
        }
        Ok(())
    }
}

/// SplitMix64 finalizer over `(master, tag, a, b)`.
pub fn derive_seed(master: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut z = master;
    for v in [tag, a, b] {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(v.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const SEED_INIT: u64 = 1;
const SEED_TRAIN: u64 = 2;
const SEED_BOOT: u64 = 3;

struct Hasher(Sha256);

impl Hasher {
    fn new(stage: &str) -> Self {
        let mut h = Hasher(Sha256::new());
        h.field(stage.as_bytes());
        h
    }

    /// Length-prefixed so concatenations cannot collide.
    fn field(&mut self, bytes: &[u8]) -> &mut Self {
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(bytes);
        self
    }

    fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary sibling so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Layout of the work directory.
#[derive(Debug, Clone)]
pub struct WorkDir {
    pub root: PathBuf,
}

impl WorkDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        WorkDir { root: root.into() }
    }

    pub fn cache(&self, kind: &str) -> PathBuf {
        self.root.join("cache").join(kind)
    }

    pub fn merged(&self) -> PathBuf {
        self.root.join("merged.csv")
    }

    pub fn folds(&self) -> PathBuf {
        self.root.join("folds.csv")
    }

    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossvalReport {
    /// One `(name, score)` per model in config order.
    pub models: Vec<(String, FrocScore)>,
    /// One `(name, score)` per fusion in name order.
    pub fusions: Vec<(String, FrocScore)>,
    /// Candidates labelled positive that match no annotation; scored as false positives.
    pub unmatched_positive_labels: usize,
    pub report_dir: PathBuf,
}

impl CrossvalReport {
    pub fn score(&self, name: &str) -> Option<&FrocScore> {
        self.models
            .iter()
            .chain(&self.fusions)
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
    }

    /// Plain-text rendering of both tables.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (title, rows) in [("Single models", &self.models), ("Fusions", &self.fusions)] {
            if rows.is_empty() {
                continue;
            }
            let _ = writeln!(out, "{title}");
            let _ = write!(out, "{:>10}", "FPs/scan");
            for (name, _) in rows.iter() {
                let _ = write!(out, " {name:>20}");
            }
            out.push('\n');
            let cell = |v: f64, ci: Option<(f64, f64)>| match ci {
                Some((lo, hi)) => format!("{v:.3} [{lo:.3},{hi:.3}]"),
                None => format!("{v:.3}"),
            };
            for (i, t) in FP_TARGETS.iter().enumerate() {
                let _ = write!(out, "{t:>10}");
                for (_, s) in rows.iter() {
                    let ci = s.ci.as_ref().map(|c| (c.lo[i], c.hi[i]));
                    let _ = write!(out, " {:>20}", cell(s.sensitivities[i], ci));
                }
                out.push('\n');
            }
            let _ = write!(out, "{:>10}", "average");
            for (_, s) in rows.iter() {
                let ci = s.ci.as_ref().map(|c| (c.average_lo, c.average_hi));
                let _ = write!(out, " {:>20}", cell(s.average, ci));
            }
            out.push_str("\n\n");
        }
        out
    }
}

/// Sensitivity table: one row per FP target plus `average`, one column
/// triple (value, CI low, CI high) per entry.
pub fn score_table(entries: &[(String, FrocScore)]) -> String {
    let mut out = String::from("fp_target");
    for (name, _) in entries {
        let _ = write!(out, ",{name},{name}_ci_lo,{name}_ci_hi");
    }
    out.push('\n');
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let labels = FP_TARGETS.iter().map(ToString::to_string).chain(["average".to_string()]);
    for (i, label) in labels.enumerate() {
        out.push_str(&label);
        for (_, s) in entries {
            let (v, lo, hi) = if i < FP_TARGETS.len() {
                (s.sensitivities[i], s.ci.as_ref().map(|c| c.lo[i]), s.ci.as_ref().map(|c| c.hi[i]))
            } else {
                (s.average, s.ci.as_ref().map(|c| c.average_lo), s.ci.as_ref().map(|c| c.average_hi))
            };
            let _ = write!(out, ",{v:.6},{},{}", fmt(lo), fmt(hi));
        }
        out.push('\n');
    }
    out
}

/// Inputs restricted to the scans under study.
struct Inputs {
    scans: Vec<String>,
    merged: Vec<MergedCandidate>,
    annotations: Vec<AnnotationRecord>,
}

fn load_inputs(cfg: &PipelineConfig) -> Result<Inputs> {
    let records = read_candidates_csv(&cfg.paths.candidates)?;
    let annotations = read_annotations_csv(&cfg.paths.annotations)?;
    let scans: Vec<String> = match &cfg.paths.scans {
        Some(p) => {
            let s = read_scan_list(p)?;
            if s.iter().collect::<BTreeSet<_>>().len() != s.len() {
                return Err(Error::invalid(format!("{} lists a scan twice", p.display())));
            }
            s
        }
        None => records
            .iter()
            .map(|r| r.scan_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let keep: BTreeSet<&str> = scans.iter().map(String::as_str).collect();
    let records: Vec<_> = records
        .into_iter()
        .filter(|r| keep.contains(r.scan_id.as_str()))
        .enumerate()
        .map(|(i, mut r)| {
            r.id = i;
            r
        })
        .collect();
    let annotations: Vec<_> = annotations
        .into_iter()
        .filter(|a| keep.contains(a.scan_id.as_str()))
        .enumerate()
        .map(|(i, mut a)| {
            a.nodule_id = i;
            a
        })
        .collect();
    let merged = merge_candidates(&records, cfg.preprocess.merge_radius_mm)?;
    Ok(Inputs {
        scans,
        merged,
        annotations,
    })
}

fn volume_path(cfg: &PipelineConfig, scan: &str) -> PathBuf {
    cfg.paths.volumes.join(format!("{scan}.mhd"))
}

/// Digest of a MetaImage header and payload.
fn volume_digest(path: &Path) -> Result<String> {
    let header = read_metaimage_header(path)?;
    let raw_path = header.data_file;
    let header_bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let raw = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let mut h = Hasher::new("volume");
    h.field(&header_bytes).field(&raw);
    Ok(h.finish())
}

/// Resamples one scan into the cache, returning the cached path and its key.
fn cached_resample(cfg: &PipelineConfig, work: &WorkDir, scan: &str) -> Result<(PathBuf, String)> {
    let src = volume_path(cfg, scan);
    let target = cfg.target_spacing()?;
    let mut h = Hasher::new("resample");
    h.field(volume_digest(&src)?.as_bytes());
    for t in target.as_array() {
        h.field(&t.to_le_bytes());
    }
    let key = h.finish();
    let dir = work.cache("resampled");
    create_dir(&dir)?;
    let out = dir.join(format!("{key}.mhd"));
    if read_metaimage_header(&out).is_err() || read_metaimage(&out).is_err() {
        let vol = read_metaimage(&src)?;
        let res = resample_trilinear(&vol, target)?;
        write_metaimage(&res, &out)?;
    }
    Ok((out, key))
}

fn patch_key(resampled_key: &str, model: ModelId, candidates: &[&MergedCandidate]) -> String {
    let mut h = Hasher::new("patches");
    h.field(resampled_key.as_bytes()).field(model.patch_size().to_string().as_bytes());
    for c in candidates {
        h.field(&(c.id as u64).to_le_bytes()).field(&[c.label]);
        for w in c.world {
            h.field(&w.to_le_bytes());
        }
    }
    h.finish()
}

fn digest_text(stage: &str, parts: &[&str]) -> String {
    let mut h = Hasher::new(stage);
    for p in parts {
        h.field(p.as_bytes());
    }
    h.finish()
}

/// Runs the full cross-validation and writes per-model and per-fusion reports.
pub fn run_crossval(cfg: &PipelineConfig) -> Result<CrossvalReport> {
    cfg.validate()?;
    let models = cfg.model_ids()?;
    let work = WorkDir::new(&cfg.paths.work_dir);
    for d in [work.root.clone(), work.predictions(), work.report(), work.logs()] {
        create_dir(&d)?;
    }

    let inputs = load_inputs(cfg).map_err(|e| e.in_stage("load", None))?;
    let Inputs {
        scans,
        merged,
        annotations,
    } = &inputs;
    write_candidates_csv(work.merged(), merged.iter().map(|c| (c.scan_id.as_str(), c.world, c.label)))
        .map_err(|e| e.in_stage("merge", None))?;

    let folds = split_folds(scans, cfg.crossval.k, cfg.crossval.seed).map_err(|e| e.in_stage("folds", None))?;
    write_atomic(&work.folds(), folds.to_csv().as_bytes()).map_err(|e| e.in_stage("folds", None))?;

    let mut by_scan: BTreeMap<&str, Vec<&MergedCandidate>> = scans.iter().map(|s| (s.as_str(), Vec::new())).collect();
    for c in merged {
        if let Some(v) = by_scan.get_mut(c.scan_id.as_str()) {
            v.push(c);
        }
    }

    // Resample and extract every scan at every listed size.
    let patch_dir = work.cache("patches");
    create_dir(&patch_dir).map_err(|e| e.in_stage("extract", None))?;
    let mut patch_files: BTreeMap<(ModelId, &str), (PathBuf, String)> = BTreeMap::new();
    for scan in scans {
        let (res_path, res_key) = cached_resample(cfg, &work, scan).map_err(|e| e.in_stage("resample", None))?;
        let cands = &by_scan[scan.as_str()];
        let mut volume: Option<Volume> = None;
        for &m in &models {
            let key = patch_key(&res_key, m, cands);
            let path = patch_dir.join(format!("{key}.p3d"));
            if read_patch_file(&path).is_err() {
                let vol = match &mut volume {
                    Some(v) => v,
                    slot => slot.insert(read_metaimage(&res_path).map_err(|e| e.in_stage("extract", None))?),
                };
                let patches = extract_patches(
                    vol,
                    cands.iter().map(|c| (c.id, c.world, c.label)),
                    m.patch_size(),
                );
                let tmp = path.with_extension("tmp");
                write_patch_file(&tmp, &patches)
                    .and_then(|_| fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e)))
                    .map_err(|e| e.in_stage("extract", None))?;
            }
            patch_files.insert((m, scan.as_str()), (path, key));
        }
    }

    let train_tag = toml::to_string(&cfg.train).expect("train section serializes");
    let weights_dir = work.cache("weights");
    let preds_dir = work.cache("predictions");
    create_dir(&weights_dir)?;
    create_dir(&preds_dir)?;

    let mut model_preds: BTreeMap<ModelId, Vec<(usize, f64)>> = BTreeMap::new();
    for &m in &models {
        let spec = ModelSpec::with_channels(m, cfg.models.channels);
        let mut oof: Vec<(usize, f64)> = Vec::new();
        for fold in 0..folds.k {
            let stage = |e: Error, name: &str| e.in_stage(&format!("{name} {m}"), Some(fold));
            let held_out: BTreeSet<&str> = folds.scans_in(fold).into_iter().collect();
            let init_seed = derive_seed(cfg.crossval.seed, SEED_INIT, m.index() as u64, fold as u64);
            let train_seed = derive_seed(cfg.crossval.seed, SEED_TRAIN, m.index() as u64, fold as u64);

            let mut train_keys = vec![
                m.to_string(),
                cfg.models.channels.to_string(),
                train_tag.clone(),
                init_seed.to_string(),
                train_seed.to_string(),
            ];
            for scan in scans.iter().filter(|s| !held_out.contains(s.as_str())) {
                train_keys.push(scan.clone());
                train_keys.push(patch_files[&(m, scan.as_str())].1.clone());
            }
            let refs: Vec<&str> = train_keys.iter().map(String::as_str).collect();
            let wkey = digest_text("train", &refs);
            let wpath = weights_dir.join(format!("{wkey}.n3dw"));
            let log_path = work.logs().join(format!("train_{m}_fold{fold}.csv"));

            let params = match load_weights_for(&wpath, &spec) {
                Ok(p) if log_path.exists() => p,
                _ => {
                    // Only training-fold patches are loaded for training.
                    let mut store = PatchStore::default();
                    for scan in scans.iter().filter(|s| !held_out.contains(s.as_str())) {
                        let file = &patch_files[&(m, scan.as_str())].0;
                        for p in read_patch_file(file).map_err(|e| stage(e, "train"))? {
                            store.insert(scan, p);
                        }
                    }
                    let init = spec.init_params::<f32>(init_seed).map_err(|e| stage(e, "train"))?;
                    let tcfg = cfg.train.to_train_config(train_seed);
                    let outcome =
                        train_model(&spec, init, &store, &folds, fold, &tcfg).map_err(|e| stage(e, "train"))?;
                    audit_training(&outcome.log.trained_ids, &store, &folds, fold).map_err(|e| stage(e, "train"))?;
                    let tmp = wpath.with_extension("tmp");
                    save_weights(&outcome.params, &tmp)
                        .and_then(|_| fs::rename(&tmp, &wpath).map_err(|e| Error::io(&wpath, e)))
                        .map_err(|e| stage(e, "train"))?;
                    write_atomic(&log_path, outcome.log.to_csv().as_bytes()).map_err(|e| stage(e, "train"))?;
                    outcome.params
                }
            };

            let mut pred_keys = vec![wkey.clone()];
            for scan in scans.iter().filter(|s| held_out.contains(s.as_str())) {
                pred_keys.push(patch_files[&(m, scan.as_str())].1.clone());
            }
            let refs: Vec<&str> = pred_keys.iter().map(String::as_str).collect();
            let pkey = digest_text("predict", &refs);
            let ppath = preds_dir.join(format!("{pkey}.csv"));
            let preds = match crate::evalfroc::read_predictions_csv(&ppath) {
                Ok(p) => p,
                Err(_) => {
                    let mut patches: Vec<Patch> = Vec::new();
                    for scan in scans.iter().filter(|s| held_out.contains(s.as_str())) {
                        let file = &patch_files[&(m, scan.as_str())].0;
                        patches.extend(read_patch_file(file).map_err(|e| stage(e, "predict"))?);
                    }
                    let preds = predict(&spec, &params, &patches).map_err(|e| stage(e, "predict"))?;
                    write_atomic(&ppath, predictions_to_csv(&preds).as_bytes()).map_err(|e| stage(e, "predict"))?;
                    // Re-read so cached and fresh runs see identical rounding.
                    crate::evalfroc::read_predictions_csv(&ppath).map_err(|e| stage(e, "predict"))?
                }
            };
            oof.extend(preds);
        }
        oof.sort_by_key(|p| p.0);
        write_atomic(
            &work.predictions().join(format!("{m}.csv")),
            predictions_to_csv(&oof).as_bytes(),
        )
        .map_err(|e| e.in_stage("predict", None))?;
        model_preds.insert(m, oof);
    }

    // Evaluation.
    let assoc = associate(merged, annotations);
    let unmatched_positive_labels = merged
        .iter()
        .filter(|c| c.label == 1 && assoc.nodule_of(c.id).is_none())
        .count();
    let mut nodules_per_scan: BTreeMap<String, usize> = BTreeMap::new();
    for a in annotations {
        *nodules_per_scan.entry(a.scan_id.clone()).or_default() += 1;
    }
    let boot_seed = derive_seed(cfg.crossval.seed, SEED_BOOT, 0, 0);
    let evaluate = |name: &str, preds: &[(usize, f64)]| -> Result<FrocScore> {
        let scored: Vec<ScoredCandidate> = preds
            .iter()
            .map(|&(id, p)| ScoredCandidate {
                scan_id: merged[id].scan_id.clone(),
                candidate_id: id,
                probability: p,
                nodule_id: assoc.nodule_of(id),
            })
            .collect();
        let data = FrocData::new(&scored, scans, Some(&nodules_per_scan))?;
        let score = score_with_ci(&data, cfg.crossval.bootstrap, cfg.crossval.level, boot_seed)?;
        write_atomic(&work.report().join(format!("froc_{name}.csv")), score.to_csv().as_bytes())?;
        write_atomic(&work.report().join(format!("curve_{name}.csv")), curve_to_csv(&data.curve()?).as_bytes())?;
        Ok(score)
    };

    let mut model_scores = Vec::new();
    for m in &models {
        let s = evaluate(&m.to_string(), &model_preds[m]).map_err(|e| e.in_stage("evaluate", None))?;
        model_scores.push((m.to_string(), s));
    }
    let mut fusion_scores = Vec::new();
    for (name, members) in &cfg.fusions {
        let lists: Vec<Vec<(usize, f64)>> = members
            .iter()
            .map(|s| Ok(model_preds[&s.parse::<ModelId>()?].clone()))
            .collect::<Result<_>>()?;
        let fused = fuse(&lists).map_err(|e| e.in_stage("fuse", None))?;
        write_atomic(
            &work.predictions().join(format!("{name}.csv")),
            predictions_to_csv(&fused).as_bytes(),
        )
        .map_err(|e| e.in_stage("fuse", None))?;
        let s = evaluate(name, &fused).map_err(|e| e.in_stage("evaluate", None))?;
        fusion_scores.push((name.clone(), s));
    }

    let report = CrossvalReport {
        models: model_scores,
        fusions: fusion_scores,
        unmatched_positive_labels,
        report_dir: work.report(),
    };
    let stage = |e: Error| e.in_stage("report", None);
    write_atomic(&work.report().join("models.csv"), score_table(&report.models).as_bytes()).map_err(stage)?;
    write_atomic(&work.report().join("fusions.csv"), score_table(&report.fusions).as_bytes()).map_err(stage)?;
    let mut summary = report.render();
    let _ = writeln!(
        summary,
        "scans: {}, candidates: {}, nodules: {}, positive-labelled candidates without a matching nodule: {}",
        scans.len(),
        merged.len(),
        annotations.len(),
        unmatched_positive_labels
    );
    write_atomic(&work.report().join("summary.txt"), summary.as_bytes()).map_err(stage)?;
    Ok(report)
}

/// Fails if any trained candidate belongs to the held-out fold.
fn audit_training(trained: &BTreeSet<usize>, store: &PatchStore, folds: &FoldAssignment, held_out: usize) -> Result<()> {
    for id in trained {
        let scan = store
            .scan_of
            .get(id)
            .ok_or_else(|| Error::invalid(format!("trained candidate {id} is not in the patch store")))?;
        if folds.fold_of(scan) == Some(held_out) {
            return Err(Error::invalid(format!(
                "candidate {id} from held-out scan `{scan}` entered training"
            )));
        }
    }
    Ok(())
}
