use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lungfp::candidates::{associate, merge_candidates, split_folds, FoldAssignment};
use lungfp::evalfroc::{
    curve_to_csv, fuse, read_predictions_csv, score_with_ci, write_predictions_csv, FrocData, ScoredCandidate,
};
use lungfp::patch::{extract_patches, read_patch_file, write_patch_file, PatchSize};
use lungfp::phantom::make_phantoms;
use lungfp::pipeline::{run_crossval, PipelineConfig, TrainSection};
use lungfp::resample::{analyze_headers, resample_trilinear};
use lungfp::tensornet::{load_weights_for, save_state, save_weights, ModelId, ModelSpec};
use lungfp::train::{predict, train_model, PatchStore};
use lungfp::volio::{
    read_annotations_csv, read_candidates_csv, read_metaimage, read_metaimage_header, read_scan_list, scan_id_of,
    write_candidates_csv, write_metaimage, Spacing,
};
use lungfp::{Error, Result};

#[derive(Parser)]
#[command(name = "lungfp", version, about = "Lung nodule candidate false-positive reduction")]
struct Cli {
    /// Pipeline config (TOML); supplies defaults for the stage subcommands.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's work directory (crossval).
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Resample one volume onto a new voxel grid.
    Resample {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Target spacing in mm as x,y,z.
        #[arg(long, value_delimiter = ',')]
        spacing: Option<Vec<f64>>,
    },
    /// Histogram the voxel spacings of a directory of volumes.
    SpacingStats {
        /// Directory of `.mhd` headers.
        #[arg(long = "inputs")]
        volumes: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        bin_width: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge candidates closer than a radius.
    Merge {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split scans into k folds.
    Folds {
        /// Scan list, or a candidate CSV whose scans are used.
        #[arg(long)]
        scans: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut normalized patches around the candidates of one or more resampled volumes.
    Extract {
        /// A `.mhd` file or a directory of them.
        #[arg(long = "volume", alias = "volumes")]
        volumes: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long, conflicts_with = "size")]
        model: Option<ModelId>,
        #[arg(long)]
        size: Option<PatchSize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on every fold but the held-out one.
    Train(TrainArgs),
    /// Score patches with trained weights.
    Predict {
        #[arg(long)]
        model: ModelId,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        patches: Vec<PathBuf>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average prediction files.
    Fuse {
        #[arg(long, value_delimiter = ',', required = true)]
        preds: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// FROC analysis with bootstrap confidence intervals.
    Froc {
        #[arg(long)]
        preds: PathBuf,
        /// Candidate CSV the prediction ids index into (the merged list).
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        scans: Option<PathBuf>,
        #[arg(long)]
        bootstrap: Option<usize>,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Full cross-validation described by --config.
    Crossval,
    /// Write a synthetic phantom dataset with a ready-to-run config.
    Phantoms {
        #[arg(long, default_value_t = 20)]
        n_scans: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model: ModelId,
    #[arg(long, value_delimiter = ',', required = true)]
    patches: Vec<PathBuf>,
    /// Candidate CSV mapping patch ids to scans.
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    folds: PathBuf,
    #[arg(long)]
    holdout: usize,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    stop_fraction: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also save the optimizer state.
    #[arg(long)]
    state: Option<PathBuf>,
}

/// Stage defaults: from the config when given, else built-in.
struct Defaults {
    spacing: [f64; 3],
    merge_radius: f64,
    k: usize,
    seed: u64,
    channels: usize,
    bootstrap: usize,
    train: TrainSection,
}

impl Defaults {
    fn new(cli: &Cli) -> Result<Self> {
        let cfg = cli.config.as_ref().map(PipelineConfig::load).transpose()?;
        let d = Defaults {
            spacing: cfg.as_ref().map_or([0.7, 0.7, 1.0], |c| c.preprocess.target_spacing),
            merge_radius: cfg.as_ref().map_or(5.0, |c| c.preprocess.merge_radius_mm),
            k: cfg.as_ref().map_or(10, |c| c.crossval.k),
            seed: cli.seed.or(cfg.as_ref().map(|c| c.crossval.seed)).unwrap_or(0),
            channels: cfg.as_ref().map_or(64, |c| c.models.channels),
            bootstrap: cfg.as_ref().map_or(1000, |c| c.crossval.bootstrap),
            train: cfg.map(|c| c.train).unwrap_or_default(),
        };
        Ok(d)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn mhd_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()).map_err(io))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x == "mhd"))
        .collect();
    files.sort();
    Ok(files)
}

fn load_folds(path: &Path) -> Result<FoldAssignment> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    FoldAssignment::from_csv(path, &text)
}

fn run(cli: Cli) -> Result<()> {
    let d = Defaults::new(&cli)?;
    match cli.command {
        Command::Resample { input, out, spacing } => {
            let s = match spacing.as_deref() {
                None => d.spacing,
                Some(&[x, y, z]) => [x, y, z],
                Some(v) => return Err(Error::Invalid(format!("--spacing needs 3 values, got {}", v.len()))),
            };
            let vol = read_metaimage(&input)?;
            let res = resample_trilinear(&vol, Spacing::new(s[0], s[1], s[2])?)?;
            write_metaimage(&res, &out)?;
            let [nx, ny, nz] = res.dims();
            eprintln!("{} -> {nx}x{ny}x{nz}", input.display());
        }
        Command::SpacingStats { volumes, bin_width, out } => {
            let headers = mhd_files(&volumes)?
                .iter()
                .map(read_metaimage_header)
                .collect::<Result<Vec<_>>>()?;
            let stats = analyze_headers(&headers, bin_width)?;
            write_text(&out, &stats.to_csv())?;
        }
        Command::Merge { candidates, radius, out } => {
            let records = read_candidates_csv(&candidates)?;
            let merged = merge_candidates(&records, radius.unwrap_or(d.merge_radius))?;
            write_candidates_csv(&out, merged.iter().map(|c| (c.scan_id.as_str(), c.world, c.label)))?;
            eprintln!("{} candidates -> {}", records.len(), merged.len());
        }
        Command::Folds { scans, k, out } => {
            let ids = match read_candidates_csv(&scans) {
                Ok(rows) => rows.into_iter().map(|r| r.scan_id).collect(),
                Err(_) => read_scan_list(&scans)?,
            };
            let folds = split_folds(&ids, k.unwrap_or(d.k), d.seed)?;
            write_text(&out, &folds.to_csv())?;
        }
        Command::Extract {
            volumes,
            candidates,
            model,
            size,
            out,
        } => {
            let size = match (model, size) {
                (Some(m), None) => m.patch_size(),
                (None, Some(s)) => s,
                _ => return Err(Error::Invalid("give exactly one of --model or --size".into())),
            };
            let records = read_candidates_csv(&candidates)?;
            let mut by_scan: BTreeMap<&str, Vec<_>> = BTreeMap::new();
            for r in &records {
                by_scan.entry(r.scan_id.as_str()).or_default().push((r.id, r.world, r.label));
            }
            let mut patches = Vec::new();
            for file in mhd_files(&volumes)? {
                let scan = scan_id_of(&file);
                if let Some(c) = by_scan.get(scan.as_str()) {
                    let vol = read_metaimage(&file)?;
                    patches.extend(extract_patches(&vol, c.iter().copied(), size));
                }
            }
            patches.sort_by_key(|p| p.candidate_id);
            write_patch_file(&out, &patches)?;
            eprintln!("{} patches of {size}", patches.len());
        }
        Command::Train(a) => {
            let spec = ModelSpec::with_channels(a.model, a.channels.unwrap_or(d.channels));
            let records = read_candidates_csv(&a.candidates)?;
            let folds = load_folds(&a.folds)?;
            let mut store = PatchStore::default();
            for file in &a.patches {
                for p in read_patch_file(file)? {
                    let scan = records
                        .get(p.candidate_id)
                        .map(|r| r.scan_id.clone())
                        .ok_or_else(|| Error::Invalid(format!("patch id {} is not in the candidate list", p.candidate_id)))?;
                    store.insert(&scan, p);
                }
            }
            let mut section = d.train;
            if let Some(b) = a.batch_size {
                section.batch_size = b;
            }
            if let Some(s) = a.stop_fraction {
                section.stop_fraction = s;
            }
            let cfg = section.to_train_config(d.seed);
            let init = spec.init_params::<f32>(d.seed)?;
            let outcome = train_model(&spec, init, &store, &folds, a.holdout, &cfg)?;
            save_weights(&outcome.params, &a.out)?;
            if let Some(p) = &a.state {
                save_state(&outcome.state, &outcome.params, p)?;
            }
            if let Some(p) = &a.log {
                write_text(p, &outcome.log.to_csv())?;
            }
            eprintln!("{} steps over {} chunks", outcome.log.steps, outcome.log.chunks.len());
        }
        Command::Predict {
            model,
            weights,
            patches,
            channels,
            out,
        } => {
            let spec = ModelSpec::with_channels(model, channels.unwrap_or(d.channels));
            let params = load_weights_for(&weights, &spec)?;
            let mut all = Vec::new();
            for f in &patches {
                all.extend(read_patch_file(f)?);
            }
            let preds = predict(&spec, &params, &all)?;
            write_predictions_csv(&out, &preds)?;
        }
        Command::Fuse { preds, out } => {
            let lists = preds.iter().map(read_predictions_csv).collect::<Result<Vec<_>>>()?;
            write_predictions_csv(&out, &fuse(&lists)?)?;
        }
        Command::Froc {
            preds,
            candidates,
            annotations,
            scans,
            bootstrap,
            level,
            out,
            curve,
        } => {
            let cands = read_candidates_csv(&candidates)?;
            let ann = read_annotations_csv(&annotations)?;
            let preds = read_predictions_csv(&preds)?;
            let scan_ids: Vec<String> = match &scans {
                Some(p) => read_scan_list(p)?,
                None => {
                    let mut s: Vec<String> = cands.iter().map(|c| c.scan_id.clone()).collect();
                    s.sort();
                    s.dedup();
                    s
                }
            };
            let assoc = associate(&cands, &ann);
            let unmatched = cands
                .iter()
                .filter(|c| c.label == 1 && assoc.nodule_of(c.id).is_none())
                .count();
            if unmatched > 0 {
                eprintln!("{unmatched} positive-labelled candidates match no annotation; scored as false positives");
            }
            let scored = preds
                .iter()
                .map(|&(id, p)| {
                    let c = cands
                        .get(id)
                        .ok_or_else(|| Error::Invalid(format!("prediction for unknown candidate {id}")))?;
                    Ok(ScoredCandidate {
                        scan_id: c.scan_id.clone(),
                        candidate_id: id,
                        probability: p,
                        nodule_id: assoc.nodule_of(id),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut per_scan: BTreeMap<String, usize> = BTreeMap::new();
            for a in &ann {
                *per_scan.entry(a.scan_id.clone()).or_default() += 1;
            }
            let data = FrocData::new(&scored, &scan_ids, Some(&per_scan))?;
            let score = score_with_ci(&data, bootstrap.unwrap_or(d.bootstrap), level, d.seed)?;
            write_text(&out, &score.to_csv())?;
            if let Some(c) = &curve {
                write_text(c, &curve_to_csv(&data.curve()?))?;
            }
            println!("average sensitivity {:.3}", score.average);
        }
        Command::Crossval => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| Error::Invalid("crossval needs --config".into()))?;
            let mut cfg = PipelineConfig::load(path)?;
            if let Some(s) = cli.seed {
                cfg.crossval.seed = s;
            }
            if let Some(w) = cli.work_dir {
                cfg.paths.work_dir = w;
            }
            let report = run_crossval(&cfg)?;
            print!("{}", report.render());
            println!("reports in {}", report.report_dir.display());
        }
        Command::Phantoms { n_scans, out } => {
            let set = make_phantoms(n_scans, cli.seed.unwrap_or(0), &out)?;
            println!(
                "{} scans, {} nodules, {} candidates; config at {}",
                set.scans.len(),
                set.nodules,
                set.candidates,
                set.config.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
