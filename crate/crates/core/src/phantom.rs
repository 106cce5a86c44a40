//! Synthetic CT phantoms with known ground truth for desk-scale runs.
//!
//! Each scan is an air-filled box with mild noise. Nodules are solid
//! soft-tissue spheres of diameter 3 to 30 mm. Negatives are faint elongated
//! blobs, faint tubes, or bare background. Larger nodules get a second,
//! jittered detection so candidate merging has something to do.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volio::{write_annotations_csv, write_candidates_csv, write_metaimage, AnnotationRecord, Spacing, Volume};

/// Physical extent of every phantom in mm.
const FOV_MM: [f64; 3] = [96.0, 96.0, 64.0];
const MIN_DIAMETER: f64 = 3.0;
const MAX_DIAMETER: f64 = 30.0;
const Z_SPACINGS: [f64; 5] = [0.8, 1.0, 1.25, 1.5, 2.0];

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSet {
    pub scans: Vec<String>,
    pub nodules: usize,
    pub candidates: usize,
    /// Ready-to-run cross-validation config next to the data.
    pub config: PathBuf,
}

/// Writes `value` into every voxel whose center lies within `radius` mm of
/// `center` (world mm), returning the number of voxels painted.
pub fn paint_sphere(volume: &mut Volume, center: [f64; 3], radius: f64, value: f32) -> usize {
    paint_where(volume, center, [radius; 3], value, |d| {
        d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= radius * radius
    })
}

/// Axis-aligned ellipsoid with the given semi-axes.
pub fn paint_ellipsoid(volume: &mut Volume, center: [f64; 3], semi: [f64; 3], value: f32) -> usize {
    paint_where(volume, center, semi, value, |d| {
        (0..3).map(|a| (d[a] / semi[a]).powi(2)).sum::<f64>() <= 1.0
    })
}

/// Cylinder of `radius` around the segment `center ± half_len * dir` (unit `dir`).
pub fn paint_tube(volume: &mut Volume, center: [f64; 3], dir: [f64; 3], half_len: f64, radius: f64, value: f32) -> usize {
    let reach = half_len + radius;
    paint_where(volume, center, [reach; 3], value, |d| {
        let t = d[0] * dir[0] + d[1] * dir[1] + d[2] * dir[2];
        if t.abs() > half_len {
            return false;
        }
        let perp2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2] - t * t;
        perp2 <= radius * radius
    })
}

fn paint_where(
    volume: &mut Volume,
    center: [f64; 3],
    reach: [f64; 3],
    value: f32,
    inside: impl Fn([f64; 3]) -> bool,
) -> usize {
    let dims = volume.dims();
    let sp = volume.spacing().as_array();
    let c = volume.world_to_voxel(center);
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let r = reach[a] / sp[a];
        lo[a] = (c[a] - r).floor().max(0.0) as usize;
        hi[a] = ((c[a] + r).ceil().max(-1.0) as i64 + 1).clamp(0, dims[a] as i64) as usize;
    }
    let mut count = 0;
    for k in lo[2]..hi[2] {
        for j in lo[1]..hi[1] {
            for i in lo[0]..hi[0] {
                let w = volume.voxel_to_world([i as f64, j as f64, k as f64]);
                if inside([w[0] - center[0], w[1] - center[1], w[2] - center[2]]) {
                    let idx = volume.index(i, j, k);
                    volume.data_mut()[idx] = value;
                    count += 1;
                }
            }
        }
    }
    count
}

fn round_to(v: f64, step: f64) -> f64 {
    (v / step).round() * step
}

/// Candidate row of one phantom scan.
struct Placed {
    world: [f64; 3],
    label: u8,
}

/// Finds a center inside the box, at least `bound` mm from the walls and clear of earlier objects.
fn place(rng: &mut ChaCha8Rng, bound: f64, taken: &[([f64; 3], f64)]) -> Option<[f64; 3]> {
    for _ in 0..2000 {
        let mut p = [0.0; 3];
        let mut ok = true;
        for a in 0..3 {
            let lo = bound + 1.0;
            let hi = FOV_MM[a] - bound - 1.0;
            if lo >= hi {
                ok = false;
                break;
            }
            p[a] = round_to(rng.gen_range(lo..hi), 0.001);
        }
        if ok
            && taken
                .iter()
                .all(|(q, b)| crate::candidates::distance(p, *q) >= bound + b + 3.0)
        {
            return Some(p);
        }
    }
    None
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// One phantom scan with its candidates and annotations.
fn make_scan(seed: u64, index: usize, scan_id: &str) -> Result<(Volume, Vec<Placed>, Vec<AnnotationRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let dxy = round_to(rng.gen_range(0.55..0.95), 0.01);
    let dz = Z_SPACINGS[rng.gen_range(0..Z_SPACINGS.len())];
    let spacing = Spacing::new(dxy, dxy, dz)?;
    let dims = [
        (FOV_MM[0] / dxy).round() as usize,
        (FOV_MM[1] / dxy).round() as usize,
        (FOV_MM[2] / dz).round() as usize,
    ];
    let origin = [
        rng.gen_range(-200..100) as f64,
        rng.gen_range(-200..100) as f64,
        rng.gen_range(-300..0) as f64,
    ];
    let n: usize = dims.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let noise: f64 = (0..3).map(|_| rng.gen_range(-1.0..1.0)).sum::<f64>() * 15.0;
            (-1000.0 + noise).round() as f32
        })
        .collect();
    let mut volume = Volume::new(dims, spacing, origin, data)?;
    let to_world = |p: [f64; 3]| [origin[0] + p[0], origin[1] + p[1], origin[2] + p[2]];

    let mut taken: Vec<([f64; 3], f64)> = Vec::new();
    let mut placed = Vec::new();
    let mut annotations = Vec::new();

    let n_nodules = rng.gen_range(2..=5);
    for _ in 0..n_nodules {
        let diameter = round_to(rng.gen_range(MIN_DIAMETER..=MAX_DIAMETER), 0.01);
        let r = diameter / 2.0;
        let Some(p) = place(&mut rng, r, &taken) else { continue };
        taken.push((p, r));
        let hu = rng.gen_range(-50..=80) as f32;
        let world = to_world(p);
        paint_sphere(&mut volume, world, r, hu);
        annotations.push(AnnotationRecord {
            nodule_id: annotations.len(),
            scan_id: scan_id.to_string(),
            world,
            diameter,
        });
        placed.push(Placed { world, label: 1 });
        if diameter >= 8.0 {
            let jitter = [0, 1, 2].map(|a| round_to(world[a] + rng.gen_range(-1.0..1.0), 0.001));
            placed.push(Placed { world: jitter, label: 1 });
        }
    }

    let n_negatives = rng.gen_range(10..=18);
    for _ in 0..n_negatives {
        let kind = rng.gen_range(0..3);
        let hu = rng.gen_range(-650..=-400) as f32;
        match kind {
            0 => {
                let mut semi = [rng.gen_range(4.0..8.0), rng.gen_range(1.5..3.0), rng.gen_range(1.5..3.0)];
                let roll = rng.gen_range(0..3);
                semi.rotate_left(roll);
                let bound = semi.iter().cloned().fold(0.0, f64::max);
                let Some(p) = place(&mut rng, bound, &taken) else { continue };
                taken.push((p, bound));
                paint_ellipsoid(&mut volume, to_world(p), semi, hu);
                placed.push(Placed { world: to_world(p), label: 0 });
            }
            1 => {
                let half = rng.gen_range(6.0..12.0);
                let radius = rng.gen_range(1.0..2.0);
                let dir = unit_vector(&mut rng);
                let Some(p) = place(&mut rng, half + radius, &taken) else { continue };
                taken.push((p, half + radius));
                paint_tube(&mut volume, to_world(p), dir, half, radius, hu);
                placed.push(Placed { world: to_world(p), label: 0 });
            }
            _ => {
                let Some(p) = place(&mut rng, 2.0, &taken) else { continue };
                taken.push((p, 2.0));
                placed.push(Placed { world: to_world(p), label: 0 });
            }
        }
    }
    Ok((volume, placed, annotations))
}

/// Generates `n_scans` phantoms under `out_dir`: `volumes/*.mhd`,
/// `candidates.csv`, `annotations.csv`, `scans.txt` and `crossval.toml`.
pub fn make_phantoms(n_scans: usize, seed: u64, out_dir: impl AsRef<Path>) -> Result<PhantomSet> {
    if n_scans == 0 {
        return Err(Error::invalid("phantom set needs at least one scan"));
    }
    let out = out_dir.as_ref();
    let vol_dir = out.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;

    let mut scans = Vec::with_capacity(n_scans);
    let mut candidate_rows: Vec<(String, [f64; 3], u8)> = Vec::new();
    let mut annotations: Vec<AnnotationRecord> = Vec::new();
    for i in 0..n_scans {
        let scan_id = format!("phantom{i:03}");
        let (volume, placed, ann) = make_scan(seed, i, &scan_id)?;
        write_metaimage(&volume, vol_dir.join(format!("{scan_id}.mhd")))?;
        candidate_rows.extend(placed.into_iter().map(|p| (scan_id.clone(), p.world, p.label)));
        let base = annotations.len();
        annotations.extend(ann.into_iter().map(|mut a| {
            a.nodule_id += base;
            a
        }));
        scans.push(scan_id);
    }
    write_candidates_csv(
        out.join("candidates.csv"),
        candidate_rows.iter().map(|(s, w, l)| (s.as_str(), *w, *l)),
    )?;
    write_annotations_csv(out.join("annotations.csv"), &annotations)?;
    let mut list = String::new();
    for s in &scans {
        let _ = writeln!(list, "{s}");
    }
    let scans_path = out.join("scans.txt");
    fs::write(&scans_path, list).map_err(|e| Error::io(&scans_path, e))?;

    let config = out.join("crossval.toml");
    let text = format!(
        r#"[paths]
volumes = "volumes"
candidates = "candidates.csv"
annotations = "annotations.csv"
scans = "scans.txt"
work_dir = "work"

[models]
list = ["M1", "M2", "M3", "M4", "M5"]
channels = 8

[crossval]
k = 2
seed = {seed}
bootstrap = 1000

[train]
batch_size = 4
stop_fraction = 1.0
"#
    );
    fs::write(&config, text).map_err(|e| Error::io(&config, e))?;
    Ok(PhantomSet {
        scans,
        nodules: annotations.len(),
        candidates: candidate_rows.len(),
        config,
    })
}
