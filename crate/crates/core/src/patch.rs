//! Fixed-size 3D patches around candidates, in `(z, y, x)` order with x fastest.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::volio::Volume;

/// HU value used for voxels outside the scan.
pub const AIR_HU: f32 = -1000.0;
/// Lower edge of the intensity window.
pub const WINDOW_LO: f32 = -1000.0;
/// Upper edge of the intensity window.
pub const WINDOW_HI: f32 = 400.0;

/// Patch extent `(d, h, w)` in voxels; `d` runs along z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchSize {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl PatchSize {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        PatchSize { d, h, w }
    }

    pub fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Input sizes of the five stock models, smallest first.
pub const STOCK_SIZES: [PatchSize; 5] = [
    PatchSize::new(12, 24, 24),
    PatchSize::new(18, 30, 30),
    PatchSize::new(24, 36, 36),
    PatchSize::new(30, 42, 42),
    PatchSize::new(36, 48, 48),
];

impl fmt::Display for PatchSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.d, self.h, self.w)
    }
}

impl FromStr for PatchSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(['x', 'X'])
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::invalid(format!("patch size must look like 24x36x36, got `{s}`")))?;
        match parts[..] {
            [d, h, w] if d > 0 && h > 0 && w > 0 => Ok(PatchSize::new(d, h, w)),
            _ => Err(Error::invalid(format!("patch size must look like 24x36x36, got `{s}`"))),
        }
    }
}

/// A normalized patch ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub candidate_id: usize,
    pub label: u8,
    pub size: PatchSize,
    pub values: Vec<f32>,
}

/// First voxel index of a block of `extent` voxels around `center`.
#[inline]
fn block_start(center: i64, extent: usize) -> i64 {
    center - (extent / 2) as i64
}

/// Raw HU block centered on the voxel nearest `center_world`.
///
/// Along each axis the block covers `[c - floor(s/2), c + ceil(s/2) - 1]`;
/// voxels outside the volume read as air.
pub fn extract_patch(volume: &Volume, center_world: [f64; 3], size: PatchSize) -> Vec<f32> {
    let c = volume.world_to_voxel(center_world).map(|v| v.round() as i64);
    let [nx, ny, nz] = volume.dims().map(|n| n as i64);
    let (x0, y0, z0) = (
        block_start(c[0], size.w),
        block_start(c[1], size.h),
        block_start(c[2], size.d),
    );
    let mut out = vec![AIR_HU; size.len()];
    for dz in 0..size.d {
        let z = z0 + dz as i64;
        if z < 0 || z >= nz {
            continue;
        }
        for dy in 0..size.h {
            let y = y0 + dy as i64;
            if y < 0 || y >= ny {
                continue;
            }
            let row = (dz * size.h + dy) * size.w;
            // Only the in-volume x run is copied.
            let xs = x0.max(0);
            let xe = (x0 + size.w as i64).min(nx);
            if xs >= xe {
                continue;
            }
            let src = volume.index(xs as usize, y as usize, z as usize);
            let dst = row + (xs - x0) as usize;
            let n = (xe - xs) as usize;
            out[dst..dst + n].copy_from_slice(&volume.data()[src..src + n]);
        }
    }
    out
}

/// Maps HU through the `[-1000, 400]` window onto `[0, 1]`.
#[inline]
pub fn normalize_hu(v: f32) -> f32 {
    ((v - WINDOW_LO) / (WINDOW_HI - WINDOW_LO)).clamp(0.0, 1.0)
}

pub fn normalize(raw: &[f32]) -> Vec<f32> {
    raw.iter().map(|&v| normalize_hu(v)).collect()
}

/// Extracts and normalizes one patch per candidate.
pub fn extract_patches<'a, I>(volume: &Volume, candidates: I, size: PatchSize) -> Vec<Patch>
where
    I: IntoIterator<Item = (usize, [f64; 3], u8)> + 'a,
{
    candidates
        .into_iter()
        .map(|(candidate_id, world, label)| Patch {
            candidate_id,
            label,
            size,
            values: normalize(&extract_patch(volume, world, size)),
        })
        .collect()
}

const PATCH_MAGIC: &[u8; 4] = b"P3D1";

pub fn encode_patches(patches: &[Patch]) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(4 + patches.iter().map(|p| 15 + 4 * p.values.len()).sum::<usize>());
    buf.extend_from_slice(PATCH_MAGIC);
    for p in patches {
        if p.values.len() != p.size.len() {
            return Err(Error::Shape(format!(
                "patch {} has {} values for size {}",
                p.candidate_id,
                p.values.len(),
                p.size
            )));
        }
        buf.extend_from_slice(&(p.candidate_id as u64).to_le_bytes());
        buf.push(p.label);
        for e in [p.size.d, p.size.h, p.size.w] {
            let e = u16::try_from(e)
                .map_err(|_| Error::invalid(format!("patch extent {e} exceeds u16")))?;
            buf.extend_from_slice(&e.to_le_bytes());
        }
        for v in &p.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_patches(path: &Path, bytes: &[u8]) -> Result<Vec<Patch>> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 4 || &bytes[..4] != PATCH_MAGIC {
        return Err(corrupt("missing P3D1 magic".into()));
    }
    let mut pos = 4;
    let mut out = Vec::new();
    while pos < bytes.len() {
        if bytes.len() - pos < 15 {
            return Err(corrupt(format!("truncated patch record at byte {pos}")));
        }
        let id = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
        let label = bytes[pos + 8];
        let ext = |o: usize| u16::from_le_bytes([bytes[pos + o], bytes[pos + o + 1]]) as usize;
        let size = PatchSize::new(ext(9), ext(11), ext(13));
        pos += 15;
        let n = size.len() * 4;
        if bytes.len() - pos < n {
            return Err(corrupt(format!("truncated values for candidate {id}")));
        }
        let values = bytes[pos..pos + n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        pos += n;
        out.push(Patch {
            candidate_id: id as usize,
            label,
            size,
            values,
        });
    }
    Ok(out)
}

pub fn write_patch_file(path: impl AsRef<Path>, patches: &[Patch]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_patches(patches)?).map_err(|e| Error::io(path, e))
}

pub fn read_patch_file(path: impl AsRef<Path>) -> Result<Vec<Patch>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_patches(path, &bytes)
}
