//! Probability fusion, FROC curves, the seven-point sensitivity score and
//! scan-level bootstrap confidence intervals.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// False positives per scan at which sensitivity is reported.
pub const FP_TARGETS: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub scan_id: String,
    pub candidate_id: usize,
    pub probability: f64,
    /// Nodule this candidate hits; `None` makes it a false positive.
    pub nodule_id: Option<usize>,
}

/// Averages aligned per-model probability lists. Every list must cover the
/// same candidate ids; output is sorted by candidate id.
pub fn fuse(lists: &[Vec<(usize, f64)>]) -> Result<Vec<(usize, f64)>> {
    let first = lists
        .first()
        .ok_or_else(|| Error::invalid("fusion needs at least one prediction list"))?;
    let maps: Vec<BTreeMap<usize, f64>> = lists
        .iter()
        .enumerate()
        .map(|(j, l)| {
            let m: BTreeMap<usize, f64> = l.iter().copied().collect();
            if m.len() != l.len() {
                return Err(Error::invalid(format!("prediction list {j} repeats a candidate id")));
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let ids: Vec<usize> = maps[0].keys().copied().collect();
    for (j, m) in maps.iter().enumerate().skip(1) {
        if m.len() != ids.len() || !m.keys().eq(ids.iter()) {
            return Err(Error::invalid(format!(
                "prediction list {j} covers different candidates than list 0 ({} vs {})",
                m.len(),
                first.len()
            )));
        }
    }
    let k = lists.len() as f64;
    Ok(ids
        .into_iter()
        .map(|id| {
            let sum: f64 = maps.iter().map(|m| m[&id]).sum();
            (id, sum / k)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrocPoint {
    /// Lowest probability counted as positive at this operating point.
    pub threshold: f64,
    pub fp_per_scan: f64,
    pub sensitivity: f64,
}

/// Operating points ordered by strictly increasing false positives per scan.
#[derive(Debug, Clone, PartialEq)]
pub struct FrocCurve {
    pub points: Vec<FrocPoint>,
    pub n_scans: usize,
    pub n_nodules: usize,
}

/// Curve with the nodule count taken from the distinct nodule ids in `scored`.
pub fn froc_curve(scored: &[ScoredCandidate], n_scans: usize) -> Result<FrocCurve> {
    let n_nodules = scored
        .iter()
        .filter_map(|s| s.nodule_id)
        .collect::<BTreeSet<_>>()
        .len();
    froc_curve_with_nodules(scored, n_scans, n_nodules)
}

/// Sweeps the threshold down through every distinct probability. Candidates
/// with equal probability enter together. When consecutive thresholds give the
/// same false-positive rate only the last (most sensitive) point is kept.
pub fn froc_curve_with_nodules(
    scored: &[ScoredCandidate],
    n_scans: usize,
    n_nodules: usize,
) -> Result<FrocCurve> {
    if n_scans == 0 {
        return Err(Error::invalid("FROC analysis needs at least one scan"));
    }
    if n_nodules == 0 {
        return Err(Error::invalid("FROC analysis needs at least one nodule"));
    }
    let mut order: Vec<&ScoredCandidate> = scored.iter().collect();
    order.sort_by(|a, b| b.probability.total_cmp(&a.probability));

    let mut detected: BTreeSet<usize> = BTreeSet::new();
    let mut fps = 0usize;
    let mut points: Vec<FrocPoint> = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let t = order[i].probability;
        while i < order.len() && order[i].probability == t {
            match order[i].nodule_id {
                Some(n) => {
                    detected.insert(n);
                }
                None => fps += 1,
            }
            i += 1;
        }
        let point = FrocPoint {
            threshold: t,
            fp_per_scan: fps as f64 / n_scans as f64,
            sensitivity: detected.len() as f64 / n_nodules as f64,
        };
        match points.last_mut() {
            Some(last) if last.fp_per_scan == point.fp_per_scan => *last = point,
            _ => points.push(point),
        }
    }
    Ok(FrocCurve {
        points,
        n_scans,
        n_nodules,
    })
}

/// Linearly interpolated sensitivity at each target false-positive rate.
///
/// Targets below the first curve point take the fp = 0 anchor: the
/// sensitivity of a point at fp = 0 if the curve has one, else 0. Targets
/// past the last point take its sensitivity.
pub fn sensitivity_at(curve: &FrocCurve, targets: &[f64]) -> Vec<f64> {
    let pts = &curve.points;
    targets
        .iter()
        .map(|&t| {
            let Some(first) = pts.first() else { return 0.0 };
            if t < first.fp_per_scan {
                return 0.0;
            }
            match pts.iter().position(|p| p.fp_per_scan >= t) {
                None => pts[pts.len() - 1].sensitivity,
                Some(j) if pts[j].fp_per_scan == t => pts[j].sensitivity,
                Some(j) => {
                    let (a, b) = (&pts[j - 1], &pts[j]);
                    a.sensitivity
                        + (b.sensitivity - a.sensitivity) * (t - a.fp_per_scan) / (b.fp_per_scan - a.fp_per_scan)
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceBounds {
    pub lo: [f64; 7],
    pub hi: [f64; 7],
    pub average_lo: f64,
    pub average_hi: f64,
    /// Replicates that contained at least one nodule.
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrocScore {
    pub sensitivities: [f64; 7],
    pub average: f64,
    pub ci: Option<ConfidenceBounds>,
}

impl FrocScore {
    pub fn from_curve(curve: &FrocCurve) -> Self {
        let s = sensitivity_at(curve, &FP_TARGETS);
        let sensitivities: [f64; 7] = s.try_into().expect("seven targets");
        let average = sensitivities.iter().sum::<f64>() / 7.0;
        FrocScore {
            sensitivities,
            average,
            ci: None,
        }
    }

    /// `fp_target,sensitivity,ci_lo,ci_hi` rows plus a final `average` row.
    /// Bounds are left empty when no interval was computed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fp_target,sensitivity,ci_lo,ci_hi\n");
        let bound = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for (i, t) in FP_TARGETS.iter().enumerate() {
            let _ = writeln!(
                out,
                "{t},{:.6},{},{}",
                self.sensitivities[i],
                bound(self.ci.as_ref().map(|c| c.lo[i])),
                bound(self.ci.as_ref().map(|c| c.hi[i]))
            );
        }
        let _ = writeln!(
            out,
            "average,{:.6},{},{}",
            self.average,
            bound(self.ci.as_ref().map(|c| c.average_lo)),
            bound(self.ci.as_ref().map(|c| c.average_hi))
        );
        out
    }
}

pub fn curve_to_csv(curve: &FrocCurve) -> String {
    let mut out = String::from("fp_per_scan,sensitivity\n");
    for p in &curve.points {
        let _ = writeln!(out, "{:.6},{:.6}", p.fp_per_scan, p.sensitivity);
    }
    out
}

#[derive(Debug, Clone)]
struct ScanScores {
    candidates: Vec<(f64, Option<usize>)>,
    n_nodules: usize,
}

/// Scored candidates grouped by scan, for point estimates and bootstrap replicates.
#[derive(Debug, Clone)]
pub struct FrocData {
    scans: Vec<ScanScores>,
}

impl FrocData {
    /// Groups `scored` under `scan_ids`. Per-scan nodule counts come from
    /// `nodules_per_scan` when given (so nodules no candidate hits still count),
    /// otherwise from the distinct nodule ids hit in that scan.
    pub fn new(
        scored: &[ScoredCandidate],
        scan_ids: &[String],
        nodules_per_scan: Option<&BTreeMap<String, usize>>,
    ) -> Result<Self> {
        let index: HashMap<&str, usize> = scan_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        if index.len() != scan_ids.len() {
            return Err(Error::invalid("scan list contains duplicates"));
        }
        let mut scans: Vec<ScanScores> = scan_ids
            .iter()
            .map(|_| ScanScores {
                candidates: Vec::new(),
                n_nodules: 0,
            })
            .collect();
        for s in scored {
            let i = *index
                .get(s.scan_id.as_str())
                .ok_or_else(|| Error::invalid(format!("candidate {} belongs to unlisted scan `{}`", s.candidate_id, s.scan_id)))?;
            scans[i].candidates.push((s.probability, s.nodule_id));
        }
        for (scan, entry) in scan_ids.iter().zip(&mut scans) {
            let hit = entry
                .candidates
                .iter()
                .filter_map(|c| c.1)
                .collect::<BTreeSet<_>>()
                .len();
            entry.n_nodules = match nodules_per_scan {
                Some(m) => m.get(scan).copied().unwrap_or(0).max(hit),
                None => hit,
            };
        }
        Ok(FrocData { scans })
    }

    pub fn n_scans(&self) -> usize {
        self.scans.len()
    }

    pub fn curve(&self) -> Result<FrocCurve> {
        let all: Vec<usize> = (0..self.scans.len()).collect();
        self.resampled_curve(&all)
    }

    /// Curve over the scans at `sample` (indices may repeat). Each repeated
    /// scan contributes its candidates and nodules again as distinct copies.
    pub fn resampled_curve(&self, sample: &[usize]) -> Result<FrocCurve> {
        let mut scored = Vec::new();
        let mut nodule_key: HashMap<(usize, usize), usize> = HashMap::new();
        let mut n_nodules = 0;
        for (slot, &s) in sample.iter().enumerate() {
            let scan = self
                .scans
                .get(s)
                .ok_or_else(|| Error::invalid(format!("scan index {s} out of range")))?;
            n_nodules += scan.n_nodules;
            for &(p, nod) in &scan.candidates {
                let nodule_id = nod.map(|n| {
                    let next = nodule_key.len();
                    *nodule_key.entry((slot, n)).or_insert(next)
                });
                scored.push(ScoredCandidate {
                    scan_id: String::new(),
                    candidate_id: scored.len(),
                    probability: p,
                    nodule_id,
                });
            }
        }
        froc_curve_with_nodules(&scored, sample.len(), n_nodules)
    }

    pub fn score(&self) -> Result<FrocScore> {
        Ok(FrocScore::from_curve(&self.curve()?))
    }
}

/// Nearest-rank percentile of sorted data, `q` in (0, 1].
fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

/// Percentile bootstrap over scans. Replicate `b` draws `n_scans` scans with
/// replacement from an RNG seeded by `seed` on stream `b`, so results do not
/// depend on scheduling. Replicates without any nodule are skipped.
pub fn bootstrap_ci(data: &FrocData, n_boot: usize, level: f64, seed: u64) -> Result<Option<ConfidenceBounds>> {
    if n_boot == 0 {
        return Err(Error::invalid("bootstrap needs at least one replicate"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level must be in (0, 1), got {level}")));
    }
    let n = data.n_scans();
    let scores: Vec<Option<FrocScore>> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let sample: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            data.resampled_curve(&sample).ok().map(|c| FrocScore::from_curve(&c))
        })
        .collect();
    let scores: Vec<FrocScore> = scores.into_iter().flatten().collect();
    if scores.is_empty() {
        return Ok(None);
    }
    let alpha = (1.0 - level) / 2.0;
    let bounds = |values: Vec<f64>| {
        let mut v = values;
        v.sort_by(f64::total_cmp);
        (nearest_rank(&v, alpha), nearest_rank(&v, 1.0 - alpha))
    };
    let mut lo = [0.0; 7];
    let mut hi = [0.0; 7];
    for i in 0..7 {
        (lo[i], hi[i]) = bounds(scores.iter().map(|s| s.sensitivities[i]).collect());
    }
    let (average_lo, average_hi) = bounds(scores.iter().map(|s| s.average).collect());
    Ok(Some(ConfidenceBounds {
        lo,
        hi,
        average_lo,
        average_hi,
        replicates: scores.len(),
    }))
}

/// Point estimate with its bootstrap interval.
pub fn score_with_ci(data: &FrocData, n_boot: usize, level: f64, seed: u64) -> Result<FrocScore> {
    let mut score = data.score()?;
    if n_boot > 0 {
        score.ci = bootstrap_ci(data, n_boot, level, seed)?;
    }
    Ok(score)
}

pub fn predictions_to_csv(preds: &[(usize, f64)]) -> String {
    let mut out = String::from("candidate_id,probability\n");
    for (id, p) in preds {
        let _ = writeln!(out, "{id},{p:.9}");
    }
    out
}

pub fn write_predictions_csv(path: impl AsRef<Path>, preds: &[(usize, f64)]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, predictions_to_csv(preds)).map_err(|e| Error::io(path, e))
}

pub fn read_predictions_csv(path: impl AsRef<Path>) -> Result<Vec<(usize, f64)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "candidate_id,probability" => {}
        _ => {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                line: 1,
                reason: "expected header `candidate_id,probability`".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Csv {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let (id, p) = line.split_once(',').ok_or_else(|| bad("expected 2 columns".into()))?;
        let id: usize = id.trim().parse().map_err(|_| bad(format!("bad candidate id `{id}`")))?;
        let p: f64 = p
            .trim()
            .parse()
            .ok()
            .filter(|p: &f64| (0.0..=1.0).contains(p))
            .ok_or_else(|| bad(format!("probability must be in [0, 1], got `{p}`")))?;
        out.push((id, p));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sc(scan: &str, id: usize, p: f64, nodule: Option<usize>) -> ScoredCandidate {
        ScoredCandidate {
            scan_id: scan.into(),
            candidate_id: id,
            probability: p,
            nodule_id: nodule,
        }
    }

    #[test]
    fn fuse_basics() {
        let a = vec![(0, 0.2), (1, 0.9)];
        assert_eq!(fuse(std::slice::from_ref(&a)).unwrap(), a);
        let f = fuse(&[vec![(7, 0.2)], vec![(7, 0.4)], vec![(7, 0.6)]]).unwrap();
        assert!((f[0].1 - 0.4).abs() < 1e-15);
        assert!(fuse(&[vec![(0, 0.1)], vec![(1, 0.1)]]).is_err());
        assert!(fuse(&[vec![(0, 0.1)], vec![(0, 0.1), (1, 0.2)]]).is_err());
        assert!(fuse(&[]).is_err());
    }

    #[test]
    fn perfect_and_inverted_classifiers() {
        let perfect = vec![
            sc("a", 0, 1.0, Some(0)),
            sc("a", 1, 1.0, Some(1)),
            sc("a", 2, 0.0, None),
            sc("b", 3, 0.0, None),
        ];
        let c = froc_curve(&perfect, 2).unwrap();
        assert_eq!(c.points[0].fp_per_scan, 0.0);
        assert_eq!(c.points[0].sensitivity, 1.0);
        assert_eq!(c.points[0].threshold, 1.0);
        let s = FrocScore::from_curve(&c);
        assert_eq!(s.sensitivities, [1.0; 7]);
        assert_eq!(s.average, 1.0);

        let inverted = vec![sc("a", 0, 0.0, Some(0)), sc("a", 1, 1.0, None), sc("a", 2, 1.0, None)];
        let c = froc_curve(&inverted, 1).unwrap();
        assert_eq!(c.points.len(), 1);
        assert_eq!((c.points[0].fp_per_scan, c.points[0].sensitivity), (2.0, 1.0));
        let s = FrocScore::from_curve(&c);
        assert_eq!(s.sensitivities, [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn hand_traced_two_scan_example() {
        let scored = vec![
            sc("s0", 0, 0.9, Some(0)),
            sc("s1", 1, 0.4, Some(1)),
            sc("s0", 2, 0.8, None),
            sc("s1", 3, 0.6, None),
            sc("s0", 4, 0.3, None),
            sc("s1", 5, 0.2, None),
        ];
        let c = froc_curve(&scored, 2).unwrap();
        let pts: Vec<(f64, f64)> = c.points.iter().map(|p| (p.fp_per_scan, p.sensitivity)).collect();
        assert_eq!(pts, vec![(0.0, 0.5), (0.5, 0.5), (1.0, 1.0), (1.5, 1.0), (2.0, 1.0)]);
    }

    #[test]
    fn interpolation_rule() {
        let curve = FrocCurve {
            points: vec![
                FrocPoint { threshold: 0.9, fp_per_scan: 0.0, sensitivity: 0.0 },
                FrocPoint { threshold: 0.1, fp_per_scan: 8.0, sensitivity: 0.8 },
            ],
            n_scans: 1,
            n_nodules: 5,
        };
        assert!((sensitivity_at(&curve, &[4.0])[0] - 0.4).abs() < 1e-15);

        let late = FrocCurve {
            points: vec![FrocPoint { threshold: 0.5, fp_per_scan: 1.0, sensitivity: 0.6 }],
            n_scans: 1,
            n_nodules: 5,
        };
        let s = sensitivity_at(&late, &[0.5, 1.0, 16.0]);
        assert_eq!(s, vec![0.0, 0.6, 0.6]);
    }

    #[test]
    fn no_nodules_is_an_error() {
        assert!(froc_curve(&[sc("a", 0, 0.5, None)], 1).is_err());
        assert!(froc_curve(&[sc("a", 0, 0.5, Some(0))], 0).is_err());
    }

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(nearest_rank(&v, 0.025), 25.0);
        assert_eq!(nearest_rank(&v, 0.975), 975.0);
        assert_eq!(nearest_rank(&[3.0], 0.025), 3.0);
    }

    #[test]
    fn single_scan_bootstrap_has_zero_width() {
        let scored = vec![sc("a", 0, 0.9, Some(0)), sc("a", 1, 0.5, None), sc("a", 2, 0.3, Some(1))];
        let data = FrocData::new(&scored, &["a".to_string()], None).unwrap();
        let ci = bootstrap_ci(&data, 200, 0.95, 4).unwrap().unwrap();
        assert_eq!(ci.lo, ci.hi);
        assert_eq!(ci.average_lo, ci.average_hi);
        assert_eq!(ci.replicates, 200);
    }

    #[test]
    fn annotation_counts_enter_the_denominator() {
        let scored = vec![sc("a", 0, 0.9, Some(0))];
        let counts: BTreeMap<String, usize> = [("a".to_string(), 2)].into();
        let data = FrocData::new(&scored, &["a".into()], Some(&counts)).unwrap();
        assert_eq!(data.curve().unwrap().points[0].sensitivity, 0.5);
        assert!(FrocData::new(&scored, &["b".into()], None).is_err());
    }

    #[test]
    fn predictions_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        let preds = vec![(0, 0.25), (5, 1.0), (9, 0.0)];
        write_predictions_csv(&p, &preds).unwrap();
        assert_eq!(read_predictions_csv(&p).unwrap(), preds);
        fs::write(&p, "candidate_id,probability\n1,1.5\n").unwrap();
        assert!(matches!(read_predictions_csv(&p), Err(Error::Csv { line: 2, .. })));
    }
}
