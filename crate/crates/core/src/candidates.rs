//! Candidate merging, candidate-to-nodule association and scan-level folds.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volio::{AnnotationRecord, CandidateRecord};

/// Anything placed at a world position inside one scan.
pub trait Located {
    fn id(&self) -> usize;
    fn scan_id(&self) -> &str;
    fn world(&self) -> [f64; 3];
}

impl Located for CandidateRecord {
    fn id(&self) -> usize {
        self.id
    }
    fn scan_id(&self) -> &str {
        &self.scan_id
    }
    fn world(&self) -> [f64; 3] {
        self.world
    }
}

/// A cluster of source candidates lying within the merge radius of each other.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedCandidate {
    /// Position in the merged list; equals the id assigned when the list is
    /// written out and read back as a candidate CSV.
    pub id: usize,
    pub scan_id: String,
    pub world: [f64; 3],
    pub label: u8,
    /// Source candidate ids, ascending.
    pub members: Vec<usize>,
}

impl Located for MergedCandidate {
    fn id(&self) -> usize {
        self.id
    }
    fn scan_id(&self) -> &str {
        &self.scan_id
    }
    fn world(&self) -> [f64; 3] {
        self.world
    }
}

pub fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Merges same-scan candidates connected by links of length `<= radius_mm`.
///
/// Components are closed transitively. A merged candidate sits at the centroid
/// of its members and is a nodule if any member is. Output is ordered by scan
/// id, then by smallest member id. A radius of zero disables merging.
pub fn merge_candidates(records: &[CandidateRecord], radius_mm: f64) -> Result<Vec<MergedCandidate>> {
    if radius_mm.is_nan() || radius_mm < 0.0 {
        return Err(Error::invalid(format!("merge radius must be >= 0, got {radius_mm}")));
    }
    let mut by_scan: BTreeMap<&str, Vec<&CandidateRecord>> = BTreeMap::new();
    for r in records {
        by_scan.entry(r.scan_id.as_str()).or_default().push(r);
    }

    let mut merged = Vec::new();
    for (scan, mut recs) in by_scan {
        recs.sort_by_key(|r| r.id);
        let n = recs.len();
        let mut sets = DisjointSet::new(n);
        if radius_mm > 0.0 {
            for a in 0..n {
                for b in a + 1..n {
                    if distance(recs[a].world, recs[b].world) <= radius_mm {
                        sets.union(a, b);
                    }
                }
            }
        }
        // Roots are the smallest index of each component, so iterating roots
        // in index order yields min-member-id order.
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..n {
            let root = sets.find(i);
            groups.entry(root).or_default().push(i);
        }
        for members in groups.into_values() {
            let k = members.len() as f64;
            let mut sum = [0.0; 3];
            for &m in &members {
                for (s, w) in sum.iter_mut().zip(recs[m].world) {
                    *s += w;
                }
            }
            merged.push(MergedCandidate {
                id: 0,
                scan_id: scan.to_string(),
                world: sum.map(|s| s / k),
                label: members.iter().map(|&m| recs[m].label).max().unwrap_or(0),
                members: members.iter().map(|&m| recs[m].id).collect(),
            });
        }
    }
    for (i, m) in merged.iter_mut().enumerate() {
        m.id = i;
    }
    Ok(merged)
}

/// Candidate id to the nodule it hits, if any.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Association {
    pub map: BTreeMap<usize, Option<usize>>,
}

impl Association {
    pub fn nodule_of(&self, candidate_id: usize) -> Option<usize> {
        self.map.get(&candidate_id).copied().flatten()
    }
}

/// Maps each candidate to the nearest same-scan nodule whose center lies
/// within half its diameter of the candidate; ties go to the smaller nodule id.
pub fn associate<C: Located>(candidates: &[C], annotations: &[AnnotationRecord]) -> Association {
    let mut by_scan: BTreeMap<&str, Vec<&AnnotationRecord>> = BTreeMap::new();
    for a in annotations {
        by_scan.entry(a.scan_id.as_str()).or_default().push(a);
    }
    let mut map = BTreeMap::new();
    for c in candidates {
        let mut best: Option<(f64, usize)> = None;
        if let Some(nodules) = by_scan.get(c.scan_id()) {
            for a in nodules {
                let d = distance(c.world(), a.world);
                if d > a.diameter / 2.0 {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bd, bid)) => d < bd || (d == bd && a.nodule_id < bid),
                };
                if better {
                    best = Some((d, a.nodule_id));
                }
            }
        }
        map.insert(c.id(), best.map(|(_, id)| id));
    }
    Association { map }
}

/// Scan id to cross-validation fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, scan_id: &str) -> Option<usize> {
        self.folds.get(scan_id).copied()
    }

    pub fn scans_in(&self, fold: usize) -> Vec<&str> {
        self.folds
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seriesuid,fold\n");
        for (s, f) in &self.folds {
            out.push_str(&format!("{s},{f}\n"));
        }
        out
    }

    pub fn from_csv(path: &std::path::Path, text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "seriesuid,fold" => {}
            _ => {
                return Err(Error::Csv {
                    path: path.to_path_buf(),
                    line: 1,
                    reason: "expected header `seriesuid,fold`".into(),
                })
            }
        }
        let mut folds = BTreeMap::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: &str| Error::Csv {
                path: path.to_path_buf(),
                line: i + 1,
                reason: reason.to_string(),
            };
            let (scan, fold) = line.split_once(',').ok_or_else(|| bad("expected 2 columns"))?;
            let fold: usize = fold.trim().parse().map_err(|_| bad("fold must be an integer"))?;
            folds.insert(scan.trim().to_string(), fold);
        }
        let k = folds.values().max().map_or(0, |m| m + 1);
        Ok(FoldAssignment { k, folds })
    }
}

/// Shuffles the scans with a seeded RNG and deals them round-robin into `k` folds.
pub fn split_folds(scan_ids: &[String], k: usize, seed: u64) -> Result<FoldAssignment> {
    let mut scans: Vec<&String> = scan_ids.iter().collect::<HashSet<_>>().into_iter().collect();
    scans.sort();
    if k < 2 || k > scans.len() {
        return Err(Error::invalid(format!(
            "fold count must be in [2, {}], got {k}",
            scans.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scans.shuffle(&mut rng);
    let folds = scans
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i % k))
        .collect();
    Ok(FoldAssignment { k, folds })
}
