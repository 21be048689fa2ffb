//! Structural-bias metrics and test-split construction.
//!
//! The structural ratio r(c) compares how far a test class sits from the
//! training set versus from its own split: small values mean the class has
//! a training neighbor much closer than any test neighbor, so a model can
//! look good by exploiting taxonomy proximity alone. Splits are built in
//! two steps: a six-stage constraint filter producing a candidate pool
//! (with a survivors ledger), then a greedy-plus-swap search for a fixed-
//! size antichain maximizing the mean ratio.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::datastore::{
    select_quality_samples, DatastoreError, FeatureMatrix, QualitySet, ShallowClassifier,
};
use crate::semantics::SemanticProfile;
use crate::taxonomy::{Taxonomy, TaxonomyError};

pub const DEFAULT_SWAP_CAP: usize = 10_000;

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("`{0}` is not in the test split")]
    NotATestClass(String),
    #[error("test split needs at least two classes")]
    SingletonTestSet,
    #[error("class `{0}` is in both the training and test split")]
    OverlapViolation(String),
    #[error("class `{0}` is disconnected from the rest of the split")]
    Disconnected(String),
    #[error("candidate pool is empty after the {stage} stage")]
    EmptyPool { stage: &'static str },
    #[error("cannot build an antichain of {size} classes ({found} found)")]
    NoFeasibleAntichain { size: usize, found: usize },
    #[error("pool of {have} classes cannot fill a split of {need}")]
    PoolTooSmall { have: usize, need: usize },
    #[error("split file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("split file is missing its [{0}] section")]
    MissingSection(&'static str),
    #[error(transparent)]
    Datastore(#[from] DatastoreError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

/// Per-class breakdown behind one structural ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRatio {
    pub ratio: f64,
    pub nearest_train: u32,
    pub nearest_test: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuralReport {
    pub per_class: BTreeMap<String, ClassRatio>,
    /// Mean of the per-class ratios.
    pub ratio: f64,
}

fn min_distance_to(
    dists: &[Option<u32>],
    t: &Taxonomy,
    set: &BTreeSet<String>,
    exclude: Option<&str>,
) -> Result<Option<u32>, SplitError> {
    let mut best: Option<u32> = None;
    for id in set {
        if Some(id.as_str()) == exclude {
            continue;
        }
        let idx = t
            .index_of(id)
            .ok_or_else(|| TaxonomyError::UnknownConcept(id.clone()))?;
        if let Some(d) = dists[idx] {
            best = Some(best.map_or(d, |b| b.min(d)));
        }
    }
    Ok(best)
}

/// r(c) = min distance to any training class / min distance to any *other*
/// test class. The self-exclusion in the denominator is what keeps the
/// ratio finite.
pub fn structural_ratio(
    c: &str,
    c_tr: &BTreeSet<String>,
    c_te: &BTreeSet<String>,
    t: &Taxonomy,
) -> Result<f64, SplitError> {
    Ok(class_ratio(c, c_tr, c_te, t)?.ratio)
}

fn class_ratio(
    c: &str,
    c_tr: &BTreeSet<String>,
    c_te: &BTreeSet<String>,
    t: &Taxonomy,
) -> Result<ClassRatio, SplitError> {
    if !c_te.contains(c) {
        return Err(SplitError::NotATestClass(c.to_owned()));
    }
    if c_te.len() < 2 {
        return Err(SplitError::SingletonTestSet);
    }
    if c_tr.is_empty() {
        return Err(TaxonomyError::EmptyTrainingSet.into());
    }
    if c_tr.contains(c) {
        return Err(SplitError::OverlapViolation(c.to_owned()));
    }
    let dists = t.distances_from(c)?;
    let nearest_train = min_distance_to(&dists, t, c_tr, None)?
        .ok_or_else(|| SplitError::Disconnected(c.to_owned()))?;
    let nearest_test = min_distance_to(&dists, t, c_te, Some(c))?
        .ok_or_else(|| SplitError::Disconnected(c.to_owned()))?;
    Ok(ClassRatio {
        ratio: f64::from(nearest_train) / f64::from(nearest_test),
        nearest_train,
        nearest_test,
    })
}

/// R(C_te): the mean structural ratio, with the per-class breakdown.
pub fn structural_ratio_set(
    c_te: &BTreeSet<String>,
    c_tr: &BTreeSet<String>,
    t: &Taxonomy,
) -> Result<StructuralReport, SplitError> {
    if c_te.len() < 2 {
        return Err(SplitError::SingletonTestSet);
    }
    let mut per_class = BTreeMap::new();
    let mut sum = 0.0;
    for c in c_te {
        let cr = class_ratio(c, c_tr, c_te, t)?;
        sum += cr.ratio;
        per_class.insert(c.clone(), cr);
    }
    Ok(StructuralReport {
        ratio: sum / c_te.len() as f64,
        per_class,
    })
}

/// Constraint knobs for the candidate-pool filter. All comparisons are
/// strict: a class survives with frequency > `min_frequency`, population >
/// `min_population`, accepted quality images ≥ `per_class_samples`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolThresholds {
    pub min_frequency: u64,
    pub min_population: usize,
    pub per_class_samples: usize,
    /// Classes per quality-selection round.
    pub quality_classes: usize,
    /// Training rows per class per quality-selection round.
    pub quality_train: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRow {
    pub stage: &'static str,
    pub kept: usize,
    pub dropped: usize,
    /// Survival fraction of this stage: kept / previous kept.
    pub ratio: f64,
}

#[derive(Debug, Clone)]
pub struct PoolResult {
    pub pool: BTreeSet<String>,
    pub ledger: Vec<LedgerRow>,
    /// Outcome of the quality stage, for auditing.
    pub quality: QualitySet,
}

pub const POOL_STAGES: [&str; 6] = [
    "structural",
    "frequency",
    "semantics",
    "population",
    "quality",
    "blacklist",
];

/// Filter every non-training taxonomy concept through the six constraint
/// stages, in order: related-to-training, corpus frequency, primary
/// meaning, image population, quality acceptance, manual blacklist. Emits
/// a survivors ledger with one row per stage.
#[allow(clippy::too_many_arguments)]
pub fn build_candidate_pool(
    t: &Taxonomy,
    c_tr: &BTreeSet<String>,
    profile: &SemanticProfile,
    features: &FeatureMatrix,
    clf: &mut dyn ShallowClassifier,
    blacklist: &BTreeMap<String, String>,
    thresholds: &PoolThresholds,
    seed: u64,
) -> Result<PoolResult, SplitError> {
    if c_tr.is_empty() {
        return Err(TaxonomyError::EmptyTrainingSet.into());
    }
    // Candidates start as every concept that is not a training class.
    let mut pool: BTreeSet<String> = t
        .ids()
        .iter()
        .filter(|id| !c_tr.contains(*id))
        .cloned()
        .collect();
    let mut ledger = vec![LedgerRow {
        stage: "initial",
        kept: pool.len(),
        dropped: 0,
        ratio: 1.0,
    }];
    let drop_stage = |pool: &mut BTreeSet<String>,
                          ledger: &mut Vec<LedgerRow>,
                          stage: &'static str,
                          keep: &dyn Fn(&str) -> bool|
     -> Result<(), SplitError> {
        let before = pool.len();
        pool.retain(|c| keep(c));
        ledger.push(LedgerRow {
            stage,
            kept: pool.len(),
            dropped: before - pool.len(),
            ratio: pool.len() as f64 / before as f64,
        });
        if pool.is_empty() {
            return Err(SplitError::EmptyPool { stage });
        }
        Ok(())
    };

    // 1. Structural: nothing hierarchically related to a training class.
    let mut related: BTreeSet<usize> = BTreeSet::new();
    for c in c_tr {
        let ci = t
            .index_of(c)
            .ok_or_else(|| TaxonomyError::UnknownConcept(c.clone()))?;
        related.extend(t.ancestors_idx(ci));
        related.extend(t.descendants_idx(ci));
    }
    drop_stage(&mut pool, &mut ledger, "structural", &|c| {
        !related.contains(&t.index_of(c).expect("pool ids come from t"))
    })?;

    // 2. Corpus frequency, strict. Classes the profile skipped count as 0.
    let freq: HashMap<&str, u64> = profile
        .classes
        .iter()
        .map(|cs| (cs.class_id.as_str(), cs.frequency))
        .collect();
    drop_stage(&mut pool, &mut ledger, "frequency", &|c| {
        freq.get(c).copied().unwrap_or(0) > thresholds.min_frequency
    })?;

    // 3. Primary meaning only.
    let primary: HashMap<&str, bool> = profile
        .classes
        .iter()
        .map(|cs| (cs.class_id.as_str(), cs.primary))
        .collect();
    drop_stage(&mut pool, &mut ledger, "semantics", &|c| {
        primary.get(c).copied().unwrap_or(false)
    })?;

    // 4. Image population, strict.
    let pops = features.class_populations();
    drop_stage(&mut pool, &mut ledger, "population", &|c| {
        pops.get(c).copied().unwrap_or(0) > thresholds.min_population
    })?;

    // 5. Quality: enough rows survive the round-based accept/reject loop.
    let survivors = pool.clone();
    let restricted = features.retain_classes(&survivors)?;
    let quality = select_quality_samples(
        &restricted,
        t,
        clf,
        thresholds.quality_classes.min(survivors.len()),
        thresholds.quality_train,
        seed,
    )?;
    let accepted = quality.accepted_per_class(&restricted);
    drop_stage(&mut pool, &mut ledger, "quality", &|c| {
        accepted.get(c).copied().unwrap_or(0) >= thresholds.per_class_samples
    })?;

    // 6. Manual blacklist.
    drop_stage(&mut pool, &mut ledger, "blacklist", &|c| {
        !blacklist.contains_key(c)
    })?;

    Ok(PoolResult {
        pool,
        ledger,
        quality,
    })
}

/// A finished split: class sets plus the constraint and provenance
/// key=value blocks that went into building it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub constraints: BTreeMap<String, String>,
    pub provenance: BTreeMap<String, String>,
}

impl SplitSpec {
    pub fn save(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "[train]")?;
        for c in &self.train {
            writeln!(w, "{c}")?;
        }
        writeln!(w, "[test]")?;
        for c in &self.test {
            writeln!(w, "{c}")?;
        }
        writeln!(w, "[constraints]")?;
        for (k, v) in &self.constraints {
            writeln!(w, "{k}={v}")?;
        }
        writeln!(w, "[provenance]")?;
        for (k, v) in &self.provenance {
            writeln!(w, "{k}={v}")?;
        }
        Ok(())
    }

    pub fn load(r: impl BufRead) -> Result<Self, SplitError> {
        let mut spec = SplitSpec {
            train: BTreeSet::new(),
            test: BTreeSet::new(),
            constraints: BTreeMap::new(),
            provenance: BTreeMap::new(),
        };
        let mut section: Option<&'static str> = None;
        let mut seen: BTreeSet<&'static str> = BTreeSet::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = match name {
                    "train" => Some("train"),
                    "test" => Some("test"),
                    "constraints" => Some("constraints"),
                    "provenance" => Some("provenance"),
                    other => {
                        return Err(SplitError::Parse {
                            line: lineno + 1,
                            msg: format!("unknown section [{other}]"),
                        })
                    }
                };
                seen.insert(section.unwrap());
                continue;
            }
            match section {
                Some("train") => {
                    spec.train.insert(line.to_owned());
                }
                Some("test") => {
                    spec.test.insert(line.to_owned());
                }
                Some(sec @ ("constraints" | "provenance")) => {
                    let (k, v) = line.split_once('=').ok_or_else(|| SplitError::Parse {
                        line: lineno + 1,
                        msg: format!("expected key=value, got `{line}`"),
                    })?;
                    let map = if sec == "constraints" {
                        &mut spec.constraints
                    } else {
                        &mut spec.provenance
                    };
                    map.insert(k.trim().to_owned(), v.trim().to_owned());
                }
                _ => {
                    return Err(SplitError::Parse {
                        line: lineno + 1,
                        msg: "content before any [section]".to_owned(),
                    })
                }
            }
        }
        for required in ["train", "test"] {
            if !seen.contains(required) {
                return Err(SplitError::MissingSection(match required {
                    "train" => "train",
                    _ => "test",
                }));
            }
        }
        if let Some(both) = spec.train.intersection(&spec.test).next() {
            return Err(SplitError::OverlapViolation(both.clone()));
        }
        Ok(spec)
    }

    pub fn load_path(path: impl AsRef<std::path::Path>) -> Result<Self, SplitError> {
        Self::load(io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// One accepted local-search move.
#[derive(Debug, Clone, PartialEq)]
pub struct SwapRecord {
    pub step: usize,
    pub removed: String,
    pub added: String,
    /// R after the swap.
    pub ratio: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub spec: SplitSpec,
    pub seed_ratio: f64,
    pub final_ratio: f64,
    pub swaps: Vec<SwapRecord>,
    pub report: StructuralReport,
}

/// Distances and relatedness among pool ∪ train classes, precomputed once.
struct PoolGeometry {
    ids: Vec<String>,
    /// d(i, j) between pool classes; None when disconnected.
    dist: Vec<Vec<Option<u32>>>,
    /// nearest-training-class distance per pool class.
    to_train: Vec<u32>,
    /// ancestor closure (taxonomy node indices) per pool class.
    anc: Vec<BTreeSet<usize>>,
    /// taxonomy node index per pool class.
    node: Vec<usize>,
}

impl PoolGeometry {
    fn build(
        pool: &BTreeSet<String>,
        c_tr: &BTreeSet<String>,
        t: &Taxonomy,
    ) -> Result<Self, SplitError> {
        let ids: Vec<String> = pool.iter().cloned().collect();
        let mut dist = Vec::with_capacity(ids.len());
        let mut to_train = Vec::with_capacity(ids.len());
        let mut anc = Vec::with_capacity(ids.len());
        let mut node = Vec::with_capacity(ids.len());
        for c in &ids {
            let all = t.distances_from(c)?;
            let nt = min_distance_to(&all, t, c_tr, None)?
                .ok_or_else(|| SplitError::Disconnected(c.clone()))?;
            let row: Vec<Option<u32>> = ids
                .iter()
                .map(|other| all[t.index_of(other).expect("pool id")])
                .collect();
            dist.push(row);
            to_train.push(nt);
            let ci = t.index_of(c).expect("pool id");
            anc.push(t.ancestors_idx(ci));
            node.push(ci);
        }
        Ok(PoolGeometry {
            ids,
            dist,
            to_train,
            anc,
            node,
        })
    }

    fn related(&self, a: usize, b: usize) -> bool {
        self.anc[a].contains(&self.node[b]) || self.anc[b].contains(&self.node[a])
    }
}

/// Per-member cache over distances to the *other* members: the two
/// smallest, with the argmin of the first. Swap candidates are scored
/// incrementally from these instead of recomputing R from scratch.
#[derive(Clone, Copy)]
struct NearCache {
    min1: u32,
    arg1: usize,
    min2: u32,
}

fn build_caches(members: &[usize], geo: &PoolGeometry) -> Result<Vec<NearCache>, SplitError> {
    members
        .iter()
        .map(|&c| {
            let mut min1 = u32::MAX;
            let mut arg1 = usize::MAX;
            let mut min2 = u32::MAX;
            for &m in members {
                if m == c {
                    continue;
                }
                let d = geo.dist[c][m].ok_or_else(|| {
                    SplitError::Disconnected(geo.ids[c].clone())
                })?;
                if d < min1 || (d == min1 && m < arg1) {
                    min2 = min1;
                    min1 = d;
                    arg1 = m;
                } else if d < min2 {
                    min2 = d;
                }
            }
            Ok(NearCache { min1, arg1, min2 })
        })
        .collect()
}

/// Sum of member ratios, added in sorted-id order so the result is bit-
/// identical to what [`structural_ratio_set`] computes for the same set
/// (pool indices sort identically to pool ids).
fn ratio_sum(members: &[usize], caches: &[NearCache], geo: &PoolGeometry) -> f64 {
    let mut terms: Vec<(usize, f64)> = members
        .iter()
        .zip(caches)
        .map(|(&c, cache)| (c, f64::from(geo.to_train[c]) / f64::from(cache.min1)))
        .collect();
    terms.sort_unstable_by_key(|(c, _)| *c);
    terms.iter().map(|(_, r)| r).sum()
}

/// R of the set after swapping member `out_pos` for pool class `incoming`,
/// computed in O(|members|) from the caches.
fn swapped_ratio_sum(
    members: &[usize],
    caches: &[NearCache],
    geo: &PoolGeometry,
    out_pos: usize,
    incoming: usize,
) -> Option<f64> {
    let out = members[out_pos];
    let mut sum = 0.0;
    let mut in_min = u32::MAX;
    for (pos, (&c, cache)) in members.iter().zip(caches).enumerate() {
        if pos == out_pos {
            continue;
        }
        let d_in = geo.dist[c][incoming]?;
        let base = if cache.arg1 == out {
            cache.min2
        } else {
            cache.min1
        };
        let den = base.min(d_in);
        sum += f64::from(geo.to_train[c]) / f64::from(den);
        in_min = in_min.min(geo.dist[incoming][c]?);
    }
    sum += f64::from(geo.to_train[incoming]) / f64::from(in_min);
    Some(sum)
}

/// Pick `size` pool classes forming an antichain (among themselves; the
/// pool is already unrelated to training) that approximately maximizes
/// R: greedy seeding by descending nearest-training distance, then
/// first-improvement swaps until a local optimum or the swap cap.
pub fn optimize_split(
    pool: &BTreeSet<String>,
    c_tr: &BTreeSet<String>,
    t: &Taxonomy,
    size: usize,
    seed: u64,
    swap_cap: usize,
) -> Result<OptimizeResult, SplitError> {
    if size < 2 {
        return Err(SplitError::SingletonTestSet);
    }
    if pool.len() < size {
        return Err(SplitError::PoolTooSmall {
            have: pool.len(),
            need: size,
        });
    }
    if let Some(both) = pool.intersection(c_tr).next() {
        return Err(SplitError::OverlapViolation(both.clone()));
    }
    let geo = PoolGeometry::build(pool, c_tr, t)?;

    // Greedy seed: farthest-from-training first, ids break ties.
    let mut order: Vec<usize> = (0..geo.ids.len()).collect();
    order.sort_by(|&a, &b| {
        geo.to_train[b]
            .cmp(&geo.to_train[a])
            .then_with(|| geo.ids[a].cmp(&geo.ids[b]))
    });
    let mut members: Vec<usize> = Vec::with_capacity(size);
    for c in order {
        if members.len() == size {
            break;
        }
        if members.iter().all(|&m| !geo.related(c, m)) {
            members.push(c);
        }
    }
    if members.len() < size {
        return Err(SplitError::NoFeasibleAntichain {
            size,
            found: members.len(),
        });
    }

    let mut caches = build_caches(&members, &geo)?;
    let mut current = ratio_sum(&members, &caches, &geo);
    let seed_ratio = current / size as f64;

    let mut rng = crate::rng_from_seed(seed);
    let mut swaps: Vec<SwapRecord> = Vec::new();
    'search: while swaps.len() < swap_cap {
        let member_set: BTreeSet<usize> = members.iter().copied().collect();
        let outsiders: Vec<usize> =
            (0..geo.ids.len()).filter(|i| !member_set.contains(i)).collect();
        let mut moves: Vec<(usize, usize)> = Vec::with_capacity(members.len() * outsiders.len());
        for pos in 0..members.len() {
            for &o in &outsiders {
                moves.push((pos, o));
            }
        }
        moves.shuffle(&mut rng);
        for (pos, incoming) in moves {
            // Antichain feasibility first, then strict improvement.
            let ok = members
                .iter()
                .enumerate()
                .all(|(p, &m)| p == pos || !geo.related(incoming, m));
            if !ok {
                continue;
            }
            let Some(cand) = swapped_ratio_sum(&members, &caches, &geo, pos, incoming) else {
                continue;
            };
            if cand > current {
                // The fast estimate sums in set order; confirm the strict
                // improvement on the exact sorted-order sum before
                // committing, so the recorded trace stays monotone.
                let outgoing = members[pos];
                members[pos] = incoming;
                let new_caches = build_caches(&members, &geo)?;
                let confirmed = ratio_sum(&members, &new_caches, &geo);
                if confirmed <= current {
                    members[pos] = outgoing;
                    continue;
                }
                caches = new_caches;
                current = confirmed;
                swaps.push(SwapRecord {
                    step: swaps.len() + 1,
                    removed: geo.ids[outgoing].clone(),
                    added: geo.ids[incoming].clone(),
                    ratio: current / size as f64,
                });
                continue 'search;
            }
        }
        break; // full pass without improvement: local optimum
    }

    let test: BTreeSet<String> = members.iter().map(|&m| geo.ids[m].clone()).collect();
    let report = structural_ratio_set(&test, c_tr, t)?;
    let final_ratio = report.ratio;

    let mut constraints = BTreeMap::new();
    constraints.insert("size".to_owned(), size.to_string());
    constraints.insert("swap_cap".to_owned(), swap_cap.to_string());
    let mut provenance = BTreeMap::new();
    provenance.insert("seed".to_owned(), seed.to_string());
    provenance.insert("pool_size".to_owned(), pool.len().to_string());
    provenance.insert("seed_ratio".to_owned(), format!("{seed_ratio:.6}"));
    provenance.insert("final_ratio".to_owned(), format!("{final_ratio:.6}"));
    provenance.insert("swaps".to_owned(), swaps.len().to_string());

    Ok(OptimizeResult {
        spec: SplitSpec {
            train: c_tr.clone(),
            test,
            constraints,
            provenance,
        },
        seed_ratio,
        final_ratio,
        swaps,
        report,
    })
}

/// The three historical analysis splits, derived purely from taxonomy
/// distance to the training set: within 1 hop, within 2 hops, and every
/// non-training concept.
pub fn standard_splits(
    t: &Taxonomy,
    c_tr: &BTreeSet<String>,
) -> Result<BTreeMap<String, BTreeSet<String>>, SplitError> {
    let mut out = BTreeMap::new();
    out.insert("1-hop".to_owned(), t.hop_split(c_tr, 1)?);
    out.insert("2-hops".to_owned(), t.hop_split(c_tr, 2)?);
    let all: BTreeSet<String> = t
        .ids()
        .iter()
        .filter(|id| !c_tr.contains(*id))
        .cloned()
        .collect();
    out.insert("all".to_owned(), all);
    Ok(out)
}

pub fn write_ledger_tsv(rows: &[LedgerRow], mut w: impl Write) -> io::Result<()> {
    writeln!(w, "stage\tkept\tdropped\tratio")?;
    for r in rows {
        writeln!(w, "{}\t{}\t{}\t{:.6}", r.stage, r.kept, r.dropped, r.ratio)?;
    }
    Ok(())
}

pub fn write_trace_tsv(
    seed_ratio: f64,
    swaps: &[SwapRecord],
    mut w: impl Write,
) -> io::Result<()> {
    writeln!(w, "step\tremoved\tadded\tratio")?;
    writeln!(w, "0\t-\t-\t{seed_ratio:.6}")?;
    for s in swaps {
        writeln!(w, "{}\t{}\t{}\t{:.6}", s.step, s.removed, s.added, s.ratio)?;
    }
    Ok(())
}

pub fn write_structural_tsv(r: &StructuralReport, mut w: impl Write) -> io::Result<()> {
    writeln!(w, "class\tratio\tnearest_train\tnearest_test")?;
    for (c, cr) in &r.per_class {
        writeln!(
            w,
            "{c}\t{:.6}\t{}\t{}",
            cr.ratio, cr.nearest_train, cr.nearest_test
        )?;
    }
    writeln!(w, "#mean\t{:.6}", r.ratio)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{FeatureRow, NearestClassMean};
    use crate::semantics::ClassSemantics;

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| (*s).to_owned()).collect()
    }

    fn sibling_pairs() -> Taxonomy {
        Taxonomy::load_str(
            "wolf\tmammal\ndog\tmammal\ncanoe\tcraft\nkayak\tcraft\nmammal\troot\ncraft\troot\n",
            "",
        )
        .unwrap()
    }

    #[test]
    fn toy_split_ratio_is_exactly_half() {
        let t = sibling_pairs();
        let c_tr = set(&["wolf", "canoe"]);
        let c_te = set(&["dog", "kayak"]);
        assert_eq!(structural_ratio("dog", &c_tr, &c_te, &t).unwrap(), 0.5);
        assert_eq!(structural_ratio("kayak", &c_tr, &c_te, &t).unwrap(), 0.5);
        let report = structural_ratio_set(&c_te, &c_tr, &t).unwrap();
        assert_eq!(report.ratio, 0.5);
        assert_eq!(report.per_class["dog"].nearest_train, 2);
        assert_eq!(report.per_class["dog"].nearest_test, 4);
    }

    #[test]
    fn balanced_class_scores_one_and_preconditions_hold() {
        // train and the other test class are equidistant from `mid`.
        let t = Taxonomy::load_str("mid\thub\ntr\thub\nte\thub\n", "").unwrap();
        let c_tr = set(&["tr"]);
        let c_te = set(&["mid", "te"]);
        assert_eq!(structural_ratio("mid", &c_tr, &c_te, &t).unwrap(), 1.0);

        assert!(matches!(
            structural_ratio("tr", &c_tr, &c_te, &t).unwrap_err(),
            SplitError::NotATestClass(_)
        ));
        let singleton = set(&["mid"]);
        assert!(matches!(
            structural_ratio("mid", &c_tr, &singleton, &t).unwrap_err(),
            SplitError::SingletonTestSet
        ));
        let overlap_te = set(&["tr", "mid"]);
        assert!(matches!(
            structural_ratio("tr", &c_tr, &overlap_te, &t).unwrap_err(),
            SplitError::OverlapViolation(_)
        ));
    }

    #[test]
    fn ratio_matches_brute_force_on_random_taxonomy() {
        // Random 30-node tree, then compare against an all-pairs BFS oracle
        // built from scratch on the undirected edge list.
        use rand::Rng;
        let mut rng = crate::rng_from_seed(404);
        let n = 30;
        let mut edges = String::new();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for child in 1..n {
            let parent = rng.random_range(0..child);
            edges.push_str(&format!("n{child:02}\tn{parent:02}\n"));
            adj[child].push(parent);
            adj[parent].push(child);
        }
        let t = Taxonomy::load_str(&edges, "").unwrap();
        let bfs = |from: usize| -> Vec<Option<u32>> {
            let mut dist = vec![None; n];
            dist[from] = Some(0u32);
            let mut q = std::collections::VecDeque::from([from]);
            while let Some(u) = q.pop_front() {
                for &v in &adj[u] {
                    if dist[v].is_none() {
                        dist[v] = Some(dist[u].unwrap() + 1);
                        q.push_back(v);
                    }
                }
            }
            dist
        };
        let c_tr = set(&["n03", "n11", "n17", "n22", "n28"]);
        let c_te = set(&["n05", "n09", "n13", "n19", "n25", "n29"]);
        for c in &c_te {
            let ci: usize = c[1..].parse().unwrap();
            let dist = bfs(ci);
            let num = c_tr
                .iter()
                .map(|x| dist[x[1..].parse::<usize>().unwrap()].unwrap())
                .min()
                .unwrap();
            let den = c_te
                .iter()
                .filter(|x| *x != c)
                .map(|x| dist[x[1..].parse::<usize>().unwrap()].unwrap())
                .min()
                .unwrap();
            let expect = f64::from(num) / f64::from(den);
            assert_eq!(structural_ratio(c, &c_tr, &c_te, &t).unwrap(), expect);
        }
    }

    /// Taxonomy: training class `tr` under scaffold `v1`, with candidate
    /// leaves and one planted violator per pool stage, all under `v1`.
    fn planted_pool_inputs() -> (Taxonomy, BTreeSet<String>, SemanticProfile, FeatureMatrix) {
        let mut edges = String::from("tr\tv1\n");
        for c in ["c1", "c2", "c3", "c4", "c5", "v2", "v3", "v4", "v5", "v6"] {
            edges.push_str(&format!("{c}\tv1\n"));
        }
        let t = Taxonomy::load_str(&edges, "").unwrap();
        let c_tr = set(&["tr"]);

        let mut classes = Vec::new();
        for (id, freq, primary) in [
            ("c1", 600, true),
            ("c2", 600, true),
            ("c3", 600, true),
            ("c4", 600, true),
            ("c5", 600, true),
            ("v2", 400, true),  // fails frequency
            ("v3", 600, false), // fails primary-meaning
            ("v4", 600, true),  // fails population
            ("v5", 600, true),  // fails quality
            ("v6", 600, true),  // fails blacklist
        ] {
            classes.push(ClassSemantics {
                class_id: id.to_owned(),
                embedding: vec![1.0, 0.0],
                frequency: freq,
                primary,
            });
        }
        let profile = SemanticProfile {
            classes,
            skipped: vec![],
            unresolved_words: vec![],
        };

        // Distinct far-apart single-point blobs; v5 sits exactly on c1 so
        // nearest-class-mean ties resolve to c1 and reject all of v5.
        let mut rows = Vec::new();
        let coord = |c: &str| -> f32 {
            match c {
                "c1" => 0.0,
                "c2" => 10.0,
                "c3" => 20.0,
                "c4" => 30.0,
                "c5" => 40.0,
                "v4" => 50.0,
                "v5" => 0.0,
                "v6" => 60.0,
                _ => unreachable!(),
            }
        };
        for c in ["c1", "c2", "c3", "c4", "c5", "v5", "v6"] {
            for i in 0..7 {
                rows.push(FeatureRow {
                    image_id: format!("{c}_{i}"),
                    class_id: c.to_owned(),
                    feature: vec![coord(c)],
                });
            }
        }
        for i in 0..3 {
            rows.push(FeatureRow {
                image_id: format!("v4_{i}"),
                class_id: "v4".to_owned(),
                feature: vec![coord("v4")],
            });
        }
        (t, c_tr, profile, FeatureMatrix::new(rows).unwrap())
    }

    #[test]
    fn pool_ledger_attributes_one_drop_per_stage() {
        let (t, c_tr, profile, features) = planted_pool_inputs();
        let blacklist: BTreeMap<String, String> =
            [("v6".to_owned(), "manually excluded".to_owned())].into();
        let thresholds = PoolThresholds {
            min_frequency: 500,
            min_population: 3,
            per_class_samples: 5,
            quality_classes: 7,
            quality_train: 2,
        };
        let mut clf = NearestClassMean::default();
        let result = build_candidate_pool(
            &t, &c_tr, &profile, &features, &mut clf, &blacklist, &thresholds, 77,
        )
        .unwrap();
        assert_eq!(result.pool, set(&["c1", "c2", "c3", "c4", "c5"]));
        assert_eq!(result.ledger.len(), 7, "initial row + six stages");
        assert_eq!(result.ledger[0].stage, "initial");
        assert_eq!(result.ledger[0].kept, 11);
        let drops: Vec<usize> = result.ledger[1..].iter().map(|r| r.dropped).collect();
        assert_eq!(drops, [1, 1, 1, 1, 1, 1]);
        for (i, row) in result.ledger.iter().enumerate().skip(1) {
            assert_eq!(
                row.kept,
                result.ledger[i - 1].kept - row.dropped,
                "ledger must reconcile at stage {}",
                row.stage
            );
            assert_eq!(row.stage, POOL_STAGES[i - 1]);
        }
    }

    #[test]
    fn pool_determinism_and_empty_pool_error() {
        let (t, c_tr, profile, features) = planted_pool_inputs();
        let blacklist = BTreeMap::new();
        let thresholds = PoolThresholds {
            min_frequency: 500,
            min_population: 3,
            per_class_samples: 5,
            quality_classes: 7,
            quality_train: 2,
        };
        let a = build_candidate_pool(
            &t,
            &c_tr,
            &profile,
            &features,
            &mut NearestClassMean::default(),
            &blacklist,
            &thresholds,
            1,
        )
        .unwrap();
        let b = build_candidate_pool(
            &t,
            &c_tr,
            &profile,
            &features,
            &mut NearestClassMean::default(),
            &blacklist,
            &thresholds,
            1,
        )
        .unwrap();
        assert_eq!(a.pool, b.pool);
        assert_eq!(a.ledger, b.ledger);

        let strict = PoolThresholds {
            min_frequency: 10_000,
            ..thresholds
        };
        assert!(matches!(
            build_candidate_pool(
                &t,
                &c_tr,
                &profile,
                &features,
                &mut NearestClassMean::default(),
                &blacklist,
                &strict,
                1,
            )
            .unwrap_err(),
            SplitError::EmptyPool { stage: "frequency" }
        ));
    }

    /// Arms of different lengths hanging off a shared root; training
    /// classes terminate two arms, pool classes sit at varied depths.
    fn armed_taxonomy() -> (Taxonomy, BTreeSet<String>, BTreeSet<String>) {
        let mut edges = String::new();
        // Training arm: tr_a - tr_mid - root; tr_b - root.
        edges.push_str("tr_a\ttr_mid\ntr_mid\troot\ntr_b\troot\n");
        // Twelve pool leaves at depth 1..=3 on their own arms.
        let mut pool = BTreeSet::new();
        for i in 0..12 {
            let depth = 1 + (i % 3);
            let mut parent = "root".to_owned();
            for d in 0..depth {
                let node = if d == depth - 1 {
                    format!("p{i:02}")
                } else {
                    format!("a{i:02}_{d}")
                };
                edges.push_str(&format!("{node}\t{parent}\n"));
                parent = node;
            }
            pool.insert(format!("p{i:02}"));
        }
        (
            Taxonomy::load_str(&edges, "").unwrap(),
            set(&["tr_a", "tr_b"]),
            pool,
        )
    }

    #[test]
    fn optimizer_matches_exhaustive_enumeration() {
        let (t, c_tr, pool) = armed_taxonomy();
        assert_eq!(pool.len(), 12);
        let size = 4;
        let result = optimize_split(&pool, &c_tr, &t, size, 123, DEFAULT_SWAP_CAP).unwrap();

        // Brute force over all C(12,4) = 495 subsets (every subset is an
        // antichain here: all pool classes are leaves of distinct arms).
        let ids: Vec<String> = pool.iter().cloned().collect();
        let mut best = f64::MIN;
        let mut checked = 0;
        for a in 0..ids.len() {
            for b in a + 1..ids.len() {
                for c in b + 1..ids.len() {
                    for d in c + 1..ids.len() {
                        let cand: BTreeSet<String> = [
                            ids[a].clone(),
                            ids[b].clone(),
                            ids[c].clone(),
                            ids[d].clone(),
                        ]
                        .into();
                        let r = structural_ratio_set(&cand, &c_tr, &t).unwrap().ratio;
                        best = best.max(r);
                        checked += 1;
                    }
                }
            }
        }
        assert_eq!(checked, 495);
        assert_eq!(
            result.final_ratio, best,
            "local search must find the enumerated optimum on this pool"
        );
        // Output invariants.
        assert_eq!(result.spec.test.len(), size);
        assert!(result.spec.test.is_subset(&pool));
        assert!(result.spec.test.is_disjoint(&c_tr));
        assert!(t
            .antichain_violations(&result.spec.test)
            .unwrap()
            .is_empty());
        // Monotone accepted-swap trace.
        let mut last = result.seed_ratio;
        for s in &result.swaps {
            assert!(s.ratio >= last);
            last = s.ratio;
        }
        assert_eq!(result.final_ratio, last);
    }

    #[test]
    fn optimizer_beats_random_feasible_splits() {
        let (t, c_tr, pool) = armed_taxonomy();
        let result = optimize_split(&pool, &c_tr, &t, 5, 9, DEFAULT_SWAP_CAP).unwrap();
        let ids: Vec<String> = pool.iter().cloned().collect();
        let mut rng = crate::rng_from_seed(5150);
        for _ in 0..20 {
            let picked = rand::seq::index::sample(&mut rng, ids.len(), 5);
            let cand: BTreeSet<String> = picked.iter().map(|i| ids[i].clone()).collect();
            let r = structural_ratio_set(&cand, &c_tr, &t).unwrap().ratio;
            assert!(result.final_ratio >= r);
        }
    }

    #[test]
    fn forced_pool_returns_whole_pool_and_errors_are_reported() {
        let (t, c_tr, pool) = armed_taxonomy();
        let four: BTreeSet<String> = pool.iter().take(4).cloned().collect();
        let result = optimize_split(&four, &c_tr, &t, 4, 0, DEFAULT_SWAP_CAP).unwrap();
        assert_eq!(result.spec.test, four);
        assert!(result.swaps.is_empty());

        assert!(matches!(
            optimize_split(&four, &c_tr, &t, 5, 0, DEFAULT_SWAP_CAP).unwrap_err(),
            SplitError::PoolTooSmall { have: 4, need: 5 }
        ));

        // A pool that is one long chain has no 3-antichain.
        let chain = Taxonomy::load_str("x3\tx2\nx2\tx1\nx1\tx0\nx0\ttr0\n", "").unwrap();
        let chain_pool = set(&["x1", "x2", "x3"]);
        let chain_tr = set(&["tr0"]);
        assert!(matches!(
            optimize_split(&chain_pool, &chain_tr, &chain, 3, 0, DEFAULT_SWAP_CAP).unwrap_err(),
            SplitError::NoFeasibleAntichain { size: 3, .. }
        ));
    }

    #[test]
    fn optimizer_is_deterministic() {
        let (t, c_tr, pool) = armed_taxonomy();
        let a = optimize_split(&pool, &c_tr, &t, 4, 31, DEFAULT_SWAP_CAP).unwrap();
        let b = optimize_split(&pool, &c_tr, &t, 4, 31, DEFAULT_SWAP_CAP).unwrap();
        assert_eq!(a.spec, b.spec);
        assert_eq!(a.swaps, b.swaps);
    }

    #[test]
    fn split_spec_round_trips_and_validates() {
        let spec = SplitSpec {
            train: set(&["wolf", "canoe"]),
            test: set(&["dog", "kayak"]),
            constraints: [("size".to_owned(), "2".to_owned())].into(),
            provenance: [("seed".to_owned(), "7".to_owned())].into(),
        };
        let mut buf = Vec::new();
        spec.save(&mut buf).unwrap();
        let loaded = SplitSpec::load(buf.as_slice()).unwrap();
        assert_eq!(spec, loaded);

        let overlap = "[train]\na\n[test]\na\n";
        assert!(matches!(
            SplitSpec::load(overlap.as_bytes()).unwrap_err(),
            SplitError::OverlapViolation(_)
        ));
        let missing = "[train]\na\n";
        assert!(matches!(
            SplitSpec::load(missing.as_bytes()).unwrap_err(),
            SplitError::MissingSection("test")
        ));
        let unknown = "[мusic]\n";
        assert!(SplitSpec::load(unknown.as_bytes()).is_err());
        let stray = "loose_line\n[train]\na\n[test]\nb\n";
        assert!(matches!(
            SplitSpec::load(stray.as_bytes()).unwrap_err(),
            SplitError::Parse { line: 1, .. }
        ));
    }

    #[test]
    fn standard_splits_on_a_chain() {
        let t = Taxonomy::load_str("b\ta\nc\tb\nd\tc\ne\td\n", "").unwrap();
        let c_tr = set(&["a"]);
        let splits = standard_splits(&t, &c_tr).unwrap();
        assert_eq!(splits["1-hop"], set(&["b"]));
        assert_eq!(splits["2-hops"], set(&["b", "c"]));
        assert_eq!(splits["all"], set(&["b", "c", "d", "e"]));
    }

    #[test]
    fn writers_emit_stable_tables() {
        let rows = vec![
            LedgerRow {
                stage: "initial",
                kept: 10,
                dropped: 0,
                ratio: 1.0,
            },
            LedgerRow {
                stage: "frequency",
                kept: 8,
                dropped: 2,
                ratio: 0.8,
            },
        ];
        let mut buf = Vec::new();
        write_ledger_tsv(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "stage\tkept\tdropped\tratio\ninitial\t10\t0\t1.000000\nfrequency\t8\t2\t0.800000\n"
        );

        let swaps = vec![SwapRecord {
            step: 1,
            removed: "p00".into(),
            added: "p07".into(),
            ratio: 0.75,
        }];
        let mut tbuf = Vec::new();
        write_trace_tsv(0.5, &swaps, &mut tbuf).unwrap();
        assert_eq!(
            String::from_utf8(tbuf).unwrap(),
            "step\tremoved\tadded\tratio\n0\t-\t-\t0.500000\n1\tp00\tp07\t0.750000\n"
        );
    }
}
