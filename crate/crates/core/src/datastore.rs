//! Per-image visual features and the sample-quality selection loop.
//!
//! Features load from either a TSV (`image_id\tclass_id\tv1,...,vD`) or the
//! ZSBF binary container; `load_features` sniffs which. Quality filtering
//! re-implements the round-based accept/reject procedure: each round picks
//! a hierarchically unrelated class sample, trains a shallow classifier on
//! a few rows per class, and routes every so-far-unevaluated held-out row
//! to `accepted` iff the classifier gets it right.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::rng_from_seed;
use crate::taxonomy::{Taxonomy, TaxonomyError};

const ZSBF_MAGIC: &[u8; 4] = b"ZSBF";
const ZSBF_VERSION: u16 = 1;
/// Hard stop for the selection loop; hit only by adversarial classifiers
/// that keep dodging unevaluated rows.
const MAX_ROUNDS: usize = 10_000;

#[derive(Debug, Error)]
pub enum DatastoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate image id `{0}`")]
    DuplicateImage(String),
    #[error("row `{image}` has {got} values, expected {expected}")]
    DimensionMismatch {
        image: String,
        expected: usize,
        got: usize,
    },
    #[error("feature matrix has no rows")]
    EmptyMatrix,
    #[error("not a feature file (bad magic)")]
    BadMagic,
    #[error("unsupported feature file version {0}")]
    UnsupportedVersion(u16),
    #[error("file ends mid-record")]
    Truncated,
    #[error("class `{0}` has no rows in the matrix")]
    UnknownClass(String),
    #[error("class `{class}` has {have} rows, need more than {need}")]
    ClassTooSmall {
        class: String,
        have: usize,
        need: usize,
    },
    #[error("class `{class}` has {have} rows, need at least {need}")]
    InsufficientRows {
        class: String,
        have: usize,
        need: usize,
    },
    #[error("{have} candidate classes but {need} requested per round")]
    PoolTooSmall { have: usize, need: usize },
    #[error("classifier used before fit")]
    NotFitted,
    #[error("selection did not converge after {0} rounds")]
    NoConvergence(usize),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub image_id: String,
    pub class_id: String,
    pub feature: Vec<f32>,
}

/// Validated feature matrix: uniform dimension, unique image ids.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    dim: usize,
    rows: Vec<FeatureRow>,
    by_class: BTreeMap<String, Vec<usize>>,
    by_image: HashMap<String, usize>,
}

impl FeatureMatrix {
    pub fn new(rows: Vec<FeatureRow>) -> Result<Self, DatastoreError> {
        let Some(first) = rows.first() else {
            return Err(DatastoreError::EmptyMatrix);
        };
        let dim = first.feature.len();
        let mut by_class: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut by_image = HashMap::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            if r.feature.len() != dim {
                return Err(DatastoreError::DimensionMismatch {
                    image: r.image_id.clone(),
                    expected: dim,
                    got: r.feature.len(),
                });
            }
            if by_image.insert(r.image_id.clone(), i).is_some() {
                return Err(DatastoreError::DuplicateImage(r.image_id.clone()));
            }
            by_class.entry(r.class_id.clone()).or_default().push(i);
        }
        Ok(FeatureMatrix {
            dim,
            rows,
            by_class,
            by_image,
        })
    }

    /// Sniff text vs. binary by magic and load accordingly.
    pub fn load_path(path: impl AsRef<Path>) -> Result<Self, DatastoreError> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        let got = read_up_to(&mut f, &mut magic)?;
        use std::io::Seek;
        f.seek(std::io::SeekFrom::Start(0))?;
        if got == 4 && &magic == ZSBF_MAGIC {
            Self::load_binary(BufReader::new(f))
        } else {
            Self::load_text(BufReader::new(f))
        }
    }

    pub fn load_text(reader: impl BufRead) -> Result<Self, DatastoreError> {
        let mut rows = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let (Some(image_id), Some(class_id), Some(vals)) =
                (parts.next(), parts.next(), parts.next())
            else {
                return Err(DatastoreError::Parse {
                    line: lineno + 1,
                    msg: "expected `image_id\\tclass_id\\tv1,...`".into(),
                });
            };
            let mut feature = Vec::new();
            for v in vals.split(',') {
                let x: f32 = v.trim().parse().map_err(|_| DatastoreError::Parse {
                    line: lineno + 1,
                    msg: format!("bad float `{v}`"),
                })?;
                feature.push(x);
            }
            rows.push(FeatureRow {
                image_id: image_id.to_owned(),
                class_id: class_id.to_owned(),
                feature,
            });
        }
        Self::new(rows)
    }

    pub fn load_binary(mut reader: impl Read) -> Result<Self, DatastoreError> {
        let mut magic = [0u8; 4];
        reader.read_exact(&mut magic).map_err(eof_as_truncated)?;
        if &magic != ZSBF_MAGIC {
            return Err(DatastoreError::BadMagic);
        }
        let version = read_u16(&mut reader)?;
        if version != ZSBF_VERSION {
            return Err(DatastoreError::UnsupportedVersion(version));
        }
        let n = read_u64(&mut reader)? as usize;
        let dim = read_u32(&mut reader)? as usize;
        let mut rows = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let image_id = read_string(&mut reader)?;
            let class_id = read_string(&mut reader)?;
            let mut feature = vec![0f32; dim];
            let mut buf = vec![0u8; dim * 4];
            reader.read_exact(&mut buf).map_err(eof_as_truncated)?;
            for (i, chunk) in buf.chunks_exact(4).enumerate() {
                feature[i] = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            rows.push(FeatureRow {
                image_id,
                class_id,
                feature,
            });
        }
        Self::new(rows)
    }

    pub fn save_text(&self, mut w: impl Write) -> std::io::Result<()> {
        for r in &self.rows {
            write!(w, "{}\t{}\t", r.image_id, r.class_id)?;
            for (i, x) in r.feature.iter().enumerate() {
                if i > 0 {
                    w.write_all(b",")?;
                }
                write!(w, "{x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save_binary(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(ZSBF_MAGIC)?;
        w.write_all(&ZSBF_VERSION.to_le_bytes())?;
        w.write_all(&(self.rows.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for r in &self.rows {
            w.write_all(&(r.image_id.len() as u32).to_le_bytes())?;
            w.write_all(r.image_id.as_bytes())?;
            w.write_all(&(r.class_id.len() as u32).to_le_bytes())?;
            w.write_all(r.class_id.as_bytes())?;
            for x in &r.feature {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[FeatureRow] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &FeatureRow {
        &self.rows[i]
    }

    pub fn row_by_image(&self, image_id: &str) -> Option<&FeatureRow> {
        self.by_image.get(image_id).map(|&i| &self.rows[i])
    }

    /// Class ids present in the matrix, sorted.
    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.by_class.keys().map(String::as_str)
    }

    /// Row indices of one class, in file order.
    pub fn class_rows(&self, class_id: &str) -> &[usize] {
        self.by_class
            .get(class_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn class_populations(&self) -> BTreeMap<String, usize> {
        self.by_class
            .iter()
            .map(|(c, v)| (c.clone(), v.len()))
            .collect()
    }

    /// Classes in the matrix that the taxonomy does not know, sorted.
    pub fn unknown_classes(&self, t: &Taxonomy) -> Vec<String> {
        self.by_class
            .keys()
            .filter(|c| !t.contains(c))
            .cloned()
            .collect()
    }

    /// New matrix with only the rows of `keep` classes, original order.
    pub fn retain_classes(&self, keep: &BTreeSet<String>) -> Result<Self, DatastoreError> {
        Self::new(
            self.rows
                .iter()
                .filter(|r| keep.contains(&r.class_id))
                .cloned()
                .collect(),
        )
    }

    /// New matrix with only the named images, original order.
    pub fn retain_images(&self, keep: &BTreeSet<String>) -> Result<Self, DatastoreError> {
        Self::new(
            self.rows
                .iter()
                .filter(|r| keep.contains(&r.image_id))
                .cloned()
                .collect(),
        )
    }
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut total = 0;
    while total < buf.len() {
        let n = r.read(&mut buf[total..])?;
        if n == 0 {
            break;
        }
        total += n;
    }
    Ok(total)
}

fn eof_as_truncated(e: std::io::Error) -> DatastoreError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        DatastoreError::Truncated
    } else {
        DatastoreError::Io(e)
    }
}

fn read_u16(r: &mut impl Read) -> Result<u16, DatastoreError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b).map_err(eof_as_truncated)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32, DatastoreError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(eof_as_truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, DatastoreError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(eof_as_truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> Result<String, DatastoreError> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).map_err(eof_as_truncated)?;
    String::from_utf8(b).map_err(|_| DatastoreError::Parse {
        line: 0,
        msg: "invalid UTF-8 in binary string".into(),
    })
}

/// Classes whose row count is strictly greater than `threshold`.
pub fn population_filter(m: &FeatureMatrix, threshold: usize) -> BTreeSet<String> {
    m.class_populations()
        .into_iter()
        .filter(|(_, n)| *n > threshold)
        .map(|(c, _)| c)
        .collect()
}

/// Pluggable shallow classifier used by the quality-selection loop.
/// Implementations must be deterministic and predict only classes seen in
/// `fit`; test doubles may bend the latter to script outcomes.
pub trait ShallowClassifier {
    fn fit(&mut self, rows: &[&FeatureRow]) -> Result<(), DatastoreError>;
    fn predict(&self, feature: &[f32]) -> Result<&str, DatastoreError>;
}

/// Reference implementation: nearest class mean under squared Euclidean
/// distance, ties to the smallest class id.
#[derive(Debug, Default, Clone)]
pub struct NearestClassMean {
    means: Vec<(String, Vec<f64>)>,
}

impl ShallowClassifier for NearestClassMean {
    fn fit(&mut self, rows: &[&FeatureRow]) -> Result<(), DatastoreError> {
        let mut acc: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
        for r in rows {
            let e = acc
                .entry(&r.class_id)
                .or_insert_with(|| (vec![0.0; r.feature.len()], 0));
            if e.0.len() != r.feature.len() {
                return Err(DatastoreError::DimensionMismatch {
                    image: r.image_id.clone(),
                    expected: e.0.len(),
                    got: r.feature.len(),
                });
            }
            for (s, x) in e.0.iter_mut().zip(&r.feature) {
                *s += f64::from(*x);
            }
            e.1 += 1;
        }
        self.means = acc
            .into_iter()
            .map(|(c, (sum, n))| {
                (
                    c.to_owned(),
                    sum.into_iter().map(|s| s / n as f64).collect(),
                )
            })
            .collect();
        Ok(())
    }

    fn predict(&self, feature: &[f32]) -> Result<&str, DatastoreError> {
        if self.means.is_empty() {
            return Err(DatastoreError::NotFitted);
        }
        let mut best: Option<(f64, &str)> = None;
        for (class, mean) in &self.means {
            let d: f64 = mean
                .iter()
                .zip(feature)
                .map(|(m, x)| (m - f64::from(*x)).powi(2))
                .sum();
            // Strict < keeps the first (smallest id) on ties.
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, class));
            }
        }
        Ok(best.unwrap().1)
    }
}

/// One selection round: which classes were sampled and which rows trained
/// the classifier. Enough to replay the round from the raw matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundRecord {
    pub classes: Vec<String>,
    pub train_images: Vec<String>,
}

/// Outcome of the quality-selection loop over every row of the candidate
/// classes: a partition into accepted/rejected plus per-image provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QualitySet {
    pub accepted: BTreeSet<String>,
    pub rejected: BTreeSet<String>,
    /// image-id -> 1-based round in which it was evaluated.
    pub round_of: BTreeMap<String, usize>,
    pub rounds: Vec<RoundRecord>,
}

impl QualitySet {
    pub fn accepted_per_class(&self, m: &FeatureMatrix) -> BTreeMap<String, usize> {
        let mut out: BTreeMap<String, usize> = BTreeMap::new();
        for id in &self.accepted {
            if let Some(r) = m.row_by_image(id) {
                *out.entry(r.class_id.clone()).or_insert(0) += 1;
            }
        }
        out
    }
}

/// Round-based accept/reject filtering of every row in `m`.
///
/// Each round: sample up to `n_classes` still-unfinished classes forming an
/// antichain in `t` (greedy over a seeded shuffle), draw `n_train` training
/// rows per sampled class, fit `clf`, and route each held-out not-yet-
/// evaluated row to accepted iff the prediction matches its class. Loops
/// until every row has been evaluated exactly once. Deterministic given
/// `seed`.
pub fn select_quality_samples(
    m: &FeatureMatrix,
    t: &Taxonomy,
    clf: &mut dyn ShallowClassifier,
    n_classes: usize,
    n_train: usize,
    seed: u64,
) -> Result<QualitySet, DatastoreError> {
    let classes: Vec<String> = m.classes().map(str::to_owned).collect();
    if classes.len() < n_classes {
        return Err(DatastoreError::PoolTooSmall {
            have: classes.len(),
            need: n_classes,
        });
    }
    for (class, pop) in m.class_populations() {
        if pop <= n_train {
            return Err(DatastoreError::ClassTooSmall {
                class,
                have: pop,
                need: n_train,
            });
        }
    }
    // Relatedness between candidate classes, via full ancestor closures.
    let mut anc: HashMap<&str, BTreeSet<usize>> = HashMap::new();
    for c in &classes {
        let ci = t
            .index_of(c)
            .ok_or_else(|| TaxonomyError::UnknownConcept(c.clone()))?;
        anc.insert(c, t.ancestors_idx(ci));
    }
    let related = |a: &str, b: &str| -> bool {
        let (ai, bi) = (t.index_of(a).unwrap(), t.index_of(b).unwrap());
        anc[a].contains(&bi) || anc[b].contains(&ai)
    };

    let mut unrouted: BTreeMap<&str, BTreeSet<usize>> = classes
        .iter()
        .map(|c| (c.as_str(), m.class_rows(c).iter().copied().collect()))
        .collect();
    let mut rng = rng_from_seed(seed);
    let mut out = QualitySet {
        accepted: BTreeSet::new(),
        rejected: BTreeSet::new(),
        round_of: BTreeMap::new(),
        rounds: Vec::new(),
    };

    for round in 1.. {
        let active: Vec<&str> = unrouted
            .iter()
            .filter(|(_, rows)| !rows.is_empty())
            .map(|(c, _)| *c)
            .collect();
        if active.is_empty() {
            break;
        }
        if round > MAX_ROUNDS {
            return Err(DatastoreError::NoConvergence(MAX_ROUNDS));
        }
        let target = n_classes.min(active.len());
        let mut shuffled = active.clone();
        shuffled.shuffle(&mut rng);
        let mut chosen: Vec<&str> = Vec::with_capacity(target);
        for c in shuffled {
            if chosen.len() == target {
                break;
            }
            if chosen.iter().all(|&d| !related(c, d)) {
                chosen.push(c);
            }
        }
        chosen.sort_unstable();

        let mut train_rows: Vec<usize> = Vec::with_capacity(chosen.len() * n_train);
        for &c in &chosen {
            let rows = m.class_rows(c);
            let picked = rand::seq::index::sample(&mut rng, rows.len(), n_train);
            let mut picked: Vec<usize> = picked.into_iter().map(|i| rows[i]).collect();
            picked.sort_unstable();
            train_rows.extend(picked);
        }
        let train_refs: Vec<&FeatureRow> = train_rows.iter().map(|&i| m.row(i)).collect();
        clf.fit(&train_refs)?;

        let train_set: BTreeSet<usize> = train_rows.iter().copied().collect();
        for &c in &chosen {
            let heldout: Vec<usize> = unrouted[c]
                .iter()
                .copied()
                .filter(|i| !train_set.contains(i))
                .collect();
            for i in heldout {
                let row = m.row(i);
                let pred = clf.predict(&row.feature)?;
                if pred == row.class_id {
                    out.accepted.insert(row.image_id.clone());
                } else {
                    out.rejected.insert(row.image_id.clone());
                }
                out.round_of.insert(row.image_id.clone(), round);
                unrouted.get_mut(c).unwrap().remove(&i);
            }
        }
        out.rounds.push(RoundRecord {
            classes: chosen.iter().map(|c| (*c).to_owned()).collect(),
            train_images: {
                let mut ids: Vec<String> = train_rows
                    .iter()
                    .map(|&i| m.row(i).image_id.clone())
                    .collect();
                ids.sort_unstable();
                ids
            },
        });
    }
    Ok(out)
}

/// Uniform sample without replacement of `n` image ids from one class.
/// Depends only on the class's id set, `n` and `seed` (not on row order).
pub fn sample_test_images(
    m: &FeatureMatrix,
    class_id: &str,
    n: usize,
    seed: u64,
) -> Result<Vec<String>, DatastoreError> {
    let rows = m.class_rows(class_id);
    if rows.is_empty() {
        return Err(DatastoreError::UnknownClass(class_id.to_owned()));
    }
    if rows.len() < n {
        return Err(DatastoreError::InsufficientRows {
            class: class_id.to_owned(),
            have: rows.len(),
            need: n,
        });
    }
    let mut ids: Vec<&str> = rows.iter().map(|&i| m.row(i).image_id.as_str()).collect();
    ids.sort_unstable();
    let mut rng = rng_from_seed(seed);
    let picked = rand::seq::index::sample(&mut rng, ids.len(), n);
    let mut out: Vec<String> = picked.into_iter().map(|i| ids[i].to_owned()).collect();
    out.sort_unstable();
    Ok(out)
}

/// Parse a `class_id\treason` blacklist.
pub fn load_blacklist(reader: impl BufRead) -> Result<BTreeMap<String, String>, DatastoreError> {
    let mut out = BTreeMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (class, reason) = line.split_once('\t').ok_or_else(|| DatastoreError::Parse {
            line: lineno + 1,
            msg: "expected `class_id\\treason`".into(),
        })?;
        out.insert(class.to_owned(), reason.to_owned());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn row(image: &str, class: &str, feature: &[f32]) -> FeatureRow {
        FeatureRow {
            image_id: image.to_owned(),
            class_id: class.to_owned(),
            feature: feature.to_vec(),
        }
    }

    /// `pops` gives rows per class; features place class k at coordinate 10k.
    fn blobs(pops: &[(&str, usize)]) -> FeatureMatrix {
        let mut rows = Vec::new();
        for (k, (class, n)) in pops.iter().enumerate() {
            for i in 0..*n {
                let jitter = (i % 7) as f32 * 0.01;
                rows.push(row(
                    &format!("{class}_{i:03}"),
                    class,
                    &[10.0 * k as f32 + jitter, jitter],
                ));
            }
        }
        FeatureMatrix::new(rows).unwrap()
    }

    fn flat_taxonomy(classes: &[&str]) -> Taxonomy {
        let edges: String = classes.iter().map(|c| format!("{c}\troot\n")).collect();
        Taxonomy::load_str(&edges, "").unwrap()
    }

    #[test]
    fn text_load_and_populations() {
        let src = "img1\tcat_a\t0.5,1\nimg2\tcat_b\t-1,2.25\n";
        let m = FeatureMatrix::load_text(src.as_bytes()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.dim(), 2);
        assert_eq!(m.row_by_image("img1").unwrap().feature, [0.5, 1.0]);
        let pops = m.class_populations();
        assert_eq!(pops["cat_a"], 1);
        assert_eq!(pops["cat_b"], 1);
    }

    #[test]
    fn text_load_rejects_ragged_and_duplicate_rows() {
        let ragged = "img1\ta\t1,2\nimg2\tb\t3\n";
        assert!(matches!(
            FeatureMatrix::load_text(ragged.as_bytes()).unwrap_err(),
            DatastoreError::DimensionMismatch { .. }
        ));
        let dup = "img1\ta\t1\nimg1\tb\t2\n";
        assert!(matches!(
            FeatureMatrix::load_text(dup.as_bytes()).unwrap_err(),
            DatastoreError::DuplicateImage(_)
        ));
        assert!(matches!(
            FeatureMatrix::load_text("".as_bytes()).unwrap_err(),
            DatastoreError::EmptyMatrix
        ));
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let m = FeatureMatrix::new(vec![
            row("a", "x", &[1.5e-38, -0.0, 16777217.0]),
            row("b", "y", &[f32::MIN_POSITIVE, 3.0, -7.25]),
        ])
        .unwrap();
        let mut buf = Vec::new();
        m.save_binary(&mut buf).unwrap();
        let m2 = FeatureMatrix::load_binary(buf.as_slice()).unwrap();
        assert_eq!(m.rows(), m2.rows());

        let mut text = Vec::new();
        m.save_text(&mut text).unwrap();
        let m3 = FeatureMatrix::load_text(text.as_slice()).unwrap();
        assert_eq!(m.rows(), m3.rows());
    }

    #[test]
    fn load_path_sniffs_format() {
        let dir = tempfile::tempdir().unwrap();
        let m = blobs(&[("a", 3), ("b", 2)]);
        let tpath = dir.path().join("f.tsv");
        let bpath = dir.path().join("f.zsbf");
        m.save_text(std::fs::File::create(&tpath).unwrap()).unwrap();
        m.save_binary(std::fs::File::create(&bpath).unwrap()).unwrap();
        assert_eq!(FeatureMatrix::load_path(&tpath).unwrap().rows(), m.rows());
        assert_eq!(FeatureMatrix::load_path(&bpath).unwrap().rows(), m.rows());
    }

    #[test]
    fn binary_rejects_bad_header() {
        assert!(matches!(
            FeatureMatrix::load_binary(&b"NOPE"[..]).unwrap_err(),
            DatastoreError::BadMagic
        ));
        let mut buf = Vec::new();
        blobs(&[("a", 2)]).save_binary(&mut buf).unwrap();
        buf[4] = 9; // version
        assert!(matches!(
            FeatureMatrix::load_binary(buf.as_slice()).unwrap_err(),
            DatastoreError::UnsupportedVersion(9)
        ));
        let mut buf2 = Vec::new();
        blobs(&[("a", 2)]).save_binary(&mut buf2).unwrap();
        buf2.truncate(buf2.len() - 3);
        assert!(matches!(
            FeatureMatrix::load_binary(buf2.as_slice()).unwrap_err(),
            DatastoreError::Truncated
        ));
    }

    #[test]
    fn population_filter_is_strict_and_monotone() {
        let m = blobs(&[("tiny", 5), ("mid", 50), ("big", 500)]);
        let kept = population_filter(&m, 100);
        assert_eq!(kept, ["big".to_owned()].into());
        let at = population_filter(&m, 50);
        assert_eq!(at, ["big".to_owned()].into(), "50 rows at threshold 50 drops");
        let under = population_filter(&m, 49);
        assert_eq!(under, ["big".to_owned(), "mid".to_owned()].into());
        assert!(population_filter(&m, 30).is_superset(&population_filter(&m, 100)));
    }

    #[test]
    fn nearest_class_mean_predicts_and_breaks_ties_by_id() {
        let mut clf = NearestClassMean::default();
        assert!(matches!(
            clf.predict(&[0.0]).unwrap_err(),
            DatastoreError::NotFitted
        ));
        let rows = [
            row("a1", "alpha", &[0.0, 0.0]),
            row("a2", "alpha", &[0.2, 0.0]),
            row("b1", "beta", &[5.0, 0.0]),
            row("b2", "beta", &[5.2, 0.0]),
        ];
        let refs: Vec<&FeatureRow> = rows.iter().collect();
        clf.fit(&refs).unwrap();
        assert_eq!(clf.predict(&[0.1, 0.1]).unwrap(), "alpha");
        assert_eq!(clf.predict(&[5.0, -0.3]).unwrap(), "beta");
        // Exactly between the two means: smallest id wins.
        assert_eq!(clf.predict(&[2.6, 0.0]).unwrap(), "alpha");
    }

    /// Always right: the blob features encode the class index in their
    /// first coordinate, so reading it back is an oracle.
    struct IndexedOracle {
        classes: Vec<String>,
    }
    impl ShallowClassifier for IndexedOracle {
        fn fit(&mut self, _rows: &[&FeatureRow]) -> Result<(), DatastoreError> {
            Ok(())
        }
        fn predict(&self, feature: &[f32]) -> Result<&str, DatastoreError> {
            Ok(&self.classes[feature[0] as usize / 10])
        }
    }

    struct ConstantWrong;
    impl ShallowClassifier for ConstantWrong {
        fn fit(&mut self, _rows: &[&FeatureRow]) -> Result<(), DatastoreError> {
            Ok(())
        }
        fn predict(&self, _feature: &[f32]) -> Result<&str, DatastoreError> {
            Ok("never_a_class")
        }
    }

    #[test]
    fn oracle_classifier_accepts_every_heldout_row() {
        let m = blobs(&[("c_a", 8), ("c_b", 8), ("c_c", 8)]);
        let t = flat_taxonomy(&["c_a", "c_b", "c_c"]);
        let mut clf = IndexedOracle {
            classes: vec!["c_a".into(), "c_b".into(), "c_c".into()],
        };
        let q = select_quality_samples(&m, &t, &mut clf, 3, 2, 7).unwrap();
        assert_eq!(q.accepted.len(), 24);
        assert!(q.rejected.is_empty());
        assert_eq!(q.round_of.len(), 24);
    }

    #[test]
    fn constant_wrong_classifier_rejects_everything() {
        let m = blobs(&[("c_a", 6), ("c_b", 6)]);
        let t = flat_taxonomy(&["c_a", "c_b"]);
        let q = select_quality_samples(&m, &t, &mut ConstantWrong, 2, 2, 7).unwrap();
        assert!(q.accepted.is_empty());
        assert_eq!(q.rejected.len(), 12);
    }

    #[test]
    fn selection_partitions_all_rows_and_is_deterministic() {
        let m = blobs(&[("c_a", 9), ("c_b", 7), ("c_c", 11)]);
        let t = flat_taxonomy(&["c_a", "c_b", "c_c"]);
        let mut clf = NearestClassMean::default();
        let q1 = select_quality_samples(&m, &t, &mut clf, 2, 3, 42).unwrap();
        let all: BTreeSet<String> = m.rows().iter().map(|r| r.image_id.clone()).collect();
        let mut union = q1.accepted.clone();
        union.extend(q1.rejected.iter().cloned());
        assert_eq!(union, all);
        assert!(q1.accepted.is_disjoint(&q1.rejected));
        let q2 = select_quality_samples(&m, &t, &mut NearestClassMean::default(), 2, 3, 42)
            .unwrap();
        assert_eq!(q1, q2);
    }

    #[test]
    fn rounds_never_mix_related_classes() {
        // parentc has child childc; they may never share a round.
        let t = Taxonomy::load_str("childc\tparentc\nparentc\troot\nother\troot\n", "").unwrap();
        let m = blobs(&[("childc", 6), ("other", 6), ("parentc", 6)]);
        let mut clf = NearestClassMean::default();
        let q = select_quality_samples(&m, &t, &mut clf, 3, 2, 11).unwrap();
        for r in &q.rounds {
            let set: BTreeSet<String> = r.classes.iter().cloned().collect();
            assert!(t.antichain_violations(&set).unwrap().is_empty());
        }
        // All rows still evaluated despite the relation.
        assert_eq!(q.round_of.len(), 18);
    }

    #[test]
    fn selection_preconditions() {
        let m = blobs(&[("c_a", 6), ("c_b", 6)]);
        let t = flat_taxonomy(&["c_a", "c_b"]);
        assert!(matches!(
            select_quality_samples(&m, &t, &mut NearestClassMean::default(), 3, 2, 0)
                .unwrap_err(),
            DatastoreError::PoolTooSmall { have: 2, need: 3 }
        ));
        assert!(matches!(
            select_quality_samples(&m, &t, &mut NearestClassMean::default(), 2, 6, 0)
                .unwrap_err(),
            DatastoreError::ClassTooSmall { .. }
        ));
    }

    #[test]
    fn sample_test_images_exhaustive_and_deterministic() {
        let m = blobs(&[("c_a", 4), ("c_b", 10)]);
        let all = sample_test_images(&m, "c_a", 4, 1).unwrap();
        assert_eq!(all.len(), 4);
        let s1 = sample_test_images(&m, "c_b", 3, 99).unwrap();
        let s2 = sample_test_images(&m, "c_b", 3, 99).unwrap();
        assert_eq!(s1, s2);
        assert!(matches!(
            sample_test_images(&m, "c_a", 5, 0).unwrap_err(),
            DatastoreError::InsufficientRows { .. }
        ));
        assert!(matches!(
            sample_test_images(&m, "ghost", 1, 0).unwrap_err(),
            DatastoreError::UnknownClass(_)
        ));
    }

    #[test]
    fn blacklist_parses() {
        let src = "# manual removals\nbad_class\tnear-duplicate of training\nworse\t\n";
        let b = load_blacklist(src.as_bytes()).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b["bad_class"], "near-duplicate of training");
    }

    #[test]
    fn retain_subsets() {
        let m = blobs(&[("c_a", 3), ("c_b", 2)]);
        let only_a = m
            .retain_classes(&["c_a".to_owned()].into())
            .unwrap();
        assert_eq!(only_a.len(), 3);
        let keep: BTreeSet<String> = ["c_a_000".to_owned(), "c_b_001".to_owned()].into();
        let two = m.retain_images(&keep).unwrap();
        assert_eq!(two.len(), 2);
    }
}
