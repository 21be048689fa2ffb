//! Taxonomy-aware evaluation. A flat benchmark treats every miss as equally
//! wrong; here a prediction that lands on an ancestor or descendant of the
//! truth is tracked separately, which turns a single accuracy number into a
//! bounded interval plus an error-structure breakdown.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::io::Write;

use thiserror::Error;

use crate::models::{rank_indices, ModelError, SemanticMatrix};
use crate::taxonomy::{Taxonomy, TaxonomyError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("test set is empty")]
    EmptyTestset,
    #[error("no valid k values (need 1 ≤ k ≤ |candidates|)")]
    InvalidK,
    #[error("k = {k} exceeds {have} candidates")]
    KTooLarge { k: usize, have: usize },
    #[error("truth class `{0}` is not a candidate")]
    TruthNotCandidate(String),
    #[error("scorer returned {got} scores for {expected} candidates")]
    ScorerShape { expected: usize, got: usize },
    #[error("fn/tp ratio undefined: no true positives")]
    NoTruePositives,
    #[error("input lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least two points")]
    NotEnoughData,
    #[error("zero variance input")]
    ZeroVariance,
    #[error("missing factor configuration {0}")]
    MissingConfiguration(String),
    #[error("reports disagree on k values")]
    KsMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

/// Where a top-1 prediction lands relative to the truth in the taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OutputCategory {
    /// Prediction equals the truth.
    Tp,
    /// Prediction is a strict ancestor of the truth — a superclass answer.
    FnParent,
    /// Prediction is a strict descendant of the truth — an overly specific
    /// answer consistent with the truth.
    FnChild,
    /// Unrelated prediction: the only unambiguous classification error.
    Tn,
}

pub fn categorize(pred: &str, truth: &str, t: &Taxonomy) -> Result<OutputCategory, EvalError> {
    if pred == truth {
        // Still validate the id.
        t.index_of(pred)
            .ok_or_else(|| TaxonomyError::UnknownConcept(pred.to_owned()))?;
        return Ok(OutputCategory::Tp);
    }
    if t.is_strict_ancestor(pred, truth)? {
        return Ok(OutputCategory::FnParent);
    }
    if t.is_strict_ancestor(truth, pred)? {
        return Ok(OutputCategory::FnChild);
    }
    Ok(OutputCategory::Tn)
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct CategoryCounts {
    pub tp: usize,
    pub fn_parent: usize,
    pub fn_child: usize,
    pub tn: usize,
}

impl CategoryCounts {
    pub fn add(&mut self, cat: OutputCategory) {
        match cat {
            OutputCategory::Tp => self.tp += 1,
            OutputCategory::FnParent => self.fn_parent += 1,
            OutputCategory::FnChild => self.fn_child += 1,
            OutputCategory::Tn => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &CategoryCounts) {
        self.tp += other.tp;
        self.fn_parent += other.fn_parent;
        self.fn_child += other.fn_child;
        self.tn += other.tn;
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_parent + self.fn_child + self.tn
    }
}

/// Per-truth-class tallies: top-1 category counts and hit counts per k.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct ClassOutcome {
    pub n: usize,
    pub counts: CategoryCounts,
    pub hits: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_class: BTreeMap<String, ClassOutcome>,
    pub ks: Vec<usize>,
    pub n_samples: usize,
    /// Aggregate top-1 categorization over all samples.
    pub counts: CategoryCounts,
    /// Per-k accuracy averaged over classes (each class weighs the same).
    pub macro_topk: BTreeMap<usize, f64>,
    /// Per-k accuracy over samples (each sample weighs the same).
    pub micro_topk: BTreeMap<usize, f64>,
}

impl EvalReport {
    /// Recompute every aggregate from the per-class tallies; the single
    /// source of truth for both `evaluate` and `merge`.
    pub fn from_per_class(
        per_class: BTreeMap<String, ClassOutcome>,
        ks: Vec<usize>,
    ) -> EvalReport {
        let mut counts = CategoryCounts::default();
        let mut n_samples = 0;
        for out in per_class.values() {
            counts.merge(&out.counts);
            n_samples += out.n;
        }
        let mut macro_topk = BTreeMap::new();
        let mut micro_topk = BTreeMap::new();
        for &k in &ks {
            let mut acc_sum = 0.0;
            let mut hit_sum = 0usize;
            for out in per_class.values() {
                let hits = out.hits.get(&k).copied().unwrap_or(0);
                acc_sum += hits as f64 / out.n as f64;
                hit_sum += hits;
            }
            macro_topk.insert(k, acc_sum / per_class.len() as f64);
            micro_topk.insert(k, hit_sum as f64 / n_samples as f64);
        }
        EvalReport {
            per_class,
            ks,
            n_samples,
            counts,
            macro_topk,
            micro_topk,
        }
    }

    /// Combine two partial evaluations over disjoint or overlapping sample
    /// chunks. Counts add; aggregates are recomputed, so chunked evaluation
    /// matches a single pass exactly.
    pub fn merge(&self, other: &EvalReport) -> Result<EvalReport, EvalError> {
        if self.ks != other.ks {
            return Err(EvalError::KsMismatch);
        }
        let mut per_class = self.per_class.clone();
        for (class, out) in &other.per_class {
            let e = per_class.entry(class.clone()).or_default();
            e.n += out.n;
            e.counts.merge(&out.counts);
            for (&k, &h) in &out.hits {
                *e.hits.entry(k).or_insert(0) += h;
            }
        }
        Ok(EvalReport::from_per_class(per_class, self.ks.clone()))
    }

    pub fn tp_rate(&self) -> f64 {
        self.counts.tp as f64 / self.n_samples as f64
    }

    pub fn fn_parent_rate(&self) -> f64 {
        self.counts.fn_parent as f64 / self.n_samples as f64
    }

    pub fn fn_child_rate(&self) -> f64 {
        self.counts.fn_child as f64 / self.n_samples as f64
    }

    pub fn tn_rate(&self) -> f64 {
        self.counts.tn as f64 / self.n_samples as f64
    }
}

/// Score every test sample against `candidates` and tally where the top-1
/// lands plus hit@k for each requested k. The scorer returns one score per
/// candidate, aligned with `candidates.ids()`; which setting this is
/// (restricted or generalized) is entirely decided by what `candidates`
/// contains.
pub fn evaluate<F>(
    testset: &[(Vec<f32>, String)],
    candidates: &SemanticMatrix,
    t: &Taxonomy,
    ks: &[usize],
    mut scorer: F,
) -> Result<EvalReport, EvalError>
where
    F: FnMut(&[f32]) -> Result<Vec<f64>, ModelError>,
{
    if testset.is_empty() {
        return Err(EvalError::EmptyTestset);
    }
    let ks: Vec<usize> = ks.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if ks.is_empty() || ks[0] == 0 {
        return Err(EvalError::InvalidK);
    }
    if let Some(&kmax) = ks.last() {
        if kmax > candidates.len() {
            return Err(EvalError::KTooLarge {
                k: kmax,
                have: candidates.len(),
            });
        }
    }
    let ids = candidates.ids();
    let mut per_class: BTreeMap<String, ClassOutcome> = BTreeMap::new();
    for (feature, truth) in testset {
        if !candidates.contains(truth) {
            return Err(EvalError::TruthNotCandidate(truth.clone()));
        }
        let scores = scorer(feature)?;
        if scores.len() != ids.len() {
            return Err(EvalError::ScorerShape {
                expected: ids.len(),
                got: scores.len(),
            });
        }
        let ranked = rank_indices(&scores, ids);
        let top1 = &ids[ranked[0]];
        let cat = categorize(top1, truth, t)?;
        let pos = ranked
            .iter()
            .position(|&i| &ids[i] == truth)
            .expect("truth is a candidate");
        let out = per_class.entry(truth.clone()).or_default();
        out.n += 1;
        out.counts.add(cat);
        for &k in &ks {
            if pos < k {
                *out.hits.entry(k).or_insert(0) += 1;
            }
        }
    }
    // Give every class an explicit (possibly zero) entry for each k.
    for out in per_class.values_mut() {
        for &k in &ks {
            out.hits.entry(k).or_insert(0);
        }
    }
    Ok(EvalReport::from_per_class(per_class, ks))
}

/// Macro accuracy at `k` over only the classes in `subset`; None when the
/// report covers none of them. This is how the generalized setting gets
/// separate training-class and test-class accuracies out of one report.
pub fn macro_accuracy_over(
    r: &EvalReport,
    subset: &BTreeSet<String>,
    k: usize,
) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (class, out) in &r.per_class {
        if subset.contains(class) {
            sum += out.hits.get(&k).copied().unwrap_or(0) as f64 / out.n as f64;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// The reported accuracy is only TP; semantically defensible answers span
/// an interval: ancestors are correct-but-vague for sure (lower bound),
/// descendants are consistent with the truth at best (upper bound).
pub fn accuracy_bounds(r: &EvalReport) -> (f64, f64) {
    let lower = r.tp_rate() + r.fn_parent_rate();
    (lower, lower + r.fn_child_rate())
}

/// Hierarchical misses per exact hit.
pub fn fn_tp_ratio(r: &EvalReport) -> Result<f64, EvalError> {
    if r.counts.tp == 0 {
        return Err(EvalError::NoTruePositives);
    }
    Ok((r.counts.fn_parent + r.counts.fn_child) as f64 / r.counts.tp as f64)
}

/// Harmonic mean of training- and test-class accuracy in the generalized
/// setting; 0 whenever either side is 0.
pub fn harmonic_gzsl(acc_train: f64, acc_test: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&acc_train) && (0.0..=1.0).contains(&acc_test));
    if acc_train == 0.0 || acc_test == 0.0 {
        0.0
    } else {
        2.0 * acc_train * acc_test / (acc_train + acc_test)
    }
}

/// One cell of the 2³ factorial design: which of the three bias-control
/// factors are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FactorConfig {
    pub visual: bool,
    pub semantic: bool,
    pub hierarchical: bool,
}

impl FactorConfig {
    pub fn all() -> [FactorConfig; 8] {
        let mut out = [FactorConfig {
            visual: false,
            semantic: false,
            hierarchical: false,
        }; 8];
        for (i, cfg) in out.iter_mut().enumerate() {
            cfg.visual = i & 4 != 0;
            cfg.semantic = i & 2 != 0;
            cfg.hierarchical = i & 1 != 0;
        }
        out
    }

    fn with_visual(self, v: bool) -> Self {
        FactorConfig { visual: v, ..self }
    }

    fn with_semantic(self, v: bool) -> Self {
        FactorConfig {
            semantic: v,
            ..self
        }
    }

    fn with_hierarchical(self, v: bool) -> Self {
        FactorConfig {
            hierarchical: v,
            ..self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorImpact {
    pub visual: f64,
    pub semantic: f64,
    pub hierarchical: f64,
}

/// Mean accuracy improvement attributable to each factor: for factor i,
/// average (on − off) over the 4 configuration pairs that differ only in i.
pub fn factor_impact(
    results: &BTreeMap<FactorConfig, f64>,
) -> Result<FactorImpact, EvalError> {
    for cfg in FactorConfig::all() {
        if !results.contains_key(&cfg) {
            return Err(EvalError::MissingConfiguration(format!("{cfg:?}")));
        }
    }
    let mean_diff = |on: &dyn Fn(FactorConfig) -> FactorConfig,
                     off: &dyn Fn(FactorConfig) -> FactorConfig| {
        let mut sum = 0.0;
        let mut n = 0;
        for cfg in FactorConfig::all() {
            let hi = on(cfg);
            if hi != cfg {
                continue; // count each pair once, from its "on" member
            }
            sum += results[&hi] - results[&off(cfg)];
            n += 1;
        }
        sum / f64::from(n)
    };
    Ok(FactorImpact {
        visual: mean_diff(&|c| c.with_visual(true), &|c| c.with_visual(false)),
        semantic: mean_diff(&|c| c.with_semantic(true), &|c| c.with_semantic(false)),
        hierarchical: mean_diff(
            &|c| c.with_hierarchical(true),
            &|c| c.with_hierarchical(false),
        ),
    })
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(EvalError::NotEnoughData);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    Ok((cov / (vx.sqrt() * vy.sqrt())).clamp(-1.0, 1.0))
}

/// Human-readable report: fixed key order, one `key<TAB>value…` per line.
pub fn write_report_text(r: &EvalReport, mut w: impl Write) -> io::Result<()> {
    writeln!(w, "samples\t{}", r.n_samples)?;
    writeln!(w, "classes\t{}", r.per_class.len())?;
    writeln!(w, "tp\t{}\t{:.6}", r.counts.tp, r.tp_rate())?;
    writeln!(w, "fn_parent\t{}\t{:.6}", r.counts.fn_parent, r.fn_parent_rate())?;
    writeln!(w, "fn_child\t{}\t{:.6}", r.counts.fn_child, r.fn_child_rate())?;
    writeln!(w, "tn\t{}\t{:.6}", r.counts.tn, r.tn_rate())?;
    let (lo, hi) = accuracy_bounds(r);
    writeln!(w, "bound_lower\t{lo:.6}")?;
    writeln!(w, "bound_upper\t{hi:.6}")?;
    match fn_tp_ratio(r) {
        Ok(ratio) => writeln!(w, "fn_tp_ratio\t{ratio:.6}")?,
        Err(_) => writeln!(w, "fn_tp_ratio\tundefined")?,
    }
    for &k in &r.ks {
        writeln!(
            w,
            "topk\t{k}\t{:.6}\t{:.6}",
            r.macro_topk[&k], r.micro_topk[&k]
        )?;
    }
    Ok(())
}

/// One row of the cross-setting accuracy table.
#[derive(Debug, Clone, PartialEq)]
pub struct TopkRow {
    pub split: String,
    pub setting: String,
    pub k: usize,
    pub macro_acc: f64,
    pub micro_acc: f64,
}

pub fn write_topk_tsv(rows: &[TopkRow], mut w: impl Write) -> io::Result<()> {
    writeln!(w, "split\tsetting\tk\tmacro\tmicro")?;
    for r in rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{:.6}\t{:.6}",
            r.split, r.setting, r.k, r.macro_acc, r.micro_acc
        )?;
    }
    Ok(())
}

/// Per-class breakdown table.
pub fn write_per_class_tsv(r: &EvalReport, mut w: impl Write) -> io::Result<()> {
    write!(w, "class\tn\ttp\tfn_parent\tfn_child\ttn")?;
    for &k in &r.ks {
        write!(w, "\tacc@{k}")?;
    }
    writeln!(w)?;
    for (class, out) in &r.per_class {
        write!(
            w,
            "{class}\t{}\t{}\t{}\t{}\t{}",
            out.n, out.counts.tp, out.counts.fn_parent, out.counts.fn_child, out.counts.tn
        )?;
        for &k in &r.ks {
            write!(w, "\t{:.6}", out.hits[&k] as f64 / out.n as f64)?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Two-column plot data (e.g. accuracy vs. frequency, population, or
/// structural ratio).
pub fn write_xy_tsv(
    x_name: &str,
    y_name: &str,
    points: &[(f64, f64)],
    mut w: impl Write,
) -> io::Result<()> {
    writeln!(w, "{x_name}\t{y_name}")?;
    for (x, y) in points {
        writeln!(w, "{x}\t{y}")?;
    }
    Ok(())
}
