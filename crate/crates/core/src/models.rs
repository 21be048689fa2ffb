//! Compatibility models: score images against class embeddings via
//! E(x, y) = xᵀWy, with four ways to obtain the comparison machinery.
//!
//! * `fit_closed_form` — ridge-regularised least squares with an exact
//!   two-solve solution.
//! * `fit_ranking` — stochastic hinge updates against sampled wrong classes.
//! * `build_trivial` — no learning at all: each test class borrows the
//!   embedding of its hierarchically nearest training class (plus optional
//!   Gaussian noise), exposing how much of "zero-shot" accuracy is just
//!   taxonomy proximity.
//! * `fit_averaging` — a probability-weighted average of training-class
//!   embeddings, ranked by cosine.
//!
//! Weights are stored as f32 (matching the on-disk format); all arithmetic
//! runs in f64. Ties everywhere break towards the smallest class id.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::datastore::FeatureMatrix;
use crate::rng_from_seed;
use crate::taxonomy::{Taxonomy, TaxonomyError};

pub const KIND_CLOSED_FORM: &str = "closed-form";
pub const KIND_RANKING: &str = "ranking";
pub const KIND_TRIVIAL: &str = "trivial";
pub const KIND_AVERAGING: &str = "averaging";

const ZSBW_MAGIC: &[u8; 4] = b"ZSBW";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("hyperparameter {name} = {value} out of range")]
    InvalidHyperparameter { name: &'static str, value: f64 },
    #[error("training row labeled with class `{0}` missing from the semantic matrix")]
    UnknownClass(String),
    #[error("duplicate class `{0}` in semantic matrix")]
    DuplicateClass(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("system is singular despite regularization")]
    SingularSystem,
    #[error("ranking training needs at least two classes")]
    NeedTwoClasses,
    #[error("training diverged at epoch {epoch}: loss {loss} vs initial {initial}")]
    Divergence {
        epoch: usize,
        loss: f64,
        initial: f64,
    },
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("k = {k} exceeds {have} candidates")]
    KTooLarge { k: usize, have: usize },
    #[error("class `{0}` is in both the training and test split")]
    OverlappingSplits(String),
    #[error("no embedding for class `{0}`")]
    MissingEmbedding(String),
    #[error("test class `{0}` is disconnected from every training class")]
    DisconnectedClass(String),
    #[error("top-T = {t} exceeds {have} classes")]
    TopTooLarge { t: usize, have: usize },
    #[error("probability {p} for class `{class}` is invalid")]
    InvalidProbability { class: String, p: f64 },
    #[error("probabilities sum to {0} > 1")]
    MassExceedsOne(f64),
    #[error("all top-T probabilities are zero")]
    AllZeroProbabilities,
    #[error("model produced a non-finite weight")]
    NonFinite,
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("model file ends mid-record")]
    Truncated,
    #[error("model file metadata is missing key `{0}`")]
    MissingMeta(&'static str),
    #[error("bad model file metadata: {0}")]
    InvalidMeta(String),
    #[error("expected a {expected} model file, found kind `{got}`")]
    WrongKind { expected: &'static str, got: String },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

/// Class embeddings in matrix form: one row per class, row order = id order
/// as constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMatrix {
    class_ids: Vec<String>,
    dim: usize,
    data: Vec<f64>, // row-major, len = class_ids.len() * dim
    index: HashMap<String, usize>,
}

impl SemanticMatrix {
    pub fn new(rows: Vec<(String, Vec<f64>)>) -> Result<Self, ModelError> {
        let Some((_, first)) = rows.first() else {
            return Err(ModelError::EmptyCandidates);
        };
        let dim = first.len();
        let mut class_ids = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        let mut index = HashMap::with_capacity(rows.len());
        for (id, row) in rows {
            if row.len() != dim {
                return Err(ModelError::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            if index.insert(id.clone(), class_ids.len()).is_some() {
                return Err(ModelError::DuplicateClass(id));
            }
            class_ids.push(id);
            data.extend(row);
        }
        Ok(SemanticMatrix {
            class_ids,
            dim,
            data,
            index,
        })
    }

    /// Build by looking each id up, ids taken in sorted order.
    pub fn for_classes<F>(ids: &BTreeSet<String>, mut embed: F) -> Result<Self, ModelError>
    where
        F: FnMut(&str) -> Result<Vec<f64>, ModelError>,
    {
        let mut rows = Vec::with_capacity(ids.len());
        for id in ids {
            rows.push((id.clone(), embed(id)?));
        }
        Self::new(rows)
    }

    pub fn concat(a: &SemanticMatrix, b: &SemanticMatrix) -> Result<Self, ModelError> {
        if a.dim != b.dim {
            return Err(ModelError::DimensionMismatch {
                expected: a.dim,
                got: b.dim,
            });
        }
        let mut rows: Vec<(String, Vec<f64>)> = Vec::with_capacity(a.len() + b.len());
        for m in [a, b] {
            for i in 0..m.len() {
                rows.push((m.class_ids[i].clone(), m.row(i).to_vec()));
            }
        }
        Self::new(rows)
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.class_ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, class_id: &str) -> Option<&[f64]> {
        self.index.get(class_id).map(|&i| self.row(i))
    }

    pub fn contains(&self, class_id: &str) -> bool {
        self.index.contains_key(class_id)
    }
}

/// xᵀWy scorer. `meta` carries provenance (kind, hyperparameters, seed,
/// loss trace) and travels with the model file.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearModel {
    feature_dim: usize,
    semantic_dim: usize,
    /// Row-major D x d.
    weights: Vec<f32>,
    pub meta: BTreeMap<String, String>,
}

impl BilinearModel {
    pub fn from_weights(
        feature_dim: usize,
        semantic_dim: usize,
        weights: Vec<f32>,
        meta: BTreeMap<String, String>,
    ) -> Result<Self, ModelError> {
        if weights.len() != feature_dim * semantic_dim {
            return Err(ModelError::DimensionMismatch {
                expected: feature_dim * semantic_dim,
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(BilinearModel {
            feature_dim,
            semantic_dim,
            weights,
            meta,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn semantic_dim(&self) -> usize {
        self.semantic_dim
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn kind(&self) -> &str {
        self.meta.get("kind").map(String::as_str).unwrap_or("")
    }

    /// xᵀW — the image projected into semantic space.
    pub fn project(&self, x: &[f32]) -> Result<Vec<f64>, ModelError> {
        if x.len() != self.feature_dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.feature_dim,
                got: x.len(),
            });
        }
        let mut out = vec![0.0f64; self.semantic_dim];
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            let xi = f64::from(*xi);
            let row = &self.weights[i * self.semantic_dim..(i + 1) * self.semantic_dim];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * f64::from(*w);
            }
        }
        Ok(out)
    }
}

/// E(x, y) = xᵀWy.
pub fn score(m: &BilinearModel, x: &[f32], y: &[f64]) -> Result<f64, ModelError> {
    if y.len() != m.semantic_dim {
        return Err(ModelError::DimensionMismatch {
            expected: m.semantic_dim,
            got: y.len(),
        });
    }
    let xw = m.project(x)?;
    Ok(xw.iter().zip(y).map(|(a, b)| a * b).sum())
}

/// Candidate indices sorted by descending score, ties by smallest id.
pub fn rank_indices(scores: &[f64], ids: &[String]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| ids[a].cmp(&ids[b]))
    });
    idx
}

/// Top-k classes for `x` among `candidates`. Generalized evaluation is the
/// same call with `candidates` = train ∪ test.
pub fn classify(
    m: &BilinearModel,
    x: &[f32],
    candidates: &SemanticMatrix,
    k: usize,
) -> Result<Vec<String>, ModelError> {
    if candidates.is_empty() {
        return Err(ModelError::EmptyCandidates);
    }
    if k > candidates.len() {
        return Err(ModelError::KTooLarge {
            k,
            have: candidates.len(),
        });
    }
    let xw = m.project(x)?;
    if candidates.dim() != m.semantic_dim {
        return Err(ModelError::DimensionMismatch {
            expected: m.semantic_dim,
            got: candidates.dim(),
        });
    }
    let scores: Vec<f64> = (0..candidates.len())
        .map(|i| candidates.row(i).iter().zip(&xw).map(|(a, b)| a * b).sum())
        .collect();
    Ok(rank_indices(&scores, candidates.ids())
        .into_iter()
        .take(k)
        .map(|i| candidates.ids()[i].clone())
        .collect())
}

fn check_positive(name: &'static str, value: f64) -> Result<(), ModelError> {
    if !(value.is_finite() && value > 0.0) {
        return Err(ModelError::InvalidHyperparameter { name, value });
    }
    Ok(())
}

fn class_columns<'a>(
    xtr: &'a FeatureMatrix,
    s: &SemanticMatrix,
) -> Result<Vec<usize>, ModelError> {
    xtr.rows()
        .iter()
        .map(|r| {
            s.index
                .get(r.class_id.as_str())
                .copied()
                .ok_or_else(|| ModelError::UnknownClass(r.class_id.clone()))
        })
        .collect()
}

fn solve_spd(a: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>, ModelError> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(rhs));
    }
    a.clone().lu().solve(rhs).ok_or(ModelError::SingularSystem)
}

/// Exact minimiser of
/// ‖XᵀWS′ − M‖² + γ‖WS′‖² + λ‖XᵀW‖² + γλ‖W‖²
/// (X: D×N features, S′: d×K transposed class embeddings, M: N×K one-hot):
/// W = (XXᵀ + γI)⁻¹ X M S′ᵀ (S′S′ᵀ + λI)⁻¹, via two ridge solves.
pub fn fit_closed_form(
    xtr: &FeatureMatrix,
    s: &SemanticMatrix,
    gamma: f64,
    lambda: f64,
) -> Result<BilinearModel, ModelError> {
    check_positive("gamma", gamma)?;
    check_positive("lambda", lambda)?;
    let cols = class_columns(xtr, s)?;
    let (n, dfeat, k, dsem) = (xtr.len(), xtr.dim(), s.len(), s.dim());

    let x = DMatrix::from_fn(dfeat, n, |i, j| f64::from(xtr.row(j).feature[i]));
    let sp = DMatrix::from_fn(dsem, k, |i, j| s.row(j)[i]);
    let m = DMatrix::from_fn(n, k, |i, j| if cols[i] == j { 1.0 } else { 0.0 });

    let a = &x * x.transpose() + DMatrix::identity(dfeat, dfeat) * gamma;
    let b = &sp * sp.transpose() + DMatrix::identity(dsem, dsem) * lambda;
    let c = (&x * m) * sp.transpose();

    let z = solve_spd(&a, &c)?; // A Z = C
    let wt = solve_spd(&b, &z.transpose())?; // B Wᵀ = Zᵀ
    let w = wt.transpose();

    let mut weights = Vec::with_capacity(dfeat * dsem);
    for i in 0..dfeat {
        for j in 0..dsem {
            weights.push(w[(i, j)] as f32);
        }
    }
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), KIND_CLOSED_FORM.into());
    meta.insert("gamma".into(), format!("{gamma}"));
    meta.insert("lambda".into(), format!("{lambda}"));
    BilinearModel::from_weights(dfeat, dsem, weights, meta)
}

/// The closed-form objective, evaluated with plain loops so tests can use
/// it as an independent check on any candidate W (row-major D×d).
pub fn closed_form_objective(
    xtr: &FeatureMatrix,
    s: &SemanticMatrix,
    gamma: f64,
    lambda: f64,
    w: &[f64],
) -> f64 {
    let (dfeat, k, dsem) = (xtr.dim(), s.len(), s.dim());
    assert_eq!(w.len(), dfeat * dsem);
    // xw[j] for each row, then per-class scores vs one-hot targets.
    let mut fit = 0.0;
    let mut lam = 0.0;
    for row in xtr.rows() {
        let mut xw = vec![0.0f64; dsem];
        for (i, xi) in row.feature.iter().enumerate() {
            let xi = f64::from(*xi);
            for j in 0..dsem {
                xw[j] += xi * w[i * dsem + j];
            }
        }
        for j in 0..k {
            let pred: f64 = xw.iter().zip(s.row(j)).map(|(a, b)| a * b).sum();
            let target = if s.class_ids[j] == row.class_id { 1.0 } else { 0.0 };
            fit += (pred - target) * (pred - target);
        }
        lam += xw.iter().map(|v| v * v).sum::<f64>();
    }
    // ‖WS′‖²: project every class embedding through W.
    let mut gam = 0.0;
    for j in 0..k {
        let y = s.row(j);
        for i in 0..dfeat {
            let wy: f64 = (0..dsem).map(|q| w[i * dsem + q] * y[q]).sum();
            gam += wy * wy;
        }
    }
    let frob: f64 = w.iter().map(|v| v * v).sum();
    fit + gamma * gam + lambda * lam + gamma * lambda * frob
}

fn diverged(initial: f64, current: f64) -> bool {
    !current.is_finite() || (initial > 0.0 && current > 10.0 * initial)
}

/// Stochastic hinge training: per sample, one uniformly drawn wrong class,
/// update W += lr·x⊗(y_true − y_wrong) when margin − xᵀWy_t + xᵀWy_w > 0.
/// Epoch-mean losses (measured before each sample's update) are recorded
/// in `meta["epoch_losses"]`; a non-finite or >10× initial epoch loss
/// aborts.
pub fn fit_ranking(
    xtr: &FeatureMatrix,
    s: &SemanticMatrix,
    margin: f64,
    lr: f64,
    epochs: usize,
    seed: u64,
) -> Result<BilinearModel, ModelError> {
    if !(margin.is_finite() && margin >= 0.0) {
        return Err(ModelError::InvalidHyperparameter {
            name: "margin",
            value: margin,
        });
    }
    check_positive("lr", lr)?;
    if epochs == 0 {
        return Err(ModelError::InvalidHyperparameter {
            name: "epochs",
            value: 0.0,
        });
    }
    if s.len() < 2 {
        return Err(ModelError::NeedTwoClasses);
    }
    let cols = class_columns(xtr, s)?;
    let (n, dfeat, k, dsem) = (xtr.len(), xtr.dim(), s.len(), s.dim());

    let mut w = vec![0.0f64; dfeat * dsem];
    let mut rng = rng_from_seed(seed);
    let mut epoch_losses: Vec<f64> = Vec::with_capacity(epochs);
    let mut initial = 0.0f64;

    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for &ri in &order {
            let row = &xtr.rows()[ri];
            let true_col = cols[ri];
            let mut wrong = rng.random_range(0..k - 1);
            if wrong >= true_col {
                wrong += 1;
            }
            let mut xw = vec![0.0f64; dsem];
            for (i, xi) in row.feature.iter().enumerate() {
                if *xi == 0.0 {
                    continue;
                }
                let xi = f64::from(*xi);
                for j in 0..dsem {
                    xw[j] += xi * w[i * dsem + j];
                }
            }
            let yt = s.row(true_col);
            let yw = s.row(wrong);
            let st: f64 = xw.iter().zip(yt).map(|(a, b)| a * b).sum();
            let sw: f64 = xw.iter().zip(yw).map(|(a, b)| a * b).sum();
            let loss = margin - st + sw;
            if !loss.is_finite() {
                return Err(ModelError::Divergence {
                    epoch: epoch + 1,
                    loss,
                    initial,
                });
            }
            if loss > 0.0 {
                loss_sum += loss;
                for (i, xi) in row.feature.iter().enumerate() {
                    if *xi == 0.0 {
                        continue;
                    }
                    let step = lr * f64::from(*xi);
                    for j in 0..dsem {
                        w[i * dsem + j] += step * (yt[j] - yw[j]);
                    }
                }
            }
        }
        let epoch_loss = loss_sum / n as f64;
        if epoch == 0 {
            initial = epoch_loss;
        }
        if diverged(initial, epoch_loss) {
            return Err(ModelError::Divergence {
                epoch: epoch + 1,
                loss: epoch_loss,
                initial,
            });
        }
        epoch_losses.push(epoch_loss);
    }

    let weights: Vec<f32> = w.iter().map(|v| *v as f32).collect();
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), KIND_RANKING.into());
    meta.insert("margin".into(), format!("{margin}"));
    meta.insert("lr".into(), format!("{lr}"));
    meta.insert("epochs".into(), format!("{epochs}"));
    meta.insert("seed".into(), format!("{seed}"));
    meta.insert(
        "epoch_losses".into(),
        epoch_losses
            .iter()
            .map(|l| format!("{l:.6}"))
            .collect::<Vec<_>>()
            .join(","),
    );
    let monotone = epoch_losses
        .windows(2)
        .all(|p| p[1] <= p[0] * (1.0 + 1e-6) + 1e-9);
    meta.insert("loss_monotone".into(), format!("{monotone}"));
    BilinearModel::from_weights(dfeat, dsem, weights, meta)
}

/// Replacement embeddings for test classes: the embedding of the
/// hierarchically nearest training class plus Gaussian noise.
#[derive(Debug, Clone)]
pub struct TrivialEmbedding {
    /// test class -> nearest training class (ties: smallest id).
    pub mapping: BTreeMap<String, String>,
    pub sigma: f64,
    pub seed: u64,
    /// One row per test class, sorted by class id.
    pub matrix: SemanticMatrix,
}

/// σ scaling rule when the caller does not pick one: a thousandth of the
/// mean training-row norm — large enough to break exact ties, far too
/// small to reorder anything else.
pub fn default_trivial_sigma(s_tr: &SemanticMatrix) -> f64 {
    let mean: f64 = (0..s_tr.len())
        .map(|i| s_tr.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / s_tr.len() as f64;
    1e-3 * mean
}

pub fn build_trivial(
    t: &Taxonomy,
    c_tr: &BTreeSet<String>,
    c_te: &BTreeSet<String>,
    s_tr: &SemanticMatrix,
    sigma: f64,
    seed: u64,
) -> Result<TrivialEmbedding, ModelError> {
    if c_te.is_empty() {
        return Err(ModelError::EmptyCandidates);
    }
    if c_tr.is_empty() {
        return Err(TaxonomyError::EmptyTrainingSet.into());
    }
    if let Some(both) = c_tr.intersection(c_te).next() {
        return Err(ModelError::OverlappingSplits(both.clone()));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(ModelError::InvalidHyperparameter {
            name: "sigma",
            value: sigma,
        });
    }
    let sources: Vec<usize> = c_tr
        .iter()
        .map(|c| {
            t.index_of(c)
                .ok_or_else(|| TaxonomyError::UnknownConcept(c.clone()))
        })
        .collect::<Result<_, _>>()?;
    for c in c_tr {
        if !s_tr.contains(c) {
            return Err(ModelError::MissingEmbedding(c.clone()));
        }
    }
    let nearest = t.nearest_of(&sources);

    let mut rng = rng_from_seed(seed);
    let mut mapping = BTreeMap::new();
    let mut rows = Vec::with_capacity(c_te.len());
    for c in c_te {
        let ci = t
            .index_of(c)
            .ok_or_else(|| TaxonomyError::UnknownConcept(c.clone()))?;
        let Some((_, src)) = nearest[ci] else {
            return Err(ModelError::DisconnectedClass(c.clone()));
        };
        let f_c = t.id_at(src).to_owned();
        let base = s_tr.get(&f_c).expect("checked above");
        let row: Vec<f64> = base
            .iter()
            .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        mapping.insert(c.clone(), f_c);
        rows.push((c.clone(), row));
    }
    Ok(TrivialEmbedding {
        mapping,
        sigma,
        seed,
        matrix: SemanticMatrix::new(rows)?,
    })
}

/// Nearest-class-mean base classifier plus the top-T combination rule.
#[derive(Debug, Clone)]
pub struct AveragingModel {
    class_ids: Vec<String>,
    /// Per-class feature-space means, aligned with `class_ids`.
    means: Vec<Vec<f64>>,
    pub temperature: f64,
    pub top_t: usize,
}

pub fn fit_averaging(
    xtr: &FeatureMatrix,
    temperature: f64,
    top_t: usize,
) -> Result<AveragingModel, ModelError> {
    check_positive("temperature", temperature)?;
    let classes: Vec<String> = xtr.classes().map(str::to_owned).collect();
    if top_t == 0 || top_t > classes.len() {
        return Err(ModelError::TopTooLarge {
            t: top_t,
            have: classes.len(),
        });
    }
    let mut means = Vec::with_capacity(classes.len());
    for c in &classes {
        let rows = xtr.class_rows(c);
        let mut mean = vec![0.0f64; xtr.dim()];
        for &i in rows {
            for (m, x) in mean.iter_mut().zip(&xtr.row(i).feature) {
                *m += f64::from(*x);
            }
        }
        for m in &mut mean {
            *m /= rows.len() as f64;
        }
        means.push(mean);
    }
    Ok(AveragingModel {
        class_ids: classes,
        means,
        temperature,
        top_t,
    })
}

impl AveragingModel {
    pub fn class_ids(&self) -> &[String] {
        &self.class_ids
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// Softmax over negative squared distances to the class means,
    /// scaled by `temperature`. Sums to 1.
    pub fn predict_proba(&self, x: &[f32]) -> Result<Vec<f64>, ModelError> {
        let d = self.means[0].len();
        if x.len() != d {
            return Err(ModelError::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
        let d2: Vec<f64> = self
            .means
            .iter()
            .map(|m| {
                m.iter()
                    .zip(x)
                    .map(|(mi, xi)| (mi - f64::from(*xi)).powi(2))
                    .sum()
            })
            .collect();
        let lo = d2.iter().copied().fold(f64::INFINITY, f64::min);
        let raw: Vec<f64> = d2
            .iter()
            .map(|v| (-(v - lo) / self.temperature).exp())
            .collect();
        let z: f64 = raw.iter().sum();
        Ok(raw.into_iter().map(|v| v / z).collect())
    }
}

/// CONSE-style synthesis: ŷ = Σ_{top-T} p(c)·y_c / Σ_{top-T} p(c).
/// `probs` must be nonnegative with total mass ≤ 1; top-T is by
/// descending probability, ties to the smallest id.
pub fn synthesize_embedding(
    probs: &[(String, f64)],
    y_tr: &SemanticMatrix,
    top_t: usize,
) -> Result<Vec<f64>, ModelError> {
    if top_t == 0 || top_t > probs.len() {
        return Err(ModelError::TopTooLarge {
            t: top_t,
            have: probs.len(),
        });
    }
    let mut mass = 0.0;
    for (class, p) in probs {
        if !(p.is_finite() && *p >= 0.0) {
            return Err(ModelError::InvalidProbability {
                class: class.clone(),
                p: *p,
            });
        }
        mass += p;
    }
    if mass > 1.0 + 1e-9 {
        return Err(ModelError::MassExceedsOne(mass));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .1
            .total_cmp(&probs[a].1)
            .then_with(|| probs[a].0.cmp(&probs[b].0))
    });
    let top = &order[..top_t];
    let z: f64 = top.iter().map(|&i| probs[i].1).sum();
    if z == 0.0 {
        return Err(ModelError::AllZeroProbabilities);
    }
    let mut out = vec![0.0f64; y_tr.dim()];
    for &i in top {
        let (class, p) = &probs[i];
        let y = y_tr
            .get(class)
            .ok_or_else(|| ModelError::MissingEmbedding(class.clone()))?;
        for (o, v) in out.iter_mut().zip(y) {
            *o += p * v;
        }
    }
    for o in &mut out {
        *o /= z;
    }
    Ok(out)
}

/// Rank candidates by cosine similarity to `target` (zero-norm pairs score
/// 0), ties by smallest id.
pub fn rank_by_cosine(
    target: &[f64],
    candidates: &SemanticMatrix,
    k: usize,
) -> Result<Vec<String>, ModelError> {
    if candidates.is_empty() {
        return Err(ModelError::EmptyCandidates);
    }
    if k > candidates.len() {
        return Err(ModelError::KTooLarge {
            k,
            have: candidates.len(),
        });
    }
    if candidates.dim() != target.len() {
        return Err(ModelError::DimensionMismatch {
            expected: target.len(),
            got: candidates.dim(),
        });
    }
    let nt = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scores: Vec<f64> = (0..candidates.len())
        .map(|i| {
            let y = candidates.row(i);
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nt == 0.0 || ny == 0.0 {
                0.0
            } else {
                y.iter().zip(target).map(|(a, b)| a * b).sum::<f64>() / (nt * ny)
            }
        })
        .collect();
    Ok(rank_indices(&scores, candidates.ids())
        .into_iter()
        .take(k)
        .map(|i| candidates.ids()[i].clone())
        .collect())
}

/// Full averaging pipeline for one image: probabilities from the base
/// classifier, top-T synthesis over training embeddings, cosine ranking
/// over `candidates`.
pub fn averaging_classify(
    am: &AveragingModel,
    x: &[f32],
    y_tr: &SemanticMatrix,
    candidates: &SemanticMatrix,
    k: usize,
) -> Result<Vec<String>, ModelError> {
    let p = am.predict_proba(x)?;
    let probs: Vec<(String, f64)> = am
        .class_ids
        .iter()
        .cloned()
        .zip(p)
        .collect();
    let target = synthesize_embedding(&probs, y_tr, am.top_t)?;
    rank_by_cosine(&target, candidates, k)
}

/// On-disk model container: a kind tag, an f32 matrix, and key=value
/// metadata. What the matrix means depends on the kind — compatibility
/// weights (D×d) for bilinear kinds, replacement test embeddings for
/// `trivial`, per-class feature means for `averaging`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub rows: u32,
    pub cols: u32,
    pub weights: Vec<f32>,
    pub meta: BTreeMap<String, String>,
}

impl ModelFile {
    pub fn kind(&self) -> &str {
        self.meta.get("kind").map(String::as_str).unwrap_or("")
    }

    pub fn save(&self, mut w: impl Write) -> Result<(), ModelError> {
        w.write_all(ZSBW_MAGIC)?;
        w.write_all(&self.rows.to_le_bytes())?;
        w.write_all(&self.cols.to_le_bytes())?;
        for x in &self.weights {
            w.write_all(&x.to_le_bytes())?;
        }
        let mut block = String::new();
        for (k, v) in &self.meta {
            if k.contains(['\n', '=']) || v.contains('\n') {
                return Err(ModelError::InvalidMeta(format!("unencodable key `{k}`")));
            }
            block.push_str(k);
            block.push('=');
            block.push_str(v);
            block.push('\n');
        }
        w.write_all(&(block.len() as u32).to_le_bytes())?;
        w.write_all(block.as_bytes())?;
        Ok(())
    }

    pub fn load(mut r: impl Read) -> Result<Self, ModelError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(eof)?;
        if &magic != ZSBW_MAGIC {
            return Err(ModelError::BadMagic);
        }
        let rows = read_u32(&mut r)?;
        let cols = read_u32(&mut r)?;
        let count = rows as usize * cols as usize;
        let mut buf = vec![0u8; count * 4];
        r.read_exact(&mut buf).map_err(eof)?;
        let weights: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mlen = read_u32(&mut r)? as usize;
        let mut mbuf = vec![0u8; mlen];
        r.read_exact(&mut mbuf).map_err(eof)?;
        let text =
            String::from_utf8(mbuf).map_err(|_| ModelError::InvalidMeta("not UTF-8".into()))?;
        let mut meta = BTreeMap::new();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::InvalidMeta(format!("bad line `{line}`")))?;
            meta.insert(k.to_owned(), v.to_owned());
        }
        if !meta.contains_key("kind") {
            return Err(ModelError::MissingMeta("kind"));
        }
        Ok(ModelFile {
            rows,
            cols,
            weights,
            meta,
        })
    }

    pub fn load_path(path: impl AsRef<std::path::Path>) -> Result<Self, ModelError> {
        Self::load(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn save_path(&self, path: impl AsRef<std::path::Path>) -> Result<(), ModelError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut f)?;
        use std::io::Write as _;
        f.flush()?;
        Ok(())
    }
}

fn eof(e: std::io::Error) -> ModelError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        ModelError::Truncated
    } else {
        ModelError::Io(e)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(eof)?;
    Ok(u32::from_le_bytes(b))
}

fn meta_get<'a>(
    meta: &'a BTreeMap<String, String>,
    key: &'static str,
) -> Result<&'a str, ModelError> {
    meta.get(key)
        .map(String::as_str)
        .ok_or(ModelError::MissingMeta(key))
}

impl BilinearModel {
    pub fn to_model_file(&self) -> ModelFile {
        ModelFile {
            rows: self.feature_dim as u32,
            cols: self.semantic_dim as u32,
            weights: self.weights.clone(),
            meta: self.meta.clone(),
        }
    }

    pub fn from_model_file(f: &ModelFile) -> Result<Self, ModelError> {
        let kind = f.kind();
        if kind != KIND_CLOSED_FORM && kind != KIND_RANKING {
            return Err(ModelError::WrongKind {
                expected: "bilinear",
                got: kind.to_owned(),
            });
        }
        BilinearModel::from_weights(
            f.rows as usize,
            f.cols as usize,
            f.weights.clone(),
            f.meta.clone(),
        )
    }
}

impl TrivialEmbedding {
    pub fn to_model_file(&self) -> ModelFile {
        let k = self.matrix.len();
        let d = self.matrix.dim();
        let mut weights = Vec::with_capacity(k * d);
        for i in 0..k {
            weights.extend(self.matrix.row(i).iter().map(|v| *v as f32));
        }
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), KIND_TRIVIAL.into());
        meta.insert("sigma".into(), format!("{}", self.sigma));
        meta.insert("seed".into(), format!("{}", self.seed));
        meta.insert("classes".into(), self.matrix.ids().join(","));
        meta.insert(
            "mapping".into(),
            self.mapping
                .iter()
                .map(|(c, f)| format!("{c}:{f}"))
                .collect::<Vec<_>>()
                .join(";"),
        );
        ModelFile {
            rows: k as u32,
            cols: d as u32,
            weights,
            meta,
        }
    }

    pub fn from_model_file(f: &ModelFile) -> Result<Self, ModelError> {
        if f.kind() != KIND_TRIVIAL {
            return Err(ModelError::WrongKind {
                expected: KIND_TRIVIAL,
                got: f.kind().to_owned(),
            });
        }
        let classes: Vec<&str> = meta_get(&f.meta, "classes")?.split(',').collect();
        if classes.len() != f.rows as usize {
            return Err(ModelError::InvalidMeta("class count != rows".into()));
        }
        let d = f.cols as usize;
        let rows: Vec<(String, Vec<f64>)> = classes
            .iter()
            .enumerate()
            .map(|(i, c)| {
                (
                    (*c).to_owned(),
                    f.weights[i * d..(i + 1) * d]
                        .iter()
                        .map(|v| f64::from(*v))
                        .collect(),
                )
            })
            .collect();
        let mut mapping = BTreeMap::new();
        for pair in meta_get(&f.meta, "mapping")?.split(';').filter(|s| !s.is_empty()) {
            let (c, tr) = pair
                .split_once(':')
                .ok_or_else(|| ModelError::InvalidMeta(format!("bad mapping `{pair}`")))?;
            mapping.insert(c.to_owned(), tr.to_owned());
        }
        let sigma: f64 = meta_get(&f.meta, "sigma")?
            .parse()
            .map_err(|_| ModelError::InvalidMeta("bad sigma".into()))?;
        let seed: u64 = meta_get(&f.meta, "seed")?
            .parse()
            .map_err(|_| ModelError::InvalidMeta("bad seed".into()))?;
        Ok(TrivialEmbedding {
            mapping,
            sigma,
            seed,
            matrix: SemanticMatrix::new(rows)?,
        })
    }
}

impl AveragingModel {
    pub fn to_model_file(&self) -> ModelFile {
        let k = self.class_ids.len();
        let d = self.means[0].len();
        let mut weights = Vec::with_capacity(k * d);
        for m in &self.means {
            weights.extend(m.iter().map(|v| *v as f32));
        }
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), KIND_AVERAGING.into());
        meta.insert("temperature".into(), format!("{}", self.temperature));
        meta.insert("top_t".into(), format!("{}", self.top_t));
        meta.insert("classes".into(), self.class_ids.join(","));
        ModelFile {
            rows: k as u32,
            cols: d as u32,
            weights,
            meta,
        }
    }

    pub fn from_model_file(f: &ModelFile) -> Result<Self, ModelError> {
        if f.kind() != KIND_AVERAGING {
            return Err(ModelError::WrongKind {
                expected: KIND_AVERAGING,
                got: f.kind().to_owned(),
            });
        }
        let classes: Vec<String> = meta_get(&f.meta, "classes")?
            .split(',')
            .map(str::to_owned)
            .collect();
        if classes.len() != f.rows as usize {
            return Err(ModelError::InvalidMeta("class count != rows".into()));
        }
        let d = f.cols as usize;
        let means: Vec<Vec<f64>> = (0..classes.len())
            .map(|i| {
                f.weights[i * d..(i + 1) * d]
                    .iter()
                    .map(|v| f64::from(*v))
                    .collect()
            })
            .collect();
        let temperature: f64 = meta_get(&f.meta, "temperature")?
            .parse()
            .map_err(|_| ModelError::InvalidMeta("bad temperature".into()))?;
        let top_t: usize = meta_get(&f.meta, "top_t")?
            .parse()
            .map_err(|_| ModelError::InvalidMeta("bad top_t".into()))?;
        Ok(AveragingModel {
            class_ids: classes,
            means,
            temperature,
            top_t,
        })
    }
}
