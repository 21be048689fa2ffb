//! The seven subcommands, plus the input loaders and scoring glue they
//! share. Every command reads through `RunConfig` and writes through
//! `OutWriter`, so provenance stamping and atomic writes are uniform.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use zsbench_core::datastore::{
    load_blacklist, sample_test_images, FeatureMatrix, NearestClassMean,
};
use zsbench_core::derive_seed;
use zsbench_core::eval::{
    evaluate, factor_impact, harmonic_gzsl, macro_accuracy_over, pearson, write_per_class_tsv,
    write_report_text, write_topk_tsv, write_xy_tsv, FactorConfig, TopkRow,
};
use zsbench_core::models::{
    build_trivial, classify, default_trivial_sigma, fit_averaging, fit_closed_form, fit_ranking,
    synthesize_embedding, AveragingModel, BilinearModel, ModelError, ModelFile, SemanticMatrix,
    TrivialEmbedding, KIND_AVERAGING, KIND_CLOSED_FORM, KIND_RANKING, KIND_TRIVIAL,
};
use zsbench_core::semantics::{
    build_semantic_profile, cosine, count_occurrences, dot, tokenize, EmbeddingTable,
    FrequencyTable, SemanticProfile,
};
use zsbench_core::splitbuilder::{
    build_candidate_pool, optimize_split, standard_splits, structural_ratio_set, write_ledger_tsv,
    write_structural_tsv, write_trace_tsv, PoolThresholds, SplitSpec, DEFAULT_SWAP_CAP,
};
use zsbench_core::taxonomy::Taxonomy;

use crate::config::RunConfig;
use crate::output::OutWriter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModelKind {
    ClosedForm,
    Ranking,
    Trivial,
    Averaging,
}

impl ModelKind {
    fn as_str(self) -> &'static str {
        match self {
            ModelKind::ClosedForm => KIND_CLOSED_FORM,
            ModelKind::Ranking => KIND_RANKING,
            ModelKind::Trivial => KIND_TRIVIAL,
            ModelKind::Averaging => KIND_AVERAGING,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Setting {
    Zsl,
    Gzsl,
}

impl Setting {
    fn as_str(self) -> &'static str {
        match self {
            Setting::Zsl => "zsl",
            Setting::Gzsl => "gzsl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Sweep {
    Frequency,
    Population,
    StructuralRatio,
    Impact,
}

impl Sweep {
    /// Column name inside the sweep table.
    fn x_name(self) -> &'static str {
        match self {
            Sweep::Frequency => "frequency",
            Sweep::Population => "population",
            Sweep::StructuralRatio => "structural_ratio",
            Sweep::Impact => "impact",
        }
    }

    /// File-name fragment, matching the CLI's kebab-case flag values.
    fn file_slug(self) -> &'static str {
        match self {
            Sweep::StructuralRatio => "structural-ratio",
            other => other.x_name(),
        }
    }
}

// ---------------------------------------------------------------- loaders

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn load_taxonomy(cfg: &RunConfig) -> Result<Taxonomy> {
    let edges = cfg.require_path("paths.taxonomy")?;
    let t = match cfg.get("paths.lemmas") {
        Some(_) => {
            let lemmas = cfg.require_path("paths.lemmas")?;
            Taxonomy::load(open(&edges)?, open(&lemmas)?)
        }
        None => Taxonomy::load(open(&edges)?, io::empty()),
    }
    .with_context(|| format!("loading taxonomy {}", edges.display()))?;
    Ok(t)
}

fn load_embeddings(cfg: &RunConfig) -> Result<EmbeddingTable> {
    let path = cfg.require_path("paths.embeddings")?;
    EmbeddingTable::load(open(&path)?)
        .with_context(|| format!("loading embeddings {}", path.display()))
}

fn load_frequencies(cfg: &RunConfig) -> Result<FrequencyTable> {
    match cfg.get("paths.frequencies") {
        None => Ok(FrequencyTable::default()),
        Some(_) => {
            let path = cfg.require_path("paths.frequencies")?;
            FrequencyTable::load(open(&path)?)
                .with_context(|| format!("loading frequencies {}", path.display()))
        }
    }
}

fn load_features(cfg: &RunConfig) -> Result<FeatureMatrix> {
    let path = cfg.require_path("paths.features")?;
    FeatureMatrix::load_path(&path).with_context(|| format!("loading features {}", path.display()))
}

fn load_blacklist_cfg(cfg: &RunConfig) -> Result<BTreeMap<String, String>> {
    match cfg.get("paths.blacklist") {
        None => Ok(BTreeMap::new()),
        Some(_) => {
            let path = cfg.require_path("paths.blacklist")?;
            load_blacklist(open(&path)?)
                .with_context(|| format!("loading blacklist {}", path.display()))
        }
    }
}

fn load_train_classes(cfg: &RunConfig) -> Result<BTreeSet<String>> {
    let path = cfg.require_path("paths.train_classes")?;
    let text =
        fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let classes: BTreeSet<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect();
    if classes.is_empty() {
        bail!("train class list {} is empty", path.display());
    }
    Ok(classes)
}

fn load_split(cfg: &RunConfig, flag: Option<&Path>) -> Result<(SplitSpec, PathBuf)> {
    let path = match flag {
        Some(p) => p.to_owned(),
        None => cfg.require_path("paths.split")?,
    };
    let spec = SplitSpec::load_path(&path)
        .with_context(|| format!("loading split {}", path.display()))?;
    Ok((spec, path))
}

fn semantic_profile(cfg: &RunConfig, t: &Taxonomy) -> Result<SemanticProfile> {
    let e = load_embeddings(cfg)?;
    let f = load_frequencies(cfg)?;
    Ok(build_semantic_profile(t, &e, &f)?)
}

/// Embeddings for exactly `ids`, drawn from the semantic profile.
fn class_matrix(ids: &BTreeSet<String>, profile: &SemanticProfile) -> Result<SemanticMatrix> {
    let by_id: BTreeMap<&str, &Vec<f64>> = profile
        .classes
        .iter()
        .map(|c| (c.class_id.as_str(), &c.embedding))
        .collect();
    Ok(SemanticMatrix::for_classes(ids, |id| {
        by_id
            .get(id)
            .map(|v| (*v).clone())
            .ok_or_else(|| ModelError::MissingEmbedding(id.to_owned()))
    })?)
}

fn render(f: impl FnOnce(&mut Vec<u8>) -> io::Result<()>) -> Result<String> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(String::from_utf8(buf).expect("report writers emit utf-8"))
}

// ---------------------------------------------------------------- scoring

/// A loaded model reduced to the one thing evaluation needs: a score per
/// candidate class for one feature vector.
enum Scorer {
    Bilinear(BilinearModel),
    Averaging {
        model: AveragingModel,
        y_tr: SemanticMatrix,
    },
}

impl Scorer {
    fn against(&self, x: &[f32], candidates: &SemanticMatrix) -> Result<Vec<f64>, ModelError> {
        match self {
            Scorer::Bilinear(m) => {
                let p = m.project(x)?;
                Ok((0..candidates.len())
                    .map(|i| dot(&p, candidates.row(i)))
                    .collect())
            }
            Scorer::Averaging { model, y_tr } => {
                let probs = model.predict_proba(x)?;
                let pairs: Vec<(String, f64)> =
                    model.class_ids().iter().cloned().zip(probs).collect();
                let emb = synthesize_embedding(&pairs, y_tr, model.top_t)?;
                Ok((0..candidates.len())
                    .map(|i| cosine(&emb, candidates.row(i)))
                    .collect())
            }
        }
    }
}

fn build_scorer(
    mf: &ModelFile,
    cfg: &RunConfig,
    spec: &SplitSpec,
    profile: &SemanticProfile,
    features: &FeatureMatrix,
) -> Result<Scorer> {
    match mf.kind() {
        KIND_CLOSED_FORM | KIND_RANKING => {
            Ok(Scorer::Bilinear(BilinearModel::from_model_file(mf)?))
        }
        KIND_TRIVIAL => {
            // The taxonomy-only solution carries class embeddings, not
            // feature weights; score it through a ridge map fitted on the
            // training split, exactly like the model it stands in for.
            let s_tr = class_matrix(&spec.train, profile)?;
            let xtr = features.retain_classes(&spec.train)?;
            let gamma = cfg.f64_key("model.gamma", 1.0)?;
            let lambda = cfg.f64_key("model.lambda", 1.0)?;
            Ok(Scorer::Bilinear(fit_closed_form(&xtr, &s_tr, gamma, lambda)?))
        }
        KIND_AVERAGING => {
            let model = AveragingModel::from_model_file(mf)?;
            let ids: BTreeSet<String> = model.class_ids().iter().cloned().collect();
            let y_tr = class_matrix(&ids, profile)?;
            Ok(Scorer::Averaging { model, y_tr })
        }
        other => bail!("unsupported model kind `{other}`"),
    }
}

/// Candidate embeddings for the given test classes: a trivial model brings
/// its own synthetic rows, every other kind scores profile embeddings.
fn test_candidates(
    mf: &ModelFile,
    wanted: &BTreeSet<String>,
    profile: &SemanticProfile,
) -> Result<SemanticMatrix> {
    if mf.kind() == KIND_TRIVIAL {
        let te = TrivialEmbedding::from_model_file(mf)?;
        Ok(SemanticMatrix::for_classes(wanted, |id| {
            te.matrix
                .get(id)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| ModelError::MissingEmbedding(id.to_owned()))
        })
        .context("the model was built for a different test split")?)
    } else {
        class_matrix(wanted, profile)
    }
}

fn check_dims(
    scorer: &Scorer,
    features: &FeatureMatrix,
    candidates: &SemanticMatrix,
) -> Result<()> {
    match scorer {
        Scorer::Bilinear(m) => {
            if m.feature_dim() != features.dim() {
                bail!(
                    "model expects {}-dimensional features, matrix has {}",
                    m.feature_dim(),
                    features.dim()
                );
            }
            if m.semantic_dim() != candidates.dim() {
                bail!(
                    "model semantic dimension {} does not match the candidate embeddings ({})",
                    m.semantic_dim(),
                    candidates.dim()
                );
            }
        }
        Scorer::Averaging { y_tr, .. } => {
            if y_tr.dim() != candidates.dim() {
                bail!(
                    "synthesized embeddings ({}) do not match the candidate embeddings ({})",
                    y_tr.dim(),
                    candidates.dim()
                );
            }
        }
    }
    Ok(())
}

/// Draw up to `per_class` feature rows for every class, deterministically
/// per (seed, label, class). Classes with fewer rows contribute them all.
fn sample_rows(
    features: &FeatureMatrix,
    classes: &BTreeSet<String>,
    per_class: usize,
    seed: u64,
    label: &str,
) -> Result<Vec<(Vec<f32>, String)>> {
    let mut out = Vec::new();
    for class in classes {
        let pop = features.class_rows(class).len();
        if pop == 0 {
            bail!("class {class} has no feature rows");
        }
        let n = per_class.min(pop);
        let images = sample_test_images(
            features,
            class,
            n,
            derive_seed(seed, &format!("{label}:{class}")),
        )?;
        for img in images {
            let row = features
                .row_by_image(&img)
                .expect("image id sampled from this matrix");
            out.push((row.feature.clone(), class.clone()));
        }
    }
    Ok(out)
}

// --------------------------------------------------------------- commands

pub fn ingest(cfg: &RunConfig) -> Result<()> {
    let mut warnings = 0usize;
    let mut warn = |n: usize, msg: String| {
        if n > 0 {
            warnings += n;
            println!("warning: {msg}");
        }
    };

    let t = load_taxonomy(cfg)?;
    println!("concepts\t{}", t.len());
    println!("edges\t{}", t.edge_count());
    let orphans = t.orphans();
    println!("orphans\t{}", orphans.len());
    warn(
        orphans.len(),
        format!(
            "{} concepts outside the main component: {}",
            orphans.len(),
            preview(orphans)
        ),
    );

    if cfg.get("paths.embeddings").is_some() {
        let e = load_embeddings(cfg)?;
        println!("embedding_words\t{}", e.len());
        println!("embedding_dim\t{}", e.dim());
        let p = semantic_profile(cfg, &t)?;
        println!("embedded_classes\t{}", p.classes.len());
        println!("skipped_classes\t{}", p.skipped.len());
        warn(
            p.skipped.len(),
            format!(
                "{} classes lack an embeddable lemma: {}",
                p.skipped.len(),
                preview(&p.skipped)
            ),
        );
        println!("unresolved_words\t{}", p.unresolved_words.len());
        warn(
            p.unresolved_words.len(),
            format!(
                "{} shared words resolved to no primary sense: {}",
                p.unresolved_words.len(),
                preview(&p.unresolved_words)
            ),
        );
    }

    if cfg.get("paths.frequencies").is_some() {
        let f = load_frequencies(cfg)?;
        println!("frequency_entries\t{}", f.len());
    }

    if cfg.get("paths.features").is_some() {
        let m = load_features(cfg)?;
        println!("feature_rows\t{}", m.len());
        println!("feature_classes\t{}", m.classes().count());
        println!("feature_dim\t{}", m.dim());
        let unknown = m.unknown_classes(&t);
        println!("feature_unknown_classes\t{}", unknown.len());
        warn(
            unknown.len(),
            format!(
                "{} feature classes missing from the taxonomy: {}",
                unknown.len(),
                preview(&unknown)
            ),
        );
    }

    if cfg.get("paths.blacklist").is_some() {
        let b = load_blacklist_cfg(cfg)?;
        println!("blacklist_entries\t{}", b.len());
    }

    if cfg.get("paths.train_classes").is_some() {
        let tr = load_train_classes(cfg)?;
        println!("train_classes\t{}", tr.len());
        let unknown: Vec<String> = tr.iter().filter(|c| !t.contains(c)).cloned().collect();
        println!("train_unknown\t{}", unknown.len());
        warn(
            unknown.len(),
            format!(
                "{} training classes missing from the taxonomy: {}",
                unknown.len(),
                preview(&unknown)
            ),
        );
    }

    println!("warnings\t{warnings}");
    Ok(())
}

fn preview(items: &[String]) -> String {
    const SHOW: usize = 5;
    let mut s = items
        .iter()
        .take(SHOW)
        .map(String::as_str)
        .collect::<Vec<_>>()
        .join(", ");
    if items.len() > SHOW {
        s.push_str(", ...");
    }
    s
}

pub fn build_split(cfg: &RunConfig) -> Result<()> {
    let t = load_taxonomy(cfg)?;
    let c_tr = load_train_classes(cfg)?;
    let profile = semantic_profile(cfg, &t)?;
    let features = load_features(cfg)?;
    let blacklist = load_blacklist_cfg(cfg)?;
    let thresholds = PoolThresholds {
        min_frequency: cfg.u64_key("thresholds.frequency", 500)?,
        min_population: cfg.usize_key("thresholds.population", 300)?,
        per_class_samples: cfg.usize_key("thresholds.per_class_samples", 100)?,
        quality_classes: cfg.usize_key("thresholds.quality_classes", 1000)?,
        quality_train: cfg.usize_key("thresholds.quality_train", 250)?,
    };

    let mut clf = NearestClassMean::default();
    let pool = build_candidate_pool(
        &t,
        &c_tr,
        &profile,
        &features,
        &mut clf,
        &blacklist,
        &thresholds,
        derive_seed(cfg.seed, "pool"),
    )?;
    println!("pool\t{}", pool.pool.len());

    let size = cfg.usize_key("split.size", 500)?;
    let swap_cap = cfg.usize_key("split.swap_cap", DEFAULT_SWAP_CAP)?;
    let mut opt = optimize_split(
        &pool.pool,
        &c_tr,
        &t,
        size,
        derive_seed(cfg.seed, "split"),
        swap_cap,
    )?;
    println!("seed_ratio\t{:.6}", opt.seed_ratio);
    println!("final_ratio\t{:.6}", opt.final_ratio);
    println!("swaps\t{}", opt.swaps.len());

    let c = &mut opt.spec.constraints;
    c.insert("frequency".into(), thresholds.min_frequency.to_string());
    c.insert("population".into(), thresholds.min_population.to_string());
    c.insert(
        "per_class_samples".into(),
        thresholds.per_class_samples.to_string(),
    );
    c.insert(
        "quality_classes".into(),
        thresholds.quality_classes.to_string(),
    );
    c.insert("quality_train".into(), thresholds.quality_train.to_string());
    let p = &mut opt.spec.provenance;
    p.insert("config".into(), cfg.hash.clone());
    p.insert("run_seed".into(), cfg.seed.to_string());

    let out = OutWriter::new(cfg)?;
    for (name, body) in [
        ("split.spec", render(|w| opt.spec.save(w))?),
        ("ledger.tsv", render(|w| write_ledger_tsv(&pool.ledger, w))?),
        (
            "trace.tsv",
            render(|w| write_trace_tsv(opt.seed_ratio, &opt.swaps, w))?,
        ),
        (
            "structural.tsv",
            render(|w| write_structural_tsv(&opt.report, w))?,
        ),
    ] {
        let path = out.write_text(name, &body)?;
        println!("wrote\t{}", path.display());
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, kind: ModelKind) -> Result<()> {
    let t = load_taxonomy(cfg)?;
    let (spec, _) = load_split(cfg, None)?;

    let mut mf = match kind {
        ModelKind::ClosedForm | ModelKind::Ranking => {
            let profile = semantic_profile(cfg, &t)?;
            let s_tr = class_matrix(&spec.train, &profile)?;
            let features = load_features(cfg)?;
            let xtr = features.retain_classes(&spec.train)?;
            let model = match kind {
                ModelKind::ClosedForm => fit_closed_form(
                    &xtr,
                    &s_tr,
                    cfg.f64_key("model.gamma", 1.0)?,
                    cfg.f64_key("model.lambda", 1.0)?,
                )?,
                _ => fit_ranking(
                    &xtr,
                    &s_tr,
                    cfg.f64_key("model.margin", 0.1)?,
                    cfg.f64_key("model.lr", 0.01)?,
                    cfg.usize_key("model.epochs", 50)?,
                    derive_seed(cfg.seed, "ranking"),
                )?,
            };
            let mut hits = 0usize;
            for row in xtr.rows() {
                if classify(&model, &row.feature, &s_tr, 1)?[0] == row.class_id {
                    hits += 1;
                }
            }
            println!("train_top1\t{:.6}", hits as f64 / xtr.len() as f64);
            model.to_model_file()
        }
        ModelKind::Trivial => {
            let profile = semantic_profile(cfg, &t)?;
            let s_tr = class_matrix(&spec.train, &profile)?;
            let raw = cfg.str_key("model.sigma", "auto");
            let sigma = if raw == "auto" {
                default_trivial_sigma(&s_tr)
            } else {
                raw.parse()
                    .with_context(|| format!("config key model.sigma: cannot parse `{raw}`"))?
            };
            println!("sigma\t{sigma:.6e}");
            build_trivial(
                &t,
                &spec.train,
                &spec.test,
                &s_tr,
                sigma,
                derive_seed(cfg.seed, "trivial"),
            )?
            .to_model_file()
        }
        ModelKind::Averaging => {
            let features = load_features(cfg)?;
            let xtr = features.retain_classes(&spec.train)?;
            fit_averaging(
                &xtr,
                cfg.f64_key("model.temperature", 1.0)?,
                cfg.usize_key("model.top_t", 5)?,
            )?
            .to_model_file()
        }
    };
    mf.meta.insert("config".into(), cfg.hash.clone());
    mf.meta.insert("seed".into(), cfg.seed.to_string());

    let mut bytes = Vec::new();
    mf.save(&mut bytes)?;
    let out = OutWriter::new(cfg)?;
    let path = out.write_bytes(&format!("model-{}.zsbw", kind.as_str()), bytes)?;
    println!("model\t{}", kind.as_str());
    println!("wrote\t{}", path.display());
    Ok(())
}

pub fn eval(
    cfg: &RunConfig,
    model_path: &Path,
    setting: Setting,
    split_flag: Option<&Path>,
) -> Result<()> {
    let t = load_taxonomy(cfg)?;
    let (spec, split_path) = load_split(cfg, split_flag)?;
    let profile = semantic_profile(cfg, &t)?;
    let features = load_features(cfg)?;
    let mf = ModelFile::load_path(model_path)
        .with_context(|| format!("loading model {}", model_path.display()))?;

    let te_cands = test_candidates(&mf, &spec.test, &profile)?;
    let (candidates, classes): (SemanticMatrix, BTreeSet<String>) = match setting {
        Setting::Zsl => (te_cands, spec.test.clone()),
        Setting::Gzsl => {
            let s_tr = class_matrix(&spec.train, &profile)?;
            (
                SemanticMatrix::concat(&s_tr, &te_cands)?,
                spec.train.union(&spec.test).cloned().collect(),
            )
        }
    };
    let scorer = build_scorer(&mf, cfg, &spec, &profile, &features)?;
    check_dims(&scorer, &features, &candidates)?;

    let testset = sample_rows(
        &features,
        &classes,
        cfg.usize_key("eval.samples_per_class", 100)?,
        cfg.seed,
        "eval",
    )?;
    let ks = cfg.ks()?;
    let report = evaluate(&testset, &candidates, &t, &ks, |x| {
        scorer.against(x, &candidates)
    })?;

    let k0 = report.ks[0];
    println!("setting\t{}", setting.as_str());
    println!("samples\t{}", report.n_samples);
    println!("macro_top{k0}\t{:.6}", report.macro_topk[&k0]);

    let mut text = render(|w| write_report_text(&report, w))?;
    if setting == Setting::Gzsl {
        let acc_tr = macro_accuracy_over(&report, &spec.train, k0)
            .context("no training-class samples in the report")?;
        let acc_te = macro_accuracy_over(&report, &spec.test, k0)
            .context("no test-class samples in the report")?;
        let h = harmonic_gzsl(acc_tr, acc_te);
        text.push_str(&format!(
            "gzsl_train\t{acc_tr:.6}\ngzsl_test\t{acc_te:.6}\ngzsl_harmonic\t{h:.6}\n"
        ));
        println!("gzsl_harmonic\t{h:.6}");
    }

    let stem = split_path
        .file_stem()
        .map_or_else(|| "split".to_owned(), |s| s.to_string_lossy().into_owned());
    let topk: Vec<TopkRow> = report
        .ks
        .iter()
        .map(|&k| TopkRow {
            split: stem.clone(),
            setting: setting.as_str().to_owned(),
            k,
            macro_acc: report.macro_topk[&k],
            micro_acc: report.micro_topk[&k],
        })
        .collect();

    let out = OutWriter::new(cfg)?;
    let s = setting.as_str();
    for (name, body) in [
        (format!("eval-{s}.txt"), text),
        (
            format!("eval-{s}-per-class.tsv"),
            render(|w| write_per_class_tsv(&report, w))?,
        ),
        (
            format!("eval-{s}-topk.tsv"),
            render(|w| write_topk_tsv(&topk, w))?,
        ),
    ] {
        let path = out.write_text(&name, &body)?;
        println!("wrote\t{}", path.display());
    }
    Ok(())
}

pub fn analyze(cfg: &RunConfig, sweep: Sweep, model_flag: Option<&Path>) -> Result<()> {
    if sweep == Sweep::Impact {
        return analyze_impact(cfg);
    }
    let Some(model_path) = model_flag else {
        bail!("--model is required for a {} sweep", sweep.x_name());
    };

    let t = load_taxonomy(cfg)?;
    let (spec, _) = load_split(cfg, None)?;
    let profile = semantic_profile(cfg, &t)?;
    let features = load_features(cfg)?;
    let mf = ModelFile::load_path(model_path)
        .with_context(|| format!("loading model {}", model_path.display()))?;

    // Sort the test classes by the sweep variable, then chunk them into
    // consecutive fixed-size windows, each evaluated as its own split.
    let mut key: BTreeMap<String, f64> = BTreeMap::new();
    match sweep {
        Sweep::Frequency => {
            let by_id: BTreeMap<&str, u64> = profile
                .classes
                .iter()
                .map(|c| (c.class_id.as_str(), c.frequency))
                .collect();
            for c in &spec.test {
                let Some(&f) = by_id.get(c.as_str()) else {
                    bail!("test class {c} is missing from the semantic profile");
                };
                key.insert(c.clone(), f as f64);
            }
        }
        Sweep::Population => {
            let pops = features.class_populations();
            for c in &spec.test {
                let Some(&p) = pops.get(c) else {
                    bail!("test class {c} has no feature rows");
                };
                key.insert(c.clone(), p as f64);
            }
        }
        Sweep::StructuralRatio => {
            let rep = structural_ratio_set(&spec.test, &spec.train, &t)?;
            for (c, cr) in &rep.per_class {
                key.insert(c.clone(), cr.ratio);
            }
        }
        Sweep::Impact => unreachable!("handled above"),
    }
    let mut sorted: Vec<&String> = spec.test.iter().collect();
    sorted.sort_by(|a, b| key[*a].total_cmp(&key[*b]).then_with(|| a.cmp(b)));

    let window = cfg.usize_key("analyze.window", 100)?;
    if window == 0 {
        bail!("config key analyze.window must be positive");
    }
    let n_windows = sorted.len() / window;
    if n_windows < 2 {
        bail!(
            "need at least 2 windows of {window} classes, have {} test classes",
            sorted.len()
        );
    }

    let scorer = build_scorer(&mf, cfg, &spec, &profile, &features)?;
    let per_class = cfg.usize_key("eval.samples_per_class", 100)?;
    let mut points = Vec::with_capacity(n_windows);
    for wi in 0..n_windows {
        let wset: BTreeSet<String> = sorted[wi * window..(wi + 1) * window]
            .iter()
            .map(|s| (*s).clone())
            .collect();
        let candidates = test_candidates(&mf, &wset, &profile)?;
        check_dims(&scorer, &features, &candidates)?;
        let testset = sample_rows(&features, &wset, per_class, cfg.seed, "analyze")?;
        let report = evaluate(&testset, &candidates, &t, &[1], |x| {
            scorer.against(x, &candidates)
        })?;
        let y = report.macro_topk[&1];
        let x = match sweep {
            Sweep::StructuralRatio => structural_ratio_set(&wset, &spec.train, &t)?.ratio,
            _ => wset.iter().map(|c| key[c]).sum::<f64>() / wset.len() as f64,
        };
        points.push((x, y));
    }

    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let r = pearson(&xs, &ys)?;

    let mut body = render(|w| write_xy_tsv(sweep.x_name(), "top1_macro", &points, w))?;
    body.push_str(&format!("#pearson\t{r:.6}\n"));
    let out = OutWriter::new(cfg)?;
    let path = out.write_text(&format!("sweep-{}.tsv", sweep.file_slug()), &body)?;
    println!("windows\t{n_windows}");
    println!("pearson\t{r:.6}");
    println!("wrote\t{}", path.display());
    Ok(())
}

fn analyze_impact(cfg: &RunConfig) -> Result<()> {
    let path = cfg.require_path("paths.factorial")?;
    let results = parse_factorial(&path)?;
    let impact = factor_impact(&results)?;

    let body = format!(
        "factor\timpact\nvisual\t{:.6}\nsemantic\t{:.6}\nhierarchical\t{:.6}\n",
        impact.visual, impact.semantic, impact.hierarchical
    );
    let out = OutWriter::new(cfg)?;
    let written = out.write_text("impact.tsv", &body)?;
    println!("visual\t{:.6}", impact.visual);
    println!("semantic\t{:.6}", impact.semantic);
    println!("hierarchical\t{:.6}", impact.hierarchical);
    println!("wrote\t{}", written.display());
    Ok(())
}

/// Parse a `visual\tsemantic\thierarchical\taccuracy` table with 0/1 flags.
fn parse_factorial(path: &Path) -> Result<BTreeMap<FactorConfig, f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("visual") {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let err = |msg: &str| format!("{}:{}: {msg}", path.display(), lineno + 1);
        if parts.len() != 4 {
            bail!("{}", err("expected 4 tab-separated columns"));
        }
        let flag = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            other => bail!("{}", err(&format!("flag must be 0 or 1, got `{other}`"))),
        };
        let cfg = FactorConfig {
            visual: flag(parts[0])?,
            semantic: flag(parts[1])?,
            hierarchical: flag(parts[2])?,
        };
        let acc: f64 = parts[3]
            .parse()
            .with_context(|| err("accuracy is not a number"))?;
        if out.insert(cfg, acc).is_some() {
            bail!("{}", err("duplicate factor configuration"));
        }
    }
    Ok(out)
}

pub fn count_freq(cfg: &RunConfig, corpus: &Path, words: &Path) -> Result<()> {
    let word_text =
        fs::read_to_string(words).with_context(|| format!("reading {}", words.display()))?;
    let vocab: BTreeSet<String> = word_text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect();
    if vocab.is_empty() {
        bail!("word list {} is empty", words.display());
    }
    let corpus_text =
        fs::read_to_string(corpus).with_context(|| format!("reading {}", corpus.display()))?;
    let table = count_occurrences(tokenize(&corpus_text), &vocab);

    let out = OutWriter::new(cfg)?;
    let body = render(|w| table.save(w))?;
    let path = out.write_text("frequencies.tsv", &body)?;
    println!("entries\t{}", table.len());
    println!("wrote\t{}", path.display());
    Ok(())
}

pub fn hop_split(cfg: &RunConfig) -> Result<()> {
    let t = load_taxonomy(cfg)?;
    let c_tr = load_train_classes(cfg)?;
    let splits = standard_splits(&t, &c_tr)?;
    let out = OutWriter::new(cfg)?;
    for (name, classes) in &splits {
        let mut body = String::new();
        for c in classes {
            body.push_str(c);
            body.push('\n');
        }
        let path = out.write_text(&format!("{name}.txt"), &body)?;
        println!("{name}\t{}", classes.len());
        println!("wrote\t{}", path.display());
    }
    Ok(())
}
