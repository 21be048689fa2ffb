//! Word-embedding semantics for taxonomy classes: corpus frequency
//! counting, per-class embedding construction, and polysemy resolution.
//!
//! A class is "known by" its first lemma. Multi-word lemmas are stored with
//! underscores (`sea_lion`) and matched in token streams as consecutive
//! token runs. Embeddings for phrases fall back to the mean of their
//! embedded tokens when the joined form has no entry of its own.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::taxonomy::{Taxonomy, TaxonomyError};

#[derive(Debug, Error)]
pub enum SemanticsError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate word `{0}` in embedding table")]
    DuplicateWord(String),
    #[error("embedding for `{word}` has {got} dimensions, expected {expected}")]
    DimensionMismatch {
        word: String,
        expected: usize,
        got: usize,
    },
    #[error("embedding for `{0}` contains a non-finite value")]
    NonFinite(String),
    #[error("embedding table is empty")]
    EmptyTable,
    #[error("no embeddable tokens for `{0}`")]
    UnembeddableWord(String),
    #[error("class `{0}` has no embeddable lemma")]
    UnembeddableClass(String),
    #[error("sense `{0}` has no embeddable hierarchy neighbors to score against")]
    Unscorable(String),
    #[error("no scorable sense for word `{0}`")]
    NoScorableSense(String),
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

/// Dense word vectors, all the same dimension, keyed by surface form.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    /// Parse `word v1 .. vd` lines (whitespace separated). An optional
    /// leading `count dim` header line is accepted and checked loosely
    /// (two integer tokens). Rejects duplicates, ragged rows and
    /// non-finite values.
    pub fn load(reader: impl BufRead) -> Result<Self, SemanticsError> {
        let mut dim = None;
        let mut table = HashMap::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let mut toks = line.split_whitespace();
            let Some(word) = toks.next() else { continue };
            let vals: Vec<&str> = toks.collect();
            if lineno == 0 && vals.len() == 1 {
                // `count dim` header
                if word.parse::<usize>().is_ok() && vals[0].parse::<usize>().is_ok() {
                    continue;
                }
            }
            let mut v = Vec::with_capacity(vals.len());
            for t in &vals {
                let x: f64 = t.parse().map_err(|_| SemanticsError::Parse {
                    line: lineno + 1,
                    msg: format!("bad float `{t}`"),
                })?;
                v.push(x);
            }
            if v.is_empty() {
                return Err(SemanticsError::Parse {
                    line: lineno + 1,
                    msg: format!("no values for `{word}`"),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(SemanticsError::NonFinite(word.to_owned()));
            }
            let d = *dim.get_or_insert(v.len());
            if v.len() != d {
                return Err(SemanticsError::DimensionMismatch {
                    word: word.to_owned(),
                    expected: d,
                    got: v.len(),
                });
            }
            if table.insert(word.to_owned(), v).is_some() {
                return Err(SemanticsError::DuplicateWord(word.to_owned()));
            }
        }
        match dim {
            None => Err(SemanticsError::EmptyTable),
            Some(dim) => Ok(EmbeddingTable { dim, table }),
        }
    }

    pub fn from_pairs(
        pairs: impl IntoIterator<Item = (String, Vec<f64>)>,
    ) -> Result<Self, SemanticsError> {
        let mut dim = None;
        let mut table = HashMap::new();
        for (word, v) in pairs {
            let d = *dim.get_or_insert(v.len());
            if v.len() != d {
                return Err(SemanticsError::DimensionMismatch {
                    word,
                    expected: d,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(SemanticsError::NonFinite(word));
            }
            if table.contains_key(&word) {
                return Err(SemanticsError::DuplicateWord(word));
            }
            table.insert(word, v);
        }
        match dim {
            None => Err(SemanticsError::EmptyTable),
            Some(dim) => Ok(EmbeddingTable { dim, table }),
        }
    }

    /// Write with a `count dim` header, rows sorted by word, floats in
    /// shortest round-tripping decimal form.
    pub fn save(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{} {}", self.table.len(), self.dim)?;
        let mut words: Vec<&String> = self.table.keys().collect();
        words.sort();
        for word in words {
            write!(w, "{word}")?;
            for x in &self.table[word] {
                write!(w, " {x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.table.get(word).map(Vec::as_slice)
    }
}

/// Corpus occurrence counts per vocabulary entry. Absent means zero.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrequencyTable {
    counts: BTreeMap<String, u64>,
}

impl FrequencyTable {
    pub fn load(reader: impl BufRead) -> Result<Self, SemanticsError> {
        let mut counts = BTreeMap::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, count) = line.split_once('\t').ok_or_else(|| SemanticsError::Parse {
                line: lineno + 1,
                msg: "expected `word\\tcount`".into(),
            })?;
            let c: u64 = count.parse().map_err(|_| SemanticsError::Parse {
                line: lineno + 1,
                msg: format!("bad count `{count}`"),
            })?;
            counts.insert(word.to_owned(), c);
        }
        Ok(FrequencyTable { counts })
    }

    pub fn save(&self, mut w: impl Write) -> std::io::Result<()> {
        for (word, c) in &self.counts {
            writeln!(w, "{word}\t{c}")?;
        }
        Ok(())
    }

    pub fn count(&self, word: &str) -> u64 {
        self.counts.get(word).copied().unwrap_or(0)
    }

    pub fn set(&mut self, word: impl Into<String>, count: u64) {
        self.counts.insert(word.into(), count);
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn merge(&mut self, other: &FrequencyTable) {
        for (w, c) in &other.counts {
            *self.counts.entry(w.clone()).or_insert(0) += c;
        }
    }
}

/// Lowercase alphanumeric tokens; every other character separates.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
}

/// Count how often each vocabulary entry occurs in a token stream.
///
/// Entries are underscore-joined token sequences (`sea_lion` matches the
/// consecutive tokens `sea lion`). One pass, O(stream x matches): a ring
/// buffer of the last `max_phrase_len` tokens is checked against all
/// phrases ending in the newest token. Overlapping and nested matches all
/// count, so `lap dog` bumps both `lap_dog` and `dog`.
pub fn count_occurrences(
    tokens: impl IntoIterator<Item = String>,
    vocab: &BTreeSet<String>,
) -> FrequencyTable {
    let phrases: Vec<(&String, Vec<&str>)> = vocab
        .iter()
        .map(|entry| (entry, entry.split('_').filter(|p| !p.is_empty()).collect()))
        .filter(|(_, parts): &(_, Vec<&str>)| !parts.is_empty())
        .collect();
    let max_len = phrases.iter().map(|(_, p)| p.len()).max().unwrap_or(0);
    let mut by_last: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, (_, parts)) in phrases.iter().enumerate() {
        by_last.entry(parts[parts.len() - 1]).or_default().push(i);
    }

    let mut counts = vec![0u64; phrases.len()];
    let mut ring: VecDeque<String> = VecDeque::with_capacity(max_len.max(1));
    for tok in tokens {
        if max_len == 0 {
            break;
        }
        if ring.len() == max_len {
            ring.pop_front();
        }
        ring.push_back(tok);
        let Some(cands) = by_last.get(ring.back().map(String::as_str).unwrap_or("")) else {
            continue;
        };
        for &pi in cands {
            let parts = &phrases[pi].1;
            if parts.len() > ring.len() {
                continue;
            }
            let tail = ring.iter().skip(ring.len() - parts.len());
            if tail.zip(parts).all(|(t, p)| t == p) {
                counts[pi] += 1;
            }
        }
    }

    let mut out = FrequencyTable::default();
    for (i, (entry, _)) in phrases.iter().enumerate() {
        out.set((*entry).clone(), counts[i]);
    }
    out
}

/// One taxonomy class with everything the split pipeline needs to know
/// about its semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSemantics {
    pub class_id: String,
    /// Unit-norm class embedding.
    pub embedding: Vec<f64>,
    /// Corpus frequency of the class's first lemma.
    pub frequency: u64,
    /// True once this class won (or never contested) its word.
    pub primary: bool,
}

/// Keep only classes whose frequency is strictly above `threshold`,
/// preserving input order.
pub fn filter_by_frequency(classes: &[ClassSemantics], threshold: u64) -> Vec<String> {
    classes
        .iter()
        .filter(|c| c.frequency > threshold)
        .map(|c| c.class_id.clone())
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; NaN when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// Raw (unnormalised) embedding of a lemma: the joined form's own vector
/// when present, otherwise the mean of its embedded tokens. `None` when
/// nothing is embeddable.
pub fn lemma_embedding(lemma: &str, e: &EmbeddingTable) -> Option<Vec<f64>> {
    if let Some(v) = e.get(lemma) {
        return Some(v.to_vec());
    }
    let mut sum = vec![0.0; e.dim()];
    let mut hits = 0usize;
    for part in lemma.split('_').filter(|p| !p.is_empty()) {
        if let Some(v) = e.get(part) {
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
            hits += 1;
        }
    }
    if hits == 0 {
        return None;
    }
    for s in &mut sum {
        *s /= hits as f64;
    }
    Some(sum)
}

/// Unit-norm embedding of a class: its first embeddable lemma, in lemma
/// file order. Errors when no lemma is embeddable (all-zero vectors count
/// as unembeddable).
pub fn class_embedding(
    class_id: &str,
    t: &Taxonomy,
    e: &EmbeddingTable,
) -> Result<Vec<f64>, SemanticsError> {
    for lemma in t.lemmas(class_id)? {
        if let Some(mut v) = lemma_embedding(lemma, e) {
            let n = norm(&v);
            if n > 0.0 {
                for x in &mut v {
                    *x /= n;
                }
                return Ok(v);
            }
        }
    }
    Err(SemanticsError::UnembeddableClass(class_id.to_owned()))
}

/// How well word `w` fits sense `c`: cosine between `w`'s vector and the
/// mean of the (raw) embeddings of `c`'s parent and child concepts' first
/// lemmas. In [-1, 1]. Errors when `w` is unembeddable or no neighbor
/// contributes a usable vector.
pub fn polysemy_score(
    w: &str,
    c: &str,
    t: &Taxonomy,
    e: &EmbeddingTable,
) -> Result<f64, SemanticsError> {
    let wv =
        lemma_embedding(w, e).ok_or_else(|| SemanticsError::UnembeddableWord(w.to_owned()))?;
    let ci = t
        .index_of(c)
        .ok_or_else(|| TaxonomyError::UnknownConcept(c.to_owned()))?;
    let mut neighbors: Vec<usize> = t.parents_of(ci).to_vec();
    neighbors.extend_from_slice(t.children_of(ci));
    neighbors.sort_unstable();
    neighbors.dedup();

    let mut mean = vec![0.0; e.dim()];
    let mut hits = 0usize;
    for ni in neighbors {
        let first = &t.lemmas(t.id_at(ni))?[0];
        if let Some(v) = lemma_embedding(first, e) {
            for (m, x) in mean.iter_mut().zip(&v) {
                *m += x;
            }
            hits += 1;
        }
    }
    if hits == 0 {
        return Err(SemanticsError::Unscorable(c.to_owned()));
    }
    for m in &mut mean {
        *m /= hits as f64;
    }
    if norm(&mean) == 0.0 || norm(&wv) == 0.0 {
        return Err(SemanticsError::Unscorable(c.to_owned()));
    }
    Ok(cosine(&wv, &mean))
}

/// Pick the sense of `w` among `candidates` whose hierarchy context best
/// matches `w`'s embedding. Singleton candidate sets win outright without
/// scoring. Unscorable candidates are skipped; ties go to the smallest
/// class id.
pub fn resolve_primary_meaning(
    w: &str,
    candidates: &BTreeSet<String>,
    t: &Taxonomy,
    e: &EmbeddingTable,
) -> Result<String, SemanticsError> {
    if candidates.is_empty() {
        return Err(SemanticsError::EmptyCandidates);
    }
    for c in candidates {
        if !t.contains(c) {
            return Err(TaxonomyError::UnknownConcept(c.clone()).into());
        }
    }
    if candidates.len() == 1 {
        return Ok(candidates.iter().next().unwrap().clone());
    }
    let mut best: Option<(f64, &String)> = None;
    for c in candidates {
        match polysemy_score(w, c, t, e) {
            Ok(s) => {
                // Strict > keeps the smallest id on ties (candidates sorted).
                if best.is_none_or(|(bs, _)| s > bs) {
                    best = Some((s, c));
                }
            }
            Err(SemanticsError::Unscorable(_)) | Err(SemanticsError::UnembeddableWord(_)) => {}
            Err(other) => return Err(other),
        }
    }
    match best {
        Some((_, c)) => Ok(c.clone()),
        None => Err(SemanticsError::NoScorableSense(w.to_owned())),
    }
}

/// Everything `build_class_semantics` + `assign_primary_flags` learned.
#[derive(Debug, Clone)]
pub struct SemanticProfile {
    /// Classes with embeddings, sorted by id, primary flags assigned.
    pub classes: Vec<ClassSemantics>,
    /// Classes skipped for lack of any embeddable lemma, sorted.
    pub skipped: Vec<String>,
    /// Words whose sense groups could not be resolved (no scorable sense);
    /// all their classes stay non-primary.
    pub unresolved_words: Vec<String>,
}

/// Embed every taxonomy class and resolve shared words to one primary
/// sense each.
pub fn build_semantic_profile(
    t: &Taxonomy,
    e: &EmbeddingTable,
    f: &FrequencyTable,
) -> Result<SemanticProfile, SemanticsError> {
    let mut ids: Vec<&str> = t.ids().iter().map(String::as_str).collect();
    ids.sort_unstable();
    let mut classes = Vec::new();
    let mut skipped = Vec::new();
    for id in ids {
        match class_embedding(id, t, e) {
            Ok(embedding) => {
                let first = &t.lemmas(id)?[0];
                classes.push(ClassSemantics {
                    class_id: id.to_owned(),
                    embedding,
                    frequency: f.count(first),
                    primary: false,
                });
            }
            Err(SemanticsError::UnembeddableClass(_)) => skipped.push(id.to_owned()),
            Err(other) => return Err(other),
        }
    }
    let unresolved_words = assign_primary_flags(&mut classes, t, e)?;
    Ok(SemanticProfile {
        classes,
        skipped,
        unresolved_words,
    })
}

/// Group classes by their first lemma and mark one per group primary.
/// Returns the words that resolved to nothing.
pub fn assign_primary_flags(
    classes: &mut [ClassSemantics],
    t: &Taxonomy,
    e: &EmbeddingTable,
) -> Result<Vec<String>, SemanticsError> {
    let mut by_word: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, c) in classes.iter().enumerate() {
        let first = t.lemmas(&c.class_id)?[0].clone();
        by_word.entry(first).or_default().push(i);
    }
    let mut unresolved = Vec::new();
    for (word, members) in &by_word {
        if members.len() == 1 {
            classes[members[0]].primary = true;
            continue;
        }
        let cand: BTreeSet<String> = members
            .iter()
            .map(|&i| classes[i].class_id.clone())
            .collect();
        match resolve_primary_meaning(word, &cand, t, e) {
            Ok(winner) => {
                for &i in members {
                    classes[i].primary = classes[i].class_id == winner;
                }
            }
            Err(SemanticsError::NoScorableSense(_))
            | Err(SemanticsError::UnembeddableWord(_)) => {
                unresolved.push(word.clone());
            }
            Err(other) => return Err(other),
        }
    }
    Ok(unresolved)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(entries: &[&str]) -> BTreeSet<String> {
        entries.iter().map(|s| (*s).to_owned()).collect()
    }

    fn toks(text: &str) -> Vec<String> {
        tokenize(text).collect()
    }

    #[test]
    fn tokenize_lowercases_and_strips() {
        assert_eq!(
            toks("The lap-dog's 2nd GAME!"),
            ["the", "lap", "dog", "s", "2nd", "game"]
        );
        assert!(toks("  ...  ").is_empty());
    }

    #[test]
    fn counts_single_tokens_and_phrases_with_overlap() {
        let v = vocab(&["dog", "lap_dog"]);
        let f = count_occurrences(toks("the lap dog saw a dog near the lap dog"), &v);
        assert_eq!(f.count("dog"), 3);
        assert_eq!(f.count("lap_dog"), 2);
        assert_eq!(f.count("absent"), 0);
    }

    #[test]
    fn counts_are_zero_initialised_for_all_vocab_entries() {
        let v = vocab(&["unseen", "also_unseen"]);
        let f = count_occurrences(toks("nothing relevant here"), &v);
        assert_eq!(f.count("unseen"), 0);
        assert_eq!(f.count("also_unseen"), 0);
        assert_eq!(f.len(), 2);
    }

    #[test]
    fn phrase_matching_crosses_buffer_ages_correctly() {
        // Same-last-token phrases of different lengths all match in place.
        let v = vocab(&["a_b_c", "b_c", "c"]);
        let f = count_occurrences(toks("a b c a b c"), &v);
        assert_eq!(f.count("a_b_c"), 2);
        assert_eq!(f.count("b_c"), 2);
        assert_eq!(f.count("c"), 2);
    }

    #[test]
    fn counting_is_additive_across_separated_corpora() {
        let v = vocab(&["x_y", "y"]);
        let a = "x y y x";
        let b = "y x y";
        let mut fa = count_occurrences(toks(a), &v);
        let fb = count_occurrences(toks(b), &v);
        // "zzz" appears in no phrase, so the seam cannot create matches.
        let joined = count_occurrences(toks(&format!("{a} zzz {b}")), &v);
        fa.merge(&fb);
        assert_eq!(fa, joined);
    }

    #[test]
    fn million_token_stream_counts_match_plant() {
        // Deterministic synthetic corpus: plant a known number of needles.
        let v = vocab(&["needle", "hay_bale"]);
        let mut corpus: Vec<String> = Vec::with_capacity(1_000_000);
        let mut planted_needle = 0u64;
        let mut planted_bale = 0u64;
        for i in 0..999_990usize {
            if i % 1000 == 0 {
                corpus.push("needle".into());
                planted_needle += 1;
            } else if i % 317 == 0 {
                corpus.push("hay".into());
                corpus.push("bale".into());
                planted_bale += 1;
            } else {
                corpus.push(format!("tok{}", i % 97));
            }
        }
        let f = count_occurrences(corpus.into_iter(), &v);
        assert_eq!(f.count("needle"), planted_needle);
        assert_eq!(f.count("hay_bale"), planted_bale);
    }

    #[test]
    fn frequency_filter_is_strict() {
        let mk = |id: &str, freq| ClassSemantics {
            class_id: id.to_owned(),
            embedding: vec![1.0],
            frequency: freq,
            primary: true,
        };
        let classes = vec![mk("at", 500), mk("above", 501), mk("below", 499)];
        assert_eq!(filter_by_frequency(&classes, 500), ["above".to_owned()]);
    }

    #[test]
    fn embedding_table_round_trips_with_and_without_header() {
        let src = "2 3\napple 0.5 -1.25 3\nbanana 1 2 0.1\n";
        let e = EmbeddingTable::load(src.as_bytes()).unwrap();
        assert_eq!(e.dim(), 3);
        assert_eq!(e.get("apple").unwrap(), [0.5, -1.25, 3.0]);
        let mut out = Vec::new();
        e.save(&mut out).unwrap();
        let e2 = EmbeddingTable::load(out.as_slice()).unwrap();
        assert_eq!(e2.get("banana").unwrap(), e.get("banana").unwrap());

        let no_header = "apple 0.5 -1.25 3\n";
        let e3 = EmbeddingTable::load(no_header.as_bytes()).unwrap();
        assert_eq!(e3.dim(), 3);
    }

    #[test]
    fn embedding_table_rejects_bad_input() {
        assert!(matches!(
            EmbeddingTable::load("a 1 2\nb 1\n".as_bytes()).unwrap_err(),
            SemanticsError::DimensionMismatch { .. }
        ));
        assert!(matches!(
            EmbeddingTable::load("a 1\na 2\n".as_bytes()).unwrap_err(),
            SemanticsError::DuplicateWord(_)
        ));
        assert!(matches!(
            EmbeddingTable::load("a nan\n".as_bytes()).unwrap_err(),
            SemanticsError::Parse { .. } | SemanticsError::NonFinite(_)
        ));
        assert!(matches!(
            EmbeddingTable::load("".as_bytes()).unwrap_err(),
            SemanticsError::EmptyTable
        ));
    }

    #[test]
    fn lemma_embedding_prefers_joined_form_then_token_mean() {
        let e = EmbeddingTable::load(
            "sea 1 0\nlion 0 1\nsea_lion 5 5\nodd 3 4\n".as_bytes(),
        )
        .unwrap();
        assert_eq!(lemma_embedding("sea_lion", &e).unwrap(), [5.0, 5.0]);
        assert_eq!(lemma_embedding("sea_cow", &e).unwrap(), [1.0, 0.0]);
        assert_eq!(lemma_embedding("lion_sea", &e).unwrap(), [0.5, 0.5]);
        assert!(lemma_embedding("ghost_town", &e).is_none());
    }

    #[test]
    fn class_embedding_is_unit_norm_and_walks_lemmas() {
        let t = Taxonomy::load_str("c\tr\n", "c\tghost,odd\nr\troot\n").unwrap();
        let e = EmbeddingTable::load("odd 3 4\nroot 1 0\n".as_bytes()).unwrap();
        let v = class_embedding("c", &t, &e).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-12);
        assert!((v[1] - 0.8).abs() < 1e-12);
        let t2 = Taxonomy::load_str("c\tr\n", "c\tghost\nr\troot\n").unwrap();
        assert!(matches!(
            class_embedding("c", &t2, &e).unwrap_err(),
            SemanticsError::UnembeddableClass(_)
        ));
    }

    /// Two senses of "seal": an animal one whose hierarchy neighbors sit
    /// near the word vector, and an artifact one whose neighbor points away.
    fn polysemy_fixture() -> (Taxonomy, EmbeddingTable) {
        let t = Taxonomy::load_str(
            "s_animal\tn_mam\ns_animal\tn_aq\ns_artifact\tn_dev\n",
            "s_animal\tseal\ns_artifact\tseal\nn_mam\tmammal\nn_aq\taquatic\nn_dev\tdevice\n",
        )
        .unwrap();
        let b = 0.9471f64.sqrt();
        let d = (1.0 - 0.04f64 * 0.04).sqrt();
        let e = EmbeddingTable::from_pairs([
            ("seal".to_owned(), vec![1.0, 0.0, 0.0]),
            ("mammal".to_owned(), vec![0.23, b, 0.1]),
            ("aquatic".to_owned(), vec![0.23, b, -0.1]),
            ("device".to_owned(), vec![-0.04, d, 0.0]),
        ])
        .unwrap();
        (t, e)
    }

    #[test]
    fn polysemy_scores_match_hand_computation() {
        let (t, e) = polysemy_fixture();
        let animal = polysemy_score("seal", "s_animal", &t, &e).unwrap();
        let artifact = polysemy_score("seal", "s_artifact", &t, &e).unwrap();
        assert!((animal - 0.23).abs() < 1e-12, "got {animal}");
        assert!((artifact - -0.04).abs() < 1e-12, "got {artifact}");
        assert!(animal > artifact);
        assert!((-1.0..=1.0).contains(&animal));
    }

    #[test]
    fn polysemy_score_of_identical_context_is_one() {
        let t = Taxonomy::load_str("c\tp\n", "c\tword\np\tword\n").unwrap();
        let e = EmbeddingTable::from_pairs([("word".to_owned(), vec![2.0, 1.0])]).unwrap();
        let s = polysemy_score("word", "c", &t, &e).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resolve_primary_meaning_picks_best_fit() {
        let (t, e) = polysemy_fixture();
        let cand: BTreeSet<String> = ["s_animal".to_owned(), "s_artifact".to_owned()].into();
        assert_eq!(resolve_primary_meaning("seal", &cand, &t, &e).unwrap(), "s_animal");
    }

    #[test]
    fn resolve_primary_meaning_singleton_needs_no_scoring() {
        // Sole sense has no embeddable neighbors; must still resolve.
        let t = Taxonomy::load_str("c\tp\n", "c\tword\np\tghost\n").unwrap();
        let e = EmbeddingTable::from_pairs([("word".to_owned(), vec![1.0])]).unwrap();
        let cand: BTreeSet<String> = ["c".to_owned()].into();
        assert_eq!(resolve_primary_meaning("word", &cand, &t, &e).unwrap(), "c");
    }

    #[test]
    fn resolve_primary_meaning_errors() {
        let (t, e) = polysemy_fixture();
        assert!(matches!(
            resolve_primary_meaning("seal", &BTreeSet::new(), &t, &e).unwrap_err(),
            SemanticsError::EmptyCandidates
        ));
        let bad: BTreeSet<String> = ["missing".to_owned(), "s_animal".to_owned()].into();
        assert!(matches!(
            resolve_primary_meaning("seal", &bad, &t, &e).unwrap_err(),
            SemanticsError::Taxonomy(TaxonomyError::UnknownConcept(_))
        ));
        // Two senses, neither scorable: no ghost-lemma neighbor embeds.
        let t2 = Taxonomy::load_str("a\tp\nb\tq\n", "a\tw\nb\tw\np\tghost\nq\tghoul\n").unwrap();
        let e2 = EmbeddingTable::from_pairs([("w".to_owned(), vec![1.0])]).unwrap();
        let cand: BTreeSet<String> = ["a".to_owned(), "b".to_owned()].into();
        assert!(matches!(
            resolve_primary_meaning("w", &cand, &t2, &e2).unwrap_err(),
            SemanticsError::NoScorableSense(_)
        ));
    }

    #[test]
    fn profile_assigns_flags_frequencies_and_skips() {
        let (t, e) = polysemy_fixture();
        let mut f = FrequencyTable::default();
        f.set("seal", 700);
        f.set("mammal", 10);
        let p = build_semantic_profile(&t, &e, &f).unwrap();
        let get = |id: &str| p.classes.iter().find(|c| c.class_id == id).unwrap();
        assert!(get("s_animal").primary);
        assert!(!get("s_artifact").primary);
        assert_eq!(get("s_animal").frequency, 700);
        assert_eq!(get("n_mam").frequency, 10);
        assert!(get("n_mam").primary); // uncontested word
        // n_aq's lemma "aquatic" embeds; nothing skipped here.
        assert!(p.skipped.is_empty());
        assert!(p.unresolved_words.is_empty());

        // A class with no embeddable lemma lands in `skipped`.
        let t2 = Taxonomy::load_str("c\tp\n", "c\tghost\np\tmammal\n").unwrap();
        let p2 = build_semantic_profile(&t2, &e, &f).unwrap();
        assert_eq!(p2.skipped, ["c".to_owned()]);
        assert_eq!(p2.classes.len(), 1);
    }

    #[test]
    fn frequency_table_round_trip() {
        let mut f = FrequencyTable::default();
        f.set("b", 2);
        f.set("a", 1);
        let mut out = Vec::new();
        f.save(&mut out).unwrap();
        assert_eq!(String::from_utf8(out.clone()).unwrap(), "a\t1\nb\t2\n");
        assert_eq!(FrequencyTable::load(out.as_slice()).unwrap(), f);
    }
}
