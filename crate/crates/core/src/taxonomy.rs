//! Concept hierarchy: a DAG of is-a edges over named concepts.
//!
//! Concepts come from a lemma file (`id\tlemma1,lemma2,...`), edges from an
//! edge file (`child\tparent`). Both are plain UTF-8, one record per line,
//! `#` starts a comment line. When the lemma stream is empty the concept set
//! is inferred from the edge endpoints and each concept gets its own id as
//! sole lemma, which keeps tiny fixtures cheap to write.
//!
//! Distances are hop counts on the *undirected* version of the DAG;
//! ancestry queries follow directed edges only.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io::{BufRead, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at {file} line {line}: {msg}")]
    Parse {
        file: &'static str,
        line: usize,
        msg: String,
    },
    #[error("duplicate concept id `{0}`")]
    DuplicateConcept(String),
    #[error("edge endpoint `{0}` is not a declared concept")]
    DanglingEdge(String),
    #[error("hierarchy contains a cycle through `{0}`")]
    Cycle(String),
    #[error("unknown concept id `{0}`")]
    UnknownConcept(String),
    #[error("no path between `{0}` and `{1}`")]
    Disconnected(String, String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("hop count must be >= 1")]
    ZeroHops,
}

/// A concept id together with its surface forms, in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Concept {
    pub id: String,
    pub lemmas: Vec<String>,
}

/// Immutable concept DAG with undirected-distance and ancestry queries.
///
/// Node indices (`usize`) are stable for the lifetime of the value and are
/// exposed so heavy callers can do index math instead of string lookups;
/// `index_of` / `id_at` convert between the two.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    lemmas: Vec<Vec<String>>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    edge_count: usize,
    /// Concept ids outside the largest connected component, sorted.
    orphans: Vec<String>,
}

impl Taxonomy {
    /// Parse a taxonomy from an edge stream and a lemma stream.
    ///
    /// With a non-empty lemma stream every edge endpoint must be declared
    /// there; an empty lemma stream infers concepts from the edges instead.
    /// Rejects duplicate concept ids, dangling edges and cycles (reporting
    /// one concept on the cycle). Self-loops count as cycles.
    pub fn load(edges: impl BufRead, lemmas: impl BufRead) -> Result<Self, TaxonomyError> {
        let mut concepts: Vec<Concept> = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (lineno, line) in lemmas.lines().enumerate() {
            let line = line?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, rest) = line.split_once('\t').ok_or_else(|| TaxonomyError::Parse {
                file: "lemmas",
                line: lineno + 1,
                msg: "expected `id\\tlemma,...`".into(),
            })?;
            let lemma_list: Vec<String> = rest
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_owned)
                .collect();
            if lemma_list.is_empty() {
                return Err(TaxonomyError::Parse {
                    file: "lemmas",
                    line: lineno + 1,
                    msg: format!("concept `{id}` has no lemmas"),
                });
            }
            if seen.insert(id.to_owned(), concepts.len()).is_some() {
                return Err(TaxonomyError::DuplicateConcept(id.to_owned()));
            }
            concepts.push(Concept {
                id: id.to_owned(),
                lemmas: lemma_list,
            });
        }

        let mut edge_list: Vec<(String, String)> = Vec::new();
        for (lineno, line) in edges.lines().enumerate() {
            let line = line?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (child, parent) = line.split_once('\t').ok_or_else(|| TaxonomyError::Parse {
                file: "edges",
                line: lineno + 1,
                msg: "expected `child\\tparent`".into(),
            })?;
            if child.is_empty() || parent.is_empty() {
                return Err(TaxonomyError::Parse {
                    file: "edges",
                    line: lineno + 1,
                    msg: "empty endpoint".into(),
                });
            }
            edge_list.push((child.to_owned(), parent.to_owned()));
        }

        if concepts.is_empty() {
            // Infer the concept set from edge endpoints, sorted for stable indices.
            let mut ids: BTreeSet<&str> = BTreeSet::new();
            for (c, p) in &edge_list {
                ids.insert(c);
                ids.insert(p);
            }
            for id in ids {
                seen.insert(id.to_owned(), concepts.len());
                concepts.push(Concept {
                    id: id.to_owned(),
                    lemmas: vec![id.to_owned()],
                });
            }
        }

        let n = concepts.len();
        let mut parents: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        let mut children: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        let mut edge_count = 0usize;
        for (child, parent) in &edge_list {
            let &ci = seen
                .get(child.as_str())
                .ok_or_else(|| TaxonomyError::DanglingEdge(child.clone()))?;
            let &pi = seen
                .get(parent.as_str())
                .ok_or_else(|| TaxonomyError::DanglingEdge(parent.clone()))?;
            if ci == pi {
                return Err(TaxonomyError::Cycle(child.clone()));
            }
            if parents[ci].insert(pi) {
                children[pi].insert(ci);
                edge_count += 1;
            }
        }

        let t = Taxonomy {
            ids: concepts.iter().map(|c| c.id.clone()).collect(),
            index: seen,
            lemmas: concepts.into_iter().map(|c| c.lemmas).collect(),
            parents: parents.into_iter().map(|s| s.into_iter().collect()).collect(),
            children: children.into_iter().map(|s| s.into_iter().collect()).collect(),
            edge_count,
            orphans: Vec::new(),
        };
        t.check_acyclic()?;
        Ok(t.with_orphans())
    }

    /// `load` over in-memory strings; handy for fixtures and small tools.
    pub fn load_str(edges: &str, lemmas: &str) -> Result<Self, TaxonomyError> {
        Self::load(edges.as_bytes(), lemmas.as_bytes())
    }

    /// Kahn's algorithm over child->parent edges; any remainder is a cycle
    /// and the lexicographically smallest concept on it gets reported.
    fn check_acyclic(&self) -> Result<(), TaxonomyError> {
        let n = self.ids.len();
        let mut out_deg: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> =
            (0..n).filter(|&i| out_deg[i] == 0).collect();
        let mut done = 0usize;
        while let Some(u) = queue.pop_front() {
            done += 1;
            for &c in &self.children[u] {
                out_deg[c] -= 1;
                if out_deg[c] == 0 {
                    queue.push_back(c);
                }
            }
        }
        if done == n {
            return Ok(());
        }
        let member = (0..n)
            .filter(|&i| out_deg[i] > 0)
            .map(|i| self.ids[i].as_str())
            .min()
            .expect("remainder is non-empty");
        Err(TaxonomyError::Cycle(member.to_owned()))
    }

    fn with_orphans(mut self) -> Self {
        let n = self.ids.len();
        let mut comp = vec![usize::MAX; n];
        let mut comps: Vec<Vec<usize>> = Vec::new();
        for start in 0..n {
            if comp[start] != usize::MAX {
                continue;
            }
            let cid = comps.len();
            let mut members = Vec::new();
            let mut queue = VecDeque::from([start]);
            comp[start] = cid;
            while let Some(u) = queue.pop_front() {
                members.push(u);
                for &v in self.parents[u].iter().chain(&self.children[u]) {
                    if comp[v] == usize::MAX {
                        comp[v] = cid;
                        queue.push_back(v);
                    }
                }
            }
            comps.push(members);
        }
        // Main component: largest, ties to the one holding the smallest id.
        let main = (0..comps.len())
            .min_by_key(|&c| {
                let min_id = comps[c].iter().map(|&i| self.ids[i].as_str()).min();
                (std::cmp::Reverse(comps[c].len()), min_id.unwrap().to_owned())
            })
            .unwrap_or(0);
        let mut orphans: Vec<String> = (0..n)
            .filter(|&i| comp[i] != main)
            .map(|i| self.ids[i].clone())
            .collect();
        orphans.sort();
        self.orphans = orphans;
        self
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// Concept ids outside the largest connected component (never silently
    /// usable in splits; callers decide whether to warn or bail).
    pub fn orphans(&self) -> &[String] {
        &self.orphans
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id_at(&self, idx: usize) -> &str {
        &self.ids[idx]
    }

    /// All concept ids in index order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn lemmas(&self, id: &str) -> Result<&[String], TaxonomyError> {
        let i = self.require(id)?;
        Ok(&self.lemmas[i])
    }

    pub fn parents_of(&self, idx: usize) -> &[usize] {
        &self.parents[idx]
    }

    pub fn children_of(&self, idx: usize) -> &[usize] {
        &self.children[idx]
    }

    fn require(&self, id: &str) -> Result<usize, TaxonomyError> {
        self.index_of(id)
            .ok_or_else(|| TaxonomyError::UnknownConcept(id.to_owned()))
    }

    fn undirected_neighbors<'a>(&'a self, u: usize) -> impl Iterator<Item = usize> + 'a {
        self.parents[u].iter().chain(&self.children[u]).copied()
    }

    /// Shortest undirected hop count between two concepts.
    ///
    /// `distance(a, a) == 0`; errors if the pair is disconnected or either
    /// id is unknown. Symmetric and obeys the triangle inequality within a
    /// component.
    pub fn distance(&self, a: &str, b: &str) -> Result<u32, TaxonomyError> {
        let ai = self.require(a)?;
        let bi = self.require(b)?;
        if ai == bi {
            return Ok(0);
        }
        let mut dist = vec![u32::MAX; self.ids.len()];
        dist[ai] = 0;
        let mut queue = VecDeque::from([ai]);
        while let Some(u) = queue.pop_front() {
            for v in self.undirected_neighbors(u) {
                if dist[v] == u32::MAX {
                    dist[v] = dist[u] + 1;
                    if v == bi {
                        return Ok(dist[v]);
                    }
                    queue.push_back(v);
                }
            }
        }
        Err(TaxonomyError::Disconnected(a.to_owned(), b.to_owned()))
    }

    /// Undirected hop distances from one concept to every node;
    /// `None` for unreachable nodes. Indexed by node index.
    pub fn distances_from(&self, id: &str) -> Result<Vec<Option<u32>>, TaxonomyError> {
        let s = self.require(id)?;
        Ok(self.bfs_multi(&[s]).into_iter().map(|o| o.map(|(d, _)| d)).collect())
    }

    /// Multi-source undirected BFS. Returns, per node, the distance to the
    /// nearest source and which source wins; among equidistant sources the
    /// one with the smallest id wins. `sources` are node indices.
    pub fn nearest_of(&self, sources: &[usize]) -> Vec<Option<(u32, usize)>> {
        self.bfs_multi(sources)
    }

    fn bfs_multi(&self, sources: &[usize]) -> Vec<Option<(u32, usize)>> {
        // Rank sources by id so "smallest label" means "smallest source id".
        let mut by_id: Vec<usize> = sources.to_vec();
        by_id.sort_by(|&a, &b| self.ids[a].cmp(&self.ids[b]));
        by_id.dedup();

        let n = self.ids.len();
        let mut dist = vec![u32::MAX; n];
        let mut label = vec![usize::MAX; n]; // rank into by_id
        let mut frontier: BTreeMap<usize, usize> = BTreeMap::new();
        for (rank, &s) in by_id.iter().enumerate() {
            dist[s] = 0;
            let l = label[s].min(rank);
            label[s] = l;
            frontier.insert(s, l);
        }
        let mut layer = 0u32;
        while !frontier.is_empty() {
            let mut next: BTreeMap<usize, usize> = BTreeMap::new();
            for (&u, &lu) in &frontier {
                for v in self.undirected_neighbors(u) {
                    if dist[v] != u32::MAX {
                        continue; // settled in an earlier or this layer
                    }
                    next.entry(v).and_modify(|l| *l = (*l).min(lu)).or_insert(lu);
                }
            }
            layer += 1;
            for (&v, &lv) in &next {
                dist[v] = layer;
                label[v] = lv;
            }
            frontier = next;
        }
        (0..n)
            .map(|i| {
                if dist[i] == u32::MAX {
                    None
                } else {
                    Some((dist[i], by_id[label[i]]))
                }
            })
            .collect()
    }

    /// True iff `a` is a *strict* ancestor of `b` (a != b and a reachable
    /// from b by following child->parent edges).
    pub fn is_strict_ancestor(&self, a: &str, b: &str) -> Result<bool, TaxonomyError> {
        let ai = self.require(a)?;
        let bi = self.require(b)?;
        if ai == bi {
            return Ok(false);
        }
        Ok(self.ancestors_idx(bi).contains(&ai))
    }

    /// Node indices of all strict ancestors of `idx`.
    pub fn ancestors_idx(&self, idx: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut queue = VecDeque::from([idx]);
        while let Some(u) = queue.pop_front() {
            for &p in &self.parents[u] {
                if out.insert(p) {
                    queue.push_back(p);
                }
            }
        }
        out
    }

    /// Node indices of all strict descendants of `idx`.
    pub fn descendants_idx(&self, idx: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut queue = VecDeque::from([idx]);
        while let Some(u) = queue.pop_front() {
            for &c in &self.children[u] {
                if out.insert(c) {
                    queue.push_back(c);
                }
            }
        }
        out
    }

    /// All concepts within `k` undirected hops of the training set,
    /// excluding the training classes themselves.
    pub fn hop_split(
        &self,
        train: &BTreeSet<String>,
        k: u32,
    ) -> Result<BTreeSet<String>, TaxonomyError> {
        if train.is_empty() {
            return Err(TaxonomyError::EmptyTrainingSet);
        }
        if k == 0 {
            return Err(TaxonomyError::ZeroHops);
        }
        let sources: Vec<usize> = train
            .iter()
            .map(|id| self.require(id))
            .collect::<Result<_, _>>()?;
        let near = self.bfs_multi(&sources);
        let mut out = BTreeSet::new();
        for (i, entry) in near.iter().enumerate() {
            if let Some((d, _)) = entry {
                if *d >= 1 && *d <= k {
                    out.insert(self.ids[i].clone());
                }
            }
        }
        Ok(out)
    }

    /// All ordered (ancestor, descendant) pairs within `set` that violate
    /// the antichain property, sorted. Empty result means `set` is an
    /// antichain under strict ancestry.
    pub fn antichain_violations(
        &self,
        set: &BTreeSet<String>,
    ) -> Result<Vec<(String, String)>, TaxonomyError> {
        let idxs: Vec<usize> = set
            .iter()
            .map(|id| self.require(id))
            .collect::<Result<_, _>>()?;
        let members: BTreeSet<usize> = idxs.iter().copied().collect();
        let mut out = Vec::new();
        for &b in &idxs {
            for a in self.ancestors_idx(b).intersection(&members) {
                out.push((self.ids[*a].clone(), self.ids[b].clone()));
            }
        }
        out.sort();
        Ok(out)
    }

    /// Write edges as `child\tparent`, sorted; inverse of `load` up to
    /// record order and comments.
    pub fn serialize_edges(&self, mut w: impl Write) -> std::io::Result<()> {
        let mut lines: Vec<(&str, &str)> = Vec::with_capacity(self.edge_count);
        for (c, ps) in self.parents.iter().enumerate() {
            for &p in ps {
                lines.push((&self.ids[c], &self.ids[p]));
            }
        }
        lines.sort();
        for (c, p) in lines {
            writeln!(w, "{c}\t{p}")?;
        }
        Ok(())
    }

    /// Write lemmas as `id\tlemma1,lemma2,...`, sorted by id.
    pub fn serialize_lemmas(&self, mut w: impl Write) -> std::io::Result<()> {
        let mut order: Vec<usize> = (0..self.ids.len()).collect();
        order.sort_by(|&a, &b| self.ids[a].cmp(&self.ids[b]));
        for i in order {
            writeln!(w, "{}\t{}", self.ids[i], self.lemmas[i].join(","))?;
        }
        Ok(())
    }
}
