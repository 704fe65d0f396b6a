//! Corpus and graph ingestion, cosine-similarity graph construction, symmetric
//! adjacency normalization and edge splits.
//!
//! Supported inputs:
//!
//! * triples: one `node term count` line per nonzero, whitespace separated,
//!   0-based. Lines starting with `#` are comments, except an optional
//!   `# shape N V` header fixing the matrix size.
//! * edge lists: one `i j [count]` line per undirected edge. Duplicates are
//!   collapsed and self-loops dropped.
//! * Cora-style content (`id feat_1 .. feat_V label`) and cites
//!   (`cited citing`) files. Ids are remapped to dense indices in file order;
//!   [`write_id_map`] emits the mapping.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, invalid, Error, Result};
use crate::sparse::CsrMatrix;
use crate::stochastic::{tags, RngStream};

/// Bag-of-words counts, one row per node, stored row-compressed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseCountMatrix {
    num_nodes: usize,
    vocab_size: usize,
    indptr: Vec<usize>,
    terms: Vec<u32>,
    counts: Vec<u32>,
}

impl SparseCountMatrix {
    pub fn new(num_nodes: usize, vocab_size: usize, mut entries: Vec<(usize, usize, u32)>) -> Result<Self> {
        if vocab_size > u32::MAX as usize {
            return Err(invalid!("vocabulary of {vocab_size} terms is too large"));
        }
        entries.sort_unstable_by_key(|&(j, v, _)| (j, v));
        let mut indptr = vec![0; num_nodes + 1];
        let mut terms = Vec::with_capacity(entries.len());
        let mut counts = Vec::with_capacity(entries.len());
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(invalid!("duplicate entry for node {} term {}", w[0].0, w[0].1));
            }
        }
        for (j, v, c) in entries {
            if j >= num_nodes || v >= vocab_size {
                return Err(invalid!(
                    "entry ({j}, {v}) outside {num_nodes} nodes x {vocab_size} terms"
                ));
            }
            if c == 0 {
                return Err(invalid!("zero count stored for node {j} term {v}"));
            }
            indptr[j + 1] += 1;
            terms.push(v as u32);
            counts.push(c);
        }
        for j in 0..num_nodes {
            indptr[j + 1] += indptr[j];
        }
        Ok(Self {
            num_nodes,
            vocab_size,
            indptr,
            terms,
            counts,
        })
    }

    /// Builds from a dense nonnegative integer matrix (nodes × terms).
    pub fn from_dense(dense: &Array2<u32>) -> Self {
        let entries = dense
            .indexed_iter()
            .filter(|(_, &c)| c > 0)
            .map(|((j, v), &c)| (j, v, c))
            .collect();
        Self::new(dense.nrows(), dense.ncols(), entries).expect("dense input is well formed")
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn nnz(&self) -> usize {
        self.terms.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    /// Terms and counts of node `j`.
    pub fn row(&self, j: usize) -> (&[u32], &[u32]) {
        let span = self.indptr[j]..self.indptr[j + 1];
        (&self.terms[span.clone()], &self.counts[span])
    }

    pub fn row_total(&self, j: usize) -> u64 {
        self.row(j).1.iter().map(|&c| c as u64).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        (0..self.num_nodes).flat_map(move |j| {
            let (t, c) = self.row(j);
            t.iter().zip(c).map(move |(&v, &c)| (j, v as usize, c))
        })
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.num_nodes, self.vocab_size));
        for (j, v, c) in self.entries() {
            out[[j, v]] = c as f64;
        }
        out
    }

    /// Real-valued copy (nodes × terms) for use as encoder input.
    pub fn to_csr(&self) -> CsrMatrix {
        CsrMatrix::from_parts(
            self.num_nodes,
            self.vocab_size,
            self.indptr.clone(),
            self.terms.iter().map(|&v| v as usize).collect(),
            self.counts.iter().map(|&c| c as f64).collect(),
        )
        .expect("count matrix parts are consistent")
    }

    /// Rows `nodes` (in the given order) as a new matrix.
    pub fn select_rows(&self, nodes: &[usize]) -> Self {
        let mut indptr = Vec::with_capacity(nodes.len() + 1);
        indptr.push(0);
        let mut terms = Vec::new();
        let mut counts = Vec::new();
        for &j in nodes {
            let (t, c) = self.row(j);
            terms.extend_from_slice(t);
            counts.extend_from_slice(c);
            indptr.push(terms.len());
        }
        Self {
            num_nodes: nodes.len(),
            vocab_size: self.vocab_size,
            indptr,
            terms,
            counts,
        }
    }
}

/// Undirected graph stored as sorted unordered pairs `i < j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyGraph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    values: Vec<u32>,
}

impl AdjacencyGraph {
    /// Builds a graph from `(i, j, value)` triples. Pair order is irrelevant,
    /// repeated pairs keep their first value.
    pub fn from_weighted_edges(num_nodes: usize, edges: impl IntoIterator<Item = (usize, usize, u32)>) -> Result<Self> {
        let mut pairs: Vec<(usize, usize, u32)> = Vec::new();
        for (i, j, v) in edges {
            if i >= num_nodes || j >= num_nodes {
                return Err(invalid!("edge ({i}, {j}) outside {num_nodes} nodes"));
            }
            if i == j {
                return Err(invalid!("self-loop on node {i}"));
            }
            if v == 0 {
                return Err(invalid!("zero-valued edge ({i}, {j})"));
            }
            pairs.push((i.min(j), i.max(j), v));
        }
        pairs.sort_by_key(|&(i, j, _)| (i, j));
        pairs.dedup_by_key(|&mut (i, j, _)| (i, j));
        let (edges, values) = pairs.into_iter().map(|(i, j, v)| ((i, j), v)).unzip();
        Ok(Self {
            num_nodes,
            edges,
            values,
        })
    }

    pub fn from_edges(num_nodes: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        Self::from_weighted_edges(num_nodes, edges.into_iter().map(|(i, j)| (i, j, 1)))
    }

    pub fn empty(num_nodes: usize) -> Self {
        Self {
            num_nodes,
            edges: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 1)
    }

    /// Edge index of the pair, if present.
    pub fn find(&self, i: usize, j: usize) -> Option<usize> {
        self.edges.binary_search(&(i.min(j), i.max(j))).ok()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i != j && self.find(i, j).is_some()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.num_nodes];
        for &(i, j) in &self.edges {
            d[i] += 1;
            d[j] += 1;
        }
        d
    }

    /// Symmetric neighbor lists in CSR form `(indptr, neighbors)`, sorted.
    pub fn neighbor_lists(&self) -> (Vec<usize>, Vec<usize>) {
        let deg = self.degrees();
        let mut indptr = vec![0; self.num_nodes + 1];
        for i in 0..self.num_nodes {
            indptr[i + 1] = indptr[i] + deg[i];
        }
        let mut fill = indptr.clone();
        let mut nbrs = vec![0; indptr[self.num_nodes]];
        for &(i, j) in &self.edges {
            nbrs[fill[i]] = j;
            fill[i] += 1;
            nbrs[fill[j]] = i;
            fill[j] += 1;
        }
        for i in 0..self.num_nodes {
            nbrs[indptr[i]..indptr[i + 1]].sort_unstable();
        }
        (indptr, nbrs)
    }

    /// Subgraph induced by `nodes` (distinct), relabelled by position.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Self {
        let (indptr, nbrs) = self.neighbor_lists();
        self.induced_subgraph_with(&indptr, &nbrs, nodes)
    }

    /// [`Self::induced_subgraph`] reusing precomputed [`Self::neighbor_lists`];
    /// cost depends only on the selected nodes' degrees.
    pub fn induced_subgraph_with(&self, indptr: &[usize], nbrs: &[usize], nodes: &[usize]) -> Self {
        let local: HashMap<usize, usize> = nodes.iter().enumerate().map(|(p, &n)| (n, p)).collect();
        let mut out = Vec::new();
        for (p, &n) in nodes.iter().enumerate() {
            for &m in &nbrs[indptr[n]..indptr[n + 1]] {
                if let Some(&q) = local.get(&m) {
                    if p < q {
                        let e = self.find(n, m).expect("neighbor lists mirror edges");
                        out.push((p, q, self.values[e]));
                    }
                }
            }
        }
        Self::from_weighted_edges(nodes.len(), out).expect("induced subgraph is well formed")
    }
}

/// Ã = Q^{-1/2} (A [+ I]) Q^{-1/2}.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedAdjacency {
    pub num_nodes: usize,
    pub self_loops_added: bool,
    pub matrix: CsrMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelVector {
    pub labels: Vec<Option<usize>>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
}

impl LabelVector {
    pub fn new(labels: Vec<Option<usize>>, num_classes: usize) -> Result<Self> {
        if let Some(bad) = labels.iter().flatten().find(|&&y| y >= num_classes) {
            return Err(invalid!("label {bad} outside {num_classes} classes"));
        }
        Ok(Self {
            labels,
            num_classes,
            class_names: (0..num_classes).map(|c| c.to_string()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Loaded node features with optional labels and original node ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub features: SparseCountMatrix,
    pub labels: Option<LabelVector>,
    pub node_ids: Option<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    TsvTriples,
    CoraContent,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Corpus> {
    let path = path.as_ref();
    let text = read(path)?;
    match format {
        CorpusFormat::TsvTriples => parse_triples(path, &text),
        CorpusFormat::CoraContent => parse_cora_content(path, &text),
    }
}

fn parse_triples(path: &Path, text: &str) -> Result<Corpus> {
    let mut shape: Option<(usize, usize)> = None;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let f: Vec<&str> = rest.split_whitespace().collect();
            if f.first() == Some(&"shape") {
                let parsed = (f.len() == 3)
                    .then(|| Some((f[1].parse().ok()?, f[2].parse().ok()?)))
                    .flatten();
                shape = Some(parsed.ok_or_else(|| parse_err(path, ln, "expected `# shape N V`"))?);
            }
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(parse_err(path, ln, format!("expected 3 fields, found {}", f.len())));
        }
        let j: usize = f[0]
            .parse()
            .map_err(|_| parse_err(path, ln, format!("bad node index `{}`", f[0])))?;
        let v: usize = f[1]
            .parse()
            .map_err(|_| parse_err(path, ln, format!("bad term index `{}`", f[1])))?;
        let c: i64 = f[2]
            .parse()
            .map_err(|_| parse_err(path, ln, format!("bad count `{}`", f[2])))?;
        if c < 0 {
            return Err(parse_err(path, ln, format!("negative count {c}")));
        }
        if !seen.insert((j, v)) {
            return Err(parse_err(path, ln, format!("duplicate entry for node {j} term {v}")));
        }
        if c > 0 {
            let c = u32::try_from(c).map_err(|_| parse_err(path, ln, format!("count {c} too large")))?;
            entries.push((j, v, c));
        }
    }
    let inferred_n = seen.iter().map(|&(j, _)| j + 1).max().unwrap_or(0);
    let inferred_v = seen.iter().map(|&(_, v)| v + 1).max().unwrap_or(0);
    let (n, v) = match shape {
        Some((n, v)) if n < inferred_n || v < inferred_v => {
            return Err(parse_err(path, 1, format!("entries exceed declared shape {n} x {v}")))
        }
        Some(s) => s,
        None => (inferred_n, inferred_v),
    };
    if n == 0 {
        return Err(parse_err(path, 1, "no nodes"));
    }
    Ok(Corpus {
        features: SparseCountMatrix::new(n, v, entries)?,
        labels: None,
        node_ids: None,
    })
}

fn parse_cora_content(path: &Path, text: &str) -> Result<Corpus> {
    let mut ids = Vec::new();
    let mut raw_labels = Vec::new();
    let mut entries = Vec::new();
    let mut width: Option<usize> = None;
    let mut index = HashSet::new();
    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() < 3 {
            return Err(parse_err(path, ln, "expected `id features... label`"));
        }
        let v = f.len() - 2;
        match width {
            None => width = Some(v),
            Some(w) if w != v => return Err(parse_err(path, ln, format!("{v} features, earlier rows have {w}"))),
            _ => {}
        }
        if !index.insert(f[0].to_string()) {
            return Err(parse_err(path, ln, format!("duplicate node id `{}`", f[0])));
        }
        let j = ids.len();
        for (t, tok) in f[1..=v].iter().enumerate() {
            let c: i64 = tok
                .parse()
                .map_err(|_| parse_err(path, ln, format!("bad feature value `{tok}`")))?;
            if c < 0 {
                return Err(parse_err(path, ln, format!("negative count {c}")));
            }
            if c > 0 {
                let c = u32::try_from(c).map_err(|_| parse_err(path, ln, format!("count {c} too large")))?;
                entries.push((j, t, c));
            }
        }
        ids.push(f[0].to_string());
        raw_labels.push(f[f.len() - 1].to_string());
    }
    if ids.is_empty() {
        return Err(parse_err(path, 1, "no nodes"));
    }
    let mut class_names: Vec<String> = raw_labels.iter().cloned().collect::<HashSet<_>>().into_iter().collect();
    class_names.sort();
    let class_of: HashMap<&str, usize> = class_names.iter().enumerate().map(|(c, s)| (s.as_str(), c)).collect();
    let labels = raw_labels.iter().map(|s| Some(class_of[s.as_str()])).collect();
    Ok(Corpus {
        features: SparseCountMatrix::new(ids.len(), width.unwrap(), entries)?,
        labels: Some(LabelVector {
            labels,
            num_classes: class_names.len(),
            class_names,
        }),
        node_ids: Some(ids),
    })
}

/// Loads an edge list. With `node_ids` the file holds original ids (as in a
/// Cora cites file) and pairs mentioning unknown ids are skipped; otherwise
/// it holds 0-based indices and `num_nodes` defaults to the largest index + 1.
pub fn load_edge_list(
    path: impl AsRef<Path>,
    num_nodes: Option<usize>,
    node_ids: Option<&[String]>,
) -> Result<AdjacencyGraph> {
    let path = path.as_ref();
    let text = read(path)?;
    let lookup: Option<HashMap<&str, usize>> =
        node_ids.map(|ids| ids.iter().enumerate().map(|(p, s)| (s.as_str(), p)).collect());
    let mut triples = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 2 && f.len() != 3 {
            return Err(parse_err(
                path,
                ln,
                format!("expected 2 or 3 fields, found {}", f.len()),
            ));
        }
        let value: u32 = match f.get(2) {
            Some(tok) => tok
                .parse()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| parse_err(path, ln, format!("bad edge count `{tok}`")))?,
            None => 1,
        };
        let (i, j) = match &lookup {
            Some(map) => match (map.get(f[0]), map.get(f[1])) {
                (Some(&i), Some(&j)) => (i, j),
                _ => continue,
            },
            None => {
                let idx = |tok: &str| {
                    tok.parse::<usize>()
                        .map_err(|_| parse_err(path, ln, format!("bad node index `{tok}`")))
                };
                (idx(f[0])?, idx(f[1])?)
            }
        };
        if i != j {
            triples.push((i, j, value));
        }
    }
    let n = match (node_ids, num_nodes) {
        (Some(ids), _) => ids.len(),
        (None, Some(n)) => n,
        (None, None) => triples.iter().map(|&(i, j, _)| i.max(j) + 1).max().unwrap_or(0),
    };
    if let Some(&(i, j, _)) = triples.iter().find(|&&(i, j, _)| i >= n || j >= n) {
        return Err(invalid!("{}: edge ({i}, {j}) outside {n} nodes", path.display()));
    }
    AdjacencyGraph::from_weighted_edges(n, triples)
}

/// Writes `index<TAB>original id` lines.
pub fn write_id_map(path: impl AsRef<Path>, node_ids: &[String]) -> Result<()> {
    let path = path.as_ref();
    let body: String = node_ids
        .iter()
        .enumerate()
        .map(|(p, s)| format!("{p}\t{s}\n"))
        .collect();
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// a_ij = 1 iff cos(x_i, x_j) >= τ_a, for i ≠ j.
pub fn build_cosine_adjacency(x: &SparseCountMatrix, tau_a: f64) -> Result<AdjacencyGraph> {
    if !(tau_a > 0.0 && tau_a < 1.0) {
        return Err(domain!("cosine threshold must lie in (0, 1), got {tau_a}"));
    }
    let n = x.num_nodes();
    let mut norms = vec![0.0; n];
    for (j, norm) in norms.iter_mut().enumerate() {
        let (_, c) = x.row(j);
        *norm = c.iter().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt();
        if *norm == 0.0 {
            return Err(invalid!("node {j} has an all-zero feature vector"));
        }
    }
    // inverted index: term -> (node, count)
    let mut postings: Vec<Vec<(usize, f64)>> = vec![Vec::new(); x.vocab_size()];
    for (j, v, c) in x.entries() {
        postings[v].push((j, c as f64));
    }
    let pairs: Vec<(usize, usize)> = (0..n)
        .into_par_iter()
        .map_init(
            || (vec![0.0; n], Vec::new()),
            |(acc, touched), i| {
                let (t, c) = x.row(i);
                for (&v, &ci) in t.iter().zip(c) {
                    for &(j, cj) in &postings[v as usize] {
                        if j > i {
                            if acc[j] == 0.0 {
                                touched.push(j);
                            }
                            acc[j] += ci as f64 * cj;
                        }
                    }
                }
                let mut out = Vec::new();
                for &j in touched.iter() {
                    if acc[j] / (norms[i] * norms[j]) >= tau_a {
                        out.push((i, j));
                    }
                    acc[j] = 0.0;
                }
                touched.clear();
                out
            },
        )
        .flatten()
        .collect();
    AdjacencyGraph::from_edges(n, pairs)
}

pub fn normalize_adjacency(a: &AdjacencyGraph, add_self_loops: bool) -> Result<NormalizedAdjacency> {
    let n = a.num_nodes();
    let mut degree = vec![if add_self_loops { 1.0 } else { 0.0 }; n];
    for (&(i, j), &v) in a.edges().iter().zip(a.values()) {
        degree[i] += v as f64;
        degree[j] += v as f64;
    }
    if let Some(i) = degree.iter().position(|&d| d == 0.0) {
        return Err(invalid!("node {i} is isolated; add self-loops to normalize"));
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut triplets = Vec::with_capacity(2 * a.num_edges() + n);
    for (&(i, j), &v) in a.edges().iter().zip(a.values()) {
        let w = v as f64 * inv_sqrt[i] * inv_sqrt[j];
        triplets.push((i, j, w));
        triplets.push((j, i, w));
    }
    if add_self_loops {
        triplets.extend((0..n).map(|i| (i, i, inv_sqrt[i] * inv_sqrt[i])));
    }
    Ok(NormalizedAdjacency {
        num_nodes: n,
        self_loops_added: add_self_loops,
        matrix: CsrMatrix::from_triplets(n, n, triplets)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeSplit {
    pub num_nodes: usize,
    pub train_edges: Vec<(usize, usize)>,
    pub train_values: Vec<u32>,
    pub val_edges: Vec<(usize, usize)>,
    pub test_edges: Vec<(usize, usize)>,
    pub val_nonedges: Vec<(usize, usize)>,
    pub test_nonedges: Vec<(usize, usize)>,
    pub seed: u64,
}

impl EdgeSplit {
    pub fn train_graph(&self) -> AdjacencyGraph {
        AdjacencyGraph::from_weighted_edges(
            self.num_nodes,
            self.train_edges
                .iter()
                .zip(&self.train_values)
                .map(|(&(i, j), &v)| (i, j, v)),
        )
        .expect("split edges come from a valid graph")
    }
}

fn split_count(frac: f64, total: usize) -> usize {
    (frac * total as f64 + 1e-9).floor() as usize
}

pub fn split_edges(a: &AdjacencyGraph, val_frac: f64, test_frac: f64, seed: u64) -> Result<EdgeSplit> {
    let in_unit = |f: f64| (0.0..1.0).contains(&f);
    if !in_unit(val_frac) || !in_unit(test_frac) || val_frac + test_frac >= 1.0 {
        return Err(domain!(
            "split fractions must be in [0, 1) with sum below 1, got {val_frac} and {test_frac}"
        ));
    }
    let e = a.num_edges();
    let n_val = split_count(val_frac, e);
    let n_test = split_count(test_frac, e);
    if (val_frac > 0.0 && n_val == 0) || (test_frac > 0.0 && n_test == 0) {
        return Err(invalid!("{e} edges are too few for a {val_frac}/{test_frac} split"));
    }
    let n = a.num_nodes();
    let absent = n * n.saturating_sub(1) / 2 - e;
    if absent < n_val + n_test {
        return Err(invalid!(
            "only {absent} absent pairs, {} non-edges required",
            n_val + n_test
        ));
    }
    let mut rng = RngStream::derive(seed, &[tags::SPLIT]);
    let mut order: Vec<usize> = (0..e).collect();
    order.shuffle(&mut rng);
    let take = |ids: &[usize]| -> Vec<(usize, usize)> {
        let mut v: Vec<_> = ids.iter().map(|&k| a.edges()[k]).collect();
        v.sort_unstable();
        v
    };
    let test_edges = take(&order[..n_test]);
    let val_edges = take(&order[n_test..n_test + n_val]);
    let mut train_ids = order[n_test + n_val..].to_vec();
    train_ids.sort_unstable();
    let train_edges = train_ids.iter().map(|&k| a.edges()[k]).collect();
    let train_values = train_ids.iter().map(|&k| a.values()[k]).collect();

    let mut chosen = HashSet::new();
    let mut nonedges = Vec::with_capacity(n_val + n_test);
    while nonedges.len() < n_val + n_test {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i == j {
            continue;
        }
        let pair = (i.min(j), i.max(j));
        if a.contains(pair.0, pair.1) || !chosen.insert(pair) {
            continue;
        }
        nonedges.push(pair);
    }
    let mut test_nonedges = nonedges.split_off(n_val);
    let mut val_nonedges = nonedges;
    test_nonedges.sort_unstable();
    val_nonedges.sort_unstable();
    Ok(EdgeSplit {
        num_nodes: n,
        train_edges,
        train_values,
        val_edges,
        test_edges,
        val_nonedges,
        test_nonedges,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::io::Write;

    fn temp_file(body: &str) -> tempfile::TempPath {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f.into_temp_path()
    }

    #[test]
    fn triples_round_trip() {
        let f = temp_file("0 3 2\n1 0 1\n");
        let c = load_corpus(&f, CorpusFormat::TsvTriples).unwrap();
        assert_eq!(c.features.num_nodes(), 2);
        assert!(c.features.vocab_size() >= 4);
        let e: Vec<_> = c.features.entries().collect();
        assert_eq!(e, vec![(0, 3, 2), (1, 0, 1)]);
        assert!(c.labels.is_none());
    }

    #[test]
    fn triples_errors_carry_line_numbers() {
        let f = temp_file("");
        assert!(load_corpus(&f, CorpusFormat::TsvTriples)
            .unwrap_err()
            .to_string()
            .contains("no nodes"));
        let f = temp_file("0 1 1\n0 1 2\n");
        let err = load_corpus(&f, CorpusFormat::TsvTriples).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let f = temp_file("0 1 1\n\n1 2 -3\n");
        assert!(matches!(
            load_corpus(&f, CorpusFormat::TsvTriples).unwrap_err(),
            Error::Parse { line: 3, .. }
        ));
        let f = temp_file("0 1\n");
        assert!(matches!(
            load_corpus(&f, CorpusFormat::TsvTriples).unwrap_err(),
            Error::Parse { line: 1, .. }
        ));
    }

    #[test]
    fn shape_header_pads_dimensions() {
        let f = temp_file("# shape 3 10\n0 1 1\n");
        let c = load_corpus(&f, CorpusFormat::TsvTriples).unwrap();
        assert_eq!((c.features.num_nodes(), c.features.vocab_size()), (3, 10));
    }

    #[test]
    fn cora_style_files() {
        let content = temp_file("p1\t1\t0\t1\tA\np7\t0\t0\t1\tB\np3\t1\t1\t0\tA\n");
        let c = load_corpus(&content, CorpusFormat::CoraContent).unwrap();
        assert_eq!(c.features.num_nodes(), 3);
        assert_eq!(c.features.vocab_size(), 3);
        let l = c.labels.unwrap();
        assert_eq!(l.num_classes, 2);
        assert_eq!(l.labels, vec![Some(0), Some(1), Some(0)]);
        let ids = c.node_ids.unwrap();
        let cites = temp_file("p1 p7\np7 p1\np3 p1\np9 p1\np3 p3\n");
        let g = load_edge_list(&cites, None, Some(&ids)).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (0, 2)]);
        let map = temp_file("");
        write_id_map(&map, &ids).unwrap();
        assert_eq!(std::fs::read_to_string(&map).unwrap(), "0\tp1\n1\tp7\n2\tp3\n");
    }

    #[test]
    fn edge_list_collapses_duplicates() {
        let f = temp_file("0 1\n1 0\n2 1\n");
        let g = load_edge_list(&f, None, None).unwrap();
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
        let mut bad = std::fs::File::create(&f).unwrap();
        writeln!(bad, "0 x").unwrap();
        assert!(load_edge_list(&f, None, None).is_err());
    }

    #[test]
    fn cosine_examples() {
        let x = SparseCountMatrix::new(
            4,
            3,
            vec![(0, 0, 1), (0, 1, 1), (1, 0, 1), (2, 0, 2), (2, 1, 2), (3, 2, 5)],
        )
        .unwrap();
        let g = build_cosine_adjacency(&x, 0.7).unwrap();
        // identical direction (0, 2); 1/sqrt(2) for (0, 1) and (1, 2); orthogonal 3
        assert_eq!(g.edges(), &[(0, 1), (0, 2), (1, 2)]);
        let g = build_cosine_adjacency(&x, 0.71).unwrap();
        assert_eq!(g.edges(), &[(0, 2)]);
        let empty = SparseCountMatrix::new(2, 2, vec![(0, 0, 1)]).unwrap();
        assert!(build_cosine_adjacency(&empty, 0.5)
            .unwrap_err()
            .to_string()
            .contains("node 1"));
        assert!(build_cosine_adjacency(&x, 1.0).is_err());
    }

    #[test]
    fn normalization_examples() {
        let g = AdjacencyGraph::from_edges(2, [(0, 1)]).unwrap();
        let a = normalize_adjacency(&g, true).unwrap().matrix.to_dense();
        assert!(a.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let a = normalize_adjacency(&g, false).unwrap().matrix.to_dense();
        assert_eq!(a, ndarray::array![[0.0, 1.0], [1.0, 0.0]]);
        let path = AdjacencyGraph::from_edges(3, [(0, 1), (1, 2)]).unwrap();
        let a = normalize_adjacency(&path, false).unwrap().matrix;
        assert_relative_eq!(a.get(0, 1), 0.5f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(a.get(2, 1), 0.5f64.sqrt(), epsilon = 1e-15);
        let isolated = AdjacencyGraph::from_edges(3, [(0, 1)]).unwrap();
        assert!(normalize_adjacency(&isolated, false).is_err());
        assert!(normalize_adjacency(&isolated, true).is_ok());
    }

    fn ring(n: usize, extra: usize) -> AdjacencyGraph {
        let mut e: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        e.extend((0..extra).map(|i| (i, (i + 2) % n)));
        AdjacencyGraph::from_edges(n, e).unwrap()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let g = ring(100, 0);
        let s = split_edges(&g, 0.05, 0.10, 3).unwrap();
        assert_eq!(
            (s.train_edges.len(), s.val_edges.len(), s.test_edges.len()),
            (85, 5, 10)
        );
        assert_eq!(s.val_nonedges.len(), 5);
        assert_eq!(s.test_nonedges.len(), 10);
        assert_eq!(s, split_edges(&g, 0.05, 0.10, 3).unwrap());
        assert_ne!(s.test_edges, split_edges(&g, 0.05, 0.10, 4).unwrap().test_edges);
        let s = split_edges(&g, 0.0, 0.0, 3).unwrap();
        assert_eq!(s.train_edges, g.edges());
        assert!(s.val_edges.is_empty() && s.test_nonedges.is_empty());
        assert!(split_edges(&g, 0.5, 0.5, 1).is_err());
        assert!(split_edges(&g, -0.1, 0.2, 1).is_err());
    }

    #[test]
    fn induced_subgraph_relabels() {
        let g = ring(6, 0);
        let s = g.induced_subgraph(&[5, 0, 3, 4]);
        assert_eq!(s.edges(), &[(0, 1), (0, 3), (2, 3)]);
    }

    proptest! {
        #[test]
        fn split_partitions_edges(n in 8usize..40, extra in 0usize..8, seed in 0u64..500, vf in 0.0f64..0.3, tf in 0.1f64..0.3) {
            let g = ring(n, extra.min(n));
            let s = split_edges(&g, vf, tf, seed);
            prop_assume!(s.is_ok());
            let s = s.unwrap();
            let mut all: Vec<_> = s.train_edges.iter().chain(&s.val_edges).chain(&s.test_edges).copied().collect();
            prop_assert_eq!(all.len(), g.num_edges());
            all.sort_unstable();
            prop_assert_eq!(&all[..], g.edges());
            for &(i, j) in s.val_nonedges.iter().chain(&s.test_nonedges) {
                prop_assert!(i < j && !g.contains(i, j));
            }
        }

        #[test]
        fn cosine_graph_is_scale_invariant(
            rows in proptest::collection::vec(proptest::collection::vec(0u32..4, 6), 3..12),
            scale in 2u32..5, which in 0usize..12, tau in 0.05f64..0.95,
        ) {
            let mut rows = rows;
            for r in rows.iter_mut() { r[0] += 1; }
            let n = rows.len();
            let dense = Array2::from_shape_fn((n, 6), |(i, v)| rows[i][v]);
            let mut scaled = dense.clone();
            scaled.row_mut(which % n).mapv_inplace(|c| c * scale);
            let a = build_cosine_adjacency(&SparseCountMatrix::from_dense(&dense), tau).unwrap();
            let b = build_cosine_adjacency(&SparseCountMatrix::from_dense(&scaled), tau).unwrap();
            // exact-threshold ties may flip under rounding; compare away from them
            let d = dense.mapv(|c| c as f64);
            for i in 0..n {
                for j in (i + 1)..n {
                    let cos = d.row(i).dot(&d.row(j)) / (d.row(i).dot(&d.row(i)) * d.row(j).dot(&d.row(j))).sqrt();
                    if (cos - tau).abs() > 1e-9 {
                        prop_assert_eq!(a.contains(i, j), b.contains(i, j));
                    }
                }
            }
        }

        #[test]
        fn normalized_rows_bounded(n in 3usize..30, extra in 0usize..10) {
            let g = ring(n, extra.min(n));
            let a = normalize_adjacency(&g, false).unwrap().matrix;
            let dense = a.to_dense();
            let max_deg = *g.degrees().iter().max().unwrap() as f64;
            prop_assert_eq!(&dense, &dense.t());
            for r in dense.rows() {
                prop_assert!(r.sum() <= max_deg.sqrt() + 1e-12);
            }
        }
    }
}
