use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wgae::graph_data::{
    build_cosine_adjacency, load_corpus, load_edge_list, AdjacencyGraph, CorpusFormat, LabelVector, SparseCountMatrix,
};

use crate::error::CliError;
use crate::manifest::sha256_file;

/// Internal dataset: counts, graph, optional labels and names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub features: SparseCountMatrix,
    pub graph: AdjacencyGraph,
    pub labels: Option<LabelVector>,
    pub node_ids: Option<Vec<String>>,
    pub vocab: Vec<String>,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let ds: Self = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        ds.check()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, serde_json::to_string(self)?)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    fn check(&self) -> Result<(), CliError> {
        let n = self.features.num_nodes();
        let bad = |m: String| Err(CliError::Data(format!("dataset {}: {m}", self.name)));
        if self.graph.num_nodes() != n {
            return bad(format!("{n} feature rows but {} graph nodes", self.graph.num_nodes()));
        }
        if self.vocab.len() != self.features.vocab_size() {
            return bad(format!(
                "{} vocabulary entries for {} terms",
                self.vocab.len(),
                self.features.vocab_size()
            ));
        }
        if let Some(l) = &self.labels {
            if l.len() != n {
                return bad(format!("{} labels for {n} nodes", l.len()));
            }
        }
        if let Some(ids) = &self.node_ids {
            if ids.len() != n {
                return bad(format!("{} node ids for {n} nodes", ids.len()));
            }
        }
        Ok(())
    }

    /// Labels of every node, failing if any is missing.
    pub fn full_labels(&self) -> Result<(Vec<usize>, usize), CliError> {
        let l = self
            .labels
            .as_ref()
            .ok_or_else(|| CliError::Data(format!("dataset {} has no labels", self.name)))?;
        let all: Option<Vec<usize>> = l.labels.iter().copied().collect();
        let all = all.ok_or_else(|| CliError::Data(format!("dataset {} has unlabeled nodes", self.name)))?;
        Ok((all, l.num_classes))
    }

    /// Index of a node given either an index or an original id.
    pub fn resolve_node(&self, key: &str) -> Result<usize, CliError> {
        if let Some(ids) = &self.node_ids {
            if let Some(p) = ids.iter().position(|s| s == key) {
                return Ok(p);
            }
        }
        key.parse::<usize>()
            .ok()
            .filter(|&j| j < self.features.num_nodes())
            .ok_or_else(|| CliError::Usage(format!("unknown node `{key}`")))
    }
}

/// Ingestion recipe. Relative paths resolve against the data directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub name: String,
    pub corpus: PathBuf,
    pub format: Option<CorpusFormat>,
    /// Edge list; ids when the corpus carries node ids, else indices.
    pub edges: Option<PathBuf>,
    /// Build edges from feature cosine similarity above this threshold.
    pub cosine_tau: Option<f64>,
    /// One term per line, in column order.
    pub vocab: Option<PathBuf>,
    /// `node label` lines, node given by id or index.
    pub labels: Option<PathBuf>,
    /// Expected SHA-256 per input file name; checked when present.
    #[serde(default)]
    pub sha256: BTreeMap<String, String>,
}

impl Recipe {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Every input file with its resolved path.
    pub fn inputs(&self, data_dir: &Path) -> Vec<PathBuf> {
        [
            Some(&self.corpus),
            self.edges.as_ref(),
            self.vocab.as_ref(),
            self.labels.as_ref(),
        ]
        .into_iter()
        .flatten()
        .map(|p| data_dir.join(p))
        .collect()
    }

    pub fn verify_digests(&self, data_dir: &Path) -> Result<(), CliError> {
        for path in self.inputs(data_dir) {
            let name = path
                .file_name()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_default();
            if let Some(want) = self.sha256.get(&name) {
                let got = sha256_file(&path)?;
                if !got.eq_ignore_ascii_case(want) {
                    return Err(CliError::Data(format!(
                        "{}: digest {got} does not match {want}",
                        path.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn build(&self, data_dir: &Path) -> Result<Dataset, CliError> {
        self.verify_digests(data_dir)?;
        let format = self.format.unwrap_or(CorpusFormat::TsvTriples);
        let corpus = load_corpus(data_dir.join(&self.corpus), format)?;
        let n = corpus.features.num_nodes();
        let graph = match (&self.edges, self.cosine_tau) {
            (Some(_), Some(_)) => return Err(CliError::Usage("give either edges or cosine_tau, not both".into())),
            (Some(e), None) => load_edge_list(data_dir.join(e), Some(n), corpus.node_ids.as_deref())?,
            (None, Some(tau)) => build_cosine_adjacency(&corpus.features, tau)?,
            (None, None) => return Err(CliError::Usage("an edge list or cosine_tau is required".into())),
        };
        let vocab = match &self.vocab {
            Some(p) => read_vocab(&data_dir.join(p), corpus.features.vocab_size())?,
            None => (0..corpus.features.vocab_size()).map(|v| format!("w{v}")).collect(),
        };
        let labels = match &self.labels {
            Some(p) => Some(read_labels(&data_dir.join(p), corpus.node_ids.as_deref(), n)?),
            None => corpus.labels,
        };
        let ds = Dataset {
            name: self.name.clone(),
            features: corpus.features,
            graph,
            labels,
            node_ids: corpus.node_ids,
            vocab,
        };
        ds.check()?;
        Ok(ds)
    }
}

fn read_vocab(path: &Path, expected: usize) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let words: Vec<String> = text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    if words.len() != expected {
        return Err(CliError::Data(format!(
            "{}: {} terms, corpus has {expected}",
            path.display(),
            words.len()
        )));
    }
    Ok(words)
}

fn read_labels(path: &Path, ids: Option<&[String]>, n: usize) -> Result<LabelVector, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut raw: Vec<Option<String>> = vec![None; n];
    for (ln, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() || f[0].starts_with('#') {
            continue;
        }
        if f.len() != 2 {
            return Err(CliError::Data(format!(
                "{}:{}: expected `node label`",
                path.display(),
                ln + 1
            )));
        }
        let j = match ids {
            Some(ids) => ids.iter().position(|s| s == f[0]),
            None => f[0].parse::<usize>().ok().filter(|&j| j < n),
        };
        let j = j.ok_or_else(|| CliError::Data(format!("{}:{}: unknown node `{}`", path.display(), ln + 1, f[0])))?;
        raw[j] = Some(f[1].to_string());
    }
    let mut names: Vec<String> = raw.iter().flatten().cloned().collect();
    names.sort();
    names.dedup();
    let labels = raw
        .iter()
        .map(|r| r.as_ref().map(|s| names.binary_search(s).unwrap()))
        .collect();
    let mut lv = LabelVector::new(labels, names.len())?;
    lv.class_names = names;
    Ok(lv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        std::fs::write(dir.join(name), body).unwrap();
    }

    #[test]
    fn recipe_builds_dataset_with_labels_and_vocab() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "c.tsv", "0 0 2\n1 1 1\n2 0 1\n2 2 3\n");
        write(dir.path(), "e.txt", "0 1\n1 2\n");
        write(dir.path(), "v.txt", "alpha\nbeta\ngamma\n");
        write(dir.path(), "l.txt", "0 x\n2 y\n");
        let r = Recipe {
            name: "toy".into(),
            corpus: "c.tsv".into(),
            edges: Some("e.txt".into()),
            vocab: Some("v.txt".into()),
            labels: Some("l.txt".into()),
            ..Default::default()
        };
        let ds = r.build(dir.path()).unwrap();
        assert_eq!(ds.graph.num_edges(), 2);
        assert_eq!(ds.vocab[2], "gamma");
        let l = ds.labels.unwrap();
        assert_eq!(l.labels, vec![Some(0), None, Some(1)]);
        assert_eq!(l.class_names, vec!["x", "y"]);
    }

    #[test]
    fn digest_mismatch_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "c.tsv", "0 0 1\n1 0 1\n");
        let mut r = Recipe {
            name: "toy".into(),
            corpus: "c.tsv".into(),
            cosine_tau: Some(0.5),
            ..Default::default()
        };
        r.sha256.insert("c.tsv".into(), "00".repeat(32));
        assert!(matches!(r.build(dir.path()), Err(CliError::Data(_))));
        r.sha256
            .insert("c.tsv".into(), sha256_file(&dir.path().join("c.tsv")).unwrap());
        assert_eq!(r.build(dir.path()).unwrap().graph.num_edges(), 1);
    }

    #[test]
    fn shipped_recipes_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../recipes");
        let mut names = Vec::new();
        for entry in std::fs::read_dir(&dir).unwrap() {
            let r = Recipe::load(&entry.unwrap().path()).unwrap();
            assert!(r.edges.is_some() != r.cosine_tau.is_some(), "{}", r.name);
            names.push(r.name);
        }
        names.sort();
        assert_eq!(names, ["20news", "citeseer", "cora", "pubmed"]);
    }

    #[test]
    fn edges_and_cosine_together_are_rejected() {
        let r = Recipe {
            name: "x".into(),
            corpus: "missing".into(),
            edges: Some("e".into()),
            cosine_tau: Some(0.1),
            ..Default::default()
        };
        assert!(r.build(Path::new("/nonexistent")).is_err());
    }
}
