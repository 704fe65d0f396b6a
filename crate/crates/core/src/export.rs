//! Topic trees and per-node relationship subnetworks.
//!
//! Layers are numbered from 1 (the layer whose topics are distributions over
//! words) up to T. Node and edge schemas of the JSON output are described in
//! the repository README.

use std::collections::VecDeque;
use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::gpgbn::DecoderState;

pub const TOP_WORDS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordWeight {
    pub word: String,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicNode {
    pub id: usize,
    pub layer: usize,
    pub topic: usize,
    pub depth: usize,
    pub words: Vec<WordWeight>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicEdge {
    pub parent: usize,
    pub child: usize,
    pub weight: f64,
}

/// Tree grown downward from one topic; `nodes[0]` is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicTree {
    pub nodes: Vec<TopicNode>,
    pub edges: Vec<TopicEdge>,
}

/// Projection of every layer-`layer` topic onto words: Φ^(1)···Φ^(layer).
pub fn topic_projection(phi: &[Array2<f64>], layer: usize) -> Result<Array2<f64>> {
    if layer == 0 || layer > phi.len() {
        return Err(invalid!("layer {layer} outside 1..={}", phi.len()));
    }
    let mut out = phi[0].clone();
    for p in &phi[1..layer] {
        out = out.dot(p);
    }
    Ok(out)
}

/// The `n` most probable words of a projected topic.
pub fn top_words(column: ndarray::ArrayView1<f64>, vocab: &[String], n: usize) -> Vec<WordWeight> {
    let mut idx: Vec<usize> = (0..column.len()).collect();
    idx.sort_by(|&a, &b| column[b].partial_cmp(&column[a]).unwrap().then(a.cmp(&b)));
    idx.into_iter()
        .take(n)
        .map(|v| WordWeight {
            word: vocab[v].clone(),
            prob: column[v],
        })
        .collect()
}

fn check_vocab(state: &DecoderState, vocab: &[String]) -> Result<()> {
    if vocab.len() != state.vocab_size {
        return Err(invalid!(
            "vocabulary has {} words, model expects {}",
            vocab.len(),
            state.vocab_size
        ));
    }
    Ok(())
}

/// Breadth-first growth from `root = (layer, topic)`. Children of `(t, k)` are
/// the layer t−1 topics `k'` with `Φ^(t)[k', k] > tau_phi[t−1] / K_{t−1}`.
/// `tau_phi` holds one threshold per layer, indexed from layer 1.
pub fn export_topic_tree(
    state: &DecoderState,
    root: (usize, usize),
    tau_phi: &[f64],
    vocab: &[String],
) -> Result<TopicTree> {
    check_vocab(state, vocab)?;
    let layers = state.phi.len();
    let (layer, topic) = root;
    if layer == 0 || layer > layers || topic >= state.widths[layer - 1] {
        return Err(invalid!("root ({layer}, {topic}) is outside the model"));
    }
    if tau_phi.len() != layers || tau_phi.iter().any(|t| !(*t >= 0.0)) {
        return Err(invalid!("need {layers} nonnegative thresholds, got {:?}", tau_phi));
    }
    let projections: Vec<Array2<f64>> = (1..=layer)
        .map(|t| topic_projection(&state.phi, t))
        .collect::<Result<_>>()?;
    let node = |id, layer: usize, topic, depth| TopicNode {
        id,
        layer,
        topic,
        depth,
        words: top_words(projections[layer - 1].column(topic), vocab, TOP_WORDS),
    };
    let mut tree = TopicTree {
        nodes: vec![node(0, layer, topic, 0)],
        edges: Vec::new(),
    };
    let mut queue = VecDeque::from([0usize]);
    while let Some(id) = queue.pop_front() {
        let (t, k, depth) = (tree.nodes[id].layer, tree.nodes[id].topic, tree.nodes[id].depth);
        if t == 1 {
            continue;
        }
        let phi = &state.phi[t - 1];
        let cut = tau_phi[t - 1] / phi.nrows() as f64;
        for (child, &w) in phi.column(k).iter().enumerate() {
            if w > cut {
                let cid = tree.nodes.len();
                tree.nodes.push(node(cid, t - 1, child, depth + 1));
                tree.edges.push(TopicEdge {
                    parent: id,
                    child: cid,
                    weight: w,
                });
                queue.push_back(cid);
            }
        }
    }
    Ok(tree)
}

impl TopicTree {
    /// Indented text, one topic per line with its top words.
    pub fn to_text(&self) -> String {
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            children[e.parent].push(e.child);
        }
        let mut out = String::new();
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let n = &self.nodes[id];
            let words: Vec<&str> = n.words.iter().map(|w| w.word.as_str()).collect();
            let _ = writeln!(
                out,
                "{}[L{} #{}] {}",
                "  ".repeat(n.depth),
                n.layer,
                n.topic,
                words.join(" ")
            );
            stack.extend(children[id].iter().rev());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubnetworkLink {
    pub node: usize,
    pub topic: usize,
    pub strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubnetworkLayer {
    pub layer: usize,
    pub links: Vec<SubnetworkLink>,
    /// Top words of every topic that carries at least one link.
    pub topics: Vec<(usize, Vec<WordWeight>)>,
}

/// Nodes related to `source` through individual topics at each layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subnetwork {
    pub source: usize,
    pub tau_u: f64,
    pub layers: Vec<SubnetworkLayer>,
}

/// Links `j` through topic `k` of layer `t` when `u_k θ_ik θ_jk > tau_u`,
/// using the decoder's own representations.
pub fn export_subnetwork(state: &DecoderState, source: usize, tau_u: f64, vocab: &[String]) -> Result<Subnetwork> {
    export_subnetwork_with(&state.phi, &state.u, &state.theta, source, tau_u, vocab)
}

/// As [`export_subnetwork`] with externally supplied representations.
pub fn export_subnetwork_with(
    phi: &[Array2<f64>],
    u: &[Array1<f64>],
    theta: &[Array2<f64>],
    source: usize,
    tau_u: f64,
    vocab: &[String],
) -> Result<Subnetwork> {
    let n = theta.first().map_or(0, |t| t.nrows());
    if source >= n {
        return Err(invalid!("node {source} outside 0..{n}"));
    }
    if tau_u.is_nan() {
        return Err(invalid!("threshold must be a number"));
    }
    if vocab.len() != phi[0].nrows() {
        return Err(invalid!(
            "vocabulary has {} words, model expects {}",
            vocab.len(),
            phi[0].nrows()
        ));
    }
    let mut layers = Vec::with_capacity(theta.len());
    for (t, (th, uk)) in theta.iter().zip(u).enumerate() {
        let mut links = Vec::new();
        let mut used = vec![false; th.ncols()];
        for k in 0..th.ncols() {
            let a = uk[k] * th[(source, k)];
            for j in (0..n).filter(|&j| j != source) {
                let s = a * th[(j, k)];
                if s > tau_u {
                    links.push(SubnetworkLink {
                        node: j,
                        topic: k,
                        strength: s,
                    });
                    used[k] = true;
                }
            }
        }
        links.sort_by(|a, b| b.strength.partial_cmp(&a.strength).unwrap().then(a.node.cmp(&b.node)));
        let proj = topic_projection(phi, t + 1)?;
        let topics = (0..th.ncols())
            .filter(|&k| used[k])
            .map(|k| (k, top_words(proj.column(k), vocab, TOP_WORDS)))
            .collect();
        layers.push(SubnetworkLayer {
            layer: t + 1,
            links,
            topics,
        });
    }
    Ok(Subnetwork { source, tau_u, layers })
}

impl Subnetwork {
    pub fn to_text(&self) -> String {
        let mut out = format!("node {} (tau_u = {})\n", self.source, self.tau_u);
        for l in &self.layers {
            let _ = writeln!(out, "  layer {}: {} link(s)", l.layer, l.links.len());
            for (k, words) in &l.topics {
                let w: Vec<&str> = words.iter().map(|w| w.word.as_str()).collect();
                let _ = writeln!(out, "    topic {k}: {}", w.join(" "));
                for link in l.links.iter().filter(|x| x.topic == *k) {
                    let _ = writeln!(out, "      -> {} ({:.4})", link.node, link.strength);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpgbn::{sample_prior_state, DecoderHyper};
    use approx::assert_relative_eq;

    fn vocab(v: usize) -> Vec<String> {
        (0..v).map(|i| format!("w{i}")).collect()
    }

    fn state() -> DecoderState {
        let widths = [6, 4, 2];
        sample_prior_state(12, 30, &widths, DecoderHyper::defaults(&widths), 1.0, 5).unwrap()
    }

    #[test]
    fn projections_are_distributions() {
        let s = state();
        for t in 1..=3 {
            let p = topic_projection(&s.phi, t).unwrap();
            for col in p.columns() {
                assert_relative_eq!(col.sum(), 1.0, epsilon = 1e-10);
            }
        }
        assert!(topic_projection(&s.phi, 0).is_err());
    }

    #[test]
    fn tree_threshold_extremes() {
        let s = state();
        let v = vocab(30);
        let single = export_topic_tree(&s, (3, 1), &[1e9; 3], &v).unwrap();
        assert_eq!((single.nodes.len(), single.edges.len()), (1, 0));
        let full = export_topic_tree(&s, (3, 1), &[0.0; 3], &v).unwrap();
        assert_eq!(full.nodes.len(), 1 + 4 + 4 * 6);
        for e in &full.edges {
            assert_eq!(full.nodes[e.parent].layer, full.nodes[e.child].layer + 1);
        }
        assert_eq!(full, export_topic_tree(&s, (3, 1), &[0.0; 3], &v).unwrap());
        assert!(export_topic_tree(&s, (3, 2), &[0.0; 3], &v).is_err());
        assert!(export_topic_tree(&s, (4, 0), &[0.0; 3], &v).is_err());
        assert_eq!(full.to_text().lines().count(), full.nodes.len());
    }

    #[test]
    fn identity_like_phi_gives_basis_words() {
        let mut s = state();
        let mut phi = Array2::from_elem((30, 6), 1e-3);
        for k in 0..6 {
            phi[(k * 5, k)] = 0.5;
            phi[(k * 5 + 1, k)] = 0.3;
        }
        for mut c in phi.columns_mut() {
            let z = c.sum();
            c /= z;
        }
        s.phi[0] = phi;
        let tree = export_topic_tree(&s, (1, 4), &[0.0; 3], &vocab(30)).unwrap();
        assert_eq!(tree.nodes.len(), 1);
        assert_eq!(tree.nodes[0].words[0].word, "w20");
        assert_eq!(tree.nodes[0].words[1].word, "w21");
    }

    #[test]
    fn subnetwork_extremes_and_symmetry() {
        let s = state();
        let v = vocab(30);
        let empty = export_subnetwork(&s, 0, f64::INFINITY, &v).unwrap();
        assert!(empty.layers.iter().all(|l| l.links.is_empty()));
        let all = export_subnetwork(&s, 0, 0.0, &v).unwrap();
        for (t, l) in all.layers.iter().enumerate() {
            let expected: usize = (0..s.widths[t])
                .map(|k| {
                    (1..12)
                        .filter(|&j| s.u[t][k] * s.theta[t][(0, k)] * s.theta[t][(j, k)] > 0.0)
                        .count()
                })
                .sum();
            assert_eq!(l.links.len(), expected);
        }
        let tau = 1e-3;
        for i in 0..12 {
            let si = export_subnetwork(&s, i, tau, &v).unwrap();
            for l in &si.layers {
                for link in &l.links {
                    let sj = export_subnetwork(&s, link.node, tau, &v).unwrap();
                    assert!(sj.layers[l.layer - 1]
                        .links
                        .iter()
                        .any(|x| x.node == i && x.topic == link.topic));
                    assert!(link.strength > tau);
                }
            }
        }
        assert!(export_subnetwork(&s, 12, 0.0, &v).is_err());
        assert!(all.to_text().starts_with("node 0"));
    }
}
