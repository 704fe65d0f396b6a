//! Poisson gamma belief network decoder with Bernoulli–Poisson edges.
//!
//! Layers are indexed from 0 in code. Layer `l` has width `widths[l]`,
//! loadings `phi[l]` of shape `K_{l-1} × K_l` (with `K_{-1}` the vocabulary)
//! and node factors `theta[l]` of shape `N × K_l`. `c[l]` is the gamma rate of
//! `theta[l]`, and `p[l]` the negative-binomial probability attached to layer
//! `l`, so `p[0] = 1 - e^{-1}` and `p` has `T + 1` entries.
//!
//! All randomness is drawn from streams keyed by `(seed, tag, iteration,
//! layer, chunk)`, where chunks have a fixed size. Integer aggregates are
//! reduced exactly, so a sweep is bit-identical whatever the thread count.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, invalid, Error, Result};
use crate::graph_data::{AdjacencyGraph, SparseCountMatrix};
use crate::stochastic::{
    sample_crt, sample_dirichlet_into, sample_gamma, sample_multinomial_into, sample_poisson, sample_truncated_poisson,
    tags, RngStream,
};

pub const THETA_FLOOR: f64 = 1e-30;
pub const U_FLOOR: f64 = 1e-30;
pub const P_MIN: f64 = 1e-9;
pub const P_MAX: f64 = 1.0 - 1e-9;

pub(crate) const NODE_CHUNK: usize = 64;
pub(crate) const EDGE_CHUNK: usize = 1024;

/// How observed edges are augmented.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeLink {
    /// Binary edges: latent count drawn from the zero-truncated Poisson.
    #[default]
    Binary,
    /// Count-valued edges: the observed value is the latent count.
    Count,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderHyper {
    /// Dirichlet concentration per layer.
    pub eta: Vec<f64>,
    pub e0: f64,
    pub f0: f64,
    pub alpha0: f64,
    pub beta0: f64,
    /// Top-layer gamma shape, one entry per top-layer topic.
    pub gamma: Vec<f64>,
    pub edge_link: EdgeLink,
}

impl DecoderHyper {
    /// η = 0.01, e0 = f0 = α0 = β0 = 1, γ = 1.
    pub fn defaults(widths: &[usize]) -> Self {
        Self {
            eta: vec![0.01; widths.len()],
            e0: 1.0,
            f0: 1.0,
            alpha0: 1.0,
            beta0: 1.0,
            gamma: vec![1.0; *widths.last().unwrap_or(&0)],
            edge_link: EdgeLink::Binary,
        }
    }

    pub fn validate(&self, widths: &[usize]) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(domain!("{name} must be positive, got {v}"))
            }
        };
        if self.eta.len() != widths.len() {
            return Err(invalid!("{} η values for {} layers", self.eta.len(), widths.len()));
        }
        if Some(&self.gamma.len()) != widths.last() {
            return Err(invalid!(
                "γ has {} entries, top layer has {:?}",
                self.gamma.len(),
                widths.last()
            ));
        }
        for &e in &self.eta {
            positive("η", e)?;
        }
        for &g in &self.gamma {
            positive("γ", g)?;
        }
        positive("e0", self.e0)?;
        positive("f0", self.f0)?;
        positive("α0", self.alpha0)?;
        positive("β0", self.beta0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderState {
    pub vocab_size: usize,
    pub widths: Vec<usize>,
    pub phi: Vec<Array2<f64>>,
    pub u: Vec<Array1<f64>>,
    pub theta: Vec<Array2<f64>>,
    pub c: Vec<Array1<f64>>,
    pub p: Vec<Array1<f64>>,
    pub hyper: DecoderHyper,
    pub iteration: u64,
    pub seed: u64,
}

/// Identifies the random streams of one sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepKey {
    pub seed: u64,
    pub iteration: u64,
}

impl SweepKey {
    pub(crate) fn stream(&self, tag: u64, layer: usize, unit: usize) -> RngStream {
        RngStream::derive(self.seed, &[tag, self.iteration, layer as u64, unit as u64])
    }
}

impl DecoderState {
    /// Random initial state: Φ columns uniform-then-normalized, θ at the
    /// per-node count scale on layer 0 and 1 elsewhere, u = c = 1.
    pub fn init(x: &SparseCountMatrix, widths: &[usize], hyper: DecoderHyper, seed: u64) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(invalid!("layer widths must be nonempty and positive, got {widths:?}"));
        }
        hyper.validate(widths)?;
        let n = x.num_nodes();
        let v = x.vocab_size();
        let mut rng = RngStream::derive(seed, &[tags::INIT]);
        let mut phi = Vec::with_capacity(widths.len());
        for (l, &k) in widths.iter().enumerate() {
            let rows = if l == 0 { v } else { widths[l - 1] };
            let mut m = Array2::from_shape_fn((rows, k), |_| 0.5 + rng.open01());
            normalize_columns(&mut m);
            phi.push(m);
        }
        let theta = widths
            .iter()
            .enumerate()
            .map(|(l, &k)| {
                Array2::from_shape_fn((n, k), |(j, _)| {
                    if l == 0 {
                        (x.row_total(j).max(1) as f64) / k as f64
                    } else {
                        1.0
                    }
                })
            })
            .collect();
        let mut state = Self {
            vocab_size: v,
            widths: widths.to_vec(),
            phi,
            u: widths.iter().map(|&k| Array1::ones(k)).collect(),
            theta,
            c: widths.iter().map(|_| Array1::ones(n)).collect(),
            p: Vec::new(),
            hyper,
            iteration: 0,
            seed,
        };
        state.p = p_recursion(&state.c);
        Ok(state)
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.theta.first().map_or(0, |t| t.nrows())
    }

    /// Gamma shape of θ^(l) implied by the layer above (or γ at the top).
    pub fn prior_shape(&self, layer: usize) -> Array2<f64> {
        prior_shape(&self.phi, &self.theta, &self.hyper.gamma, layer)
    }

    pub fn check_invariants(&self) -> Result<()> {
        for (l, m) in self.phi.iter().enumerate() {
            for (k, col) in m.axis_iter(Axis(1)).enumerate() {
                let s = col.sum();
                if (s - 1.0).abs() > 1e-12 || col.iter().any(|&x| !(x >= 0.0)) {
                    return Err(Error::Numerical(format!(
                        "Φ layer {l} column {k} left the simplex (sum {s})"
                    )));
                }
            }
        }
        let positive = |what: &str, a: &Array1<f64>| {
            if a.iter().all(|&x| x > 0.0 && x.is_finite()) {
                Ok(())
            } else {
                Err(Error::Numerical(format!(
                    "{what} has a nonpositive or non-finite entry"
                )))
            }
        };
        for l in 0..self.num_layers() {
            if self.theta[l].iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(Error::Numerical(format!(
                    "θ layer {l} has a nonpositive or non-finite entry"
                )));
            }
            positive("u", &self.u[l])?;
            positive("c", &self.c[l])?;
        }
        for p in &self.p {
            if p.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
                return Err(Error::Numerical("p left (0, 1)".into()));
            }
        }
        Ok(())
    }
}

pub(crate) fn normalize_columns(m: &mut Array2<f64>) {
    for mut col in m.axis_iter_mut(Axis(1)) {
        let s = col.sum();
        col.mapv_inplace(|x| x / s);
    }
}

pub(crate) fn prior_shape(phi: &[Array2<f64>], theta: &[Array2<f64>], gamma: &[f64], layer: usize) -> Array2<f64> {
    let t = theta.len();
    let n = theta[layer].nrows();
    if layer + 1 == t {
        let g = ArrayView1::from(gamma);
        Array2::from_shape_fn((n, g.len()), |(_, k)| g[k])
    } else {
        theta[layer + 1].dot(&phi[layer + 1].t())
    }
}

/// p[0] = 1 − e^{−1}; p[l+1] = q_l / (c[l] + q_l) with q_l = −ln(1 − p[l]).
pub fn p_recursion(c: &[Array1<f64>]) -> Vec<Array1<f64>> {
    let n = c.first().map_or(0, |x| x.len());
    let mut p = Vec::with_capacity(c.len() + 1);
    let mut q = Array1::<f64>::ones(n);
    p.push(Array1::from_elem(n, 1.0 - (-1f64).exp()));
    for cl in c {
        let next = Zip::from(&q)
            .and(cl)
            .map_collect(|&q, &c| (q / (c + q)).clamp(P_MIN, P_MAX));
        q = next.mapv(|p| -(-p).ln_1p());
        p.push(next);
    }
    p
}

/// −ln(1 − p) elementwise.
pub fn neg_log1m(p: ArrayView1<f64>) -> Array1<f64> {
    p.mapv(|p| -(-p).ln_1p())
}

/// Latent node counts for one layer, aggregated over the split.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeCounts {
    /// x_{·jk}: N × K.
    pub node_totals: Array2<u64>,
    /// x_{v·k}: K_{l−1} × K, weighted by the optional node weights.
    pub term_totals: Array2<f64>,
}

/// Splits every nonzero x_vj over topics via Multinomial(x_vj, ∝ φ_vk θ_jk).
/// With `node_weights`, each node's contribution to `term_totals` is scaled.
pub fn augment_node_counts(
    x: &SparseCountMatrix,
    phi: ArrayView2<f64>,
    theta: ArrayView2<f64>,
    node_weights: Option<&[f64]>,
    key: SweepKey,
    layer: usize,
) -> Result<NodeCounts> {
    let (n, k) = theta.dim();
    let v = x.vocab_size();
    if x.num_nodes() != n || phi.dim() != (v, k) {
        return Err(Error::Dimension(format!(
            "counts {}x{v}, Φ {:?}, Θ {:?}",
            x.num_nodes(),
            phi.dim(),
            theta.dim()
        )));
    }
    let mut node_totals = Array2::<u64>::zeros((n, k));
    let term_totals = node_totals
        .axis_chunks_iter_mut(Axis(0), NODE_CHUNK)
        .into_par_iter()
        .enumerate()
        .map(|(chunk, mut rows)| -> Result<Array2<f64>> {
            let mut rng = key.stream(tags::NODE_AUGMENT, layer, chunk);
            let mut acc = Array2::<f64>::zeros((v, k));
            let mut w = vec![0.0; k];
            let mut split = vec![0u64; k];
            for (r, mut row) in rows.axis_iter_mut(Axis(0)).enumerate() {
                let j = chunk * NODE_CHUNK + r;
                let weight = node_weights.map_or(1.0, |w| w[j]);
                let (terms, counts) = x.row(j);
                for (&t, &cnt) in terms.iter().zip(counts) {
                    let t = t as usize;
                    for kk in 0..k {
                        w[kk] = phi[[t, kk]] * theta[[j, kk]];
                    }
                    sample_multinomial_into(cnt as u64, &w, &mut split, &mut rng)
                        .map_err(|e| Error::Numerical(format!("node {j} term {t}: {e}")))?;
                    for kk in 0..k {
                        row[kk] += split[kk];
                        acc[[t, kk]] += weight * split[kk] as f64;
                    }
                }
            }
            Ok(acc)
        })
        .try_reduce(|| Array2::zeros((v, k)), |a, b| Ok(a + b))?;
    Ok(NodeCounts {
        node_totals,
        term_totals,
    })
}

/// Latent edge counts for all layers.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeCounts {
    /// m_ij per observed edge, in graph order.
    pub edge_totals: Vec<u64>,
    /// Σ_{i≠j} m_ijk per node, per layer: N × K_l.
    pub node_totals: Vec<Array2<u64>>,
    /// Σ_{i<j} m_ijk per layer, weighted by the optional pair weights.
    pub topic_totals: Vec<Array1<f64>>,
}

/// Per-layer edge rate Σ_k u_k θ_ik θ_jk.
pub fn layer_rate(u: ArrayView1<f64>, theta: ArrayView2<f64>, i: usize, j: usize) -> f64 {
    let (a, b) = (theta.row(i), theta.row(j));
    let mut r = 0.0;
    for k in 0..u.len() {
        r += u[k] * a[k] * b[k];
    }
    r
}

/// Draws m_ij for every observed edge and splits it across layers and
/// topics in proportion to u_k θ_ik θ_jk. Non-edges contribute nothing.
pub fn augment_edge_counts(
    a: &AdjacencyGraph,
    u: &[Array1<f64>],
    theta: &[Array2<f64>],
    link: EdgeLink,
    pair_weights: Option<&[f64]>,
    key: SweepKey,
) -> Result<EdgeCounts> {
    let n = a.num_nodes();
    let widths: Vec<usize> = u.iter().map(|x| x.len()).collect();
    if theta.iter().zip(&widths).any(|(t, &k)| t.dim() != (n, k)) {
        return Err(Error::Dimension("Θ and u disagree with the graph".into()));
    }
    let offsets: Vec<usize> = std::iter::once(0)
        .chain(widths.iter().scan(0, |s, &k| {
            *s += k;
            Some(*s)
        }))
        .collect();
    let total_k = *offsets.last().unwrap();
    let edges = a.edges();
    let values = a.values();
    let mut edge_totals = vec![0u64; edges.len()];

    type Acc = (Vec<Array2<u64>>, Vec<Array1<f64>>);
    let zero = || -> Acc {
        (
            widths.iter().map(|&k| Array2::zeros((n, k))).collect(),
            widths.iter().map(|&k| Array1::zeros(k)).collect(),
        )
    };
    let (node_totals, topic_totals) = edge_totals
        .par_chunks_mut(EDGE_CHUNK)
        .enumerate()
        .map(|(chunk, out)| -> Result<Acc> {
            let mut rng = key.stream(tags::EDGE_AUGMENT, 0, chunk);
            let (mut nodes, mut topics) = zero();
            let mut w = vec![0.0; total_k];
            let mut split = vec![0u64; total_k];
            for (r, slot) in out.iter_mut().enumerate() {
                let e = chunk * EDGE_CHUNK + r;
                let (i, j) = edges[e];
                let mut rate = 0.0;
                for (l, th) in theta.iter().enumerate() {
                    for k in 0..widths[l] {
                        let x = u[l][k] * th[[i, k]] * th[[j, k]];
                        w[offsets[l] + k] = x;
                        rate += x;
                    }
                }
                if !(rate > 0.0 && rate.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "edge ({i}, {j}) has total rate {rate}; the model cannot produce it"
                    )));
                }
                let m = match link {
                    EdgeLink::Binary => sample_truncated_poisson(rate, &mut rng)?,
                    EdgeLink::Count => values[e] as u64,
                };
                *slot = m;
                sample_multinomial_into(m, &w, &mut split, &mut rng)?;
                let pw = pair_weights.map_or(1.0, |p| p[e]);
                for (l, &k) in widths.iter().enumerate() {
                    for kk in 0..k {
                        let c = split[offsets[l] + kk];
                        if c > 0 {
                            nodes[l][[i, kk]] += c;
                            nodes[l][[j, kk]] += c;
                            topics[l][kk] += pw * c as f64;
                        }
                    }
                }
            }
            Ok((nodes, topics))
        })
        .try_reduce(zero, |(mut na, mut ta), (nb, tb)| {
            for (x, y) in na.iter_mut().zip(nb) {
                *x += &y;
            }
            for (x, y) in ta.iter_mut().zip(tb) {
                *x += &y;
            }
            Ok((na, ta))
        })?;
    Ok(EdgeCounts {
        edge_totals,
        node_totals,
        topic_totals,
    })
}

/// x^(l+1)_{jk} = CRT(x^(l)_{·jk} + Σ_i m^(l)_{ijk}, [θ^(l+1) Φ^(l+1)ᵀ]_{jk}).
pub fn propagate_counts_upward(
    node_totals: ArrayView2<u64>,
    edge_node_totals: Option<ArrayView2<u64>>,
    concentration: ArrayView2<f64>,
    key: SweepKey,
    layer: usize,
) -> Result<SparseCountMatrix> {
    let (n, k) = node_totals.dim();
    if concentration.dim() != (n, k) || edge_node_totals.is_some_and(|e| e.dim() != (n, k)) {
        return Err(Error::Dimension("propagation inputs disagree in shape".into()));
    }
    let chunks: Vec<Vec<(usize, usize, u32)>> = (0..n.div_ceil(NODE_CHUNK))
        .into_par_iter()
        .map(|chunk| -> Result<Vec<(usize, usize, u32)>> {
            let mut rng = key.stream(tags::PROPAGATE, layer, chunk);
            let mut out = Vec::new();
            for j in chunk * NODE_CHUNK..((chunk + 1) * NODE_CHUNK).min(n) {
                for kk in 0..k {
                    let count = node_totals[[j, kk]] + edge_node_totals.map_or(0, |e| e[[j, kk]]);
                    if count == 0 {
                        continue;
                    }
                    let l = sample_crt(count, concentration[[j, kk]], &mut rng)?;
                    if l > 0 {
                        let l = u32::try_from(l).map_err(|_| Error::Numerical("CRT count overflow".into()))?;
                        out.push((j, kk, l));
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    SparseCountMatrix::new(n, k, chunks.into_iter().flatten().collect())
}

/// Each column k of Φ drawn from Dir(term_totals[:, k] + η).
pub fn update_phi_gibbs(term_totals: ArrayView2<f64>, eta: f64, key: SweepKey, layer: usize) -> Result<Array2<f64>> {
    let (rows, k) = term_totals.dim();
    let mut phi = Array2::zeros((rows, k));
    phi.axis_iter_mut(Axis(1))
        .into_par_iter()
        .enumerate()
        .try_for_each(|(kk, mut col)| -> Result<()> {
            let mut rng = key.stream(tags::PHI, layer, kk);
            let conc: Vec<f64> = term_totals.column(kk).iter().map(|&x| x + eta).collect();
            let mut draw = vec![0.0; rows];
            sample_dirichlet_into(&conc, &mut draw, &mut rng)?;
            col.assign(&ArrayView1::from(&draw[..]));
            Ok(())
        })?;
    Ok(phi)
}

/// Inputs of the θ conditional for one layer.
pub struct ThetaConditional<'a> {
    /// x_{·jk} + Σ_i m_ijk.
    pub counts: ArrayView2<'a, u64>,
    /// Φ^(l+1)θ^(l+1) or γ, per node.
    pub prior_shape: ArrayView2<'a, f64>,
    /// −ln(1 − p^(l)_j).
    pub likelihood_rate: ArrayView1<'a, f64>,
    /// c^(l+1)_j.
    pub prior_rate: ArrayView1<'a, f64>,
    pub u: ArrayView1<'a, f64>,
    /// Current θ^(l), used for the edge cross-term.
    pub current: ArrayView2<'a, f64>,
    /// Whether edge terms apply to this layer.
    pub with_edges: bool,
}

/// θ_jk ~ Gam(counts + prior shape, 1 / [q_j + c_j + u_k (S_k − θ_jk)]),
/// S_k = Σ_i θ_ik from the current state.
pub fn update_theta_gibbs(cond: &ThetaConditional, key: SweepKey, layer: usize) -> Result<Array2<f64>> {
    let (n, k) = cond.current.dim();
    let col_sums = cond.current.sum_axis(Axis(0));
    let mut out = Array2::zeros((n, k));
    out.axis_chunks_iter_mut(Axis(0), NODE_CHUNK)
        .into_par_iter()
        .enumerate()
        .try_for_each(|(chunk, mut rows)| -> Result<()> {
            let mut rng = key.stream(tags::THETA, layer, chunk);
            for (r, mut row) in rows.axis_iter_mut(Axis(0)).enumerate() {
                let j = chunk * NODE_CHUNK + r;
                for kk in 0..k {
                    let shape = cond.counts[[j, kk]] as f64 + cond.prior_shape[[j, kk]];
                    let mut rate = cond.likelihood_rate[j] + cond.prior_rate[j];
                    if cond.with_edges {
                        rate += cond.u[kk] * (col_sums[kk] - cond.current[[j, kk]]).max(0.0);
                    }
                    let draw = sample_gamma(shape, 1.0 / rate, &mut rng)
                        .map_err(|e| Error::Numerical(format!("θ node {j} topic {kk}: {e}")))?;
                    row[kk] = draw.max(THETA_FLOOR);
                }
            }
            Ok(())
        })?;
    Ok(out)
}

/// Σ_{i<j} θ_ik θ_jk for every topic, in O(NK).
pub fn pair_sums(theta: ArrayView2<f64>) -> Array1<f64> {
    let s = theta.sum_axis(Axis(0));
    let sq = theta.mapv(|x| x * x).sum_axis(Axis(0));
    Zip::from(&s)
        .and(&sq)
        .map_collect(|&s, &q| ((s * s - q) / 2.0).max(0.0))
}

/// u_k ~ Gam(Σ_{i<j} m_ijk + α0, 1 / (β0 + Σ_{i<j} θ_ik θ_jk)).
pub fn update_u_gibbs(
    topic_counts: ArrayView1<f64>,
    pair_sum: ArrayView1<f64>,
    alpha0: f64,
    beta0: f64,
    key: SweepKey,
    layer: usize,
) -> Result<Array1<f64>> {
    let mut rng = key.stream(tags::U, layer, 0);
    let mut u = Array1::zeros(topic_counts.len());
    for k in 0..u.len() {
        let draw = sample_gamma(topic_counts[k] + alpha0, 1.0 / (beta0 + pair_sum[k]), &mut rng)?;
        u[k] = draw.max(U_FLOOR);
    }
    Ok(u)
}

/// c^(l)_j ~ Gam(shape_j + e0, 1 / (f0 + θ^(l)_{j·})) for every layer, then
/// the p recursion. The shape is θ^(l+1)_{j·} (Σγ at the top).
pub fn update_scales(
    theta: &[Array2<f64>],
    gamma: &[f64],
    e0: f64,
    f0: f64,
    key: SweepKey,
) -> Result<(Vec<Array1<f64>>, Vec<Array1<f64>>)> {
    let t = theta.len();
    let n = theta[0].nrows();
    let gamma_sum: f64 = gamma.iter().sum();
    let sums: Vec<Array1<f64>> = theta.iter().map(|m| m.sum_axis(Axis(1))).collect();
    let mut c = Vec::with_capacity(t);
    for l in 0..t {
        let mut cl = Array1::zeros(n);
        cl.axis_chunks_iter_mut(Axis(0), NODE_CHUNK)
            .into_par_iter()
            .enumerate()
            .try_for_each(|(chunk, mut out)| -> Result<()> {
                let mut rng = key.stream(tags::SCALES, l, chunk);
                for (r, slot) in out.iter_mut().enumerate() {
                    let j = chunk * NODE_CHUNK + r;
                    let shape = if l + 1 == t { gamma_sum } else { sums[l + 1][j] } + e0;
                    *slot = sample_gamma(shape, 1.0 / (f0 + sums[l][j]), &mut rng)?.max(THETA_FLOOR);
                }
                Ok(())
            })?;
        c.push(cl);
    }
    let p = p_recursion(&c);
    if p.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("p recursion produced a non-finite value".into()));
    }
    Ok((c, p))
}

/// Everything produced by the augmentation half of a sweep.
#[derive(Clone, Debug)]
pub struct Augmented {
    pub nodes: Vec<NodeCounts>,
    pub edges: EdgeCounts,
}

/// Augments node counts on every layer (propagating upward by CRT) and edge
/// counts on every layer, for the given Θ.
pub fn augment_all(
    x: &SparseCountMatrix,
    a: &AdjacencyGraph,
    phi: &[Array2<f64>],
    theta: &[Array2<f64>],
    u: &[Array1<f64>],
    hyper: &DecoderHyper,
    node_weights: Option<&[f64]>,
    pair_weights: Option<&[f64]>,
    key: SweepKey,
) -> Result<Augmented> {
    let t = phi.len();
    let edges = augment_edge_counts(a, u, theta, hyper.edge_link, pair_weights, key)?;
    let mut nodes = Vec::with_capacity(t);
    let mut counts = augment_node_counts(x, phi[0].view(), theta[0].view(), node_weights, key, 0)?;
    for l in 0..t {
        if l + 1 < t {
            let conc = theta[l + 1].dot(&phi[l + 1].t());
            let upper = propagate_counts_upward(
                counts.node_totals.view(),
                Some(edges.node_totals[l].view()),
                conc.view(),
                key,
                l,
            )?;
            let next = augment_node_counts(&upper, phi[l + 1].view(), theta[l + 1].view(), node_weights, key, l + 1)?;
            nodes.push(counts);
            counts = next;
        } else {
            nodes.push(counts);
            break;
        }
    }
    Ok(Augmented { nodes, edges })
}

/// One full Gibbs sweep: augment, propagate, Φ, Θ top-down, u, then c and p.
pub fn gibbs_sweep(state: &mut DecoderState, x: &SparseCountMatrix, a: &AdjacencyGraph) -> Result<()> {
    let n = state.num_nodes();
    if x.num_nodes() != n || a.num_nodes() != n || x.vocab_size() != state.vocab_size {
        return Err(Error::Dimension(format!(
            "state has {n} nodes and {} terms; data has {} nodes, {} terms, graph {} nodes",
            state.vocab_size,
            x.num_nodes(),
            x.vocab_size(),
            a.num_nodes()
        )));
    }
    let key = SweepKey {
        seed: state.seed,
        iteration: state.iteration,
    };
    let t = state.num_layers();
    let aug = augment_all(x, a, &state.phi, &state.theta, &state.u, &state.hyper, None, None, key)?;

    for l in 0..t {
        state.phi[l] = update_phi_gibbs(aug.nodes[l].term_totals.view(), state.hyper.eta[l], key, l)?;
    }

    let with_edges = a.num_edges() > 0;
    for l in (0..t).rev() {
        let counts = &aug.nodes[l].node_totals + &aug.edges.node_totals[l];
        let shape = state.prior_shape(l);
        let q = neg_log1m(state.p[l].view());
        let cond = ThetaConditional {
            counts: counts.view(),
            prior_shape: shape.view(),
            likelihood_rate: q.view(),
            prior_rate: state.c[l].view(),
            u: state.u[l].view(),
            current: state.theta[l].view(),
            with_edges,
        };
        state.theta[l] = update_theta_gibbs(&cond, key, l)?;
    }

    for l in 0..t {
        let ps = pair_sums(state.theta[l].view());
        state.u[l] = update_u_gibbs(
            aug.edges.topic_totals[l].view(),
            ps.view(),
            state.hyper.alpha0,
            state.hyper.beta0,
            key,
            l,
        )?;
    }

    let (c, p) = update_scales(&state.theta, &state.hyper.gamma, state.hyper.e0, state.hyper.f0, key)?;
    state.c = c;
    state.p = p;
    state.iteration += 1;
    Ok(())
}

/// P(a_ij = 1) = 1 − exp(−Σ_t Σ_k u_k θ_ik θ_jk).
pub fn edge_probability(u: &[Array1<f64>], theta_i: &[ArrayView1<f64>], theta_j: &[ArrayView1<f64>]) -> f64 {
    let mut rate = 0.0;
    for l in 0..u.len() {
        rate += (&u[l] * &theta_i[l] * &theta_j[l]).sum();
    }
    -(-rate).exp_m1()
}

/// Edge probability between nodes `i` and `j` of a Θ stack.
pub fn edge_probability_nodes(u: &[Array1<f64>], theta: &[Array2<f64>], i: usize, j: usize) -> f64 {
    let rate: f64 = u
        .iter()
        .zip(theta)
        .map(|(u, th)| layer_rate(u.view(), th.view(), i, j))
        .sum();
    -(-rate).exp_m1()
}

/// A^(t) = Θ diag(u) Θᵀ (dense N × N).
pub fn layer_adjacency(u: ArrayView1<f64>, theta: ArrayView2<f64>) -> Array2<f64> {
    let scaled = &theta * &u.insert_axis(Axis(0));
    scaled.dot(&theta.t())
}

/// E[x_j] = (Φ^(1) ⋯ Φ^(t)) θ^(t)_j / (c^(2) ⋯ c^(t)), as an N × V matrix,
/// for 0-based `layer`.
pub fn reconstruct_nodes(phi: &[Array2<f64>], theta: ArrayView2<f64>, c: &[Array1<f64>], layer: usize) -> Array2<f64> {
    let mut proj = phi[0].clone();
    for m in &phi[1..=layer] {
        proj = proj.dot(m);
    }
    let mut out = theta.dot(&proj.t());
    for cl in &c[..layer] {
        for (mut row, &cj) in out.axis_iter_mut(Axis(0)).zip(cl) {
            row.mapv_inplace(|x| x / cj);
        }
    }
    out
}

/// Generated node features and graph.
#[derive(Clone, Debug)]
pub struct Generated {
    pub features: SparseCountMatrix,
    pub graph: AdjacencyGraph,
}

/// Draws X ~ Pois(Φ^(1)θ^(1)) and every pair a_ij ~ Bernoulli(1 − e^{−rate})
/// from the state's parameters. Quadratic in N.
pub fn generate_from_state(state: &DecoderState, seed: u64) -> Result<Generated> {
    let n = state.num_nodes();
    let rates = state.theta[0].dot(&state.phi[0].t());
    let rows: Vec<Vec<(usize, usize, u32)>> = (0..n.div_ceil(NODE_CHUNK))
        .into_par_iter()
        .map(|chunk| -> Result<Vec<(usize, usize, u32)>> {
            let mut rng = RngStream::derive(seed, &[tags::GENERATE, 0, chunk as u64]);
            let mut out = Vec::new();
            for j in chunk * NODE_CHUNK..((chunk + 1) * NODE_CHUNK).min(n) {
                for v in 0..state.vocab_size {
                    let c = sample_poisson(rates[[j, v]], &mut rng)?;
                    if c > 0 {
                        out.push((j, v, c as u32));
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let features = SparseCountMatrix::new(n, state.vocab_size, rows.into_iter().flatten().collect())?;
    let edges: Vec<Vec<(usize, usize)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::derive(seed, &[tags::GENERATE, 1, i as u64]);
            let mut out = Vec::new();
            for j in (i + 1)..n {
                let p = edge_probability_nodes(&state.u, &state.theta, i, j);
                if rand::Rng::random::<f64>(&mut rng) < p {
                    out.push((i, j));
                }
            }
            out
        })
        .collect();
    let graph = AdjacencyGraph::from_edges(n, edges.into_iter().flatten())?;
    Ok(Generated { features, graph })
}

/// Rescales every u^(t) by one common factor so that the expected number of
/// edges Σ_{i<j} P(a_ij = 1) equals `target`. Quadratic in N.
pub fn scale_u_to_expected_edges(state: &mut DecoderState, target: f64) -> Result<f64> {
    let n = state.num_nodes();
    let max_pairs = (n * n.saturating_sub(1) / 2) as f64;
    if !(target > 0.0 && target < max_pairs) {
        return Err(invalid!(
            "expected edge count must lie in (0, {max_pairs}), got {target}"
        ));
    }
    let expected = |u: &[Array1<f64>]| -> f64 {
        (0..n)
            .into_par_iter()
            .map(|i| {
                ((i + 1)..n)
                    .map(|j| edge_probability_nodes(u, &state.theta, i, j))
                    .sum::<f64>()
            })
            .sum()
    };
    let base = state.u.clone();
    let scaled = |f: f64| base.iter().map(|b| b * f).collect::<Vec<_>>();
    let (mut lo, mut hi) = (-60.0f64, 60.0f64);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if expected(&scaled(mid.exp())) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let f = (0.5 * (lo + hi)).exp();
    state.u = scaled(f);
    Ok(expected(&state.u))
}

/// Draws a full state from the prior: Φ^(l) columns ~ Dir(η), u ~ Gam(α0, 1/β0),
/// θ top-down from Gam(prior shape, 1/c) with c fixed at `c_value`.
pub fn sample_prior_state(
    num_nodes: usize,
    vocab_size: usize,
    widths: &[usize],
    hyper: DecoderHyper,
    c_value: f64,
    seed: u64,
) -> Result<DecoderState> {
    hyper.validate(widths)?;
    let mut rng = RngStream::derive(seed, &[tags::GENERATE, 2]);
    let t = widths.len();
    let mut phi = Vec::with_capacity(t);
    for (l, &k) in widths.iter().enumerate() {
        let rows = if l == 0 { vocab_size } else { widths[l - 1] };
        let mut m = Array2::zeros((rows, k));
        let conc = vec![hyper.eta[l]; rows];
        let mut draw = vec![0.0; rows];
        for kk in 0..k {
            sample_dirichlet_into(&conc, &mut draw, &mut rng)?;
            m.column_mut(kk).assign(&ArrayView1::from(&draw[..]));
        }
        phi.push(m);
    }
    let mut u = Vec::with_capacity(t);
    for &k in widths {
        let mut ul = Array1::zeros(k);
        for x in ul.iter_mut() {
            *x = sample_gamma(hyper.alpha0, 1.0 / hyper.beta0, &mut rng)?;
        }
        u.push(ul);
    }
    let c: Vec<Array1<f64>> = widths.iter().map(|_| Array1::from_elem(num_nodes, c_value)).collect();
    let mut theta: Vec<Array2<f64>> = widths.iter().map(|&k| Array2::zeros((num_nodes, k))).collect();
    for l in (0..t).rev() {
        let shape = prior_shape(&phi, &theta, &hyper.gamma, l);
        let mut th = Array2::zeros((num_nodes, widths[l]));
        for ((j, k), x) in th.indexed_iter_mut() {
            *x = sample_gamma(shape[[j, k]].max(THETA_FLOOR), 1.0 / c[l][j], &mut rng)?.max(THETA_FLOOR);
        }
        theta[l] = th;
    }
    let p = p_recursion(&c);
    Ok(DecoderState {
        vocab_size,
        widths: widths.to_vec(),
        phi,
        u,
        theta,
        c,
        p,
        hyper,
        iteration: 0,
        seed,
    })
}

/// Subset of a state's rows, for the sampled-subgraph machinery.
pub fn select_theta_rows(theta: &[Array2<f64>], nodes: &[usize]) -> Vec<Array2<f64>> {
    theta.iter().map(|m| m.select(Axis(0), nodes)).collect()
}

/// Writes sampled rows back into the full stack.
pub fn scatter_theta_rows(theta: &mut [Array2<f64>], nodes: &[usize], rows: &[Array2<f64>]) {
    for (full, part) in theta.iter_mut().zip(rows) {
        for (r, &j) in nodes.iter().enumerate() {
            full.slice_mut(s![j, ..]).assign(&part.row(r));
        }
    }
}
