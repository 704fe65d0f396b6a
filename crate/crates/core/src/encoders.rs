//! Weibull graph inference networks and the variational objective.
//!
//! Both encoders map node features and the graph to per-layer Weibull
//! shape and scale matrices. Latent representations are drawn top-down with
//! the reparameterized Weibull transform, so every sample is a
//! differentiable function of the encoder weights and `log u`.

use std::sync::Arc;

use ndarray::{Array1, Array2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SparseOperand, Tape, Var};
use crate::error::{domain, invalid, Error, Result};
use crate::gpgbn::{NODE_CHUNK, THETA_FLOOR};
use crate::graph_data::{normalize_adjacency, AdjacencyGraph, SparseCountMatrix};
use crate::special::{gamma, ln_gamma, EULER_GAMMA};
use crate::stochastic::{tags, RngStream};

/// Uniform noise is kept inside this interval before the Weibull transform.
pub const NOISE_EPS: f64 = 1e-6;
/// Edge probabilities below this are clamped in the edge log-likelihood.
pub const EDGE_PROB_FLOOR: f64 = 1e-12;
/// Lower bound on the encoder's Weibull shape; smaller shapes overflow the
/// reparameterized draw.
pub const WEIBULL_SHAPE_FLOOR: f64 = 0.1;
const SCALE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    #[default]
    Wgcae,
    Wgaae,
}

/// How stochastic attention weights are normalized over a neighborhood.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionNorm {
    /// ŝ = softmax(s).
    #[default]
    Literal,
    /// ŝ = softmax(ln s).
    LogWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub heads: usize,
    pub k_att: f64,
    pub leaky_slope: f64,
    pub attention_norm: AttentionNorm,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Wgcae,
            heads: 4,
            k_att: 10.0,
            leaky_slope: 0.2,
            attention_norm: AttentionNorm::Literal,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(invalid!("attention head count must be at least 1"));
        }
        if !(self.k_att > 0.0 && self.k_att.is_finite()) {
            return Err(invalid!("attention Weibull shape must be positive, got {}", self.k_att));
        }
        if !self.leaky_slope.is_finite() {
            return Err(invalid!("LeakyReLU slope must be finite"));
        }
        Ok(())
    }
}

/// Trainable encoder parameters together with `log u`.
///
/// `w1[t][c]` is `K_{t−1} × K_t` (one entry per head for WGAAE, one for
/// WGCAE); `w2[t]`, `w3[t]` are `K_t × K_t`; `att_w[t][c]` is `K_t × K_t`
/// and `att_a[t]` is `K_t × 2` with the two halves of the attention vector
/// as columns; `log_u[t]` is `1 × K_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub vocab_size: usize,
    pub widths: Vec<usize>,
    pub w1: Vec<Vec<Array2<f64>>>,
    pub w2: Vec<Array2<f64>>,
    pub w3: Vec<Array2<f64>>,
    pub att_w: Vec<Vec<Array2<f64>>>,
    pub att_a: Vec<Array2<f64>>,
    pub log_u: Vec<Array2<f64>>,
}

fn glorot(rows: usize, cols: usize, rng: &mut RngStream) -> Array2<f64> {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| s * (2.0 * rng.open01() - 1.0))
}

impl EncoderWeights {
    pub fn init(config: EncoderConfig, vocab_size: usize, widths: &[usize], seed: u64) -> Result<Self> {
        config.validate()?;
        if widths.is_empty() || widths.contains(&0) || vocab_size == 0 {
            return Err(invalid!("encoder needs a nonzero vocabulary and layer widths"));
        }
        let heads = match config.kind {
            EncoderKind::Wgcae => 1,
            EncoderKind::Wgaae => config.heads,
        };
        let mut w1 = Vec::new();
        let mut w2 = Vec::new();
        let mut w3 = Vec::new();
        let mut att_w = Vec::new();
        let mut att_a = Vec::new();
        let mut log_u = Vec::new();
        for (t, &k) in widths.iter().enumerate() {
            let fan_in = if t == 0 { vocab_size } else { widths[t - 1] };
            let rng =
                |part: u64, head: usize| RngStream::derive(seed, &[tags::INIT, 100 + part, t as u64, head as u64]);
            w1.push((0..heads).map(|c| glorot(fan_in, k, &mut rng(1, c))).collect());
            w2.push(glorot(k, k, &mut rng(2, 0)));
            w3.push(glorot(k, k, &mut rng(3, 0)));
            if config.kind == EncoderKind::Wgaae {
                att_w.push((0..heads).map(|c| glorot(k, k, &mut rng(4, c))).collect());
                let a = glorot(2 * k, 1, &mut rng(5, 0));
                att_a.push(Array2::from_shape_fn((k, 2), |(i, half)| a[[half * k + i, 0]]));
            }
            log_u.push(Array2::zeros((1, k)));
        }
        Ok(Self {
            config,
            vocab_size,
            widths: widths.to_vec(),
            w1,
            w2,
            w3,
            att_w,
            att_a,
            log_u,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len()
    }

    pub fn heads(&self) -> usize {
        self.w1.first().map_or(0, Vec::len)
    }

    /// All trainable arrays in a fixed order shared with [`Self::params_mut`]
    /// and [`WeightVars::bind`].
    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut out = Vec::new();
        for t in 0..self.num_layers() {
            out.extend(self.w1[t].iter());
            out.push(&self.w2[t]);
            out.push(&self.w3[t]);
            if let Some(ws) = self.att_w.get(t) {
                out.extend(ws.iter());
                out.push(&self.att_a[t]);
            }
            out.push(&self.log_u[t]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        let mut att_w = self.att_w.iter_mut();
        let mut att_a = self.att_a.iter_mut();
        for ((((w1, w2), w3), log_u), _) in self
            .w1
            .iter_mut()
            .zip(self.w2.iter_mut())
            .zip(self.w3.iter_mut())
            .zip(self.log_u.iter_mut())
            .zip(0..self.widths.len())
        {
            out.extend(w1.iter_mut());
            out.push(w2);
            out.push(w3);
            if let (Some(ws), Some(a)) = (att_w.next(), att_a.next()) {
                out.extend(ws.iter_mut());
                out.push(a);
            }
            out.push(log_u);
        }
        out
    }

    pub fn u(&self) -> Vec<Array1<f64>> {
        self.log_u.iter().map(|l| l.row(0).mapv(f64::exp)).collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        self.config.validate()?;
        if self.params().iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical("non-finite encoder weight".into()));
        }
        Ok(())
    }
}

/// Tape handles for every trainable array of [`EncoderWeights`].
#[derive(Clone, Debug)]
pub struct WeightVars {
    pub w1: Vec<Vec<Var>>,
    pub w2: Vec<Var>,
    pub w3: Vec<Var>,
    pub att_w: Vec<Vec<Var>>,
    pub att_a: Vec<Var>,
    pub log_u: Vec<Var>,
}

impl WeightVars {
    /// Adds every parameter to the tape as a leaf.
    pub fn leaves(tape: &mut Tape, w: &EncoderWeights) -> Self {
        let vars: Vec<Var> = w.params().into_iter().map(|p| tape.leaf(p.clone())).collect();
        Self::bind(w, &vars).expect("parameter count matches its own layout")
    }

    /// Variables in [`EncoderWeights::params`] order.
    pub fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for t in 0..self.w1.len() {
            out.extend(self.w1[t].iter().copied());
            out.push(self.w2[t]);
            out.push(self.w3[t]);
            if let Some(ws) = self.att_w.get(t) {
                out.extend(ws.iter().copied());
                out.push(self.att_a[t]);
            }
            out.push(self.log_u[t]);
        }
        out
    }

    /// Reassembles variables listed in [`EncoderWeights::params`] order.
    pub fn bind(w: &EncoderWeights, vars: &[Var]) -> Result<Self> {
        let expected = w.params().len();
        if vars.len() != expected {
            return Err(Error::Dimension(format!(
                "{} variables for {expected} parameters",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut out = Self {
            w1: Vec::new(),
            w2: Vec::new(),
            w3: Vec::new(),
            att_w: Vec::new(),
            att_a: Vec::new(),
            log_u: Vec::new(),
        };
        let heads = w.heads();
        for t in 0..w.num_layers() {
            out.w1.push(it.by_ref().take(heads).collect());
            out.w2.push(it.next().unwrap());
            out.w3.push(it.next().unwrap());
            if w.att_w.get(t).is_some() {
                out.att_w.push(it.by_ref().take(heads).collect());
                out.att_a.push(it.next().unwrap());
            }
            out.log_u.push(it.next().unwrap());
        }
        Ok(out)
    }
}

/// Constant graph operands shared by the encoders and the objective.
#[derive(Clone, Debug)]
pub struct GraphInput {
    pub num_nodes: usize,
    pub vocab_size: usize,
    /// Node features as an `N × V` sparse operand.
    pub features: Arc<SparseOperand>,
    /// Ã with self-loops; its pattern doubles as the attention neighborhoods.
    pub adjacency: Arc<SparseOperand>,
    /// `(node, term)` of every nonzero count.
    pub count_pairs: Arc<Vec<(usize, usize)>>,
    pub count_values: Vec<f64>,
    /// Observed edges `(i, j)` with `i < j`.
    pub edges: Arc<Vec<(usize, usize)>>,
}

impl GraphInput {
    pub fn new(x: &SparseCountMatrix, a: &AdjacencyGraph) -> Result<Self> {
        if x.num_nodes() != a.num_nodes() {
            return Err(Error::Dimension(format!(
                "{} feature rows for a graph of {} nodes",
                x.num_nodes(),
                a.num_nodes()
            )));
        }
        let csr = x.to_csr();
        let pairs: Vec<(usize, usize)> = csr
            .row_of_entries()
            .into_iter()
            .zip(csr.indices().iter().copied())
            .collect();
        let count_values = csr.values().to_vec();
        let norm = normalize_adjacency(a, true)?;
        Ok(Self {
            num_nodes: x.num_nodes(),
            vocab_size: x.vocab_size(),
            features: SparseOperand::new(csr),
            adjacency: SparseOperand::new(norm.matrix),
            count_pairs: Arc::new(pairs),
            count_values,
            edges: Arc::new(a.edges().to_vec()),
        })
    }
}

/// Uniform draws consumed by one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderNoise {
    /// `N × K_t` per layer, inside `[NOISE_EPS, 1 − NOISE_EPS]`.
    pub theta: Vec<Array2<f64>>,
    /// `[layer][head]`, one draw per stored entry of the attention pattern.
    pub attention: Vec<Vec<Vec<f64>>>,
}

fn clamp_noise(e: f64) -> f64 {
    e.clamp(NOISE_EPS, 1.0 - NOISE_EPS)
}

impl EncoderNoise {
    pub fn draw(w: &EncoderWeights, input: &GraphInput, seed: u64, iteration: u64) -> Self {
        let n = input.num_nodes;
        let theta = w
            .widths
            .iter()
            .enumerate()
            .map(|(t, &k)| {
                let mut m = Array2::zeros((n, k));
                m.axis_chunks_iter_mut(Axis(0), NODE_CHUNK)
                    .into_par_iter()
                    .enumerate()
                    .for_each(|(chunk, mut block)| {
                        let mut rng =
                            RngStream::derive(seed, &[tags::ENCODER_NOISE, iteration, t as u64, chunk as u64]);
                        block.mapv_inplace(|_| clamp_noise(rng.open01()));
                    });
                m
            })
            .collect();
        let nnz = input.adjacency.matrix.nnz();
        let attention = (0..w.att_w.len())
            .map(|t| {
                (0..w.heads())
                    .map(|c| {
                        let mut rng = RngStream::derive(seed, &[tags::ATTENTION_NOISE, iteration, t as u64, c as u64]);
                        (0..nnz).map(|_| clamp_noise(rng.open01())).collect()
                    })
                    .collect()
            })
            .collect();
        Self { theta, attention }
    }

    /// Noise that reproduces each distribution's characteristic value:
    /// θ = λ and attention weights equal to exp(m).
    pub fn neutral(w: &EncoderWeights, input: &GraphInput) -> Self {
        let n = input.num_nodes;
        let e_theta = 1.0 - (-1.0f64).exp();
        let k = w.config.k_att;
        let e_att = 1.0 - (-gamma(1.0 + 1.0 / k).powf(k)).exp();
        Self {
            theta: w.widths.iter().map(|&k| Array2::from_elem((n, k), e_theta)).collect(),
            attention: (0..w.att_w.len())
                .map(|_| vec![vec![e_att; input.adjacency.matrix.nnz()]; w.heads()])
                .collect(),
        }
    }
}

/// Attention quantities of one head in one layer, per pattern entry.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub normalized: Vec<f64>,
    pub noise: Vec<f64>,
}

/// `heads[t][c]` for layer `t` and head `c`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionState {
    pub pairs: Vec<(usize, usize)>,
    pub heads: Vec<Vec<AttentionHead>>,
}

impl AttentionState {
    /// Largest deviation of a neighborhood's normalized weights from summing to 1.
    pub fn max_row_sum_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for head in self.heads.iter().flatten() {
            let mut sums = std::collections::BTreeMap::new();
            for (&(i, _), &s) in self.pairs.iter().zip(&head.normalized) {
                *sums.entry(i).or_insert(0.0) += s;
            }
            worst = sums.values().fold(worst, |w, s: &f64| w.max((s - 1.0).abs()));
        }
        worst
    }
}

#[derive(Clone, Debug)]
struct AttentionVars {
    scores: Var,
    weights: Var,
    normalized: Var,
}

/// Forward-pass handles for the Weibull posterior.
#[derive(Clone, Debug)]
pub struct PosteriorVars {
    pub shape: Vec<Var>,
    pub scale: Vec<Var>,
    pub hidden: Vec<Var>,
    attention: Vec<Vec<AttentionVars>>,
}

/// Values of the Weibull posterior parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeibullPosterior {
    pub shape: Vec<Array2<f64>>,
    pub scale: Vec<Array2<f64>>,
    pub hidden: Vec<Array2<f64>>,
}

impl PosteriorVars {
    /// Leaves holding fixed posterior parameters.
    pub fn from_values(tape: &mut Tape, post: &WeibullPosterior) -> Self {
        let mut put = |vs: &[Array2<f64>]| vs.iter().map(|v| tape.leaf(v.clone())).collect();
        Self {
            shape: put(&post.shape),
            scale: put(&post.scale),
            hidden: put(&post.hidden),
            attention: Vec::new(),
        }
    }

    pub fn values(&self, tape: &Tape) -> WeibullPosterior {
        let get = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect();
        WeibullPosterior {
            shape: get(&self.shape),
            scale: get(&self.scale),
            hidden: get(&self.hidden),
        }
    }

    pub fn attention_state(&self, tape: &Tape, input: &GraphInput, noise: &EncoderNoise) -> AttentionState {
        let col = |v: Var| tape.value(v).column(0).to_vec();
        AttentionState {
            pairs: if self.attention.is_empty() {
                Vec::new()
            } else {
                input.adjacency.pairs.clone()
            },
            heads: self
                .attention
                .iter()
                .zip(&noise.attention)
                .map(|(layer, eps)| {
                    layer
                        .iter()
                        .zip(eps)
                        .map(|(h, e)| AttentionHead {
                            scores: col(h.scores),
                            weights: col(h.weights),
                            normalized: col(h.normalized),
                            noise: e.clone(),
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

fn layer_input(tape: &mut Tape, input: &GraphInput, prev: Option<Var>, w: Var) -> Result<Var> {
    match prev {
        None => tape.spmm(&input.features, w),
        Some(h) => tape.matmul(h, w),
    }
}

fn check_input(w: &EncoderWeights, input: &GraphInput) -> Result<()> {
    if input.vocab_size != w.vocab_size {
        return Err(Error::Dimension(format!(
            "encoder expects {} terms, features have {}",
            w.vocab_size, input.vocab_size
        )));
    }
    Ok(())
}

/// H = softplus(Ã H W1), K = softplus(Ã H W2), Λ = softplus(Ã H W3).
pub fn wgcae_forward(
    tape: &mut Tape,
    input: &GraphInput,
    w: &EncoderWeights,
    vars: &WeightVars,
) -> Result<PosteriorVars> {
    check_input(w, input)?;
    let mut out = PosteriorVars {
        shape: Vec::new(),
        scale: Vec::new(),
        hidden: Vec::new(),
        attention: Vec::new(),
    };
    let mut prev = None;
    for t in 0..w.num_layers() {
        let z = layer_input(tape, input, prev, vars.w1[t][0])?;
        let az = tape.spmm(&input.adjacency, z)?;
        let h = tape.softplus(az);
        let hw2 = tape.matmul(h, vars.w2[t])?;
        let ahw2 = tape.spmm(&input.adjacency, hw2)?;
        let k = tape.softplus(ahw2);
        let hw3 = tape.matmul(h, vars.w3[t])?;
        let ahw3 = tape.spmm(&input.adjacency, hw3)?;
        let lam = tape.softplus(ahw3);
        out.shape.push(tape.clamp_min(k, WEIBULL_SHAPE_FLOOR));
        out.scale.push(tape.clamp_min(lam, SCALE_FLOOR));
        out.hidden.push(h);
        prev = Some(h);
    }
    Ok(out)
}

/// Weibull weight factor (−ln(1−ε))^{1/k} / Γ(1+1/k), which has mean 1.
pub fn attention_noise_factor(noise: f64, k_att: f64) -> f64 {
    (-(-noise).ln_1p()).powf(1.0 / k_att) / gamma(1.0 + 1.0 / k_att)
}

/// Stochastic weights s = exp(m)·factor(ε) and their neighborhood
/// normalization, from per-entry scores m.
pub fn attention_from_scores(
    tape: &mut Tape,
    pattern: &Arc<SparseOperand>,
    scores: Var,
    noise: &[f64],
    cfg: &EncoderConfig,
) -> Result<(Var, Var)> {
    let factor: Vec<f64> = noise.iter().map(|&e| attention_noise_factor(e, cfg.k_att)).collect();
    let factor = Array2::from_shape_vec((factor.len(), 1), factor).expect("column shape");
    let (weights, logits) = match cfg.attention_norm {
        AttentionNorm::Literal => {
            let f = tape.leaf(factor);
            let em = tape.exp(scores);
            let s = tape.mul(em, f)?;
            (s, s)
        }
        AttentionNorm::LogWeights => {
            let lf = tape.leaf(factor.mapv(f64::ln));
            let logits = tape.add(scores, lf)?;
            (tape.exp(logits), logits)
        }
    };
    let normalized = tape.neighborhood_softmax(pattern, logits)?;
    Ok((weights, normalized))
}

/// One attention head: returns the aggregated messages Ŝ P and the
/// per-entry scores, weights and normalized weights.
#[allow(clippy::too_many_arguments)]
fn attention_head(
    tape: &mut Tape,
    input: &GraphInput,
    cfg: &EncoderConfig,
    projected: Var,
    att_w: Var,
    att_a: Var,
    noise: &[f64],
) -> Result<(Var, AttentionVars)> {
    let pattern = &input.adjacency;
    if noise.len() != pattern.matrix.nnz() {
        return Err(Error::Dimension(format!(
            "{} attention draws for {} neighborhood entries",
            noise.len(),
            pattern.matrix.nnz()
        )));
    }
    let q = tape.matmul(projected, att_w)?;
    let halves = tape.matmul(q, att_a)?;
    let e1 = tape.leaf(ndarray::array![[1.0], [0.0]]);
    let e2 = tape.leaf(ndarray::array![[0.0], [1.0]]);
    let s1 = tape.matmul(halves, e1)?;
    let s2 = tape.matmul(halves, e2)?;
    let raw = tape.gather_edge_sum(pattern, s1, s2)?;
    let scores = tape.leaky_relu(raw, cfg.leaky_slope);
    let (weights, normalized) = attention_from_scores(tape, pattern, scores, noise, cfg)?;
    let msg = tape.spmm_values(pattern, normalized, projected)?;
    Ok((
        msg,
        AttentionVars {
            scores,
            weights,
            normalized,
        },
    ))
}

/// Stochastic attention for one head in one layer, evaluated on its own tape.
pub fn wgaae_attention(
    input: &GraphInput,
    cfg: &EncoderConfig,
    hidden: &Array2<f64>,
    att_w: &Array2<f64>,
    att_a: &Array2<f64>,
    noise: &[f64],
) -> Result<AttentionHead> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let h = tape.leaf(hidden.clone());
    let w = tape.leaf(att_w.clone());
    let a = tape.leaf(att_a.clone());
    let (_, vars) = attention_head(&mut tape, input, cfg, h, w, a, noise)?;
    let col = |v: Var| tape.value(v).column(0).to_vec();
    Ok(AttentionHead {
        scores: col(vars.scores),
        weights: col(vars.weights),
        normalized: col(vars.normalized),
        noise: noise.to_vec(),
    })
}

/// H = (1/C) Σ_c Ŝ^(c) H W1^(c), K = softplus(H W2), Λ = softplus(H W3).
pub fn wgaae_forward(
    tape: &mut Tape,
    input: &GraphInput,
    w: &EncoderWeights,
    vars: &WeightVars,
    noise: &EncoderNoise,
) -> Result<PosteriorVars> {
    check_input(w, input)?;
    if noise.attention.len() != w.num_layers() {
        return Err(Error::Dimension("attention noise does not cover every layer".into()));
    }
    let mut out = PosteriorVars {
        shape: Vec::new(),
        scale: Vec::new(),
        hidden: Vec::new(),
        attention: Vec::new(),
    };
    let mut prev = None;
    for t in 0..w.num_layers() {
        let mut total: Option<Var> = None;
        let mut layer_att = Vec::new();
        for c in 0..w.heads() {
            let projected = layer_input(tape, input, prev, vars.w1[t][c])?;
            let (msg, att) = attention_head(
                tape,
                input,
                &w.config,
                projected,
                vars.att_w[t][c],
                vars.att_a[t],
                &noise.attention[t][c],
            )?;
            total = Some(match total {
                None => msg,
                Some(acc) => tape.add(acc, msg)?,
            });
            layer_att.push(att);
        }
        let h = tape.mul_scalar(total.expect("at least one head"), 1.0 / w.heads() as f64);
        let hw2 = tape.matmul(h, vars.w2[t])?;
        let k = tape.softplus(hw2);
        let hw3 = tape.matmul(h, vars.w3[t])?;
        let lam = tape.softplus(hw3);
        out.shape.push(tape.clamp_min(k, WEIBULL_SHAPE_FLOOR));
        out.scale.push(tape.clamp_min(lam, SCALE_FLOOR));
        out.hidden.push(h);
        out.attention.push(layer_att);
        prev = Some(h);
    }
    Ok(out)
}

pub fn encoder_forward(
    tape: &mut Tape,
    input: &GraphInput,
    w: &EncoderWeights,
    vars: &WeightVars,
    noise: &EncoderNoise,
) -> Result<PosteriorVars> {
    match w.config.kind {
        EncoderKind::Wgcae => wgcae_forward(tape, input, w, vars),
        EncoderKind::Wgaae => wgaae_forward(tape, input, w, vars, noise),
    }
}

/// Sampled latent representations with the effective shapes and the prior
/// shapes they were drawn against.
#[derive(Clone, Debug)]
pub struct ThetaVars {
    pub theta: Vec<Var>,
    pub shape: Vec<Var>,
    pub prior_shape: Vec<Var>,
}

fn check_stack(phi: &[Array2<f64>], gamma: &[f64], widths: &[usize]) -> Result<()> {
    if phi.len() != widths.len() || gamma.len() != *widths.last().unwrap_or(&0) {
        return Err(Error::Dimension(
            "decoder stack does not match the encoder widths".into(),
        ));
    }
    for t in 1..widths.len() {
        if phi[t].dim() != (widths[t - 1], widths[t]) {
            return Err(Error::Dimension(format!("Φ at layer {t} has shape {:?}", phi[t].dim())));
        }
    }
    Ok(())
}

/// Top-down reparameterized draws
/// θ^(t) = λ^(t) (−ln(1−ε))^{1/(k^(t) + θ^(t+1) Φ^(t+1)ᵀ)}, with γ in place
/// of the upper-layer term at the top.
pub fn sample_theta_stack(
    tape: &mut Tape,
    post: &PosteriorVars,
    phi: &[Array2<f64>],
    gamma: &[f64],
    noise: &[Array2<f64>],
) -> Result<ThetaVars> {
    let layers = post.shape.len();
    let widths: Vec<usize> = post.shape.iter().map(|&v| tape.value(v).ncols()).collect();
    check_stack(phi, gamma, &widths)?;
    if noise.len() != layers {
        return Err(Error::Dimension("θ noise does not cover every layer".into()));
    }
    let n = tape.value(post.shape[0]).nrows();
    let mut theta = vec![None; layers];
    let mut shape = vec![None; layers];
    let mut prior = vec![None; layers];
    for t in (0..layers).rev() {
        let k = post.shape[t];
        if tape
            .value(k)
            .iter()
            .chain(tape.value(post.scale[t]).iter())
            .any(|&v| !(v > 0.0))
        {
            return Err(domain!("Weibull shape and scale must be positive at layer {t}"));
        }
        if noise[t].dim() != tape.value(k).dim() {
            return Err(Error::Dimension(format!(
                "θ noise at layer {t} has shape {:?}",
                noise[t].dim()
            )));
        }
        let alpha = if t + 1 == layers {
            let g = Array2::from_shape_fn((n, widths[t]), |(_, k)| gamma[k]);
            tape.leaf(g)
        } else {
            let phi_t = tape.leaf(phi[t + 1].t().to_owned());
            tape.matmul(theta[t + 1].unwrap(), phi_t)?
        };
        let k_eff = tape.add(k, alpha)?;
        let log_noise = tape.leaf(noise[t].mapv(|e: f64| (-(-e).ln_1p()).ln()));
        let inv = tape.recip(k_eff);
        let expo = tape.mul(log_noise, inv)?;
        let pow = tape.exp(expo);
        let th = tape.mul(post.scale[t], pow)?;
        theta[t] = Some(tape.clamp_min(th, THETA_FLOOR));
        shape[t] = Some(k_eff);
        prior[t] = Some(alpha);
    }
    Ok(ThetaVars {
        theta: theta.into_iter().map(Option::unwrap).collect(),
        shape: shape.into_iter().map(Option::unwrap).collect(),
        prior_shape: prior.into_iter().map(Option::unwrap).collect(),
    })
}

/// Posterior means taken top-down, each layer's shape using the mean of the
/// layer above.
pub fn posterior_mean(post: &WeibullPosterior, phi: &[Array2<f64>], gamma: &[f64]) -> Result<Vec<Array2<f64>>> {
    let widths: Vec<usize> = post.shape.iter().map(|k| k.ncols()).collect();
    check_stack(phi, gamma, &widths)?;
    let layers = widths.len();
    let mut out: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); layers];
    for t in (0..layers).rev() {
        let mut k = post.shape[t].clone();
        if t + 1 == layers {
            for mut row in k.rows_mut() {
                row.iter_mut().zip(gamma).for_each(|(v, g)| *v += g);
            }
        } else {
            k = k + out[t + 1].dot(&phi[t + 1].t());
        }
        let mut m = post.scale[t].clone();
        Zip::from(&mut m)
            .and(&k)
            .for_each(|m, &k| *m *= crate::special::gamma(1.0 + 1.0 / k));
        out[t] = m;
    }
    Ok(out)
}

/// KL(Weibull(k, λ) ‖ Gamma(α, rate β)).
pub fn kl_weibull_gamma(k: f64, lambda: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(k > 0.0 && lambda > 0.0 && alpha > 0.0 && beta > 0.0) {
        return Err(domain!(
            "KL needs positive parameters, got k={k}, λ={lambda}, α={alpha}, β={beta}"
        ));
    }
    Ok(
        EULER_GAMMA * (alpha / k - 1.0) + k.ln() - alpha * lambda.ln() + (beta * lambda * gamma(1.0 + 1.0 / k) - 1.0)
            - alpha * beta.ln()
            + ln_gamma(alpha),
    )
}

/// Elementwise KL on the tape; `beta` is a per-node rate (`N × 1`).
pub fn kl_weibull_gamma_tape(tape: &mut Tape, k: Var, lambda: Var, alpha: Var, beta: &Array1<f64>) -> Result<Var> {
    let n = tape.value(k).nrows();
    if beta.len() != n || beta.iter().any(|&b| !(b > 0.0)) {
        return Err(domain!("KL rate must be positive for each of {n} nodes"));
    }
    let b = tape.leaf(beta.clone().insert_axis(Axis(1)));
    let ln_b = tape.leaf(beta.mapv(f64::ln).insert_axis(Axis(1)));
    let a_over_k = tape.div(alpha, k)?;
    let t1 = tape.mul_scalar(a_over_k, EULER_GAMMA);
    let ln_l = tape.ln(lambda);
    let t2 = tape.mul(alpha, ln_l)?;
    let t3 = tape.ln(k);
    let inv_k = tape.recip(k);
    let one_plus = tape.add_scalar(inv_k, 1.0);
    let lg = tape.lgamma(one_plus);
    let g = tape.exp(lg);
    let lg_l = tape.mul(lambda, g)?;
    let t4 = tape.mul_col_broadcast(lg_l, b)?;
    let t6 = tape.mul_col_broadcast(alpha, ln_b)?;
    let t7 = tape.lgamma(alpha);
    let s = tape.sub(t1, t2)?;
    let s = tape.add(s, t3)?;
    let s = tape.add(s, t4)?;
    let s = tape.sub(s, t6)?;
    let s = tape.add(s, t7)?;
    Ok(tape.add_scalar(s, -EULER_GAMMA - 1.0))
}

/// The objective and its parts.
#[derive(Clone, Debug)]
pub struct ElboTerms {
    pub node: Var,
    /// Unscaled edge log-likelihood; absent when β = 0.
    pub edge: Option<Var>,
    pub kl: Var,
    pub total: Var,
    /// Observed edges whose probability fell below [`EDGE_PROB_FLOOR`].
    pub clamped_edges: usize,
}

/// Scalar values of [`ElboTerms`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboValues {
    pub node: f64,
    pub edge: f64,
    pub kl: f64,
    pub total: f64,
    pub clamped_edges: usize,
}

impl ElboTerms {
    pub fn values(&self, tape: &Tape) -> ElboValues {
        ElboValues {
            node: tape.scalar(self.node),
            edge: self.edge.map_or(0.0, |e| tape.scalar(e)),
            kl: tape.scalar(self.kl),
            total: tape.scalar(self.total),
            clamped_edges: self.clamped_edges,
        }
    }
}

/// Decoder-side constants entering the objective.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveContext<'a> {
    pub phi: &'a [Array2<f64>],
    pub gamma: &'a [f64],
    /// Gamma rate of each layer's prior, one entry per node.
    pub rates: &'a [Array1<f64>],
    pub beta: f64,
    /// Per-node weights for subsampled estimates; pairs get the product.
    pub node_weights: Option<&'a Array1<f64>>,
    /// Extra factor on every pair weight.
    pub pair_scale: f64,
}

/// Node Poisson log-likelihood (without ln x!) + β · edge Bernoulli
/// log-likelihood over all pairs − KL.
pub fn elbo(
    tape: &mut Tape,
    input: &GraphInput,
    theta: &ThetaVars,
    post: &PosteriorVars,
    log_u: &[Var],
    ctx: &ObjectiveContext,
) -> Result<ElboTerms> {
    if !(ctx.beta >= 0.0) {
        return Err(invalid!("β must be nonnegative, got {}", ctx.beta));
    }
    if !(ctx.pair_scale >= 0.0 && ctx.pair_scale.is_finite()) {
        return Err(invalid!(
            "pair scale must be finite and nonnegative, got {}",
            ctx.pair_scale
        ));
    }
    let n = input.num_nodes;
    let layers = theta.theta.len();
    if ctx.rates.len() != layers || log_u.len() != layers {
        return Err(Error::Dimension("rates or u do not cover every layer".into()));
    }
    if ctx.phi[0].dim().0 != input.vocab_size {
        return Err(Error::Dimension("Φ at the bottom does not match the vocabulary".into()));
    }
    let weights: Option<Array1<f64>> = ctx.node_weights.cloned();
    if let Some(w) = &weights {
        if w.len() != n || w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(invalid!("node weights must be {n} finite nonnegative values"));
        }
    }
    let w_col = weights.as_ref().map(|w| tape.leaf(w.clone().insert_axis(Axis(1))));
    let weighted = |tape: &mut Tape, m: Var| -> Result<Var> {
        match w_col {
            Some(w) => tape.mul_col_broadcast(m, w),
            None => Ok(m),
        }
    };

    // Σ x ln(θΦᵀ) over nonzeros − Σ θΦᵀ
    let theta1 = theta.theta[0];
    let phi1 = tape.leaf(ctx.phi[0].clone());
    let rate_nz = tape.sdd_dot(&input.count_pairs, theta1, phi1)?;
    let ln_rate = tape.ln(rate_nz);
    let coef: Vec<f64> = input
        .count_pairs
        .iter()
        .zip(&input.count_values)
        .map(|(&(j, _), &x)| x * weights.as_ref().map_or(1.0, |w| w[j]))
        .collect();
    let coef = tape.leaf(Array2::from_shape_vec((coef.len(), 1), coef).expect("column shape"));
    let ll_nz = tape.mul(coef, ln_rate)?;
    let ll_nz = tape.sum(ll_nz);
    let col_mass = tape.leaf(ctx.phi[0].sum_axis(Axis(0)).insert_axis(Axis(0)));
    let mass = tape.mul_row_broadcast(theta1, col_mass)?;
    let mass = weighted(tape, mass)?;
    let mass = tape.sum(mass);
    let node = tape.sub(ll_nz, mass)?;

    let mut kl_total: Option<Var> = None;
    for t in 0..layers {
        let kl = kl_weibull_gamma_tape(tape, theta.shape[t], post.scale[t], theta.prior_shape[t], &ctx.rates[t])?;
        let kl = weighted(tape, kl)?;
        let kl = tape.sum(kl);
        kl_total = Some(match kl_total {
            None => kl,
            Some(acc) => tape.add(acc, kl)?,
        });
    }
    let kl = kl_total.expect("at least one layer");
    let body = tape.sub(node, kl)?;

    if ctx.beta == 0.0 {
        return Ok(ElboTerms {
            node,
            edge: None,
            kl,
            total: body,
            clamped_edges: 0,
        });
    }

    let mut rate: Option<Var> = None;
    let mut all_pairs: Option<Var> = None;
    for t in 0..layers {
        let u = tape.exp(log_u[t]);
        let th = theta.theta[t];
        let th_u = tape.mul_row_broadcast(th, u)?;
        let r = tape.sdd_dot(&input.edges, th_u, th)?;
        rate = Some(match rate {
            None => r,
            Some(acc) => tape.add(acc, r)?,
        });
        // Σ_{i<j} w_i w_j θ_ik θ_jk = ((Σ w θ)² − Σ w² θ²) / 2
        let wt = weighted(tape, th)?;
        let col = tape.sum_rows(wt);
        let sq_col = tape.square(col);
        let wt_sq = tape.square(wt);
        let col_sq = tape.sum_rows(wt_sq);
        let diff = tape.sub(sq_col, col_sq)?;
        let half = tape.mul_scalar(diff, 0.5);
        let ur = tape.mul(half, u)?;
        let s = tape.sum(ur);
        all_pairs = Some(match all_pairs {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let rate = rate.expect("at least one layer");
    let all_pairs = all_pairs.expect("at least one layer");
    let rate_floor = -(-EDGE_PROB_FLOOR).ln_1p();
    let clamped_edges = tape.value(rate).iter().filter(|&&r| r < rate_floor).count();
    let safe = tape.clamp_min(rate, rate_floor);
    let log_p = tape.log1mexp(safe);
    // observed pairs contribute ln p instead of −r
    let per_edge = tape.add(log_p, rate)?;
    let per_edge = match &weights {
        Some(w) => {
            let pw: Vec<f64> = input.edges.iter().map(|&(i, j)| w[i] * w[j]).collect();
            let pw = tape.leaf(Array2::from_shape_vec((pw.len(), 1), pw).expect("column shape"));
            tape.mul(per_edge, pw)?
        }
        None => per_edge,
    };
    let edge_sum = tape.sum(per_edge);
    let edge = tape.sub(edge_sum, all_pairs)?;
    let edge = tape.mul_scalar(edge, ctx.pair_scale);
    let scaled = tape.mul_scalar(edge, ctx.beta);
    let total = tape.add(body, scaled)?;
    Ok(ElboTerms {
        node,
        edge: Some(edge),
        kl,
        total,
        clamped_edges,
    })
}

/// Σ_{labeled j} ln softmax(θ_j W)[y_j] + L.
pub fn supervised_loss(
    tape: &mut Tape,
    elbo_total: Var,
    theta1: Var,
    labels: &[Option<usize>],
    classifier: Var,
) -> Result<Var> {
    let (n, k) = tape.value(theta1).dim();
    let (wk, classes) = tape.value(classifier).dim();
    if labels.len() != n || wk != k {
        return Err(Error::Dimension(format!(
            "{} labels and a {wk}×{classes} classifier for θ of shape {n}×{k}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().flatten().find(|&&y| y >= classes) {
        return Err(invalid!("label {bad} outside {classes} classes"));
    }
    let idx: Vec<(usize, usize)> = labels
        .iter()
        .enumerate()
        .filter_map(|(j, y)| y.map(|y| (j, y)))
        .collect();
    if idx.is_empty() {
        return Ok(elbo_total);
    }
    let logits = tape.matmul(theta1, classifier)?;
    let logp = tape.log_softmax_rows(logits);
    let picked = tape.gather_entries(logp, &Arc::new(idx))?;
    let ll = tape.sum(picked);
    tape.add(ll, elbo_total)
}

/// Everything produced by one stochastic evaluation of the objective.
#[derive(Clone, Debug)]
pub struct Objective {
    pub vars: WeightVars,
    pub posterior: PosteriorVars,
    pub theta: ThetaVars,
    pub terms: ElboTerms,
}

/// Encoder pass, reparameterized sampling and the ELBO on one tape.
pub fn build_objective(
    tape: &mut Tape,
    input: &GraphInput,
    w: &EncoderWeights,
    vars: WeightVars,
    noise: &EncoderNoise,
    ctx: &ObjectiveContext,
) -> Result<Objective> {
    let posterior = encoder_forward(tape, input, w, &vars, noise)?;
    let theta = sample_theta_stack(tape, &posterior, ctx.phi, ctx.gamma, &noise.theta)?;
    let terms = elbo(tape, input, &theta, &posterior, &vars.log_u, ctx)?;
    Ok(Objective {
        vars,
        posterior,
        theta,
        terms,
    })
}

/// Deterministic encoder pass: attention weights take their mean exp(m).
pub fn infer_posterior(w: &EncoderWeights, input: &GraphInput) -> Result<WeibullPosterior> {
    let mut tape = Tape::new();
    let vars = WeightVars::leaves(&mut tape, w);
    let noise = EncoderNoise::neutral(w, input);
    Ok(encoder_forward(&mut tape, input, w, &vars, &noise)?.values(&tape))
}
