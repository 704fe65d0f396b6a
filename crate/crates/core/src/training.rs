//! Hybrid training: gradient steps on the encoder and `log u`, sampling
//! steps on the topic matrices.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::encoders::{
    build_objective, supervised_loss, EncoderConfig, EncoderNoise, EncoderWeights, GraphInput, ObjectiveContext,
    WeightVars,
};
use crate::error::{domain, invalid, Error, Result};
use crate::gpgbn::{
    augment_all, edge_probability_nodes, gibbs_sweep, normalize_columns, update_phi_gibbs, update_scales, DecoderHyper,
    DecoderState, EdgeLink, SweepKey,
};
use crate::graph_data::{AdjacencyGraph, SparseCountMatrix};
use crate::stochastic::{tags, AliasTable, RngStream};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainerKind {
    #[default]
    FullBatch,
    Scalable,
    /// Decoder-only Gibbs sampling, no encoder.
    Gibbs,
}

/// Weighting of the subgraph objective in the scalable trainer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeWeighting {
    /// Raw subgraph likelihood.
    None,
    /// Node terms weighted by 1/(N_s p_i), pairs by 1/(N_s (N_s − 1) p_i p_j).
    #[default]
    EndpointProduct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TlasgrConfig {
    pub eps0: f64,
    pub tau0: f64,
    pub kappa: f64,
    /// Smallest entry a projected Φ column may hold.
    pub floor: f64,
}

impl Default for TlasgrConfig {
    fn default() -> Self {
        Self {
            eps0: 1.0,
            tau0: 20.0,
            kappa: 0.7,
            floor: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub widths: Vec<usize>,
    pub beta: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub trainer: TrainerKind,
    pub subset_size: usize,
    pub k_mix: f64,
    pub alpha_imp: f64,
    pub edge_weighting: EdgeWeighting,
    pub seed: u64,
    pub encoder: EncoderConfig,
    /// Gamma rate of the prior inside the KL term.
    pub kl_rate: f64,
    /// Use the decoder's sampled scales instead of `kl_rate`.
    pub kl_rate_from_decoder: bool,
    pub eta: f64,
    pub gamma: f64,
    pub e0: f64,
    pub f0: f64,
    pub edge_link: EdgeLink,
    pub tlasgr: TlasgrConfig,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    /// Train a classifier head on labeled nodes.
    pub supervised: bool,
    /// Cosine threshold for building edges from features.
    pub tau_a: f64,
    pub tau_phi: f64,
    pub tau_u: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            widths: vec![16],
            beta: 1.0,
            learning_rate: 1e-3,
            iterations: 500,
            trainer: TrainerKind::FullBatch,
            subset_size: 100,
            k_mix: 0.5,
            alpha_imp: 1.0,
            edge_weighting: EdgeWeighting::EndpointProduct,
            seed: 0,
            encoder: EncoderConfig::default(),
            kl_rate: 1.0,
            kl_rate_from_decoder: false,
            eta: 0.01,
            gamma: 1.0,
            e0: 1.0,
            f0: 1.0,
            edge_link: EdgeLink::Binary,
            tlasgr: TlasgrConfig::default(),
            checkpoint_every: 0,
            supervised: false,
            tau_a: 0.5,
            tau_phi: 2.0,
            tau_u: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(invalid!(
                "layer widths must be nonempty and positive, got {:?}",
                self.widths
            ));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(invalid!("β must be finite and nonnegative, got {}", self.beta));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid!("learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.k_mix) {
            return Err(invalid!("k_mix must lie in [0, 1], got {}", self.k_mix));
        }
        if !(self.alpha_imp >= 0.0) {
            return Err(invalid!("importance exponent must be nonnegative"));
        }
        if self.trainer == TrainerKind::Scalable && self.subset_size < 2 {
            return Err(invalid!("subset size must be at least 2"));
        }
        if !(self.kl_rate > 0.0) {
            return Err(invalid!("KL rate must be positive"));
        }
        let t = &self.tlasgr;
        if !(t.eps0 > 0.0 && t.tau0 >= 0.0 && t.kappa > 0.0 && t.floor > 0.0) {
            return Err(invalid!("TLASGR schedule parameters must be positive"));
        }
        self.encoder.validate()?;
        self.hyper().validate(&self.widths)
    }

    pub fn hyper(&self) -> DecoderHyper {
        let mut h = DecoderHyper::defaults(&self.widths);
        h.eta.fill(self.eta);
        h.gamma.fill(self.gamma);
        h.e0 = self.e0;
        h.f0 = self.f0;
        h.edge_link = self.edge_link;
        h
    }
}

/// Adaptive-moment optimizer (ascent on the objective).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Moves every parameter along its gradient.
    pub fn ascend(&mut self, params: Vec<&mut Array2<f64>>, grads: &[Array2<f64>]) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.dim() != g.dim()) {
            return Err(Error::Dimension("gradients do not match parameters".into()));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Array2::zeros(g.dim())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p += self.learning_rate * (*m / b1t) / ((*v / b2t).sqrt() + self.eps);
            });
        }
        Ok(())
    }
}

/// p_i = k q_i + (1 − k)(1 − q_i)/(N − 1) with q_i ∝ f_i^α.
pub fn inclusion_probabilities(importance: &[f64], k_mix: f64, alpha: f64) -> Result<Vec<f64>> {
    let n = importance.len();
    if n < 2 {
        return Err(invalid!("node sampling needs at least 2 nodes"));
    }
    if !(0.0..=1.0).contains(&k_mix) {
        return Err(invalid!("k_mix must lie in [0, 1], got {k_mix}"));
    }
    if importance.iter().any(|&f| !(f >= 0.0 && f.is_finite())) {
        return Err(domain!("importance values must be finite and nonnegative"));
    }
    let powered: Vec<f64> = importance.iter().map(|&f| f.powf(alpha)).collect();
    let total: f64 = powered.iter().sum();
    if !(total > 0.0) {
        return Err(domain!("importance values are all zero"));
    }
    Ok(powered
        .iter()
        .map(|&f| {
            let q = f / total;
            k_mix * q + (1.0 - k_mix) * (1.0 - q) / (n - 1) as f64
        })
        .collect())
}

/// Draws `size` nodes with replacement from the inclusion probabilities.
pub fn sample_node_subset(
    importance: &[f64],
    size: usize,
    k_mix: f64,
    alpha: f64,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    let p = inclusion_probabilities(importance, k_mix, alpha)?;
    let table = AliasTable::new(&p)?;
    Ok((0..size).map(|_| table.sample(rng)).collect())
}

/// Preconditioners and step counter of the TLASGR sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TlasgrState {
    pub config: TlasgrConfig,
    /// M_k per layer.
    pub precond: Vec<Array1<f64>>,
    pub step: u64,
}

impl TlasgrState {
    pub fn new(config: TlasgrConfig, widths: &[usize]) -> Self {
        Self {
            config,
            precond: widths.iter().map(|&k| Array1::zeros(k)).collect(),
            step: 0,
        }
    }

    /// ε_i = ε0 (τ0 + i)^{−κ}.
    pub fn step_size(&self) -> f64 {
        self.config.eps0 * (self.config.tau0 + self.step as f64).powf(-self.config.kappa)
    }
}

/// Projects a column onto {φ ≥ floor, Σφ = 1}.
fn project_simplex(col: &mut [f64], floor: f64) {
    let n = col.len() as f64;
    let floor = floor.min(0.5 / n);
    col.iter_mut()
        .for_each(|v| *v = if v.is_finite() { v.max(0.0) } else { 0.0 });
    let s: f64 = col.iter().sum();
    let spare = 1.0 - n * floor;
    for v in col.iter_mut() {
        *v = floor + spare * if s > 0.0 { *v / s } else { 1.0 / n };
    }
}

/// One TLASGR step for every column of Φ:
/// φ_k ← {φ_k + (ε/M_k)[(ρx_{:k} + η) − (ρx_{·k} + ηV)φ_k] + N(0, (2ε/M_k) diag φ_k)}∠.
/// `M_k` is smoothed toward ρx_{·k} + ηV with weight ε. Without `rng` the
/// noise is omitted.
#[allow(clippy::too_many_arguments)]
pub fn tlasgr_update_phi(
    phi: &Array2<f64>,
    term_totals: &Array2<f64>,
    precond: &mut Array1<f64>,
    eps: f64,
    rho: f64,
    eta: f64,
    floor: f64,
    mut rng: Option<&mut RngStream>,
) -> Result<Array2<f64>> {
    let (v, k) = phi.dim();
    if term_totals.dim() != (v, k) || precond.len() != k {
        return Err(Error::Dimension("TLASGR inputs disagree in shape".into()));
    }
    let mut out = phi.clone();
    for kk in 0..k {
        let col_total = rho * term_totals.column(kk).sum() + eta * v as f64;
        let m = &mut precond[kk];
        *m = if *m > 0.0 {
            (1.0 - eps) * *m + eps * col_total
        } else {
            col_total
        };
        let gain = eps / *m;
        let mut col: Vec<f64> = (0..v)
            .map(|r| {
                let p = phi[[r, kk]];
                let drift = (rho * term_totals[[r, kk]] + eta) - col_total * p;
                let noise = rng.as_deref_mut().map_or(0.0, |g| (2.0 * gain * p).sqrt() * g.normal());
                p + gain * drift + noise
            })
            .collect();
        project_simplex(&mut col, floor);
        out.column_mut(kk).assign(&Array1::from(col));
    }
    Ok(out)
}

/// One structured record per iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: u64,
    /// Quantity the gradient step ascended (ELBO, plus the label term if supervised).
    pub objective: f64,
    pub elbo: f64,
    pub node: f64,
    pub edge: f64,
    pub kl: f64,
    pub clamped_edges: usize,
    pub edge_term_skipped: bool,
    pub batch_nodes: usize,
    pub wall_ms: f64,
}

/// Everything needed to score, export or resume from a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub decoder: DecoderState,
    pub encoder: EncoderWeights,
    pub classifier: Option<Array2<f64>>,
    /// In-memory history; checkpoints omit it so they stay free of timings.
    #[serde(skip)]
    pub log: Vec<TrainRecord>,
}

impl TrainedModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_str(&text)?;
        model.decoder.check_invariants()?;
        model.encoder.check_invariants()?;
        Ok(model)
    }
}

/// Where a trainer writes its side outputs.
#[derive(Default)]
pub struct TrainOutputs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub log: Option<&'a mut dyn Write>,
}

/// Node sampler state reused across iterations.
struct SubsetSampler {
    probs: Vec<f64>,
    table: AliasTable,
    indptr: Vec<usize>,
    nbrs: Vec<usize>,
}

/// Owns the model and optimizer state of one training run.
pub struct Trainer<'a> {
    x: &'a SparseCountMatrix,
    a: &'a AdjacencyGraph,
    labels: Option<&'a [Option<usize>]>,
    pub model: TrainedModel,
    adam: Adam,
    tlasgr: TlasgrState,
    full_input: Option<GraphInput>,
    sampler: Option<SubsetSampler>,
}

impl<'a> Trainer<'a> {
    /// `labels` (with `num_classes`) enable the supervised head when the
    /// config asks for it; unlabeled nodes are `None`.
    pub fn new(
        x: &'a SparseCountMatrix,
        a: &'a AdjacencyGraph,
        labels: Option<(&'a [Option<usize>], usize)>,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let n = x.num_nodes();
        if a.num_nodes() != n {
            return Err(Error::Dimension(format!(
                "{n} feature rows, {} graph nodes",
                a.num_nodes()
            )));
        }
        if config.trainer == TrainerKind::Scalable && config.subset_size > n {
            return Err(invalid!("subset size {} exceeds the {n} nodes", config.subset_size));
        }
        let decoder = DecoderState::init(x, &config.widths, config.hyper(), config.seed)?;
        let encoder = EncoderWeights::init(config.encoder.clone(), x.vocab_size(), &config.widths, config.seed)?;
        let (labels, classifier) = match (config.supervised, labels) {
            (true, Some((l, classes))) => {
                if l.len() != n {
                    return Err(Error::Dimension(format!("{} labels for {n} nodes", l.len())));
                }
                let k = config.widths[0];
                let mut rng = RngStream::derive(config.seed, &[tags::INIT, 200]);
                let s = (6.0 / (k + classes) as f64).sqrt();
                (
                    Some(l),
                    Some(Array2::from_shape_fn((k, classes), |_| s * (2.0 * rng.open01() - 1.0))),
                )
            }
            (true, None) => return Err(invalid!("supervised training needs labels")),
            (false, _) => (None, None),
        };
        let full_input = match config.trainer {
            TrainerKind::FullBatch => Some(GraphInput::new(x, a)?),
            _ => None,
        };
        let sampler = match config.trainer {
            TrainerKind::Scalable => {
                let f: Vec<f64> = a.degrees().iter().map(|&d| d as f64).collect();
                let probs = inclusion_probabilities(&f, config.k_mix, config.alpha_imp)?;
                let table = AliasTable::new(&probs)?;
                let (indptr, nbrs) = a.neighbor_lists();
                Some(SubsetSampler {
                    probs,
                    table,
                    indptr,
                    nbrs,
                })
            }
            _ => None,
        };
        Ok(Self {
            x,
            a,
            labels,
            adam: Adam::new(config.learning_rate),
            tlasgr: TlasgrState::new(config.tlasgr.clone(), &config.widths),
            model: TrainedModel {
                config,
                decoder,
                encoder,
                classifier,
                log: Vec::new(),
            },
            full_input,
            sampler,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.model.decoder.iteration
    }

    pub fn run(mut self, out: &mut TrainOutputs) -> Result<TrainedModel> {
        for _ in 0..self.model.config.iterations {
            let record = match self.step() {
                Ok(r) => r,
                Err(e) => {
                    if let Some(path) = out.checkpoint {
                        self.model.save(path)?;
                    }
                    return Err(e);
                }
            };
            if let Some(log) = out.log.as_deref_mut() {
                let line = serde_json::to_string(&record)?;
                writeln!(log, "{line}").map_err(|e| Error::io("<training log>", e))?;
            }
            let every = self.model.config.checkpoint_every;
            if let (Some(path), true) = (out.checkpoint, every > 0 && self.iteration() % every as u64 == 0) {
                self.model.save(path)?;
            }
        }
        if let Some(path) = out.checkpoint {
            self.model.save(path)?;
        }
        Ok(self.model)
    }

    /// Runs one iteration and appends its record to the log.
    pub fn step(&mut self) -> Result<TrainRecord> {
        let start = Instant::now();
        let mut record = match self.model.config.trainer {
            TrainerKind::FullBatch => self.full_batch_step()?,
            TrainerKind::Scalable => self.scalable_step()?,
            TrainerKind::Gibbs => self.gibbs_step()?,
        };
        record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        self.model.log.push(record.clone());
        Ok(record)
    }

    fn gibbs_step(&mut self) -> Result<TrainRecord> {
        let iteration = self.iteration();
        gibbs_sweep(&mut self.model.decoder, self.x, self.a)?;
        let d = &self.model.decoder;
        let (node, edge) = data_log_likelihood(self.x, self.a, &d.phi, &d.theta, &d.u)?;
        Ok(TrainRecord {
            iteration,
            objective: node + edge,
            elbo: node + edge,
            node,
            edge,
            batch_nodes: self.x.num_nodes(),
            ..Default::default()
        })
    }

    /// Gradient step on the encoder from one stochastic evaluation of the
    /// objective; returns the sampled Θ, the u used, and the record.
    #[allow(clippy::too_many_arguments)]
    fn gradient_step(
        &mut self,
        input: &GraphInput,
        labels: Option<&[Option<usize>]>,
        rates: &[Array1<f64>],
        beta: f64,
        node_weights: Option<&Array1<f64>>,
        pair_scale: f64,
    ) -> Result<(Vec<Array2<f64>>, Vec<Array1<f64>>, TrainRecord)> {
        let iteration = self.iteration();
        let cfg = &self.model.config;
        let enc = &self.model.encoder;
        let noise = EncoderNoise::draw(enc, input, cfg.seed, iteration);
        let mut tape = Tape::new();
        let vars = WeightVars::leaves(&mut tape, enc);
        let param_vars = vars.flat();
        let cls = self.model.classifier.as_ref().map(|c| tape.leaf(c.clone()));
        let ctx = ObjectiveContext {
            phi: &self.model.decoder.phi,
            gamma: &self.model.decoder.hyper.gamma,
            rates,
            beta,
            node_weights,
            pair_scale,
        };
        let obj = build_objective(&mut tape, input, enc, vars, &noise, &ctx)?;
        let mut root = obj.terms.total;
        if let (Some(cls), Some(labels)) = (cls, labels) {
            root = supervised_loss(&mut tape, root, obj.theta.theta[0], labels, cls)?;
        }
        let objective = tape.scalar(root);
        if !objective.is_finite() {
            let at = tape.nonfinite().unwrap_or("objective").to_string();
            return Err(Error::Numerical(format!(
                "non-finite objective at iteration {iteration} (first produced by {at})"
            )));
        }
        let grads = tape.backward(root)?;
        let mut g: Vec<Array2<f64>> = param_vars
            .iter()
            .zip(enc.params())
            .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Array2::zeros(p.dim())))
            .collect();
        if let (Some(c), Some(cv)) = (&self.model.classifier, cls) {
            g.push(grads.get(cv).cloned().unwrap_or_else(|| Array2::zeros(c.dim())));
        }
        let theta: Vec<Array2<f64>> = obj.theta.theta.iter().map(|&v| tape.value(v).clone()).collect();
        let u = self.model.encoder.u();
        let terms = obj.terms.values(&tape);
        let mut params = self.model.encoder.params_mut();
        if let Some(c) = self.model.classifier.as_mut() {
            params.push(c);
        }
        self.adam.ascend(params, &g)?;
        self.model.encoder.check_invariants()?;
        let record = TrainRecord {
            iteration,
            objective,
            elbo: terms.total,
            node: terms.node,
            edge: terms.edge,
            kl: terms.kl,
            clamped_edges: terms.clamped_edges,
            edge_term_skipped: false,
            batch_nodes: input.num_nodes,
            wall_ms: 0.0,
        };
        Ok((theta, u, record))
    }

    fn kl_rates(&self, nodes: Option<&[usize]>) -> Vec<Array1<f64>> {
        let n = nodes.map_or(self.x.num_nodes(), <[usize]>::len);
        let d = &self.model.decoder;
        if self.model.config.kl_rate_from_decoder {
            d.c.iter()
                .map(|c| match nodes {
                    Some(idx) => idx.iter().map(|&j| c[j]).collect(),
                    None => c.clone(),
                })
                .collect()
        } else {
            d.widths
                .iter()
                .map(|_| Array1::from_elem(n, self.model.config.kl_rate))
                .collect()
        }
    }

    fn full_batch_step(&mut self) -> Result<TrainRecord> {
        let input = self.full_input.take().expect("full-batch input exists");
        let rates = self.kl_rates(None);
        let beta = self.model.config.beta;
        let result = self.gradient_step(&input, self.labels, &rates, beta, None, 1.0);
        self.full_input = Some(input);
        let (theta, u, record) = result?;
        let d = &mut self.model.decoder;
        let key = SweepKey {
            seed: d.seed,
            iteration: d.iteration,
        };
        let aug = augment_all(self.x, self.a, &d.phi, &theta, &u, &d.hyper, None, None, key)?;
        for l in 0..d.num_layers() {
            d.phi[l] = update_phi_gibbs(aug.nodes[l].term_totals.view(), d.hyper.eta[l], key, l)?;
        }
        let (c, p) = update_scales(&theta, &d.hyper.gamma, d.hyper.e0, d.hyper.f0, key)?;
        d.theta = theta;
        d.c = c;
        d.p = p;
        d.u = self.model.encoder.u();
        d.iteration += 1;
        Ok(record)
    }

    fn scalable_step(&mut self) -> Result<TrainRecord> {
        let iteration = self.iteration();
        let cfg = self.model.config.clone();
        let n = self.x.num_nodes();
        let sampler = self.sampler.as_ref().expect("scalable sampler exists");
        let mut rng = RngStream::derive(cfg.seed, &[tags::NODE_SUBSET, iteration]);
        let mut draws: Vec<usize> = (0..cfg.subset_size).map(|_| sampler.table.sample(&mut rng)).collect();
        draws.sort_unstable();
        let mut nodes = Vec::new();
        let mut mult = Vec::new();
        for &j in &draws {
            if nodes.last() == Some(&j) {
                *mult.last_mut().unwrap() += 1.0;
            } else {
                nodes.push(j);
                mult.push(1.0);
            }
        }
        let xs = self.x.select_rows(&nodes);
        let as_ = self.a.induced_subgraph_with(&sampler.indptr, &sampler.nbrs, &nodes);
        let input = GraphInput::new(&xs, &as_)?;
        let ns = cfg.subset_size as f64;
        let (weights, pair_scale) = match cfg.edge_weighting {
            EdgeWeighting::None => (None, 1.0),
            EdgeWeighting::EndpointProduct => (
                Some(Array1::from_iter(
                    nodes.iter().zip(&mult).map(|(&j, &m)| m / (ns * sampler.probs[j])),
                )),
                ns / (ns - 1.0),
            ),
        };
        let skipped = as_.num_edges() == 0;
        let beta = if skipped { 0.0 } else { cfg.beta };
        let rates = self.kl_rates(Some(&nodes));
        let labels: Option<Vec<Option<usize>>> = self.labels.map(|l| nodes.iter().map(|&j| l[j]).collect());
        let (theta, u, mut record) =
            self.gradient_step(&input, labels.as_deref(), &rates, beta, weights.as_ref(), pair_scale)?;
        record.edge_term_skipped = skipped;

        let d = &mut self.model.decoder;
        let key = SweepKey {
            seed: d.seed,
            iteration,
        };
        let aug = augment_all(&xs, &as_, &d.phi, &theta, &u, &d.hyper, None, None, key)?;
        let eps = self.tlasgr.step_size();
        let rho = n as f64 / nodes.len() as f64;
        for l in 0..d.num_layers() {
            let mut g = key.stream(tags::TLASGR, l, 0);
            d.phi[l] = tlasgr_update_phi(
                &d.phi[l],
                &aug.nodes[l].term_totals,
                &mut self.tlasgr.precond[l],
                eps,
                rho,
                d.hyper.eta[l],
                self.tlasgr.config.floor,
                Some(&mut g),
            )?;
        }
        self.tlasgr.step += 1;
        let (c, p) = update_scales(&theta, &d.hyper.gamma, d.hyper.e0, d.hyper.f0, key)?;
        for (r, &j) in nodes.iter().enumerate() {
            for l in 0..d.num_layers() {
                d.theta[l].row_mut(j).assign(&theta[l].row(r));
                d.c[l][j] = c[l][r];
            }
            for (pl, ps) in d.p.iter_mut().zip(&p) {
                pl[j] = ps[r];
            }
        }
        d.u = self.model.encoder.u();
        d.iteration += 1;
        Ok(record)
    }
}

/// Trains per the config's trainer choice.
pub fn train(
    x: &SparseCountMatrix,
    a: &AdjacencyGraph,
    labels: Option<(&[Option<usize>], usize)>,
    config: TrainConfig,
    out: &mut TrainOutputs,
) -> Result<TrainedModel> {
    Trainer::new(x, a, labels, config)?.run(out)
}

/// Algorithm with encoder gradient steps and Gibbs updates of Φ on all nodes.
pub fn train_full_batch(x: &SparseCountMatrix, a: &AdjacencyGraph, mut config: TrainConfig) -> Result<TrainedModel> {
    config.trainer = TrainerKind::FullBatch;
    train(x, a, None, config, &mut TrainOutputs::default())
}

/// Minibatch variant: importance-sampled subgraphs and TLASGR updates of Φ.
pub fn train_scalable(x: &SparseCountMatrix, a: &AdjacencyGraph, mut config: TrainConfig) -> Result<TrainedModel> {
    config.trainer = TrainerKind::Scalable;
    train(x, a, None, config, &mut TrainOutputs::default())
}

/// Poisson node log-likelihood (without ln x!) and Bernoulli edge
/// log-likelihood over all pairs, for given Θ.
pub fn data_log_likelihood(
    x: &SparseCountMatrix,
    a: &AdjacencyGraph,
    phi: &[Array2<f64>],
    theta: &[Array2<f64>],
    u: &[Array1<f64>],
) -> Result<(f64, f64)> {
    let n = x.num_nodes();
    if theta[0].nrows() != n || phi[0].nrows() != x.vocab_size() {
        return Err(Error::Dimension("Θ or Φ does not match the data".into()));
    }
    let mass = theta[0].dot(&phi[0].sum_axis(Axis(0))).sum();
    let mut node = -mass;
    for (j, v, c) in x.entries() {
        let rate = theta[0].row(j).dot(&phi[0].row(v));
        node += c as f64 * rate.ln();
    }
    let mut all_pairs = 0.0;
    for (ul, th) in u.iter().zip(theta) {
        all_pairs += ul.dot(&crate::gpgbn::pair_sums(th.view()));
    }
    let mut edge = -all_pairs;
    for &(i, j) in a.edges() {
        let p = edge_probability_nodes(u, theta, i, j).max(crate::encoders::EDGE_PROB_FLOOR);
        let r = -(-p).ln_1p();
        edge += p.ln() + r;
    }
    Ok((node, edge))
}

/// Uniform column-stochastic matrix, useful as a neutral starting Φ.
pub fn uniform_phi(rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::ones((rows, cols));
    normalize_columns(&mut m);
    m
}
