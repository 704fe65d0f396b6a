//! Built-in property suites: count conservation, sampler moments, gradients
//! and the Weibull–gamma divergence.

use ndarray::{array, Array1, Array2};
use serde::Serialize;

use crate::autodiff::{check_gradients, primitive_gradient_checks, Tape, Var};
use crate::encoders::{
    build_objective, encoder_forward, kl_weibull_gamma, supervised_loss, AttentionNorm, EncoderConfig, EncoderKind,
    EncoderNoise, EncoderWeights, GraphInput, ObjectiveContext, WeightVars,
};
use crate::error::Result;
use crate::gpgbn::{augment_all, normalize_columns, update_phi_gibbs, DecoderHyper, DecoderState, SweepKey};
use crate::graph_data::{AdjacencyGraph, SparseCountMatrix};
use crate::special::ln_gamma;
use crate::stochastic::{
    crt_mean, sample_crt, sample_poisson, sample_truncated_poisson, sample_weibull, truncated_poisson_mean,
    weibull_moment, RngStream,
};
use crate::training::{inclusion_probabilities, tlasgr_update_phi};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const SIMPLEX_TOLERANCE: f64 = 1e-12;
pub const MC_SIGMAS: f64 = 3.0;
pub const KL_RELATIVE_TOLERANCE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(suite: &'static str, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            suite,
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Five documents over six words joined by six links.
pub fn toy_graph() -> (SparseCountMatrix, AdjacencyGraph) {
    let x = SparseCountMatrix::new(
        5,
        6,
        vec![
            (0, 0, 2),
            (0, 1, 1),
            (1, 1, 3),
            (1, 2, 1),
            (2, 2, 2),
            (2, 3, 1),
            (3, 3, 1),
            (3, 4, 2),
            (4, 4, 1),
            (4, 5, 3),
            (4, 0, 1),
        ],
    )
    .expect("valid toy counts");
    let a = AdjacencyGraph::from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)]).expect("valid toy graph");
    (x, a)
}

fn simplex_error(m: &Array2<f64>) -> f64 {
    let neg = m.iter().any(|&v| v < 0.0);
    let worst = m
        .columns()
        .into_iter()
        .map(|c| (c.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    if neg {
        f64::INFINITY
    } else {
        worst
    }
}

/// Exact count conservation of the augmentations, simplex preservation of
/// both Φ updates, normalized inclusion probabilities and attention rows.
pub fn conjugacy_suite(seeds: u64) -> Result<Vec<CheckResult>> {
    const SUITE: &str = "conjugacy";
    let (x, a) = toy_graph();
    let widths = [3, 2];
    let dense = x.to_dense();
    let (mut node_ok, mut term_ok, mut edge_ok, mut phi_err, mut tl_err) = (true, true, true, 0.0f64, 0.0f64);
    for seed in 0..seeds {
        let s = DecoderState::init(&x, &widths, DecoderHyper::defaults(&widths), seed)?;
        let key = SweepKey { seed, iteration: 1 };
        let aug = augment_all(&x, &a, &s.phi, &s.theta, &s.u, &s.hyper, None, None, key)?;
        node_ok &= (0..x.num_nodes()).all(|j| aug.nodes[0].node_totals.row(j).sum() == x.row_total(j));
        term_ok &= (0..x.vocab_size()).all(|v| aug.nodes[0].term_totals.row(v).sum() == dense.column(v).sum());
        let m: u64 = aug.edges.edge_totals.iter().sum();
        let by_topic: f64 = aug.edges.topic_totals.iter().map(|t| t.sum()).sum();
        let by_node: u64 = aug.edges.node_totals.iter().map(|t| t.sum()).sum();
        edge_ok &= by_topic == m as f64 && by_node == 2 * m && aug.edges.edge_totals.iter().all(|&c| c >= 1);
        for (l, nc) in aug.nodes.iter().enumerate() {
            let phi = update_phi_gibbs(nc.term_totals.view(), s.hyper.eta[l], key, l)?;
            phi_err = phi_err.max(simplex_error(&phi));
            let mut precond = Array1::zeros(widths[l]);
            let mut rng = RngStream::new(seed, 99);
            let next = tlasgr_update_phi(
                &s.phi[l],
                &nc.term_totals,
                &mut precond,
                0.05,
                3.0,
                0.01,
                1e-10,
                Some(&mut rng),
            )?;
            tl_err = tl_err.max(simplex_error(&next));
        }
    }
    let mut out = vec![
        CheckResult::new(
            SUITE,
            "node counts conserved per document",
            node_ok,
            format!("{seeds} seeds"),
        ),
        CheckResult::new(
            SUITE,
            "node counts conserved per word",
            term_ok,
            format!("{seeds} seeds"),
        ),
        CheckResult::new(SUITE, "edge counts conserved", edge_ok, format!("{seeds} seeds")),
        CheckResult::new(
            SUITE,
            "Gibbs Φ stays on the simplex",
            phi_err <= SIMPLEX_TOLERANCE,
            format!("max error {phi_err:.2e}"),
        ),
        CheckResult::new(
            SUITE,
            "TLASGR Φ stays on the simplex",
            tl_err <= SIMPLEX_TOLERANCE,
            format!("max error {tl_err:.2e}"),
        ),
    ];

    let degrees: Vec<f64> = a.degrees().iter().map(|&d| d as f64).collect();
    let mut p_err = 0.0f64;
    for k_mix in [0.0, 0.3, 1.0] {
        for alpha in [0.0, 1.0, 2.0] {
            let p = inclusion_probabilities(&degrees, k_mix, alpha)?;
            p_err = p_err.max((p.iter().sum::<f64>() - 1.0).abs());
        }
    }
    out.push(CheckResult::new(
        SUITE,
        "inclusion probabilities sum to one",
        p_err <= SIMPLEX_TOLERANCE,
        format!("max error {p_err:.2e}"),
    ));

    let input = GraphInput::new(&x, &a)?;
    let mut att_err = 0.0f64;
    for norm in [AttentionNorm::Literal, AttentionNorm::LogWeights] {
        let cfg = EncoderConfig {
            kind: EncoderKind::Wgaae,
            heads: 3,
            attention_norm: norm,
            ..Default::default()
        };
        for seed in 0..seeds.min(5) {
            let w = EncoderWeights::init(cfg.clone(), 6, &widths, seed)?;
            let noise = EncoderNoise::draw(&w, &input, seed, 0);
            let mut tape = Tape::new();
            let vars = WeightVars::leaves(&mut tape, &w);
            let post = encoder_forward(&mut tape, &input, &w, &vars, &noise)?;
            att_err = att_err.max(post.attention_state(&tape, &input, &noise).max_row_sum_error());
        }
    }
    out.push(CheckResult::new(
        SUITE,
        "attention rows sum to one",
        att_err <= SIMPLEX_TOLERANCE,
        format!("max error {att_err:.2e}"),
    ));
    Ok(out)
}

fn mean_and_se(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for v in values {
        n += 1.0;
        let d = v - mean;
        mean += d / n;
        m2 += d * (v - mean);
    }
    (mean, (m2 / (n - 1.0) / n).sqrt())
}

fn mc_check(name: String, draws: impl Iterator<Item = f64>, exact: f64) -> CheckResult {
    let (mean, se) = mean_and_se(draws);
    let z = (mean - exact) / se;
    CheckResult::new(
        "sampler",
        name,
        z.abs() <= MC_SIGMAS,
        format!("MC {mean:.6} vs {exact:.6} ({z:+.2}σ)"),
    )
}

/// Monte-Carlo means of the truncated Poisson, CRT, Weibull and
/// Bernoulli–Poisson samplers against their closed forms.
pub fn sampler_suite(draws: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut stream = 0;
    let mut rng = || {
        stream += 1;
        RngStream::new(seed, stream)
    };
    for lambda in [0.1, 1.0, 10.0] {
        let mut r = rng();
        let xs: Vec<f64> = (0..draws)
            .map(|_| sample_truncated_poisson(lambda, &mut r).map(|v| v as f64))
            .collect::<Result<_>>()?;
        out.push(mc_check(
            format!("Pois+ mean at λ={lambda}"),
            xs.into_iter(),
            truncated_poisson_mean(lambda),
        ));
    }
    for (n, a) in [(10u64, 0.5), (50, 2.0), (200, 10.0)] {
        let mut r = rng();
        let xs: Vec<f64> = (0..draws)
            .map(|_| sample_crt(n, a, &mut r).map(|v| v as f64))
            .collect::<Result<_>>()?;
        out.push(mc_check(
            format!("CRT mean at n={n}, a={a}"),
            xs.into_iter(),
            crt_mean(n, a),
        ));
    }
    for (k, lambda) in [(0.5, 1.0), (1.0, 2.0), (3.0, 0.7)] {
        let mut r = rng();
        let xs: Vec<f64> = (0..draws)
            .map(|_| sample_weibull(k, lambda, &mut r).map(|d| d.value))
            .collect::<Result<_>>()?;
        for m in [1.0, 2.0] {
            out.push(mc_check(
                format!("Weibull moment {m} at k={k}, λ={lambda}"),
                xs.iter().map(|x| x.powf(m)),
                weibull_moment(k, lambda, m),
            ));
        }
    }
    for rate in [0.05, 0.5, 2.0] {
        let mut r = rng();
        let xs: Vec<f64> = (0..draws)
            .map(|_| sample_poisson(rate, &mut r).map(|v| (v >= 1) as u8 as f64))
            .collect::<Result<_>>()?;
        out.push(mc_check(
            format!("BerPo edge probability at rate={rate}"),
            xs.into_iter(),
            1.0 - (-rate).exp(),
        ));
    }
    Ok(out)
}

fn decoder_stack(widths: &[usize], vocab: usize, seed: u64) -> Vec<Array2<f64>> {
    let mut rng = RngStream::new(seed, 77);
    let mut rows = vocab;
    widths
        .iter()
        .map(|&k| {
            let mut m = Array2::from_shape_fn((rows, k), |_| 0.2 + rng.open01());
            normalize_columns(&mut m);
            rows = k;
            m
        })
        .collect()
}

/// Every autodiff primitive, the full objective for both encoders on a
/// two-layer model, and the supervised loss, against central differences.
pub fn gradient_suite() -> Result<Vec<CheckResult>> {
    const SUITE: &str = "gradient";
    let report = |name: String, r: &crate::autodiff::GradCheckReport| {
        CheckResult::new(
            SUITE,
            name,
            r.passed(),
            format!(
                "max rel err {:.2e} over {} coordinates{}",
                r.max_rel_err,
                r.coordinates,
                if r.kink { ", kink" } else { "" }
            ),
        )
    };
    let mut out: Vec<CheckResult> = primitive_gradient_checks()?
        .iter()
        .map(|(name, r)| report(format!("primitive {name}"), r))
        .collect();

    let (x, a) = toy_graph();
    let input = GraphInput::new(&x, &a)?;
    let widths = [3, 2];
    let phi = decoder_stack(&widths, 6, 11);
    let rates = vec![Array1::from_elem(5, 1.2), Array1::from_elem(5, 0.8)];
    for kind in [EncoderKind::Wgcae, EncoderKind::Wgaae] {
        let cfg = EncoderConfig {
            kind,
            heads: 2,
            ..Default::default()
        };
        let mut w = EncoderWeights::init(cfg, 6, &widths, 21)?;
        for (i, lu) in w.log_u.iter_mut().enumerate() {
            lu.iter_mut()
                .enumerate()
                .for_each(|(k, v)| *v = 0.1 * (i + k) as f64 - 0.1);
        }
        let noise = EncoderNoise::draw(&w, &input, 5, 0);
        let params: Vec<Array2<f64>> = w.params().into_iter().cloned().collect();
        let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
            let bound = WeightVars::bind(&w, vars)?;
            let ctx = ObjectiveContext {
                phi: &phi,
                gamma: &[1.0, 1.0],
                rates: &rates,
                beta: 0.7,
                node_weights: None,
                pair_scale: 1.0,
            };
            Ok(build_objective(tape, &input, &w, bound, &noise, &ctx)?.terms.total)
        };
        let r = check_gradients(f, &params, GRADIENT_TOLERANCE)?;
        out.push(report(format!("objective {kind:?}"), &r));
    }

    let theta = array![[0.3, 1.2], [2.0, 0.1], [0.7, 0.7]];
    let r = check_gradients(
        |t, v| {
            let th = t.leaf(theta.clone());
            let l = t.leaf_scalar(0.0);
            supervised_loss(t, l, th, &[Some(0), Some(2), None], v[0])
        },
        &[array![[0.1, -0.3, 0.2], [0.5, 0.0, -0.1]]],
        GRADIENT_TOLERANCE,
    )?;
    out.push(report("supervised loss".into(), &r));
    Ok(out)
}

/// Analytic KL(Weibull(k, λ) ‖ Gamma(α, β)) against Monte Carlo on random
/// settings, plus the zero at Exp(1) against Exp(1). Draws are stratified:
/// one uniform per cell of [0, 1), pushed through the Weibull inverse CDF.
pub fn kl_suite(settings: usize, draws: usize, seed: u64) -> Result<Vec<CheckResult>> {
    const SUITE: &str = "kl";
    let zero = kl_weibull_gamma(1.0, 1.0, 1.0, 1.0)?;
    let mut out = vec![CheckResult::new(
        SUITE,
        "zero at Exp(1) vs Exp(1)",
        zero == 0.0,
        format!("{zero:e}"),
    )];
    let mut pick = RngStream::new(seed, 0);
    for s in 0..settings {
        let mut u = |lo: f64, hi: f64| lo + (hi - lo) * pick.open01();
        let (k, lambda, alpha, beta) = (u(0.5, 3.0), u(0.3, 3.0), u(0.5, 3.0), u(0.5, 3.0));
        let exact = kl_weibull_gamma(k, lambda, alpha, beta)?;
        let mut rng = RngStream::new(seed, 1 + s as u64);
        let ln_norm = alpha * beta.ln() - ln_gamma(alpha);
        let mut acc = 0.0;
        for i in 0..draws {
            let p = (i as f64 + rng.open01()) / draws as f64;
            let x = lambda * (-(-p).ln_1p()).powf(1.0 / k);
            let lx = x.ln();
            let ln_q = k.ln() - lambda.ln() + (k - 1.0) * (lx - lambda.ln()) - (x / lambda).powf(k);
            let ln_p = ln_norm + (alpha - 1.0) * lx - beta * x;
            acc += ln_q - ln_p;
        }
        let mc = acc / draws as f64;
        let rel = (mc - exact).abs() / exact.abs();
        out.push(CheckResult::new(
            SUITE,
            format!("setting {s}: k={k:.3} λ={lambda:.3} α={alpha:.3} β={beta:.3}"),
            rel <= KL_RELATIVE_TOLERANCE,
            format!("analytic {exact:.5}, MC {mc:.5}, rel err {rel:.2e}"),
        ));
    }
    Ok(out)
}

/// Every suite at full size.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = conjugacy_suite(20)?;
    out.extend(sampler_suite(1_000_000, seed)?);
    out.extend(gradient_suite()?);
    out.extend(kl_suite(20, 1_000_000, seed)?);
    Ok(out)
}
