//! Acceptance criteria, one PASS/FAIL/SKIP line each.
//!
//! Runs without the libtest harness so the lines always reach stdout.
//! `ACCEPTANCE_ONLY=5,6` restricts the run; the Cora criteria need
//! `WGAE_CORA_DIR` pointing at a directory with `cora.content` and
//! `cora.cites`.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use ndarray::Array2;
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;

use wgae::encoders::{EncoderConfig, EncoderKind};
use wgae::evaluation::{accuracy_on, label_split, link_prediction_eval, predict_classes, LabelSplit, ScoreMode};
use wgae::gpgbn::{
    edge_probability_nodes, generate_from_state, gibbs_sweep, sample_prior_state, scale_u_to_expected_edges,
    DecoderHyper, DecoderState,
};
use wgae::graph_data::{
    load_corpus, load_edge_list, split_edges, AdjacencyGraph, Corpus, CorpusFormat, SparseCountMatrix,
};
use wgae::selftest::{conjugacy_suite, gradient_suite, kl_suite, sampler_suite, CheckResult};
use wgae::training::{TrainConfig, Trainer, TrainerKind};

const MC_DRAWS: usize = 1_000_000;

struct Outcome {
    passed: Option<bool>,
    detail: String,
}

impl Outcome {
    fn check(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed: Some(passed),
            detail: detail.into(),
        }
    }

    fn skip(detail: impl Into<String>) -> Self {
        Self {
            passed: None,
            detail: detail.into(),
        }
    }
}

fn within(elapsed: Duration, limit_s: f64) -> (bool, String) {
    let s = elapsed.as_secs_f64();
    if limit_s.is_finite() {
        (s < limit_s, format!("{s:.1}s of {limit_s:.0}s"))
    } else {
        (true, format!("{s:.1}s"))
    }
}

fn suite_outcome(results: wgae::Result<Vec<CheckResult>>, elapsed: Duration, limit_s: f64) -> Outcome {
    let results = match results {
        Ok(r) => r,
        Err(e) => return Outcome::check(false, format!("error: {e}")),
    };
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} [{}]", r.name, r.detail))
        .collect();
    let (fast, time) = within(elapsed, limit_s);
    let detail = if failed.is_empty() {
        format!("{}/{} checks, {time}", results.len(), results.len())
    } else {
        format!("{} failed: {}; {time}", failed.len(), failed.join("; "))
    };
    Outcome::check(failed.is_empty() && fast, detail)
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn c1() -> Outcome {
    let (r, t) = timed(|| conjugacy_suite(20));
    suite_outcome(r, t, 60.0)
}

fn c2() -> Outcome {
    let (r, t) = timed(|| sampler_suite(MC_DRAWS, 2024));
    suite_outcome(r, t, 120.0)
}

fn c3() -> Outcome {
    let (r, t) = timed(gradient_suite);
    suite_outcome(r, t, 120.0)
}

fn c4() -> Outcome {
    let (r, t) = timed(|| kl_suite(20, MC_DRAWS, 7));
    // runtime is not part of this criterion
    suite_outcome(r, t, f64::INFINITY)
}

struct Synthetic {
    truth: DecoderState,
    x: SparseCountMatrix,
    a: AdjacencyGraph,
}

fn synthetic(n: usize, v: usize, widths: &[usize], eta: f64, gamma: f64, c: f64, edges: f64, seed: u64) -> Synthetic {
    let mut hyper = DecoderHyper::defaults(widths);
    hyper.eta.fill(eta);
    hyper.gamma.fill(gamma);
    let mut truth = sample_prior_state(n, v, widths, hyper, c, seed).expect("prior draw");
    scale_u_to_expected_edges(&mut truth, edges).expect("edge calibration");
    let g = generate_from_state(&truth, seed + 1).expect("generation");
    Synthetic {
        truth,
        x: g.features,
        a: g.graph,
    }
}

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
}

/// Mean cosine similarity of matched columns under the best matching.
fn best_permutation_cosine(truth: &Array2<f64>, est: &Array2<f64>) -> f64 {
    let k = truth.ncols();
    let sims = Matrix::from_fn(k, k, |(i, j)| {
        (cosine(truth.column(i), est.column(j)) * 1e9).round() as i64
    });
    let (total, _) = kuhn_munkres(&sims);
    total as f64 / 1e9 / k as f64
}

fn c5() -> Outcome {
    let (out, t) = timed(|| {
        let data = synthetic(200, 30, &[5], 0.05, 0.5, 0.05, 1500.0, 11);
        let mut hyper = DecoderHyper::defaults(&[5]);
        hyper.eta.fill(0.05);
        let mut state = DecoderState::init(&data.x, &[5], hyper, 3).expect("init");
        for _ in 0..500 {
            gibbs_sweep(&mut state, &data.x, &data.a).expect("sweep");
        }
        let cos = best_permutation_cosine(&data.truth.phi[0], &state.phi[0]);
        (cos, data.a.num_edges(), data.x.total())
    });
    let (cos, edges, words) = out;
    let (fast, time) = within(t, 300.0);
    Outcome::check(
        cos >= 0.9 && fast,
        format!("cosine {cos:.4} (≥ 0.9), {edges} edges, {words} tokens, {time}"),
    )
}

fn c6() -> Outcome {
    let (out, t) = timed(|| -> wgae::Result<(f64, f64, usize)> {
        let data = synthetic(200, 50, &[8, 4], 0.05, 0.1, 0.1, 1200.0, 21);
        let split = split_edges(&data.a, 0.05, 0.10, 5)?;
        let train_graph = split.train_graph();
        let config = TrainConfig {
            widths: vec![8, 4],
            iterations: 8000,
            learning_rate: 3e-2,
            seed: 1,
            encoder: EncoderConfig {
                kind: EncoderKind::Wgcae,
                ..Default::default()
            },
            ..Default::default()
        };
        let model = Trainer::new(&data.x, &train_graph, None, config)?.run(&mut Default::default())?;
        let metrics = link_prediction_eval(&model, &data.x, &split, ScoreMode::PosteriorMean)?;
        // ranking by the generating parameters, for reference
        let pairs: Vec<_> = split.test_edges.iter().chain(&split.test_nonedges).copied().collect();
        let scores: Vec<f64> = pairs
            .iter()
            .map(|&(i, j)| edge_probability_nodes(&data.truth.u, &data.truth.theta, i, j))
            .collect();
        let labels: Vec<bool> = (0..pairs.len()).map(|i| i < split.test_edges.len()).collect();
        let (oracle, _) = wgae::evaluation::auc_ap(&scores, &labels)?;
        Ok((metrics["test_auc"], oracle, data.a.num_edges()))
    });
    match out {
        Ok((auc, oracle, edges)) => {
            let (fast, time) = within(t, 600.0);
            Outcome::check(
                auc >= 0.90 && fast,
                format!("test AUC {auc:.4} (≥ 0.90; generating-parameter AUC {oracle:.4}), {edges} edges, {time}"),
            )
        }
        Err(e) => Outcome::check(false, format!("error: {e}")),
    }
}

fn cora_dir() -> Option<PathBuf> {
    std::env::var_os("WGAE_CORA_DIR").map(PathBuf::from)
}

fn load_cora(dir: &std::path::Path) -> wgae::Result<(Corpus, AdjacencyGraph)> {
    let corpus = load_corpus(dir.join("cora.content"), CorpusFormat::CoraContent)?;
    let a = load_edge_list(
        dir.join("cora.cites"),
        Some(corpus.features.num_nodes()),
        corpus.node_ids.as_deref(),
    )?;
    Ok((corpus, a))
}

fn cora_config(kind: EncoderKind, seed: u64) -> TrainConfig {
    TrainConfig {
        widths: vec![16, 16, 16],
        iterations: 1000,
        learning_rate: 1e-2,
        seed,
        encoder: EncoderConfig {
            kind,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn c7() -> Outcome {
    let Some(dir) = cora_dir() else {
        return Outcome::skip("WGAE_CORA_DIR not set");
    };
    let run = || -> wgae::Result<String> {
        let (corpus, a) = load_cora(&dir)?;
        let x = &corpus.features;
        let mut lines = Vec::new();
        let mut ok = true;
        for kind in [EncoderKind::Wgcae, EncoderKind::Wgaae] {
            let (mut aucs, mut aps, mut worst) = (Vec::new(), Vec::new(), 0.0f64);
            for seed in 0..10 {
                let start = Instant::now();
                let split = split_edges(&a, 0.05, 0.10, seed)?;
                let train_graph = split.train_graph();
                let model =
                    Trainer::new(x, &train_graph, None, cora_config(kind, seed))?.run(&mut Default::default())?;
                let m = link_prediction_eval(&model, x, &split, ScoreMode::PosteriorMean)?;
                aucs.push(m["test_auc"]);
                aps.push(m["test_ap"]);
                worst = worst.max(start.elapsed().as_secs_f64());
            }
            let (auc, ap) = (mean(&aucs), mean(&aps));
            ok &= auc >= 0.92 && ap >= 0.92 && worst < 45.0 * 60.0;
            lines.push(format!(
                "{kind:?} AUC {:.1} AP {:.1} (slowest seed {worst:.0}s)",
                100.0 * auc,
                100.0 * ap
            ));
        }
        Ok(format!(
            "{}{}",
            if ok { "" } else { "below target: " },
            lines.join(", ")
        ))
    };
    match run() {
        Ok(d) => Outcome::check(!d.starts_with("below"), d),
        Err(e) => Outcome::check(false, format!("error: {e}")),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn cora_split(corpus: &Corpus) -> wgae::Result<(LabelSplit, Vec<Option<usize>>, usize)> {
    let labels = corpus.labels.as_ref().expect("cora content carries labels");
    let split = label_split(&labels.labels, 20, 500, 1000, 0)?;
    Ok((split, labels.labels.clone(), labels.num_classes))
}

fn c8() -> Outcome {
    let Some(dir) = cora_dir() else {
        return Outcome::skip("WGAE_CORA_DIR not set");
    };
    let run = || -> wgae::Result<(f64, f64)> {
        let (corpus, a) = load_cora(&dir)?;
        let (split, labels, classes) = cora_split(&corpus)?;
        let visible = split.training_labels(&labels);
        let mut acc = Vec::new();
        for kind in [EncoderKind::Wgcae, EncoderKind::Wgaae] {
            let mut config = cora_config(kind, 0);
            config.supervised = true;
            let model =
                Trainer::new(&corpus.features, &a, Some((&visible, classes)), config)?.run(&mut Default::default())?;
            let pred = predict_classes(&model, &corpus.features, &a)?;
            acc.push(accuracy_on(&pred, &labels, &split.test)?);
        }
        Ok((acc[0], acc[1]))
    };
    match run() {
        Ok((gcn, gat)) => Outcome::check(
            gcn >= 0.79 && gat >= 0.81,
            format!("WGCAE {:.1} (≥ 79.0), WGAAE {:.1} (≥ 81.0)", 100.0 * gcn, 100.0 * gat),
        ),
        Err(e) => Outcome::check(false, format!("error: {e}")),
    }
}

/// Median per-iteration wall time of the scalable trainer at N and 2N nodes.
fn scalable_iteration_times() -> wgae::Result<(f64, f64)> {
    let mut medians = Vec::new();
    for n in [2000, 4000] {
        let data = synthetic_sparse(n, 60, 5 * n, 31);
        let config = TrainConfig {
            widths: vec![16, 8],
            trainer: TrainerKind::Scalable,
            subset_size: 100,
            seed: 2,
            ..Default::default()
        };
        let mut trainer = Trainer::new(&data.0, &data.1, None, config)?;
        for _ in 0..5 {
            trainer.step()?;
        }
        let mut times: Vec<f64> = (0..40)
            .map(|_| {
                let start = Instant::now();
                trainer.step().map(|_| start.elapsed().as_secs_f64())
            })
            .collect::<wgae::Result<_>>()?;
        times.sort_by(f64::total_cmp);
        medians.push(times[times.len() / 2]);
    }
    Ok((medians[0], medians[1]))
}

/// Random sparse graph with degree about `2 * edges / n` and short documents.
fn synthetic_sparse(n: usize, v: usize, edges: usize, seed: u64) -> (SparseCountMatrix, AdjacencyGraph) {
    let mut rng = wgae::stochastic::RngStream::new(seed, 0);
    let mut pick = |m: usize| (rng.open01() * m as f64) as usize % m;
    let mut triples = Vec::new();
    for j in 0..n {
        for _ in 0..5 {
            triples.push((j, pick(v), 1u32));
        }
    }
    let mut merged: std::collections::BTreeMap<(usize, usize), u32> = Default::default();
    for (j, w, c) in triples {
        *merged.entry((j, w)).or_default() += c;
    }
    let x = SparseCountMatrix::new(n, v, merged.into_iter().map(|((j, w), c)| (j, w, c)).collect()).expect("counts");
    let mut pairs = std::collections::BTreeSet::new();
    while pairs.len() < edges {
        let (i, j) = (pick(n), pick(n));
        if i != j {
            pairs.insert((i.min(j), i.max(j)));
        }
    }
    let a = AdjacencyGraph::from_edges(n, pairs).expect("graph");
    (x, a)
}

/// Allowed ratio of per-iteration times when N doubles, for timer noise.
const TIME_GROWTH_ALLOWANCE: f64 = 1.25;

fn c9() -> Outcome {
    let (small, large) = match scalable_iteration_times() {
        Ok(t) => t,
        Err(e) => return Outcome::check(false, format!("error: {e}")),
    };
    let ratio = large / small;
    let synthetic_ok = ratio <= TIME_GROWTH_ALLOWANCE;
    let mut detail = format!(
        "per-iteration {:.2}ms at N, {:.2}ms at 2N (ratio {ratio:.2}, ≤ {TIME_GROWTH_ALLOWANCE})",
        1e3 * small,
        1e3 * large
    );
    let Some(dir) = cora_dir() else {
        return Outcome {
            passed: if synthetic_ok { None } else { Some(false) },
            detail: format!("{detail}; Cora parity not run, WGAE_CORA_DIR not set"),
        };
    };
    match cora_parity(&dir) {
        Ok((ok, d)) => {
            detail.push_str("; ");
            detail.push_str(&d);
            Outcome::check(synthetic_ok && ok, detail)
        }
        Err(e) => Outcome::check(false, format!("{detail}; error: {e}")),
    }
}

/// Accuracy curve of one trainer, evaluated every `every` iterations.
fn accuracy_curve(
    corpus: &Corpus,
    a: &AdjacencyGraph,
    split: &LabelSplit,
    labels: &[Option<usize>],
    classes: usize,
    config: TrainConfig,
    every: usize,
) -> wgae::Result<Vec<(f64, f64)>> {
    let visible = split.training_labels(labels);
    let iterations = config.iterations;
    let mut trainer = Trainer::new(&corpus.features, a, Some((&visible, classes)), config)?;
    let mut elapsed = 0.0;
    let mut curve = Vec::new();
    for it in 1..=iterations {
        let start = Instant::now();
        trainer.step()?;
        elapsed += start.elapsed().as_secs_f64();
        if it % every == 0 || it == iterations {
            let pred = predict_classes(&trainer.model, &corpus.features, a)?;
            curve.push((elapsed, accuracy_on(&pred, labels, &split.test)?));
        }
    }
    Ok(curve)
}

fn time_to_fraction(curve: &[(f64, f64)], frac: f64) -> f64 {
    let target = frac * curve.last().unwrap().1;
    curve.iter().find(|p| p.1 >= target).unwrap().0
}

fn cora_parity(dir: &std::path::Path) -> wgae::Result<(bool, String)> {
    let (corpus, a) = load_cora(dir)?;
    let (split, labels, classes) = cora_split(&corpus)?;
    let mut full = cora_config(EncoderKind::Wgcae, 0);
    full.supervised = true;
    let mut scalable = full.clone();
    scalable.trainer = TrainerKind::Scalable;
    scalable.subset_size = 100;
    let f = accuracy_curve(&corpus, &a, &split, &labels, classes, full, 25)?;
    let s = accuracy_curve(&corpus, &a, &split, &labels, classes, scalable, 25)?;
    let (fa, sa) = (f.last().unwrap().1, s.last().unwrap().1);
    let (ft, st) = (time_to_fraction(&f, 0.9), time_to_fraction(&s, 0.9));
    let ok = (fa - sa).abs() <= 0.02 && st < ft;
    Ok((
        ok,
        format!(
            "Cora accuracy full {:.1} vs scalable {:.1}; time to 90% {ft:.1}s vs {st:.1}s",
            100.0 * fa,
            100.0 * sa
        ),
    ))
}

/// Least-squares slope of ln(time) on ln(edges).
fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (mx, my) = (mean(&xs), mean(&ys));
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

fn c10() -> Outcome {
    let run = || -> wgae::Result<(f64, Vec<(f64, f64)>)> {
        let n = 2000;
        let base = 50_000;
        let mut points = Vec::new();
        for mult in [1, 2, 4, 8] {
            let (x, a) = synthetic_sparse(n, 20, base * mult, 41);
            let mut state = DecoderState::init(&x, &[16], DecoderHyper::defaults(&[16]), 1)?;
            gibbs_sweep(&mut state, &x, &a)?;
            let mut times = Vec::new();
            for _ in 0..7 {
                let start = Instant::now();
                gibbs_sweep(&mut state, &x, &a)?;
                times.push(start.elapsed().as_secs_f64());
            }
            times.sort_by(f64::total_cmp);
            points.push((a.num_edges() as f64, times[times.len() / 2]));
        }
        Ok((log_log_slope(&points), points))
    };
    match run() {
        Ok((slope, points)) => {
            let pts: Vec<String> = points.iter().map(|(e, t)| format!("{e:.0}:{:.1}ms", 1e3 * t)).collect();
            Outcome::check(
                (0.8..=1.2).contains(&slope),
                format!("slope {slope:.3} in [0.8, 1.2]; {}", pts.join(" ")),
            )
        }
        Err(e) => Outcome::check(false, format!("error: {e}")),
    }
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "conjugacy and conservation suite", c1),
        (2, "sampler Monte-Carlo suite", c2),
        (3, "gradient suite", c3),
        (4, "Weibull-gamma KL oracle", c4),
        (5, "Gibbs posterior recovery", c5),
        (6, "self-consistency link prediction", c6),
        (7, "Cora link prediction", c7),
        (8, "Cora node classification", c8),
        (9, "scalable vs full-batch parity", c9),
        (10, "Gibbs sweep cost linear in edges", c10),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let outcome = run();
        let tag = match outcome.passed {
            Some(true) => "PASS",
            Some(false) => {
                failed += 1;
                "FAIL"
            }
            None => "SKIP",
        };
        println!("{tag} criterion {id:>2}: {name} | {}", outcome.detail);
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
