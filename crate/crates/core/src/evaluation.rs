//! Link prediction, clustering and classification metrics.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::encoders::{infer_posterior, posterior_mean, sample_theta_stack, EncoderNoise, GraphInput, PosteriorVars};
use crate::error::{invalid, Error, Result};
use crate::gpgbn::edge_probability_nodes;
use crate::graph_data::{AdjacencyGraph, EdgeSplit, SparseCountMatrix};
use crate::stochastic::{tags, RngStream};
use crate::training::TrainedModel;

/// AUC with midranks for ties and step-interpolated average precision.
pub fn auc_ap(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores, {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid!("scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(invalid!(
            "need at least one positive and one negative, got {pos} and {neg}"
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&p| labels[p]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    let auc = (rank_sum - p * (p + 1.0) / 2.0) / (p * n);

    // descending thresholds; tied scores enter together
    let mut ap = 0.0;
    let (mut tp, mut seen, mut last_recall) = (0usize, 0usize, 0.0);
    let mut k = order.len();
    while k > 0 {
        let mut start = k - 1;
        while start > 0 && scores[order[start - 1]] == scores[order[k - 1]] {
            start -= 1;
        }
        for &q in &order[start..k] {
            seen += 1;
            tp += labels[q] as usize;
        }
        let recall = tp as f64 / p;
        ap += (recall - last_recall) * tp as f64 / seen as f64;
        last_recall = recall;
        k = start;
    }
    Ok((auc, ap))
}

/// Fraction of matches under the best one-to-one map of clusters to labels.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Dimension(
            "cluster and label vectors must be equal and nonempty".into(),
        ));
    }
    let rows = pred.iter().max().unwrap() + 1;
    let cols = truth.iter().max().unwrap() + 1;
    let size = rows.max(cols);
    let mut table = Matrix::new(size, size, 0i64);
    for (&p, &t) in pred.iter().zip(truth) {
        table[(p, t)] += 1;
    }
    let (matched, _) = kuhn_munkres(&table);
    Ok(matched as f64 / pred.len() as f64)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| c as f64 / n)
        .map(|p| -p * p.ln())
        .sum()
}

/// Mutual information normalized by the arithmetic mean of the entropies.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension("label vectors must be equal and nonempty".into()));
    }
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ca: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let (ha, hb) = (entropy(ca.values().copied(), n), entropy(cb.values().copied(), n));
    if ha + hb == 0.0 {
        return Ok(1.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            pxy * (pxy * n * n / (ca[&x] as f64 * cb[&y] as f64)).ln()
        })
        .sum();
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

/// Labels and inertia of one k-means run.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub assignment: Vec<usize>,
    pub centers: Array2<f64>,
    pub inertia: f64,
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_once(data: &Array2<f64>, k: usize, max_iter: usize, rng: &mut RngStream) -> Option<KMeansFit> {
    let n = data.nrows();
    let mut centers = Array2::zeros((k, data.ncols()));
    let first = (rng.open01() * n as f64) as usize % n;
    centers.row_mut(0).assign(&data.row(first));
    let mut d2: Vec<f64> = data.rows().into_iter().map(|r| sq_dist(r, centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.open01() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        } else {
            (rng.open01() * n as f64) as usize % n
        };
        centers.row_mut(c).assign(&data.row(pick));
        for (i, r) in data.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, centers.row(c)));
        }
    }
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let next: Vec<usize> = (0..n)
            .into_par_iter()
            .map(|i| {
                (0..k)
                    .map(|c| (c, sq_dist(data.row(i), centers.row(c))))
                    .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
                    .unwrap()
                    .0
            })
            .collect();
        let changed = next != assignment;
        assignment = next;
        let mut sums = Array2::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            sums.row_mut(c).scaled_add(1.0, &data.row(i));
            counts[c] += 1;
        }
        if counts.contains(&0) {
            return None;
        }
        for c in 0..k {
            centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
        }
        if !changed {
            break;
        }
    }
    let inertia = assignment
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(data.row(i), centers.row(c)))
        .sum();
    Some(KMeansFit {
        assignment,
        centers,
        inertia,
    })
}

/// k-means with k-means++ seeding; the best of `restarts` runs by inertia.
/// Runs that end with an empty cluster are discarded and redrawn.
pub fn kmeans(data: &Array2<f64>, k: usize, restarts: usize, seed: u64) -> Result<KMeansFit> {
    let n = data.nrows();
    if k < 2 || k > n {
        return Err(invalid!("cannot form {k} clusters from {n} points"));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("representations must be finite"));
    }
    let mut best: Option<KMeansFit> = None;
    let mut done = 0;
    let mut attempt = 0u64;
    while done < restarts.max(1) {
        if attempt > 20 * restarts.max(1) as u64 {
            return Err(Error::Numerical("k-means kept producing empty clusters".into()));
        }
        let mut rng = RngStream::derive(seed, &[tags::KMEANS, attempt]);
        attempt += 1;
        if let Some(fit) = kmeans_once(data, k, 300, &mut rng) {
            done += 1;
            if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
                best = Some(fit);
            }
        }
    }
    Ok(best.expect("at least one run"))
}

/// Concatenates every layer's representation column-wise.
pub fn concat_layers(theta: &[Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = theta.iter().map(|t| t.view()).collect();
    ndarray::concatenate(Axis(1), &views).expect("layers share the node count")
}

/// k-means on the concatenated layers, scored by ACC and NMI.
pub fn cluster_nodes(theta: &[Array2<f64>], num_clusters: usize, labels: &[usize], seed: u64) -> Result<(f64, f64)> {
    let data = concat_layers(theta);
    if data.nrows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} rows, {} labels",
            data.nrows(),
            labels.len()
        )));
    }
    let fit = kmeans(&data, num_clusters, 10, seed)?;
    Ok((
        clustering_accuracy(&fit.assignment, labels)?,
        nmi(&fit.assignment, labels)?,
    ))
}

/// How latent representations are obtained for scoring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// Weibull posterior mean λΓ(1 + 1/k), taken top-down.
    #[default]
    PosteriorMean,
    /// Average of scores over this many posterior draws.
    Samples(usize),
}

/// Posterior-mean representations of every node given the graph the
/// encoder may see.
pub fn model_theta(model: &TrainedModel, x: &SparseCountMatrix, a: &AdjacencyGraph) -> Result<Vec<Array2<f64>>> {
    let input = GraphInput::new(x, a)?;
    let post = infer_posterior(&model.encoder, &input)?;
    posterior_mean(&post, &model.decoder.phi, &model.decoder.hyper.gamma)
}

/// Posterior draws of the representations for averaged scoring.
pub fn model_theta_samples(
    model: &TrainedModel,
    x: &SparseCountMatrix,
    a: &AdjacencyGraph,
    draws: usize,
    seed: u64,
) -> Result<Vec<Vec<Array2<f64>>>> {
    let input = GraphInput::new(x, a)?;
    let post = infer_posterior(&model.encoder, &input)?;
    (0..draws as u64)
        .map(|d| {
            let mut tape = Tape::new();
            let vars = PosteriorVars::from_values(&mut tape, &post);
            let noise = EncoderNoise::draw(&model.encoder, &input, seed, u64::MAX - d);
            let th = sample_theta_stack(
                &mut tape,
                &vars,
                &model.decoder.phi,
                &model.decoder.hyper.gamma,
                &noise.theta,
            )?;
            Ok(th.theta.iter().map(|&v| tape.value(v).clone()).collect())
        })
        .collect()
}

/// One metric over seeds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl MetricValue {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { values, mean, std }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub metrics: BTreeMap<String, MetricValue>,
    pub seeds: Vec<u64>,
    pub wall_seconds: f64,
}

impl MetricsReport {
    /// Aggregates per-seed metric maps into mean ± std.
    pub fn from_runs(task: &str, seeds: Vec<u64>, runs: &[BTreeMap<String, f64>], wall_seconds: f64) -> Self {
        let mut metrics: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for run in runs {
            for (k, &v) in run {
                metrics.entry(k.clone()).or_default().push(v);
            }
        }
        Self {
            task: task.to_string(),
            metrics: metrics
                .into_iter()
                .map(|(k, v)| (k, MetricValue::from_values(v)))
                .collect(),
            seeds,
            wall_seconds,
        }
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).map(|m| m.mean)
    }

    /// Human-readable table, values in percent.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{} ({} seed(s), {:.1}s)\n",
            self.task,
            self.seeds.len(),
            self.wall_seconds
        );
        for (name, m) in &self.metrics {
            if m.values.len() > 1 {
                out.push_str(&format!("  {name:<12} {:6.2} ± {:.2}\n", 100.0 * m.mean, 100.0 * m.std));
            } else {
                out.push_str(&format!("  {name:<12} {:6.2}\n", 100.0 * m.mean));
            }
        }
        out
    }
}

/// Fails if any held-out pair is present in the training graph.
pub fn check_split_leakage(split: &EdgeSplit) -> Result<()> {
    let train = split.train_graph();
    for (name, pairs) in [
        ("validation edge", &split.val_edges),
        ("test edge", &split.test_edges),
        ("validation non-edge", &split.val_nonedges),
        ("test non-edge", &split.test_nonedges),
    ] {
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| train.contains(i, j)) {
            return Err(Error::Leakage(format!("{name} ({i}, {j}) is in the training graph")));
        }
    }
    Ok(())
}

/// Edge probabilities for pairs under given representations.
pub fn score_pairs(u: &[Array1<f64>], theta: &[Array2<f64>], pairs: &[(usize, usize)]) -> Vec<f64> {
    pairs
        .par_iter()
        .map(|&(i, j)| edge_probability_nodes(u, theta, i, j))
        .collect()
}

/// AUC/AP on validation and test pairs; the encoder sees only training edges.
pub fn link_prediction_eval(
    model: &TrainedModel,
    x: &SparseCountMatrix,
    split: &EdgeSplit,
    mode: ScoreMode,
) -> Result<BTreeMap<String, f64>> {
    check_split_leakage(split)?;
    let train = split.train_graph();
    let u = &model.decoder.u;
    let stacks = match mode {
        ScoreMode::PosteriorMean => vec![model_theta(model, x, &train)?],
        ScoreMode::Samples(d) => model_theta_samples(model, x, &train, d.max(1), split.seed)?,
    };
    let mut out = BTreeMap::new();
    for (name, pos, neg) in [
        ("val", &split.val_edges, &split.val_nonedges),
        ("test", &split.test_edges, &split.test_nonedges),
    ] {
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let pairs: Vec<(usize, usize)> = pos.iter().chain(neg.iter()).copied().collect();
        let mut scores = vec![0.0; pairs.len()];
        for theta in &stacks {
            for (s, v) in scores.iter_mut().zip(score_pairs(u, theta, &pairs)) {
                *s += v / stacks.len() as f64;
            }
        }
        let labels: Vec<bool> = (0..pairs.len()).map(|i| i < pos.len()).collect();
        let (auc, ap) = auc_ap(&scores, &labels)?;
        out.insert(format!("{name}_auc"), auc);
        out.insert(format!("{name}_ap"), ap);
    }
    Ok(out)
}

/// Class predictions from the classifier head on posterior-mean θ^(1).
pub fn predict_classes(model: &TrainedModel, x: &SparseCountMatrix, a: &AdjacencyGraph) -> Result<Vec<usize>> {
    let w = model
        .classifier
        .as_ref()
        .ok_or_else(|| invalid!("model has no classifier head; train with supervised = true"))?;
    let theta = model_theta(model, x, a)?;
    let logits = theta[0].dot(w);
    Ok(logits
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(c, _)| c)
                .unwrap()
        })
        .collect())
}

/// Accuracy of `predictions` on `nodes`.
pub fn accuracy_on(predictions: &[usize], labels: &[Option<usize>], nodes: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        return Err(invalid!("no evaluation nodes"));
    }
    let mut hit = 0usize;
    for &j in nodes {
        let y = labels
            .get(j)
            .copied()
            .flatten()
            .ok_or_else(|| invalid!("node {j} has no label"))?;
        hit += (predictions[j] == y) as usize;
    }
    Ok(hit as f64 / nodes.len() as f64)
}

/// Held-out classification accuracy.
pub fn classify_nodes(
    model: &TrainedModel,
    x: &SparseCountMatrix,
    a: &AdjacencyGraph,
    labels: &[Option<usize>],
    test_nodes: &[usize],
) -> Result<f64> {
    let pred = predict_classes(model, x, a)?;
    accuracy_on(&pred, labels, test_nodes)
}

/// Node sets for semi-supervised classification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl LabelSplit {
    /// Labels visible during training; everything else is hidden.
    pub fn training_labels(&self, labels: &[Option<usize>]) -> Vec<Option<usize>> {
        let mut out = vec![None; labels.len()];
        for &j in &self.train {
            out[j] = labels[j];
        }
        out
    }
}

/// `per_class` training nodes per class, then `val` and `test` nodes from the
/// remaining labeled nodes, in a seeded random order.
pub fn label_split(
    labels: &[Option<usize>],
    per_class: usize,
    val: usize,
    test: usize,
    seed: u64,
) -> Result<LabelSplit> {
    let mut order: Vec<usize> = (0..labels.len()).filter(|&j| labels[j].is_some()).collect();
    let mut rng = RngStream::derive(seed, &[tags::SPLIT, 1]);
    for i in (1..order.len()).rev() {
        let j = (rng.open01() * (i + 1) as f64) as usize % (i + 1);
        order.swap(i, j);
    }
    let mut taken: BTreeMap<usize, usize> = BTreeMap::new();
    let mut train = Vec::new();
    let mut rest = Vec::new();
    for j in order {
        let y = labels[j].unwrap();
        let c = taken.entry(y).or_default();
        if *c < per_class {
            *c += 1;
            train.push(j);
        } else {
            rest.push(j);
        }
    }
    if rest.len() < val + test {
        return Err(invalid!(
            "only {} labeled nodes remain for {val} validation and {test} test nodes",
            rest.len()
        ));
    }
    let test_nodes = rest[val..val + test].to_vec();
    rest.truncate(val);
    train.sort_unstable();
    Ok(LabelSplit {
        train,
        val: rest,
        test: test_nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        let (auc, ap) = auc_ap(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!((auc, ap), (1.0, 1.0));
        let (auc, _) = auc_ap(&[0.5; 6], &[true, false, true, false, true, false]).unwrap();
        assert_eq!(auc, 0.5);
        let (auc, ap) = auc_ap(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(auc, 0.75);
        // ranks: 0.9(+), 0.6(−), 0.4(+): precision 1 at recall 1/2, 2/3 at recall 1
        assert_relative_eq!(ap, 0.5 + 0.5 * 2.0 / 3.0, epsilon = 1e-15);
        assert!(auc_ap(&[0.1, 0.2], &[true, true]).is_err());
    }

    proptest! {
        #[test]
        fn auc_matches_brute_force(
            data in proptest::collection::vec((0u8..5, any::<bool>()), 2..12)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 4.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let (auc, ap) = auc_ap(&scores, &labels).unwrap();
            prop_assert!((auc - brute_auc(&scores, &labels)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ap));
        }

        #[test]
        fn acc_is_permutation_invariant_and_nmi_symmetric(
            pairs in proptest::collection::vec((0usize..4, 0usize..3), 1..40),
            perm_seed in 0u64..1000,
        ) {
            let pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let truth: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let mut perm: Vec<usize> = (0..4).collect();
            let mut rng = RngStream::new(perm_seed, 0);
            for i in (1..4).rev() {
                let j = (rng.open01() * (i + 1) as f64) as usize % (i + 1);
                perm.swap(i, j);
            }
            let permuted: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
            let a = clustering_accuracy(&pred, &truth).unwrap();
            prop_assert!((a - clustering_accuracy(&permuted, &truth).unwrap()).abs() < 1e-15);
            prop_assert!((nmi(&pred, &truth).unwrap() - nmi(&truth, &pred).unwrap()).abs() < 1e-12);
            prop_assert!((nmi(&pred, &truth).unwrap() - nmi(&permuted, &truth).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn clustering_examples() {
        let truth = [0, 0, 1, 1, 2, 2];
        let pred = [2, 2, 0, 0, 1, 1];
        assert_eq!(clustering_accuracy(&pred, &truth).unwrap(), 1.0);
        assert_relative_eq!(nmi(&pred, &truth).unwrap(), 1.0, epsilon = 1e-12);
        let one = [0, 0, 0, 0];
        let two = [0, 0, 1, 1];
        assert_eq!(clustering_accuracy(&one, &two).unwrap(), 0.5);
        assert_eq!(nmi(&one, &two).unwrap(), 0.0);
        // contingency [[2,0],[1,1]]
        let pred = [0, 0, 1, 1];
        let truth = [0, 0, 0, 1];
        assert_eq!(clustering_accuracy(&pred, &truth).unwrap(), 0.75);
        let (h_pred, h_truth) = (2f64.ln(), -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln()));
        let mi = 0.5 * (0.5f64 / (0.5 * 0.75)).ln()
            + 0.25 * (0.25f64 / (0.5 * 0.75)).ln()
            + 0.25 * (0.25f64 / (0.5 * 0.25)).ln();
        assert_relative_eq!(
            nmi(&pred, &truth).unwrap(),
            2.0 * mi / (h_pred + h_truth),
            epsilon = 1e-12
        );
    }

    #[test]
    fn kmeans_separates_blobs() {
        let mut rng = RngStream::new(3, 3);
        let data = Array2::from_shape_fn((60, 2), |(i, d)| {
            (i / 20) as f64 * 5.0 * (d as f64 + 1.0) + rng.normal() * 0.2
        });
        let truth: Vec<usize> = (0..60).map(|i| i / 20).collect();
        let fit = kmeans(&data, 3, 10, 1).unwrap();
        assert_eq!(clustering_accuracy(&fit.assignment, &truth).unwrap(), 1.0);
        assert_eq!(fit, kmeans(&data, 3, 10, 1).unwrap());
        assert!(kmeans(&data, 1, 10, 1).is_err());
    }

    #[test]
    fn leakage_is_detected() {
        let a = AdjacencyGraph::from_edges(6, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)]).unwrap();
        let mut split = crate::graph_data::split_edges(&a, 0.15, 0.3, 2).unwrap();
        check_split_leakage(&split).unwrap();
        split.test_edges.push(split.train_edges[0]);
        assert!(matches!(check_split_leakage(&split), Err(Error::Leakage(_))));
    }

    #[test]
    fn accuracy_examples() {
        let labels = vec![Some(2), Some(2), None, Some(2)];
        assert_eq!(accuracy_on(&[2, 2, 0, 2], &labels, &[0, 1, 3]).unwrap(), 1.0);
        assert!(accuracy_on(&[2, 2, 0, 2], &labels, &[2]).is_err());
        let mut rng = RngStream::new(1, 2);
        let n = 20_000;
        let labels: Vec<Option<usize>> = (0..n).map(|_| Some((rng.open01() * 7.0) as usize)).collect();
        let pred: Vec<usize> = (0..n).map(|_| (rng.open01() * 7.0) as usize).collect();
        let nodes: Vec<usize> = (0..n).collect();
        assert!((accuracy_on(&pred, &labels, &nodes).unwrap() - 1.0 / 7.0).abs() < 0.01);
    }

    #[test]
    fn label_split_sizes() {
        let labels: Vec<Option<usize>> = (0..100).map(|j| if j % 10 == 9 { None } else { Some(j % 3) }).collect();
        let s = label_split(&labels, 5, 20, 30, 4).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (15, 20, 30));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 65);
        assert!(all.iter().all(|&j| labels[j].is_some()));
        let masked = s.training_labels(&labels);
        assert_eq!(masked.iter().flatten().count(), 15);
    }

    #[test]
    fn report_aggregates() {
        let runs = vec![
            BTreeMap::from([("auc".to_string(), 0.9)]),
            BTreeMap::from([("auc".to_string(), 0.8)]),
        ];
        let r = MetricsReport::from_runs("link", vec![1, 2], &runs, 1.0);
        assert_relative_eq!(r.get("auc").unwrap(), 0.85);
        assert_relative_eq!(r.metrics["auc"].std, (0.005f64).sqrt());
        assert!(r.to_table().contains("85.00 ± 7.07"));
    }
}
