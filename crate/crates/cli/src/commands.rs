use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use wgae::evaluation::{
    accuracy_on, auc_ap, cluster_nodes, label_split, link_prediction_eval, model_theta, predict_classes, score_pairs,
    MetricsReport,
};
use wgae::export::{export_subnetwork_with, export_topic_tree, TopicTree};
use wgae::gpgbn::{generate_from_state, sample_prior_state, scale_u_to_expected_edges, DecoderHyper};
use wgae::graph_data::{split_edges, AdjacencyGraph, CorpusFormat, EdgeSplit, LabelVector};
use wgae::selftest;
use wgae::training::{train, TrainOutputs, TrainedModel, TrainerKind};

use crate::config::RunConfig;
use crate::dataset::{Dataset, Recipe};
use crate::error::CliError;
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::{
    Cli, Command, EvalCommand, ExportCommand, FormatArg, GenerateArgs, IngestArgs, ModelRunArgs, ReplayArgs, RunArgs,
    SelftestArgs, SubnetworkArgs, TopicTreeArgs, DATA_DIR_ENV,
};

pub const DATASET_FILE: &str = "dataset.json";
pub const MODEL_FILE: &str = "model.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const RUNS_FILE: &str = "runs.json";

pub fn dispatch(command: Command, argv: Vec<String>) -> Result<(), CliError> {
    match command {
        Command::Ingest(a) => ingest(a, argv),
        Command::Train(a) => train_cmd(a, argv),
        Command::Eval(EvalCommand::LinkPred(a)) => eval_link_pred(a, argv),
        Command::Eval(EvalCommand::Cluster(a)) => eval_cluster(a, argv),
        Command::Eval(EvalCommand::Classify(a)) => eval_classify(a, argv),
        Command::Export(ExportCommand::TopicTree(a)) => export_tree(a, argv),
        Command::Export(ExportCommand::Subnetwork(a)) => export_subnet(a, argv),
        Command::Selftest(a) => selftest_cmd(a, argv),
        Command::Generate(a) => generate(a, argv),
        Command::Replay(a) => replay(a),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, body).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_file(path, serde_json::to_string_pretty(value)?)
}

/// Relative paths that do not exist are looked up in the data directory.
fn resolve_input(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
            let alt = Path::new(&dir).join(path);
            if alt.exists() {
                return alt;
            }
        }
    }
    path.to_path_buf()
}

fn load_dataset(path: &Path, manifest: &mut RunManifest) -> Result<Dataset, CliError> {
    let path = resolve_input(path);
    let ds = Dataset::load(&path)?;
    manifest.add_input(&path)?;
    Ok(ds)
}

fn load_model(path: &Path, manifest: &mut RunManifest) -> Result<TrainedModel, CliError> {
    let path = resolve_input(path);
    let model = TrainedModel::load(&path)?;
    manifest.add_input(&path)?;
    Ok(model)
}

fn resolve_config(args: &RunArgs, manifest: &mut RunManifest) -> Result<RunConfig, CliError> {
    let path = args.config.as_deref().map(resolve_input);
    let mut config = RunConfig::resolve(path.as_deref(), &args.overrides)?;
    if let Some(s) = args.seed {
        config.train.seed = s;
    }
    if let Some(seeds) = &args.seeds {
        if seeds.is_empty() {
            return Err(CliError::Usage("--seeds must not be empty".into()));
        }
        config.eval.seeds = seeds.clone();
    }
    if let Some(p) = &path {
        manifest.add_input(p)?;
    }
    manifest.config = Some(config.clone());
    manifest.seed = Some(config.train.seed);
    Ok(config)
}

fn ingest(args: IngestArgs, argv: Vec<String>) -> Result<(), CliError> {
    let mut recipe = match &args.recipe {
        Some(p) => Recipe::load(&resolve_input(p))?,
        None => Recipe::default(),
    };
    if let Some(v) = args.name {
        recipe.name = v;
    }
    if let Some(v) = args.corpus {
        recipe.corpus = v;
    }
    if let Some(v) = args.format {
        recipe.format = Some(match v {
            FormatArg::TsvTriples => CorpusFormat::TsvTriples,
            FormatArg::CoraContent => CorpusFormat::CoraContent,
        });
    }
    if let Some(v) = args.edges {
        recipe.edges = Some(v);
        recipe.cosine_tau = None;
    }
    if let Some(v) = args.cosine_tau {
        recipe.cosine_tau = Some(v);
        recipe.edges = None;
    }
    if let Some(v) = args.vocab {
        recipe.vocab = Some(v);
    }
    if let Some(v) = args.labels {
        recipe.labels = Some(v);
    }
    if recipe.corpus.as_os_str().is_empty() {
        return Err(CliError::Usage("a corpus is required (--corpus or a recipe)".into()));
    }
    if recipe.name.is_empty() {
        recipe.name = recipe
            .corpus
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_default();
    }
    let data_dir = args
        .data_dir
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let ds = recipe.build(&data_dir)?;
    let mut manifest = RunManifest::new(argv, None, None);
    if let Some(p) = &args.recipe {
        manifest.add_input(&resolve_input(p))?;
    }
    for p in recipe.inputs(&data_dir) {
        manifest.add_input(&p)?;
    }
    create_dir(&args.out)?;
    ds.save(&args.out.join(DATASET_FILE))?;
    manifest.add_artifact(&args.out, DATASET_FILE, true)?;
    manifest.write(&args.out)?;
    println!(
        "{}: {} nodes, {} terms, {} tokens, {} edges{}",
        ds.name,
        ds.features.num_nodes(),
        ds.features.vocab_size(),
        ds.features.total(),
        ds.graph.num_edges(),
        ds.labels
            .as_ref()
            .map_or(String::new(), |l| format!(", {} classes", l.num_classes))
    );
    Ok(())
}

/// Labels visible to a supervised run; the rest stay hidden.
fn training_labels(ds: &Dataset, config: &RunConfig) -> Result<Option<LabelVector>, CliError> {
    if !config.train.supervised {
        return Ok(None);
    }
    let l = ds.labels.as_ref().ok_or_else(|| {
        CliError::Data(format!(
            "supervised training needs labels; dataset {} has none",
            ds.name
        ))
    })?;
    let e = &config.eval;
    let split = label_split(&l.labels, e.per_class, e.val_nodes, e.test_nodes, e.split_seed)?;
    Ok(Some(LabelVector {
        labels: split.training_labels(&l.labels),
        ..l.clone()
    }))
}

fn fit(
    ds: &Dataset,
    graph: &AdjacencyGraph,
    labels: Option<&LabelVector>,
    config: &RunConfig,
    seed: u64,
    out: &mut TrainOutputs,
) -> Result<TrainedModel, CliError> {
    let mut tc = config.train.clone();
    tc.seed = seed;
    let l = labels.map(|l| (l.labels.as_slice(), l.num_classes));
    Ok(train(&ds.features, graph, l, tc, out)?)
}

fn train_cmd(args: RunArgs, argv: Vec<String>) -> Result<(), CliError> {
    let mut manifest = RunManifest::new(argv, None, None);
    let config = resolve_config(&args, &mut manifest)?;
    let ds = load_dataset(&args.data, &mut manifest)?;
    let labels = training_labels(&ds, &config)?;
    create_dir(&args.out)?;
    let log_path = args.out.join(TRAIN_LOG_FILE);
    let mut log =
        BufWriter::new(File::create(&log_path).map_err(|e| CliError::Data(format!("{}: {e}", log_path.display())))?);
    let checkpoint = args.out.join(MODEL_FILE);
    let mut outputs = TrainOutputs {
        checkpoint: Some(&checkpoint),
        log: Some(&mut log),
    };
    let start = Instant::now();
    let result = fit(
        &ds,
        &ds.graph,
        labels.as_ref(),
        &config,
        config.train.seed,
        &mut outputs,
    );
    log.flush()?;
    let model = result?;
    manifest.add_artifact(&args.out, MODEL_FILE, true)?;
    manifest.add_artifact(&args.out, TRAIN_LOG_FILE, false)?;
    manifest.write(&args.out)?;
    let last = model.log.last();
    println!(
        "trained {} iterations in {:.1}s, final ELBO {}",
        model.config.iterations,
        start.elapsed().as_secs_f64(),
        last.map_or("n/a".to_string(), |r| format!("{:.4}", r.elbo))
    );
    Ok(())
}

/// Node representations used for scoring: encoder posterior means, or the
/// decoder's own θ for models trained by Gibbs sampling.
fn node_theta(model: &TrainedModel, ds: &Dataset, graph: &AdjacencyGraph) -> Result<Vec<Array2<f64>>, CliError> {
    if model.config.trainer == TrainerKind::Gibbs {
        return Ok(model.decoder.theta.clone());
    }
    Ok(model_theta(model, &ds.features, graph)?)
}

fn link_metrics(
    model: &TrainedModel,
    ds: &Dataset,
    split: &EdgeSplit,
    config: &RunConfig,
) -> Result<BTreeMap<String, f64>, CliError> {
    if model.config.trainer != TrainerKind::Gibbs {
        return Ok(link_prediction_eval(model, &ds.features, split, config.eval.score)?);
    }
    let theta = &model.decoder.theta;
    let mut out = BTreeMap::new();
    for (name, pos, neg) in [
        ("val", &split.val_edges, &split.val_nonedges),
        ("test", &split.test_edges, &split.test_nonedges),
    ] {
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let pairs: Vec<(usize, usize)> = pos.iter().chain(neg.iter()).copied().collect();
        let labels: Vec<bool> = (0..pairs.len()).map(|i| i < pos.len()).collect();
        let (auc, ap) = auc_ap(&score_pairs(&model.decoder.u, theta, &pairs), &labels)?;
        out.insert(format!("{name}_auc"), auc);
        out.insert(format!("{name}_ap"), ap);
    }
    Ok(out)
}

fn finish_report(
    task: &str,
    seeds: Vec<u64>,
    runs: Vec<BTreeMap<String, f64>>,
    start: Instant,
    out: &Path,
    mut manifest: RunManifest,
) -> Result<(), CliError> {
    let report = MetricsReport::from_runs(task, seeds.clone(), &runs, start.elapsed().as_secs_f64());
    create_dir(out)?;
    let per_seed: BTreeMap<u64, BTreeMap<String, f64>> = seeds.into_iter().zip(runs).collect();
    write_json(&out.join(RUNS_FILE), &per_seed)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    manifest.add_artifact(out, RUNS_FILE, true)?;
    manifest.add_artifact(out, REPORT_FILE, false)?;
    manifest.write(out)?;
    print!("{}", report.to_table());
    Ok(())
}

fn print_seed(seed: u64, metrics: &BTreeMap<String, f64>) {
    let parts: Vec<String> = metrics.iter().map(|(k, v)| format!("{k} {:.2}", 100.0 * v)).collect();
    println!("seed {seed}: {}", parts.join(", "));
}

fn eval_link_pred(args: RunArgs, argv: Vec<String>) -> Result<(), CliError> {
    let mut manifest = RunManifest::new(argv, None, None);
    let config = resolve_config(&args, &mut manifest)?;
    let ds = load_dataset(&args.data, &mut manifest)?;
    let labels = training_labels(&ds, &config)?;
    let start = Instant::now();
    let mut runs = Vec::new();
    for &seed in &config.eval.seeds {
        let split = split_edges(&ds.graph, config.eval.val_frac, config.eval.test_frac, seed)?;
        let model = fit(
            &ds,
            &split.train_graph(),
            labels.as_ref(),
            &config,
            seed,
            &mut TrainOutputs::default(),
        )?;
        let metrics = link_metrics(&model, &ds, &split, &config)?;
        print_seed(seed, &metrics);
        runs.push(metrics);
    }
    finish_report("link-pred", config.eval.seeds.clone(), runs, start, &args.out, manifest)
}

/// Seeds and models to evaluate: the given checkpoint, or one fresh run per seed.
fn models_for(
    args: &ModelRunArgs,
    ds: &Dataset,
    labels: Option<&LabelVector>,
    config: &RunConfig,
    manifest: &mut RunManifest,
) -> Result<Vec<(u64, TrainedModel)>, CliError> {
    match &args.model {
        Some(p) => {
            let m = load_model(p, manifest)?;
            Ok(vec![(m.config.seed, m)])
        }
        None => config
            .eval
            .seeds
            .iter()
            .map(|&s| Ok((s, fit(ds, &ds.graph, labels, config, s, &mut TrainOutputs::default())?)))
            .collect(),
    }
}

fn eval_cluster(args: ModelRunArgs, argv: Vec<String>) -> Result<(), CliError> {
    let mut manifest = RunManifest::new(argv, None, None);
    let config = resolve_config(&args.run, &mut manifest)?;
    let ds = load_dataset(&args.run.data, &mut manifest)?;
    let (truth, classes) = ds.full_labels()?;
    let k = config.eval.clusters.unwrap_or(classes);
    let start = Instant::now();
    let mut seeds = Vec::new();
    let mut runs = Vec::new();
    for (seed, model) in models_for(&args, &ds, None, &config, &mut manifest)? {
        let theta = node_theta(&model, &ds, &ds.graph)?;
        let (acc, nmi) = cluster_nodes(&theta, k, &truth, seed)?;
        let metrics = BTreeMap::from([("acc".to_string(), acc), ("nmi".to_string(), nmi)]);
        print_seed(seed, &metrics);
        seeds.push(seed);
        runs.push(metrics);
    }
    finish_report("cluster", seeds, runs, start, &args.run.out, manifest)
}

fn eval_classify(args: ModelRunArgs, argv: Vec<String>) -> Result<(), CliError> {
    let mut manifest = RunManifest::new(argv, None, None);
    let mut config = resolve_config(&args.run, &mut manifest)?;
    config.train.supervised = true;
    manifest.config = Some(config.clone());
    let ds = load_dataset(&args.run.data, &mut manifest)?;
    let all = ds
        .labels
        .as_ref()
        .ok_or_else(|| CliError::Data(format!("dataset {} has no labels", ds.name)))?;
    let e = &config.eval;
    let split = label_split(&all.labels, e.per_class, e.val_nodes, e.test_nodes, e.split_seed)?;
    let visible = training_labels(&ds, &config)?;
    let start = Instant::now();
    let mut seeds = Vec::new();
    let mut runs = Vec::new();
    for (seed, model) in models_for(&args, &ds, visible.as_ref(), &config, &mut manifest)? {
        let pred = predict_classes(&model, &ds.features, &ds.graph)?;
        let mut metrics = BTreeMap::from([("test_acc".to_string(), accuracy_on(&pred, &all.labels, &split.test)?)]);
        if !split.val.is_empty() {
            metrics.insert("val_acc".to_string(), accuracy_on(&pred, &all.labels, &split.val)?);
        }
        print_seed(seed, &metrics);
        seeds.push(seed);
        runs.push(metrics);
    }
    finish_report("classify", seeds, runs, start, &args.run.out, manifest)
}

fn parse_root(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("--root expects LAYER:TOPIC, got `{s}`"));
    let (l, k) = s.split_once(':').ok_or_else(bad)?;
    Ok((
        l.trim().parse().map_err(|_| bad())?,
        k.trim().parse().map_err(|_| bad())?,
    ))
}

fn export_tree(args: TopicTreeArgs, argv: Vec<String>) -> Result<(), CliError> {
    let mut manifest = RunManifest::new(argv, None, None);
    let model = load_model(&args.model, &mut manifest)?;
    let ds = load_dataset(&args.data, &mut manifest)?;
    let state = &model.decoder;
    let layers = state.widths.len();
    let tau = args.tau_phi.unwrap_or(model.config.tau_phi);
    let roots = match &args.root {
        Some(r) => vec![parse_root(r)?],
        None => (0..state.widths[layers - 1]).map(|k| (layers, k)).collect(),
    };
    let trees: Vec<TopicTree> = roots
        .iter()
        .map(|&r| export_topic_tree(state, r, &vec![tau; layers], &ds.vocab))
        .collect::<Result<_, _>>()?;
    create_dir(&args.out)?;
    write_json(&args.out.join("topic_tree.json"), &trees)?;
    let text: String = trees.iter().map(|t| t.to_text()).collect::<Vec<_>>().join("\n");
    write_file(&args.out.join("topic_tree.txt"), &text)?;
    manifest.add_artifact(&args.out, "topic_tree.json", true)?;
    manifest.add_artifact(&args.out, "topic_tree.txt", true)?;
    manifest.write(&args.out)?;
    print!("{text}");
    Ok(())
}

fn export_subnet(args: SubnetworkArgs, argv: Vec<String>) -> Result<(), CliError> {
    let mut manifest = RunManifest::new(argv, None, None);
    let model = load_model(&args.model, &mut manifest)?;
    let ds = load_dataset(&args.data, &mut manifest)?;
    let source = ds.resolve_node(&args.node)?;
    let tau = args.tau_u.unwrap_or(model.config.tau_u);
    let theta = node_theta(&model, &ds, &ds.graph)?;
    let net = export_subnetwork_with(&model.decoder.phi, &model.decoder.u, &theta, source, tau, &ds.vocab)?;
    create_dir(&args.out)?;
    write_json(&args.out.join("subnetwork.json"), &net)?;
    let text = net.to_text();
    write_file(&args.out.join("subnetwork.txt"), &text)?;
    manifest.add_artifact(&args.out, "subnetwork.json", true)?;
    manifest.add_artifact(&args.out, "subnetwork.txt", true)?;
    manifest.write(&args.out)?;
    print!("{text}");
    Ok(())
}

fn selftest_cmd(args: SelftestArgs, argv: Vec<String>) -> Result<(), CliError> {
    let start = Instant::now();
    let results = selftest::run_all(args.seed)?;
    for r in &results {
        println!(
            "{} {:<11} {} | {}",
            if r.passed { "ok  " } else { "FAIL" },
            r.suite,
            r.name,
            r.detail
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!(
        "{} checks, {failed} failed, {:.1}s",
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if let Some(out) = &args.out {
        let mut manifest = RunManifest::new(argv, None, Some(args.seed));
        create_dir(out)?;
        write_json(&out.join("selftest.json"), &results)?;
        manifest.add_artifact(out, "selftest.json", true)?;
        manifest.write(out)?;
    }
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} self-test check(s) failed")));
    }
    Ok(())
}

fn generate(args: GenerateArgs, argv: Vec<String>) -> Result<(), CliError> {
    let mut hyper = DecoderHyper::defaults(&args.widths);
    hyper.eta.fill(args.eta);
    hyper.gamma.fill(args.gamma);
    let mut state = sample_prior_state(args.nodes, args.vocab, &args.widths, hyper, args.c, args.seed)?;
    let expected = scale_u_to_expected_edges(&mut state, args.edges)?;
    let g = generate_from_state(&state, args.seed)?;
    let top = state.theta.last().expect("at least one layer");
    let labels = top
        .rows()
        .into_iter()
        .map(|r| {
            let (k, _) = r
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |b, (k, &v)| if v > b.1 { (k, v) } else { b });
            Some(k)
        })
        .collect();
    let mut labels = LabelVector::new(labels, top.ncols())?;
    labels.class_names = (0..top.ncols()).map(|k| format!("topic{k}")).collect();
    let ds = Dataset {
        name: format!("synthetic-{}", args.seed),
        features: g.features,
        graph: g.graph,
        labels: Some(labels),
        node_ids: None,
        vocab: (0..args.vocab).map(|v| format!("w{v}")).collect(),
    };
    let mut manifest = RunManifest::new(argv, None, Some(args.seed));
    create_dir(&args.out)?;
    ds.save(&args.out.join(DATASET_FILE))?;
    write_file(&args.out.join("truth.json"), serde_json::to_string(&state)?)?;
    manifest.add_artifact(&args.out, DATASET_FILE, true)?;
    manifest.add_artifact(&args.out, "truth.json", true)?;
    manifest.write(&args.out)?;
    println!(
        "{} nodes, {} tokens, {} edges (expected {expected:.1})",
        ds.features.num_nodes(),
        ds.features.total(),
        ds.graph.num_edges()
    );
    Ok(())
}

fn replay(args: ReplayArgs) -> Result<(), CliError> {
    let recorded = RunManifest::load(&resolve_input(&args.manifest))?;
    recorded.verify_inputs()?;
    let out = std::path::absolute(&args.out)?;
    let mut cli = <Cli as clap::Parser>::try_parse_from(&recorded.argv)
        .map_err(|e| CliError::Data(format!("recorded command does not parse: {e}")))?;
    match cli.command.out_mut() {
        Some(o) => *o = out.clone(),
        None => return Err(CliError::Data("recorded command writes no outputs".into())),
    }
    let argv = replace_out(&recorded.argv, &out);
    std::env::set_current_dir(&recorded.cwd).map_err(|e| CliError::Data(format!("{}: {e}", recorded.cwd.display())))?;
    dispatch(cli.command, argv)?;
    let fresh = RunManifest::load(&out.join(MANIFEST_FILE))?;
    let differ = recorded.mismatches(&fresh);
    if !differ.is_empty() {
        return Err(CliError::Numerical(format!("replayed outputs differ: {differ:?}")));
    }
    let n = recorded.artifacts.iter().filter(|a| a.reproducible).count();
    println!("replay matched {n} reproducible artifact(s)");
    Ok(())
}

/// The recorded argv with its `--out` value pointed at `out`.
fn replace_out(argv: &[String], out: &Path) -> Vec<String> {
    let mut fresh = Vec::with_capacity(argv.len());
    let mut iter = argv.iter();
    while let Some(a) = iter.next() {
        if a == "--out" {
            iter.next();
            fresh.extend(["--out".to_string(), out.display().to_string()]);
        } else if a.starts_with("--out=") {
            fresh.push(format!("--out={}", out.display()));
        } else {
            fresh.push(a.clone());
        }
    }
    fresh
}
