use std::path::Path;
use std::process::{Command, Output};

fn wgae(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wgae"))
        .args(args)
        .current_dir(dir)
        .env_remove("WGAE_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = wgae(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn generate(dir: &Path) {
    ok(
        dir,
        &[
            "generate", "--nodes", "80", "--vocab", "20", "--widths", "4,2", "--edges", "300", "--seed", "1", "--out",
            "gen",
        ],
    );
}

const SMALL: [&str; 6] = [
    "--set",
    "train.iterations=40",
    "--set",
    "train.widths=[4,2]",
    "--set",
    "train.learning_rate=0.03",
];

#[test]
fn unknown_flags_and_subcommands_exit_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["train", "--bogus"][..], &["frobnicate"], &[]] {
        let out = wgae(dir.path(), args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"), "{args:?}");
    }
    assert_eq!(wgae(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(wgae(dir.path(), &["--version"]).status.code(), Some(0));
}

#[test]
fn unknown_config_keys_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path());
    std::fs::write(dir.path().join("c.toml"), "[train]\niteratons = 5\n").unwrap();
    let out = wgae(
        dir.path(),
        &[
            "train",
            "--data",
            "gen/dataset.json",
            "--config",
            "c.toml",
            "--out",
            "r",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("iteratons"));
}

#[test]
fn missing_or_malformed_data_exits_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        wgae(dir.path(), &["train", "--data", "absent.json", "--out", "r"])
            .status
            .code(),
        Some(2)
    );
    std::fs::write(dir.path().join("bad.tsv"), "0 0 1\n0 0 2\n").unwrap();
    let out = wgae(
        dir.path(),
        &["ingest", "--corpus", "bad.tsv", "--cosine-tau", "0.5", "--out", "d"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("duplicate"));
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path());
    std::fs::write(dir.path().join("c.toml"), "[train]\niterations = 30\nwidths = [4, 2]\n").unwrap();
    for (out, threads) in [("a", "0"), ("b", "0"), ("c", "1")] {
        ok(
            dir.path(),
            &[
                "--threads",
                threads,
                "train",
                "--data",
                "gen/dataset.json",
                "--config",
                "c.toml",
                "--seed",
                "7",
                "--out",
                out,
            ],
        );
    }
    let a = std::fs::read(dir.path().join("a/model.json")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b/model.json")).unwrap());
    assert_eq!(a, std::fs::read(dir.path().join("c/model.json")).unwrap());
    ok(
        dir.path(),
        &[
            "train",
            "--data",
            "gen/dataset.json",
            "--config",
            "c.toml",
            "--seed",
            "8",
            "--out",
            "d",
        ],
    );
    assert_ne!(a, std::fs::read(dir.path().join("d/model.json")).unwrap());
}

#[test]
fn pipeline_from_generation_to_export() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d);
    let train_args = [
        &["train", "--data", "gen/dataset.json", "--seed", "3", "--out", "run"][..],
        &SMALL,
    ]
    .concat();
    ok(d, &train_args);
    let log = std::fs::read_to_string(d.join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 40);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["train"]["iterations"], 40);
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 1);

    let lp = [
        &[
            "eval",
            "link-pred",
            "--data",
            "gen/dataset.json",
            "--seeds",
            "1,2",
            "--out",
            "lp",
        ][..],
        &SMALL,
    ]
    .concat();
    let text = ok(d, &lp);
    assert!(
        text.contains("seed 1:") && text.contains("seed 2:") && text.contains("test_auc"),
        "{text}"
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("lp/report.json")).unwrap()).unwrap();
    for key in ["test_auc", "test_ap", "val_auc", "val_ap"] {
        let values = report["metrics"][key]["values"].as_array().unwrap();
        assert_eq!(values.len(), 2, "{key}");
        assert!(values.iter().all(|v| (0.0..=1.0).contains(&v.as_f64().unwrap())));
    }

    let text = ok(
        d,
        &[
            "eval",
            "cluster",
            "--data",
            "gen/dataset.json",
            "--model",
            "run/model.json",
            "--out",
            "cl",
        ],
    );
    assert!(text.contains("acc") && text.contains("nmi"), "{text}");

    let cf = [
        &[
            "eval",
            "classify",
            "--data",
            "gen/dataset.json",
            "--seeds",
            "4",
            "--out",
            "cf",
        ][..],
        &[
            "--set",
            "eval.per_class=3",
            "--set",
            "eval.val_nodes=10",
            "--set",
            "eval.test_nodes=30",
        ],
        &SMALL,
    ]
    .concat();
    assert!(ok(d, &cf).contains("test_acc"));

    ok(
        d,
        &[
            "export",
            "topic-tree",
            "--model",
            "run/model.json",
            "--data",
            "gen/dataset.json",
            "--root",
            "2:0",
            "--tau-phi",
            "0",
            "--out",
            "tree",
        ],
    );
    let trees: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("tree/topic_tree.json")).unwrap()).unwrap();
    let tree = &trees[0];
    assert_eq!(tree["nodes"].as_array().unwrap().len(), 5);
    assert_eq!(tree["edges"].as_array().unwrap().len(), 4);
    assert_eq!(tree["nodes"][0]["layer"], 2);

    ok(
        d,
        &[
            "export",
            "subnetwork",
            "--model",
            "run/model.json",
            "--data",
            "gen/dataset.json",
            "--node",
            "0",
            "--tau-u",
            "0",
            "--out",
            "sub",
        ],
    );
    let net: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("sub/subnetwork.json")).unwrap()).unwrap();
    assert_eq!(net["layers"][0]["links"].as_array().unwrap().len(), 79 * 4);
    assert_eq!(net["layers"][1]["links"].as_array().unwrap().len(), 79 * 2);

    for m in ["run", "lp", "tree", "sub"] {
        let text = ok(
            d,
            &["replay", &format!("{m}/manifest.json"), "--out", &format!("{m}_again")],
        );
        assert!(text.contains("replay matched"), "{m}: {text}");
    }
}

#[test]
fn replay_refuses_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path());
    let args = [&["train", "--data", "gen/dataset.json", "--out", "run"][..], &SMALL].concat();
    ok(dir.path(), &args);
    let p = dir.path().join("gen/dataset.json");
    let mut body = std::fs::read_to_string(&p).unwrap();
    body.push('\n');
    std::fs::write(&p, body).unwrap();
    assert_eq!(
        wgae(dir.path(), &["replay", "run/manifest.json", "--out", "again"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn ingest_builds_a_dataset_from_a_recipe() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("raw");
    std::fs::create_dir(&data).unwrap();
    std::fs::write(data.join("toy.content"), "p1 1 0 1 a\np2 0 1 1 b\np3 1 1 0 a\n").unwrap();
    std::fs::write(data.join("toy.cites"), "p1 p2\np2 p3\np3 p9\n").unwrap();
    std::fs::write(
        dir.path().join("toy.toml"),
        "name = \"toy\"\ncorpus = \"toy.content\"\nformat = \"cora-content\"\nedges = \"toy.cites\"\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_wgae"))
        .args(["ingest", "--recipe", "toy.toml", "--out", "ds"])
        .current_dir(dir.path())
        .env("WGAE_DATA_DIR", &data)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("3 nodes, 3 terms, 6 tokens, 2 edges, 2 classes"));
    let ds: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ds/dataset.json")).unwrap()).unwrap();
    assert_eq!(ds["node_ids"][2], "p3");
}

#[test]
fn selftest_passes_on_a_fresh_build() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["selftest", "--out", "st"]);
    assert!(text.contains(" 0 failed"), "{text}");
    let results: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("st/selftest.json")).unwrap()).unwrap();
    let suites: std::collections::BTreeSet<&str> = results
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["suite"].as_str().unwrap())
        .collect();
    assert_eq!(suites.len(), 4, "{suites:?}");
}
