//! Command-line behaviour: exit codes, outputs and a staged toy run.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lingap::config::PipelineConfig;

fn lingap(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lingap"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("LINGAP_OUT")
        .output()
        .expect("spawn lingap")
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn correlate_defaults_to_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&lingap(&["correlate"], dir.path()));
    assert!(stdout.contains("ARC-C: r = -0.95"));
    let csv = std::fs::read_to_string(dir.path().join("correlation.csv")).unwrap();
    assert!(csv.starts_with("benchmark,convention,r,n,languages\nARC-C,difference,-0.95"));
    assert!(dir.path().join("manifest-correlate.json").exists());
}

#[test]
fn ratio_convention_flips_sign() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&lingap(&["correlate", "--convention", "ratio"], dir.path()));
    assert!(stdout.contains("ARC-C: r = 0.95"));
}

#[test]
fn analyze_on_empty_input_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = lingap(&["analyze", "--records", s(&empty)], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no activation records"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lingap(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(lingap(&["analyze"], dir.path()).status.code(), Some(2));
    assert_eq!(lingap(&["correlate", "--convention", "sideways"], dir.path()).status.code(), Some(2));
}

#[test]
fn config_show_round_trips_and_unknown_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let shown = ok(&lingap(&["config", "show"], dir.path()));
    let cfg: PipelineConfig = serde_json::from_str(&shown).unwrap();
    assert_eq!(cfg, PipelineConfig::default());

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"align": {"alhpa": 2}}"#).unwrap();
    let o = lingap(&["--config", s(&bad), "config", "show"], dir.path());
    assert_eq!(o.status.code(), Some(1));

    let seeded = ok(&lingap(&["--seed", "5", "config", "show"], dir.path()));
    let cfg: PipelineConfig = serde_json::from_str(&seeded).unwrap();
    assert_eq!((cfg.seed, cfg.align.seed, cfg.toy.corpus.seed), (Some(5), 5, 5));
}

#[test]
fn fixtures_export_writes_pinned_tables() {
    let dir = tempfile::tempdir().unwrap();
    ok(&lingap(&["fixtures", "export"], dir.path()));
    for f in lingap::fixtures::FIXTURES {
        let text = std::fs::read_to_string(dir.path().join(format!("{}.csv", f.id))).unwrap();
        assert_eq!(lingap::fixtures::sha256_hex(text.as_bytes()), f.sha256);
    }
}

fn small_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "seed": 3,
        "toy": {
            "model": {"n_layers": 4, "d_model": 32, "d_hidden": 32},
            "corpus": {"tokens_per_language": {"en": 8000, "xl": 800}},
            "train": {"epochs": 4}
        },
        "sae": {"train": {"d_features": 128, "steps": 1000, "target_l0": 8.0}, "layers": [2]},
        "align": {"target_layer": 2, "tuned_layers": [0, 2], "sample_count": 1000},
        "eval": {"items": {"items_per_language": 20}}
    });
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn target_gap(layer_gap_csv: &Path, layer: &str) -> f64 {
    let text = std::fs::read_to_string(layer_gap_csv).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.records()
        .map(|r| r.unwrap())
        .find(|r| &r[1] == layer)
        .map(|r| r[4].parse().unwrap())
        .expect("target layer row")
}

#[test]
fn staged_toy_run_reduces_target_gap() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = small_config(root);
    let c = s(&cfg);
    let out = |name: &str| root.join(name);

    ok(&lingap(&["--config", c, "toy-train"], &out("toy")));
    let model = out("toy").join("model.json");
    let corpus = out("toy").join("corpus.jsonl");
    let (m, k) = (s(&model), s(&corpus));

    ok(&lingap(&["--config", c, "sae-train", "--model", m, "--corpus", k], &out("sae")));
    let sae = out("sae").join("sae_layer2.json");
    assert!(sae.exists());

    ok(&lingap(&["--config", c, "ingest", "--model", m, "--corpus", k, "--sae", s(&sae)], &out("pre")));
    let pre_records = out("pre").join("parallel.jsonl");
    ok(&lingap(&["--config", c, "analyze", "--records", s(&pre_records), "--model", m, "--corpus", k], &out("pre")));

    ok(&lingap(&["--config", c, "align", "--model", m, "--corpus", k, "--sae", s(&sae)], &out("align")));
    let adapters = out("align").join("adapters.json");
    let a = s(&adapters);

    let post_in = ["--config", c, "ingest", "--model", m, "--corpus", k, "--adapters", a, "--sae", s(&sae)];
    ok(&lingap(&post_in, &out("post")));
    let post_records = out("post").join("parallel.jsonl");
    ok(&lingap(
        &["--config", c, "analyze", "--records", s(&post_records), "--model", m, "--corpus", k, "--adapters", a, "--stage", "post"],
        &out("post"),
    ));

    let before = target_gap(&out("pre").join("layer_gap.csv"), "2");
    let after = target_gap(&out("post").join("layer_gap.csv"), "2");
    assert!(before > 0.0, "pre gap {before}");
    assert!(after < before, "gap {before} -> {after}");

    let eval = ok(&lingap(&["--config", c, "eval", "--model", m, "--corpus", k, "--adapters", a], &out("post")));
    assert!(eval.contains("en:") && eval.contains("xl:"));
    ok(&lingap(&["report", "--dir", s(&out("post"))], &out("post")));
    for f in ["layer_gap.svg", "similarity.svg", "eval.svg", "manifest-report.json", "manifest-analyze.json"] {
        assert!(out("post").join(f).exists(), "{f}");
    }
    let sim = std::fs::read_to_string(out("post").join("similarity.csv")).unwrap();
    assert!(sim.contains("post,residual,xl,0,") && sim.contains("post,sae_features,xl,2,"));
}
