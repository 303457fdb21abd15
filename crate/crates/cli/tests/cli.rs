use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use amoclust::config::{parse_train_config, to_json};
use amoclust::pin::PinHyper;
use amoclust::prior::{DatasetMeta, PriorConfig, PriorKind};
use amoclust::train::TrainConfig;

fn amoclust(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amoclust"))
        .args(args)
        .env_remove("AMOCLUST_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = amoclust(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_tasks: 2,
        warmup_steps: 1,
        prior: PriorConfig {
            n_min: 20,
            n_max: 30,
            d_max: 3,
            k_max: 4,
            overlap_mc_samples: 1000,
            ..PriorConfig::desk()
        },
        pin: PinHyper {
            d: 16,
            d_tok: 8,
            l_enc: 1,
            l_dec: 1,
            heads: 2,
            k_max: 4,
            ..PinHyper::desk()
        },
        cin_hidden: 16,
        ..TrainConfig::desk()
    }
}

/// Trains a tiny model into `dir` and returns the checkpoint path.
fn tiny_model(dir: &Path) -> PathBuf {
    let cfg = dir.join("tiny.json");
    fs::write(&cfg, to_json(&tiny_config(3)).unwrap()).unwrap();
    let model = dir.join("model.tcpf");
    ok(&["train", "--config", p(&cfg), "--out", p(&model)]);
    model
}

fn gen_small(dir: &Path, count: usize, seed: u64, prior: &str) -> String {
    ok(&[
        "gen", "--prior", prior, "--count", &count.to_string(), "--out", p(dir), "--seed", &seed.to_string(),
        "--n-min", "20", "--n-max", "40", "--d-max", "3", "--k-max", "4",
    ])
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    v.sort();
    v
}

#[test]
fn gen_writes_pairs_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let summary = gen_small(&a, 6, 7, "gmm");
    gen_small(&b, 6, 7, "gmm");
    assert!(summary.contains("K histogram"), "{summary}");
    assert!(summary.contains("mean achieved Omega_max"), "{summary}");
    let files = csv_files(&a);
    assert_eq!(files.len(), 6);
    for f in &files {
        let meta = f.with_extension("meta.json");
        assert!(meta.exists());
        let name = f.file_name().unwrap();
        assert_eq!(fs::read(f).unwrap(), fs::read(b.join(name)).unwrap());
        assert_eq!(fs::read(&meta).unwrap(), fs::read(b.join(meta.file_name().unwrap())).unwrap());
    }
}

#[test]
fn gen_mixed_prior_fraction() {
    let tmp = tempfile::tempdir().unwrap();
    gen_small(tmp.path(), 100, 11, "mixed");
    let files = csv_files(tmp.path());
    assert_eq!(files.len(), 100);
    let gmm = files
        .iter()
        .filter(|f| {
            let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(f.with_extension("meta.json")).unwrap()).unwrap();
            meta.prior_kind == Some(PriorKind::Gmm)
        })
        .count();
    let frac = gmm as f64 / 100.0;
    assert!((frac - 0.4).abs() <= 0.1, "GMM fraction {frac}");
}

#[test]
fn shipped_presets_match_builtins() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets");
    for (file, cfg) in [("desk.json", TrainConfig::desk()), ("paper.json", TrainConfig::paper())] {
        let parsed = parse_train_config(&fs::read_to_string(dir.join(file)).unwrap()).unwrap();
        assert_eq!(parsed, cfg, "{file}");
    }
    let paper = TrainConfig::preset("paper").unwrap();
    assert_eq!((paper.steps, paper.batch_tasks, paper.warmup_steps), (10000, 512, 2000));
    assert_eq!(paper.peak_lr, 1e-4);
}

#[test]
fn train_writes_checkpoint_and_log() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tiny_model(tmp.path());
    assert!(model.exists());
    let log = fs::read_to_string(tmp.path().join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert!(lines.next().unwrap().starts_with("step,"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn train_rejects_unknown_key_with_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"steps": 5, "learning_rat": 0.1}"#).unwrap();
    let out = amoclust(&["train", "--config", p(&cfg), "--out", p(&tmp.path().join("m.tcpf"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rat"), "{err}");
    fs::write(&cfg, r#"{"pin": {"d": 16, "hedas": 2}}"#).unwrap();
    let out = amoclust(&["train", "--config", p(&cfg), "--out", p(&tmp.path().join("m.tcpf"))]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("pin") && err.contains("hedas"), "{err}");
    let out = amoclust(&["train", "--out", p(&tmp.path().join("m.tcpf"))]);
    assert!(!out.status.success());
}

#[test]
fn eval_cross_product_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data, 4, 3, "gmm");
    let model = tiny_model(tmp.path());
    let run = |out: &Path| {
        ok(&[
            "eval", "--model", p(&model), "--data", p(&data), "--methods", "model,kmeans,gmm",
            "--tracks", "known_k,inferred_k", "--out", p(out), "--restarts", "2",
        ])
    };
    let (o1, o2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    run(&o1);
    run(&o2);
    let agg = fs::read_to_string(o1.join("results_aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 1 + 6, "{agg}");
    assert_eq!(agg, fs::read_to_string(o2.join("results_aggregate.csv")).unwrap());
    let per = fs::read_to_string(o1.join("results_per_dataset.csv")).unwrap();
    assert_eq!(per.lines().count(), 1 + 6 * 4);
}

#[test]
fn eval_missing_data_dir_leaves_no_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let out = amoclust(&[
        "eval", "--methods", "kmeans", "--data", p(&tmp.path().join("nope")), "--out", p(&out_dir),
    ]);
    assert!(!out.status.success());
    assert!(!out_dir.exists());
}

#[test]
fn cluster_fixed_and_inferred_k() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tiny_model(tmp.path());
    let input = tmp.path().join("points.csv");
    let mut text = String::from("x,y,colour\n");
    for i in 0..25 {
        let colour = ["red", "green", "blue"][i % 3];
        text.push_str(&format!("{},{},{colour}\n", (i % 5) as f64 * 0.7, (i / 5) as f64 - 2.0));
    }
    fs::write(&input, text).unwrap();

    let fixed = tmp.path().join("fixed.csv");
    ok(&["cluster", "--model", p(&model), "--input", p(&input), "--k", "3", "--out", p(&fixed)]);
    let body = fs::read_to_string(&fixed).unwrap();
    let mut lines = body.lines();
    assert_eq!(lines.next().unwrap(), "# k=3 (given)");
    assert_eq!(lines.next().unwrap(), "row,cluster,max_prob");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 25);
    for (i, row) in rows.iter().enumerate() {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[0], i.to_string());
        assert!(["0", "1", "2"].contains(&f[1]));
        let pmax: f64 = f[2].parse().unwrap();
        assert!((1.0 / 3.0 - 1e-12..=1.0).contains(&pmax));
    }
    let enc: serde_json::Value = serde_json::from_str(&fs::read_to_string(fixed.with_extension("encoding.json")).unwrap()).unwrap();
    assert_eq!(enc["encoded_columns"][0]["column"], "colour");
    assert_eq!(enc["encoded_columns"][0]["categories"], serde_json::json!(["red", "green", "blue"]));

    let auto = tmp.path().join("auto.csv");
    ok(&["cluster", "--model", p(&model), "--input", p(&input), "--out", p(&auto)]);
    let body = fs::read_to_string(&auto).unwrap();
    let header = body.lines().next().unwrap();
    assert!(header.starts_with("# k_hat="), "{header}");
    let post: Vec<f64> = header.split('=').last().unwrap().split(';').map(|v| v.parse().unwrap()).collect();
    assert_eq!(post.len(), 3);
    assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert_eq!(body.lines().count(), 2 + 25);

    let bad = amoclust(&["cluster", "--model", p(&model), "--input", p(&input), "--k", "9", "--out", p(&auto)]);
    assert!(!bad.status.success());
}

#[test]
fn version_mismatch_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tiny_model(tmp.path());
    let mut bytes = fs::read(&model).unwrap();
    let pat = b"\"format_version\":1";
    let at = bytes.windows(pat.len()).position(|w| w == pat).expect("manifest field");
    bytes[at + pat.len() - 1] = b'7';
    let stale = tmp.path().join("stale.tcpf");
    fs::write(&stale, bytes).unwrap();
    let input = tmp.path().join("in.csv");
    fs::write(&input, "a,b\n1,2\n3,4\n5,7\n").unwrap();
    let out = amoclust(&["cluster", "--model", p(&stale), "--input", p(&input), "--k", "2", "--out", p(&tmp.path().join("o.csv"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}

#[test]
fn thread_settings_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_amoclust"))
        .args(["gen", "--count", "1", "--out", p(tmp.path())])
        .env("AMOCLUST_THREADS", "many")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("AMOCLUST_THREADS"));
    let out = amoclust(&["--threads", "0", "gen", "--count", "1", "--out", p(tmp.path())]);
    assert!(!out.status.success());
    ok(&["--threads", "1", "gen", "--count", "1", "--out", p(&tmp.path().join("one")), "--d-max", "2", "--k-max", "3"]);
}

#[test]
fn gradcheck_reports_every_check() {
    let out = ok(&["gradcheck"]);
    let lines: Vec<&str> = out.lines().collect();
    assert!(lines.len() > 20);
    assert!(lines[..lines.len() - 1].iter().all(|l| l.contains("max_rel_err") && l.ends_with("PASS")));
    assert!(lines.last().unwrap().contains(" 0 failed"));
}
