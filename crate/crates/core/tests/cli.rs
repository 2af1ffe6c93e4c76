use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use promptrec::checkpoint::Checkpoint;
use promptrec::cli::RunManifest;
use promptrec::params::Group;
use tempfile::TempDir;

const SMALL: &str = "model_dim = 8\nnum_layers = 1\nmax_seq_len = 10\nepochs = 2\nlr = 0.01\n\
syn_warm_users = 150\nsyn_cold_users = 60\nsyn_items = 150\nsyn_target_users = 80\nsyn_target_items = 140\n";

fn promptrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptrec"))
        .args(args)
        .env_remove("PROMPTREC_LOG")
        .output()
        .expect("spawn promptrec")
}

fn ok(args: &[&str]) -> String {
    let out = promptrec(args);
    assert!(
        out.status.success(),
        "promptrec {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = promptrec(args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn manifest(path: &Path) -> RunManifest {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn value<'a>(text: &'a str, key: &str) -> &'a str {
    text.split_whitespace()
        .find_map(|w| w.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("{key} not in output:\n{text}"))
}

/// A small generated dataset with a pre-trained checkpoint.
struct Fixture {
    _tmp: TempDir,
    root: PathBuf,
    conf: String,
    out: String,
    inter: String,
    prof: String,
    ckpt: String,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let conf = root.join("small.conf");
        fs::write(&conf, SMALL).unwrap();
        let out = root.join("run");
        let s = |p: PathBuf| p.to_str().unwrap().to_string();
        let f = Fixture {
            conf: s(conf),
            inter: s(out.join("interactions.tsv")),
            prof: s(out.join("profiles.tsv")),
            ckpt: s(out.join("pretrain.ckpt")),
            out: s(out),
            root,
            _tmp: tmp,
        };
        ok(&["--config", &f.conf, "--out-dir", &f.out, "gen-data"]);
        f.run(&["pretrain"]);
        f
    }

    fn args<'a>(&'a self, rest: &[&'a str]) -> Vec<&'a str> {
        let mut a = vec![
            "--config",
            &self.conf,
            "--out-dir",
            &self.out,
            "--interactions",
            &self.inter,
            "--profiles",
            &self.prof,
        ];
        a.extend_from_slice(rest);
        a
    }

    fn run(&self, rest: &[&str]) -> String {
        ok(&self.args(rest))
    }
}

#[test]
fn gen_data_writes_files_and_a_manifest_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let digests = |dir: &Path| {
        let d = dir.to_str().unwrap();
        ok(&["--out-dir", d, "--seed", "5", "--set", "syn_warm_users=50", "--set", "syn_cold_users=20", "gen-data"]);
        assert!(dir.join("interactions.tsv").is_file());
        assert!(dir.join("profiles.tsv").is_file());
        let m = manifest(&dir.join("gen-data.manifest.json"));
        assert_eq!(m.command, "gen-data");
        assert_eq!(m.seed, 5);
        assert_eq!(m.config["syn_warm_users"], "50");
        assert!(!m.build.is_empty());
        assert!(m.timings_ms.contains_key("total"));
        m.outputs.iter().map(|f| f.sha256.clone()).collect::<Vec<_>>()
    };
    let a = digests(&tmp.path().join("a"));
    let b = digests(&tmp.path().join("b"));
    assert_eq!(a, b);
}

#[test]
fn every_config_key_is_recorded() {
    let f = Fixture::new();
    let m = manifest(&Path::new(&f.out).join("pretrain.manifest.json"));
    for (k, _) in promptrec::config::DEFAULTS {
        assert!(m.config.contains_key(*k), "{k}");
    }
    assert_eq!(m.config["model_dim"], "8");
    assert_eq!(m.inputs.len(), 2);
    let resolved = fs::read_to_string(Path::new(&f.out).join("pretrain.config")).unwrap();
    assert!(resolved.contains("model_dim = 8\n"));
}

#[test]
fn unknown_keys_exit_2_and_name_the_key() {
    let (c, err) = code(&["--set", "embedding_size=64", "gen-data", "--out-dir", "/tmp/unused"]);
    assert_eq!(c, 2);
    assert!(err.contains("embedding_size"), "{err}");
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("bad.conf");
    fs::write(&conf, "lr = 0.1\nlearning_rate = 0.1\n").unwrap();
    let (c, err) = code(&["--config", conf.to_str().unwrap(), "gen-data"]);
    assert_eq!(c, 2);
    assert!(err.contains("learning_rate") && err.contains("bad.conf:2"), "{err}");
    assert_eq!(code(&["no-such-verb"]).0, 2);
}

#[test]
fn checkpoint_and_data_errors_have_their_exit_codes() {
    let f = Fixture::new();
    let (c, _) = code(&f.args(&["eval", "--ckpt", &f.inter]));
    assert_eq!(c, 3);
    let other = f.root.join("other.tsv");
    fs::write(&other, "a\tx\t1\na\ty\t2\n").unwrap();
    let (c, err) = code(&[
        "--config", &f.conf, "--out-dir", &f.out, "--interactions", other.to_str().unwrap(), "tune", "--ckpt", &f.ckpt,
    ]);
    assert_eq!(c, 3, "{err}");
    let broken = f.root.join("broken.tsv");
    fs::write(&broken, "a\tx\n").unwrap();
    let (c, err) = code(&["--out-dir", &f.out, "--interactions", broken.to_str().unwrap(), "pretrain"]);
    assert_eq!(c, 4, "{err}");
    assert!(err.contains("broken.tsv:1"), "{err}");
    let (c, _) = code(&["--out-dir", &f.out, "--interactions", "/does/not/exist", "pretrain"]);
    assert_eq!(c, 4);
    let (c, _) = code(&f.args(&["sweep", "--ckpt", &f.ckpt]));
    assert_eq!(c, 1);
}

#[test]
fn light_tuning_keeps_the_backbone_digest() {
    let f = Fixture::new();
    let tuned = Path::new(&f.out).join("tuned.ckpt");
    let tuned = tuned.to_str().unwrap();
    let report = f.run(&["tune", "--ckpt", &f.ckpt, "--mode", "light"]);
    let before = f.run(&["eval", "--ckpt", &f.ckpt]);
    let after = f.run(&["eval", "--ckpt", tuned]);
    assert_eq!(value(&before, "backbone_digest"), value(&after, "backbone_digest"));
    assert_eq!(value(&report, "backbone_digest"), value(&after, "backbone_digest"));
    let ck = Checkpoint::load(Path::new(tuned)).unwrap();
    assert_eq!(ck.meta["mode"], "light");
    assert_eq!(ck.meta["trainable_set"], "prompt,profile");
    let frac: f64 = value(&report, "trainable_fraction").parse().unwrap();
    assert!(frac > 0.0 && frac < 1.0);

    f.run(&["tune", "--ckpt", &f.ckpt, "--mode", "full", "--lambda", "0"]);
    let full = Checkpoint::load(Path::new(tuned)).unwrap();
    assert_ne!(
        full.model.params.group_digest(Group::Backbone),
        ck.model.params.group_digest(Group::Backbone)
    );
    assert_eq!(full.meta["lambda"], "0");
}

#[test]
fn joint_split_pools_zero_and_few_shot_cases() {
    let f = Fixture::new();
    let cases = |split: &str| -> usize {
        let out = f.run(&["tune", "--ckpt", &f.ckpt]);
        assert!(out.contains("trainable_fraction="));
        let tuned = Path::new(&f.out).join("tuned.ckpt");
        let text = f.run(&["eval", "--ckpt", tuned.to_str().unwrap(), "--split", split]);
        assert!(text.contains("auc     hit@5    hit@10    hit@20    hit@50    ndcg@5"), "{text}");
        value(&text, "cases").parse().unwrap()
    };
    let zero = cases("zeroshot");
    let few = cases("fewshot");
    assert!(zero > 0 && few > 0);
    assert_eq!(cases("joint"), zero + few);
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(Path::new(&f.out).join("eval_joint.json")).unwrap()).unwrap();
    assert_eq!(json["cases"].as_u64().unwrap() as usize, zero + few);
}

#[test]
fn threads_do_not_change_metrics() {
    let f = Fixture::new();
    let one = f.run(&["eval", "--ckpt", &f.ckpt]);
    let three = f.run(&["--threads", "3", "eval", "--ckpt", &f.ckpt]);
    assert_eq!(one, three);
    assert_eq!(code(&f.args(&["--threads", "0", "eval", "--ckpt", &f.ckpt])).0, 2);
}

#[test]
fn sweep_grid_shapes_and_single_cell_equivalence() {
    let f = Fixture::new();
    let csv = Path::new(&f.out).join("sweep.csv");
    f.run(&["sweep", "--ckpt", &f.ckpt, "--grid", "lambda=0,0.1", "--grid", "prompt_len=1,2,3"]);
    let grid = fs::read_to_string(&csv).unwrap();
    assert_eq!(grid.lines().count(), 1 + 6);
    assert!(grid.starts_with("lambda,prompt_len,seed,cases,auc,"));
    let again = f.run(&["sweep", "--ckpt", &f.ckpt, "--grid", "lambda=0,0.1", "--grid", "prompt_len=1,2,3"]);
    assert_eq!(fs::read_to_string(&csv).unwrap(), grid);
    assert!(again.contains("best: "));

    let single = f.run(&["sweep", "--ckpt", &f.ckpt, "--grid", "lambda=0.1"]);
    let row: Vec<String> = fs::read_to_string(&csv).unwrap().lines().nth(1).unwrap().split(',').map(String::from).collect();
    f.run(&["tune", "--ckpt", &f.ckpt, "--lambda", "0.1"]);
    let tuned = Path::new(&f.out).join("tuned.ckpt");
    let eval = f.run(&["eval", "--ckpt", tuned.to_str().unwrap()]);
    let auc: f64 = value(&eval, "auc").parse().unwrap();
    let swept: f64 = row[3].parse().unwrap();
    assert!((auc - swept).abs() < 5e-7, "{auc} vs {swept}");
    assert!(single.contains("best: lambda=0.1"));
}

#[test]
fn predict_profile_and_cross_domain_run() {
    let f = Fixture::new();
    let text = f.run(&["predict-profile", "--ckpt", &f.ckpt, "--attr", "2"]);
    let acc: f64 = value(&text, "acc").parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(code(&f.args(&["predict-profile", "--ckpt", &f.ckpt, "--attr", "7"])).0, 2);

    let x = f.root.join("cross");
    let xs = x.to_str().unwrap();
    ok(&["--config", &f.conf, "--out-dir", xs, "--set", "syn_cross_domain=true", "gen-data"]);
    let src = x.join("source_interactions.tsv");
    let tgt = x.join("target_interactions.tsv");
    ok(&["--config", &f.conf, "--out-dir", xs, "--interactions", src.to_str().unwrap(), "pretrain"]);
    let ckpt = x.join("pretrain.ckpt");
    for strategy in ["prompt", "side-info", "target-only"] {
        let out = ok(&[
            "--config", &f.conf, "--out-dir", xs, "cross-domain", "--strategy", strategy, "--source-ckpt",
            ckpt.to_str().unwrap(), "--source-data", src.to_str().unwrap(), "--target-data", tgt.to_str().unwrap(),
        ]);
        assert!(out.contains(&format!("strategy={strategy}")), "{out}");
    }
    let (c, _) = code(&[
        "--config", &f.conf, "--out-dir", xs, "cross-domain", "--source-ckpt", ckpt.to_str().unwrap(), "--source-data",
        tgt.to_str().unwrap(), "--target-data", src.to_str().unwrap(),
    ]);
    assert_eq!(c, 3, "vocabulary of the source log must match the checkpoint");
}

#[test]
fn manifests_regenerate_everything_after_deletion() {
    let f = Fixture::new();
    f.run(&["tune", "--ckpt", &f.ckpt]);
    let out = Path::new(&f.out);
    let saved = f.root.join("manifests");
    fs::create_dir_all(&saved).unwrap();
    let verbs = ["gen-data", "pretrain", "tune"];
    let mut recorded = Vec::new();
    for v in verbs {
        let name = format!("{v}.manifest.json");
        fs::copy(out.join(&name), saved.join(&name)).unwrap();
        recorded.push(manifest(&out.join(&name)));
    }
    fs::remove_dir_all(out).unwrap();
    for (v, m) in verbs.iter().zip(&recorded) {
        ok(&["replay", saved.join(format!("{v}.manifest.json")).to_str().unwrap()]);
        for o in &m.outputs {
            let now = promptrec::cli::file_digest(Path::new(&o.path)).unwrap();
            assert_eq!(now, o.sha256, "{}", o.path);
        }
        let again = manifest(&out.join(format!("{v}.manifest.json")));
        assert_eq!(again.outputs, m.outputs);
        assert_eq!(again.inputs, m.inputs);
    }
}

#[test]
fn log_variable_prints_the_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_promptrec"))
        .args(["--out-dir", tmp.path().to_str().unwrap(), "--set", "syn_warm_users=20", "--set", "syn_cold_users=5", "gen-data"])
        .env("PROMPTREC_LOG", "info")
        .output()
        .unwrap();
    assert!(out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("syn_warm_users = 20") && err.contains("tau = 0.5"), "{err}");
}

#[test]
fn default_scale_pipeline_finishes_within_five_minutes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_str().unwrap();
    let inter = tmp.path().join("interactions.tsv");
    let prof = tmp.path().join("profiles.tsv");
    let data = ["--out-dir", d, "--interactions", inter.to_str().unwrap(), "--profiles", prof.to_str().unwrap()];
    let start = Instant::now();
    ok(&["--out-dir", d, "gen-data"]);
    ok(&[&data[..], &["pretrain"]].concat());
    let pre = tmp.path().join("pretrain.ckpt");
    ok(&[&data[..], &["tune", "--ckpt", pre.to_str().unwrap()]].concat());
    let tuned = tmp.path().join("tuned.ckpt");
    let text = ok(&[&data[..], &["eval", "--ckpt", tuned.to_str().unwrap()]].concat());
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(300), "{elapsed:?}");
    let auc: f64 = value(&text, "auc").parse().unwrap();
    assert!(auc > 0.5, "{text}");
}
