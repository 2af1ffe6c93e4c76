//! The `promptrec` command line: argument parsing, run manifests and the
//! verbs wiring data, training and evaluation together.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{crop_for_kshot, generate_cross_domain, generate_synthetic, split_cold_train_test, split_warm_cold, Dataset, InteractionLog, Splits};
use crate::error::{Error, Result};
use crate::eval::{evaluate_parallel, MetricsReport, Split, CUTOFFS};
use crate::model::{Features, Model, UserFeatures};
use crate::params::{hex, Group};
use crate::pretrain::pretrain;
use crate::tasks::{
    evaluate_profile, prepare_profile_model, profile_labels, source_embeddings, train_profile_head, tune_cross_domain,
    CrossStrategy, ProfileHead,
};
use crate::tuning::tune;

pub const BUILD_ID: &str = match option_env!("PROMPTREC_BUILD_ID") {
    Some(id) => id,
    None => env!("CARGO_PKG_VERSION"),
};

#[derive(Debug, Parser)]
#[command(name = "promptrec", version, about = "Personalized prompt tuning for cold-start sequential recommendation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for every output of the command.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads for evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Extra `key=value` config overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Interaction log (overrides `interactions`).
    #[arg(long, global = true)]
    pub interactions: Option<PathBuf>,
    /// Profile table (overrides `profiles`).
    #[arg(long, global = true)]
    pub profiles: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Write a synthetic interaction log and profile table.
    GenData,
    /// Pre-train the backbone on warm users.
    Pretrain {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tune a pre-trained checkpoint on cold-train users.
    Tune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Evaluate a checkpoint on cold-test users.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        split: Option<String>,
        /// Row label in the printed table.
        #[arg(long)]
        label: Option<String>,
    },
    /// Tune on a target domain with prompts from a source-domain model.
    CrossDomain {
        #[arg(long)]
        source_ckpt: PathBuf,
        /// Source-domain interaction log.
        #[arg(long)]
        source_data: PathBuf,
        /// Target-domain interaction log.
        #[arg(long)]
        target_data: PathBuf,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        raw_prompt: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate a binary profile attribute classifier.
    PredictProfile {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        attr: Option<usize>,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Grid of tune+eval runs from one pre-trained checkpoint.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        /// `key=v1,v2,...`; repeat for more axes.
        #[arg(long = "grid", value_name = "KEY=VALUES")]
        grid: Vec<String>,
    },
    /// Re-run a command from its manifest.
    Replay { manifest: PathBuf },
}

impl Command {
    pub fn verb(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Tune { .. } => "tune",
            Command::Eval { .. } => "eval",
            Command::CrossDomain { .. } => "cross-domain",
            Command::PredictProfile { .. } => "predict-profile",
            Command::Sweep { .. } => "sweep",
            Command::Replay { .. } => "replay",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to reproduce one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub build: String,
    pub out_dir: String,
    pub threads: usize,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub timings_ms: BTreeMap<String, u128>,
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

struct Run {
    cfg: ExperimentConfig,
    out_dir: PathBuf,
    threads: usize,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    timings: BTreeMap<String, u128>,
    started: Instant,
    stdout: String,
}

impl Run {
    fn input(&mut self, path: &Path) -> Result<()> {
        let sha256 = file_digest(path)?;
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256,
        });
        Ok(())
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.record(&path)?;
        Ok(path)
    }

    fn record(&mut self, path: &Path) -> Result<()> {
        let sha256 = file_digest(path)?;
        self.outputs.push(FileDigest {
            path: path.display().to_string(),
            sha256,
        });
        Ok(())
    }

    fn save_ckpt(&mut self, ck: &Checkpoint, path: &Path) -> Result<()> {
        ck.save(path)?;
        self.record(path)
    }

    fn lap(&mut self, name: &str) {
        self.timings.insert(name.into(), self.started.elapsed().as_millis());
    }

    fn say(&mut self, text: &str) {
        self.stdout.push_str(text);
    }

    fn dataset(&mut self) -> Result<Dataset> {
        let inter = self.cfg.get("interactions").to_string();
        if inter.is_empty() {
            return Err(Error::config("no interaction log given (--interactions or `interactions`)"));
        }
        let inter = PathBuf::from(inter);
        let prof = self.cfg.get("profiles").to_string();
        let prof = (!prof.is_empty()).then(|| PathBuf::from(prof));
        self.input(&inter)?;
        if let Some(p) = &prof {
            self.input(p)?;
        }
        Dataset::load(&inter, prof.as_deref())
    }

    fn splits(&self, data: &Dataset) -> Result<Splits> {
        Splits::new(
            &data.log,
            self.cfg.parse("threshold")?,
            self.cfg.parse("train_ratio")?,
            self.cfg.seed()?,
        )
    }

    /// Behavior sequences after optional k-shot cropping.
    fn sequences(&self, data: &Dataset) -> Result<Vec<Vec<usize>>> {
        match self.cfg.k_shot()? {
            Some(k) => crop_for_kshot(&data.log.sequences, k),
            None => Ok(data.log.sequences.clone()),
        }
    }

    fn load_ckpt(&mut self, path: &Path) -> Result<Checkpoint> {
        self.input(path)?;
        Checkpoint::load(path)
    }
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v).map_err(|e| Error::contract(format!("serialization failed: {e}")))?;
    s.push(b'\n');
    Ok(s)
}

fn profile_features(model: &Model, data: &Dataset) -> Result<()> {
    match &model.config.prompt {
        Some(p) if matches!(p.features, Features::Dense { .. }) => Err(Error::config(
            "this checkpoint takes source-domain inputs; evaluate it with cross-domain",
        )),
        Some(_) if data.profiles.num_attrs() == 0 => Err(Error::data("this checkpoint needs a profile table")),
        _ => Ok(()),
    }
}

fn eval_model(run: &Run, model: &Model, data: &Dataset, sequences: &[Vec<usize>], users: &[usize], split: Split) -> Result<MetricsReport> {
    profile_features(model, data)?;
    let prompted = model.config.prompt.is_some();
    let features = |u: usize| prompted.then(|| UserFeatures::Profile(data.profiles.user(u)));
    evaluate_parallel(model, sequences, users, split, &features, run.cfg.seed()?, run.threads)
}

fn trainable_set(model: &Model) -> String {
    Group::ALL
        .into_iter()
        .filter(|&g| model.params.iter().any(|(_, p)| p.group == g && p.tensor.requires_grad()))
        .map(|g| g.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn cmd_gen_data(run: &mut Run) -> Result<()> {
    if run.cfg.parse::<bool>("syn_cross_domain")? {
        let cd = generate_cross_domain(&run.cfg.cross_domain_data()?)?;
        for (stem, d) in [("source_", &cd.source), ("target_", &cd.target)] {
            run.write(&format!("{stem}interactions.tsv"), d.interactions_text().as_bytes())?;
            run.write(&format!("{stem}profiles.tsv"), d.profiles_text().as_bytes())?;
        }
        let msg = format!(
            "source_users={} target_users={}\n",
            cd.source.users.len(),
            cd.target.users.len()
        );
        run.say(&msg);
    } else {
        let syn = generate_synthetic(&run.cfg.synthetic()?)?;
        run.write("interactions.tsv", syn.interactions_text().as_bytes())?;
        run.write("profiles.tsv", syn.profiles_text().as_bytes())?;
        let msg = format!("users={} cluster_purity={:.4}\n", syn.users.len(), syn.cluster_purity());
        run.say(&msg);
    }
    Ok(())
}

fn cmd_pretrain(run: &mut Run, out: Option<PathBuf>) -> Result<()> {
    let data = run.dataset()?;
    let (warm, cold) = split_warm_cold(&data.log.sequences, run.cfg.parse("threshold")?);
    if cold.is_empty() {
        log::info!("no cold users; pre-training on all {} users", warm.len());
    } else {
        let splits = run.splits(&data)?;
        run.write("splits.txt", splits.manifest(&data.log).as_bytes())?;
    }
    run.lap("load");
    let (model, report) = pretrain(&data, &warm, &run.cfg.pretrain()?)?;
    run.lap("pretrain");
    let mut ck = Checkpoint::new(model, data.log.item_ids.clone(), data.profiles.attr_values.clone());
    ck.meta.insert("stage".into(), "pretrain".into());
    ck.meta.insert("seed".into(), run.cfg.seed()?.to_string());
    let path = out.unwrap_or_else(|| run.out_dir.join("pretrain.ckpt"));
    run.save_ckpt(&ck, &path)?;
    run.write("pretrain_report.json", &json(&report)?)?;
    let last = report.epochs.last().map_or(f64::NAN, |e| e.loss);
    let msg = format!(
        "warm_users={} epochs={} best_epoch={} final_loss={last:.6} parameters={}\n",
        warm.len(),
        report.epochs.len(),
        report.best_epoch,
        report.total
    );
    run.say(&msg);
    Ok(())
}

fn cmd_tune(run: &mut Run, ckpt: &Path, out: Option<PathBuf>) -> Result<()> {
    let base = run.load_ckpt(ckpt)?;
    let data = run.dataset()?;
    base.check_vocabulary(&data.log.item_ids, None)?;
    let splits = run.splits(&data)?;
    let sequences = run.sequences(&data)?;
    run.lap("load");
    let cfg = run.cfg.tune()?;
    let (model, report) = tune(&base.model, &data, &sequences, &splits.cold_train, &cfg)?;
    run.lap("tune");
    if report.mode == "light" && model.params.group_digest(Group::Backbone) != base.model.params.group_digest(Group::Backbone) {
        return Err(Error::contract("backbone changed during light tuning"));
    }
    let mut ck = Checkpoint::new(model, data.log.item_ids.clone(), data.profiles.attr_values.clone());
    ck.meta.insert("stage".into(), "tune".into());
    ck.meta.insert("strategy".into(), report.strategy.clone());
    ck.meta.insert("mode".into(), report.mode.clone());
    ck.meta.insert("lambda".into(), cfg.cl.lambda.to_string());
    ck.meta.insert("trainable_set".into(), trainable_set(&ck.model));
    ck.meta.insert("seed".into(), run.cfg.seed()?.to_string());
    let path = out.unwrap_or_else(|| run.out_dir.join("tuned.ckpt"));
    run.save_ckpt(&ck, &path)?;
    run.write("tune_report.json", &json(&report)?)?;
    let last = report.train.epochs.last();
    let msg = format!(
        "strategy={} mode={} trainable={} total={} trainable_fraction={:.6} final_loss={:.6} final_cl={}\nbackbone_digest={}\n",
        report.strategy,
        report.mode,
        report.trainable,
        report.total,
        report.trainable_fraction,
        last.map_or(f64::NAN, |e| e.loss),
        last.and_then(|e| e.cl).map_or("none".to_string(), |c| format!("{c:.6}")),
        ck.model.params.group_digest(Group::Backbone)
    );
    run.say(&msg);
    Ok(())
}

fn cmd_eval(run: &mut Run, ckpt: &Path, label: Option<String>) -> Result<()> {
    let ck = run.load_ckpt(ckpt)?;
    let data = run.dataset()?;
    ck.check_vocabulary(&data.log.item_ids, Some(&data.profiles.attr_values))?;
    let splits = run.splits(&data)?;
    let sequences = run.sequences(&data)?;
    let split = run.cfg.split()?;
    run.lap("load");
    let report = eval_model(run, &ck.model, &data, &sequences, &splits.cold_test, split)?;
    run.lap("eval");
    let label = label.unwrap_or_else(|| ck.meta.get("stage").cloned().unwrap_or_else(|| "model".into()));
    run.write(&format!("eval_{}.json", split.as_str()), &json(&report)?)?;
    run.write(&format!("eval_{}.txt", split.as_str()), report.to_lines().as_bytes())?;
    let text = format!(
        "split={} backbone_digest={}\n{}{}",
        split.as_str(),
        ck.model.params.group_digest(Group::Backbone),
        report.table(&label),
        report.to_lines()
    );
    run.say(&text);
    Ok(())
}

#[derive(Serialize)]
struct CrossReport<'a> {
    strategy: &'a str,
    missing_source_users: usize,
    train_users: usize,
    test_users: usize,
    tune: crate::tuning::TuneReport,
    metrics: MetricsReport,
}

fn cmd_cross_domain(
    run: &mut Run,
    source_ckpt: &Path,
    source_data: &Path,
    target_data: &Path,
    out: Option<PathBuf>,
) -> Result<()> {
    let source = run.load_ckpt(source_ckpt)?;
    run.input(source_data)?;
    run.input(target_data)?;
    let slog = InteractionLog::load(source_data)?;
    let tlog = InteractionLog::load(target_data)?;
    source.check_vocabulary(&slog.item_ids, None)?;
    crate::data::check_disjoint_items(&slog, &tlog)?;
    let target = Dataset {
        profiles: crate::data::Profiles::empty(tlog.num_users()),
        log: tlog,
    };
    let emb = source_embeddings(&source.model, &slog, &target.log)?;
    let all: Vec<usize> = (0..target.log.num_users()).collect();
    let (train_users, test_users) = split_cold_train_test(&all, run.cfg.parse("train_ratio")?, run.cfg.seed()?)?;
    run.lap("load");
    let cfg = run.cfg.cross()?;
    let (model, tune_report) = tune_cross_domain(&source.model, &target, &emb, &train_users, &cfg)?;
    run.lap("tune");
    let with_features = cfg.strategy != CrossStrategy::TargetOnly;
    let features = |u: usize| with_features.then(|| emb.features(u));
    let split = run.cfg.split()?;
    let metrics = evaluate_parallel(&model, &target.log.sequences, &test_users, split, &features, run.cfg.seed()?, run.threads)?;
    run.lap("eval");
    let mut ck = Checkpoint::new(model, target.log.item_ids.clone(), Vec::new());
    ck.meta.insert("stage".into(), "cross-domain".into());
    ck.meta.insert("strategy".into(), cfg.strategy.as_str().into());
    ck.meta.insert("seed".into(), run.cfg.seed()?.to_string());
    let path = out.unwrap_or_else(|| run.out_dir.join("cross_domain.ckpt"));
    run.save_ckpt(&ck, &path)?;
    let report = CrossReport {
        strategy: cfg.strategy.as_str(),
        missing_source_users: emb.missing,
        train_users: train_users.len(),
        test_users: test_users.len(),
        tune: tune_report,
        metrics,
    };
    run.write("cross_domain_report.json", &json(&report)?)?;
    let text = format!(
        "strategy={} missing_source_users={} split={}\n{}{}",
        report.strategy,
        report.missing_source_users,
        split.as_str(),
        report.metrics.table(report.strategy),
        report.metrics.to_lines()
    );
    run.say(&text);
    Ok(())
}

#[derive(Serialize)]
struct ProfileReport {
    attr: usize,
    prompt_attrs: Vec<usize>,
    mode: String,
    train_users: usize,
    test_users: usize,
    losses: Vec<f64>,
    metrics: crate::eval::ClassificationReport,
}

fn cmd_predict_profile(run: &mut Run, ckpt: &Path) -> Result<()> {
    let base = run.load_ckpt(ckpt)?;
    let data = run.dataset()?;
    base.check_vocabulary(&data.log.item_ids, None)?;
    let splits = run.splits(&data)?;
    let sequences = run.sequences(&data)?;
    let attr: usize = run.cfg.parse("profile_attr")?;
    let head = ProfileHead::all_but(attr, data.profiles.num_attrs())?;
    let cfg = run.cfg.profile()?;
    run.lap("load");
    let mut model = prepare_profile_model(&base.model, &data, &head, &cfg)?;
    let train = profile_labels(&data, &splits.cold_train, attr)?;
    let test = profile_labels(&data, &splits.cold_test, attr)?;
    let losses = train_profile_head(&mut model, &data, &sequences, &head, &train, &cfg.train)?;
    run.lap("train");
    let metrics = evaluate_profile(&model, &data, &sequences, &test)?;
    run.lap("eval");
    let mut ck = Checkpoint::new(model, data.log.item_ids.clone(), data.profiles.attr_values.clone());
    ck.meta.insert("stage".into(), "predict-profile".into());
    ck.meta.insert("profile_attr".into(), attr.to_string());
    ck.meta.insert("mode".into(), cfg.mode.as_str().into());
    ck.meta.insert("trainable_set".into(), trainable_set(&ck.model));
    let path = run.out_dir.join("profile.ckpt");
    run.save_ckpt(&ck, &path)?;
    let report = ProfileReport {
        attr,
        prompt_attrs: head.prompt_attrs().to_vec(),
        mode: cfg.mode.as_str().into(),
        train_users: train.len(),
        test_users: test.len(),
        losses,
        metrics,
    };
    run.write("profile_report.json", &json(&report)?)?;
    let m = report.metrics;
    let text = format!(
        "attr={attr} mode={}\nacc={:.6}\nprecision={:.6}\nrecall={:.6}\nf1={:.6}\n",
        report.mode, m.acc, m.precision, m.recall, m.f1
    );
    run.say(&text);
    Ok(())
}

/// Parses `key=v1,v2` axes.
pub fn parse_grid(grid: &[String]) -> Result<Vec<(String, Vec<String>)>> {
    if grid.is_empty() {
        return Err(Error::contract("empty sweep grid"));
    }
    grid.iter()
        .map(|g| {
            let (k, vs) = g
                .split_once('=')
                .ok_or_else(|| Error::config(format!("expected key=v1,v2,..., got {g:?}")))?;
            let k = k.trim();
            if !ExperimentConfig::is_key(k) {
                return Err(Error::config(format!("unknown config key {k:?}")));
            }
            let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
            if values.is_empty() {
                return Err(Error::contract(format!("sweep axis {k} has no values")));
            }
            Ok((k.to_string(), values))
        })
        .collect()
}

/// Every combination of axis values, first axis slowest.
pub fn grid_cells(axes: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut cells = vec![Vec::new()];
    for (k, values) in axes {
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for v in values {
                let mut c = cell.clone();
                c.push((k.clone(), v.clone()));
                next.push(c);
            }
        }
        cells = next;
    }
    cells
}

fn cmd_sweep(run: &mut Run, ckpt: &Path, grid: &[String]) -> Result<()> {
    let axes = parse_grid(grid)?;
    let base = run.load_ckpt(ckpt)?;
    let data = run.dataset()?;
    base.check_vocabulary(&data.log.item_ids, None)?;
    let mut csv = String::new();
    for (k, _) in &axes {
        let _ = write!(csv, "{k},");
    }
    csv.push_str("seed,cases,auc");
    for n in CUTOFFS {
        let _ = write!(csv, ",hit@{n}");
    }
    for n in CUTOFFS {
        let _ = write!(csv, ",ndcg@{n}");
    }
    csv.push('\n');
    let mut best: Option<(f64, usize)> = None;
    let cells = grid_cells(&axes);
    for (i, cell) in cells.iter().enumerate() {
        let mut cfg = run.cfg.clone();
        for (k, v) in cell {
            cfg.set(k, v)?;
        }
        let cell_run = Run {
            cfg,
            out_dir: run.out_dir.clone(),
            threads: run.threads,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
            started: Instant::now(),
            stdout: String::new(),
        };
        let splits = cell_run.splits(&data)?;
        let sequences = cell_run.sequences(&data)?;
        let (model, _) = tune(&base.model, &data, &sequences, &splits.cold_train, &cell_run.cfg.tune()?)?;
        let r = eval_model(&cell_run, &model, &data, &sequences, &splits.cold_test, cell_run.cfg.split()?)?;
        for (_, v) in cell {
            let _ = write!(csv, "{v},");
        }
        let _ = write!(csv, "{},{},{}", cell_run.cfg.seed()?, r.cases, r.auc);
        for v in r.hit.iter().chain(&r.ndcg) {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
        if best.is_none_or(|(b, _)| r.auc > b) {
            best = Some((r.auc, i));
        }
        run.lap(&format!("cell{i}"));
    }
    run.write("sweep.csv", csv.as_bytes())?;
    let (auc, i) = best.expect("at least one cell");
    let desc: Vec<String> = cells[i].iter().map(|(k, v)| format!("{k}={v}")).collect();
    let text = format!("{csv}best: {} auc={auc:.6}\n", desc.join(" "));
    run.say(&text);
    Ok(())
}

fn resolve_config(global: &GlobalArgs, command: &Command) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(p) = &global.config {
        cfg.apply_file(p)?;
    }
    for pair in &global.set {
        cfg.set_pair(pair)?;
    }
    if let Some(s) = global.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(p) = &global.interactions {
        cfg.set("interactions", &p.display().to_string())?;
    }
    if let Some(p) = &global.profiles {
        cfg.set("profiles", &p.display().to_string())?;
    }
    match command {
        Command::Tune {
            mode, lambda, strategy, ..
        } => {
            if let Some(m) = mode {
                cfg.set("mode", m)?;
            }
            if let Some(l) = lambda {
                cfg.set("lambda", &l.to_string())?;
            }
            if let Some(s) = strategy {
                cfg.set("strategy", s)?;
            }
        }
        Command::Eval { split: Some(s), .. } => cfg.set("split", s)?,
        Command::CrossDomain { strategy, raw_prompt, .. } => {
            if let Some(s) = strategy {
                cfg.set("cross_strategy", s)?;
            }
            if *raw_prompt {
                cfg.set("raw_prompt", "true")?;
            }
        }
        Command::PredictProfile { attr, mode, .. } => {
            if let Some(a) = attr {
                cfg.set("profile_attr", &a.to_string())?;
            }
            if let Some(m) = mode {
                cfg.set("mode", m)?;
            }
        }
        _ => {}
    }
    Ok(cfg)
}

/// Executes `command` under a fully resolved config and writes its
/// manifest. Returns the manifest and the command's report text.
pub fn execute(command: &Command, cfg: ExperimentConfig, out_dir: &Path, threads: usize, args: Vec<String>) -> Result<(RunManifest, String)> {
    if threads == 0 {
        return Err(Error::config("threads must be at least 1"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    log::info!("resolved config:\n{}", cfg.to_text());
    let mut run = Run {
        cfg,
        out_dir: out_dir.to_path_buf(),
        threads,
        inputs: Vec::new(),
        outputs: Vec::new(),
        timings: BTreeMap::new(),
        started: Instant::now(),
        stdout: String::new(),
    };
    let verb = command.verb();
    let resolved = run.cfg.to_text();
    run.write(&format!("{verb}.config"), resolved.as_bytes())?;
    match command {
        Command::GenData => cmd_gen_data(&mut run)?,
        Command::Pretrain { out } => cmd_pretrain(&mut run, out.clone())?,
        Command::Tune { ckpt, out, .. } => cmd_tune(&mut run, ckpt, out.clone())?,
        Command::Eval { ckpt, label, .. } => cmd_eval(&mut run, ckpt, label.clone())?,
        Command::CrossDomain {
            source_ckpt,
            source_data,
            target_data,
            out,
            ..
        } => cmd_cross_domain(&mut run, source_ckpt, source_data, target_data, out.clone())?,
        Command::PredictProfile { ckpt, .. } => cmd_predict_profile(&mut run, ckpt)?,
        Command::Sweep { ckpt, grid } => cmd_sweep(&mut run, ckpt, grid)?,
        Command::Replay { .. } => return Err(Error::contract("replay cannot be nested")),
    }
    run.lap("total");
    let manifest = RunManifest {
        command: verb.into(),
        args,
        config: run.cfg.as_map().clone(),
        seed: run.cfg.seed()?,
        build: BUILD_ID.into(),
        out_dir: out_dir.display().to_string(),
        threads,
        inputs: run.inputs,
        outputs: run.outputs,
        timings_ms: run.timings,
    };
    let path = out_dir.join(format!("{verb}.manifest.json"));
    fs::write(&path, json(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok((manifest, run.stdout))
}

/// Re-runs a manifest's command with its recorded config, optionally into
/// a different output directory.
pub fn replay(manifest_path: &Path, out_dir: Option<&Path>) -> Result<(RunManifest, String)> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let old: RunManifest = serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", manifest_path.display())))?;
    let mut argv = vec!["promptrec".to_string()];
    argv.extend(old.args.iter().cloned());
    let cli = Cli::try_parse_from(&argv).map_err(|e| Error::config(format!("recorded arguments do not parse: {e}")))?;
    if matches!(cli.command, Command::Replay { .. }) {
        return Err(Error::config("a replay manifest cannot point at another replay"));
    }
    let mut cfg = ExperimentConfig::default();
    for (k, v) in &old.config {
        cfg.set(k, v)?;
    }
    let dir = out_dir.map_or_else(|| PathBuf::from(&old.out_dir), Path::to_path_buf);
    let out_of = |p: &Option<PathBuf>| -> Option<PathBuf> {
        match (p, out_dir) {
            (Some(p), Some(d)) => p.file_name().map(|f| d.join(f)),
            (p, _) => p.clone(),
        }
    };
    let command = match cli.command {
        Command::Pretrain { out } => Command::Pretrain { out: out_of(&out) },
        Command::Tune {
            ckpt,
            out,
            mode,
            lambda,
            strategy,
        } => Command::Tune {
            ckpt,
            out: out_of(&out),
            mode,
            lambda,
            strategy,
        },
        Command::CrossDomain {
            source_ckpt,
            source_data,
            target_data,
            strategy,
            raw_prompt,
            out,
        } => Command::CrossDomain {
            source_ckpt,
            source_data,
            target_data,
            strategy,
            raw_prompt,
            out: out_of(&out),
        },
        other => other,
    };
    execute(&command, cfg, &dir, old.threads, old.args.clone())
}

/// Entry point shared by the binary and tests. `args` excludes the
/// program name.
pub fn run(args: Vec<String>) -> Result<String> {
    let mut argv = vec!["promptrec".to_string()];
    argv.extend(args.iter().cloned());
    let cli = Cli::try_parse_from(&argv).map_err(|e| Error::config(e.to_string()))?;
    run_cli(cli, args)
}

pub fn run_cli(cli: Cli, args: Vec<String>) -> Result<String> {
    if let Command::Replay { manifest } = &cli.command {
        return replay(manifest, cli.global.out_dir.as_deref()).map(|(_, out)| out);
    }
    let cfg = resolve_config(&cli.global, &cli.command)?;
    let out_dir = cli.global.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    execute(&cli.command, cfg, &out_dir, cli.global.threads, args).map(|(_, out)| out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_cells_are_the_cartesian_product() {
        let axes = parse_grid(&["lr=0.1,0.01".into(), "lambda=0,0.1,0.2".into()]).unwrap();
        let cells = grid_cells(&axes);
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[0], vec![("lr".into(), "0.1".into()), ("lambda".into(), "0".into())]);
        assert_eq!(grid_cells(&parse_grid(&["lr=0.1".into()]).unwrap()).len(), 1);
        assert!(matches!(parse_grid(&[]), Err(Error::Contract(_))));
        assert!(matches!(parse_grid(&["nope=1".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::try_parse_from([
            "promptrec", "--seed", "9", "--set", "lr=0.5", "tune", "--ckpt", "a", "--mode", "full", "--lambda", "0",
        ])
        .unwrap();
        let cfg = resolve_config(&cli.global, &cli.command).unwrap();
        assert_eq!(cfg.get("seed"), "9");
        assert_eq!(cfg.get("lr"), "0.5");
        assert_eq!(cfg.get("mode"), "full");
        assert_eq!(cfg.get("lambda"), "0");
    }
}
