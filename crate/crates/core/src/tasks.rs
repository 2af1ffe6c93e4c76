//! Cross-domain prompting from source-domain user embeddings, and profile
//! attribute prediction.

use rand::seq::SliceRandom;

use crate::contrastive::ClConfig;
use crate::data::{Dataset, InteractionLog};
use crate::encoder::{self, suffix_truncate, ITEM_EMB};
use crate::error::{Error, Result};
use crate::eval::{classification_metrics, ClassificationReport};
use crate::model::{as_inputs, Features, Model, PromptConfig, TuningMode, UserFeatures};
use crate::params::{Bindings, Group};
use crate::seed;
use crate::tensor::{sigmoid, softplus, AdamConfig, Tape, Var};
use crate::train::{TrainConfig, TrainUser};
use crate::tuning::{tune_model, Strategy, TuneConfig, TuneReport};

/// u_o of the source model over a user's source behaviors; `None` when the
/// user has none.
pub fn source_user_embedding(source: &Model, seq: &[usize]) -> Result<Option<Vec<f64>>> {
    if seq.is_empty() {
        return Ok(None);
    }
    let input = as_inputs(suffix_truncate(seq, source.config.item_capacity()));
    let mut tape = Tape::new();
    let binds = source.params.bind(&mut tape);
    let h = source.encode_tokens(&mut tape, &binds, None, &input, None)?;
    let u = encoder::user_representation(&mut tape, h)?;
    Ok(Some(tape.value(u).to_vec()))
}

/// Source representations indexed by target user.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceEmbeddings {
    pub dim: usize,
    pub vectors: Vec<Option<Vec<f64>>>,
    /// Target users that fell back to the learned default vector.
    pub missing: usize,
}

impl SourceEmbeddings {
    pub fn features(&self, user: usize) -> UserFeatures<'_> {
        UserFeatures::Dense(self.vectors.get(user).and_then(|v| v.as_deref()))
    }
}

/// Matches target users to source users by id.
pub fn source_embeddings(source: &Model, source_log: &InteractionLog, target_log: &InteractionLog) -> Result<SourceEmbeddings> {
    let index = source_log.user_index();
    let mut vectors = Vec::with_capacity(target_log.num_users());
    let mut missing = 0;
    for id in &target_log.user_ids {
        let v = match index.get(id.as_str()) {
            Some(&u) => source_user_embedding(source, &source_log.sequences[u])?,
            None => None,
        };
        missing += usize::from(v.is_none());
        vectors.push(v);
    }
    if missing > 0 {
        log::warn!("{missing} target users have no source history; using the default prompt input");
    }
    Ok(SourceEmbeddings {
        dim: source.config.encoder.model_dim,
        vectors,
        missing,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossStrategy {
    /// Source embeddings generate the prompt.
    Prompt,
    /// Source embeddings feed only the profile learner; no prompt.
    SideInfo,
    /// Target behaviors only.
    TargetOnly,
}

impl CrossStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "prompt" => Ok(CrossStrategy::Prompt),
            "side-info" => Ok(CrossStrategy::SideInfo),
            "target-only" => Ok(CrossStrategy::TargetOnly),
            other => Err(Error::config(format!(
                "unknown cross-domain strategy {other:?} (prompt|side-info|target-only)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CrossStrategy::Prompt => "prompt",
            CrossStrategy::SideInfo => "side-info",
            CrossStrategy::TargetOnly => "target-only",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossConfig {
    pub strategy: CrossStrategy,
    pub mode: TuningMode,
    /// Feed the source embedding in as the prompt row directly.
    pub raw_prompt: bool,
    pub prompt_len: usize,
    /// Generator hidden width; 0 means model_dim.
    pub hidden: usize,
    pub train: TrainConfig,
    pub cl: ClConfig,
}

impl Default for CrossConfig {
    fn default() -> Self {
        Self {
            strategy: CrossStrategy::Prompt,
            mode: TuningMode::Full,
            raw_prompt: false,
            prompt_len: 1,
            hidden: 0,
            train: TrainConfig::default(),
            cl: ClConfig::default(),
        }
    }
}

/// A target-domain model: encoder weights from `source`, a fresh item table
/// of `num_items` rows, and the strategy's prompt side.
pub fn prepare_cross_domain(source: &Model, num_items: usize, emb_dim: usize, cfg: &CrossConfig) -> Result<Model> {
    if cfg.mode != TuningMode::Full {
        return Err(Error::config(
            "cross-domain tuning requires full mode: the target item table is new and has to be trained",
        ));
    }
    if source.config.prompt.is_some() {
        return Err(Error::checkpoint("expected a backbone-only source checkpoint"));
    }
    let mut rng = seed::rng(cfg.train.seed, &[0xc40]);
    let mut base = Model::new_backbone(source.config.encoder, num_items, &mut rng)?;
    base.params.copy_values_from(&source.params, |name| name != ITEM_EMB)?;
    let d = source.config.encoder.model_dim;
    let prompt = match cfg.strategy {
        CrossStrategy::TargetOnly => None,
        s => Some(PromptConfig {
            features: Features::Dense { dim: emb_dim },
            prompt_len: cfg.prompt_len,
            hidden: if cfg.hidden == 0 { d } else { cfg.hidden },
            use_prompt: s == CrossStrategy::Prompt,
            use_profile: s == CrossStrategy::SideInfo,
            raw_prompt: s == CrossStrategy::Prompt && cfg.raw_prompt,
        }),
    };
    let mut model = match prompt {
        Some(p) => Model::with_prompt(&base, p, &mut rng)?,
        None => base,
    };
    model.apply_mode(TuningMode::Full)?;
    Ok(model)
}

/// Tunes a target-domain model on `users` of `target`.
pub fn tune_cross_domain(
    source: &Model,
    target: &Dataset,
    embeddings: &SourceEmbeddings,
    users: &[usize],
    cfg: &CrossConfig,
) -> Result<(Model, TuneReport)> {
    if users.is_empty() {
        return Err(Error::data("no target training users"));
    }
    let mut model = prepare_cross_domain(source, target.num_items(), embeddings.dim, cfg)?;
    let with_features = cfg.strategy != CrossStrategy::TargetOnly;
    let train_users: Vec<TrainUser<'_>> = users
        .iter()
        .map(|&u| TrainUser {
            id: u,
            items: target.sequence(u),
            features: with_features.then(|| embeddings.features(u)),
        })
        .collect();
    let tcfg = TuneConfig {
        strategy: if cfg.strategy == CrossStrategy::Prompt {
            Strategy::Ppr
        } else {
            Strategy::FineTune
        },
        mode: TuningMode::Full,
        train: cfg.train.clone(),
        cl: cfg.cl,
        ..TuneConfig::default()
    };
    let report = tune_model(&mut model, &train_users, &tcfg)?;
    Ok((model, report))
}

pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

/// Which attribute is predicted and which ones may generate prompts.
/// Construction fails when the two overlap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProfileHead {
    target_attr: usize,
    prompt_attrs: Vec<usize>,
}

impl ProfileHead {
    pub fn new(target_attr: usize, prompt_attrs: Vec<usize>) -> Result<Self> {
        if prompt_attrs.contains(&target_attr) {
            return Err(Error::contract(format!(
                "attribute {target_attr} is both the prediction target and a prompt input"
            )));
        }
        if prompt_attrs.is_empty() {
            return Err(Error::config("profile prediction needs at least one other attribute"));
        }
        Ok(Self {
            target_attr,
            prompt_attrs,
        })
    }

    /// Every other column of a profile with `num_attrs` columns.
    pub fn all_but(target_attr: usize, num_attrs: usize) -> Result<Self> {
        if target_attr >= num_attrs {
            return Err(Error::config(format!(
                "attribute {target_attr} out of range for {num_attrs} profile columns"
            )));
        }
        Self::new(target_attr, (0..num_attrs).filter(|&a| a != target_attr).collect())
    }

    pub fn target_attr(&self) -> usize {
        self.target_attr
    }

    pub fn prompt_attrs(&self) -> &[usize] {
        &self.prompt_attrs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileConfig {
    pub mode: TuningMode,
    pub prompt_len: usize,
    /// Generator hidden width and attribute width; 0 means model_dim.
    pub hidden: usize,
    /// `batch_size` counts users here.
    pub train: TrainConfig,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            mode: TuningMode::Light,
            prompt_len: 1,
            hidden: 0,
            train: TrainConfig {
                batch_size: 64,
                ..TrainConfig::default()
            },
        }
    }
}

/// Mean of −[y log σ(z) + (1−y) log(1−σ(z))] over a k×1 logit column.
pub fn bce_with_logits(tape: &mut Tape<'_>, logits: Var, labels: &[f64]) -> Result<Var> {
    let (k, c) = tape.dims(logits);
    if k == 0 || c != 1 || labels.len() != k {
        return Err(Error::Dimension {
            op: "bce_with_logits",
            lhs: vec![k, c],
            rhs: vec![labels.len(), 1],
        });
    }
    let sp = tape.softplus(logits);
    let y = tape.constant(k, 1, labels.to_vec())?;
    let yz = tape.mul(y, logits)?;
    let l = tape.sub(sp, yz)?;
    Ok(tape.mean(l))
}

/// Value-level twin of [`bce_with_logits`] for one example.
pub fn bce_value(logit: f64, label: f64) -> f64 {
    softplus(logit) - label * logit
}

/// `(user, label)` for users whose target attribute is known. The
/// attribute must be binary.
pub fn profile_labels(data: &Dataset, users: &[usize], attr: usize) -> Result<Vec<(usize, bool)>> {
    let vocab = data.profiles.vocab_sizes();
    match vocab.get(attr) {
        None => return Err(Error::config(format!("no profile attribute {attr}"))),
        Some(&v) if v != 2 => {
            return Err(Error::config(format!(
                "attribute {attr} has {v} values; only binary prediction is supported"
            )))
        }
        _ => {}
    }
    Ok(users
        .iter()
        .filter_map(|&u| data.profiles.user(u)[attr].map(|v| (u, v == 1)))
        .collect())
}

/// A prompted model over `head`'s prompt attributes with a fresh linear
/// head, trainable per `cfg.mode`.
pub fn prepare_profile_model(pretrained: &Model, data: &Dataset, head: &ProfileHead, cfg: &ProfileConfig) -> Result<Model> {
    let d = pretrained.config.encoder.model_dim;
    let vocab_all = data.profiles.vocab_sizes();
    let mut vocab = Vec::new();
    for &a in head.prompt_attrs() {
        vocab.push(*vocab_all.get(a).ok_or_else(|| Error::config(format!("no profile attribute {a}")))?);
    }
    let width = if cfg.hidden == 0 { d } else { cfg.hidden };
    let prompt = PromptConfig {
        features: Features::Attributes {
            attrs: head.prompt_attrs().to_vec(),
            vocab,
            dim: width,
        },
        prompt_len: cfg.prompt_len,
        hidden: width,
        use_prompt: true,
        use_profile: true,
        raw_prompt: false,
    };
    let mut rng = seed::rng(cfg.train.seed, &[0x9f0]);
    let mut model = Model::with_prompt(pretrained, prompt, &mut rng)?;
    model.params.init_weight(HEAD_W, Group::TaskHead, vec![d, 1], &mut rng)?;
    model.params.init_zeros(HEAD_B, Group::TaskHead, vec![1])?;
    model.apply_mode(cfg.mode)?;
    Ok(model)
}

fn check_no_leak(model: &Model, attr: usize) -> Result<()> {
    if let Some(PromptConfig {
        features: Features::Attributes { attrs, .. },
        ..
    }) = &model.config.prompt
    {
        if attrs.contains(&attr) {
            return Err(Error::contract(format!("attribute {attr} is a prompt input of this model")));
        }
    }
    Ok(())
}

/// wᵀu_p + b for one user's behaviors.
fn profile_logit(model: &Model, tape: &mut Tape<'_>, binds: &Bindings, seq: &[usize], profile: &[Option<usize>]) -> Result<Var> {
    let input = as_inputs(suffix_truncate(seq, model.config.item_capacity()));
    let pass = model.user_pass(tape, binds, &input, Some(UserFeatures::Profile(profile)), None)?;
    let reps = pass.reps.ok_or_else(|| Error::contract("no user representation"))?;
    let (t, _) = tape.dims(reps);
    let u = tape.row(reps, t - 1)?;
    let z = tape.matmul(u, binds.var(HEAD_W)?)?;
    tape.add_row(z, binds.var(HEAD_B)?)
}

/// σ(wᵀu_p + b).
pub fn predict_profile(model: &Model, seq: &[usize], profile: &[Option<usize>]) -> Result<f64> {
    let mut tape = Tape::new();
    let binds = model.params.bind(&mut tape);
    let z = profile_logit(model, &mut tape, &binds, seq, profile)?;
    Ok(sigmoid(tape.scalar(z)))
}

/// Trains the head (and whatever else `model` has trainable) with binary
/// cross-entropy. Returns the epoch-mean losses.
pub fn train_profile_head(
    model: &mut Model,
    data: &Dataset,
    sequences: &[Vec<usize>],
    head: &ProfileHead,
    labeled: &[(usize, bool)],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_no_leak(model, head.target_attr())?;
    if labeled.is_empty() {
        return Err(Error::data("no labeled users"));
    }
    let positives = labeled.iter().filter(|l| l.1).count();
    if positives == 0 || positives == labeled.len() {
        log::warn!("profile training labels contain a single class");
    }
    let mut opt = model.params.adam(AdamConfig::with_lr(cfg.lr))?;
    let mut rng = seed::rng(cfg.seed, &[0x9f1]);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (binds, grads, value) = {
                let mut tape = Tape::new();
                let binds = model.params.bind(&mut tape);
                let mut logits = Vec::with_capacity(chunk.len());
                let mut ys = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let (u, y) = labeled[i];
                    logits.push(profile_logit(model, &mut tape, &binds, &sequences[u], data.profiles.user(u))?);
                    ys.push(if y { 1.0 } else { 0.0 });
                }
                let z = tape.concat_rows(&logits)?;
                let loss = bce_with_logits(&mut tape, z, &ys)?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Numeric(format!("non-finite profile loss in epoch {epoch}")));
                }
                (binds, tape.backward(loss)?, value)
            };
            model.params.zero_grad();
            model.params.accumulate(&binds, &grads)?;
            model.params.adam_step(&mut opt)?;
            total += value * chunk.len() as f64;
        }
        let mean = total / labeled.len() as f64;
        log::info!("profile epoch {epoch}: bce={mean:.6}");
        losses.push(mean);
    }
    Ok(losses)
}

/// Thresholds predictions at 0.5.
pub fn evaluate_profile(model: &Model, data: &Dataset, sequences: &[Vec<usize>], labeled: &[(usize, bool)]) -> Result<ClassificationReport> {
    let mut pred = Vec::with_capacity(labeled.len());
    let mut truth = Vec::with_capacity(labeled.len());
    for &(u, y) in labeled {
        pred.push(predict_profile(model, &sequences[u], data.profiles.user(u))? >= 0.5);
        truth.push(y);
    }
    classification_metrics(&pred, &truth)
}
