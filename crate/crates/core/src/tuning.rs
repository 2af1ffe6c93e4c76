//! Adapting a pre-trained backbone to cold-start users.

use serde::Serialize;

use crate::contrastive::ClConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Features, Model, PromptConfig, TuningMode, UserFeatures};
use crate::params::Group;
use crate::seed;
use crate::train::{self, Objective, TrainConfig, TrainReport, TrainUser};

/// What gets attached to the backbone before tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Generated prompt prefix plus the attribute representation.
    Ppr,
    /// No prompt; the attribute representation is added and every
    /// parameter is tuned.
    FineTune,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ppr" => Ok(Strategy::Ppr),
            "finetune" => Ok(Strategy::FineTune),
            other => Err(Error::config(format!("unknown strategy {other:?} (ppr|finetune)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Ppr => "ppr",
            Strategy::FineTune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneConfig {
    pub strategy: Strategy,
    pub mode: TuningMode,
    pub prompt_len: usize,
    /// Generator hidden width; 0 means model_dim.
    pub hidden: usize,
    /// Attribute embedding width; 0 means model_dim.
    pub attr_dim: usize,
    /// Profile columns fed to the prompt side; `None` uses all of them.
    pub attrs: Option<Vec<usize>>,
    pub train: TrainConfig,
    pub cl: ClConfig,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Ppr,
            mode: TuningMode::Light,
            prompt_len: 1,
            hidden: 0,
            attr_dim: 0,
            attrs: None,
            train: TrainConfig::default(),
            cl: ClConfig::default(),
        }
    }
}

impl TuneConfig {
    /// The effective mode: the fine-tuning baseline always tunes everything.
    pub fn effective_mode(&self) -> TuningMode {
        match self.strategy {
            Strategy::Ppr => self.mode,
            Strategy::FineTune => TuningMode::Full,
        }
    }

    pub fn prompt_config(&self, data: &Dataset, model_dim: usize) -> Result<PromptConfig> {
        let vocab_all = data.profiles.vocab_sizes();
        let attrs = self.attrs.clone().unwrap_or_else(|| (0..vocab_all.len()).collect());
        if attrs.is_empty() {
            return Err(Error::config("no profile attributes to build prompts from"));
        }
        let mut vocab = Vec::with_capacity(attrs.len());
        for &a in &attrs {
            vocab.push(*vocab_all.get(a).ok_or_else(|| Error::config(format!("no profile attribute {a}")))?);
        }
        let or_d = |v: usize| if v == 0 { model_dim } else { v };
        Ok(PromptConfig {
            features: Features::Attributes {
                attrs,
                vocab,
                dim: or_d(self.attr_dim),
            },
            prompt_len: self.prompt_len,
            hidden: or_d(self.hidden),
            use_prompt: self.strategy == Strategy::Ppr,
            use_profile: true,
            raw_prompt: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneReport {
    pub strategy: String,
    pub mode: String,
    pub trainable: usize,
    pub total: usize,
    pub trainable_fraction: f64,
    pub train: TrainReport,
}

/// Training users with their profile rows.
pub fn profile_users<'a>(data: &'a Dataset, sequences: &'a [Vec<usize>], users: &[usize]) -> Vec<TrainUser<'a>> {
    users
        .iter()
        .map(|&u| TrainUser {
            id: u,
            items: &sequences[u],
            features: Some(UserFeatures::Profile(data.profiles.user(u))),
        })
        .collect()
}

/// Builds the strategy's model on top of `pretrained` and sets its
/// trainable groups.
pub fn prepare(pretrained: &Model, data: &Dataset, cfg: &TuneConfig) -> Result<Model> {
    if pretrained.config.prompt.is_some() {
        return Err(Error::checkpoint("expected a backbone-only checkpoint"));
    }
    if pretrained.config.num_items != data.num_items() {
        return Err(Error::checkpoint(format!(
            "checkpoint has {} items, data has {}",
            pretrained.config.num_items,
            data.num_items()
        )));
    }
    let prompt = cfg.prompt_config(data, pretrained.config.encoder.model_dim)?;
    let mut rng = seed::rng(cfg.train.seed, &[0x9e0]);
    let mut model = Model::with_prompt(pretrained, prompt, &mut rng)?;
    model.apply_mode(cfg.effective_mode())?;
    Ok(model)
}

/// Tunes an already prepared model on `users`.
pub fn tune_model(model: &mut Model, users: &[TrainUser<'_>], cfg: &TuneConfig) -> Result<TuneReport> {
    let mode = cfg.effective_mode();
    let counts = model.apply_mode(mode)?;
    let frozen = (mode == TuningMode::Light).then(|| model.params.group_digest(Group::Backbone));
    let prompt_cl = (cfg.strategy == Strategy::Ppr && model.config.prompt_rows() > 0).then_some(cfg.cl);
    let objective = Objective {
        prompt_cl,
        seq_cl: None,
    };
    let report = train::train(model, users, &[], &cfg.train, &objective)?;
    if let Some(before) = frozen {
        if model.params.group_digest(Group::Backbone) != before {
            return Err(Error::contract("backbone changed during light tuning"));
        }
    }
    log::info!(
        "tuned {} ({}): {} of {} parameters trainable ({:.4}%)",
        cfg.strategy.as_str(),
        mode.as_str(),
        counts.trainable,
        counts.total,
        100.0 * counts.fraction()
    );
    Ok(TuneReport {
        strategy: cfg.strategy.as_str().into(),
        mode: mode.as_str().into(),
        trainable: counts.trainable,
        total: counts.total,
        trainable_fraction: counts.fraction(),
        train: report,
    })
}

/// Attaches the strategy to `pretrained` and tunes it on the cold-train
/// users, using `sequences` (possibly cropped) as their behavior.
pub fn tune(pretrained: &Model, data: &Dataset, sequences: &[Vec<usize>], users: &[usize], cfg: &TuneConfig) -> Result<(Model, TuneReport)> {
    if users.is_empty() {
        return Err(Error::data("no cold-train users"));
    }
    let mut model = prepare(pretrained, data, cfg)?;
    let train_users = profile_users(data, sequences, users);
    let report = tune_model(&mut model, &train_users, cfg)?;
    Ok((model, report))
}
