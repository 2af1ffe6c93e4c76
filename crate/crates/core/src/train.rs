//! Mini-batch training loop shared by pre-training and tuning.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::Serialize;

use crate::contrastive::{self, ClConfig, ViewInput};
use crate::encoder;
use crate::error::{Error, Result};
use crate::model::{Model, UserFeatures};
use crate::params::Bindings;
use crate::pretrain::{bpr_loss, crop_reorder_augment, sample_negative, SeqClConfig};
use crate::seed;
use crate::tensor::{AdamConfig, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Target number of (prefix, positive) examples per optimizer step.
    /// Users are never split across batches.
    pub batch_size: usize,
    pub lr: f64,
    /// Sampled negatives per positive.
    pub negatives: usize,
    pub seed: u64,
    /// Epochs without held-out improvement before stopping; 0 disables.
    pub patience: usize,
    /// Train on every prefix of each sequence, or only on the last click.
    pub all_prefixes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 256,
            lr: 1e-3,
            negatives: 1,
            seed: 0,
            patience: 3,
            all_prefixes: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.negatives == 0 || self.epochs == 0 {
            return Err(Error::config("epochs, batch_size and negatives must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// One user's training material.
#[derive(Debug, Clone, Copy)]
pub struct TrainUser<'a> {
    pub id: usize,
    /// Full click sequence; every click after the ones the model can see
    /// becomes a positive.
    pub items: &'a [usize],
    pub features: Option<UserFeatures<'a>>,
}

/// Auxiliary objectives added to the ranking loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Objective {
    pub prompt_cl: Option<ClConfig>,
    pub seq_cl: Option<SeqClConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Example-weighted mean of the total loss.
    pub loss: f64,
    pub bpr: f64,
    /// Batch mean of the contrastive term, when enabled.
    pub cl: Option<f64>,
    pub examples: usize,
    pub val_bpr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub steps: u64,
    pub trainable: usize,
    pub total: usize,
}

/// Training inputs for one user: the visible items and, per
/// representation row, the clicked item it should rank first.
struct Prepared<'a> {
    user: &'a TrainUser<'a>,
    input: Vec<Option<usize>>,
    targets: Vec<(usize, usize)>,
    clicks: HashSet<usize>,
}

fn first_prefix(model: &Model) -> usize {
    if model.config.prompt_rows() > 0 || model.config.use_profile() {
        0
    } else {
        1
    }
}

fn prepare<'a>(model: &Model, user: &'a TrainUser<'a>, all_prefixes: bool) -> Prepared<'a> {
    let seq = user.items;
    let first = first_prefix(model);
    let visible = seq.len().saturating_sub(1);
    let offset = visible.saturating_sub(model.config.item_capacity());
    let input: Vec<Option<usize>> = seq[offset..visible].iter().map(|&i| Some(i)).collect();
    let mut targets = Vec::new();
    if !seq.is_empty() {
        for j in first..=input.len() {
            if offset > 0 && j == 0 {
                continue;
            }
            if !all_prefixes && j != input.len() {
                continue;
            }
            targets.push((j - first, seq[offset + j]));
        }
    }
    Prepared {
        user,
        input,
        targets,
        clicks: seq.iter().copied().collect(),
    }
}

struct BatchOut {
    loss: Var,
    lp: Var,
    lcl: Option<Var>,
    bpr: f64,
    cl: Option<f64>,
    examples: usize,
}

fn batch_loss<R: Rng + RngCore>(
    model: &Model,
    tape: &mut Tape<'_>,
    binds: &Bindings,
    batch: &[&Prepared<'_>],
    cfg: &TrainConfig,
    objective: &Objective,
    rng: &mut R,
) -> Result<Option<BatchOut>> {
    let item_table = binds.var(encoder::ITEM_EMB)?;
    let dropout = model.config.encoder.dropout > 0.0;
    let mut pos_scores = Vec::new();
    let mut neg_scores = Vec::new();
    let mut orig = Vec::new();
    let mut views = Vec::new();
    let mut examples = 0;
    for p in batch {
        if p.targets.is_empty() {
            continue;
        }
        let drng: Option<&mut dyn RngCore> = if dropout { Some(&mut *rng) } else { None };
        let pass = model.user_pass(tape, binds, &p.input, p.user.features, drng)?;
        let Some(reps) = pass.reps else { continue };
        let mut rows = Vec::new();
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for &(r, item) in &p.targets {
            for _ in 0..cfg.negatives {
                rows.push(Some(r));
                pos.push(Some(item));
                neg.push(Some(sample_negative(&p.clicks, model.config.num_items, rng)?));
            }
        }
        examples += p.targets.len();
        let sel = tape.gather(reps, &rows)?;
        let pe = tape.gather(item_table, &pos)?;
        let ne = tape.gather(item_table, &neg)?;
        pos_scores.push(tape.row_dot(sel, pe)?);
        neg_scores.push(tape.row_dot(sel, ne)?);
        if objective.prompt_cl.as_ref().is_some_and(ClConfig::active) {
            if let (Some(h), Some(x), Some(f)) = (pass.last_hidden, pass.features, p.user.features) {
                orig.push(h);
                views.push(ViewInput {
                    items: &p.input,
                    features: f,
                    x,
                });
            }
        }
    }
    if pos_scores.is_empty() {
        return Ok(None);
    }
    let pos = tape.concat_rows(&pos_scores)?;
    let neg = tape.concat_rows(&neg_scores)?;
    let lp = bpr_loss(tape, pos, neg)?;
    let bpr = tape.scalar(lp);
    let mut loss = lp;
    let mut cl_value = None;
    let mut cl_var = None;

    if let Some(cl) = objective.prompt_cl.as_ref().filter(|c| c.active()) {
        if !orig.is_empty() {
            let o = tape.concat_rows(&orig)?;
            let (v1, v2) = contrastive::augmented_views(model, tape, binds, &views, &cl.aug, rng)?;
            let lcl = contrastive::cl_loss(tape, o, v1, v2, cl.tau)?;
            cl_value = Some(tape.scalar(lcl));
            cl_var = Some(lcl);
            loss = contrastive::total_loss(tape, lp, lcl, cl.lambda)?;
        }
    }
    if let Some(cl) = objective.seq_cl.as_ref().filter(|c| c.lambda > 0.0) {
        let mut va = Vec::new();
        let mut vb = Vec::new();
        for p in batch.iter().filter(|p| !p.input.is_empty()) {
            for out in [&mut va, &mut vb] {
                let op = *cl.ops.choose(rng).expect("non-empty ops");
                let view = crop_reorder_augment(&p.input, op, cl.ratio, rng);
                let h = model.encode_tokens(tape, binds, None, &view, None)?;
                out.push(encoder::user_representation(tape, h)?);
            }
        }
        if !va.is_empty() {
            let a = tape.concat_rows(&va)?;
            let b = tape.concat_rows(&vb)?;
            let lcl = contrastive::info_nce(tape, a, b, cl.tau)?;
            cl_value = Some(tape.scalar(lcl));
            cl_var = Some(lcl);
            loss = contrastive::total_loss(tape, lp, lcl, cl.lambda)?;
        }
    }
    Ok(Some(BatchOut {
        loss,
        lp,
        lcl: cl_var,
        bpr,
        cl: cl_value,
        examples,
    }))
}

/// Loss terms of one batch recorded on a caller's tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub ranking: Var,
    pub contrastive: Option<Var>,
}

/// Records the training loss of `users` as one batch, with negatives and
/// augmentations drawn from `seed`. Returns `None` when no user has a
/// target.
pub fn objective_loss<'a>(
    model: &Model,
    tape: &mut Tape<'_>,
    binds: &Bindings,
    users: &'a [TrainUser<'a>],
    cfg: &TrainConfig,
    objective: &Objective,
    seed: u64,
) -> Result<Option<LossTerms>> {
    let prepared: Vec<Prepared<'a>> = users.iter().map(|u| prepare(model, u, cfg.all_prefixes)).collect();
    let batch: Vec<&Prepared<'a>> = prepared.iter().collect();
    let mut rng = seed::rng(seed, &[0x10]);
    Ok(batch_loss(model, tape, binds, &batch, cfg, objective, &mut rng)?.map(|b| LossTerms {
        total: b.loss,
        ranking: b.lp,
        contrastive: b.lcl,
    }))
}

/// Mean BPR over every example of `users`, with negatives fixed by
/// `(seed, user)`.
pub fn mean_bpr(model: &Model, users: &[TrainUser<'_>], seed_base: u64) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for u in users {
        let p = prepare(model, u, true);
        if p.targets.is_empty() {
            continue;
        }
        let mut rng = seed::rng(seed_base, &[u.id as u64, 0xba1]);
        let mut tape = Tape::new();
        let binds = model.params.bind(&mut tape);
        let cfg = TrainConfig {
            negatives: 1,
            ..TrainConfig::default()
        };
        if let Some(out) = batch_loss(model, &mut tape, &binds, &[&p], &cfg, &Objective::default(), &mut rng)? {
            total += out.bpr * out.examples as f64;
            n += out.examples;
        }
    }
    if n == 0 {
        return Err(Error::data("no held-out examples"));
    }
    Ok(total / n as f64)
}

/// Runs `cfg.epochs` epochs of Adam over the trainable parameters of
/// `model`. When `holdout` is non-empty and patience is set, training stops
/// early and the best held-out parameters are restored.
pub fn train(
    model: &mut Model,
    users: &[TrainUser<'_>],
    holdout: &[TrainUser<'_>],
    cfg: &TrainConfig,
    objective: &Objective,
) -> Result<TrainReport> {
    cfg.validate()?;
    if let Some(cl) = &objective.prompt_cl {
        cl.validate()?;
        let prompted = model.config.prompt_rows() > 0;
        if cl.active() && !prompted {
            return Err(Error::config("prompt contrastive loss needs a prompted model"));
        }
    }
    if users.is_empty() {
        return Err(Error::data("no training users"));
    }
    let counts = model.params.counts();
    let mut opt = model.params.adam(AdamConfig::with_lr(cfg.lr))?;
    let mut rng = seed::rng(cfg.seed, &[0x7a11]);
    let prepared: Vec<Prepared<'_>> = users.iter().map(|u| prepare(model, u, cfg.all_prefixes)).collect();
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let early = !holdout.is_empty() && cfg.patience > 0;
    let mut best: Option<(f64, usize, crate::params::ParamStore)> = None;
    let mut stale = 0;
    let mut epochs = Vec::new();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut bpr_sum = 0.0;
        let mut cl_sum = 0.0;
        let mut cl_batches = 0usize;
        let mut examples = 0usize;
        let mut start = 0;
        while start < order.len() {
            let mut end = start;
            let mut count = 0;
            while end < order.len() && count < cfg.batch_size {
                count += prepared[order[end]].targets.len();
                end += 1;
            }
            let batch: Vec<&Prepared<'_>> = order[start..end].iter().map(|&i| &prepared[i]).collect();
            start = end;
            let step = {
                let mut tape = Tape::new();
                let binds = model.params.bind(&mut tape);
                match batch_loss(model, &mut tape, &binds, &batch, cfg, objective, &mut rng)? {
                    Some(out) => {
                        let value = tape.scalar(out.loss);
                        if !value.is_finite() {
                            return Err(Error::Numeric(format!("non-finite loss in epoch {epoch}")));
                        }
                        let grads = tape.backward(out.loss)?;
                        Some((binds, grads, value, out))
                    }
                    None => None,
                }
            };
            if let Some((binds, grads, value, out)) = step {
                model.params.zero_grad();
                model.params.accumulate(&binds, &grads)?;
                model.params.adam_step(&mut opt)?;
                loss_sum += value * out.examples as f64;
                bpr_sum += out.bpr * out.examples as f64;
                examples += out.examples;
                if let Some(c) = out.cl {
                    cl_sum += c;
                    cl_batches += 1;
                }
            }
        }
        if !model.params.all_finite() {
            return Err(Error::Numeric(format!("parameters diverged in epoch {epoch}")));
        }
        let denom = examples.max(1) as f64;
        let val_bpr = if early {
            Some(mean_bpr(model, holdout, cfg.seed)?)
        } else {
            None
        };
        let stats = EpochStats {
            epoch,
            loss: loss_sum / denom,
            bpr: bpr_sum / denom,
            cl: (cl_batches > 0).then(|| cl_sum / cl_batches as f64),
            examples,
            val_bpr,
        };
        log::info!(
            "epoch {epoch}: loss={:.6} bpr={:.6} cl={:?} val={:?}",
            stats.loss,
            stats.bpr,
            stats.cl,
            stats.val_bpr
        );
        epochs.push(stats);
        if let Some(v) = val_bpr {
            match &best {
                Some((b, _, _)) if v >= *b => {
                    stale += 1;
                    if stale >= cfg.patience {
                        break;
                    }
                }
                _ => {
                    best = Some((v, epoch, model.params.clone()));
                    stale = 0;
                }
            }
        }
    }
    let best_epoch = match best {
        Some((_, e, params)) => {
            model.params = params;
            e
        }
        None => epochs.len(),
    };
    Ok(TrainReport {
        epochs,
        best_epoch,
        steps: opt.steps(),
        trainable: counts.trainable,
        total: counts.total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn backbone() -> Model {
        let enc = EncoderConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            max_seq_len: 6,
            ffn_hidden: 16,
            dropout: 0.0,
        };
        let mut m = Model::new_backbone(enc, 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        m.params.set_all_trainable(true);
        m
    }

    #[test]
    fn two_clicks_make_one_example() {
        let m = backbone();
        let items = [3, 4];
        let u = TrainUser {
            id: 0,
            items: &items,
            features: None,
        };
        let p = prepare(&m, &u, true);
        assert_eq!(p.targets, vec![(0, 4)]);
    }

    #[test]
    fn long_sequences_keep_the_recent_window() {
        let m = backbone();
        let items: Vec<usize> = (0..9).collect();
        let u = TrainUser {
            id: 0,
            items: &items,
            features: None,
        };
        let p = prepare(&m, &u, true);
        assert_eq!(p.input, (2..8).map(Some).collect::<Vec<_>>());
        assert_eq!(p.targets.first(), Some(&(0, 3)));
        assert_eq!(p.targets.last(), Some(&(5, 8)));
        let last = prepare(&m, &u, false);
        assert_eq!(last.targets, vec![(5, 8)]);
    }

    #[test]
    fn one_step_widens_the_margin() {
        let mut m = backbone();
        let items = [1, 2, 3];
        let users = [TrainUser {
            id: 0,
            items: &items,
            features: None,
        }];
        let cfg = TrainConfig {
            epochs: 1,
            lr: 1e-2,
            patience: 0,
            ..TrainConfig::default()
        };
        let before = mean_bpr(&m, &users, 5).unwrap();
        train(&mut m, &users, &[], &cfg, &Objective::default()).unwrap();
        assert!(mean_bpr(&m, &users, 5).unwrap() < before);
    }
}
