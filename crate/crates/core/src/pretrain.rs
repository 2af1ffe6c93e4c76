//! Next-item BPR pre-training of the backbone, with an optional
//! sequence-augmented contrastive flavor.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::contrastive::behavior_aug;
use crate::data::Dataset;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::seed;
use crate::tensor::{softplus, Tape, Var};
use crate::train::{self, Objective, TrainConfig, TrainReport, TrainUser};

/// Mean over pairs of −log σ(pos − neg), for k×1 score columns.
pub fn bpr_loss(tape: &mut Tape<'_>, pos: Var, neg: Var) -> Result<Var> {
    let diff = tape.sub(neg, pos)?;
    let l = tape.softplus(diff);
    Ok(tape.mean(l))
}

/// Value-level twin of [`bpr_loss`].
pub fn bpr_loss_values(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    if pos.len() != neg.len() {
        return Err(Error::Dimension {
            op: "bpr_loss",
            lhs: vec![pos.len()],
            rhs: vec![neg.len()],
        });
    }
    Ok(pos.iter().zip(neg).map(|(p, n)| softplus(n - p)).sum::<f64>() / pos.len() as f64)
}

/// Uniform draw from the items the user never clicked (rejection).
pub fn sample_negative<R: Rng + ?Sized>(clicks: &HashSet<usize>, num_items: usize, rng: &mut R) -> Result<usize> {
    if clicks.len() >= num_items && (0..num_items).all(|i| clicks.contains(&i)) {
        return Err(Error::Exhausted { num_items });
    }
    loop {
        let i = rng.gen_range(0..num_items);
        if !clicks.contains(&i) {
            return Ok(i);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqAug {
    Mask,
    Crop,
    Reorder,
}

impl SeqAug {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(SeqAug::Mask),
            "crop" => Ok(SeqAug::Crop),
            "reorder" => Ok(SeqAug::Reorder),
            other => Err(Error::config(format!("unknown augmentation {other:?} (mask|crop|reorder)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SeqAug::Mask => "mask",
            SeqAug::Crop => "crop",
            SeqAug::Reorder => "reorder",
        }
    }
}

/// Crop keeps a random window of ⌈(1−ratio)·n⌉ items, reorder shuffles a
/// random window of ⌈ratio·n⌉ items, mask zero-masks ⌊ratio·n⌋ positions.
pub fn crop_reorder_augment<R: Rng + ?Sized>(seq: &[Option<usize>], op: SeqAug, ratio: f64, rng: &mut R) -> Vec<Option<usize>> {
    let n = seq.len();
    if n <= 1 {
        return seq.to_vec();
    }
    match op {
        SeqAug::Mask => behavior_aug(seq, ratio, rng),
        SeqAug::Crop => {
            let keep = (((1.0 - ratio) * n as f64).ceil() as usize).clamp(1, n);
            let start = rng.gen_range(0..=n - keep);
            seq[start..start + keep].to_vec()
        }
        SeqAug::Reorder => {
            let w = ((ratio * n as f64).ceil() as usize).min(n);
            let mut out = seq.to_vec();
            if w > 1 {
                let start = rng.gen_range(0..=n - w);
                out[start..start + w].shuffle(rng);
            }
            out
        }
    }
}

/// Contrastive flavor for pre-training: two views per user drawn from
/// `ops`, contrasted with InfoNCE.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqClConfig {
    pub ops: Vec<SeqAug>,
    pub ratio: f64,
    pub tau: f64,
    pub lambda: f64,
}

impl Default for SeqClConfig {
    fn default() -> Self {
        Self {
            ops: vec![SeqAug::Mask, SeqAug::Crop, SeqAug::Reorder],
            ratio: 0.2,
            tau: 0.5,
            lambda: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    /// Share of warm users held out for early stopping.
    pub holdout: f64,
    pub cl: Option<SeqClConfig>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            holdout: 0.05,
            cl: None,
        }
    }
}

/// Trains a fresh backbone on the given (warm) users.
pub fn pretrain(data: &Dataset, users: &[usize], cfg: &PretrainConfig) -> Result<(Model, TrainReport)> {
    if users.is_empty() {
        return Err(Error::data("warm split is empty"));
    }
    if !(0.0..1.0).contains(&cfg.holdout) {
        return Err(Error::config(format!("holdout must be in [0,1), got {}", cfg.holdout)));
    }
    if let Some(cl) = &cfg.cl {
        if cl.ops.is_empty() || !(0.0..=1.0).contains(&cl.ratio) || !(cl.tau > 0.0) {
            return Err(Error::config("invalid contrastive pre-training settings"));
        }
    }
    let mut rng = seed::rng(cfg.train.seed, &[0x1417]);
    let mut model = Model::new_backbone(cfg.encoder, data.num_items(), &mut rng)?;
    model.params.set_all_trainable(true);

    let mut order = users.to_vec();
    order.shuffle(&mut seed::rng(cfg.train.seed, &[0x401d]));
    let n_hold = if order.len() >= 20 {
        (cfg.holdout * order.len() as f64).round() as usize
    } else {
        0
    };
    let (hold, fit) = order.split_at(n_hold);
    let mut fit = fit.to_vec();
    fit.sort_unstable();
    let mut hold = hold.to_vec();
    hold.sort_unstable();

    let to_users = |ids: &[usize]| -> Vec<TrainUser<'_>> {
        ids.iter()
            .map(|&u| TrainUser {
                id: u,
                items: data.sequence(u),
                features: None,
            })
            .collect()
    };
    let objective = Objective {
        prompt_cl: None,
        seq_cl: cfg.cl.clone(),
    };
    let report = train::train(&mut model, &to_users(&fit), &to_users(&hold), &cfg.train, &objective)?;
    model.params.set_all_trainable(false);
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closed_form_bpr_values() {
        assert!((bpr_loss_values(&[1.3], &[1.3]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bpr_loss_values(&[20.0], &[0.0]).unwrap() < 1e-8);
        assert!((bpr_loss_values(&[0.0], &[20.0]).unwrap() - 20.0).abs() < 1e-8);
        assert!(matches!(bpr_loss_values(&[], &[]), Err(Error::Contract(_))));
        let mut t = Tape::new();
        let p = t.constant(2, 1, vec![0.5, 3.0]).unwrap();
        let n = t.constant(2, 1, vec![0.1, -1.0]).unwrap();
        let l = bpr_loss(&mut t, p, n).unwrap();
        assert_eq!(t.scalar(l), bpr_loss_values(&[0.5, 3.0], &[0.1, -1.0]).unwrap());
    }

    #[test]
    fn forced_and_exhausted_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clicks: HashSet<usize> = [0].into();
        for _ in 0..20 {
            assert_eq!(sample_negative(&clicks, 2, &mut rng).unwrap(), 1);
        }
        let all: HashSet<usize> = [0, 1].into();
        assert!(matches!(sample_negative(&all, 2, &mut rng), Err(Error::Exhausted { .. })));
    }

    #[test]
    fn negatives_are_uniform() {
        // Chi-square goodness of fit, 49 degrees of freedom; the 1% upper
        // critical value is 74.92.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let clicks: HashSet<usize> = [3].into();
        let mut counts = [0usize; 50];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_negative(&clicks, 50, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[3], 0);
        let expect = n as f64 / 49.0;
        let chi2: f64 = counts
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != 3)
            .map(|(_, &c)| (c as f64 - expect).powi(2) / expect)
            .sum();
        assert!(chi2 < 74.92, "chi2 = {chi2}");
    }

    #[test]
    fn zero_ratio_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq: Vec<Option<usize>> = (0..7).map(Some).collect();
        for op in [SeqAug::Mask, SeqAug::Crop, SeqAug::Reorder] {
            assert_eq!(crop_reorder_augment(&seq, op, 0.0, &mut rng), seq);
            assert_eq!(crop_reorder_augment(&seq[..1], op, 0.9, &mut rng), &seq[..1]);
        }
    }

    proptest! {
        #[test]
        fn negative_never_clicked(clicks in proptest::collection::hash_set(0usize..30, 0..29), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = sample_negative(&clicks, 30, &mut rng).unwrap();
            prop_assert!(!clicks.contains(&v));
        }

        #[test]
        fn augmentations_keep_vocabulary(
            seq in proptest::collection::vec(0usize..40, 1..25),
            ratio in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input: Vec<Option<usize>> = seq.iter().map(|&i| Some(i)).collect();
            let crop = crop_reorder_augment(&input, SeqAug::Crop, ratio, &mut rng);
            let keep = (((1.0 - ratio) * seq.len() as f64).ceil() as usize).clamp(1, seq.len());
            prop_assert_eq!(crop.len(), if seq.len() <= 1 { seq.len() } else { keep });
            prop_assert!(input.windows(crop.len()).any(|w| w == &crop[..]));

            let re = crop_reorder_augment(&input, SeqAug::Reorder, ratio, &mut rng);
            let mut a = re.clone();
            let mut b = input.clone();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);

            let masked = crop_reorder_augment(&input, SeqAug::Mask, ratio, &mut rng);
            prop_assert!(masked.iter().all(|v| v.is_none() || input.contains(v)));
        }
    }
}
