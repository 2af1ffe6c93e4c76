//! Prompt- and behavior-side augmentations and the InfoNCE objective.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Model, UserFeatures};
use crate::params::Bindings;
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationConfig {
    /// Fraction of x_u coordinates zeroed for the prompt-side view.
    pub gamma1: f64,
    /// Fraction of behavior positions replaced by the mask sentinel.
    pub gamma2: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self { gamma1: 0.2, gamma2: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClConfig {
    pub enabled: bool,
    pub tau: f64,
    pub lambda: f64,
    pub aug: AugmentationConfig,
}

impl Default for ClConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            tau: 0.5,
            lambda: 0.1,
            aug: AugmentationConfig::default(),
        }
    }
}

impl ClConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        for (name, g) in [("gamma1", self.aug.gamma1), ("gamma2", self.aug.gamma2)] {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::config(format!("{name} must be in [0,1], got {g}")));
            }
        }
        Ok(())
    }

    /// Whether the auxiliary term contributes at all.
    pub fn active(&self) -> bool {
        self.enabled && self.lambda > 0.0
    }
}

fn count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).floor() as usize).min(n)
}

/// 0/1 pattern with exactly ⌊γ·len⌋ uniformly placed zeros.
pub fn mask_pattern<R: Rng + ?Sized>(len: usize, gamma: f64, rng: &mut R) -> Vec<f64> {
    let mut p = vec![1.0; len];
    for i in sample(rng, len, count(gamma, len)) {
        p[i] = 0.0;
    }
    p
}

/// Element-level masking of the feature row; masked coordinates pass no
/// gradient.
pub fn prompt_aug<R: Rng + ?Sized>(tape: &mut Tape<'_>, x: Var, gamma1: f64, rng: &mut R) -> Result<Var> {
    let (r, c) = tape.dims(x);
    let pattern = mask_pattern(r * c, gamma1, rng);
    tape.mask(x, &pattern)
}

/// Replaces ⌊γ·|seq|⌋ uniformly chosen positions with the mask sentinel.
pub fn behavior_aug<R: Rng + ?Sized>(seq: &[Option<usize>], gamma2: f64, rng: &mut R) -> Vec<Option<usize>> {
    let mut out = seq.to_vec();
    for i in sample(rng, seq.len(), count(gamma2, seq.len())) {
        out[i] = None;
    }
    out
}

/// Mean over users of −log softmax_u'(cos(u_s, ū_s')/τ)[u]. Row `u` of
/// `orig` is paired with row `u` of `aug`; the denominator runs over every
/// augmented row in the batch, including the positive.
pub fn info_nce(tape: &mut Tape<'_>, orig: Var, aug: Var, tau: f64) -> Result<Var> {
    let (n, d) = tape.dims(orig);
    if tape.dims(aug) != (n, d) {
        return Err(Error::Dimension {
            op: "info_nce",
            lhs: vec![n, d],
            rhs: vec![tape.dims(aug).0, tape.dims(aug).1],
        });
    }
    if !(tau > 0.0) {
        return Err(Error::config(format!("tau must be positive, got {tau}")));
    }
    let a = tape.normalize_rows(orig)?;
    let b = tape.normalize_rows(aug)?;
    let sim = tape.matmul_t(a, b)?;
    let sim = tape.scale(sim, 1.0 / tau);
    let ls = tape.log_softmax_rows(sim);
    let diag: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let pos = tape.pick(ls, &diag)?;
    let m = tape.mean(pos);
    Ok(tape.scale(m, -1.0))
}

/// One user's inputs for building contrastive views.
#[derive(Debug, Clone, Copy)]
pub struct ViewInput<'u> {
    pub items: &'u [Option<usize>],
    pub features: UserFeatures<'u>,
    /// x_u already recorded for this user's main pass.
    pub x: Var,
}

/// The two augmented u_s batches: prompt-masked and behavior-masked.
pub fn augmented_views<R: Rng + ?Sized>(
    model: &Model,
    tape: &mut Tape<'_>,
    binds: &Bindings,
    users: &[ViewInput<'_>],
    aug: &AugmentationConfig,
    rng: &mut R,
) -> Result<(Var, Var)> {
    let mut v1 = Vec::with_capacity(users.len());
    let mut v2 = Vec::with_capacity(users.len());
    for u in users {
        let xm = prompt_aug(tape, u.x, aug.gamma1, rng)?;
        let p1 = model.generate_prompt(tape, binds, xm)?;
        let h1 = model.encode_tokens(tape, binds, Some(p1), u.items, None)?;
        v1.push(crate::encoder::user_representation(tape, h1)?);

        let masked = behavior_aug(u.items, aug.gamma2, rng);
        let p2 = model.generate_prompt(tape, binds, u.x)?;
        let h2 = model.encode_tokens(tape, binds, Some(p2), &masked, None)?;
        v2.push(crate::encoder::user_representation(tape, h2)?);
    }
    Ok((tape.concat_rows(&v1)?, tape.concat_rows(&v2)?))
}

/// L_CL: the mean of the two per-view InfoNCE losses.
pub fn cl_loss(tape: &mut Tape<'_>, orig: Var, view1: Var, view2: Var, tau: f64) -> Result<Var> {
    let a = info_nce(tape, orig, view1, tau)?;
    let b = info_nce(tape, orig, view2, tau)?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, 0.5))
}

/// L_all = L_p + λ·L_CL.
pub fn total_loss(tape: &mut Tape<'_>, lp: Var, lcl: Var, lambda: f64) -> Result<Var> {
    let w = tape.scale(lcl, lambda);
    tape.add(lp, w)
}
