//! The recommender: a pre-trainable backbone plus optional profile-driven
//! prompt generator (ϑ) and attribute learner (φ).
//!
//! Linear maps act on row vectors (`x·W`), so a weight documented
//! elsewhere as `d'×d1` is stored here as `d1×d'`.

use rand::{Rng, RngCore};

use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::{Bindings, Group, ParamCounts, ParamStore};
use crate::tensor::{Tape, Var};

pub const PPG_W1: &str = "prompt.w1";
pub const PPG_B1: &str = "prompt.b1";
pub const PPG_W2: &str = "prompt.w2";
pub const PPG_B2: &str = "prompt.b2";
/// Learned stand-in input for users without source-domain features.
pub const PPG_DEFAULT: &str = "prompt.default";
pub const MLP_W1: &str = "profile.w1";
pub const MLP_B1: &str = "profile.b1";
pub const MLP_W2: &str = "profile.w2";
pub const MLP_B2: &str = "profile.b2";

pub fn attr_table(a: usize) -> String {
    format!("profile.attr{a}")
}

/// Where the per-user feature vector x_u comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum Features {
    /// Concatenated embeddings of the listed profile columns. `vocab[k]`
    /// is the observed vocabulary of column `attrs[k]`; each table has one
    /// extra row for "missing".
    Attributes {
        attrs: Vec<usize>,
        vocab: Vec<usize>,
        dim: usize,
    },
    /// A fixed external vector per user (e.g. a source-domain embedding).
    Dense { dim: usize },
}

impl Features {
    pub fn width(&self) -> usize {
        match self {
            Features::Attributes { attrs, dim, .. } => attrs.len() * dim,
            Features::Dense { dim } => *dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptConfig {
    pub features: Features,
    /// Prompt length n.
    pub prompt_len: usize,
    /// Hidden width d' of the generator.
    pub hidden: usize,
    /// Prefix generated prompts to the behavior sequence.
    pub use_prompt: bool,
    /// Add the attribute representation u_a to the user representation.
    pub use_profile: bool,
    /// Use x_u itself as the single prompt row instead of the generator.
    pub raw_prompt: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub num_items: usize,
    pub prompt: Option<PromptConfig>,
}

impl ModelConfig {
    pub fn prompt_rows(&self) -> usize {
        match &self.prompt {
            Some(p) if p.use_prompt => p.prompt_len,
            _ => 0,
        }
    }

    pub fn use_profile(&self) -> bool {
        self.prompt.as_ref().is_some_and(|p| p.use_profile)
    }

    /// Longest behavior input that fits next to the prompt.
    pub fn item_capacity(&self) -> usize {
        self.encoder.max_seq_len - self.prompt_rows()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_items == 0 {
            return Err(Error::config("num_items must be positive"));
        }
        if let Some(p) = &self.prompt {
            if p.features.width() == 0 {
                return Err(Error::config("prompt features must have positive width"));
            }
            if let Features::Attributes { attrs, vocab, .. } = &p.features {
                if attrs.len() != vocab.len() {
                    return Err(Error::config("one vocabulary size per prompt attribute"));
                }
            }
            if p.use_prompt {
                if p.prompt_len == 0 || p.prompt_len >= self.encoder.max_seq_len {
                    return Err(Error::config(format!(
                        "prompt length {} must be in [1, max_seq_len)",
                        p.prompt_len
                    )));
                }
                if p.raw_prompt && (p.prompt_len != 1 || p.features.width() != self.encoder.model_dim) {
                    return Err(Error::config(
                        "raw prompts need prompt_len 1 and feature width equal to model_dim",
                    ));
                }
                if !p.raw_prompt && p.hidden == 0 {
                    return Err(Error::config("prompt hidden width must be positive"));
                }
            }
            if !p.use_prompt && !p.use_profile {
                return Err(Error::config("a prompt config must enable the prompt or the profile path"));
            }
        }
        Ok(())
    }
}

/// Per-user side input matching [`Features`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UserFeatures<'a> {
    /// The user's full profile row (all columns).
    Profile(&'a [Option<usize>]),
    /// External vector, or `None` for the learned default.
    Dense(Option<&'a [f64]>),
}

/// The tuning regime: which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuningMode {
    /// Only ϑ, φ and task heads; the backbone stays frozen.
    Light,
    /// Everything.
    Full,
}

impl TuningMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "light" => Ok(TuningMode::Light),
            "full" => Ok(TuningMode::Full),
            other => Err(Error::config(format!("unknown mode {other:?} (light|full)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TuningMode::Light => "light",
            TuningMode::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Output of one causal pass for one user.
#[derive(Debug, Clone, Copy)]
pub struct UserPass {
    /// Row `r` is the representation after `first_prefix + r` input items.
    pub reps: Option<Var>,
    pub first_prefix: usize,
    /// Last row of H^L (u_s over the whole input), when the encoder ran.
    pub last_hidden: Option<Var>,
    /// x_u, when the config has features.
    pub features: Option<Var>,
}

impl Model {
    /// Backbone-only model with freshly initialized Θ.
    pub fn new_backbone<R: Rng + ?Sized>(encoder: EncoderConfig, num_items: usize, rng: &mut R) -> Result<Self> {
        let config = ModelConfig {
            encoder,
            num_items,
            prompt: None,
        };
        config.validate()?;
        let mut params = ParamStore::new();
        encoder::init_backbone(&mut params, &encoder, num_items, rng)?;
        Ok(Self { config, params })
    }

    /// Copies `base`'s backbone and initializes the prompt-side groups.
    pub fn with_prompt<R: Rng + ?Sized>(base: &Model, prompt: PromptConfig, rng: &mut R) -> Result<Self> {
        let config = ModelConfig {
            encoder: base.config.encoder,
            num_items: base.config.num_items,
            prompt: Some(prompt),
        };
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, p) in base.params.iter().filter(|(_, p)| p.group == Group::Backbone) {
            let mut t = p.tensor.clone();
            t.set_requires_grad(false);
            params.insert(name, Group::Backbone, t)?;
        }
        let mut model = Self { config, params };
        model.init_prompt_side(rng)?;
        Ok(model)
    }

    fn init_prompt_side<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let p = self.config.prompt.clone().expect("prompt config present");
        let d = self.config.encoder.model_dim;
        let d1 = p.features.width();
        let s = &mut self.params;
        match &p.features {
            Features::Attributes { attrs, vocab, dim } => {
                for (k, &a) in attrs.iter().enumerate() {
                    s.init_weight(&attr_table(a), Group::ProfileLearner, vec![vocab[k] + 1, *dim], rng)?;
                }
            }
            Features::Dense { dim } => {
                s.init_weight(PPG_DEFAULT, Group::PromptGenerator, vec![1, *dim], rng)?;
            }
        }
        if p.use_prompt && !p.raw_prompt {
            s.init_weight(PPG_W1, Group::PromptGenerator, vec![d1, p.hidden], rng)?;
            s.init_zeros(PPG_B1, Group::PromptGenerator, vec![p.hidden])?;
            s.init_weight(PPG_W2, Group::PromptGenerator, vec![p.hidden, p.prompt_len * d], rng)?;
            s.init_zeros(PPG_B2, Group::PromptGenerator, vec![p.prompt_len * d])?;
        }
        if p.use_profile {
            s.init_weight(MLP_W1, Group::ProfileLearner, vec![d1, d], rng)?;
            s.init_zeros(MLP_B1, Group::ProfileLearner, vec![d])?;
            s.init_weight(MLP_W2, Group::ProfileLearner, vec![d, d], rng)?;
            s.init_zeros(MLP_B2, Group::ProfileLearner, vec![d])?;
        }
        Ok(())
    }

    /// Sets trainable flags for `mode` and returns the resulting counts.
    pub fn apply_mode(&mut self, mode: TuningMode) -> Result<ParamCounts> {
        if let Some(p) = &self.config.prompt {
            if p.use_prompt && !self.params.has_group(Group::PromptGenerator) {
                return Err(Error::checkpoint("prompt generator parameters are missing"));
            }
            if p.use_profile && !self.params.has_group(Group::ProfileLearner) {
                return Err(Error::checkpoint("profile learner parameters are missing"));
            }
        }
        if !self.params.has_group(Group::Backbone) {
            return Err(Error::checkpoint("backbone parameters are missing"));
        }
        self.params.set_all_trainable(true);
        if mode == TuningMode::Light {
            self.params.set_group_trainable(Group::Backbone, false);
        }
        Ok(self.params.counts())
    }

    /// x_u as a 1×d1 row.
    pub fn features(&self, tape: &mut Tape<'_>, binds: &Bindings, user: UserFeatures<'_>) -> Result<Var> {
        let p = self.prompt_config()?;
        match (&p.features, user) {
            (Features::Attributes { attrs, vocab, .. }, UserFeatures::Profile(row)) => {
                let mut parts = Vec::with_capacity(attrs.len());
                for (k, &a) in attrs.iter().enumerate() {
                    let v = *row
                        .get(a)
                        .ok_or_else(|| Error::data(format!("profile has no attribute column {a}")))?;
                    let id = v.unwrap_or(vocab[k]);
                    if id > vocab[k] {
                        return Err(Error::Index { id, bound: vocab[k] + 1 });
                    }
                    parts.push(tape.gather(binds.var(&attr_table(a))?, &[Some(id)])?);
                }
                if parts.len() == 1 {
                    Ok(parts[0])
                } else {
                    tape.concat_cols(&parts)
                }
            }
            (Features::Dense { dim }, UserFeatures::Dense(Some(v))) => {
                if v.len() != *dim {
                    return Err(Error::Dimension {
                        op: "features",
                        lhs: vec![1, *dim],
                        rhs: vec![1, v.len()],
                    });
                }
                tape.constant(1, *dim, v.to_vec())
            }
            (Features::Dense { .. }, UserFeatures::Dense(None)) => binds.var(PPG_DEFAULT),
            _ => Err(Error::contract("user features do not match the model's feature kind")),
        }
    }

    fn prompt_config(&self) -> Result<&PromptConfig> {
        self.config
            .prompt
            .as_ref()
            .ok_or_else(|| Error::contract("model has no prompt/profile components"))
    }

    /// P^u = W2·σ(W1·x + b1) + b2, reshaped to n×d.
    pub fn generate_prompt(&self, tape: &mut Tape<'_>, binds: &Bindings, x: Var) -> Result<Var> {
        let p = self.prompt_config()?;
        if p.raw_prompt {
            return Ok(x);
        }
        let h = tape.matmul(x, binds.var(PPG_W1)?)?;
        let h = tape.add_row(h, binds.var(PPG_B1)?)?;
        let h = tape.sigmoid(h);
        let o = tape.matmul(h, binds.var(PPG_W2)?)?;
        let o = tape.add_row(o, binds.var(PPG_B2)?)?;
        tape.reshape(o, p.prompt_len, self.config.encoder.model_dim)
    }

    /// u_a = MLP(x), with a ReLU hidden layer of width d.
    pub fn profile_repr(&self, tape: &mut Tape<'_>, binds: &Bindings, x: Var) -> Result<Var> {
        let h = tape.matmul(x, binds.var(MLP_W1)?)?;
        let h = tape.add_row(h, binds.var(MLP_B1)?)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, binds.var(MLP_W2)?)?;
        tape.add_row(o, binds.var(MLP_B2)?)
    }

    /// H^L over `[prompt; items]`.
    pub fn encode_tokens(
        &self,
        tape: &mut Tape<'_>,
        binds: &Bindings,
        prompt: Option<Var>,
        items: &[Option<usize>],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let tokens = match (prompt, items.is_empty()) {
            (Some(p), true) => p,
            (Some(p), false) => {
                let e = encoder::embed_items(tape, binds, items)?;
                tape.concat_rows(&[p, e])?
            }
            (None, false) => encoder::embed_items(tape, binds, items)?,
            (None, true) => return Err(Error::contract("nothing to encode")),
        };
        encoder::encode(tape, binds, &self.config.encoder, tokens, rng)
    }

    /// One causal pass producing the representation after every prefix of
    /// `items` (u_p = u_a + u_s where configured).
    pub fn user_pass(
        &self,
        tape: &mut Tape<'_>,
        binds: &Bindings,
        items: &[Option<usize>],
        user: Option<UserFeatures<'_>>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<UserPass> {
        if items.len() > self.config.item_capacity() {
            return Err(Error::contract(format!(
                "{} items exceed the capacity {}",
                items.len(),
                self.config.item_capacity()
            )));
        }
        let d = self.config.encoder.model_dim;
        let (use_prompt, use_profile) = match &self.config.prompt {
            Some(p) => (p.use_prompt, p.use_profile),
            None => (false, false),
        };
        let x = match (&self.config.prompt, user) {
            (Some(_), Some(u)) => Some(self.features(tape, binds, u)?),
            (Some(_), None) => return Err(Error::contract("this model needs user features")),
            (None, _) => None,
        };
        let prompt = match (use_prompt, x) {
            (true, Some(x)) => Some(self.generate_prompt(tape, binds, x)?),
            _ => None,
        };
        let n = prompt.map_or(0, |p| tape.dims(p).0);
        let hidden = if prompt.is_some() || !items.is_empty() {
            Some(self.encode_tokens(tape, binds, prompt, items, rng)?)
        } else {
            None
        };
        let last_hidden = match hidden {
            Some(h) => Some(encoder::user_representation(tape, h)?),
            None => None,
        };
        let (us, first) = match hidden {
            Some(h) if n > 0 => (Some(tape.slice_rows(h, n - 1, items.len() + 1)?), 0),
            Some(h) if use_profile => {
                let zero = tape.constant(1, d, vec![0.0; d])?;
                (Some(tape.concat_rows(&[zero, h])?), 0)
            }
            Some(h) => (Some(h), 1),
            None if use_profile => (Some(tape.constant(1, d, vec![0.0; d])?), 0),
            None => (None, 1),
        };
        let reps = match (us, use_profile, x) {
            (Some(us), true, Some(x)) => {
                let ua = self.profile_repr(tape, binds, x)?;
                Some(tape.add_row(us, ua)?)
            }
            (us, _, _) => us,
        };
        Ok(UserPass {
            reps,
            first_prefix: first,
            last_hidden,
            features: x,
        })
    }

    pub fn counts(&self) -> ParamCounts {
        self.params.counts()
    }
}

/// Wraps plain item ids as encoder inputs.
pub fn as_inputs(items: &[usize]) -> Vec<Option<usize>> {
    items.iter().map(|&i| Some(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            max_seq_len: 8,
            ffn_hidden: 12,
            dropout: 0.0,
        }
    }

    fn attrs_prompt(use_prompt: bool, use_profile: bool) -> PromptConfig {
        PromptConfig {
            features: Features::Attributes {
                attrs: vec![0, 1],
                vocab: vec![2, 3],
                dim: 4,
            },
            prompt_len: 1,
            hidden: 6,
            use_prompt,
            use_profile,
            raw_prompt: false,
        }
    }

    fn ppr(seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Model::new_backbone(tiny_encoder(), 12, &mut rng).unwrap();
        Model::with_prompt(&base, attrs_prompt(true, true), &mut rng).unwrap()
    }

    #[test]
    fn feature_vector_is_the_concatenation_of_attribute_rows() {
        let m = ppr(1);
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape);
        let x = m.features(&mut tape, &b, UserFeatures::Profile(&[Some(1), None])).unwrap();
        let t0 = m.params.get(&attr_table(0)).unwrap().data();
        let t1 = m.params.get(&attr_table(1)).unwrap().data();
        let mut expect = t0[4..8].to_vec();
        expect.extend_from_slice(&t1[12..16]);
        assert_eq!(tape.value(x), &expect[..]);
        assert!(matches!(
            m.features(&mut tape, &b, UserFeatures::Profile(&[Some(5), Some(0)])),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn zero_generator_weights_give_the_bias_as_prompt() {
        let mut m = ppr(2);
        m.params.get_mut(PPG_W1).unwrap().data_mut().fill(0.0);
        m.params.get_mut(PPG_W2).unwrap().data_mut().fill(0.0);
        m.params.get_mut(PPG_B2).unwrap().data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f64);
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape);
        for row in [[Some(0), Some(0)], [Some(1), Some(2)]] {
            let x = m.features(&mut tape, &b, UserFeatures::Profile(&row)).unwrap();
            let p = m.generate_prompt(&mut tape, &b, x).unwrap();
            assert_eq!(tape.value(p), (0..8).map(f64::from).collect::<Vec<_>>());
        }
    }

    #[test]
    fn prompted_pass_layout() {
        let m = ppr(3);
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape);
        let prof = [Some(0), Some(2)];
        let pass = m.user_pass(&mut tape, &b, &as_inputs(&[3, 4, 5]), Some(UserFeatures::Profile(&prof)), None).unwrap();
        assert_eq!(pass.first_prefix, 0);
        assert_eq!(tape.dims(pass.reps.unwrap()), (4, 8));
        let zero = m.user_pass(&mut tape, &b, &[], Some(UserFeatures::Profile(&prof)), None).unwrap();
        assert_eq!(tape.dims(zero.reps.unwrap()), (1, 8));
        assert!(tape.value(zero.reps.unwrap()).iter().all(|v| v.is_finite()));
        // Row 0 of the longer pass is the zero-shot representation.
        assert_eq!(&tape.value(pass.reps.unwrap())[..8], tape.value(zero.reps.unwrap()));
    }

    #[test]
    fn u_p_is_u_a_plus_u_s() {
        let m = ppr(4);
        let prof = [Some(1), Some(1)];
        let items = as_inputs(&[7, 2]);
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape);
        let pass = m.user_pass(&mut tape, &b, &items, Some(UserFeatures::Profile(&prof)), None).unwrap();
        let up = tape.value(pass.reps.unwrap())[16..24].to_vec();
        // Independent recomputation of both terms.
        let x = m.features(&mut tape, &b, UserFeatures::Profile(&prof)).unwrap();
        let ua = m.profile_repr(&mut tape, &b, x).unwrap();
        let p = m.generate_prompt(&mut tape, &b, x).unwrap();
        let h = m.encode_tokens(&mut tape, &b, Some(p), &items, None).unwrap();
        let us = encoder::user_representation(&mut tape, h).unwrap();
        for j in 0..8 {
            let sum = tape.value(ua)[j] + tape.value(us)[j];
            assert!((up[j] - sum).abs() < 1e-12);
            assert!((up[j] - tape.value(us)[j] - tape.value(ua)[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_profile_output_leaves_u_s() {
        let mut m = ppr(5);
        m.params.get_mut(MLP_W2).unwrap().data_mut().fill(0.0);
        let prof = [Some(0), Some(1)];
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape);
        let pass = m.user_pass(&mut tape, &b, &as_inputs(&[1]), Some(UserFeatures::Profile(&prof)), None).unwrap();
        let last = tape.value(pass.reps.unwrap())[8..16].to_vec();
        assert_eq!(last, tape.value(pass.last_hidden.unwrap()));
    }

    #[test]
    fn modes_set_trainable_groups() {
        let mut m = ppr(6);
        let light = m.apply_mode(TuningMode::Light).unwrap();
        let new = m.params.group_size(Group::PromptGenerator) + m.params.group_size(Group::ProfileLearner);
        assert_eq!(light.trainable, new);
        let full = m.apply_mode(TuningMode::Full).unwrap();
        assert_eq!(full.trainable, full.total);
        m.params.remove(PPG_W1);
        m.params.remove(PPG_B1);
        m.params.remove(PPG_W2);
        m.params.remove(PPG_B2);
        assert!(matches!(m.apply_mode(TuningMode::Light), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn backbone_only_pass_starts_at_prefix_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = Model::new_backbone(tiny_encoder(), 12, &mut rng).unwrap();
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape);
        let pass = m.user_pass(&mut tape, &b, &as_inputs(&[1, 2]), None, None).unwrap();
        assert_eq!(pass.first_prefix, 1);
        assert_eq!(tape.dims(pass.reps.unwrap()), (2, 8));
        let empty = m.user_pass(&mut tape, &b, &[], None, None).unwrap();
        assert!(empty.reps.is_none());
    }

    #[test]
    fn fine_tune_pass_has_a_profile_only_zero_shot_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = Model::new_backbone(tiny_encoder(), 12, &mut rng).unwrap();
        let m = Model::with_prompt(&base, attrs_prompt(false, true), &mut rng).unwrap();
        let prof = [Some(0), Some(0)];
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape);
        let pass = m.user_pass(&mut tape, &b, &as_inputs(&[4]), Some(UserFeatures::Profile(&prof)), None).unwrap();
        assert_eq!(tape.dims(pass.reps.unwrap()), (2, 8));
        let x = m.features(&mut tape, &b, UserFeatures::Profile(&prof)).unwrap();
        let ua = m.profile_repr(&mut tape, &b, x).unwrap();
        assert_eq!(&tape.value(pass.reps.unwrap())[..8], tape.value(ua));
    }
}
