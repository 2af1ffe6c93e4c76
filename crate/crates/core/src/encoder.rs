//! Causal self-attention sequence encoder (SASRec-style, post-LN blocks).

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::params::{Bindings, Group, ParamStore};
use crate::tensor::{Tape, Var, MASK_NEG};

pub const ITEM_EMB: &str = "backbone.item_emb";
pub const POS_EMB: &str = "backbone.pos_emb";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub ffn_hidden: usize,
    /// Inverted-dropout rate on sub-layer outputs; applied only when the
    /// caller passes an rng.
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::with_dim(64)
    }
}

impl EncoderConfig {
    pub fn with_dim(d: usize) -> Self {
        Self {
            num_layers: 2,
            model_dim: d,
            num_heads: 2,
            max_seq_len: 50,
            ffn_hidden: 4 * d,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.model_dim;
        if self.num_layers == 0 || d < 2 || self.num_heads == 0 || self.max_seq_len == 0 || self.ffn_hidden == 0 {
            return Err(Error::config(format!("encoder extents must be positive: {self:?}")));
        }
        if d % self.num_heads != 0 {
            return Err(Error::config(format!(
                "model_dim {d} is not divisible by num_heads {}",
                self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        Ok(())
    }
}

fn layer_param(l: usize, name: &str) -> String {
    format!("backbone.l{l}.{name}")
}

/// Adds Θ (item and position embeddings plus every block) to `store`.
pub fn init_backbone<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, num_items: usize, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    if num_items == 0 {
        return Err(Error::config("num_items must be positive"));
    }
    let d = cfg.model_dim;
    let g = Group::Backbone;
    store.init_weight(ITEM_EMB, g, vec![num_items, d], rng)?;
    store.init_weight(POS_EMB, g, vec![cfg.max_seq_len, d], rng)?;
    for l in 0..cfg.num_layers {
        for w in ["wq", "wk", "wv", "wo"] {
            store.init_weight(&layer_param(l, w), g, vec![d, d], rng)?;
        }
        store.init_zeros(&layer_param(l, "bo"), g, vec![d])?;
        store.init_ones(&layer_param(l, "ln1_g"), g, vec![d])?;
        store.init_zeros(&layer_param(l, "ln1_b"), g, vec![d])?;
        store.init_weight(&layer_param(l, "ffn_w1"), g, vec![d, cfg.ffn_hidden], rng)?;
        store.init_zeros(&layer_param(l, "ffn_b1"), g, vec![cfg.ffn_hidden])?;
        store.init_weight(&layer_param(l, "ffn_w2"), g, vec![cfg.ffn_hidden, d], rng)?;
        store.init_zeros(&layer_param(l, "ffn_b2"), g, vec![d])?;
        store.init_ones(&layer_param(l, "ln2_g"), g, vec![d])?;
        store.init_zeros(&layer_param(l, "ln2_b"), g, vec![d])?;
    }
    Ok(())
}

/// Row-major T×T additive mask hiding future positions.
pub fn causal_mask(t: usize) -> Vec<f64> {
    let mut m = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            m[i * t + j] = MASK_NEG;
        }
    }
    m
}

/// Item-embedding rows; `None` is the mask sentinel and embeds to zeros.
pub fn embed_items(tape: &mut Tape<'_>, binds: &Bindings, items: &[Option<usize>]) -> Result<Var> {
    let table = binds.var(ITEM_EMB)?;
    tape.gather(table, items)
}

/// Runs every block over `tokens` (T×d, positions not yet added) and
/// returns the hidden states H^0..H^L.
pub fn encode_states(
    tape: &mut Tape<'_>,
    binds: &Bindings,
    cfg: &EncoderConfig,
    tokens: Var,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Vec<Var>> {
    let (t, d) = tape.dims(tokens);
    if d != cfg.model_dim {
        return Err(Error::Dimension {
            op: "encode",
            lhs: vec![t, d],
            rhs: vec![cfg.max_seq_len, cfg.model_dim],
        });
    }
    if t > cfg.max_seq_len {
        return Err(Error::contract(format!(
            "sequence of length {t} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    let positions: Vec<Option<usize>> = (0..t).map(Some).collect();
    let pos = tape.gather(binds.var(POS_EMB)?, &positions)?;
    let mut h = tape.add(tokens, pos)?;
    let mask = causal_mask(t);
    let dh = d / cfg.num_heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut states = vec![h];
    for l in 0..cfg.num_layers {
        let p = |name: &str| binds.var(&layer_param(l, name));
        let q = tape.matmul(h, p("wq")?)?;
        let k = tape.matmul(h, p("wk")?)?;
        let v = tape.matmul(h, p("wv")?)?;
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for head in 0..cfg.num_heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let s = tape.matmul_t(qh, kh)?;
            let s = tape.scale(s, inv_sqrt);
            let a = tape.softmax_rows(s, Some(&mask))?;
            heads.push(tape.matmul(a, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let att = tape.matmul(cat, p("wo")?)?;
        let mut att = tape.add_row(att, p("bo")?)?;
        if let Some(r) = rng.as_deref_mut() {
            att = tape.dropout(att, cfg.dropout, r)?;
        }
        let res = tape.add(h, att)?;
        let h1 = tape.layer_norm(res, p("ln1_g")?, p("ln1_b")?)?;
        let f = tape.matmul(h1, p("ffn_w1")?)?;
        let f = tape.add_row(f, p("ffn_b1")?)?;
        let f = tape.relu(f);
        let f = tape.matmul(f, p("ffn_w2")?)?;
        let mut f = tape.add_row(f, p("ffn_b2")?)?;
        if let Some(r) = rng.as_deref_mut() {
            f = tape.dropout(f, cfg.dropout, r)?;
        }
        let res = tape.add(h1, f)?;
        h = tape.layer_norm(res, p("ln2_g")?, p("ln2_b")?)?;
        states.push(h);
    }
    Ok(states)
}

/// Final-layer hidden states H^L (T×d).
pub fn encode(
    tape: &mut Tape<'_>,
    binds: &Bindings,
    cfg: &EncoderConfig,
    tokens: Var,
    rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let states = encode_states(tape, binds, cfg, tokens, rng)?;
    Ok(*states.last().expect("at least the input state"))
}

/// The last row of H^L.
pub fn user_representation(tape: &mut Tape<'_>, hidden: Var) -> Result<Var> {
    let (t, _) = tape.dims(hidden);
    tape.row(hidden, t - 1)
}

/// Dot-product scores of every row of `users` (r×d) against `items`
/// (r×|items|).
pub fn score(tape: &mut Tape<'_>, binds: &Bindings, users: Var, items: &[usize]) -> Result<Var> {
    let ids: Vec<Option<usize>> = items.iter().map(|&i| Some(i)).collect();
    let emb = embed_items(tape, binds, &ids)?;
    tape.matmul_t(users, emb)
}

/// Keeps at most `cap` of the most recent items.
pub fn suffix_truncate<T>(items: &[T], cap: usize) -> &[T] {
    &items[items.len().saturating_sub(cap)..]
}
