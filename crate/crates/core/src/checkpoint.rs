//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "PRCK"
//! version    u8       1
//! meta       u32 length, then UTF-8 `key=value` lines
//! items      u32 count, then per item: u32 length + UTF-8 id
//! attrs      u32 count, then per attribute: u32 count + (u32 length + UTF-8 value)*
//! params     u32 count, then per parameter:
//!              u32 name length + UTF-8 name
//!              u8 group tag, u8 trainable flag
//!              u8 rank, u32 extents
//!              f64 values, row-major
//! ```
//!
//! The model configuration lives in the meta block under `model.*` keys.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{Features, Model, ModelConfig, PromptConfig};
use crate::params::{Group, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PRCK";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Free-form run information (stage, mode, trainable set, ...).
    pub meta: BTreeMap<String, String>,
    /// Item id of every row of the item table.
    pub item_ids: Vec<String>,
    /// Attribute value strings, per profile column.
    pub attr_values: Vec<Vec<String>>,
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn model_meta(cfg: &ModelConfig) -> Vec<(String, String)> {
    let e = &cfg.encoder;
    let mut m = vec![
        ("model.num_items".into(), cfg.num_items.to_string()),
        ("model.num_layers".into(), e.num_layers.to_string()),
        ("model.model_dim".into(), e.model_dim.to_string()),
        ("model.num_heads".into(), e.num_heads.to_string()),
        ("model.max_seq_len".into(), e.max_seq_len.to_string()),
        ("model.ffn_hidden".into(), e.ffn_hidden.to_string()),
        ("model.dropout".into(), e.dropout.to_string()),
    ];
    if let Some(p) = &cfg.prompt {
        match &p.features {
            Features::Attributes { attrs, vocab, dim } => {
                m.push(("model.features".into(), "attributes".into()));
                m.push(("model.attrs".into(), join(attrs)));
                m.push(("model.vocab".into(), join(vocab)));
                m.push(("model.feature_dim".into(), dim.to_string()));
            }
            Features::Dense { dim } => {
                m.push(("model.features".into(), "dense".into()));
                m.push(("model.feature_dim".into(), dim.to_string()));
            }
        }
        m.push(("model.prompt_len".into(), p.prompt_len.to_string()));
        m.push(("model.hidden".into(), p.hidden.to_string()));
        m.push(("model.use_prompt".into(), p.use_prompt.to_string()));
        m.push(("model.use_profile".into(), p.use_profile.to_string()));
        m.push(("model.raw_prompt".into(), p.raw_prompt.to_string()));
    }
    m
}

fn get<'m>(meta: &'m BTreeMap<String, String>, key: &str) -> Result<&'m str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::checkpoint(format!("missing meta key {key}")))
}

fn num<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let v = get(meta, key)?;
    v.parse().map_err(|_| Error::checkpoint(format!("bad value {v:?} for {key}")))
}

fn list(meta: &BTreeMap<String, String>, key: &str) -> Result<Vec<usize>> {
    let v = get(meta, key)?;
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|x| x.parse().map_err(|_| Error::checkpoint(format!("bad list {v:?} for {key}"))))
        .collect()
}

fn model_config(meta: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let encoder = EncoderConfig {
        num_layers: num(meta, "model.num_layers")?,
        model_dim: num(meta, "model.model_dim")?,
        num_heads: num(meta, "model.num_heads")?,
        max_seq_len: num(meta, "model.max_seq_len")?,
        ffn_hidden: num(meta, "model.ffn_hidden")?,
        dropout: num(meta, "model.dropout")?,
    };
    let prompt = match meta.get("model.features").map(String::as_str) {
        None => None,
        Some(kind) => {
            let features = match kind {
                "attributes" => Features::Attributes {
                    attrs: list(meta, "model.attrs")?,
                    vocab: list(meta, "model.vocab")?,
                    dim: num(meta, "model.feature_dim")?,
                },
                "dense" => Features::Dense {
                    dim: num(meta, "model.feature_dim")?,
                },
                other => return Err(Error::checkpoint(format!("unknown feature kind {other:?}"))),
            };
            Some(PromptConfig {
                features,
                prompt_len: num(meta, "model.prompt_len")?,
                hidden: num(meta, "model.hidden")?,
                use_prompt: num(meta, "model.use_prompt")?,
                use_profile: num(meta, "model.use_profile")?,
                raw_prompt: num(meta, "model.raw_prompt")?,
            })
        }
    };
    let cfg = ModelConfig {
        encoder,
        num_items: num(meta, "model.num_items")?,
        prompt,
    };
    cfg.validate().map_err(|e| Error::checkpoint(format!("invalid model config: {e}")))?;
    Ok(cfg)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::checkpoint("invalid UTF-8 string"))
    }
}

impl Checkpoint {
    pub fn new(model: Model, item_ids: Vec<String>, attr_values: Vec<Vec<String>>) -> Self {
        Self {
            model,
            meta: BTreeMap::new(),
            item_ids,
            attr_values,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.item_ids.len() != self.model.config.num_items {
            return Err(Error::checkpoint(format!(
                "{} item ids for {} item rows",
                self.item_ids.len(),
                self.model.config.num_items
            )));
        }
        let mut meta = String::new();
        for (k, v) in &self.meta {
            if k.starts_with("model.") {
                return Err(Error::checkpoint(format!("meta key {k} is reserved")));
            }
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::checkpoint(format!("meta entry {k:?} is not a single line")));
            }
        }
        let mut all: BTreeMap<String, String> = self.meta.clone();
        all.extend(model_meta(&self.model.config));
        for (k, v) in &all {
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        put_str(&mut out, &meta)?;
        put_u32(&mut out, self.item_ids.len())?;
        for id in &self.item_ids {
            put_str(&mut out, id)?;
        }
        put_u32(&mut out, self.attr_values.len())?;
        for values in &self.attr_values {
            put_u32(&mut out, values.len())?;
            for v in values {
                put_str(&mut out, v)?;
            }
        }
        put_u32(&mut out, self.model.params.len())?;
        for (name, p) in self.model.params.iter() {
            put_str(&mut out, name)?;
            out.push(p.group.tag());
            out.push(u8::from(p.tensor.requires_grad()));
            let shape = p.tensor.shape();
            out.push(u8::try_from(shape.len()).map_err(|_| Error::checkpoint("rank too large"))?);
            for &e in shape {
                put_u32(&mut out, e)?;
            }
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::checkpoint("not a checkpoint (bad magic)"));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::checkpoint(format!("unsupported format version {version}")));
        }
        let mut meta = BTreeMap::new();
        for line in r.str()?.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::checkpoint(format!("bad meta line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let config = model_config(&meta)?;
        meta.retain(|k, _| !k.starts_with("model."));
        let n_items = r.u32()?;
        let item_ids = (0..n_items).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let n_attrs = r.u32()?;
        let mut attr_values = Vec::with_capacity(n_attrs);
        for _ in 0..n_attrs {
            let n = r.u32()?;
            attr_values.push((0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?);
        }
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let tag = r.u8()?;
            let group = Group::from_tag(tag).ok_or_else(|| Error::checkpoint(format!("unknown group tag {tag}")))?;
            let trainable = r.u8()? != 0;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let numel = numel.ok_or_else(|| Error::checkpoint(format!("extents of {name} overflow")))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::checkpoint("tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let mut t = Tensor::new(shape, data).map_err(|e| Error::checkpoint(format!("{name}: {e}")))?;
            t.set_requires_grad(trainable);
            params.insert(name, group, t)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if item_ids.len() != config.num_items {
            return Err(Error::checkpoint("item id count does not match the item table"));
        }
        Ok(Self {
            model: Model { config, params },
            meta,
            item_ids,
            attr_values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Fails unless the data's item and attribute vocabularies match the
    /// ones the checkpoint was trained with.
    pub fn check_vocabulary(&self, item_ids: &[String], attr_values: Option<&[Vec<String>]>) -> Result<()> {
        if self.item_ids != item_ids {
            return Err(Error::checkpoint(format!(
                "item vocabulary differs from the checkpoint ({} vs {} items)",
                item_ids.len(),
                self.item_ids.len()
            )));
        }
        if let Some(a) = attr_values {
            if self.model.config.prompt.is_some() && self.attr_values != a {
                return Err(Error::checkpoint("profile vocabulary differs from the checkpoint"));
            }
        }
        Ok(())
    }
}
