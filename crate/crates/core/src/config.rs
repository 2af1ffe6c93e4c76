//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::contrastive::{AugmentationConfig, ClConfig};
use crate::data::{CrossDomainConfig, SyntheticConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::Split;
use crate::model::TuningMode;
use crate::pretrain::{PretrainConfig, SeqAug, SeqClConfig};
use crate::tasks::{CrossConfig, CrossStrategy, ProfileConfig};
use crate::train::TrainConfig;
use crate::tuning::{Strategy, TuneConfig};

/// Every accepted key with its default.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "1"),
    // data
    ("interactions", ""),
    ("profiles", ""),
    ("threshold", "10"),
    ("train_ratio", "0.8"),
    ("k_shot", "0"),
    // synthetic generator
    ("syn_warm_users", "2000"),
    ("syn_cold_users", "500"),
    ("syn_items", "300"),
    ("syn_groups", "6"),
    ("syn_warm_min", "10"),
    ("syn_warm_max", "20"),
    ("syn_cold_min", "1"),
    ("syn_cold_max", "9"),
    ("syn_concentration", "0.9"),
    ("syn_long_step", "0.3"),
    ("syn_missing_rate", "0"),
    ("syn_cross_domain", "false"),
    ("syn_target_users", "600"),
    ("syn_target_only_users", "0"),
    ("syn_target_items", "240"),
    // encoder
    ("model_dim", "64"),
    ("num_layers", "2"),
    ("num_heads", "2"),
    ("max_seq_len", "50"),
    ("ffn_hidden", "0"),
    ("dropout", "0"),
    // optimization
    ("epochs", "20"),
    ("batch_size", "256"),
    ("lr", "0.001"),
    ("negatives", "1"),
    ("patience", "3"),
    ("all_prefixes", "true"),
    ("holdout", "0.05"),
    // contrastive pre-training flavor
    ("seq_cl", "false"),
    ("seq_cl_ops", "mask,crop,reorder"),
    ("seq_cl_ratio", "0.2"),
    // tuning
    ("strategy", "ppr"),
    ("mode", "light"),
    ("prompt_len", "1"),
    ("prompt_hidden", "0"),
    ("attr_dim", "0"),
    ("prompt_attrs", ""),
    ("cl_enabled", "true"),
    ("tau", "0.5"),
    ("lambda", "0.1"),
    ("gamma1", "0.2"),
    ("gamma2", "0.2"),
    // evaluation
    ("split", "joint"),
    // tasks
    ("cross_strategy", "prompt"),
    ("cross_mode", "full"),
    ("raw_prompt", "false"),
    ("profile_attr", "0"),
    ("profile_batch", "64"),
];

/// Learning rates offered to sweeps.
pub const LR_GRID: [f64; 4] = [1e-3, 1e-4, 1e-5, 1e-6];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl ExperimentConfig {
    pub fn is_key(key: &str) -> bool {
        DEFAULTS.iter().any(|(k, _)| *k == key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !Self::is_key(key) {
            return Err(Error::config(format!("unknown config key {key:?}")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v)
    }

    /// Applies a config file on top of the current values. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| Error::config(format!("{}:{}: {e}", origin.display(), n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("{key} is not a config key"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::config(format!("invalid value {v:?} for {key}")))
    }

    fn usizes(&self, key: &str) -> Result<Option<Vec<usize>>> {
        let v = self.get(key);
        if v.is_empty() {
            return Ok(None);
        }
        v.split(',')
            .map(|x| x.trim().parse().map_err(|_| Error::config(format!("invalid list {v:?} for {key}"))))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Resolved values, one `key = value` per line, sorted by key.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn as_map(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        let d: usize = self.parse("model_dim")?;
        let ffn: usize = self.parse("ffn_hidden")?;
        let e = EncoderConfig {
            num_layers: self.parse("num_layers")?,
            model_dim: d,
            num_heads: self.parse("num_heads")?,
            max_seq_len: self.parse("max_seq_len")?,
            ffn_hidden: if ffn == 0 { 4 * d } else { ffn },
            dropout: self.parse("dropout")?,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let t = TrainConfig {
            epochs: self.parse("epochs")?,
            batch_size: self.parse("batch_size")?,
            lr: self.parse("lr")?,
            negatives: self.parse("negatives")?,
            seed: self.seed()?,
            patience: self.parse("patience")?,
            all_prefixes: self.parse("all_prefixes")?,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn cl(&self) -> Result<ClConfig> {
        let c = ClConfig {
            enabled: self.parse("cl_enabled")?,
            tau: self.parse("tau")?,
            lambda: self.parse("lambda")?,
            aug: AugmentationConfig {
                gamma1: self.parse("gamma1")?,
                gamma2: self.parse("gamma2")?,
            },
        };
        c.validate()?;
        Ok(c)
    }

    pub fn pretrain(&self) -> Result<PretrainConfig> {
        let cl = if self.parse("seq_cl")? {
            let ops = self
                .get("seq_cl_ops")
                .split(',')
                .map(|s| SeqAug::parse(s.trim()))
                .collect::<Result<Vec<_>>>()?;
            Some(SeqClConfig {
                ops,
                ratio: self.parse("seq_cl_ratio")?,
                tau: self.parse("tau")?,
                lambda: self.parse("lambda")?,
            })
        } else {
            None
        };
        Ok(PretrainConfig {
            encoder: self.encoder()?,
            train: self.train()?,
            holdout: self.parse("holdout")?,
            cl,
        })
    }

    pub fn tune(&self) -> Result<TuneConfig> {
        Ok(TuneConfig {
            strategy: Strategy::parse(self.get("strategy"))?,
            mode: TuningMode::parse(self.get("mode"))?,
            prompt_len: self.parse("prompt_len")?,
            hidden: self.parse("prompt_hidden")?,
            attr_dim: self.parse("attr_dim")?,
            attrs: self.usizes("prompt_attrs")?,
            train: TrainConfig {
                patience: 0,
                ..self.train()?
            },
            cl: self.cl()?,
        })
    }

    pub fn split(&self) -> Result<Split> {
        Split::parse(self.get("split"))
    }

    pub fn k_shot(&self) -> Result<Option<usize>> {
        let k: usize = self.parse("k_shot")?;
        Ok((k > 0).then_some(k))
    }

    pub fn synthetic(&self) -> Result<SyntheticConfig> {
        Ok(SyntheticConfig {
            warm_users: self.parse("syn_warm_users")?,
            cold_users: self.parse("syn_cold_users")?,
            num_items: self.parse("syn_items")?,
            groups: self.parse("syn_groups")?,
            warm_len: (self.parse("syn_warm_min")?, self.parse("syn_warm_max")?),
            cold_len: (self.parse("syn_cold_min")?, self.parse("syn_cold_max")?),
            concentration: self.parse("syn_concentration")?,
            long_step: self.parse("syn_long_step")?,
            missing_rate: self.parse("syn_missing_rate")?,
            seed: self.seed()?,
        })
    }

    pub fn cross_domain_data(&self) -> Result<CrossDomainConfig> {
        Ok(CrossDomainConfig {
            source: SyntheticConfig {
                cold_users: 0,
                ..self.synthetic()?
            },
            target_users: self.parse("syn_target_users")?,
            target_only_users: self.parse("syn_target_only_users")?,
            target_items: self.parse("syn_target_items")?,
            target_len: (self.parse("syn_cold_min")?, self.parse("syn_cold_max")?),
        })
    }

    pub fn cross(&self) -> Result<CrossConfig> {
        Ok(CrossConfig {
            strategy: CrossStrategy::parse(self.get("cross_strategy"))?,
            mode: TuningMode::parse(self.get("cross_mode"))?,
            raw_prompt: self.parse("raw_prompt")?,
            prompt_len: self.parse("prompt_len")?,
            hidden: self.parse("prompt_hidden")?,
            train: TrainConfig {
                patience: 0,
                ..self.train()?
            },
            cl: self.cl()?,
        })
    }

    pub fn profile(&self) -> Result<ProfileConfig> {
        Ok(ProfileConfig {
            mode: TuningMode::parse(self.get("mode"))?,
            prompt_len: self.parse("prompt_len")?,
            hidden: self.parse("prompt_hidden")?,
            train: TrainConfig {
                batch_size: self.parse("profile_batch")?,
                patience: 0,
                ..self.train()?
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_protocol() {
        let c = ExperimentConfig::default();
        assert_eq!(c.encoder().unwrap().model_dim, 64);
        assert_eq!(c.train().unwrap().batch_size, 256);
        let t = c.tune().unwrap();
        assert_eq!(t.prompt_len, 1);
        assert_eq!((t.cl.aug.gamma1, t.cl.aug.gamma2, t.cl.lambda), (0.2, 0.2, 0.1));
        assert_eq!(c.split().unwrap(), Split::Joint);
        assert_eq!(c.k_shot().unwrap(), None);
    }

    #[test]
    fn files_and_overrides() {
        let mut c = ExperimentConfig::default();
        c.apply_text("# comment\n\nmodel_dim = 16\nlr=0.01\n", Path::new("x.conf")).unwrap();
        c.set_pair("mode=full").unwrap();
        assert_eq!(c.encoder().unwrap().ffn_hidden, 64);
        assert_eq!(c.train().unwrap().lr, 0.01);
        assert_eq!(c.tune().unwrap().mode, TuningMode::Full);
        assert!(c.to_text().contains("model_dim = 16\n"));
        let mut again = ExperimentConfig::default();
        again.apply_text(&c.to_text(), Path::new("resolved")).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let mut c = ExperimentConfig::default();
        let e = c.apply_text("lr = 1\nbogus = 3\n", Path::new("a.conf")).unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("bogus") && m.contains("a.conf:2")));
        assert_eq!(e.exit_code(), 2);
        c.set("epochs", "many").unwrap();
        assert!(matches!(c.train(), Err(Error::Config(_))));
        assert!(c.set_pair("novalue").is_err());
        c.set("epochs", "1").unwrap();
        c.set("prompt_attrs", "1,2").unwrap();
        assert_eq!(c.tune().unwrap().attrs, Some(vec![1, 2]));
    }
}
