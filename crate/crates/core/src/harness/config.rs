//! Flat `key = value` run configuration.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::decoder::BcaFlags;
use crate::error::{Error, Result};
use crate::lbdt::LbdtConfig;
use crate::model::ModelConfig;
use crate::synth::{self, SynthConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub height: usize,
    pub width: usize,
    pub delta: usize,
    pub max_words: usize,
    pub c_m: usize,
    pub c_d: usize,
    pub word_dim: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub insert_stages: Vec<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub lr_halve_start: usize,
    pub lr_halve_every: usize,
    pub seed: u64,
    pub data_seed: u64,
    pub samples: usize,
    pub enable_t2s: bool,
    pub enable_s2t: bool,
    pub enable_ld: bool,
    pub enable_stc: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            height: 64,
            width: 64,
            delta: 6,
            max_words: 25,
            c_m: 64,
            c_d: 32,
            word_dim: 32,
            layers: 1,
            mlp_hidden: 128,
            insert_stages: vec![4, 5],
            batch_size: 8,
            lr: 1e-4,
            epochs: 15,
            lr_halve_start: 10,
            lr_halve_every: 2,
            seed: 0,
            data_seed: 2024,
            samples: 600,
            enable_t2s: true,
            enable_s2t: true,
            enable_ld: true,
            enable_stc: true,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

/// Every accepted key, in file order.
pub const KEYS: [&str; 27] = [
    "data_dir",
    "out_dir",
    "height",
    "width",
    "delta",
    "max_words",
    "c_m",
    "c_d",
    "word_dim",
    "layers",
    "mlp_hidden",
    "insert_stages",
    "batch_size",
    "lr",
    "epochs",
    "lr_halve_start",
    "lr_halve_every",
    "seed",
    "data_seed",
    "samples",
    "enable_t2s",
    "enable_s2t",
    "enable_ld",
    "enable_stc",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_stages(value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| parse_num("insert_stages", s.trim()))
        .collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "height" => self.height = parse_num(key, v)?,
            "width" => self.width = parse_num(key, v)?,
            "delta" => self.delta = parse_num(key, v)?,
            "max_words" => self.max_words = parse_num(key, v)?,
            "c_m" => self.c_m = parse_num(key, v)?,
            "c_d" => self.c_d = parse_num(key, v)?,
            "word_dim" => self.word_dim = parse_num(key, v)?,
            "layers" => self.layers = parse_num(key, v)?,
            "mlp_hidden" => self.mlp_hidden = parse_num(key, v)?,
            "insert_stages" => self.insert_stages = parse_stages(v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "lr_halve_start" => self.lr_halve_start = parse_num(key, v)?,
            "lr_halve_every" => self.lr_halve_every = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "data_seed" => self.data_seed = parse_num(key, v)?,
            "samples" => self.samples = parse_num(key, v)?,
            "enable_t2s" => self.enable_t2s = parse_bool(key, v)?,
            "enable_s2t" => self.enable_s2t = parse_bool(key, v)?,
            "enable_ld" => self.enable_ld = parse_bool(key, v)?,
            "enable_stc" => self.enable_stc = parse_bool(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse_num(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse_num(key, v)?,
            "adam_eps" => self.adam_eps = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let b = |x: bool| x.to_string();
        Some(match key {
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "height" => self.height.to_string(),
            "width" => self.width.to_string(),
            "delta" => self.delta.to_string(),
            "max_words" => self.max_words.to_string(),
            "c_m" => self.c_m.to_string(),
            "c_d" => self.c_d.to_string(),
            "word_dim" => self.word_dim.to_string(),
            "layers" => self.layers.to_string(),
            "mlp_hidden" => self.mlp_hidden.to_string(),
            "insert_stages" => self
                .insert_stages
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "batch_size" => self.batch_size.to_string(),
            "lr" => format!("{:e}", self.lr),
            "epochs" => self.epochs.to_string(),
            "lr_halve_start" => self.lr_halve_start.to_string(),
            "lr_halve_every" => self.lr_halve_every.to_string(),
            "seed" => self.seed.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "samples" => self.samples.to_string(),
            "enable_t2s" => b(self.enable_t2s),
            "enable_s2t" => b(self.enable_s2t),
            "enable_ld" => b(self.enable_ld),
            "enable_stc" => b(self.enable_stc),
            "adam_beta1" => format!("{:e}", self.adam_beta1),
            "adam_beta2" => format!("{:e}", self.adam_beta2),
            "adam_eps" => format!("{:e}", self.adam_eps),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.to_string()
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        KEYS.iter().map(|&k| (k, self.get(k).unwrap())).collect()
    }

    /// Inline JSON object of every key, values as strings.
    pub fn to_json(&self) -> String {
        let body: Vec<String> = self
            .pairs()
            .iter()
            .map(|(k, v)| format!("\"{k}\": \"{}\"", json_escape(v)))
            .collect();
        format!("{{{}}}", body.join(", "))
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(crate::synth::vocabulary().len())?.validate()?;
        if self.delta == 0 {
            return Err(Error::Config("delta must be at least 1".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.samples == 0 {
            return Err(Error::Config("batch_size, epochs and samples must be positive".into()));
        }
        if self.lr_halve_every == 0 {
            return Err(Error::Config("lr_halve_every must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            height: self.height,
            width: self.width,
            max_words: self.max_words,
            vocab_size,
            word_dim: self.word_dim,
            stage_channels: crate::encoders::DEFAULT_STAGE_CHANNELS,
            c_d: self.c_d,
            lbdt: LbdtConfig {
                layers: self.layers,
                c_m: self.c_m,
                insert_stages: self.insert_stages.clone(),
                mlp_hidden: self.mlp_hidden,
                enable_t2s: self.enable_t2s,
                enable_s2t: self.enable_s2t,
            },
            bca: BcaFlags {
                denoiser: self.enable_ld,
                activator: self.enable_stc,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            height: self.height,
            width: self.width,
            delta: self.delta,
        }
    }

    /// Learning rate for 1-based `epoch`: halved every `lr_halve_every` epochs from `lr_halve_start`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.lr_halve_start {
            return self.lr;
        }
        let halvings = (epoch - self.lr_halve_start) / self.lr_halve_every + 1;
        self.lr / 2f64.powi(halvings as i32)
    }

    pub fn vocab_size(&self) -> usize {
        synth::vocabulary().len()
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.pairs() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

pub fn json_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_training_recipe() {
        let c = RunConfig::default();
        assert_eq!((c.delta, c.max_words, c.batch_size, c.epochs), (6, 25, 8, 15));
        assert_eq!(c.lr, 1e-4);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn lr_schedule() {
        let c = RunConfig::default();
        for e in 1..=9 {
            assert_eq!(c.lr_at(e), 1e-4);
        }
        assert_eq!((c.lr_at(10), c.lr_at(11)), (5e-5, 5e-5));
        assert_eq!((c.lr_at(12), c.lr_at(13)), (2.5e-5, 2.5e-5));
        assert_eq!((c.lr_at(14), c.lr_at(15)), (1.25e-5, 1.25e-5));
    }

    #[test]
    fn text_roundtrip() {
        let mut c = RunConfig::default();
        c.insert_stages = vec![3, 4, 5];
        c.lr = 3e-4;
        c.enable_ld = false;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_and_unknown_keys() {
        let c = RunConfig::parse("# run\nepochs = 3 # short\n\nlayers=2\n").unwrap();
        assert_eq!((c.epochs, c.layers), (3, 2));
        assert!(RunConfig::parse("epoch = 3").is_err());
        assert!(RunConfig::parse("epochs 3").is_err());
        assert!(RunConfig::parse("epochs = three").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = RunConfig::default();
        c.insert_stages = vec![1];
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.height = 48;
        assert!(c.validate().is_err());
    }
}
