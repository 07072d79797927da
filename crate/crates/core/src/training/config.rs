use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{ModelDims, SOFT_TEMPERATURE};

/// Hyper-parameters of one transfer-model run.
///
/// [`TrainConfig::default`] uses the desk-scale sizes with the published
/// optimization settings; [`TrainConfig::desk`] also scales the
/// optimization to the short desk-scale schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub d_emb: usize,
    pub d_z: usize,
    /// Feature maps per style-encoder width; the style vector has five
    /// times as many entries.
    pub style_maps: usize,
    pub disc_maps: usize,
    pub weights: LossWeights,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_len: usize,
    pub temperature: f64,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    /// Epochs during which the generator ignores the adversarial term.
    pub adv_delay: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d_emb: 32,
            d_z: 64,
            style_maps: 4,
            disc_maps: 16,
            weights: LossWeights::default(),
            dropout: 0.5,
            lr: 1e-4,
            batch_size: 64,
            epochs: 30,
            max_len: 20,
            temperature: SOFT_TEMPERATURE,
            d_steps: 1,
            adv_delay: 0,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "d_emb",
    "d_z",
    "style_maps",
    "disc_maps",
    "lambda_adv",
    "lambda_cyc",
    "lambda_dis",
    "dropout",
    "lr",
    "batch_size",
    "epochs",
    "max_len",
    "temperature",
    "d_steps",
    "adv_delay",
    "clip_norm",
    "seed",
];

impl TrainConfig {
    /// Full-size model with the published settings.
    pub fn paper() -> Self {
        TrainConfig {
            d_emb: 200,
            d_z: 1000,
            style_maps: 100,
            disc_maps: 100,
            ..TrainConfig::default()
        }
    }

    /// Desk-scale sizes with a learning rate and dropout suited to a few
    /// hundred updates.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 2e-3,
            dropout: 0.1,
            ..TrainConfig::default()
        }
    }

    pub fn model_dims(&self, vocab: usize) -> ModelDims {
        ModelDims {
            vocab,
            d_emb: self.d_emb,
            d_z: self.d_z,
            style_widths: vec![1, 2, 3, 4, 5],
            style_maps: self.style_maps,
            disc_widths: vec![1, 2, 3, 4, 5],
            disc_maps: self.disc_maps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |what: &str| Err(Error::spec(format!("invalid {what} in training config")));
        if self.d_emb == 0 || self.d_z == 0 || self.style_maps == 0 || self.disc_maps == 0 {
            return bad("dimension");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.d_steps == 0 {
            return bad("batch_size, epochs or d_steps");
        }
        // Room for the widest filter plus EOS.
        if self.max_len < 6 {
            return bad("max_len");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm");
        }
        Ok(())
    }

    /// Sets one `key=value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::spec(format!("bad value {value:?} for {key}")))
        }
        match key.trim() {
            "d_emb" => self.d_emb = num(key, value)?,
            "d_z" => self.d_z = num(key, value)?,
            "style_maps" => self.style_maps = num(key, value)?,
            "disc_maps" => self.disc_maps = num(key, value)?,
            "lambda_adv" => self.weights.adv = num(key, value)?,
            "lambda_cyc" => self.weights.cyc = num(key, value)?,
            "lambda_dis" => self.weights.dis = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "temperature" => self.temperature = num(key, value)?,
            "d_steps" => self.d_steps = num(key, value)?,
            "adv_delay" => self.adv_delay = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => {
                return Err(Error::spec(format!(
                    "unknown config key {other:?}; known keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::spec(format!("config line {}: expected key=value", n + 1)))?;
            self.set(key, value)
                .map_err(|e| Error::spec(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Every key with its current value, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key}={}", self.get(key));
        }
        out
    }

    fn get(&self, key: &str) -> String {
        match key {
            "d_emb" => self.d_emb.to_string(),
            "d_z" => self.d_z.to_string(),
            "style_maps" => self.style_maps.to_string(),
            "disc_maps" => self.disc_maps.to_string(),
            "lambda_adv" => self.weights.adv.to_string(),
            "lambda_cyc" => self.weights.cyc.to_string(),
            "lambda_dis" => self.weights.dis.to_string(),
            "dropout" => self.dropout.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "max_len" => self.max_len.to_string(),
            "temperature" => self.temperature.to_string(),
            "d_steps" => self.d_steps.to_string(),
            "adv_delay" => self.adv_delay.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "seed" => self.seed.to_string(),
            _ => unreachable!("unlisted key {key}"),
        }
    }
}
