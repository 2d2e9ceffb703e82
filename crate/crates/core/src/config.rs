//! Text `key=value` run configuration: model sizes, loss weights, training.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{io_error, Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Clips per step.
    pub batch: usize,
    pub temporal: bool,
    pub clip_paste: bool,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 1e-2,
            batch: 1,
            temporal: false,
            clip_paste: false,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "bad value {v:?} for {key}, expected true or false"
        ))),
    }
}

impl RunConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "C" => m.channels = parse_value(key, v)?,
            "N" => m.memory = parse_value(key, v)?,
            "L" => m.latent = parse_value(key, v)?,
            "num_blocks" => m.num_blocks = parse_value(key, v)?,
            "D" => m.classes = parse_value(key, v)?,
            "stuff_count" => m.stuff_count = parse_value(key, v)?,
            "d_max" => m.d_max = parse_value(key, v)?,
            "T" => m.clip_len = parse_value(key, v)?,
            "seed" => m.seed = parse_value(key, v)?,
            "depth_enabled" => m.depth_enabled = parse_bool(key, v)?,
            "init_std" => m.init_std = parse_value(key, v)?,
            "w_pq" => t.weights.pq = parse_value(key, v)?,
            "w_tube_id" => t.weights.tube_id = parse_value(key, v)?,
            "w_sem" => t.weights.semantic = parse_value(key, v)?,
            "w_inst" => t.weights.instance = parse_value(key, v)?,
            "w_temp" => t.weights.temporal = parse_value(key, v)?,
            "w_depth" => t.weights.depth = parse_value(key, v)?,
            "steps" => t.steps = parse_value(key, v)?,
            "lr" => t.lr = parse_value(key, v)?,
            "batch" => t.batch = parse_value(key, v)?,
            "temporal" => t.temporal = parse_bool(key, v)?,
            "clip_paste" => t.clip_paste = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key=value", lineno + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.weights.validate()?;
        if !(self.train.lr >= 0.0 && self.train.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be ≥ 0, got {}",
                self.train.lr
            )));
        }
        if self.train.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.train.temporal && self.model.clip_len < 2 {
            return Err(Error::Config("temporal loss needs T ≥ 2".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let w = &t.weights;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("C", m.channels.to_string());
        put("N", m.memory.to_string());
        put("L", m.latent.to_string());
        put("num_blocks", m.num_blocks.to_string());
        put("D", m.classes.to_string());
        put("stuff_count", m.stuff_count.to_string());
        put("d_max", m.d_max.to_string());
        put("T", m.clip_len.to_string());
        put("seed", m.seed.to_string());
        put("depth_enabled", m.depth_enabled.to_string());
        put("init_std", m.init_std.to_string());
        put("w_pq", w.pq.to_string());
        put("w_tube_id", w.tube_id.to_string());
        put("w_sem", w.semantic.to_string());
        put("w_inst", w.instance.to_string());
        put("w_temp", w.temporal.to_string());
        put("w_depth", w.depth.to_string());
        put("steps", t.steps.to_string());
        put("lr", t.lr.to_string());
        put("batch", t.batch.to_string());
        put("temporal", t.temporal.to_string());
        put("clip_paste", t.clip_paste.to_string());
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(io_error(path))
    }
}
