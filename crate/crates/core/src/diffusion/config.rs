//! Line-based `key = value` configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys,
//! duplicate keys and unparsable values are errors naming the line.

use std::collections::HashSet;
use std::str::FromStr;

use super::params::{ModelDims, Stage};
use super::schedule::{make_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::ptm::DEFAULT_TAU;

pub const HEADS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub seed: u64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub c: usize,
    pub f: usize,
    pub h: usize,
    pub w: usize,
    pub rank: usize,
    pub t: usize,
    pub beta1: f64,
    pub beta_t: f64,
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::One,
            seed: 7,
            lr: 1e-3,
            steps: 500,
            batch: 4,
            c: 16,
            f: 8,
            h: 8,
            w: 8,
            rank: 4,
            t: 100,
            beta1: 1e-4,
            beta_t: 0.02,
            tau: DEFAULT_TAU,
        }
    }
}

pub const KEYS: [&str; 14] = [
    "stage", "seed", "lr", "steps", "batch", "c", "f", "h", "w", "rank", "T", "beta1", "betaT",
    "tau",
];

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Config {
        line,
        message: format!("invalid value {raw:?} for {key}"),
    })
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let Some((key, val)) = body.split_once('=') else {
                return Err(Error::Config {
                    line,
                    message: format!("expected `key = value`, got {body:?}"),
                });
            };
            let (key, val) = (key.trim(), val.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config {
                    line,
                    message: format!("duplicate key {key}"),
                });
            }
            match key {
                "stage" => {
                    cfg.stage =
                        Stage::from_number(value(line, key, val)?).map_err(|e| Error::Config {
                            line,
                            message: e.to_string(),
                        })?
                }
                "seed" => cfg.seed = value(line, key, val)?,
                "lr" => cfg.lr = value(line, key, val)?,
                "steps" => cfg.steps = value(line, key, val)?,
                "batch" => cfg.batch = value(line, key, val)?,
                "c" => cfg.c = value(line, key, val)?,
                "f" => cfg.f = value(line, key, val)?,
                "h" => cfg.h = value(line, key, val)?,
                "w" => cfg.w = value(line, key, val)?,
                "rank" => cfg.rank = value(line, key, val)?,
                "T" => cfg.t = value(line, key, val)?,
                "beta1" => cfg.beta1 = value(line, key, val)?,
                "betaT" => cfg.beta_t = value(line, key, val)?,
                "tau" => cfg.tau = value(line, key, val)?,
                other => {
                    return Err(Error::Config {
                        line,
                        message: format!("unknown key {other:?} (known: {})", KEYS.join(", ")),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        format!(
            "stage = {}\nseed = {}\nlr = {}\nsteps = {}\nbatch = {}\nc = {}\nf = {}\nh = {}\nw = {}\nrank = {}\nT = {}\nbeta1 = {}\nbetaT = {}\ntau = {}\n",
            self.stage.number(),
            self.seed,
            self.lr,
            self.steps,
            self.batch,
            self.c,
            self.f,
            self.h,
            self.w,
            self.rank,
            self.t,
            self.beta1,
            self.beta_t,
            self.tau
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch == 0 || self.f == 0 {
            return Err(Error::invalid("batch and f must be positive"));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::invalid(format!(
                "tau must be non-negative, got {}",
                self.tau
            )));
        }
        self.dims().validate()?;
        self.schedule()?;
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims::new(self.c, HEADS, self.rank, self.h, self.w)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t, self.beta1, self.beta_t)
    }

    /// Clip length actually trained: stage 1 is image-level.
    pub fn train_frames(&self) -> usize {
        match self.stage {
            Stage::One => 1,
            Stage::Two => self.f,
        }
    }
}
