//! Flat `key = value` run configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::ContrastConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Cross-entropy only.
    CeOnly,
    /// Cross-entropy plus pixel-anchor loss with random negatives.
    CePa,
    /// Cross-entropy plus pixel-anchor loss with boundary-aware negatives.
    CePaBane,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::CeOnly, Mode::CePa, Mode::CePaBane];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::CeOnly => "ce_only",
            Mode::CePa => "ce_pa",
            Mode::CePaBane => "ce_pa_bane",
        }
    }

    pub fn uses_pa(self) -> bool {
        self != Mode::CeOnly
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mode {s:?} (expected ce_only, ce_pa or ce_pa_bane)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub mode: Mode,
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub power: f64,
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
    pub eval_samples: usize,
    pub contrast: ContrastConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::CePaBane,
            iterations: 2000,
            batch_size: 8,
            base_lr: 1e-2,
            momentum: 0.9,
            power: 0.9,
            height: 64,
            width: 64,
            sigma: 0.15,
            eval_samples: 200,
            contrast: ContrastConfig::default(),
        }
    }
}

const N_LAMBDAS: usize = 4;

/// Every accepted key, in canonical order.
pub const KEYS: [&str; 22] = [
    "seed",
    "mode",
    "iterations",
    "batch_size",
    "base_lr",
    "momentum",
    "power",
    "height",
    "width",
    "sigma",
    "eval_samples",
    "tau",
    "alpha",
    "lambda_1",
    "lambda_2",
    "lambda_3",
    "lambda_4",
    "w_l",
    "w_h",
    "k_ratio",
    "positives",
    "negative_cap",
];

fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.base_lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.power >= 0.0) {
            return Err(Error::Config(
                "base_lr, momentum or power out of range".into(),
            ));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config("height and width must be at least 16".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config("sigma must be non-negative".into()));
        }
        if self.contrast.lambdas.len() != N_LAMBDAS {
            return Err(Error::Config(format!("expected {N_LAMBDAS} layer weights")));
        }
        self.contrast.validate()
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let c = &mut self.contrast;
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "mode" => self.mode = value.parse()?,
            "iterations" => self.iterations = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "base_lr" => self.base_lr = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "power" => self.power = parse_value(key, value)?,
            "height" => self.height = parse_value(key, value)?,
            "width" => self.width = parse_value(key, value)?,
            "sigma" => self.sigma = parse_value(key, value)?,
            "eval_samples" => self.eval_samples = parse_value(key, value)?,
            "tau" => c.tau = parse_value(key, value)?,
            "alpha" => c.alpha = parse_value(key, value)?,
            "w_l" => c.w_l = parse_value(key, value)?,
            "w_h" => c.w_h = parse_value(key, value)?,
            "k_ratio" => c.ratio = parse_value(key, value)?,
            "positives" => c.positives = parse_value(key, value)?,
            "negative_cap" => c.negative_cap = parse_value(key, value)?,
            _ => {
                let layer = key
                    .strip_prefix("lambda_")
                    .and_then(|i| i.parse::<usize>().ok())
                    .filter(|i| (1..=N_LAMBDAS).contains(i))
                    .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
                c.lambdas[layer - 1] = parse_value(key, value)?;
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; blank lines and `#` comments are skipped.
    /// Missing keys keep their defaults; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate config key {key:?}")));
            }
            cfg.set(key, value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.contrast;
        let values = [
            self.seed.to_string(),
            self.mode.to_string(),
            self.iterations.to_string(),
            self.batch_size.to_string(),
            self.base_lr.to_string(),
            self.momentum.to_string(),
            self.power.to_string(),
            self.height.to_string(),
            self.width.to_string(),
            self.sigma.to_string(),
            self.eval_samples.to_string(),
            c.tau.to_string(),
            c.alpha.to_string(),
            c.lambdas[0].to_string(),
            c.lambdas[1].to_string(),
            c.lambdas[2].to_string(),
            c.lambdas[3].to_string(),
            c.w_l.to_string(),
            c.w_h.to_string(),
            c.ratio.to_string(),
            c.positives.to_string(),
            c.negative_cap.to_string(),
        ];
        KEYS.into_iter().zip(values).collect()
    }

    /// Canonical text: every key once, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let c = TrainConfig::default();
        assert_eq!(c.contrast.lambdas, vec![0.1, 0.4, 0.7, 1.0]);
        assert_eq!(
            (
                c.contrast.alpha,
                c.contrast.w_h,
                c.contrast.ratio,
                c.contrast.tau
            ),
            (0.1, 0.7, 50.0, 0.1)
        );
        assert_eq!(
            (c.batch_size, c.iterations, c.height, c.width),
            (8, 2000, 64, 64)
        );
        c.validate().unwrap();
    }

    #[test]
    fn round_trip_is_canonical() {
        let text = "# run\nseed=3\nmode = ce_pa\nlambda_2 = 0.25\n\nbase_lr = 0.005\n";
        let c = TrainConfig::parse(text).unwrap();
        assert_eq!(
            (c.seed, c.mode, c.contrast.lambdas[1], c.base_lr),
            (3, Mode::CePa, 0.25, 0.005)
        );
        let canon = c.to_text();
        let again = TrainConfig::parse(&canon).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_text(), canon);
    }

    #[test]
    fn unknown_key_names_the_key() {
        let err = TrainConfig::parse("learning_rate = 1")
            .unwrap_err()
            .to_string();
        assert!(err.contains("learning_rate"), "{err}");
        assert!(TrainConfig::parse("lambda_5 = 1").is_err());
        assert!(TrainConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(TrainConfig::parse("seed = x").is_err());
        assert!(TrainConfig::parse("iterations = 0").is_err());
        assert!(TrainConfig::parse("w_h = 0.5").is_err());
    }
}
