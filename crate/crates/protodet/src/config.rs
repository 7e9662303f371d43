//! Flat `key = value` run configuration.
//!
//! Every hyperparameter in the project is a scalar, so the config stays a
//! line-per-key text file: `#` starts a comment, unknown keys are rejected,
//! and missing keys fall back to desk-scale defaults (the caller logs which).

use std::path::Path;

use crate::error::{Error, Result};
use crate::schedule::Direction;

/// Where the initial prototype vectors come from: centroids of the member
/// region embeddings (joint-cluster pairing) or the text centroids themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolInit {
    Visual,
    Text,
}

impl PoolInit {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "visual" => Ok(PoolInit::Visual),
            "text" => Ok(PoolInit::Text),
            other => Err(Error::Parameter(format!(
                "unknown pool_init {other:?} (expected visual|text)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PoolInit::Visual => "visual",
            PoolInit::Text => "text",
        }
    }
}

/// Schedule applied to the KL weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlSchedule {
    Constant,
    Up,
    Down,
}

impl KlSchedule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(KlSchedule::Constant),
            "up" => Ok(KlSchedule::Up),
            "down" => Ok(KlSchedule::Down),
            other => Err(Error::Parameter(format!(
                "unknown lambda_kl_schedule {other:?} (expected constant|up|down)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            KlSchedule::Constant => "constant",
            KlSchedule::Up => "up",
            KlSchedule::Down => "down",
        }
    }
}

/// Full run configuration with desk-scale defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Shared dimensions.
    pub d: usize,
    pub c: usize,
    pub queries: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,

    // Concept pool.
    pub m1: usize,
    pub m2_cap: usize,
    pub delta: f64,
    pub tau: f64,
    pub gamma: f64,
    pub eps: f64,
    pub min_pts: usize,
    pub pool_init: PoolInit,
    pub pairs_per_category: usize,
    pub mismatch_fraction: f64,

    // Semantic stream.
    pub alpha: f64,
    pub lambda_kl: f64,
    pub lambda_kl_schedule: KlSchedule,
    pub lambda_max: f64,
    pub schedule_direction: Direction,
    pub teacher_tau: f64,

    // Optimization.
    pub steps: u64,
    pub batch_size: usize,
    pub lr_det: f64,
    pub lr_sem: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub log_interval: u64,
    pub gradient_isolation: bool,
    pub seed: u64,

    // Dataset.
    pub num_base: usize,
    pub num_novel: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub distractors: usize,
    pub novel_fraction: f64,
    pub sigma_region: f64,
    pub sigma_text: f64,
    pub sigma_token: f64,

    // Matching cost / loss weights.
    pub cost_class: f64,
    pub cost_box: f64,
    pub cost_giou: f64,
    pub w_box: f64,
    pub w_giou: f64,
    pub w_noobj: f64,

    // Default file paths (CLI flags take precedence).
    pub pool_path: Option<String>,
    pub out_path: Option<String>,
    pub metrics_path: Option<String>,
    pub data_path: Option<String>,
    pub report_path: Option<String>,
    pub eval_export: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            d: 32,
            c: 64,
            queries: 12,
            decoder_layers: 2,
            decoder_heads: 4,
            m1: 8,
            m2_cap: 32,
            delta: 0.6,
            tau: 0.07,
            gamma: 0.99,
            eps: 0.3,
            min_pts: 3,
            pool_init: PoolInit::Visual,
            pairs_per_category: 40,
            mismatch_fraction: 0.1,
            alpha: 0.07,
            lambda_kl: 1.0,
            lambda_kl_schedule: KlSchedule::Constant,
            lambda_max: 1.0,
            schedule_direction: Direction::Up,
            teacher_tau: 0.07,
            steps: 1500,
            batch_size: 4,
            lr_det: 2e-3,
            lr_sem: 2e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            log_interval: 100,
            gradient_isolation: true,
            seed: 7,
            num_base: 12,
            num_novel: 4,
            train_scenes: 500,
            eval_scenes: 100,
            min_objects: 2,
            max_objects: 6,
            distractors: 2,
            novel_fraction: 0.25,
            sigma_region: 0.1,
            sigma_text: 0.1,
            sigma_token: 0.05,
            cost_class: 2.0,
            cost_box: 5.0,
            cost_giou: 2.0,
            w_box: 5.0,
            w_giou: 2.0,
            w_noobj: 0.1,
            pool_path: None,
            out_path: None,
            metrics_path: None,
            data_path: None,
            report_path: None,
            eval_export: None,
        }
    }
}

macro_rules! config_table {
    ($macro_name:ident) => {
        $macro_name! {
            d: usize,
            c: usize,
            queries: usize,
            decoder_layers: usize,
            decoder_heads: usize,
            m1: usize,
            m2_cap: usize,
            delta: f64,
            tau: f64,
            gamma: f64,
            eps: f64,
            min_pts: usize,
            pool_init: pool_init,
            pairs_per_category: usize,
            mismatch_fraction: f64,
            alpha: f64,
            lambda_kl: f64,
            lambda_kl_schedule: kl_schedule,
            lambda_max: f64,
            schedule_direction: direction,
            teacher_tau: f64,
            steps: u64,
            batch_size: usize,
            lr_det: f64,
            lr_sem: f64,
            adam_beta1: f64,
            adam_beta2: f64,
            log_interval: u64,
            gradient_isolation: bool,
            seed: u64,
            num_base: usize,
            num_novel: usize,
            train_scenes: usize,
            eval_scenes: usize,
            min_objects: usize,
            max_objects: usize,
            distractors: usize,
            novel_fraction: f64,
            sigma_region: f64,
            sigma_text: f64,
            sigma_token: f64,
            cost_class: f64,
            cost_box: f64,
            cost_giou: f64,
            w_box: f64,
            w_giou: f64,
            w_noobj: f64,
            pool_path: opt_string,
            out_path: opt_string,
            metrics_path: opt_string,
            data_path: opt_string,
            report_path: opt_string,
            eval_export: opt_string,
        }
    };
}

macro_rules! impl_known_keys {
    ($($field:ident : $kind:ident),* $(,)?) => {
        pub fn known_keys() -> &'static [&'static str] {
            &[$(stringify!($field)),*]
        }
    };
}

macro_rules! impl_apply_kv {
    ($($field:ident : $kind:ident),* $(,)?) => {
        /// Sets one key from its text value.
        pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
            match key {
                $(stringify!($field) => {
                    self.$field = parse_value!($kind, key, value)?;
                    Ok(())
                })*
                other => Err(Error::Parameter(format!("unknown config key {other:?}"))),
            }
        }
    };
}

macro_rules! impl_to_text {
    ($($field:ident : $kind:ident),* $(,)?) => {
        /// Renders the full config, one key per line.
        pub fn to_text(&self) -> String {
            let mut out = String::new();
            $(format_value!($kind, out, stringify!($field), &self.$field);)*
            out
        }
    };
}

macro_rules! parse_value {
    (usize, $key:expr, $value:expr) => {
        $value.parse::<usize>().map_err(|e| Error::Parameter(format!("{}: {e}", $key)))
    };
    (u64, $key:expr, $value:expr) => {
        $value.parse::<u64>().map_err(|e| Error::Parameter(format!("{}: {e}", $key)))
    };
    (f64, $key:expr, $value:expr) => {
        $value.parse::<f64>().map_err(|e| Error::Parameter(format!("{}: {e}", $key)))
    };
    (bool, $key:expr, $value:expr) => {
        match $value {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::Parameter(format!("{}: expected true|false, got {other:?}", $key))),
        }
    };
    (direction, $key:expr, $value:expr) => {
        Direction::parse($value)
    };
    (pool_init, $key:expr, $value:expr) => {
        PoolInit::parse($value)
    };
    (kl_schedule, $key:expr, $value:expr) => {
        KlSchedule::parse($value)
    };
    (opt_string, $key:expr, $value:expr) => {
        Ok::<_, Error>(if $value.is_empty() { None } else { Some($value.to_string()) })
    };
}

macro_rules! format_value {
    (direction, $out:expr, $key:expr, $v:expr) => {
        $out.push_str(&format!("{} = {}\n", $key, $v.as_str()))
    };
    (pool_init, $out:expr, $key:expr, $v:expr) => {
        $out.push_str(&format!("{} = {}\n", $key, $v.as_str()))
    };
    (kl_schedule, $out:expr, $key:expr, $v:expr) => {
        $out.push_str(&format!("{} = {}\n", $key, $v.as_str()))
    };
    (opt_string, $out:expr, $key:expr, $v:expr) => {
        if let Some(s) = $v {
            $out.push_str(&format!("{} = {}\n", $key, s));
        }
    };
    ($kind:ident, $out:expr, $key:expr, $v:expr) => {
        $out.push_str(&format!("{} = {}\n", $key, $v))
    };
}

impl RunConfig {
    config_table!(impl_known_keys);
    config_table!(impl_apply_kv);
    config_table!(impl_to_text);

    /// Parses config text; returns the config and the keys that fell back to
    /// their defaults.
    pub fn parse(text: &str) -> Result<(Self, Vec<&'static str>)> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parameter(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.apply_kv(key, value)?;
            seen.push(key.to_string());
        }
        cfg.validate()?;
        let defaulted = Self::known_keys()
            .iter()
            .filter(|k| !seen.iter().any(|s| s == *k))
            .copied()
            .collect();
        Ok((cfg, defaulted))
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<&'static str>)> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("c", self.c),
            ("queries", self.queries),
            ("decoder_layers", self.decoder_layers),
            ("decoder_heads", self.decoder_heads),
            ("m1", self.m1),
            ("batch_size", self.batch_size),
            ("pairs_per_category", self.pairs_per_category),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        if self.c <= self.d || (self.c - self.d) % 8 != 0 {
            return Err(Error::Parameter(
                "c must exceed d by a positive multiple of 8 (content block + box code)".into(),
            ));
        }
        if self.c % self.decoder_heads != 0 {
            return Err(Error::Parameter("c must be divisible by decoder_heads".into()));
        }
        if self.d < 4 {
            return Err(Error::Parameter("d must be at least 4".into()));
        }
        if self.tau <= 0.0 || self.alpha <= 0.0 || self.teacher_tau <= 0.0 {
            return Err(Error::Parameter("temperatures must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Parameter("gamma must lie in [0, 1]".into()));
        }
        if !(-1.0..1.0).contains(&self.delta) {
            return Err(Error::Parameter("delta must lie in (-1, 1)".into()));
        }
        if self.eps <= 0.0 || self.min_pts == 0 {
            return Err(Error::Parameter("eps and min_pts must be positive".into()));
        }
        if self.lambda_kl < 0.0 || self.lambda_max < 0.0 {
            return Err(Error::Parameter("loss weights must be nonnegative".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Parameter("log_interval must be positive".into()));
        }
        if self.num_base < 2 || self.num_novel < 1 {
            return Err(Error::Parameter(
                "need at least 2 base and 1 novel category".into(),
            ));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Parameter("invalid objects-per-scene range".into()));
        }
        if self.queries < self.max_objects {
            return Err(Error::Parameter(
                "queries must be at least max_objects for one-to-one matching".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.novel_fraction) {
            return Err(Error::Parameter("novel_fraction must lie in [0, 1]".into()));
        }
        if self.sigma_region < 0.0 || self.sigma_text < 0.0 || self.sigma_token < 0.0 {
            return Err(Error::Parameter("sigmas must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.mismatch_fraction) {
            return Err(Error::Parameter("mismatch_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn num_categories(&self) -> usize {
        self.num_base + self.num_novel
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_text();
        let (parsed, defaulted) = RunConfig::parse(&text).unwrap();
        assert_eq!(parsed, cfg);
        // Every non-path key appears in the rendered text.
        assert!(defaulted.iter().all(|k| k.ends_with("_path") || *k == "eval_export"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("nonsense = 3\n").unwrap_err();
        assert!(matches!(err, Error::Parameter(msg) if msg.contains("nonsense")));
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let (cfg, defaulted) = RunConfig::parse("# a comment\n\nseed = 99 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 99);
        assert!(defaulted.contains(&"d"));
        assert!(!defaulted.contains(&"seed"));
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::parse("tau = -0.5\n").is_err());
        assert!(RunConfig::parse("gamma = 1.5\n").is_err());
        assert!(RunConfig::parse("queries = 3\nmax_objects = 6\n").is_err());
        assert!(RunConfig::parse("schedule_direction = sideways\n").is_err());
        assert!(RunConfig::parse("seed = notanumber\n").is_err());
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(RunConfig::parse("tau\n").is_err());
    }
}
