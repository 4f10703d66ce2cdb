//! Flat `key = value` configuration shared by every stage.
//!
//! Keys carry a stage prefix (`datagen.`, `graph.`, `train.`, `index.`,
//! `eval.`). Values resolve in order: defaults, then the config file, then
//! `GCLMO_*` environment variables (`train.lr` → `GCLMO_TRAIN_LR`), then
//! explicit overrides such as command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{CatalogConfig, LogConfig};
use crate::error::{Error, Result};
use crate::loss::Denominator;
use crate::retrieval::IndexConfig;
use crate::rng::derive_seed;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub catalog: CatalogConfig,
    /// `logs.n_days` covers training and evaluation days together.
    pub logs: LogConfig,
    /// Trailing days held out for evaluation.
    pub eval_days: u32,
    pub graph_window_days: u32,
    pub train: TrainConfig,
    pub index: IndexConfig,
    /// Retrieval size; 0 means 1% of the corpus.
    pub eval_k: usize,
    pub longtail_window_days: u32,
    pub longtail_percentile: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            catalog: CatalogConfig::default(),
            logs: LogConfig::default(),
            eval_days: 1,
            graph_window_days: 7,
            train: TrainConfig::default(),
            index: IndexConfig::default(),
            eval_k: 0,
            longtail_window_days: 14,
            longtail_percentile: 0.8,
        }
    }
}

trait ConfigValue: Sized {
    fn parse(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u32, u64, bool);

impl ConfigValue for f64 {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| !v.is_nan())
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for Denominator {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "exclude" => Some(Denominator::ExcludeOtherPositives),
            "full" => Some(Denominator::Full),
            _ => None,
        }
    }
    fn render(&self) -> String {
        match self {
            Denominator::ExcludeOtherPositives => "exclude".into(),
            Denominator::Full => "full".into(),
        }
    }
}

fn parse_as<T: ConfigValue>(key: &str, value: &str) -> Result<T> {
    T::parse(value.trim()).ok_or_else(|| Error::config(format!("invalid value {value:?} for `{key}`")))
}

macro_rules! config_keys {
    ($($key:literal => [$($place:tt)+]),+ $(,)?) => {
        /// Every recognized configuration key.
        pub const KEYS: &[&str] = &[$($key),+];

        impl PipelineConfig {
            /// Sets one key from its text value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => self.$($place)+ = parse_as(key, value)?,)+
                    _ => return Err(unknown_key(key)),
                }
                Ok(())
            }

            /// Text value of one key.
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(ConfigValue::render(&self.$($place)+)),)+
                    _ => None,
                }
            }
        }
    };
}

config_keys! {
    "datagen.items" => [catalog.n_items],
    "datagen.categories" => [catalog.n_categories],
    "datagen.queries" => [catalog.n_queries],
    "datagen.skew" => [catalog.skew],
    "datagen.latent_dim" => [catalog.dim],
    "datagen.catalog_seed" => [catalog.seed],
    "datagen.relevance_threshold" => [catalog.relevance_threshold],
    "datagen.styles" => [catalog.styles],
    "datagen.style_spread" => [catalog.style_spread],
    "datagen.item_spread" => [catalog.item_spread],
    "datagen.query_spread" => [catalog.query_spread],
    "datagen.users" => [logs.n_users],
    "datagen.days" => [logs.n_days],
    "datagen.eval_days" => [eval_days],
    "datagen.page_size" => [logs.page_size],
    "datagen.log_seed" => [logs.seed],
    "datagen.searches_per_day" => [logs.searches_per_day],
    "datagen.favorite_categories" => [logs.favorite_categories],
    "datagen.max_triggers" => [logs.max_triggers],
    "datagen.query_weight" => [logs.query_weight],
    "datagen.taste_weight" => [logs.taste_weight],
    "datagen.taste_spread" => [logs.taste_spread],
    "datagen.intent_noise" => [logs.intent_noise],
    "datagen.exposure_popularity" => [logs.exposure_popularity],
    "datagen.exposure_affinity" => [logs.exposure_affinity],
    "datagen.click_bias" => [logs.click_bias],
    "datagen.click_scale" => [logs.click_scale],
    "datagen.purchase_bias" => [logs.purchase_bias],
    "datagen.purchase_scale" => [logs.purchase_scale],
    "graph.window_days" => [graph_window_days],
    "train.lr" => [train.learning_rate],
    "train.batch_size" => [train.batch_size],
    "train.epochs" => [train.epochs],
    "train.tau" => [train.tau],
    "train.weight.relevance" => [train.weights.0[0]],
    "train.weight.exposure" => [train.weights.0[1]],
    "train.weight.click" => [train.weights.0[2]],
    "train.weight.purchase" => [train.weights.0[3]],
    "train.fan_out" => [train.fan_out],
    "train.p_drop" => [train.p_drop],
    "train.p_edge" => [train.p_edge],
    "train.under_impressions" => [train.under_impressions],
    "train.random_negatives" => [train.random_negatives],
    "train.seed" => [train.seed],
    "train.contrastive" => [train.contrastive],
    "train.denominator" => [train.denominator],
    "train.momentum" => [train.momentum],
    "train.dim" => [train.dim],
    "train.init_scale" => [train.init_scale],
    "index.topk" => [index.top_k],
    "index.category_restricted" => [index.category_restricted],
    "index.fan_out" => [index.fan_out],
    "index.seed" => [index.seed],
    "eval.k" => [eval_k],
    "eval.longtail_window_days" => [longtail_window_days],
    "eval.longtail_percentile" => [longtail_percentile],
}

fn unknown_key(key: &str) -> Error {
    Error::config(format!("unknown config key `{key}`; valid keys: {}", KEYS.join(", ")))
}

/// Environment variable consulted for `key`.
pub fn env_var_name(key: &str) -> String {
    format!("GCLMO_{}", key.to_ascii_uppercase().replace('.', "_"))
}

impl PipelineConfig {
    /// Applies a `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("{}:{}: expected `key = value`", origin.display(), idx + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::config(format!("{}:{}: {e}", origin.display(), idx + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path)
    }

    /// Applies every `GCLMO_*` variable that names a known key.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let by_name: BTreeMap<String, &str> = KEYS.iter().map(|k| (env_var_name(k), *k)).collect();
        for (name, value) in vars {
            if let Some(key) = by_name.get(&name) {
                self.set(key, &value)
                    .map_err(|e| Error::config(format!("environment variable {name}: {e}")))?;
            }
        }
        Ok(())
    }

    /// Defaults ← file ← environment ← overrides.
    pub fn resolve(file: Option<&Path>, env: impl IntoIterator<Item = (String, String)>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        cfg.apply_env(env)?;
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its current value, in key order.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        KEYS.iter()
            .map(|k| (k.to_string(), self.get(k).expect("listed key")))
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.snapshot().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_days < 1 || self.eval_days >= self.logs.n_days {
            return Err(Error::config("datagen.eval_days must be at least 1 and below datagen.days"));
        }
        if self.graph_window_days < 1 || self.longtail_window_days < 1 {
            return Err(Error::config("window lengths must be at least one day"));
        }
        if !(0.0..=1.0).contains(&self.longtail_percentile) {
            return Err(Error::config("eval.longtail_percentile must lie in [0, 1]"));
        }
        if self.index.top_k < 1 {
            return Err(Error::config("index.topk must be at least 1"));
        }
        self.train.validate()
    }

    /// Last day used for training.
    pub fn last_train_day(&self) -> u32 {
        self.logs.n_days - self.eval_days - 1
    }

    /// Retrieval size used by evaluation.
    pub fn resolved_eval_k(&self) -> usize {
        if self.eval_k > 0 {
            self.eval_k
        } else {
            (self.catalog.n_items / 100).max(1)
        }
    }

    /// Copy with every stage seed derived from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.catalog.seed = derive_seed(seed, &[1]);
        cfg.logs.seed = derive_seed(seed, &[2]);
        cfg.train.seed = derive_seed(seed, &[3]);
        cfg.index.seed = derive_seed(seed, &[4]);
        cfg
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("catalog".to_string(), self.catalog.seed),
            ("logs".to_string(), self.logs.seed),
            ("train".to_string(), self.train.seed),
            ("index".to_string(), self.index.seed),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let cfg = PipelineConfig::default();
        let mut copy = PipelineConfig::default();
        copy.train.learning_rate = 123.0;
        for key in KEYS {
            copy.set(key, &cfg.get(key).unwrap()).unwrap();
        }
        assert_eq!(copy, cfg);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = PipelineConfig::default().set("train.lrr", "1").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train.lrr") && msg.contains("train.lr,"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn precedence_is_file_env_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "# comment\ntrain.lr = 0.5\ntrain.epochs = 2\ntrain.dim=8\n").unwrap();
        let env = vec![("GCLMO_TRAIN_EPOCHS".to_string(), "3".to_string()), ("HOME".into(), "/".into())];
        let cfg = PipelineConfig::resolve(Some(&path), env, &[("train.dim".into(), "4".into())]).unwrap();
        assert_eq!(cfg.train.learning_rate, 0.5);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.dim, 4);
    }

    #[test]
    fn bad_lines_report_position() {
        let mut cfg = PipelineConfig::default();
        let err = cfg.apply_text("train.lr = 1\nnonsense\n", Path::new("x.conf")).unwrap_err();
        assert!(err.to_string().contains("x.conf:2"));
        let err = cfg.apply_text("train.epochs = many\n", Path::new("x.conf")).unwrap_err();
        assert!(err.to_string().contains("many"));
    }

    #[test]
    fn derived_values() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.resolved_eval_k(), 100);
        assert_eq!(cfg.last_train_day(), 13);
        assert_ne!(cfg.with_seed(1).train.seed, cfg.with_seed(2).train.seed);
        assert_eq!(env_var_name("train.weight.click"), "GCLMO_TRAIN_WEIGHT_CLICK");
    }
}
