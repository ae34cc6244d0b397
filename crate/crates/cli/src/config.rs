//! Flat `module.key = value` run configuration.
//!
//! Grammar: one `key = value` pair per line; blank lines and lines starting
//! with `#` are ignored; keys are `module.name`. Every key must be one of
//! the preset keys, so typos fail loudly instead of being ignored.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use dfr_core::checkpoint::sha256_hex;
use dfr_core::error::{DfrError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

pub const PRESETS: [&str; 3] = ["smoke", "tiny", "paper"];

fn base() -> Vec<(&'static str, String)> {
    let v = |s: &str| s.to_string();
    vec![
        ("run.preset", v("tiny")),
        ("run.threads", v("0")),
        ("world.seed", v("1")),
        ("world.regions", v("1200")),
        ("encoder.seed", v("5")),
        ("encoder.d_e", v("330")),
        ("encoder.hidden", v("64")),
        ("encoder.gain", v("0.4")),
        ("data.seed", v("3")),
        ("data.train", v("2000")),
        ("data.test", v("500")),
        ("data.test_region_fraction", v("0.25")),
        ("data.robust_n", v("200")),
        ("data.shift_n", v("100")),
        ("data.shift_pool_n", v("64")),
        ("data.similarity_margin", v("0.25")),
        ("data.county_min", v("3")),
        ("data.county_max", v("8")),
        ("corpus.seed", v("7")),
        ("corpus.regions", v("1500")),
        ("corpus.literal_per_task", v("500")),
        ("corpus.zero_context_per_task", v("120")),
        ("corpus.reports", v("300")),
        ("corpus.raw_input", v("300")),
        ("corpus.raw_budget", v("240")),
        ("backbone.d_llm", v("64")),
        ("backbone.layers", v("2")),
        ("backbone.heads", v("4")),
        ("backbone.d_ff", v("256")),
        ("backbone.max_context", v("512")),
        ("backbone.seed", v("0")),
        ("pretrain.epochs", v("3")),
        ("pretrain.batch", v("16")),
        ("pretrain.lr", v("0.003")),
        ("pretrain.warmup", v("50")),
        ("pretrain.heldout_fraction", v("0.05")),
        ("pretrain.seed", v("0")),
        ("train.mode", v("dfr_frozen")),
        ("train.strategy", v("mix")),
        ("train.n_tokens", v("4")),
        ("train.lambda", v("0")),
        ("train.tau", v("0.07")),
        ("train.lr", v("0.003")),
        ("train.lr_backbone", v("0.0001")),
        ("train.warmup", v("20")),
        ("train.epochs", v("10")),
        ("train.batch", v("16")),
        ("train.clip", v("1")),
        ("train.val_fraction", v("0.1")),
        ("train.seed", v("11")),
        ("eval.raw_budget", v("240")),
        ("eval.shots", v("3")),
        ("eval.finetune_n", v("16")),
        ("eval.finetune_steps", v("30")),
        ("eval.finetune_lr", v("0.001")),
        ("eval.probe_lambda", v("1")),
        ("mlp.hidden", v("64")),
        ("mlp.epochs", v("30")),
        ("mlp.lr", v("0.001")),
        ("mlp.seed", v("0")),
        ("sweep.n", v("1,2,4,8")),
        ("sweep.separate", v("true")),
    ]
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut values: BTreeMap<String, String> = base().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let mut set = |k: &str, v: &str| {
            values.insert(k.into(), v.into());
        };
        match name {
            "tiny" => {}
            "smoke" => {
                set("world.regions", "200");
                set("data.train", "400");
                set("data.test", "100");
                set("data.robust_n", "40");
                set("data.shift_n", "24");
                set("data.shift_pool_n", "24");
                set("corpus.regions", "300");
                set("corpus.literal_per_task", "40");
                set("corpus.zero_context_per_task", "10");
                set("corpus.reports", "30");
                set("corpus.raw_input", "30");
                set("backbone.d_llm", "32");
                set("backbone.d_ff", "128");
                set("pretrain.epochs", "1");
                set("train.epochs", "1");
                set("mlp.epochs", "3");
                set("sweep.n", "1,4");
                set("sweep.separate", "false");
            }
            "paper" => {
                set("world.regions", "3000");
                set("data.train", "6000");
                set("data.test", "1000");
                set("data.robust_n", "400");
                set("data.shift_n", "200");
                set("backbone.d_llm", "128");
                set("backbone.layers", "4");
                set("backbone.d_ff", "512");
            }
            other => {
                return Err(DfrError::Config(format!(
                    "unknown preset {other:?} (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        }
        values.insert("run.preset".into(), name.into());
        Ok(Self { values })
    }

    /// Sets a known key; unknown keys are a config error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(DfrError::Config(format!("unknown config key {key:?}"))),
        }
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DfrError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| DfrError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// A preset (named by `run.preset` in the file, default tiny) with the
    /// file's values applied.
    pub fn from_text(text: &str) -> Result<Self> {
        let preset = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == "run.preset")
            .map(|(_, v)| v.trim().to_string())
            .unwrap_or_else(|| "tiny".into());
        let mut cfg = Self::preset(&preset)?;
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DfrError::io(path, e))?;
        Self::from_text(&text)
    }

    /// Canonical text: sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// sha256 of the canonical text.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    /// Hash of the keys whose prefix is one of `modules`, so downstream
    /// artifacts are not invalidated by unrelated keys.
    pub fn hash_of(&self, modules: &[&str]) -> String {
        let text: String = self
            .values
            .iter()
            .filter(|(k, _)| modules.iter().any(|m| k.split('.').next() == Some(*m)))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        sha256_hex(text.as_bytes())
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| DfrError::Config(format!("unknown config key {key:?}")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let s = self.raw(key)?;
        s.parse()
            .map_err(|e| DfrError::Config(format!("{key} = {s:?}: {e}")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        let s = self.raw(key)?;
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|e| DfrError::Config(format!("{key} = {s:?}: {e}")))
            })
            .collect()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }
}
