//! Engine configuration and its flat `key = value` file format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ReasonerConfig {
    pub max_depth: usize,
    /// Neighbours retrieved per frontier node.
    pub k_nodes: usize,
    /// Unified candidates kept per expansion.
    pub k_triples: usize,
    /// Answers returned per query.
    pub k_answers: usize,
    pub beam_width: usize,
    pub top_m_relations: usize,
    /// Relations tried per expansion while searching training queries.
    pub explore_top_m: usize,
    pub relation_filter: bool,
    pub allow_revisit: bool,
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    /// Dimension of hash embeddings when no embedding file is given.
    pub embedding_dim: usize,
    pub relation_dim: usize,
    pub step_dim: usize,
    pub hidden_dim: usize,
    pub adapter_enabled: bool,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        Self {
            max_depth: 3,
            k_nodes: 10,
            k_triples: 10,
            k_answers: 50,
            beam_width: 32,
            top_m_relations: 1,
            explore_top_m: 3,
            relation_filter: true,
            allow_revisit: false,
            seed: 0,
            epochs: 100,
            learning_rate: 1e-4,
            lr_decay: 0.9,
            batch_size: 64,
            embedding_dim: 1024,
            relation_dim: 64,
            step_dim: 64,
            hidden_dim: 256,
            adapter_enabled: false,
        }
    }
}

pub const CONFIG_KEYS: [&str; 19] = [
    "max_depth",
    "k_nodes",
    "k_triples",
    "k_answers",
    "beam_width",
    "top_m_relations",
    "explore_top_m",
    "relation_filter",
    "allow_revisit",
    "seed",
    "epochs",
    "learning_rate",
    "lr_decay",
    "batch_size",
    "embedding_dim",
    "relation_dim",
    "step_dim",
    "hidden_dim",
    "adapter_enabled",
];

impl ReasonerConfig {
    /// Relation and step embeddings at the full 1024 width.
    pub fn large() -> Self {
        Self {
            relation_dim: 1024,
            step_dim: 1024,
            ..Self::default()
        }
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("invalid value {v:?} for {key}"))
        }
        fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(format!("invalid boolean {v:?} for {key}")),
            }
        }
        match key {
            "max_depth" => self.max_depth = num(key, value)?,
            "k_nodes" => self.k_nodes = num(key, value)?,
            "k_triples" => self.k_triples = num(key, value)?,
            "k_answers" => self.k_answers = num(key, value)?,
            "beam_width" => self.beam_width = num(key, value)?,
            "top_m_relations" => self.top_m_relations = num(key, value)?,
            "explore_top_m" => self.explore_top_m = num(key, value)?,
            "relation_filter" => self.relation_filter = flag(key, value)?,
            "allow_revisit" => self.allow_revisit = flag(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "lr_decay" => self.lr_decay = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "embedding_dim" => self.embedding_dim = num(key, value)?,
            "relation_dim" => self.relation_dim = num(key, value)?,
            "step_dim" => self.step_dim = num(key, value)?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "adapter_enabled" => self.adapter_enabled = flag(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Applies a `key = value` file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                msg: format!("expected \"key = value\", found {line:?}"),
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|msg| Error::Config { line: i + 1, msg })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Applies `ENGINE_<KEY>` variables from `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        for key in CONFIG_KEYS {
            let var = format!("ENGINE_{}", key.to_uppercase());
            if let Some(value) = lookup(&var) {
                self.set(key, value.trim()).map_err(|msg| Error::Config {
                    line: 0,
                    msg: format!("{var}: {msg}"),
                })?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("max_depth", self.max_depth),
            ("k_nodes", self.k_nodes),
            ("k_triples", self.k_triples),
            ("k_answers", self.k_answers),
            ("beam_width", self.beam_width),
            ("top_m_relations", self.top_m_relations),
            ("explore_top_m", self.explore_top_m),
            ("batch_size", self.batch_size),
            ("embedding_dim", self.embedding_dim),
            ("relation_dim", self.relation_dim),
            ("step_dim", self.step_dim),
            ("hidden_dim", self.hidden_dim),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::Config {
                    line: 0,
                    msg: format!("{key} must be at least 1"),
                });
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config {
                line: 0,
                msg: "learning_rate must be positive".into(),
            });
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config {
                line: 0,
                msg: "lr_decay must be in (0, 1]".into(),
            });
        }
        Ok(())
    }

    /// Effective configuration, one `key = value` per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let pairs: [(&str, String); 19] = [
            ("max_depth", self.max_depth.to_string()),
            ("k_nodes", self.k_nodes.to_string()),
            ("k_triples", self.k_triples.to_string()),
            ("k_answers", self.k_answers.to_string()),
            ("beam_width", self.beam_width.to_string()),
            ("top_m_relations", self.top_m_relations.to_string()),
            ("explore_top_m", self.explore_top_m.to_string()),
            ("relation_filter", self.relation_filter.to_string()),
            ("allow_revisit", self.allow_revisit.to_string()),
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("relation_dim", self.relation_dim.to_string()),
            ("step_dim", self.step_dim.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("adapter_enabled", self.adapter_enabled.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
