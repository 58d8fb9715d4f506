//! Pipeline configuration.
//!
//! Flat `key=value` text format; `#` starts a comment. Resolution order is
//! defaults, then the config file, then `--set` overrides. Unknown keys are
//! rejected so typos never silently fall back to defaults, and the resolved
//! configuration can be dumped in a canonical form for logging and
//! checkpoints.

use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    // gating
    pub quantile: f64,
    pub scorer_hidden: usize,
    // clustering
    pub knn_k: usize,
    pub group_size: usize,
    pub omega_morph: f64,
    pub omega_spatial: f64,
    // attention
    pub heads: usize,
    pub attn_hidden: usize,
    pub dropout: f64,
    // survival head
    pub experts: usize,
    pub components: usize,
    pub lambda_ent: f64,
    pub entropy_sign: f64,
    // optimization
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub folds: usize,
    pub jobs: usize,
    // ablations
    pub disable_qgps: bool,
    pub disable_ggc_hca: bool,
    // paths
    pub manifest: String,
    pub checkpoint: String,
    // synthetic cohort
    pub synth_slides: usize,
    pub synth_patches_min: usize,
    pub synth_patches_max: usize,
    pub synth_dim: usize,
    pub synth_phenotypes: usize,
    pub synth_alphas: Vec<f64>,
    pub synth_betas: Vec<f64>,
    pub synth_censoring: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            quantile: 0.25,
            scorer_hidden: 128,
            knn_k: 10,
            group_size: 64,
            omega_morph: 0.5,
            omega_spatial: 0.5,
            heads: 8,
            attn_hidden: 256,
            dropout: 0.1,
            experts: 5,
            components: 100,
            lambda_ent: 0.01,
            entropy_sign: -1.0,
            batch_size: 1,
            epochs: 20,
            learning_rate: 2e-4,
            weight_decay: 1e-3,
            seed: 42,
            folds: 5,
            jobs: 1,
            disable_qgps: false,
            disable_ggc_hca: false,
            manifest: String::new(),
            checkpoint: String::new(),
            synth_slides: 300,
            synth_patches_min: 24,
            synth_patches_max: 48,
            synth_dim: 16,
            synth_phenotypes: 2,
            synth_alphas: vec![5.0, 50.0],
            synth_betas: vec![4.0, 4.0],
            synth_censoring: 0.2,
        }
    }
}

/// (key, default, description) for `--help` and docs.
pub const KEY_DOCS: &[(&str, &str, &str)] = &[
    ("quantile", "0.25", "gating quantile q; keeps the top (1-q) of patches"),
    ("scorer_hidden", "128", "hidden width of the patch scorer MLP"),
    ("knn_k", "10", "neighbors per node in the similarity graph"),
    ("group_size", "64", "patches per cluster (last cluster takes the remainder)"),
    ("omega_morph", "0.5", "weight of cosine feature similarity"),
    ("omega_spatial", "0.5", "weight of the spatial kernel"),
    ("heads", "8", "attention heads (must divide the feature width)"),
    ("attn_hidden", "256", "hidden width of the attention pool"),
    ("dropout", "0.1", "dropout on attention weights and the pooled embedding"),
    ("experts", "5", "experts in the survival head"),
    ("components", "100", "log-logistic components per expert"),
    ("lambda_ent", "0.01", "weight of the gate-entropy term"),
    ("entropy_sign", "-1", "-1 rewards diverse gates, +1 penalizes entropy"),
    ("batch_size", "1", "slides per optimizer step (only 1 is supported)"),
    ("epochs", "20", "training epochs"),
    ("learning_rate", "2e-4", "Adam learning rate"),
    ("weight_decay", "1e-3", "decoupled weight decay"),
    ("seed", "42", "master RNG seed"),
    ("folds", "5", "cross-validation folds"),
    ("jobs", "1", "parallel fold workers for cv"),
    ("disable_qgps", "false", "ablation: keep every patch"),
    ("disable_ggc_hca", "false", "ablation: pool raw features directly"),
    ("manifest", "", "cohort manifest CSV path"),
    ("checkpoint", "", "checkpoint path (read by eval/km, written by train)"),
    ("synth_slides", "300", "synthetic cohort size"),
    ("synth_patches_min", "24", "min patches per synthetic slide"),
    ("synth_patches_max", "48", "max patches per synthetic slide"),
    ("synth_dim", "16", "synthetic feature width"),
    ("synth_phenotypes", "2", "latent phenotypes"),
    ("synth_alphas", "5,50", "per-phenotype median survival (months)"),
    ("synth_betas", "4,4", "per-phenotype log-logistic shape"),
    ("synth_censoring", "0.2", "censoring fraction in [0,1)"),
];

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: unparseable value {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|part| parse_num(key, part.trim()))
        .collect()
}

impl PipelineConfig {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim().trim_matches('"');
        match key {
            "quantile" => self.quantile = parse_num(key, v)?,
            "scorer_hidden" => self.scorer_hidden = parse_num(key, v)?,
            "knn_k" => self.knn_k = parse_num(key, v)?,
            "group_size" => self.group_size = parse_num(key, v)?,
            "omega_morph" => self.omega_morph = parse_num(key, v)?,
            "omega_spatial" => self.omega_spatial = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "attn_hidden" => self.attn_hidden = parse_num(key, v)?,
            "dropout" => self.dropout = parse_num(key, v)?,
            "experts" => self.experts = parse_num(key, v)?,
            "components" => self.components = parse_num(key, v)?,
            "lambda_ent" => self.lambda_ent = parse_num(key, v)?,
            "entropy_sign" => self.entropy_sign = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "folds" => self.folds = parse_num(key, v)?,
            "jobs" => self.jobs = parse_num(key, v)?,
            "disable_qgps" => self.disable_qgps = parse_bool(key, v)?,
            "disable_ggc_hca" => self.disable_ggc_hca = parse_bool(key, v)?,
            "manifest" => self.manifest = v.to_string(),
            "checkpoint" => self.checkpoint = v.to_string(),
            "synth_slides" => self.synth_slides = parse_num(key, v)?,
            "synth_patches_min" => self.synth_patches_min = parse_num(key, v)?,
            "synth_patches_max" => self.synth_patches_max = parse_num(key, v)?,
            "synth_dim" => self.synth_dim = parse_num(key, v)?,
            "synth_phenotypes" => self.synth_phenotypes = parse_num(key, v)?,
            "synth_alphas" => self.synth_alphas = parse_list(key, v)?,
            "synth_betas" => self.synth_betas = parse_list(key, v)?,
            "synth_censoring" => self.synth_censoring = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines (comments and blank lines ignored).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut cfg = PipelineConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Bounds checks across all keys.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.quantile) {
            return Err(Error::Config(format!("quantile must be in [0,1), got {}", self.quantile)));
        }
        if self.experts == 0 {
            return Err(Error::Config("experts must be >= 1".into()));
        }
        if self.components == 0 {
            return Err(Error::Config("components must be >= 1".into()));
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be >= 1".into()));
        }
        if self.group_size == 0 {
            return Err(Error::Config("group_size must be >= 1".into()));
        }
        if self.scorer_hidden == 0 || self.attn_hidden == 0 {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(format!(
                "batch_size must be 1 (per-slide updates), got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.lambda_ent < 0.0 {
            return Err(Error::Config("weight_decay and lambda_ent must be >= 0".into()));
        }
        if self.entropy_sign != 1.0 && self.entropy_sign != -1.0 {
            return Err(Error::Config(format!(
                "entropy_sign must be -1 or 1, got {}",
                self.entropy_sign
            )));
        }
        if self.omega_morph < 0.0
            || self.omega_spatial < 0.0
            || self.omega_morph + self.omega_spatial <= 0.0
        {
            return Err(Error::Config("similarity weights must be nonnegative and not both zero".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be >= 2".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be >= 1".into()));
        }
        if self.synth_patches_min == 0 || self.synth_patches_min > self.synth_patches_max {
            return Err(Error::Config("bad synth patch range".into()));
        }
        if !(0.0..1.0).contains(&self.synth_censoring) {
            return Err(Error::Config("synth_censoring must be in [0,1)".into()));
        }
        if self.synth_phenotypes == 0
            || self.synth_alphas.len() != self.synth_phenotypes
            || self.synth_betas.len() != self.synth_phenotypes
        {
            return Err(Error::Config(format!(
                "synth_alphas/synth_betas must list one value per phenotype ({})",
                self.synth_phenotypes
            )));
        }
        Ok(())
    }

    /// Canonical dump: every key, sorted, one per line. Feeding this back
    /// through `apply_text` reproduces the config exactly.
    pub fn to_canonical_text(&self) -> String {
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut pairs: Vec<(&str, String)> = vec![
            ("attn_hidden", self.attn_hidden.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("checkpoint", self.checkpoint.clone()),
            ("components", self.components.to_string()),
            ("disable_ggc_hca", self.disable_ggc_hca.to_string()),
            ("disable_qgps", self.disable_qgps.to_string()),
            ("dropout", format!("{}", self.dropout)),
            ("entropy_sign", format!("{}", self.entropy_sign)),
            ("epochs", self.epochs.to_string()),
            ("experts", self.experts.to_string()),
            ("folds", self.folds.to_string()),
            ("group_size", self.group_size.to_string()),
            ("heads", self.heads.to_string()),
            ("jobs", self.jobs.to_string()),
            ("knn_k", self.knn_k.to_string()),
            ("lambda_ent", format!("{}", self.lambda_ent)),
            ("learning_rate", format!("{}", self.learning_rate)),
            ("manifest", self.manifest.clone()),
            ("omega_morph", format!("{}", self.omega_morph)),
            ("omega_spatial", format!("{}", self.omega_spatial)),
            ("quantile", format!("{}", self.quantile)),
            ("scorer_hidden", self.scorer_hidden.to_string()),
            ("seed", self.seed.to_string()),
            ("synth_alphas", list(&self.synth_alphas)),
            ("synth_betas", list(&self.synth_betas)),
            ("synth_censoring", format!("{}", self.synth_censoring)),
            ("synth_dim", self.synth_dim.to_string()),
            ("synth_patches_max", self.synth_patches_max.to_string()),
            ("synth_patches_min", self.synth_patches_min.to_string()),
            ("synth_phenotypes", self.synth_phenotypes.to_string()),
            ("synth_slides", self.synth_slides.to_string()),
        ];
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (k, v) in pairs {
            writeln!(out, "{k}={v}").expect("string write");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = PipelineConfig::default();
        let err = cfg.set("quantil", "0.5").unwrap_err().to_string();
        assert!(err.contains("quantil"), "{err}");
    }

    #[test]
    fn override_and_bounds() {
        let mut cfg = PipelineConfig::default();
        cfg.set("quantile", "0.5").unwrap();
        assert_eq!(cfg.quantile, 0.5);
        cfg.set("experts", "0").unwrap();
        assert!(cfg.validate().is_err());
        cfg.set("experts", "1").unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn list_values_parse() {
        let mut cfg = PipelineConfig::default();
        cfg.set("synth_alphas", "1.5, 2, 30").unwrap();
        assert_eq!(cfg.synth_alphas, vec![1.5, 2.0, 30.0]);
        cfg.set("synth_betas", "1,1,1").unwrap();
        cfg.set("synth_phenotypes", "3").unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = PipelineConfig::default();
        cfg.set("quantile", "0.75").unwrap();
        cfg.set("manifest", "/tmp/m.csv").unwrap();
        cfg.set("disable_qgps", "true").unwrap();
        let text = cfg.to_canonical_text();
        let mut back = PipelineConfig::default();
        back.apply_text(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn file_parsing_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "# comment\nquantile=0.5\n\nheads = 4\n").unwrap();
        let cfg = PipelineConfig::from_file(&p).unwrap();
        assert_eq!(cfg.quantile, 0.5);
        assert_eq!(cfg.heads, 4);
    }

    #[test]
    fn every_documented_key_is_settable() {
        let mut cfg = PipelineConfig::default();
        for (key, default, _) in KEY_DOCS {
            if default.is_empty() {
                cfg.set(key, "x").unwrap();
            } else {
                cfg.set(key, default).unwrap();
            }
        }
    }
}
