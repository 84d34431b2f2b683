//! Flat key=value run configuration with dotted keys.
//!
//! Unknown and duplicate keys are rejected. The canonical text (sorted keys)
//! is hashed with CRC32; the hash is embedded in every output CSV and in
//! checkpoints so artifacts can be traced to their configuration.

use std::fmt::Write as _;

use crate::backbone::BackboneConfig;
use crate::data::SynthSpec;
use crate::error::{CdiraError, Result};
use crate::model::HeadConfig;
use crate::train::{PipelineConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n_classes: usize,
    pub n_domains: usize,
    pub per_class_domain: usize,
    pub image_size: usize,
    /// None = scale with image size.
    pub glyph_min: Option<usize>,
    pub glyph_max: Option<usize>,
    pub jitter: Option<usize>,
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub top_k: usize,
    pub tau: f32,
    pub grl_lambda: f32,
    pub global_hidden: usize,
    pub roi_dim: usize,
    pub fused_hidden: usize,
    pub route_hidden: usize,
    pub domain_hidden: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub hflip: bool,
    pub adversarial: bool,
    pub candidates: Vec<usize>,
    pub sample_size: usize,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub seed: u64,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_classes: 10,
            n_domains: 8,
            per_class_domain: 125,
            image_size: 64,
            glyph_min: None,
            glyph_max: None,
            jitter: None,
            widths: vec![16, 32, 64],
            kernel: 3,
            top_k: 0,
            tau: 0.9,
            grl_lambda: 1.0,
            global_hidden: 256,
            roi_dim: 512,
            fused_hidden: 512,
            route_hidden: 64,
            domain_hidden: 128,
            max_epochs: 50,
            patience: 5,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 64,
            warmup_epochs: 2,
            hflip: false,
            adversarial: true,
            candidates: vec![4, 6, 8, 10, 12, 16, 20, 24, 30],
            sample_size: 5000,
            split_train: 0.8,
            split_val: 0.1,
            split_test: 0.1,
            seed: 0,
            threads: 8,
        }
    }
}

/// One configuration key for help output.
pub struct KeyDoc {
    pub key: &'static str,
    pub default: &'static str,
    /// The value used in the original experimental protocol, where one exists.
    pub paper: Option<&'static str>,
    pub help: &'static str,
}

pub const SCHEMA: &[KeyDoc] = &[
    KeyDoc { key: "data.n_classes", default: "10", paper: Some("10"), help: "number of classes in the synthetic task" },
    KeyDoc { key: "data.n_domains", default: "8", paper: None, help: "number of background styles (true domains)" },
    KeyDoc { key: "data.per_class_domain", default: "125", paper: None, help: "images per (class, domain) pair" },
    KeyDoc { key: "data.image_size", default: "64", paper: Some("224"), help: "square input edge in pixels" },
    KeyDoc { key: "data.glyph_min", default: "auto", paper: None, help: "min glyph edge; auto = 3/16 of image size" },
    KeyDoc { key: "data.glyph_max", default: "auto", paper: None, help: "max glyph edge; auto = 5/16 of image size" },
    KeyDoc { key: "data.jitter", default: "auto", paper: None, help: "glyph position jitter; auto = 1/16 of image size" },
    KeyDoc { key: "backbone.widths", default: "16,32,64", paper: None, help: "channel widths per stage; last = feature channels" },
    KeyDoc { key: "backbone.kernel", default: "3", paper: None, help: "conv kernel size (odd)" },
    KeyDoc { key: "model.k", default: "0", paper: None, help: "Top-K ROI positions; 0 = ceil(0.1*H*W)" },
    KeyDoc { key: "model.tau", default: "0.9", paper: Some("0.9"), help: "confidence threshold for dynamic routing" },
    KeyDoc { key: "model.grl_lambda", default: "1", paper: None, help: "gradient reversal scale (paper leaves it unstated)" },
    KeyDoc { key: "model.global_hidden", default: "256", paper: Some("256"), help: "global head hidden width" },
    KeyDoc { key: "model.roi_dim", default: "512", paper: Some("512"), help: "refined ROI feature width" },
    KeyDoc { key: "model.fused_hidden", default: "512", paper: Some("512"), help: "fused head hidden width" },
    KeyDoc { key: "model.route_hidden", default: "64", paper: None, help: "routing head hidden width" },
    KeyDoc { key: "model.domain_hidden", default: "128", paper: None, help: "domain head hidden width" },
    KeyDoc { key: "train.max_epochs", default: "50", paper: Some("50"), help: "epoch cap for joint training" },
    KeyDoc { key: "train.patience", default: "5", paper: Some("5"), help: "early-stopping patience on validation loss" },
    KeyDoc { key: "train.lr", default: "0.001", paper: Some("0.00001"), help: "learning rate (paper value presumes a pretrained backbone)" },
    KeyDoc { key: "train.weight_decay", default: "0.0001", paper: None, help: "decoupled weight decay" },
    KeyDoc { key: "train.batch_size", default: "64", paper: None, help: "minibatch size" },
    KeyDoc { key: "train.warmup_epochs", default: "2", paper: None, help: "global-head-only epochs before clustering" },
    KeyDoc { key: "train.hflip", default: "false", paper: Some("true"), help: "horizontal flip augmentation; destroys position-coded class semantics, keep off unless classes are mirror-safe" },
    KeyDoc { key: "train.adversarial", default: "true", paper: Some("true"), help: "train the GRL domain adversary" },
    KeyDoc { key: "cluster.candidates", default: "4,6,8,10,12,16,20,24,30", paper: None, help: "candidate cluster counts for silhouette selection" },
    KeyDoc { key: "cluster.sample_size", default: "5000", paper: Some("5000"), help: "subsample size for silhouette scoring" },
    KeyDoc { key: "split.train", default: "0.8", paper: Some("0.8"), help: "train fraction" },
    KeyDoc { key: "split.val", default: "0.1", paper: Some("0.1"), help: "validation fraction" },
    KeyDoc { key: "split.test", default: "0.1", paper: Some("0.1"), help: "test fraction" },
    KeyDoc { key: "seed", default: "0", paper: None, help: "master seed; every RNG stream derives from it" },
    KeyDoc { key: "threads", default: "8", paper: None, help: "worker thread cap (results are thread-count invariant)" },
];

/// Loss weights are fixed constants (0.5, 1.0, 0.5, 0.01, 0.5), not keys.
pub const LOSS_WEIGHTS_NOTE: &str =
    "loss weights are fixed: 0.5*cls_g + 1.0*cls_f + 0.5*route + 0.01*route_reg + 0.5*dom";

impl RunConfig {
    pub fn preset(name: &str) -> Option<RunConfig> {
        match name {
            "default" => Some(RunConfig::default()),
            "paper" => Some(RunConfig {
                image_size: 224,
                lr: 1e-5,
                ..RunConfig::default()
            }),
            // keeps the full-width backbone: narrow ones destabilize under
            // the reversed domain gradient at small data scales
            "small" => Some(RunConfig {
                per_class_domain: 25,
                image_size: 48,
                warmup_epochs: 6,
                max_epochs: 14,
                ..RunConfig::default()
            }),
            _ => None,
        }
    }

    /// Parse overrides on top of the defaults; unknown or duplicate keys are
    /// errors.
    pub fn parse_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CdiraError::Config(format!("line {}: expected key=value, got {raw:?}", ln + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(CdiraError::Config(format!("duplicate key {key:?}")));
            }
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a preset by name or a config file by path.
    pub fn load(name_or_path: &str) -> Result<RunConfig> {
        if let Some(preset) = RunConfig::preset(name_or_path) {
            return Ok(preset);
        }
        let text = std::fs::read_to_string(name_or_path).map_err(|e| {
            CdiraError::Config(format!(
                "{name_or_path:?} is neither a preset (default, paper, small) nor a readable file: {e}"
            ))
        })?;
        RunConfig::parse_text(&text)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn int(v: &str) -> Result<usize> {
            v.parse()
                .map_err(|_| CdiraError::Config(format!("expected integer, got {v:?}")))
        }
        fn intopt(v: &str) -> Result<Option<usize>> {
            if v == "auto" {
                Ok(None)
            } else {
                int(v).map(Some)
            }
        }
        fn float(v: &str) -> Result<f32> {
            v.parse()
                .map_err(|_| CdiraError::Config(format!("expected float, got {v:?}")))
        }
        fn float64(v: &str) -> Result<f64> {
            v.parse()
                .map_err(|_| CdiraError::Config(format!("expected float, got {v:?}")))
        }
        fn boolean(v: &str) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(CdiraError::Config(format!("expected true/false, got {v:?}"))),
            }
        }
        fn list(v: &str) -> Result<Vec<usize>> {
            v.split(',')
                .map(|s| int(s.trim()))
                .collect::<Result<Vec<_>>>()
        }
        match key {
            "data.n_classes" => self.n_classes = int(value)?,
            "data.n_domains" => self.n_domains = int(value)?,
            "data.per_class_domain" => self.per_class_domain = int(value)?,
            "data.image_size" => self.image_size = int(value)?,
            "data.glyph_min" => self.glyph_min = intopt(value)?,
            "data.glyph_max" => self.glyph_max = intopt(value)?,
            "data.jitter" => self.jitter = intopt(value)?,
            "backbone.widths" => self.widths = list(value)?,
            "backbone.kernel" => self.kernel = int(value)?,
            "model.k" => self.top_k = int(value)?,
            "model.tau" => self.tau = float(value)?,
            "model.grl_lambda" => self.grl_lambda = float(value)?,
            "model.global_hidden" => self.global_hidden = int(value)?,
            "model.roi_dim" => self.roi_dim = int(value)?,
            "model.fused_hidden" => self.fused_hidden = int(value)?,
            "model.route_hidden" => self.route_hidden = int(value)?,
            "model.domain_hidden" => self.domain_hidden = int(value)?,
            "train.max_epochs" => self.max_epochs = int(value)?,
            "train.patience" => self.patience = int(value)?,
            "train.lr" => self.lr = float(value)?,
            "train.weight_decay" => self.weight_decay = float(value)?,
            "train.batch_size" => self.batch_size = int(value)?,
            "train.warmup_epochs" => self.warmup_epochs = int(value)?,
            "train.hflip" => self.hflip = boolean(value)?,
            "train.adversarial" => self.adversarial = boolean(value)?,
            "cluster.candidates" => self.candidates = list(value)?,
            "cluster.sample_size" => self.sample_size = int(value)?,
            "split.train" => self.split_train = float64(value)?,
            "split.val" => self.split_val = float64(value)?,
            "split.test" => self.split_test = float64(value)?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| CdiraError::Config(format!("expected integer, got {value:?}")))?
            }
            "threads" => self.threads = int(value)?,
            other => {
                return Err(CdiraError::Config(format!("unknown key {other:?}")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience > self.max_epochs {
            return Err(CdiraError::Config(
                "train.patience must not exceed train.max_epochs".into(),
            ));
        }
        if !(self.lr >= 0.0) {
            return Err(CdiraError::Config("train.lr must be non-negative".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(CdiraError::Config("model.tau must lie in (0, 1)".into()));
        }
        if self.grl_lambda < 0.0 {
            return Err(CdiraError::Config("model.grl_lambda must be >= 0".into()));
        }
        self.backbone_config().validate()?;
        Ok(())
    }

    /// All keys in sorted order; hashing this text identifies the run.
    pub fn canonical_text(&self) -> String {
        let fmt_opt = |v: Option<usize>| v.map_or("auto".to_string(), |x| x.to_string());
        let fmt_list =
            |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut pairs: Vec<(String, String)> = vec![
            ("backbone.kernel".into(), self.kernel.to_string()),
            ("backbone.widths".into(), fmt_list(&self.widths)),
            ("cluster.candidates".into(), fmt_list(&self.candidates)),
            ("cluster.sample_size".into(), self.sample_size.to_string()),
            ("data.glyph_max".into(), fmt_opt(self.glyph_max)),
            ("data.glyph_min".into(), fmt_opt(self.glyph_min)),
            ("data.image_size".into(), self.image_size.to_string()),
            ("data.jitter".into(), fmt_opt(self.jitter)),
            ("data.n_classes".into(), self.n_classes.to_string()),
            ("data.n_domains".into(), self.n_domains.to_string()),
            ("data.per_class_domain".into(), self.per_class_domain.to_string()),
            ("model.domain_hidden".into(), self.domain_hidden.to_string()),
            ("model.fused_hidden".into(), self.fused_hidden.to_string()),
            ("model.global_hidden".into(), self.global_hidden.to_string()),
            ("model.grl_lambda".into(), self.grl_lambda.to_string()),
            ("model.k".into(), self.top_k.to_string()),
            ("model.roi_dim".into(), self.roi_dim.to_string()),
            ("model.route_hidden".into(), self.route_hidden.to_string()),
            ("model.tau".into(), self.tau.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("split.test".into(), self.split_test.to_string()),
            ("split.train".into(), self.split_train.to_string()),
            ("split.val".into(), self.split_val.to_string()),
            ("threads".into(), self.threads.to_string()),
            ("train.adversarial".into(), self.adversarial.to_string()),
            ("train.batch_size".into(), self.batch_size.to_string()),
            ("train.hflip".into(), self.hflip.to_string()),
            ("train.lr".into(), self.lr.to_string()),
            ("train.max_epochs".into(), self.max_epochs.to_string()),
            ("train.patience".into(), self.patience.to_string()),
            ("train.warmup_epochs".into(), self.warmup_epochs.to_string()),
            ("train.weight_decay".into(), self.weight_decay.to_string()),
        ];
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// CRC32 of the canonical text.
    pub fn hash(&self) -> u32 {
        crc32fast::hash(self.canonical_text().as_bytes())
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let auto = SynthSpec::with_size(self.image_size);
        SynthSpec {
            n_classes: self.n_classes,
            n_domains: self.n_domains,
            per_class_domain: self.per_class_domain,
            image_size: self.image_size,
            glyph_min: self.glyph_min.unwrap_or(auto.glyph_min),
            glyph_max: self.glyph_max.unwrap_or(auto.glyph_max),
            jitter: self.jitter.unwrap_or(auto.jitter),
            seed: self.seed,
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            input_size: self.image_size,
            stage_widths: self.widths.clone(),
            kernel: self.kernel,
        }
    }

    pub fn head_config(&self, n_classes: usize) -> HeadConfig {
        HeadConfig {
            n_classes,
            k: self.top_k,
            global_hidden: self.global_hidden,
            roi_dim: self.roi_dim,
            fused_hidden: self.fused_hidden,
            route_hidden: self.route_hidden,
            domain_hidden: self.domain_hidden,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_epochs,
            patience: self.patience,
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            grl_lambda: self.grl_lambda,
            tau: self.tau,
            warmup_epochs: self.warmup_epochs,
            adversarial: self.adversarial,
            hflip: self.hflip,
            seed: self.seed,
            threads: self.threads,
        }
    }

    pub fn pipeline_config(&self, n_classes: usize) -> PipelineConfig {
        PipelineConfig {
            backbone: self.backbone_config(),
            heads: self.head_config(n_classes),
            train: self.train_config(),
            cluster_candidates: self.candidates.clone(),
            cluster_sample_size: self.sample_size,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_canonical_text() {
        let cfg = RunConfig::default();
        let parsed = RunConfig::parse_text(&cfg.canonical_text()).unwrap();
        assert_eq!(cfg, parsed);
        assert_eq!(cfg.hash(), parsed.hash());
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        assert!(RunConfig::parse_text("bogus.key=3\n").is_err());
        assert!(RunConfig::parse_text("seed=1\nseed=2\n").is_err());
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = RunConfig::parse_text("# a comment\n\nseed=42 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 42);
    }

    #[test]
    fn overrides_change_the_hash() {
        let a = RunConfig::default();
        let b = RunConfig::parse_text("model.tau=0.5\n").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert!((b.tau - 0.5).abs() < 1e-6);
    }

    #[test]
    fn presets_exist_and_validate() {
        for name in ["default", "paper", "small"] {
            let cfg = RunConfig::preset(name).unwrap();
            cfg.validate().unwrap();
        }
        assert!(RunConfig::preset("nope").is_none());
        let paper = RunConfig::preset("paper").unwrap();
        assert_eq!(paper.image_size, 224);
        assert!((paper.lr - 1e-5).abs() < 1e-12);
    }

    #[test]
    fn schema_covers_every_canonical_key() {
        let cfg = RunConfig::default();
        let keys: Vec<&str> = SCHEMA.iter().map(|d| d.key).collect();
        for line in cfg.canonical_text().lines() {
            let key = line.split('=').next().unwrap();
            assert!(keys.contains(&key), "schema missing {key}");
        }
        assert_eq!(keys.len(), cfg.canonical_text().lines().count());
    }

    #[test]
    fn validation_rejects_bad_values() {
        assert!(RunConfig::parse_text("model.tau=1.5\n").is_err());
        assert!(RunConfig::parse_text("train.patience=100\n").is_err());
        assert!(RunConfig::parse_text("model.grl_lambda=-1\n").is_err());
    }
}
