//! Flat `key = value` experiment configuration.
//!
//! Unknown and duplicate keys are rejected. Every field has a desk-scale
//! default; `configs/default.conf` lists them next to the reference
//! values used at full scale.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::scores::{self, ScoreKind};
use crate::toydata::{BenchmarkSpec, Layout};
use crate::variants::{VariantConfig, VariantRegistry};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub variant: String,
    pub seed: u64,
    /// Seeds of a multi-seed grid; `seed` is used when empty.
    pub seeds: Vec<u64>,

    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub voronoi_sites: usize,
    pub class_scale: f64,
    pub class_std: f64,
    pub aux_scale: f64,
    pub anomaly_scale: f64,
    pub anomaly_std: f64,

    pub train_scenes: usize,
    pub test_scenes: usize,
    pub crop: usize,
    pub jitter_min: f64,
    pub jitter_max: f64,
    pub patch_min_frac: f64,
    pub patch_max_frac: f64,
    pub anomaly_min_side: usize,
    pub anomaly_max_side: usize,

    pub seg_hidden: Vec<usize>,
    pub flow_layers: usize,
    pub flow_hidden: Vec<usize>,
    pub flow_s_max: f64,

    pub beta_x: f64,
    pub beta_d: f64,
    pub beta_jsd: f64,
    pub ood_head_beta: f64,
    pub temperature: f64,
    pub tpr_target: f64,

    pub epochs_1: usize,
    pub epochs_2: usize,
    pub batch_size: usize,
    pub seg_lr_max: f64,
    pub seg_lr_min: f64,
    pub flow_lr: f64,
    pub flow_warmup_frac: f64,

    pub scores: Vec<ScoreKind>,
    pub bench_repeats: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: "nf-hybrid-ldlx".into(),
            seed: 0,
            seeds: Vec::new(),
            height: 64,
            width: 64,
            feature_dim: 8,
            classes: 4,
            voronoi_sites: 8,
            class_scale: 3.0,
            class_std: 0.5,
            aux_scale: 1.5,
            anomaly_scale: 0.75,
            anomaly_std: 0.5,
            train_scenes: 16,
            test_scenes: 8,
            crop: 48,
            jitter_min: 0.75,
            jitter_max: 1.5,
            patch_min_frac: 16.0 / 768.0,
            patch_max_frac: 216.0 / 768.0,
            anomaly_min_side: 6,
            anomaly_max_side: 14,
            seg_hidden: vec![64, 64],
            flow_layers: 4,
            flow_hidden: vec![32, 32],
            flow_s_max: 2.0,
            beta_x: 0.03,
            beta_d: 0.3,
            beta_jsd: 0.03,
            ood_head_beta: 1.0,
            temperature: 2.0,
            tpr_target: 0.95,
            epochs_1: 30,
            epochs_2: 25,
            batch_size: 8,
            seg_lr_max: 1e-3,
            seg_lr_min: 1e-5,
            flow_lr: 1e-2,
            flow_warmup_frac: 0.2,
            scores: Vec::new(),
            bench_repeats: 7,
        }
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(key: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| bad_value(key, p)))
        .collect()
}

fn bad_value(key: &str, v: &str) -> Error {
    Error::Config(format!("bad value '{v}' for key '{key}'"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad_value(key, v))
}

impl ExperimentConfig {
    /// Every key in canonical order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("variant", self.variant.clone());
        kv("seed", self.seed.to_string());
        kv("seeds", list(&self.seeds));
        kv("height", self.height.to_string());
        kv("width", self.width.to_string());
        kv("feature_dim", self.feature_dim.to_string());
        kv("classes", self.classes.to_string());
        kv("voronoi_sites", self.voronoi_sites.to_string());
        kv("class_scale", self.class_scale.to_string());
        kv("class_std", self.class_std.to_string());
        kv("aux_scale", self.aux_scale.to_string());
        kv("anomaly_scale", self.anomaly_scale.to_string());
        kv("anomaly_std", self.anomaly_std.to_string());
        kv("train_scenes", self.train_scenes.to_string());
        kv("test_scenes", self.test_scenes.to_string());
        kv("crop", self.crop.to_string());
        kv("jitter_min", self.jitter_min.to_string());
        kv("jitter_max", self.jitter_max.to_string());
        kv("patch_min_frac", self.patch_min_frac.to_string());
        kv("patch_max_frac", self.patch_max_frac.to_string());
        kv("anomaly_min_side", self.anomaly_min_side.to_string());
        kv("anomaly_max_side", self.anomaly_max_side.to_string());
        kv("seg_hidden", list(&self.seg_hidden));
        kv("flow_layers", self.flow_layers.to_string());
        kv("flow_hidden", list(&self.flow_hidden));
        kv("flow_s_max", self.flow_s_max.to_string());
        kv("beta_x", self.beta_x.to_string());
        kv("beta_d", self.beta_d.to_string());
        kv("beta_jsd", self.beta_jsd.to_string());
        kv("ood_head_beta", self.ood_head_beta.to_string());
        kv("temperature", self.temperature.to_string());
        kv("tpr_target", self.tpr_target.to_string());
        kv("epochs_1", self.epochs_1.to_string());
        kv("epochs_2", self.epochs_2.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seg_lr_max", self.seg_lr_max.to_string());
        kv("seg_lr_min", self.seg_lr_min.to_string());
        kv("flow_lr", self.flow_lr.to_string());
        kv("flow_warmup_frac", self.flow_warmup_frac.to_string());
        kv("scores", list(&self.scores.iter().map(|k| k.name()).collect::<Vec<_>>()));
        kv("bench_repeats", self.bench_repeats.to_string());
        s
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "variant" => self.variant = v.to_string(),
            "seed" => self.seed = num(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "height" => self.height = num(key, v)?,
            "width" => self.width = num(key, v)?,
            "feature_dim" => self.feature_dim = num(key, v)?,
            "classes" => self.classes = num(key, v)?,
            "voronoi_sites" => self.voronoi_sites = num(key, v)?,
            "class_scale" => self.class_scale = num(key, v)?,
            "class_std" => self.class_std = num(key, v)?,
            "aux_scale" => self.aux_scale = num(key, v)?,
            "anomaly_scale" => self.anomaly_scale = num(key, v)?,
            "anomaly_std" => self.anomaly_std = num(key, v)?,
            "train_scenes" => self.train_scenes = num(key, v)?,
            "test_scenes" => self.test_scenes = num(key, v)?,
            "crop" => self.crop = num(key, v)?,
            "jitter_min" => self.jitter_min = num(key, v)?,
            "jitter_max" => self.jitter_max = num(key, v)?,
            "patch_min_frac" => self.patch_min_frac = num(key, v)?,
            "patch_max_frac" => self.patch_max_frac = num(key, v)?,
            "anomaly_min_side" => self.anomaly_min_side = num(key, v)?,
            "anomaly_max_side" => self.anomaly_max_side = num(key, v)?,
            "seg_hidden" => self.seg_hidden = parse_list(key, v)?,
            "flow_layers" => self.flow_layers = num(key, v)?,
            "flow_hidden" => self.flow_hidden = parse_list(key, v)?,
            "flow_s_max" => self.flow_s_max = num(key, v)?,
            "beta_x" => self.beta_x = num(key, v)?,
            "beta_d" => self.beta_d = num(key, v)?,
            "beta_jsd" => self.beta_jsd = num(key, v)?,
            "ood_head_beta" => self.ood_head_beta = num(key, v)?,
            "temperature" => self.temperature = num(key, v)?,
            "tpr_target" => self.tpr_target = num(key, v)?,
            "epochs_1" => self.epochs_1 = num(key, v)?,
            "epochs_2" => self.epochs_2 = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "seg_lr_max" => self.seg_lr_max = num(key, v)?,
            "seg_lr_min" => self.seg_lr_min = num(key, v)?,
            "flow_lr" => self.flow_lr = num(key, v)?,
            "flow_warmup_frac" => self.flow_warmup_frac = num(key, v)?,
            "scores" => {
                self.scores = if v.trim().is_empty() {
                    Vec::new()
                } else {
                    scores::parse_kinds(v)?
                }
            }
            "bench_repeats" => self.bench_repeats = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Defaults overridden by the keys present in `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", n + 1))
            })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{k}'", n + 1)));
            }
            cfg.set(k, v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical text, hex.
    pub fn fingerprint(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }

    /// Fingerprint of the fields phase 1 depends on; runs that agree on it
    /// share one phase-1 model.
    pub fn phase1_fingerprint(&self) -> String {
        let mut c = self.clone();
        let d = Self::default();
        c.variant = d.variant;
        c.seeds = Vec::new();
        c.epochs_2 = d.epochs_2;
        c.flow_layers = d.flow_layers;
        c.flow_hidden = d.flow_hidden;
        c.flow_s_max = d.flow_s_max;
        c.flow_lr = d.flow_lr;
        c.flow_warmup_frac = d.flow_warmup_frac;
        c.beta_x = d.beta_x;
        c.beta_d = d.beta_d;
        c.beta_jsd = d.beta_jsd;
        c.ood_head_beta = d.ood_head_beta;
        c.temperature = d.temperature;
        c.tpr_target = d.tpr_target;
        c.scores = Vec::new();
        c.bench_repeats = d.bench_repeats;
        c.fingerprint()
    }

    pub fn variant_config(&self) -> Result<VariantConfig> {
        VariantRegistry::standard().get(&self.variant)
    }

    pub fn benchmark(&self) -> Result<BenchmarkSpec> {
        BenchmarkSpec::axis_aligned(
            self.height,
            self.width,
            self.feature_dim,
            self.classes,
            Layout::Voronoi {
                sites: self.voronoi_sites,
            },
            self.class_scale,
            self.class_std,
            self.aux_scale,
            self.anomaly_scale,
            self.anomaly_std,
        )
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            beta_x: self.beta_x,
            beta_d: self.beta_d,
            beta_jsd: self.beta_jsd,
            ood_head_beta: self.ood_head_beta,
        }
    }

    /// Requested scores, falling back to the variant's defaults.
    pub fn score_kinds(&self) -> Result<Vec<ScoreKind>> {
        if self.scores.is_empty() {
            Ok(self.variant_config()?.default_scores())
        } else {
            Ok(self.scores.clone())
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let v = self.variant_config()?;
        self.weights().validate()?;
        self.benchmark()?;
        if self.train_scenes == 0 || self.test_scenes == 0 {
            return fail("train_scenes and test_scenes must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.epochs_2 == 0 && v.uses_flow() {
            return fail(format!("{} needs epochs_2 > 0", self.variant));
        }
        let min_side = (self.jitter_min * self.height.min(self.width) as f64).floor() as usize;
        if self.crop == 0 || self.crop > min_side {
            return fail(format!(
                "crop {} does not fit a {}x{} scene rescaled by {}",
                self.crop, self.height, self.width, self.jitter_min
            ));
        }
        crate::toydata::patch_size_bounds(self.patch_min_frac, self.patch_max_frac, self.crop)?;
        if self.anomaly_min_side == 0
            || self.anomaly_min_side > self.anomaly_max_side
            || self.anomaly_max_side > self.height.min(self.width)
        {
            return fail(format!(
                "anomaly sides [{}, {}]",
                self.anomaly_min_side, self.anomaly_max_side
            ));
        }
        if self.seg_hidden.is_empty() || self.seg_hidden.contains(&0) {
            return fail("seg_hidden needs positive widths".into());
        }
        if self.flow_layers == 0 || self.flow_hidden.contains(&0) {
            return fail("flow needs layers and positive widths".into());
        }
        if !(self.temperature > 0.0) || !(self.tpr_target > 0.0 && self.tpr_target <= 1.0) {
            return fail("temperature > 0 and tpr_target in (0, 1] required".into());
        }
        if !(self.seg_lr_max > 0.0 && self.seg_lr_min >= 0.0 && self.seg_lr_min <= self.seg_lr_max)
            || !(self.flow_lr > 0.0)
        {
            return fail("learning rates must be positive with seg_lr_min <= seg_lr_max".into());
        }
        if !(0.0..=1.0).contains(&self.flow_warmup_frac) {
            return fail("flow_warmup_frac must lie in [0, 1]".into());
        }
        if self.bench_repeats < 5 {
            return fail("bench_repeats must be >= 5".into());
        }
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
