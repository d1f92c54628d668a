//! Flat `section.key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors so typos do not silently fall back to defaults.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::dual_stream::{AlphaMode, DualConfig};
use crate::encoder::CrossScaleMode;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_THRESHOLD;
use crate::mshvit::ModelConfig;
use crate::tokenizer::TokenizerKind;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub train_samples: usize,
    pub val_samples: usize,
    /// Per-class probability that a sample carries that class.
    pub class_frequencies: [f64; 5],
    /// Largest camera translation, pixels/frame.
    pub camera_motion: f64,
    /// Largest extra displacement inside a glyph, pixels/frame.
    pub glyph_motion: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_samples: 2000,
            val_samples: 500,
            class_frequencies: [0.2, 0.2, 0.2, 0.15, 0.15],
            camera_motion: 1.0,
            glyph_motion: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub threshold: f64,
    /// `class,weight` CSV; uniform weights when absent.
    pub weights: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub dual: DualConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("line {line}: `{key}` has invalid value `{v}`")))
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("line {line}: `{key}` expects true or false, got `{v}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse_num(line, key, p.trim())).collect()
}

fn parse_stages(line: usize, key: &str, v: &str) -> Result<Vec<usize>> {
    if v == "none" || v.is_empty() {
        Ok(Vec::new())
    } else {
        parse_list(line, key, v)
    }
}

fn fmt_stages(stages: &[usize]) -> String {
    if stages.is_empty() {
        "none".into()
    } else {
        stages.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

fn parse_alpha(line: usize, key: &str, v: &str) -> Result<AlphaMode> {
    if v == "learned" {
        return Ok(AlphaMode::Learned);
    }
    let a: f64 = parse_num(line, key, v)?;
    Ok(AlphaMode::Fixed(a))
}

fn fmt_alpha(a: AlphaMode) -> String {
    match a {
        AlphaMode::Learned => "learned".into(),
        AlphaMode::Fixed(x) => x.to_string(),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`, got `{s}`")))?;
            cfg.set(line, key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "data.size" => {
                let s: usize = parse_num(line, key, v)?;
                m.backbone.input_size = (3, s, s);
            }
            "data.train_samples" => self.data.train_samples = parse_num(line, key, v)?,
            "data.val_samples" => self.data.val_samples = parse_num(line, key, v)?,
            "data.class_frequencies" => {
                let f: Vec<f64> = parse_list(line, key, v)?;
                self.data.class_frequencies = f.try_into().map_err(|f: Vec<f64>| {
                    Error::Config(format!("line {line}: `{key}` needs 5 values, got {}", f.len()))
                })?;
            }
            "data.camera_motion" => self.data.camera_motion = parse_num(line, key, v)?,
            "data.glyph_motion" => self.data.glyph_motion = parse_num(line, key, v)?,
            "backbone.channels" => {
                let c: Vec<usize> = parse_list(line, key, v)?;
                m.backbone.stage_channels = c.try_into().map_err(|c: Vec<usize>| {
                    Error::Config(format!("line {line}: `{key}` needs 4 values, got {}", c.len()))
                })?;
            }
            "backbone.kernel_size" => m.backbone.kernel_size = parse_num(line, key, v)?,
            "backbone.pool_window" => m.backbone.pool_window = parse_num(line, key, v)?,
            "tokenizer.kind" => m.tokenizer.kind = TokenizerKind::parse(v).map_err(|e| at_line(line, e))?,
            "tokenizer.patch_size" => m.tokenizer.patch_size = parse_num(line, key, v)?,
            "tokenizer.clusters_stage3" => m.tokenizer.clusters_stage3 = parse_num(line, key, v)?,
            "tokenizer.clusters_stage4" => m.tokenizer.clusters_stage4 = parse_num(line, key, v)?,
            "tokenizer.epsilon" => m.tokenizer.epsilon = parse_num(line, key, v)?,
            "tokenizer.iterations" => m.tokenizer.iterations = parse_num(line, key, v)?,
            "encoder.depth" => m.encoder.depth = parse_num(line, key, v)?,
            "encoder.heads" => m.encoder.heads = parse_num(line, key, v)?,
            "encoder.dim" => m.encoder.dim = parse_num(line, key, v)?,
            "encoder.ffn_dim" => m.encoder.ffn_dim = parse_num(line, key, v)?,
            "encoder.cross_scale" => m.encoder.cross_scale = CrossScaleMode::parse(v).map_err(|e| at_line(line, e))?,
            "encoder.norm" => m.encoder.norm = parse_bool(line, key, v)?,
            "dual.alignment_stages" => self.dual.alignment_stages = parse_stages(line, key, v)?,
            "dual.stop_motion_grad" => self.dual.stop_motion_grad = parse_bool(line, key, v)?,
            "dual.alpha" => self.dual.alpha = parse_alpha(line, key, v)?,
            "loss.rgb_weight" => self.dual.weights.rgb = parse_num(line, key, v)?,
            "loss.optical_weight" => self.dual.weights.optical = parse_num(line, key, v)?,
            "loss.attention_weight" => self.dual.weights.attention = parse_num(line, key, v)?,
            "train.learning_rate" => self.dual.learning_rate = parse_num(line, key, v)?,
            "train.epochs" => self.train.epochs = parse_num(line, key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(line, key, v)?,
            "train.seed" => self.train.seed = parse_num(line, key, v)?,
            "eval.threshold" => self.eval.threshold = parse_num(line, key, v)?,
            "eval.weights" => self.eval.weights = Some(PathBuf::from(v)),
            _ => return Err(Error::Config(format!("line {line}: unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dual.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(Error::Config(format!("eval.threshold must lie in (0, 1), got {}", self.eval.threshold)));
        }
        if self.data.class_frequencies.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("data.class_frequencies must lie in [0, 1]".into()));
        }
        if !(self.data.camera_motion >= 0.0 && self.data.glyph_motion >= 0.0) {
            return Err(Error::Config("data motion limits must be nonnegative".into()));
        }
        Ok(())
    }

    /// Lines describing the network shape. Two configs with equal model
    /// text build interchangeable parameter sets.
    pub fn model_text(&self) -> String {
        let m = &self.model;
        let (c, h, w) = m.backbone.input_size;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        kv("model.input", format!("{c}x{h}x{w}"));
        kv("model.num_classes", m.num_classes.to_string());
        kv("backbone.channels", join(&m.backbone.stage_channels));
        kv("backbone.kernel_size", m.backbone.kernel_size.to_string());
        kv("backbone.pool_window", m.backbone.pool_window.to_string());
        kv("tokenizer.kind", m.tokenizer.kind.as_str().into());
        kv("tokenizer.patch_size", m.tokenizer.patch_size.to_string());
        kv("tokenizer.clusters_stage3", m.tokenizer.clusters_stage3.to_string());
        kv("tokenizer.clusters_stage4", m.tokenizer.clusters_stage4.to_string());
        kv("tokenizer.epsilon", m.tokenizer.epsilon.to_string());
        kv("tokenizer.iterations", m.tokenizer.iterations.to_string());
        kv("encoder.depth", m.encoder.depth.to_string());
        kv("encoder.heads", m.encoder.heads.to_string());
        kv("encoder.dim", m.encoder.dim.to_string());
        kv("encoder.ffn_dim", m.encoder.ffn_dim.to_string());
        kv("encoder.cross_scale", m.encoder.cross_scale.as_str().into());
        kv("encoder.norm", m.encoder.norm.to_string());
        out
    }

    /// Hex SHA-256 of [`RunConfig::model_text`].
    pub fn model_hash(&self) -> String {
        let digest = Sha256::digest(self.model_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Full configuration in parseable form.
    pub fn to_text(&self) -> String {
        let (_, h, _) = self.model.backbone.input_size;
        let d = &self.data;
        let m = &self.model;
        let mut lines = vec![
            format!("data.size = {h}"),
            format!("data.train_samples = {}", d.train_samples),
            format!("data.val_samples = {}", d.val_samples),
            format!("data.class_frequencies = {}", join(&d.class_frequencies)),
            format!("data.camera_motion = {}", d.camera_motion),
            format!("data.glyph_motion = {}", d.glyph_motion),
            format!("backbone.channels = {}", join(&m.backbone.stage_channels)),
            format!("backbone.kernel_size = {}", m.backbone.kernel_size),
            format!("backbone.pool_window = {}", m.backbone.pool_window),
            format!("tokenizer.kind = {}", m.tokenizer.kind.as_str()),
            format!("tokenizer.patch_size = {}", m.tokenizer.patch_size),
            format!("tokenizer.clusters_stage3 = {}", m.tokenizer.clusters_stage3),
            format!("tokenizer.clusters_stage4 = {}", m.tokenizer.clusters_stage4),
            format!("tokenizer.epsilon = {}", m.tokenizer.epsilon),
            format!("tokenizer.iterations = {}", m.tokenizer.iterations),
            format!("encoder.depth = {}", m.encoder.depth),
            format!("encoder.heads = {}", m.encoder.heads),
            format!("encoder.dim = {}", m.encoder.dim),
            format!("encoder.ffn_dim = {}", m.encoder.ffn_dim),
            format!("encoder.cross_scale = {}", m.encoder.cross_scale.as_str()),
            format!("encoder.norm = {}", m.encoder.norm),
            format!("dual.alignment_stages = {}", fmt_stages(&self.dual.alignment_stages)),
            format!("dual.stop_motion_grad = {}", self.dual.stop_motion_grad),
            format!("dual.alpha = {}", fmt_alpha(self.dual.alpha)),
            format!("loss.rgb_weight = {}", self.dual.weights.rgb),
            format!("loss.optical_weight = {}", self.dual.weights.optical),
            format!("loss.attention_weight = {}", self.dual.weights.attention),
            format!("train.learning_rate = {}", self.dual.learning_rate),
            format!("train.epochs = {}", self.train.epochs),
            format!("train.batch_size = {}", self.train.batch_size),
            format!("train.seed = {}", self.train.seed),
            format!("eval.threshold = {}", self.eval.threshold),
        ];
        if let Some(w) = &self.eval.weights {
            lines.push(format!("eval.weights = {}", w.display()));
        }
        lines.join("\n") + "\n"
    }
}

fn at_line(line: usize, e: Error) -> Error {
    match e {
        Error::Config(msg) => Error::Config(format!("line {line}: {msg}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn parses_sections_and_comments() {
        let cfg = RunConfig::parse(
            "# tiny\n\nencoder.depth = 1\ndual.alignment_stages = 3,4\ndual.alpha = learned\ntrain.seed=7\n",
        )
        .unwrap();
        assert_eq!(cfg.model.encoder.depth, 1);
        assert_eq!(cfg.dual.alignment_stages, vec![3, 4]);
        assert_eq!(cfg.dual.alpha, AlphaMode::Learned);
        assert_eq!(cfg.train.seed, 7);
        let none = RunConfig::parse("dual.alignment_stages = none").unwrap();
        assert!(none.dual.alignment_stages.is_empty());
    }

    #[test]
    fn errors_name_line_and_field() {
        let e = RunConfig::parse("train.epochs = 2\nencoder.depth = two\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("encoder.depth"), "{e}");
        let e = RunConfig::parse("\nencoder.dept = 2").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("encoder.dept"), "{e}");
        let e = RunConfig::parse("oops").unwrap_err().to_string();
        assert!(e.contains("line 1"), "{e}");
    }

    #[test]
    fn hash_tracks_model_fields_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.epochs = 99;
        b.dual.alignment_stages.clear();
        assert_eq!(a.model_hash(), b.model_hash());
        b.model.encoder.dim = 16;
        assert_ne!(a.model_hash(), b.model_hash());
        assert_eq!(a.model_hash().len(), 64);
    }
}
