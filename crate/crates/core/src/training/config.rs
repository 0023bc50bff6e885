use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::decoder::{Ablation, ExtractorConfig, ModelConfig};
use crate::error::{Result, SavsError};
use crate::losses::{AlphaGradient, CircleLossConfig, LossWeights, SemanticLossKind};
use crate::semantic_encoder::{DrawMode, ShieldClasses};

/// Everything that determines a training run.
///
/// Stored on disk as flat `key = value` lines; see [`TrainConfig::KEYS`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// K of the P×K sampler.
    pub images_per_id: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub decay_epoch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub extractor: ExtractorConfig,
    pub reduction: usize,
    pub circle: CircleLossConfig,
    pub alpha_gradient: AlphaGradient,
    pub weights: LossWeights,
    pub semantic_loss: SemanticLossKind,
    pub shield_classes: ShieldClasses,
    pub draw_mode: DrawMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            images_per_id: 4,
            epochs: 60,
            lr0: 3.5e-3,
            lr_decay: 0.1,
            decay_epoch: 40,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            ablation: Ablation::HsaVcs,
            extractor: ExtractorConfig::toy(),
            reduction: 16,
            circle: CircleLossConfig::default(),
            alpha_gradient: AlphaGradient::Detached,
            weights: LossWeights::default(),
            semantic_loss: SemanticLossKind::L2,
            shield_classes: ShieldClasses::default(),
            draw_mode: DrawMode::WithReplacement,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| SavsError::Config(format!("`{key}`: cannot parse `{value}`")))
}

impl TrainConfig {
    /// Keys accepted by [`TrainConfig::set`]. `margin` sets both optima.
    pub const KEYS: &'static [&'static str] = &[
        "batch_size",
        "images_per_id",
        "epochs",
        "lr0",
        "lr_decay",
        "decay_epoch",
        "momentum",
        "weight_decay",
        "seed",
        "ablation",
        "input_height",
        "input_width",
        "layers",
        "input_mean",
        "input_std",
        "reduction",
        "gamma",
        "margin",
        "positive_optimum",
        "negative_optimum",
        "alpha_gradient",
        "lambda_id",
        "lambda_cir",
        "lambda_sem",
        "semantic_loss",
        "shield_classes",
        "draw_mode",
    ];

    /// Number of identities per batch.
    pub fn ids_per_batch(&self) -> usize {
        self.batch_size / self.images_per_id.max(1)
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.extractor.input_height, self.extractor.input_width)
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            extractor: self.extractor.clone(),
            reduction: self.reduction,
            num_classes,
            ablation: self.ablation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SavsError::Config(m));
        if self.images_per_id == 0 || self.batch_size == 0 {
            return fail("batch_size and images_per_id must be positive".into());
        }
        if self.batch_size % self.images_per_id != 0 {
            return fail(format!(
                "batch_size {} is not divisible by images_per_id {}",
                self.batch_size, self.images_per_id
            ));
        }
        if self.ids_per_batch() < 2 {
            return fail("a batch needs at least two identities".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.decay_epoch >= self.epochs {
            return fail(format!(
                "decay_epoch {} must be below epochs {}",
                self.decay_epoch, self.epochs
            ));
        }
        for (name, v) in [
            ("lr0", self.lr0),
            ("lr_decay", self.lr_decay),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.reduction == 0 {
            return fail("reduction must be at least 1".into());
        }
        let (_, _, c) = self.extractor.output_shape()?;
        if c % self.reduction != 0 {
            return fail(format!(
                "{c} channels are not divisible by reduction {}",
                self.reduction
            ));
        }
        CircleLossConfig::new(
            self.circle.gamma,
            self.circle.positive_optimum,
            self.circle.negative_optimum,
        )?;
        self.weights.validate()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        match key {
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "images_per_id" => self.images_per_id = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "lr0" => self.lr0 = parse_num(key, value)?,
            "lr_decay" => self.lr_decay = parse_num(key, value)?,
            "decay_epoch" => self.decay_epoch = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "ablation" => self.ablation = value.parse()?,
            "input_height" => self.extractor.input_height = parse_num(key, value)?,
            "input_width" => self.extractor.input_width = parse_num(key, value)?,
            "layers" => self.extractor.layers = ExtractorConfig::parse_layers(value)?,
            "input_mean" => self.extractor.input_mean = parse_num(key, value)?,
            "input_std" => self.extractor.input_std = parse_num(key, value)?,
            "reduction" => self.reduction = parse_num(key, value)?,
            "gamma" => self.circle.gamma = parse_num(key, value)?,
            "margin" => {
                let m: f64 = parse_num(key, value)?;
                self.circle.positive_optimum = 1.0 + m;
                self.circle.negative_optimum = -m;
            }
            "positive_optimum" => self.circle.positive_optimum = parse_num(key, value)?,
            "negative_optimum" => self.circle.negative_optimum = parse_num(key, value)?,
            "alpha_gradient" => {
                self.alpha_gradient = match value {
                    "detached" => AlphaGradient::Detached,
                    "full" => AlphaGradient::Full,
                    other => {
                        return Err(SavsError::Config(format!(
                            "unknown alpha_gradient `{other}` (detached | full)"
                        )))
                    }
                }
            }
            "lambda_id" => self.weights.id = parse_num(key, value)?,
            "lambda_cir" => self.weights.circle = parse_num(key, value)?,
            "lambda_sem" => self.weights.semantic = parse_num(key, value)?,
            "semantic_loss" => self.semantic_loss = value.parse()?,
            "shield_classes" => self.shield_classes = value.parse()?,
            "draw_mode" => {
                self.draw_mode = match value {
                    "with_replacement" => DrawMode::WithReplacement,
                    "without_replacement" => DrawMode::WithoutReplacement,
                    other => {
                        return Err(SavsError::Config(format!(
                            "unknown draw_mode `{other}` (with_replacement | without_replacement)"
                        )))
                    }
                }
            }
            other => return Err(SavsError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| SavsError::Config(format!("expected key=value, got `{pair}`")))?;
        self.set(k, v)
    }

    /// Parses config text on top of the defaults. Blank lines and `#`
    /// comments are ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SavsError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)
                .map_err(|e| SavsError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SavsError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let alpha = match self.alpha_gradient {
            AlphaGradient::Detached => "detached",
            AlphaGradient::Full => "full",
        };
        let draw = match self.draw_mode {
            DrawMode::WithReplacement => "with_replacement",
            DrawMode::WithoutReplacement => "without_replacement",
        };
        let e = &self.extractor;
        let rows: Vec<(&str, String)> = vec![
            ("batch_size", self.batch_size.to_string()),
            ("images_per_id", self.images_per_id.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr0", self.lr0.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("decay_epoch", self.decay_epoch.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            ("ablation", self.ablation.to_string()),
            ("input_height", e.input_height.to_string()),
            ("input_width", e.input_width.to_string()),
            ("layers", e.layers_string()),
            ("input_mean", e.input_mean.to_string()),
            ("input_std", e.input_std.to_string()),
            ("reduction", self.reduction.to_string()),
            ("gamma", self.circle.gamma.to_string()),
            ("positive_optimum", self.circle.positive_optimum.to_string()),
            ("negative_optimum", self.circle.negative_optimum.to_string()),
            ("alpha_gradient", alpha.to_string()),
            ("lambda_id", self.weights.id.to_string()),
            ("lambda_cir", self.weights.circle.to_string()),
            ("lambda_sem", self.weights.semantic.to_string()),
            ("semantic_loss", self.semantic_loss.to_string()),
            ("shield_classes", self.shield_classes.to_string()),
            ("draw_mode", draw.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.ids_per_batch(), 8);
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn every_written_key_is_accepted() {
        for line in TrainConfig::default().to_text().lines() {
            let key = line.split('=').next().unwrap().trim();
            assert!(TrainConfig::KEYS.contains(&key), "{key}");
        }
    }

    #[test]
    fn modified_config_roundtrips() {
        let mut cfg = TrainConfig::default();
        for pair in [
            "ablation=hsa",
            "lr0=0.0123",
            "margin=0.4",
            "shield_classes=",
            "draw_mode=without_replacement",
            "alpha_gradient=full",
            "semantic_loss=mse",
            "layers=k4s4c8,k4s2c32",
            "reduction=4",
        ] {
            cfg.set_pair(pair).unwrap();
        }
        cfg.validate().unwrap();
        assert!((cfg.circle.positive_optimum - 1.4).abs() < 1e-12);
        assert!(cfg.shield_classes.is_empty());
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(TrainConfig::parse("learning_rate = 1").is_err());
        assert!(TrainConfig::parse("epochs 3").is_err());
        assert!(TrainConfig::parse("epochs = three").is_err());
        let text = "# comment\n\nepochs = 5 # trailing\ndecay_epoch = 2\n";
        assert_eq!(TrainConfig::parse(text).unwrap().epochs, 5);
        for pair in [
            "batch_size=30",
            "decay_epoch=60",
            "momentum=1",
            "images_per_id=32",
            "reduction=7",
        ] {
            let mut cfg = TrainConfig::default();
            cfg.set_pair(pair).unwrap();
            assert!(cfg.validate().is_err(), "{pair}");
        }
    }
}
