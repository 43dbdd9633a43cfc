//! Training configuration: a sectioned TOML file plus `section.key=value` overrides.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of each pooled input feature vector.
    pub d_in: usize,
    /// Width of every shared and private code.
    pub d: usize,
    /// Hidden width of encoders and discriminators.
    pub hidden: usize,
    pub classes: usize,
    pub heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_in: 32,
            d: 32,
            hidden: 32,
            classes: 4,
            heads: 4,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.d_in == 0 || self.d == 0 || self.hidden == 0 || self.classes == 0 {
            return Err(Error::Config(format!(
                "dimensions must be positive (d_in={}, d={}, hidden={}, classes={})",
                self.d_in, self.d, self.hidden, self.classes
            )));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "code width d={} is not divisible by head count {}",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

/// Which loss terms participate in the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossToggles {
    pub alignment_global: bool,
    pub alignment_local: bool,
    pub disparity_adv: bool,
    pub disparity_orth: bool,
    pub predictor: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            alignment_global: true,
            alignment_local: true,
            disparity_adv: true,
            disparity_orth: true,
            predictor: true,
        }
    }
}

/// Named ablation systems: `None` is the full model, `S1`..`S6` each drop the
/// terms listed for them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    #[default]
    None,
    S1,
    S2,
    S3,
    S4,
    S5,
    S6,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::None,
        Ablation::S1,
        Ablation::S2,
        Ablation::S3,
        Ablation::S4,
        Ablation::S5,
        Ablation::S6,
    ];

    pub fn toggles(self) -> LossToggles {
        let all = LossToggles::default();
        match self {
            Ablation::None => all,
            // without alignment and disparity
            Ablation::S1 => LossToggles {
                alignment_global: false,
                alignment_local: false,
                disparity_adv: false,
                disparity_orth: false,
                ..all
            },
            Ablation::S2 => LossToggles {
                alignment_global: false,
                ..all
            },
            Ablation::S3 => LossToggles {
                alignment_local: false,
                ..all
            },
            Ablation::S4 => LossToggles {
                alignment_global: false,
                alignment_local: false,
                ..all
            },
            Ablation::S5 => LossToggles {
                disparity_adv: false,
                disparity_orth: false,
                ..all
            },
            Ablation::S6 => LossToggles {
                predictor: false,
                ..all
            },
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Ablation::None => "full model",
            Ablation::S1 => "without global/local alignment and adversarial/orthogonal disparity",
            Ablation::S2 => "without global domain discriminator",
            Ablation::S3 => "without local subdomain discriminators",
            Ablation::S4 => "without alignment component",
            Ablation::S5 => "without disparity component",
            Ablation::S6 => "without fine-grained predictor",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Ablation::None => "none",
            Ablation::S1 => "s1",
            Ablation::S2 => "s2",
            Ablation::S3 => "s3",
            Ablation::S4 => "s4",
            Ablation::S5 => "s5",
            Ablation::S6 => "s6",
        };
        f.write_str(s)
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "s0" | "full" => Ok(Ablation::None),
            "s1" => Ok(Ablation::S1),
            "s2" => Ok(Ablation::S2),
            "s3" => Ok(Ablation::S3),
            "s4" => Ok(Ablation::S4),
            "s5" => Ok(Ablation::S5),
            "s6" => Ok(Ablation::S6),
            other => Err(Error::Config(format!(
                "unknown ablation '{other}' (expected none, s1..s6)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub toggles: LossToggles,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 0.5,
            gamma: 1.0,
            toggles: LossToggles::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_grad: bool,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_grad: false,
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrlSchedule {
    /// `2 / (1 + exp(-10 p)) - 1` over epoch progress `p`.
    Dann,
    /// `grl_lambda` for every epoch.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub folds: usize,
    pub grl_schedule: GrlSchedule,
    pub grl_lambda: f64,
    pub select_best_epoch: bool,
    pub eval_batch: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_size: 8,
            epochs: 100,
            seed: 0,
            folds: 5,
            grl_schedule: GrlSchedule::Dann,
            grl_lambda: 1.0,
            select_best_epoch: false,
            eval_batch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainSettings,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        self.model.validate()?;
        let l = &self.loss;
        for (name, v) in [("alpha", l.alpha), ("beta", l.beta), ("gamma", l.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "trade-off parameter {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("AdamW betas must lie in [0, 1)".into()));
        }
        if !(o.eps > 0.0) || o.weight_decay < 0.0 || !(o.clip_norm > 0.0) {
            return Err(Error::Config(
                "eps and clip_norm must be positive, weight_decay non-negative".into(),
            ));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.epochs == 0 || t.folds == 0 || t.eval_batch == 0 {
            return Err(Error::Config(
                "batch_size, epochs, folds and eval_batch must be positive".into(),
            ));
        }
        if !(t.grl_lambda >= 0.0 && t.grl_lambda.is_finite()) {
            return Err(Error::Config(format!(
                "grl_lambda must be non-negative, got {}",
                t.grl_lambda
            )));
        }
        Ok(())
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.loss.toggles = ablation.toggles();
        self
    }

    /// Parses a config document, then applies `section.key=value` overrides.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self, Error> {
        let mut table: toml::Table = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, Error> {
        TrainConfig::from_toml_with_overrides(text, &[])
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Applies one `section.key=value` (or `section.sub.key=value`) override.
/// The value is parsed as a TOML literal, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), Error> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    let path: Vec<&str> = path.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override '{spec}' has an empty key")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cursor = table;
    for p in parents {
        let entry = cursor
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{spec}': '{p}' is not a section")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_reported_setup() {
        let c = TrainConfig::default();
        assert_eq!(c.optim.lr, 1e-5);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.train.epochs, 100);
        assert_eq!((c.loss.alpha, c.loss.beta, c.loss.gamma), (1.0, 0.5, 1.0));
        assert_eq!(c.train.folds, 5);
        c.validate().unwrap();
    }

    #[test]
    fn round_trips_through_text() {
        let mut c = TrainConfig::default();
        c.model.d = 16;
        c.loss.toggles.predictor = false;
        let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_apply_after_file() {
        let text = "[train]\nepochs = 3\n";
        let c = TrainConfig::from_toml_with_overrides(
            text,
            &[
                "train.epochs=7".into(),
                "optim.lr = 0.001".into(),
                "loss.toggles.alignment_local=false".into(),
                "train.grl_schedule=constant".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.optim.lr, 1e-3);
        assert!(!c.loss.toggles.alignment_local);
        assert_eq!(c.train.grl_schedule, GrlSchedule::Constant);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::from_toml("[loss]\nalpha = -1.0\n").is_err());
        assert!(TrainConfig::from_toml("[model]\nd = 30\nheads = 4\n").is_err());
        assert!(TrainConfig::from_toml("[model]\nbogus = 1\n").is_err());
        assert!(TrainConfig::from_toml_with_overrides("", &["novalue".into()]).is_err());
    }

    #[test]
    fn ablation_presets_drop_exactly_their_terms() {
        let t = Ablation::S1.toggles();
        assert!(!t.alignment_global && !t.alignment_local && !t.disparity_adv && !t.disparity_orth);
        assert!(t.predictor);
        assert_eq!(Ablation::None.toggles(), LossToggles::default());
        assert!(!Ablation::S2.toggles().alignment_global && Ablation::S2.toggles().alignment_local);
        assert!(Ablation::S3.toggles().alignment_global && !Ablation::S3.toggles().alignment_local);
        assert!(!Ablation::S6.toggles().predictor);
        for a in Ablation::ALL {
            assert_eq!(a.to_string().parse::<Ablation>().unwrap(), a);
        }
        assert!("s7".parse::<Ablation>().is_err());
    }
}
