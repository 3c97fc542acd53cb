use std::path::Path;

use ordiformer::inference::{TauGrid, TtaPolicy};
use ordiformer::pipeline::{SplitRegime, TrainConfig};
use ordiformer::synthgen::SynthConfig;
use ordiformer::{Error, Result};
use serde::{Deserialize, Serialize};

/// Cross-validation layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
    pub regime: SplitRegime,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: 5,
            regime: SplitRegime::TrainValTest,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub bootstrap_resamples: usize,
    pub ci_level: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bootstrap_resamples: 1000,
            ci_level: 0.95,
        }
    }
}

/// Every tunable of a run. Sections mirror the TOML layout:
/// `[synth]`, `[train]` (with `[train.encoder]`, `[train.align]`,
/// `[train.prompts]`, `[train.augment]`), `[cv]`, `[tta]`, `[tau_grid]`,
/// `[eval]`. Missing keys take their defaults; unknown keys are errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub cv: CvConfig,
    pub tta: TtaPolicy,
    pub tau_grid: TauGrid,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Defaults when no path is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.tta.validate()?;
        self.tau_grid.validate()?;
        if self.cv.folds < 2 {
            return Err(Error::Config(format!("cv.folds = {} (need at least 2)", self.cv.folds)));
        }
        if self.eval.bootstrap_resamples == 0 || !(self.eval.ci_level > 0.0 && self.eval.ci_level < 1.0) {
            return Err(Error::Config(format!(
                "eval needs bootstrap_resamples > 0 and ci_level in (0, 1), got {:?}",
                self.eval
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use ordiformer::encoders::EncoderConfig;
    use ordiformer::ordinal::HeadMode;
    use ordiformer::semalign::AlignMode;

    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.lr, 3e-5);
        assert_eq!(c.train.weight_decay, 0.05);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.train.t_max, 80);
        assert_eq!(c.train.patience, 10);
        assert_eq!(c.train.seed, 42);
        assert_eq!(c.tau_grid, TauGrid { lo: 0.30, hi: 0.70, step: 0.01 });
        assert_eq!(c.tta.views.len(), 4);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn sections_and_nested_tables() {
        let c = RunConfig::parse(
            r#"
            [synth]
            n_samples = 100
            noise_sigma = 0.15

            [train]
            head = "ce"
            t_max = 5
            patience = 2

            [train.encoder]
            kind = "patch"
            patch_size = 8

            [train.align]
            mode = "off"

            [cv]
            folds = 2
            regime = "train_val"

            [tta]
            views = ["identity", "hflip"]
            "#,
        )
        .unwrap();
        assert_eq!(c.synth.n_samples, 100);
        assert_eq!(c.train.head, HeadMode::Ce);
        assert!(matches!(c.train.encoder, EncoderConfig::Patch(ref p) if p.patch_size == 8 && p.num_layers == 2));
        assert_eq!(c.train.align.mode, AlignMode::Off);
        assert_eq!(c.cv.regime, SplitRegime::TrainVal);
        assert_eq!(c.tta.views.len(), 2);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            "[train]\nlearning_rate = 0.1\n",
            "[trian]\nlr = 0.1\n",
            "[train.encoder]\nkind = \"mlp\"\nwidth = 3\n",
            "[tau_grid]\nlow = 0.2\n",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }
}
