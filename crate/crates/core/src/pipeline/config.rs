use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::HeatmapParams;
use crate::losses::{ImageDistance, LossWeights, GD_EPS};
use crate::nn::{Scale, UNetSpec};

/// Environment variable overriding [`TrainConfig::seed`].
pub const SEED_ENV: &str = "STROKEFORGE_SEED";

/// Epoch count the full-scale milestones refer to.
pub const PAPER_TOTAL_EPOCHS: usize = 400;
const PAPER_MILESTONES: [usize; 2] = [180, 300];

/// Which networks take part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Segmentor on the four perfusion maps.
    #[serde(rename = "segonly")]
    SegOnly,
    /// Generator on the four perfusion maps, segmentor on its output.
    Gen,
    /// Extractor, generator and segmentor.
    Full,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::SegOnly => "segonly",
            Variant::Gen => "gen",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "segonly" => Ok(Variant::SegOnly),
            "gen" => Ok(Variant::Gen),
            "full" => Ok(Variant::Full),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected segonly, gen or full)"
            ))),
        }
    }

    pub fn has_extractor(self) -> bool {
        self == Variant::Full
    }

    pub fn has_generator(self) -> bool {
        self != Variant::SegOnly
    }

    /// Default first-network input layout.
    pub fn default_channels(self) -> Vec<InputChannel> {
        use InputChannel::*;
        match self {
            Variant::Full => vec![MapPre, MapProb, Cbf, Cbv, Mtt, Tmax, CtpMean],
            Variant::Gen | Variant::SegOnly => vec![Cbf, Cbv, Mtt, Tmax],
        }
    }
}

/// One channel of the generator input (or of the segmentor input in the
/// segmentor-only variant). Every channel is z-scored per case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputChannel {
    /// Extractor output before the sigmoid.
    MapPre,
    /// Extractor output after the sigmoid.
    MapProb,
    Cbf,
    Cbv,
    Mtt,
    Tmax,
    /// Temporal mean of all CTP frames.
    CtpMean,
}

impl InputChannel {
    pub fn needs_extractor(self) -> bool {
        matches!(self, InputChannel::MapPre | InputChannel::MapProb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss_weights: LossWeights,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub seed: u64,
    pub rmsprop_rho: f64,
    pub rmsprop_eps: f64,
    pub folds: usize,
    pub image_size: usize,
    /// Network widths and depths.
    pub scale: Scale,
    pub variant: Variant,
    /// Train each stage on its own loss only.
    pub detach_stages: bool,
    /// Input layout of the first image-to-image network.
    pub input_channels: Vec<InputChannel>,
    pub heatmap: HeatmapParams,
    pub image_distance: ImageDistance,
    pub gd_eps: f64,
    /// Segmentor encoder stages used as the generator's feature space.
    pub feature_stages: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Full-scale milestones scaled to a run of `total_epochs`.
pub fn rescaled_milestones(total_epochs: usize) -> Vec<usize> {
    PAPER_MILESTONES
        .iter()
        .map(|&m| ((m * total_epochs) as f64 / PAPER_TOTAL_EPOCHS as f64).round() as usize)
        .collect()
}

impl TrainConfig {
    /// 256×256 inputs, full-scale hyperparameters.
    pub fn paper() -> Self {
        Self {
            loss_weights: LossWeights::default(),
            batch_size: 5,
            base_lr: 0.002,
            lr_decay_factor: 0.2,
            lr_decay_epochs: PAPER_MILESTONES.to_vec(),
            warmup_epochs: 5,
            total_epochs: PAPER_TOTAL_EPOCHS,
            seed: 0,
            rmsprop_rho: 0.9,
            rmsprop_eps: 1e-8,
            folds: 4,
            image_size: 256,
            scale: Scale::Paper,
            variant: Variant::Full,
            detach_stages: false,
            input_channels: Variant::Full.default_channels(),
            heatmap: HeatmapParams::paper(),
            image_distance: ImageDistance::Squared,
            gd_eps: GD_EPS,
            feature_stages: 2,
        }
    }

    /// 64×64 inputs and CPU-sized networks; same hyperparameters with the
    /// milestones rescaled to the shorter run.
    pub fn desk() -> Self {
        let total = 30;
        Self {
            total_epochs: total,
            lr_decay_epochs: rescaled_milestones(total),
            image_size: 64,
            scale: Scale::Desk,
            heatmap: HeatmapParams::desk(),
            ..Self::paper()
        }
    }

    /// Switch variant and reset the input layout to its default.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self.input_channels = variant.default_channels();
        self
    }

    /// Set `total_epochs` and rescale the decay milestones with it.
    pub fn with_epochs(mut self, total_epochs: usize) -> Self {
        self.total_epochs = total_epochs;
        self.lr_decay_epochs = rescaled_milestones(total_epochs);
        self
    }

    /// Parse a possibly partial document over the desk defaults. A `variant`
    /// without `input_channels` takes that variant's default layout, and a
    /// `total_epochs` without `lr_decay_epochs` rescales the milestones.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg: Self = table.clone().try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if table.contains_key("variant") && !table.contains_key("input_channels") {
            cfg.input_channels = cfg.variant.default_channels();
        }
        if table.contains_key("total_epochs") && !table.contains_key("lr_decay_epochs") {
            cfg.lr_decay_epochs = rescaled_milestones(cfg.total_epochs);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Apply `STROKEFORGE_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn segmentor_in_channels(&self) -> usize {
        match self.variant {
            Variant::SegOnly => self.input_channels.len(),
            _ => 1,
        }
    }

    pub fn extractor_spec(&self) -> UNetSpec {
        UNetSpec {
            input_size: Some(self.image_size),
            ..UNetSpec::extractor(self.scale, crate::perfusion::SAMPLED_FRAMES)
        }
    }

    pub fn generator_spec(&self) -> UNetSpec {
        UNetSpec {
            input_size: Some(self.image_size),
            ..UNetSpec::generator(self.scale, self.input_channels.len())
        }
    }

    pub fn segmentor_spec(&self) -> UNetSpec {
        UNetSpec {
            input_size: Some(self.image_size),
            ..UNetSpec::segmentor(self.scale, self.segmentor_in_channels())
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        self.loss_weights.validate()?;
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return err(format!("base_lr {} must be positive", self.base_lr));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return err(format!("lr_decay_factor {} outside (0, 1]", self.lr_decay_factor));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] > w[1]) {
            return err(format!("lr_decay_epochs {:?} not sorted", self.lr_decay_epochs));
        }
        if !(0.0..1.0).contains(&self.rmsprop_rho) || !(self.rmsprop_eps >= 0.0) {
            return err(format!(
                "rmsprop_rho {} must lie in [0, 1) and rmsprop_eps {} be >= 0",
                self.rmsprop_rho, self.rmsprop_eps
            ));
        }
        if self.folds < 2 {
            return err(format!("folds {} must be at least 2", self.folds));
        }
        if self.input_channels.is_empty() {
            return err("input_channels is empty".into());
        }
        if !self.variant.has_extractor() && self.input_channels.iter().any(|c| c.needs_extractor()) {
            return err(format!(
                "variant {} has no extractor but input_channels uses its maps",
                self.variant.name()
            ));
        }
        if !(self.gd_eps > 0.0) {
            return err(format!("gd_eps {} must be positive", self.gd_eps));
        }
        let depth = self.segmentor_spec().depth;
        if self.feature_stages == 0 || self.feature_stages > depth {
            return err(format!("feature_stages {} outside 1..={depth}", self.feature_stages));
        }
        if !(self.heatmap.w0 > 0.0 && self.heatmap.sigma > 0.0) {
            return err("heatmap w0 and sigma must be positive".into());
        }
        for spec in [self.extractor_spec(), self.generator_spec(), self.segmentor_spec()] {
            crate::nn::build_unet(spec)?;
        }
        Ok(())
    }
}

/// Learning rate at `epoch` (0-based): linear warm-up from a tenth of
/// `base_lr`, then one decay factor per milestone reached.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        let frac = epoch as f64 / cfg.warmup_epochs as f64;
        return cfg.base_lr * (0.1 + 0.9 * frac);
    }
    let passed = cfg.lr_decay_epochs.iter().filter(|&&m| epoch >= m).count();
    cfg.base_lr * cfg.lr_decay_factor.powi(passed as i32)
}
