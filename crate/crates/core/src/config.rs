//! Model, training and run configuration.
//!
//! Config files are TOML with `[model]`, `[train]` and `[data]` tables. The
//! `model.preset` and `train.preset` keys select a base preset that the
//! remaining keys of the table override.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Constant width, patch stride 16, MLG blocks appended after the PGN stack.
    Isotropic,
    /// Staged widths with downsampling between stages, MLG blocks per stage.
    Pyramid,
}

/// Direction of the patch-label difference inside the label update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlgDifference {
    /// `max(l_i − x_j)`
    LabelMinusPatch,
    /// `max(x_j − l_i)`
    PatchMinusLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Mel bins fed to the stem (the 128-bin frontend output is mean-pooled down to this).
    pub input_bins: usize,
    pub input_frames: usize,
    /// Output channels of each stride-2 stem convolution; the last equals `stage_dims[0]`.
    pub stem_channels: Vec<usize>,
    pub stage_dims: Vec<usize>,
    /// PGN blocks per stage.
    pub stage_pgn: Vec<usize>,
    /// MLG (PLG + LLG) blocks per stage.
    pub stage_mlg: Vec<usize>,
    /// Pyramid only: dilation per stage.
    pub stage_dilation: Vec<usize>,
    /// Isotropic only: dilation reached by the last block.
    pub dilation_max: usize,
    pub k: usize,
    pub k_plg: usize,
    pub classes: usize,
    pub ffn_ratio: usize,
    pub head_ratio: usize,
    /// Relative positional bias in graph construction (pyramid only).
    pub relative_pos: bool,
    /// +1 adds `e_iᵀe_j` to the distance, −1 subtracts it.
    pub rel_bias_sign: f64,
    pub plg_difference: PlgDifference,
    pub norm_eps: f64,
    /// Input standardization applied to log-mel values before the stem.
    pub input_mean: f64,
    pub input_std: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ModelConfig {
    /// Desk-scale isotropic model: 64×64 input, width 32, two PGN blocks and one MLG block.
    pub fn tiny() -> Self {
        ModelConfig {
            variant: Variant::Isotropic,
            input_bins: 64,
            input_frames: 64,
            stem_channels: vec![4, 8, 16, 32],
            stage_dims: vec![32],
            stage_pgn: vec![2],
            stage_mlg: vec![1],
            stage_dilation: vec![1],
            dilation_max: 4,
            k: 9,
            k_plg: 9,
            classes: 8,
            ffn_ratio: 2,
            head_ratio: 2,
            relative_pos: false,
            rel_bias_sign: 1.0,
            plg_difference: PlgDifference::LabelMinusPatch,
            norm_eps: 1e-5,
            input_mean: 0.0,
            input_std: 1.0,
            init_seed: 0,
        }
    }

    /// Two-stage pyramid counterpart of [`ModelConfig::tiny`].
    pub fn tiny_pyramid() -> Self {
        ModelConfig {
            variant: Variant::Pyramid,
            input_bins: 32,
            input_frames: 32,
            stem_channels: vec![8, 16],
            stage_dims: vec![16, 24],
            stage_pgn: vec![1, 1],
            stage_mlg: vec![1, 1],
            stage_dilation: vec![1, 2],
            relative_pos: true,
            k: 5,
            k_plg: 5,
            ..Self::tiny()
        }
    }

    pub fn isotropic() -> Self {
        ModelConfig {
            variant: Variant::Isotropic,
            input_bins: 128,
            input_frames: 1024,
            stem_channels: vec![48, 96, 192, 384],
            stage_dims: vec![384],
            stage_pgn: vec![12],
            stage_mlg: vec![1],
            stage_dilation: vec![1],
            dilation_max: 4,
            k: 9,
            k_plg: 9,
            classes: 200,
            ..Self::tiny()
        }
    }

    pub fn pyramid_s() -> Self {
        ModelConfig {
            variant: Variant::Pyramid,
            input_bins: 128,
            input_frames: 1024,
            stem_channels: vec![40, 80],
            stage_dims: vec![80, 160, 400, 640],
            stage_pgn: vec![2, 2, 6, 2],
            stage_mlg: vec![1, 1, 3, 1],
            stage_dilation: vec![1, 1, 2, 2],
            relative_pos: true,
            classes: 200,
            ..Self::tiny()
        }
    }

    pub fn pyramid_med() -> Self {
        ModelConfig {
            stem_channels: vec![48, 96],
            stage_dims: vec![96, 192, 384, 768],
            stage_pgn: vec![2, 2, 16, 2],
            stage_mlg: vec![1, 1, 6, 1],
            ..Self::pyramid_s()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "tiny-pyramid" => Ok(Self::tiny_pyramid()),
            "isotropic" => Ok(Self::isotropic()),
            "pyramid-s" => Ok(Self::pyramid_s()),
            "pyramid-med" => Ok(Self::pyramid_med()),
            other => Err(Error::config("model.preset", format!("unknown preset `{other}`"))),
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_dims.len()
    }

    pub fn total_pgn(&self) -> usize {
        self.stage_pgn.iter().sum()
    }

    /// Spatial reduction of the stem (`p`).
    pub fn stem_reduction(&self) -> usize {
        1 << self.stem_channels.len()
    }

    /// Grid `(freq, time)` at each stage.
    pub fn stage_grids(&self) -> Vec<(usize, usize)> {
        let p = self.stem_reduction();
        (0..self.stages())
            .map(|s| (self.input_bins / p >> s, self.input_frames / p >> s))
            .collect()
    }

    /// Neighbor count for PGN block `layer` (global index): grows linearly
    /// from `k` to `2k` over the whole stack.
    pub fn k_at(&self, layer: usize) -> usize {
        let depth = self.total_pgn();
        if depth <= 1 {
            return self.k;
        }
        let frac = layer as f64 / (depth - 1) as f64;
        (self.k as f64 * (1.0 + frac)).round() as usize
    }

    /// Dilation for PGN block `layer` (global index) in `stage`.
    pub fn dilation_at(&self, layer: usize, stage: usize) -> usize {
        match self.variant {
            Variant::Pyramid => self.stage_dilation[stage],
            Variant::Isotropic => {
                let depth = self.total_pgn();
                if depth <= 1 {
                    return 1;
                }
                let d = 1.0 + layer as f64 * (self.dilation_max as f64 - 1.0) / (depth - 1) as f64;
                (d.round() as usize).min(self.dilation_max).max(1)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, m: String| Err(Error::config(format!("model.{f}"), m));
        let s = self.stages();
        if s == 0 {
            return err("stage_dims", "at least one stage required".into());
        }
        if self.stage_pgn.len() != s || self.stage_mlg.len() != s {
            return err("stage_pgn", format!("stage_pgn/stage_mlg must have {s} entries"));
        }
        if self.variant == Variant::Isotropic && s != 1 {
            return err("stage_dims", "isotropic models have exactly one stage".into());
        }
        if self.variant == Variant::Pyramid && self.stage_dilation.len() != s {
            return err("stage_dilation", format!("expected {s} entries"));
        }
        if self.stage_dilation.iter().any(|&d| d == 0) || self.dilation_max == 0 {
            return err("stage_dilation", "dilations must be ≥ 1".into());
        }
        if self.stage_dims.iter().any(|&d| d == 0) {
            return err("stage_dims", "dims must be positive".into());
        }
        if self.stem_channels.is_empty() || self.stem_channels.contains(&0) {
            return err("stem_channels", "need at least one positive channel count".into());
        }
        if self.stem_channels.last() != self.stage_dims.first() {
            return err("stem_channels", "last stem width must equal stage_dims[0]".into());
        }
        if self.k == 0 {
            return err("k", "must be ≥ 1".into());
        }
        if self.k_plg == 0 {
            return err("k_plg", "must be ≥ 1".into());
        }
        if self.classes == 0 {
            return err("classes", "must be ≥ 1".into());
        }
        if self.ffn_ratio == 0 || self.head_ratio == 0 {
            return err("ffn_ratio", "hidden ratios must be ≥ 1".into());
        }
        if self.rel_bias_sign != 1.0 && self.rel_bias_sign != -1.0 {
            return err("rel_bias_sign", "must be +1 or -1".into());
        }
        if !(self.norm_eps > 0.0) {
            return err("norm_eps", "must be positive".into());
        }
        if !(self.input_std > 0.0) || !self.input_mean.is_finite() {
            return err("input_std", "must be positive and finite".into());
        }
        if self.input_bins == 0 || 128 % self.input_bins != 0 {
            return err("input_bins", "must divide the 128 mel bins".into());
        }
        let mult = self.stem_reduction() << (s - 1);
        for (field, v) in [("input_bins", self.input_bins), ("input_frames", self.input_frames)] {
            if v % mult != 0 {
                return err(field, format!("{v} is not a multiple of {mult}"));
            }
        }
        let (fg, tg) = self.stage_grids()[0];
        if self.k_plg > fg * tg {
            return err("k_plg", format!("exceeds the {} patch nodes", fg * tg));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub warmup_iters: usize,
    /// Epoch after which halving starts.
    pub decay_start_epoch: usize,
    /// Halving period in epochs; 0 disables decay.
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Probability that a training draw is mixed with a partner.
    pub mixup_ratio: f64,
    /// λ ~ Beta(alpha, alpha)
    pub mixup_alpha: f64,
    pub max_time_mask: usize,
    pub max_freq_mask: usize,
    pub augment: bool,
    pub balanced_sampling: bool,
    /// Draws per epoch; 0 means one pass worth (the dataset size).
    pub samples_per_epoch: usize,
    /// Frames kept from each spectrogram before fitting to the model input.
    pub target_frames: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::fsd50k()
    }
}

impl TrainConfig {
    pub fn fsd50k() -> Self {
        TrainConfig {
            lr0: 5e-4,
            warmup_iters: 1000,
            decay_start_epoch: 10,
            decay_every: 5,
            epochs: 50,
            batch_size: 24,
            mixup_ratio: 0.5,
            mixup_alpha: 10.0,
            max_time_mask: 192,
            max_freq_mask: 48,
            augment: true,
            balanced_sampling: true,
            samples_per_epoch: 0,
            target_frames: 1024,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }

    pub fn audioset() -> Self {
        TrainConfig {
            epochs: 60,
            target_frames: 1056,
            balanced_sampling: false,
            ..Self::fsd50k()
        }
    }

    /// Settings for the 64×64 desk-scale model.
    pub fn tiny() -> Self {
        TrainConfig {
            lr0: 1e-3,
            warmup_iters: 20,
            decay_start_epoch: 20,
            decay_every: 5,
            epochs: 30,
            batch_size: 8,
            max_time_mask: 12,
            max_freq_mask: 6,
            target_frames: 64,
            ..Self::fsd50k()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "fsd50k" => Ok(Self::fsd50k()),
            "audioset" => Ok(Self::audioset()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::config("train.preset", format!("unknown preset `{other}`"))),
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let err = |f: &str, m: &str| Err(Error::config(format!("train.{f}"), m));
        if !(self.lr0 >= 0.0) {
            return err("lr0", "must be non-negative");
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be ≥ 1");
        }
        if !(0.0..=1.0).contains(&self.mixup_ratio) {
            return err("mixup_ratio", "must lie in [0, 1]");
        }
        if !(self.mixup_alpha > 0.0) {
            return err("mixup_alpha", "must be positive");
        }
        if self.max_time_mask > model.input_frames {
            return err("max_time_mask", "exceeds the input frame count");
        }
        if self.max_freq_mask > model.input_bins {
            return err("max_freq_mask", "exceeds the input bin count");
        }
        if self.target_frames == 0 {
            return err("target_frames", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("beta1", "Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return err("adam_eps", "must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

fn known_optional(section: &str, key: &str) -> bool {
    section == "data" && matches!(key, "train_manifest" | "val_manifest" | "output_dir")
}

fn overlay<T>(base: T, table: Option<&toml::Table>, section: &str) -> Result<T>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    let mut merged = toml::Table::try_from(&base).map_err(|e| Error::config(section, e.to_string()))?;
    if let Some(t) = table {
        for (k, v) in t {
            if k == "preset" {
                continue;
            }
            if !merged.contains_key(k) && !known_optional(section, k) {
                return Err(Error::config(format!("{section}.{k}"), "unknown key"));
            }
            merged.insert(k.clone(), v.clone());
        }
    }
    merged.try_into().map_err(|e: toml::de::Error| {
        let field = e
            .message()
            .split('`')
            .nth(1)
            .map(|f| format!("{section}.{f}"))
            .unwrap_or_else(|| section.to_string());
        Error::config(field, e.message().to_string())
    })
}

impl RunConfig {
    pub fn tiny() -> Self {
        RunConfig {
            model: ModelConfig::tiny(),
            train: TrainConfig::tiny(),
            data: DataConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let root: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("<file>", e.to_string()))?;
        for key in root.keys() {
            if !matches!(key.as_str(), "model" | "train" | "data") {
                return Err(Error::config(key.clone(), "unknown section"));
            }
        }
        let section = |name: &str| -> Result<Option<&toml::Table>> {
            match root.get(name) {
                None => Ok(None),
                Some(toml::Value::Table(t)) => Ok(Some(t)),
                Some(_) => Err(Error::config(name, "must be a table")),
            }
        };
        let preset = |t: Option<&toml::Table>, field: &str, default: &str| -> Result<String> {
            match t.and_then(|t| t.get("preset")) {
                None => Ok(default.to_string()),
                Some(toml::Value::String(s)) => Ok(s.clone()),
                Some(_) => Err(Error::config(field, "must be a string")),
            }
        };
        let model_t = section("model")?;
        let train_t = section("train")?;
        let model = overlay(
            ModelConfig::preset(&preset(model_t, "model.preset", "tiny")?)?,
            model_t,
            "model",
        )?;
        let train = overlay(
            TrainConfig::preset(&preset(train_t, "train.preset", "tiny")?)?,
            train_t,
            "train",
        )?;
        let data = overlay(DataConfig::default(), section("data")?, "data")?;
        let cfg = RunConfig { model, train, data };
        cfg.model.validate()?;
        cfg.train.validate(&cfg.model)?;
        Ok(cfg)
    }

    /// Loads a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.data.train_manifest,
            &mut cfg.data.val_manifest,
            &mut cfg.data.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
