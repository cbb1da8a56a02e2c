//! Run configuration: one TOML file for every stage, with `--set
//! section.key=value` overrides and `PROGEN_SEED` taking precedence over the
//! file's seed. Unknown keys are rejected. Relative paths resolve against the
//! config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use progen_core::sampler::{SamplerConfig, SamplerMode};
use progen_core::train::{KernelMode, TrainConfig};
use progen_core::{BetaSchedule, ModelConfig};

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "PROGEN_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub sde: SdeSection,
    pub train: TrainSection,
    pub sampler: SamplerSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub series: PathBuf,
    pub edges: PathBuf,
    pub features: usize,
    pub history_len: usize,
    pub horizon: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub st_channels: usize,
    pub hidden_dim: usize,
    pub embed_dim_time: usize,
    pub embed_dim_pos: usize,
    pub n_res_blocks: usize,
    pub channel_multipliers: Vec<usize>,
    pub cheb_order: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdeSection {
    pub beta0: f64,
    pub beta1: f64,
    /// Neighbor coupling of the ST SDE.
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelName {
    Subvp,
    St,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub t_min: f64,
    pub kernel_mode: KernelName,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// 0 visits every training window each epoch.
    pub max_windows_per_epoch: usize,
    /// 0 evaluates every validation window.
    pub max_val_windows: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ModeName {
    SubvpOnly,
    StOnly,
    Adaptive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub n_steps: usize,
    pub n_samples: usize,
    pub mode: ModeName,
    pub denoise_last: bool,
    /// Adaptive selection against the window's own ground truth.
    pub oracle: bool,
    /// Adaptive traces whose per-step majority vote is replayed when
    /// `oracle` is off.
    pub calibration: Vec<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            model: ModelSection::default(),
            sde: SdeSection::default(),
            train: TrainSection::default(),
            sampler: SamplerSection::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            series: "series.csv".into(),
            edges: "edges.csv".into(),
            features: 1,
            history_len: 12,
            horizon: 12,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(2, 1, 12, 12);
        Self {
            st_channels: d.st_channels,
            hidden_dim: d.hidden_dim,
            embed_dim_time: d.embed_dim_time,
            embed_dim_pos: d.embed_dim_pos,
            n_res_blocks: d.n_res_blocks,
            channel_multipliers: d.channel_multipliers,
            cheb_order: d.cheb_order,
        }
    }
}

impl Default for SdeSection {
    fn default() -> Self {
        let s = BetaSchedule::default();
        Self {
            beta0: s.beta0,
            beta1: s.beta1,
            alpha: 0.3,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            t_min: t.t_min,
            kernel_mode: KernelName::Subvp,
            grad_clip: t.grad_clip.unwrap_or(0.0),
            max_windows_per_epoch: 0,
            max_val_windows: 0,
        }
    }
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            n_steps: s.n_steps,
            n_samples: s.n_samples,
            mode: ModeName::Adaptive,
            denoise_last: s.denoise_last,
            oracle: true,
            calibration: Vec::new(),
        }
    }
}

fn parse_override(item: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {item:?} is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    let raw = raw.trim();
    // bare words become strings, everything else is read as a TOML value
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("split of a nonempty key");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{p} is not a section")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// Parse TOML text, apply overrides and the seed environment value, then
    /// validate.
    pub fn from_toml(text: &str, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(s) = env_seed {
            let seed: i64 = s
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={s:?} is not an integer")))?;
            table.insert("seed".into(), toml::Value::Integer(seed));
        }
        for o in overrides {
            let (path, value) = parse_override(o)?;
            set_path(&mut table, &path, value)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file (or defaults when `path` is `None`), resolving
    /// relative data paths against the file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let env_seed = std::env::var(SEED_ENV).ok();
        let (text, base) = match path {
            Some(p) => (
                crate::io::read_text(p)?,
                p.parent().map(Path::to_path_buf).unwrap_or_default(),
            ),
            None => (String::new(), PathBuf::new()),
        };
        let mut cfg = Self::from_toml(&text, overrides, env_seed.as_deref())?;
        cfg.data.series = base.join(&cfg.data.series);
        cfg.data.edges = base.join(&cfg.data.edges);
        for c in &mut cfg.sampler.calibration {
            *c = base.join(&*c);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_toml().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.sampler_config().validate()?;
        BetaSchedule::new(self.sde.beta0, self.sde.beta1)?;
        let m = self.model_config(2, progen_core::data::DEFAULT_STEPS_PER_DAY);
        m.validate()?;
        if self.data.features == 0 {
            return Err(CliError::Config("data.features must be positive".into()));
        }
        if !self.sde.alpha.is_finite() {
            return Err(CliError::Config("sde.alpha must be finite".into()));
        }
        if self.train.grad_clip < 0.0 {
            return Err(CliError::Config("train.grad_clip must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, n_nodes: usize, steps_per_day: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            st_channels: m.st_channels,
            hidden_dim: m.hidden_dim,
            embed_dim_time: m.embed_dim_time,
            embed_dim_pos: m.embed_dim_pos,
            n_res_blocks: m.n_res_blocks,
            channel_multipliers: m.channel_multipliers.clone(),
            cheb_order: m.cheb_order,
            history_len: self.data.history_len,
            horizon: self.data.horizon,
            n_nodes,
            features: self.data.features,
            steps_per_day,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let cap = |v: usize| (v > 0).then_some(v);
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            seed: self.seed,
            t_min: t.t_min,
            kernel_mode: match t.kernel_mode {
                KernelName::Subvp => KernelMode::SubVp,
                KernelName::St => KernelMode::St,
            },
            grad_clip: (t.grad_clip > 0.0).then_some(t.grad_clip),
            max_windows_per_epoch: cap(t.max_windows_per_epoch),
            max_val_windows: cap(t.max_val_windows),
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            n_steps: s.n_steps,
            n_samples: s.n_samples,
            mode: match s.mode {
                ModeName::SubvpOnly => SamplerMode::SubVpOnly,
                ModeName::StOnly => SamplerMode::StOnly,
                ModeName::Adaptive => SamplerMode::Adaptive,
            },
            denoise_last: s.denoise_last,
        }
    }

    pub fn schedule(&self) -> Result<BetaSchedule> {
        Ok(BetaSchedule::new(self.sde.beta0, self.sde.beta1)?)
    }
}

pub fn mode_label(mode: ModeName) -> &'static str {
    match mode {
        ModeName::SubvpOnly => "subvp_only",
        ModeName::StOnly => "st_only",
        ModeName::Adaptive => "adaptive",
    }
}
