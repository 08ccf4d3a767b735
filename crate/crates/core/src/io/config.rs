//! One structured-text configuration file drives every command. All keys
//! default, so an empty file is a valid desk-scale configuration; keys mirror
//! the train/planner/task parameter structs one to one.

use crate::elbo::{ElboVariant, ImageSource, TargetSource, TrainConfig};
use crate::error::{KrcError, Result};
use crate::nets::{EnsembleConfig, ModelDims};
use crate::planner::CemParams;
use crate::valveworld::{CollectConfig, TextureInterval, IMG_H, IMG_W};
use serde::{Deserialize, Serialize};
use std::path::Path;

fn d_n_random() -> usize { 200 }
fn d_n_noisy() -> usize { 100 }
fn d_t_len() -> usize { 25 }
fn d_noise_sigma_u() -> f64 { 0.03 }
fn d_texture() -> TextureInterval { TextureInterval::EachStep }
fn d_speed() -> f64 { 1.0 }

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSection {
    #[serde(default = "d_n_random")]
    pub n_random: usize,
    #[serde(default = "d_n_noisy")]
    pub n_noisy_task: usize,
    #[serde(default = "d_t_len")]
    pub t_len: usize,
    #[serde(default = "d_noise_sigma_u")]
    pub noise_sigma_u: f64,
    #[serde(default = "d_texture")]
    pub texture_interval: TextureInterval,
    #[serde(default = "d_speed")]
    pub speed_multiplier: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}

impl DatasetSection {
    pub fn collect_config(&self) -> CollectConfig {
        CollectConfig {
            n_random: self.n_random,
            n_noisy_task: self.n_noisy_task,
            t_len: self.t_len,
            noise_sigma_u: self.noise_sigma_u,
            texture_interval: self.texture_interval,
            speed_multiplier: self.speed_multiplier,
        }
    }
}

fn d_d_a() -> usize { 8 }
fn d_d_z() -> usize { 4 }
fn d_k() -> usize { 4 }
fn d_enc_hidden() -> [usize; 2] { [256, 128] }
fn d_dec_hidden() -> [usize; 2] { [128, 256] }
fn d_dpn_hidden() -> usize { 64 }
fn d_sigma_x2() -> f64 { 0.01 }

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(default = "d_d_a")]
    pub d_a: usize,
    #[serde(default = "d_d_z")]
    pub d_z: usize,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_enc_hidden")]
    pub enc_hidden: [usize; 2],
    #[serde(default = "d_dec_hidden")]
    pub dec_hidden: [usize; 2],
    #[serde(default = "d_dpn_hidden")]
    pub dpn_hidden: usize,
    #[serde(default = "d_sigma_x2")]
    pub sigma_x2: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}

impl ModelSection {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            img_h: IMG_H,
            img_w: IMG_W,
            d_a: self.d_a,
            d_b: crate::valveworld::D_B,
            d_z: self.d_z,
            d_u: crate::valveworld::D_U,
            k: self.k,
            enc_hidden: (self.enc_hidden[0], self.enc_hidden[1]),
            dec_hidden: (self.dec_hidden[0], self.dec_hidden[1]),
            dpn_hidden: self.dpn_hidden,
        }
    }
}

fn d_epochs() -> usize { 40 }
fn d_batch() -> usize { 16 }
fn d_lr() -> f64 { 1e-3 }
fn d_mc() -> usize { 1 }
fn d_variant() -> ElboVariant { ElboVariant::Observed }
fn d_input() -> ImageSource { ImageSource::Randomized }
fn d_target() -> TargetSource { TargetSource::Canonical }
fn d_clip() -> f64 { 10.0 }
fn d_basis_scale() -> f64 { 10.0 }

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_basis_scale")]
    pub basis_lr_scale: f64,
    #[serde(default = "d_mc")]
    pub mc_samples: usize,
    #[serde(default = "d_variant")]
    pub variant: ElboVariant,
    #[serde(default = "d_input")]
    pub input_source: ImageSource,
    #[serde(default = "d_target")]
    pub target_source: TargetSource,
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}

impl TrainSection {
    pub fn train_config(&self, sigma_x2: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            basis_lr_scale: self.basis_lr_scale,
            mc_samples: self.mc_samples,
            variant: self.variant,
            input_source: self.input_source,
            target_source: self.target_source,
            grad_clip: self.grad_clip,
            sigma_x2,
            seed,
        }
    }
}

fn d_members() -> usize { 5 }
fn d_ens_hidden() -> usize { 64 }
fn d_ens_epochs() -> usize { 120 }
fn d_ens_batch() -> usize { 64 }

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleSection {
    #[serde(default = "d_members")]
    pub members: usize,
    #[serde(default = "d_ens_hidden")]
    pub hidden: usize,
    #[serde(default = "d_ens_epochs")]
    pub epochs: usize,
    #[serde(default = "d_ens_batch")]
    pub batch: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}

impl EnsembleSection {
    pub fn ensemble_config(&self) -> EnsembleConfig {
        EnsembleConfig {
            members: self.members,
            hidden: self.hidden,
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
        }
    }
}

fn d_population() -> usize { 128 }
fn d_elites() -> usize { 16 }
fn d_iters() -> usize { 8 }
fn d_sigma0() -> f64 { 0.25 }
fn d_horizon() -> usize { 5 }

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CemSection {
    #[serde(default = "d_population")]
    pub population: usize,
    #[serde(default = "d_elites")]
    pub elites: usize,
    #[serde(default = "d_iters")]
    pub iters: usize,
    #[serde(default = "d_sigma0")]
    pub sigma0: f64,
    #[serde(default = "d_horizon")]
    pub horizon: usize,
}

impl Default for CemSection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}

impl CemSection {
    pub fn cem_params(&self) -> CemParams {
        CemParams {
            population: self.population,
            elites: self.elites,
            iters: self.iters,
            sigma0: self.sigma0,
            horizon: self.horizon,
        }
    }
}

fn d_l_steps() -> usize { 20 }
fn d_beta() -> String { "auto".to_string() }

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSection {
    #[serde(default = "d_l_steps")]
    pub l_steps: usize,
    #[serde(default = "d_speed")]
    pub speed_multiplier: f64,
    /// "auto" or a fixed numeric weight
    #[serde(default = "d_beta")]
    pub beta: String,
}

impl Default for TaskSection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}

impl TaskSection {
    pub fn beta_mode(&self) -> Result<crate::planner::BetaMode> {
        if self.beta == "auto" {
            Ok(crate::planner::BetaMode::Auto)
        } else {
            self.beta
                .parse::<f64>()
                .map(crate::planner::BetaMode::Fixed)
                .map_err(|_| KrcError::Config(format!("task.beta must be \"auto\" or a number, got '{}'", self.beta)))
        }
    }
}

fn d_n_domains() -> usize { 50 }
fn d_n_seeds() -> usize { 5 }
fn d_variants() -> Vec<String> {
    ["KRC_wz", "KRC_woz", "KR2_wz", "KR2_woz", "KC2_wz", "Random"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}
fn d_init_noise() -> f64 { 0.3 }
fn d_multipliers() -> Vec<f64> { vec![0.75, 0.5, 0.25, 0.0] }

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSection {
    #[serde(default = "d_n_domains")]
    pub n_domains: usize,
    #[serde(default = "d_n_seeds")]
    pub n_seeds: usize,
    #[serde(default = "d_variants")]
    pub variants: Vec<String>,
    /// start-belief perturbation for the occlusion challenge
    #[serde(default = "d_init_noise")]
    pub init_state_noise: f64,
    #[serde(default = "d_multipliers")]
    pub multipliers: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}

fn d_abl_dims() -> Vec<usize> { vec![2, 8, 32, 128] }
fn d_abl_epochs() -> usize { 12 }
fn d_abl_warmup() -> usize { 2 }
fn d_abl_enc() -> [usize; 2] { [64, 32] }
fn d_abl_dec() -> [usize; 2] { [32, 64] }
fn d_abl_train() -> usize { 40 }
fn d_abl_held() -> usize { 50 }

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSection {
    #[serde(default = "d_abl_dims")]
    pub dims: Vec<usize>,
    #[serde(default = "d_abl_epochs")]
    pub epochs: usize,
    #[serde(default = "d_abl_warmup")]
    pub warmup_epochs: usize,
    /// thinner trunk so the feature-dimension cost dominates the timing
    #[serde(default = "d_abl_enc")]
    pub enc_hidden: [usize; 2],
    #[serde(default = "d_abl_dec")]
    pub dec_hidden: [usize; 2],
    #[serde(default = "d_abl_train")]
    pub n_train: usize,
    #[serde(default = "d_abl_held")]
    pub n_held_out: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct KrcConfig {
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub cem: CemSection,
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub ablation: AblationSection,
}

impl KrcConfig {
    pub fn load(path: &Path) -> Result<KrcConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| KrcError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<KrcConfig> {
        toml::from_str(text).map_err(|e| KrcError::Config(format!("config parse error: {e}")))
    }

    /// Canonical snapshot of the fully defaulted configuration.
    pub fn snapshot(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_fully_defaults() {
        let cfg = KrcConfig::parse("").unwrap();
        assert_eq!(cfg.dataset.n_random, 200);
        assert_eq!(cfg.dataset.total().expect("counts"), 301);
        assert_eq!(cfg.model.d_a, 8);
        assert_eq!(cfg.cem.population, 128);
        assert_eq!(cfg.task.l_steps, 20);
        assert_eq!(cfg.eval.n_domains, 50);
    }

    #[test]
    fn overrides_apply_and_snapshot_roundtrips() {
        let cfg = KrcConfig::parse("[model]\nd_a = 16\n[train]\nvariant = \"unobserved\"\n").unwrap();
        assert_eq!(cfg.model.d_a, 16);
        assert_eq!(cfg.train.variant, ElboVariant::Unobserved);
        let snap = cfg.snapshot();
        let back = KrcConfig::parse(&snap).unwrap();
        assert_eq!(back.model.d_a, 16);
        assert_eq!(snap, back.snapshot());
    }

    #[test]
    fn bad_beta_is_a_config_error() {
        let cfg = KrcConfig::parse("[task]\nbeta = \"huge\"\n").unwrap();
        assert!(matches!(cfg.task.beta_mode(), Err(KrcError::Config(_))));
    }
}

impl DatasetSection {
    pub fn total(&self) -> Result<usize> {
        Ok(self.collect_config().total_episodes())
    }
}
