//! Mini-batch stochastic gradient ascent on the selected objective.
//!
//! Episode gradients within a batch are independent (the model is read-only
//! during evaluation) and may run concurrently; the reduction and the
//! parameter update are one serialized step, summed in episode order so the
//! result is bitwise independent of scheduling.

use super::model::{fit_readout, ModelCheckpoint};
use super::{elbo_observed, elbo_unobserved, ElboVariant, ImageSource, NetRcan, SeqData, TargetSource};
use crate::diffcore::optim::{clip_global_norm, Adam};
use crate::diffcore::{Binding, Tape};
use crate::error::{KrcError, Result};
use crate::nets::{Ensemble, EnsembleConfig, ModelDims};
use crate::nets::ensemble::Transition;
use crate::rng::Streams;
use crate::tensor::Tensor;
use crate::valveworld::{transparent_targets, Episode};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// learning-rate multiplier for the state-space basis and noise terms
    pub basis_lr_scale: f64,
    pub mc_samples: usize,
    pub variant: ElboVariant,
    pub input_source: ImageSource,
    pub target_source: TargetSource,
    pub grad_clip: f64,
    pub sigma_x2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch: 16,
            lr: 1e-3,
            basis_lr_scale: 10.0,
            mc_samples: 1,
            variant: ElboVariant::Observed,
            input_source: ImageSource::Randomized,
            target_source: TargetSource::Canonical,
            grad_clip: 10.0,
            sigma_x2: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub elbo: f64,
    pub seconds: f64,
}

fn check_shapes(dataset: &[Episode], dims: &ModelDims) -> Result<()> {
    let p = dims.pixels();
    for (i, ep) in dataset.iter().enumerate() {
        if ep.x_ran.shape()[1] != p
            || ep.b.shape()[1] != dims.d_b
            || ep.z.shape()[1] != dims.d_z
            || ep.u.shape()[1] != dims.d_u
        {
            return Err(KrcError::Config(format!(
                "episode {i} shapes (pixels {}, b {}, z {}, u {}) do not match the model dims",
                ep.x_ran.shape()[1],
                ep.b.shape()[1],
                ep.z.shape()[1],
                ep.u.shape()[1]
            )));
        }
    }
    Ok(())
}

/// Train a fresh model on the dataset. Deterministic in the config seed:
/// epoch shuffles and per-episode Monte Carlo draws come from independent
/// derived streams, so batch scheduling cannot change the result.
pub fn train(
    dataset: &[Episode],
    dims: ModelDims,
    cfg: &TrainConfig,
    config_snapshot: String,
) -> Result<(ModelCheckpoint, Vec<TrainLogRow>)> {
    if dataset.is_empty() {
        return Err(KrcError::Contract("training needs a non-empty dataset".to_string()));
    }
    check_shapes(dataset, &dims)?;

    let mut model = ModelCheckpoint::init(dims, cfg.sigma_x2, cfg.seed, config_snapshot);
    let streams = Streams::new(cfg.seed);
    let mut opt = Adam::new(&model.store, cfg.lr);
    opt.set_group_scale(&model.store, |name| name.starts_with("basis."), cfg.basis_lr_scale);

    // transparent targets are rendered once; other sources borrow the episode
    let transparent: Option<Vec<Tensor>> = match cfg.target_source {
        TargetSource::Transparent => Some(dataset.iter().map(transparent_targets).collect()),
        _ => None,
    };

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        let tic = Instant::now();
        let mut shuffle_rng = streams.stream("shuffle", epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_elbo = 0.0;

        for (batch_idx, chunk) in order.chunks(cfg.batch).enumerate() {
            let (grads, batch_total) =
                batch_gradients(&model, dataset, chunk, cfg, transparent.as_ref(), &streams, epoch, batch_idx)
                    .map_err(|e| match e {
                        KrcError::Numeric { op, detail } => KrcError::Training {
                            epoch,
                            detail: format!("non-finite objective ({op}: {detail})"),
                        },
                        other => other,
                    })?;
            let mut grads = grads;
            let scale = 1.0 / chunk.len() as f64;
            for g in grads.iter_mut() {
                *g = g.scale(scale);
            }
            clip_global_norm(&mut grads, cfg.grad_clip);
            opt.step(&mut model.store, &grads);
            epoch_elbo += batch_total;
        }

        let mean_elbo = epoch_elbo / dataset.len() as f64;
        if !mean_elbo.is_finite() {
            return Err(KrcError::Training { epoch, detail: format!("objective diverged: {mean_elbo}") });
        }
        log.push(TrainLogRow { epoch, elbo: mean_elbo, seconds: tic.elapsed().as_secs_f64() });
    }

    if cfg.variant == ElboVariant::Unobserved {
        let input_source = cfg.input_source;
        let readout = fit_readout(&model, dataset, |ep| input_of(ep, input_source).clone())?;
        model.readout = Some(readout);
    }
    Ok((model, log))
}

pub fn input_of(ep: &Episode, source: ImageSource) -> &Tensor {
    match source {
        ImageSource::Randomized => &ep.x_ran,
        ImageSource::Canonical => &ep.x_can,
    }
}

/// One shared-tape pass over a batch: the big dense ops run once for all
/// episodes, gradients come from a single backward pass, and the returned
/// scalar is the batch's summed objective.
fn batch_gradients(
    model: &ModelCheckpoint,
    dataset: &[Episode],
    chunk: &[usize],
    cfg: &TrainConfig,
    transparent: Option<&Vec<Tensor>>,
    streams: &Streams,
    epoch: usize,
    batch_idx: usize,
) -> Result<(Vec<Tensor>, f64)> {
    let mut tape = Tape::new();
    let binding = Binding::bind_all(&model.store, &mut tape);
    let basis = model.basis.bind(&mut tape, &binding)?;
    let batch: Vec<SeqData> = chunk
        .iter()
        .map(|&ep_idx| {
            let episode = &dataset[ep_idx];
            let x_target: &Tensor = match cfg.target_source {
                TargetSource::Randomized => &episode.x_ran,
                TargetSource::Canonical => &episode.x_can,
                TargetSource::Transparent => &transparent.expect("transparent targets precomputed")[ep_idx],
            };
            SeqData {
                x_in: input_of(episode, cfg.input_source),
                x_target,
                b: &episode.b,
                z: Some(&episode.z),
                u: &episode.u,
            }
        })
        .collect();
    let rcan = NetRcan { encoder: &model.encoder, decoder: &model.decoder };
    let mut rng = streams.scoped("mc", epoch as u64).stream("batch", batch_idx as u64);
    let total = super::batch::elbo_batch_total(
        &mut tape,
        &rcan,
        &model.dpn,
        &basis,
        &binding,
        &batch,
        cfg.mc_samples,
        cfg.variant,
        &mut rng,
    )?;
    let value = tape.value(total).item()?;
    let loss = tape.neg(total)?;
    let grads = tape.backward(loss)?;
    Ok((binding.collect_grads(&tape, &grads), value))
}

/// Extract observed transitions and train the planner ensemble, separately
/// from the main model.
pub fn train_ensemble_from_dataset(
    dataset: &[Episode],
    cfg: EnsembleConfig,
    seed: u64,
) -> Result<Ensemble> {
    let mut transitions = Vec::new();
    for ep in dataset {
        let t_len = ep.t_len();
        if ep.z.len() == 0 {
            return Err(KrcError::Contract("ensemble training needs observed states".to_string()));
        }
        for t in 1..t_len {
            transitions.push(Transition {
                z_prev: Tensor::vector(ep.z.row(t - 1).to_vec()),
                u: Tensor::vector(ep.u.row(t).to_vec()),
                z_next: Tensor::vector(ep.z.row(t).to_vec()),
            });
        }
    }
    if transitions.is_empty() {
        return Err(KrcError::Contract("ensemble training needs at least one transition".to_string()));
    }
    let d_z = transitions[0].z_prev.len();
    let d_u = transitions[0].u.len();
    let streams = Streams::new(seed);
    let mut ens = Ensemble::init(d_z, d_u, cfg, &streams);
    ens.train(&transitions, &streams)?;
    Ok(ens)
}
