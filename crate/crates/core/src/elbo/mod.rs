//! The two variational training objectives and the training loop.
//!
//! Both objectives share one step loop: encode the input frame, score the
//! reconstruction against the target frame, assemble the observation
//! ỹ_t = [ã_t, b_t], and drive the mixture weights from the sampled
//! observations. With observed states the dynamics terms are evaluated
//! directly; with unobserved states a smoother draw z̃ ~ p(z | ỹ, u) replaces
//! them and the posterior log-density is subtracted.

mod batch;
mod model;
mod train;

pub use batch::elbo_batch_total;
pub use model::{fit_readout, FilteredEpisode, ModelCheckpoint, Readout};
pub use train::{input_of, train, train_ensemble_from_dataset, TrainConfig, TrainLogRow};

use crate::diffcore::{Binding, Tape, Var};
use crate::error::{KrcError, Result};
use crate::lgssm::{
    diag_gauss_loglik, drive_alphas, kalman_smooth, mix_all, transition_loglik,
    observation_loglik, BasisVars,
};
use crate::nets::{Decoder, Dpn, DpnProvider, EncSeq, Encoder};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElboVariant {
    Observed,
    Unobserved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    Randomized,
    Canonical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    Randomized,
    Canonical,
    Transparent,
}

/// One sequence's tensors, already resolved to the variant's image sources.
pub struct SeqData<'a> {
    /// encoder input frames (T, P_in)
    pub x_in: &'a Tensor,
    /// reconstruction targets (T, P_out)
    pub x_target: &'a Tensor,
    /// proprioception (T, d_b)
    pub b: &'a Tensor,
    /// observed states (T, d_z), required by the observed-state objective
    pub z: Option<&'a Tensor>,
    /// controls (T, d_u); u_1 only feeds the first mixture weight
    pub u: &'a Tensor,
}

impl<'a> SeqData<'a> {
    pub fn t_len(&self) -> usize {
        self.x_in.shape()[0]
    }
}

/// Feature extractor abstraction: the production implementation wraps the
/// encoder/decoder networks; oracle suites substitute linear-Gaussian or
/// pass-through variants to make the objectives exactly computable.
pub trait Rcan {
    fn encode_seq(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        frames: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<EncSeq>;

    fn recon_loglik(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        sample: Var,
        target: &Tensor,
    ) -> Result<Var>;
}

pub struct NetRcan<'a> {
    pub encoder: &'a Encoder,
    pub decoder: &'a Decoder,
}

impl Rcan for NetRcan<'_> {
    fn encode_seq(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        frames: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<EncSeq> {
        self.encoder.encode_seq(tape, binding, frames, rng)
    }

    fn recon_loglik(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        sample: Var,
        target: &Tensor,
    ) -> Result<Var> {
        self.decoder.recon_loglik(tape, binding, sample, target)
    }
}

fn rows_as_leaves(tape: &mut Tape, m: &Tensor) -> Vec<Var> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    (0..r)
        .map(|i| tape.leaf(Tensor::vector(m.data()[i * c..(i + 1) * c].to_vec())))
        .collect()
}

fn assemble_ys(tape: &mut Tape, sample: Var, b_rows: &[Var]) -> Result<Vec<Var>> {
    let t_len = b_rows.len();
    let mut ys = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let a_t = tape.row(sample, t)?;
        ys.push(tape.concat_vec(&[a_t, b_rows[t]])?);
    }
    Ok(ys)
}

fn average(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    if terms.len() == 1 {
        return Ok(terms[0]);
    }
    let stacked = tape.concat_vec(terms)?;
    tape.mean_all(stacked)
}

/// Monte Carlo estimate of the observed-state objective: for each of I
/// encoder draws, reconstruction minus encoder log-density plus the
/// observation terms, plus the complete-data dynamics terms; mixture weights
/// are driven by the sampled observations.
pub fn elbo_observed(
    tape: &mut Tape,
    rcan: &dyn Rcan,
    dpn: &Dpn,
    basis: &BasisVars,
    binding: &Binding,
    data: &SeqData,
    i_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if i_samples == 0 {
        return Err(KrcError::Contract("elbo needs I >= 1 samples".to_string()));
    }
    let z = data
        .z
        .ok_or_else(|| KrcError::Contract("observed-state objective needs states in the episode".to_string()))?;
    let t_len = data.t_len();
    let b_rows = rows_as_leaves(tape, data.b);
    let z_rows = rows_as_leaves(tape, z);
    let u_rows = rows_as_leaves(tape, data.u);

    let mut terms = Vec::with_capacity(i_samples);
    for _ in 0..i_samples {
        let enc = rcan.encode_seq(tape, binding, data.x_in, rng)?;
        let recon = rcan.recon_loglik(tape, binding, enc.sample, data.x_target)?;
        let mut total = tape.sub(recon, enc.logq)?;

        let ys = assemble_ys(tape, enc.sample, &b_rows)?;
        let mut provider = DpnProvider::new(tape, dpn, binding);
        let alphas = drive_alphas(tape, &mut provider, &ys, &u_rows)?;
        let mixed = mix_all(tape, &alphas, basis)?;

        let zero = tape.leaf(Tensor::zeros(vec![basis.dims.d_z]));
        let prior = diag_gauss_loglik(tape, z_rows[0], zero, basis.sigma)?;
        total = tape.add(total, prior)?;
        for t in 0..t_len {
            let yhat = tape.matvec(mixed[t].c, z_rows[t])?;
            let obs = diag_gauss_loglik(tape, ys[t], yhat, basis.r)?;
            total = tape.add(total, obs)?;
            if t >= 1 {
                let az = tape.matvec(mixed[t].a, z_rows[t - 1])?;
                let bu = tape.matvec(mixed[t].b, u_rows[t])?;
                let mean = tape.add(az, bu)?;
                let trans = diag_gauss_loglik(tape, z_rows[t], mean, basis.q)?;
                total = tape.add(total, trans)?;
            }
        }
        terms.push(total);
    }
    average(tape, &terms)
}

/// Monte Carlo estimate of the unobserved-state objective: per encoder draw,
/// run the smoother on ỹ = [ã, b], draw z̃ from the exact posterior, and
/// accumulate recon − log q + log p(ỹ|z̃) + log p(z̃|u) − log p(z̃|ỹ,u).
pub fn elbo_unobserved(
    tape: &mut Tape,
    rcan: &dyn Rcan,
    dpn: &Dpn,
    basis: &BasisVars,
    binding: &Binding,
    data: &SeqData,
    i_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if i_samples == 0 {
        return Err(KrcError::Contract("elbo needs I >= 1 samples".to_string()));
    }
    let b_rows = rows_as_leaves(tape, data.b);
    let u_rows = rows_as_leaves(tape, data.u);

    let mut terms = Vec::with_capacity(i_samples);
    for _ in 0..i_samples {
        let enc = rcan.encode_seq(tape, binding, data.x_in, rng)?;
        let recon = rcan.recon_loglik(tape, binding, enc.sample, data.x_target)?;
        let mut total = tape.sub(recon, enc.logq)?;

        let ys = assemble_ys(tape, enc.sample, &b_rows)?;
        let mut provider = DpnProvider::new(tape, dpn, binding);
        let alphas = drive_alphas(tape, &mut provider, &ys, &u_rows)?;
        let smooth = kalman_smooth(tape, &ys, &u_rows, &alphas, basis, Some(rng))?;

        let obs = observation_loglik(tape, &ys, &smooth.sample, &smooth.mixed, basis)?;
        let trans = transition_loglik(tape, &smooth.sample, &u_rows, &smooth.mixed, basis)?;
        total = tape.add(total, obs)?;
        total = tape.add(total, trans)?;
        total = tape.sub(total, smooth.sample_loglik.expect("smoother sampled"))?;
        terms.push(total);
    }
    average(tape, &terms)
}

/// The per-step contribution a perfectly reconstructed frame makes to the
/// reconstruction term (used by the additivity test and reporting).
pub fn perfect_frame_loglik(pixels: usize, sigma_x2: f64) -> f64 {
    -0.5 * pixels as f64 * (crate::tensor::LN_2PI + sigma_x2.ln())
}




#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_samples_is_a_contract_error() {
        let mut store = crate::diffcore::ParamStore::new();
        let dims = crate::nets::ModelDims {
            img_h: 2,
            img_w: 2,
            d_a: 2,
            d_b: 1,
            d_z: 2,
            d_u: 1,
            k: 1,
            enc_hidden: (4, 4),
            dec_hidden: (4, 4),
            dpn_hidden: 4,
        };
        let streams = crate::rng::Streams::new(0);
        let mut rng = streams.stream("init", 0);
        let enc = Encoder::init(&mut store, &dims, &mut rng);
        let dec = Decoder::init(&mut store, &dims, 0.01, &mut rng);
        let dpn = Dpn::init(&mut store, &dims, &mut rng);
        let basis = crate::lgssm::BasisParams::init(
            &mut store,
            crate::lgssm::SsmDims { d_z: 2, d_y: 3, d_u: 1, k: 1 },
            &mut rng,
        );
        let mut tape = Tape::new();
        let binding = Binding::bind_all(&store, &mut tape);
        let bvars = basis.bind(&mut tape, &binding).unwrap();
        let x = Tensor::zeros(vec![3, dims.pixels()]);
        let b = Tensor::zeros(vec![3, 1]);
        let z = Tensor::zeros(vec![3, 2]);
        let u = Tensor::zeros(vec![3, 1]);
        let data = SeqData { x_in: &x, x_target: &x, b: &b, z: Some(&z), u: &u };
        let rcan = NetRcan { encoder: &enc, decoder: &dec };
        let mut erng = streams.stream("eps", 0);
        let r = elbo_observed(&mut tape, &rcan, &dpn, &bvars, &binding, &data, 0, &mut erng);
        assert!(matches!(r, Err(KrcError::Contract(_))));
        let data2 = SeqData { x_in: &x, x_target: &x, b: &b, z: None, u: &u };
        let r2 = elbo_observed(&mut tape, &rcan, &dpn, &bvars, &binding, &data2, 1, &mut erng);
        assert!(matches!(r2, Err(KrcError::Contract(_))));
    }
}
