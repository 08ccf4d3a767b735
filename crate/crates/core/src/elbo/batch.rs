//! Batched objective evaluation: all episodes of a minibatch share one tape,
//! so the big dense products run once per batch and the weight matrices
//! stream once instead of once per episode. The math is the per-episode
//! objective summed; the sequential state-space terms still run per episode
//! over row slices of the shared encoding.

use super::{ElboVariant, Rcan, SeqData};
use crate::diffcore::{Binding, Tape, Var};
use crate::error::{KrcError, Result};
use crate::lgssm::{
    diag_gauss_loglik, drive_alphas, kalman_smooth, mix_all, observation_loglik, transition_loglik,
    BasisVars,
};
use crate::nets::{Dpn, DpnProvider};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

fn stack_rows_of(parts: &[&Tensor]) -> Result<Tensor> {
    let cols = parts[0].shape()[1];
    let rows: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        if p.shape()[1] != cols {
            return Err(KrcError::dim("stack", format!("{:?} vs {cols} cols", p.shape())));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(vec![rows, cols], data)
}

/// Sum of per-episode objective estimates over a batch, on one tape.
pub fn elbo_batch_total(
    tape: &mut Tape,
    rcan: &dyn Rcan,
    dpn: &Dpn,
    basis: &BasisVars,
    binding: &Binding,
    batch: &[SeqData],
    i_samples: usize,
    variant: ElboVariant,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if batch.is_empty() || i_samples == 0 {
        return Err(KrcError::Contract("batch objective needs episodes and I >= 1".to_string()));
    }
    if variant == ElboVariant::Observed {
        for (i, d) in batch.iter().enumerate() {
            if d.z.is_none() {
                return Err(KrcError::Contract(format!(
                    "observed-state objective needs states (episode {i} of the batch)"
                )));
            }
        }
    }

    let x_in = stack_rows_of(&batch.iter().map(|d| d.x_in).collect::<Vec<_>>())?;
    let x_target = stack_rows_of(&batch.iter().map(|d| d.x_target).collect::<Vec<_>>())?;
    let mut offsets = Vec::with_capacity(batch.len());
    let mut off = 0usize;
    for d in batch {
        offsets.push(off);
        off += d.t_len();
    }

    let mut terms = Vec::with_capacity(i_samples);
    for _ in 0..i_samples {
        let enc = rcan.encode_seq(tape, binding, &x_in, rng)?;
        let recon = rcan.recon_loglik(tape, binding, enc.sample, &x_target)?;
        let mut total = tape.sub(recon, enc.logq)?;

        for (ep_idx, data) in batch.iter().enumerate() {
            let t_len = data.t_len();
            let base = offsets[ep_idx];
            let mut ys = Vec::with_capacity(t_len);
            let mut us = Vec::with_capacity(t_len);
            for t in 0..t_len {
                let a_t = tape.row(enc.sample, base + t)?;
                let b_t = tape.leaf(Tensor::vector(data.b.row(t).to_vec()));
                ys.push(tape.concat_vec(&[a_t, b_t])?);
                us.push(tape.leaf(Tensor::vector(data.u.row(t).to_vec())));
            }
            let mut provider = DpnProvider::new(tape, dpn, binding);
            let alphas = drive_alphas(tape, &mut provider, &ys, &us)?;

            match variant {
                ElboVariant::Observed => {
                    let z = data.z.expect("checked above");
                    let z_rows: Vec<Var> =
                        (0..t_len).map(|t| tape.leaf(Tensor::vector(z.row(t).to_vec()))).collect();
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
                            let bu = tape.matvec(mixed[t].b, us[t])?;
                            let mean = tape.add(az, bu)?;
                            let trans = diag_gauss_loglik(tape, z_rows[t], mean, basis.q)?;
                            total = tape.add(total, trans)?;
                        }
                    }
                }
                ElboVariant::Unobserved => {
                    let smooth = kalman_smooth(tape, &ys, &us, &alphas, basis, Some(rng))?;
                    let obs = observation_loglik(tape, &ys, &smooth.sample, &smooth.mixed, basis)?;
                    let trans = transition_loglik(tape, &smooth.sample, &us, &smooth.mixed, basis)?;
                    total = tape.add(total, obs)?;
                    total = tape.add(total, trans)?;
                    total = tape.sub(total, smooth.sample_loglik.expect("smoother sampled"))?;
                }
            }
        }
        terms.push(total);
    }
    if terms.len() == 1 {
        Ok(terms[0])
    } else {
        let stacked = tape.concat_vec(&terms)?;
        let m = tape.mean_all(stacked)?;
        Ok(m)
    }
}
