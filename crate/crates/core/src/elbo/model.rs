//! The trainable model bundle: all learnable parameters plus the metadata
//! needed to reuse them (dimensions, config snapshot, training seed).

use crate::diffcore::{Binding, ParamStore, Tape};
use crate::error::{KrcError, Result};
use crate::lgssm::{self, BasisParams, SsmDims};
use crate::nets::{Decoder, Dpn, DpnProvider, Encoder, Ensemble, ModelDims};
use crate::rng::Streams;
use crate::tensor::Tensor;
use crate::valveworld::Episode;

/// Affine grounding ẑ_phys = G·m + g0 fitted after unobserved-state training;
/// observed-state models keep the identity (None).
#[derive(Debug, Clone)]
pub struct Readout {
    pub matrix: Tensor,
    pub bias: Tensor,
}

impl Readout {
    pub fn identity(d_z: usize) -> Readout {
        Readout { matrix: Tensor::eye(d_z), bias: Tensor::zeros(vec![d_z]) }
    }

    pub fn apply(&self, latent: &Tensor) -> Result<Tensor> {
        self.matrix.matvec(latent)?.add(&self.bias)
    }

    /// Pre-image of a physical state under the readout (least squares through
    /// the square matrix; falls back to the input when singular).
    pub fn invert(&self, physical: &Tensor) -> Tensor {
        let d = physical.len();
        let rhs = match physical.sub(&self.bias) {
            Ok(r) => r,
            Err(_) => return physical.clone(),
        };
        // solve G x = rhs via normal equations with a small ridge
        let gtg = match self.matrix.matmul_tn(&self.matrix) {
            Ok(m) => m,
            Err(_) => return physical.clone(),
        };
        let mut reg = gtg;
        for i in 0..d {
            let v = reg.at2(i, i) + 1e-9;
            reg.set2(i, i, v);
        }
        let gtr = match self.matrix.matvec_t(&rhs) {
            Ok(v) => v,
            Err(_) => return physical.clone(),
        };
        match reg.cholesky().and_then(|l| Tensor::chol_solve_vec(&l, &gtr)) {
            Ok(x) => x,
            Err(_) => physical.clone(),
        }
    }
}

/// All learnable parameters of one model: encoder, decoder, dynamics
/// parameter network (with its pseudo initial observation), basis matrices,
/// and noise terms, plus the optional planner ensemble and readout.
#[derive(Debug)]
pub struct ModelCheckpoint {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub dpn: Dpn,
    pub basis: BasisParams,
    pub dims: ModelDims,
    pub sigma_x2: f64,
    pub ensemble: Option<Ensemble>,
    pub readout: Option<Readout>,
    pub config_snapshot: String,
    pub seed: u64,
}

impl ModelCheckpoint {
    pub fn init(dims: ModelDims, sigma_x2: f64, seed: u64, config_snapshot: String) -> ModelCheckpoint {
        let streams = Streams::new(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::init(&mut store, &dims, &mut streams.stream("init-enc", 0));
        let decoder = Decoder::init(&mut store, &dims, sigma_x2, &mut streams.stream("init-dec", 0));
        let dpn = Dpn::init(&mut store, &dims, &mut streams.stream("init-dpn", 0));
        let basis = BasisParams::init(
            &mut store,
            SsmDims { d_z: dims.d_z, d_y: dims.d_y(), d_u: dims.d_u, k: dims.k },
            &mut streams.stream("init-basis", 0),
        );
        ModelCheckpoint {
            store,
            encoder,
            decoder,
            dpn,
            basis,
            dims,
            sigma_x2,
            ensemble: None,
            readout: None,
            config_snapshot,
            seed,
        }
    }

    pub fn effective_readout(&self) -> Readout {
        self.readout.clone().unwrap_or_else(|| Readout::identity(self.dims.d_z))
    }

    /// Filter an episode with the trained model (frozen tape, encoder means
    /// as features). Returns per-step filtered means, covariance traces, and
    /// the total observation log-likelihood.
    pub fn filter_episode(&self, episode: &Episode, x_in: &Tensor) -> Result<FilteredEpisode> {
        let mut tape = Tape::new();
        let binding = Binding::bind_all_frozen(&self.store, &mut tape);
        let basis = self.basis.bind(&mut tape, &binding)?;
        let mut rng = Streams::new(0).stream("unused", 0);
        let enc = self.encoder.encode_seq(&mut tape, &binding, x_in, &mut rng)?;
        let t_len = episode.t_len();
        let mut ys = Vec::with_capacity(t_len);
        let mut us = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let a_t = tape.row(enc.mean, t)?;
            let b_t = tape.leaf(Tensor::vector(episode.b.row(t).to_vec()));
            ys.push(tape.concat_vec(&[a_t, b_t])?);
            us.push(tape.leaf(Tensor::vector(episode.u.row(t).to_vec())));
        }
        let mut provider = DpnProvider::new(&mut tape, &self.dpn, &binding);
        let out = lgssm::kalman_filter_with_provider(&mut tape, &ys, &us, &mut provider, &basis)?;
        let means = out.beliefs.iter().map(|b| tape.value(b.mean).clone()).collect();
        let cov_traces = out
            .beliefs
            .iter()
            .map(|b| tape.value(b.cov).trace())
            .collect::<Result<Vec<f64>>>()?;
        let loglik = tape.value(out.loglik).item()?;
        Ok(FilteredEpisode { means, cov_traces, loglik })
    }

    /// Mean per-step L2 error between readout-grounded filtered means and the
    /// true states, over a set of episodes.
    pub fn state_estimation_error(&self, episodes: &[Episode], input: impl Fn(&Episode) -> Tensor) -> Result<f64> {
        let readout = self.effective_readout();
        let mut total = 0.0;
        let mut n = 0usize;
        for ep in episodes {
            let filtered = self.filter_episode(ep, &input(ep))?;
            for (t, m) in filtered.means.iter().enumerate() {
                let grounded = readout.apply(m)?;
                let z = Tensor::vector(ep.z.row(t).to_vec());
                let d = grounded.sub(&z)?;
                total += d.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                n += 1;
            }
        }
        Ok(total / n as f64)
    }
}

pub struct FilteredEpisode {
    pub means: Vec<Tensor>,
    pub cov_traces: Vec<f64>,
    pub loglik: f64,
}

/// Ridge least-squares fit of the affine readout from filtered latent means
/// to true states over a dataset.
pub fn fit_readout(model: &ModelCheckpoint, episodes: &[Episode], input: impl Fn(&Episode) -> Tensor) -> Result<Readout> {
    let d_z = model.dims.d_z;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<Vec<f64>> = Vec::new();
    for ep in episodes {
        let filtered = model.filter_episode(ep, &input(ep))?;
        for (t, m) in filtered.means.iter().enumerate() {
            let mut row = m.data().to_vec();
            row.push(1.0);
            rows.push(row);
            targets.push(ep.z.row(t).to_vec());
        }
    }
    if rows.is_empty() {
        return Err(KrcError::Contract("readout fit needs at least one step".to_string()));
    }
    let n = rows.len();
    let d_aug = d_z + 1;
    let x = Tensor::from_vec(vec![n, d_aug], rows.into_iter().flatten().collect())?;
    let t = Tensor::from_vec(vec![n, d_z], targets.into_iter().flatten().collect())?;
    let mut xtx = x.matmul_tn(&x)?;
    for i in 0..d_aug {
        let v = xtx.at2(i, i) + 1e-6;
        xtx.set2(i, i, v);
    }
    let xtt = x.matmul_tn(&t)?; // (d_aug, d_z)
    let l = xtx.cholesky()?;
    let sol = Tensor::chol_solve_mat(&l, &xtt)?; // (d_aug, d_z): columns are per-output weights
    let mut matrix = Tensor::zeros(vec![d_z, d_z]);
    let mut bias = Tensor::zeros(vec![d_z]);
    for out in 0..d_z {
        for inp in 0..d_z {
            matrix.set2(out, inp, sol.at2(inp, out));
        }
        bias.data_mut()[out] = sol.at2(d_z, out);
    }
    Ok(Readout { matrix, bias })
}
