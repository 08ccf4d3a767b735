//! Time-varying linear-Gaussian state-space model: mixture parameter
//! assembly, Kalman filter, Rauch–Tung–Striebel smoother, and the exact
//! Gaussian log-likelihood terms. Everything here runs on the tape, so all
//! outputs are differentiable w.r.t. the basis matrices and noise parameters.
//!
//! Conventions: a sequence has steps t = 1..T. The transition into step t
//! consumes control u_t, so u_1 feeds only the first mixture weight (there is
//! no transition into t = 1; the initial state is N(0, Σ)). Mixture weights
//! α_t come from an [`AlphaProvider`], which owns the observation history.

use crate::diffcore::{Binding, ParamId, ParamStore, Tape, Var};
use crate::error::{KrcError, Result};
use crate::tensor::{Tensor, LN_2PI};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const NOISE_FLOOR: f64 = 1e-6;

/// Inverse softplus, for initializing raw noise parameters.
pub fn softplus_inv(y: f64) -> f64 {
    (y.exp_m1()).ln()
}

/// log N(x | mean, diag(var)); all vectors.
pub fn diag_gauss_loglik(tape: &mut Tape, x: Var, mean: Var, var: Var) -> Result<Var> {
    let n = tape.value(x).len() as f64;
    let d = tape.sub(x, mean)?;
    let d2 = tape.square(d)?;
    let inv = tape.recip(var)?;
    let quad = tape.mul(d2, inv)?;
    let quad = tape.sum_all(quad)?;
    let ld = tape.log(var)?;
    let ld = tape.sum_all(ld)?;
    let s = tape.add(quad, ld)?;
    let s = tape.add_scalar(s, n * LN_2PI)?;
    tape.scale(s, -0.5)
}

/// log N(x | mean, cov) with full covariance.
pub fn full_gauss_loglik(tape: &mut Tape, x: Var, mean: Var, cov: Var) -> Result<Var> {
    let n = tape.value(x).len() as f64;
    let d = tape.sub(x, mean)?;
    let sol = tape.chol_solve_vec(cov, d)?;
    let quad = tape.dot(d, sol)?;
    let ld = tape.logdet(cov)?;
    let s = tape.add(quad, ld)?;
    let s = tape.add_scalar(s, n * LN_2PI)?;
    tape.scale(s, -0.5)
}

fn symmetrize(tape: &mut Tape, m: Var) -> Result<Var> {
    let mt = tape.transpose(m)?;
    let s = tape.add(m, mt)?;
    tape.scale(s, 0.5)
}

// ---- basis parameters -------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SsmDims {
    pub d_z: usize,
    pub d_y: usize,
    pub d_u: usize,
    pub k: usize,
}

/// Parameter-store handles for the K basis triples and the noise terms.
/// Q, R, Σ are diagonal with softplus-floored entries.
#[derive(Debug, Clone)]
pub struct BasisParams {
    pub a: Vec<ParamId>,
    pub b: Vec<ParamId>,
    pub c: Vec<ParamId>,
    pub q_raw: ParamId,
    pub r_raw: ParamId,
    pub sigma_raw: ParamId,
    pub dims: SsmDims,
}

impl BasisParams {
    /// A starts at the identity per basis (plus a small seed-dependent
    /// perturbation so the bases are distinguishable), B and C small random.
    /// Σ starts at I, Q and R at 0.1·I.
    pub fn init(store: &mut ParamStore, dims: SsmDims, rng: &mut ChaCha8Rng) -> BasisParams {
        let SsmDims { d_z, d_y, d_u, k } = dims;
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut c = Vec::new();
        for ki in 0..k {
            let mut am = Tensor::eye(d_z);
            for v in am.data_mut() {
                *v += 0.02 * rng.gen_range(-1.0..1.0);
            }
            a.push(store.add(format!("basis.a.{ki}"), am));
            let bm = Tensor::from_vec(
                vec![d_z, d_u],
                (0..d_z * d_u).map(|_| 0.05 * rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            b.push(store.add(format!("basis.b.{ki}"), bm));
            let cm = Tensor::from_vec(
                vec![d_y, d_z],
                (0..d_y * d_z).map(|_| 0.3 * rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            c.push(store.add(format!("basis.c.{ki}"), cm));
        }
        let q_raw = store.add("basis.q_raw", Tensor::filled(vec![d_z], softplus_inv(0.1)));
        let r_raw = store.add("basis.r_raw", Tensor::filled(vec![d_y], softplus_inv(0.1)));
        let sigma_raw = store.add("basis.sigma_raw", Tensor::filled(vec![d_z], softplus_inv(1.0)));
        BasisParams { a, b, c, q_raw, r_raw, sigma_raw, dims }
    }

    pub fn bind(&self, tape: &mut Tape, binding: &Binding) -> Result<BasisVars> {
        let SsmDims { d_z, d_y, d_u, k } = self.dims;
        let mut rows_a = Vec::new();
        let mut rows_b = Vec::new();
        let mut rows_c = Vec::new();
        for ki in 0..k {
            rows_a.push(tape.reshape(binding.var(self.a[ki]), vec![d_z * d_z])?);
            rows_b.push(tape.reshape(binding.var(self.b[ki]), vec![d_z * d_u])?);
            rows_c.push(tape.reshape(binding.var(self.c[ki]), vec![d_y * d_z])?);
        }
        let floor = |tape: &mut Tape, raw: Var| -> Result<Var> {
            let sp = tape.softplus(raw)?;
            tape.add_scalar(sp, NOISE_FLOOR)
        };
        let q = floor(tape, binding.var(self.q_raw))?;
        let r = floor(tape, binding.var(self.r_raw))?;
        let sigma = floor(tape, binding.var(self.sigma_raw))?;
        Ok(BasisVars {
            a_stack: tape.stack_rows(&rows_a)?,
            b_stack: tape.stack_rows(&rows_b)?,
            c_stack: tape.stack_rows(&rows_c)?,
            q,
            r,
            sigma,
            dims: self.dims,
        })
    }
}

/// Tape-bound basis: each stack holds the K flattened matrices as rows, so a
/// mixture is one (1,K)·(K,·) product.
pub struct BasisVars {
    pub a_stack: Var,
    pub b_stack: Var,
    pub c_stack: Var,
    /// diagonal of Q (softplus-floored)
    pub q: Var,
    /// diagonal of R
    pub r: Var,
    /// diagonal of Σ (initial covariance)
    pub sigma: Var,
    pub dims: SsmDims,
}

/// Convex combination of the basis under simplex weights α.
pub struct Mixed {
    pub a: Var,
    pub b: Var,
    pub c: Var,
}

pub fn mix_params(tape: &mut Tape, alpha: Var, basis: &BasisVars) -> Result<Mixed> {
    let SsmDims { d_z, d_y, d_u, k } = basis.dims;
    if tape.value(alpha).len() != k {
        return Err(KrcError::dim(
            "mix_params",
            format!("alpha length {} but K = {}", tape.value(alpha).len(), k),
        ));
    }
    let row = tape.reshape(alpha, vec![1, k])?;
    let a = tape.matmul(row, basis.a_stack)?;
    let a = tape.reshape(a, vec![d_z, d_z])?;
    let b = tape.matmul(row, basis.b_stack)?;
    let b = tape.reshape(b, vec![d_z, d_u])?;
    let c = tape.matmul(row, basis.c_stack)?;
    let c = tape.reshape(c, vec![d_y, d_z])?;
    Ok(Mixed { a, b, c })
}

// ---- beliefs ------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct Belief {
    pub mean: Var,
    pub cov: Var,
}

/// Prior belief N(0, Σ).
pub fn initial_belief(tape: &mut Tape, basis: &BasisVars) -> Result<Belief> {
    let mean = tape.leaf(Tensor::zeros(vec![basis.dims.d_z]));
    let cov = tape.diag_embed(basis.sigma)?;
    Ok(Belief { mean, cov })
}

/// Time update: mean ← A·mean + B·u, cov ← A·cov·Aᵀ + Q.
pub fn kf_predict(tape: &mut Tape, belief: &Belief, mixed: &Mixed, u: Var, basis: &BasisVars) -> Result<Belief> {
    let am = tape.matvec(mixed.a, belief.mean)?;
    let bu = tape.matvec(mixed.b, u)?;
    let mean = tape.add(am, bu)?;
    let ap = tape.matmul(mixed.a, belief.cov)?;
    let apa = tape.matmul_nt(ap, mixed.a)?;
    let q = tape.diag_embed(basis.q)?;
    let cov = tape.add(apa, q)?;
    let cov = symmetrize(tape, cov)?;
    Ok(Belief { mean, cov })
}

/// Measurement update with Joseph-form covariance. Returns the posterior and
/// the step log-likelihood log N(y | C·mean, C·cov·Cᵀ + R).
pub fn kf_update(tape: &mut Tape, belief: &Belief, mixed: &Mixed, y: Var, basis: &BasisVars) -> Result<(Belief, Var)> {
    let d_z = basis.dims.d_z;
    let yhat = tape.matvec(mixed.c, belief.mean)?;
    let innov = tape.sub(y, yhat)?;

    let cp = tape.matmul(mixed.c, belief.cov)?; // (dy,dz)
    let cpc = tape.matmul_nt(cp, mixed.c)?;
    let r = tape.diag_embed(basis.r)?;
    let s = tape.add(cpc, r)?;
    let s = symmetrize(tape, s)?;

    let loglik = full_gauss_loglik(tape, y, yhat, s)?;

    // gain K = cov·Cᵀ·S⁻¹ = (S⁻¹·C·cov)ᵀ, using symmetry of cov
    let sol = tape.chol_solve_mat(s, cp)?;
    let gain = tape.transpose(sol)?; // (dz,dy)

    let corr = tape.matvec(gain, innov)?;
    let mean = tape.add(belief.mean, corr)?;

    let kc = tape.matmul(gain, mixed.c)?;
    let eye = tape.leaf(Tensor::eye(d_z));
    let ikc = tape.sub(eye, kc)?;
    let p1 = tape.matmul(ikc, belief.cov)?;
    let p1 = tape.matmul_nt(p1, ikc)?;
    let kr = tape.matmul(gain, r)?;
    let krk = tape.matmul_nt(kr, gain)?;
    let cov = tape.add(p1, krk)?;
    let cov = symmetrize(tape, cov)?;

    Ok((Belief { mean, cov }, loglik))
}

// ---- mixture-weight providers -------------------------------------------------

/// Produces α_t for consecutive steps. The provider owns the observation
/// history: `y_prev` is the observation revealed after the previous step
/// (None at t = 1, where implementations fall back to their pseudo initial
/// observation).
pub trait AlphaProvider {
    fn next_alpha(&mut self, tape: &mut Tape, y_prev: Option<Var>, u_t: Var) -> Result<Var>;
}

/// Fixed weight sequence, for tests and oracles.
pub struct FixedAlphas {
    pub seq: Vec<Tensor>,
    pub t: usize,
}

impl FixedAlphas {
    pub fn new(seq: Vec<Tensor>) -> FixedAlphas {
        FixedAlphas { seq, t: 0 }
    }

    /// K = 1 degenerate provider: α = [1] forever.
    pub fn constant_one(t_max: usize) -> FixedAlphas {
        FixedAlphas::new(vec![Tensor::vector(vec![1.0]); t_max])
    }
}

impl AlphaProvider for FixedAlphas {
    fn next_alpha(&mut self, tape: &mut Tape, _y_prev: Option<Var>, _u_t: Var) -> Result<Var> {
        let a = self.seq[self.t].clone();
        self.t += 1;
        Ok(tape.leaf(a))
    }
}

/// Run a provider over an observed sequence, yielding α_1..α_T.
pub fn drive_alphas(
    tape: &mut Tape,
    provider: &mut dyn AlphaProvider,
    ys: &[Var],
    us: &[Var],
) -> Result<Vec<Var>> {
    let t_len = us.len();
    let mut alphas = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let y_prev = if t == 0 { None } else { Some(ys[t - 1]) };
        alphas.push(provider.next_alpha(tape, y_prev, us[t])?);
    }
    Ok(alphas)
}

// ---- filter ---------------------------------------------------------------------

pub struct FilterOut {
    pub beliefs: Vec<Belief>,
    /// Exact log p(y_{1:T} | u) as the sum of step terms.
    pub loglik: Var,
    pub mixed: Vec<Mixed>,
    /// Predicted (prior-to-update) beliefs per step; index 0 is the initial prior.
    pub predicted: Vec<Belief>,
}

/// Kalman filter from the standard prior N(0, Σ).
pub fn kalman_filter(
    tape: &mut Tape,
    ys: &[Var],
    us: &[Var],
    alphas: &[Var],
    basis: &BasisVars,
) -> Result<FilterOut> {
    let prior = initial_belief(tape, basis)?;
    kalman_filter_from(tape, prior, ys, us, alphas, basis)
}

/// Kalman filter warm-started from an arbitrary belief. The first step does
/// no time update (the given belief is the prior for y at the first index);
/// subsequent steps interleave predict and update.
pub fn kalman_filter_from(
    tape: &mut Tape,
    init: Belief,
    ys: &[Var],
    us: &[Var],
    alphas: &[Var],
    basis: &BasisVars,
) -> Result<FilterOut> {
    let t_len = ys.len();
    if us.len() != t_len || alphas.len() != t_len {
        return Err(KrcError::dim(
            "kalman_filter",
            format!("lengths y={} u={} alpha={}", t_len, us.len(), alphas.len()),
        ));
    }
    let mut beliefs = Vec::with_capacity(t_len);
    let mut predicted = Vec::with_capacity(t_len);
    let mut mixed_all = Vec::with_capacity(t_len);
    let mut total: Option<Var> = None;
    let mut cur = init;
    for t in 0..t_len {
        let mixed = mix_params(tape, alphas[t], basis)?;
        if t > 0 {
            cur = kf_predict(tape, &cur, &mixed, us[t], basis)?;
        }
        predicted.push(cur);
        let (post, ll) = kf_update(tape, &cur, &mixed, ys[t], basis)?;
        cur = post;
        beliefs.push(cur);
        mixed_all.push(mixed);
        total = Some(match total {
            None => ll,
            Some(acc) => tape.add(acc, ll)?,
        });
    }
    Ok(FilterOut { beliefs, loglik: total.expect("empty sequence"), mixed: mixed_all, predicted })
}

/// Convenience wrapper driving the mixture weights from a provider.
pub fn kalman_filter_with_provider(
    tape: &mut Tape,
    ys: &[Var],
    us: &[Var],
    provider: &mut dyn AlphaProvider,
    basis: &BasisVars,
) -> Result<FilterOut> {
    let alphas = drive_alphas(tape, provider, ys, us)?;
    kalman_filter(tape, ys, us, &alphas, basis)
}

// ---- smoother --------------------------------------------------------------------

pub struct SmoothOut {
    pub filtered: Vec<Belief>,
    /// RTS marginals N(m̂_t, V̂_t).
    pub smoothed: Vec<Belief>,
    /// Trajectory drawn backward from the exact posterior (empty without rng).
    pub sample: Vec<Var>,
    /// log p(z̃ | y, u) of the drawn trajectory.
    pub sample_loglik: Option<Var>,
    pub loglik: Var,
    pub mixed: Vec<Mixed>,
}

/// RTS smoother over a filtered pass, with optional ancestor sampling of a
/// full trajectory from the exact posterior (reparameterized, differentiable).
pub fn kalman_smooth(
    tape: &mut Tape,
    ys: &[Var],
    us: &[Var],
    alphas: &[Var],
    basis: &BasisVars,
    mut sample_rng: Option<&mut ChaCha8Rng>,
) -> Result<SmoothOut> {
    let filter = kalman_filter(tape, ys, us, alphas, basis)?;
    let t_len = ys.len();
    let d_z = basis.dims.d_z;

    // gains G_t = P_t|t A_{t+1}ᵀ (P_{t+1|t})⁻¹ for t = 1..T-1
    let mut gains: Vec<Var> = Vec::with_capacity(t_len.saturating_sub(1));
    for t in 0..t_len.saturating_sub(1) {
        let ap = tape.matmul(filter.mixed[t + 1].a, filter.beliefs[t].cov)?; // (dz,dz)
        let sol = tape.chol_solve_mat(filter.predicted[t + 1].cov, ap)?;
        gains.push(tape.transpose(sol)?);
    }

    let mut smoothed: Vec<Option<Belief>> = vec![None; t_len];
    smoothed[t_len - 1] = Some(filter.beliefs[t_len - 1]);
    for t in (0..t_len.saturating_sub(1)).rev() {
        let next = smoothed[t + 1].unwrap();
        let dm = tape.sub(next.mean, filter.predicted[t + 1].mean)?;
        let corr = tape.matvec(gains[t], dm)?;
        let mean = tape.add(filter.beliefs[t].mean, corr)?;
        let dv = tape.sub(next.cov, filter.predicted[t + 1].cov)?;
        let gv = tape.matmul(gains[t], dv)?;
        let gvg = tape.matmul_nt(gv, gains[t])?;
        let cov = tape.add(filter.beliefs[t].cov, gvg)?;
        let cov = symmetrize(tape, cov)?;
        smoothed[t] = Some(Belief { mean, cov });
    }
    let smoothed: Vec<Belief> = smoothed.into_iter().map(|b| b.unwrap()).collect();

    let mut sample = Vec::new();
    let mut sample_loglik = None;
    if let Some(rng) = sample_rng.as_deref_mut() {
        // tiny diagonal jitter keeps the conditional factorizations positive
        // definite under roundoff
        let jitter = tape.leaf(Tensor::diag_from(&vec![1e-12; d_z]));
        let draw = |tape: &mut Tape, mean: Var, cov: Var, rng: &mut ChaCha8Rng| -> Result<(Var, Var)> {
            let cov_j = tape.add(cov, jitter)?;
            let l = tape.cholesky(cov_j)?;
            let eps = Tensor::vector((0..d_z).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
            let eps = tape.leaf(eps);
            let le = tape.matvec(l, eps)?;
            let z = tape.add(mean, le)?;
            let ll = full_gauss_loglik(tape, z, mean, cov_j)?;
            Ok((z, ll))
        };

        let last = filter.beliefs[t_len - 1];
        let (z_t, ll_t) = draw(tape, last.mean, last.cov, rng)?;
        let mut draws = vec![z_t];
        let mut total_ll = ll_t;
        for t in (0..t_len.saturating_sub(1)).rev() {
            let z_next = *draws.last().unwrap();
            let dm = tape.sub(z_next, filter.predicted[t + 1].mean)?;
            let corr = tape.matvec(gains[t], dm)?;
            let mean = tape.add(filter.beliefs[t].mean, corr)?;
            let gp = tape.matmul(gains[t], filter.predicted[t + 1].cov)?;
            let gpg = tape.matmul_nt(gp, gains[t])?;
            let cov = tape.sub(filter.beliefs[t].cov, gpg)?;
            let cov = symmetrize(tape, cov)?;
            let (z, ll) = draw(tape, mean, cov, rng)?;
            draws.push(z);
            total_ll = tape.add(total_ll, ll)?;
        }
        draws.reverse();
        sample = draws;
        sample_loglik = Some(total_ll);
    }

    Ok(SmoothOut {
        filtered: filter.beliefs,
        smoothed,
        sample,
        sample_loglik,
        loglik: filter.loglik,
        mixed: filter.mixed,
    })
}

/// Convenience wrapper driving the mixture weights from a provider.
pub fn kalman_smooth_with_provider(
    tape: &mut Tape,
    ys: &[Var],
    us: &[Var],
    provider: &mut dyn AlphaProvider,
    basis: &BasisVars,
    sample_rng: Option<&mut ChaCha8Rng>,
) -> Result<SmoothOut> {
    let alphas = drive_alphas(tape, provider, ys, us)?;
    kalman_smooth(tape, ys, us, &alphas, basis, sample_rng)
}

// ---- complete-data log-likelihoods ----------------------------------------------

/// log p(z_1) + Σ_{t≥2} log N(z_t | A_t z_{t-1} + B_t u_t, Q).
pub fn transition_loglik(
    tape: &mut Tape,
    zs: &[Var],
    us: &[Var],
    alphas_mixed: &[Mixed],
    basis: &BasisVars,
) -> Result<Var> {
    let zero = tape.leaf(Tensor::zeros(vec![basis.dims.d_z]));
    let mut total = diag_gauss_loglik(tape, zs[0], zero, basis.sigma)?;
    for t in 1..zs.len() {
        let az = tape.matvec(alphas_mixed[t].a, zs[t - 1])?;
        let bu = tape.matvec(alphas_mixed[t].b, us[t])?;
        let mean = tape.add(az, bu)?;
        let ll = diag_gauss_loglik(tape, zs[t], mean, basis.q)?;
        total = tape.add(total, ll)?;
    }
    Ok(total)
}

/// Σ_t log N(y_t | C_t z_t, R).
pub fn observation_loglik(
    tape: &mut Tape,
    ys: &[Var],
    zs: &[Var],
    alphas_mixed: &[Mixed],
    basis: &BasisVars,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for t in 0..ys.len() {
        let mean = tape.matvec(alphas_mixed[t].c, zs[t])?;
        let ll = diag_gauss_loglik(tape, ys[t], mean, basis.r)?;
        total = Some(match total {
            None => ll,
            Some(acc) => tape.add(acc, ll)?,
        });
    }
    Ok(total.expect("empty sequence"))
}

/// Materialize mixed parameters for a whole weight sequence.
pub fn mix_all(tape: &mut Tape, alphas: &[Var], basis: &BasisVars) -> Result<Vec<Mixed>> {
    alphas.iter().map(|a| mix_params(tape, *a, basis)).collect()
}
