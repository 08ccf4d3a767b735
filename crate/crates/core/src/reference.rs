//! Slow reference implementations used by the test and acceptance suites.
//!
//! Everything in here works on the dense joint Gaussian of a linear-Gaussian
//! chain and deliberately shares no code with the filter/smoother in
//! [`crate::lgssm`]: posteriors come from brute-force conditioning of the
//! stacked joint covariance, marginal likelihoods from a dense log-pdf.

use crate::error::Result;
use crate::tensor::{gaussian_logpdf, Tensor};

/// A fully explicit time-varying linear-Gaussian model: per-step matrices,
/// diagonal noise. `a[0]` and `b[0]` are unused (no transition into t = 1).
pub struct ExplicitLgssm {
    pub a: Vec<Tensor>,
    pub b: Vec<Tensor>,
    pub c: Vec<Tensor>,
    /// diagonal of the process noise Q
    pub q: Vec<f64>,
    /// diagonal of the observation noise R
    pub r: Vec<f64>,
    /// diagonal of the initial covariance Σ
    pub sigma: Vec<f64>,
}

pub struct JointGaussian {
    pub d_z: usize,
    pub d_y: usize,
    pub t_len: usize,
    /// stacked state mean (T·d_z)
    pub mean_z: Tensor,
    /// stacked observation mean (T·d_y)
    pub mean_y: Tensor,
    /// (T·d_z, T·d_z)
    pub cov_zz: Tensor,
    /// (T·d_z, T·d_y)
    pub cov_zy: Tensor,
    /// (T·d_y, T·d_y)
    pub cov_yy: Tensor,
}

impl ExplicitLgssm {
    pub fn joint(&self, us: &[Tensor]) -> Result<JointGaussian> {
        let t_len = us.len();
        let d_z = self.sigma.len();
        let d_y = self.r.len();

        let mut means: Vec<Tensor> = Vec::with_capacity(t_len);
        means.push(Tensor::zeros(vec![d_z]));
        for t in 1..t_len {
            let m = self.a[t].matvec(&means[t - 1])?.add(&self.b[t].matvec(&us[t])?)?;
            means.push(m);
        }

        // state covariance blocks S[s][t] for s <= t
        let mut blocks: Vec<Vec<Tensor>> = vec![vec![Tensor::zeros(vec![d_z, d_z]); t_len]; t_len];
        blocks[0][0] = Tensor::diag_from(&self.sigma);
        for t in 1..t_len {
            let prev = blocks[t - 1][t - 1].clone();
            let apa = self.a[t].matmul(&prev)?.matmul_nt(&self.a[t])?;
            blocks[t][t] = apa.add(&Tensor::diag_from(&self.q))?.symmetrized()?;
            for s in 0..t {
                blocks[s][t] = blocks[s][t - 1].matmul_nt(&self.a[t])?;
            }
        }
        let block = |s: usize, t: usize| -> Result<Tensor> {
            if s <= t {
                Ok(blocks[s][t].clone())
            } else {
                blocks[t][s].transpose()
            }
        };

        let mut mean_z = Tensor::zeros(vec![t_len * d_z]);
        let mut mean_y = Tensor::zeros(vec![t_len * d_y]);
        for t in 0..t_len {
            mean_z.data_mut()[t * d_z..(t + 1) * d_z].copy_from_slice(means[t].data());
            let my = self.c[t].matvec(&means[t])?;
            mean_y.data_mut()[t * d_y..(t + 1) * d_y].copy_from_slice(my.data());
        }

        let mut cov_zz = Tensor::zeros(vec![t_len * d_z, t_len * d_z]);
        let mut cov_zy = Tensor::zeros(vec![t_len * d_z, t_len * d_y]);
        let mut cov_yy = Tensor::zeros(vec![t_len * d_y, t_len * d_y]);
        for s in 0..t_len {
            for t in 0..t_len {
                let szt = block(s, t)?;
                for i in 0..d_z {
                    for j in 0..d_z {
                        cov_zz.set2(s * d_z + i, t * d_z + j, szt.at2(i, j));
                    }
                }
                let zy = szt.matmul_nt(&self.c[t])?;
                for i in 0..d_z {
                    for j in 0..d_y {
                        cov_zy.set2(s * d_z + i, t * d_y + j, zy.at2(i, j));
                    }
                }
                let mut yy = self.c[s].matmul(&szt)?.matmul_nt(&self.c[t])?;
                if s == t {
                    yy = yy.add(&Tensor::diag_from(&self.r))?;
                }
                for i in 0..d_y {
                    for j in 0..d_y {
                        cov_yy.set2(s * d_y + i, t * d_y + j, yy.at2(i, j));
                    }
                }
            }
        }
        Ok(JointGaussian { d_z, d_y, t_len, mean_z, mean_y, cov_zz, cov_zy, cov_yy })
    }

    /// Exact log p(y_{1:T} | u) from the dense joint.
    pub fn loglik(&self, ys: &[Tensor], us: &[Tensor]) -> Result<f64> {
        let joint = self.joint(us)?;
        let y = stack(ys);
        gaussian_logpdf(&y, &joint.mean_y, &joint.cov_yy.symmetrized()?)
    }

    /// Per-step posterior means and covariances of z given all observations,
    /// by conditioning the dense joint Gaussian.
    pub fn posterior(&self, ys: &[Tensor], us: &[Tensor]) -> Result<Vec<(Tensor, Tensor)>> {
        let joint = self.joint(us)?;
        let y = stack(ys);
        let l = joint.cov_yy.symmetrized()?.cholesky()?;
        let resid = y.sub(&joint.mean_y)?;
        let w = Tensor::chol_solve_vec(&l, &resid)?;
        let mean = joint.mean_z.add(&joint.cov_zy.matvec(&w)?)?;
        // cov = Σzz − Σzy Σyy⁻¹ Σzyᵀ
        let sol = Tensor::chol_solve_mat(&l, &joint.cov_zy.transpose()?)?;
        let cov = joint.cov_zz.sub(&joint.cov_zy.matmul(&sol)?)?;
        let d_z = joint.d_z;
        let mut out = Vec::with_capacity(joint.t_len);
        for t in 0..joint.t_len {
            let m = Tensor::vector(mean.data()[t * d_z..(t + 1) * d_z].to_vec());
            let mut c = Tensor::zeros(vec![d_z, d_z]);
            for i in 0..d_z {
                for j in 0..d_z {
                    c.set2(i, j, cov.at2(t * d_z + i, t * d_z + j));
                }
            }
            out.push((m, c.symmetrized()?));
        }
        Ok(out)
    }

    /// Draw one trajectory and its observations.
    pub fn simulate(&self, us: &[Tensor], rng: &mut rand_chacha::ChaCha8Rng) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let t_len = us.len();
        let mut zs = Vec::with_capacity(t_len);
        let mut ys = Vec::with_capacity(t_len);
        let mut noise = |scale: &[f64]| -> Tensor {
            Tensor::vector(scale.iter().map(|s| s.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect())
        };
        for t in 0..t_len {
            let z = if t == 0 {
                noise(&self.sigma)
            } else {
                self.a[t]
                    .matvec(&zs[t - 1])?
                    .add(&self.b[t].matvec(&us[t])?)?
                    .add(&noise(&self.q))?
            };
            let y = self.c[t].matvec(&z)?.add(&noise(&self.r))?;
            zs.push(z);
            ys.push(y);
        }
        Ok((zs, ys))
    }
}

pub fn stack(parts: &[Tensor]) -> Tensor {
    let mut data = Vec::new();
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::vector(data)
}

// ---- linear-Gaussian surrogate for the variational objectives --------------------

use crate::diffcore::{Binding, Tape, Var};
use crate::elbo::SeqData;
use crate::nets::EncSeq;
use crate::tensor::LN_2PI;

/// Fully linear-Gaussian feature extractor: encoder a|x ~ N(Ex+e, diag s),
/// decoder x|a ~ N(Da+d, σ²I). With a K = 1 state-space model the whole
/// generative model is jointly Gaussian, so the evidence and the expected
/// objective have closed forms. Implements the same trait the production
/// networks implement, so the Monte Carlo estimators run unmodified.
pub struct LinearSurrogate {
    pub enc_w: Tensor,
    pub enc_b: Tensor,
    /// encoder variance diagonal
    pub enc_s: Vec<f64>,
    pub dec_w: Tensor,
    pub dec_b: Tensor,
    pub sigma_x2: f64,
}

impl crate::elbo::Rcan for LinearSurrogate {
    fn encode_seq(
        &self,
        tape: &mut Tape,
        _binding: &Binding,
        frames: &Tensor,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> crate::error::Result<EncSeq> {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let t_len = frames.shape()[0];
        let d_a = self.enc_b.len();
        let x = tape.leaf(frames.clone());
        let w = tape.leaf(self.enc_w.clone());
        let b = tape.leaf(self.enc_b.clone());
        let xw = tape.matmul_nt(x, w)?;
        let mean = tape.add(xw, b)?;
        let mut var_data = Vec::with_capacity(t_len * d_a);
        for _ in 0..t_len {
            var_data.extend_from_slice(&self.enc_s);
        }
        let var = tape.leaf(Tensor::from_vec(vec![t_len, d_a], var_data)?);
        let std = tape.sqrt(var)?;
        let eps = Tensor::from_vec(
            vec![t_len, d_a],
            (0..t_len * d_a).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        )?;
        let eps = tape.leaf(eps);
        let noise = tape.mul(std, eps)?;
        let sample = tape.add(mean, noise)?;
        let d = tape.sub(sample, mean)?;
        let d2 = tape.square(d)?;
        let inv = tape.recip(var)?;
        let quad = tape.mul(d2, inv)?;
        let quad = tape.sum_all(quad)?;
        let ld = tape.log(var)?;
        let ld = tape.sum_all(ld)?;
        let s = tape.add(quad, ld)?;
        let s = tape.add_scalar(s, (t_len * d_a) as f64 * LN_2PI)?;
        let logq = tape.scale(s, -0.5)?;
        Ok(EncSeq { mean, var, sample, logq })
    }

    fn recon_loglik(
        &self,
        tape: &mut Tape,
        _binding: &Binding,
        sample: Var,
        target: &Tensor,
    ) -> crate::error::Result<Var> {
        let t_len = target.shape()[0];
        let p = target.shape()[1];
        let w = tape.leaf(self.dec_w.clone());
        let b = tape.leaf(self.dec_b.clone());
        let aw = tape.matmul_nt(sample, w)?;
        let mu = tape.add(aw, b)?;
        let tgt = tape.leaf(target.clone());
        let d = tape.sub(tgt, mu)?;
        let sq = tape.square(d)?;
        let ss = tape.sum_all(sq)?;
        let scaled = tape.scale(ss, -0.5 / self.sigma_x2)?;
        tape.add_scalar(scaled, -0.5 * (t_len * p) as f64 * (LN_2PI + self.sigma_x2.ln()))
    }
}

impl LinearSurrogate {
    /// Exact log p(x_target, b, z | u) for the observed-state case, by
    /// integrating the feature out of each step analytically.
    pub fn exact_evidence_observed(&self, model: &ExplicitLgssm, data: &SeqData) -> crate::error::Result<f64> {
        let z = data.z.expect("observed-state surrogate needs z");
        let t_len = data.t_len();
        let d_a = self.enc_b.len();
        let d_z = model.sigma.len();

        // log p(z|u)
        let mut total = gaussian_logpdf(
            &Tensor::vector(z.row(0).to_vec()),
            &Tensor::zeros(vec![d_z]),
            &Tensor::diag_from(&model.sigma),
        )?;
        for t in 1..t_len {
            let zp = Tensor::vector(z.row(t - 1).to_vec());
            let ut = Tensor::vector(data.u.row(t).to_vec());
            let mean = model.a[t].matvec(&zp)?.add(&model.b[t].matvec(&ut)?)?;
            total += gaussian_logpdf(&Tensor::vector(z.row(t).to_vec()), &mean, &Tensor::diag_from(&model.q))?;
        }

        for t in 0..t_len {
            let zt = Tensor::vector(z.row(t).to_vec());
            let cz = model.c[t].matvec(&zt)?;
            let (c_a, c_b) = (&cz.data()[..d_a], &cz.data()[d_a..]);
            let (r_a, r_b) = model.r.split_at(d_a);
            // b_t | z_t
            total += gaussian_logpdf(
                &Tensor::vector(data.b.row(t).to_vec()),
                &Tensor::vector(c_b.to_vec()),
                &Tensor::diag_from(r_b),
            )?;
            // x_t | z_t with the feature integrated out:
            // N(D(C_a z)+d, D(R_a)Dᵀ + σ²I)
            let mean_x = self.dec_w.matvec(&Tensor::vector(c_a.to_vec()))?.add(&self.dec_b)?;
            let p = self.dec_b.len();
            let mut cov = Tensor::zeros(vec![p, p]);
            for i in 0..p {
                for j in 0..p {
                    let mut acc = if i == j { self.sigma_x2 } else { 0.0 };
                    for k in 0..d_a {
                        acc += self.dec_w.at2(i, k) * r_a[k] * self.dec_w.at2(j, k);
                    }
                    cov.set2(i, j, acc);
                }
            }
            total += gaussian_logpdf(&Tensor::vector(data.x_target.row(t).to_vec()), &mean_x, &cov)?;
        }
        Ok(total)
    }

    /// Closed-form expectation of the observed-state objective under the
    /// linear encoder (no Monte Carlo).
    pub fn exact_expected_elbo_observed(&self, model: &ExplicitLgssm, data: &SeqData) -> crate::error::Result<f64> {
        let z = data.z.expect("observed-state surrogate needs z");
        let t_len = data.t_len();
        let d_a = self.enc_b.len();
        let d_z = model.sigma.len();
        let p = self.dec_b.len();

        let mut total = gaussian_logpdf(
            &Tensor::vector(z.row(0).to_vec()),
            &Tensor::zeros(vec![d_z]),
            &Tensor::diag_from(&model.sigma),
        )?;
        for t in 1..t_len {
            let zp = Tensor::vector(z.row(t - 1).to_vec());
            let ut = Tensor::vector(data.u.row(t).to_vec());
            let mean = model.a[t].matvec(&zp)?.add(&model.b[t].matvec(&ut)?)?;
            total += gaussian_logpdf(&Tensor::vector(z.row(t).to_vec()), &mean, &Tensor::diag_from(&model.q))?;
        }

        for t in 0..t_len {
            let xr = Tensor::vector(data.x_in.row(t).to_vec());
            let m = self.enc_w.matvec(&xr)?.add(&self.enc_b)?;

            // E[log p(x|a)]
            let mu = self.dec_w.matvec(&m)?.add(&self.dec_b)?;
            let xt = Tensor::vector(data.x_target.row(t).to_vec());
            let resid = xt.sub(&mu)?;
            let mut trace = 0.0;
            for j in 0..d_a {
                let col: f64 = (0..p).map(|i| self.dec_w.at2(i, j).powi(2)).sum();
                trace += self.enc_s[j] * col;
            }
            total += -0.5 * p as f64 * (LN_2PI + self.sigma_x2.ln())
                - (resid.dot(&resid)? + trace) / (2.0 * self.sigma_x2);

            // entropy of q
            total += 0.5 * d_a as f64 * (1.0 + LN_2PI)
                + 0.5 * self.enc_s.iter().map(|s| s.ln()).sum::<f64>();

            // E[log N(y; Cz, R)] with y = [a, b]
            let zt = Tensor::vector(z.row(t).to_vec());
            let cz = model.c[t].matvec(&zt)?;
            let (r_a, r_b) = model.r.split_at(d_a);
            for i in 0..d_a {
                let d = m.data()[i] - cz.data()[i];
                total += -0.5 * (LN_2PI + r_a[i].ln()) - (d * d + self.enc_s[i]) / (2.0 * r_a[i]);
            }
            for i in 0..r_b.len() {
                let d = data.b.at2(t, i) - cz.data()[d_a + i];
                total += -0.5 * (LN_2PI + r_b[i].ln()) - d * d / (2.0 * r_b[i]);
            }
        }
        Ok(total)
    }
}

/// Pass-through feature extractor: the "encoder" returns fixed features with
/// zero log-density and the reconstruction term is zero. Reduces the
/// unobserved-state estimator to its inner dynamics identity.
pub struct PassthroughRcan {
    /// (T, d_a) features to emit
    pub features: Tensor,
}

impl crate::elbo::Rcan for PassthroughRcan {
    fn encode_seq(
        &self,
        tape: &mut Tape,
        _binding: &Binding,
        _frames: &Tensor,
        _rng: &mut rand_chacha::ChaCha8Rng,
    ) -> crate::error::Result<EncSeq> {
        let sample = tape.leaf(self.features.clone());
        let mean = tape.leaf(self.features.clone());
        let var = tape.leaf(Tensor::filled(self.features.shape().to_vec(), 1.0));
        let logq = tape.scalar(0.0);
        Ok(EncSeq { mean, var, sample, logq })
    }

    fn recon_loglik(
        &self,
        tape: &mut Tape,
        _binding: &Binding,
        _sample: Var,
        _target: &Tensor,
    ) -> crate::error::Result<Var> {
        Ok(tape.scalar(0.0))
    }
}
