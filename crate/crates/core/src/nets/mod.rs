//! Learnable components: the image encoder q(a|x), the canonical-image
//! decoder p(x|a), the recurrent dynamics-parameter network that emits
//! mixture weights on the K-simplex, and the independent dynamics ensemble
//! used by the planner's variance cost.
//!
//! All parameters live in a [`ParamStore`]; forward passes exist in two
//! flavors: tape-recorded (training, differentiable) and plain-value
//! (planning loops, exports). Parameter sets are immutable during
//! evaluation; training mutates them from a single writer.

pub mod ensemble;

pub use ensemble::{Ensemble, EnsembleConfig};

use crate::diffcore::{Binding, ParamId, ParamStore, Tape, Var};
use crate::error::{KrcError, Result};
use crate::lgssm::AlphaProvider;
use crate::tensor::{Tensor, LN_2PI};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 2.0;

/// Shapes shared by every component of one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub img_h: usize,
    pub img_w: usize,
    pub d_a: usize,
    pub d_b: usize,
    pub d_z: usize,
    pub d_u: usize,
    pub k: usize,
    pub enc_hidden: (usize, usize),
    pub dec_hidden: (usize, usize),
    pub dpn_hidden: usize,
}

impl ModelDims {
    pub fn d_y(&self) -> usize {
        self.d_a + self.d_b
    }

    pub fn pixels(&self) -> usize {
        self.img_h * self.img_w * 3
    }
}

// ---- dense layer ----------------------------------------------------------------

/// Fully-connected layer; weights are stored (out, in) so the batched
/// forward is one `x · Wᵀ`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Dense {
    pub fn init(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Dense {
        let bound = (6.0 / (n_in + n_out) as f64).sqrt();
        let w = Tensor::from_vec(
            vec![n_out, n_in],
            (0..n_out * n_in).map(|_| rng.gen_range(-bound..bound)).collect(),
        )
        .unwrap();
        Dense {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), Tensor::zeros(vec![n_out])),
            n_in,
            n_out,
        }
    }

    /// Batched pre-activation: rows of `x` are samples.
    pub fn fwd_mat(&self, tape: &mut Tape, binding: &Binding, x: Var) -> Result<Var> {
        let xw = tape.matmul_nt(x, binding.var(self.w))?;
        tape.add(xw, binding.var(self.b))
    }

    pub fn fwd_vec(&self, tape: &mut Tape, binding: &Binding, x: Var) -> Result<Var> {
        let wx = tape.matvec(binding.var(self.w), x)?;
        tape.add(wx, binding.var(self.b))
    }

    pub fn fwd_vec_value(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        store.value(self.w).matvec(x)?.add(store.value(self.b))
    }
}

// ---- encoder ------------------------------------------------------------------

/// One step's (or one batch of steps') encoding: a diagonal Gaussian over the
/// intrinsic feature plus a reparameterized sample and its log-density.
pub struct EncSeq {
    pub mean: Var,
    pub var: Var,
    pub sample: Var,
    /// Σ_t log q(ã_t | x_t)
    pub logq: Var,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub l1: Dense,
    pub l2: Dense,
    pub mean_head: Dense,
    pub logvar_head: Dense,
    pub d_a: usize,
    pub pixels: usize,
}

/// Per-frame per-channel standardization, the encoder's fixed input
/// transform: (x − mean_c)/(std_c + 1e-3) over the pixels of each channel.
/// Dense trunks stall on raw randomized palettes (the background level and
/// contrast vary per frame); removing first-order palette variation up front
/// makes the translation trainable.
pub fn standardize_frames(frames: &Tensor) -> Tensor {
    let (t, p) = (frames.shape()[0], frames.shape()[1]);
    let px = p / 3;
    let mut out = frames.clone();
    for r in 0..t {
        for c in 0..3 {
            let mut mean = 0.0;
            for i in 0..px {
                mean += frames.data()[r * p + i * 3 + c];
            }
            mean /= px as f64;
            let mut var = 0.0;
            for i in 0..px {
                let d = frames.data()[r * p + i * 3 + c] - mean;
                var += d * d;
            }
            let std = (var / px as f64).sqrt() + 1e-3;
            for i in 0..px {
                out.data_mut()[r * p + i * 3 + c] = (frames.data()[r * p + i * 3 + c] - mean) / std;
            }
        }
    }
    out
}

impl Encoder {
    pub fn init(store: &mut ParamStore, dims: &ModelDims, rng: &mut ChaCha8Rng) -> Encoder {
        let (h1, h2) = dims.enc_hidden;
        let p = dims.pixels();
        Encoder {
            l1: Dense::init(store, "enc.l1", p, h1, rng),
            l2: Dense::init(store, "enc.l2", h1, h2, rng),
            mean_head: Dense::init(store, "enc.mean", h2, dims.d_a, rng),
            logvar_head: Dense::init(store, "enc.logvar", h2, dims.d_a, rng),
            d_a: dims.d_a,
            pixels: p,
        }
    }

    fn trunk(&self, tape: &mut Tape, binding: &Binding, x: Var) -> Result<Var> {
        let h = self.l1.fwd_mat(tape, binding, x)?;
        let h = tape.tanh(h)?;
        let h = self.l2.fwd_mat(tape, binding, h)?;
        tape.tanh(h)
    }

    /// Encode a whole sequence of flattened frames (T, pixels) at once.
    /// ε comes from `rng`, one draw per feature per step.
    pub fn encode_seq(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        frames: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<EncSeq> {
        if frames.rank() != 2 || frames.shape()[1] != self.pixels {
            return Err(KrcError::dim(
                "encode",
                format!("frames {:?}, expected (T, {})", frames.shape(), self.pixels),
            ));
        }
        let t_len = frames.shape()[0];
        let x = tape.leaf(standardize_frames(frames));
        let h = self.trunk(tape, binding, x)?;
        let mean = self.mean_head.fwd_mat(tape, binding, h)?;
        let logvar = self.logvar_head.fwd_mat(tape, binding, h)?;
        let logvar = tape.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX)?;
        let var = tape.exp(logvar)?;
        let std = tape.sqrt(var)?;
        let eps = Tensor::from_vec(
            vec![t_len, self.d_a],
            (0..t_len * self.d_a).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        )?;
        let eps = tape.leaf(eps);
        let noise = tape.mul(std, eps)?;
        let sample = tape.add(mean, noise)?;

        // Σ log q(ã|x) over all steps and features, diagonal Gaussian
        let d = tape.sub(sample, mean)?;
        let d2 = tape.square(d)?;
        let inv = tape.recip(var)?;
        let quad = tape.mul(d2, inv)?;
        let quad = tape.sum_all(quad)?;
        let ld = tape.log(var)?;
        let ld = tape.sum_all(ld)?;
        let s = tape.add(quad, ld)?;
        let s = tape.add_scalar(s, (t_len * self.d_a) as f64 * LN_2PI)?;
        let logq = tape.scale(s, -0.5)?;

        Ok(EncSeq { mean, var, sample, logq })
    }

    /// Single-image encode on a throwaway tape: returns (mean, variance,
    /// sample). Accepts an (H,W,3) image or an already-flattened vector.
    pub fn encode_value(
        &self,
        store: &ParamStore,
        image: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let flat = flatten_image(image, self.pixels)?;
        let mut tape = Tape::new();
        let binding = Binding::bind_all_frozen(store, &mut tape);
        let frames = flat.reshaped(vec![1, self.pixels])?;
        let enc = self.encode_seq(&mut tape, &binding, &frames, rng)?;
        Ok((
            Tensor::vector(tape.value(enc.mean).data().to_vec()),
            Tensor::vector(tape.value(enc.var).data().to_vec()),
            Tensor::vector(tape.value(enc.sample).data().to_vec()),
        ))
    }
}

/// Flatten an (H,W,3) image (or accept a pre-flattened vector of the right
/// length); anything else is a dimension error.
pub fn flatten_image(image: &Tensor, pixels: usize) -> Result<Tensor> {
    let ok = match image.rank() {
        1 => image.len() == pixels,
        3 => image.shape()[2] == 3 && image.len() == pixels,
        _ => false,
    };
    if !ok {
        return Err(KrcError::dim(
            "encode",
            format!("image shape {:?}, expected {} values", image.shape(), pixels),
        ));
    }
    Ok(Tensor::vector(image.data().to_vec()))
}

/// log q for a diagonal Gaussian at a point (value-level helper).
pub fn diag_logpdf_value(x: &Tensor, mean: &Tensor, var: &Tensor) -> Result<f64> {
    let mut quad = 0.0;
    let mut ld = 0.0;
    for i in 0..x.len() {
        let d = x.data()[i] - mean.data()[i];
        quad += d * d / var.data()[i];
        ld += var.data()[i].ln();
    }
    Ok(-0.5 * (x.len() as f64 * LN_2PI + ld + quad))
}

// ---- decoder ------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Decoder {
    pub l1: Dense,
    pub l2: Dense,
    pub out: Dense,
    pub d_a: usize,
    pub pixels: usize,
    /// fixed shared pixel variance σ_x²
    pub sigma_x2: f64,
}

impl Decoder {
    pub fn init(store: &mut ParamStore, dims: &ModelDims, sigma_x2: f64, rng: &mut ChaCha8Rng) -> Decoder {
        let (h1, h2) = dims.dec_hidden;
        let p = dims.pixels();
        Decoder {
            l1: Dense::init(store, "dec.l1", dims.d_a, h1, rng),
            l2: Dense::init(store, "dec.l2", h1, h2, rng),
            out: Dense::init(store, "dec.out", h2, p, rng),
            d_a: dims.d_a,
            pixels: p,
            sigma_x2,
        }
    }

    /// Batched decode to per-pixel means in [0,1].
    pub fn decode_seq(&self, tape: &mut Tape, binding: &Binding, a: Var) -> Result<Var> {
        let h = self.l1.fwd_mat(tape, binding, a)?;
        let h = tape.tanh(h)?;
        let h = self.l2.fwd_mat(tape, binding, h)?;
        let h = tape.tanh(h)?;
        let o = self.out.fwd_mat(tape, binding, h)?;
        tape.sigmoid(o)
    }

    /// Σ_t log p(x_t | a_t) under an isotropic Gaussian with variance σ_x².
    pub fn recon_loglik(&self, tape: &mut Tape, binding: &Binding, a: Var, target: &Tensor) -> Result<Var> {
        let t_len = target.shape()[0];
        let mu = self.decode_seq(tape, binding, a)?;
        let tgt = tape.leaf(target.clone());
        let d = tape.sub(tgt, mu)?;
        let sq = tape.square(d)?;
        let ss = tape.sum_all(sq)?;
        let scaled = tape.scale(ss, -0.5 / self.sigma_x2)?;
        let norm = -0.5 * (t_len * self.pixels) as f64 * (LN_2PI + self.sigma_x2.ln());
        tape.add_scalar(scaled, norm)
    }

    pub fn decode_value(&self, store: &ParamStore, a: &Tensor) -> Result<Tensor> {
        if a.rank() != 1 || a.len() != self.d_a {
            return Err(KrcError::dim("decode", format!("feature shape {:?}", a.shape())));
        }
        if !a.is_finite() {
            return Err(KrcError::numeric("decode", "non-finite feature".to_string()));
        }
        let mut tape = Tape::new();
        let binding = Binding::bind_all_frozen(store, &mut tape);
        let av = tape.leaf(a.reshaped(vec![1, self.d_a])?);
        let out = self.decode_seq(&mut tape, &binding, av)?;
        Ok(Tensor::vector(tape.value(out).data().to_vec()))
    }
}

// ---- dynamics parameter network -------------------------------------------------

/// Recurrent tanh cell over [y_{t-1}, u_t] with a softmax head, plus the
/// learned pseudo initial observation y₀.
#[derive(Debug, Clone)]
pub struct Dpn {
    pub w_in: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub head: Dense,
    pub y0: ParamId,
    pub hidden: usize,
    pub k: usize,
    pub d_y: usize,
    pub d_u: usize,
}

impl Dpn {
    pub fn init(store: &mut ParamStore, dims: &ModelDims, rng: &mut ChaCha8Rng) -> Dpn {
        let h = dims.dpn_hidden;
        let n_in = dims.d_y() + dims.d_u;
        let bound = (6.0 / (n_in + h) as f64).sqrt();
        let w_in = Tensor::from_vec(vec![h, n_in], (0..h * n_in).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap();
        let bound_h = (6.0 / (2 * h) as f64).sqrt();
        let w_h = Tensor::from_vec(vec![h, h], (0..h * h).map(|_| rng.gen_range(-bound_h..bound_h)).collect()).unwrap();
        Dpn {
            w_in: store.add("dpn.w_in", w_in),
            w_h: store.add("dpn.w_h", w_h),
            b_h: store.add("dpn.b_h", Tensor::zeros(vec![h])),
            head: Dense::init(store, "dpn.head", h, dims.k, rng),
            y0: store.add("dpn.y0", Tensor::zeros(vec![dims.d_y()])),
            hidden: h,
            k: dims.k,
            d_y: dims.d_y(),
            d_u: dims.d_u,
        }
    }

    pub fn init_state(&self, tape: &mut Tape) -> Var {
        tape.leaf(Tensor::zeros(vec![self.hidden]))
    }

    /// One recurrence step: consumes [y_prev, u_t], returns (α_t, new state).
    pub fn step(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        state: Var,
        y_prev: Var,
        u: Var,
    ) -> Result<(Var, Var)> {
        let xin = tape.concat_vec(&[y_prev, u])?;
        let wx = tape.matvec(binding.var(self.w_in), xin)?;
        let wh = tape.matvec(binding.var(self.w_h), state)?;
        let pre = tape.add(wx, wh)?;
        let pre = tape.add(pre, binding.var(self.b_h))?;
        let h = tape.tanh(pre)?;
        let logits = self.head.fwd_vec(tape, binding, h)?;
        let alpha = tape.softmax(logits)?;
        Ok((alpha, h))
    }

    /// Value-path step for the planner (no tape).
    pub fn step_value(
        &self,
        store: &ParamStore,
        state: &Tensor,
        y_prev: &Tensor,
        u: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let mut xin = y_prev.data().to_vec();
        xin.extend_from_slice(u.data());
        let xin = Tensor::vector(xin);
        let pre = store
            .value(self.w_in)
            .matvec(&xin)?
            .add(&store.value(self.w_h).matvec(state)?)?
            .add(store.value(self.b_h))?;
        let h = pre.map(f64::tanh);
        let logits = self.head.fwd_vec_value(store, &h)?;
        let m = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.data().iter().map(|x| (x - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        Ok((Tensor::vector(exps.iter().map(|e| e / s).collect()), h))
    }

    pub fn y0_value<'s>(&self, store: &'s ParamStore) -> &'s Tensor {
        store.value(self.y0)
    }
}

/// Tape-level mixture-weight provider backed by the DPN. Falls back to the
/// learned pseudo observation at the first step.
pub struct DpnProvider<'a> {
    dpn: &'a Dpn,
    binding: &'a Binding,
    state: Var,
    y0: Var,
}

impl<'a> DpnProvider<'a> {
    pub fn new(tape: &mut Tape, dpn: &'a Dpn, binding: &'a Binding) -> DpnProvider<'a> {
        let state = dpn.init_state(tape);
        DpnProvider { dpn, binding, state, y0: binding.var(dpn.y0) }
    }
}

impl<'a> AlphaProvider for DpnProvider<'a> {
    fn next_alpha(&mut self, tape: &mut Tape, y_prev: Option<Var>, u_t: Var) -> Result<Var> {
        let y = y_prev.unwrap_or(self.y0);
        let (alpha, state) = self.dpn.step(tape, self.binding, self.state, y, u_t)?;
        self.state = state;
        Ok(alpha)
    }
}
