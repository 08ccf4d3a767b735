//! Cross-entropy-method trajectory optimization over the learned latent
//! dynamics, and the closed-loop MPC executive: observe → encode → filter →
//! plan → execute the first action.
//!
//! Planning rollouts propagate the belief mean only (uncertainty enters the
//! cost through the ensemble term) and run on plain tensors, not the tape:
//! the optimizer is derivative-free. Candidate rollouts within an iteration
//! are independent; the elite refit is serialized.

use crate::diffcore::{Binding, Tape};
use crate::elbo::{ModelCheckpoint, Readout};
use crate::error::{KrcError, Result};
use crate::lgssm::{kf_predict, kf_update, mix_params, Belief};
use crate::nets::Ensemble;
use crate::rng::Streams;
use crate::tensor::Tensor;
use crate::valveworld::{
    self, apply_occlusion, render_randomized, DomainParams, EnvState, TextureInterval,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// State dimensions that belong to the manipulated object (the valve pair).
pub const OBJECT_DIMS: [usize; 2] = [2, 3];

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CemParams {
    pub population: usize,
    pub elites: usize,
    pub iters: usize,
    pub sigma0: f64,
    pub horizon: usize,
}

impl Default for CemParams {
    fn default() -> Self {
        CemParams { population: 128, elites: 16, iters: 8, sigma0: 0.25, horizon: 5 }
    }
}

impl CemParams {
    pub fn validate(&self) -> Result<()> {
        if self.elites == 0 || self.elites > self.population || self.iters == 0 || self.horizon == 0 {
            return Err(KrcError::Config(format!(
                "invalid CEM parameters: P={} E={} G={} H={}",
                self.population, self.elites, self.iters, self.horizon
            )));
        }
        Ok(())
    }
}

/// Target object-state trajectory and the variance-cost weight.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    /// normalized [cos3θ*, sin3θ*] per executed step l = 1..=L
    pub targets: Vec<[f64; 2]>,
    pub horizon: usize,
    pub beta: f64,
    pub speed_multiplier: f64,
}

impl TaskSpec {
    /// Valve-tracking task: θ*_l = θ₀ + rate·multiplier·l for L steps.
    pub fn valve(speed_multiplier: f64, l_steps: usize) -> TaskSpec {
        let targets = (1..=l_steps)
            .map(|l| {
                let th = valveworld::target_theta(speed_multiplier, l);
                [((3.0 * th).cos() + 1.0) / 2.0, ((3.0 * th).sin() + 1.0) / 2.0]
            })
            .collect();
        TaskSpec { targets, horizon: l_steps, beta: 0.0, speed_multiplier }
    }

    /// Target at planning index τ (1-based from the task start); holds the
    /// final value past the end.
    pub fn target_at(&self, tau: usize) -> [f64; 2] {
        let idx = tau.saturating_sub(1).min(self.targets.len() - 1);
        self.targets[idx]
    }
}

/// Value-level snapshot of the mixture basis for fast planning rollouts.
pub struct PlannerModel<'a> {
    pub model: &'a ModelCheckpoint,
    a_stack: Tensor,
    b_stack: Tensor,
    c_stack: Tensor,
    pub readout: Readout,
}

impl<'a> PlannerModel<'a> {
    pub fn new(model: &'a ModelCheckpoint) -> Result<PlannerModel<'a>> {
        let dims = &model.dims;
        let k = dims.k;
        let (d_z, d_u, d_y) = (dims.d_z, dims.d_u, dims.d_y());
        let mut a_stack = Tensor::zeros(vec![k, d_z * d_z]);
        let mut b_stack = Tensor::zeros(vec![k, d_z * d_u]);
        let mut c_stack = Tensor::zeros(vec![k, d_y * d_z]);
        for ki in 0..k {
            a_stack.data_mut()[ki * d_z * d_z..(ki + 1) * d_z * d_z]
                .copy_from_slice(model.store.value(model.basis.a[ki]).data());
            b_stack.data_mut()[ki * d_z * d_u..(ki + 1) * d_z * d_u]
                .copy_from_slice(model.store.value(model.basis.b[ki]).data());
            c_stack.data_mut()[ki * d_y * d_z..(ki + 1) * d_y * d_z]
                .copy_from_slice(model.store.value(model.basis.c[ki]).data());
        }
        Ok(PlannerModel { model, a_stack, b_stack, c_stack, readout: model.effective_readout() })
    }

    fn mixed(&self, alpha: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let dims = &self.model.dims;
        let a = self.a_stack.matvec_t(alpha)?.reshaped(vec![dims.d_z, dims.d_z])?;
        let b = self.b_stack.matvec_t(alpha)?.reshaped(vec![dims.d_z, dims.d_u])?;
        let c = self.c_stack.matvec_t(alpha)?.reshaped(vec![dims.d_y(), dims.d_z])?;
        Ok((a, b, c))
    }
}

/// Where a planning rollout starts: filtered latent mean, DPN hidden state,
/// and the last actual observation.
#[derive(Debug, Clone)]
pub struct RolloutStart {
    pub latent: Tensor,
    pub dpn_hidden: Tensor,
    pub y_prev: Tensor,
}

/// Mean-trajectory cost of one candidate action sequence:
/// (1/H)·Σ_τ ‖target_τ − ẑ^object_τ‖² + β·Var_ensemble(ẑ_{τ−1}, u_τ),
/// with the grounded (readout-applied) state feeding both terms.
pub fn rollout_cost(
    pm: &PlannerModel,
    start: &RolloutStart,
    actions: &[f64],
    task: &TaskSpec,
    tau0: usize,
    ensemble: Option<&Ensemble>,
    beta: f64,
) -> Result<f64> {
    let d_u = pm.model.dims.d_u;
    let horizon = actions.len() / d_u;
    let mut latent = start.latent.clone();
    let mut hidden = start.dpn_hidden.clone();
    let mut y_prev = start.y_prev.clone();
    let mut grounded_prev = pm.readout.apply(&latent)?;
    let mut total = 0.0;
    for tau in 0..horizon {
        let u = Tensor::vector(actions[tau * d_u..(tau + 1) * d_u].to_vec());
        let (alpha, h) = pm.model.dpn.step_value(&pm.model.store, &hidden, &y_prev, &u)?;
        hidden = h;
        let (a, b, c) = pm.mixed(&alpha)?;
        latent = a.matvec(&latent)?.add(&b.matvec(&u)?)?;
        y_prev = c.matvec(&latent)?;
        let grounded = pm.readout.apply(&latent)?;

        let target = task.target_at(tau0 + tau + 1);
        let mut track = 0.0;
        for (ti, di) in OBJECT_DIMS.iter().enumerate() {
            let d = target[ti] - grounded.data()[*di];
            track += d * d;
        }
        total += track;
        if beta != 0.0 {
            if let Some(ens) = ensemble {
                let (_mean, var) = ens.predict(&grounded_prev, &u)?;
                total += beta * var;
            }
        }
        grounded_prev = grounded;
    }
    Ok(total / horizon as f64)
}

/// Iteratively refit a diagonal Gaussian over action sequences to the elite
/// samples; returns the final elite mean (clamped to the action box) and its
/// cost. Deterministic given the RNG.
pub fn cem_optimize<F>(
    cost: F,
    params: &CemParams,
    d_u: usize,
    warm_mean: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    params.validate()?;
    let dim = params.horizon * d_u;
    let mut mean: Vec<f64> = match warm_mean {
        Some(m) if m.len() == dim => m.to_vec(),
        _ => vec![0.5; dim],
    };
    let mut std = vec![params.sigma0; dim];

    let mut candidate = vec![0.0; dim];
    let mut scored: Vec<(f64, Vec<f64>)> = Vec::with_capacity(params.population);
    for _iter in 0..params.iters {
        scored.clear();
        for _ in 0..params.population {
            for j in 0..dim {
                let eps: f64 = rng.sample(StandardNormal);
                candidate[j] = (mean[j] + std[j] * eps).clamp(0.0, 1.0);
            }
            let c = cost(&candidate)?;
            scored.push((c, candidate.clone()));
        }
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite costs"));
        let elites = &scored[..params.elites];
        for j in 0..dim {
            let m: f64 = elites.iter().map(|(_, x)| x[j]).sum::<f64>() / params.elites as f64;
            let v: f64 =
                elites.iter().map(|(_, x)| (x[j] - m) * (x[j] - m)).sum::<f64>() / params.elites as f64;
            mean[j] = m;
            std[j] = v.sqrt().max(1e-4);
        }
    }
    let final_cost = cost(&mean)?;
    Ok((mean, final_cost))
}

// ---- streaming filter for closed-loop control -------------------------------------

/// Kalman filter state carried across MPC steps. Each observation update runs
/// the shared filter primitives on a throwaway frozen tape.
pub struct FilterRuntime<'a> {
    model: &'a ModelCheckpoint,
    pub mean: Tensor,
    pub cov: Tensor,
    pub dpn_hidden: Tensor,
    pub y_prev: Option<Tensor>,
    pub steps: usize,
}

impl<'a> FilterRuntime<'a> {
    pub fn new(model: &'a ModelCheckpoint) -> Result<FilterRuntime<'a>> {
        let d_z = model.dims.d_z;
        let sigma_raw = model.store.value(model.basis.sigma_raw);
        let sigma: Vec<f64> = sigma_raw
            .data()
            .iter()
            .map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p() + crate::lgssm::NOISE_FLOOR)
            .collect();
        Ok(FilterRuntime {
            model,
            mean: Tensor::zeros(vec![d_z]),
            cov: Tensor::diag_from(&sigma),
            dpn_hidden: Tensor::zeros(vec![model.dpn.hidden]),
            y_prev: None,
            steps: 0,
        })
    }

    /// Override the initial belief mean (perturbed-prior evaluations).
    pub fn set_mean(&mut self, mean: Tensor) {
        self.mean = mean;
    }

    /// One observe step: y = [ã, b] with control u consumed by the transition
    /// into this observation. Returns the step log-likelihood.
    pub fn observe(&mut self, a_feature: &Tensor, b: &Tensor, u: &Tensor) -> Result<f64> {
        let y_prev_t = self.y_prev.clone().unwrap_or_else(|| self.model.dpn.y0_value(&self.model.store).clone());
        let (alpha, hidden) =
            self.model.dpn.step_value(&self.model.store, &self.dpn_hidden, &y_prev_t, u)?;
        self.dpn_hidden = hidden;

        let mut tape = Tape::new();
        let binding = Binding::bind_all_frozen(&self.model.store, &mut tape);
        let basis = self.model.basis.bind(&mut tape, &binding)?;
        let alpha_v = tape.leaf(alpha);
        let mixed = mix_params(&mut tape, alpha_v, &basis)?;
        let mut belief = Belief { mean: tape.leaf(self.mean.clone()), cov: tape.leaf(self.cov.clone()) };
        if self.steps > 0 {
            let uv = tape.leaf(u.clone());
            belief = kf_predict(&mut tape, &belief, &mixed, uv, &basis)?;
        }
        let mut y = a_feature.data().to_vec();
        y.extend_from_slice(b.data());
        let y = Tensor::vector(y);
        let yv = tape.leaf(y.clone());
        let (post, ll) = kf_update(&mut tape, &belief, &mixed, yv, &basis)?;
        self.mean = tape.value(post.mean).clone();
        self.cov = tape.value(post.cov).clone();
        let ll = tape.value(ll).item()?;
        self.y_prev = Some(y);
        self.steps += 1;
        Ok(ll)
    }

    pub fn rollout_start(&self) -> RolloutStart {
        RolloutStart {
            latent: self.mean.clone(),
            dpn_hidden: self.dpn_hidden.clone(),
            y_prev: self.y_prev.clone().unwrap_or_else(|| self.model.dpn.y0_value(&self.model.store).clone()),
        }
    }
}

// ---- closed-loop executive ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    /// scale once per task from 64 random rollouts
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct MpcOptions {
    pub occlusion: bool,
    /// per-dimension Gaussian noise on the physical start-state estimate,
    /// clipped to [0,1] and mapped through the readout pre-image
    pub init_state_noise: Option<f64>,
    pub texture_interval: TextureInterval,
    /// carry the filter's DPN history into planning rollouts (the default);
    /// false resets the recurrence per planning call
    pub carry_dpn_history: bool,
    pub beta: BetaMode,
}

impl Default for MpcOptions {
    fn default() -> Self {
        MpcOptions {
            occlusion: false,
            init_state_noise: None,
            texture_interval: TextureInterval::EachStep,
            carry_dpn_history: true,
            beta: BetaMode::Auto,
        }
    }
}

pub struct ExecutionLog {
    /// L+1 observed states (start included)
    pub states: Vec<EnvState>,
    /// L executed actions
    pub actions: Vec<[f64; 2]>,
    /// achieved valve angles per executed step (length L)
    pub thetas: Vec<f64>,
    /// target valve angles per executed step (length L)
    pub target_thetas: Vec<f64>,
    /// the images the controller actually saw (occlusion included)
    pub images: Vec<Tensor>,
    pub filtered_means: Vec<Tensor>,
    pub cov_traces: Vec<f64>,
    /// planned cost of the executed sequence per step
    pub planned_costs: Vec<f64>,
    pub beta: f64,
}

/// Closed-loop run: per step observe (randomized render, proprioception),
/// encode a feature sample, filter, plan with CEM, execute the first action.
pub fn mpc_run(
    start: &EnvState,
    model: &ModelCheckpoint,
    task: &TaskSpec,
    cem: &CemParams,
    domain: &DomainParams,
    options: &MpcOptions,
    streams: &Streams,
) -> Result<ExecutionLog> {
    cem.validate()?;
    let pm = PlannerModel::new(model)?;
    let ensemble = model.ensemble.as_ref();
    let mut filter = FilterRuntime::new(model)?;
    let mut state = start.wrapped();
    let hold = [state.f1, state.f2];

    if let Some(sigma) = options.init_state_noise {
        let mut rng = streams.stream("init-noise", 0);
        let z_true = state.export();
        let perturbed = Tensor::vector(
            z_true
                .data()
                .iter()
                .map(|v| (v + sigma * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0))
                .collect(),
        );
        filter.set_mean(pm.readout.invert(&perturbed));
    }

    let mut log = ExecutionLog {
        states: vec![state],
        actions: Vec::new(),
        images: Vec::new(),
        thetas: Vec::new(),
        target_thetas: Vec::new(),
        filtered_means: Vec::new(),
        cov_traces: Vec::new(),
        planned_costs: Vec::new(),
        beta: 0.0,
    };

    let mut beta = match options.beta {
        BetaMode::Fixed(b) => b,
        BetaMode::Auto => 0.0, // resolved after the first observation
    };
    let mut beta_resolved = !matches!(options.beta, BetaMode::Auto);
    // cold-start prior: hold the current fingertip positions
    let mut warm: Option<Vec<f64>> = Some(hold.iter().cycle().cloned().take(cem.horizon * model.dims.d_u).collect());
    let mut last_action = Tensor::vector(hold.to_vec());

    for l in 0..task.horizon {
        // observe
        let step_seed: u64 = match options.texture_interval {
            TextureInterval::EachStep => streams.stream("texture", l as u64).gen(),
            TextureInterval::EachSequence => 0,
        };
        let mut image = render_randomized(&state, domain, step_seed);
        if options.occlusion {
            let mut rng = streams.stream("occlusion", l as u64);
            image = apply_occlusion(&image, &mut rng);
        }
        let mut enc_rng = streams.stream("encode", l as u64);
        let (_mean, _var, a_sample) =
            model.encoder.encode_value(&model.store, &image, &mut enc_rng)?;
        let b = state.proprio();
        filter.observe(&a_sample, &b, &last_action)?;
        log.images.push(image);
        if !filter.mean.is_finite() {
            return Err(KrcError::numeric("mpc", format!("belief diverged at step {l}")));
        }
        log.filtered_means.push(filter.mean.clone());
        log.cov_traces.push(filter.cov.trace()?);

        let mut start_rollout = filter.rollout_start();
        if !options.carry_dpn_history {
            start_rollout.dpn_hidden = Tensor::zeros(vec![model.dpn.hidden]);
        }

        if !beta_resolved {
            beta = auto_beta(&pm, &start_rollout, task, l, ensemble, cem, &mut streams.stream("beta", 0))?;
            beta_resolved = true;
        }

        // plan
        let mut cem_rng = streams.stream("cem", l as u64);
        let cost_fn = |actions: &[f64]| rollout_cost(&pm, &start_rollout, actions, task, l, ensemble, beta);
        let (plan, plan_cost) = cem_optimize(cost_fn, cem, model.dims.d_u, warm.as_deref(), &mut cem_rng)?;
        log.planned_costs.push(plan_cost);

        // execute the first action only
        let action = [plan[0], plan[1]];
        state = valveworld::step(&state, action);
        log.states.push(state);
        log.actions.push(action);
        log.thetas.push(state.theta);
        log.target_thetas.push(valveworld::target_theta(task.speed_multiplier, l + 1));
        last_action = Tensor::vector(action.to_vec());

        // warm start: shift by one step, repeat the tail
        let d_u = model.dims.d_u;
        let mut shifted = plan[d_u..].to_vec();
        shifted.extend_from_slice(&plan[plan.len() - d_u..]);
        warm = Some(shifted);
    }
    log.beta = beta;
    Ok(log)
}

/// β = median tracking cost / median variance cost over 64 random rollouts,
/// so the two cost terms start on the same scale.
fn auto_beta(
    pm: &PlannerModel,
    start: &RolloutStart,
    task: &TaskSpec,
    tau0: usize,
    ensemble: Option<&Ensemble>,
    cem: &CemParams,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if ensemble.is_none() {
        return Ok(0.0);
    }
    let dim = cem.horizon * pm.model.dims.d_u;
    let mut track_costs = Vec::with_capacity(64);
    let mut var_costs = Vec::with_capacity(64);
    for _ in 0..64 {
        let actions: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.0..1.0)).collect();
        let track = rollout_cost(pm, start, &actions, task, tau0, None, 0.0)?;
        let with_var = rollout_cost(pm, start, &actions, task, tau0, ensemble, 1.0)?;
        track_costs.push(track);
        var_costs.push(with_var - track);
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let med_track = median(&mut track_costs);
    let med_var = median(&mut var_costs);
    if med_var <= 1e-12 {
        return Ok(0.0);
    }
    Ok(med_track / med_var)
}
