//! Planner behavior against hand-built models: rollout-cost contracts, the
//! variance penalty, filter convergence under a frozen environment, and the
//! closed-loop executive's bookkeeping.

use krc_core::elbo::ModelCheckpoint;
use krc_core::lgssm::softplus_inv;
use krc_core::nets::{Ensemble, EnsembleConfig, ModelDims};
use krc_core::planner::*;
use krc_core::rng::Streams;
use krc_core::tensor::Tensor;
use krc_core::valveworld::{self, TextureInterval};

fn tiny_dims() -> ModelDims {
    ModelDims {
        img_h: 32,
        img_w: 32,
        d_a: 3,
        d_b: 2,
        d_z: 4,
        d_u: 2,
        k: 1,
        enc_hidden: (12, 8),
        dec_hidden: (8, 12),
        dpn_hidden: 6,
    }
}

/// Identity-dynamics model: A = I, B = 0, so the latent stays put during
/// planning rollouts.
fn identity_model() -> ModelCheckpoint {
    let dims = tiny_dims();
    let mut model = ModelCheckpoint::init(dims, 0.01, 42, String::new());
    *model.store.value_mut(model.basis.a[0]) = Tensor::eye(4);
    *model.store.value_mut(model.basis.b[0]) = Tensor::zeros(vec![4, 2]);
    model
}

fn start_at(latent: Vec<f64>, model: &ModelCheckpoint) -> RolloutStart {
    RolloutStart {
        latent: Tensor::vector(latent),
        dpn_hidden: Tensor::zeros(vec![model.dpn.hidden]),
        y_prev: Tensor::zeros(vec![model.dims.d_y()]),
    }
}

fn hold_task(targets: Vec<[f64; 2]>) -> TaskSpec {
    let horizon = targets.len();
    TaskSpec { targets, horizon, beta: 0.0, speed_multiplier: 0.0 }
}

#[test]
fn zero_cost_when_predictions_hit_targets() {
    let model = identity_model();
    let pm = PlannerModel::new(&model).unwrap();
    let start = start_at(vec![0.1, 0.2, 0.5, 0.7], &model);
    let task = hold_task(vec![[0.5, 0.7]; 6]);
    let actions = vec![0.5; 2 * 4];
    let c = rollout_cost(&pm, &start, &actions, &task, 0, None, 0.0).unwrap();
    assert!(c.abs() < 1e-24, "cost {c}");
}

#[test]
fn constant_offset_costs_delta_squared() {
    let model = identity_model();
    let pm = PlannerModel::new(&model).unwrap();
    let start = start_at(vec![0.1, 0.2, 0.5, 0.7], &model);
    let delta = 0.13;
    let task = hold_task(vec![[0.5 + delta, 0.7]; 8]);
    let actions = vec![0.5; 2 * 5];
    let c = rollout_cost(&pm, &start, &actions, &task, 0, None, 0.0).unwrap();
    assert!((c - delta * delta).abs() < 1e-12, "cost {c}");
}

#[test]
fn variance_penalty_strictly_increases_cost() {
    let model = identity_model();
    let pm = PlannerModel::new(&model).unwrap();
    let start = start_at(vec![0.1, 0.2, 0.5, 0.7], &model);
    let task = hold_task(vec![[0.4, 0.6]; 8]);
    let actions = vec![0.3; 2 * 4];

    // disagreeing constant members -> positive variance
    let streams = Streams::new(8);
    let cfg = EnsembleConfig { members: 3, hidden: 4, ..Default::default() };
    let mut ens = Ensemble::init(4, 2, cfg, &streams);
    for (i, s) in ens.stores_mut().iter_mut().enumerate() {
        let id = s.id_by_name(&format!("ens.{i}.l2.b")).unwrap();
        *s.value_mut(id) = Tensor::filled(vec![4], i as f64 * 0.5);
    }
    let mut ens = ens;
    ens.trained = true;

    let base = rollout_cost(&pm, &start, &actions, &task, 0, Some(&ens), 0.0).unwrap();
    let with_var = rollout_cost(&pm, &start, &actions, &task, 0, Some(&ens), 0.7).unwrap();
    assert!(with_var > base, "{with_var} vs {base}");
}

#[test]
fn cost_is_invariant_to_ensemble_member_order() {
    let model = identity_model();
    let pm = PlannerModel::new(&model).unwrap();
    let start = start_at(vec![0.1, 0.2, 0.5, 0.7], &model);
    let task = hold_task(vec![[0.4, 0.6]; 8]);
    let actions = vec![0.7; 2 * 4];

    let streams = Streams::new(9);
    let cfg = EnsembleConfig { members: 4, hidden: 6, ..Default::default() };
    let mut a = Ensemble::init(4, 2, cfg.clone(), &streams);
    a.trained = true;
    // same members, reversed order
    let mut b = a.clone();
    b.stores_mut().reverse();

    let ca = rollout_cost(&pm, &start, &actions, &task, 0, Some(&a), 1.3).unwrap();
    let cb = rollout_cost(&pm, &start, &actions, &task, 0, Some(&b), 1.3).unwrap();
    assert!((ca - cb).abs() < 1e-12);
}

#[test]
fn frozen_environment_shrinks_the_belief() {
    // strongly observed latent: C = [I; 0], small noise, diffuse prior
    let dims = tiny_dims();
    let mut model = ModelCheckpoint::init(dims, 0.01, 7, String::new());
    let d_y = dims.d_y();
    let mut c = Tensor::zeros(vec![d_y, 4]);
    for i in 0..4 {
        c.set2(i, i, 1.0);
    }
    *model.store.value_mut(model.basis.c[0]) = c;
    *model.store.value_mut(model.basis.q_raw) = Tensor::filled(vec![4], softplus_inv(0.001));
    *model.store.value_mut(model.basis.r_raw) = Tensor::filled(vec![d_y], softplus_inv(0.01));
    *model.store.value_mut(model.basis.sigma_raw) = Tensor::filled(vec![4], softplus_inv(1.0));

    let mut filter = FilterRuntime::new(&model).unwrap();
    let a_feature = Tensor::vector(vec![0.2, 0.4, 0.6]);
    let b = Tensor::vector(vec![0.5, 0.5]);
    let u = Tensor::vector(vec![0.5, 0.5]);
    let mut traces = Vec::new();
    for _ in 0..5 {
        filter.observe(&a_feature, &b, &u).unwrap();
        traces.push(filter.cov.trace().unwrap());
    }
    for w in traces.windows(2) {
        assert!(w[1] < w[0], "trace did not shrink: {traces:?}");
    }
}

#[test]
fn mpc_emits_l_actions_and_l_plus_one_states() {
    let model = identity_model();
    let task = TaskSpec::valve(1.0, 3);
    let cem = CemParams { population: 16, elites: 4, iters: 2, sigma0: 0.25, horizon: 2 };
    let domain = valveworld::DomainParams::identity();
    let options = MpcOptions { texture_interval: TextureInterval::EachSequence, ..Default::default() };
    let log = mpc_run(
        &valveworld::start_state(),
        &model,
        &task,
        &cem,
        &domain,
        &options,
        &Streams::new(77),
    )
    .unwrap();
    assert_eq!(log.actions.len(), 3);
    assert_eq!(log.states.len(), 4);
    assert_eq!(log.thetas.len(), 3);
    assert_eq!(log.target_thetas.len(), 3);
}

#[test]
fn mpc_is_deterministic_in_the_seed() {
    let model = identity_model();
    let task = TaskSpec::valve(1.0, 2);
    let cem = CemParams { population: 8, elites: 2, iters: 2, sigma0: 0.25, horizon: 2 };
    let domain = valveworld::DomainParams { texture_seed: 5, cam_dx: 0.5, cam_dy: -1.0, zoom: 0.95, light: Some(2) };
    let run = || {
        mpc_run(
            &valveworld::start_state(),
            &model,
            &task,
            &cem,
            &domain,
            &MpcOptions::default(),
            &Streams::new(123),
        )
        .unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.actions, b.actions);
    for (x, y) in a.thetas.iter().zip(&b.thetas) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}
