//! Filter and smoother correctness against dense joint-Gaussian conditioning,
//! plus the gradient checks for the likelihood outputs.
//!
//! The trick for exercising arbitrary per-step parameters through the mixture
//! path: build a basis with K = T and drive it with one-hot weights, so the
//! mixed matrices equal the explicit per-step matrices bit for bit.

use krc_core::diffcore::{grad_check, Binding, ParamStore, Tape, Var};
use krc_core::lgssm::*;
use krc_core::reference::ExplicitLgssm;
use krc_core::tensor::Tensor;
use krc_core::Result;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Instance {
    explicit: ExplicitLgssm,
    us: Vec<Tensor>,
    ys: Vec<Tensor>,
    d_z: usize,
    d_y: usize,
    d_u: usize,
    t_len: usize,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let d_z = rng.gen_range(1..=4);
    let d_y = rng.gen_range(1..=3);
    let d_u = rng.gen_range(1..=2);
    let t_len = rng.gen_range(1..=6);

    let mut mat = |r: usize, c: usize, s: f64| {
        Tensor::from_vec(vec![r, c], (0..r * c).map(|_| s * rng.gen_range(-1.0f64..1.0)).collect()).unwrap()
    };
    let a: Vec<Tensor> = (0..t_len).map(|_| mat(d_z, d_z, 0.7)).collect();
    let b: Vec<Tensor> = (0..t_len).map(|_| mat(d_z, d_u, 0.8)).collect();
    let c: Vec<Tensor> = (0..t_len).map(|_| mat(d_y, d_z, 1.0)).collect();
    let mut diag = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(0.05f64..0.8)).collect() };
    let q = diag(d_z);
    let r = diag(d_y);
    let sigma = diag(d_z);
    let us: Vec<Tensor> = (0..t_len)
        .map(|_| Tensor::vector((0..d_u).map(|_| rng.gen_range(-1.0f64..1.0)).collect()))
        .collect();
    let explicit = ExplicitLgssm { a, b, c, q, r, sigma };
    let mut sim_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let (_zs, ys) = explicit.simulate(&us, &mut sim_rng).unwrap();
    Instance { explicit, us, ys, d_z, d_y, d_u, t_len }
}

/// Bind the instance's explicit matrices through the mixture machinery with
/// one-hot weights per step.
fn bind_instance<'a>(inst: &Instance, tape: &mut Tape) -> (BasisVars, Vec<Var>, Vec<Var>, Vec<Var>) {
    let mut store = ParamStore::new();
    let dims = SsmDims { d_z: inst.d_z, d_y: inst.d_y, d_u: inst.d_u, k: inst.t_len };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = BasisParams::init(&mut store, dims, &mut rng);
    for t in 0..inst.t_len {
        *store.value_mut(params.a[t]) = inst.explicit.a[t].clone();
        *store.value_mut(params.b[t]) = inst.explicit.b[t].clone();
        *store.value_mut(params.c[t]) = inst.explicit.c[t].clone();
    }
    let set_diag = |store: &mut ParamStore, id, vals: &[f64]| {
        *store.value_mut(id) =
            Tensor::vector(vals.iter().map(|v| softplus_inv(v - NOISE_FLOOR)).collect());
    };
    set_diag(&mut store, params.q_raw, &inst.explicit.q);
    set_diag(&mut store, params.r_raw, &inst.explicit.r);
    set_diag(&mut store, params.sigma_raw, &inst.explicit.sigma);

    let binding = Binding::bind_all(&store, tape);
    let vars = params.bind(tape, &binding).unwrap();

    let alphas: Vec<Var> = (0..inst.t_len)
        .map(|t| {
            let mut one_hot = vec![0.0; inst.t_len];
            one_hot[t] = 1.0;
            tape.leaf(Tensor::vector(one_hot))
        })
        .collect();
    let ys: Vec<Var> = inst.ys.iter().map(|y| tape.leaf(y.clone())).collect();
    let us: Vec<Var> = inst.us.iter().map(|u| tape.leaf(u.clone())).collect();
    (vars, alphas, ys, us)
}

#[test]
fn filter_and_smoother_match_dense_conditioning_on_200_systems() {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let mut worst_mean = 0.0f64;
    let mut worst_cov = 0.0f64;
    let mut worst_ll = 0.0f64;
    for _ in 0..200 {
        let inst = random_instance(&mut rng);
        let mut tape = Tape::new();
        let (vars, alphas, ys, us) = bind_instance(&inst, &mut tape);
        let smooth = kalman_smooth(&mut tape, &ys, &us, &alphas, &vars, None).unwrap();

        let ll = tape.value(smooth.loglik).item().unwrap();
        let want_ll = inst.explicit.loglik(&inst.ys, &inst.us).unwrap();
        worst_ll = worst_ll.max((ll - want_ll).abs());

        let posts = inst.explicit.posterior(&inst.ys, &inst.us).unwrap();
        for (t, (want_m, want_c)) in posts.iter().enumerate() {
            let got_m = tape.value(smooth.smoothed[t].mean);
            let got_c = tape.value(smooth.smoothed[t].cov);
            for (a, b) in got_m.data().iter().zip(want_m.data()) {
                worst_mean = worst_mean.max((a - b).abs());
            }
            for (a, b) in got_c.data().iter().zip(want_c.data()) {
                worst_cov = worst_cov.max((a - b).abs());
            }
        }
    }
    assert!(worst_mean < 1e-8, "posterior means deviate {worst_mean:.3e}");
    assert!(worst_cov < 1e-7, "posterior covariances deviate {worst_cov:.3e}");
    assert!(worst_ll < 1e-8, "log-likelihood deviates {worst_ll:.3e}");
}

#[test]
fn single_step_filter_is_prior_conditioning() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut inst = random_instance(&mut rng);
    // force T = 1
    inst.t_len = 1;
    inst.us.truncate(1);
    inst.ys.truncate(1);
    inst.explicit.a.truncate(1);
    inst.explicit.b.truncate(1);
    inst.explicit.c.truncate(1);
    let mut tape = Tape::new();
    let (vars, alphas, ys, us) = bind_instance(&inst, &mut tape);
    let out = kalman_filter(&mut tape, &ys, &us, &alphas, &vars).unwrap();
    let posts = inst.explicit.posterior(&inst.ys, &inst.us).unwrap();
    for (a, b) in tape.value(out.beliefs[0].mean).data().iter().zip(posts[0].0.data()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn loglik_is_invariant_to_sequence_split_with_warm_start() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20 {
        let mut inst = random_instance(&mut rng);
        if inst.t_len < 2 {
            continue;
        }
        let mid = inst.t_len / 2;
        let mut tape = Tape::new();
        let (vars, alphas, ys, us) = bind_instance(&inst, &mut tape);
        let full = kalman_filter(&mut tape, &ys, &us, &alphas, &vars).unwrap();
        let full_ll = tape.value(full.loglik).item().unwrap();

        let first = kalman_filter(&mut tape, &ys[..mid], &us[..mid], &alphas[..mid], &vars).unwrap();
        let warm = *first.beliefs.last().unwrap();
        // continuing from the midpoint belief: the next step must do a time
        // update, so feed the remaining steps through the warm-start entry
        let second = kalman_filter_from_continuation(
            &mut tape,
            warm,
            &ys[mid..],
            &us[mid..],
            &alphas[mid..],
            &vars,
        )
        .unwrap();
        let split_ll =
            tape.value(first.loglik).item().unwrap() + tape.value(second).item().unwrap();
        assert!(
            (full_ll - split_ll).abs() < 1e-8,
            "split mismatch {} vs {}",
            full_ll,
            split_ll
        );
        inst.t_len = 0; // silence unused warnings on moved fields
    }
}

/// Continuation helper for the split test: every step, including the first,
/// performs a predict before its update (the warm-start belief is a filtered
/// posterior, not a prior for the next observation).
fn kalman_filter_from_continuation(
    tape: &mut Tape,
    init: Belief,
    ys: &[Var],
    us: &[Var],
    alphas: &[Var],
    basis: &BasisVars,
) -> Result<Var> {
    let mut cur = init;
    let mut total: Option<Var> = None;
    for t in 0..ys.len() {
        let mixed = mix_params(tape, alphas[t], basis)?;
        cur = kf_predict(tape, &cur, &mixed, us[t], basis)?;
        let (post, ll) = kf_update(tape, &cur, &mixed, ys[t], basis)?;
        cur = post;
        total = Some(match total {
            None => ll,
            Some(acc) => tape.add(acc, ll)?,
        });
    }
    Ok(total.unwrap())
}

#[test]
fn covariances_stay_symmetric_psd_and_smoothing_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..50 {
        let inst = random_instance(&mut rng);
        let mut tape = Tape::new();
        let (vars, alphas, ys, us) = bind_instance(&inst, &mut tape);
        let smooth = kalman_smooth(&mut tape, &ys, &us, &alphas, &vars, None).unwrap();
        for t in 0..inst.t_len {
            for b in [&smooth.filtered[t], &smooth.smoothed[t]] {
                let c = tape.value(b.cov);
                let n = c.shape()[0];
                for i in 0..n {
                    for j in 0..n {
                        assert!((c.at2(i, j) - c.at2(j, i)).abs() < 1e-9);
                    }
                }
                assert!(min_eigenvalue(c) >= -1e-9);
            }
            let tr_s = tape.value(smooth.smoothed[t].cov).trace().unwrap();
            let tr_f = tape.value(smooth.filtered[t].cov).trace().unwrap();
            assert!(tr_s <= tr_f + 1e-9, "smoothing increased trace at t={t}");
        }
        // boundary: smoothed == filtered at T
        let last = inst.t_len - 1;
        assert_eq!(
            tape.value(smooth.smoothed[last].mean).data(),
            tape.value(smooth.filtered[last].mean).data()
        );
    }
}

fn min_eigenvalue(m: &Tensor) -> f64 {
    // Jacobi sweeps are plenty for d <= 4 symmetric matrices
    let n = m.shape()[0];
    let mut a = m.clone();
    for _ in 0..50 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a.at2(i, j).abs();
            }
        }
        if off < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.at2(p, q);
                if apq.abs() < 1e-16 {
                    continue;
                }
                let theta = 0.5 * (a.at2(q, q) - a.at2(p, p)) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.at2(k, p);
                    let akq = a.at2(k, q);
                    a.set2(k, p, c * akp - s * akq);
                    a.set2(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.at2(p, k);
                    let aqk = a.at2(q, k);
                    a.set2(p, k, c * apk - s * aqk);
                    a.set2(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    (0..n).map(|i| a.at2(i, i)).fold(f64::INFINITY, f64::min)
}

#[test]
fn transition_loglik_matches_deterministic_formula_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let inst = random_instance(&mut rng);
    let mut tape = Tape::new();
    let (vars, alphas, _ys, us) = bind_instance(&inst, &mut tape);
    let mixed = mix_all(&mut tape, &alphas, &vars).unwrap();

    // a trajectory exactly on the dynamics with Q = s²·I scores the closed form
    let s2 = inst.explicit.q[0];
    let mut vars_iso = vars;
    vars_iso.q = tape.leaf(Tensor::filled(vec![inst.d_z], s2));
    let mut zs_exact = vec![Tensor::zeros(vec![inst.d_z])];
    let mut z0 = Tensor::zeros(vec![inst.d_z]);
    z0.data_mut().iter_mut().for_each(|v| *v = 0.3);
    zs_exact[0] = z0;
    for t in 1..inst.t_len {
        let z = inst.explicit.a[t].matvec(&zs_exact[t - 1]).unwrap().add(&inst.explicit.b[t].matvec(&inst.us[t]).unwrap()).unwrap();
        zs_exact.push(z);
    }
    let z_vars: Vec<Var> = zs_exact.iter().map(|z| tape.leaf(z.clone())).collect();
    let got = transition_loglik(&mut tape, &z_vars, &us, &mixed, &vars_iso).unwrap();
    let got = tape.value(got).item().unwrap();
    let lp_z1 = krc_core::tensor::gaussian_logpdf(
        &zs_exact[0],
        &Tensor::zeros(vec![inst.d_z]),
        &Tensor::diag_from(&inst.explicit.sigma),
    )
    .unwrap();
    let want = lp_z1
        - (inst.t_len as f64 - 1.0) * (inst.d_z as f64 / 2.0) * (2.0 * std::f64::consts::PI * s2).ln();
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");

    // generic oracle agreement on a random trajectory, original Q
    let mut tape2 = Tape::new();
    let (vars2, alphas2, _ys2, us2) = bind_instance(&inst, &mut tape2);
    let mixed2 = mix_all(&mut tape2, &alphas2, &vars2).unwrap();
    let mut zrng = ChaCha8Rng::seed_from_u64(3);
    let zs: Vec<Tensor> = (0..inst.t_len)
        .map(|_| Tensor::vector((0..inst.d_z).map(|_| zrng.gen_range(-1.0f64..1.0)).collect()))
        .collect();
    let z_vars2: Vec<Var> = zs.iter().map(|z| tape2.leaf(z.clone())).collect();
    let got2 = transition_loglik(&mut tape2, &z_vars2, &us2, &mixed2, &vars2).unwrap();
    let got2 = tape2.value(got2).item().unwrap();
    let mut want2 = krc_core::tensor::gaussian_logpdf(
        &zs[0],
        &Tensor::zeros(vec![inst.d_z]),
        &Tensor::diag_from(&inst.explicit.sigma),
    )
    .unwrap();
    for t in 1..inst.t_len {
        let mean = inst.explicit.a[t].matvec(&zs[t - 1]).unwrap().add(&inst.explicit.b[t].matvec(&inst.us[t]).unwrap()).unwrap();
        want2 += krc_core::tensor::gaussian_logpdf(&zs[t], &mean, &Tensor::diag_from(&inst.explicit.q)).unwrap();
    }
    assert!((got2 - want2).abs() < 1e-10);

    // perturbing any z_t strictly decreases the exact-trajectory value
    for t in 0..inst.t_len {
        let mut tape3 = Tape::new();
        let (vars3, alphas3, _y, us3) = bind_instance(&inst, &mut tape3);
        let mut vars3 = vars3;
        vars3.q = tape3.leaf(Tensor::filled(vec![inst.d_z], s2));
        let mixed3 = mix_all(&mut tape3, &alphas3, &vars3).unwrap();
        let mut z_perturbed = zs_exact.clone();
        z_perturbed[t].data_mut()[0] += 0.05;
        let zv: Vec<Var> = z_perturbed.iter().map(|z| tape3.leaf(z.clone())).collect();
        let v = transition_loglik(&mut tape3, &zv, &us3, &mixed3, &vars3).unwrap();
        let v = tape3.value(v).item().unwrap();
        if t == 0 {
            // z_1 also moves the downstream means; only the t >= 1 cases are
            // guaranteed to decrease, but the prior term dominates here too
            continue;
        }
        assert!(v < got, "perturbing z_{t} did not decrease loglik");
    }
}

#[test]
fn observation_loglik_examples_and_additivity() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let inst = random_instance(&mut rng);
    let t_len = inst.t_len;

    // y_t = C_t z_t with R = I scores -T·(d_y/2)·log(2π)
    let mut tape = Tape::new();
    let (mut vars, alphas, _ys, _us) = bind_instance(&inst, &mut tape);
    vars.r = tape.leaf(Tensor::filled(vec![inst.d_y], 1.0));
    let mixed = mix_all(&mut tape, &alphas, &vars).unwrap();
    let mut zrng = ChaCha8Rng::seed_from_u64(8);
    let zs: Vec<Tensor> = (0..t_len)
        .map(|_| Tensor::vector((0..inst.d_z).map(|_| zrng.gen_range(-1.0f64..1.0)).collect()))
        .collect();
    let ys_exact: Vec<Tensor> = (0..t_len).map(|t| inst.explicit.c[t].matvec(&zs[t]).unwrap()).collect();
    let zv: Vec<Var> = zs.iter().map(|z| tape.leaf(z.clone())).collect();
    let yv: Vec<Var> = ys_exact.iter().map(|y| tape.leaf(y.clone())).collect();
    let got = observation_loglik(&mut tape, &yv, &zv, &mixed, &vars).unwrap();
    let got = tape.value(got).item().unwrap();
    let want = -(t_len as f64) * (inst.d_y as f64 / 2.0) * (2.0 * std::f64::consts::PI).ln();
    assert!((got - want).abs() < 1e-10);

    // additivity: value(1:T) = value(1:T-1) + step(T)
    if t_len >= 2 {
        let head = observation_loglik(&mut tape, &yv[..t_len - 1], &zv[..t_len - 1], &mixed[..t_len - 1], &vars).unwrap();
        let tail = observation_loglik(&mut tape, &yv[t_len - 1..], &zv[t_len - 1..], &mixed[t_len - 1..], &vars).unwrap();
        let sum = tape.value(head).item().unwrap() + tape.value(tail).item().unwrap();
        assert!((sum - got).abs() < 1e-12);
    }
}

#[test]
fn likelihood_outputs_pass_gradient_checks() {
    // small instance; gradients w.r.t. every basis and noise parameter
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let d_z = 2;
    let d_y = 2;
    let d_u = 1;
    let t_len = 3;
    let k = 2;
    let mut store = ParamStore::new();
    let params = BasisParams::init(&mut store, SsmDims { d_z, d_y, d_u, k }, &mut rng);
    let ys: Vec<Tensor> = (0..t_len)
        .map(|_| Tensor::vector((0..d_y).map(|_| rng.gen_range(-1.0f64..1.0)).collect()))
        .collect();
    let us: Vec<Tensor> = (0..t_len)
        .map(|_| Tensor::vector((0..d_u).map(|_| rng.gen_range(-1.0f64..1.0)).collect()))
        .collect();
    let zs: Vec<Tensor> = (0..t_len)
        .map(|_| Tensor::vector((0..d_z).map(|_| rng.gen_range(-1.0f64..1.0)).collect()))
        .collect();
    let alpha_seq: Vec<Tensor> = (0..t_len)
        .map(|_| {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1f64..1.0)).collect();
            let s: f64 = raw.iter().sum();
            Tensor::vector(raw.iter().map(|v| v / s).collect())
        })
        .collect();

    let param_tensors: Vec<Tensor> = store.values().to_vec();
    let build = |which: usize| {
        let params = params.clone();
        let ys = ys.clone();
        let us = us.clone();
        let zs = zs.clone();
        let alpha_seq = alpha_seq.clone();
        move |tape: &mut Tape, vs: &[Var]| -> Result<Var> {
            let mut store2 = ParamStore::new();
            for (i, v) in vs.iter().enumerate() {
                store2.add(format!("p{i}"), tape.value(*v).clone());
            }
            // rebind through the given vars so gradients flow to them
            let binding = BindingFromVars(vs.to_vec());
            let vars = bind_with(&params, tape, &binding)?;
            let yv: Vec<Var> = ys.iter().map(|y| tape.leaf(y.clone())).collect();
            let uv: Vec<Var> = us.iter().map(|u| tape.leaf(u.clone())).collect();
            let av: Vec<Var> = alpha_seq.iter().map(|a| tape.leaf(a.clone())).collect();
            match which {
                0 => {
                    let out = kalman_filter(tape, &yv, &uv, &av, &vars)?;
                    Ok(out.loglik)
                }
                1 => {
                    let mut rng = ChaCha8Rng::seed_from_u64(11);
                    let out = kalman_smooth(tape, &yv, &uv, &av, &vars, Some(&mut rng))?;
                    Ok(out.sample_loglik.unwrap())
                }
                2 => {
                    let mixed = mix_all(tape, &av, &vars)?;
                    let zv: Vec<Var> = zs.iter().map(|z| tape.leaf(z.clone())).collect();
                    transition_loglik(tape, &zv, &uv, &mixed, &vars)
                }
                3 => {
                    let mixed = mix_all(tape, &av, &vars)?;
                    let zv: Vec<Var> = zs.iter().map(|z| tape.leaf(z.clone())).collect();
                    observation_loglik(tape, &yv, &zv, &mixed, &vars)
                }
                _ => {
                    let mut rng = ChaCha8Rng::seed_from_u64(12);
                    let out = kalman_smooth(tape, &yv, &uv, &av, &vars, Some(&mut rng))?;
                    let m = out.smoothed[0].mean;
                    let s = tape.square(m)?;
                    let a = tape.sum_all(s)?;
                    let ll = out.sample_loglik.unwrap();
                    tape.add(a, ll)
                }
            }
        }
    };

    for which in 0..5 {
        let err = grad_check(build(which), &param_tensors, 1e-5).unwrap();
        assert!(err < 1e-3, "output {which} gradient error {err:.3e}");
    }
}

/// Rebinds basis params through externally supplied vars (grad_check hands us
/// the vars; the production path uses Binding over a store).
struct BindingFromVars(Vec<Var>);

fn bind_with(params: &BasisParams, tape: &mut Tape, binding: &BindingFromVars) -> Result<BasisVars> {
    use krc_core::lgssm::SsmDims;
    let SsmDims { d_z, d_y, d_u, k } = params.dims;
    let var_of = |id: krc_core::diffcore::ParamId| binding.0[id.index()];
    let mut rows_a = Vec::new();
    let mut rows_b = Vec::new();
    let mut rows_c = Vec::new();
    for ki in 0..k {
        rows_a.push(tape.reshape(var_of(params.a[ki]), vec![d_z * d_z])?);
        rows_b.push(tape.reshape(var_of(params.b[ki]), vec![d_z * d_u])?);
        rows_c.push(tape.reshape(var_of(params.c[ki]), vec![d_y * d_z])?);
    }
    let floor = |tape: &mut Tape, raw: Var| -> Result<Var> {
        let sp = tape.softplus(raw)?;
        tape.add_scalar(sp, NOISE_FLOOR)
    };
    let q = floor(tape, var_of(params.q_raw))?;
    let r = floor(tape, var_of(params.r_raw))?;
    let sigma = floor(tape, var_of(params.sigma_raw))?;
    Ok(BasisVars {
        a_stack: tape.stack_rows(&rows_a)?,
        b_stack: tape.stack_rows(&rows_b)?,
        c_stack: tape.stack_rows(&rows_c)?,
        q,
        r,
        sigma,
        dims: params.dims,
    })
}
