//! Scratch diagnostics for tuning the desk-scale configuration: baseline J,
//! per-epoch wall-clock, filtered-state error, and a small closed-loop run.
//! Run with `cargo run --release -p krc-core --example probe -- [episodes] [epochs]`.

use krc_core::elbo::{train, train_ensemble_from_dataset, ElboVariant, ImageSource, TargetSource, TrainConfig};
use krc_core::experiments::{evaluate_tracking, openloop_baseline};
use krc_core::nets::{EnsembleConfig, ModelDims};
use krc_core::planner::{mpc_run, BetaMode, CemParams, MpcOptions, TaskSpec};
use krc_core::rng::Streams;
use krc_core::valveworld::{collect_dataset, start_state, CollectConfig, DomainParams, TextureInterval};
use krc_core::diffcore::{Binding, Tape};
use krc_core::elbo::ModelCheckpoint;
use krc_core::valveworld::Episode;
use std::time::Instant;

/// Reconstruction quality, learned feature noise, and per-dimension filtered
/// error on a few episodes.
fn diagnostics(model: &ModelCheckpoint, dataset: &[Episode], input: ImageSource) {
    let ep = &dataset[dataset.len() - 1]; // a task episode
    let x_in = krc_core::elbo::input_of(ep, input);
    let mut tape = Tape::new();
    let binding = Binding::bind_all_frozen(&model.store, &mut tape);
    let mut rng = Streams::new(0).stream("diag", 0);
    let enc = model.encoder.encode_seq(&mut tape, &binding, x_in, &mut rng).unwrap();
    let dec = model.decoder.decode_seq(&mut tape, &binding, enc.mean).unwrap();
    let recon = tape.value(dec);
    let mut mse = 0.0;
    for (a, b) in recon.data().iter().zip(ep.x_can.data()) {
        mse += (a - b) * (a - b);
    }
    println!("recon rms on a task episode: {:.4}", (mse / recon.len() as f64).sqrt());

    let r_raw = model.store.value(model.basis.r_raw);
    let r: Vec<f64> = r_raw.data().iter().map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p() + 1e-6).collect();
    println!(
        "learned R diag: features {:?} prop {:?}",
        &r[..model.dims.d_a].iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
        &r[model.dims.d_a..].iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
    );
    let q_raw = model.store.value(model.basis.q_raw);
    let q: Vec<String> = q_raw.data().iter().map(|v| format!("{:.4}", v.max(0.0) + (-v.abs()).exp().ln_1p() + 1e-6)).collect();
    println!("learned Q diag: {q:?}");

    // per-dimension filtered error on the task episode
    let filtered = model.filter_episode(ep, x_in).unwrap();
    let mut dim_err = vec![0.0; model.dims.d_z];
    for (t, m) in filtered.means.iter().enumerate() {
        for d in 0..model.dims.d_z {
            dim_err[d] += (m.data()[d] - ep.z.at2(t, d)).abs() / filtered.means.len() as f64;
        }
    }
    println!("filtered per-dim |err| on task episode: {:?}", dim_err.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_eps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);

    for l in [20usize, 25] {
        println!("baseline J (mult 1.0, L={l}): {:.4}", openloop_baseline(1.0, l).unwrap());
    }

    let cfg = CollectConfig {
        n_random: (n_eps * 2) / 3,
        n_noisy_task: n_eps - (n_eps * 2) / 3 - 1,
        t_len: 25,
        noise_sigma_u: 0.03,
        texture_interval: TextureInterval::EachStep,
        speed_multiplier: 1.0,
    };
    let tic = Instant::now();
    let dataset = collect_dataset(&cfg, &Streams::new(7)).unwrap();
    println!("collected {} episodes in {:.2}s", dataset.len(), tic.elapsed().as_secs_f64());

    let dims = ModelDims {
        img_h: 32,
        img_w: 32,
        d_a: 8,
        d_b: 2,
        d_z: 4,
        d_u: 2,
        k: 4,
        enc_hidden: (256, 128),
        dec_hidden: (128, 256),
        dpn_hidden: 64,
    };
    let batch: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(16);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let input_source = match args.get(5).map(|s| s.as_str()) {
        Some("canonical") => ImageSource::Canonical,
        _ => ImageSource::Randomized,
    };
    let target_source = match args.get(6).map(|s| s.as_str()) {
        Some("randomized") => TargetSource::Randomized,
        _ => TargetSource::Canonical,
    };
    println!("sources: input {:?} target {:?}", input_source, target_source);
    let tcfg = TrainConfig {
        epochs,
        batch,
        lr,
        basis_lr_scale: 10.0,
        mc_samples: 1,
        variant: ElboVariant::Observed,
        input_source,
        target_source,
        grad_clip: 10.0,
        sigma_x2: 0.01,
        seed: 1,
    };
    let tic = Instant::now();
    let (mut model, log) = train(&dataset, dims, &tcfg, String::new()).unwrap();
    println!(
        "trained {} epochs (batch {batch}, lr {lr}) in {:.1}s ({:.2}s/epoch); elbo {:.1} -> {:.1}",
        epochs,
        tic.elapsed().as_secs_f64(),
        log.iter().map(|r| r.seconds).sum::<f64>() / log.len() as f64,
        log.first().unwrap().elbo,
        log.last().unwrap().elbo
    );
    let curve: Vec<String> = log.iter().step_by((epochs / 10).max(1)).map(|r| format!("{:.0}", r.elbo)).collect();
    println!("elbo curve: {}", curve.join(" "));
    diagnostics(&model, &dataset, input_source);

    // held-out episodes from a different seed
    let held_cfg = CollectConfig { n_random: 6, n_noisy_task: 3, ..cfg.clone() };
    let held = collect_dataset(&held_cfg, &Streams::new(1001)).unwrap();
    let err = model
        .state_estimation_error(&held, |ep| krc_core::elbo::input_of(ep, input_source).clone())
        .unwrap();
    println!("filtered-state error on held-out episodes: {:.4}", err);

    let tic = Instant::now();
    let ens = train_ensemble_from_dataset(&dataset, EnsembleConfig::default(), 11).unwrap();
    println!("ensemble trained in {:.1}s", tic.elapsed().as_secs_f64());
    model.ensemble = Some(ens);

    let task = TaskSpec::valve(1.0, 20);
    let cem = CemParams::default();
    let baseline = openloop_baseline(1.0, 20).unwrap();
    for (label, beta) in [("auto", BetaMode::Auto), ("zero", BetaMode::Fixed(0.0))] {
        let tic = Instant::now();
        let mut wins = 0;
        let trials = 8;
        let mut js = Vec::new();
        for trial in 0..trials {
            let streams = Streams::new(100 + trial);
            let domain = DomainParams::sample(&mut streams.stream("domain", 0));
            let log = mpc_run(
                &start_state(),
                &model,
                &task,
                &cem,
                &domain,
                &MpcOptions { beta, ..Default::default() },
                &streams.scoped("mpc", 0),
            )
            .unwrap();
            let j = evaluate_tracking(&log).unwrap();
            if j < baseline {
                wins += 1;
            }
            js.push(format!("{j:.3}"));
        }
        println!(
            "mpc beta={label}: {}/{} wins vs baseline {:.4} in {:.1}s  J: {}",
            wins,
            trials,
            baseline,
            tic.elapsed().as_secs_f64(),
            js.join(" ")
        );
    }
}
