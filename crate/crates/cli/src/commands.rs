//! Subcommand implementations. Each writes its artifacts plus a `run.meta`
//! carrying the config snapshot, seed, and content hash, so any table row is
//! regenerable from the recorded inputs.

use crate::{Command, Common};
use krc_core::elbo::{train, train_ensemble_from_dataset, ElboVariant, ModelCheckpoint};
use krc_core::experiments::{
    ablate_dim_a, evaluate_tracking, evaluate_variant, export_latent, openloop_baseline,
    run_speed_tasks, AblationSettings, EvalSettings, VariantName, VariantSpec,
};
use krc_core::io::{self, KrcConfig};
use krc_core::planner::{mpc_run, MpcOptions, TaskSpec};
use krc_core::rng::Streams;
use krc_core::tensor::Tensor;
use krc_core::valveworld::{self, collect_dataset, TextureInterval};
use krc_core::{KrcError, Result};
use std::path::Path;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, texture_interval } => gen_data(&common, texture_interval),
        Command::Train { common, data, variant } => cmd_train(&common, &data, variant),
        Command::TrainEnsemble { common, data, checkpoint } => train_ensemble(&common, &data, &checkpoint),
        Command::Eval { common, checkpoint } => eval_one(&common, &checkpoint),
        Command::Mpc { common, checkpoint, occlusion } => mpc_once(&common, &checkpoint, occlusion),
        Command::Compare { common, models } => compare(&common, &models),
        Command::Occlusion { common, models } => occlusion_challenge(&common, &models),
        Command::SpeedTasks { common, models } => speed_tasks(&common, &models),
        Command::AblateDimA { common } => ablate(&common),
        Command::ExportLatent { common, checkpoint, data } => latent(&common, &checkpoint, &data),
        Command::Plot { common, input, kind } => crate::plot::plot(&common, &input, &kind),
    }
}

pub fn write_meta(common: &Common, cfg: &KrcConfig, command: &str) -> Result<()> {
    let snapshot = cfg.snapshot();
    let hash = io::run_hash(&snapshot, common.seed, command);
    let text = format!(
        "command = {command}\nseed = {}\nconfig_hash = {hash}\n\n# config snapshot\n{snapshot}",
        common.seed
    );
    io::atomic_write(&common.out.join("run.meta"), text.as_bytes())
}

fn gen_data(common: &Common, texture_override: Option<String>) -> Result<()> {
    let mut cfg = common.load()?;
    if let Some(t) = texture_override {
        cfg.dataset.texture_interval = match t.as_str() {
            "each_step" => TextureInterval::EachStep,
            "each_sequence" => TextureInterval::EachSequence,
            other => return Err(KrcError::Config(format!("texture interval '{other}'"))),
        };
    }
    let collect = cfg.dataset.collect_config();
    let episodes = collect_dataset(&collect, &Streams::new(common.seed))?;
    io::save_dataset(&common.out, &episodes, &collect, common.seed)?;
    write_meta(common, &cfg, "gen-data")?;
    println!("wrote {} episodes to {}", episodes.len(), common.out.display());
    Ok(())
}

/// Resolve a variant name into the train-section overrides it implies.
pub fn variant_train_overrides(cfg: &KrcConfig, name: Option<&str>, seed: u64) -> Result<(krc_core::elbo::TrainConfig, Option<VariantSpec>)> {
    let mut tc = cfg.train.train_config(cfg.model.sigma_x2, seed);
    let spec = match name {
        None => None,
        Some(n) => {
            let vname = VariantName::parse(n)?;
            if vname == VariantName::Random {
                return Err(KrcError::Config("the random policy has no trainable model".to_string()));
            }
            let spec = VariantSpec::of(vname);
            tc.variant = spec.elbo_variant;
            tc.input_source = spec.input_source;
            tc.target_source = spec.target_source;
            Some(spec)
        }
    };
    Ok((tc, spec))
}

fn cmd_train(common: &Common, data: &Path, variant: Option<String>) -> Result<()> {
    let cfg = common.load()?;
    let loaded = io::load_dataset(data)?;
    let (tc, spec) = variant_train_overrides(&cfg, variant.as_deref(), common.seed)?;
    if let Some(spec) = &spec {
        if loaded.cfg.texture_interval != spec.texture_interval {
            return Err(KrcError::Config(format!(
                "variant {} expects a dataset with texture interval {:?}, got {:?}",
                spec.name.as_str(),
                spec.texture_interval,
                loaded.cfg.texture_interval
            )));
        }
    }
    let dims = cfg.model.dims();
    let snapshot = cfg.snapshot();
    let (model, log) = train(&loaded.episodes, dims, &tc, snapshot)?;

    io::save_checkpoint(&common.out.join("checkpoint.krck"), &model)?;
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|r| vec![r.epoch.to_string(), r.elbo.to_string(), r.seconds.to_string()])
        .collect();
    io::write_csv(&common.out.join("train_log.csv"), &["epoch", "elbo", "seconds"], &rows)?;
    write_meta(common, &cfg, "train")?;
    println!(
        "trained {} epochs; final objective {:.2}",
        log.len(),
        log.last().map(|r| r.elbo).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn train_ensemble(common: &Common, data: &Path, checkpoint: &Path) -> Result<()> {
    let cfg = common.load()?;
    let loaded = io::load_dataset(data)?;
    let mut model = io::load_checkpoint(checkpoint)?;
    let ens = train_ensemble_from_dataset(&loaded.episodes, cfg.ensemble.ensemble_config(), common.seed)?;
    model.ensemble = Some(ens);
    io::save_checkpoint(&common.out.join("checkpoint.krck"), &model)?;
    write_meta(common, &cfg, "train-ensemble")?;
    println!("ensemble attached; wrote {}", common.out.join("checkpoint.krck").display());
    Ok(())
}

fn eval_one(common: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = common.load()?;
    let model = io::load_checkpoint(checkpoint)?;
    let settings = EvalSettings {
        n_domains: cfg.eval.n_domains,
        l_steps: cfg.task.l_steps,
        speed_multiplier: cfg.task.speed_multiplier,
        cem: cfg.cem.cem_params(),
        occlusion: false,
        init_state_noise: None,
    };
    let spec = VariantSpec::of(VariantName::KrcWz);
    let models = vec![model];
    let row = evaluate_variant(&spec, &models, &settings, &Streams::new(common.seed))?;
    let baseline = openloop_baseline(settings.speed_multiplier, settings.l_steps)?;
    let rows: Vec<Vec<String>> = row
        .js
        .iter()
        .enumerate()
        .map(|(i, j)| vec![i.to_string(), j.to_string(), (j < &baseline).to_string()])
        .collect();
    io::write_csv(&common.out.join("eval.csv"), &["trial", "j", "success"], &rows)?;
    write_meta(common, &cfg, "eval")?;
    println!("success {}/{} (baseline J {:.4})", row.successes, row.trials, baseline);
    Ok(())
}

fn mpc_once(common: &Common, checkpoint: &Path, occlusion: bool) -> Result<()> {
    let cfg = common.load()?;
    let model = io::load_checkpoint(checkpoint)?;
    let task = TaskSpec::valve(cfg.task.speed_multiplier, cfg.task.l_steps);
    let streams = Streams::new(common.seed);
    let domain = valveworld::DomainParams::sample(&mut streams.stream("domain", 0));
    let options = MpcOptions {
        occlusion,
        beta: cfg.task.beta_mode()?,
        ..Default::default()
    };
    let log = mpc_run(
        &valveworld::start_state(),
        &model,
        &task,
        &cfg.cem.cem_params(),
        &domain,
        &options,
        &streams.scoped("mpc", 0),
    )?;
    let j = evaluate_tracking(&log)?;

    // per-step CSV: target angle, achieved angle, J increment, planned cost
    let rows: Vec<Vec<String>> = (0..log.actions.len())
        .map(|l| {
            let inc = krc_core::experiments::wrap_symmetry(log.target_thetas[l] - log.thetas[l]).abs();
            vec![
                (l + 1).to_string(),
                log.target_thetas[l].to_string(),
                log.thetas[l].to_string(),
                inc.to_string(),
                log.planned_costs[l].to_string(),
            ]
        })
        .collect();
    io::write_csv(
        &common.out.join("mpc_steps.csv"),
        &["step", "theta_target", "theta", "j_increment", "planned_cost"],
        &rows,
    )?;

    // episode-format record of the executed run
    let t_len = log.actions.len();
    let p = valveworld::PIXELS;
    let mut x_ran = Tensor::zeros(vec![t_len, p]);
    let mut x_can = Tensor::zeros(vec![t_len, p]);
    let mut b = Tensor::zeros(vec![t_len, 2]);
    let mut z = Tensor::zeros(vec![t_len, 4]);
    let mut u = Tensor::zeros(vec![t_len, 2]);
    for l in 0..t_len {
        x_ran.data_mut()[l * p..(l + 1) * p].copy_from_slice(log.images[l].data());
        let s = &log.states[l + 1];
        x_can.data_mut()[l * p..(l + 1) * p].copy_from_slice(valveworld::render_canonical(s).data());
        b.data_mut()[l * 2..(l + 1) * 2].copy_from_slice(s.proprio().data());
        z.data_mut()[l * 4..(l + 1) * 4].copy_from_slice(s.export().data());
        u.data_mut()[l * 2..(l + 1) * 2].copy_from_slice(&log.actions[l]);
    }
    let episode = valveworld::Episode {
        x_ran,
        x_can,
        b,
        z,
        u,
        domain,
        thetas: log.states[1..].iter().map(|s| s.theta).collect(),
    };
    let collect = cfg.dataset.collect_config();
    io::save_dataset(&common.out.join("execution"), &[episode], &collect, common.seed)?;
    write_meta(common, &cfg, "mpc")?;
    println!("J = {j:.4} (baseline {:.4})", openloop_baseline(cfg.task.speed_multiplier, cfg.task.l_steps)?);
    Ok(())
}

/// Load `<models>/<variant>/seed<k>.krck` for k in 0..n_seeds.
pub fn load_variant_models(models_dir: &Path, name: VariantName, n_seeds: usize) -> Result<Vec<ModelCheckpoint>> {
    let mut out = Vec::with_capacity(n_seeds);
    for k in 0..n_seeds {
        let path = models_dir.join(name.as_str()).join(format!("seed{k}.krck"));
        if !path.exists() {
            return Err(KrcError::Config(format!(
                "missing checkpoint for variant {} (expected {})",
                name.as_str(),
                path.display()
            )));
        }
        out.push(io::load_checkpoint(&path)?);
    }
    Ok(out)
}

fn compare(common: &Common, models_dir: &Path) -> Result<()> {
    let cfg = common.load()?;
    let settings = EvalSettings {
        n_domains: cfg.eval.n_domains,
        l_steps: cfg.task.l_steps,
        speed_multiplier: cfg.task.speed_multiplier,
        cem: cfg.cem.cem_params(),
        occlusion: false,
        init_state_noise: None,
    };
    let streams = Streams::new(common.seed);
    let mut rows = Vec::new();
    let mut detail_rows: Vec<Vec<String>> = Vec::new();
    let baseline = openloop_baseline(settings.speed_multiplier, settings.l_steps)?;
    for vname in &cfg.eval.variants {
        let name = VariantName::parse(vname)?;
        let spec = VariantSpec::of(name);
        let models = if name == VariantName::Random {
            Vec::new()
        } else {
            load_variant_models(models_dir, name, cfg.eval.n_seeds)?
        };
        let row = evaluate_variant(&spec, &models, &settings, &streams.scoped(name.as_str(), 0))?;
        for (i, j) in row.js.iter().enumerate() {
            detail_rows.push(vec![
                row.name.clone(),
                i.to_string(),
                j.to_string(),
                (j < &baseline).to_string(),
            ]);
        }
        println!("{:<18} {:>3}/{}", row.name, row.successes, row.trials);
        rows.push(vec![
            row.name.clone(),
            row.successes.to_string(),
            row.trials.to_string(),
            (row.successes as f64 / row.trials as f64).to_string(),
            row.mean_j.to_string(),
            baseline.to_string(),
        ]);
    }
    io::write_csv(
        &common.out.join("compare.csv"),
        &["variant", "successes", "trials", "rate", "mean_j", "j_baseline"],
        &rows,
    )?;
    io::write_csv(&common.out.join("compare_trials.csv"), &["variant", "trial", "j", "success"], &detail_rows)?;
    write_meta(common, &cfg, "compare")?;
    Ok(())
}

fn occlusion_challenge(common: &Common, models_dir: &Path) -> Result<()> {
    let cfg = common.load()?;
    let settings = EvalSettings {
        n_domains: cfg.eval.n_domains,
        l_steps: cfg.task.l_steps,
        speed_multiplier: cfg.task.speed_multiplier,
        cem: cfg.cem.cem_params(),
        occlusion: true,
        init_state_noise: Some(cfg.eval.init_state_noise),
    };
    let streams = Streams::new(common.seed);
    let mut rows = Vec::new();
    for name in [VariantName::KrcWz, VariantName::KrncRand, VariantName::KrncTransparent] {
        let spec = VariantSpec::of(name);
        let models = load_variant_models(models_dir, name, cfg.eval.n_seeds)?;
        let row = evaluate_variant(&spec, &models, &settings, &streams.scoped(name.as_str(), 0))?;
        println!("{:<18} {:>3}/{}", row.name, row.successes, row.trials);
        rows.push(vec![
            row.name.clone(),
            row.successes.to_string(),
            row.trials.to_string(),
            (row.successes as f64 / row.trials as f64).to_string(),
            row.mean_j.to_string(),
        ]);
    }
    io::write_csv(
        &common.out.join("occlusion.csv"),
        &["variant", "successes", "trials", "rate", "mean_j"],
        &rows,
    )?;
    write_meta(common, &cfg, "occlusion")?;
    Ok(())
}

fn speed_tasks(common: &Common, models_dir: &Path) -> Result<()> {
    let cfg = common.load()?;
    let krc = load_variant_models(models_dir, VariantName::KrcWz, cfg.eval.n_seeds)?;
    let kc2 = load_variant_models(models_dir, VariantName::Kc2Wz, cfg.eval.n_seeds)?;
    let rows = run_speed_tasks(
        &krc,
        &kc2,
        &cfg.eval.multipliers,
        cfg.task.l_steps,
        &cfg.cem.cem_params(),
        &Streams::new(common.seed),
    )?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            println!(
                "{:>5.2}x  KRC {:.3} ± {:.3}   KC2 {:.3} ± {:.3}",
                r.multiplier, r.krc_mean, r.krc_std, r.kc2_mean, r.kc2_std
            );
            vec![
                r.multiplier.to_string(),
                r.krc_mean.to_string(),
                r.krc_std.to_string(),
                r.kc2_mean.to_string(),
                r.kc2_std.to_string(),
            ]
        })
        .collect();
    io::write_csv(
        &common.out.join("speed.csv"),
        &["multiplier", "krc_mean", "krc_std", "kc2_mean", "kc2_std"],
        &csv_rows,
    )?;
    write_meta(common, &cfg, "speed-tasks")?;
    Ok(())
}

fn ablate(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let streams = Streams::new(common.seed);

    let mut collect = cfg.dataset.collect_config();
    collect.n_random = cfg.ablation.n_train * 2 / 3;
    collect.n_noisy_task = cfg.ablation.n_train - collect.n_random - 1;
    let dataset = collect_dataset(&collect, &streams.scoped("ablation-train", 0))?;
    let mut held_cfg = collect.clone();
    held_cfg.n_random = cfg.ablation.n_held_out * 2 / 3;
    held_cfg.n_noisy_task = cfg.ablation.n_held_out - held_cfg.n_random - 1;
    let held = collect_dataset(&held_cfg, &streams.scoped("ablation-held", 0))?;

    let mut dims = cfg.model.dims();
    dims.enc_hidden = (cfg.ablation.enc_hidden[0], cfg.ablation.enc_hidden[1]);
    dims.dec_hidden = (cfg.ablation.dec_hidden[0], cfg.ablation.dec_hidden[1]);
    let mut train_cfg = cfg.train.train_config(cfg.model.sigma_x2, common.seed);
    // the study runs the general (smoother-based) objective single-threaded
    train_cfg.variant = ElboVariant::Unobserved;
    let settings = AblationSettings {
        dims_template: dims,
        epochs: cfg.ablation.epochs,
        warmup_epochs: cfg.ablation.warmup_epochs,
        train_cfg,
    };
    let rows = ablate_dim_a(&cfg.ablation.dims, &dataset, &held, &settings)?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            println!(
                "d_a {:>4}: {:.3} s/epoch, estimation error {:.4}{}",
                r.d_a,
                r.seconds_per_epoch,
                r.estimation_error,
                if r.intractable { " (intractable)" } else { "" }
            );
            vec![
                r.d_a.to_string(),
                r.seconds_per_epoch.to_string(),
                r.estimation_error.to_string(),
                r.intractable.to_string(),
            ]
        })
        .collect();
    io::write_csv(
        &common.out.join("ablation.csv"),
        &["d_a", "seconds_per_epoch", "estimation_error", "intractable"],
        &csv_rows,
    )?;
    write_meta(common, &cfg, "ablate-dim-a")?;
    Ok(())
}

fn latent(common: &Common, checkpoint: &Path, data: &Path) -> Result<()> {
    let cfg = common.load()?;
    let model = io::load_checkpoint(checkpoint)?;
    let loaded = io::load_dataset(data)?;
    let export = export_latent(&model, &loaded.episodes, cfg.train.input_source)?;
    let mut header: Vec<String> = (0..export.d_a).map(|i| format!("a{i}")).collect();
    header.extend(["proj_x".to_string(), "proj_y".to_string(), "color".to_string()]);
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let rows: Vec<Vec<String>> = export
        .rows
        .iter()
        .map(|r| r.iter().map(|v| v.to_string()).collect())
        .collect();
    io::write_csv(&common.out.join("latent.csv"), &header_refs, &rows)?;
    write_meta(common, &cfg, "export-latent")?;
    println!("wrote {} rows", export.rows.len());
    Ok(())
}
