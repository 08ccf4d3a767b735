//! Supervised probe of the randomized→canonical translation core: can the
//! dense encoder/decoder pair fit the mapping at all, with and without input
//! standardization? `cargo run --release -p krc-core --example rcan_probe --
//! [frames] [updates] [std|raw] [h1] [h2]`

use krc_core::diffcore::optim::Adam;
use krc_core::diffcore::{Binding, ParamStore, Tape};
use krc_core::nets::Dense;
use krc_core::rng::Streams;
use krc_core::tensor::Tensor;
use krc_core::valveworld::{collect_dataset, CollectConfig, TextureInterval, PIXELS};
use rand::Rng;
use std::time::Instant;

fn standardize_rows(x: &Tensor) -> Tensor {
    let (t, p) = (x.shape()[0], x.shape()[1]);
    let px = p / 3;
    let mut out = x.clone();
    for r in 0..t {
        for c in 0..3 {
            let mut mean = 0.0;
            for i in 0..px {
                mean += x.data()[r * p + i * 3 + c];
            }
            mean /= px as f64;
            let mut var = 0.0;
            for i in 0..px {
                let d = x.data()[r * p + i * 3 + c] - mean;
                var += d * d;
            }
            let std = (var / px as f64).sqrt() + 1e-3;
            for i in 0..px {
                let v = (x.data()[r * p + i * 3 + c] - mean) / std;
                out.data_mut()[r * p + i * 3 + c] = v;
            }
        }
    }
    out
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let frames: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let updates: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let mode = args.get(3).cloned().unwrap_or_else(|| "std".to_string());
    let h1: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(256);
    let h2: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(128);
    let d_a = 8usize;

    let n_eps = frames / 25;
    let cfg = CollectConfig {
        n_random: n_eps - 1,
        n_noisy_task: 0,
        t_len: 25,
        noise_sigma_u: 0.02,
        texture_interval: TextureInterval::EachStep,
        speed_multiplier: 1.0,
    };
    let eps = collect_dataset(&cfg, &Streams::new(3)).unwrap();
    let mut x_in_rows = Vec::new();
    let mut x_out_rows = Vec::new();
    for ep in &eps {
        let xin = if mode == "std" { standardize_rows(&ep.x_ran) } else { ep.x_ran.clone() };
        for t in 0..ep.t_len() {
            x_in_rows.push(xin.row(t).to_vec());
            x_out_rows.push(ep.x_can.row(t).to_vec());
        }
    }
    let n = x_in_rows.len();
    println!("{n} frames, mode {mode}, trunk ({h1},{h2}), bottleneck {d_a}");

    let streams = Streams::new(9);
    let mut store = ParamStore::new();
    let mut rng = streams.stream("init", 0);
    let l1 = Dense::init(&mut store, "l1", PIXELS, h1, &mut rng);
    let l2 = Dense::init(&mut store, "l2", h1, h2, &mut rng);
    let bott = Dense::init(&mut store, "bott", h2, d_a, &mut rng);
    let d1 = Dense::init(&mut store, "d1", d_a, h2, &mut rng);
    let d2 = Dense::init(&mut store, "d2", h2, h1, &mut rng);
    let out = Dense::init(&mut store, "out", h1, PIXELS, &mut rng);
    let mut opt = Adam::new(&store, 2e-3);

    let batch = 32;
    let mut order_rng = streams.stream("order", 0);
    let tic = Instant::now();
    for step in 0..updates {
        let mut xb = Vec::with_capacity(batch * PIXELS);
        let mut yb = Vec::with_capacity(batch * PIXELS);
        for _ in 0..batch {
            let i = order_rng.gen_range(0..n);
            xb.extend_from_slice(&x_in_rows[i]);
            yb.extend_from_slice(&x_out_rows[i]);
        }
        let xb = Tensor::from_vec(vec![batch, PIXELS], xb).unwrap();
        let yb = Tensor::from_vec(vec![batch, PIXELS], yb).unwrap();

        let mut tape = Tape::new();
        let binding = Binding::bind_all(&store, &mut tape);
        let x = tape.leaf(xb);
        let t1 = l1.fwd_mat(&mut tape, &binding, x).unwrap();
        let t1 = tape.tanh(t1).unwrap();
        let t2 = l2.fwd_mat(&mut tape, &binding, t1).unwrap();
        let t2 = tape.tanh(t2).unwrap();
        let a = bott.fwd_mat(&mut tape, &binding, t2).unwrap();
        let g1 = d1.fwd_mat(&mut tape, &binding, a).unwrap();
        let g1 = tape.tanh(g1).unwrap();
        let g2 = d2.fwd_mat(&mut tape, &binding, g1).unwrap();
        let g2 = tape.tanh(g2).unwrap();
        let o = out.fwd_mat(&mut tape, &binding, g2).unwrap();
        let o = tape.sigmoid(o).unwrap();
        let y = tape.leaf(yb);
        let d = tape.sub(o, y).unwrap();
        let sq = tape.square(d).unwrap();
        let loss = tape.mean_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gs = binding.collect_grads(&tape, &grads);
        opt.step(&mut store, &gs);

        if step % (updates / 10).max(1) == 0 || step == updates - 1 {
            println!(
                "  update {step:>5}: rms {:.4} ({:.0}s)",
                tape.value(loss).item().unwrap().sqrt(),
                tic.elapsed().as_secs_f64()
            );
        }
    }
}
