//! Kernel micro-benchmark for the dense shapes the encoder/decoder hit.

use krc_core::tensor::Tensor;
use std::time::Instant;

fn bench(name: &str, flops: f64, mut f: impl FnMut()) {
    // warmup
    f();
    let reps = 50;
    let tic = Instant::now();
    for _ in 0..reps {
        f();
    }
    let dt = tic.elapsed().as_secs_f64() / reps as f64;
    println!("{name}: {:.3} ms, {:.2} GFLOP/s", dt * 1e3, flops / dt / 1e9);
}

fn main() {
    let x = Tensor::filled(vec![25, 3072], 0.5);
    let w = Tensor::filled(vec![256, 3072], 0.01);
    let g = Tensor::filled(vec![25, 256], 0.1);

    bench("fwd  x(25,3072)·Wᵀ(256,3072)", 2.0 * 25.0 * 3072.0 * 256.0, || {
        let _ = x.matmul_nt(&w).unwrap();
    });
    bench("bwdA g(25,256)·W(256,3072)", 2.0 * 25.0 * 256.0 * 3072.0, || {
        let _ = g.matmul(&w).unwrap();
    });
    bench("bwdW gᵀ(25,256)·x(25,3072)", 2.0 * 25.0 * 256.0 * 3072.0, || {
        let _ = g.matmul_tn(&x).unwrap();
    });

    let wd = Tensor::filled(vec![3072, 256], 0.01);
    let a = Tensor::filled(vec![25, 256], 0.3);
    bench("dec  a(25,256)·Wᵀ(3072,256)", 2.0 * 25.0 * 256.0 * 3072.0, || {
        let _ = a.matmul_nt(&wd.reshaped(vec![3072, 256]).unwrap()).unwrap();
    });
}
