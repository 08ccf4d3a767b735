//! Finite-difference fuzz over every tape primitive.
//!
//! Each primitive is exercised on random small shapes; the analytic gradient
//! must match central differences to a relative error below 1e-5. Composite
//! cases (two-layer network, smoother-style chains) are covered in the module
//! suites; this file pins the primitives themselves.

use krc_core::diffcore::{grad_check, Tape, Var};
use krc_core::tensor::Tensor;
use krc_core::Result;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::vector((0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(vec![r, c], (0..r * c).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Random symmetric positive-definite matrix with comfortable conditioning.
fn rand_spd(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let a = rand_mat(rng, n, n, -1.0, 1.0);
    let mut m = a.matmul_nt(&a).unwrap();
    for i in 0..n {
        let v = m.at2(i, i) + 0.5 + rng.gen_range(0.0..0.5);
        m.set2(i, i, v);
    }
    m
}

fn check<F>(name: &str, f: F, params: &[Tensor], tol: f64)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let err = grad_check(f, params, 1e-5).unwrap_or_else(|e| panic!("{name}: {e}"));
    assert!(err < tol, "{name}: fd mismatch {err:.3e}");
}

#[test]
fn primitives_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut cases = 0usize;

    for round in 0..12 {
        let n = 2 + (round % 3);
        let m = 2 + ((round + 1) % 3);

        let a = rand_vec(&mut rng, n, -2.0, 2.0);
        let b = rand_vec(&mut rng, n, -2.0, 2.0);
        let pos = rand_vec(&mut rng, n, 0.2, 3.0);
        let ma = rand_mat(&mut rng, m, n, -1.5, 1.5);
        let mb = rand_mat(&mut rng, n, m, -1.5, 1.5);
        let spd = rand_spd(&mut rng, n);

        check("add", |t, vs| { let x = t.add(vs[0], vs[1])?; t.sum_all(x) }, &[a.clone(), b.clone()], 1e-5);
        check("sub", |t, vs| { let x = t.sub(vs[0], vs[1])?; t.sum_all(x) }, &[a.clone(), b.clone()], 1e-5);
        check("mul", |t, vs| { let x = t.mul(vs[0], vs[1])?; t.sum_all(x) }, &[a.clone(), b.clone()], 1e-5);
        check("neg", |t, vs| { let x = t.neg(vs[0])?; t.sum_all(x) }, &[a.clone()], 1e-5);
        check("scale", |t, vs| { let x = t.scale(vs[0], -1.7)?; t.sum_all(x) }, &[a.clone()], 1e-5);
        check("add_scalar", |t, vs| { let x = t.add_scalar(vs[0], 0.3)?; t.sum_all(x) }, &[a.clone()], 1e-5);
        check("recip", |t, vs| { let x = t.recip(vs[0])?; t.sum_all(x) }, &[pos.clone()], 1e-5);
        check(
            "add_broadcast",
            |t, vs| { let x = t.add(vs[0], vs[1])?; let s = t.square(x)?; t.sum_all(s) },
            &[ma.clone(), rand_vec(&mut rng.clone(), n, -1.0, 1.0)],
            1e-5,
        );

        check(
            "matmul",
            |t, vs| { let x = t.matmul(vs[0], vs[1])?; let s = t.square(x)?; t.sum_all(s) },
            &[ma.clone(), mb.clone()],
            1e-5,
        );
        check(
            "matmul_nt",
            |t, vs| { let x = t.matmul_nt(vs[0], vs[1])?; let s = t.square(x)?; t.sum_all(s) },
            &[ma.clone(), rand_mat(&mut rng, m, n, -1.5, 1.5)],
            1e-5,
        );
        check(
            "matvec",
            |t, vs| { let x = t.matvec(vs[0], vs[1])?; let s = t.square(x)?; t.sum_all(s) },
            &[ma.clone(), a.clone()],
            1e-5,
        );
        check(
            "transpose",
            |t, vs| { let x = t.transpose(vs[0])?; let s = t.square(x)?; t.sum_all(s) },
            &[ma.clone()],
            1e-5,
        );
        check(
            "reshape",
            |t, vs| { let x = t.reshape(vs[0], vec![n, m])?; let s = t.square(x)?; t.sum_all(s) },
            &[ma.clone()],
            1e-5,
        );
        check(
            "concat+slice",
            |t, vs| {
                let c = t.concat_vec(&[vs[0], vs[1]])?;
                let s = t.slice_vec(c, 1, n)?;
                let q = t.square(s)?;
                t.sum_all(q)
            },
            &[a.clone(), b.clone()],
            1e-5,
        );
        check(
            "stack_rows+row",
            |t, vs| {
                let s = t.stack_rows(&[vs[0], vs[1]])?;
                let r = t.row(s, 1)?;
                let sq = t.square(r)?;
                let all = t.square(s)?;
                let x = t.sum_all(sq)?;
                let y = t.sum_all(all)?;
                t.add(x, y)
            },
            &[a.clone(), b.clone()],
            1e-5,
        );

        check("exp", |t, vs| { let x = t.exp(vs[0])?; t.sum_all(x) }, &[a.clone()], 1e-5);
        check("log", |t, vs| { let x = t.log(vs[0])?; t.sum_all(x) }, &[pos.clone()], 1e-5);
        check("tanh", |t, vs| { let x = t.tanh(vs[0])?; t.sum_all(x) }, &[a.clone()], 1e-5);
        check("sigmoid", |t, vs| { let x = t.sigmoid(vs[0])?; t.sum_all(x) }, &[a.clone()], 1e-5);
        check("sqrt", |t, vs| { let x = t.sqrt(vs[0])?; t.sum_all(x) }, &[pos.clone()], 1e-5);
        check("square", |t, vs| { let x = t.square(vs[0])?; t.sum_all(x) }, &[a.clone()], 1e-5);
        check("softplus", |t, vs| { let x = t.softplus(vs[0])?; t.sum_all(x) }, &[a.clone()], 1e-5);
        check(
            "clamp",
            |t, vs| { let x = t.clamp(vs[0], -1.0, 1.0)?; let s = t.square(x)?; t.sum_all(s) },
            &[rand_vec(&mut rng, n, 1.2, 3.0)], // away from the kink
            1e-5,
        );
        check(
            "softmax",
            |t, vs| {
                let s = t.softmax(vs[0])?;
                let w = t.leaf(rand_vec(&mut ChaCha8Rng::seed_from_u64(round as u64), n, -1.0, 1.0));
                t.dot(s, w)
            },
            &[a.clone()],
            1e-5,
        );

        check("mean", |t, vs| { let x = t.square(vs[0])?; t.mean_all(x) }, &[a.clone()], 1e-5);
        check(
            "sum_rows",
            |t, vs| { let r = t.sum_rows(vs[0])?; let s = t.square(r)?; t.sum_all(s) },
            &[ma.clone()],
            1e-5,
        );
        check("dot", |t, vs| t.dot(vs[0], vs[1]), &[a.clone(), b.clone()], 1e-5);
        check(
            "outer",
            |t, vs| { let o = t.outer(vs[0], vs[1])?; let s = t.square(o)?; t.sum_all(s) },
            &[a.clone(), b.clone()],
            1e-5,
        );
        check(
            "diag_embed",
            |t, vs| {
                let d = t.diag_embed(vs[0])?;
                let m2 = t.matmul(d, d)?;
                let s = t.square(m2)?;
                t.sum_all(s)
            },
            &[pos.clone()],
            1e-5,
        );

        check(
            "cholesky",
            |t, vs| { let l = t.cholesky(vs[0])?; let s = t.square(l)?; t.sum_all(s) },
            &[spd.clone()],
            1e-5,
        );
        check(
            "chol_solve_vec",
            |t, vs| { let x = t.chol_solve_vec(vs[0], vs[1])?; let s = t.square(x)?; t.sum_all(s) },
            &[spd.clone(), a.clone()],
            1e-5,
        );
        check(
            "chol_solve_mat",
            |t, vs| { let x = t.chol_solve_mat(vs[0], vs[1])?; let s = t.square(x)?; t.sum_all(s) },
            &[spd.clone(), mb.clone()],
            1e-5,
        );
        check("logdet", |t, vs| t.logdet(vs[0]), &[spd.clone()], 1e-5);

        cases += 31;
    }
    assert!(cases >= 100, "fuzz budget not met: {cases}");
}

#[test]
fn two_layer_tanh_network_gradient() {
    // loss of a 2-layer tanh regression net vs central differences
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w1 = rand_mat(&mut rng, 4, 3, -0.8, 0.8);
    let b1 = rand_vec(&mut rng, 4, -0.2, 0.2);
    let w2 = rand_mat(&mut rng, 2, 4, -0.8, 0.8);
    let b2 = rand_vec(&mut rng, 2, -0.2, 0.2);
    let x = rand_vec(&mut rng, 3, -1.0, 1.0);
    let target = rand_vec(&mut rng, 2, -1.0, 1.0);

    let err = grad_check(
        move |t, vs| {
            let xi = t.leaf(x.clone());
            let ti = t.leaf(target.clone());
            let h = t.matvec(vs[0], xi)?;
            let h = t.add(h, vs[1])?;
            let h = t.tanh(h)?;
            let o = t.matvec(vs[2], h)?;
            let o = t.add(o, vs[3])?;
            let d = t.sub(o, ti)?;
            let sq = t.square(d)?;
            t.sum_all(sq)
        },
        &[w1, b1, w2, b2],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "two-layer net relative error {err:.3e}");
}

#[test]
fn gradients_are_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let w = rand_mat(&mut rng, 3, 3, -1.0, 1.0);
        let x = rand_vec(&mut rng, 3, -1.0, 1.0);
        krc_core::diffcore::grad(
            |t, vs| {
                let y = t.matvec(vs[0], vs[1])?;
                let s = t.tanh(y)?;
                let q = t.square(s)?;
                t.sum_all(q)
            },
            &[w, x],
        )
        .unwrap()
    };
    let g1 = run();
    let g2 = run();
    for (a, b) in g1.iter().zip(&g2) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
