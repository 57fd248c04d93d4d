//! Finite-difference validation of every differentiable op.
//!
//! Each case builds a scalar loss from an op under test, compares the
//! reverse-mode gradient against central differences in f64, and repeats a
//! couple of representative ops in f32 at looser tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use veilmap_autodiff::{Graph, Scalar, Tensor, Var};

/// Builds the loss from a leaf var; used for both autodiff and FD passes.
type Builder<F> = dyn Fn(&mut Graph<F>, Var) -> Var;

fn fd_check<F: Scalar>(shape: &[usize], seed: u64, tol: f64, build: &Builder<F>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let base: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();

    let eval = |data: &[f64]| -> f64 {
        let mut g = Graph::<F>::new();
        let x = g.leaf(Tensor::new(
            shape,
            data.iter().map(|&v| F::from_f64_lossy(v)).collect(),
        ));
        let loss = build(&mut g, x);
        g.value(loss).item().to_f64().unwrap()
    };

    // autodiff gradient
    let mut g = Graph::<F>::new();
    let x = g.leaf(Tensor::new(
        shape,
        base.iter().map(|&v| F::from_f64_lossy(v)).collect(),
    ));
    let loss = build(&mut g, x);
    let grads = g.backward(loss);
    let auto: Vec<f64> = grads
        .wrt(x)
        .expect("gradient must reach the leaf")
        .data()
        .iter()
        .map(|v| v.to_f64().unwrap())
        .collect();

    // central differences
    let h = if tol < 1e-4 { 1e-6 } else { 1e-3 };
    for i in 0..n {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let denom = fd.abs().max(auto[i].abs()).max(1.0);
        assert!(
            (fd - auto[i]).abs() / denom < tol,
            "element {i}: fd {fd} vs autodiff {}",
            auto[i]
        );
    }
}

fn fd64(shape: &[usize], seed: u64, build: &Builder<f64>) {
    fd_check::<f64>(shape, seed, 1e-6, build);
}

#[test]
fn grad_elementwise_chain() {
    fd64(&[2, 3], 1, &|g, x| {
        let a = g.mul(x, x);
        let b = g.add_scalar(a, 0.7);
        let c = g.mul_scalar(b, -1.3);
        let d = g.sub(c, x);
        g.sum_all(d)
    });
}

#[test]
fn grad_div() {
    fd64(&[4], 2, &|g, x| {
        let c = g.constant(Tensor::from_vec(vec![2.0, -3.0, 4.0, 5.0]));
        let d = g.add_scalar(x, 3.0); // keep denominators away from zero
        let q = g.div(c, d);
        let q2 = g.div(q, d);
        g.sum_all(q2)
    });
}

#[test]
fn grad_activations() {
    fd64(&[5], 3, &|g, x| {
        let s = g.sigmoid(x);
        let t = g.tanh(x);
        let e = g.exp(x);
        let sp = g.softplus(x);
        let sum1 = g.add(s, t);
        let sum2 = g.add(e, sp);
        let all = g.add(sum1, sum2);
        g.sum_all(all)
    });
}

#[test]
fn grad_relu_abs() {
    // offsets keep values away from the kink at zero where FD is invalid
    fd64(&[6], 4, &|g, x| {
        let shifted = g.add_scalar(x, 2.0);
        let r = g.relu(shifted);
        let shifted_neg = g.add_scalar(x, -2.5);
        let a = g.abs(shifted_neg);
        let s = g.add(r, a);
        g.sum_all(s)
    });
}

#[test]
fn grad_ln_sqrt() {
    fd64(&[4], 5, &|g, x| {
        let pos = g.add_scalar(x, 3.0);
        let l = g.ln(pos);
        let r = g.sqrt(pos);
        let s = g.add(l, r);
        g.sum_all(s)
    });
}

#[test]
fn grad_matmul_both_sides() {
    fd64(&[2, 3], 6, &|g, x| {
        let w = g.constant(Tensor::new(&[3, 2], vec![0.5, -1.0, 2.0, 0.3, -0.7, 1.1]));
        let y = g.matmul(x, w);
        let yt = g.transpose(y);
        let z = g.matmul(yt, x); // x appears on both sides
        g.sum_all(z)
    });
}

#[test]
fn grad_softmax_rows() {
    fd64(&[3, 4], 7, &|g, x| {
        let s = g.softmax_rows(x);
        let w = g.constant(Tensor::new(
            &[3, 4],
            vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.2, 2.0, -0.4, 1.5, 0.1, -0.6, 0.9],
        ));
        let p = g.mul(s, w);
        g.sum_all(p)
    });
}

#[test]
fn grad_max_lastdim() {
    fd64(&[3, 3], 8, &|g, x| {
        let m = g.max_lastdim(x);
        let sq = g.mul(m, m);
        g.sum_all(sq)
    });
}

#[test]
fn grad_conv2d_stride1_pad1() {
    fd64(&[2, 4, 4], 9, &|g, x| {
        let mut rng = ChaCha20Rng::seed_from_u64(100);
        let w: Vec<f64> = (0..3 * 2 * 3 * 3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let w = g.leaf(Tensor::new(&[3, 2, 3, 3], w));
        let y = g.conv2d(x, w, 1, 1);
        let sq = g.mul(y, y);
        g.sum_all(sq)
    });
}

#[test]
fn grad_conv2d_stride2() {
    fd64(&[3, 6, 6], 10, &|g, x| {
        let mut rng = ChaCha20Rng::seed_from_u64(101);
        let w: Vec<f64> = (0..4 * 3 * 3 * 3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let w = g.leaf(Tensor::new(&[4, 3, 3, 3], w));
        let y = g.conv2d(x, w, 2, 1);
        g.sum_all(y)
    });
}

#[test]
fn grad_conv2d_weight() {
    // gradient w.r.t. the kernel itself
    fd64(&[2, 1, 3, 3], 11, &|g, w| {
        let mut rng = ChaCha20Rng::seed_from_u64(102);
        let x: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = g.constant(Tensor::new(&[1, 5, 5], x));
        let y = g.conv2d(x, w, 1, 0);
        let sq = g.mul(y, y);
        g.sum_all(sq)
    });
}

#[test]
fn grad_upsample_bias_concat() {
    fd64(&[2, 3, 3], 12, &|g, x| {
        let up = g.upsample2x(x);
        let bias = g.constant(Tensor::from_vec(vec![0.3, -0.2]));
        let b = g.add_bias_channel(up, bias);
        let cat = g.concat_channels(&[b, up]);
        let sq = g.mul(cat, cat);
        g.sum_all(sq)
    });
}

#[test]
fn grad_rows_ops() {
    fd64(&[4, 3], 13, &|g, x| {
        let sel = g.select_rows(x, &[2, 0, 2]); // repeated row: scatter-add path
        let top = g.select_rows(x, &[1]);
        let b = g.broadcast_rows(top, 3);
        let s = g.add(sel, b);
        let cat = g.concat_rows(&[s, sel]);
        let sq = g.mul(cat, cat);
        g.sum_all(sq)
    });
}

#[test]
fn grad_reshape_mean() {
    fd64(&[2, 6], 14, &|g, x| {
        let r = g.reshape(x, &[3, 4]);
        let sq = g.mul(r, r);
        g.mean_all(sq)
    });
}

#[test]
fn grad_f32_smoke() {
    // representative composite in single precision
    fd_check::<f32>(&[2, 3], 15, 2e-2, &|g, x| {
        let s = g.sigmoid(x);
        let w = g.constant(Tensor::new(&[3, 2], vec![0.5, -1.0, 2.0, 0.3, -0.7, 1.1]));
        let y = g.matmul(s, w);
        let t = g.tanh(y);
        g.sum_all(t)
    });
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let x: Vec<f64> = (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = g.leaf(Tensor::new(&[3, 4, 4], x));
        let w: Vec<f64> = (0..2 * 3 * 9).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let w = g.leaf(Tensor::new(&[2, 3, 3, 3], w));
        let y = g.conv2d(x, w, 1, 1);
        let s = g.sigmoid(y);
        let loss = g.sum_all(s);
        let grads = g.backward(loss);
        (
            g.value(loss).item().to_bits(),
            grads.wrt(x).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}
