use super::*;
use rand::Rng;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Brute-force cross-correlation written directly from the definition,
/// over an explicitly zero-padded copy of the input. Shares nothing with
/// the kernels module.
fn conv_oracle(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (f, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0.0; n * c * ph * pw];
    for i in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    padded[((i * c + ci) * ph + y + pad) * pw + xx + pad] =
                        x[((i * c + ci) * h + y) * w + xx];
                }
            }
        }
    }
    let oh = (ph - kh) / stride + 1;
    let ow = (pw - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for i in 0..n {
        for fo in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                acc += padded
                                    [((i * c + ci) * ph + oy * stride + ky) * pw + ox * stride + kx]
                                    * k[((fo * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((i * f + fo) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv1x1_identity_kernel_is_identity() {
    let mut rng = crate::rng::stream(1, &[1]);
    let x = rand_tensor(&mut rng, &[2, 3, 4, 4]);
    // identity matrix over channels
    let mut k = vec![0.0; 3 * 3];
    for c in 0..3 {
        k[c * 3 + c] = 1.0;
    }
    let tape = Tape::new();
    let y = tape.conv2d(&x, &Tensor::new(&[3, 3, 1, 1], k).unwrap(), 1, 0).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn conv_zero_kernel_grad_is_correlation_with_upstream() {
    let mut rng = crate::rng::stream(1, &[2]);
    let x = rand_tensor(&mut rng, &[1, 2, 4, 4]);
    let k = Tensor::param(&[1, 2, 3, 3], vec![0.0; 18]).unwrap();
    let tape = Tape::new();
    let y = tape.conv2d(&x, &k, 1, 1).unwrap();
    assert!(y.to_vec().iter().all(|&v| v == 0.0));
    let loss = tape.sum(&y);
    tape.backward(&loss).unwrap();
    // with upstream grad all-ones, dk = correlation of x with ones
    let dk = k.grad().unwrap();
    let geo = kernels::ConvGeo {
        n: 1, c: 2, h: 4, w: 4, f: 1, kh: 3, kw: 3, stride: 1, padding: 1, oh: 4, ow: 4,
    };
    let expect = kernels::conv2d_backward_kernel(&vec![1.0; 16], &x.data(), &geo);
    // cross-check the correlation claim against a hand loop on one entry
    let mut hand = 0.0;
    for iy in 0..4usize {
        for ix in 0..4usize {
            // kernel tap (ky=1,kx=1) hits every in-bounds pixel, channel 0
            hand += x.data()[(iy) * 4 + ix];
        }
    }
    assert!((dk[4] - hand).abs() < 1e-12);
    for (a, b) in dk.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// Exact adjoints of sum(conv * upstream) by direct loops over the padded
/// input, written from the cross-correlation definition.
fn conv_grad_oracle(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (f, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    upstream: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut dx = vec![0.0; n * c * h * w];
    let mut dk = vec![0.0; f * c * kh * kw];
    for i in 0..n {
        for fo in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = upstream[((i * f + fo) * oh + oy) * ow + ox];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((i * c + ci) * h + iy as usize) * w + ix as usize;
                                dx[xi] += gv * k[((fo * c + ci) * kh + ky) * kw + kx];
                                dk[((fo * c + ci) * kh + ky) * kw + kx] += gv * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

#[test]
fn conv_matches_loop_oracle_values_and_grads() {
    let mut rng = crate::rng::stream(2, &[3]);
    let x = rand_tensor(&mut rng, &[2, 3, 4, 4]);
    let k = rand_tensor(&mut rng, &[2, 3, 3, 3]);
    let upstream = rand_tensor(&mut rng, &[2, 2, 4, 4]);
    x.set_requires_grad(true);
    k.set_requires_grad(true);
    let tape = Tape::new();
    let y = tape.conv2d(&x, &k, 1, 1).unwrap();
    let oracle = conv_oracle(&x.data(), (2, 3, 4, 4), &k.data(), (2, 3, 3), 1, 1);
    for (a, b) in y.data().iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-12);
    }
    let weighted = tape.mul(&y, &upstream).unwrap();
    let loss = tape.sum(&weighted);
    tape.backward(&loss).unwrap();
    let (dx, dk) =
        conv_grad_oracle(&x.data(), (2, 3, 4, 4), &k.data(), (2, 3, 3), 1, 1, &upstream.data());
    for (a, b) in x.grad().unwrap().iter().zip(&dx) {
        assert!((a - b).abs() <= 1e-12);
    }
    for (a, b) in k.grad().unwrap().iter().zip(&dk) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn conv_shape_mismatch_reports_axes() {
    let x: Tensor<f64> = Tensor::zeros(&[1, 2, 4, 4]);
    let k: Tensor<f64> = Tensor::zeros(&[1, 3, 3, 3]);
    let tape: Tape = Tape::new();
    let err = tape.conv2d(&x, &k, 1, 1).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("axis 1"), "got: {msg}");
}

#[test]
fn avg_pool_constant_stays_constant() {
    let x: Tensor<f64> = Tensor::new(&[1, 1, 5, 5], vec![3.25; 25]).unwrap();
    let tape = Tape::new();
    let y = tape.avg_pool3x3(&x, 1).unwrap();
    assert!(y.to_vec().iter().all(|&v| (v - 3.25).abs() < 1e-15));
}

#[test]
fn avg_pool_center_of_1_to_9_is_5() {
    let x = Tensor::new(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let tape = Tape::new();
    let y = tape.avg_pool3x3(&x, 1).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 3, 3]);
    assert!((y.data()[4] - 5.0).abs() < 1e-15);
    // corner window sees 4 in-bounds cells: (1+2+4+5)/4
    assert!((y.data()[0] - 3.0).abs() < 1e-15);
}

#[test]
fn avg_pool_grads_match_finite_differences() {
    let mut rng = crate::rng::stream(3, &[4]);
    let x = rand_tensor(&mut rng, &[1, 2, 4, 4]);
    x.set_requires_grad(true);
    let tape = Tape::new();
    let y = tape.avg_pool3x3(&x, 1).unwrap();
    let weights = rand_tensor(&mut rng, &[1, 2, 4, 4]);
    let weighted = tape.mul(&y, &weights).unwrap();
    let loss = tape.sum(&weighted);
    tape.backward(&loss).unwrap();
    let fd = finite_diff_grad(
        &mut |p: &Tensor<f64>| {
            let t = Tape::new();
            let y = t.avg_pool3x3(p, 1).unwrap();
            let w = t.mul(&y, &weights).unwrap();
            t.sum(&w).item()
        },
        &x,
        1e-5,
    );
    for (a, b) in x.grad().unwrap().iter().zip(fd.data().iter()) {
        assert!(rel_err(*a, *b) <= 1e-6);
    }
}

#[test]
fn relu_basics() {
    let x = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
    let tape = Tape::new();
    let y = tape.relu(&x);
    assert_eq!(y.to_vec(), vec![0.0, 0.0, 2.0]);
}

#[test]
fn linear_identity_passthrough() {
    let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let mut wdata = vec![0.0; 9];
    for i in 0..3 {
        wdata[i * 3 + i] = 1.0;
    }
    let w = Tensor::new(&[3, 3], wdata).unwrap();
    let b = Tensor::zeros(&[3]);
    let tape = Tape::new();
    let y = tape.linear(&x, &w, &b).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn concat_routes_each_grad_slice_to_its_input() {
    let mut rng = crate::rng::stream(4, &[5]);
    let a = rand_tensor(&mut rng, &[2, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[2, 1, 3, 3]);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    let weights = rand_tensor(&mut rng, &[2, 3, 3, 3]);
    let tape = Tape::new();
    let y = tape.concat_channels(&[a.clone(), b.clone()]).unwrap();
    let weighted = tape.mul(&y, &weights).unwrap();
    let loss = tape.sum(&weighted);
    tape.backward(&loss).unwrap();
    for (t, shape) in [(&a, [2usize, 2, 3, 3]), (&b, [2, 1, 3, 3])] {
        let fd = finite_diff_grad(
            &mut |p: &Tensor<f64>| {
                let tt = Tape::new();
                let parts = if shape[1] == 2 {
                    vec![p.clone(), b.clone()]
                } else {
                    vec![a.clone(), p.clone()]
                };
                let y = tt.concat_channels(&parts).unwrap();
                let w = tt.mul(&y, &weights).unwrap();
                tt.sum(&w).item()
            },
            t,
            1e-5,
        );
        for (ga, gb) in t.grad().unwrap().iter().zip(fd.data().iter()) {
            assert!(rel_err(*ga, *gb) <= 1e-6);
        }
    }
}

#[test]
fn softmax_uniform_logits_gives_ln_k() {
    let logits: Tensor<f64> = Tensor::zeros(&[4, 10]);
    let tape = Tape::new();
    let (loss, probs) = tape.softmax_cross_entropy(&logits, &[0, 3, 5, 9]).unwrap();
    assert!((loss.item() - 10f64.ln()).abs() < 1e-12);
    for i in 0..4 {
        let row: f64 = probs.data()[i * 10..(i + 1) * 10].iter().sum();
        assert!((row - 1.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_confident_correct_logit_gives_near_zero_loss() {
    let mut data = vec![0.0; 5];
    data[2] = 50.0;
    let logits = Tensor::new(&[1, 5], data).unwrap();
    let tape = Tape::new();
    let (loss, _) = tape.softmax_cross_entropy(&logits, &[2]).unwrap();
    assert!(loss.item() < 1e-20);
}

#[test]
fn softmax_label_out_of_range_is_input_error() {
    let logits = Tensor::zeros(&[1, 5]);
    let tape: Tape = Tape::new();
    let err = tape.softmax_cross_entropy(&logits, &[5]).unwrap_err();
    assert!(matches!(err, Error::Input(_)));
}

#[test]
fn softmax_grad_matches_finite_differences() {
    let mut rng = crate::rng::stream(5, &[6]);
    let logits = rand_tensor(&mut rng, &[4, 5]);
    logits.set_requires_grad(true);
    let labels = [1usize, 0, 4, 2];
    let tape = Tape::new();
    let (loss, _) = tape.softmax_cross_entropy(&logits, &labels).unwrap();
    tape.backward(&loss).unwrap();
    let fd = finite_diff_grad(
        &mut |p: &Tensor<f64>| {
            let t = Tape::new();
            t.softmax_cross_entropy(p, &labels).unwrap().0.item()
        },
        &logits,
        1e-5,
    );
    for (a, b) in logits.grad().unwrap().iter().zip(fd.data().iter()) {
        assert!(rel_err(*a, *b) <= 1e-6);
    }
}

#[test]
fn backward_of_sum_is_ones_and_quadratic_is_2x() {
    let x = Tensor::param(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let tape = Tape::new();
    let loss = tape.sum(&x);
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 4]);

    x.zero_grad();
    let tape = Tape::new();
    let sq = tape.mul(&x, &x).unwrap();
    let loss = tape.sum(&sq);
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 1.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let x = Tensor::param(&[4], vec![0.0; 4]).unwrap();
    let tape = Tape::new();
    let y = tape.relu(&x);
    assert!(matches!(tape.backward(&y), Err(Error::Input(_))));
}

#[test]
fn repeated_backward_accumulates() {
    let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
    let tape = Tape::new();
    let loss = tape.sum(&x);
    tape.backward(&loss).unwrap();
    loss.zero_grad();
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
}

#[test]
fn finite_diff_on_identity_and_quadratic() {
    let x = Tensor::new(&[3], vec![0.3, -0.7, 1.1]).unwrap();
    let ones = finite_diff_grad(&mut |p: &Tensor<f64>| p.data().iter().sum(), &x, 1e-5);
    for v in ones.data().iter() {
        assert!((v - 1.0).abs() < 1e-9);
    }
    let grad = finite_diff_grad(
        &mut |p: &Tensor<f64>| 0.5 * p.data().iter().map(|v| v * v).sum::<f64>(),
        &x,
        1e-5,
    );
    for (g, v) in grad.data().iter().zip(x.data().iter()) {
        assert!((g - v).abs() < 1e-9);
    }
}

/// Random composite of depth <= 6 over the primitive set; the acceptance
/// gradient property runs this across 100 seeds.
pub(crate) fn random_composite_check(seed: u64, tol: f64) {
    let mut rng = crate::rng::stream(seed, &[10]);
    let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);
    x.set_requires_grad(true);
    let depth = rng.gen_range(1..=6);
    let ops: Vec<u32> = (0..depth).map(|_| rng.gen_range(0..6)).collect();
    let consts: Vec<f64> = (0..depth).map(|_| rng.gen_range(0.2..1.5)).collect();
    // leaf operands fixed up front so backward and fd see the same function
    let mut leaf_specs: Vec<Vec<f64>> = Vec::new();
    for &op in &ops {
        match op {
            2 | 3 => leaf_specs.push((0..64).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            4 => leaf_specs.push((0..36).map(|_| rng.gen_range(-0.5..0.5)).collect()),
            _ => leaf_specs.push(Vec::new()),
        }
    }
    let run = |input: &Tensor<f64>, tape: &Tape<f64>| -> Tensor<f64> {
        let mut cur = input.clone();
        for (i, &op) in ops.iter().enumerate() {
            cur = match op {
                0 => tape.relu(&cur),
                1 => tape.avg_pool3x3(&cur, 1).unwrap(),
                2 | 3 => {
                    let leaf = Tensor::new(&cur.shape(), leaf_specs[i].clone()).unwrap();
                    if op == 2 {
                        tape.add(&cur, &leaf).unwrap()
                    } else {
                        tape.mul(&cur, &leaf).unwrap()
                    }
                }
                4 => {
                    let c = cur.shape()[1];
                    let k = Tensor::new(&[c, c, 3, 3], leaf_specs[i].clone()).unwrap();
                    tape.conv2d(&cur, &k, 1, 1).unwrap()
                }
                _ => tape.scale_const(&cur, consts[i]),
            };
        }
        tape.sum(&cur)
    };
    let tape = Tape::new();
    let loss = run(&x, &tape);
    tape.backward(&loss).unwrap();
    let analytic = x.grad().unwrap();
    let fd = finite_diff_grad(
        &mut |p: &Tensor<f64>| {
            let t = Tape::new();
            run(p, &t).item()
        },
        &x,
        1e-5,
    );
    for (a, b) in analytic.iter().zip(fd.data().iter()) {
        assert!(
            rel_err(*a, *b) <= tol,
            "seed {seed}: backward {a} vs fd {b} (rel {})",
            rel_err(*a, *b)
        );
        assert!(a.is_finite());
    }
}

#[test]
fn random_composites_match_finite_differences() {
    for seed in 0..20 {
        random_composite_check(seed, 1e-4);
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = crate::rng::stream(6, &[11]);
    let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);
    let k = rand_tensor(&mut rng, &[2, 2, 3, 3]);
    let (a, b) = (0.7, -1.3);

    let grad_of = |scale_f: f64, scale_g: f64, xin: &Tensor<f64>| {
        xin.set_requires_grad(true);
        xin.zero_grad();
        let tape = Tape::new();
        let f = tape.sum(&tape.relu(xin));
        let g = tape.sum(&tape.conv2d(xin, &k, 1, 1).unwrap());
        let fs = tape.scale_const(&f, scale_f);
        let gs = tape.scale_const(&g, scale_g);
        let loss = tape.add(&fs, &gs).unwrap();
        tape.backward(&loss).unwrap();
        xin.grad().unwrap()
    };
    let gf = grad_of(a, 0.0, &x);
    let gg = grad_of(0.0, b, &x);
    let gfg = grad_of(a, b, &x);
    for i in 0..gfg.len() {
        assert_eq!(gfg[i], gf[i] + gg[i]);
    }
}

#[test]
fn identical_seeds_are_bitwise_deterministic() {
    let run = || {
        let mut rng = crate::rng::stream(9, &[12]);
        let x = rand_tensor(&mut rng, &[2, 3, 4, 4]);
        let k = rand_tensor(&mut rng, &[2, 3, 3, 3]);
        x.set_requires_grad(true);
        let tape = Tape::new();
        let y = tape.conv2d(&x, &k, 1, 1).unwrap();
        let loss = tape.sum(&y);
        tape.backward(&loss).unwrap();
        (y.to_vec(), x.grad().unwrap())
    };
    let (y1, g1) = run();
    let (y2, g2) = run();
    assert_eq!(y1, y2);
    assert_eq!(g1, g2);
}

#[test]
fn scale_by_index_routes_grad_to_theta() {
    let x = Tensor::new(&[2], vec![2.0, 3.0]).unwrap();
    let theta = Tensor::param(&[5], vec![0.2; 5]).unwrap();
    let tape = Tape::new();
    let y = tape.scale_by_index(&x, &theta, 3).unwrap();
    for (a, b) in y.to_vec().iter().zip([0.4f64, 0.6]) {
        assert!((a - b).abs() < 1e-15);
    }
    let loss = tape.sum(&y);
    tape.backward(&loss).unwrap();
    let g = theta.grad().unwrap();
    assert_eq!(g, vec![0.0, 0.0, 0.0, 5.0, 0.0]);
}
