//! Independent oracles shared by the integration tests: central finite
//! differences and a naive nested-loop convolution.

#![allow(dead_code)]

use pitchpilot::tensor::{Tape, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>;

const FD_EPS: f64 = 1e-6;

fn loss_of(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars).expect("graph builds");
    tape.value(out)[0]
}

/// Worst norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)` over all inputs
/// between tape gradients and central differences of the scalar `build`.
pub fn relative_grad_error(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.clone().param()).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars).expect("graph builds");
    assert_eq!(tape.shape(out), &[1], "loss must be scalar");
    tape.backward(out).expect("backward");
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = tape
            .grad(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
        let mut diff2 = 0.0;
        let (mut a2, mut n2) = (0.0, 0.0);
        for i in 0..input.numel() {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + FD_EPS;
            let up = loss_of(&probe, build);
            probe[k].data_mut()[i] = orig - FD_EPS;
            let down = loss_of(&probe, build);
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            diff2 += (analytic[i] - numeric).powi(2);
            a2 += analytic[i].powi(2);
            n2 += numeric.powi(2);
        }
        let scale = a2.sqrt().max(n2.sqrt());
        if scale > 0.0 {
            worst = worst.max(diff2.sqrt() / scale);
        }
    }
    worst
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, bound, rng)
}

/// Values at least 0.05 away from zero, for kinked ops.
pub fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = 0.05 + rng.gen::<f64>();
            if rng.gen() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Pairwise distinct values on a 0.013 grid, so no pooling window is near a tie.
pub fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.013 - 0.5).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).unwrap()
}

/// `mse(out, target)` with a fixed random target of `out`'s shape, so every
/// output element carries a different weight.
pub fn mse_head(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = tape.shape(out).to_vec();
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let target = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let t = tape.constant(&shape, target)?;
    tape.mse_loss(out, t)
}

/// Direct nested-loop valid convolution; `input` `[C, H, W]`, kernels
/// `[O, C, K, K]`, returns `[O, Ho, Wo]` flattened.
pub fn naive_conv(input: &[f64], c: usize, h: usize, w: usize, kernels: &[f64], bias: &[f64], o: usize, k: usize, stride: usize) -> Vec<f64> {
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let mut out = vec![0.0; o * ho * wo];
    for oc in 0..o {
        for y in 0..ho {
            for x in 0..wo {
                let mut acc = bias[oc];
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iv = input[ic * h * w + (y * stride + ky) * w + x * stride + kx];
                            let kv = kernels[((oc * c + ic) * k + ky) * k + kx];
                            acc += iv * kv;
                        }
                    }
                }
                out[(oc * ho + y) * wo + x] = acc;
            }
        }
    }
    out
}

/// Largest absolute deviation of `Tape::conv2d` from [`naive_conv`] over
/// `instances` random geometries, each run batched with two samples.
pub fn conv_oracle_deviation(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (c, o) = (r.gen_range(1..4), r.gen_range(1..5));
        let k = r.gen_range(1..6);
        let stride = r.gen_range(1..4);
        let (h, w) = (k + r.gen_range(0..12), k + r.gen_range(0..12));
        let x = uniform(&[2, c, h, w], 1.0, &mut r);
        let kern = uniform(&[o, c, k, k], 1.0, &mut r);
        let bias = uniform(&[o], 1.0, &mut r);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.leaf(&x), tape.leaf(&kern), tape.leaf(&bias));
        let y = tape.conv2d(xv, kv, bv, stride).unwrap();
        let per = c * h * w;
        let got = tape.value(y);
        let n_out = got.len() / 2;
        for b in 0..2 {
            let want = naive_conv(&x.data()[b * per..(b + 1) * per], c, h, w, kern.data(), bias.data(), o, k, stride);
            assert_eq!(want.len(), n_out);
            for (g, w) in got[b * n_out..(b + 1) * n_out].iter().zip(&want) {
                worst = worst.max((g - w).abs());
            }
        }
    }
    worst
}

/// Worst relative gradient error per op over `instances` random cases each.
pub fn gradcheck_suite(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut results = vec![];
    let run = |worst: &mut f64, inputs: Vec<Tensor<f64>>, build: Box<Build>| {
        *worst = worst.max(relative_grad_error(&inputs, &*build));
    };

    let mut worst = 0.0;
    for i in 0..instances {
        let (c, o, k, stride) = (r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..3));
        let (h, w) = (k + r.gen_range(0..4), k + r.gen_range(0..4));
        let batched = i % 2 == 1;
        let shape: Vec<usize> = if batched { vec![2, c, h, w] } else { vec![c, h, w] };
        let inputs = vec![
            uniform(&shape, 1.0, &mut r),
            uniform(&[o, c, k, k], 1.0, &mut r),
            uniform(&[o], 1.0, &mut r),
        ];
        let seed = i as u64;
        run(&mut worst, inputs, Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride)?;
            mse_head(t, y, seed)
        }));
    }
    results.push(("conv2d", worst));

    let mut worst = 0.0;
    for i in 0..instances {
        let win = r.gen_range(2..4);
        let c = r.gen_range(1..3);
        let (h, w) = (win * r.gen_range(1..4) + r.gen_range(0..win), win * r.gen_range(1..4));
        let shape: Vec<usize> = if i % 2 == 1 { vec![2, c, h, w] } else { vec![c, h, w] };
        let inputs = vec![distinct(&shape, &mut r)];
        let seed = i as u64;
        run(&mut worst, inputs, Box::new(move |t, v| {
            let y = t.maxpool2d(v[0], win)?;
            mse_head(t, y, seed)
        }));
    }
    results.push(("maxpool2d", worst));

    let mut worst = 0.0;
    for i in 0..instances {
        let n = r.gen_range(1..30);
        let inputs = vec![off_kink(&[n], &mut r)];
        let seed = i as u64;
        run(&mut worst, inputs, Box::new(move |t, v| {
            let y = t.relu(v[0]);
            mse_head(t, y, seed)
        }));
    }
    results.push(("relu", worst));

    let mut worst = 0.0;
    for i in 0..instances {
        let (n, m) = (r.gen_range(1..8), r.gen_range(1..8));
        let xs: Vec<usize> = if i % 2 == 1 { vec![3, n] } else { vec![n] };
        let inputs = vec![uniform(&xs, 1.0, &mut r), uniform(&[m, n], 1.0, &mut r), uniform(&[m], 1.0, &mut r)];
        let seed = i as u64;
        run(&mut worst, inputs, Box::new(move |t, v| {
            let y = t.dense(v[0], v[1], v[2])?;
            mse_head(t, y, seed)
        }));
    }
    results.push(("dense", worst));

    let mut worst = 0.0;
    for i in 0..instances {
        let (n, hd) = (r.gen_range(1..5), r.gen_range(1..4));
        let rows: Vec<usize> = if i % 2 == 1 { vec![2] } else { vec![] };
        let shp = |d: usize| [rows.as_slice(), &[d]].concat();
        let inputs = vec![
            uniform(&shp(n), 1.0, &mut r),
            uniform(&shp(hd), 1.0, &mut r),
            uniform(&shp(hd), 1.0, &mut r),
            uniform(&[4 * hd, n], 1.0, &mut r),
            uniform(&[4 * hd, hd], 1.0, &mut r),
            uniform(&[4 * hd], 1.0, &mut r),
        ];
        let seed = i as u64;
        run(&mut worst, inputs, Box::new(move |t, v| {
            // two steps so the recurrent weights see a non-trivial state
            let (h1, c1) = t.lstm_step(v[0], v[1], v[2], v[3], v[4], v[5])?;
            let (h2, c2) = t.lstm_step(v[0], h1, c1, v[3], v[4], v[5])?;
            let both = t.concat_cols(&[h2, c2])?;
            mse_head(t, both, seed)
        }));
    }
    results.push(("lstm_step", worst));

    let mut worst = 0.0;
    for _ in 0..instances {
        let (b, n) = (r.gen_range(1..5), r.gen_range(1..6));
        let inputs = vec![uniform(&[b, n], 1.0, &mut r), uniform(&[b, n], 1.0, &mut r)];
        run(&mut worst, inputs, Box::new(|t, v| {
            let s = t.scale(v[0], 2.0);
            t.mse_loss(s, v[1])
        }));
    }
    results.push(("mse", worst));

    // conv → relu → pool → dense → mse, the CNN's building blocks in sequence
    let mut worst = 0.0;
    for i in 0..instances {
        let inputs = vec![
            uniform(&[2, 1, 9, 9], 1.0, &mut r),
            uniform(&[2, 1, 3, 3], 1.0, &mut r),
            uniform(&[2], 1.0, &mut r),
            uniform(&[3, 18], 1.0, &mut r),
            uniform(&[3], 1.0, &mut r),
        ];
        let seed = i as u64;
        run(&mut worst, inputs, Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1)?;
            let y = t.relu(y);
            let y = t.maxpool2d(y, 2)?;
            let y = t.reshape(y, &[2, 18])?;
            let y = t.dense(y, v[3], v[4])?;
            mse_head(t, y, seed)
        }));
    }
    results.push(("conv-relu-pool-dense-mse", worst));
    results
}
