mod common;

use common::*;
use pitchpilot::camrender::render_pair;
use pitchpilot::policy::{
    cnn_graph, frame_inputs, rcnn_graph, Bound, CnnParams, ParamSet, RcnnParams,
};
use pitchpilot::simworld::reset_episode;
use pitchpilot::tensor::{read_checkpoint, write_checkpoint, Adam, AdamConfig, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn op_gradients_match_finite_differences() {
    for (op, err) in gradcheck_suite(6, 99) {
        assert!(err < 1e-4, "{op}: relative error {err:e}");
    }
}

#[test]
fn conv_matches_nested_loops() {
    assert!(conv_oracle_deviation(30, 5) < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_single_sample_matches_loops(
        c in 1usize..3, o in 1usize..4, k in 1usize..5, stride in 1usize..4,
        dh in 0usize..8, dw in 0usize..8, seed in any::<u64>(),
    ) {
        let (h, w) = (k + dh, k + dw);
        let mut r = rng(seed);
        let x = uniform(&[c, h, w], 2.0, &mut r);
        let kern = uniform(&[o, c, k, k], 2.0, &mut r);
        let b = uniform(&[o], 2.0, &mut r);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.leaf(&x), tape.leaf(&kern), tape.leaf(&b));
        let y = tape.conv2d(xv, kv, bv, stride).unwrap();
        prop_assert_eq!(tape.shape(y), &[o, (h - k) / stride + 1, (w - k) / stride + 1]);
        let want = naive_conv(x.data(), c, h, w, kern.data(), b.data(), o, k, stride);
        for (g, w) in tape.value(y).iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-9);
        }
    }

    #[test]
    fn dense_matches_loops(n in 1usize..10, m in 1usize..10, rows in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = uniform(&[rows, n], 1.0, &mut r);
        let w = uniform(&[m, n], 1.0, &mut r);
        let b = uniform(&[m], 1.0, &mut r);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
        let y = tape.dense(xv, wv, bv).unwrap();
        for i in 0..rows {
            for j in 0..m {
                let want: f64 = b.data()[j] + (0..n).map(|q| w.data()[j * n + q] * x.data()[i * n + q]).sum::<f64>();
                prop_assert!((tape.value(y)[i * m + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_picks_window_max(c in 1usize..3, h in 2usize..9, w in 2usize..9, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = uniform(&[c, h, w], 1.0, &mut r);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let y = tape.maxpool2d(xv, 2).unwrap();
        let (ho, wo) = (h / 2, w / 2);
        prop_assert_eq!(tape.shape(y), &[c, ho, wo]);
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let at = |a: usize, b: usize| x.data()[ch * h * w + a * w + b];
                    let want = at(2 * i, 2 * j).max(at(2 * i, 2 * j + 1)).max(at(2 * i + 1, 2 * j)).max(at(2 * i + 1, 2 * j + 1));
                    prop_assert_eq!(tape.value(y)[(ch * ho + i) * wo + j], want);
                }
            }
        }
    }
}

/// Hand-written bias-corrected update for one scalar.
fn adam_reference(theta: f64, grads: &[f64], c: AdamConfig) -> f64 {
    let (mut m, mut v, mut th) = (0.0, 0.0, theta);
    for (t, &g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        m = c.beta1 * m + (1.0 - c.beta1) * g;
        v = c.beta2 * v + (1.0 - c.beta2) * g * g;
        let mh = m / (1.0 - c.beta1.powi(t));
        let vh = v / (1.0 - c.beta2.powi(t));
        th -= c.lr * mh / (vh.sqrt() + c.epsilon);
    }
    th
}

#[test]
fn adam_matches_reference_update() {
    let cfg = AdamConfig {
        lr: 0.01,
        ..AdamConfig::default()
    };
    let mut p = Tensor::<f64>::new(&[3], vec![0.5, -1.0, 2.0]).unwrap().param();
    let start = p.data().to_vec();
    let mut adam = Adam::new(cfg, [&p]);
    let grads = [[0.3, -0.1, 0.0], [0.2, 0.4, -1e-3], [-0.5, 0.4, 2.0], [0.1, 0.1, 0.1]];
    for g in &grads {
        p.accumulate_grad(g).unwrap();
        adam.step(&mut [&mut p]).unwrap();
        p.zero_grad();
    }
    for i in 0..3 {
        let gs: Vec<f64> = grads.iter().map(|g| g[i]).collect();
        assert!((p.data()[i] - adam_reference(start[i], &gs, cfg)).abs() < 1e-12);
    }
    // first step moves each coordinate by lr in the direction of -sign(g)
    let mut q = Tensor::<f64>::new(&[2], vec![0.0, 0.0]).unwrap().param();
    let mut adam = Adam::new(cfg, [&q]);
    q.accumulate_grad(&[5.0, -0.001]).unwrap();
    adam.step(&mut [&mut q]).unwrap();
    assert!((q.data()[0] + 0.01).abs() < 1e-9 && (q.data()[1] - 0.01).abs() < 1e-6);
}

#[test]
fn adam_requires_gradients() {
    let mut p = Tensor::<f32>::zeros(&[2]).param();
    let mut adam = Adam::new(AdamConfig::default(), [&p]);
    assert!(adam.step(&mut [&mut p]).is_err());
}

/// Gradients of a whole network with respect to sampled parameter
/// coordinates, against central differences.
fn network_spot_check<P: ParamSet<f64>>(
    params: &mut P,
    loss: &dyn Fn(&mut Tape<f64>, &Bound) -> pitchpilot::tensor::Var,
    samples_per_tensor: usize,
    seed: u64,
) -> f64 {
    let mut tape = Tape::new();
    let bound = Bound::bind(&mut tape, &*params, true);
    let l = loss(&mut tape, &bound);
    tape.backward(l).unwrap();
    bound.accumulate_grads(&tape, params).unwrap();
    let value = |p: &P| {
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, p, false);
        let l = loss(&mut tape, &bound);
        tape.value(l)[0]
    };
    let mut r = rng(seed);
    let (mut d2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    let names: Vec<&str> = params.named().iter().map(|(n, _)| *n).collect();
    for (ti, _) in names.iter().enumerate() {
        let numel = params.named()[ti].1.numel();
        for _ in 0..samples_per_tensor {
            let i = r.gen_range(0..numel);
            let analytic = params.named()[ti].1.grad().unwrap()[i];
            let orig = params.named()[ti].1.data()[i];
            let eps = 1e-5;
            params.named_mut()[ti].1.data_mut()[i] = orig + eps;
            let up = value(params);
            params.named_mut()[ti].1.data_mut()[i] = orig - eps;
            let down = value(params);
            params.named_mut()[ti].1.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            d2 += (analytic - numeric).powi(2);
            a2 += analytic * analytic;
            n2 += numeric * numeric;
        }
    }
    d2.sqrt() / a2.sqrt().max(n2.sqrt())
}

fn jitter_biases<P: ParamSet<f64>>(p: &mut P, seed: u64) {
    let mut r = rng(seed);
    for (name, t) in p.named_mut() {
        if name.ends_with(".b") {
            t.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.05..0.05));
        }
    }
}

#[test]
fn full_cnn_gradient_spot_check() {
    let mut p = CnnParams::<f64>::init(&mut rng(1));
    jitter_biases(&mut p, 2);
    let frames: Vec<_> = [3u64, 8].iter().map(|&s| render_pair(&reset_episode(s))).collect();
    let loss = |tape: &mut Tape<f64>, bound: &Bound| {
        let tops: Vec<_> = frames.iter().map(|f| &f.0).collect();
        let bots: Vec<_> = frames.iter().map(|f| &f.1).collect();
        let (t, b) = frame_inputs(tape, &tops, &bots).unwrap();
        let out = cnn_graph(tape, bound, t, b).unwrap();
        let target = tape.constant(&[2, 3], vec![0.5, -0.2, 0.1, 1.0, 0.0, -0.7]).unwrap();
        tape.mse_loss(out, target).unwrap()
    };
    let err = network_spot_check(&mut p, &loss, 6, 7);
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn full_rcnn_gradient_spot_check() {
    let mut p = RcnnParams::<f64>::init(&mut rng(4));
    jitter_biases(&mut p, 5);
    let frames: Vec<_> = [3u64, 3, 9].iter().map(|&s| render_pair(&reset_episode(s))).collect();
    let loss = |tape: &mut Tape<f64>, bound: &Bound| {
        let tops: Vec<_> = frames.iter().map(|f| &f.0).collect();
        let bots: Vec<_> = frames.iter().map(|f| &f.1).collect();
        let (t, b) = frame_inputs(tape, &tops, &bots).unwrap();
        let out = rcnn_graph(tape, bound, t, b).unwrap();
        let target = tape.constant(&[3, 3], vec![0.5, -0.2, 0.1, 1.0, 0.0, -0.7, 0.3, 0.3, 0.3]).unwrap();
        tape.mse_loss(out, target).unwrap()
    };
    let err = network_spot_check(&mut p, &loss, 5, 8);
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn projected_cell_equals_fused_step() {
    let mut r = rng(12);
    let (n, hd) = (5, 3);
    let x = uniform(&[2, n], 1.0, &mut r);
    let h = uniform(&[2, hd], 1.0, &mut r);
    let c = uniform(&[2, hd], 1.0, &mut r);
    let wi = uniform(&[4 * hd, n], 1.0, &mut r);
    let wh = uniform(&[4 * hd, hd], 1.0, &mut r);
    let b = uniform(&[4 * hd], 1.0, &mut r);
    let mut tape = Tape::new();
    let v: Vec<_> = [&x, &h, &c, &wi, &wh, &b].iter().map(|t| tape.leaf(t)).collect();
    let (h1, c1) = tape.lstm_step(v[0], v[1], v[2], v[3], v[4], v[5]).unwrap();
    let proj = tape.dense(v[0], v[3], v[5]).unwrap();
    let (h2, c2) = tape.lstm_cell(proj, v[1], v[2], v[4]).unwrap();
    assert_eq!(tape.value(h1), tape.value(h2));
    assert_eq!(tape.value(c1), tape.value(c2));
    // gate arithmetic against a scalar oracle for row 0, unit 0
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let pre = |g: usize| {
        let row = g * hd;
        b.data()[row]
            + (0..n).map(|q| wi.data()[row * n + q] * x.data()[q]).sum::<f64>()
            + (0..hd).map(|q| wh.data()[row * hd + q] * h.data()[q]).sum::<f64>()
    };
    let c_new = sig(pre(1)) * c.data()[0] + sig(pre(0)) * pre(2).tanh();
    assert!((tape.value(c1)[0] - c_new).abs() < 1e-12);
    assert!((tape.value(h1)[0] - sig(pre(3)) * c_new.tanh()).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let p = CnnParams::<f32>::init(&mut rng(3));
    let mut bytes = vec![];
    write_checkpoint(&mut bytes, p.named()).unwrap();
    let back = read_checkpoint(bytes.as_slice()).unwrap();
    assert_eq!(back.len(), p.named().len());
    for ((name, t), (bn, bt)) in p.named().into_iter().zip(&back) {
        assert_eq!(name, bn);
        assert_eq!(t.shape(), bt.shape());
        assert!(t.data().iter().zip(bt.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn shape_errors_are_reported() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&[2, 5, 5], vec![0.0; 50]).unwrap();
    let k = tape.constant(&[1, 3, 3, 3], vec![0.0; 27]).unwrap();
    let b = tape.constant(&[1], vec![0.0]).unwrap();
    assert!(tape.conv2d(x, k, b, 1).is_err());
    let w = tape.constant(&[3, 4], vec![0.0; 12]).unwrap();
    let v = tape.constant(&[5], vec![0.0; 5]).unwrap();
    let bb = tape.constant(&[3], vec![0.0; 3]).unwrap();
    assert!(tape.dense(v, w, bb).is_err());
    assert!(tape.backward(v).is_err());
}
