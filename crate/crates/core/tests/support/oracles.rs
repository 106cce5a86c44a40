//! Naive reference implementations and finite-difference checks shared by
//! the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeSet;

use lungfp::tensornet::{backward_traced, forward_traced, layers, ModelId, ModelSpec, Parameters, Tensor, Trace};
use lungfp::train::{balanced_batches, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Relative error with a floor so that two near-zero values compare equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Direct seven-loop cross-correlation with zero "same" padding.
pub fn naive_conv3d(input: &[f64], ishape: [usize; 4], weight: &[f64], wshape: [usize; 5], bias: &[f64]) -> Vec<f64> {
    let [c, d, h, w] = ishape;
    let [o, ci, kd, kh, kw] = wshape;
    assert_eq!(c, ci);
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let mut out = vec![0.0; o * d * h * w];
    for oc in 0..o {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut s = bias[oc];
                    for ic in 0..c {
                        for a in 0..kd {
                            for b in 0..kh {
                                for g in 0..kw {
                                    let zz = z as isize + a as isize - pd;
                                    let yy = y as isize + b as isize - ph;
                                    let xx = x as isize + g as isize - pw;
                                    if zz < 0 || yy < 0 || xx < 0 || zz >= d as isize || yy >= h as isize || xx >= w as isize {
                                        continue;
                                    }
                                    let iv = input[((ic * d + zz as usize) * h + yy as usize) * w + xx as usize];
                                    let wv = weight[(((oc * c + ic) * kd + a) * kh + b) * kw + g];
                                    s += iv * wv;
                                }
                            }
                        }
                    }
                    out[((oc * d + z) * h + y) * w + x] = s;
                }
            }
        }
    }
    out
}

/// Block maximum over non-overlapping windows, floor mode.
pub fn naive_maxpool(input: &[f64], ishape: [usize; 4], window: [usize; 3]) -> Vec<f64> {
    let [c, d, h, w] = ishape;
    let (od, oh, ow) = (d / window[0], h / window[1], w / window[2]);
    let mut out = Vec::new();
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for a in 0..window[0] {
                        for b in 0..window[1] {
                            for g in 0..window[2] {
                                let idx = ((ch * d + z * window[0] + a) * h + y * window[1] + b) * w + x * window[2] + g;
                                m = m.max(input[idx]);
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

pub fn naive_dense(input: &[f64], weight: &[f64], m: usize, n: usize, bias: &[f64]) -> Vec<f64> {
    (0..m)
        .map(|i| bias[i] + (0..n).map(|j| weight[i * n + j] * input[j]).sum::<f64>())
        .collect()
}

/// Max absolute deviation of the three kernels from their naive references
/// on one random shape drawn from `seed`.
pub fn kernel_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let c = r.gen_range(1..=3);
    let o = r.gen_range(1..=3);
    let d = r.gen_range(1..=6);
    let h = r.gen_range(1..=7);
    let w = r.gen_range(1..=7);
    let k = [[1, 1, 1], [3, 3, 3], [3, 5, 5], [1, 3, 5], [5, 3, 1]][r.gen_range(0..5)];
    let input = random_vec(&mut r, c * d * h * w, -1.0, 1.0);
    let weight = random_vec(&mut r, o * c * k[0] * k[1] * k[2], -1.0, 1.0);
    let bias = random_vec(&mut r, o, -1.0, 1.0);
    let it = tensor(&[c, d, h, w], input.clone());
    let got = layers::conv3d_forward(&it, &tensor(&[o, c, k[0], k[1], k[2]], weight.clone()), &tensor(&[o], bias.clone()))
        .unwrap();
    let want = naive_conv3d(&input, [c, d, h, w], &weight, [o, c, k[0], k[1], k[2]], &bias);
    let mut err = max_abs_diff(got.data(), &want);

    let window = [r.gen_range(1..=d), r.gen_range(1..=h), r.gen_range(1..=w)];
    let (pooled, _) = layers::maxpool3d_forward(&it, window).unwrap();
    err = err.max(max_abs_diff(pooled.data(), &naive_maxpool(&input, [c, d, h, w], window)));

    let (m, n) = (r.gen_range(1..=20), r.gen_range(1..=40));
    let x = random_vec(&mut r, n, -1.0, 1.0);
    let wd = random_vec(&mut r, m * n, -1.0, 1.0);
    let bd = random_vec(&mut r, m, -1.0, 1.0);
    let got = layers::dense_forward(&x, &tensor(&[m, n], wd.clone()), &tensor(&[m], bd.clone())).unwrap();
    err.max(max_abs_diff(&got, &naive_dense(&x, &wd, m, n, &bd)))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central difference of `f` at `x[i]`.
fn central<F: FnMut(&[f64]) -> f64>(x: &mut [f64], i: usize, f: &mut F) -> f64 {
    let x0 = x[i];
    x[i] = x0 + FD_STEP;
    let up = f(x);
    x[i] = x0 - FD_STEP;
    let down = f(x);
    x[i] = x0;
    (up - down) / (2.0 * FD_STEP)
}

fn fd_max_err<F: FnMut(&[f64]) -> f64>(x: &[f64], analytic: &[f64], mut f: F) -> f64 {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| rel_err(analytic[i], central(&mut x, i, &mut f)))
        .fold(0.0, f64::max)
}

/// Convolution: loss = <r, conv(x)> checked against input, weight and bias.
pub fn conv_grad_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (c, o) = (r.gen_range(1..=2), r.gen_range(1..=3));
    let (d, h, w) = (r.gen_range(2..=4), r.gen_range(2..=5), r.gen_range(2..=5));
    let k = [3, 3, 3];
    let ws = [o, c, k[0], k[1], k[2]];
    let x = random_vec(&mut r, c * d * h * w, -1.0, 1.0);
    let wv = random_vec(&mut r, ws.iter().product(), -1.0, 1.0);
    let b = random_vec(&mut r, o, -1.0, 1.0);
    let up = random_vec(&mut r, o * d * h * w, -1.0, 1.0);
    let loss = |x: &[f64], wv: &[f64], b: &[f64]| {
        let out = layers::conv3d_forward(&tensor(&[c, d, h, w], x.to_vec()), &tensor(&ws, wv.to_vec()), &tensor(&[o], b.to_vec()))
            .unwrap();
        dot(out.data(), &up)
    };
    let mut gw = Tensor::zeros(ws.to_vec());
    let mut gb = Tensor::zeros(vec![o]);
    let mut gi = Tensor::zeros(vec![c, d, h, w]);
    layers::conv3d_backward(
        &tensor(&[c, d, h, w], x.clone()),
        &tensor(&ws, wv.clone()),
        &tensor(&[o, d, h, w], up.clone()),
        &mut gw,
        &mut gb,
        Some(&mut gi),
    )
    .unwrap();
    let e1 = fd_max_err(&x, gi.data(), |x| loss(x, &wv, &b));
    let e2 = fd_max_err(&wv, gw.data(), |wv| loss(&x, wv, &b));
    let e3 = fd_max_err(&b, gb.data(), |b| loss(&x, &wv, b));
    e1.max(e2).max(e3)
}

/// Max pooling on distinct, well-separated values so the step never changes a winner.
pub fn pool_grad_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (c, d, h, w) = (r.gen_range(1..=2), r.gen_range(2..=6), r.gen_range(2..=6), r.gen_range(2..=6));
    let window = [r.gen_range(1..=d.min(3)), r.gen_range(1..=h.min(3)), r.gen_range(1..=w.min(3))];
    let n = c * d * h * w;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let x: Vec<f64> = order.iter().map(|&i| i as f64 * 0.01).collect();
    let (pooled, arg) = layers::maxpool3d_forward(&tensor(&[c, d, h, w], x.clone()), window).unwrap();
    let up = random_vec(&mut r, pooled.len(), -1.0, 1.0);
    let gi = layers::maxpool3d_backward(&tensor(pooled.shape(), up.clone()), &arg, &[c, d, h, w]).unwrap();
    fd_max_err(&x, gi.data(), |x| {
        let (p, _) = layers::maxpool3d_forward(&tensor(&[c, d, h, w], x.to_vec()), window).unwrap();
        dot(p.data(), &up)
    })
}

/// Dense layer against input, weight and bias.
pub fn dense_grad_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (m, n) = (r.gen_range(1..=8), r.gen_range(1..=12));
    let x = random_vec(&mut r, n, -1.0, 1.0);
    let wv = random_vec(&mut r, m * n, -1.0, 1.0);
    let b = random_vec(&mut r, m, -1.0, 1.0);
    let up = random_vec(&mut r, m, -1.0, 1.0);
    let loss = |x: &[f64], wv: &[f64], b: &[f64]| {
        dot(&layers::dense_forward(x, &tensor(&[m, n], wv.to_vec()), &tensor(&[m], b.to_vec())).unwrap(), &up)
    };
    let mut gw = Tensor::zeros(vec![m, n]);
    let mut gb = Tensor::zeros(vec![m]);
    let mut gi = vec![0.0; n];
    layers::dense_backward(&x, &tensor(&[m, n], wv.clone()), &up, &mut gw, &mut gb, Some(&mut gi)).unwrap();
    let e1 = fd_max_err(&x, &gi, |x| loss(x, &wv, &b));
    let e2 = fd_max_err(&wv, gw.data(), |wv| loss(&x, wv, &b));
    let e3 = fd_max_err(&b, gb.data(), |b| loss(&x, &wv, b));
    e1.max(e2).max(e3)
}

/// ReLU with inputs kept at least 0.05 away from the kink.
pub fn relu_grad_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(1..=30);
    let x: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = r.gen_range(0.05..1.0);
            if r.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    let up = random_vec(&mut r, n, -1.0, 1.0);
    let mut out = x.clone();
    layers::relu_in_place(&mut out);
    let mut g = up.clone();
    layers::relu_backward(&mut g, &out);
    fd_max_err(&x, &g, |x| {
        let mut o = x.to_vec();
        layers::relu_in_place(&mut o);
        dot(&o, &up)
    })
}

/// Dropout with a fixed mask.
pub fn dropout_grad_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(1..=50);
    let x = random_vec(&mut r, n, -1.0, 1.0);
    let up = random_vec(&mut r, n, -1.0, 1.0);
    let mask_seed = r.gen::<u64>();
    let run = |x: &[f64]| layers::dropout(&tensor(&[n], x.to_vec()), 0.2, &mut rng(mask_seed), true).unwrap();
    let (_, mask) = run(&x);
    let mut g = up.clone();
    layers::dropout_backward(&mut g, mask.as_deref());
    fd_max_err(&x, &g, |x| dot(run(x).0.data(), &up))
}

/// Softmax cross-entropy: the combined gradient p - y against the loss.
pub fn softmax_xent_grad_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let k = r.gen_range(2..=5);
    let z = random_vec(&mut r, k, -3.0, 3.0);
    let y = layers::one_hot::<f64>(r.gen_range(0..k), k);
    let (p, _) = layers::softmax_xent(&z, &y).unwrap();
    let g: Vec<f64> = p.iter().zip(&y).map(|(a, b)| a - b).collect();
    fd_max_err(&z, &g, |z| layers::softmax_xent(z, &y).unwrap().1)
}

/// Largest relative error over every layer-level check at `seed`.
pub fn layer_grad_max_err(seed: u64) -> f64 {
    [
        conv_grad_case(seed),
        pool_grad_case(seed),
        dense_grad_case(seed),
        relu_grad_case(seed),
        dropout_grad_case(seed),
        softmax_xent_grad_case(seed),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Full stock Model-1 in training mode on one random patch: analytic loss
/// gradient against central differences for 20 randomly chosen weights.
pub fn model1_grad_case(seed: u64) -> f64 {
    let (spec, params) = ModelSpec::build::<f64>(ModelId::M1, 64, seed).unwrap();
    model_grad_case(&spec, params, seed, 20)
}

pub fn model_grad_case(spec: &ModelSpec, mut params: Parameters<f64>, seed: u64, n_weights: usize) -> f64 {
    let step = FD_STEP;
    let (input, target, dropout_seed, mut r) = grad_setup(spec, seed);
    let probe = |p: &Parameters<f64>| {
        let trace = forward_traced(spec, p, &input, Some(&mut rng(dropout_seed))).unwrap();
        let loss = layers::softmax_xent(trace.logits(), &target).unwrap().1;
        (trace, loss)
    };
    let (trace, grads) = analytic(spec, &params, &input, &target, dropout_seed);

    // Weights spread over every learnable tensor. A central difference is
    // only meaningful when neither probe crosses a ReLU or pooling switch,
    // so such draws are redrawn, and a tensor that keeps failing (the first
    // convolution feeds every kink downstream) leaves the pool.
    let mut pool: Vec<usize> = (0..params.tensors.len()).collect();
    let mut rejected = vec![0usize; pool.len()];
    let mut accepted = vec![0usize; pool.len()];
    let mut tried = BTreeSet::new();
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < n_weights {
        assert!(!pool.is_empty(), "no kink-free weights found");
        let t = pool[r.gen_range(0..pool.len())];
        let i = r.gen_range(0..params.tensors[t].tensor.len());
        if !tried.insert((t, i)) {
            continue;
        }
        match fd_probe(&mut params, &probe, &trace, t, i, step) {
            Some(numeric) => {
                worst = worst.max(rel_err(grads.tensors[t].tensor.data()[i], numeric));
                accepted[t] += 1;
                checked += 1;
            }
            None => {
                rejected[t] += 1;
                if accepted[t] == 0 && rejected[t] >= 2 {
                    pool.retain(|&u| u != t);
                }
            }
        }
    }
    worst
}

fn fd_probe<F: Fn(&Parameters<f64>) -> (Trace<f64>, f64)>(
    params: &mut Parameters<f64>,
    probe: &F,
    base: &Trace<f64>,
    t: usize,
    i: usize,
    step: f64,
) -> Option<f64> {
    let x0 = params.tensors[t].tensor.data()[i];
    params.tensors[t].tensor.data_mut()[i] = x0 + step;
    let up = probe(params);
    params.tensors[t].tensor.data_mut()[i] = x0 - step;
    let down = probe(params);
    params.tensors[t].tensor.data_mut()[i] = x0;
    (base.same_pattern(&up.0) && base.same_pattern(&down.0)).then(|| (up.1 - down.1) / (2.0 * step))
}

/// One weight from every learnable tensor against central differences with
/// a step small enough (1e-6) that no probe leaves the base linear piece.
pub fn model_small_step_case(spec: &ModelSpec, mut params: Parameters<f64>, seed: u64) -> f64 {
    let (input, target, dropout_seed, mut r) = grad_setup(spec, seed);
    let probe = |p: &Parameters<f64>| {
        let trace = forward_traced(spec, p, &input, Some(&mut rng(dropout_seed))).unwrap();
        let loss = layers::softmax_xent(trace.logits(), &target).unwrap().1;
        (trace, loss)
    };
    let (trace, grads) = analytic(spec, &params, &input, &target, dropout_seed);
    let mut worst: f64 = 0.0;
    for t in 0..params.tensors.len() {
        let i = r.gen_range(0..params.tensors[t].tensor.len());
        let numeric = fd_probe(&mut params, &probe, &trace, t, i, 1e-6).expect("kink crossed at 1e-6");
        worst = worst.max(rel_err(grads.tensors[t].tensor.data()[i], numeric));
    }
    worst
}

fn grad_setup(spec: &ModelSpec, seed: u64) -> (Tensor<f64>, Vec<f64>, u64, ChaCha8Rng) {
    let mut r = rng(seed ^ 0xA5A5);
    let s = spec.input;
    let input = tensor(&[1, s.d, s.h, s.w], random_vec(&mut r, s.len(), 0.0, 1.0));
    let label = r.gen_range(0..2usize);
    let dropout_seed = r.gen::<u64>();
    (input, layers::one_hot::<f64>(label, 2), dropout_seed, r)
}

fn analytic(
    spec: &ModelSpec,
    params: &Parameters<f64>,
    input: &Tensor<f64>,
    target: &[f64],
    dropout_seed: u64,
) -> (Trace<f64>, Parameters<f64>) {
    let trace = forward_traced(spec, params, input, Some(&mut rng(dropout_seed))).unwrap();
    let (p, _) = layers::softmax_xent(trace.logits(), target).unwrap();
    let upstream: Vec<f64> = p.iter().zip(target).map(|(a, b)| a - b).collect();
    let mut grads = params.zeros_like();
    backward_traced(spec, params, &trace, &upstream, &mut grads, false).unwrap();
    (trace, grads)
}

/// `(scan, probability, nodule)`.
pub type FrocItem = (usize, f64, Option<usize>);

/// Brute-force FROC: for every distinct threshold, recount from scratch.
/// Items are `(scan, probability, nodule)`. Consecutive thresholds with
/// equal fp/scan collapse to the last one.
pub fn brute_froc(items: &[(usize, f64, Option<usize>)], n_scans: usize, n_nodules: usize) -> Vec<(f64, f64)> {
    let mut thresholds: Vec<f64> = items.iter().map(|i| i.1).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for t in thresholds {
        let hit: BTreeSet<usize> = items.iter().filter(|i| i.1 >= t).filter_map(|i| i.2).collect();
        let fp = items.iter().filter(|i| i.1 >= t && i.2.is_none()).count();
        let p = (fp as f64 / n_scans as f64, hit.len() as f64 / n_nodules as f64);
        match pts.last_mut() {
            Some(last) if last.0 == p.0 => *last = p,
            _ => pts.push(p),
        }
    }
    pts
}

/// Reference for the seven-point score: constant anchor below the first
/// point, segment interpolation inside, last value beyond.
pub fn brute_sensitivity(points: &[(f64, f64)], t: f64) -> f64 {
    if points.is_empty() || t < points[0].0 {
        return 0.0;
    }
    for w in points.windows(2) {
        let ((f0, s0), (f1, s1)) = (w[0], w[1]);
        if t == f0 {
            return s0;
        }
        if t == f1 {
            return s1;
        }
        if f0 < t && t < f1 {
            return s0 + (s1 - s0) * (t - f0) / (f1 - f0);
        }
    }
    points[points.len() - 1].1
}

/// Random scored instance with at most 200 candidates and 20 scans. Returns
/// `(items, n_scans, n_nodules)` with every nodule hit at least once.
pub fn random_froc_instance(seed: u64) -> (Vec<FrocItem>, usize, usize) {
    let mut r = rng(seed);
    let n_scans = r.gen_range(1..=20);
    let n_nodules = r.gen_range(1..=15);
    let n = r.gen_range(n_nodules..=200);
    // Coarse probabilities make ties common.
    let levels = r.gen_range(2..=50);
    let nodule_scan: Vec<usize> = (0..n_nodules).map(|_| r.gen_range(0..n_scans)).collect();
    let mut items: Vec<FrocItem> = (0..n)
        .map(|i| {
            let p = r.gen_range(0..=levels) as f64 / levels as f64;
            let nodule = if i < n_nodules {
                Some(i)
            } else if r.gen_bool(0.2) {
                Some(r.gen_range(0..n_nodules))
            } else {
                None
            };
            let scan = nodule.map_or_else(|| r.gen_range(0..n_scans), |j| nodule_scan[j]);
            (scan, p, nodule)
        })
        .collect();
    items.shuffle(&mut r);
    (items, n_scans, n_nodules)
}

/// Checks every scheduler property against an independent count of the stream.
pub fn check_schedule(pos: &[usize], neg: &[usize], config: &TrainConfig) -> std::result::Result<usize, String> {
    let chunks = balanced_batches(pos, neg, config).map_err(|e| e.to_string())?;
    let n = pos.len();
    let full_chunks = neg.len().div_ceil(n);
    // Smallest chunk count whose consumed negatives reach the stop target.
    let target = config.stop_fraction * neg.len() as f64;
    let mut expect = 0;
    let mut consumed = 0;
    while expect < full_chunks && (consumed as f64) < target {
        consumed += n.min(neg.len() - consumed);
        expect += 1;
    }
    if chunks.len() != expect {
        return Err(format!("{} chunks, expected {expect}", chunks.len()));
    }
    let pos_set: BTreeSet<usize> = pos.iter().copied().collect();
    let neg_set: BTreeSet<usize> = neg.iter().copied().collect();
    let mut seen_neg = BTreeSet::new();
    for (i, c) in chunks.iter().enumerate() {
        let ids: Vec<(usize, u8)> = c.batches.iter().flatten().copied().collect();
        let p: BTreeSet<usize> = ids.iter().filter(|x| x.1 == 1).map(|x| x.0).collect();
        let q: Vec<usize> = ids.iter().filter(|x| x.1 == 0).map(|x| x.0).collect();
        if p != pos_set || ids.iter().filter(|x| x.1 == 1).count() != n {
            return Err(format!("chunk {i} does not hold every positive once"));
        }
        let last = i + 1 == full_chunks;
        if q.len() != n && !last {
            return Err(format!("chunk {i} has {} negatives, expected {n}", q.len()));
        }
        for id in q {
            if !neg_set.contains(&id) || !seen_neg.insert(id) {
                return Err(format!("negative {id} repeated or foreign"));
            }
        }
        let sizes: Vec<usize> = c.batches.iter().map(Vec::len).collect();
        let total: usize = sizes.iter().sum();
        if sizes[..sizes.len() - 1].iter().any(|&s| s != config.batch_size) || total.div_ceil(config.batch_size) != sizes.len() {
            return Err(format!("chunk {i} batch sizes {sizes:?}"));
        }
    }
    Ok(chunks.len())
}
