//! Built-in verification suite: gradient checks of every op, naive-loop
//! oracles, shape formulas and checkpoint round trips.

use std::fmt;

use crate::data::Normalization;
use crate::error::Result;
use crate::gradcheck::{grad_check, grad_check_elements};
use crate::model::{BackboneSpec, Model, ModelConfig, ModelKind, ParamVars, TapSpec, DEFAULT_TAPS};
use crate::nn::{max_pool2d, pooled_extent, BatchNorm2dParams, BnMode};
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::tensor::{Fill, Shape, Tensor};
use crate::train::{lr_at, Checkpoint, TrainConfig, TrainState};

/// Straightforward loop implementations used as references.
pub mod oracle {
    use crate::tensor::{Shape, Tensor};

    /// Direct convolution. `w` is `(out, in, kh, kw)`.
    pub fn conv2d(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: Option<&Tensor<f64>>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let oh = (xs.h() + 2 * pad.0 - ws.h()) / stride.0 + 1;
        let ow = (xs.w() + 2 * pad.1 - ws.w()) / stride.1 + 1;
        let mut y = Tensor::zeros([xs.n(), ws.n(), oh, ow]);
        for n in 0..xs.n() {
            for o in 0..ws.n() {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[o]);
                        for c in 0..xs.c() {
                            for ki in 0..ws.h() {
                                for kj in 0..ws.w() {
                                    let (r, s) = ((i * stride.0 + ki) as isize - pad.0 as isize, (j * stride.1 + kj) as isize - pad.1 as isize);
                                    if r >= 0 && s >= 0 && (r as usize) < xs.h() && (s as usize) < xs.w() {
                                        acc += x.get(n, c, r as usize, s as usize) * w.get(o, c, ki, kj);
                                    }
                                }
                            }
                        }
                        y.set(n, o, i, j, acc);
                    }
                }
            }
        }
        y
    }

    /// Gradients of `sum(conv2d(x, w) · g)` with respect to `x` and `w`.
    pub fn conv2d_backward(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        g: &Tensor<f64>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> (Tensor<f64>, Tensor<f64>) {
        let (xs, ws, gs) = (x.shape(), w.shape(), g.shape());
        let mut gx = Tensor::zeros(xs);
        let mut gw = Tensor::zeros(ws);
        for n in 0..xs.n() {
            for o in 0..ws.n() {
                for i in 0..gs.h() {
                    for j in 0..gs.w() {
                        let go = g.get(n, o, i, j);
                        for c in 0..xs.c() {
                            for ki in 0..ws.h() {
                                for kj in 0..ws.w() {
                                    let (r, s) = ((i * stride.0 + ki) as isize - pad.0 as isize, (j * stride.1 + kj) as isize - pad.1 as isize);
                                    if r >= 0 && s >= 0 && (r as usize) < xs.h() && (s as usize) < xs.w() {
                                        let (r, s) = (r as usize, s as usize);
                                        gx.set(n, c, r, s, gx.get(n, c, r, s) + go * w.get(o, c, ki, kj));
                                        gw.set(o, c, ki, kj, gw.get(o, c, ki, kj) + go * x.get(n, c, r, s));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (gx, gw)
    }

    /// Window-scanning max pool without padding; ties keep the first
    /// element in row-major window order.
    pub fn max_pool2d(x: &Tensor<f64>, kernel: (usize, usize), stride: (usize, usize)) -> Tensor<f64> {
        let s = x.shape();
        let oh = (s.h() - kernel.0) / stride.0 + 1;
        let ow = (s.w() - kernel.1) / stride.1 + 1;
        let mut y = Tensor::zeros(Shape::new(s.n(), s.c(), oh, ow));
        for n in 0..s.n() {
            for c in 0..s.c() {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut m = f64::NEG_INFINITY;
                        for a in 0..kernel.0 {
                            for b in 0..kernel.1 {
                                m = m.max(x.get(n, c, i * stride.0 + a, j * stride.1 + b));
                            }
                        }
                        y.set(n, c, i, j, m);
                    }
                }
            }
        }
        y
    }

    /// `y = x · wᵀ + b` with `x` read as `(n, in)` and `w` as `(out, in)`.
    pub fn linear(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
        let (n, inf, out) = (x.shape().n(), x.shape().item_len(), w.shape().n());
        let mut y = Tensor::zeros([n, out, 1, 1]);
        for r in 0..n {
            for o in 0..out {
                let mut acc = b.map_or(0.0, |b| b.data()[o]);
                for k in 0..inf {
                    acc += x.data()[r * inf + k] * w.data()[o * inf + k];
                }
                y.data_mut()[r * out + o] = acc;
            }
        }
        y
    }
}

#[derive(Clone, Debug)]
pub struct VerifyConfig {
    pub seeds: u64,
    pub eps: f64,
    pub grad_tolerance: f64,
    pub oracle_cases: u64,
    pub oracle_tolerance: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { seeds: 10, eps: 1e-3, grad_tolerance: 1e-4, oracle_cases: 100, oracle_tolerance: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    /// Largest observed error; for exact checks 0 on success, 1 on failure.
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<32} max_err={:.3e} tol={:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            self.tolerance
        )?;
        if !self.detail.is_empty() {
            write!(f, "  {}", self.detail)?;
        }
        Ok(())
    }
}

fn report(name: &str, outcome: Result<(f64, String)>, tolerance: f64) -> CheckReport {
    match outcome {
        Ok((max_error, detail)) => {
            CheckReport { name: name.to_string(), max_error, tolerance, passed: max_error < tolerance, detail }
        }
        Err(e) => CheckReport {
            name: name.to_string(),
            max_error: f64::INFINITY,
            tolerance,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn uniform(shape: impl Into<Shape>, rng: &mut SeedRng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::create(shape, Fill::Uniform { seed: rng.next_u64(), lo, hi }).expect("small shape")
}

/// Values bounded away from zero, so relu has no kink within `eps`.
fn off_zero(shape: impl Into<Shape>, rng: &mut SeedRng) -> Tensor<f64> {
    let mut t = uniform(shape, rng, -1.0, 1.0);
    t.data_mut().iter_mut().for_each(|v| *v = v.signum() * (0.1 + v.abs()));
    t
}

/// Distinct values at least 0.03 apart, so no pooling window changes its
/// winner under a perturbation of `eps ≤ 1e-2`.
fn well_separated(shape: impl Into<Shape>, rng: &mut SeedRng) -> Tensor<f64> {
    let shape = shape.into();
    let perm = rng.permutation(shape.numel());
    let data = perm.iter().map(|&p| p as f64 * 0.05 - 1.0 + rng.uniform(-0.01, 0.01)).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

/// `sum(y · r)` for a fixed random `r`: a scalar whose gradient reaches every
/// output element with a distinct weight.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = Tensor::create(tape.shape(y), Fill::Uniform { seed, lo: -1.0, hi: 1.0 })?;
    let r = tape.constant(r);
    let prod = tape.mul(y, r)?;
    tape.sum(prod)
}

type Case = (Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

/// One random instance of an op under test.
fn op_case(op: &str, rng: &mut SeedRng) -> Case {
    let pseed = rng.next_u64();
    let dims = |rng: &mut SeedRng| [1 + rng.below(2), 1 + rng.below(3), 2 + rng.below(4), 2 + rng.below(4)];
    match op {
        "add" | "sub" | "mul" => {
            let s = dims(rng);
            let inputs = vec![uniform(s, rng, -1.0, 1.0), uniform(s, rng, -1.0, 1.0)];
            let kind = op.to_string();
            (
                inputs,
                Box::new(move |t, v| {
                    let y = match kind.as_str() {
                        "add" => t.add(v[0], v[1])?,
                        "sub" => t.sub(v[0], v[1])?,
                        _ => t.mul(v[0], v[1])?,
                    };
                    project(t, y, pseed)
                }),
            )
        }
        "mul_broadcast" => {
            let s = dims(rng);
            let inputs = vec![uniform(s, rng, -1.0, 1.0), uniform([1, s[1], 1, 1], rng, -1.0, 1.0)];
            (inputs, Box::new(move |t, v| {
                let y = t.mul(v[0], v[1])?;
                project(t, y, pseed)
            }))
        }
        "sum_scale_reshape" => {
            let s = dims(rng);
            let n = s.iter().product::<usize>();
            (vec![uniform(s, rng, -1.0, 1.0)], Box::new(move |t, v| {
                let r = t.reshape(v[0], [1, n, 1, 1])?;
                let k = t.scale(r, 1.7)?;
                let p = project(t, k, pseed)?;
                let s = t.sum(v[0])?;
                t.add(p, s)
            }))
        }
        "relu" => (vec![off_zero(dims(rng), rng)], Box::new(move |t, v| {
            let y = t.relu(v[0])?;
            project(t, y, pseed)
        })),
        "conv2d" => {
            let k = 1 + rng.below(3);
            let stride = (1 + rng.below(2), 1 + rng.below(2));
            let pad = (rng.below(2), rng.below(2));
            let (n, cin, cout) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3));
            let (h, w) = (k + rng.below(4), k + rng.below(4));
            let inputs =
                vec![uniform([n, cin, h, w], rng, -1.0, 1.0), uniform([cout, cin, k, k], rng, -1.0, 1.0), uniform([1, cout, 1, 1], rng, -1.0, 1.0)];
            (inputs, Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                project(t, y, pseed)
            }))
        }
        "max_pool2d" => {
            let kernel = (1 + rng.below(3), 1 + rng.below(3));
            let stride = (1 + rng.below(2), 1 + rng.below(2));
            let s = [1 + rng.below(2), 1 + rng.below(2), kernel.0 + rng.below(4), kernel.1 + rng.below(4)];
            (vec![well_separated(s, rng)], Box::new(move |t, v| {
                let y = t.max_pool2d(v[0], kernel, stride)?;
                project(t, y, pseed)
            }))
        }
        "pad2d" => {
            let pad = (rng.below(3), rng.below(3));
            (vec![uniform(dims(rng), rng, -1.0, 1.0)], Box::new(move |t, v| {
                let y = t.pad2d(v[0], pad)?;
                project(t, y, pseed)
            }))
        }
        "global_avg_pool" => (vec![uniform(dims(rng), rng, -1.0, 1.0)], Box::new(move |t, v| {
            let y = t.global_avg_pool(v[0])?;
            project(t, y, pseed)
        })),
        "bilinear_upsample" => {
            let (oh, ow) = (1 + rng.below(9), 1 + rng.below(9));
            (vec![uniform(dims(rng), rng, -1.0, 1.0)], Box::new(move |t, v| {
                let y = t.bilinear_upsample(v[0], oh, ow)?;
                project(t, y, pseed)
            }))
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let mode = if op == "batch_norm_train" { BnMode::Train } else { BnMode::Eval };
            let s = [2 + rng.below(2), 1 + rng.below(3), 2 + rng.below(3), 2 + rng.below(3)];
            let c = s[1];
            let mut p = BatchNorm2dParams::<f64>::new(c);
            p.running_mean = uniform([1, c, 1, 1], rng, -0.5, 0.5);
            p.running_var = uniform([1, c, 1, 1], rng, 0.5, 2.0);
            let inputs = vec![uniform(s, rng, -2.0, 2.0), uniform([1, c, 1, 1], rng, 0.5, 1.5), uniform([1, c, 1, 1], rng, -0.5, 0.5)];
            (inputs, Box::new(move |t, v| {
                let (y, _) = t.batch_norm2d(v[0], v[1], v[2], p.running(), mode)?;
                project(t, y, pseed)
            }))
        }
        "linear" => {
            let (n, inf, out) = (1 + rng.below(3), 1 + rng.below(6), 1 + rng.below(4));
            let inputs = vec![uniform([n, inf, 1, 1], rng, -1.0, 1.0), uniform([out, inf, 1, 1], rng, -1.0, 1.0), uniform([1, out, 1, 1], rng, -1.0, 1.0)];
            (inputs, Box::new(move |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                project(t, y, pseed)
            }))
        }
        "concat_channels" => {
            let (n, h, w) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3));
            let inputs = (0..3).map(|_| uniform([n, 1 + rng.below(3), h, w], rng, -1.0, 1.0)).collect();
            (inputs, Box::new(move |t, v| {
                let y = t.concat_channels(v)?;
                project(t, y, pseed)
            }))
        }
        "cross_entropy" | "gather_sum" => {
            let (n, k) = (1 + rng.below(4), 2 + rng.below(4));
            let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
            let inputs = vec![uniform([n, k, 1, 1], rng, -3.0, 3.0)];
            let ce = op == "cross_entropy";
            (inputs, Box::new(move |t, v| if ce { t.cross_entropy(v[0], &labels) } else { t.gather_sum(v[0], &labels) }))
        }
        "conv_bn_relu" => loop {
            // redraw until every relu input is clear of the kink
            let (n, cin, cout) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3));
            let (h, w) = (3 + rng.below(3), 3 + rng.below(3));
            let x = uniform([n, cin, h, w], rng, -1.0, 1.0);
            let wt = uniform([cout, cin, 3, 3], rng, -0.5, 0.5);
            let (gamma, beta) = (uniform([1, cout, 1, 1], rng, 0.5, 1.5), uniform([1, cout, 1, 1], rng, -0.5, 0.5));
            let mut p = BatchNorm2dParams::<f64>::new(cout);
            p.running_mean = uniform([1, cout, 1, 1], rng, -0.2, 0.2);
            p.running_var = uniform([1, cout, 1, 1], rng, 0.5, 2.0);
            let pre = |t: &mut Tape<f64>, v: &[Var], p: &BatchNorm2dParams<f64>| -> Result<Var> {
                let y = t.conv2d(v[0], v[1], None, (1, 1), (1, 1))?;
                Ok(t.batch_norm2d(y, v[2], v[3], p.running(), BnMode::Eval)?.0)
            };
            let inputs = vec![x, wt, gamma, beta];
            let mut probe = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
            let z = pre(&mut probe, &vars, &p).expect("valid shapes");
            if probe.value(z).data().iter().all(|v| v.abs() >= 0.02) {
                break (inputs, Box::new(move |t, v| {
                    let z = pre(t, v, &p)?;
                    let y = t.relu(z)?;
                    project(t, y, pseed)
                }));
            }
        },
        "hypercolumn_head" => loop {
            // 1x1 conv, upsample, max pool per tap, then concat, linear and
            // cross-entropy; redrawn until every pooling window has a clear
            // winner
            let n = 2;
            let sizes = [2, 4, 8];
            let taps: Vec<Tensor<f64>> = sizes.iter().map(|&s| uniform([n, 2 + rng.below(3), s, s], rng, -1.0, 1.0)).collect();
            let weights: Vec<Tensor<f64>> = taps.iter().map(|t| uniform([2, t.shape().c(), 1, 1], rng, -1.0, 1.0)).collect();
            let biases: Vec<Tensor<f64>> = (0..3).map(|_| uniform([1, 2, 1, 1], rng, -0.5, 0.5)).collect();
            let fc_w = uniform([3, 3 * 2 * 9, 1, 1], rng, -0.3, 0.3);
            let fc_b = uniform([1, 3, 1, 1], rng, -0.3, 0.3);
            let labels: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
            let mut inputs = taps;
            inputs.extend(weights);
            inputs.extend(biases);
            inputs.extend([fc_w, fc_b]);
            let upsampled = |t: &mut Tape<f64>, v: &[Var], i: usize| -> Result<Var> {
                let r = t.conv2d(v[i], v[3 + i], Some(v[6 + i]), (1, 1), (0, 0))?;
                t.bilinear_upsample(r, 8, 8)
            };
            let mut probe = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
            let margin = (0..3)
                .map(|i| {
                    let u = upsampled(&mut probe, &vars, i).expect("valid shapes");
                    pool_margin(probe.value(u), (4, 4), (2, 2))
                })
                .fold(f64::INFINITY, f64::min);
            if margin >= 0.02 {
                break (inputs, Box::new(move |t, v| {
                    let pooled = (0..3)
                        .map(|i| {
                            let u = upsampled(t, v, i)?;
                            t.max_pool2d(u, (4, 4), (2, 2))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let hyper = t.concat_channels(&pooled)?;
                    let flat = t.flatten(hyper)?;
                    let logits = t.linear(flat, v[9], Some(v[10]))?;
                    t.cross_entropy(logits, &labels)
                }));
            }
        },
        other => unreachable!("unknown op {other}"),
    }
}

/// Smallest gap between the largest and second-largest value of any
/// pooling window.
fn pool_margin(t: &Tensor<f64>, kernel: (usize, usize), stride: (usize, usize)) -> f64 {
    let s = t.shape();
    let (oh, ow) = ((s.h() - kernel.0) / stride.0 + 1, (s.w() - kernel.1) / stride.1 + 1);
    let mut margin = f64::INFINITY;
    for n in 0..s.n() {
        for c in 0..s.c() {
            for i in 0..oh {
                for j in 0..ow {
                    let (mut top, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                    for a in 0..kernel.0 {
                        for b in 0..kernel.1 {
                            let v = t.get(n, c, i * stride.0 + a, j * stride.1 + b);
                            if v > top {
                                (top, second) = (v, top);
                            } else if v > second {
                                second = v;
                            }
                        }
                    }
                    margin = margin.min(top - second);
                }
            }
        }
    }
    margin
}

pub const OPS: [&str; 19] = [
    "add",
    "sub",
    "mul",
    "mul_broadcast",
    "sum_scale_reshape",
    "relu",
    "conv2d",
    "max_pool2d",
    "pad2d",
    "global_avg_pool",
    "bilinear_upsample",
    "batch_norm_train",
    "batch_norm_eval",
    "linear",
    "concat_channels",
    "cross_entropy",
    "gather_sum",
    "conv_bn_relu",
    "hypercolumn_head",
];

/// Gradient check of one op over `cfg.seeds` random instances.
pub fn check_op(op: &str, cfg: &VerifyConfig) -> CheckReport {
    let outcome = (|| {
        let mut worst = 0.0f64;
        let mut checked = 0;
        for seed in 0..cfg.seeds {
            let mut rng = SeedRng::derive(seed, &[0x7e57, op.len() as u64, op.bytes().map(u64::from).sum()]);
            let (inputs, f) = op_case(op, &mut rng);
            let r = grad_check(|t, v| f(t, v), &inputs, cfg.eps, cfg.grad_tolerance)?;
            worst = worst.max(r.max_rel_error);
            checked += r.checked;
        }
        Ok((worst, format!("{} seeds, {checked} elements", cfg.seeds)))
    })();
    report(&format!("grad/{op}"), outcome, cfg.grad_tolerance)
}

/// A small model in double precision for end-to-end checks.
pub fn tiny_model(kind: ModelKind, seed: u64) -> Result<Model<f64>> {
    let cfg = ModelConfig {
        kind,
        backbone: BackboneSpec { width_multiplier: 0.0625 },
        taps: TapSpec { reduce_channels: 2, pool_kernel: (8, 8), pool_stride: (8, 8), ..TapSpec::desk_scale() },
        num_classes: 3,
        input_size: (32, 32),
    };
    Model::build(cfg, seed)
}

/// Central-difference step of the end-to-end model check. A deep relu
/// network crosses kinks under steps of 1e-3, so the model-level check uses
/// a small step and a looser tolerance than the per-op checks.
pub const END_TO_END_EPS: f64 = 1e-6;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

/// Gradient check of cross-entropy through a full train-mode forward pass,
/// on `elements` random parameter elements.
pub fn check_model_end_to_end(kind: ModelKind, seed: u64, elements: usize) -> Result<(f64, String)> {
    let model = tiny_model(kind, seed)?;
    let mut rng = SeedRng::derive(seed, &[0x919e]);
    let x = uniform([4, 3, 32, 32], &mut rng, -1.0, 1.0);
    let labels: Vec<usize> = (0..4).map(|_| rng.below(3)).collect();
    let mut inputs = vec![x];
    inputs.extend(model.params.tensors().iter().cloned());
    let picks: Vec<(usize, usize)> = (0..elements)
        .map(|_| {
            let p = 1 + rng.below(inputs.len() - 1);
            (p, rng.below(inputs[p].len()))
        })
        .collect();
    let f = |t: &mut Tape<f64>, v: &[Var]| {
        let out = model.forward(t, &ParamVars(v[1..].to_vec()), v[0], BnMode::Train)?;
        t.cross_entropy(out.logits, &labels)
    };
    let r = grad_check_elements(f, &inputs, &picks, END_TO_END_EPS, END_TO_END_TOLERANCE)?;
    Ok((r.max_rel_error, format!("{} parameter elements, worst in {}", r.checked, model.params.names()[r.worst.0 - 1])))
}

fn rel_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.max_abs_diff(b) / scale
}

pub fn check_conv_oracle(cfg: &VerifyConfig) -> CheckReport {
    let outcome = (|| {
        let mut worst = 0.0f64;
        for case in 0..cfg.oracle_cases {
            let mut rng = SeedRng::derive(case, &[0xc0de, 1]);
            let (kh, kw) = (1 + rng.below(4), 1 + rng.below(4));
            let stride = (1 + rng.below(3), 1 + rng.below(3));
            let pad = (rng.below(kh), rng.below(kw));
            let (n, cin, cout) = (1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(4));
            let (h, w) = (kh + rng.below(8), kw + rng.below(8));
            let x = uniform([n, cin, h, w], &mut rng, -1.0, 1.0);
            let wt = uniform([cout, cin, kh, kw], &mut rng, -1.0, 1.0);
            let b = uniform([1, cout, 1, 1], &mut rng, -1.0, 1.0);
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.leaf(x.clone().with_grad(true)), tape.leaf(wt.clone().with_grad(true)), tape.constant(b.clone()));
            let y = tape.conv2d(xv, wv, Some(bv), stride, pad)?;
            let expected = oracle::conv2d(&x, &wt, Some(&b), stride, pad);
            worst = worst.max(rel_diff(tape.value(y), &expected));
            let g = uniform(expected.shape(), &mut rng, -1.0, 1.0);
            let gv = tape.constant(g.clone());
            let prod = tape.mul(y, gv)?;
            let l = tape.sum(prod)?;
            let grads = tape.backward(l)?;
            let (gx, gw) = oracle::conv2d_backward(&x, &wt, &g, stride, pad);
            worst = worst.max(rel_diff(grads.get(xv).expect("tracked"), &gx));
            worst = worst.max(rel_diff(grads.get(wv).expect("tracked"), &gw));
        }
        Ok((worst, format!("{} shapes, forward and backward", cfg.oracle_cases)))
    })();
    report("oracle/conv2d", outcome, cfg.oracle_tolerance)
}

pub fn check_pool_oracle(cfg: &VerifyConfig) -> CheckReport {
    let outcome = (|| {
        let mut worst = 0.0f64;
        for case in 0..cfg.oracle_cases {
            let mut rng = SeedRng::derive(case, &[0xc0de, 2]);
            let kernel = (1 + rng.below(5), 1 + rng.below(5));
            let stride = (1 + rng.below(4), 1 + rng.below(4));
            let s = [1 + rng.below(3), 1 + rng.below(4), kernel.0 + rng.below(10), kernel.1 + rng.below(10)];
            // coarse values make ties common
            let mut x = uniform(s, &mut rng, -3.0, 3.0);
            x.data_mut().iter_mut().for_each(|v| *v = v.round());
            let (y, arg) = max_pool2d(&x, kernel, stride)?;
            worst = worst.max(rel_diff(&y, &oracle::max_pool2d(&x, kernel, stride)));
            if arg.iter().zip(y.data()).any(|(&a, &v)| x.data()[a as usize] != v) {
                worst = f64::INFINITY;
            }
        }
        Ok((worst, format!("{} shapes", cfg.oracle_cases)))
    })();
    report("oracle/max_pool2d", outcome, cfg.oracle_tolerance)
}

pub fn check_linear_oracle(cfg: &VerifyConfig) -> CheckReport {
    let outcome = (|| {
        let mut worst = 0.0f64;
        for case in 0..cfg.oracle_cases {
            let mut rng = SeedRng::derive(case, &[0xc0de, 3]);
            let (n, inf, out) = (1 + rng.below(8), 1 + rng.below(40), 1 + rng.below(10));
            let x = uniform([n, inf, 1, 1], &mut rng, -1.0, 1.0);
            let w = uniform([out, inf, 1, 1], &mut rng, -1.0, 1.0);
            let b = uniform([1, out, 1, 1], &mut rng, -1.0, 1.0);
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
            let y = tape.linear(xv, wv, Some(bv))?;
            worst = worst.max(rel_diff(tape.value(y), &oracle::linear(&x, &w, Some(&b))));
        }
        Ok((worst, format!("{} shapes", cfg.oracle_cases)))
    })();
    report("oracle/linear", outcome, cfg.oracle_tolerance)
}

fn exact(name: &str, outcome: Result<std::result::Result<String, String>>) -> CheckReport {
    let (max_error, passed, detail) = match outcome {
        Ok(Ok(d)) => (0.0, true, d),
        Ok(Err(d)) => (1.0, false, d),
        Err(e) => (1.0, false, format!("error: {e}")),
    };
    CheckReport { name: name.to_string(), max_error, tolerance: 0.5, passed, detail }
}

/// Output extents of conv, pool and upsample against their closed forms,
/// and every model tap against its predicted geometry.
pub fn check_shapes(cfg: &VerifyConfig) -> CheckReport {
    let outcome = (|| {
        for case in 0..cfg.oracle_cases {
            let mut rng = SeedRng::derive(case, &[0x5a9e]);
            let (h, w) = (1 + rng.below(12), 1 + rng.below(12));
            let (k, s, p) = (1 + rng.below(4), 1 + rng.below(3), rng.below(2));
            let x = Tensor::<f64>::zeros([1, 2, h, w]);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(Tensor::zeros([3, 2, k, k]));
            let conv = tape.conv2d(xv, wv, None, (s, s), (p, p));
            match (h + 2 * p >= k && w + 2 * p >= k, conv) {
                (true, Ok(y)) => {
                    let want = Shape::new(1, 3, (h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1);
                    if tape.shape(y) != want {
                        return Ok(Err(format!("conv {h}x{w} k{k} s{s} p{p}: {} != {want}", tape.shape(y))));
                    }
                }
                (false, Err(_)) => {}
                (fits, r) => return Ok(Err(format!("conv {h}x{w} k{k}: fits={fits} but ok={}", r.is_ok()))),
            }
            match (pooled_extent(h, k, s), pooled_extent(w, k, s), max_pool2d(&x, (k, k), (s, s))) {
                (Some(oh), Some(ow), Ok((y, _))) if y.shape() == Shape::new(1, 2, oh, ow) => {}
                (None, _, Err(_)) | (_, None, Err(_)) => {}
                _ => return Ok(Err(format!("pool {h}x{w} k{k} s{s} disagrees with the extent formula"))),
            }
            let (oh, ow) = (1 + rng.below(12), 1 + rng.below(12));
            let up = tape.bilinear_upsample(xv, oh, ow)?;
            if tape.shape(up) != Shape::new(1, 2, oh, ow) {
                return Ok(Err("upsample shape".into()));
            }
        }
        for (wm, size) in [(0.0625, 32), (0.0625, 96), (0.125, 64)] {
            let cfg = ModelConfig {
                kind: ModelKind::Hypercolumn,
                backbone: BackboneSpec { width_multiplier: wm },
                taps: TapSpec { pool_kernel: (size / 4, size / 4), pool_stride: (size / 8, size / 8), ..TapSpec::default() },
                num_classes: 2,
                input_size: (size, size),
            };
            let model = Model::<f32>::build(cfg.clone(), 0)?;
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, false);
            let x = tape.constant(Tensor::zeros([1, 3, size, size]));
            let (out, _) = model.forward_with_taps(&mut tape, &vars, x, BnMode::Eval)?;
            for (name, v) in &out.taps {
                let (c, down) = cfg.backbone.tap_geometry(name).expect("registered tap");
                let want = Shape::new(1, c, size / down, size / down);
                if tape.shape(*v) != want {
                    return Ok(Err(format!("tap {name} at {size}: {} != {want}", tape.shape(*v))));
                }
            }
        }
        // full-size geometry: a narrow backbone suffices to exercise the shapes
        let full = ModelConfig {
            kind: ModelKind::Hypercolumn,
            backbone: BackboneSpec { width_multiplier: 0.0625 },
            taps: TapSpec::default(),
            num_classes: 10,
            input_size: (224, 224),
        };
        let model = Model::<f32>::build(full.clone(), 0)?;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros([1, 3, 224, 224]));
        let (out, _) = model.forward_with_taps(&mut tape, &vars, x, BnMode::Eval)?;
        let mut pooled = Vec::new();
        for (i, (_, t)) in out.taps.iter().enumerate() {
            let w = tape.param(model.params.get(&format!("head.tap{i}.weight")).expect("head weight"));
            let r = tape.conv2d(*t, w, None, (1, 1), (0, 0))?;
            let u = tape.bilinear_upsample(r, 224, 224)?;
            let p = tape.max_pool2d(u, (56, 56), (26, 26))?;
            if tape.shape(p) != Shape::new(1, 16, 7, 7) {
                return Ok(Err(format!("pooled tap {i} is {}", tape.shape(p))));
            }
            pooled.push(p);
        }
        let hyper = tape.concat_channels(&pooled)?;
        let features = tape.shape(hyper).item_len();
        if out.taps.len() != DEFAULT_TAPS.len() || features != 7056 || full.head_in_features()? != 7056 {
            return Ok(Err(format!("224x224 head has {features} features from {} taps", out.taps.len())));
        }
        Ok(Ok(format!("{} random cases, 3 model geometries, 224x224 head = 7056", cfg.oracle_cases)))
    })();
    exact("shapes/formulas", outcome)
}

pub fn check_checkpoint_round_trip() -> CheckReport {
    let outcome = (|| {
        let model = tiny_model(ModelKind::Hypercolumn, 3)?.cast::<f32>();
        let mut state = TrainState::new(model, 5, 6, 3, Normalization { mean: [0.4, 0.5, 0.6], std: [0.2, 0.25, 0.3] });
        state.epoch = 7;
        for (i, t) in state.velocity.tensors_mut().iter_mut().enumerate() {
            *t = Tensor::create(t.shape(), Fill::Uniform { seed: i as u64, lo: -1.0, hi: 1.0 })?;
        }
        let ck = Checkpoint::from_state(&state, "model.kind=hypercolumn\n");
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).map_err(|msg| crate::Error::Checkpoint { path: "<memory>".into(), msg })?;
        if back.encode() != bytes {
            return Ok(Err("re-encoded bytes differ".into()));
        }
        let restored = back.to_state(&state.model.config)?;
        if !(restored.model.params.bit_eq(&state.model.params) && restored.velocity.bit_eq(&state.velocity) && restored == state) {
            return Ok(Err("restored state differs".into()));
        }
        Ok(Ok(format!("{} bytes", bytes.len())))
    })();
    exact("checkpoint/round_trip", outcome)
}

pub fn check_schedule() -> CheckReport {
    let cfg = TrainConfig::default();
    let trace: Vec<f64> = (0..cfg.epochs).map(|e| lr_at(e, &cfg)).collect();
    let want: Vec<f64> = std::iter::repeat_n(0.001, 24).chain(std::iter::repeat_n(0.001 * 0.1, 6)).collect();
    let ok = trace == want;
    exact("schedule/defaults", Ok(if ok { Ok("24 x 0.001, 6 x 0.0001".into()) } else { Err(format!("{trace:?}")) }))
}

/// Runs every check, calling `progress` as each finishes.
pub fn run_all(cfg: &VerifyConfig, mut progress: impl FnMut(&CheckReport)) -> Vec<CheckReport> {
    let mut out = Vec::new();
    let mut push = |r: CheckReport| {
        progress(&r);
        out.push(r);
    };
    for op in OPS {
        push(check_op(op, cfg));
    }
    for kind in [ModelKind::Baseline, ModelKind::Hypercolumn] {
        let outcome = (|| {
            let mut worst = (0.0f64, String::new());
            for seed in 0..cfg.seeds.min(3) {
                let r = check_model_end_to_end(kind, seed, 24)?;
                if r.0 >= worst.0 {
                    worst = (r.0, format!("{}, eps {END_TO_END_EPS:e}", r.1));
                }
            }
            Ok(worst)
        })();
        push(report(&format!("grad/model_{kind}"), outcome, END_TO_END_TOLERANCE));
    }
    push(check_conv_oracle(cfg));
    push(check_pool_oracle(cfg));
    push(check_linear_oracle(cfg));
    push(check_shapes(cfg));
    push(check_checkpoint_round_trip());
    push(check_schedule());
    out
}
