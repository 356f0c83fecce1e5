//! ResNet-18 style backbone with named taps, the hypercolumn head and the
//! global-average-pool baseline head.

mod config;
mod params;

pub use config::{BackboneSpec, ModelConfig, ModelKind, TapSpec, DEFAULT_TAPS, TAP_REGISTRY};
pub use params::ParamSet;

use crate::error::{Error, Result};
use crate::nn::{BnMode, BnRunning, RunningStats};
use crate::rng::{streams, SeedRng};
use crate::tape::{Tape, Var};
use crate::tensor::{Fill, Scalar, Shape, Tensor};

const BN_MOMENTUM: f64 = 0.1;
const BN_EPSILON: f64 = 1e-5;

/// A classifier: backbone parameters, a head, and batch-norm running
/// statistics (`buffers`).
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub buffers: ParamSet<T>,
}

/// Tape variables for every parameter, in [`Model::params`] order.
#[derive(Clone, Debug)]
pub struct ParamVars(pub Vec<Var>);

/// Backbone output plus the captured taps, in [`TapSpec::tap_points`] order.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub features: Var,
    pub taps: Vec<(String, Var)>,
}

/// Running statistics produced by a train-mode forward pass, keyed by the
/// batch-norm layer name.
pub type BnUpdates<T> = Vec<(String, RunningStats<T>)>;

pub struct Forward<T> {
    pub logits: Var,
    pub taps: Vec<(String, Var)>,
    pub bn_updates: BnUpdates<T>,
}

fn name_label(name: &str) -> u64 {
    // FNV-1a; parameters are seeded by name so architectures that share a
    // layer share its initial values.
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

struct Builder<'a, T> {
    params: ParamSet<T>,
    buffers: ParamSet<T>,
    rng: &'a SeedRng,
}

impl<T: Scalar> Builder<'_, T> {
    fn seed(&self, name: &str) -> u64 {
        self.rng.split(name_label(name)).next_u64()
    }

    fn conv(&mut self, name: &str, out_c: usize, in_c: usize, k: usize, bias: bool) -> Result<()> {
        let w = format!("{name}.weight");
        let fan_in = in_c * k * k;
        let t = Tensor::create([out_c, in_c, k, k], Fill::Kaiming { seed: self.seed(&w), fan_in })?;
        self.params.insert(w, t);
        if bias {
            self.params.insert(format!("{name}.bias"), Tensor::zeros([1, out_c, 1, 1]));
        }
        Ok(())
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<()> {
        self.params.insert(format!("{name}.gamma"), Tensor::create([1, c, 1, 1], Fill::Ones)?);
        self.params.insert(format!("{name}.beta"), Tensor::zeros([1, c, 1, 1]));
        self.buffers.insert(format!("{name}.running_mean"), Tensor::zeros([1, c, 1, 1]));
        self.buffers.insert(format!("{name}.running_var"), Tensor::create([1, c, 1, 1], Fill::Ones)?);
        Ok(())
    }

    fn linear(&mut self, name: &str, out_f: usize, in_f: usize) -> Result<()> {
        let w = format!("{name}.weight");
        let bound = 1.0 / (in_f as f64).sqrt();
        let t = Tensor::create([out_f, in_f, 1, 1], Fill::Uniform { seed: self.seed(&w), lo: -bound, hi: bound })?;
        self.params.insert(w, t);
        self.params.insert(format!("{name}.bias"), Tensor::zeros([1, out_f, 1, 1]));
        Ok(())
    }
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes a model. Parameters are a pure function of
    /// `(seed, parameter name)`; baseline and hypercolumn models built from
    /// one seed share their backbone bit for bit.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = SeedRng::derive(seed, &[streams::INIT]);
        let mut b = Builder { params: ParamSet::new(), buffers: ParamSet::new(), rng: &rng };
        let stem = config.backbone.stem_width();
        b.conv("stem.conv", stem, 3, 7, false)?;
        b.bn("stem.bn", stem)?;
        let mut in_c = stem;
        for (s, &width) in config.backbone.stage_widths().iter().enumerate() {
            for blk in 0..2 {
                let name = format!("layer{}.{blk}", s + 1);
                let block_in = if blk == 0 { in_c } else { width };
                b.conv(&format!("{name}.conv1"), width, block_in, 3, false)?;
                b.bn(&format!("{name}.bn1"), width)?;
                b.conv(&format!("{name}.conv2"), width, width, 3, false)?;
                b.bn(&format!("{name}.bn2"), width)?;
                if blk == 0 && s > 0 {
                    b.conv(&format!("{name}.downsample.conv"), width, block_in, 1, false)?;
                    b.bn(&format!("{name}.downsample.bn"), width)?;
                }
            }
            in_c = width;
        }
        match config.kind {
            ModelKind::Baseline => b.linear("head.fc", config.num_classes, config.backbone.final_width())?,
            ModelKind::Hypercolumn => {
                for (i, tap) in config.taps.tap_points.iter().enumerate() {
                    let (c, _) = config.backbone.tap_geometry(tap).expect("validated tap");
                    b.conv(&format!("head.tap{i}"), config.taps.reduce_channels, c, 1, config.taps.bias)?;
                }
                b.linear("head.fc", config.num_classes, config.head_in_features()?)?;
            }
        }
        Ok(Self { config, params: b.params, buffers: b.buffers })
    }

    /// Records every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ParamVars {
        ParamVars(self.params.tensors().iter().map(|t| tape.leaf(t.clone().with_grad(trainable))).collect())
    }

    /// Parameters only; the batch-norm statistics are in `buffers`.
    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        let (h, w) = self.config.input_size;
        if shape.c() != 3 || shape.h() != h || shape.w() != w {
            return Err(Error::Model(format!("expected input (n, 3, {h}, {w}), got {shape}")));
        }
        Ok(())
    }

    /// Runs the backbone and captures the configured taps.
    pub fn forward_with_taps(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        x: Var,
        mode: BnMode,
    ) -> Result<(BackboneOutput, BnUpdates<T>)> {
        self.check_input(tape.shape(x))?;
        let mut f = Pass { model: self, tape, vars, mode, captured: Vec::new(), updates: Vec::new() };
        let features = f.backbone(x)?;
        let Pass { captured, updates, .. } = f;
        let wanted: &[String] = match self.config.kind {
            ModelKind::Hypercolumn => &self.config.taps.tap_points,
            ModelKind::Baseline => &[],
        };
        let taps = wanted
            .iter()
            .map(|name| {
                captured
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|&(_, v)| (name.clone(), v))
                    .ok_or_else(|| Error::Model(format!("tap `{name}` was not produced")))
            })
            .collect::<Result<_>>()?;
        Ok((BackboneOutput { features, taps }, updates))
    }

    /// Per tap: 1×1 conv, bilinear upsample, max pool. The pooled maps are
    /// concatenated in the order given, flattened, and fed to the classifier.
    pub fn hypercolumn_forward(&self, tape: &mut Tape<T>, vars: &ParamVars, taps: &[(String, Var)]) -> Result<Var> {
        if self.config.kind != ModelKind::Hypercolumn {
            return Err(Error::Model("hypercolumn_forward called on a baseline model".into()));
        }
        let spec = &self.config.taps;
        if taps.len() != spec.tap_points.len() {
            return Err(Error::Model(format!("head expects {} taps, got {}", spec.tap_points.len(), taps.len())));
        }
        let (uh, uw) = self.config.upsample_size();
        let mut pooled = Vec::with_capacity(taps.len());
        for (i, &(_, t)) in taps.iter().enumerate() {
            let w = self.var(vars, &format!("head.tap{i}.weight"))?;
            let b = if spec.bias { Some(self.var(vars, &format!("head.tap{i}.bias"))?) } else { None };
            let reduced = tape.conv2d(t, w, b, (1, 1), (0, 0))?;
            let up = tape.bilinear_upsample(reduced, uh, uw)?;
            pooled.push(tape.max_pool2d(up, spec.pool_kernel, spec.pool_stride)?);
        }
        let hyper = tape.concat_channels(&pooled)?;
        self.classify(tape, vars, hyper)
    }

    /// Backbone, global average pool, classifier.
    pub fn baseline_forward(&self, tape: &mut Tape<T>, vars: &ParamVars, x: Var, mode: BnMode) -> Result<Forward<T>> {
        let (out, bn_updates) = self.forward_with_taps(tape, vars, x, mode)?;
        let pooled = tape.global_avg_pool(out.features)?;
        let logits = self.classify(tape, vars, pooled)?;
        Ok(Forward { logits, taps: out.taps, bn_updates })
    }

    /// Logits for either model kind.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &ParamVars, x: Var, mode: BnMode) -> Result<Forward<T>> {
        match self.config.kind {
            ModelKind::Baseline => self.baseline_forward(tape, vars, x, mode),
            ModelKind::Hypercolumn => {
                let (out, bn_updates) = self.forward_with_taps(tape, vars, x, mode)?;
                let logits = self.hypercolumn_forward(tape, vars, &out.taps)?;
                Ok(Forward { logits, taps: out.taps, bn_updates })
            }
        }
    }

    /// Eval-mode logits `(n, num_classes, 1, 1)` for a batch of images.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &vars, x, BnMode::Eval)?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn apply_bn_updates(&mut self, updates: BnUpdates<T>) {
        for (layer, stats) in updates {
            *self.buffers.get_mut(&format!("{layer}.running_mean")).expect("known layer") = stats.mean;
            *self.buffers.get_mut(&format!("{layer}.running_var")).expect("known layer") = stats.var;
        }
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast(), buffers: self.buffers.cast() }
    }

    fn var(&self, vars: &ParamVars, name: &str) -> Result<Var> {
        self.params
            .position(name)
            .and_then(|i| vars.0.get(i).copied())
            .ok_or_else(|| Error::Model(format!("missing parameter `{name}`")))
    }

    fn classify(&self, tape: &mut Tape<T>, vars: &ParamVars, features: Var) -> Result<Var> {
        let w = self.var(vars, "head.fc.weight")?;
        let b = self.var(vars, "head.fc.bias")?;
        let flat = tape.flatten(features)?;
        tape.linear(flat, w, Some(b))
    }
}

/// State of one backbone evaluation.
struct Pass<'a, T> {
    model: &'a Model<T>,
    tape: &'a mut Tape<T>,
    vars: &'a ParamVars,
    mode: BnMode,
    captured: Vec<(String, Var)>,
    updates: BnUpdates<T>,
}

impl<T: Scalar> Pass<'_, T> {
    fn conv(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.model.var(self.vars, &format!("{name}.weight"))?;
        self.tape.conv2d(x, w, None, (stride, stride), (pad, pad))
    }

    fn bn(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.model.var(self.vars, &format!("{name}.gamma"))?;
        let beta = self.model.var(self.vars, &format!("{name}.beta"))?;
        let buffer = |suffix: &str| {
            self.model
                .buffers
                .get(&format!("{name}.{suffix}"))
                .ok_or_else(|| Error::Model(format!("missing buffer `{name}.{suffix}`")))
        };
        let running = BnRunning {
            mean: buffer("running_mean")?,
            var: buffer("running_var")?,
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        };
        let (y, stats) = self.tape.batch_norm2d(x, gamma, beta, running, self.mode)?;
        if let Some(stats) = stats {
            self.updates.push((name.to_string(), stats));
        }
        Ok(y)
    }

    fn capture(&mut self, name: &str, v: Var) {
        self.captured.push((name.to_string(), v));
    }

    fn block(&mut self, x: Var, name: &str, stride: usize, project: bool) -> Result<Var> {
        let h = self.conv(x, &format!("{name}.conv1"), stride, 1)?;
        let h = self.bn(h, &format!("{name}.bn1"))?;
        let h = self.tape.relu(h)?;
        let h = self.conv(h, &format!("{name}.conv2"), 1, 1)?;
        let h = self.bn(h, &format!("{name}.bn2"))?;
        let shortcut = if project {
            let ds = format!("{name}.downsample");
            let s = self.conv(x, &format!("{ds}.conv"), stride, 0)?;
            let s = self.bn(s, &format!("{ds}.bn"))?;
            self.capture(&ds, s);
            s
        } else {
            x
        };
        let sum = self.tape.add(h, shortcut)?;
        let out = self.tape.relu(sum)?;
        self.capture(name, out);
        Ok(out)
    }

    fn backbone(&mut self, x: Var) -> Result<Var> {
        let h = self.conv(x, "stem.conv", 2, 3)?;
        let h = self.bn(h, "stem.bn")?;
        let h = self.tape.relu(h)?;
        // Post-ReLU activations are nonnegative, so zero padding never wins
        // the max.
        let h = self.tape.pad2d(h, (1, 1))?;
        let mut h = self.tape.max_pool2d(h, (3, 3), (2, 2))?;
        self.capture("stem", h);
        for stage in 1..=4 {
            let stride = if stage == 1 { 1 } else { 2 };
            h = self.block(h, &format!("layer{stage}.0"), stride, stage > 1)?;
            h = self.block(h, &format!("layer{stage}.1"), 1, false)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            backbone: BackboneSpec { width_multiplier: 1.0 / 16.0 },
            taps: TapSpec { pool_kernel: (8, 8), pool_stride: (4, 4), ..TapSpec::default() },
            num_classes: 3,
            input_size: (32, 32),
        }
    }

    fn input(n: usize, size: usize, seed: u64) -> Tensor<f32> {
        Tensor::create([n, 3, size, size], Fill::Uniform { seed, lo: -1.0, hi: 1.0 }).unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::<f32>::build(tiny(ModelKind::Hypercolumn), 5).unwrap();
        let b = Model::<f32>::build(tiny(ModelKind::Hypercolumn), 5).unwrap();
        assert!(a.params.bit_eq(&b.params));
        let c = Model::<f32>::build(tiny(ModelKind::Hypercolumn), 6).unwrap();
        assert!(!a.params.bit_eq(&c.params));
    }

    #[test]
    fn baseline_and_hypercolumn_share_backbone() {
        let a = Model::<f32>::build(tiny(ModelKind::Hypercolumn), 9).unwrap();
        let b = Model::<f32>::build(tiny(ModelKind::Baseline), 9).unwrap();
        let mut shared = 0;
        for (name, t) in b.params.iter().filter(|(n, _)| !n.starts_with("head.")) {
            let u = a.params.get(name).unwrap();
            assert!(t.data().iter().zip(u.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{name}");
            shared += 1;
        }
        assert_eq!(shared, a.params.names().iter().filter(|n| !n.starts_with("head.")).count());
    }

    #[test]
    fn baseline_head_in_features() {
        let m = Model::<f32>::build(tiny(ModelKind::Baseline), 1).unwrap();
        assert_eq!(m.params.get("head.fc.weight").unwrap().shape(), Shape::new(3, 32, 1, 1));
    }

    #[test]
    fn unknown_tap_is_rejected() {
        let mut cfg = tiny(ModelKind::Hypercolumn);
        cfg.taps.tap_points = vec!["stem".into(), "layer7.0".into()];
        assert!(matches!(Model::<f32>::build(cfg, 0), Err(Error::Model(_))));
    }

    #[test]
    fn stage_outputs_halve() {
        let mut cfg = tiny(ModelKind::Hypercolumn);
        cfg.input_size = (64, 64);
        cfg.taps.tap_points = ["stem", "layer1.1", "layer2.1", "layer3.1", "layer4.1"].map(String::from).to_vec();
        let m = Model::<f32>::build(cfg, 0).unwrap();
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, false);
        let x = tape.constant(input(1, 64, 1));
        let (out, _) = m.forward_with_taps(&mut tape, &vars, x, BnMode::Eval).unwrap();
        let sizes: Vec<usize> = out.taps.iter().map(|(_, v)| tape.shape(*v).h()).collect();
        assert_eq!(sizes, vec![16, 16, 8, 4, 2]);
        let names: Vec<&str> = out.taps.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["stem", "layer1.1", "layer2.1", "layer3.1", "layer4.1"]);
    }

    #[test]
    fn rejects_non_divisible_input() {
        let m = Model::<f32>::build(tiny(ModelKind::Baseline), 0).unwrap();
        assert!(m.logits(&input(1, 40, 0)).is_err());
    }

    #[test]
    fn eval_is_pure_and_per_sample() {
        let m = Model::<f32>::build(tiny(ModelKind::Baseline), 2).unwrap();
        let x = input(1, 32, 3);
        let a = m.logits(&x).unwrap();
        let b = m.logits(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), Shape::new(1, 3, 1, 1));
        let mut doubled = x.data().to_vec();
        doubled.extend_from_slice(x.data());
        let d = m.logits(&Tensor::from_vec([2, 3, 32, 32], doubled).unwrap()).unwrap();
        assert_eq!(&d.data()[..3], a.data());
        assert_eq!(&d.data()[3..], a.data());
    }

    #[test]
    fn hypercolumn_logits_depend_on_tap_order() {
        let mut cfg = tiny(ModelKind::Hypercolumn);
        cfg.taps.tap_points = vec!["layer4.0".into(), "layer4.1".into()];
        let m = Model::<f64>::build(cfg, 4).unwrap();
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, false);
        let x = tape.constant(input(2, 32, 7).cast());
        let (out, _) = m.forward_with_taps(&mut tape, &vars, x, BnMode::Eval).unwrap();
        let straight = m.hypercolumn_forward(&mut tape, &vars, &out.taps).unwrap();
        let swapped: Vec<_> = out.taps.iter().rev().cloned().collect();
        let crossed = m.hypercolumn_forward(&mut tape, &vars, &swapped).unwrap();
        assert!(tape.value(straight).max_abs_diff(tape.value(crossed)) > 1e-9);
    }

    #[test]
    fn every_tap_reaches_the_logits() {
        let m = Model::<f64>::build(tiny(ModelKind::Hypercolumn), 8).unwrap();
        let x = input(2, 32, 9).cast();
        let reference = m.logits(&x).unwrap();
        for i in 0..m.config.taps.tap_points.len() {
            let mut cut = m.clone();
            cut.params.get_mut(&format!("head.tap{i}.weight")).unwrap().data_mut().fill(0.0);
            assert!(cut.logits(&x).unwrap().max_abs_diff(&reference) > 1e-9, "tap {i} has no effect");
        }
    }

    fn param_grads(m: &Model<f64>, x: &Tensor<f64>, labels: &[usize]) -> Vec<Tensor<f64>> {
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let out = m.forward(&mut tape, &vars, xv, BnMode::Eval).unwrap();
        let loss = tape.cross_entropy(out.logits, labels).unwrap();
        let mut g = tape.backward(loss).unwrap();
        vars.0.iter().map(|&v| g.take(v).unwrap()).collect()
    }

    #[test]
    fn gradients_accumulate_over_batch_halves() {
        for kind in [ModelKind::Baseline, ModelKind::Hypercolumn] {
            let m = Model::<f64>::build(tiny(kind), 3).unwrap();
            let x: Tensor<f64> = input(4, 32, 12).cast();
            let labels = [0, 2, 1, 2];
            let plane = 3 * 32 * 32;
            let half = |r: std::ops::Range<usize>| Tensor::from_vec([2, 3, 32, 32], x.data()[r.start * plane..r.end * plane].to_vec()).unwrap();
            let full = param_grads(&m, &x, &labels);
            let a = param_grads(&m, &half(0..2), &labels[..2]);
            let b = param_grads(&m, &half(2..4), &labels[2..]);
            for ((f, a), b) in full.iter().zip(&a).zip(&b) {
                for ((f, a), b) in f.data().iter().zip(a.data()).zip(b.data()) {
                    assert!((f - 0.5 * (a + b)).abs() <= 1e-6 * f.abs().max(1e-3), "{kind}");
                }
            }
        }
    }

    #[test]
    fn end_to_end_gradients() {
        for kind in [ModelKind::Baseline, ModelKind::Hypercolumn] {
            let (err, detail) = crate::verify::check_model_end_to_end(kind, 1, 40).unwrap();
            assert!(err <= crate::verify::END_TO_END_TOLERANCE, "{kind}: {err} {detail}");
        }
    }
}
