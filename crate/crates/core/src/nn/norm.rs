//! Per-channel batch normalization.

use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Learnable affine parameters plus running statistics of one batch-norm
/// layer. All tensors are `(1, c, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2dParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Scalar> BatchNorm2dParams<T> {
    pub fn new(channels: usize) -> Self {
        let ones = || Tensor::from_vec([1, channels, 1, 1], vec![T::one(); channels]).expect("shape");
        Self {
            gamma: ones(),
            beta: Tensor::zeros([1, channels, 1, 1]),
            running_mean: Tensor::zeros([1, channels, 1, 1]),
            running_var: ones(),
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

impl<T: Scalar> BatchNorm2dParams<T> {
    pub fn running(&self) -> BnRunning<'_, T> {
        BnRunning { mean: &self.running_mean, var: &self.running_var, momentum: self.momentum, epsilon: self.epsilon }
    }
}

/// Read-only view of the running statistics a batch-norm call consumes.
#[derive(Clone, Copy, Debug)]
pub struct BnRunning<'a, T> {
    pub mean: &'a Tensor<T>,
    pub var: &'a Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

/// Running statistics after a train-mode call.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

pub(crate) struct BatchNormCtx<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    mode: BnMode,
}

impl<T: Scalar> Tape<T> {
    /// Normalizes `x` per channel. `gamma`/`beta` are tape variables so they
    /// can be trained; running statistics are read from `p` and, in train
    /// mode, the updated statistics are returned rather than written back.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        p: BnRunning<'_, T>,
        mode: BnMode,
    ) -> Result<(Var, Option<RunningStats<T>>)> {
        for v in [x, gamma, beta] {
            self.check(v)?;
        }
        let s = self.shape(x);
        let c = s.c();
        let stat_shape = Shape::new(1, c, 1, 1);
        for (name, shape) in [
            ("gamma", self.shape(gamma)),
            ("beta", self.shape(beta)),
            ("running_mean", p.mean.shape()),
            ("running_var", p.var.shape()),
        ] {
            if shape != stat_shape {
                return Err(Error::invalid("batch_norm2d", format!("{name} has shape {shape}, expected {stat_shape}")));
            }
        }
        if !(p.epsilon > 0.0) || !(p.momentum > 0.0 && p.momentum <= 1.0) {
            return Err(Error::invalid("batch_norm2d", "epsilon must be > 0 and momentum in (0, 1]"));
        }
        let count = s.n() * s.plane();
        if mode == BnMode::Train && count < 2 {
            return Err(Error::invalid(
                "batch_norm2d",
                format!("train mode needs at least 2 values per channel, got {count}"),
            ));
        }
        let eps = T::from_f64(p.epsilon);
        let xv = self.value(x).data();
        let (mean, var): (Vec<T>, Vec<T>) = match mode {
            BnMode::Train => {
                let inv_count = T::one() / T::from_f64(count as f64);
                (0..c)
                    .map(|ch| {
                        let channel = || (0..s.n()).flat_map(move |i| xv[(i * c + ch) * s.plane()..(i * c + ch + 1) * s.plane()].iter().copied());
                        let m = channel().sum::<T>() * inv_count;
                        let v = channel().map(|e| (e - m) * (e - m)).sum::<T>() * inv_count;
                        (m, v)
                    })
                    .unzip()
            }
            BnMode::Eval => (p.mean.data().to_vec(), p.var.data().to_vec()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v.max(T::zero()) + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for (idx, &e) in xv.iter().enumerate() {
            let ch = (idx / s.plane()) % c;
            let h = (e - mean[ch]) * inv_std[ch];
            xhat.push(h);
            out.push(h * gv[ch] + bv[ch]);
        }
        let stats = (mode == BnMode::Train).then(|| {
            let m = T::from_f64(p.momentum);
            let blend = |run: &Tensor<T>, batch: &[T]| {
                let data = run.data().iter().zip(batch).map(|(&r, &b)| (T::one() - m) * r + m * b).collect();
                Tensor::from_vec(stat_shape, data).expect("shape")
            };
            RunningStats { mean: blend(p.mean, &mean), var: blend(p.var, &var) }
        });
        let value = Tensor::from_vec(s, out)?;
        let ctx = BatchNormCtx { x, gamma, beta, xhat, inv_std, mode };
        let y = self.push("batch_norm2d", value, &[x, gamma, beta], Op::BatchNorm(ctx))?;
        Ok((y, stats))
    }
}

pub(crate) fn backward<T: Scalar>(tape: &Tape<T>, ctx: &BatchNormCtx<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let s = tape.shape(ctx.x);
    let (c, plane) = (s.c(), s.plane());
    let gamma = tape.value(ctx.gamma).data();
    let mut sum_g = vec![T::zero(); c];
    let mut sum_g_xhat = vec![T::zero(); c];
    for (idx, (&gi, &h)) in g.iter().zip(&ctx.xhat).enumerate() {
        let ch = (idx / plane) % c;
        sum_g[ch] += gi;
        sum_g_xhat[ch] += gi * h;
    }
    let mut res = Vec::with_capacity(3);
    if tape.is_tracked(ctx.x) {
        let gx = match ctx.mode {
            BnMode::Eval => g
                .iter()
                .enumerate()
                .map(|(idx, &gi)| {
                    let ch = (idx / plane) % c;
                    gi * gamma[ch] * ctx.inv_std[ch]
                })
                .collect(),
            BnMode::Train => {
                let count = T::from_f64((s.n() * plane) as f64);
                g.iter()
                    .zip(&ctx.xhat)
                    .enumerate()
                    .map(|(idx, (&gi, &h))| {
                        let ch = (idx / plane) % c;
                        gamma[ch] * ctx.inv_std[ch] / count * (count * gi - sum_g[ch] - h * sum_g_xhat[ch])
                    })
                    .collect()
            }
        };
        res.push((ctx.x, gx));
    }
    if tape.is_tracked(ctx.gamma) {
        res.push((ctx.gamma, sum_g_xhat));
    }
    if tape.is_tracked(ctx.beta) {
        res.push((ctx.beta, sum_g));
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    fn run(x: &Tensor<f64>, p: &BatchNorm2dParams<f64>, mode: BnMode) -> (Tensor<f64>, Option<RunningStats<f64>>) {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(p.gamma.clone());
        let b = tape.constant(p.beta.clone());
        let (y, stats) = tape.batch_norm2d(xv, g, b, p.running(), mode).unwrap();
        (tape.value(y).clone(), stats)
    }

    #[test]
    fn eval_with_unit_stats_is_identity() {
        let x = Tensor::<f64>::create([2, 3, 4, 4], Fill::Uniform { seed: 1, lo: -3.0, hi: 3.0 }).unwrap();
        let mut p = BatchNorm2dParams::new(3);
        p.epsilon = 1e-12;
        let (y, stats) = run(&x, &p, BnMode::Eval);
        assert!(stats.is_none());
        assert!(y.max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn train_output_is_standardized() {
        let x = Tensor::<f64>::create([4, 2, 3, 3], Fill::Uniform { seed: 2, lo: 1.0, hi: 5.0 }).unwrap();
        let p = BatchNorm2dParams::new(2);
        let (y, _) = run(&x, &p, BnMode::Train);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4).flat_map(|n| (0..9).map(move |k| (n, k))).map(|(n, k)| y.get(n, ch, k / 3, k % 3)).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|e| (e - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-5 * 10.0, "variance {v}");
        }
    }

    #[test]
    fn momentum_one_makes_eval_match_train() {
        let x = Tensor::<f64>::create([3, 2, 4, 4], Fill::Uniform { seed: 11, lo: -1.0, hi: 2.0 }).unwrap();
        let mut p = BatchNorm2dParams::new(2);
        p.momentum = 1.0;
        p.gamma = Tensor::from_f64s([1, 2, 1, 1], &[1.5, 0.5]).unwrap();
        p.beta = Tensor::from_f64s([1, 2, 1, 1], &[0.1, -0.2]).unwrap();
        let (train_out, stats) = run(&x, &p, BnMode::Train);
        let stats = stats.unwrap();
        assert!(stats.var.data().iter().all(|&v| v >= 0.0));
        p.running_mean = stats.mean;
        p.running_var = stats.var;
        let (eval_out, _) = run(&x, &p, BnMode::Eval);
        assert!(train_out.max_abs_diff(&eval_out) < 1e-5);
    }

    #[test]
    fn train_requires_two_values() {
        let x = Tensor::<f64>::zeros([1, 2, 1, 1]);
        let p = BatchNorm2dParams::new(2);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(p.gamma.clone());
        let b = tape.constant(p.beta.clone());
        assert!(tape.batch_norm2d(xv, g, b, p.running(), BnMode::Train).is_err());
        assert!(tape.batch_norm2d(xv, g, b, p.running(), BnMode::Eval).is_ok());
    }

    #[test]
    fn constant_channel_is_guarded_by_epsilon() {
        let x = Tensor::<f32>::create([2, 1, 2, 2], Fill::Constant(4.0)).unwrap();
        let p = BatchNorm2dParams::<f32>::new(1);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(p.gamma.clone());
        let b = tape.constant(p.beta.clone());
        let (y, _) = tape.batch_norm2d(xv, g, b, p.running(), BnMode::Train).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
