//! SGD training with a single step decay, evaluation, and resumable state.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::data::{batch_iter, ImageSet, Normalization};
use crate::error::{Error, Result};
use crate::model::{Model, ParamSet};
use crate::nn::{argmax_rows, BnMode};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_epoch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr0: 0.001,
            decay_factor: 0.1,
            decay_epoch: 24,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid("train config", msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay_factor must be in (0, 1]");
        }
        if self.decay_epoch > self.epochs {
            return bad("decay_epoch must not exceed epochs");
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return bad("lr0 must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must be in [0, 1) and weight_decay >= 0");
        }
        Ok(())
    }
}

/// Learning rate of a 0-based epoch: `lr0` before `decay_epoch`,
/// `lr0 · decay_factor` from then on.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.decay_epoch {
        cfg.lr0
    } else {
        cfg.lr0 * cfg.decay_factor
    }
}

/// One SGD step with momentum and L2 weight decay:
/// `v ← μ·v + g + λ·p`, then `p ← p − lr·v`.
pub fn sgd_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    velocity: &mut ParamSet<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::invalid("sgd_step", "parameter, gradient and momentum counts differ"));
    }
    for ((name, p), g) in params.names().iter().zip(params.tensors()).zip(grads) {
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch { op: "sgd_step", lhs: p.shape(), rhs: g.shape() });
        }
        if !g.is_finite() {
            return Err(Error::invalid("sgd_step", format!("non-finite gradient for `{name}`")));
        }
    }
    let (lr, mu, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    for ((p, v), g) in params.tensors_mut().iter_mut().zip(velocity.tensors_mut()).zip(grads) {
        for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = mu * *vi + gi + wd * *pi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model<f32>,
    pub velocity: ParamSet<f32>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub shuffle_seed: u64,
    pub split_seed: u64,
    pub holdout: usize,
    pub normalization: Normalization,
}

impl TrainState {
    pub fn new(model: Model<f32>, shuffle_seed: u64, split_seed: u64, holdout: usize, normalization: Normalization) -> Self {
        let velocity = model.params.zeros_like();
        Self { model, velocity, epoch: 0, shuffle_seed, split_seed, holdout, normalization }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based number of the epoch just completed.
    pub epoch: usize,
    pub lr: f64,
    /// Running averages over the epoch's train-mode batches.
    pub train: Evaluation,
    pub test: Option<Evaluation>,
}

/// Eval-mode loss and top-1 accuracy. Ties in the logits go to the lowest
/// class index.
pub fn evaluate(model: &Model<f32>, set: &ImageSet, norm: &Normalization, batch_size: usize) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(Error::invalid("evaluate", "no samples to evaluate"));
    }
    let (mut loss, mut correct) = (0.0f64, 0usize);
    for batch in set.batches_in_order(batch_size, norm)? {
        let (images, labels) = batch?;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let x = tape.constant(images);
        let out = model.forward(&mut tape, &vars, x, BnMode::Eval)?;
        let ce = tape.cross_entropy(out.logits, &labels)?;
        loss += tape.value(ce).item() as f64 * labels.len() as f64;
        correct += count_correct(tape.value(out.logits), &labels);
    }
    Ok(Evaluation { loss: loss / set.len() as f64, accuracy: correct as f64 / set.len() as f64 })
}

fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Runs one epoch of train-mode SGD over `train` and returns the running
/// loss and accuracy.
pub fn train_epoch(state: &mut TrainState, train: &ImageSet, cfg: &TrainConfig) -> Result<Evaluation> {
    let epoch = state.epoch;
    let lr = lr_at(epoch, cfg);
    let fail = |e: Error| Error::Training { epoch: epoch + 1, msg: e.to_string() };
    let (mut loss_sum, mut correct) = (0.0f64, 0usize);
    let norm = state.normalization;
    for batch in batch_iter(train, &norm, cfg.batch_size, state.shuffle_seed, epoch)? {
        let (images, labels) = batch?;
        let model = &mut state.model;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let x = tape.constant(images);
        let out = model.forward(&mut tape, &vars, x, BnMode::Train).map_err(fail)?;
        let loss = tape.cross_entropy(out.logits, &labels).map_err(fail)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(fail(Error::NonFinite { op: "cross_entropy" }));
        }
        loss_sum += value as f64 * labels.len() as f64;
        correct += count_correct(tape.value(out.logits), &labels);
        let mut grads = tape.backward(loss).map_err(fail)?;
        let grads: Vec<Tensor<f32>> = vars
            .0
            .iter()
            .zip(model.params.tensors())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        sgd_step(&mut model.params, &grads, &mut state.velocity, lr, cfg.momentum, cfg.weight_decay).map_err(fail)?;
        model.apply_bn_updates(out.bn_updates);
    }
    state.epoch += 1;
    let n = train.len().max(1) as f64;
    Ok(Evaluation { loss: loss_sum / n, accuracy: correct as f64 / n })
}

/// Trains from `state.epoch` up to `cfg.epochs`, evaluating on `test`
/// (when non-empty) after every epoch. `on_epoch` sees each epoch's metrics
/// and the state as it stands after that epoch.
pub fn train_model(
    state: &mut TrainState,
    train: &ImageSet,
    test: &ImageSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &TrainState) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let mut metrics = Vec::new();
    while state.epoch < cfg.epochs {
        let lr = lr_at(state.epoch, cfg);
        let train_eval = train_epoch(state, train, cfg)?;
        let test_eval = if test.is_empty() {
            None
        } else {
            Some(evaluate(&state.model, test, &state.normalization, cfg.batch_size)?)
        };
        let m = EpochMetrics { epoch: state.epoch, lr, train: train_eval, test: test_eval };
        on_epoch(&m, state)?;
        metrics.push(m);
    }
    Ok(metrics)
}

/// Metrics CSV with rows `epoch,split,loss,accuracy`.
pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,split,loss,accuracy\n");
    for m in metrics {
        out.push_str(&format!("{},train,{},{}\n", m.epoch, m.train.loss, m.train.accuracy));
        if let Some(t) = m.test {
            out.push_str(&format!("{},test,{},{}\n", m.epoch, t.loss, t.accuracy));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    #[test]
    fn default_schedule() {
        let cfg = TrainConfig::default();
        let trace: Vec<f64> = (0..cfg.epochs).map(|e| lr_at(e, &cfg)).collect();
        let mut expected = vec![0.001; 24];
        expected.extend([0.001 * 0.1; 6]);
        assert_eq!(trace, expected);
        assert_eq!(lr_at(23, &cfg), 0.001);
        assert_eq!(lr_at(24, &cfg), 0.0001);
        let flat = TrainConfig { decay_factor: 1.0, ..cfg };
        assert!((0..30).all(|e| lr_at(e, &flat) == 0.001));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { decay_factor: 0.0, ..Default::default() },
            TrainConfig { decay_factor: 1.5, ..Default::default() },
            TrainConfig { decay_epoch: 31, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    fn one_param(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_f64s([1, 1, 1, 2], &[v, -v]).unwrap());
        p
    }

    #[test]
    fn vanilla_sgd_and_fixed_point() {
        let mut p = one_param(1.0);
        let mut v = p.zeros_like();
        let g = vec![Tensor::from_f64s([1, 1, 1, 2], &[0.5, 2.0]).unwrap()];
        sgd_step(&mut p, &g, &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0 - 0.05, -1.0 - 0.2]);

        let mut p = one_param(3.0);
        let before = p.clone();
        let zero = vec![Tensor::zeros([1, 1, 1, 2])];
        sgd_step(&mut p, &zero, &mut v.zeros_like(), 0.1, 0.9, 0.0).unwrap();
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn momentum_unrolls() {
        let mut p = one_param(0.0);
        let mut v = p.zeros_like();
        let g = vec![Tensor::from_f64s([1, 1, 1, 2], &[1.0, -2.0]).unwrap()];
        for _ in 0..2 {
            sgd_step(&mut p, &g, &mut v, 1.0, 0.9, 0.0).unwrap();
        }
        // total update g + (0.9 g + g)
        let w = p.get("w").unwrap().data();
        assert!((w[0] + 2.9).abs() < 1e-12 && (w[1] - 5.8).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_and_bad_gradients() {
        let mut p = one_param(2.0);
        let mut v = p.zeros_like();
        let zero = vec![Tensor::zeros([1, 1, 1, 2])];
        sgd_step(&mut p, &zero, &mut v, 0.5, 0.0, 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.9, -1.9]);
        let nan = vec![Tensor::from_f64s([1, 1, 1, 2], &[f64::NAN, 0.0]).unwrap()];
        assert!(sgd_step(&mut p, &nan, &mut v, 0.5, 0.0, 0.0).unwrap_err().to_string().contains("`w`"));
        let wrong = vec![Tensor::create([1, 1, 2, 1], Fill::Zeros).unwrap()];
        assert!(sgd_step(&mut p, &wrong, &mut v, 0.5, 0.0, 0.0).is_err());
    }
}
