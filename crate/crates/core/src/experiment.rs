//! One training run per seed, as driven by a [`RunConfig`].

use crate::config::RunConfig;
use crate::data::{split_leave_n_contexts, Dataset, DomainSplit, ImageSet, Normalization};
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind};
use crate::train::{evaluate, train_model, EpochMetrics, Evaluation, TrainState};

/// The split of one run and its decoded images.
pub struct Prepared {
    pub split: DomainSplit,
    pub train: ImageSet,
    pub test: ImageSet,
    pub normalization: Normalization,
}

/// Splits `ds` with the run's holdout and split seed and loads both sides.
/// Normalization statistics come from the training side only.
pub fn prepare(cfg: &RunConfig, ds: &Dataset, split_seed: u64, holdout: usize) -> Result<Prepared> {
    if ds.num_classes() != cfg.data.num_classes {
        return Err(Error::invalid(
            "prepare",
            format!("dataset has {} classes but data.num_classes={}", ds.num_classes(), cfg.data.num_classes),
        ));
    }
    let split = split_leave_n_contexts(ds, holdout, split_seed)?;
    let train = ImageSet::load(ds, &split.train_indices(ds))?;
    let test = ImageSet::load(ds, &split.test_indices(ds))?;
    if !train.is_empty() && (train.height, train.width) != cfg.data.image_size {
        return Err(Error::invalid(
            "prepare",
            format!("images are {}x{} but data.image_size={:?}", train.height, train.width, cfg.data.image_size),
        ));
    }
    let normalization = Normalization::fit(&train)?;
    Ok(Prepared { split, train, test, normalization })
}

pub struct SeedRun {
    pub seed: u64,
    pub metrics: Vec<EpochMetrics>,
    pub state: TrainState,
    /// Eval-mode accuracy on the training split after the last epoch.
    pub final_train: Evaluation,
    pub final_test: Option<Evaluation>,
}

/// Fresh state for `seed`: model initialized from the seed, shuffling keyed
/// by the seed.
pub fn initial_state(cfg: &RunConfig, seed: u64, prepared: &Prepared) -> Result<TrainState> {
    let model = Model::build(cfg.model_config(), seed)?;
    Ok(TrainState::new(model, seed, prepared.split.seed, prepared.split.holdout, prepared.normalization))
}

/// Continues `state` to `cfg.train.epochs` and evaluates the result.
pub fn run_seed(
    cfg: &RunConfig,
    prepared: &Prepared,
    mut state: TrainState,
    on_epoch: impl FnMut(&EpochMetrics, &TrainState) -> Result<()>,
) -> Result<SeedRun> {
    let train_cfg = cfg.train_config(state.shuffle_seed);
    let metrics = train_model(&mut state, &prepared.train, &prepared.test, &train_cfg, on_epoch)?;
    let norm = state.normalization;
    let final_train = evaluate(&state.model, &prepared.train, &norm, train_cfg.batch_size)?;
    let final_test = if prepared.test.is_empty() {
        None
    } else {
        Some(evaluate(&state.model, &prepared.test, &norm, train_cfg.batch_size)?)
    };
    Ok(SeedRun { seed: state.shuffle_seed, metrics, state, final_train, final_test })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-seed final accuracies plus mean and standard deviation rows.
pub fn summary_csv(kind: ModelKind, runs: &[(u64, f64, Option<f64>)]) -> String {
    let mut out = String::from("model,seed,train_accuracy,test_accuracy\n");
    for &(seed, train, test) in runs {
        let test = test.map_or_else(String::new, |t| t.to_string());
        out.push_str(&format!("{kind},{seed},{train},{test}\n"));
    }
    let train: Vec<f64> = runs.iter().map(|r| r.1).collect();
    let test: Vec<f64> = runs.iter().filter_map(|r| r.2).collect();
    let (tm, ts) = mean_std(&train);
    let (em, es) = mean_std(&test);
    out.push_str(&format!("{kind},mean,{tm},{em}\n{kind},std,{ts},{es}\n"));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    }

    #[test]
    fn summary_rows() {
        let s = summary_csv(ModelKind::Baseline, &[(0, 1.0, Some(0.5)), (1, 0.9, Some(0.7))]);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[3].starts_with("baseline,mean,0.95,0.6"));
    }
}
